//! Exact rational helpers shared by the analytical models.

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Exact rational used for every cycle and bandwidth formula.
pub type Exact = Ratio<i128>;

pub fn int(v: impl Into<i128>) -> Exact {
    Exact::from_integer(v.into())
}

pub fn ratio(num: i128, den: i128) -> Exact {
    Exact::new(num, den)
}

pub fn ceil(v: &Exact) -> i128 {
    v.ceil().to_integer()
}

pub fn to_f64(v: &Exact) -> f64 {
    // Ratio::to_f64 goes through big integers and rounds correctly.
    v.to_f64()
        .unwrap_or_else(|| *v.numer() as f64 / *v.denom() as f64)
}

/// `p/q` rendering (or plain `p` for integers). Parsed back by [`parse`].
pub fn render(v: &Exact) -> String {
    if v.is_integer() {
        v.numer().to_string()
    } else {
        format!("{}/{}", v.numer(), v.denom())
    }
}

pub fn parse(s: &str) -> Option<Exact> {
    let s = s.trim();
    match s.split_once('/') {
        Some((n, d)) => {
            let n: i128 = n.trim().parse().ok()?;
            let d: i128 = d.trim().parse().ok()?;
            if d.is_zero() {
                None
            } else {
                Some(Exact::new(n, d))
            }
        }
        None => s.parse::<i128>().ok().map(Exact::from_integer),
    }
}

pub fn max_of<'a>(values: impl IntoIterator<Item = &'a Exact>) -> Exact {
    values
        .into_iter()
        .fold(Exact::zero(), |acc, v| if *v > acc { *v } else { acc })
}

pub fn lcm_all(values: impl IntoIterator<Item = i128>) -> i128 {
    values.into_iter().fold(1, |acc, v| acc.lcm(&v))
}

/// Serde adapter storing an [`Exact`] as its `p/q` string.
pub mod serde_exact {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Exact, s: S) -> Result<S::Ok, S::Error> {
        render(v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Exact, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad rational `{s}`")))
    }
}
