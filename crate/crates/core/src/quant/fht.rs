//! Fast Walsh–Hadamard transform (natural/Sylvester ordering).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Scale by `1/√n`, making the transform orthonormal.
    Orthonormal,
    None,
}

/// In-place butterfly transform; `n log n` additions.
pub fn fht_in_place(x: &mut [f64], norm: Normalization) -> Result<()> {
    let n = x.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::arg("x", format!("length {n} is not a power of two")));
    }
    let mut h = 1;
    while h < n {
        for block in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
    if norm == Normalization::Orthonormal {
        let s = 1.0 / (n as f64).sqrt();
        x.iter_mut().for_each(|v| *v *= s);
    }
    Ok(())
}

pub fn fht(x: &[f64], norm: Normalization) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    fht_in_place(&mut out, norm)?;
    Ok(out)
}
