//! Integer quantization suite.
//!
//! A real tensor `x` is represented as `s · q + b`, where `q` is an integer
//! payload and `(s, b)` are a per-group scale and zero offset:
//!
//! ```text
//! symmetric:   s = max|x| / (2^(N-1) - 1),   b = 0,      q ∈ [-(2^(N-1)-1), 2^(N-1)-1]
//! asymmetric:  s = (max - min) / (2^N - 1),  b = min,    q ∈ [0, 2^N - 1]
//! q = clamp(round_half_even((x - b) / s))
//! ```
//!
//! Groups are the whole tensor (per-tensor), each row (per-token) or each
//! column (per-channel; weights are stored `[d_in, d_out]` so a column is an
//! output channel).

pub mod fht;
pub mod tensorfile;

use ndarray::Array2;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::config::{Granularity, QuantBits, QuantMode, QuantSpec, Symmetry};
use crate::error::{Error, Result};

pub use fht::{fht, fht_in_place, Normalization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: QuantBits,
    pub symmetry: Symmetry,
    pub granularity: Granularity,
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
}

impl QuantParams {
    /// Integer range `[lo, hi]` of the payload.
    pub fn range(&self) -> (i32, i32) {
        int_range(self.bits, self.symmetry)
    }

    pub fn groups_for(granularity: Granularity, shape: (usize, usize)) -> usize {
        match granularity {
            Granularity::PerTensor => 1,
            Granularity::PerToken => shape.0,
            Granularity::PerChannel => shape.1,
        }
    }

    #[inline]
    pub fn group_of(&self, row: usize, col: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerToken => row,
            Granularity::PerChannel => col,
        }
    }

    pub fn validate(&self, shape: (usize, usize)) -> Result<()> {
        let groups = Self::groups_for(self.granularity, shape);
        if self.scales.len() != groups || self.zeros.len() != groups {
            return Err(Error::Shape(format!(
                "{:?} on a {}x{} tensor needs {groups} groups, params carry {} scales / {} zeros",
                self.granularity,
                shape.0,
                shape.1,
                self.scales.len(),
                self.zeros.len()
            )));
        }
        for (g, (&s, &b)) in self.scales.iter().zip(&self.zeros).enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::validation(
                    format!("scales[{g}]"),
                    format!("must be finite and > 0, got {s}"),
                ));
            }
            if !b.is_finite() {
                return Err(Error::validation(format!("zeros[{g}]"), "must be finite"));
            }
            if self.symmetry == Symmetry::Symmetric && b != 0.0 {
                return Err(Error::validation(
                    format!("zeros[{g}]"),
                    "symmetric zero must be 0",
                ));
            }
        }
        Ok(())
    }
}

pub fn int_range(bits: QuantBits, symmetry: Symmetry) -> (i32, i32) {
    let n = bits.bits();
    match symmetry {
        Symmetry::Symmetric => {
            let m = (1 << (n - 1)) - 1;
            (-m, m)
        }
        Symmetry::Asymmetric => (0, (1 << n) - 1),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    /// Row-major payload.
    pub q: Vec<i32>,
    pub shape: (usize, usize),
    pub params: QuantParams,
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.shape.0
    }

    pub fn cols(&self) -> usize {
        self.shape.1
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> i32 {
        self.q[r * self.shape.1 + c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.len() != self.shape.0 * self.shape.1 {
            return Err(Error::Shape(format!(
                "payload of {} elements for shape {:?}",
                self.q.len(),
                self.shape
            )));
        }
        self.params.validate(self.shape)?;
        let (lo, hi) = self.params.range();
        if let Some(i) = self.q.iter().position(|&v| v < lo || v > hi) {
            return Err(Error::validation(
                "q",
                format!("element {i} = {} outside [{lo}, {hi}]", self.q[i]),
            ));
        }
        Ok(())
    }
}

/// Per-output-channel data the dequantizer needs for a symmetric weight:
/// the channel scales and the column sums of the integer weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSidecar {
    pub scales: Vec<f64>,
    pub col_sums: Vec<i64>,
}

impl WeightSidecar {
    pub fn from_weights(w: &QuantizedTensor) -> Result<Self> {
        if w.params.symmetry != Symmetry::Symmetric {
            return Err(Error::validation(
                "symmetry",
                "weight sidecar requires symmetric weights",
            ));
        }
        let (rows, cols) = w.shape;
        let mut col_sums = vec![0i64; cols];
        for r in 0..rows {
            for (c, sum) in col_sums.iter_mut().enumerate() {
                *sum += w.at(r, c) as i64;
            }
        }
        let scales = (0..cols)
            .map(|c| w.params.scales[w.params.group_of(0, c)])
            .collect();
        Ok(WeightSidecar { scales, col_sums })
    }

    pub fn check_against(&self, w: &QuantizedTensor) -> Result<()> {
        let expect = Self::from_weights(w)?;
        if self.col_sums.len() != expect.col_sums.len() {
            return Err(Error::Shape(format!(
                "sidecar covers {} channels, weight has {}",
                self.col_sums.len(),
                expect.col_sums.len()
            )));
        }
        if let Some(c) = (0..self.col_sums.len()).find(|&c| self.col_sums[c] != expect.col_sums[c])
        {
            return Err(Error::validation(
                format!("col_sums[{c}]"),
                format!(
                    "stored {} but weights sum to {}",
                    self.col_sums[c], expect.col_sums[c]
                ),
            ));
        }
        if let Some(c) = (0..self.scales.len()).find(|&c| self.scales[c] != expect.scales[c]) {
            return Err(Error::validation(
                format!("scales[{c}]"),
                "does not match the weight's scale",
            ));
        }
        Ok(())
    }
}

fn group_params(values: &[f64], bits: QuantBits, symmetry: Symmetry) -> Result<(f64, f64)> {
    match symmetry {
        Symmetry::Symmetric => {
            let amax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if amax == 0.0 {
                // All-zero group: unit scale, every element quantizes to 0.
                return Ok((1.0, 0.0));
            }
            let (_, hi) = int_range(bits, symmetry);
            Ok((amax / hi as f64, 0.0))
        }
        Symmetry::Asymmetric => {
            let (mn, mx) = values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                });
            if mx == mn {
                return Err(Error::arg(
                    "x",
                    format!("asymmetric group has max == min == {mx}; scale would be zero"),
                ));
            }
            let (_, hi) = int_range(bits, symmetry);
            Ok(((mx - mn) / hi as f64, mn))
        }
    }
}

/// Scale and zero per group. Dynamic mode measures `x`; static mode returns
/// the supplied precomputed parameters after checking they fit `x`.
pub fn compute_quant_params(
    x: &Array2<f64>,
    spec: &QuantSpec,
    static_params: Option<&QuantParams>,
) -> Result<QuantParams> {
    let shape = x.dim();
    if shape.0 == 0 || shape.1 == 0 {
        return Err(Error::arg("x", "tensor is empty"));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::arg("x", format!("non-finite element {v}")));
    }
    if spec.mode == QuantMode::Static {
        let p = static_params.ok_or_else(|| {
            Error::arg(
                "static_params",
                "static quantization requires precomputed scale/zero",
            )
        })?;
        if p.bits != spec.bits || p.symmetry != spec.symmetry || p.granularity != spec.granularity {
            return Err(Error::arg(
                "static_params",
                "parameters were computed for a different spec",
            ));
        }
        p.validate(shape)?;
        return Ok(p.clone());
    }
    let groups = QuantParams::groups_for(spec.granularity, shape);
    let mut scales = Vec::with_capacity(groups);
    let mut zeros = Vec::with_capacity(groups);
    for g in 0..groups {
        let values: Vec<f64> = match spec.granularity {
            Granularity::PerTensor => x.iter().copied().collect(),
            Granularity::PerToken => x.row(g).to_vec(),
            Granularity::PerChannel => x.column(g).to_vec(),
        };
        let (s, b) = group_params(&values, spec.bits, spec.symmetry)?;
        scales.push(s);
        zeros.push(b);
    }
    Ok(QuantParams {
        bits: spec.bits,
        symmetry: spec.symmetry,
        granularity: spec.granularity,
        scales,
        zeros,
    })
}

#[inline]
fn quantize_scalar(x: f64, s: f64, b: f64, lo: i32, hi: i32) -> i32 {
    let v = ((x - b) / s).round_ties_even();
    v.clamp(lo as f64, hi as f64) as i32
}

/// `q = clamp(round_half_even((x - b) / s))`.
pub fn quantize(x: &Array2<f64>, params: &QuantParams) -> Result<QuantizedTensor> {
    let shape = x.dim();
    params.validate(shape)?;
    let (lo, hi) = params.range();
    let mut q = Vec::with_capacity(shape.0 * shape.1);
    for ((r, c), &v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::arg("x", format!("non-finite element at ({r}, {c})")));
        }
        let g = params.group_of(r, c);
        q.push(quantize_scalar(
            v,
            params.scales[g],
            params.zeros[g],
            lo,
            hi,
        ));
    }
    Ok(QuantizedTensor {
        q,
        shape,
        params: params.clone(),
    })
}

/// Dynamic quantization in one step.
pub fn quantize_dynamic(x: &Array2<f64>, spec: &QuantSpec) -> Result<QuantizedTensor> {
    let mut dynamic = *spec;
    dynamic.mode = QuantMode::Dynamic;
    let p = compute_quant_params(x, &dynamic, None)?;
    quantize(x, &p)
}

/// `s · q + b` elementwise.
pub fn dequantize(qt: &QuantizedTensor) -> Array2<f64> {
    let p = &qt.params;
    Array2::from_shape_fn(qt.shape, |(r, c)| {
        let g = p.group_of(r, c);
        p.scales[g] * qt.at(r, c) as f64 + p.zeros[g]
    })
}

pub fn rational(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite value")
}

/// Exact reconstruction, row-major.
pub fn dequantize_exact(qt: &QuantizedTensor) -> Vec<BigRational> {
    let p = &qt.params;
    let scales: Vec<BigRational> = p.scales.iter().map(|&s| rational(s)).collect();
    let zeros: Vec<BigRational> = p.zeros.iter().map(|&b| rational(b)).collect();
    let mut out = Vec::with_capacity(qt.q.len());
    for r in 0..qt.rows() {
        for c in 0..qt.cols() {
            let g = p.group_of(r, c);
            out.push(&scales[g] * BigInt::from(qt.at(r, c)) + &zeros[g]);
        }
    }
    out
}

fn check_fused_operands(
    act: &QuantizedTensor,
    w: &QuantizedTensor,
    sidecar: &WeightSidecar,
) -> Result<()> {
    if act.cols() != w.rows() {
        return Err(Error::Shape(format!(
            "activation is {}x{}, weight is {}x{}",
            act.rows(),
            act.cols(),
            w.rows(),
            w.cols()
        )));
    }
    if act.params.granularity == Granularity::PerChannel {
        return Err(Error::validation(
            "act.granularity",
            "activations are per-token or per-tensor",
        ));
    }
    if w.params.granularity == Granularity::PerToken {
        return Err(Error::validation(
            "w.granularity",
            "weights are per-channel or per-tensor",
        ));
    }
    if w.params.symmetry != Symmetry::Symmetric {
        return Err(Error::validation(
            "w.symmetry",
            "the fused dequantizer requires symmetric weights",
        ));
    }
    sidecar.check_against(w)
}

/// Integer GEMM with the dequantizer's zero-offset correction:
///
/// ```text
/// Y[t,o] = s_x[t]·s_w[o]·Σ_k q_x[t,k]·q_w[k,o] + b_x[t]·s_w[o]·colsum_w[o]
/// ```
///
/// Dot products accumulate in `i64`; the two scale terms are applied in f64.
pub fn fused_int_matmul(
    act: &QuantizedTensor,
    w: &QuantizedTensor,
    sidecar: &WeightSidecar,
) -> Result<Array2<f64>> {
    check_fused_operands(act, w, sidecar)?;
    let (t_n, k_n, o_n) = (act.rows(), act.cols(), w.cols());
    let mut y = Array2::zeros((t_n, o_n));
    for t in 0..t_n {
        let gx = act.params.group_of(t, 0);
        let (sx, bx) = (act.params.scales[gx], act.params.zeros[gx]);
        let row = &act.q[t * k_n..(t + 1) * k_n];
        for o in 0..o_n {
            let dot: i64 = row
                .iter()
                .enumerate()
                .map(|(k, &qx)| qx as i64 * w.at(k, o) as i64)
                .sum();
            let sw = sidecar.scales[o];
            y[[t, o]] = sx * sw * dot as f64 + bx * sw * sidecar.col_sums[o] as f64;
        }
    }
    Ok(y)
}

/// [`fused_int_matmul`] evaluated exactly; row-major `[tokens, d_out]`.
pub fn fused_int_matmul_exact(
    act: &QuantizedTensor,
    w: &QuantizedTensor,
    sidecar: &WeightSidecar,
) -> Result<Vec<BigRational>> {
    check_fused_operands(act, w, sidecar)?;
    let (t_n, k_n, o_n) = (act.rows(), act.cols(), w.cols());
    let sw: Vec<BigRational> = sidecar.scales.iter().map(|&s| rational(s)).collect();
    let mut y = Vec::with_capacity(t_n * o_n);
    for t in 0..t_n {
        let gx = act.params.group_of(t, 0);
        let sx = rational(act.params.scales[gx]);
        let bx = rational(act.params.zeros[gx]);
        let row = &act.q[t * k_n..(t + 1) * k_n];
        for o in 0..o_n {
            let dot: i64 = row
                .iter()
                .enumerate()
                .map(|(k, &qx)| qx as i64 * w.at(k, o) as i64)
                .sum();
            let mut v = &sx * &sw[o] * BigInt::from(dot);
            if !bx.is_zero() {
                v += &bx * &sw[o] * BigInt::from(sidecar.col_sums[o]);
            }
            y.push(v);
        }
    }
    Ok(y)
}

/// Nearest f64 to an exact value.
pub fn to_f64(v: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    v.to_f64().expect("representable")
}

/// Packs INT4 payloads two per byte, low nibble first. Signed values are
/// stored as 4-bit two's complement.
pub fn pack_int4(q: &[i32]) -> Vec<u8> {
    q.chunks(2)
        .map(|pair| {
            let lo = (pair[0] & 0xF) as u8;
            let hi = pair.get(1).map_or(0, |v| (v & 0xF) as u8);
            lo | (hi << 4)
        })
        .collect()
}

pub fn unpack_int4(bytes: &[u8], len: usize, signed: bool) -> Vec<i32> {
    let nib = |n: u8| -> i32 {
        if signed && n & 0x8 != 0 {
            n as i32 - 16
        } else {
            n as i32
        }
    };
    let mut out = Vec::with_capacity(len);
    for &b in bytes {
        out.push(nib(b & 0xF));
        out.push(nib(b >> 4));
    }
    out.truncate(len);
    out
}

/// Error statistics of a quantize/dequantize round trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTripStats {
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    /// Largest `|x - x̂| / (s/2)` over all elements; at most 1 for in-range input.
    pub max_error_over_half_step: f64,
}

pub fn round_trip_stats(x: &Array2<f64>, qt: &QuantizedTensor) -> RoundTripStats {
    let recon = dequantize(qt);
    let mut max_abs: f64 = 0.0;
    let mut sum = 0.0;
    let mut max_ratio: f64 = 0.0;
    for ((r, c), &v) in x.indexed_iter() {
        let e = (v - recon[[r, c]]).abs();
        let s = qt.params.scales[qt.params.group_of(r, c)];
        max_abs = max_abs.max(e);
        max_ratio = max_ratio.max(e / (s / 2.0));
        sum += e;
    }
    RoundTripStats {
        max_abs_error: max_abs,
        mean_abs_error: sum / x.len().max(1) as f64,
        max_error_over_half_step: max_ratio,
    }
}
