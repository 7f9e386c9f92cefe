//! Functional reference kernels for a Llama-family decoder at desk scale.
//!
//! Each kernel has a float path (f64, optionally rounded to f32 after every
//! op) and a quantized path that follows the hardware's integer datapath:
//! INT4 weights with dynamic per-token INT4 activations on the linear layers,
//! and static INT8 operands for the two attention matmuls.

mod attention;
mod model;

pub use attention::{gqa_attention, probe, AttnQuant, KvCache};
pub use model::{
    decoder_block_forward, BlockWeights, LinearWeight, Model, ModelWeights, StepOutput,
};

use ndarray::Array2;

use crate::config::{QuantMode, QuantSpec, Symmetry};
use crate::error::{Error, Result};
use crate::quant::{self, QuantParams, QuantizedTensor};

/// How the integer path's final scaling is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arith {
    /// f64 arithmetic.
    Float,
    /// Exact rationals, rounded once to the nearest f64.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPath {
    Float,
    /// f64 arithmetic with every kernel output rounded to f32.
    Float32,
    Quantized(Arith),
}

impl ExecPath {
    pub fn is_quantized(self) -> bool {
        matches!(self, ExecPath::Quantized(_))
    }

    pub(crate) fn round(self, mut x: Array2<f64>) -> Array2<f64> {
        if self == ExecPath::Float32 {
            x.mapv_inplace(|v| v as f32 as f64);
        }
        x
    }
}

/// Dynamic per-token activation quantization. A constant row (where
/// max == min) gets scale 1 and zero equal to the constant, so it
/// reconstructs exactly.
pub fn quantize_activation(x: &Array2<f64>, spec: &QuantSpec) -> Result<QuantizedTensor> {
    let mut dynamic = *spec;
    dynamic.mode = QuantMode::Dynamic;
    let rows = x.nrows();
    let mut scales = Vec::with_capacity(rows);
    let mut zeros = Vec::with_capacity(rows);
    match quant::compute_quant_params(x, &dynamic, None) {
        Ok(p) => return quant::quantize(x, &p),
        Err(Error::InvalidArgument { .. }) if spec.symmetry == Symmetry::Asymmetric => {
            for r in 0..rows {
                let row = x.row(r).to_owned().insert_axis(ndarray::Axis(0));
                match quant::compute_quant_params(&row, &dynamic, None) {
                    Ok(p) => {
                        scales.push(p.scales[0]);
                        zeros.push(p.zeros[0]);
                    }
                    Err(_) => {
                        scales.push(1.0);
                        zeros.push(row[[0, 0]]);
                    }
                }
            }
        }
        Err(e) => return Err(e),
    }
    let params = QuantParams {
        bits: spec.bits,
        symmetry: spec.symmetry,
        granularity: spec.granularity,
        scales,
        zeros,
    };
    quant::quantize(x, &params)
}

/// `x · w` for `x: [tokens, d_in]`. The quantized path quantizes `x`
/// per token (INT4, asymmetric) and runs the fused integer GEMM against the
/// weight's INT4 payload and sidecar.
pub fn linear_forward(x: &Array2<f64>, w: &LinearWeight, path: ExecPath) -> Result<Array2<f64>> {
    if x.ncols() != w.float.nrows() {
        return Err(Error::Shape(format!(
            "linear input has {} features, weight expects {}",
            x.ncols(),
            w.float.nrows()
        )));
    }
    match path {
        ExecPath::Float => Ok(x.dot(&w.float)),
        ExecPath::Float32 => Ok(path.round(x.dot(&w.float))),
        ExecPath::Quantized(arith) => {
            let (wq, sidecar) = w.quantized.as_ref().ok_or_else(|| {
                Error::validation("weights", "quantized path needs quantized weights")
            })?;
            let act = quantize_activation(x, &QuantSpec::q3_linear_activation())?;
            match arith {
                Arith::Float => quant::fused_int_matmul(&act, wq, sidecar),
                Arith::Exact => {
                    let y = quant::fused_int_matmul_exact(&act, wq, sidecar)?;
                    Ok(Array2::from_shape_vec(
                        (x.nrows(), wq.cols()),
                        y.iter().map(quant::to_f64).collect(),
                    )
                    .expect("shape"))
                }
            }
        }
    }
}

/// Rotary embedding on `x: [tokens, n_heads·head_dim]`, rotating adjacent
/// pairs `(2i, 2i+1)` of every head by `pos · theta^(-2i/head_dim)`.
pub fn rope(x: &mut Array2<f64>, positions: &[usize], head_dim: usize, theta: f64) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::arg(
            "head_dim",
            format!("{head_dim} must be even and > 0"),
        ));
    }
    if !x.ncols().is_multiple_of(head_dim) {
        return Err(Error::Shape(format!(
            "{} features is not a multiple of head_dim {head_dim}",
            x.ncols()
        )));
    }
    if positions.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "{} positions for {} tokens",
            positions.len(),
            x.nrows()
        )));
    }
    let heads = x.ncols() / head_dim;
    for (t, &pos) in positions.iter().enumerate() {
        for i in 0..head_dim / 2 {
            let freq = theta.powf(-(2.0 * i as f64) / head_dim as f64);
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            for h in 0..heads {
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (x[[t, a]], x[[t, a + 1]]);
                x[[t, a]] = x0 * cos - x1 * sin;
                x[[t, a + 1]] = x0 * sin + x1 * cos;
            }
        }
    }
    Ok(())
}

/// Softmax over the first `unmasked` entries; the rest are 0.
pub fn softmax_row(x: &[f64], unmasked: usize) -> Result<Vec<f64>> {
    if unmasked == 0 || unmasked > x.len() {
        return Err(Error::arg(
            "causal_mask_len",
            format!("{unmasked} unmasked entries in a row of {}", x.len()),
        ));
    }
    let live = &x[..unmasked];
    if live.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("x", "non-finite score"));
    }
    let m = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; x.len()];
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(live) {
        *o = (v - m).exp();
        sum += *o;
    }
    out[..unmasked].iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

pub fn rmsnorm(x: &[f64], gamma: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gamma.len() {
        return Err(Error::Shape(format!(
            "rmsnorm: {} inputs, {} gains",
            x.len(),
            gamma.len()
        )));
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    Ok(x.iter().zip(gamma).map(|(v, g)| v * inv * g).collect())
}

pub fn layernorm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::Shape("layernorm: parameter length mismatch".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect())
}

pub(crate) fn rmsnorm_rows(x: &Array2<f64>, gamma: &[f64], eps: f64) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.dim());
    for (r, row) in x.rows().into_iter().enumerate() {
        let n = rmsnorm(row.as_slice().expect("contiguous"), gamma, eps)?;
        out.row_mut(r).assign(&ndarray::ArrayView1::from(&n));
    }
    Ok(out)
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `(gate · σ(gate)) ⊙ up`.
pub fn swiglu(gate: &[f64], up: &[f64]) -> Result<Vec<f64>> {
    if gate.len() != up.len() {
        return Err(Error::Shape(format!(
            "swiglu: gate {} vs up {}",
            gate.len(),
            up.len()
        )));
    }
    Ok(gate
        .iter()
        .zip(up)
        .map(|(g, u)| g * sigmoid(*g) * u)
        .collect())
}

/// Index of the largest logit; ties go to the lowest index.
pub fn greedy_sample(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::arg("logits", "empty"));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_identity_and_hand_product() {
        let x = array![[1.0, -2.0, 3.0]];
        let w = LinearWeight::new(Array2::eye(3));
        assert_eq!(linear_forward(&x, &w, ExecPath::Float).unwrap(), x);
        let w = LinearWeight::new(array![[3.0], [4.0]]);
        assert_eq!(
            linear_forward(&array![[1.0, 2.0]], &w, ExecPath::Float).unwrap(),
            array![[11.0]]
        );
        assert!(linear_forward(&array![[1.0]], &w, ExecPath::Float).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x0 = array![[0.3, -1.2, 2.0, 0.5]];
        let mut x = x0.clone();
        rope(&mut x, &[0], 4, 10_000.0).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn rope_two_dim_matches_rotation_matrix() {
        let mut x = array![[1.0, 2.0]];
        rope(&mut x, &[1], 2, 1.0).unwrap();
        let (s, c) = 1.0f64.sin_cos();
        assert!((x[[0, 0]] - (c - 2.0 * s)).abs() < 1e-15);
        assert!((x[[0, 1]] - (s + 2.0 * c)).abs() < 1e-15);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut x = array![[0.3, -1.2, 2.0, 0.5, 1.0, 1.0, -0.7, 0.2]];
        let before: Vec<f64> = x.row(0).to_vec();
        rope(&mut x, &[13], 4, 10_000.0).unwrap();
        for p in 0..4 {
            let n0 = before[2 * p].hypot(before[2 * p + 1]);
            let n1 = x[[0, 2 * p]].hypot(x[[0, 2 * p + 1]]);
            assert!((n0 - n1).abs() < 1e-12);
        }
        assert!(rope(&mut x, &[0], 3, 1.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0], 2).unwrap(), vec![0.5, 0.5]);
        let p = softmax_row(&[1f64.ln(), 2f64.ln(), 3f64.ln()], 3).unwrap();
        for (a, b) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let a = softmax_row(&[0.1, 0.7, -0.3], 3).unwrap();
        let b = softmax_row(&[100.1, 100.7, 99.7], 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(
            softmax_row(&[5.0, 1.0, 9.0], 1).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert!(softmax_row(&[1.0], 0).is_err());
    }

    #[test]
    fn rmsnorm_examples() {
        let y = rmsnorm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((y[0] - 0.848_528_137_4).abs() < 1e-9);
        assert!((y[1] - 1.131_370_849_9).abs() < 1e-9);
        assert_eq!(rmsnorm(&[-2.5; 4], &[1.0; 4], 0.0).unwrap(), vec![-1.0; 4]);
        let y = rmsnorm(&[0.3, -7.0, 2.0], &[1.0; 3], 0.0).unwrap();
        let rms = (y.iter().map(|v| v * v).sum::<f64>() / 3.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_zero_mean_unit_var() {
        let y = layernorm(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[0.0; 4], 0.0).unwrap();
        assert!(y.iter().sum::<f64>().abs() < 1e-12);
        assert!((y.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swiglu_examples() {
        assert_eq!(swiglu(&[0.0], &[5.0]).unwrap(), vec![0.0]);
        assert_eq!(swiglu(&[3.0], &[0.0]).unwrap(), vec![0.0]);
        let v = swiglu(&[1.0], &[2.0]).unwrap()[0];
        assert!((v - 1.462_117_157).abs() < 1e-9);
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_sample(&[0.0, 1.0, 0.0]).unwrap(), 1);
        assert_eq!(greedy_sample(&[2.0, 2.0, 2.0]).unwrap(), 0);
        assert_eq!(greedy_sample(&[10.0, 11.0, 10.0]).unwrap(), 1);
        assert!(greedy_sample(&[]).is_err());
    }

    #[test]
    fn constant_activation_row_reconstructs() {
        let x = array![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        let q = quantize_activation(&x, &QuantSpec::q3_linear_activation()).unwrap();
        let d = quant::dequantize(&q);
        assert_eq!(d.row(0).to_vec(), vec![0.0, 0.0, 0.0]);
    }
}
