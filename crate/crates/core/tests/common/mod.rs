//! Independent oracles shared by the integration tests. Everything here is
//! written from the formulas directly and avoids the library's own helpers
//! where those are what is under test.
#![allow(dead_code)]

use flexsim_core::archgraph::{DECODE_AUX_MODULES, PREFILL_AUX_MODULES};
use flexsim_core::config::{
    decode_engines, prefill_engines, validate_decode, validate_prefill, DecodeConfig, DeviceSpec,
    ModelSpec, PrefillConfig, QuantSpec, ResourceCostModel, TilingPolicy,
};
use flexsim_core::dse::{DecodeSpace, PrefillSpace};
use flexsim_core::kernels::{self, BlockWeights, Model};
use flexsim_core::quant::{self, QuantParams};
use flexsim_core::Exact;
use ndarray::Array2;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn big(v: i128) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

pub fn frac(n: u64, d: u64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

pub fn to_big(e: &Exact) -> BigRational {
    BigRational::new(BigInt::from(*e.numer()), BigInt::from(*e.denom()))
}

fn max3(a: BigRational, b: BigRational, c: BigRational) -> BigRational {
    let m = if a > b { a } else { b };
    if m > c {
        m
    } else {
        c
    }
}

/// Prefill cycles straight from the stage formula.
pub fn prefill_cycles(m: &ModelSpec, c: &PrefillConfig, lp: u64) -> BigRational {
    let (n, dh, dkv, dffn) = (m.n_layers, m.d_h, m.d_kv, m.d_ffn);
    let outer = frac(n * lp, c.tp);
    let kv = frac(dh * dkv, c.wp_kqvo);
    let inner = max3(
        frac(dh * dh, c.wp_kqvo),
        frac(dh * lp, c.wp_mha),
        frac(dh * dffn, c.wp_ffn),
    );
    outer * (kv + inner)
}

/// Decode cycles straight from the stage formula.
pub fn decode_cycles(m: &ModelSpec, c: &DecodeConfig, lp: u64, ld: u64) -> BigRational {
    let (n, dh, dkv, dffn, dlm) = (m.n_layers, m.d_h, m.d_kv, m.d_ffn, m.d_lm_head);
    let linear = frac(
        n * (2 * dh * dkv + dh * dh + 3 * dh * dffn) + dh * dlm,
        c.wp_int4,
    );
    let oproj = frac(n * dh * dh, c.wp_int4);
    // N·d_h·(l_p + l_d/2) / WP_mha, kept exact for odd l_d.
    let mha = frac(n * dh * (2 * lp + ld), 2 * c.wp_mha);
    let m = if oproj > mha { oproj } else { mha };
    big(ld as i128) * (linear + m)
}

/// Bytes per second: INT4 weights at half a byte, INT8 attention operands
/// at one byte.
pub fn prefill_bw(c: &PrefillConfig, f: u64) -> BigRational {
    let per_cycle = frac(2 * c.wp_kqvo + 3 * c.wp_ffn, 2) + big(2 * c.wp_mha as i128);
    per_cycle * big(f as i128)
}

pub fn decode_bw(c: &DecodeConfig, f: u64) -> BigRational {
    let per_cycle = frac(c.wp_int4, 2) + big(2 * c.wp_mha as i128);
    per_cycle * big(f as i128)
}

fn fits(
    usage: &std::collections::BTreeMap<flexsim_core::config::ResourceKind, f64>,
    d: &DeviceSpec,
    cost: &ResourceCostModel,
) -> bool {
    usage
        .iter()
        .all(|(k, used)| *used <= cost.cap_fraction * d.budget(*k) as f64)
}

/// Exhaustive prefill search: every product point, minimum (cycles, key).
pub fn brute_prefill(
    m: &ModelSpec,
    d: &DeviceSpec,
    cost: &ResourceCostModel,
    s: &PrefillSpace,
    lp: u64,
    f: u64,
) -> Option<(PrefillConfig, BigRational)> {
    let mut best: Option<(PrefillConfig, BigRational)> = None;
    for &tp in &s.tp {
        for &wk in &s.wp_kqvo {
            for &wm in &s.wp_mha {
                for &wf in &s.wp_ffn {
                    let c = PrefillConfig::new(tp, wk, wm, wf);
                    if !validate_prefill(&c, m, TilingPolicy::Ragged).is_valid() {
                        continue;
                    }
                    if prefill_bw(&c, f) > big(d.peak_bw_bytes_per_s as i128) {
                        continue;
                    }
                    if !fits(
                        &cost
                            .usage(&prefill_engines(&c), PREFILL_AUX_MODULES)
                            .unwrap(),
                        d,
                        cost,
                    ) {
                        continue;
                    }
                    let cyc = prefill_cycles(m, &c, lp);
                    let better = match &best {
                        None => true,
                        Some((bc, bv)) => cyc < *bv || (cyc == *bv && c.as_array() < bc.as_array()),
                    };
                    if better {
                        best = Some((c, cyc));
                    }
                }
            }
        }
    }
    best
}

pub fn brute_decode(
    m: &ModelSpec,
    d: &DeviceSpec,
    cost: &ResourceCostModel,
    s: &DecodeSpace,
    lp: u64,
    ld: u64,
    f: u64,
) -> Option<(DecodeConfig, BigRational)> {
    let mut best: Option<(DecodeConfig, BigRational)> = None;
    for &bp in &s.bp {
        for &w4 in &s.wp_int4 {
            for &wm in &s.wp_mha {
                let c = DecodeConfig::new(bp, w4, wm);
                if !validate_decode(&c, m, TilingPolicy::Ragged).is_valid() {
                    continue;
                }
                if decode_bw(&c, f) > big(d.peak_bw_bytes_per_s as i128) {
                    continue;
                }
                if !fits(
                    &cost.usage(&decode_engines(&c), DECODE_AUX_MODULES).unwrap(),
                    d,
                    cost,
                ) {
                    continue;
                }
                let cyc = decode_cycles(m, &c, lp, ld);
                let better = match &best {
                    None => true,
                    Some((bc, bv)) => cyc < *bv || (cyc == *bv && c.as_array() < bc.as_array()),
                };
                if better {
                    best = Some((c, cyc));
                }
            }
        }
    }
    best
}

/// Sorted sample of 1..=`max` distinct values from `pool`.
fn pick<R: Rng>(rng: &mut R, pool: &[u64], max: usize) -> Vec<u64> {
    let n = rng.gen_range(1..=max);
    let mut v: Vec<u64> = pool
        .choose_multiple(rng, n.min(pool.len()))
        .copied()
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Random prefill space of at most 10^4 points.
pub fn random_prefill_space<R: Rng>(rng: &mut R) -> PrefillSpace {
    let tp: Vec<u64> = (1..=64).collect();
    let wk: Vec<u64> = (1..=512).collect();
    let wm: Vec<u64> = (1..=512).collect();
    let wf: Vec<u64> = (1..=1024).map(|v| v * 2).collect();
    PrefillSpace {
        tp: pick(rng, &tp, 10),
        wp_kqvo: pick(rng, &wk, 10),
        wp_mha: pick(rng, &wm, 10),
        wp_ffn: pick(rng, &wf, 10),
    }
}

pub fn random_decode_space<R: Rng>(rng: &mut R) -> DecodeSpace {
    let bp: Vec<u64> = vec![1, 2, 3, 4, 8, 16, 32, 48, 64];
    let w4: Vec<u64> = (1..=128).map(|v| v * 32).collect();
    let wm: Vec<u64> = (1..=2048).collect();
    DecodeSpace {
        bp: pick(rng, &bp, 8),
        wp_int4: pick(rng, &w4, 30),
        wp_mha: pick(rng, &wm, 40),
    }
}

/// Dense Sylvester Hadamard matrix of order `n` (unnormalized).
pub fn hadamard(n: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < n {
        let k = h.len();
        let mut next = vec![vec![0.0; 2 * k]; 2 * k];
        for i in 0..k {
            for j in 0..k {
                next[i][j] = h[i][j];
                next[i][j + k] = h[i][j];
                next[i + k][j] = h[i][j];
                next[i + k][j + k] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

// ---- float decoder written out in full --------------------------------

fn matmul(x: &[Vec<f64>], w: &Array2<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.ncols())
                .map(|o| row.iter().enumerate().map(|(k, v)| v * w[[k, o]]).sum())
                .collect()
        })
        .collect()
}

fn norm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v / r * g).collect()
}

fn rotate(x: &mut [Vec<f64>], hd: usize, theta: f64) {
    for (pos, row) in x.iter_mut().enumerate() {
        for head in row.chunks_mut(hd) {
            for i in 0..hd / 2 {
                let ang = pos as f64 / theta.powf(2.0 * i as f64 / hd as f64);
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * ang.cos() - b * ang.sin();
                head[2 * i + 1] = a * ang.sin() + b * ang.cos();
            }
        }
    }
}

/// Whole-sequence decoder with an explicit causal score matrix per head.
/// Returns the last block's output for every position.
pub fn reference_decoder(model: &Model, x: &Array2<f64>) -> Array2<f64> {
    let s = &model.spec;
    let (hd, nq, nkv) = (
        s.head_dim as usize,
        s.n_q_heads as usize,
        s.n_kv_heads as usize,
    );
    let t = x.nrows();
    let mut h: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    for b in &model.weights.blocks {
        let a: Vec<Vec<f64>> = h
            .iter()
            .map(|r| norm(r, &b.attn_norm, s.norm_eps))
            .collect();
        let mut q = matmul(&a, &b.wq.float);
        let mut k = matmul(&a, &b.wk.float);
        let v = matmul(&a, &b.wv.float);
        rotate(&mut q, hd, s.rope_theta);
        rotate(&mut k, hd, s.rope_theta);
        let mut ctx = vec![vec![0.0; nq * hd]; t];
        for head in 0..nq {
            let g = head * nkv / nq;
            let mut scores = vec![vec![f64::NEG_INFINITY; t]; t];
            for i in 0..t {
                for j in 0..=i {
                    let dot: f64 = (0..hd)
                        .map(|d| q[i][head * hd + d] * k[j][g * hd + d])
                        .sum();
                    scores[i][j] = dot / (hd as f64).sqrt();
                }
                let mx = scores[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores[i].iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    for d in 0..hd {
                        ctx[i][head * hd + d] += e[j] / z * v[j][g * hd + d];
                    }
                }
            }
        }
        let o = matmul(&ctx, &b.wo.float);
        let x1: Vec<Vec<f64>> = h
            .iter()
            .zip(&o)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();
        let n2: Vec<Vec<f64>> = x1
            .iter()
            .map(|r| norm(r, &b.ffn_norm, s.norm_eps))
            .collect();
        let gate = matmul(&n2, &b.w_gate.float);
        let up = matmul(&n2, &b.w_up.float);
        let act: Vec<Vec<f64>> = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| {
                g.iter()
                    .zip(u)
                    .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                    .collect()
            })
            .collect();
        let down = matmul(&act, &b.w_down.float);
        h = x1
            .iter()
            .zip(&down)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();
    }
    Array2::from_shape_fn((t, s.d_h as usize), |(i, j)| h[i][j])
}

pub fn max_rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

// ---- quantized block: reconstruct, multiply exactly, round once ---------

/// Reconstructs both operands exactly, puts each over a common denominator
/// and takes integer dot products, so the product is exact and rounded once.
fn rational_product(a: &quant::QuantizedTensor, b: &quant::QuantizedTensor) -> Array2<f64> {
    let (t, k, o) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows());
    let (na, da) = over_common_denominator(&quant::dequantize_exact(a));
    let (nb, db) = over_common_denominator(&quant::dequantize_exact(b));
    let den = da * db;
    Array2::from_shape_fn((t, o), |(i, j)| {
        let mut acc = BigInt::zero();
        for kk in 0..k {
            acc += &na[i * k + kk] * &nb[kk * o + j];
        }
        BigRational::new(acc, den.clone()).to_f64().unwrap()
    })
}

fn over_common_denominator(v: &[BigRational]) -> (Vec<BigInt>, BigInt) {
    use num_integer::Integer;
    let den = v.iter().fold(BigInt::from(1), |l, x| l.lcm(x.denom()));
    let nums = v.iter().map(|x| x.numer() * (&den / x.denom())).collect();
    (nums, den)
}

fn oracle_linear(x: &Array2<f64>, w: &flexsim_core::kernels::LinearWeight) -> Array2<f64> {
    let act = kernels::quantize_activation(x, &QuantSpec::q3_linear_activation()).unwrap();
    let (wq, _) = w.quantized.as_ref().expect("quantized weight");
    rational_product(&act, wq)
}

fn quant_row(v: Vec<f64>, p: &QuantParams) -> quant::QuantizedTensor {
    let n = v.len();
    quant::quantize(&Array2::from_shape_vec((1, n), v).unwrap(), p).unwrap()
}

/// Cached keys and values of the oracle, one row per position.
#[derive(Default)]
pub struct OracleCache {
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

fn rows_norm(x: &Array2<f64>, g: &[f64], eps: f64) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (r, row) in x.rows().into_iter().enumerate() {
        let n = kernels::rmsnorm(row.as_slice().unwrap(), g, eps).unwrap();
        out.row_mut(r).assign(&ndarray::ArrayView1::from(&n));
    }
    out
}

/// Quantized decoder block where every integer GEMM is replaced by
/// reconstruct-then-multiply in exact rationals.
pub fn oracle_quant_block(
    x: &Array2<f64>,
    b: &BlockWeights,
    s: &ModelSpec,
    cache: &mut OracleCache,
) -> Array2<f64> {
    let (hd, nq, nkv) = (
        s.head_dim as usize,
        s.n_q_heads as usize,
        s.n_kv_heads as usize,
    );
    let aq = b.attn_quant.as_ref().expect("calibrated block");
    let start = cache.k.len();
    let positions: Vec<usize> = (start..start + x.nrows()).collect();
    let h = rows_norm(x, &b.attn_norm, s.norm_eps);
    let mut q = oracle_linear(&h, &b.wq);
    let mut k = oracle_linear(&h, &b.wk);
    let v = oracle_linear(&h, &b.wv);
    kernels::rope(&mut q, &positions, hd, s.rope_theta).unwrap();
    kernels::rope(&mut k, &positions, hd, s.rope_theta).unwrap();
    for r in 0..x.nrows() {
        cache.k.push(k.row(r).to_vec());
        cache.v.push(v.row(r).to_vec());
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Array2::zeros((x.nrows(), nq * hd));
    for t in 0..x.nrows() {
        let visible = start + t + 1;
        for head in 0..nq {
            let g = head / (nq / nkv);
            let qr = quant_row((0..hd).map(|d| q[[t, head * hd + d]]).collect(), &aq.q);
            let kt = Array2::from_shape_fn((hd, visible), |(d, j)| cache.k[j][g * hd + d]);
            let kq = quant::quantize(&kt, &aq.k).unwrap();
            let scores: Vec<f64> = rational_product(&qr, &kq)
                .iter()
                .map(|s| s * scale)
                .collect();
            let probs = kernels::softmax_row(&scores, visible).unwrap();
            let pq = quant_row(probs, &aq.p);
            let vm = Array2::from_shape_fn((visible, hd), |(j, d)| cache.v[j][g * hd + d]);
            let vq = quant::quantize(&vm, &aq.v).unwrap();
            let ctx = rational_product(&pq, &vq);
            for d in 0..hd {
                out[[t, head * hd + d]] = ctx[[0, d]];
            }
        }
    }
    let x1 = x + &oracle_linear(&out, &b.wo);
    let h2 = rows_norm(&x1, &b.ffn_norm, s.norm_eps);
    let gate = oracle_linear(&h2, &b.w_gate);
    let up = oracle_linear(&h2, &b.w_up);
    let mut act = Array2::zeros(gate.dim());
    for r in 0..gate.nrows() {
        let a = kernels::swiglu(&gate.row(r).to_vec(), &up.row(r).to_vec()).unwrap();
        act.row_mut(r).assign(&ndarray::Array1::from(a));
    }
    &x1 + &oracle_linear(&act, &b.w_down)
}

// ---- DSE cases --------------------------------------------------------

/// A random device scaled down so a good share of candidates fail.
pub fn random_device<R: Rng>(rng: &mut R) -> (DeviceSpec, ResourceCostModel) {
    let mut d = if rng.gen_bool(0.5) {
        DeviceSpec::u280()
    } else {
        DeviceSpec::v80()
    };
    d.peak_bw_bytes_per_s = rng.gen_range(20..=900) * 1_000_000_000;
    let cost = ResourceCostModel {
        cap_fraction: rng.gen_range(0.02..=0.8),
        ..ResourceCostModel::default()
    };
    (d, cost)
}

/// Outcome of one optimizer-vs-enumeration comparison.
pub enum CaseOutcome {
    Feasible,
    Infeasible,
}

/// Runs the optimizer with `opts` and the exhaustive oracle on a random
/// space and checks they agree on the optimum (or on infeasibility).
pub fn dse_case<R: Rng>(
    rng: &mut R,
    decode: bool,
    opts: &flexsim_core::dse::DseOptions,
) -> Result<CaseOutcome, String> {
    use flexsim_core::config::StageConfig;
    use flexsim_core::dse::{optimize_decode, optimize_prefill};
    use flexsim_core::Error;
    let m = ModelSpec::llama_3_2_1b();
    let (d, cost) = random_device(rng);
    let f = d.freq_hz;
    let lp = rng.gen_range(1..=4096);
    let ld = rng.gen_range(1..=2048);
    let (got, want) = if decode {
        let s = random_decode_space(rng);
        (
            optimize_decode(&m, &d, &cost, &s, lp, ld, opts),
            brute_decode(&m, &d, &cost, &s, lp, ld, f).map(|(c, v)| (StageConfig::Decode(c), v)),
        )
    } else {
        let s = random_prefill_space(rng);
        (
            optimize_prefill(&m, &d, &cost, &s, lp, opts),
            brute_prefill(&m, &d, &cost, &s, lp, f).map(|(c, v)| (StageConfig::Prefill(c), v)),
        )
    };
    match (got, want) {
        (Ok(r), Some((cfg, cycles))) => {
            if to_big(&r.latency.cycles) != cycles {
                return Err(format!(
                    "optimum {:?} at {} cycles, oracle {:?} at {}",
                    r.best, r.latency.cycles, cfg, cycles
                ));
            }
            if r.best != cfg {
                return Err(format!("tie broken differently: {:?} vs {:?}", r.best, cfg));
            }
            Ok(CaseOutcome::Feasible)
        }
        (Err(Error::Infeasible { .. }), None) => Ok(CaseOutcome::Infeasible),
        (Ok(r), None) => Err(format!(
            "optimizer found {:?} but the oracle found nothing feasible",
            r.best
        )),
        (Err(e), Some((cfg, _))) => Err(format!(
            "optimizer failed ({e}) but the oracle found {cfg:?}"
        )),
        (Err(e), None) => Err(format!("unexpected error kind: {e}")),
    }
}

// ---- quantization suites ------------------------------------------------

use flexsim_core::config::{Granularity, QuantBits, QuantMode, Symmetry};

pub const ALL_BITS: [QuantBits; 2] = [QuantBits::Int4, QuantBits::Int8];
pub const ALL_SYMMETRY: [Symmetry; 2] = [Symmetry::Symmetric, Symmetry::Asymmetric];
pub const ALL_GRANULARITY: [Granularity; 3] = [
    Granularity::PerTensor,
    Granularity::PerToken,
    Granularity::PerChannel,
];

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let amp = 10f64.powf(rng.gen_range(-3.0..3.0));
    let shift = if rng.gen_bool(0.3) {
        rng.gen_range(-2.0..2.0) * amp
    } else {
        0.0
    };
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-amp..amp) + shift)
}

/// Round-trip error stays within half a step on `n` random tensors spread
/// over every bits × symmetry × granularity combination. Returns the worst
/// error in units of s/2.
pub fn round_trip_suite<R: Rng>(rng: &mut R, n: usize) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for i in 0..n {
        let bits = ALL_BITS[i % 2];
        let sym = ALL_SYMMETRY[(i / 2) % 2];
        let gran = ALL_GRANULARITY[(i / 4) % 3];
        let (rows, cols) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let x = random_matrix(rng, rows, cols);
        let spec = QuantSpec::new(bits, sym, gran, QuantMode::Dynamic);
        let qt = quant::quantize_dynamic(&x, &spec).map_err(|e| format!("tensor {i}: {e}"))?;
        let (lo, hi) = qt.params.range();
        if qt.q.iter().any(|q| *q < lo || *q > hi) {
            return Err(format!("tensor {i}: payload outside [{lo}, {hi}]"));
        }
        let recon = quant::dequantize(&qt);
        for ((r, c), v) in x.indexed_iter() {
            let s = qt.params.scales[qt.params.group_of(r, c)];
            let err = (v - recon[[r, c]]).abs();
            // A couple of ulps of slack for the f64 divide and multiply-add.
            let bound = s / 2.0 + 4.0 * f64::EPSILON * (v.abs() + s * hi as f64);
            if err > bound {
                return Err(format!(
                    "tensor {i} ({bits:?} {sym:?} {gran:?}) at ({r},{c}): error {err} > s/2 = {}",
                    s / 2.0
                ));
            }
            worst = worst.max(err / (s / 2.0));
        }
    }
    Ok(worst)
}

/// The exact fused GEMM equals reconstruct-then-multiply on `n` random
/// operand pairs; the f64 fused GEMM rounds to within 1e-9 of it.
pub fn fused_suite<R: Rng>(rng: &mut R, n: usize) -> Result<(), String> {
    for i in 0..n {
        let (t, k, o) = (
            rng.gen_range(1..=6),
            rng.gen_range(2..=12),
            rng.gen_range(1..=6),
        );
        let act_spec = QuantSpec::new(
            ALL_BITS[rng.gen_range(0..2)],
            ALL_SYMMETRY[rng.gen_range(0..2)],
            if rng.gen_bool(0.5) {
                Granularity::PerToken
            } else {
                Granularity::PerTensor
            },
            QuantMode::Dynamic,
        );
        let w_spec = QuantSpec::new(
            ALL_BITS[rng.gen_range(0..2)],
            Symmetry::Symmetric,
            if rng.gen_bool(0.5) {
                Granularity::PerChannel
            } else {
                Granularity::PerTensor
            },
            QuantMode::Dynamic,
        );
        let x = random_matrix(rng, t, k);
        let w = random_matrix(rng, k, o);
        let xa = quant::quantize_dynamic(&x, &act_spec).map_err(|e| e.to_string())?;
        let wq = quant::quantize_dynamic(&w, &w_spec).map_err(|e| e.to_string())?;
        let side = quant::WeightSidecar::from_weights(&wq).map_err(|e| e.to_string())?;
        let exact = quant::fused_int_matmul_exact(&xa, &wq, &side).map_err(|e| e.to_string())?;
        let ex = quant::dequantize_exact(&xa);
        let ew = quant::dequantize_exact(&wq);
        for r in 0..t {
            for c in 0..o {
                let mut acc = BigRational::zero();
                for kk in 0..k {
                    acc += &ex[r * k + kk] * &ew[kk * o + c];
                }
                if acc != exact[r * o + c] {
                    return Err(format!(
                        "pair {i} at ({r},{c}): fused {} vs oracle {}",
                        exact[r * o + c],
                        acc
                    ));
                }
            }
        }
        let approx = quant::fused_int_matmul(&xa, &wq, &side).map_err(|e| e.to_string())?;
        for (j, v) in approx.iter().enumerate() {
            let e = exact[j].to_f64().unwrap();
            if (v - e).abs() > 1e-9 * e.abs().max(1e-300) + 1e-300 && (v - e).abs() > 1e-12 {
                return Err(format!("pair {i}: f64 fused {v} drifts from exact {e}"));
            }
        }
    }
    Ok(())
}

/// FHT against the dense Hadamard product for n = 2..64, plus involution.
pub fn fht_suite<R: Rng>(rng: &mut R) -> Result<f64, String> {
    use flexsim_core::quant::Normalization;
    let mut worst = 0.0f64;
    let mut n = 2;
    while n <= 64 {
        let h = hadamard(n);
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = quant::fht(&x, Normalization::Orthonormal).map_err(|e| e.to_string())?;
            for i in 0..n {
                let dense: f64 = (0..n).map(|j| h[i][j] * x[j]).sum::<f64>() / (n as f64).sqrt();
                worst = worst.max((dense - fast[i]).abs());
            }
            let back = quant::fht(&fast, Normalization::Orthonormal).map_err(|e| e.to_string())?;
            let raw = quant::fht(
                &quant::fht(&x, Normalization::None).unwrap(),
                Normalization::None,
            )
            .unwrap();
            for i in 0..n {
                worst = worst.max((back[i] - x[i]).abs());
                worst = worst.max((raw[i] / n as f64 - x[i]).abs());
            }
        }
        n *= 2;
    }
    if worst > 1e-12 {
        return Err(format!("max deviation {worst:e} > 1e-12"));
    }
    Ok(worst)
}

// ---- kernel suites ------------------------------------------------------

use flexsim_core::kernels::{Arith, ExecPath};

/// Float `Model::forward` against the monolithic reference. Returns the
/// largest relative deviation over `seeds`.
pub fn forward_vs_reference(
    spec: &ModelSpec,
    seeds: std::ops::Range<u64>,
    len: usize,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in seeds {
        let m = Model::random(spec, seed).map_err(|e| e.to_string())?;
        let tokens: Vec<usize> = (0..len)
            .map(|i| (i * 31 + seed as usize * 7) % spec.d_lm_head as usize)
            .collect();
        let x = m.embed(&tokens).map_err(|e| e.to_string())?;
        let mut cache = m.new_cache(len);
        let got = m
            .forward(&x, &mut cache, ExecPath::Float)
            .map_err(|e| e.to_string())?
            .hidden;
        let d = max_rel_diff(&reference_decoder(&m, &x), &got);
        if d > 1e-9 {
            return Err(format!("seed {seed}: relative deviation {d:e}"));
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Prefill of `len - split` tokens then one-token decode steps, against a
/// single pass over all `len` tokens.
pub fn incremental_vs_full(
    spec: &ModelSpec,
    seed: u64,
    len: usize,
    split: usize,
    path: ExecPath,
) -> Result<f64, String> {
    let mut m = Model::random(spec, seed).map_err(|e| e.to_string())?;
    let tokens: Vec<usize> = (0..len)
        .map(|i| (i * 13 + 5) % spec.d_lm_head as usize)
        .collect();
    if path.is_quantized() {
        m.quantize(&tokens).map_err(|e| e.to_string())?;
    }
    let x = m.embed(&tokens).map_err(|e| e.to_string())?;
    let mut full_cache = m.new_cache(len);
    let full = m
        .forward(&x, &mut full_cache, path)
        .map_err(|e| e.to_string())?
        .hidden;
    let mut cache = m.new_cache(len);
    let head = m
        .forward(
            &x.slice(ndarray::s![..split, ..]).to_owned(),
            &mut cache,
            path,
        )
        .map_err(|e| e.to_string())?
        .hidden;
    let mut rows = vec![head];
    for t in split..len {
        rows.push(
            m.forward(
                &x.slice(ndarray::s![t..t + 1, ..]).to_owned(),
                &mut cache,
                path,
            )
            .map_err(|e| e.to_string())?
            .hidden,
        );
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let inc = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
    Ok(max_rel_diff(&full, &inc))
}

/// Exact-arithmetic quantized blocks against the rational oracle, bit for
/// bit, over a prefill chunk and then `decode_steps` single tokens.
pub fn quant_block_vs_oracle(
    spec: &ModelSpec,
    seed: u64,
    prefill: usize,
    decode_steps: usize,
) -> Result<(), String> {
    let mut m = Model::random(spec, seed).map_err(|e| e.to_string())?;
    let len = prefill + decode_steps;
    let tokens: Vec<usize> = (0..len)
        .map(|i| (i * 17 + seed as usize) % spec.d_lm_head as usize)
        .collect();
    m.quantize(&tokens[..prefill]).map_err(|e| e.to_string())?;
    let mut cache = m.new_cache(len);
    let mut oracles: Vec<OracleCache> = (0..m.weights.blocks.len())
        .map(|_| OracleCache::default())
        .collect();
    let mut chunks = vec![(0, prefill)];
    chunks.extend((prefill..len).map(|t| (t, t + 1)));
    for (a, b) in chunks {
        let mut x = m.embed(&tokens[a..b]).map_err(|e| e.to_string())?;
        for (l, block) in m.weights.blocks.iter().enumerate() {
            let got = kernels::decoder_block_forward(
                &x,
                block,
                spec,
                &mut cache,
                l,
                ExecPath::Quantized(Arith::Exact),
            )
            .map_err(|e| e.to_string())?;
            let want = oracle_quant_block(&x, block, spec, &mut oracles[l]);
            if let Some(((r, c), w)) = want
                .indexed_iter()
                .find(|(i, w)| w.to_bits() != got[*i].to_bits())
            {
                return Err(format!(
                    "seed {seed}, tokens {a}..{b}, layer {l} at ({r},{c}): {} vs oracle {w}",
                    got[[r, c]]
                ));
            }
            x = got;
        }
    }
    Ok(())
}

// ---- architecture graphs ------------------------------------------------

pub fn random_model<R: Rng>(rng: &mut R) -> ModelSpec {
    let kv_heads = rng.gen_range(1u64..=16);
    let q_heads = kv_heads * rng.gen_range(1u64..=8);
    let head_dim = 2 * rng.gen_range(1u64..=64);
    ModelSpec {
        name: "random".into(),
        n_layers: rng.gen_range(1..=32),
        d_h: q_heads * head_dim,
        d_kv: kv_heads * head_dim,
        d_ffn: q_heads * head_dim * rng.gen_range(1..=4),
        d_lm_head: rng.gen_range(1..=64_000),
        n_q_heads: q_heads,
        n_kv_heads: kv_heads,
        head_dim,
        rope_theta: 10_000.0,
        norm_eps: 1e-5,
    }
}

/// Reference graphs of `n` random valid configurations against the stage
/// formulas: latency cycles, and the busiest phase's bandwidth.
pub fn archgraph_suite<R: Rng>(rng: &mut R, n: usize) -> Result<(), String> {
    use flexsim_core::archgraph::{
        decode_reference_graph, estimate_graph_latency, prefill_reference_graph,
    };
    use flexsim_core::perf::WorkloadShape;
    let mut done = 0;
    while done < n {
        let m = random_model(rng);
        let f = rng.gen_range(1..=1_000_000_000u64);
        let lp = rng.gen_range(1..=8192);
        let ld = rng.gen_range(1..=4096);
        let w = WorkloadShape::new(lp, ld).unwrap();
        let decode = done % 2 == 1;
        let (g, want_cycles, want_bw) = if decode {
            let c = DecodeConfig::new(
                rng.gen_range(1..=64),
                rng.gen_range(1..=m.d_h * m.d_kv),
                rng.gen_range(1..=m.d_h),
            );
            if !validate_decode(&c, &m, TilingPolicy::Ragged).is_valid() {
                continue;
            }
            (
                decode_reference_graph(&c),
                decode_cycles(&m, &c, lp, ld),
                decode_bw(&c, f),
            )
        } else {
            let c = PrefillConfig::new(
                rng.gen_range(1..=64),
                rng.gen_range(1..=m.d_kv),
                rng.gen_range(1..=m.head_dim * m.n_kv_heads),
                rng.gen_range(1..=m.d_ffn),
            );
            if !validate_prefill(&c, &m, TilingPolicy::Ragged).is_valid() {
                continue;
            }
            (
                prefill_reference_graph(&c),
                prefill_cycles(&m, &c, lp),
                prefill_bw(&c, f),
            )
        };
        let est = estimate_graph_latency(&g, &m, &w, f).map_err(|e| format!("{}: {e}", g.name))?;
        if to_big(&est.cycles) != want_cycles {
            return Err(format!(
                "{} on {m:?}: graph {} cycles, formula {}",
                g.name, est.cycles, want_cycles
            ));
        }
        let bw = g
            .phase_bandwidth(f)
            .into_iter()
            .map(|(_, b)| to_big(&b.bytes_per_second))
            .max()
            .unwrap();
        if bw != want_bw {
            return Err(format!(
                "{}: busiest phase {bw} B/s, formula {want_bw}",
                g.name
            ));
        }
        done += 1;
    }
    Ok(())
}

// ---- HMT ----------------------------------------------------------------

/// Runs the functional pipeline on the toy model over `segments` segments
/// of `seg_len` random tokens with queue capacity `queue`, and checks the
/// queue bound and that no score row is longer than one augmented prompt.
pub fn hmt_functional(
    segments: usize,
    seg_len: u64,
    queue: u64,
) -> Result<flexsim_core::hmt::PipelineRun, String> {
    use flexsim_core::hmt::{random_topic, run_pipeline, HmtConfig};
    let spec = ModelSpec::toy();
    let m = Model::random(&spec, 1).map_err(|e| e.to_string())?;
    let topic = random_topic(spec.d_h as usize, 1);
    let cfg = HmtConfig::new(seg_len, queue, 1, 1);
    let n = segments * seg_len as usize;
    let tokens: Vec<usize> = (0..n)
        .map(|i| (i * 7919 + 11) % spec.d_lm_head as usize)
        .collect();
    let run = run_pipeline(&tokens, &m, &topic, &cfg, kernels::ExecPath::Float)
        .map_err(|e| e.to_string())?;
    if run.segments.len() != segments {
        return Err(format!(
            "{} segments processed, expected {segments}",
            run.segments.len()
        ));
    }
    if run.max_queue_len > queue as usize {
        return Err(format!("queue grew to {} > {queue}", run.max_queue_len));
    }
    let longest_prompt = 1 + cfg.short_term_len() as usize + seg_len as usize;
    if run.peak_score_len > longest_prompt {
        return Err(format!(
            "a score row of {} positions exceeds the {longest_prompt}-token prompt",
            run.peak_score_len
        ));
    }
    if run.peak_score_len >= n {
        return Err(format!(
            "full-sequence attention: {} of {n} positions",
            run.peak_score_len
        ));
    }
    Ok(run)
}

/// Long-context speedup of the U280 build at `total` tokens with the
/// given segment length: `(augmented + plug-in, with summary)`.
pub fn hmt_speedup(seg_len: u64, total: u64) -> Result<(f64, f64), String> {
    use flexsim_core::hmt::HmtConfig;
    use flexsim_core::perf::{long_context_prefill_model, PluginCost};
    let m = ModelSpec::llama_3_2_1b();
    let c = long_context_prefill_model(
        &m,
        &PrefillConfig::new(8, 24, 16, 96),
        &HmtConfig::new(seg_len, 64, 4, 4),
        total,
        304_000_000,
        PluginCost::Modeled,
    )
    .map_err(|e| e.to_string())?;
    Ok((
        flexsim_core::exact::to_f64(&c.speedup),
        flexsim_core::exact::to_f64(&c.speedup_with_summary),
    ))
}

// ---- crafted DSE spaces -------------------------------------------------

/// For each dimension, `{v/2, v}` when halving that dimension alone makes
/// `base` slower, else `{v}`. Latency is monotone in every dimension, so
/// every other point of the product is strictly slower than `base`.
fn halvings(base: &[u64], slower: impl Fn(&[u64]) -> bool) -> Vec<Vec<u64>> {
    (0..base.len())
        .map(|i| {
            let mut p = base.to_vec();
            p[i] /= 2;
            if p[i] >= 1 && slower(&p) {
                vec![p[i], base[i]]
            } else {
                vec![base[i]]
            }
        })
        .collect()
}

/// Crafted prefill space around `c`; checks with the oracle that `c` is
/// its unique feasible optimum, then that the optimizer returns it.
pub fn crafted_prefill(c: PrefillConfig, d: &DeviceSpec, f: u64) -> Result<usize, String> {
    use flexsim_core::config::StageConfig;
    use flexsim_core::dse::{optimize_prefill, DseOptions};
    let m = ModelSpec::llama_3_2_1b();
    let cost = ResourceCostModel::default();
    let base = prefill_cycles(&m, &c, 1024);
    let dims = halvings(&c.as_array(), |p| {
        prefill_cycles(&m, &PrefillConfig::new(p[0], p[1], p[2], p[3]), 1024) > base
    });
    let s = PrefillSpace {
        tp: dims[0].clone(),
        wp_kqvo: dims[1].clone(),
        wp_mha: dims[2].clone(),
        wp_ffn: dims[3].clone(),
    };
    let size = dims.iter().map(Vec::len).product();
    match brute_prefill(&m, d, &cost, &s, 1024, f) {
        Some((b, _)) if b == c => {}
        other => {
            return Err(format!(
                "{c:?} is not the feasible optimum of its crafted space (oracle: {other:?})"
            ))
        }
    }
    let opts = DseOptions {
        freq_hz: Some(f),
        ..DseOptions::default()
    };
    let r = optimize_prefill(&m, d, &cost, &s, 1024, &opts).map_err(|e| e.to_string())?;
    if r.best != StageConfig::Prefill(c) {
        return Err(format!("optimizer returned {:?}, expected {c:?}", r.best));
    }
    Ok(size)
}

pub fn crafted_decode(c: DecodeConfig, d: &DeviceSpec, f: u64) -> Result<usize, String> {
    use flexsim_core::config::StageConfig;
    use flexsim_core::dse::{optimize_decode, DseOptions};
    let m = ModelSpec::llama_3_2_1b();
    let cost = ResourceCostModel::default();
    let base = decode_cycles(&m, &c, 1024, 1024);
    let dims = halvings(&c.as_array(), |p| {
        decode_cycles(&m, &DecodeConfig::new(p[0], p[1], p[2]), 1024, 1024) > base
    });
    let s = DecodeSpace {
        bp: dims[0].clone(),
        wp_int4: dims[1].clone(),
        wp_mha: dims[2].clone(),
    };
    let size = dims.iter().map(Vec::len).product();
    match brute_decode(&m, d, &cost, &s, 1024, 1024, f) {
        Some((b, _)) if b == c => {}
        other => {
            return Err(format!(
                "{c:?} is not the feasible optimum of its crafted space (oracle: {other:?})"
            ))
        }
    }
    let opts = DseOptions {
        freq_hz: Some(f),
        ..DseOptions::default()
    };
    let r = optimize_decode(&m, d, &cost, &s, 1024, 1024, &opts).map_err(|e| e.to_string())?;
    if r.best != StageConfig::Decode(c) {
        return Err(format!("optimizer returned {:?}, expected {c:?}", r.best));
    }
    Ok(size)
}
