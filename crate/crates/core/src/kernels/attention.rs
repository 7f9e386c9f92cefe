use ndarray::{Array2, Array3};

use super::{softmax_row, Arith, ExecPath};
use crate::config::{ModelSpec, QuantSpec};
use crate::error::{Error, Result};
use crate::quant::{self, QuantParams, QuantizedTensor, WeightSidecar};

/// Per-layer key/value store, `[n_kv_heads, max_seq_len, head_dim]`.
/// Entries are append-only.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    n_kv_heads: usize,
    head_dim: usize,
    max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    k: Array3<f64>,
    v: Array3<f64>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, n_kv_heads: usize, head_dim: usize, max_seq_len: usize) -> Self {
        let layer = LayerCache {
            k: Array3::zeros((n_kv_heads, max_seq_len, head_dim)),
            v: Array3::zeros((n_kv_heads, max_seq_len, head_dim)),
            len: 0,
        };
        KvCache {
            layers: vec![layer; n_layers],
            n_kv_heads,
            head_dim,
            max_seq_len,
        }
    }

    pub fn for_model(spec: &ModelSpec, max_seq_len: usize) -> Self {
        Self::new(
            spec.n_layers as usize,
            spec.n_kv_heads as usize,
            spec.head_dim as usize,
            max_seq_len,
        )
    }

    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer].len
    }

    pub fn is_empty(&self, layer: usize) -> bool {
        self.len(layer) == 0
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Appends `k, v: [tokens, n_kv_heads·head_dim]` to `layer`.
    pub fn append(&mut self, layer: usize, k: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
        let width = self.n_kv_heads * self.head_dim;
        if k.dim() != v.dim() || k.ncols() != width {
            return Err(Error::Shape(format!(
                "kv append expects [tokens, {width}], got k {:?} v {:?}",
                k.dim(),
                v.dim()
            )));
        }
        let max = self.max_seq_len;
        let lc = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::arg("layer", format!("cache has no layer {layer}")))?;
        if lc.len + k.nrows() > max {
            return Err(Error::CacheOverflow {
                layer,
                len: lc.len,
                max,
                requested: k.nrows(),
            });
        }
        for t in 0..k.nrows() {
            let pos = lc.len + t;
            for h in 0..self.n_kv_heads {
                for d in 0..self.head_dim {
                    lc.k[[h, pos, d]] = k[[t, h * self.head_dim + d]];
                    lc.v[[h, pos, d]] = v[[t, h * self.head_dim + d]];
                }
            }
        }
        lc.len += k.nrows();
        Ok(())
    }

    pub fn key(&self, layer: usize, head: usize, pos: usize) -> ndarray::ArrayView1<'_, f64> {
        self.layers[layer].k.slice(ndarray::s![head, pos, ..])
    }

    pub fn value(&self, layer: usize, head: usize, pos: usize) -> ndarray::ArrayView1<'_, f64> {
        self.layers[layer].v.slice(ndarray::s![head, pos, ..])
    }
}

/// Static INT8 parameters for one layer's attention operands.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnQuant {
    pub q: QuantParams,
    pub k: QuantParams,
    pub v: QuantParams,
    /// Softmax probabilities; they lie in [0, 1].
    pub p: QuantParams,
}

impl AttnQuant {
    pub fn from_max_abs(q_max: f64, k_max: f64, v_max: f64) -> Self {
        let spec = QuantSpec::q3_attention();
        let (_, hi) = quant::int_range(spec.bits, spec.symmetry);
        let params = |m: f64| QuantParams {
            bits: spec.bits,
            symmetry: spec.symmetry,
            granularity: spec.granularity,
            scales: vec![if m > 0.0 { m / hi as f64 } else { 1.0 }],
            zeros: vec![0.0],
        };
        AttnQuant {
            q: params(q_max),
            k: params(k_max),
            v: params(v_max),
            p: params(1.0),
        }
    }
}

/// Instrumentation of attention-score buffers.
pub mod probe {
    use std::cell::Cell;

    thread_local! {
        static PEAK: Cell<usize> = const { Cell::new(0) };
        static ROWS: Cell<u64> = const { Cell::new(0) };
    }

    pub(crate) fn record(len: usize) {
        PEAK.with(|p| p.set(p.get().max(len)));
        ROWS.with(|r| r.set(r.get() + 1));
    }

    /// Longest score row allocated on this thread since the last reset.
    pub fn peak_score_len() -> usize {
        PEAK.with(Cell::get)
    }

    /// Number of score rows allocated on this thread since the last reset.
    pub fn score_rows() -> u64 {
        ROWS.with(Cell::get)
    }

    pub fn reset() {
        PEAK.with(|p| p.set(0));
        ROWS.with(|r| r.set(0));
    }
}

fn row_tensor(values: Vec<f64>, params: &QuantParams) -> Result<QuantizedTensor> {
    let n = values.len();
    let x = Array2::from_shape_vec((1, n), values).expect("row");
    quant::quantize(&x, params)
}

/// Integer dot of a quantized row against quantized columns, scaled back.
fn int_matvec(row: &QuantizedTensor, cols: &QuantizedTensor, arith: Arith) -> Result<Vec<f64>> {
    let sidecar = WeightSidecar::from_weights(cols)?;
    match arith {
        Arith::Float => Ok(quant::fused_int_matmul(row, cols, &sidecar)?
            .into_raw_vec_and_offset()
            .0),
        Arith::Exact => Ok(quant::fused_int_matmul_exact(row, cols, &sidecar)?
            .iter()
            .map(quant::to_f64)
            .collect()),
    }
}

/// Grouped-query attention for a block of new tokens.
///
/// `q: [tokens, n_q_heads·head_dim]` and the new keys/values (RoPE already
/// applied) are appended to the cache first; token `i` of the block then
/// attends causally to every cached position up to its own. Scores are
/// scaled by `1/√head_dim`. With `quant`, the QKᵀ and PV products run on
/// static INT8 operands.
pub fn gqa_attention(
    q: &Array2<f64>,
    cache: &mut KvCache,
    layer: usize,
    new_k: &Array2<f64>,
    new_v: &Array2<f64>,
    n_q_heads: usize,
    quant_params: Option<&AttnQuant>,
    path: ExecPath,
) -> Result<Array2<f64>> {
    let hd = cache.head_dim;
    let n_kv = cache.n_kv_heads;
    if n_q_heads == 0 || !n_q_heads.is_multiple_of(n_kv) {
        return Err(Error::Shape(format!(
            "{n_q_heads} query heads over {n_kv} kv heads"
        )));
    }
    if q.ncols() != n_q_heads * hd || q.nrows() != new_k.nrows() {
        return Err(Error::Shape(format!(
            "q is {:?}, expected [{}, {}]",
            q.dim(),
            new_k.nrows(),
            n_q_heads * hd
        )));
    }
    let start = cache.len(layer);
    cache.append(layer, new_k, new_v)?;
    let group = n_q_heads / n_kv;
    let scale = 1.0 / (hd as f64).sqrt();
    let quantized = match path {
        ExecPath::Quantized(arith) => {
            let qp = quant_params.ok_or_else(|| {
                Error::validation("attn_quant", "quantized attention needs static INT8 params")
            })?;
            Some((qp, arith))
        }
        _ => None,
    };

    let mut out = Array2::zeros((q.nrows(), n_q_heads * hd));
    for t in 0..q.nrows() {
        let visible = start + t + 1;
        for h in 0..n_q_heads {
            let g = h / group;
            let q_row: Vec<f64> = (0..hd).map(|d| q[[t, h * hd + d]]).collect();
            probe::record(visible);
            let scores: Vec<f64> = match quantized {
                None => (0..visible)
                    .map(|j| {
                        let k = cache.key(layer, g, j);
                        q_row.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect(),
                Some((qp, arith)) => {
                    let qq = row_tensor(q_row.clone(), &qp.q)?;
                    let kt =
                        Array2::from_shape_fn((hd, visible), |(d, j)| cache.key(layer, g, j)[d]);
                    let kq = quant::quantize(&kt, &qp.k)?;
                    int_matvec(&qq, &kq, arith)?
                        .into_iter()
                        .map(|s| s * scale)
                        .collect()
                }
            };
            let probs = softmax_row(&scores, visible)?;
            match quantized {
                None => {
                    for (j, p) in probs.iter().enumerate() {
                        let v = cache.value(layer, g, j);
                        for d in 0..hd {
                            out[[t, h * hd + d]] += p * v[d];
                        }
                    }
                }
                Some((qp, arith)) => {
                    let pq = row_tensor(probs, &qp.p)?;
                    let vm =
                        Array2::from_shape_fn((visible, hd), |(j, d)| cache.value(layer, g, j)[d]);
                    let vq = quant::quantize(&vm, &qp.v)?;
                    let ctx = int_matvec(&pq, &vq, arith)?;
                    for d in 0..hd {
                        out[[t, h * hd + d]] = ctx[d];
                    }
                }
            }
        }
    }
    Ok(path.round(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_position_returns_cached_value() {
        let mut cache = KvCache::new(1, 1, 2, 4);
        let out = gqa_attention(
            &array![[0.3, -0.1]],
            &mut cache,
            0,
            &array![[1.0, 2.0]],
            &array![[5.0, -6.0]],
            1,
            None,
            ExecPath::Float,
        )
        .unwrap();
        assert_eq!(out, array![[5.0, -6.0]]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut cache = KvCache::new(1, 1, 2, 4);
        let k = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let v = array![[3.0, 0.0], [0.0, 3.0], [3.0, 3.0]];
        let q = array![[0.2, 0.9], [0.2, 0.9], [0.2, 0.9]];
        let out = gqa_attention(&q, &mut cache, 0, &k, &v, 1, None, ExecPath::Float).unwrap();
        // Last token sees all three positions with equal weight.
        assert!((out[[2, 0]] - 2.0).abs() < 1e-12);
        assert!((out[[2, 1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn overflow_is_an_error() {
        let mut cache = KvCache::new(1, 1, 2, 1);
        let k = array![[1.0, 1.0], [1.0, 1.0]];
        let r = gqa_attention(&k, &mut cache, 0, &k, &k, 1, None, ExecPath::Float);
        assert!(matches!(r, Err(Error::CacheOverflow { .. })));
        assert_eq!(cache.len(0), 0);
    }

    #[test]
    fn cached_entries_are_not_mutated() {
        let mut cache = KvCache::new(1, 1, 2, 4);
        cache
            .append(0, &array![[1.0, 2.0]], &array![[3.0, 4.0]])
            .unwrap();
        let before = cache.key(0, 0, 0).to_owned();
        cache
            .append(0, &array![[9.0, 9.0]], &array![[9.0, 9.0]])
            .unwrap();
        assert_eq!(cache.key(0, 0, 0), before);
        assert_eq!(cache.len(0), 2);
    }
}
