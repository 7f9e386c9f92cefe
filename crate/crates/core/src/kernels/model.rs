use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    gqa_attention, linear_forward, rmsnorm_rows, rope, swiglu, AttnQuant, ExecPath, KvCache,
};
use crate::config::{ModelSpec, QuantSpec};
use crate::error::{Error, Result};
use crate::quant::tensorfile::{read_container, write_container, Tensor};
use crate::quant::{self, QuantizedTensor, WeightSidecar};

/// A `[d_in, d_out]` weight with its optional INT4 payload.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeight {
    pub float: Array2<f64>,
    pub quantized: Option<(QuantizedTensor, WeightSidecar)>,
}

impl LinearWeight {
    pub fn new(float: Array2<f64>) -> Self {
        LinearWeight {
            float,
            quantized: None,
        }
    }

    /// Symmetric per-channel INT4 payload and its sidecar.
    pub fn quantize(&mut self) -> Result<()> {
        let qt = quant::quantize_dynamic(&self.float, &QuantSpec::q3_linear_weight())?;
        let sidecar = WeightSidecar::from_weights(&qt)?;
        self.quantized = Some((qt, sidecar));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Vec<f64>,
    pub wq: LinearWeight,
    pub wk: LinearWeight,
    pub wv: LinearWeight,
    pub wo: LinearWeight,
    pub ffn_norm: Vec<f64>,
    pub w_gate: LinearWeight,
    pub w_up: LinearWeight,
    pub w_down: LinearWeight,
    pub attn_quant: Option<AttnQuant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `[vocab, d_h]`.
    pub embed: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Vec<f64>,
    /// `[d_h, vocab]`.
    pub lm_head: LinearWeight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub weights: ModelWeights,
}

/// Output of one forward step over a block of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Last decoder block's output, before the final norm.
    pub hidden: Array2<f64>,
    /// Sum of every element of each layer's output.
    pub layer_checksums: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

fn gains(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect()
}

/// One decoder block: pre-norm attention and SwiGLU FFN with residuals.
/// Positions continue from the cache's current length for `layer`.
pub fn decoder_block_forward(
    x: &Array2<f64>,
    block: &BlockWeights,
    spec: &ModelSpec,
    cache: &mut KvCache,
    layer: usize,
    path: ExecPath,
) -> Result<Array2<f64>> {
    block_forward(x, block, spec, cache, layer, path, None)
}

fn max_abs(x: &Array2<f64>) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn block_forward(
    x: &Array2<f64>,
    block: &BlockWeights,
    spec: &ModelSpec,
    cache: &mut KvCache,
    layer: usize,
    path: ExecPath,
    stats: Option<&mut [f64; 3]>,
) -> Result<Array2<f64>> {
    if x.ncols() != spec.d_h as usize {
        return Err(Error::Shape(format!(
            "block input has {} features, d_h={}",
            x.ncols(),
            spec.d_h
        )));
    }
    let start = cache.len(layer);
    let positions: Vec<usize> = (start..start + x.nrows()).collect();
    let hd = spec.head_dim as usize;

    let h = path.round(rmsnorm_rows(x, &block.attn_norm, spec.norm_eps)?);
    let mut q = linear_forward(&h, &block.wq, path)?;
    let mut k = linear_forward(&h, &block.wk, path)?;
    let v = linear_forward(&h, &block.wv, path)?;
    rope(&mut q, &positions, hd, spec.rope_theta)?;
    rope(&mut k, &positions, hd, spec.rope_theta)?;
    if let Some(s) = stats {
        s[0] = s[0].max(max_abs(&q));
        s[1] = s[1].max(max_abs(&k));
        s[2] = s[2].max(max_abs(&v));
    }
    let attn = gqa_attention(
        &q,
        cache,
        layer,
        &k,
        &v,
        spec.n_q_heads as usize,
        block.attn_quant.as_ref(),
        path,
    )?;
    let x1 = x + &linear_forward(&attn, &block.wo, path)?;

    let h2 = path.round(rmsnorm_rows(&x1, &block.ffn_norm, spec.norm_eps)?);
    let gate = linear_forward(&h2, &block.w_gate, path)?;
    let up = linear_forward(&h2, &block.w_up, path)?;
    let mut act = Array2::zeros(gate.dim());
    for r in 0..gate.nrows() {
        let g = gate.row(r).to_vec();
        let u = up.row(r).to_vec();
        act.row_mut(r).assign(&Array1::from(swiglu(&g, &u)?));
    }
    let act = path.round(act);
    Ok(&x1 + &linear_forward(&act, &block.w_down, path)?)
}

const BLOCK_NAMES: [&str; 9] = [
    "attn_norm",
    "wq",
    "wk",
    "wv",
    "wo",
    "ffn_norm",
    "w_gate",
    "w_up",
    "w_down",
];

impl Model {
    /// Random weights from a seeded ChaCha stream. Linear weights are
    /// uniform in `±1/√d_in`; norm gains are near 1.
    pub fn random(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.d_h as usize;
        let dkv = spec.d_kv as usize;
        let dffn = spec.d_ffn as usize;
        let vocab = spec.d_lm_head as usize;
        let lin = |rng: &mut ChaCha8Rng, i: usize, o: usize| {
            LinearWeight::new(uniform(rng, i, o, 1.0 / (i as f64).sqrt()))
        };
        let embed = uniform(&mut rng, vocab, d, 1.0);
        let blocks = (0..spec.n_layers)
            .map(|_| BlockWeights {
                attn_norm: gains(&mut rng, d),
                wq: lin(&mut rng, d, d),
                wk: lin(&mut rng, d, dkv),
                wv: lin(&mut rng, d, dkv),
                wo: lin(&mut rng, d, d),
                ffn_norm: gains(&mut rng, d),
                w_gate: lin(&mut rng, d, dffn),
                w_up: lin(&mut rng, d, dffn),
                w_down: lin(&mut rng, dffn, d),
                attn_quant: None,
            })
            .collect();
        let final_norm = gains(&mut rng, d);
        let lm_head = lin(&mut rng, d, vocab);
        Ok(Model {
            spec: spec.clone(),
            weights: ModelWeights {
                embed,
                blocks,
                final_norm,
                lm_head,
            },
        })
    }

    pub fn new_cache(&self, max_seq_len: usize) -> KvCache {
        KvCache::for_model(&self.spec, max_seq_len)
    }

    /// Quantizes every linear weight and calibrates the static attention
    /// scales on a float forward pass over `calibration`.
    pub fn quantize(&mut self, calibration: &[usize]) -> Result<()> {
        if calibration.is_empty() {
            return Err(Error::arg("calibration", "need at least one token"));
        }
        let mut stats = vec![[0.0f64; 3]; self.weights.blocks.len()];
        let mut cache = self.new_cache(calibration.len());
        let mut x = self.embed(calibration)?;
        for (l, block) in self.weights.blocks.iter().enumerate() {
            x = block_forward(
                &x,
                block,
                &self.spec,
                &mut cache,
                l,
                ExecPath::Float,
                Some(&mut stats[l]),
            )?;
        }
        for (block, s) in self.weights.blocks.iter_mut().zip(&stats) {
            for w in [
                &mut block.wq,
                &mut block.wk,
                &mut block.wv,
                &mut block.wo,
                &mut block.w_gate,
                &mut block.w_up,
                &mut block.w_down,
            ] {
                w.quantize()?;
            }
            block.attn_quant = Some(AttnQuant::from_max_abs(s[0], s[1], s[2]));
        }
        self.weights.lm_head.quantize()
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        let vocab = self.weights.embed.nrows();
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::arg(
                "tokens",
                format!("token {t} is outside the vocabulary of {vocab}"),
            ));
        }
        Ok(self.weights.embed.select(Axis(0), tokens))
    }

    /// Runs every decoder block over `x: [tokens, d_h]`, appending to `cache`.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        cache: &mut KvCache,
        path: ExecPath,
    ) -> Result<StepOutput> {
        if cache.n_layers() != self.weights.blocks.len() {
            return Err(Error::Shape(format!(
                "cache has {} layers, model has {}",
                cache.n_layers(),
                self.weights.blocks.len()
            )));
        }
        let mut h = x.clone();
        let mut layer_checksums = Vec::with_capacity(self.weights.blocks.len());
        for (l, block) in self.weights.blocks.iter().enumerate() {
            h = decoder_block_forward(&h, block, &self.spec, cache, l, path)?;
            layer_checksums.push(h.sum());
        }
        Ok(StepOutput {
            hidden: h,
            layer_checksums,
        })
    }

    /// Final norm then the vocabulary projection.
    pub fn logits(&self, hidden: &Array2<f64>, path: ExecPath) -> Result<Array2<f64>> {
        let h = path.round(rmsnorm_rows(
            hidden,
            &self.weights.final_norm,
            self.spec.norm_eps,
        )?);
        linear_forward(&h, &self.weights.lm_head, path)
    }

    /// Greedy generation: one prefill pass over `prompt`, then `n_new`
    /// single-token decode steps. Returns the generated tokens and the
    /// prefill step's output.
    pub fn generate(
        &self,
        prompt: &[usize],
        n_new: usize,
        path: ExecPath,
    ) -> Result<(Vec<usize>, StepOutput)> {
        if prompt.is_empty() {
            return Err(Error::arg("prompt", "empty"));
        }
        let mut cache = self.new_cache(prompt.len() + n_new);
        let prefill = self.forward(&self.embed(prompt)?, &mut cache, path)?;
        let mut out = Vec::with_capacity(n_new);
        let mut last = prefill
            .hidden
            .row(prefill.hidden.nrows() - 1)
            .to_owned()
            .insert_axis(Axis(0));
        for _ in 0..n_new {
            let logits = self.logits(&last, path)?;
            let tok = super::greedy_sample(logits.row(0).as_slice().expect("contiguous"))?;
            out.push(tok);
            if out.len() == n_new {
                break;
            }
            last = self.forward(&self.embed(&[tok])?, &mut cache, path)?.hidden;
        }
        Ok((out, prefill))
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let row = |v: &[f64]| {
            Tensor::real(Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row"))
        };
        let mut out = vec![(
            "embed".to_string(),
            Tensor::real(self.weights.embed.clone()),
        )];
        for (l, b) in self.weights.blocks.iter().enumerate() {
            let items = [
                row(&b.attn_norm),
                Tensor::real(b.wq.float.clone()),
                Tensor::real(b.wk.float.clone()),
                Tensor::real(b.wv.float.clone()),
                Tensor::real(b.wo.float.clone()),
                row(&b.ffn_norm),
                Tensor::real(b.w_gate.float.clone()),
                Tensor::real(b.w_up.float.clone()),
                Tensor::real(b.w_down.float.clone()),
            ];
            for (name, t) in BLOCK_NAMES.iter().zip(items) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), row(&self.weights.final_norm)));
        out.push((
            "lm_head".into(),
            Tensor::real(self.weights.lm_head.float.clone()),
        ));
        out
    }

    /// Writes the float weights as a tensor container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        write_container(&mut buf, &self.named_tensors())?;
        std::fs::write(path.as_ref(), buf).map_err(|source| Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        })
    }

    /// Reads float weights written by [`Model::save`], checking every shape
    /// against `spec`.
    pub fn load(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Model> {
        spec.validate()?;
        let bytes = std::fs::read(path.as_ref()).map_err(|source| Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        })?;
        let mut entries: std::collections::BTreeMap<String, Tensor> =
            read_container(&mut bytes.as_slice())?.into_iter().collect();
        let d = spec.d_h as usize;
        let dkv = spec.d_kv as usize;
        let dffn = spec.d_ffn as usize;
        let vocab = spec.d_lm_head as usize;
        let mut take = |name: String, shape: (usize, usize)| -> Result<Array2<f64>> {
            let t = entries
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("weight container has no tensor '{name}'")))?;
            let data = match t {
                Tensor::Real { data, .. } => data,
                Tensor::Quantized { .. } => {
                    return Err(Error::Format(format!("'{name}' must be a real tensor")))
                }
            };
            if data.dim() != shape {
                return Err(Error::Shape(format!(
                    "'{name}' is {:?}, expected {shape:?}",
                    data.dim()
                )));
            }
            Ok(data)
        };
        let embed = take("embed".into(), (vocab, d))?;
        let mut blocks = Vec::new();
        for l in 0..spec.n_layers as usize {
            let mut get = |name: &str, shape| take(format!("layers.{l}.{name}"), shape);
            blocks.push(BlockWeights {
                attn_norm: get("attn_norm", (1, d))?.into_raw_vec_and_offset().0,
                wq: LinearWeight::new(get("wq", (d, d))?),
                wk: LinearWeight::new(get("wk", (d, dkv))?),
                wv: LinearWeight::new(get("wv", (d, dkv))?),
                wo: LinearWeight::new(get("wo", (d, d))?),
                ffn_norm: get("ffn_norm", (1, d))?.into_raw_vec_and_offset().0,
                w_gate: LinearWeight::new(get("w_gate", (d, dffn))?),
                w_up: LinearWeight::new(get("w_up", (d, dffn))?),
                w_down: LinearWeight::new(get("w_down", (dffn, d))?),
                attn_quant: None,
            });
        }
        let final_norm = take("final_norm".into(), (1, d))?
            .into_raw_vec_and_offset()
            .0;
        let lm_head = LinearWeight::new(take("lm_head".into(), (d, vocab))?);
        Ok(Model {
            spec: spec.clone(),
            weights: ModelWeights {
                embed,
                blocks,
                final_norm,
                lm_head,
            },
        })
    }
}
