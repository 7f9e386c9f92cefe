//! Hierarchical memory plug-in: segment the prompt, summarize each segment,
//! retrieve from a bounded queue of past memories, and prefill an augmented
//! prompt per segment.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelSpec, PrefillConfig};
use crate::error::{Error, Result};
use crate::exact::{int, Exact};
use crate::kernels::{self, probe, ExecPath, Model};
use crate::perf::{prefill_stage_latency, LatencyEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HmtConfig {
    pub segment_len: u64,
    /// Capacity N of the memory queue.
    pub memory_queue_len: u64,
    pub bp: u64,
    pub wp_mem_attn: u64,
    /// Tokens of each segment fed to the summary pass; defaults to half.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_half: Option<u64>,
    /// Tokens carried from the previous segment; defaults to half.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_term_len: Option<u64>,
}

impl HmtConfig {
    pub fn new(segment_len: u64, memory_queue_len: u64, bp: u64, wp_mem_attn: u64) -> Self {
        HmtConfig {
            segment_len,
            memory_queue_len,
            bp,
            wp_mem_attn,
            summary_half: None,
            short_term_len: None,
        }
    }

    pub fn summary_half(&self) -> u64 {
        self.summary_half.unwrap_or(self.segment_len / 2)
    }

    pub fn short_term_len(&self) -> u64 {
        self.short_term_len.unwrap_or(self.segment_len / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len < 1 {
            return Err(Error::validation("segment_len", "must be >= 1"));
        }
        if self.memory_queue_len < 1 {
            return Err(Error::validation("memory_queue_len", "must be >= 1"));
        }
        if self.bp < 1 {
            return Err(Error::validation("bp", "must be >= 1"));
        }
        if self.wp_mem_attn < 1 {
            return Err(Error::validation("wp_mem_attn", "must be >= 1"));
        }
        if self.summary_half() > self.segment_len {
            return Err(Error::validation(
                "summary_half",
                format!(
                    "{} exceeds segment_len={}",
                    self.summary_half(),
                    self.segment_len
                ),
            ));
        }
        if self.short_term_len() > self.segment_len {
            return Err(Error::validation(
                "short_term_len",
                format!(
                    "{} exceeds segment_len={}",
                    self.short_term_len(),
                    self.segment_len
                ),
            ));
        }
        Ok(())
    }
}

/// Bounded FIFO of memory embeddings; the oldest entry is evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    items: VecDeque<Vec<f64>>,
}

impl MemoryQueue {
    pub fn new(capacity: usize) -> Self {
        MemoryQueue {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    /// Appends `mem`, returning the evicted entry when full.
    pub fn push(&mut self, mem: Vec<f64>) -> Option<Vec<f64>> {
        if self.capacity == 0 {
            return Some(mem);
        }
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(mem);
        evicted
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.items.iter()
    }
}

pub fn split_segments<'a>(tokens: &'a [usize], cfg: &HmtConfig) -> Result<Vec<&'a [usize]>> {
    if cfg.segment_len < 1 {
        return Err(Error::validation("segment_len", "must be >= 1"));
    }
    if tokens.is_empty() {
        return Err(Error::arg("tokens", "empty"));
    }
    Ok(tokens.chunks(cfg.segment_len as usize).collect())
}

fn last_row(x: &Array2<f64>) -> Vec<f64> {
    x.row(x.nrows() - 1).to_vec()
}

fn run_fresh(model: &Model, x: &Array2<f64>, path: ExecPath) -> Result<Array2<f64>> {
    let mut cache = model.new_cache(x.nrows());
    Ok(model.forward(x, &mut cache, path)?.hidden)
}

/// `S_n`: backbone output at the topic position of
/// `[first summary_half tokens ‖ topic]`.
pub fn summarize_segment(
    seg: &[usize],
    topic: &[f64],
    model: &Model,
    cfg: &HmtConfig,
    path: ExecPath,
) -> Result<Vec<f64>> {
    if topic.len() != model.spec.d_h as usize {
        return Err(Error::Shape(format!(
            "topic has {} features, d_h={}",
            topic.len(),
            model.spec.d_h
        )));
    }
    let half = (cfg.summary_half() as usize).min(seg.len());
    let topic = Array2::from_shape_vec((1, topic.len()), topic.to_vec()).expect("row");
    let x = concatenate![Axis(0), model.embed(&seg[..half])?, topic];
    Ok(last_row(&run_fresh(model, &x, path)?))
}

/// Single-query attention of `s_n` over the queue; zero when empty.
pub fn retrieve_memory(s_n: &[f64], queue: &MemoryQueue) -> Result<Vec<f64>> {
    let d = s_n.len();
    if queue.is_empty() {
        return Ok(vec![0.0; d]);
    }
    if let Some(m) = queue.iter().find(|m| m.len() != d) {
        return Err(Error::Shape(format!(
            "memory has {} features, query has {d}",
            m.len()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = queue
        .iter()
        .map(|m| m.iter().zip(s_n).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let w = kernels::softmax_row(&scores, scores.len())?;
    let mut out = vec![0.0; d];
    for (wi, m) in w.iter().zip(queue.iter()) {
        for (o, v) in out.iter_mut().zip(m) {
            *o += wi * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutput {
    pub summary: Vec<f64>,
    pub retrieved: Vec<f64>,
    pub memory: Vec<f64>,
    /// `1 + short-term slice + segment`.
    pub prompt_len: usize,
    pub summary_len: usize,
}

/// Summarize, retrieve, then prefill `[P_n ‖ prev_short_term ‖ seg]`. The
/// output at the last position becomes `Mem_n` and is pushed on the queue.
pub fn process_segment(
    seg: &[usize],
    prev_short_term: &[usize],
    queue: &mut MemoryQueue,
    model: &Model,
    topic: &[f64],
    cfg: &HmtConfig,
    path: ExecPath,
) -> Result<SegmentOutput> {
    if seg.is_empty() {
        return Err(Error::arg("seg", "empty"));
    }
    let summary = summarize_segment(seg, topic, model, cfg, path)?;
    let retrieved = retrieve_memory(&summary, queue)?;
    let p = Array2::from_shape_vec((1, retrieved.len()), retrieved.clone()).expect("row");
    let mut tokens = prev_short_term.to_vec();
    tokens.extend_from_slice(seg);
    let x = concatenate![Axis(0), p, model.embed(&tokens)?];
    let memory = last_row(&run_fresh(model, &x, path)?);
    queue.push(memory.clone());
    Ok(SegmentOutput {
        summary,
        retrieved,
        memory,
        prompt_len: x.nrows(),
        summary_len: (cfg.summary_half() as usize).min(seg.len()) + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentRecord {
    pub index: usize,
    pub tokens: usize,
    pub prompt_len: usize,
    pub summary_len: usize,
    pub queue_len: usize,
    pub memory_checksum: f64,
    pub retrieved_checksum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineRun {
    pub segments: Vec<SegmentRecord>,
    pub max_queue_len: usize,
    /// Longest attention-score row allocated during the run.
    pub peak_score_len: usize,
    /// Tokens pushed through the backbone (summary plus augmented prompts).
    pub backbone_tokens: usize,
}

/// Runs every segment of `tokens` in order on the calling thread.
pub fn run_pipeline(
    tokens: &[usize],
    model: &Model,
    topic: &[f64],
    cfg: &HmtConfig,
    path: ExecPath,
) -> Result<PipelineRun> {
    cfg.validate()?;
    let segments = split_segments(tokens, cfg)?;
    let mut queue = MemoryQueue::new(cfg.memory_queue_len as usize);
    let short = cfg.short_term_len() as usize;
    let mut prev: &[usize] = &[];
    let mut records = Vec::with_capacity(segments.len());
    let mut max_queue_len = 0;
    let mut backbone_tokens = 0;
    probe::reset();
    for (i, seg) in segments.iter().enumerate() {
        let out = process_segment(seg, prev, &mut queue, model, topic, cfg, path)?;
        max_queue_len = max_queue_len.max(queue.len());
        backbone_tokens += out.prompt_len + out.summary_len;
        records.push(SegmentRecord {
            index: i,
            tokens: seg.len(),
            prompt_len: out.prompt_len,
            summary_len: out.summary_len,
            queue_len: queue.len(),
            memory_checksum: out.memory.iter().sum(),
            retrieved_checksum: out.retrieved.iter().sum(),
        });
        prev = &seg[seg.len().saturating_sub(short)..];
    }
    Ok(PipelineRun {
        segments: records,
        max_queue_len,
        peak_score_len: probe::peak_score_len(),
        backbone_tokens,
    })
}

/// Memory-attention cycles per segment: two N×d_h matrix-vector products
/// (scores and weighted sum) at `wp_mem_attn` channels per cycle.
pub fn plugin_cycles(model: &ModelSpec, cfg: &HmtConfig) -> Exact {
    int(2 * cfg.memory_queue_len * model.d_h) / int(cfg.wp_mem_attn.max(1))
}

/// Cost of one full segment: summary prefill, augmented prefill (with a
/// short-term slice) and the plug-in's memory attention.
pub fn hmt_segment_cost(
    model: &ModelSpec,
    prefill_cfg: &PrefillConfig,
    cfg: &HmtConfig,
    freq_hz: u64,
) -> Result<LatencyEstimate> {
    cfg.validate()?;
    let summary =
        prefill_stage_latency(model, prefill_cfg, cfg.summary_half() + 1, freq_hz)?.cycles;
    let augmented = prefill_stage_latency(
        model,
        prefill_cfg,
        1 + cfg.short_term_len() + cfg.segment_len,
        freq_hz,
    )?
    .cycles;
    let plugin = plugin_cycles(model, cfg);
    let mut est = LatencyEstimate::new(summary + augmented + plugin, freq_hz);
    est.breakdown.insert("summary_prefill".into(), summary);
    est.breakdown.insert("augmented_prefill".into(), augmented);
    est.breakdown.insert("plugin_mem_attn".into(), plugin);
    Ok(est)
}

/// Plug-in term alone, in seconds.
pub fn plugin_seconds(model: &ModelSpec, cfg: &HmtConfig, freq_hz: u64) -> Exact {
    if freq_hz == 0 {
        return Exact::zero();
    }
    plugin_cycles(model, cfg) / int(freq_hz)
}

/// Topic embedding from a seeded ChaCha stream, uniform in ±1.
pub fn random_topic(d_h: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x74_6f70_6963);
    (0..d_h).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub const TOPIC_TENSOR: &str = "hmt.topic";

/// Reads the `hmt.topic` entry of a weight container, if present.
pub fn load_topic(path: impl AsRef<Path>, d_h: usize) -> Result<Option<Vec<f64>>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|source| Error::Io {
        path: path.as_ref().to_path_buf(),
        source,
    })?;
    let entries = crate::quant::tensorfile::read_container(&mut bytes.as_slice())?;
    let Some((_, t)) = entries.into_iter().find(|(n, _)| n == TOPIC_TENSOR) else {
        return Ok(None);
    };
    let data = t
        .as_real()
        .ok_or_else(|| Error::Format(format!("'{TOPIC_TENSOR}' must be a real tensor")))?;
    if data.dim() != (1, d_h) {
        return Err(Error::Shape(format!(
            "'{TOPIC_TENSOR}' is {:?}, expected (1, {d_h})",
            data.dim()
        )));
    }
    Ok(Some(data.iter().copied().collect()))
}
