//! Analytical latency and bandwidth bounds for the prefill and decode
//! architectures, energy efficiency, and the long-context projection.
//!
//! Every formula is evaluated in exact rational arithmetic. A latency carries
//! its exact cycle count, the ceiling of that count, and a named breakdown of
//! the terms it was assembled from. Pipelined stages compose by `max()`
//! (the bottleneck stage sets the pace); fill and drain are ignored.

use std::collections::BTreeMap;

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::config::{DecodeConfig, DeviceSpec, ModelSpec, Precision, PrefillConfig};
use crate::error::{Error, Result};
use crate::exact::{self, int, ratio, Exact};
use crate::hmt::{self, HmtConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyEstimate {
    pub cycles: Exact,
    pub freq_hz: u64,
    /// Named terms, already scaled to whole-stage cycles.
    pub breakdown: BTreeMap<String, Exact>,
    /// Names of the `max()` candidates that attain the maximum.
    pub binding: Vec<String>,
}

impl LatencyEstimate {
    pub fn new(cycles: Exact, freq_hz: u64) -> Self {
        LatencyEstimate {
            cycles,
            freq_hz,
            breakdown: BTreeMap::new(),
            binding: Vec::new(),
        }
    }

    pub fn cycles_ceil(&self) -> i128 {
        exact::ceil(&self.cycles)
    }

    pub fn seconds(&self) -> Exact {
        self.cycles / int(self.freq_hz)
    }

    pub fn seconds_f64(&self) -> f64 {
        exact::to_f64(&self.seconds())
    }

    pub fn summary(&self) -> LatencySummary {
        LatencySummary {
            cycles: self.cycles_ceil(),
            cycles_exact: exact::render(&self.cycles),
            freq_hz: self.freq_hz,
            seconds: self.seconds_f64(),
            seconds_exact: exact::render(&self.seconds()),
            breakdown: self
                .breakdown
                .iter()
                .map(|(k, v)| (k.clone(), exact::render(v)))
                .collect(),
            binding: self.binding.clone(),
        }
    }
}

/// Serializable view of a [`LatencyEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub cycles: i128,
    pub cycles_exact: String,
    pub freq_hz: u64,
    pub seconds: f64,
    pub seconds_exact: String,
    pub breakdown: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub binding: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthEstimate {
    /// Total demand in bytes per second.
    pub bytes_per_second: Exact,
    pub freq_hz: u64,
    pub contributions: BTreeMap<String, Exact>,
}

impl BandwidthEstimate {
    pub fn from_contributions(freq_hz: u64, per_cycle: &[(&str, Exact)]) -> Self {
        let contributions: BTreeMap<String, Exact> = per_cycle
            .iter()
            .map(|(k, v)| (k.to_string(), *v * int(freq_hz)))
            .collect();
        let total = contributions.values().fold(Exact::zero(), |a, v| a + v);
        BandwidthEstimate {
            bytes_per_second: total,
            freq_hz,
            contributions,
        }
    }

    pub fn bytes_per_cycle(&self) -> Exact {
        self.bytes_per_second / int(self.freq_hz)
    }

    pub fn gb_per_s(&self) -> f64 {
        exact::to_f64(&self.bytes_per_second) / 1e9
    }

    pub fn oversubscribes(&self, peak_bytes_per_s: u64) -> bool {
        self.bytes_per_second > int(peak_bytes_per_s)
    }

    pub fn summary(&self, peak_bytes_per_s: Option<u64>) -> BandwidthSummary {
        BandwidthSummary {
            bytes_per_second: exact::to_f64(&self.bytes_per_second),
            bytes_per_second_exact: exact::render(&self.bytes_per_second),
            bytes_per_cycle_exact: exact::render(&self.bytes_per_cycle()),
            contributions: self
                .contributions
                .iter()
                .map(|(k, v)| (k.clone(), exact::render(v)))
                .collect(),
            peak_bytes_per_s,
            oversubscribed: peak_bytes_per_s.map(|p| self.oversubscribes(p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSummary {
    pub bytes_per_second: f64,
    pub bytes_per_second_exact: String,
    pub bytes_per_cycle_exact: String,
    pub contributions: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_bytes_per_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oversubscribed: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadShape {
    pub l_p: u64,
    pub l_d: u64,
}

impl WorkloadShape {
    pub fn new(l_p: u64, l_d: u64) -> Result<Self> {
        if l_p == 0 && l_d == 0 {
            return Err(Error::arg("workload", "l_p and l_d are both zero"));
        }
        Ok(WorkloadShape { l_p, l_d })
    }

    pub fn total_tokens(&self) -> u64 {
        self.l_p + self.l_d
    }
}

fn at_least_one(name: &'static str, v: u64) -> Result<()> {
    if v == 0 {
        Err(Error::arg(name, "must be >= 1"))
    } else {
        Ok(())
    }
}

/// Cycles of one prefill linear layer on a TP×WP systolic array:
/// `l_p · d_in · d_out / (TP · WP)`.
pub fn prefill_linear_latency(
    l_p: u64,
    d_in: u64,
    d_out: u64,
    tp: u64,
    wp: u64,
    freq_hz: u64,
) -> Result<LatencyEstimate> {
    at_least_one("l_p", l_p)?;
    at_least_one("d_in", d_in)?;
    at_least_one("d_out", d_out)?;
    at_least_one("tp", tp)?;
    at_least_one("wp", wp)?;
    at_least_one("freq_hz", freq_hz)?;
    let cycles = Exact::new(
        l_p as i128 * d_in as i128 * d_out as i128,
        tp as i128 * wp as i128,
    );
    let mut est = LatencyEstimate::new(cycles, freq_hz);
    est.breakdown.insert("linear".into(), cycles);
    Ok(est)
}

/// Cycles of one decode linear layer: `l_d · d_in · d_out / WP`.
pub fn decode_linear_latency(
    l_d: u64,
    d_in: u64,
    d_out: u64,
    wp: u64,
    freq_hz: u64,
) -> Result<LatencyEstimate> {
    at_least_one("l_d", l_d)?;
    at_least_one("d_in", d_in)?;
    at_least_one("d_out", d_out)?;
    at_least_one("wp", wp)?;
    at_least_one("freq_hz", freq_hz)?;
    let cycles = Exact::new(l_d as i128 * d_in as i128 * d_out as i128, wp as i128);
    let mut est = LatencyEstimate::new(cycles, freq_hz);
    est.breakdown.insert("linear".into(), cycles);
    Ok(est)
}

/// Weight-streaming demand of one linear engine: `B_W · WP · F`.
pub fn linear_bandwidth(
    bytes_per_weight: Exact,
    wp: u64,
    freq_hz: u64,
) -> Result<BandwidthEstimate> {
    let precision = Precision::from_bytes_per_element(bytes_per_weight).ok_or_else(|| {
        Error::arg(
            "bytes_per_weight",
            format!(
                "unsupported width {} (expected 1/2, 1, 2 or 4)",
                exact::render(&bytes_per_weight)
            ),
        )
    })?;
    at_least_one("wp", wp)?;
    at_least_one("freq_hz", freq_hz)?;
    let name = format!("linear_{precision:?}").to_lowercase();
    Ok(BandwidthEstimate::from_contributions(
        freq_hz,
        &[(&name, bytes_per_weight * int(wp))],
    ))
}

/// Prefill stage bound:
///
/// ```text
/// T_p = (N·l_p/TP) · ( d_h·d_kv/WP_kqvo
///                      + max(d_h²/WP_kqvo, d_h·l_p/WP_mha, d_h·d_ffn/WP_ffn) )
/// ```
///
/// Breakdown keys: `kv_proj`, `max.kqvo`, `max.mha`, `max.ffn`.
pub fn prefill_stage_latency(
    model: &ModelSpec,
    cfg: &PrefillConfig,
    l_p: u64,
    freq_hz: u64,
) -> Result<LatencyEstimate> {
    for (name, v) in [
        ("tp", cfg.tp),
        ("wp_kqvo", cfg.wp_kqvo),
        ("wp_mha", cfg.wp_mha),
        ("wp_ffn", cfg.wp_ffn),
        ("freq_hz", freq_hz),
    ] {
        at_least_one(name, v)?;
    }
    let n = model.n_layers as i128;
    let d_h = model.d_h as i128;
    let d_kv = model.d_kv as i128;
    let d_ffn = model.d_ffn as i128;
    let lp = l_p as i128;

    let scale = Exact::new(n * lp, cfg.tp as i128);
    let kv = Exact::new(d_h * d_kv, cfg.wp_kqvo as i128) * scale;
    let candidates = [
        (
            "max.kqvo",
            Exact::new(d_h * d_h, cfg.wp_kqvo as i128) * scale,
        ),
        ("max.mha", Exact::new(d_h * lp, cfg.wp_mha as i128) * scale),
        (
            "max.ffn",
            Exact::new(d_h * d_ffn, cfg.wp_ffn as i128) * scale,
        ),
    ];
    Ok(assemble(kv, "kv_proj", &candidates, freq_hz))
}

/// Decode stage bound:
///
/// ```text
/// T_d = l_d · ( (N(2·d_h·d_kv + d_h² + 3·d_h·d_ffn) + d_h·d_lm_head) / WP_int4
///               + max(N·d_h²/WP_int4, N·d_h·(l_p + l_d/2)/WP_mha) )
/// ```
///
/// Breakdown keys: `linear_int4`, `max.o_proj`, `max.mha`.
pub fn decode_stage_latency(
    model: &ModelSpec,
    cfg: &DecodeConfig,
    l_p: u64,
    l_d: u64,
    freq_hz: u64,
) -> Result<LatencyEstimate> {
    at_least_one("l_d", l_d)?;
    for (name, v) in [
        ("bp", cfg.bp),
        ("wp_int4", cfg.wp_int4),
        ("wp_mha", cfg.wp_mha),
        ("freq_hz", freq_hz),
    ] {
        at_least_one(name, v)?;
    }
    let n = model.n_layers as i128;
    let d_h = model.d_h as i128;
    let d_kv = model.d_kv as i128;
    let d_ffn = model.d_ffn as i128;
    let d_lm = model.d_lm_head as i128;
    let ld = l_d as i128;
    let wp4 = cfg.wp_int4 as i128;

    let streamed = n * (2 * d_h * d_kv + d_h * d_h + 3 * d_h * d_ffn) + d_h * d_lm;
    let linear = Exact::new(streamed * ld, wp4);
    let avg_ctx = int(l_p) + ratio(ld, 2);
    let candidates = [
        ("max.o_proj", Exact::new(ld * n * d_h * d_h, wp4)),
        (
            "max.mha",
            avg_ctx * Exact::new(ld * n * d_h, cfg.wp_mha as i128),
        ),
    ];
    Ok(assemble(linear, "linear_int4", &candidates, freq_hz))
}

fn assemble(
    base: Exact,
    base_name: &str,
    candidates: &[(&str, Exact)],
    freq_hz: u64,
) -> LatencyEstimate {
    let max = exact::max_of(candidates.iter().map(|(_, v)| v));
    let mut est = LatencyEstimate::new(base + max, freq_hz);
    est.breakdown.insert(base_name.into(), base);
    for (name, v) in candidates {
        est.breakdown.insert((*name).into(), *v);
        if *v == max {
            est.binding.push((*name).into());
        }
    }
    est
}

/// Peak prefill demand:
/// `F · (B_int4·(2·WP_kqvo + 3·WP_ffn) + B_int8·2·WP_mha)`.
pub fn prefill_bandwidth(cfg: &PrefillConfig, freq_hz: u64) -> BandwidthEstimate {
    let b4 = Precision::Int4.bytes_per_element();
    let b8 = Precision::Int8.bytes_per_element();
    BandwidthEstimate::from_contributions(
        freq_hz,
        &[
            ("kqvo", b4 * int(2 * cfg.wp_kqvo)),
            ("ffn", b4 * int(3 * cfg.wp_ffn)),
            ("mha", b8 * int(2 * cfg.wp_mha)),
        ],
    )
}

/// Peak decode demand: `F · (B_int4·WP_int4 + 2·B_int8·WP_mha)`.
pub fn decode_bandwidth(cfg: &DecodeConfig, freq_hz: u64) -> BandwidthEstimate {
    let b4 = Precision::Int4.bytes_per_element();
    let b8 = Precision::Int8.bytes_per_element();
    BandwidthEstimate::from_contributions(
        freq_hz,
        &[
            ("linear_int4", b4 * int(cfg.wp_int4)),
            ("mha", b8 * int(2 * cfg.wp_mha)),
        ],
    )
}

/// Tokens per joule: `(l_p + l_d) / (seconds · avg_power_w)`.
pub fn tokens_per_joule(
    workload: &WorkloadShape,
    latency: &LatencyEstimate,
    device: &DeviceSpec,
) -> Result<f64> {
    if !(device.avg_power_w.is_finite() && device.avg_power_w > 0.0) {
        return Err(Error::arg("avg_power_w", "must be > 0"));
    }
    tokens_per_joule_raw(
        workload.total_tokens(),
        latency.seconds_f64(),
        device.avg_power_w,
    )
}

pub fn tokens_per_joule_raw(tokens: u64, seconds: f64, power_w: f64) -> Result<f64> {
    if seconds.is_nan() || seconds <= 0.0 {
        return Err(Error::arg("latency", "must be > 0"));
    }
    if power_w.is_nan() || power_w <= 0.0 {
        return Err(Error::arg("avg_power_w", "must be > 0"));
    }
    Ok(tokens as f64 / (seconds * power_w))
}

/// How the plug-in's per-segment cost enters the long-context projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PluginCost {
    /// The memory-attention term of [`hmt::hmt_segment_cost`].
    Modeled,
    /// A fixed per-segment time, converted to cycles at the projection clock.
    Seconds(Exact),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongContextComparison {
    pub vanilla: LatencyEstimate,
    pub hmt: LatencyEstimate,
    /// `vanilla / hmt`.
    pub speedup: Exact,
    pub segments: u64,
    /// HMT cost if each segment's summary prompt is also charged.
    pub hmt_with_summary: LatencyEstimate,
    pub speedup_with_summary: Exact,
}

/// Prefill of a `total_len` prompt processed whole versus split into HMT
/// segments. Each segment pays the prefill of its augmented prompt
/// (`[P_n ‖ short-term slice ‖ segment]`) plus the plug-in cost; the first
/// segment has no short-term slice and the last may be partial.
pub fn long_context_prefill_model(
    model: &ModelSpec,
    prefill_cfg: &PrefillConfig,
    hmt_cfg: &HmtConfig,
    total_len: u64,
    freq_hz: u64,
    plugin: PluginCost,
) -> Result<LongContextComparison> {
    hmt_cfg.validate()?;
    if total_len < hmt_cfg.segment_len {
        return Err(Error::arg(
            "total_len",
            format!(
                "{total_len} is shorter than segment_len={}",
                hmt_cfg.segment_len
            ),
        ));
    }
    let vanilla = prefill_stage_latency(model, prefill_cfg, total_len, freq_hz)?;

    let plugin_cycles = match plugin {
        PluginCost::Modeled => hmt::plugin_cycles(model, hmt_cfg),
        PluginCost::Seconds(s) => s * int(freq_hz),
    };

    let seg = hmt_cfg.segment_len;
    let full = total_len / seg;
    let tail = total_len % seg;
    let segments = full + u64::from(tail > 0);

    let mut augmented = Exact::zero();
    let mut summary = Exact::zero();
    for i in 0..segments {
        let len = if i < full { seg } else { tail };
        let short_term = if i == 0 {
            0
        } else {
            hmt_cfg.short_term_len().min(seg)
        };
        let aug_len = 1 + short_term + len;
        augmented += prefill_stage_latency(model, prefill_cfg, aug_len, freq_hz)?.cycles;
        let sum_len = hmt_cfg.summary_half().min(len) + 1;
        summary += prefill_stage_latency(model, prefill_cfg, sum_len, freq_hz)?.cycles;
    }
    let plugin_total = plugin_cycles * int(segments);

    let mut hmt_est = LatencyEstimate::new(augmented + plugin_total, freq_hz);
    hmt_est
        .breakdown
        .insert("augmented_prefill".into(), augmented);
    hmt_est.breakdown.insert("plugin".into(), plugin_total);

    let mut with_summary = LatencyEstimate::new(augmented + plugin_total + summary, freq_hz);
    with_summary.breakdown = hmt_est.breakdown.clone();
    with_summary
        .breakdown
        .insert("summary_prefill".into(), summary);

    let speedup = vanilla.cycles / hmt_est.cycles;
    let speedup_with_summary = vanilla.cycles / with_summary.cycles;
    Ok(LongContextComparison {
        vanilla,
        hmt: hmt_est,
        speedup,
        segments,
        hmt_with_summary: with_summary,
        speedup_with_summary,
    })
}
