//! Exhaustive design-space exploration over the parallelism knobs.
//!
//! Candidates are enumerated in lexicographic order, checked against the
//! device's bandwidth and (capped) resource budgets, and ranked by modeled
//! stage latency. Both constraints are non-decreasing in every knob, so once
//! a point fails, every point that is pointwise at least as large fails too;
//! with pruning on, those are skipped without evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archgraph::{DECODE_AUX_MODULES, PREFILL_AUX_MODULES};
use crate::config::{
    decode_engines, prefill_engines, validate_decode, validate_prefill, DecodeConfig, DeviceSpec,
    ModelSpec, PrefillConfig, ResourceCostModel, ResourceKind, Stage, StageConfig, TilingPolicy,
};
use crate::error::{Error, Result};
use crate::exact::{self, int, Exact};
use crate::perf::{
    decode_bandwidth, decode_stage_latency, prefill_bandwidth, prefill_stage_latency,
    BandwidthEstimate, BandwidthSummary, LatencyEstimate, LatencySummary,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefillSpace {
    pub tp: Vec<u64>,
    pub wp_kqvo: Vec<u64>,
    pub wp_mha: Vec<u64>,
    pub wp_ffn: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSpace {
    pub bp: Vec<u64>,
    pub wp_int4: Vec<u64>,
    pub wp_mha: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum SearchSpace {
    Prefill(PrefillSpace),
    Decode(DecodeSpace),
}

impl SearchSpace {
    pub fn stage(&self) -> Stage {
        match self {
            SearchSpace::Prefill(_) => Stage::Prefill,
            SearchSpace::Decode(_) => Stage::Decode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sets: Vec<(&str, &Vec<u64>)> = match self {
            SearchSpace::Prefill(s) => vec![
                ("tp", &s.tp),
                ("wp_kqvo", &s.wp_kqvo),
                ("wp_mha", &s.wp_mha),
                ("wp_ffn", &s.wp_ffn),
            ],
            SearchSpace::Decode(s) => vec![
                ("bp", &s.bp),
                ("wp_int4", &s.wp_int4),
                ("wp_mha", &s.wp_mha),
            ],
        };
        for (name, set) in sets {
            if set.is_empty() {
                return Err(Error::validation(name, "candidate set is empty"));
            }
            if set[0] == 0 {
                return Err(Error::validation(name, "candidates must be >= 1"));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::validation(
                    name,
                    "candidates must be strictly ascending",
                ));
            }
        }
        Ok(())
    }

    /// Size of the unfiltered Cartesian product.
    pub fn cardinality(&self) -> usize {
        match self {
            SearchSpace::Prefill(s) => {
                s.tp.len() * s.wp_kqvo.len() * s.wp_mha.len() * s.wp_ffn.len()
            }
            SearchSpace::Decode(s) => s.bp.len() * s.wp_int4.len() * s.wp_mha.len(),
        }
    }
}

/// `{v ≤ 4096 : v | dim}`, keeping only multiples of 8 above 8.
pub fn default_candidates(dim: u64) -> Vec<u64> {
    (1..=dim.min(4096))
        .filter(|v| dim.is_multiple_of(*v) && (*v <= 8 || v.is_multiple_of(8)))
        .collect()
}

pub fn default_prefill_space(model: &ModelSpec) -> PrefillSpace {
    PrefillSpace {
        tp: vec![1, 2, 4, 8, 16, 32, 64],
        wp_kqvo: default_candidates(num_integer::gcd(model.d_h, model.d_kv)),
        wp_mha: default_candidates(model.head_dim * model.n_kv_heads),
        wp_ffn: default_candidates(model.d_ffn),
    }
}

pub fn default_decode_space(model: &ModelSpec) -> DecodeSpace {
    DecodeSpace {
        bp: vec![1, 2, 4, 8, 16, 32, 64],
        wp_int4: default_candidates(model.d_h * model.d_kv),
        wp_mha: default_candidates(model.d_h),
    }
}

/// Prefill candidates passing the tiling rules, in lexicographic order.
pub fn enumerate_prefill(
    model: &ModelSpec,
    space: &PrefillSpace,
    policy: TilingPolicy,
) -> Result<Vec<PrefillConfig>> {
    SearchSpace::Prefill(space.clone()).validate()?;
    let mut out = Vec::new();
    for &tp in &space.tp {
        for &wk in &space.wp_kqvo {
            for &wm in &space.wp_mha {
                for &wf in &space.wp_ffn {
                    let c = PrefillConfig::new(tp, wk, wm, wf);
                    if validate_prefill(&c, model, policy).is_valid() {
                        out.push(c);
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptySpace(format!(
            "none of the {} prefill candidates satisfies the tiling rules",
            SearchSpace::Prefill(space.clone()).cardinality()
        )));
    }
    Ok(out)
}

/// Decode candidates passing the tiling rules, in lexicographic order.
pub fn enumerate_decode(
    model: &ModelSpec,
    space: &DecodeSpace,
    policy: TilingPolicy,
) -> Result<Vec<DecodeConfig>> {
    SearchSpace::Decode(space.clone()).validate()?;
    let mut out = Vec::new();
    for &bp in &space.bp {
        for &w4 in &space.wp_int4 {
            for &wm in &space.wp_mha {
                let c = DecodeConfig::new(bp, w4, wm);
                if validate_decode(&c, model, policy).is_valid() {
                    out.push(c);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptySpace(format!(
            "none of the {} decode candidates satisfies the tiling rules",
            SearchSpace::Decode(space.clone()).cardinality()
        )));
    }
    Ok(out)
}

pub fn enumerate_candidates(
    model: &ModelSpec,
    space: &SearchSpace,
    policy: TilingPolicy,
) -> Result<Vec<StageConfig>> {
    Ok(match space {
        SearchSpace::Prefill(s) => enumerate_prefill(model, s, policy)?
            .into_iter()
            .map(StageConfig::Prefill)
            .collect(),
        SearchSpace::Decode(s) => enumerate_decode(model, s, policy)?
            .into_iter()
            .map(StageConfig::Decode)
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DseOptions {
    /// Clock for latency and bandwidth; the device clock if absent.
    pub freq_hz: Option<u64>,
    pub policy: TilingPolicy,
    pub prune: bool,
    pub parallel: bool,
    /// Keep every feasible point (for CSV export).
    pub collect_points: bool,
}

impl Default for DseOptions {
    fn default() -> Self {
        DseOptions {
            freq_hz: None,
            policy: TilingPolicy::Ragged,
            prune: true,
            parallel: true,
            collect_points: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsePoint {
    pub config: StageConfig,
    pub cycles: Exact,
    pub bytes_per_second: Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DseResult {
    pub best: StageConfig,
    pub latency: LatencyEstimate,
    pub bandwidth: BandwidthEstimate,
    pub usage: BTreeMap<ResourceKind, f64>,
    pub feasible: usize,
    pub explored: usize,
    /// Candidates skipped by dominance pruning (all infeasible).
    pub pruned: usize,
    /// `1 − used/limit` per constraint for the chosen config.
    pub slack: BTreeMap<String, f64>,
    pub points: Vec<DsePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseSummary {
    pub best: StageConfig,
    pub latency: LatencySummary,
    pub bandwidth: BandwidthSummary,
    pub usage: BTreeMap<ResourceKind, f64>,
    pub feasible: usize,
    pub explored: usize,
    pub pruned: usize,
    pub slack: BTreeMap<String, f64>,
}

impl DseResult {
    pub fn summary(&self, peak_bytes_per_s: u64) -> DseSummary {
        DseSummary {
            best: self.best,
            latency: self.latency.summary(),
            bandwidth: self.bandwidth.summary(Some(peak_bytes_per_s)),
            usage: self.usage.clone(),
            feasible: self.feasible,
            explored: self.explored,
            pruned: self.pruned,
            slack: self.slack.clone(),
        }
    }
}

struct Check {
    bandwidth: BandwidthEstimate,
    usage: BTreeMap<ResourceKind, f64>,
    slack: BTreeMap<String, f64>,
    /// Worst violated constraint: (used/limit, name, detail).
    worst: Option<(f64, String, String)>,
}

fn check_constraints(
    bandwidth: BandwidthEstimate,
    usage: BTreeMap<ResourceKind, f64>,
    device: &DeviceSpec,
    cost: &ResourceCostModel,
) -> Check {
    let mut slack = BTreeMap::new();
    let mut worst: Option<(f64, String, String)> = None;
    let mut note = |ratio: f64, name: String, detail: String, violated: bool| {
        if violated && worst.as_ref().is_none_or(|w| ratio > w.0) {
            worst = Some((ratio, name, detail));
        }
    };
    let peak = device.peak_bw_bytes_per_s;
    let bw_ratio = exact::to_f64(&(bandwidth.bytes_per_second / int(peak.max(1))));
    slack.insert("bandwidth".to_string(), 1.0 - bw_ratio);
    note(
        bw_ratio,
        "bandwidth".into(),
        format!(
            "needs {:.3} GB/s, peak {:.3} GB/s",
            bandwidth.gb_per_s(),
            peak as f64 / 1e9
        ),
        bandwidth.oversubscribes(peak),
    );
    for (kind, used) in &usage {
        let limit = cost.cap_fraction * device.budget(*kind) as f64;
        let ratio = if limit > 0.0 {
            used / limit
        } else if *used > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        slack.insert(format!("resource.{kind}"), 1.0 - ratio);
        note(
            ratio,
            format!("resource.{kind}"),
            format!("uses {used:.1} of {limit:.1}"),
            *used > limit,
        );
    }
    Check {
        bandwidth,
        usage,
        slack,
        worst,
    }
}

struct Best {
    cfg: StageConfig,
    latency: LatencyEstimate,
    check: Check,
}

#[derive(Default)]
struct Partial {
    best: Option<Best>,
    feasible: usize,
    pruned: usize,
    /// Closest-to-feasible failure: (worst ratio, key, constraint, detail).
    closest: Option<(f64, Vec<u64>, String, String)>,
    points: Vec<DsePoint>,
    error: Option<Error>,
}

fn key(cfg: &StageConfig) -> Vec<u64> {
    match cfg {
        StageConfig::Prefill(c) => c.as_array().to_vec(),
        StageConfig::Decode(c) => c.as_array().to_vec(),
    }
}

fn better(a: &Best, b: &Best) -> bool {
    a.latency.cycles < b.latency.cycles
        || (a.latency.cycles == b.latency.cycles && key(&a.cfg) < key(&b.cfg))
}

fn merge(mut a: Partial, b: Partial) -> Partial {
    a.best = match (a.best, b.best) {
        (Some(x), Some(y)) => Some(if better(&y, &x) { y } else { x }),
        (x, y) => x.or(y),
    };
    a.feasible += b.feasible;
    a.pruned += b.pruned;
    a.closest = match (a.closest, b.closest) {
        (Some(x), Some(y)) => Some(if (y.0, &y.1) < (x.0, &x.1) { y } else { x }),
        (x, y) => x.or(y),
    };
    a.points.extend(b.points);
    a.error = a.error.or(b.error);
    a
}

fn dominates(p: &[u64], q: &[u64]) -> bool {
    p.iter().zip(q).all(|(a, b)| a >= b)
}

fn scan<F>(chunk: &[StageConfig], opts: &DseOptions, eval: &F) -> Partial
where
    F: Fn(&StageConfig) -> Result<(Check, Option<LatencyEstimate>)>,
{
    let mut part = Partial::default();
    let mut failed: Vec<Vec<u64>> = Vec::new();
    for cfg in chunk {
        let k = key(cfg);
        if opts.prune && failed.iter().any(|f| dominates(&k, f)) {
            part.pruned += 1;
            continue;
        }
        let (check, latency) = match eval(cfg) {
            Ok(v) => v,
            Err(e) => {
                part.error.get_or_insert(e);
                return part;
            }
        };
        if let Some((ratio, name, detail)) = &check.worst {
            if part
                .closest
                .as_ref()
                .is_none_or(|c| (*ratio, &k) < (c.0, &c.1))
            {
                part.closest = Some((*ratio, k.clone(), name.clone(), detail.clone()));
            }
            if opts.prune {
                failed.retain(|f| !dominates(f, &k));
                failed.push(k);
            }
            continue;
        }
        let latency = latency.expect("feasible points carry a latency");
        part.feasible += 1;
        if opts.collect_points {
            part.points.push(DsePoint {
                config: *cfg,
                cycles: latency.cycles,
                bytes_per_second: check.bandwidth.bytes_per_second,
            });
        }
        let cand = Best {
            cfg: *cfg,
            latency,
            check,
        };
        if part.best.as_ref().is_none_or(|b| better(&cand, b)) {
            part.best = Some(cand);
        }
    }
    part
}

fn search<F>(cands: Vec<StageConfig>, opts: &DseOptions, eval: F) -> Result<DseResult>
where
    F: Fn(&StageConfig) -> Result<(Check, Option<LatencyEstimate>)> + Sync,
{
    let explored = cands.len();
    let chunk = 512;
    let parts: Vec<Partial> = if opts.parallel {
        cands
            .par_chunks(chunk)
            .map(|c| scan(c, opts, &eval))
            .collect()
    } else {
        cands.chunks(chunk).map(|c| scan(c, opts, &eval)).collect()
    };
    let total = parts.into_iter().fold(Partial::default(), merge);
    if let Some(e) = total.error {
        return Err(e);
    }
    match total.best {
        Some(b) => Ok(DseResult {
            best: b.cfg,
            latency: b.latency,
            bandwidth: b.check.bandwidth,
            usage: b.check.usage,
            feasible: total.feasible,
            explored,
            pruned: total.pruned,
            slack: b.check.slack,
            points: total.points,
        }),
        None => {
            let (_, k, constraint, detail) =
                total.closest.expect("infeasible points were recorded");
            Err(Error::Infeasible {
                constraint,
                detail: format!("{detail} at {k:?}, the closest of {explored} candidates"),
            })
        }
    }
}

fn empty_to_infeasible(e: Error) -> Error {
    match e {
        Error::EmptySpace(detail) => Error::Infeasible {
            constraint: "tiling".into(),
            detail,
        },
        e => e,
    }
}

/// Fastest feasible prefill configuration at prompt length `l_p`.
pub fn optimize_prefill(
    model: &ModelSpec,
    device: &DeviceSpec,
    cost: &ResourceCostModel,
    space: &PrefillSpace,
    l_p: u64,
    opts: &DseOptions,
) -> Result<DseResult> {
    model.validate()?;
    device.validate()?;
    cost.validate()?;
    let freq = opts.freq_hz.unwrap_or(device.freq_hz);
    let cands = enumerate_prefill(model, space, opts.policy).map_err(empty_to_infeasible)?;
    let cands = cands.into_iter().map(StageConfig::Prefill).collect();
    search(cands, opts, |c| {
        let StageConfig::Prefill(cfg) = c else {
            unreachable!()
        };
        let usage = cost.usage(&prefill_engines(cfg), PREFILL_AUX_MODULES)?;
        let check = check_constraints(prefill_bandwidth(cfg, freq), usage, device, cost);
        let lat = match check.worst {
            None => Some(prefill_stage_latency(model, cfg, l_p, freq)?),
            Some(_) => None,
        };
        Ok((check, lat))
    })
}

/// Fastest feasible decode configuration for `l_p` prompt and `l_d`
/// generated tokens.
pub fn optimize_decode(
    model: &ModelSpec,
    device: &DeviceSpec,
    cost: &ResourceCostModel,
    space: &DecodeSpace,
    l_p: u64,
    l_d: u64,
    opts: &DseOptions,
) -> Result<DseResult> {
    model.validate()?;
    device.validate()?;
    cost.validate()?;
    let freq = opts.freq_hz.unwrap_or(device.freq_hz);
    let cands = enumerate_decode(model, space, opts.policy).map_err(empty_to_infeasible)?;
    let cands = cands.into_iter().map(StageConfig::Decode).collect();
    search(cands, opts, |c| {
        let StageConfig::Decode(cfg) = c else {
            unreachable!()
        };
        let usage = cost.usage(&decode_engines(cfg), DECODE_AUX_MODULES)?;
        let check = check_constraints(decode_bandwidth(cfg, freq), usage, device, cost);
        let lat = match check.worst {
            None => Some(decode_stage_latency(model, cfg, l_p, l_d, freq)?),
            Some(_) => None,
        };
        Ok((check, lat))
    })
}

/// Feasible points as CSV. Prefill columns are
/// `tp,wp_kqvo,wp_mha,wp_ffn,cycles,cycles_exact,seconds,bandwidth_gb_per_s`;
/// decode columns replace the knobs with `bp,wp_int4,wp_mha`.
pub fn write_points_csv<W: Write>(
    w: W,
    stage: Stage,
    points: &[DsePoint],
    freq_hz: u64,
) -> Result<()> {
    let to_err = |e: csv::Error| Error::Format(e.to_string());
    let mut out = csv::Writer::from_writer(w);
    let knobs: &[&str] = match stage {
        Stage::Prefill => &["tp", "wp_kqvo", "wp_mha", "wp_ffn"],
        Stage::Decode => &["bp", "wp_int4", "wp_mha"],
    };
    let mut header: Vec<&str> = knobs.to_vec();
    header.extend(["cycles", "cycles_exact", "seconds", "bandwidth_gb_per_s"]);
    out.write_record(&header).map_err(to_err)?;
    for p in points {
        let mut row: Vec<String> = key(&p.config).iter().map(u64::to_string).collect();
        row.push(exact::ceil(&p.cycles).to_string());
        row.push(exact::render(&p.cycles));
        row.push(format!("{:.9}", exact::to_f64(&(p.cycles / int(freq_hz)))));
        row.push(format!("{:.6}", exact::to_f64(&p.bytes_per_second) / 1e9));
        out.write_record(&row).map_err(to_err)?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}
