//! Shared configuration types: devices, models, stage parallelism, quantization
//! and resource costs, plus JSON loading and validation.
//!
//! All units are base SI: Hz, bytes/s, bytes, watts. Integer-valued quantities
//! (frequency, bandwidth, capacity) are stored as integers so the analytical
//! models stay exact.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{ratio, Exact};
use crate::hmt::HmtConfig;

/// Environment variable naming the directory that relative config paths are
/// resolved against.
pub const CONFIG_DIR_ENV: &str = "FLEXSIM_CONFIG_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ResourceKind {
    Clb,
    Dsp,
    Lut,
    Ff,
    Bram,
    Uram,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 6] = [
        ResourceKind::Clb,
        ResourceKind::Dsp,
        ResourceKind::Lut,
        ResourceKind::Ff,
        ResourceKind::Bram,
        ResourceKind::Uram,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResourceKind::Clb => "CLB",
            ResourceKind::Dsp => "DSP",
            ResourceKind::Lut => "LUT",
            ResourceKind::Ff => "FF",
            ResourceKind::Bram => "BRAM",
            ResourceKind::Uram => "URAM",
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Numeric precision of a datapath or weight stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Int4,
    Int8,
    Fp16,
    Fp32,
}

impl Precision {
    /// Bytes per weight element; packed INT4 counts as exactly half a byte.
    pub fn bytes_per_element(self) -> Exact {
        match self {
            Precision::Int4 => ratio(1, 2),
            Precision::Int8 => ratio(1, 1),
            Precision::Fp16 => ratio(2, 1),
            Precision::Fp32 => ratio(4, 1),
        }
    }

    pub fn from_bytes_per_element(b: Exact) -> Option<Precision> {
        [
            Precision::Int4,
            Precision::Int8,
            Precision::Fp16,
            Precision::Fp32,
        ]
        .into_iter()
        .find(|p| p.bytes_per_element() == b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    pub freq_hz: u64,
    pub peak_bw_bytes_per_s: u64,
    pub hbm_capacity_bytes: u64,
    pub resource_budget: BTreeMap<ResourceKind, u64>,
    pub avg_power_w: f64,
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::validation("name", "must not be empty"));
        }
        positive("freq_hz", self.freq_hz)?;
        positive("peak_bw_bytes_per_s", self.peak_bw_bytes_per_s)?;
        positive("hbm_capacity_bytes", self.hbm_capacity_bytes)?;
        for kind in ResourceKind::ALL {
            match self.resource_budget.get(&kind) {
                None => {
                    return Err(Error::validation(
                        format!("resource_budget.{kind}"),
                        "missing; every resource kind used by the cost models is required",
                    ))
                }
                Some(0) => {
                    return Err(Error::validation(
                        format!("resource_budget.{kind}"),
                        "must be > 0",
                    ))
                }
                Some(_) => {}
            }
        }
        if !(self.avg_power_w.is_finite() && self.avg_power_w > 0.0) {
            return Err(Error::validation(
                "avg_power_w",
                format!("must be a finite value > 0, got {}", self.avg_power_w),
            ));
        }
        Ok(())
    }

    pub fn budget(&self, kind: ResourceKind) -> u64 {
        self.resource_budget.get(&kind).copied().unwrap_or(0)
    }

    /// AMD Alveo U280 (16 nm). Bandwidth, capacity and power from the board
    /// comparison table; logic budgets are the XCU280 device totals.
    pub fn u280() -> DeviceSpec {
        DeviceSpec {
            name: "U280".into(),
            freq_hz: 304_000_000,
            peak_bw_bytes_per_s: 460_000_000_000,
            hbm_capacity_bytes: 8_000_000_000,
            resource_budget: budget(&[
                (ResourceKind::Clb, 162_960),
                (ResourceKind::Dsp, 9_024),
                (ResourceKind::Lut, 1_303_680),
                (ResourceKind::Ff, 2_607_360),
                (ResourceKind::Bram, 2_016),
                (ResourceKind::Uram, 960),
            ]),
            avg_power_w: 75.0,
        }
    }

    /// AMD Versal V80 (7 nm).
    pub fn v80() -> DeviceSpec {
        DeviceSpec {
            name: "V80".into(),
            freq_hz: 300_000_000,
            peak_bw_bytes_per_s: 820_000_000_000,
            hbm_capacity_bytes: 32_000_000_000,
            resource_budget: budget(&[
                (ResourceKind::Clb, 321_776),
                (ResourceKind::Dsp, 10_848),
                (ResourceKind::Lut, 2_574_208),
                (ResourceKind::Ff, 5_148_416),
                (ResourceKind::Bram, 3_741),
                (ResourceKind::Uram, 1_925),
            ]),
            avg_power_w: 190.0,
        }
    }
}

fn budget(entries: &[(ResourceKind, u64)]) -> BTreeMap<ResourceKind, u64> {
    entries.iter().copied().collect()
}

fn positive(field: &str, v: u64) -> Result<()> {
    if v == 0 {
        Err(Error::validation(field, "must be > 0"))
    } else {
        Ok(())
    }
}

/// Decoder-only transformer dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub n_layers: u64,
    pub d_h: u64,
    pub d_kv: u64,
    pub d_ffn: u64,
    pub d_lm_head: u64,
    pub n_q_heads: u64,
    pub n_kv_heads: u64,
    pub head_dim: u64,
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        positive("n_layers", self.n_layers)?;
        positive("d_h", self.d_h)?;
        positive("d_kv", self.d_kv)?;
        positive("d_ffn", self.d_ffn)?;
        positive("d_lm_head", self.d_lm_head)?;
        positive("n_q_heads", self.n_q_heads)?;
        positive("n_kv_heads", self.n_kv_heads)?;
        positive("head_dim", self.head_dim)?;
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::validation(
                "n_kv_heads",
                format!(
                    "n_q_heads={} is not divisible by n_kv_heads={} (GQA grouping)",
                    self.n_q_heads, self.n_kv_heads
                ),
            ));
        }
        if self.head_dim * self.n_q_heads != self.d_h {
            return Err(Error::validation(
                "head_dim",
                format!(
                    "head_dim={} * n_q_heads={} != d_h={}",
                    self.head_dim, self.n_q_heads, self.d_h
                ),
            ));
        }
        if self.head_dim * self.n_kv_heads != self.d_kv {
            return Err(Error::validation(
                "d_kv",
                format!(
                    "n_kv_heads={} * head_dim={} != d_kv={}",
                    self.n_kv_heads, self.head_dim, self.d_kv
                ),
            ));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::validation(
                "rope_theta",
                "must be a finite value > 0",
            ));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(Error::validation("norm_eps", "must be a finite value >= 0"));
        }
        Ok(())
    }

    pub fn group_size(&self) -> u64 {
        self.n_q_heads / self.n_kv_heads
    }

    /// Llama-3.2-1B. Head counts are not given alongside the dimensions; 32
    /// query heads and 8 KV heads of width 64 reproduce d_h and d_kv.
    pub fn llama_3_2_1b() -> ModelSpec {
        ModelSpec {
            name: "llama-3.2-1b".into(),
            n_layers: 16,
            d_h: 2048,
            d_kv: 512,
            d_ffn: 8192,
            d_lm_head: 128_256,
            n_q_heads: 32,
            n_kv_heads: 8,
            head_dim: 64,
            rope_theta: 500_000.0,
            norm_eps: 1e-5,
        }
    }

    /// Desk-scale model used by the functional kernels.
    pub fn toy() -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            n_layers: 2,
            d_h: 64,
            d_kv: 32,
            d_ffn: 128,
            d_lm_head: 97,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PrefillConfig {
    pub tp: u64,
    pub wp_kqvo: u64,
    pub wp_mha: u64,
    pub wp_ffn: u64,
}

impl PrefillConfig {
    pub const fn new(tp: u64, wp_kqvo: u64, wp_mha: u64, wp_ffn: u64) -> Self {
        PrefillConfig {
            tp,
            wp_kqvo,
            wp_mha,
            wp_ffn,
        }
    }

    pub fn as_array(&self) -> [u64; 4] {
        [self.tp, self.wp_kqvo, self.wp_mha, self.wp_ffn]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub bp: u64,
    pub wp_int4: u64,
    pub wp_mha: u64,
}

impl DecodeConfig {
    pub const fn new(bp: u64, wp_int4: u64, wp_mha: u64) -> Self {
        DecodeConfig {
            bp,
            wp_int4,
            wp_mha,
        }
    }

    pub fn as_array(&self) -> [u64; 3] {
        [self.bp, self.wp_int4, self.wp_mha]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefill,
    Decode,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(Stage::Prefill),
            "decode" => Ok(Stage::Decode),
            other => Err(Error::arg(
                "stage",
                format!("expected prefill or decode, got '{other}'"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum StageConfig {
    Prefill(PrefillConfig),
    Decode(DecodeConfig),
}

/// How weight parallelism must tile the dimensions it streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TilingPolicy {
    /// Ragged last tiles are allowed (and show up as fractional cycles); a
    /// non-dividing WP is reported as a warning.
    #[default]
    Ragged,
    /// Every WP must divide each dimension it tiles.
    Even,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub field: String,
    pub passed: bool,
    pub severity: Severity,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn push(
        &mut self,
        name: impl Into<String>,
        field: impl Into<String>,
        passed: bool,
        severity: Severity,
        detail: impl Into<String>,
    ) {
        self.checks.push(Check {
            name: name.into(),
            field: field.into(),
            passed,
            severity,
            detail: detail.into(),
        });
    }

    pub fn is_valid(&self) -> bool {
        self.errors().next().is_none()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| !c.passed && c.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| !c.passed && c.severity == Severity::Warning)
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.checks.extend(other.checks);
    }

    /// First failing error check as an [`Error::Validation`].
    pub fn into_result(self) -> Result<()> {
        match self.errors().next() {
            None => Ok(()),
            Some(c) => Err(Error::validation(c.field.clone(), c.detail.clone())),
        }
    }
}

fn check_min_one(report: &mut ValidationReport, field: &str, v: u64) {
    report.push(
        format!("{field} >= 1"),
        field,
        v >= 1,
        Severity::Error,
        format!("{field}={v}"),
    );
}

fn check_tiling(
    report: &mut ValidationReport,
    policy: TilingPolicy,
    field: &str,
    wp: u64,
    dim_name: &str,
    dim: u64,
) {
    if wp == 0 {
        return;
    }
    report.push(
        format!("{field} <= {dim_name}"),
        field,
        wp <= dim,
        Severity::Error,
        format!("{field}={wp}, {dim_name}={dim}"),
    );
    let divides = dim.is_multiple_of(wp);
    let severity = match policy {
        TilingPolicy::Even => Severity::Error,
        TilingPolicy::Ragged => Severity::Warning,
    };
    report.push(
        format!("{field} divides {dim_name}"),
        field,
        divides,
        severity,
        if divides {
            format!("{dim_name}={dim} = {} tiles of {wp}", dim / wp)
        } else {
            format!(
                "{dim_name}={dim} leaves a ragged tile of {} for {field}={wp}",
                dim % wp
            )
        },
    );
}

pub fn validate_prefill(
    cfg: &PrefillConfig,
    model: &ModelSpec,
    policy: TilingPolicy,
) -> ValidationReport {
    let mut r = ValidationReport::default();
    check_min_one(&mut r, "tp", cfg.tp);
    check_min_one(&mut r, "wp_kqvo", cfg.wp_kqvo);
    check_min_one(&mut r, "wp_mha", cfg.wp_mha);
    check_min_one(&mut r, "wp_ffn", cfg.wp_ffn);
    check_tiling(&mut r, policy, "wp_kqvo", cfg.wp_kqvo, "d_kv", model.d_kv);
    check_tiling(&mut r, policy, "wp_kqvo", cfg.wp_kqvo, "d_h", model.d_h);
    check_tiling(&mut r, policy, "wp_ffn", cfg.wp_ffn, "d_ffn", model.d_ffn);
    check_tiling(
        &mut r,
        policy,
        "wp_mha",
        cfg.wp_mha,
        "head_dim*n_kv_heads",
        model.head_dim * model.n_kv_heads,
    );
    r
}

pub fn validate_decode(
    cfg: &DecodeConfig,
    model: &ModelSpec,
    policy: TilingPolicy,
) -> ValidationReport {
    let mut r = ValidationReport::default();
    check_min_one(&mut r, "bp", cfg.bp);
    check_min_one(&mut r, "wp_int4", cfg.wp_int4);
    check_min_one(&mut r, "wp_mha", cfg.wp_mha);
    if cfg.bp >= 1 {
        let ok = cfg.wp_int4.is_multiple_of(cfg.bp);
        r.push(
            "bp divides wp_int4",
            "bp",
            ok,
            Severity::Error,
            if ok {
                format!("{} arrays of {} PEs", cfg.bp, cfg.wp_int4 / cfg.bp)
            } else {
                format!("wp_int4={} is not a multiple of bp={}", cfg.wp_int4, cfg.bp)
            },
        );
    }
    check_tiling(
        &mut r,
        policy,
        "wp_int4",
        cfg.wp_int4,
        "d_h*d_kv",
        model.d_h * model.d_kv,
    );
    // One query token scores every cached position across all query heads,
    // so decode attention streams d_h channels per position.
    check_tiling(&mut r, policy, "wp_mha", cfg.wp_mha, "d_h", model.d_h);
    r
}

pub fn validate_stage_config(
    cfg: &StageConfig,
    model: &ModelSpec,
    policy: TilingPolicy,
) -> ValidationReport {
    match cfg {
        StageConfig::Prefill(c) => validate_prefill(c, model, policy),
        StageConfig::Decode(c) => validate_decode(c, model, policy),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantBits {
    #[serde(rename = "4")]
    Int4,
    #[serde(rename = "8")]
    Int8,
}

impl QuantBits {
    pub fn bits(self) -> u32 {
        match self {
            QuantBits::Int4 => 4,
            QuantBits::Int8 => 8,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            4 => Some(QuantBits::Int4),
            8 => Some(QuantBits::Int8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Static,
    Dynamic,
}

/// What a quantized tensor holds; constrains the legal granularities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Weight,
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: QuantBits,
    pub symmetry: Symmetry,
    pub granularity: Granularity,
    pub mode: QuantMode,
}

impl QuantSpec {
    pub const fn new(
        bits: QuantBits,
        symmetry: Symmetry,
        granularity: Granularity,
        mode: QuantMode,
    ) -> Self {
        QuantSpec {
            bits,
            symmetry,
            granularity,
            mode,
        }
    }

    pub fn validate_for(&self, role: TensorRole) -> Result<()> {
        match (self.granularity, role) {
            (Granularity::PerChannel, TensorRole::Activation) => Err(Error::validation(
                "granularity",
                "per_channel applies only to weights",
            )),
            (Granularity::PerToken, TensorRole::Weight) => Err(Error::validation(
                "granularity",
                "per_token applies only to activations",
            )),
            _ => Ok(()),
        }
    }

    /// Dynamic asymmetric per-token INT4: projection and FFN activations.
    pub const fn q3_linear_activation() -> Self {
        QuantSpec::new(
            QuantBits::Int4,
            Symmetry::Asymmetric,
            Granularity::PerToken,
            QuantMode::Dynamic,
        )
    }

    /// Symmetric per-channel INT4 weights (projections, FFN and lm_head).
    pub const fn q3_linear_weight() -> Self {
        QuantSpec::new(
            QuantBits::Int4,
            Symmetry::Symmetric,
            Granularity::PerChannel,
            QuantMode::Static,
        )
    }

    /// Static symmetric per-tensor INT8 for the attention matmul operands.
    pub const fn q3_attention() -> Self {
        QuantSpec::new(
            QuantBits::Int8,
            Symmetry::Symmetric,
            Granularity::PerTensor,
            QuantMode::Static,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Linear,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeCost {
    pub engine: EngineKind,
    pub precision: Precision,
    pub cost: BTreeMap<ResourceKind, f64>,
}

/// Per-PE resource costs plus a fixed overhead per instantiated module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceCostModel {
    pub per_pe: Vec<PeCost>,
    /// Charged once per compute engine (linear or attention).
    pub engine_overhead: BTreeMap<ResourceKind, f64>,
    /// Charged once per auxiliary streaming module (norm, rope, softmax, ...).
    #[serde(default)]
    pub aux_module_overhead: BTreeMap<ResourceKind, f64>,
    /// Fraction of each budget usable by a design (routability headroom).
    #[serde(default = "default_cap_fraction")]
    pub cap_fraction: f64,
}

fn default_cap_fraction() -> f64 {
    0.8
}

/// One compute engine of a design: its kind, datapath precision and PE count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Engine {
    pub kind: EngineKind,
    pub precision: Precision,
    pub pes: u64,
}

impl Default for ResourceCostModel {
    fn default() -> Self {
        use ResourceKind::*;
        let costs = |e: [(ResourceKind, f64); 6]| e.into_iter().collect::<BTreeMap<_, _>>();
        ResourceCostModel {
            per_pe: vec![
                PeCost {
                    engine: EngineKind::Linear,
                    precision: Precision::Int4,
                    cost: costs([
                        (Clb, 10.0),
                        (Dsp, 0.125),
                        (Lut, 60.0),
                        (Ff, 80.0),
                        (Bram, 0.02),
                        (Uram, 0.0),
                    ]),
                },
                PeCost {
                    engine: EngineKind::Attention,
                    precision: Precision::Int8,
                    cost: costs([
                        (Clb, 16.0),
                        (Dsp, 1.0),
                        (Lut, 100.0),
                        (Ff, 150.0),
                        (Bram, 0.1),
                        (Uram, 0.0),
                    ]),
                },
                PeCost {
                    engine: EngineKind::Linear,
                    precision: Precision::Int8,
                    cost: costs([
                        (Clb, 16.0),
                        (Dsp, 1.0),
                        (Lut, 100.0),
                        (Ff, 150.0),
                        (Bram, 0.1),
                        (Uram, 0.0),
                    ]),
                },
            ],
            engine_overhead: costs([
                (Clb, 3000.0),
                (Dsp, 16.0),
                (Lut, 20000.0),
                (Ff, 30000.0),
                (Bram, 40.0),
                (Uram, 8.0),
            ]),
            aux_module_overhead: BTreeMap::new(),
            cap_fraction: default_cap_fraction(),
        }
    }
}

impl ResourceCostModel {
    pub fn validate(&self) -> Result<()> {
        for (i, pe) in self.per_pe.iter().enumerate() {
            for (kind, v) in &pe.cost {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(Error::validation(
                        format!("per_pe[{i}].cost.{kind}"),
                        format!("must be finite and >= 0, got {v}"),
                    ));
                }
            }
        }
        for (name, map) in [
            ("engine_overhead", &self.engine_overhead),
            ("aux_module_overhead", &self.aux_module_overhead),
        ] {
            for (kind, v) in map {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(Error::validation(
                        format!("{name}.{kind}"),
                        format!("must be finite and >= 0, got {v}"),
                    ));
                }
            }
        }
        if !(self.cap_fraction > 0.0 && self.cap_fraction <= 1.0) {
            return Err(Error::validation("cap_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn pe_cost(&self, engine: EngineKind, precision: Precision) -> Option<&PeCost> {
        self.per_pe
            .iter()
            .find(|p| p.engine == engine && p.precision == precision)
    }

    /// Resource usage of a set of engines plus `aux_modules` auxiliary modules.
    pub fn usage(
        &self,
        engines: &[Engine],
        aux_modules: usize,
    ) -> Result<BTreeMap<ResourceKind, f64>> {
        let mut usage: BTreeMap<ResourceKind, f64> =
            ResourceKind::ALL.iter().map(|k| (*k, 0.0)).collect();
        for e in engines {
            let pe = self.pe_cost(e.kind, e.precision).ok_or_else(|| {
                Error::validation(
                    "per_pe",
                    format!("no cost entry for {:?} engine at {:?}", e.kind, e.precision),
                )
            })?;
            for (kind, c) in &pe.cost {
                *usage.entry(*kind).or_default() += c * e.pes as f64;
            }
            for (kind, c) in &self.engine_overhead {
                *usage.entry(*kind).or_default() += c;
            }
        }
        for (kind, c) in &self.aux_module_overhead {
            *usage.entry(*kind).or_default() += c * aux_modules as f64;
        }
        Ok(usage)
    }
}

/// Compute engines of the prefill architecture: shared Q/K and V/O linear
/// engines, three FFN engines and two attention engines, each a TP×WP array.
pub fn prefill_engines(cfg: &PrefillConfig) -> [Engine; 7] {
    let lin = |wp: u64| Engine {
        kind: EngineKind::Linear,
        precision: Precision::Int4,
        pes: cfg.tp * wp,
    };
    let attn = Engine {
        kind: EngineKind::Attention,
        precision: Precision::Int8,
        pes: cfg.tp * cfg.wp_mha,
    };
    [
        lin(cfg.wp_kqvo),
        lin(cfg.wp_kqvo),
        attn,
        attn,
        lin(cfg.wp_ffn),
        lin(cfg.wp_ffn),
        lin(cfg.wp_ffn),
    ]
}

/// Compute engines of the decode architecture: one shared INT4 linear engine
/// (BP arrays of WP/BP PEs) and the two attention engines.
pub fn decode_engines(cfg: &DecodeConfig) -> [Engine; 3] {
    let attn = Engine {
        kind: EngineKind::Attention,
        precision: Precision::Int8,
        pes: cfg.wp_mha,
    };
    [
        Engine {
            kind: EngineKind::Linear,
            precision: Precision::Int4,
            pes: cfg.wp_int4,
        },
        attn,
        attn,
    ]
}

/// Per-stage entry of `arch.json`: the parallelism knobs plus an optional
/// stage clock (stages may close timing at different frequencies).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry<C> {
    #[serde(flatten)]
    pub config: C,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_hz: Option<u64>,
}

/// `arch.json`: stage configurations of one accelerator build.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill: Option<StageEntry<PrefillConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode: Option<StageEntry<DecodeConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hmt: Option<StageEntry<HmtConfig>>,
}

impl ArchConfig {
    pub fn validate(&self, model: &ModelSpec, policy: TilingPolicy) -> Result<()> {
        if let Some(p) = &self.prefill {
            stage_freq("prefill.freq_hz", p.freq_hz)?;
            prefix(
                "prefill",
                validate_prefill(&p.config, model, policy).into_result(),
            )?;
        }
        if let Some(d) = &self.decode {
            stage_freq("decode.freq_hz", d.freq_hz)?;
            prefix(
                "decode",
                validate_decode(&d.config, model, policy).into_result(),
            )?;
        }
        if let Some(h) = &self.hmt {
            stage_freq("hmt.freq_hz", h.freq_hz)?;
            prefix("hmt", h.config.validate())?;
        }
        Ok(())
    }

    /// Reference U280 build.
    pub fn u280() -> ArchConfig {
        ArchConfig {
            name: Some("u280".into()),
            prefill: Some(StageEntry {
                config: PrefillConfig::new(8, 24, 16, 96),
                freq_hz: Some(304_000_000),
            }),
            decode: Some(StageEntry {
                config: DecodeConfig::new(16, 1024, 256),
                freq_hz: Some(292_000_000),
            }),
            hmt: Some(StageEntry {
                config: HmtConfig::new(1024, 64, 4, 4),
                freq_hz: Some(290_000_000),
            }),
        }
    }

    /// Reference V80 build (synthesis estimates).
    pub fn v80() -> ArchConfig {
        ArchConfig {
            name: Some("v80".into()),
            prefill: Some(StageEntry {
                config: PrefillConfig::new(16, 32, 32, 128),
                freq_hz: Some(300_000_000),
            }),
            decode: Some(StageEntry {
                config: DecodeConfig::new(64, 4096, 1024),
                freq_hz: Some(300_000_000),
            }),
            hmt: Some(StageEntry {
                config: HmtConfig::new(1024, 64, 4, 8),
                freq_hz: Some(300_000_000),
            }),
        }
    }
}

fn stage_freq(field: &str, f: Option<u64>) -> Result<()> {
    match f {
        Some(0) => Err(Error::validation(field, "must be > 0")),
        _ => Ok(()),
    }
}

fn prefix(stage: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Validation { field, message } => Error::Validation {
            field: format!("{stage}.{field}"),
            message,
        },
        other => other,
    })
}

/// Resolves a config path: absolute or existing paths are used as given,
/// otherwise the path is joined onto `$FLEXSIM_CONFIG_DIR` when set.
pub fn resolve_config_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    match std::env::var_os(CONFIG_DIR_ENV) {
        Some(dir) if !dir.is_empty() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = resolve_config_path(path);
    let bytes = std::fs::read(&path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path,
        message: e.to_string(),
    })
}

pub fn load_device_spec(path: impl AsRef<Path>) -> Result<DeviceSpec> {
    let spec: DeviceSpec = read_json(path)?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_model_spec(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let spec: ModelSpec = read_json(path)?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_arch_config(path: impl AsRef<Path>, model: &ModelSpec) -> Result<ArchConfig> {
    let arch: ArchConfig = read_json(path)?;
    arch.validate(model, TilingPolicy::default())?;
    Ok(arch)
}

pub fn load_cost_model(path: impl AsRef<Path>) -> Result<ResourceCostModel> {
    let cost: ResourceCostModel = read_json(path)?;
    cost.validate()?;
    Ok(cost)
}
