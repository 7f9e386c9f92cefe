//! Composition IR for hybrid accelerators.
//!
//! A graph is a set of module instances joined by stream edges (on-chip
//! FIFOs), plus an execution schedule of phases. Within a phase, invocations
//! listed as `serialized` run back to back on their (reused) instances, and
//! `streamed` invocations run concurrently as a pipeline paced by the
//! slowest. A phase costs `repeat · (Σ serialized + max streamed)`; phases
//! add up. Dimensions are symbolic expressions over the model and workload,
//! e.g. `"lp + ld/2"`.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::Zero;
use petgraph::algo::toposort;
use petgraph::graphmap::DiGraphMap;
use serde::{Deserialize, Serialize};

use crate::config::{
    DecodeConfig, DeviceSpec, Engine, EngineKind, ModelSpec, Precision, PrefillConfig,
    ResourceCostModel, Severity, Stage, ValidationReport,
};
use crate::error::{Error, Result};
use crate::exact::{self, int, Exact};
use crate::perf::{BandwidthEstimate, LatencyEstimate, WorkloadShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Linear,
    Rope,
    Softmax,
    Norm,
    Swiglu,
    Attention,
    Quantize,
    Dequantize,
    Fht,
    KvStore,
}

impl NodeKind {
    /// Linear and attention engines do the matmuls; everything else is a
    /// streaming element-wise module with no cycle cost of its own.
    pub fn is_compute(self) -> bool {
        matches!(self, NodeKind::Linear | NodeKind::Attention)
    }
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleInstance {
    pub id: String,
    pub kind: NodeKind,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bp: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wp: Option<u64>,
    /// Head parallelism of attention engines (metadata).
    #[serde(default = "one")]
    pub hp: u64,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamEdge {
    pub from: String,
    pub to: String,
}

/// The program order of the invocations sharing one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReuseBinding {
    pub node: String,
    pub order: Vec<String>,
}

fn one_expr() -> String {
    "1".into()
}

/// One use of an instance on a `[tokens, d_in] × [d_in, d_out]` product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Invocation {
    pub id: String,
    pub node: String,
    #[serde(default = "one_expr")]
    pub tokens: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_in: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_out: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    #[serde(default = "one_expr")]
    pub repeat: String,
    #[serde(default)]
    pub serialized: Vec<Invocation>,
    #[serde(default)]
    pub streamed: Vec<Invocation>,
}

impl Phase {
    /// Serialized invocations first, then streamed.
    pub fn invocations(&self) -> impl Iterator<Item = &Invocation> {
        self.serialized.iter().chain(&self.streamed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchGraph {
    pub name: String,
    /// Clock used for bandwidth checks; the device clock if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_hz: Option<u64>,
    pub nodes: Vec<ModuleInstance>,
    #[serde(default)]
    pub edges: Vec<StreamEdge>,
    #[serde(default)]
    pub reuse: Vec<ReuseBinding>,
    pub phases: Vec<Phase>,
}

// ---------------------------------------------------------------------------
// Dimension expressions

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Num(i128),
    Var(String),
    Bin(Box<Expr>, char, Box<Expr>),
}

pub const DIM_VARS: [&str; 10] = [
    "lp",
    "ld",
    "n_layers",
    "d_h",
    "d_kv",
    "d_ffn",
    "d_lm_head",
    "head_dim",
    "n_q_heads",
    "n_kv_heads",
];

struct Parser<'a> {
    src: &'a str,
    toks: Vec<String>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self> {
        let mut toks = Vec::new();
        let chars: Vec<char> = src.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if "+-*/()".contains(c) {
                toks.push(c.to_string());
                i += 1;
            } else if c.is_ascii_alphanumeric() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                toks.push(chars[start..i].iter().collect());
            } else {
                return Err(Error::Graph(format!(
                    "unexpected '{c}' in dimension '{src}'"
                )));
            }
        }
        Ok(Parser { src, toks, pos: 0 })
    }

    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).map(String::as_str)
    }

    fn err(&self, what: &str) -> Error {
        Error::Graph(format!("{what} in dimension '{}'", self.src))
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(op @ ("+" | "-")) = self.peek() {
            let op = op.chars().next().unwrap();
            self.pos += 1;
            lhs = Expr::Bin(Box::new(lhs), op, Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(op @ ("*" | "/")) = self.peek() {
            let op = op.chars().next().unwrap();
            self.pos += 1;
            lhs = Expr::Bin(Box::new(lhs), op, Box::new(self.factor()?));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        let tok = self
            .peek()
            .ok_or_else(|| self.err("unexpected end"))?
            .to_string();
        self.pos += 1;
        if tok == "(" {
            let e = self.expr()?;
            if self.peek() != Some(")") {
                return Err(self.err("missing ')'"));
            }
            self.pos += 1;
            return Ok(e);
        }
        if let Ok(n) = tok.parse::<i128>() {
            return Ok(Expr::Num(n));
        }
        if DIM_VARS.contains(&tok.as_str()) {
            return Ok(Expr::Var(tok));
        }
        Err(self.err(&format!("unknown symbol '{tok}'")))
    }
}

fn parse_dim(src: &str) -> Result<Expr> {
    let mut p = Parser::new(src)?;
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(p.err("trailing input"));
    }
    Ok(e)
}

fn eval(e: &Expr, env: &BTreeMap<&'static str, Exact>) -> Result<Exact> {
    Ok(match e {
        Expr::Num(n) => int(*n),
        Expr::Var(v) => env[v.as_str()],
        Expr::Bin(a, op, b) => {
            let (a, b) = (eval(a, env)?, eval(b, env)?);
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                _ => {
                    if b.is_zero() {
                        return Err(Error::Graph("division by zero in dimension".into()));
                    }
                    a / b
                }
            }
        }
    })
}

/// Values of the dimension variables.
pub fn dim_env(model: &ModelSpec, workload: &WorkloadShape) -> BTreeMap<&'static str, Exact> {
    let vals = [
        workload.l_p,
        workload.l_d,
        model.n_layers,
        model.d_h,
        model.d_kv,
        model.d_ffn,
        model.d_lm_head,
        model.head_dim,
        model.n_q_heads,
        model.n_kv_heads,
    ];
    DIM_VARS
        .iter()
        .zip(vals)
        .map(|(k, v)| (*k, int(v)))
        .collect()
}

/// Evaluates a dimension expression such as `"n_layers*ld"`.
pub fn eval_dim(expr: &str, env: &BTreeMap<&'static str, Exact>) -> Result<Exact> {
    eval(&parse_dim(expr)?, env)
}

// ---------------------------------------------------------------------------
// Validation

impl ArchGraph {
    pub fn node(&self, id: &str) -> Option<&ModuleInstance> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Compute engines, in node order.
    pub fn engines(&self) -> Vec<Engine> {
        self.nodes
            .iter()
            .filter(|n| n.kind.is_compute())
            .map(|n| Engine {
                kind: if n.kind == NodeKind::Linear {
                    EngineKind::Linear
                } else {
                    EngineKind::Attention
                },
                precision: n.precision,
                pes: node_pes(n),
            })
            .collect()
    }

    pub fn aux_module_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.kind.is_compute()).count()
    }

    pub fn resource_usage(
        &self,
        cost: &ResourceCostModel,
    ) -> Result<BTreeMap<crate::config::ResourceKind, f64>> {
        cost.usage(&self.engines(), self.aux_module_count())
    }

    /// Weight-streaming demand of each phase: `Σ B_W · WP · F` over the
    /// distinct compute instances the phase invokes.
    pub fn phase_bandwidth(&self, freq_hz: u64) -> Vec<(String, BandwidthEstimate)> {
        self.phases
            .iter()
            .map(|ph| {
                let mut seen = BTreeSet::new();
                let mut contributions = Vec::new();
                for inv in ph.invocations() {
                    let Some(n) = self.node(&inv.node) else {
                        continue;
                    };
                    if n.kind.is_compute() && seen.insert(n.id.clone()) {
                        let bytes = n.precision.bytes_per_element() * int(n.wp.unwrap_or(0));
                        contributions.push((n.id.clone(), bytes));
                    }
                }
                let refs: Vec<(&str, Exact)> = contributions
                    .iter()
                    .map(|(k, v)| (k.as_str(), *v))
                    .collect();
                (
                    ph.name.clone(),
                    BandwidthEstimate::from_contributions(freq_hz, &refs),
                )
            })
            .collect()
    }

    /// Device-independent checks: ids, stream DAG, stage parallelism,
    /// invocation references, dimension syntax and reuse order.
    pub fn structural_report(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        let err = |r: &mut ValidationReport, name: &str, field: &str, ok: bool, detail: String| {
            r.push(name, field, ok, Severity::Error, detail)
        };

        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                err(
                    &mut r,
                    "unique node ids",
                    &n.id,
                    false,
                    format!("node '{}' is declared twice", n.id),
                );
            }
        }

        for n in &self.nodes {
            let (own, other, own_name, other_name) = match n.stage {
                Stage::Prefill => (n.tp, n.bp, "tp", "bp"),
                Stage::Decode => (n.bp, n.tp, "bp", "tp"),
            };
            if other.is_some() {
                err(
                    &mut r,
                    "parallelism matches stage",
                    &n.id,
                    false,
                    format!("{} node '{}' sets {other_name}", n.stage, n.id),
                );
            }
            if n.kind.is_compute() {
                let ok = own.is_some_and(|v| v >= 1) && n.wp.is_some_and(|v| v >= 1);
                err(
                    &mut r,
                    "compute parallelism",
                    &n.id,
                    ok,
                    format!(
                        "{} engine '{}' needs {own_name} >= 1 and wp >= 1",
                        n.stage, n.id
                    ),
                );
                if ok && n.stage == Stage::Decode && n.kind == NodeKind::Linear {
                    let (bp, wp) = (n.bp.unwrap(), n.wp.unwrap());
                    err(
                        &mut r,
                        "bp divides wp",
                        &n.id,
                        wp % bp == 0,
                        format!("'{}': wp={wp}, bp={bp}", n.id),
                    );
                }
            }
        }

        let mut g: DiGraphMap<&str, ()> = DiGraphMap::new();
        for n in &self.nodes {
            g.add_node(n.id.as_str());
        }
        for e in &self.edges {
            for end in [&e.from, &e.to] {
                if !ids.contains(end.as_str()) {
                    err(
                        &mut r,
                        "edge endpoints exist",
                        end,
                        false,
                        format!("edge {} -> {} names unknown node '{end}'", e.from, e.to),
                    );
                }
            }
            g.add_edge(e.from.as_str(), e.to.as_str(), ());
        }
        match toposort(&g, None) {
            Ok(_) => err(
                &mut r,
                "stream edges acyclic",
                "edges",
                true,
                "stream edges form a DAG".into(),
            ),
            Err(cycle) => err(
                &mut r,
                "stream edges acyclic",
                cycle.node_id(),
                false,
                format!("stream edges contain a cycle through '{}'", cycle.node_id()),
            ),
        }

        let mut inv_ids = BTreeSet::new();
        let mut by_node: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for ph in &self.phases {
            if let Err(e) = parse_dim(&ph.repeat) {
                err(&mut r, "dimension syntax", &ph.name, false, e.to_string());
            }
            let mut streamed = BTreeSet::new();
            for inv in &ph.streamed {
                if !streamed.insert(inv.node.as_str()) {
                    err(
                        &mut r,
                        "instance used once per streamed stage set",
                        &inv.node,
                        false,
                        format!(
                            "'{}' appears twice among phase '{}' streamed stages",
                            inv.node, ph.name
                        ),
                    );
                }
            }
            for inv in ph.invocations() {
                if !inv_ids.insert(inv.id.as_str()) {
                    err(
                        &mut r,
                        "unique invocation ids",
                        &inv.id,
                        false,
                        format!("invocation '{}' is declared twice", inv.id),
                    );
                }
                by_node
                    .entry(inv.node.as_str())
                    .or_default()
                    .push(inv.id.as_str());
                let Some(n) = self.node(&inv.node) else {
                    err(
                        &mut r,
                        "invocation node exists",
                        &inv.id,
                        false,
                        format!("'{}' invokes unknown node '{}'", inv.id, inv.node),
                    );
                    continue;
                };
                for d in [Some(&inv.tokens), inv.d_in.as_ref(), inv.d_out.as_ref()]
                    .into_iter()
                    .flatten()
                {
                    if let Err(e) = parse_dim(d) {
                        err(&mut r, "dimension syntax", &inv.id, false, e.to_string());
                    }
                }
                if n.kind.is_compute() && (inv.d_in.is_none() || inv.d_out.is_none()) {
                    err(
                        &mut r,
                        "compute dims",
                        &inv.id,
                        false,
                        format!("'{}' on engine '{}' needs d_in and d_out", inv.id, n.id),
                    );
                }
            }
        }

        let mut bound = BTreeSet::new();
        for b in &self.reuse {
            if !bound.insert(b.node.as_str()) {
                err(
                    &mut r,
                    "one reuse binding per node",
                    &b.node,
                    false,
                    format!("'{}' has two reuse bindings", b.node),
                );
            }
            let actual = by_node.get(b.node.as_str()).cloned().unwrap_or_default();
            let listed: Vec<&str> = b.order.iter().map(String::as_str).collect();
            err(
                &mut r,
                "reuse order",
                &b.node,
                listed == actual,
                if listed == actual {
                    format!("'{}' runs {} invocations in order", b.node, listed.len())
                } else {
                    format!(
                        "'{}' binding lists {listed:?} but the schedule runs {actual:?}",
                        b.node
                    )
                },
            );
        }
        for (node, invs) in &by_node {
            if invs.len() > 1 && !bound.contains(node) {
                err(
                    &mut r,
                    "reused instance has a binding",
                    node,
                    false,
                    format!(
                        "'{node}' is invoked {} times without a reuse binding",
                        invs.len()
                    ),
                );
            }
        }
        r
    }
}

fn node_pes(n: &ModuleInstance) -> u64 {
    let wp = n.wp.unwrap_or(0);
    match n.stage {
        Stage::Prefill => n.tp.unwrap_or(1) * wp,
        Stage::Decode => wp,
    }
}

/// Structural checks plus per-kind resource usage within the capped budget
/// and per-phase bandwidth within the device peak.
pub fn validate_graph(
    g: &ArchGraph,
    device: &DeviceSpec,
    cost: &ResourceCostModel,
) -> ValidationReport {
    let mut r = g.structural_report();
    match g.resource_usage(cost) {
        Ok(usage) => {
            for (kind, used) in usage {
                let cap = cost.cap_fraction * device.budget(kind) as f64;
                r.push(
                    format!("{kind} within budget"),
                    format!("resource.{kind}"),
                    used <= cap,
                    Severity::Error,
                    format!(
                        "uses {used:.1} of {cap:.1} ({:.0}% cap)",
                        cost.cap_fraction * 100.0
                    ),
                );
            }
        }
        Err(e) => r.push(
            "resource cost",
            "resource",
            false,
            Severity::Error,
            e.to_string(),
        ),
    }
    let freq = g.freq_hz.unwrap_or(device.freq_hz);
    for (phase, bw) in g.phase_bandwidth(freq) {
        let ok = !bw.oversubscribes(device.peak_bw_bytes_per_s);
        r.push(
            "bandwidth within peak",
            format!("phase.{phase}"),
            ok,
            Severity::Error,
            format!(
                "phase '{phase}' streams {:.3} GB/s against {:.3} GB/s",
                bw.gb_per_s(),
                device.peak_bw_bytes_per_s as f64 / 1e9
            ),
        );
    }
    r
}

// ---------------------------------------------------------------------------
// Latency

fn invocation_cycles(
    n: &ModuleInstance,
    inv: &Invocation,
    env: &BTreeMap<&'static str, Exact>,
) -> Result<Exact> {
    if !n.kind.is_compute() {
        return Ok(Exact::zero());
    }
    let dim = |e: &Option<String>| -> Result<Exact> {
        eval_dim(
            e.as_deref()
                .ok_or_else(|| Error::Graph(format!("'{}' has no dims", inv.id)))?,
            env,
        )
    };
    let work = eval_dim(&inv.tokens, env)? * dim(&inv.d_in)? * dim(&inv.d_out)?;
    let wp = int(n.wp.unwrap_or(1));
    Ok(match n.stage {
        Stage::Prefill => work / (int(n.tp.unwrap_or(1)) * wp),
        Stage::Decode => work / wp,
    })
}

/// Phase-composed latency; see the module docs for the composition rule.
/// Breakdown keys are `<phase>` and `<phase>.<invocation>`, each scaled by
/// the phase's repeat count.
pub fn estimate_graph_latency(
    g: &ArchGraph,
    model: &ModelSpec,
    workload: &WorkloadShape,
    freq_hz: u64,
) -> Result<LatencyEstimate> {
    if freq_hz == 0 {
        return Err(Error::arg("freq_hz", "must be >= 1"));
    }
    let report = g.structural_report();
    if let Some(c) = report.errors().next() {
        return Err(Error::Graph(format!(
            "invalid graph '{}': {} ({})",
            g.name, c.detail, c.field
        )));
    }
    let env = dim_env(model, workload);
    let mut total = Exact::zero();
    let mut breakdown = BTreeMap::new();
    let mut binding = Vec::new();
    for ph in &g.phases {
        let repeat = eval_dim(&ph.repeat, &env)?;
        let mut serial = Exact::zero();
        for inv in &ph.serialized {
            let c = invocation_cycles(g.node(&inv.node).expect("checked"), inv, &env)?;
            breakdown.insert(format!("{}.{}", ph.name, inv.id), c * repeat);
            serial += c;
        }
        let mut streamed = Vec::new();
        for inv in &ph.streamed {
            let c = invocation_cycles(g.node(&inv.node).expect("checked"), inv, &env)?;
            breakdown.insert(format!("{}.{}", ph.name, inv.id), c * repeat);
            streamed.push((inv.id.as_str(), c));
        }
        let bottleneck = exact::max_of(streamed.iter().map(|(_, c)| c));
        if !bottleneck.is_zero() {
            binding.extend(
                streamed
                    .iter()
                    .filter(|(_, c)| *c == bottleneck)
                    .map(|(id, _)| format!("{}.{id}", ph.name)),
            );
        }
        let phase = (serial + bottleneck) * repeat;
        breakdown.insert(ph.name.clone(), phase);
        total += phase;
    }
    let mut est = LatencyEstimate::new(total, freq_hz);
    est.breakdown = breakdown;
    est.binding = binding;
    Ok(est)
}

// ---------------------------------------------------------------------------
// Reference graphs

fn inst(
    id: &str,
    kind: NodeKind,
    stage: Stage,
    tp_bp: Option<u64>,
    wp: Option<u64>,
    precision: Precision,
) -> ModuleInstance {
    let (tp, bp) = match stage {
        Stage::Prefill => (tp_bp, None),
        Stage::Decode => (None, tp_bp),
    };
    ModuleInstance {
        id: id.into(),
        kind,
        stage,
        tp,
        bp,
        wp,
        hp: 1,
        precision,
    }
}

fn call(id: &str, node: &str, tokens: &str, d_in: &str, d_out: &str) -> Invocation {
    Invocation {
        id: id.into(),
        node: node.into(),
        tokens: tokens.into(),
        d_in: Some(d_in.into()),
        d_out: Some(d_out.into()),
    }
}

fn pass(node: &str) -> Invocation {
    Invocation {
        id: node.into(),
        node: node.into(),
        tokens: "1".into(),
        d_in: None,
        d_out: None,
    }
}

fn edges(pairs: &[(&str, &str)]) -> Vec<StreamEdge> {
    pairs
        .iter()
        .map(|(a, b)| StreamEdge {
            from: (*a).into(),
            to: (*b).into(),
        })
        .collect()
}

fn reuse(node: &str, order: &[&str]) -> ReuseBinding {
    ReuseBinding {
        node: node.into(),
        order: order.iter().map(|s| (*s).into()).collect(),
    }
}

/// Prefill build: a shared Q/K projection with RoPE and a shared V/O
/// projection (temporal reuse), streamed into two attention engines and a
/// three-engine FFN. K and V are computed in their own phase and written
/// to HBM before the main pipeline runs.
pub fn prefill_reference_graph(cfg: &PrefillConfig) -> ArchGraph {
    use NodeKind::*;
    let p = Stage::Prefill;
    let tp = Some(cfg.tp);
    let nodes = vec![
        inst("qk_proj", Linear, p, tp, Some(cfg.wp_kqvo), Precision::Int4),
        inst("vo_proj", Linear, p, tp, Some(cfg.wp_kqvo), Precision::Int4),
        inst(
            "mha_qk",
            Attention,
            p,
            tp,
            Some(cfg.wp_mha),
            Precision::Int8,
        ),
        inst(
            "mha_pv",
            Attention,
            p,
            tp,
            Some(cfg.wp_mha),
            Precision::Int8,
        ),
        inst("ffn_gate", Linear, p, tp, Some(cfg.wp_ffn), Precision::Int4),
        inst("ffn_up", Linear, p, tp, Some(cfg.wp_ffn), Precision::Int4),
        inst("ffn_down", Linear, p, tp, Some(cfg.wp_ffn), Precision::Int4),
        inst("attn_norm", Norm, p, tp, None, Precision::Fp32),
        inst("act_quant", Quantize, p, tp, None, Precision::Int4),
        inst("rope", Rope, p, tp, None, Precision::Fp32),
        inst("kv_store", KvStore, p, tp, None, Precision::Int8),
        inst("softmax", Softmax, p, tp, None, Precision::Fp32),
        inst("ffn_norm", Norm, p, tp, None, Precision::Fp32),
        inst("swiglu", Swiglu, p, tp, None, Precision::Fp32),
        inst("dequant", Dequantize, p, tp, None, Precision::Fp32),
    ];
    ArchGraph {
        name: "prefill-reference".into(),
        freq_hz: None,
        nodes,
        edges: edges(&[
            ("attn_norm", "act_quant"),
            ("act_quant", "qk_proj"),
            ("act_quant", "vo_proj"),
            ("qk_proj", "rope"),
            ("rope", "kv_store"),
            ("vo_proj", "kv_store"),
            ("rope", "mha_qk"),
            ("mha_qk", "softmax"),
            ("softmax", "mha_pv"),
            ("ffn_norm", "ffn_gate"),
            ("ffn_norm", "ffn_up"),
            ("ffn_gate", "swiglu"),
            ("ffn_up", "swiglu"),
            ("swiglu", "ffn_down"),
            ("ffn_down", "dequant"),
        ]),
        reuse: vec![
            reuse("qk_proj", &["k_proj", "q_proj"]),
            reuse("vo_proj", &["v_proj", "o_proj"]),
        ],
        phases: vec![
            Phase {
                name: "kv".into(),
                repeat: "n_layers".into(),
                serialized: vec![],
                streamed: vec![
                    pass("attn_norm"),
                    pass("act_quant"),
                    call("k_proj", "qk_proj", "lp", "d_h", "d_kv"),
                    pass("rope"),
                    call("v_proj", "vo_proj", "lp", "d_h", "d_kv"),
                    pass("kv_store"),
                ],
            },
            Phase {
                name: "main".into(),
                repeat: "n_layers".into(),
                serialized: vec![],
                streamed: vec![
                    call("q_proj", "qk_proj", "lp", "d_h", "d_h"),
                    call("mha_score", "mha_qk", "lp", "d_h", "lp"),
                    pass("softmax"),
                    call("mha_ctx", "mha_pv", "lp", "lp", "d_h"),
                    call("o_proj", "vo_proj", "lp", "d_h", "d_h"),
                    pass("ffn_norm"),
                    call("ffn_gate", "ffn_gate", "lp", "d_h", "d_ffn"),
                    call("ffn_up", "ffn_up", "lp", "d_h", "d_ffn"),
                    pass("swiglu"),
                    call("ffn_down", "ffn_down", "lp", "d_ffn", "d_h"),
                    pass("dequant"),
                ],
            },
        ],
    }
}

/// Decode build: one INT4 linear engine reused for every projection, FFN
/// and the LM head, with O-projection streamed against the two attention
/// engines over the KV cache.
pub fn decode_reference_graph(cfg: &DecodeConfig) -> ArchGraph {
    use NodeKind::*;
    let d = Stage::Decode;
    let bp = Some(cfg.bp);
    let nodes = vec![
        inst(
            "linear_int4",
            Linear,
            d,
            bp,
            Some(cfg.wp_int4),
            Precision::Int4,
        ),
        inst(
            "mha_qk",
            Attention,
            d,
            Some(1),
            Some(cfg.wp_mha),
            Precision::Int8,
        ),
        inst(
            "mha_pv",
            Attention,
            d,
            Some(1),
            Some(cfg.wp_mha),
            Precision::Int8,
        ),
        inst("attn_norm", Norm, d, None, None, Precision::Fp32),
        inst("act_quant", Quantize, d, None, None, Precision::Int4),
        inst("rope", Rope, d, None, None, Precision::Fp32),
        inst("kv_store", KvStore, d, None, None, Precision::Int8),
        inst("softmax", Softmax, d, None, None, Precision::Fp32),
        inst("swiglu", Swiglu, d, None, None, Precision::Fp32),
        inst("dequant", Dequantize, d, None, None, Precision::Fp32),
        inst("final_norm", Norm, d, None, None, Precision::Fp32),
    ];
    let ctx = "lp + ld/2";
    ArchGraph {
        name: "decode-reference".into(),
        freq_hz: None,
        nodes,
        edges: edges(&[
            ("attn_norm", "act_quant"),
            ("act_quant", "linear_int4"),
            ("linear_int4", "dequant"),
            ("dequant", "rope"),
            ("rope", "kv_store"),
            ("kv_store", "mha_qk"),
            ("mha_qk", "softmax"),
            ("softmax", "mha_pv"),
            ("dequant", "swiglu"),
            ("final_norm", "act_quant"),
        ]),
        reuse: vec![reuse(
            "linear_int4",
            &[
                "k_proj", "v_proj", "q_proj", "ffn_gate", "ffn_up", "ffn_down", "o_proj", "lm_head",
            ],
        )],
        phases: vec![
            Phase {
                name: "layer".into(),
                repeat: "n_layers*ld".into(),
                serialized: vec![
                    call("k_proj", "linear_int4", "1", "d_h", "d_kv"),
                    call("v_proj", "linear_int4", "1", "d_h", "d_kv"),
                    call("q_proj", "linear_int4", "1", "d_h", "d_h"),
                    call("ffn_gate", "linear_int4", "1", "d_h", "d_ffn"),
                    call("ffn_up", "linear_int4", "1", "d_h", "d_ffn"),
                    call("ffn_down", "linear_int4", "1", "d_ffn", "d_h"),
                ],
                streamed: vec![
                    pass("attn_norm"),
                    pass("act_quant"),
                    pass("rope"),
                    pass("kv_store"),
                    call("mha_score", "mha_qk", "1", "d_h", ctx),
                    pass("softmax"),
                    call("mha_ctx", "mha_pv", "1", ctx, "d_h"),
                    call("o_proj", "linear_int4", "1", "d_h", "d_h"),
                    pass("swiglu"),
                    pass("dequant"),
                ],
            },
            Phase {
                name: "lm_head".into(),
                repeat: "ld".into(),
                serialized: vec![call("lm_head", "linear_int4", "1", "d_h", "d_lm_head")],
                streamed: vec![pass("final_norm")],
            },
        ],
    }
}

/// Auxiliary module counts of the reference graphs (used by the DSE's
/// resource model so both agree).
pub const PREFILL_AUX_MODULES: usize = 8;
pub const DECODE_AUX_MODULES: usize = 8;

pub fn load_graph(path: impl AsRef<std::path::Path>) -> Result<ArchGraph> {
    crate::config::read_json(path)
}
