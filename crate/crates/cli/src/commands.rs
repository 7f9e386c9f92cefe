use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use flexsim_core::archgraph::{self, ArchGraph};
use flexsim_core::config::{
    self, ArchConfig, DeviceSpec, Granularity, ModelSpec, QuantBits, QuantMode, QuantSpec,
    ResourceCostModel, Stage, Symmetry, TilingPolicy,
};
use flexsim_core::dse::{self, DseOptions, SearchSpace};
use flexsim_core::exact::{self, Exact};
use flexsim_core::hmt::{self, HmtConfig};
use flexsim_core::kernels::{Arith, ExecPath, Model};
use flexsim_core::perf::{self, LatencyEstimate, PluginCost, WorkloadShape};
use flexsim_core::quant::tensorfile::{self, Tensor};
use flexsim_core::quant::{self, Normalization, WeightSidecar};
use flexsim_core::report::{self, Report};
use flexsim_core::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::{
    DseArgs, EstimateArgs, GranularityArg, GraphAction, GraphArgs, HmtArgs, Output, PathArg,
    QuantizeArgs, ReportArgs, SimulateArgs, SymmetryArg,
};

pub struct Failure {
    pub code: u8,
    kind: String,
    message: String,
}

impl Failure {
    fn new(code: u8, kind: &str, message: impl Into<String>) -> Self {
        Failure {
            code,
            kind: kind.into(),
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Failure::new(2, "config", message)
    }

    pub fn record(&self) -> String {
        json!({"error": self.kind, "message": self.message, "exit_code": self.code}).to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::InvalidArgument { .. } => 2,
            Error::Infeasible { .. } | Error::EmptySpace(_) => 3,
            Error::Graph(_) => 4,
            _ => 1,
        };
        Failure::new(code, e.kind(), e.to_string())
    }
}

type Res<T = ()> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(report: &Report, out: &Output) -> Res {
    match &out.out {
        Some(p) => report.write(p)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(report.to_json().as_bytes())
                .map_err(|e| Failure::new(1, "io", e.to_string()))?;
        }
    }
    Ok(())
}

fn create(path: &Path) -> Res<fs::File> {
    fs::File::create(path).map_err(|e| io_failure(path, e))
}

fn input(report: &mut Report, name: &str, path: &Path) -> Res {
    report.add_input(name, &config::resolve_config_path(path))?;
    Ok(())
}

fn exec_path(p: PathArg) -> ExecPath {
    match p {
        PathArg::Float => ExecPath::Float,
        PathArg::Float32 => ExecPath::Float32,
        PathArg::Quantized => ExecPath::Quantized(Arith::Float),
        PathArg::Exact => ExecPath::Quantized(Arith::Exact),
    }
}

fn load_arch(path: &Path, model: &ModelSpec, policy: TilingPolicy) -> Res<ArchConfig> {
    let arch: ArchConfig = config::read_json(path)?;
    arch.validate(model, policy)?;
    Ok(arch)
}

fn load_cost(path: Option<&PathBuf>) -> Res<ResourceCostModel> {
    Ok(match path {
        Some(p) => config::load_cost_model(p)?,
        None => ResourceCostModel::default(),
    })
}

fn load_model(spec: &ModelSpec, weights: Option<&PathBuf>, seed: u64) -> Res<Model> {
    Ok(match weights {
        Some(p) => Model::load(config::resolve_config_path(p), spec)?,
        None => Model::random(spec, seed)?,
    })
}

fn stage_json(lat: &LatencyEstimate, bw: &perf::BandwidthEstimate, peak: u64, cfg: Value) -> Value {
    json!({
        "config": cfg,
        "latency": lat.summary(),
        "bandwidth": bw.summary(Some(peak)),
    })
}

fn ratio_json(r: &Exact) -> Value {
    json!({"value": exact::to_f64(r), "exact": exact::render(r)})
}

pub fn estimate(a: &EstimateArgs) -> Res {
    let device = config::load_device_spec(&a.device)?;
    let model = config::load_model_spec(&a.model)?;
    let arch = load_arch(&a.arch, &model, a.policy.into())?;
    let peak = device.peak_bw_bytes_per_s;

    let mut payload = serde_json::Map::new();
    payload.insert("device".into(), json!(device.name));
    payload.insert("model".into(), json!(model.name));
    payload.insert("lp".into(), json!(a.lp));
    payload.insert("ld".into(), json!(a.ld));
    let mut rows: Vec<(Stage, LatencyEstimate, perf::BandwidthEstimate)> = Vec::new();

    if let Some(p) = &arch.prefill {
        let lp =
            a.lp.ok_or_else(|| Failure::config("arch has a prefill stage; --lp is required"))?;
        let freq = p.freq_hz.unwrap_or(device.freq_hz);
        let lat = perf::prefill_stage_latency(&model, &p.config, lp, freq)?;
        let bw = perf::prefill_bandwidth(&p.config, freq);
        payload.insert(
            "prefill".into(),
            stage_json(&lat, &bw, peak, json!(p.config)),
        );
        rows.push((Stage::Prefill, lat, bw));
    }
    if let Some(d) = &arch.decode {
        let ld =
            a.ld.ok_or_else(|| Failure::config("arch has a decode stage; --ld is required"))?;
        let freq = d.freq_hz.unwrap_or(device.freq_hz);
        let lat = perf::decode_stage_latency(&model, &d.config, a.lp.unwrap_or(0), ld, freq)?;
        let bw = perf::decode_bandwidth(&d.config, freq);
        payload.insert(
            "decode".into(),
            stage_json(&lat, &bw, peak, json!(d.config)),
        );
        rows.push((Stage::Decode, lat, bw));
    }
    if rows.is_empty() {
        return Err(Failure::config(
            "arch has neither a prefill nor a decode stage",
        ));
    }
    let total: Exact = rows.iter().map(|(_, l, _)| l.seconds()).sum();
    let tokens = a.lp.unwrap_or(0) + a.ld.unwrap_or(0);
    let mut end_to_end = json!({
        "seconds": exact::to_f64(&total),
        "seconds_exact": exact::render(&total),
    });
    if rows.len() == 2 && tokens > 0 {
        let tpj = perf::tokens_per_joule_raw(tokens, exact::to_f64(&total), device.avg_power_w)?;
        end_to_end["tokens_per_joule"] = json!(tpj);
    }
    payload.insert("end_to_end".into(), end_to_end);

    if let Some(total_len) = a.long_context {
        let p = arch.prefill.as_ref().ok_or_else(|| {
            Failure::config("--long-context needs a prefill stage in the arch file")
        })?;
        let h = arch
            .hmt
            .as_ref()
            .ok_or_else(|| Failure::config("--long-context needs an hmt entry in the arch file"))?;
        let freq = p.freq_hz.unwrap_or(device.freq_hz);
        let cmp = perf::long_context_prefill_model(
            &model,
            &p.config,
            &h.config,
            total_len,
            freq,
            PluginCost::Modeled,
        )?;
        payload.insert(
            "long_context".into(),
            long_context_json(&cmp, total_len, &h.config),
        );
    }

    let mut report = Report::new("estimate", Value::Object(payload));
    input(&mut report, "device", &a.device)?;
    input(&mut report, "model", &a.model)?;
    input(&mut report, "arch", &a.arch)?;
    if let Some(path) = &a.csv {
        write_estimate_csv(create(path)?, &rows)
            .map_err(|e| Failure::new(1, "io", e.to_string()))?;
    }
    emit(&report, &a.output)
}

fn long_context_json(cmp: &perf::LongContextComparison, total_len: u64, cfg: &HmtConfig) -> Value {
    json!({
        "total_len": total_len,
        "hmt_config": cfg,
        "segments": cmp.segments,
        "vanilla": cmp.vanilla.summary(),
        "hmt": cmp.hmt.summary(),
        "speedup": ratio_json(&cmp.speedup),
        "hmt_with_summary": cmp.hmt_with_summary.summary(),
        "speedup_with_summary": ratio_json(&cmp.speedup_with_summary),
    })
}

/// Columns: `stage,quantity,term,value,exact`. `quantity` is `cycles` or
/// `bytes_per_second`; `term` is `total` or a breakdown key.
fn write_estimate_csv<W: Write>(
    mut w: W,
    rows: &[(Stage, LatencyEstimate, perf::BandwidthEstimate)],
) -> std::io::Result<()> {
    writeln!(w, "stage,quantity,term,value,exact")?;
    for (stage, lat, bw) in rows {
        let mut line = |q: &str, term: &str, v: &Exact| {
            writeln!(
                w,
                "{stage},{q},{term},{},{}",
                exact::to_f64(v),
                exact::render(v)
            )
        };
        line("cycles", "total", &lat.cycles)?;
        for (k, v) in &lat.breakdown {
            line("cycles", k, v)?;
        }
        line("bytes_per_second", "total", &bw.bytes_per_second)?;
        for (k, v) in &bw.contributions {
            line("bytes_per_second", k, v)?;
        }
    }
    w.flush()
}

pub fn dse(a: &DseArgs) -> Res {
    let stage: Stage = a.stage.into();
    let device = config::load_device_spec(&a.device)?;
    let model = config::load_model_spec(&a.model)?;
    let cost = load_cost(a.cost.as_ref())?;
    let space = match &a.space {
        Some(p) => {
            let s: SearchSpace = config::read_json(p)?;
            s.validate()?;
            if s.stage() != stage {
                return Err(Failure::config(format!(
                    "space file is for the {} stage but --stage is {stage}",
                    s.stage()
                )));
            }
            s
        }
        None => match stage {
            Stage::Prefill => SearchSpace::Prefill(dse::default_prefill_space(&model)),
            Stage::Decode => SearchSpace::Decode(dse::default_decode_space(&model)),
        },
    };
    let opts = DseOptions {
        freq_hz: a.freq_hz,
        policy: a.policy.into(),
        prune: !a.no_prune,
        parallel: true,
        collect_points: a.csv.is_some(),
    };
    let result = match &space {
        SearchSpace::Prefill(s) => dse::optimize_prefill(&model, &device, &cost, s, a.lp, &opts)?,
        SearchSpace::Decode(s) => {
            dse::optimize_decode(&model, &device, &cost, s, a.lp, a.ld, &opts)?
        }
    };
    let freq = a.freq_hz.unwrap_or(device.freq_hz);
    if let Some(path) = &a.csv {
        dse::write_points_csv(create(path)?, stage, &result.points, freq)?;
    }
    let mut report = Report::new(
        "dse",
        json!({
            "stage": stage,
            "lp": a.lp,
            "ld": if stage == Stage::Decode { Some(a.ld) } else { None },
            "freq_hz": freq,
            "cardinality": space.cardinality(),
            "result": result.summary(device.peak_bw_bytes_per_s),
        }),
    );
    input(&mut report, "device", &a.device)?;
    input(&mut report, "model", &a.model)?;
    if let Some(p) = &a.space {
        input(&mut report, "space", p)?;
    }
    if let Some(p) = &a.cost {
        input(&mut report, "cost", p)?;
    }
    emit(&report, &a.output)
}

pub fn graph(a: &GraphArgs) -> Res {
    let mut arch_freq = None;
    let g: ArchGraph = match (&a.graph, a.builtin) {
        (Some(p), _) => archgraph::load_graph(p)?,
        (None, Some(stage)) => {
            let path = a
                .arch
                .as_ref()
                .expect("clap requires --arch with --builtin");
            let arch: ArchConfig = config::read_json(path)?;
            match Stage::from(stage) {
                Stage::Prefill => {
                    let e = arch
                        .prefill
                        .ok_or_else(|| Failure::config("arch has no prefill stage"))?;
                    arch_freq = e.freq_hz;
                    archgraph::prefill_reference_graph(&e.config)
                }
                Stage::Decode => {
                    let e = arch
                        .decode
                        .ok_or_else(|| Failure::config("arch has no decode stage"))?;
                    arch_freq = e.freq_hz;
                    archgraph::decode_reference_graph(&e.config)
                }
            }
        }
        (None, None) => return Err(Failure::config("one of --graph or --builtin is required")),
    };
    let device: Option<DeviceSpec> = a
        .device
        .as_ref()
        .map(config::load_device_spec)
        .transpose()?;
    let freq = a
        .freq_hz
        .or(g.freq_hz)
        .or(arch_freq)
        .or(device.as_ref().map(|d| d.freq_hz));

    let mut inputs: Vec<(&str, &PathBuf)> = Vec::new();
    inputs.extend(a.graph.as_ref().map(|p| ("graph", p)));
    inputs.extend(a.arch.as_ref().map(|p| ("arch", p)));
    inputs.extend(a.device.as_ref().map(|p| ("device", p)));
    inputs.extend(a.cost.as_ref().map(|p| ("cost", p)));
    inputs.extend(a.model.as_ref().map(|p| ("model", p)));

    let (payload, failed) = match a.action {
        GraphAction::Validate => {
            let device = device.ok_or_else(|| Failure::config("graph validate needs --device"))?;
            let cost = load_cost(a.cost.as_ref())?;
            let v = archgraph::validate_graph(&g, &device, &cost);
            let first = v
                .errors()
                .next()
                .map(|c| format!("{} ({})", c.detail, c.field));
            let payload = json!({
                "graph": g.name,
                "valid": v.is_valid(),
                "errors": v.errors().count(),
                "warnings": v.warnings().count(),
                "checks": v.checks,
            });
            (payload, first)
        }
        GraphAction::Estimate => {
            let model_path = a
                .model
                .as_ref()
                .ok_or_else(|| Failure::config("graph estimate needs --model"))?;
            let model = config::load_model_spec(model_path)?;
            let freq = freq.ok_or_else(|| {
                Failure::config("no clock: pass --freq-hz or --device, or set freq_hz in the graph")
            })?;
            let workload = WorkloadShape::new(a.lp, a.ld)?;
            let lat = archgraph::estimate_graph_latency(&g, &model, &workload, freq)?;
            let bw: serde_json::Map<String, Value> = g
                .phase_bandwidth(freq)
                .into_iter()
                .map(|(name, b)| {
                    let peak = device.as_ref().map(|d| d.peak_bw_bytes_per_s);
                    (name, json!(b.summary(peak)))
                })
                .collect();
            let payload = json!({
                "graph": g.name,
                "lp": a.lp,
                "ld": a.ld,
                "latency": lat.summary(),
                "phase_bandwidth": bw,
            });
            (payload, None)
        }
    };
    let mut report = Report::new(
        match a.action {
            GraphAction::Validate => "graph validate",
            GraphAction::Estimate => "graph estimate",
        },
        payload,
    );
    for (name, p) in inputs {
        input(&mut report, name, p)?;
    }
    emit(&report, &a.output)?;
    match failed {
        Some(msg) => Err(Failure::new(
            4,
            "graph",
            format!("graph '{}' is invalid: {msg}", g.name),
        )),
        None => Ok(()),
    }
}

fn parse_shape(s: &str) -> Res<(usize, usize)> {
    let bad = || Failure::config(format!("--shape must be ROWSxCOLS, got '{s}'"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    let c: usize = c.trim().parse().map_err(|_| bad())?;
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

pub fn quantize(a: &QuantizeArgs) -> Res {
    let bits = QuantBits::from_bits(a.bits)
        .ok_or_else(|| Failure::config(format!("--bits must be 4 or 8, got {}", a.bits)))?;
    let spec = QuantSpec::new(
        bits,
        match a.symmetry {
            SymmetryArg::Symmetric => Symmetry::Symmetric,
            SymmetryArg::Asymmetric => Symmetry::Asymmetric,
        },
        match a.granularity {
            GranularityArg::PerTensor => Granularity::PerTensor,
            GranularityArg::PerToken => Granularity::PerToken,
            GranularityArg::PerChannel => Granularity::PerChannel,
        },
        QuantMode::Dynamic,
    );
    let mut x = match &a.input {
        Some(p) => {
            let t = tensorfile::load_tensor(config::resolve_config_path(p))?;
            t.as_real()
                .cloned()
                .ok_or_else(|| Failure::config("input tensor is already quantized"))?
        }
        None => {
            let shape = parse_shape(&a.shape)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            Array2::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
        }
    };
    if a.fht {
        for mut row in x.rows_mut() {
            let mut v = row.to_vec();
            quant::fht_in_place(&mut v, Normalization::Orthonormal)?;
            row.assign(&ndarray::ArrayView1::from(&v));
        }
    }
    let qt = quant::quantize_dynamic(&x, &spec)?;
    let stats = quant::round_trip_stats(&x, &qt);
    let mut file_round_trip = None;
    if let Some(p) = &a.output_tensor {
        let sidecar = (spec.symmetry == Symmetry::Symmetric
            && spec.granularity == Granularity::PerChannel)
            .then(|| WeightSidecar::from_weights(&qt))
            .transpose()?;
        let t = Tensor::Quantized {
            tensor: qt.clone(),
            sidecar,
        };
        tensorfile::save_tensor(p, &t)?;
        file_round_trip = Some(tensorfile::load_tensor(p)? == t);
    }
    let mut report = Report::new(
        "quantize",
        json!({
            "shape": [x.nrows(), x.ncols()],
            "spec": spec,
            "fht": a.fht,
            "groups": qt.params.scales.len(),
            "stats": stats,
            "file_round_trip": file_round_trip,
        }),
    );
    if let Some(p) = &a.input {
        input(&mut report, "input", p)?;
    }
    emit(&report, &a.output)
}

fn parse_tokens(s: &str) -> Res<Vec<usize>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Failure::config(format!("'{t}' is not a token id")))
        })
        .collect()
}

fn checksum(x: &Array2<f64>) -> f64 {
    x.iter().sum()
}

pub fn simulate(a: &SimulateArgs) -> Res {
    let spec = config::load_model_spec(&a.model)?;
    let mut model = load_model(&spec, a.weights.as_ref(), a.seed)?;
    if let Some(p) = &a.save_weights {
        model.save(p)?;
    }
    let prompt = parse_tokens(&a.prompt)?;
    if prompt.is_empty() {
        return Err(Failure::config("--prompt has no tokens"));
    }
    let path = exec_path(a.path);
    if path.is_quantized() {
        model.quantize(&prompt)?;
    }
    let (generated, prefill) = model.generate(&prompt, a.new_tokens, path)?;
    let mut report = Report::new(
        "simulate",
        json!({
            "model": spec.name,
            "path": format!("{:?}", path),
            "prompt": prompt,
            "generated": generated,
            "prefill_hidden_checksum": checksum(&prefill.hidden),
            "layer_checksums": prefill.layer_checksums,
        }),
    );
    input(&mut report, "model", &a.model)?;
    if let Some(p) = &a.weights {
        input(&mut report, "weights", p)?;
    }
    emit(&report, &a.output)
}

pub fn hmt(a: &HmtArgs) -> Res {
    let spec = config::load_model_spec(&a.model)?;
    let cost_model = config::load_model_spec(&a.cost_model)?;
    let arch: ArchConfig = config::read_json(&a.arch)?;
    let prefill = arch
        .prefill
        .ok_or_else(|| Failure::config("hmt needs a prefill stage in the arch file"))?;
    let entry = arch
        .hmt
        .ok_or_else(|| Failure::config("hmt needs an hmt entry in the arch file"))?;
    entry.config.validate()?;

    let mut cfg = entry.config;
    if let Some(s) = a.segment_len {
        cfg.segment_len = s;
        cfg.summary_half = None;
        cfg.short_term_len = None;
    }
    if let Some(n) = a.queue_len {
        cfg.memory_queue_len = n;
    }
    cfg.validate()?;

    let mut model = load_model(&spec, a.weights.as_ref(), a.seed)?;
    let topic = match &a.weights {
        Some(p) => hmt::load_topic(config::resolve_config_path(p), spec.d_h as usize)?,
        None => None,
    }
    .unwrap_or_else(|| hmt::random_topic(spec.d_h as usize, a.seed));
    let tokens = match &a.tokens {
        Some(p) => {
            let p = config::resolve_config_path(p);
            parse_tokens(&fs::read_to_string(&p).map_err(|e| io_failure(&p, e))?)?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x746f_6b65_6e73);
            let n = a.segments * cfg.segment_len as usize;
            (0..n)
                .map(|_| rng.gen_range(0..spec.d_lm_head as usize))
                .collect()
        }
    };
    let path = exec_path(a.path);
    if path.is_quantized() {
        let calib = &tokens[..tokens.len().min(cfg.segment_len as usize)];
        model.quantize(calib)?;
    }
    let run = hmt::run_pipeline(&tokens, &model, &topic, &cfg, path)?;

    let freq = prefill.freq_hz.or(entry.freq_hz).unwrap_or(300_000_000);
    let seg_cost = hmt::hmt_segment_cost(&cost_model, &prefill.config, &entry.config, freq)?;
    let cmp = perf::long_context_prefill_model(
        &cost_model,
        &prefill.config,
        &entry.config,
        a.total_len,
        freq,
        PluginCost::Modeled,
    )?;
    let mut report = Report::new(
        "hmt",
        json!({
            "functional": {
                "model": spec.name,
                "path": format!("{:?}", path),
                "config": cfg,
                "tokens": tokens.len(),
                "segments": run.segments,
                "max_queue_len": run.max_queue_len,
                "peak_score_len": run.peak_score_len,
                "backbone_tokens": run.backbone_tokens,
            },
            "cost": {
                "model": cost_model.name,
                "freq_hz": freq,
                "segment": seg_cost.summary(),
                "long_context": long_context_json(&cmp, a.total_len, &entry.config),
            },
        }),
    );
    input(&mut report, "model", &a.model)?;
    input(&mut report, "cost_model", &a.cost_model)?;
    input(&mut report, "arch", &a.arch)?;
    if let Some(p) = &a.weights {
        input(&mut report, "weights", p)?;
    }
    if let Some(p) = &a.tokens {
        input(&mut report, "tokens", p)?;
    }
    emit(&report, &a.output)
}

pub fn report(a: &ReportArgs) -> Res {
    let ra = Report::load(&config::resolve_config_path(&a.compare[0]))?;
    let rb = Report::load(&config::resolve_config_path(&a.compare[1]))?;
    let rows = report::compare(&ra, &rb)?;
    if let Some(p) = &a.csv {
        report::write_compare_csv(create(p)?, &rows)?;
    }
    let mut out = Report::new("report --compare", json!({ "rows": rows }));
    input(&mut out, "a", &a.compare[0])?;
    input(&mut out, "b", &a.compare[1])?;
    emit(&out, &a.output)
}
