use crate::exit::CliError;
use crate::{
    AllocateArgs, CalibrateArgs, Command, DivergeArgs, Format, InferArgs, Limits, Mode, QuantizeArgs, ReportCommand,
    SensitivitySource, Sweep, TraceNorm, ZooModel,
};
use anyhow::{Context, Result};
use dyq::graph::{
    build_quant_graph, calibrate, fold_bn, infer_fake, infer_true, load_calibration, load_manifest, load_model,
    load_topology, measure_divergence, save_calibration, save_manifest, save_model, uniform_bits, Calibration,
    FloatModel, GraphError, Topology,
};
use dyq::mpq::{
    estimate_traces, layer_costs, layer_profile, pareto_sweep, read_bit_config, read_latency_csv,
    read_sensitivity_json, read_traces, sensitivity, solve_ilp, write_bit_config, write_pareto_csv, write_profile_csv,
    write_sensitivity_json, write_traces, BitConfig, Constraint, Constraints, LatencyTable, LayerCosts,
    TraceNormalization, GBOPS, MB,
};
use dyq::tensor::{read_container, write_container, BitWidth, FloatTensor, Tensor};
use dyq::zoo;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

type Omegas = BTreeMap<String, BTreeMap<u32, f64>>;

pub fn run(command: Command, seed: u64) -> Result<()> {
    match command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Diverge(a) => cmd_diverge(a),
        Command::Allocate(a) => cmd_allocate(a, seed),
        Command::Report(r) => cmd_report(r, seed),
    }
}

/// Every `.dyqt` file in `dir`, in file-name order.
fn read_batches(dir: &Path) -> Result<Vec<FloatTensor>> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading data directory {}", dir.display()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.with_context(|| format!("reading data directory {}", dir.display()))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "dyqt") {
            files.push(path);
        }
    }
    files.sort();
    log::info!("{} batch files in {}", files.len(), dir.display());
    if files.is_empty() {
        return Err(CliError::no_data(format!("no .dyqt batches in {}", dir.display())));
    }
    files
        .iter()
        .map(|f| {
            let t = read_container(f).with_context(|| format!("reading {}", f.display()))?;
            t.into_float().with_context(|| format!("reading {}", f.display()))
        })
        .collect()
}

fn read_input(path: &Path) -> Result<FloatTensor> {
    let t = read_container(path).with_context(|| format!("reading {}", path.display()))?;
    t.into_float().with_context(|| format!("reading {}", path.display()))
}

fn folded_model(path: &Path) -> Result<FloatModel> {
    let model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(fold_bn(&model)?)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    if !(a.momentum > 0.0 && a.momentum < 1.0) {
        return Err(CliError::input(format!("momentum {} must lie in (0, 1)", a.momentum)));
    }
    let model = folded_model(&a.model)?;
    let batches = read_batches(&a.data)?;
    let calib = calibrate(&model, &batches, a.momentum)?;
    create_parent(&a.out)?;
    save_calibration(&calib, &a.out)?;
    println!("calibrated {} sites over {} batches -> {}", calib.len(), batches.len(), a.out.display());
    Ok(())
}

/// True when the model file carries parameter tensors, false for a bare architecture.
fn has_params(path: &Path) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(value.get("params").and_then(|p| p.as_object()).is_some_and(|p| !p.is_empty()))
}

fn check_bits(bits: u32) -> Result<()> {
    match BitWidth::from_bits(bits) {
        Some(_) => Ok(()),
        None => Err(CliError::input(format!("unsupported bit-width {bits}"))),
    }
}

fn print_size_report(topology: &Topology, bits: &BTreeMap<String, u32>) -> Result<()> {
    let mut options: Vec<u32> = bits.values().copied().collect();
    options.sort_unstable();
    options.dedup();
    let costs = layer_costs(topology, &options, None)?;
    let (mut size, mut bops) = (0.0, 0.0);
    for l in &costs.layers {
        let b = *bits.get(&l.name).ok_or_else(|| GraphError::MissingBits(l.name.clone()))?;
        size += l.size_at(b);
        bops += l.bops_at(b);
    }
    println!("layers: {}", costs.layers.len());
    println!("size: {:.3} MB ({size} bytes)", size / MB);
    println!("bops: {:.2} G", bops / GBOPS);
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let topology = load_topology(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let bits = match &a.config {
        Some(cfg) => read_bit_config(cfg)?,
        None => {
            check_bits(a.bits)?;
            uniform_bits(&topology, a.bits, !a.no_pin)
        }
    };
    for &b in bits.values() {
        check_bits(b)?;
    }
    print_size_report(&topology, &bits)?;
    if !has_params(&a.model)? {
        println!("architecture only: no manifest written");
        return Ok(());
    }
    let calib_path = a.calib.ok_or_else(|| CliError::input("--calib is required to quantize a model"))?;
    let out = a.out.ok_or_else(|| CliError::input("--out is required to quantize a model"))?;
    let model = folded_model(&a.model)?;
    let calib = load_calibration(&calib_path).with_context(|| format!("loading {}", calib_path.display()))?;
    let graph = build_quant_graph(&model, &calib, &bits)?;
    log::info!("{} dyadic rescale edges", graph.dyadic_edges());
    let path = save_manifest(&graph, &calib, &out, &a.stem)?;
    println!("manifest: {}", path.display());
    Ok(())
}

/// Indices of the `k` largest values, ties to the lower index.
fn top_k(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (graph, _) = load_manifest(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let input = read_input(&a.input)?;
    let result = match a.mode {
        Mode::True => infer_true(&graph, &input)?,
        Mode::Fake => infer_fake(&graph, &input)?,
    };
    if a.mode == Mode::True {
        println!("float-ops: {}", result.ops.float_ops_in_window);
    }
    let logits = &result.logits;
    let n = logits.dims()[0].max(1);
    let per = logits.len() / n;
    for (s, row) in logits.data().chunks(per.max(1)).enumerate() {
        let picks: Vec<String> = top_k(row, a.top_k).into_iter().map(|i| format!("{i}={}", row[i])).collect();
        println!("sample {s}: {}", picks.join(" "));
    }
    if let Some(out) = &a.out {
        create_parent(out)?;
        write_container(&Tensor::Float(result.logits.clone()), out)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_diverge(a: DivergeArgs) -> Result<()> {
    let (graph, _) = load_manifest(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let input = read_input(&a.input)?;
    let report = measure_divergence(&graph, &input)?;
    let mut csv = String::from("layer,normalized_difference\n");
    for s in &report.sites {
        csv.push_str(&format!("{},{}\n", s.site, s.normalized));
    }
    match &a.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn normalization(n: TraceNorm) -> TraceNormalization {
    match n {
        TraceNorm::Raw => TraceNormalization::Raw,
        TraceNorm::PerParameter => TraceNormalization::PerParameter,
    }
}

fn bit_options(bits: &[u32]) -> Result<Vec<u32>> {
    let mut v = bits.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.is_empty() {
        return Err(CliError::input("no bit options"));
    }
    for &b in &v {
        check_bits(b)?;
    }
    Ok(v)
}

struct Resolved {
    topology: Topology,
    omegas: Omegas,
    traces: Option<BTreeMap<String, f64>>,
}

/// Topology plus Ω per layer and bit option, from whichever source was given.
fn resolve(src: &SensitivitySource, bits: &[u32], seed: u64) -> Result<Resolved> {
    let topology = match (&src.arch, &src.model) {
        (Some(p), _) | (None, Some(p)) => load_topology(p).with_context(|| format!("loading {}", p.display()))?,
        (None, None) => return Err(CliError::input("one of --arch or --model is required")),
    };
    if let Some(path) = &src.sensitivity {
        let omegas = read_sensitivity_json(path)?;
        return Ok(Resolved { topology, omegas, traces: None });
    }
    let model_path = src
        .model
        .as_ref()
        .ok_or_else(|| CliError::input("sensitivities need --sensitivity, or --model with --traces or --estimate"))?;
    let model = folded_model(model_path)?;
    let traces = if let Some(path) = &src.traces {
        read_traces(path)?
    } else if src.estimate {
        let dir = src.data.as_ref().ok_or_else(|| CliError::input("--estimate needs --data"))?;
        let batches = read_batches(dir)?;
        estimate_traces(&model, &batches, src.samples, seed)?
    } else {
        return Err(CliError::input("sensitivities need --sensitivity, --traces or --estimate"));
    };
    let table = sensitivity(&model, &traces, bits, normalization(src.trace_norm))?;
    Ok(Resolved { topology, omegas: table.omegas(), traces: Some(traces) })
}

fn read_latency(path: Option<&PathBuf>) -> Result<Option<LatencyTable>> {
    path.map(|p| read_latency_csv(p).map_err(anyhow::Error::from)).transpose()
}

fn constraints(limits: &Limits) -> Result<Constraints> {
    for (name, v) in [("size", limits.size_limit), ("BOPS", limits.bops_limit), ("latency", limits.latency_limit)] {
        if let Some(v) = v.filter(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CliError::input(format!("{name} limit {v} must be a non-negative number")));
        }
    }
    if limits.latency_limit.is_some() && limits.latency.is_none() {
        return Err(CliError::input("--latency-limit needs a --latency table"));
    }
    Ok(Constraints {
        size_bytes: limits.size_limit.map(|v| v * MB),
        bops: limits.bops_limit.map(|v| v * GBOPS),
        latency_ms: limits.latency_limit,
    })
}

/// First and last layers held at 8 bits unless pinning is off.
fn pins(costs: &LayerCosts, bits: &[u32], no_pin: bool) -> Result<BTreeMap<String, u32>> {
    if no_pin || costs.layers.is_empty() {
        return Ok(BTreeMap::new());
    }
    if !bits.contains(&8) {
        return Err(CliError::input("first/last-layer pinning needs the 8-bit option; pass --no-pin"));
    }
    let first = costs.layers.first().expect("non-empty").name.clone();
    let last = costs.layers.last().expect("non-empty").name.clone();
    Ok(BTreeMap::from([(first, 8), (last, 8)]))
}

fn planned_costs(resolved: &Resolved, limits: &Limits, bits: &[u32]) -> Result<LayerCosts> {
    let latency = read_latency(limits.latency.as_ref())?;
    let mut costs = layer_costs(&resolved.topology, bits, latency.as_ref())?;
    costs.apply_sensitivity(&resolved.omegas)?;
    Ok(costs)
}

fn print_config(cfg: &BitConfig) {
    println!("objective: {}", cfg.objective);
    println!("size: {:.3} MB", cfg.totals.size_mb());
    println!("bops: {:.2} G", cfg.totals.gbops());
    if let Some(ms) = cfg.totals.latency_ms {
        println!("latency: {ms:.3} ms");
    }
    for (layer, bits) in &cfg.layers {
        println!("  {layer}: {bits}");
    }
}

fn cmd_allocate(a: AllocateArgs, seed: u64) -> Result<()> {
    let bits = bit_options(&a.limits.bits)?;
    let limits = constraints(&a.limits)?;
    if limits == Constraints::default() && !a.unconstrained {
        return Err(CliError::input("give at least one limit or --unconstrained"));
    }
    let resolved = resolve(&a.source, &bits, seed)?;
    let costs = planned_costs(&resolved, &a.limits, &bits)?;
    let pinned = pins(&costs, &bits, a.limits.no_pin)?;
    let cfg = solve_ilp(&costs, &limits, &pinned)?;
    print_config(&cfg);
    if let Some(out) = &a.out {
        create_parent(out)?;
        write_bit_config(&cfg, out)?;
    }
    Ok(())
}

fn cmd_report(r: ReportCommand, seed: u64) -> Result<()> {
    match r {
        ReportCommand::Costs { arch, bits, latency, format, out } => report_costs(&arch, &bits, latency, format, out),
        ReportCommand::Sensitivity { source, bits, traces_out, out } => {
            let bits = bit_options(&bits)?;
            let resolved = resolve(&source, &bits, seed)?;
            create_parent(&out)?;
            write_sensitivity_json(&resolved.omegas, &out)?;
            if let Some(path) = traces_out {
                let traces =
                    resolved.traces.ok_or_else(|| CliError::input("--traces-out needs --traces or --estimate"))?;
                create_parent(&path)?;
                write_traces(&traces, &path)?;
            }
            println!("sensitivities for {} layers -> {}", resolved.omegas.len(), out.display());
            Ok(())
        }
        ReportCommand::Pareto { source, limits, sweep, thresholds, out, profile } => {
            report_pareto(&source, &limits, sweep, &thresholds, out, profile, seed)
        }
        ReportCommand::Zoo { name, out, batches, batch_size } => report_zoo(name, &out, batches, batch_size, seed),
    }
}

fn report_costs(
    arch: &Path,
    bits: &[u32],
    latency: Option<PathBuf>,
    format: Format,
    out: Option<PathBuf>,
) -> Result<()> {
    let bits = bit_options(bits)?;
    let topology = load_topology(arch).with_context(|| format!("loading {}", arch.display()))?;
    let latency = read_latency(latency.as_ref())?;
    let costs = layer_costs(&topology, &bits, latency.as_ref())?;
    println!("config,size_mb,gbops");
    let fp = costs.uniform_totals(32);
    println!("fp32,{:.3},{:.2}", fp.size_mb(), fp.gbops());
    for &b in bits.iter().rev() {
        let t = costs.uniform_totals(b);
        println!("w{b},{:.3},{:.2}", t.size_mb(), t.gbops());
        if b != 8 {
            let t = costs.pinned_totals(b);
            println!("w{b}-first-last-8,{:.3},{:.2}", t.size_mb(), t.gbops());
        }
    }
    let Some(out) = out else { return Ok(()) };
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&costs)? + "\n",
        Format::Csv => {
            let mut s = String::from("layer,macs,weights,biases,bits,size_bytes,bops,latency_ms\n");
            for l in &costs.layers {
                for o in &l.options {
                    let ms = o.latency_ms.map_or(String::new(), |v| v.to_string());
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        l.name, l.macs, l.weights, l.biases, o.bits, o.size_bytes, o.bops, ms
                    ));
                }
            }
            s
        }
    };
    write_text(&out, &text)
}

fn report_pareto(
    source: &SensitivitySource,
    limits: &Limits,
    sweep: Sweep,
    thresholds: &[f64],
    out: Option<PathBuf>,
    profile: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let bits = bit_options(&limits.bits)?;
    let base = constraints(limits)?;
    let (swept, unit) = match sweep {
        Sweep::Size => (Constraint::Size, MB),
        Sweep::Bops => (Constraint::Bops, GBOPS),
        Sweep::Latency => (Constraint::Latency, 1.0),
    };
    if swept == Constraint::Latency && limits.latency.is_none() {
        return Err(CliError::input("a latency sweep needs a --latency table"));
    }
    let resolved = resolve(source, &bits, seed)?;
    let costs = planned_costs(&resolved, limits, &bits)?;
    let pinned = pins(&costs, &bits, limits.no_pin)?;
    let scaled: Vec<f64> = thresholds.iter().map(|t| t * unit).collect();
    let rows = pareto_sweep(&costs, &base, swept, &scaled, &pinned)?;
    let mut buf = Vec::new();
    write_pareto_csv(&rows, &costs, swept, &mut buf)?;
    match &out {
        Some(path) => write_text(path, &String::from_utf8(buf)?)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    if let Some(path) = profile {
        let mut buf = Vec::new();
        write_profile_csv(&layer_profile(&costs), &mut buf)?;
        write_text(&path, &String::from_utf8(buf)?)?;
    }
    let feasible = rows.iter().filter(|r| r.config.is_some()).count();
    eprintln!("{feasible} of {} thresholds feasible", rows.len());
    Ok(())
}

fn write_float(t: FloatTensor, path: &Path) -> Result<()> {
    create_parent(path)?;
    write_container(&Tensor::Float(t), path).with_context(|| format!("writing {}", path.display()))
}

fn report_zoo(name: ZooModel, out: &Path, batches: usize, batch_size: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let topology = match name {
        ZooModel::Resnet18 => {
            let path = out.join("resnet18.json");
            write_text(&path, &(serde_json::to_string_pretty(&zoo::resnet18())? + "\n"))?;
            println!("architecture: {}", path.display());
            return Ok(());
        }
        ZooModel::Witness => {
            let (graph, input) = zoo::residual_rounding_witness();
            let path = save_manifest(&graph, &Calibration::new(), out, "witness")?;
            write_float(input, &out.join("input.dyqt"))?;
            println!("manifest: {}", path.display());
            return Ok(());
        }
        ZooModel::Toy => zoo::toy_cnn(),
        ZooModel::Residual16 => zoo::residual_network(7, 8, 8),
    };
    let stem = topology.name.clone();
    let model = zoo::random_model(topology, seed);
    let mut shape = model.input_shape().to_vec();
    shape[0] = batch_size.max(1);
    for i in 0..batches {
        let batch = zoo::random_input(&shape, seed.wrapping_add(1 + i as u64));
        write_float(batch, &out.join("calib").join(format!("batch_{i:03}.dyqt")))?;
    }
    write_float(zoo::random_input(&shape, seed.wrapping_add(1_000_003)), &out.join("input.dyqt"))?;
    let path = save_model(&model, out, &stem)?;
    println!("model: {}", path.display());
    Ok(())
}
