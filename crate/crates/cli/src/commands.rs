use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use anda::bops::{bops_reduction, eval_bops, ModelShape, PrecisionCombination};
use anda::layout::{read_container, write_container};
use anda::matrix::Matrix;
use anda::numfmt::{decode_tensor, encode_tensor, error_stats, AndaParams, Half};
use anda::search::{search, AccuracyOracle, EvalTarget, SearchConfig};
use anda::sim::{
    compare, report_metrics, simulate_model, tradeoff_sweep, ArchConfig, EnergyParams, Platform, COMPARISON_CSV_HEADER,
};
use anda::workload::{
    gen_synthetic, load_tensor, save_tensor, serve, sweep_format, CalibrationWorkload, ExternalOracle, OracleEndpoint,
    ProxyOracle, SyntheticSpec, SWEEP_CSV_HEADER,
};

use crate::manifest::RunManifest;
use crate::{
    Command, CompareArgs, ConfigArgs, CostArgs, DecodeArgs, EncodeArgs, GenArgs, OracleServeArgs, PlatformArg,
    SearchArgs, SimulateArgs, SweepArgs, TradeoffArgs,
};

pub const CONFIG_DIR_ENV: &str = "ANDA_CONFIG_DIR";

/// Bad flag value detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// No combination met the tolerance.
#[derive(Debug)]
struct Infeasible(String);

impl fmt::Display for Infeasible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Infeasible {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    if e.downcast_ref::<Infeasible>().is_some() {
        return 3;
    }
    if let Some(err) = e.downcast_ref::<anda::Error>() {
        return match err {
            anda::Error::TileExceedsBuffer { .. } => 4,
            anda::Error::Io(_)
            | anda::Error::OracleFailure { .. }
            | anda::Error::OracleTimeout(_)
            | anda::Error::MalformedResponse(_)
            | anda::Error::NonFiniteScore => 1,
            _ => 2,
        };
    }
    if e.downcast_ref::<serde_json::Error>().is_some() {
        return 2;
    }
    1
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Search(a) => cmd_search(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Tradeoff(a) => cmd_tradeoff(a),
        Command::OracleServe(a) => cmd_oracle_serve(a),
        Command::Config(a) => cmd_config(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Comma list or inclusive `a..b` range.
fn parse_list<T>(s: &str, what: &str) -> Result<Vec<T>>
where
    T: FromStr + Copy + PartialOrd + TryFrom<u64> + Into<u64>,
{
    let bad = || usage(format!("bad {what} list {s:?}"));
    let s = s.trim();
    if s.is_empty() {
        return Err(usage(format!("{what} list is empty")));
    }
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: T = lo.trim().parse().map_err(|_| bad())?;
        let hi: T = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return (lo.into()..=hi.into())
            .map(|v| T::try_from(v).map_err(|_| bad()))
            .collect();
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

fn parse_deltas(s: &str) -> Result<Vec<f64>> {
    let out: Vec<f64> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| usage(format!("bad tolerance {p:?}"))))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(usage("tolerance list is empty"));
    }
    Ok(out)
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let params = AndaParams::new(usize::from(a.gs), a.m)?;
    let input = load_tensor(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let tensor = encode_tensor(&input, params)?;
    let mut out = create(&a.out)?;
    write_container(&tensor, &mut out)?;
    out.flush()?;
    drop(out);

    let stats = error_stats(&input.map(|h| h.to_f32()), &decode_tensor(&tensor))?;
    let bytes = fs::metadata(&a.out)?.len();
    println!(
        "rows {} cols {} gs {} m {} bytes {}",
        input.rows(),
        input.cols(),
        a.gs,
        a.m,
        bytes
    );
    println!("max_abs {} nrmse {}", stats.max_abs, stats.nrmse);

    let mut manifest = RunManifest::new("encode", json!({ "gs": a.gs, "m": a.m }), None);
    manifest.add_input(&a.input)?;
    manifest.write_for(&a.out)
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let f = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let tensor = read_container(io::BufReader::new(f))?;
    let decoded: Matrix<Half> = decode_tensor(&tensor).map(|&x| Half::from_f32(x));
    save_tensor(&a.out, &decoded)?;
    let p = tensor.params();
    println!(
        "rows {} cols {} gs {} m {}",
        tensor.rows(),
        tensor.cols(),
        p.group_size(),
        p.mantissa_len()
    );
    let mut manifest = RunManifest::new("decode", json!({}), None);
    manifest.add_input(&a.input)?;
    manifest.write_for(&a.out)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: a.seed,
        d_model: a.d_model,
        d_ff: a.d_ff.unwrap_or(4 * a.d_model),
        tokens: a.tokens,
        family: a.family.into(),
        chain: a.chain,
    };
    let w = gen_synthetic(&spec)?;
    let path = w.save(&a.out)?;
    println!("{}", path.display());
    RunManifest::new("gen", serde_json::to_value(spec)?, Some(a.seed)).write_to(&a.out.join("manifest.json"))
}

fn load_workload(path: &Path) -> Result<CalibrationWorkload> {
    CalibrationWorkload::load(path).with_context(|| format!("loading workload {}", path.display()))
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let gs: Vec<u64> = parse_list(&a.gs_list, "group size")?;
    let ms: Vec<u8> = parse_list(&a.m_list, "mantissa length")?;
    let gs: Vec<usize> = gs.into_iter().map(|g| g as usize).collect();
    let w = load_workload(&a.workload)?;
    let rows = sweep_format(&w, &gs, &ms)?;
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.group_size, r.mantissa_len, r.nrmse, r.max_abs));
    }
    match &a.csv {
        Some(path) => {
            write_text(path, &csv)?;
            let mut manifest = RunManifest::new("sweep", json!({ "gs_list": gs, "m_list": ms }), None);
            manifest.add_workload(&a.workload)?;
            manifest.write_for(path)
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Test oracles with closed-form scores.
enum SyntheticOracle {
    Min16,
    Threshold([u8; 4]),
}

impl SyntheticOracle {
    fn parse(s: &str) -> Result<Self> {
        if s == "min16" {
            return Ok(SyntheticOracle::Min16);
        }
        if let Some(t) = s.strip_prefix("threshold:") {
            let c: PrecisionCombination = t.parse().map_err(|e| usage(format!("{e}")))?;
            return Ok(SyntheticOracle::Threshold(c.as_array()));
        }
        Err(usage(format!("unknown synthetic oracle {s:?}")))
    }
}

impl AccuracyOracle for SyntheticOracle {
    fn evaluate(&mut self, target: EvalTarget) -> anda::Result<f64> {
        let EvalTarget::Combination(c) = target else {
            return Ok(1.0);
        };
        Ok(match self {
            SyntheticOracle::Min16 => f64::from(c.min_component()) / 16.0,
            SyntheticOracle::Threshold(t) => {
                if c.as_array().iter().zip(t.iter()).all(|(m, t)| m >= t) {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }
}

fn make_oracle(spec: &str, workload: Option<&Path>, timeout_s: f64) -> Result<Box<dyn AccuracyOracle>> {
    if !(timeout_s > 0.0 && timeout_s.is_finite()) {
        return Err(usage("oracle timeout must be positive"));
    }
    let timeout = Duration::from_secs_f64(timeout_s);
    if spec == "proxy" {
        let path = workload.ok_or_else(|| usage("the proxy oracle needs --workload"))?;
        return Ok(Box::new(ProxyOracle::new(load_workload(path)?)?));
    }
    if let Some(cmd) = spec.strip_prefix("exec:") {
        let endpoint = OracleEndpoint::exec(cmd)?;
        return Ok(Box::new(ExternalOracle::connect(&endpoint, timeout)?));
    }
    if let Some(files) = spec.strip_prefix("files:") {
        let (req, resp) = files
            .split_once(',')
            .ok_or_else(|| usage("files oracle needs <request>,<response>"))?;
        let endpoint = OracleEndpoint::FilePair {
            request: PathBuf::from(req),
            response: PathBuf::from(resp),
        };
        return Ok(Box::new(ExternalOracle::connect(&endpoint, timeout)?));
    }
    if let Some(s) = spec.strip_prefix("synthetic:") {
        return Ok(Box::new(SyntheticOracle::parse(s)?));
    }
    Err(usage(format!("unknown oracle {spec:?}")))
}

fn load_shape(path: &Path) -> Result<ModelShape> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ModelShape::from_json(&text).with_context(|| format!("parsing shape {}", path.display()))
}

#[derive(Serialize)]
struct SearchResult {
    best: Option<PrecisionCombination>,
    bops: Option<u64>,
    reduction: Option<f64>,
    fp_score: f64,
    iterations: usize,
    exhausted: bool,
    shape: ModelShape,
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let shape = match (&a.shape, &a.workload) {
        (Some(s), _) => load_shape(s)?,
        (None, Some(w)) => load_workload(w)?.shape()?,
        (None, None) => return Err(usage("search needs --shape or --workload")),
    };
    let cfg = SearchConfig {
        tolerance: a.delta,
        max_iters: if a.exhaustive { None } else { Some(a.max_iters) },
        init_lo: a.init_lo,
        init_hi: a.init_hi,
        floor: a.floor,
    };
    cfg.validate()?;
    let mut oracle = make_oracle(&a.oracle, a.workload.as_deref(), a.oracle_timeout)?;
    let trace = search(&shape, oracle.as_mut(), &cfg)?;

    let mut manifest = RunManifest::new(
        "search",
        json!({ "search": cfg, "oracle": a.oracle, "shape": shape }),
        None,
    );
    if let Some(w) = &a.workload {
        manifest.add_workload(w)?;
    }
    if let Some(s) = &a.shape {
        manifest.add_input(s)?;
    }
    if let Some(path) = &a.trace {
        let mut out = create(path)?;
        trace.write_jsonl(&mut out)?;
        out.flush()?;
        manifest.write_for(path)?;
    }
    let result = SearchResult {
        best: trace.best,
        bops: trace.best.map(|c| eval_bops(&c, &shape)),
        reduction: trace.best.map(|c| bops_reduction(&c, &shape)),
        fp_score: trace.fp_score,
        iterations: trace.records.len(),
        exhausted: trace.exhausted,
        shape,
    };
    if let Some(path) = &a.out {
        write_text(path, &(serde_json::to_string_pretty(&result)? + "\n"))?;
        manifest.write_for(path)?;
    }
    println!("iterations {}", result.iterations);
    match (result.best, result.bops, result.reduction) {
        (Some(c), Some(bops), Some(red)) => {
            println!("best {c}");
            println!("bops {bops}");
            println!("reduction {red:.3}");
            Ok(())
        }
        _ => Err(Infeasible(format!(
            "no combination met tolerance {} within {} iterations",
            a.delta, result.iterations
        ))
        .into()),
    }
}

/// `m1,m2,m3,m4`, or a search result file whose `best` field holds one.
fn parse_comb(s: &str) -> Result<PrecisionCombination> {
    if let Ok(c) = s.parse::<PrecisionCombination>() {
        return Ok(c);
    }
    let path = Path::new(s);
    if !path.is_file() {
        return Err(usage(format!("{s:?} is neither a combination nor a search result file")));
    }
    let v: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    match v.get("best") {
        Some(b) if !b.is_null() => Ok(serde_json::from_value(b.clone()).map_err(|e| usage(format!("{s}: {e}")))?),
        _ => Err(usage(format!("{s} holds no feasible combination"))),
    }
}

fn config_path(explicit: Option<&Path>, name: &str) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| {
        std::env::var_os(CONFIG_DIR_ENV)
            .map(|d| PathBuf::from(d).join(name))
            .filter(|p| p.is_file())
    })
}

struct CostSetup {
    shape: ModelShape,
    arch: ArchConfig,
    energy: EnergyParams,
    manifest_inputs: Vec<PathBuf>,
}

impl CostSetup {
    fn load(c: &CostArgs) -> Result<Self> {
        let mut inputs = vec![c.shape.clone()];
        let shape = load_shape(&c.shape)?;
        let arch = match config_path(c.arch.as_deref(), "arch.json") {
            Some(p) => {
                let a = ArchConfig::from_json(&fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?;
                inputs.push(p);
                a
            }
            None => ArchConfig::default(),
        };
        let energy = match config_path(c.energy.as_deref(), "energy.json") {
            Some(p) => {
                let e = EnergyParams::from_json(&fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?;
                inputs.push(p);
                e
            }
            None => EnergyParams::default(),
        };
        Ok(CostSetup {
            shape,
            arch,
            energy,
            manifest_inputs: inputs,
        })
    }

    fn manifest(&self, command: &str, tokens: usize, extra: Value) -> Result<RunManifest> {
        let mut m = RunManifest::new(
            command,
            json!({
                "shape": self.shape,
                "arch": self.arch,
                "energy": self.energy,
                "tokens": tokens,
                "extra": extra,
            }),
            None,
        );
        for p in &self.manifest_inputs {
            m.add_input(p)?;
        }
        Ok(m)
    }
}

fn platform(p: PlatformArg, c: PrecisionCombination) -> Platform {
    match p {
        PlatformArg::Anda => Platform::Anda(c),
        PlatformArg::Fpfp => Platform::FpFp,
        PlatformArg::Fpint => Platform::FpInt,
        PlatformArg::Ifpu => Platform::Ifpu,
        PlatformArg::Figna => Platform::Figna,
        PlatformArg::FignaM8 => Platform::FignaM(8),
        PlatformArg::FignaM11 => Platform::FignaM(11),
    }
}

fn write_outputs(cost: &CostArgs, csv: &str, json_value: &Value, manifest: &RunManifest) -> Result<()> {
    if let Some(path) = &cost.csv {
        write_text(path, csv)?;
        manifest.write_for(path)?;
    }
    if let Some(path) = &cost.json {
        write_text(path, &(serde_json::to_string_pretty(json_value)? + "\n"))?;
        manifest.write_for(path)?;
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let setup = CostSetup::load(&a.cost)?;
    let c = parse_comb(&a.comb)?;
    let p = platform(a.platform, c);
    let tokens = a.cost.tokens;
    let report = simulate_model(&setup.shape, p, tokens, &setup.arch, &setup.energy)?;
    let base = simulate_model(&setup.shape, Platform::FpFp, tokens, &setup.arch, &setup.energy)?;
    let speedup = report.speedup_over(&base);
    let efficiency = report.energy_efficiency_over(&base);

    let mut csv = format!("{COMPARISON_CSV_HEADER}\n");
    for (metric, value) in report_metrics(&report)
        .into_iter()
        .chain([("speedup_vs_fpfp", speedup), ("energy_eff_vs_fpfp", efficiency)])
    {
        csv.push_str(&format!("{},{},{}\n", report.platform, metric, value));
    }
    let manifest = setup.manifest("simulate", tokens, json!({ "comb": c, "platform": report.platform }))?;
    let value = json!({
        "report": report,
        "speedup_vs_fpfp": speedup,
        "energy_eff_vs_fpfp": efficiency,
    });
    write_outputs(&a.cost, &csv, &value, &manifest)?;
    println!("platform {} comb {}", report.platform, c);
    println!("total_cycles {}", report.total_cycles);
    println!("energy_pj {}", report.energy.total);
    println!("speedup_vs_fpfp {speedup}");
    println!("energy_eff_vs_fpfp {efficiency}");
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let setup = CostSetup::load(&a.cost)?;
    let c = parse_comb(&a.comb)?;
    let tokens = a.cost.tokens;
    let cmp = compare(&setup.shape, c, tokens, &setup.arch, &setup.energy)?;
    let manifest = setup.manifest("compare", tokens, json!({ "comb": c }))?;
    write_outputs(&a.cost, &cmp.to_csv(), &serde_json::to_value(&cmp)?, &manifest)?;
    if let Some(path) = &a.plot_data {
        let names: Vec<&str> = cmp.rows.iter().map(|r| r.platform.as_str()).collect();
        let plot = json!({
            "series": [
                { "name": "speedup", "x": names, "y": cmp.rows.iter().map(|r| r.speedup).collect::<Vec<_>>() },
                { "name": "energy_efficiency", "x": names, "y": cmp.rows.iter().map(|r| r.energy_efficiency).collect::<Vec<_>>() },
            ]
        });
        write_text(path, &(serde_json::to_string_pretty(&plot)? + "\n"))?;
        manifest.write_for(path)?;
    }
    println!("{:<10} {:>10} {:>12}", "platform", "speedup", "energy_eff");
    for r in &cmp.rows {
        println!("{:<10} {:>10.4} {:>12.4}", r.platform, r.speedup, r.energy_efficiency);
    }
    Ok(())
}

fn cmd_tradeoff(a: TradeoffArgs) -> Result<()> {
    let setup = CostSetup::load(&a.cost)?;
    let deltas = parse_deltas(&a.deltas)?;
    let cfg = SearchConfig {
        max_iters: Some(a.max_iters),
        ..SearchConfig::default()
    };
    let mut oracle = make_oracle(&a.oracle, a.workload.as_deref(), a.oracle_timeout)?;
    let points = tradeoff_sweep(
        &setup.shape,
        oracle.as_mut(),
        &deltas,
        &cfg,
        a.cost.tokens,
        &setup.arch,
        &setup.energy,
    )?;
    let mut csv = String::from("delta,comb,speedup,energy_efficiency\n");
    for p in &points {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let comb = p
            .combination
            .map_or_else(|| "infeasible".to_string(), |c| format!("\"{c}\""));
        csv.push_str(&format!(
            "{},{},{},{}\n",
            p.tolerance,
            comb,
            opt(p.speedup),
            opt(p.energy_efficiency)
        ));
    }
    let mut manifest = setup.manifest("tradeoff", a.cost.tokens, json!({ "deltas": deltas, "search": cfg, "oracle": a.oracle }))?;
    if let Some(w) = &a.workload {
        manifest.add_workload(w)?;
    }
    write_outputs(&a.cost, &csv, &serde_json::to_value(&points)?, &manifest)?;
    if let Some(path) = &a.plot_data {
        let plot = json!({
            "series": [
                { "name": "speedup", "x": deltas, "y": points.iter().map(|p| p.speedup).collect::<Vec<_>>() },
                { "name": "energy_efficiency", "x": deltas, "y": points.iter().map(|p| p.energy_efficiency).collect::<Vec<_>>() },
            ]
        });
        write_text(path, &(serde_json::to_string_pretty(&plot)? + "\n"))?;
        manifest.write_for(path)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_oracle_serve(a: OracleServeArgs) -> Result<()> {
    let mut oracle: Box<dyn AccuracyOracle> = match (&a.proxy, &a.synthetic) {
        (Some(w), None) => Box::new(ProxyOracle::new(load_workload(w)?)?),
        (None, Some(s)) => Box::new(SyntheticOracle::parse(s)?),
        _ => return Err(usage("oracle-serve needs exactly one of --proxy or --synthetic")),
    };
    let stdin = io::stdin();
    let stdout = io::stdout();
    serve(oracle.as_mut(), stdin.lock(), stdout.lock()).map_err(|e| anyhow!(e))
}

fn cmd_config(a: ConfigArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    write_text(&a.out.join("arch.json"), &ArchConfig::default().to_tagged_json()?)?;
    write_text(&a.out.join("energy.json"), &EnergyParams::default().to_tagged_json()?)?;
    println!("{}", a.out.display());
    Ok(())
}
