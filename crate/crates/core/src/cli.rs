//! Command-line front end. The binary is a thin wrapper around [`run`].

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ParamSet, Trilinear};
use crate::config::{Ablation, MetaConfig};
use crate::data::{build_temporal_kg, parse_quadruples, split_by_time, HistoryMode, TemporalKg};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, EvalReport, HistoryKey};
use crate::experiment::{build_report, evaluate_model, train_model, Mode, ReportOptions};
use crate::gradcheck::{run_suite, DEFAULT_STEP};
use crate::meta::{write_loss_log, GateSet};
use crate::synth::{changepoint_at, generate, RegimeSpec};

pub const THREADS_ENV: &str = "TEMPO_META_THREADS";

const PARAMS_FILE: &str = "params.ckpt";
const GATES_FILE: &str = "gates.ckpt";
const CONFIG_FILE: &str = "config.cfg";
const MANIFEST_FILE: &str = "manifest.json";
const LOSS_LOG_FILE: &str = "loss_log.csv";
const RANK_LOG_FILE: &str = "rank_log.csv";
const REPORT_FILE: &str = "report.json";

/// Gradient tolerance `gradcheck` enforces.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "tempo-meta", version, about = "Temporal meta-learning for TKG entity prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss log and manifest.
    Train(TrainArgs),
    /// Adapt a trained model over valid and test, and rank the test facts.
    Eval(EvalArgs),
    /// Train and evaluate the full, no-gate and shared-gate variants.
    Ablate(AblateArgs),
    /// Generate a synthetic graph with a changepoint.
    Synth(SynthArgs),
    /// Finite-difference check of backbone and gate gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Quadruple file (subject relation object time per line).
    #[arg(long = "data", alias = "train-file")]
    data: PathBuf,
    /// Raw time units per timestamp.
    #[arg(long, default_value_t = 1)]
    time_gap: u64,
    /// Train/valid/test proportions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// key=value config file; defaults apply to unset keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `meta` or `plain` (sequential training).
    #[arg(long, default_value = "meta")]
    mode: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset; defaults to the one recorded in the checkpoint manifest.
    #[arg(long = "data", alias = "train-file")]
    data: Option<PathBuf>,
    #[arg(long)]
    time_gap: Option<u64>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    test_steps: Option<usize>,
    /// `meta`, `plain` or `finetune`.
    #[arg(long, default_value = "meta")]
    mode: String,
    /// Breakdowns to add: `period`, `history` (repeatable).
    #[arg(long, value_delimiter = ',')]
    buckets: Vec<String>,
    #[arg(long, default_value_t = 4)]
    periods: usize,
    /// Inclusive upper bounds of the history buckets.
    #[arg(long, default_value = "50,200,500")]
    history_bounds: String,
    /// `all` (every preceding fact) or `train` (training facts only).
    #[arg(long, default_value = "all")]
    history_mode: String,
    /// `gold` or `subject` (the query's known entity).
    #[arg(long, default_value = "gold")]
    history_key: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run each variant with.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 8)]
    relations: usize,
    #[arg(long, default_value_t = 10)]
    groups: usize,
    #[arg(long, default_value_t = 60)]
    timestamps: usize,
    /// Changepoint as a fraction of the timestamp count.
    #[arg(long, default_value_t = 0.85)]
    changepoint: f64,
    #[arg(long = "facts", default_value_t = 300)]
    facts_per_snapshot: usize,
    #[arg(long = "noise", default_value_t = 0.1)]
    noise_rate: f64,
    #[arg(long = "cold", default_value_t = 0.0)]
    cold_entity_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    rule_shift: f64,
    #[arg(long = "skew", default_value_t = 1.0)]
    popularity_skew: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub mode: String,
    pub seed: u64,
    pub config: String,
    pub dataset: DatasetRecord,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub time_gap: u64,
    pub split: [f64; 3],
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_threads();
    let command: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, &command),
        Command::Eval(a) => cmd_eval(a, &command),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Caps the global rayon pool from `TEMPO_META_THREADS`, once per process.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // Fails only if a pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::invalid(format!("bad split {s:?}")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| Error::invalid(format!("split needs 3 parts: {s:?}")))
}

fn parse_bounds(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| Error::invalid(format!("bad history bound {p:?}")))
        })
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads, fingerprints, parses and splits a dataset.
fn load_dataset(path: &Path, time_gap: u64, split: [f64; 3]) -> Result<(TemporalKg, DatasetRecord)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let parsed = parse_quadruples(bytes.as_slice(), time_gap)?;
    let kg = split_by_time(build_temporal_kg(&parsed.quadruples)?, split)?;
    let record = DatasetRecord {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
        time_gap,
        split,
    };
    Ok((kg, record))
}

fn load_config(path: Option<&Path>) -> Result<MetaConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            MetaConfig::parse(&text)
        }
        None => Ok(MetaConfig::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn with_file<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

fn cmd_train(args: TrainArgs, command: &[String]) -> Result<i32> {
    // Validate every input before touching the output directory.
    let split = parse_split(&args.data.split)?;
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let mode: Mode = args.mode.parse()?;
    if mode == Mode::Finetune {
        return Err(Error::invalid(
            "finetune is an evaluation mode; train with --mode plain",
        ));
    }
    let (kg, dataset) = load_dataset(&args.data.data, args.data.time_gap, split)?;

    fs::create_dir_all(&args.out)?;
    let outputs = [PARAMS_FILE, GATES_FILE, CONFIG_FILE, LOSS_LOG_FILE];
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.to_vec(),
        mode: mode.as_str().into(),
        seed: config.seed,
        config: config.to_kv_string(),
        dataset,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    fs::write(args.out.join(CONFIG_FILE), config.to_kv_string())?;

    let model = train_model(&kg, &config, mode, &Trilinear)?;
    with_file(&args.out.join(PARAMS_FILE), |w| model.params.write_checkpoint(w))?;
    with_file(&args.out.join(GATES_FILE), |w| model.gates.write_to(w))?;
    with_file(&args.out.join(LOSS_LOG_FILE), |w| write_loss_log(&model.loss_log, w))?;

    let split = kg.split()?;
    println!(
        "trained {} model: |E|={} |R|={} snapshots={} (train 1..={}) epochs={} -> {}",
        mode.as_str(),
        kg.num_entities,
        kg.num_relations,
        kg.num_timestamps(),
        split.train_end,
        config.epochs,
        args.out.display()
    );
    if let Some(last) = model.loss_log.last() {
        println!(
            "last task t={}: support loss {:.4}, query loss {:.4}",
            last.t, last.support_loss, last.query_loss
        );
    }
    Ok(0)
}

fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let f = File::open(dir.join(MANIFEST_FILE)).map_err(|e| {
        Error::Checkpoint(format!("no manifest in {}: {e}", dir.display()))
    })?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn cmd_eval(args: EvalArgs, command: &[String]) -> Result<i32> {
    let train_manifest = read_manifest(&args.checkpoint)?;
    let params = File::open(args.checkpoint.join(PARAMS_FILE))
        .map_err(|e| Error::Checkpoint(format!("missing parameters: {e}")))
        .and_then(|f| ParamSet::read_checkpoint(BufReader::new(f)))?;
    let gates = File::open(args.checkpoint.join(GATES_FILE))
        .map_err(|e| Error::Checkpoint(format!("missing gates: {e}")))
        .and_then(|f| GateSet::read_from(BufReader::new(f)))?;
    let mut config = MetaConfig::parse(&train_manifest.config)?;
    if let Some(k) = args.test_steps {
        config.test_steps = k;
    }
    config.validate()?;
    let mode: Mode = args.mode.parse()?;

    let mut want_period = false;
    let mut want_history = false;
    for b in &args.buckets {
        match b.as_str() {
            "period" => want_period = true,
            "history" => want_history = true,
            other => return Err(Error::invalid(format!("unknown bucket kind {other:?}"))),
        }
    }
    let opts = ReportOptions {
        periods: want_period.then_some(args.periods),
        history_bounds: if want_history {
            Some(parse_bounds(&args.history_bounds)?)
        } else {
            None
        },
        history_mode: match args.history_mode.as_str() {
            "all" => HistoryMode::AllPreceding,
            "train" => HistoryMode::TrainOnly,
            other => return Err(Error::invalid(format!("unknown history mode {other:?}"))),
        },
        history_key: match args.history_key.as_str() {
            "gold" => HistoryKey::Gold,
            "subject" | "anchor" => HistoryKey::Anchor,
            other => return Err(Error::invalid(format!("unknown history key {other:?}"))),
        },
    };

    let data = args.data.unwrap_or(train_manifest.dataset.path.clone());
    let time_gap = args.time_gap.unwrap_or(train_manifest.dataset.time_gap);
    let split = match &args.split {
        Some(s) => parse_split(s)?,
        None => train_manifest.dataset.split,
    };
    let (kg, dataset) = load_dataset(&data, time_gap, split)?;
    if dataset.sha256 != train_manifest.dataset.sha256 {
        eprintln!("warning: dataset differs from the one the checkpoint was trained on");
    }
    if params.num_entities() != kg.num_entities || params.num_relations() != kg.num_relations {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary ({}, {}) does not match dataset ({}, {})",
            params.num_entities(),
            params.num_relations(),
            kg.num_entities,
            kg.num_relations
        )));
    }

    fs::create_dir_all(&args.out)?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.to_vec(),
        mode: mode.as_str().into(),
        seed: config.seed,
        config: config.to_kv_string(),
        dataset,
        outputs: vec![RANK_LOG_FILE.into(), REPORT_FILE.into()],
    };
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;

    let log = evaluate_model(&params, &gates, &kg, &config, mode, &Trilinear)?;
    let report = build_report(&log, &kg, &opts)?;
    with_file(&args.out.join(RANK_LOG_FILE), |w| log.write_csv(w))?;
    with_file(&args.out.join(REPORT_FILE), |w| report.write_json(mode, w))?;

    let p = report.overall.as_percentages();
    println!(
        "{} K={}: MRR {:.2}  Hits@1 {:.2}  Hits@3 {:.2}  Hits@10 {:.2}  ({} queries)",
        mode.as_str(),
        config.test_steps,
        p.mrr,
        p.hits1,
        p.hits3,
        p.hits10,
        p.count
    );
    if let Some(periods) = &report.periods {
        for b in periods {
            println!("  period t={}..={}: MRR {:.2}", b.first_t, b.last_t, b.report.as_percentages().mrr);
        }
    }
    if let Some(hist) = &report.history {
        for b in hist {
            let mrr = b
                .report
                .map(|r| format!("{:.2}", r.as_percentages().mrr))
                .unwrap_or_else(|| "-".into());
            println!("  history {}: MRR {mrr} ({} queries, {} entities)", b.label(), b.count, b.entities);
        }
    }
    Ok(0)
}

/// One row of the ablation table: medians over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn variant_name(a: Ablation) -> &'static str {
    match a {
        Ablation::Full => "MetaTKG",
        Ablation::NoGate => "MetaTKG-G",
        Ablation::SharedGate => "MetaTKG-C",
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<i32> {
    let split = parse_split(&args.data.split)?;
    let base = load_config(args.config.as_deref())?;
    let (kg, _) = load_dataset(&args.data.data, args.data.time_gap, split)?;
    if args.seeds.is_empty() {
        return Err(Error::invalid("need at least one seed"));
    }
    fs::create_dir_all(&args.out)?;

    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        let mut reports: Vec<EvalReport> = Vec::new();
        for &seed in &args.seeds {
            let config = MetaConfig {
                ablation,
                seed,
                ..base.clone()
            };
            let model = train_model(&kg, &config, Mode::Meta, &Trilinear)?;
            let log = evaluate_model(&model.params, &model.gates, &kg, &config, Mode::Meta, &Trilinear)?;
            let name = format!("loss_log_{}_seed{seed}.csv", ablation.as_str());
            with_file(&args.out.join(name), |w| write_loss_log(&model.loss_log, w))?;
            reports.push(compute_metrics(&log)?);
        }
        let med = |f: fn(&EvalReport) -> f64| {
            let mut v: Vec<f64> = reports.iter().map(f).collect();
            median(&mut v)
        };
        rows.push(AblationRow {
            variant: variant_name(ablation).into(),
            mrr: med(|r| r.mrr),
            hits1: med(|r| r.hits1),
            hits3: med(|r| r.hits3),
            hits10: med(|r| r.hits10),
        });
    }
    with_file(&args.out.join("ablation.csv"), |w| {
        use std::io::Write as _;
        writeln!(w, "variant,mrr,hits1,hits3,hits10")?;
        for r in &rows {
            writeln!(
                w,
                "{},{:.2},{:.2},{:.2},{:.2}",
                r.variant,
                100.0 * r.mrr,
                100.0 * r.hits1,
                100.0 * r.hits3,
                100.0 * r.hits10
            )?;
        }
        Ok(())
    })?;
    println!("{:<10} {:>7} {:>7} {:>7} {:>7}", "variant", "MRR", "H@1", "H@3", "H@10");
    for r in &rows {
        println!(
            "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            r.variant,
            100.0 * r.mrr,
            100.0 * r.hits1,
            100.0 * r.hits3,
            100.0 * r.hits10
        );
    }
    Ok(0)
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    if !(args.changepoint > 0.0 && args.changepoint < 1.0) {
        return Err(Error::invalid(format!(
            "changepoint fraction {} outside (0, 1)",
            args.changepoint
        )));
    }
    let spec = RegimeSpec {
        num_entities: args.entities,
        num_relations: args.relations,
        num_groups: args.groups,
        timestamps: args.timestamps,
        changepoint: changepoint_at(args.changepoint, args.timestamps),
        facts_per_snapshot: args.facts_per_snapshot,
        noise_rate: args.noise_rate,
        cold_entity_fraction: args.cold_entity_fraction,
        rule_shift: args.rule_shift,
        popularity_skew: args.popularity_skew,
        seed: args.seed,
    };
    let out = generate(&spec)?;
    fs::create_dir_all(&args.out)?;
    with_file(&args.out.join("data.txt"), |w| out.kg.write_quadruples(w))?;
    with_file(&args.out.join("truth.json"), |w| out.truth.write_json(w))?;
    println!(
        "wrote {} facts over {} timestamps (changepoint t={}, {} cold entities) to {}",
        out.kg.num_facts(),
        out.kg.num_timestamps(),
        spec.changepoint,
        out.truth.cold_entities.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let started = std::time::Instant::now();
    let report = run_suite(&Trilinear, args.seed, args.step)?;
    println!("backbone gradient max relative error: {:.3e}", report.backbone_max_rel_error);
    println!("gate gradient max relative error:     {:.3e}", report.gate_max_rel_error);
    println!("instances: {}, elapsed {:.2?}", report.shapes.len(), started.elapsed());
    let ok = report.backbone_max_rel_error < GRADCHECK_TOLERANCE
        && report.gate_max_rel_error < GRADCHECK_TOLERANCE;
    Ok(if ok { 0 } else { 1 })
}
