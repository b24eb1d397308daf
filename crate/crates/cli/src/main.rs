//! `fgnn`: dataset generation, MAP solving, training and evaluation, with a
//! manifest beside every output so any run can be replayed and checked.

mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fgnn_core::decomp::prepare_for_decomposition;
use fgnn_core::exactparam::emulate_max_product;
use fgnn_core::learn::{agreement, desk_architecture, evaluate, train, AgreementStats, TrainConfig};
use fgnn_core::maxprod::{decode, run_max_product, BeliefState, Mode};
use fgnn_core::pgm::{brute_force_map, score, window_dp_map, Assignment};
use fgnn_core::synth::{gen_dataset, read_jsonl, write_jsonl, DatasetHeader, DatasetInstance, DatasetSpec};
use fgnn_core::fgnn::FgnnStack;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use manifest::{sha256_file, FileDigest, RunManifest, MANIFEST_FORMAT};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Solver(String),
    Mismatch(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Mismatch(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Solver(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Solver(m) | CliError::Mismatch(m) => f.write_str(m),
        }
    }
}

impl From<fgnn_core::Error> for CliError {
    fn from(e: fgnn_core::Error) -> Self {
        use fgnn_core::Error as E;
        match e {
            E::Argument(_) => CliError::Usage(e.to_string()),
            E::Io(_) | E::Json(_) | E::Format(_) => CliError::Io(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "fgnn", version, about = "MAP inference benchmarks, max-product, and FGNN training")]
struct Cli {
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic chain dataset with exact MAP labels.
    Gen(GenArgs),
    /// Solve every instance of a dataset and score it against the labels.
    Solve(SolveArgs),
    /// Train an FGNN on a dataset.
    Train(TrainArgs),
    /// Evaluate trained parameters on a dataset.
    Eval(EvalArgs),
    /// Re-run a command from its manifest and compare output digests.
    Replay(ReplayArgs),
}

#[derive(clap::Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    dataset: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 30)]
    length: usize,
    #[arg(long, default_value_t = 8)]
    window: usize,
    /// Budget `k` for datasets 1 and 2; dataset 3 draws its own.
    #[arg(long, default_value_t = 5)]
    budget: usize,
    /// Output directory; receives train.jsonl, val.jsonl, test.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    Brute,
    Dp,
    Maxprod,
    FgnnExact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum BpMode {
    Direct,
    Decomposed,
    Cavity,
}

#[derive(clap::Args, Debug, Serialize)]
struct SolveArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Max-product iterations (maxprod and fgnn-exact).
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, value_enum, default_value_t = BpMode::Direct)]
    mode: BpMode,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.98)]
    decay: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Architecture preset; only `desk` exists.
    #[arg(long, default_value = "desk")]
    arch: String,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Files a finished command read and wrote. Output roles are names that
/// stay fixed when `--out` moves.
struct RunRecord {
    command: &'static str,
    flags: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<(String, PathBuf)>,
    manifest_path: PathBuf,
    /// Set when the outputs were written but the run still failed.
    failure: Option<CliError>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn read_dataset(path: &Path) -> CliResult<(DatasetHeader, Vec<DatasetInstance>)> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_jsonl(BufReader::new(f)).map_err(|e| io_err(path, e))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("flags serialize")
}

fn cmd_gen(a: &GenArgs) -> CliResult<RunRecord> {
    let spec = DatasetSpec {
        dataset_id: a.dataset,
        seed: a.seed,
        n_train: a.train,
        n_val: a.val,
        n_test: a.test,
        chain_length: a.length,
        window: a.window,
        k_budget: a.budget,
    };
    let data = gen_dataset(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut outputs = Vec::new();
    for (split, items) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let name = format!("{split}.jsonl");
        let path = a.out.join(&name);
        let mut w = create(&path)?;
        write_jsonl(&mut w, &DatasetHeader::new(split, items.len(), &spec), items).map_err(|e| io_err(&path, e))?;
        w.flush().map_err(|e| io_err(&path, e))?;
        outputs.push((name, path));
    }
    println!(
        "dataset {}: {} train, {} val, {} test instances in {}",
        a.dataset,
        a.train,
        a.val,
        a.test,
        a.out.display()
    );
    Ok(RunRecord {
        command: "gen",
        flags: to_value(a),
        seeds: vec![a.seed],
        inputs: Vec::new(),
        outputs,
        manifest_path: a.out.join("manifest.json"),
        failure: None,
    })
}

#[derive(Serialize)]
struct Prediction {
    index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    assignment: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    agreement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn solve_one(a: &SolveArgs, inst: &DatasetInstance) -> fgnn_core::Result<Assignment> {
    let g = &inst.graph;
    Ok(match a.method {
        Method::Brute => brute_force_map(g)?.0,
        Method::Dp => window_dp_map(g, inst.meta.window)?.0,
        Method::Maxprod => {
            let mode = match a.mode {
                BpMode::Direct => Mode::Direct,
                BpMode::Decomposed => Mode::Decomposed,
                BpMode::Cavity => Mode::Cavity,
            };
            run_max_product(g, a.iters, mode)?.1
        }
        Method::FgnnExact => {
            let prepared = prepare_for_decomposition(g);
            let beliefs = emulate_max_product(&prepared.graph, a.iters)?;
            decode(&BeliefState {
                node_beliefs: beliefs,
                factor_messages: Vec::new(),
            })
        }
    })
}

fn cmd_solve(a: &SolveArgs) -> CliResult<RunRecord> {
    let (_, instances) = read_dataset(&a.input)?;
    let preds: Vec<Prediction> = instances
        .par_iter()
        .enumerate()
        .map(|(index, inst)| match solve_one(a, inst) {
            Ok(x) => Prediction {
                index,
                agreement: agreement(&x, &inst.label).ok(),
                score: score(&inst.graph, &x).ok(),
                assignment: Some(x.0),
                error: None,
            },
            Err(e) => Prediction {
                index,
                assignment: None,
                agreement: None,
                score: None,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let mut w = create(&a.out)?;
    for p in &preds {
        serde_json::to_writer(&mut w, p).map_err(|e| io_err(&a.out, e))?;
        w.write_all(b"\n").map_err(|e| io_err(&a.out, e))?;
    }
    w.flush().map_err(|e| io_err(&a.out, e))?;

    let values: Vec<f64> = preds.iter().filter_map(|p| p.agreement).collect();
    let failed = preds.len() - values.len();
    let stats = AgreementStats::from_values(&values);
    let summary_path = with_suffix(&a.out, ".summary.json");
    let summary = json!({
        "method": a.method,
        "iters": a.iters,
        "mode": a.mode,
        "count": preds.len(),
        "failed": failed,
        "agreement_mean": stats.mean,
        "agreement_std": stats.std,
    });
    write_text(&summary_path, &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
    println!(
        "{}: agreement {:.4} ± {:.4} over {} instances ({} failed)",
        serde_json::to_value(a.method).expect("json").as_str().unwrap_or_default(),
        stats.mean,
        stats.std,
        values.len(),
        failed
    );
    let record = RunRecord {
        command: "solve",
        flags: to_value(a),
        seeds: Vec::new(),
        inputs: vec![a.input.clone()],
        outputs: vec![("predictions".into(), a.out.clone()), ("summary".into(), summary_path)],
        manifest_path: with_suffix(&a.out, ".manifest.json"),
        failure: (failed > 0).then(|| CliError::Solver(format!("{failed} instances violated the solver's preconditions"))),
    };
    Ok(record)
}

fn cmd_train(a: &TrainArgs) -> CliResult<RunRecord> {
    if a.arch != "desk" {
        return Err(CliError::Usage(format!("unknown architecture preset {:?}", a.arch)));
    }
    let (_, train_set) = read_dataset(&a.data)?;
    let val_set = match &a.val {
        Some(p) => read_dataset(p)?.1,
        None => Vec::new(),
    };
    let Some(first) = train_set.first() else {
        return Err(CliError::Usage("training set is empty".into()));
    };
    let f = &first.features;
    let init = desk_architecture(f.node_dim(), f.factor_dim(), f.edge_dim(), a.width, 2, a.seed);
    let cfg = TrainConfig {
        learning_rate: a.lr,
        decay: a.decay,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let result = train(&train_set, &val_set, &cfg, &init, |e| {
        eprintln!(
            "epoch {:3}  lr {:.3e}  loss {:.4}  train {:.4}{}",
            e.epoch,
            e.lr,
            e.loss,
            e.train_agreement,
            e.val_agreement.map(|v| format!("  val {v:.4}")).unwrap_or_default()
        )
    })?;
    write_text(&a.out, &(result.stack.to_json()? + "\n"))?;
    let log_path = with_suffix(&a.out, ".log.jsonl");
    let mut log = String::new();
    for e in &result.log {
        log.push_str(&serde_json::to_string(e).expect("json"));
        log.push('\n');
    }
    write_text(&log_path, &log)?;
    println!("trained {} epochs; parameters in {}", a.epochs, a.out.display());
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.val.clone());
    Ok(RunRecord {
        command: "train",
        flags: to_value(a),
        seeds: vec![a.seed],
        inputs,
        outputs: vec![("params".into(), a.out.clone()), ("log".into(), log_path)],
        manifest_path: with_suffix(&a.out, ".manifest.json"),
        failure: None,
    })
}

fn cmd_eval(a: &EvalArgs) -> CliResult<RunRecord> {
    let text = fs::read_to_string(&a.params).map_err(|e| io_err(&a.params, e))?;
    let stack = FgnnStack::from_json(&text).map_err(|e| io_err(&a.params, e))?;
    let (_, data) = read_dataset(&a.data)?;
    let stats = evaluate(&stack, &data)?;
    write_text(&a.out, &(serde_json::to_string_pretty(&stats).expect("json") + "\n"))?;
    println!("agreement {:.4} ± {:.4} over {} instances", stats.mean, stats.std, stats.count);
    Ok(RunRecord {
        command: "eval",
        flags: to_value(a),
        seeds: Vec::new(),
        inputs: vec![a.params.clone(), a.data.clone()],
        outputs: vec![("metrics".into(), a.out.clone())],
        manifest_path: with_suffix(&a.out, ".manifest.json"),
        failure: None,
    })
}

fn raw_argv() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn flag_map(v: &serde_json::Value) -> BTreeMap<String, serde_json::Value> {
    v.as_object()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default()
}

fn digest(path: &Path) -> CliResult<String> {
    sha256_file(path).map_err(|e| io_err(path, e))
}

fn manifest_of(r: &RunRecord, argv: &[String]) -> CliResult<RunManifest> {
    let inputs = r
        .inputs
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: digest(p)?,
            })
        })
        .collect::<CliResult<_>>()?;
    let outputs = r
        .outputs
        .iter()
        .map(|(role, p)| {
            Ok(FileDigest {
                path: role.clone(),
                sha256: digest(p)?,
            })
        })
        .collect::<CliResult<_>>()?;
    Ok(RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        command: r.command.to_string(),
        argv: argv.to_vec(),
        flags: flag_map(&r.flags),
        seeds: r.seeds.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs,
        outputs,
    })
}

fn write_manifest(r: &RunRecord, argv: &[String]) -> CliResult<RunManifest> {
    let m = manifest_of(r, argv)?;
    write_text(&r.manifest_path, &(serde_json::to_string_pretty(&m).expect("json") + "\n"))?;
    Ok(m)
}

/// Copy of `argv` with the `--out` value replaced.
fn redirect_out(argv: &[String], out: &Path) -> CliResult<Vec<String>> {
    let mut v = argv.to_vec();
    let new = out.display().to_string();
    for k in 0..v.len() {
        if v[k] == "--out" && k + 1 < v.len() {
            v[k + 1] = new;
            return Ok(v);
        }
        if v[k].starts_with("--out=") {
            v[k] = format!("--out={new}");
            return Ok(v);
        }
    }
    Err(CliError::Usage("manifest argv has no --out".into()))
}

fn cmd_replay(a: &ReplayArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.manifest).map_err(|e| io_err(&a.manifest, e))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| io_err(&a.manifest, e))?;
    if m.format != MANIFEST_FORMAT {
        return Err(CliError::Io(format!("expected format {MANIFEST_FORMAT}, found {}", m.format)));
    }
    for input in &m.inputs {
        let now = digest(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(CliError::Mismatch(format!("input {} changed since the run", input.path)));
        }
    }
    let scratch = std::env::temp_dir().join(format!("fgnn-replay-{}", std::process::id()));
    fs::create_dir_all(&scratch).map_err(|e| io_err(&scratch, e))?;
    let result = (|| {
        let argv = redirect_out(&m.argv, &scratch.join("out"))?;
        let cli = parse(&argv)?;
        let Some(record) = dispatch(&cli, &argv)? else {
            return Err(CliError::Usage("a replay manifest cannot name replay".into()));
        };
        let fresh = manifest_of(&record, &argv)?;
        let mut mismatched = Vec::new();
        for (old, new) in m.outputs.iter().zip(&fresh.outputs) {
            if old != new {
                mismatched.push(old.path.clone());
            }
        }
        if m.outputs.len() != fresh.outputs.len() {
            mismatched.push("output list".into());
        }
        if !mismatched.is_empty() {
            return Err(CliError::Mismatch(format!("outputs differ: {}", mismatched.join(", "))));
        }
        println!("replay of {} reproduced {} outputs", m.command, m.outputs.len());
        Ok(())
    })();
    let _ = fs::remove_dir_all(&scratch);
    result
}

fn parse(argv: &[String]) -> CliResult<Cli> {
    Cli::try_parse_from(std::iter::once("fgnn".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| CliError::Usage(e.to_string()))
}

/// Runs one command; returns its record, or `None` for replay.
fn dispatch(cli: &Cli, argv: &[String]) -> CliResult<Option<RunRecord>> {
    let record = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a)?,
        Cmd::Solve(a) => cmd_solve(a)?,
        Cmd::Train(a) => cmd_train(a)?,
        Cmd::Eval(a) => cmd_eval(a)?,
        Cmd::Replay(a) => {
            cmd_replay(a)?;
            return Ok(None);
        }
    };
    write_manifest(&record, argv)?;
    Ok(Some(record))
}

/// Like [`dispatch`], but a run that wrote its outputs and then failed is an
/// error.
fn run(cli: &Cli, argv: &[String]) -> CliResult<()> {
    match dispatch(cli, argv)? {
        Some(RunRecord { failure: Some(e), .. }) => Err(e),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build();
    let argv = raw_argv();
    let outcome = match pool {
        Ok(pool) => pool.install(|| run(&cli, &argv)),
        Err(e) => Err(CliError::Usage(e.to_string())),
    };
    match outcome {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
