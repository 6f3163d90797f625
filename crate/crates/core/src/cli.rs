//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::beam::{hbeam_decode, BeamConfig, Ranked, ScoreRule};
use crate::data::{
    load_checkpoint, load_dataset, read_records, save_checkpoint, synth_generate, write_records, SynthProfile,
};
use crate::encoder::{preprocess, PreprocessedProblem};
use crate::generator::{greedy_decode, CacheStrategy};
use crate::model::ModelState;
use crate::program::{attribute_nested_error, operand_count_histogram, NestedSub, ProgramText};
use crate::registry::{DslRegistry, RegistryDoc, TypeId};
use crate::trainer::{evaluate, init_model, train_with, Attribution, LossCsv, ProblemResult, TrainConfig};

pub const SEED_ENV: &str = "GEOPROG_SEED";

#[derive(Debug, Parser)]
#[command(name = "geoprog", version, about = "Geometry solution-program generator")]
struct Cli {
    /// Pretty-print reports and log progress to stderr.
    #[arg(long, global = true)]
    human: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a loss CSV.
    Train(TrainArgs),
    /// Beam-decode a dataset and write a top-k report.
    Eval(EvalArgs),
    /// Print the top programs for one problem.
    Predict(PredictArgs),
    /// Write the per-step symbol distributions of a greedy decode as CSV.
    Explain(ExplainArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Operand-count histograms and error attribution for saved predictions.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Registry document; the bundled registry otherwise.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    patch_dim: Option<usize>,
    #[arg(long)]
    cache_strategy: Option<String>,
}

#[derive(Debug, Args)]
struct BeamArgs {
    #[arg(long, default_value_t = 10)]
    beam: usize,
    /// `sum_log_prob` or `sum_prob`.
    #[arg(long, default_value = "sum_log_prob")]
    score_rule: String,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    #[command(flatten)]
    beam: BeamArgs,
    /// Report path; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-problem candidates as JSON lines, readable by `analyze --pred`.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    beam: BeamArgs,
    /// Decode under this problem type instead of the classifier's.
    #[arg(long = "type")]
    problem_type: Option<String>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// CSV path; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "type")]
    problem_type: Option<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    /// Falls back to GEOPROG_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cal_fraction: Option<f64>,
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Prediction lines with `id` and `program` (as written by `eval --predictions`).
    #[arg(long)]
    pred: PathBuf,
    /// Gold dataset.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Problem file accepted by `predict` and `explain`. A dataset record also
/// parses; its `type` and `program` are ignored.
#[derive(Debug, Deserialize)]
struct ProblemInput {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    patches: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct Candidate {
    rank: usize,
    score: f64,
    program: Vec<NestedSub>,
}

#[derive(Debug, Serialize)]
struct PredictOutput {
    id: String,
    #[serde(rename = "type")]
    problem_type: String,
    candidates: Vec<Candidate>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    /// Top-1 program.
    program: ProgramText,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_rank: Option<usize>,
    #[serde(default)]
    type_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    candidates: Vec<CandidateLine>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateLine {
    score: f64,
    program: Vec<NestedSub>,
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    n: usize,
    wrong_top1: usize,
    attribution: Attribution,
    gold_operand_histogram: BTreeMap<String, BTreeMap<usize, usize>>,
    pred_operand_histogram: BTreeMap<String, BTreeMap<usize, usize>>,
}

pub fn main_exit_code() -> i32 {
    run(std::env::args_os())
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code; errors go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let human = cli.human;
    match cli.command {
        Command::Train(a) => cmd_train(a, human),
        Command::Eval(a) => cmd_eval(a, human),
        Command::Predict(a) => cmd_predict(a, human),
        Command::Explain(a) => cmd_explain(a),
        Command::Synth(a) => cmd_synth(a, human),
        Command::Analyze(a) => cmd_analyze(a, human),
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_registry(path: Option<&Path>) -> Result<DslRegistry, CliError> {
    match path {
        None => Ok(DslRegistry::default_registry()),
        Some(p) => {
            let doc = RegistryDoc::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            DslRegistry::build(doc).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        }
    }
}

fn beam_config(a: &BeamArgs) -> Result<BeamConfig, CliError> {
    if a.beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    let score_rule = match a.score_rule.as_str() {
        "sum_log_prob" => ScoreRule::SumLogProb,
        "sum_prob" => ScoreRule::SumProb,
        other => {
            return Err(CliError::Usage(format!(
                "--score-rule `{other}`: expected sum_log_prob or sum_prob"
            )))
        }
    };
    Ok(BeamConfig {
        bs: a.beam,
        score_rule,
        ..BeamConfig::default()
    })
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display()))),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(runtime_err)
        }
    }
}

fn to_json<T: Serialize>(value: &T, human: bool) -> String {
    let mut s = if human {
        serde_json::to_string_pretty(value)
    } else {
        serde_json::to_string(value)
    }
    .expect("report serialises");
    s.push('\n');
    s
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let (mut cfg, config_has_seed) = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
            let has_seed = value.get("seed").is_some();
            let cfg: TrainConfig =
                serde_json::from_value(value).map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
            (cfg, has_seed)
        }
        None => (TrainConfig::default(), false),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.layers {
        cfg.layers = v;
    }
    if let Some(v) = a.patch_dim {
        cfg.patch_dim = v;
    }
    if let Some(s) = &a.cache_strategy {
        cfg.cache_strategy = s
            .parse::<CacheStrategy>()
            .map_err(|e| CliError::Usage(format!("--cache-strategy: {e}")))?;
    }
    match a.seed {
        Some(s) => cfg.seed = s,
        None if !config_has_seed => {
            if let Some(s) = env_seed()? {
                cfg.seed = s;
            }
        }
        None => {}
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn default_loss_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs, human: bool) -> Result<(), CliError> {
    let cfg = resolve_config(&a)?;
    let registry = load_registry(a.registry.as_deref())?;
    let data = load_dataset(&a.data, &registry).map_err(|e| CliError::Data(format!("{}: {e}", a.data.display())))?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{}: no records", a.data.display())));
    }
    if let Some(p) = data
        .iter()
        .find(|p| p.patches.iter().any(|v| v.len() != cfg.patch_dim))
    {
        return Err(CliError::Data(format!(
            "record `{}`: patch dimension differs from patch_dim {}",
            p.id, cfg.patch_dim
        )));
    }
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| default_loss_path(&a.out));
    let mut csv = LossCsv::open(&loss_path).map_err(|e| CliError::Runtime(format!("{}: {e}", loss_path.display())))?;

    let model = init_model(&cfg, registry, &data).map_err(runtime_err)?;
    let mut csv_error = None;
    let outcome = train_with(&cfg, model, &data, |log, _| {
        if human {
            eprintln!(
                "epoch {:>4}  tf {:.2}  total {:.5}  type {:.5}  op {:.5}  oe {:.5}",
                log.epoch, log.tf_prob, log.loss.total, log.loss.type_loss, log.loss.op_loss, log.loss.oe_loss
            );
        }
        match csv.append(log) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                csv_error = Some(e);
                ControlFlow::Break(())
            }
        }
    })
    .map_err(runtime_err)?;
    if let Some(e) = csv_error {
        return Err(CliError::Runtime(format!("{}: {e}", loss_path.display())));
    }
    save_checkpoint(&outcome.model, &a.out).map_err(runtime_err)?;
    if human {
        eprintln!("wrote {} and {}", a.out.display(), loss_path.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelState, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn nested(model: &ModelState, problem: &PreprocessedProblem, r: &Ranked) -> Vec<NestedSub> {
    r.program.to_nested(&model.registry, problem)
}

fn prediction_line(model: &ModelState, problem: &PreprocessedProblem, res: &ProblemResult) -> PredictionLine {
    PredictionLine {
        id: res.id.clone(),
        program: ProgramText::Nested(res.candidates.first().map(|r| nested(model, problem, r)).unwrap_or_default()),
        gold_rank: res.gold_rank,
        type_correct: Some(res.type_correct),
        candidates: res
            .candidates
            .iter()
            .map(|r| CandidateLine {
                score: r.score,
                program: nested(model, problem, r),
            })
            .collect(),
    }
}

fn cmd_eval(a: EvalArgs, human: bool) -> Result<(), CliError> {
    if a.topk == 0 {
        return Err(CliError::Usage("--topk must be at least 1".into()));
    }
    if a.topk > a.beam.beam {
        return Err(CliError::Usage(format!(
            "--topk ({}) must not exceed --beam ({})",
            a.topk, a.beam.beam
        )));
    }
    let beam = beam_config(&a.beam)?;
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data, &model.registry).map_err(|e| CliError::Data(format!("{}: {e}", a.data.display())))?;
    let (report, results) = evaluate(&model, &data, a.topk, &beam).map_err(runtime_err)?;
    if let Some(path) = &a.predictions {
        let mut text = String::new();
        for (p, r) in data.iter().zip(&results) {
            text.push_str(&serde_json::to_string(&prediction_line(&model, p, r)).expect("line serialises"));
            text.push('\n');
        }
        write_output(Some(path), &text)?;
    }
    write_output(a.out.as_deref(), &to_json(&report, human))
}

fn read_problem(path: &Path) -> Result<PreprocessedProblem, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let input: ProblemInput =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if input.text.trim().is_empty() {
        return Err(CliError::Data(format!("{}: empty text", path.display())));
    }
    let mut p = preprocess(&input.text, &input.patches);
    p.id = input.id.unwrap_or_else(|| path.display().to_string());
    Ok(p)
}

fn type_flag(registry: &DslRegistry, name: Option<&str>) -> Result<Option<TypeId>, CliError> {
    name.map(|n| registry.type_by_name(n).map_err(|e| CliError::Usage(format!("--type: {e}"))))
        .transpose()
}

fn cmd_predict(a: PredictArgs, human: bool) -> Result<(), CliError> {
    let beam = beam_config(&a.beam)?;
    let model = load_model(&a.model)?;
    let override_type = type_flag(&model.registry, a.problem_type.as_deref())?;
    let problem = read_problem(&a.input)?;
    let ranked = hbeam_decode(&model, &problem, override_type, &beam).map_err(runtime_err)?;
    let problem_type = ranked
        .first()
        .map(|r| model.registry.type_name(r.program.problem_type).to_string())
        .unwrap_or_default();
    let out = PredictOutput {
        id: problem.id.clone(),
        problem_type,
        candidates: ranked
            .iter()
            .enumerate()
            .map(|(rank, r)| Candidate {
                rank,
                score: r.score,
                program: nested(&model, &problem, r),
            })
            .collect(),
    };
    write_output(None, &to_json(&out, human))
}

fn cmd_explain(a: ExplainArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let override_type = type_flag(&model.registry, a.problem_type.as_deref())?;
    let problem = read_problem(&a.input)?;
    let decode = greedy_decode(&model, &problem, override_type).map_err(runtime_err)?;
    let surfaces = model.registry.surfaces(&problem);
    let mut csv = String::from("emitted");
    for s in &surfaces {
        csv.push(',');
        csv.push_str(s);
    }
    csv.push('\n');
    for step in &decode.trace {
        csv.push_str(&surfaces[step.symbol.0]);
        for p in &step.probs {
            csv.push(',');
            csv.push_str(&p.to_string());
        }
        csv.push('\n');
    }
    write_output(a.out.as_deref(), &csv)
}

fn cmd_synth(a: SynthArgs, human: bool) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let mut profile = SynthProfile::default();
    if let Some(f) = a.cal_fraction {
        profile.cal_fraction = f;
    }
    profile
        .validate()
        .map_err(|e| CliError::Usage(format!("--cal-fraction: {e}")))?;
    let registry = load_registry(a.registry.as_deref())?;
    let records = synth_generate(a.n, seed, &registry, &profile).map_err(runtime_err)?;
    write_records(&a.out, &records).map_err(runtime_err)?;
    if human {
        eprintln!("wrote {} records to {} (seed {seed})", records.len(), a.out.display());
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs, human: bool) -> Result<(), CliError> {
    let registry = load_registry(a.registry.as_deref())?;
    let gold = read_records(&a.gold).map_err(|e| CliError::Data(format!("{}: {e}", a.gold.display())))?;
    let pred_text = fs::read_to_string(&a.pred).map_err(|e| CliError::Data(format!("{}: {e}", a.pred.display())))?;
    let mut preds: BTreeMap<String, ProgramText> = BTreeMap::new();
    for (i, line) in pred_text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PredictionLine = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}: line {}: {e}", a.pred.display(), i + 1)))?;
        preds.insert(p.id, p.program);
    }

    let is_op = |s: &str| registry.lookup(s).is_some_and(|id| registry.operators().any(|o| o == id));
    let mut attribution = Attribution::default();
    let mut wrong = 0;
    let mut gold_hist: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut pred_hist: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in &gold {
        let pred = preds
            .get(&r.id)
            .ok_or_else(|| CliError::Data(format!("record `{}` has no prediction in {}", r.id, a.pred.display())))?;
        let g = r.program.to_nested(is_op);
        let p = pred.to_nested(is_op);
        if p != g {
            wrong += 1;
        }
        if let Some(kind) = attribute_nested_error(&p, &g) {
            attribution.record(kind);
        }
        for (hist, prog) in [(&mut gold_hist, &g), (&mut pred_hist, &p)] {
            let entry = hist.entry(r.problem_type.clone()).or_default();
            for (k, v) in operand_count_histogram(prog.iter().map(|s| s.args.len())) {
                *entry.entry(k).or_insert(0) += v;
            }
        }
    }
    let report = AnalyzeReport {
        n: gold.len(),
        wrong_top1: wrong,
        attribution,
        gold_operand_histogram: gold_hist,
        pred_operand_histogram: pred_hist,
    };
    write_output(a.out.as_deref(), &to_json(&report, human))
}
