//! The `evsel` command line front end.
//!
//! Every subcommand writes its artifacts into `--out` (created if missing).
//! Data errors exit with code 2, numerical failures with code 3.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::dataio::{
    read_model, read_scores_csv, synthesize_bank, write_model, write_scores_csv, Dataset, SynthSpec,
};
use crate::error::{Error, Result};
use crate::evidence::{
    asymptotic_slope, optimize_lambda, optimize_lambda_observed, EvidenceResult, Method, OptimOptions,
};
use crate::lssvm::{fit_with_lambdas, predict_scores, train_with_basis, ClassifierModel, TrainOptions};
use crate::metrics::evaluate;
use crate::selection::{
    build_ensemble, concat_banks, cv_grid_search, rank_banks, CandidateSet,
    CvOptions, EnsembleReport, SelectionOptions, Strategy,
};
use crate::spectral::{build_basis, FeatureBank};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Header of the convergence benchmark CSV.
pub const BENCH_HEADER: &str = "method,seed,iteration,lambda,log_evidence,elapsed_ms";

#[derive(Debug, Parser)]
#[command(name = "evsel", version, about = "Evidence-driven LS-SVM training and feature bank selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-bank, per-class evidence optimization and the bank ranking.
    Evidence(DataArgs),
    /// Train one model on the concatenation of `--banks`.
    Train(DataArgs),
    /// Score the test split with a trained model.
    Predict(PredictArgs),
    /// Evaluate a score file with the manifest's measure.
    Eval(EvalArgs),
    /// Pick the single bank with the highest evidence.
    Select(DataArgs),
    /// Build an ensemble by feature concatenation.
    Ensemble(EnsembleArgs),
    /// Cross-validated grid search over lambda, timed against the evidence method.
    Cv(CvArgs),
    /// Convergence traces of all optimizers on seeded synthetic problems.
    BenchConvergence(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1.0)]
    pub lambda_init: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// aitken, lambda_plain, fixed_point_ab or em.
    #[arg(long)]
    pub method: Option<Method>,
    /// Keep classes whose optimization hit --max-iters instead of failing.
    #[arg(long)]
    pub accept_unconverged: bool,
}

impl OptimArgs {
    fn options(&self, method: Method) -> Result<OptimOptions> {
        let opts = OptimOptions {
            lambda_init: self.lambda_init,
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            method,
        };
        opts.validate()?;
        Ok(opts)
    }

    fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            optim: self.options(self.method.unwrap_or(Method::Aitken))?,
            accept_unconverged: self.accept_unconverged,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated bank names; defaults to every bank in the manifest.
    #[arg(long, value_delimiter = ',')]
    pub banks: Vec<String>,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model file written by `train`, `select` or `ensemble`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Score CSV written by `predict`, one row per test sample.
    #[arg(long)]
    pub scores: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// greedy, exhaustive or single_best.
    #[arg(long, default_value = "greedy")]
    pub strategy: Strategy,
}

#[derive(Debug, Clone, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `lo:hi` base-2 exponent range (step 1) or a comma-separated list of values.
    #[arg(long, default_value = "-10:10")]
    pub grid: String,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Number of seeded problems, using seeds `--seed`, `--seed + 1`, ...
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub d: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

/// Parses `lo:hi` as `{2^lo, ..., 2^hi}` or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidInput(format!("invalid grid '{spec}'"));
    let grid = if let Some((lo, hi)) = spec.split_once(':') {
        let lo: i32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: i32 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).map(|e| 2f64.powi(e)).collect()
    } else {
        spec.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() || grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(bad());
    }
    Ok(grid)
}

/// Rounds to 12 significant digits so reports do not carry last-bit noise.
pub fn num(v: f64) -> Value {
    if !v.is_finite() {
        return Value::Null;
    }
    let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float parses");
    json!(rounded)
}

fn nums(values: &[f64]) -> Value {
    Value::Array(values.iter().map(|&v| num(v)).collect())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(common: &CommonArgs) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(&common.out)
}

/// Training-split candidate set restricted to the requested banks.
fn candidate_set(ds: &Dataset, names: &[String]) -> Result<CandidateSet> {
    let train = ds.train_indices();
    let chosen: Vec<&FeatureBank> = if names.is_empty() {
        ds.banks.iter().collect()
    } else {
        names.iter().map(|n| ds.bank(n)).collect::<Result<_>>()?
    };
    let banks = chosen
        .into_iter()
        .map(|b| b.select_samples(&train))
        .collect::<Result<Vec<_>>>()?;
    CandidateSet::new(banks, ds.labels.select_samples(&train)?)
}

fn concat_all(set: &CandidateSet) -> Result<FeatureBank> {
    concat_banks(set, &set.names())
}

fn class_json(r: &EvidenceResult, slope: Option<f64>) -> Value {
    json!({
        "class": r.class_index,
        "lambda": num(r.state.lambda),
        "alpha": num(r.state.alpha),
        "beta": num(r.state.beta),
        "gamma": num(r.state.gamma),
        "log_evidence": num(r.state.log_evidence),
        "iterations": r.iterations,
        "converged": r.converged,
        "fallbacks": r.fallback_count,
        "asymptotic_slope": slope.map_or(Value::Null, num),
    })
}

fn model_json(model: &ClassifierModel, bank: Option<&FeatureBank>, labels: &crate::spectral::LabelMatrix) -> Value {
    let classes: Vec<Value> = model
        .per_class
        .iter()
        .map(|r| {
            let slope = bank
                .and_then(|b| asymptotic_slope(b, &labels.column(r.class_index)).ok())
                .map(|s| s.slope);
            class_json(r, slope)
        })
        .collect();
    json!({
        "banks": model.bank_signature,
        "d": model.d(),
        "overall_evidence": num(model.overall_evidence),
        "lambdas": nums(&model.lambdas),
        "classes": classes,
    })
}

fn trace_rows(out: &mut String, bank: &str, model: &ClassifierModel) {
    for r in &model.per_class {
        for t in &r.trace {
            out.push_str(&format!(
                "{bank},{},{},{},{}\n",
                r.class_index, t.iteration, t.lambda, t.log_evidence
            ));
        }
    }
}

fn cmd_evidence(args: &DataArgs) -> Result<()> {
    let out = prepare_out(&args.common)?;
    let ds = Dataset::load(&args.manifest)?;
    let set = candidate_set(&ds, &args.banks)?;
    let opts = SelectionOptions {
        train: args.optim.train_options()?,
        ..Default::default()
    };
    let ranking = rank_banks(&set, &opts)?;

    let mut trace = String::from("bank,class,iteration,lambda,log_evidence\n");
    let mut banks = Vec::new();
    for r in &ranking.ranked {
        let bank = set.bank(&r.name)?;
        banks.push(model_json(&r.model, Some(bank), set.labels()));
        trace_rows(&mut trace, &r.name, &r.model);
    }
    let report = json!({
        "task": ds.manifest.task,
        "method": opts.train.optim.method.as_str(),
        "train_samples": set.labels().n(),
        "ranking": ranking.ranked.iter().map(|r| r.name.clone()).collect::<Vec<_>>(),
        "banks": banks,
        "failed": serde_json::to_value(&ranking.failed).expect("failures serialize"),
    });
    write_json(&out.join("evidence.json"), &report)?;
    write_text(&out.join("evidence_trace.csv"), &trace)?;
    for (i, r) in ranking.ranked.iter().enumerate() {
        println!("{:>3}  {:<24} {:.6e}", i + 1, r.name, r.overall_evidence);
    }
    ranking_failure(&ranking.failed)
}

/// Surfaces the first bank failure after the report has been written.
fn ranking_failure(failed: &[crate::selection::BankFailure]) -> Result<()> {
    match failed.first() {
        None => Ok(()),
        Some(f) => Err(Error::BankFailed {
            bank: f.name.clone(),
            message: f.error.clone(),
            numerical: f.numerical,
        }),
    }
}

fn cmd_train(args: &DataArgs) -> Result<()> {
    let out = prepare_out(&args.common)?;
    let ds = Dataset::load(&args.manifest)?;
    let set = candidate_set(&ds, &args.banks)?;
    let bank = concat_all(&set)?;
    let opts = args.optim.train_options()?;
    set.labels().check_trainable()?;
    let basis = build_basis(&bank, set.labels())?;
    let model = train_with_basis(&basis, bank.name(), &opts)?;
    write_model(&out.join("model.bmdl"), &model)?;
    write_json(&out.join("train.json"), &model_json(&model, Some(&bank), set.labels()))?;
    let mut trace = String::from("bank,class,iteration,lambda,log_evidence\n");
    trace_rows(&mut trace, bank.name(), &model);
    write_text(&out.join("train_trace.csv"), &trace)?;
    println!("{}  overall evidence {:.6e}", bank.name(), model.overall_evidence);
    Ok(())
}

/// The test-split bank matching a model's signature.
fn bank_for_model(ds: &Dataset, model: &ClassifierModel) -> Result<FeatureBank> {
    let names: Vec<String> = model.bank_signature.split('+').map(str::to_string).collect();
    let test = ds.test_indices();
    let banks = names
        .iter()
        .map(|n| ds.bank(n).and_then(|b| b.select_samples(&test)))
        .collect::<Result<Vec<_>>>()?;
    let set = CandidateSet::new(banks, ds.labels.select_samples(&test)?)?;
    concat_all(&set)
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let out = prepare_out(&args.common)?;
    let ds = Dataset::load(&args.manifest)?;
    let model = read_model(&args.model)?;
    let bank = bank_for_model(&ds, &model)?;
    let scores = predict_scores(&model, &bank)?;
    write_scores_csv(&out.join("scores.csv"), &scores)?;
    println!("scored {} samples x {} classes", scores.n(), scores.k());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let out = prepare_out(&args.common)?;
    let ds = Dataset::load(&args.manifest)?;
    let scores = read_scores_csv(&args.scores)?;
    let labels = ds.labels.select_samples(&ds.test_indices())?;
    let result = evaluate(&scores, &labels, ds.manifest.measure)?;
    write_json(
        &out.join("eval.json"),
        &json!({
            "measure": result.measure.to_string(),
            "mean": num(result.mean),
            "per_class": nums(&result.per_class),
        }),
    )?;
    println!("{} {:.6}", result.measure, result.mean);
    Ok(())
}

fn ensemble_json(report: &EnsembleReport, set: &CandidateSet) -> Value {
    let decisions: Vec<Value> = report
        .decisions
        .iter()
        .map(|d| {
            json!({
                "bank": d.bank,
                "action": serde_json::to_value(d.action).expect("action serializes"),
                "evidence_before": d.evidence_before.map_or(Value::Null, num),
                "evidence_after": d.evidence_after.map_or(Value::Null, num),
                "failure": d.failure,
            })
        })
        .collect();
    let subsets: Vec<Value> = report
        .subsets
        .iter()
        .map(|s| json!({"banks": s.banks, "evidence": s.evidence.map_or(Value::Null, num)}))
        .collect();
    json!({
        "strategy": report.strategy.to_string(),
        "selected": report.selected,
        "evidence": num(report.evidence()),
        "trainings": report.trainings,
        "decisions": decisions,
        "subsets": subsets,
        "failed": serde_json::to_value(&report.failed).expect("failures serialize"),
        "model": model_json(&report.final_model, None, set.labels()),
    })
}

fn run_ensemble(data: &DataArgs, strategy: Strategy, file: &str) -> Result<()> {
    let out = prepare_out(&data.common)?;
    let ds = Dataset::load(&data.manifest)?;
    let set = candidate_set(&ds, &data.banks)?;
    let opts = SelectionOptions {
        train: data.optim.train_options()?,
        ..Default::default()
    };
    let report = build_ensemble(&set, strategy, &opts)?;
    write_model(&out.join("model.bmdl"), &report.final_model)?;
    write_json(&out.join(file), &ensemble_json(&report, &set))?;
    println!(
        "{}: {}  evidence {:.6e}  ({} trainings)",
        strategy,
        report.selected.join("+"),
        report.evidence(),
        report.trainings
    );
    Ok(())
}

fn cmd_cv(args: &CvArgs) -> Result<()> {
    let out = prepare_out(&args.data.common)?;
    let ds = Dataset::load(&args.data.manifest)?;
    let set = candidate_set(&ds, &args.data.banks)?;
    let bank = concat_all(&set)?;
    let opts = CvOptions {
        grid: parse_grid(&args.grid)?,
        folds: args.folds,
        seed: args.data.common.seed,
        mode: ds.manifest.mode,
    };
    let train_opts = args.data.optim.train_options()?;
    set.labels().check_trainable()?;

    let start = Instant::now();
    let cv = cv_grid_search(&bank, set.labels(), &opts)?;
    let basis = build_basis(&bank, set.labels())?;
    let cv_model = fit_with_lambdas(&basis, &cv.chosen, bank.name())?;
    let cv_ms = start.elapsed().as_secs_f64() * 1e3;

    let start = Instant::now();
    let basis = build_basis(&bank, set.labels())?;
    let evidence_model = train_with_basis(&basis, bank.name(), &train_opts)?;
    let evidence_ms = start.elapsed().as_secs_f64() * 1e3;

    write_model(&out.join("cv_model.bmdl"), &cv_model)?;
    write_json(
        &out.join("cv.json"),
        &json!({
            "banks": bank.name(),
            "grid": nums(&cv.grid),
            "folds": cv.folds,
            "seed": cv.fold_assignment_seed,
            "decompositions": cv.decompositions,
            "chosen": nums(&cv.chosen),
            "per_lambda_scores": cv.per_lambda_scores.iter().map(|r| nums(r)).collect::<Vec<_>>(),
            "warnings": cv.warnings,
            "evidence_lambdas": nums(&evidence_model.lambdas),
            "cv_ms": num(cv_ms),
            "evidence_ms": num(evidence_ms),
        }),
    )?;
    println!("cv {cv_ms:.1} ms, evidence {evidence_ms:.1} ms");
    Ok(())
}

fn median(values: &mut [usize]) -> f64 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2]) as f64
    }
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let out = prepare_out(&args.common)?;
    let methods: Vec<Method> = match args.optim.method {
        Some(m) => vec![m],
        None => Method::ALL.to_vec(),
    };
    let problem = |seed: u64| -> Result<_> {
        let spec = SynthSpec {
            n: args.n,
            d: args.d,
            k: args.k,
            seed,
            ..Default::default()
        };
        spec.validate()?;
        let labels = crate::dataio::generate_labels(spec.n, spec.k, seed)?;
        let bank = synthesize_bank("bench", &labels, &spec)?;
        build_basis(&bank, &labels)
    };

    // warm-up, excluded from the rows
    let warm = problem(args.common.seed)?;
    for &m in &methods {
        let _ = optimize_lambda(&warm, 0, &args.optim.options(m)?);
    }

    let mut csv = format!("{BENCH_HEADER}\n");
    let mut summary = Vec::new();
    let mut iterations: Vec<Vec<usize>> = vec![Vec::new(); methods.len()];
    for seed in args.common.seed..args.common.seed + args.seeds {
        let basis = problem(seed)?;
        let mut finals = Vec::new();
        for (mi, &m) in methods.iter().enumerate() {
            let opts = args.optim.options(m)?;
            let mut rows = Vec::new();
            let start = Instant::now();
            let result = optimize_lambda_observed(&basis, 0, &opts, &mut |t| {
                rows.push((*t, start.elapsed().as_secs_f64() * 1e3));
            })?;
            for (t, ms) in rows {
                csv.push_str(&format!(
                    "{},{seed},{},{},{},{ms:.6}\n",
                    m.as_str(),
                    t.iteration,
                    t.lambda,
                    t.log_evidence
                ));
            }
            iterations[mi].push(result.iterations);
            finals.push(json!({
                "method": m.as_str(),
                "iterations": result.iterations,
                "converged": result.converged,
                "lambda": num(result.state.lambda),
                "log_evidence": num(result.state.log_evidence),
            }));
        }
        summary.push(json!({"seed": seed, "results": finals}));
    }
    let medians: Vec<Value> = methods
        .iter()
        .zip(iterations.iter_mut())
        .map(|(m, its)| json!({"method": m.as_str(), "median_iterations": num(median(its))}))
        .collect();
    write_text(&out.join("bench_convergence.csv"), &csv)?;
    write_json(&out.join("bench_summary.json"), &json!({"medians": medians, "seeds": summary}))?;
    for m in &medians {
        println!("{:<16} median iterations {}", m["method"].as_str().unwrap_or(""), m["median_iterations"]);
    }
    Ok(())
}

fn workers(command: &Command) -> Option<usize> {
    match command {
        Command::Evidence(a) | Command::Train(a) | Command::Select(a) => a.common.workers,
        Command::Predict(a) => a.common.workers,
        Command::Eval(a) => a.common.workers,
        Command::Ensemble(a) => a.data.common.workers,
        Command::Cv(a) => a.data.common.workers,
        Command::BenchConvergence(a) => a.common.workers,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers(&cli.command) {
        if n == 0 {
            return Err(Error::InvalidInput("--workers must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Evidence(a) => cmd_evidence(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Select(a) => run_ensemble(a, Strategy::SingleBest, "select.json"),
        Command::Ensemble(a) => run_ensemble(&a.data, a.strategy, "ensemble.json"),
        Command::Cv(a) => cmd_cv(a),
        Command::BenchConvergence(a) => cmd_bench(a),
    })
}

pub fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

/// Parses `args`, runs the command and maps the outcome to the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(EXIT_INPUT));
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
