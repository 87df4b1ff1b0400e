use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msb_core::cohort::{load_cohort, write_cohort, CsvLayout};
use msb_core::diagnostics;
use msb_core::evaluation::{
    compare, default_pairs, run_benchmark, write_comparisons_csv, BenchOptions, CvPlan, ModelConfig, ResultTable,
};
use msb_core::metrics::{permutation_importance, IbsWindow};
use msb_core::simulate::{describe, simulate, SimSpec};
use msb_core::stacking::{train_msb, train_naive_stack, FittedMsb, MsbConfig, Variant};
use msb_core::{kv, Cohort, LearnerKind, LearnerSpec, MsbError};

#[derive(Parser, Debug)]
#[command(name = "msb", version, about = "Multimodality stacking for survival data with blockwise missingness")]
#[command(args_override_self = true)]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// `key = value` file; each key is a long flag name and overrides the command line.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic multimodal cohort.
    Simulate(SimulateArgs),
    /// Missingness report, block patterns and survival by missingness.
    Profile(ProfileArgs),
    /// Train a stacked model and save it.
    Fit(FitArgs),
    /// Risk scores and survival curves from a saved model.
    Predict(PredictArgs),
    /// Repeated cross-validation benchmark.
    #[command(alias = "benchmark")]
    Evaluate(EvaluateArgs),
    /// Permutation importance of the score-matrix columns.
    Importance(ImportanceArgs),
    /// Paired Wilcoxon tests with Benjamini–Hochberg adjustment.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Features CSV with outcome columns.
    #[arg(long)]
    features: PathBuf,
    /// Manifest CSV: column_name,source_id,source_name.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "event")]
    event_col: String,
    /// Optional stratification column for fold assignment.
    #[arg(long)]
    strata_col: Option<String>,
}

impl DataArgs {
    fn layout(&self) -> CsvLayout {
        CsvLayout {
            time_col: self.time_col.clone(),
            event_col: self.event_col.clone(),
            strata_col: self.strata_col.clone(),
        }
    }

    fn load(&self) -> msb_core::Result<Cohort> {
        load_cohort(&self.features, &self.manifest, &self.layout())
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WindowName {
    Early,
    Late,
}

/// Learner hyperparameters shared by every learner built in a run.
#[derive(Args, Debug)]
struct LearnerArgs {
    #[arg(long, default_value_t = 0.5)]
    coxnet_alpha: f64,
    #[arg(long, default_value_t = 20)]
    coxnet_n_lambdas: usize,
    #[arg(long, default_value_t = 0.01)]
    coxnet_lambda_min_ratio: f64,
    #[arg(long, default_value_t = 3)]
    coxnet_cv_folds: usize,
    #[arg(long, default_value_t = 100)]
    rsf_n_trees: usize,
    /// Candidate features per node (default ceil(sqrt(p))).
    #[arg(long)]
    rsf_max_features: Option<usize>,
    #[arg(long, default_value_t = 6)]
    rsf_min_samples_split: usize,
    #[arg(long, default_value_t = 3)]
    rsf_min_events_split: usize,
    #[arg(long, default_value_t = 3)]
    rsf_min_samples_leaf: usize,
    #[arg(long, default_value_t = 100)]
    cwgb_n_rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    cwgb_learning_rate: f64,
}

impl LearnerArgs {
    fn spec(&self, kind: LearnerKind) -> LearnerSpec {
        let mut spec = LearnerSpec::new(kind);
        spec.coxnet.alpha = self.coxnet_alpha;
        spec.coxnet.n_lambdas = self.coxnet_n_lambdas;
        spec.coxnet.lambda_min_ratio = self.coxnet_lambda_min_ratio;
        spec.coxnet.cv_folds = self.coxnet_cv_folds;
        spec.rsf.n_trees = self.rsf_n_trees;
        spec.rsf.max_features = self.rsf_max_features;
        spec.rsf.min_samples_split = self.rsf_min_samples_split;
        spec.rsf.min_events_split = self.rsf_min_events_split;
        spec.rsf.min_samples_leaf = self.rsf_min_samples_leaf;
        spec.cwgb.n_rounds = self.cwgb_n_rounds;
        spec.cwgb.learning_rate = self.cwgb_learning_rate;
        spec
    }
}

#[derive(Args, Debug)]
struct StackArgs {
    /// Base learners fitted on every source.
    #[arg(long, value_delimiter = ',', default_value = "coxnet,rsf,cwgb")]
    base: Vec<LearnerKind>,
    /// Inner folds for out-of-fold risk scores.
    #[arg(long, default_value_t = 5)]
    inner_folds: usize,
    /// Append per-source missingness rates to the score matrix.
    #[arg(long, value_enum, default_value = "on")]
    indicator: Switch,
    /// Neighbours for kNN imputation.
    #[arg(long, default_value_t = 5)]
    knn_k: usize,
}

impl StackArgs {
    fn config(&self, learners: &LearnerArgs, variant: Variant, meta: LearnerKind, seed: u64) -> MsbConfig {
        MsbConfig {
            variant,
            include_indicator: self.indicator.on(),
            base_specs: self.base.iter().map(|&k| learners.spec(k)).collect(),
            meta_spec: learners.spec(meta),
            inner_folds: self.inner_folds,
            knn_k: self.knn_k,
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// SimSpec as `key = value` text; unspecified keys keep their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec cohort size.
    #[arg(long)]
    n: Option<usize>,
    /// Output directory (features.csv, manifest.csv, truth.csv, description.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory (description.csv, patterns.csv, km.csv, logrank.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    stack: StackArgs,
    #[command(flatten)]
    learners: LearnerArgs,
    #[arg(long, default_value = "plain")]
    variant: Variant,
    #[arg(long, default_value = "cwgb")]
    meta: LearnerKind,
    /// Fit the meta-learner on in-sample scores instead of out-of-fold ones.
    #[arg(long, value_enum, default_value = "off")]
    naive: Switch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model artifact path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Times at which survival is reported.
    #[arg(long, value_delimiter = ',', default_value = "30,90,180,365,730")]
    times: Vec<f64>,
    /// Output CSV: row, risk, one survival column per time.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    stack: StackArgs,
    #[command(flatten)]
    learners: LearnerArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Survival-time quantile bins used to stratify folds.
    #[arg(long, default_value_t = 4)]
    time_bins: usize,
    /// Also stratify folds by the strata column when present.
    #[arg(long, value_enum, default_value = "on")]
    strata: Switch,
    /// Concatenated-feature baselines.
    #[arg(long, value_delimiter = ',', default_value = "coxnet,rsf,cwgb")]
    baselines: Vec<LearnerKind>,
    /// Meta-learners for the stacked models.
    #[arg(long, value_delimiter = ',', default_value = "coxnet,rsf,cwgb")]
    metas: Vec<LearnerKind>,
    #[arg(long, value_delimiter = ',', default_value = "plain")]
    variants: Vec<Variant>,
    /// Include the in-sample stacking counterpart of every stacked model.
    #[arg(long, value_enum, default_value = "on")]
    naive_stack: Switch,
    /// Early window as start,end,points.
    #[arg(long, value_delimiter = ',', default_value = "15,102,50")]
    early: Vec<f64>,
    /// Late window as start,end,points.
    #[arg(long, value_delimiter = ',', default_value = "100,1000,50")]
    late: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (results.csv, summary.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ImportanceArgs {
    #[arg(long)]
    model: PathBuf,
    /// Held-out cohort.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "late")]
    window: WindowName,
    /// Grid points in the window.
    #[arg(long, default_value_t = 50)]
    resolution: usize,
    #[arg(long, default_value_t = 20)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Long results CSV written by `evaluate`.
    #[arg(long)]
    results: PathBuf,
    /// Pairs as MODEL:BASELINE; defaults to every stacked model against
    /// the baseline of its family.
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Usage problems (exit 2) versus failures during computation (exit 1).
enum Failure {
    Usage(String),
    Compute(MsbError),
}

impl From<MsbError> for Failure {
    fn from(e: MsbError) -> Self {
        match e {
            MsbError::Config(m) => Failure::Usage(m),
            other => Failure::Compute(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Compute(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Finds `--config PATH` (or `--config=PATH`) and appends its pairs as long
/// flags, so that they win over earlier occurrences.
fn expand_config(mut argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        let Some(s) = a.to_str() else { continue };
        if s == "--config" {
            path = argv.get(i + 1).cloned().map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let pairs = kv::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    for (key, value) in pairs {
        let flag = key.replace(['_', '.'], "-");
        if flag == "config" || flag == "jobs" {
            return Err(format!("{}: '{key}' cannot be set from a config file", path.display()));
        }
        argv.push(format!("--{flag}").into());
        argv.push(value.into());
    }
    Ok(argv)
}

fn create(path: &Path) -> std::io::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> std::io::Result<()> {
    let mut out = create(path)?;
    f(&mut out)?;
    out.flush()
}

/// Appends one JSON line describing the invocation next to its outputs.
fn record_run(dir: &Path, subcommand: &str, seed: Option<u64>, argv: &[OsString]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let line = serde_json::json!({
        "subcommand": subcommand,
        "seed": seed,
        "args": args,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join("run.jsonl"))?;
    writeln!(f, "{line}")
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn window(values: &[f64], what: &str) -> std::result::Result<IbsWindow, Failure> {
    match values {
        [start, end, points] if points.fract() == 0.0 && *points >= 0.0 => {
            Ok(IbsWindow::new(*start, *end, *points as usize)?)
        }
        _ => Err(Failure::Usage(format!("--{what} expects start,end,points"))),
    }
}

fn run_simulate(args: &SimulateArgs, argv: &[OsString]) -> Outcome {
    let mut spec = match &args.spec {
        Some(path) => SimSpec::from_text(&fs::read_to_string(path)?)?,
        None => SimSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.n {
        spec.n = n;
    }
    let sim = simulate(&spec)?;
    fs::create_dir_all(&args.out)?;
    write_cohort(&sim.cohort, args.out.join("features.csv"), args.out.join("manifest.csv"), &CsvLayout::default())?;
    write_with(&args.out.join("truth.csv"), |w| sim.truth.write_csv(w))?;
    write_with(&args.out.join("description.csv"), |w| describe(&sim.cohort).write_csv(w))?;
    record_run(&args.out, "simulate", Some(spec.seed), argv)?;
    Ok(())
}

fn run_profile(args: &ProfileArgs, argv: &[OsString]) -> Outcome {
    let cohort = args.data.load()?;
    let out = &args.out;
    let description = describe(&cohort);
    write_with(&out.join("description.csv"), |w| description.write_csv(w))?;
    write_with(&out.join("patterns.csv"), |w| diagnostics::write_pattern_csv(&cohort, w))?;
    let survival = diagnostics::survival_by_missingness(&cohort)?;
    write_with(&out.join("km.csv"), |w| diagnostics::write_km_csv(&survival, w))?;
    write_with(&out.join("logrank.csv"), |w| diagnostics::write_logrank_csv(&survival, w))?;
    print!("{description}");
    record_run(out, "profile", None, argv)?;
    Ok(())
}

fn run_fit(args: &FitArgs, argv: &[OsString]) -> Outcome {
    let config = args.stack.config(&args.learners, args.variant, args.meta, args.seed);
    config.validate()?;
    let cohort = args.data.load()?;
    let model = if args.naive.on() { train_naive_stack(&cohort, &config)? } else { train_msb(&cohort, &config)? };
    for d in model.dropped_sources() {
        eprintln!("source {} dropped: {}", d.id, d.reason);
    }
    let dir = parent_dir(&args.out);
    fs::create_dir_all(&dir)?;
    model.save(&args.out)?;
    record_run(&dir, "fit", Some(args.seed), argv)?;
    Ok(())
}

fn run_predict(args: &PredictArgs, argv: &[OsString]) -> Outcome {
    if args.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Failure::Usage("--times must be nonnegative".into()));
    }
    let model = FittedMsb::load(&args.model)?;
    let cohort = args.data.load()?;
    let prediction = model.predict(&cohort, &args.times)?;
    write_with(&args.out, |w| {
        write!(w, "row,risk")?;
        for t in &args.times {
            write!(w, ",S({t})")?;
        }
        writeln!(w)?;
        for (i, (risk, curve)) in prediction.risk.iter().zip(&prediction.survival).enumerate() {
            write!(w, "{i},{risk:.6}")?;
            for &t in &args.times {
                write!(w, ",{:.6}", curve.eval(t))?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    record_run(&parent_dir(&args.out), "predict", None, argv)?;
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs, argv: &[OsString]) -> Outcome {
    let plan = CvPlan {
        folds: args.folds,
        repetitions: args.repetitions,
        time_bins: args.time_bins,
        use_strata: args.strata.on(),
        seed: args.seed,
    };
    plan.validate()?;
    let options = BenchOptions {
        early: window(&args.early, "early")?,
        late: window(&args.late, "late")?,
        knn_k: args.stack.knn_k,
    };
    let mut models: Vec<ModelConfig> =
        args.baselines.iter().map(|&k| ModelConfig::baseline(args.learners.spec(k).with_seed(args.seed))).collect();
    for &variant in &args.variants {
        for &meta in &args.metas {
            let config = args.stack.config(&args.learners, variant, meta, args.seed);
            config.validate()?;
            models.push(ModelConfig::msb(config.clone()));
            if args.naive_stack.on() {
                models.push(ModelConfig::naive_stack(config));
            }
        }
    }
    if models.is_empty() {
        return Err(Failure::Usage("no models selected".into()));
    }
    let cohort = args.data.load()?;
    let table = run_benchmark(&cohort, &plan, &models, &options)?;
    write_with(&args.out.join("results.csv"), |w| table.write_csv(w))?;
    write_with(&args.out.join("summary.csv"), |w| table.write_summary_csv(w))?;
    record_run(&args.out, "evaluate", Some(args.seed), argv)?;
    Ok(())
}

fn run_importance(args: &ImportanceArgs, argv: &[OsString]) -> Outcome {
    let base = match args.window {
        WindowName::Early => IbsWindow::EARLY,
        WindowName::Late => IbsWindow::LATE,
    };
    let window = IbsWindow::new(base.start, base.end, args.resolution)?;
    let model = FittedMsb::load(&args.model)?;
    let cohort = args.data.load()?;
    let report = permutation_importance(&model, &cohort, &window, args.permutations, args.seed)?;
    write_with(&args.out, |w| report.write_csv(w))?;
    record_run(&parent_dir(&args.out), "importance", Some(args.seed), argv)?;
    Ok(())
}

fn run_compare(args: &CompareArgs, argv: &[OsString]) -> Outcome {
    let table = ResultTable::read_csv(File::open(&args.results)?)?;
    let pairs = if args.pairs.is_empty() {
        default_pairs(&table)
    } else {
        args.pairs
            .iter()
            .map(|p| {
                p.split_once(':')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Failure::Usage(format!("pair '{p}' is not MODEL:BASELINE")))
            })
            .collect::<std::result::Result<_, _>>()?
    };
    let comparisons = compare(&table, &pairs)?;
    write_with(&args.out, |w| write_comparisons_csv(&comparisons, w))?;
    record_run(&parent_dir(&args.out), "compare", None, argv)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => run_simulate(a, &argv),
        Command::Profile(a) => run_profile(a, &argv),
        Command::Fit(a) => run_fit(a, &argv),
        Command::Predict(a) => run_predict(a, &argv),
        Command::Evaluate(a) => run_evaluate(a, &argv),
        Command::Importance(a) => run_importance(a, &argv),
        Command::Compare(a) => run_compare(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
