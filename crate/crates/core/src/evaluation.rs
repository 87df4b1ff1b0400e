//! Outer evaluation: repeated stratified K-fold cross-validation, result
//! tables, generalization gap and paired signed-rank comparisons with FDR
//! control.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use log::warn;
use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{missingness_profile, Cohort, SurvivalOutcome};
use crate::error::{MsbError, Result};
use crate::impute::{KnnImputer, DEFAULT_K};
use crate::learners::{FittedLearner, LearnerSpec};
use crate::metrics::{c_index, integrated_brier, IbsWindow};
use crate::seeds;
use crate::special::erfc;
use crate::stacking::{BaseStage, FittedMsb, MsbConfig, Stacking, Variant};
use crate::survival::{censoring_km, StepCurve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: usize,
    pub repetitions: usize,
    /// Quantile bins of observed time used for stratification.
    pub time_bins: usize,
    /// Also stratify on the cohort's categorical stratum column, if any.
    pub use_strata: bool,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self { folds: 5, repetitions: 3, time_bins: 4, use_strata: true, seed: 0 }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 || self.repetitions < 1 || self.time_bins < 1 {
            return Err(MsbError::config("CV plan needs folds ≥ 2, repetitions ≥ 1 and time bins ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub repetition: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratum cell of every row for the given number of time bins.
fn cells(cohort: &Cohort, bins: usize, use_strata: bool) -> Vec<(usize, bool, String)> {
    let y = cohort.outcomes();
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].time.total_cmp(&y[b].time));
    let mut bin = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        bin[i] = rank * bins / n;
    }
    let strata = cohort.strata().filter(|_| use_strata);
    (0..n).map(|i| (bin[i], y[i].event, strata.map_or(String::new(), |s| s[i].clone()))).collect()
}

/// Repeated stratified folds. Rows are grouped into cells crossing time
/// bins, event status and the optional stratum; each cell is shuffled and
/// dealt round-robin, the fold counter carrying over between cells. When a
/// cell is smaller than the fold count, time bins are halved once; if cells
/// remain small, splitting proceeds with a warning.
pub fn make_folds(cohort: &Cohort, plan: &CvPlan) -> Result<Vec<FoldSplit>> {
    plan.validate()?;
    let n = cohort.n_rows();
    if n < plan.folds {
        return Err(MsbError::invalid(format!("{n} rows cannot fill {} folds", plan.folds)));
    }
    let smallest = |labels: &[(usize, bool, String)]| {
        let mut counts: HashMap<&(usize, bool, String), usize> = HashMap::new();
        for l in labels {
            *counts.entry(l).or_default() += 1;
        }
        counts.into_values().min().unwrap_or(0)
    };
    let mut bins = plan.time_bins;
    let mut labels = cells(cohort, bins, plan.use_strata);
    if smallest(&labels) < plan.folds && bins > 2 {
        warn!("stratification cells smaller than {} folds; coarsening time bins {bins} → 2", plan.folds);
        bins = 2;
        labels = cells(cohort, bins, plan.use_strata);
    }
    if smallest(&labels) < plan.folds {
        warn!("some stratification cells remain smaller than {} folds", plan.folds);
    }
    let mut groups: BTreeMap<&(usize, bool, String), Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }

    let mut splits = Vec::with_capacity(plan.repetitions * plan.folds);
    for rep in 0..plan.repetitions {
        let mut rng = seeds::rng(plan.seed, "outer-folds", &[rep as u64]);
        let mut fold_of = vec![0usize; n];
        let mut counter = 0usize;
        for members in groups.values() {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            for i in members {
                fold_of[i] = counter % plan.folds;
                counter += 1;
            }
        }
        for fold in 0..plan.folds {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == fold);
            splits.push(FoldSplit { repetition: rep, fold, train, test });
        }
    }
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    /// A single learner on the kNN-imputed concatenated features plus the
    /// per-source missingness rates.
    Baseline {
        spec: LearnerSpec,
    },
    Msb {
        config: MsbConfig,
    },
    NaiveStack {
        config: MsbConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub family: String,
    pub kind: ModelKind,
}

impl ModelConfig {
    pub fn baseline(spec: LearnerSpec) -> Self {
        let label = spec.kind.label().to_string();
        Self { name: label.clone(), family: label, kind: ModelKind::Baseline { spec } }
    }

    /// Named after the meta-learner, e.g. `MSB-CoxNet_plain`.
    pub fn msb(config: MsbConfig) -> Self {
        let family = config.meta_spec.kind.label().to_string();
        Self { name: format!("MSB-{family}_{}", config.variant), family, kind: ModelKind::Msb { config } }
    }

    pub fn naive_stack(config: MsbConfig) -> Self {
        let family = config.meta_spec.kind.label().to_string();
        Self { name: format!("NaiveStack-{family}_{}", config.variant), family, kind: ModelKind::NaiveStack { config } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub early: IbsWindow,
    pub late: IbsWindow,
    pub knn_k: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { early: IbsWindow::EARLY, late: IbsWindow::LATE, knn_k: DEFAULT_K }
    }
}

/// Metrics of one model on one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub model: String,
    pub family: String,
    pub repetition: usize,
    pub fold: usize,
    pub train: FoldMetrics,
    pub test: FoldMetrics,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldMetrics {
    pub c_index: f64,
    pub ibs_early: f64,
    pub ibs_late: f64,
}

impl FoldMetrics {
    const MISSING: FoldMetrics = FoldMetrics { c_index: f64::NAN, ibs_early: f64::NAN, ibs_late: f64::NAN };
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    /// Ordered by (model, repetition, fold).
    pub rows: Vec<ResultRow>,
}

/// A model fitted on one training fold, able to score any cohort.
enum Fitted {
    Baseline { imputer: KnnImputer, learner: FittedLearner },
    Stack(FittedMsb),
}

fn baseline_matrix(imputer: &KnnImputer, cohort: &Cohort) -> Result<ndarray::Array2<f64>> {
    let x = imputer.transform(cohort.features().view())?;
    let rates = missingness_profile(cohort).rates;
    Ok(concatenate(Axis(1), &[x.view(), rates.view()]).expect("row counts agree"))
}

impl Fitted {
    fn predict(&self, cohort: &Cohort, grid: &[f64]) -> Result<(Vec<f64>, Vec<StepCurve>)> {
        match self {
            Fitted::Baseline { imputer, learner } => {
                let x = baseline_matrix(imputer, cohort)?;
                Ok((learner.predict_risk(x.view())?, learner.predict_survival(x.view(), grid)?))
            }
            Fitted::Stack(m) => {
                let z = m.score_matrix(cohort)?;
                Ok((m.meta_risk(z.values.view())?, m.meta_survival(z.values.view(), grid)?))
            }
        }
    }
}

/// Evaluation grid: both windows truncated at the training horizon.
struct Windows {
    early: Option<IbsWindow>,
    late: Option<IbsWindow>,
    grid: Vec<f64>,
}

impl Windows {
    fn new(options: &BenchOptions, horizon: f64) -> Self {
        let early = options.early.truncated(horizon);
        let late = options.late.truncated(horizon);
        let mut grid: Vec<f64> = early.iter().chain(late.iter()).flat_map(IbsWindow::grid).collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        if grid.is_empty() {
            grid.push(horizon.max(1.0));
        }
        Self { early, late, grid }
    }
}

fn metrics_on(
    outcomes: &[SurvivalOutcome],
    risk: &[f64],
    curves: &[StepCurve],
    windows: &Windows,
    g_hat: &StepCurve,
) -> FoldMetrics {
    let ibs = |w: &Option<IbsWindow>| {
        w.as_ref().and_then(|w| integrated_brier(outcomes, curves, w, g_hat).ok()).unwrap_or(f64::NAN)
    };
    FoldMetrics {
        c_index: c_index(outcomes, risk).unwrap_or(f64::NAN),
        ibs_early: ibs(&windows.early),
        ibs_late: ibs(&windows.late),
    }
}

/// Identity of a base stage: stacking models agreeing on it share one fit.
fn base_key(config: &MsbConfig) -> String {
    serde_json::to_string(&(config.variant == Variant::Imp, &config.base_specs, config.inner_folds, config.knn_k))
        .expect("config serializes")
}

fn with_seed(config: &MsbConfig, seed: u64) -> MsbConfig {
    MsbConfig { seed, ..config.clone() }
}

fn run_split(
    cohort: &Cohort,
    split: &FoldSplit,
    plan: &CvPlan,
    models: &[ModelConfig],
    options: &BenchOptions,
) -> Vec<ResultRow> {
    let train = cohort.subset(&split.train);
    let test = cohort.subset(&split.test);
    let seed = seeds::derive(plan.seed, "cell", &[split.repetition as u64, split.fold as u64]);
    let horizon = train.outcomes().iter().filter(|o| o.event).map(|o| o.time).fold(f64::NEG_INFINITY, f64::max);
    let windows = Windows::new(options, horizon);
    let g_hat = censoring_km(train.outcomes());
    let mut bases: HashMap<String, std::result::Result<BaseStage, String>> = HashMap::new();

    models
        .iter()
        .map(|m| {
            let fitted: Result<Fitted> = match &m.kind {
                ModelKind::Baseline { spec } => (|| {
                    let imputer = KnnImputer::fit(train.features().view(), options.knn_k)?.with_fallback(0.0);
                    let x = baseline_matrix(&imputer, &train)?;
                    let learner = FittedLearner::fit(&spec.clone().with_seed(seed), x.view(), train.outcomes())?;
                    Ok(Fitted::Baseline { imputer, learner })
                })(),
                ModelKind::Msb { config } | ModelKind::NaiveStack { config } => {
                    let config = with_seed(config, seed);
                    let stacking = match m.kind {
                        ModelKind::NaiveStack { .. } => Stacking::InSample,
                        _ => Stacking::OutOfFold,
                    };
                    let base = bases
                        .entry(base_key(&config))
                        .or_insert_with(|| BaseStage::fit(&train, &config).map_err(|e| e.to_string()));
                    match base {
                        Ok(b) => b.finish(&config, stacking).map(Fitted::Stack),
                        Err(e) => Err(MsbError::Undefined(e.clone())),
                    }
                }
            };
            let scored = fitted.and_then(|f| {
                let g = g_hat.as_ref().map_err(|e| MsbError::Undefined(e.to_string()))?;
                let (risk, curves) = f.predict(&train, &windows.grid)?;
                let tr = metrics_on(train.outcomes(), &risk, &curves, &windows, g);
                let (risk, curves) = f.predict(&test, &windows.grid)?;
                let te = metrics_on(test.outcomes(), &risk, &curves, &windows, g);
                Ok((tr, te))
            });
            let (train_m, test_m, error) = match scored {
                Ok((a, b)) => (a, b, None),
                Err(e) => {
                    warn!("{} failed on repetition {} fold {}: {e}", m.name, split.repetition, split.fold);
                    (FoldMetrics::MISSING, FoldMetrics::MISSING, Some(e.to_string()))
                }
            };
            ResultRow {
                model: m.name.clone(),
                family: m.family.clone(),
                repetition: split.repetition,
                fold: split.fold,
                train: train_m,
                test: test_m,
                error,
            }
        })
        .collect()
}

/// Trains and scores every model on every fold. Fit failures are recorded
/// in the row's `error` and leave its metrics NaN.
pub fn run_benchmark(
    cohort: &Cohort,
    plan: &CvPlan,
    models: &[ModelConfig],
    options: &BenchOptions,
) -> Result<ResultTable> {
    if models.is_empty() {
        return Err(MsbError::config("benchmark needs at least one model"));
    }
    let mut names: Vec<&str> = models.iter().map(|m| m.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(MsbError::config("model names must be unique"));
    }
    let splits = make_folds(cohort, plan)?;
    let per_split: Vec<Vec<ResultRow>> =
        splits.par_iter().map(|s| run_split(cohort, s, plan, models, options)).collect();
    let mut rows = Vec::with_capacity(splits.len() * models.len());
    for m in 0..models.len() {
        rows.extend(per_split.iter().map(|r| r[m].clone()));
    }
    Ok(ResultTable { rows })
}

fn fmt6(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd =
        if v.len() > 1 { (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

impl ResultTable {
    /// Model names in first-appearance order.
    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model) {
                out.push(r.model.clone());
            }
        }
        out
    }

    pub fn rows_for<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| r.model == model)
    }

    /// Long format: one line per (model, repetition, fold, dataset).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "model,family,repetition,fold,dataset,c_index,ibs_early,ibs_late,error")?;
        for r in &self.rows {
            for (dataset, m) in [("train", &r.train), ("test", &r.test)] {
                writeln!(
                    out,
                    "{},{},{},{},{dataset},{},{},{},{}",
                    r.model,
                    r.family,
                    r.repetition,
                    r.fold,
                    fmt6(m.c_index),
                    fmt6(m.ibs_early),
                    fmt6(m.ibs_late),
                    r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
                )?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| MsbError::invalid(format!("results CSV lacks column '{name}'")))
        };
        let idx: Vec<usize> = ["model", "family", "repetition", "fold", "dataset", "c_index", "ibs_early", "ibs_late"]
            .iter()
            .map(|c| col(c))
            .collect::<Result<_>>()?;
        let err_col = headers.iter().position(|h| h == "error");
        let num = |s: &str| if s == "NA" || s.is_empty() { Ok(f64::NAN) } else { s.parse::<f64>() };
        let mut rows: Vec<ResultRow> = Vec::new();
        let mut position: HashMap<(String, usize, usize), usize> = HashMap::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let bad = || MsbError::invalid(format!("results CSV record {}: malformed value", line + 2));
            let key = (
                rec[idx[0]].to_string(),
                rec[idx[2]].parse::<usize>().map_err(|_| bad())?,
                rec[idx[3]].parse::<usize>().map_err(|_| bad())?,
            );
            let metrics = FoldMetrics {
                c_index: num(&rec[idx[5]]).map_err(|_| bad())?,
                ibs_early: num(&rec[idx[6]]).map_err(|_| bad())?,
                ibs_late: num(&rec[idx[7]]).map_err(|_| bad())?,
            };
            let at = *position.entry(key.clone()).or_insert_with(|| {
                rows.push(ResultRow {
                    model: key.0.clone(),
                    family: rec[idx[1]].to_string(),
                    repetition: key.1,
                    fold: key.2,
                    train: FoldMetrics::MISSING,
                    test: FoldMetrics::MISSING,
                    error: err_col.map(|c| rec[c].to_string()).filter(|e| !e.is_empty()),
                });
                rows.len() - 1
            });
            match &rec[idx[4]] {
                "train" => rows[at].train = metrics,
                "test" => rows[at].test = metrics,
                other => return Err(MsbError::invalid(format!("unknown dataset '{other}' in results CSV"))),
            }
        }
        Ok(Self { rows })
    }

    /// Mean ± SD per (model, dataset), mirroring the usual performance table,
    /// plus the model's generalization gap on both of its lines.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "family,model,dataset,folds,c_index_mean,c_index_sd,ibs_early_mean,ibs_early_sd,ibs_late_mean,ibs_late_sd,c_index_gap"
        )?;
        for model in self.models() {
            let rows: Vec<&ResultRow> = self.rows_for(&model).collect();
            let gap = generalization_gap(self, &model).unwrap_or(f64::NAN);
            for dataset in ["train", "test"] {
                let pick = |f: fn(&FoldMetrics) -> f64| -> Vec<f64> {
                    rows.iter()
                        .map(|r| f(if dataset == "train" { &r.train } else { &r.test }))
                        .filter(|v| !v.is_nan())
                        .collect()
                };
                let c = pick(|m| m.c_index);
                let (cm, cs) = mean_sd(&c);
                let (em, es) = mean_sd(&pick(|m| m.ibs_early));
                let (lm, ls) = mean_sd(&pick(|m| m.ibs_late));
                writeln!(
                    out,
                    "{},{model},{dataset},{},{},{},{},{},{},{},{}",
                    rows[0].family,
                    c.len(),
                    fmt6(cm),
                    fmt6(cs),
                    fmt6(em),
                    fmt6(es),
                    fmt6(lm),
                    fmt6(ls),
                    fmt6(gap)
                )?;
            }
        }
        Ok(())
    }

    pub fn mean_test_c_index(&self, model: &str) -> Result<f64> {
        let v: Vec<f64> = self.rows_for(model).map(|r| r.test.c_index).filter(|v| !v.is_nan()).collect();
        if v.is_empty() {
            return Err(MsbError::Undefined(format!("no test C-index for model '{model}'")));
        }
        Ok(mean_sd(&v).0)
    }
}

/// Mean train C-index minus mean test C-index over folds where both exist.
pub fn generalization_gap(table: &ResultTable, model: &str) -> Result<f64> {
    let rows: Vec<&ResultRow> = table.rows_for(model).collect();
    if rows.is_empty() {
        return Err(MsbError::invalid(format!("model '{model}' is not in the table")));
    }
    let usable: Vec<&&ResultRow> =
        rows.iter().filter(|r| !r.train.c_index.is_nan() && !r.test.c_index.is_nan()).collect();
    if usable.len() < rows.len() {
        warn!("{}: {} folds without both C-indices excluded from the gap", model, rows.len() - usable.len());
    }
    if usable.is_empty() {
        return Err(MsbError::Undefined(format!("model '{model}' has no complete folds")));
    }
    let n = usable.len() as f64;
    let train = usable.iter().map(|r| r.train.c_index).sum::<f64>() / n;
    let test = usable.iter().map(|r| r.test.c_index).sum::<f64>() / n;
    Ok(train - test)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wilcoxon {
    /// Nonzero deltas used.
    pub n: usize,
    /// Rank sum of positive deltas.
    pub w_plus: f64,
    /// Rank sum of negative deltas (baseline ahead); the reported statistic.
    pub w_minus: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

impl Wilcoxon {
    pub fn statistic(&self) -> f64 {
        self.w_minus
    }
}

pub const WILCOXON_EXACT_MAX: usize = 25;

/// Paired Wilcoxon signed-rank test on `deltas` (MSB − baseline). Zero
/// deltas are dropped and tied magnitudes get midranks. The two-sided p is
/// exact up to 25 nonzero deltas (conditional on the midranks) and uses the
/// tie-corrected normal approximation with continuity correction above.
pub fn wilcoxon_signed_rank(deltas: &[f64]) -> Result<Wilcoxon> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(MsbError::invalid("deltas must be finite"));
    }
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(MsbError::Undefined("every paired difference is zero".into()));
    }
    if n < 5 {
        return Err(MsbError::invalid(format!("signed-rank test needs ≥ 5 nonzero deltas, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| nonzero[a].abs().total_cmp(&nonzero[b].abs()));
    // doubled midranks are integers
    let mut rank2 = vec![0u64; n];
    let mut ties = Vec::new();
    let mut k = 0;
    while k < n {
        let mut end = k;
        while end < n && nonzero[order[end]].abs() == nonzero[order[k]].abs() {
            end += 1;
        }
        for &i in &order[k..end] {
            rank2[i] = (k + 1 + end) as u64;
        }
        ties.push(end - k);
        k = end;
    }
    let w_plus2: u64 = (0..n).filter(|&i| nonzero[i] > 0.0).map(|i| rank2[i]).sum();
    let total2: u64 = rank2.iter().sum();
    let w_minus2 = total2 - w_plus2;
    let low2 = w_plus2.min(w_minus2);

    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX {
        let mut counts = vec![0f64; total2 as usize + 1];
        counts[0] = 1.0;
        for &r in &rank2 {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let tail: f64 = counts[..=low2 as usize].iter().sum::<f64>() / 2f64.powi(n as i32);
        ((2.0 * tail).min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let dev = (mean - low2 as f64 / 2.0).abs() - 0.5;
        let z = dev.max(0.0) / var.sqrt();
        (erfc(z / std::f64::consts::SQRT_2).min(1.0), false)
    };
    Ok(Wilcoxon { n, w_plus: w_plus2 as f64 / 2.0, w_minus: w_minus2 as f64 / 2.0, p_value, exact })
}

/// Benjamini–Hochberg adjusted p-values, in input order.
pub fn benjamini_hochberg(p: &[f64]) -> Result<Vec<f64>> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(MsbError::invalid("p-values must lie in [0, 1]"));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p[i] * (m as f64 / (rank + 1) as f64));
        adjusted[i] = running;
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub model: String,
    pub baseline: String,
    /// Mean over paired folds of test C-index (model − baseline).
    pub delta_c_index: f64,
    /// Relative to the baseline's mean test C-index, in percent.
    pub delta_percent: f64,
    pub test: Wilcoxon,
    pub p_adjusted: f64,
}

/// Pairs each MSB model with the baseline of its family.
pub fn default_pairs(table: &ResultTable) -> Vec<(String, String)> {
    let models = table.models();
    let family = |name: &str| table.rows_for(name).next().map(|r| r.family.clone()).unwrap_or_default();
    models
        .iter()
        .filter(|m| m.starts_with("MSB-"))
        .filter_map(|m| {
            let fam = family(m);
            models.iter().find(|b| **b == fam).map(|b| (m.clone(), b.clone()))
        })
        .collect()
}

/// Paired signed-rank tests of test C-index over shared folds, with BH
/// adjustment across all pairs.
pub fn compare(table: &ResultTable, pairs: &[(String, String)]) -> Result<Vec<Comparison>> {
    let mut partial = Vec::with_capacity(pairs.len());
    for (model, baseline) in pairs {
        let base: HashMap<(usize, usize), f64> =
            table.rows_for(baseline).map(|r| ((r.repetition, r.fold), r.test.c_index)).collect();
        if base.is_empty() {
            return Err(MsbError::invalid(format!("model '{baseline}' is not in the table")));
        }
        let paired: Vec<(f64, f64)> = table
            .rows_for(model)
            .filter_map(|r| base.get(&(r.repetition, r.fold)).map(|&b| (r.test.c_index, b)))
            .filter(|(a, b)| !a.is_nan() && !b.is_nan())
            .collect();
        if paired.is_empty() {
            return Err(MsbError::invalid(format!("no paired folds for '{model}' vs '{baseline}'")));
        }
        let deltas: Vec<f64> = paired.iter().map(|(a, b)| a - b).collect();
        let n = deltas.len() as f64;
        let delta = deltas.iter().sum::<f64>() / n;
        let base_mean = paired.iter().map(|p| p.1).sum::<f64>() / n;
        partial.push((
            model.clone(),
            baseline.clone(),
            delta,
            100.0 * delta / base_mean,
            wilcoxon_signed_rank(&deltas)?,
        ));
    }
    let adjusted = benjamini_hochberg(&partial.iter().map(|p| p.4.p_value).collect::<Vec<_>>())?;
    Ok(partial
        .into_iter()
        .zip(adjusted)
        .map(|((model, baseline, delta_c_index, delta_percent, test), p_adjusted)| Comparison {
            model,
            baseline,
            delta_c_index,
            delta_percent,
            test,
            p_adjusted,
        })
        .collect())
}

pub fn write_comparisons_csv<W: Write>(comparisons: &[Comparison], mut out: W) -> std::io::Result<()> {
    writeln!(out, "model,baseline,n,delta_c_index,delta_percent,w_stat,p_value,p_adjusted")?;
    for c in comparisons {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.model,
            c.baseline,
            c.test.n,
            fmt6(c.delta_c_index),
            fmt6(c.delta_percent),
            fmt6(c.test.statistic()),
            fmt6(c.test.p_value),
            fmt6(c.p_adjusted)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::ModalityManifest;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn toy(n: usize, events: impl Fn(usize) -> bool) -> Cohort {
        let x = Array2::from_shape_fn((n, 2), |(i, j)| (i * 3 + j) as f64);
        let y = (0..n).map(|i| SurvivalOutcome::new((i + 1) as f64, events(i))).collect();
        Cohort::new(x, vec!["a".into(), "b".into()], ModalityManifest::contiguous(&[1, 1]).unwrap(), y, None).unwrap()
    }

    fn check_partition(splits: &[FoldSplit], n: usize) {
        for rep in splits.iter().map(|s| s.repetition).collect::<std::collections::BTreeSet<_>>() {
            let mut seen = vec![0; n];
            for s in splits.iter().filter(|s| s.repetition == rep) {
                assert!(!s.test.is_empty());
                assert_eq!(s.train.len() + s.test.len(), n);
                for &i in &s.test {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn ten_rows_five_folds() {
        let c = toy(10, |_| true);
        let plan = CvPlan { repetitions: 1, time_bins: 1, ..Default::default() };
        let splits = make_folds(&c, &plan).unwrap();
        assert_eq!(splits.len(), 5);
        assert!(splits.iter().all(|s| s.test.len() == 2));
        check_partition(&splits, 10);
        assert_eq!(splits, make_folds(&c, &plan).unwrap());
        assert!(make_folds(&toy(4, |_| true), &plan).is_err());
    }

    #[test]
    fn event_proportion_balanced() {
        let c = toy(100, |i| i % 5 < 2);
        let splits = make_folds(&c, &CvPlan::default()).unwrap();
        check_partition(&splits, 100);
        for s in &splits {
            let events = s.test.iter().filter(|&&i| c.outcomes()[i].event).count() as f64;
            assert!((events - 0.4 * s.test.len() as f64).abs() <= 1.0);
        }
    }

    proptest! {
        #[test]
        fn folds_partition(n in 5usize..60, folds in 2usize..6, seed in 0u64..50) {
            prop_assume!(n >= folds);
            let c = toy(n, |i| (i * 7 + seed as usize) % 3 != 0);
            let plan = CvPlan { folds, repetitions: 2, seed, ..Default::default() };
            let splits = make_folds(&c, &plan).unwrap();
            prop_assert_eq!(splits.len(), 2 * folds);
            check_partition(&splits, n);
        }

        #[test]
        fn bh_monotone_and_bounded(p in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            let adj = benjamini_hochberg(&p).unwrap();
            for i in 0..p.len() {
                prop_assert!(adj[i] >= p[i] && adj[i] <= 1.0);
                for j in 0..p.len() {
                    if p[i] < p[j] {
                        prop_assert!(adj[i] <= adj[j]);
                    }
                }
            }
        }

        #[test]
        fn wilcoxon_exact_matches_enumeration(d in prop::collection::vec(-5i32..=5, 5..11)) {
            let deltas: Vec<f64> = d.iter().map(|&v| f64::from(v)).collect();
            prop_assume!(deltas.iter().filter(|v| **v != 0.0).count() >= 5);
            let w = wilcoxon_signed_rank(&deltas).unwrap();
            let oracle = enumerate_p(&deltas);
            prop_assert!((w.p_value - oracle).abs() < 1e-12);
        }
    }

    /// Two-sided p by listing all sign assignments of the nonzero |deltas|.
    fn enumerate_p(deltas: &[f64]) -> f64 {
        let v: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
        let n = v.len();
        let ranks: Vec<f64> = (0..n)
            .map(|i| {
                let less = v.iter().filter(|x| x.abs() < v[i].abs()).count() as f64;
                let eq = v.iter().filter(|x| x.abs() == v[i].abs()).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect();
        let total: f64 = ranks.iter().sum();
        let wp: f64 = (0..n).filter(|&i| v[i] > 0.0).map(|i| ranks[i]).sum();
        let obs = wp.min(total - wp);
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= obs + 1e-9 {
                hits += 1;
            }
        }
        (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn wilcoxon_all_positive() {
        let deltas: Vec<f64> = (1..=15).map(|i| f64::from(i) * 0.01).collect();
        let w = wilcoxon_signed_rank(&deltas).unwrap();
        assert_eq!(w.statistic(), 0.0);
        assert!(w.p_value < 0.001);
        assert!(w.exact);
    }

    #[test]
    fn wilcoxon_symmetric_pairs() {
        let w = wilcoxon_signed_rank(&[1.0, -1.0, 2.0, -2.0, 3.0, -3.0]).unwrap();
        assert_eq!(w.p_value, 1.0);
        assert!(wilcoxon_signed_rank(&[0.0; 6]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0, 2.0, 0.0]).is_err());
    }

    #[test]
    fn wilcoxon_six_by_hand() {
        // |d| ranks: 0.5→1, 1→2, 2→3.5, 2→3.5, 3→5, 4→6; negatives at ranks 2 and 5
        let d = [2.0, -1.0, 0.5, 4.0, -3.0, 2.0];
        let w = wilcoxon_signed_rank(&d).unwrap();
        assert_eq!(w.w_minus, 7.0);
        assert_eq!(w.w_plus, 14.0);
        assert!((w.p_value - enumerate_p(&d)).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_large_sample_normal() {
        let d: Vec<f64> = (1..=40).map(|i| if i % 4 == 0 { -f64::from(i) } else { f64::from(i) }).collect();
        let w = wilcoxon_signed_rank(&d).unwrap();
        assert!(!w.exact);
        // W− = 4+8+…+40 = 220; mean 410; var 40·41·81/24
        assert_eq!(w.w_minus, 220.0);
        let z = (410.0f64 - 220.0 - 0.5) / (40.0f64 * 41.0 * 81.0 / 24.0).sqrt();
        assert_abs_diff_eq!(w.p_value, erfc(z / std::f64::consts::SQRT_2), epsilon = 1e-14);
    }

    #[test]
    fn bh_by_hand() {
        assert_eq!(benjamini_hochberg(&[0.2]).unwrap(), vec![0.2]);
        let adj = benjamini_hochberg(&[0.01, 0.02, 0.03]).unwrap();
        for v in adj {
            assert_abs_diff_eq!(v, 0.03, epsilon = 1e-15);
        }
        assert_eq!(benjamini_hochberg(&[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        assert!(benjamini_hochberg(&[1.2]).is_err());
    }

    #[test]
    fn gap_and_csv_round_trip() {
        let mk = |model: &str, rep, fold, tr, te| ResultRow {
            model: model.into(),
            family: "CoxNet".into(),
            repetition: rep,
            fold,
            train: FoldMetrics { c_index: tr, ibs_early: 0.1, ibs_late: f64::NAN },
            test: FoldMetrics { c_index: te, ibs_early: 0.2, ibs_late: 0.3 },
            error: None,
        };
        let table = ResultTable {
            rows: vec![mk("CoxNet", 0, 0, 0.9, 0.6), mk("CoxNet", 0, 1, 0.8, 0.7), mk("CoxNet", 0, 2, 0.7, f64::NAN)],
        };
        assert_abs_diff_eq!(generalization_gap(&table, "CoxNet").unwrap(), 0.2, epsilon = 1e-12);
        assert!(generalization_gap(&table, "RSF").is_err());
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let back = ResultTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.rows.len(), 3);
        assert_eq!(back.rows[1].test.c_index, 0.7);
        assert!(back.rows[2].test.c_index.is_nan());
        assert!(back.rows[0].train.ibs_late.is_nan());
    }
}
