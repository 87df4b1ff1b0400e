//! Multimodality stacking (MSB).
//!
//! Training runs in two stages. The base stage trains every (source, model)
//! learner with inner cross-validation, collecting out-of-fold risk scores,
//! then refits each learner on all rows that observe the source. The
//! stacking stage turns those scores into the matrix Ẑ, applies the variant's
//! treatment of missing cells, optionally appends per-source missingness
//! rates, and fits the meta-learner. A [`BaseStage`] can feed several
//! stacking stages, which is how the naive (resubstitution) stack and
//! multiple meta-learners share one expensive base fit.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{is_missing, missingness_profile, Cohort, ModalityManifest, SurvivalOutcome};
use crate::error::{MsbError, Result};
use crate::impute::{KnnImputer, DEFAULT_K};
use crate::learners::rsf::{route_missing, MissingRouting};
use crate::learners::{
    event_stratified_folds, FittedLearner, LearnerKind, LearnerSpec, MIN_TRAINING_EVENTS, MIN_TRAINING_ROWS,
};
use crate::seeds;
use crate::survival::{censoring_km, StepCurve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// kNN-impute the raw feature matrix before anything else.
    Imp,
    /// kNN-impute the score matrix.
    Plain,
    /// Leave score cells missing; the forest meta-learner routes them.
    Mia,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Imp, Variant::Plain, Variant::Mia];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Imp => "imp",
            Variant::Plain => "plain",
            Variant::Mia => "mia",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = MsbError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "imp" => Ok(Variant::Imp),
            "plain" => Ok(Variant::Plain),
            "mia" => Ok(Variant::Mia),
            other => Err(MsbError::config(format!("unknown variant '{other}' (expected imp, plain or mia)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsbConfig {
    pub variant: Variant,
    pub include_indicator: bool,
    pub base_specs: Vec<LearnerSpec>,
    pub meta_spec: LearnerSpec,
    pub inner_folds: usize,
    /// Neighbours for every kNN imputer in the pipeline.
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for MsbConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Plain,
            include_indicator: true,
            base_specs: LearnerKind::ALL.iter().map(|&k| LearnerSpec::new(k)).collect(),
            meta_spec: LearnerSpec::new(LearnerKind::Cwgb),
            inner_folds: 5,
            knn_k: DEFAULT_K,
            seed: 0,
        }
    }
}

impl MsbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_specs.is_empty() {
            return Err(MsbError::config("at least one base learner is required"));
        }
        if self.inner_folds < 2 {
            return Err(MsbError::config("inner folds must be ≥ 2"));
        }
        if self.knn_k == 0 {
            return Err(MsbError::config("knn k must be ≥ 1"));
        }
        if self.variant == Variant::Mia && self.meta_spec.kind != LearnerKind::Rsf {
            return Err(MsbError::config("the mia variant needs the rsf meta-learner"));
        }
        for spec in self.base_specs.iter().chain([&self.meta_spec]) {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Identifies one column of Ẑ: a base model's score on a source, or the
/// source's missingness rate when `model` is `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLabel {
    pub source: String,
    pub model: Option<LearnerKind>,
}

impl ColumnLabel {
    pub fn model_name(&self) -> &'static str {
        self.model.map_or("missing_rate", LearnerKind::as_str)
    }
}

impl fmt::Display for ColumnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.source, self.model_name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskScoreMatrix {
    pub values: Array2<f64>,
    pub labels: Vec<ColumnLabel>,
}

impl RiskScoreMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.values.ncols()
    }

    pub fn score_columns(&self) -> usize {
        self.labels.iter().filter(|l| l.model.is_some()).count()
    }
}

/// Which predictions make up the training Ẑ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stacking {
    OutOfFold,
    /// Resubstitution predictions of the refit learners (naive stacking).
    InSample,
}

/// Learners and imputer trained for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModels {
    /// Position of the source in the manifest.
    pub index: usize,
    pub id: String,
    pub imputer: KnnImputer,
    /// One per base spec, in config order.
    pub learners: Vec<FittedLearner>,
}

/// A source excluded from stacking, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSource {
    pub id: String,
    pub reason: String,
}

/// Fold bookkeeping for one Ẑ column, recorded while the scores are made.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnAudit {
    pub label: ColumnLabel,
    /// Cohort rows handed to each inner-fold fit.
    pub fold_training_rows: Vec<Vec<usize>>,
    /// Fold whose model produced each row's score; `None` for rows without
    /// the source.
    pub producer: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LeakageAudit {
    pub columns: Vec<ColumnAudit>,
}

impl LeakageAudit {
    /// Rows whose out-of-fold score came from a model that saw them, as
    /// (column, row) pairs.
    pub fn violations(&self) -> Vec<(usize, usize)> {
        let mut bad = Vec::new();
        for (c, col) in self.columns.iter().enumerate() {
            for (i, producer) in col.producer.iter().enumerate() {
                if let Some(f) = producer {
                    if col.fold_training_rows[*f].contains(&i) {
                        bad.push((c, i));
                    }
                }
            }
        }
        bad
    }
}

/// Output of the base stage, shared by any number of stacking stages.
#[derive(Debug, Clone)]
pub struct BaseStage {
    variant_imp: bool,
    knn_k: usize,
    manifest: ModalityManifest,
    outcomes: Vec<SurvivalOutcome>,
    full_imputer: Option<KnnImputer>,
    sources: Vec<SourceModels>,
    dropped: Vec<DroppedSource>,
    /// n × S missingness rates of the raw training features.
    rates: Array2<f64>,
    oof: Array2<f64>,
    in_sample: Array2<f64>,
    score_labels: Vec<ColumnLabel>,
    audit: LeakageAudit,
}

struct Job {
    slot: usize,
    model: usize,
    /// `None` is the refit on all available rows.
    fold: Option<usize>,
}

impl BaseStage {
    /// Runs the base stage. Only `variant == imp` changes the result, so one
    /// stage serves both `plain` and `mia`.
    pub fn fit(cohort: &Cohort, config: &MsbConfig) -> Result<Self> {
        config.validate()?;
        let n = cohort.n_rows();
        let k = config.inner_folds;
        if n < k {
            return Err(MsbError::invalid(format!("{n} rows cannot fill {k} inner folds")));
        }
        let y = cohort.outcomes();
        let all_folds = event_stratified_folds(y, k, &mut seeds::rng(config.seed, "inner-folds", &[u64::MAX]));
        if let Some(reason) = fold_shortfall(y, &all_folds, k) {
            return Err(MsbError::InsufficientEvents(reason));
        }
        let rates = missingness_profile(cohort).rates;

        let full_imputer = if config.variant == Variant::Imp {
            Some(KnnImputer::fit(cohort.features().view(), config.knn_k)?.with_fallback(0.0))
        } else {
            None
        };
        let x = match &full_imputer {
            Some(imp) => imp.transform(cohort.features().view())?,
            None => cohort.features().clone(),
        };

        // per source: available rows, imputed block, fold labels
        struct Prepared {
            index: usize,
            rows: Vec<usize>,
            block: Array2<f64>,
            folds: Vec<usize>,
            imputer: KnnImputer,
        }
        let mut prepared = Vec::new();
        let mut dropped = Vec::new();
        for (s, src) in cohort.manifest().sources().iter().enumerate() {
            let raw = x.select(Axis(1), &src.columns);
            let rows: Vec<usize> = (0..n).filter(|&i| raw.row(i).iter().any(|v| !is_missing(*v))).collect();
            let sub_y: Vec<SurvivalOutcome> = rows.iter().map(|&i| y[i]).collect();
            let folds = event_stratified_folds(&sub_y, k, &mut seeds::rng(config.seed, "inner-folds", &[s as u64]));
            if let Some(reason) = fold_shortfall(&sub_y, &folds, k) {
                warn!("source {} dropped: {reason}", src.id);
                dropped.push(DroppedSource { id: src.id.clone(), reason });
                continue;
            }
            let available = raw.select(Axis(0), &rows);
            let imputer = KnnImputer::fit(available.view(), config.knn_k)?.with_fallback(0.0);
            let block =
                if available.iter().any(|v| is_missing(*v)) { imputer.transform(available.view())? } else { available };
            prepared.push(Prepared { index: s, rows, block, folds, imputer });
        }
        if prepared.is_empty() {
            return Err(MsbError::InsufficientEvents("every source was dropped".into()));
        }

        let m_count = config.base_specs.len();
        let jobs: Vec<Job> = (0..prepared.len())
            .flat_map(|slot| {
                (0..m_count)
                    .flat_map(move |model| (0..k).map(Some).chain([None]).map(move |fold| Job { slot, model, fold }))
            })
            .collect();
        let fitted: Vec<(Vec<usize>, FittedLearner)> = jobs
            .par_iter()
            .map(|job| {
                let p = &prepared[job.slot];
                let local: Vec<usize> = (0..p.rows.len()).filter(|&r| job.fold != Some(p.folds[r])).collect();
                let xt = p.block.select(Axis(0), &local);
                let yt: Vec<SurvivalOutcome> = local.iter().map(|&r| y[p.rows[r]]).collect();
                let fold_tag = job.fold.map_or(k as u64, |f| f as u64);
                let seed = seeds::derive(config.seed, "base", &[p.index as u64, job.model as u64, fold_tag]);
                let spec = config.base_specs[job.model].clone().with_seed(seed);
                let learner = FittedLearner::fit(&spec, xt.view(), &yt)?;
                Ok((local.iter().map(|&r| p.rows[r]).collect(), learner))
            })
            .collect::<Result<_>>()?;

        let width = prepared.len() * m_count;
        let mut oof = Array2::from_elem((n, width), f64::NAN);
        let mut in_sample = Array2::from_elem((n, width), f64::NAN);
        let mut score_labels = Vec::with_capacity(width);
        let mut audit = LeakageAudit::default();
        let mut sources = Vec::with_capacity(prepared.len());
        let mut fitted = fitted.into_iter();
        for (slot, p) in prepared.into_iter().enumerate() {
            let id = cohort.manifest().sources()[p.index].id.clone();
            let mut learners = Vec::with_capacity(m_count);
            for model in 0..m_count {
                let col = slot * m_count + model;
                let label = ColumnLabel { source: id.clone(), model: Some(config.base_specs[model].kind) };
                let mut producer = vec![None; n];
                let mut fold_training_rows = Vec::with_capacity(k);
                for f in 0..k {
                    let (trained_on, learner) = fitted.next().expect("one fit per job");
                    let members: Vec<usize> = (0..p.rows.len()).filter(|&r| p.folds[r] == f).collect();
                    let risk = learner.predict_risk(p.block.select(Axis(0), &members).view())?;
                    for (&r, v) in members.iter().zip(risk) {
                        oof[[p.rows[r], col]] = v;
                        producer[p.rows[r]] = Some(f);
                    }
                    fold_training_rows.push(trained_on);
                }
                let (_, refit) = fitted.next().expect("one fit per job");
                for (&i, v) in p.rows.iter().zip(refit.predict_risk(p.block.view())?) {
                    in_sample[[i, col]] = v;
                }
                learners.push(refit);
                audit.columns.push(ColumnAudit { label: label.clone(), fold_training_rows, producer });
                score_labels.push(label);
            }
            sources.push(SourceModels { index: p.index, id, imputer: p.imputer, learners });
        }

        Ok(Self {
            variant_imp: config.variant == Variant::Imp,
            knn_k: config.knn_k,
            manifest: cohort.manifest().clone(),
            outcomes: y.to_vec(),
            full_imputer,
            sources,
            dropped,
            rates,
            oof,
            in_sample,
            score_labels,
            audit,
        })
    }

    pub fn audit(&self) -> &LeakageAudit {
        &self.audit
    }

    pub fn dropped_sources(&self) -> &[DroppedSource] {
        &self.dropped
    }

    pub fn sources(&self) -> &[SourceModels] {
        &self.sources
    }

    /// Raw training score matrix (missing cells kept) before any variant
    /// handling.
    pub fn raw_scores(&self, stacking: Stacking) -> RiskScoreMatrix {
        RiskScoreMatrix {
            values: match stacking {
                Stacking::OutOfFold => self.oof.clone(),
                Stacking::InSample => self.in_sample.clone(),
            },
            labels: self.score_labels.clone(),
        }
    }

    /// Stacking stage: variant handling, indicator columns, meta-learner.
    /// `config` must agree with the one used for the base stage on
    /// everything except the variant (within plain/mia), indicator and meta.
    pub fn finish(&self, config: &MsbConfig, stacking: Stacking) -> Result<FittedMsb> {
        config.validate()?;
        if (config.variant == Variant::Imp) != self.variant_imp {
            return Err(MsbError::config("base stage was fitted for a different imputation variant"));
        }
        let raw = match stacking {
            Stacking::OutOfFold => &self.oof,
            Stacking::InSample => &self.in_sample,
        };
        let z_imputer = match config.variant {
            Variant::Plain => Some(KnnImputer::fit(raw.view(), self.knn_k)?.with_fallback(0.0)),
            _ => None,
        };
        let scores = match &z_imputer {
            Some(imp) => imp.transform(raw.view())?,
            None => raw.clone(),
        };
        let mut labels = self.score_labels.clone();
        let z = if config.include_indicator {
            labels.extend(self.manifest.sources().iter().map(|s| ColumnLabel { source: s.id.clone(), model: None }));
            concatenate(Axis(1), &[scores.view(), self.rates.view()]).expect("row counts agree")
        } else {
            scores
        };
        let meta_spec = config.meta_spec.clone().with_seed(seeds::derive(config.seed, "meta", &[]));
        let meta = if config.variant == Variant::Mia {
            FittedLearner::fit_with_missing(&meta_spec, z.view(), &self.outcomes)?
        } else {
            FittedLearner::fit(&meta_spec, z.view(), &self.outcomes)?
        };
        let last_event_time =
            self.outcomes.iter().filter(|o| o.event).map(|o| o.time).fold(f64::NEG_INFINITY, f64::max);
        Ok(FittedMsb {
            config: config.clone(),
            stacking,
            manifest: self.manifest.clone(),
            full_imputer: self.full_imputer.clone(),
            sources: self.sources.clone(),
            dropped: self.dropped.clone(),
            z_imputer,
            labels,
            meta,
            censoring: censoring_km(&self.outcomes)?,
            last_event_time,
        })
    }
}

/// Reason a source cannot support inner cross-validation, if any.
fn fold_shortfall(y: &[SurvivalOutcome], folds: &[usize], k: usize) -> Option<String> {
    if y.len() < k {
        return Some(format!("{} rows observe it, fewer than {k} inner folds", y.len()));
    }
    for f in 0..k {
        let train: Vec<&SurvivalOutcome> = y.iter().zip(folds).filter(|(_, &g)| g != f).map(|(o, _)| o).collect();
        let events = train.iter().filter(|o| o.event).count();
        if train.len() < MIN_TRAINING_ROWS || events < MIN_TRAINING_EVENTS {
            return Some(format!(
                "inner training fold {f} has {} rows and {events} events (need {MIN_TRAINING_ROWS} and {MIN_TRAINING_EVENTS})",
                train.len()
            ));
        }
        if train.iter().all(|o| o.time == train[0].time) {
            return Some(format!("inner training fold {f} has a single distinct time"));
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedMsb {
    config: MsbConfig,
    stacking: Stacking,
    manifest: ModalityManifest,
    full_imputer: Option<KnnImputer>,
    sources: Vec<SourceModels>,
    dropped: Vec<DroppedSource>,
    z_imputer: Option<KnnImputer>,
    labels: Vec<ColumnLabel>,
    meta: FittedLearner,
    /// Kaplan–Meier curve of training censoring, for IPCW weights.
    censoring: StepCurve,
    last_event_time: f64,
}

pub fn train_msb(cohort: &Cohort, config: &MsbConfig) -> Result<FittedMsb> {
    BaseStage::fit(cohort, config)?.finish(config, Stacking::OutOfFold)
}

/// Like [`train_msb`], also returning the fold bookkeeping of Ẑ.
pub fn train_msb_audited(cohort: &Cohort, config: &MsbConfig) -> Result<(FittedMsb, LeakageAudit)> {
    let base = BaseStage::fit(cohort, config)?;
    let model = base.finish(config, Stacking::OutOfFold)?;
    Ok((model, base.audit))
}

pub fn train_naive_stack(cohort: &Cohort, config: &MsbConfig) -> Result<FittedMsb> {
    BaseStage::fit(cohort, config)?.finish(config, Stacking::InSample)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsbPrediction {
    pub risk: Vec<f64>,
    pub survival: Vec<StepCurve>,
}

impl FittedMsb {
    pub fn config(&self) -> &MsbConfig {
        &self.config
    }

    pub fn stacking(&self) -> Stacking {
        self.stacking
    }

    pub fn manifest(&self) -> &ModalityManifest {
        &self.manifest
    }

    pub fn sources(&self) -> &[SourceModels] {
        &self.sources
    }

    pub fn dropped_sources(&self) -> &[DroppedSource] {
        &self.dropped
    }

    pub fn labels(&self) -> &[ColumnLabel] {
        &self.labels
    }

    pub fn meta(&self) -> &FittedLearner {
        &self.meta
    }

    pub fn censoring_curve(&self) -> &StepCurve {
        &self.censoring
    }

    pub fn last_event_time(&self) -> f64 {
        self.last_event_time
    }

    pub fn n_base_learners(&self) -> usize {
        self.sources.iter().map(|s| s.learners.len()).sum()
    }

    /// Raw per-(source, model) scores for a cohort, missing where a row
    /// lacks the source.
    fn raw_scores(&self, cohort: &Cohort) -> Result<Array2<f64>> {
        if cohort.manifest() != &self.manifest {
            return Err(MsbError::Manifest("cohort manifest differs from the one used in training".into()));
        }
        let x = match &self.full_imputer {
            Some(imp) => imp.transform(cohort.features().view())?,
            None => cohort.features().clone(),
        };
        let n = cohort.n_rows();
        let m_count = self.config.base_specs.len();
        let mut z = Array2::from_elem((n, self.sources.len() * m_count), f64::NAN);
        for (slot, src) in self.sources.iter().enumerate() {
            let raw = x.select(Axis(1), &self.manifest.sources()[src.index].columns);
            let rows: Vec<usize> = (0..n).filter(|&i| raw.row(i).iter().any(|v| !is_missing(*v))).collect();
            if rows.is_empty() {
                continue;
            }
            let block = src.imputer.transform(raw.select(Axis(0), &rows).view())?;
            for (m, learner) in src.learners.iter().enumerate() {
                for (&i, v) in rows.iter().zip(learner.predict_risk(block.view())?) {
                    z[[i, slot * m_count + m]] = v;
                }
            }
        }
        Ok(z)
    }

    /// Ẑ for a cohort after variant handling and indicator columns, ready
    /// for the meta-learner.
    pub fn score_matrix(&self, cohort: &Cohort) -> Result<RiskScoreMatrix> {
        let raw = self.raw_scores(cohort)?;
        let scores = match &self.z_imputer {
            Some(imp) => imp.transform(raw.view())?,
            None => raw,
        };
        let values = if self.config.include_indicator {
            let rates = missingness_profile(cohort).rates;
            concatenate(Axis(1), &[scores.view(), rates.view()]).expect("row counts agree")
        } else {
            scores
        };
        Ok(RiskScoreMatrix { values, labels: self.labels.clone() })
    }

    pub fn meta_risk(&self, z: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.meta.predict_risk(z)
    }

    pub fn meta_survival(&self, z: ArrayView2<f64>, grid: &[f64]) -> Result<Vec<StepCurve>> {
        self.meta.predict_survival(z, grid)
    }

    pub fn predict_risk(&self, cohort: &Cohort) -> Result<Vec<f64>> {
        let z = self.score_matrix(cohort)?;
        self.meta_risk(z.values.view())
    }

    pub fn predict(&self, cohort: &Cohort, grid: &[f64]) -> Result<MsbPrediction> {
        let z = self.score_matrix(cohort)?;
        Ok(MsbPrediction {
            risk: self.meta_risk(z.values.view())?,
            survival: self.meta_survival(z.values.view(), grid)?,
        })
    }
}

pub fn predict_msb(model: &FittedMsb, cohort: &Cohort, grid: &[f64]) -> Result<MsbPrediction> {
    model.predict(cohort, grid)
}

/// Best way to route missing values at a candidate threshold, by log-rank
/// statistic. Ties prefer missing-left, then missing-right.
pub fn split_mia(values: &[f64], threshold: f64, outcomes: &[SurvivalOutcome]) -> Result<(MissingRouting, f64)> {
    route_missing(values, threshold, outcomes)?
        .best()
        .ok_or_else(|| MsbError::Undefined("no routing of missing values yields a valid log-rank split".into()))
}

pub const ARTIFACT_FORMAT: &str = "msb-model";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Artifact<T> {
    format: String,
    version: u32,
    model: T,
}

impl FittedMsb {
    pub fn save(&self, path: &Path) -> Result<()> {
        let out = BufWriter::new(File::create(path)?);
        let artifact = Artifact { format: ARTIFACT_FORMAT.to_string(), version: ARTIFACT_VERSION, model: self };
        serde_json::to_writer(out, &artifact)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let artifact: Artifact<FittedMsb> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if artifact.format != ARTIFACT_FORMAT || artifact.version != ARTIFACT_VERSION {
            return Err(MsbError::invalid(format!(
                "unsupported model artifact {} v{} (expected {ARTIFACT_FORMAT} v{ARTIFACT_VERSION})",
                artifact.format, artifact.version
            )));
        }
        Ok(artifact.model)
    }
}
