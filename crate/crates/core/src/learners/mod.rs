//! Survival base learners behind one interface: elastic-net Cox (CoxNet),
//! random survival forest (RSF) and component-wise gradient boosting (CWGB).
//!
//! Every fitted learner emits a risk score (larger = earlier expected event)
//! and a survival curve per row.

pub mod cox;
pub mod coxnet;
pub mod cwgb;
pub mod rsf;
pub(crate) mod split;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cohort::SurvivalOutcome;
use crate::error::{MsbError, Result};
use crate::survival::StepCurve;

pub use coxnet::{CoxNetModel, CoxNetParams};
pub use cwgb::{CwgbModel, CwgbParams};
pub use rsf::{RsfModel, RsfParams};

pub const MIN_TRAINING_ROWS: usize = 10;
pub const MIN_TRAINING_EVENTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    CoxNet,
    Rsf,
    Cwgb,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 3] = [LearnerKind::CoxNet, LearnerKind::Rsf, LearnerKind::Cwgb];

    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::CoxNet => "coxnet",
            LearnerKind::Rsf => "rsf",
            LearnerKind::Cwgb => "cwgb",
        }
    }

    /// Display name used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            LearnerKind::CoxNet => "CoxNet",
            LearnerKind::Rsf => "RSF",
            LearnerKind::Cwgb => "CWGB",
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerKind {
    type Err = MsbError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coxnet" => Ok(LearnerKind::CoxNet),
            "rsf" => Ok(LearnerKind::Rsf),
            "cwgb" | "cwxgb" => Ok(LearnerKind::Cwgb),
            other => Err(MsbError::config(format!("unknown learner '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub coxnet: CoxNetParams,
    pub rsf: RsfParams,
    pub cwgb: CwgbParams,
    pub seed: u64,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        Self { kind, coxnet: CoxNetParams::default(), rsf: RsfParams::default(), cwgb: CwgbParams::default(), seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LearnerKind::CoxNet => self.coxnet.validate(),
            LearnerKind::Rsf => self.rsf.validate(),
            LearnerKind::Cwgb => self.cwgb.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedLearner {
    CoxNet(CoxNetModel),
    Rsf(RsfModel),
    Cwgb(CwgbModel),
}

fn check_outcomes(n: usize, outcomes: &[SurvivalOutcome]) -> Result<()> {
    if outcomes.len() != n {
        return Err(MsbError::DimensionMismatch { expected: n, found: outcomes.len() });
    }
    if n < MIN_TRAINING_ROWS {
        return Err(MsbError::invalid(format!("need at least {MIN_TRAINING_ROWS} training rows, got {n}")));
    }
    let events = outcomes.iter().filter(|o| o.event).count();
    if events < MIN_TRAINING_EVENTS {
        return Err(MsbError::InsufficientEvents(format!(
            "{events} observed events, need at least {MIN_TRAINING_EVENTS}"
        )));
    }
    let t0 = outcomes[0].time;
    if outcomes.iter().all(|o| o.time == t0) {
        return Err(MsbError::invalid("all outcome times are identical"));
    }
    Ok(())
}

impl FittedLearner {
    /// Fits on a complete matrix.
    pub fn fit(spec: &LearnerSpec, x: ArrayView2<f64>, y: &[SurvivalOutcome]) -> Result<Self> {
        spec.validate()?;
        check_outcomes(x.nrows(), y)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MsbError::invalid("training matrix has a non-finite entry"));
        }
        Self::fit_checked(spec, x, y)
    }

    /// Fits a forest whose splits route missing values (MIA). Only valid for
    /// [`LearnerKind::Rsf`].
    pub fn fit_with_missing(spec: &LearnerSpec, x: ArrayView2<f64>, y: &[SurvivalOutcome]) -> Result<Self> {
        if spec.kind != LearnerKind::Rsf {
            return Err(MsbError::config("missing-aware fitting requires the rsf learner"));
        }
        spec.validate()?;
        check_outcomes(x.nrows(), y)?;
        if x.iter().any(|v| v.is_infinite()) {
            return Err(MsbError::invalid("training matrix has an infinite entry"));
        }
        Ok(FittedLearner::Rsf(RsfModel::fit(&spec.rsf, spec.seed, x, y, true)?))
    }

    fn fit_checked(spec: &LearnerSpec, x: ArrayView2<f64>, y: &[SurvivalOutcome]) -> Result<Self> {
        Ok(match spec.kind {
            LearnerKind::CoxNet => FittedLearner::CoxNet(CoxNetModel::fit(&spec.coxnet, spec.seed, x, y)?),
            LearnerKind::Rsf => FittedLearner::Rsf(RsfModel::fit(&spec.rsf, spec.seed, x, y, false)?),
            LearnerKind::Cwgb => FittedLearner::Cwgb(CwgbModel::fit(&spec.cwgb, x, y)?),
        })
    }

    pub fn kind(&self) -> LearnerKind {
        match self {
            FittedLearner::CoxNet(_) => LearnerKind::CoxNet,
            FittedLearner::Rsf(_) => LearnerKind::Rsf,
            FittedLearner::Cwgb(_) => LearnerKind::Cwgb,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            FittedLearner::CoxNet(m) => m.n_features(),
            FittedLearner::Rsf(m) => m.n_features(),
            FittedLearner::Cwgb(m) => m.n_features(),
        }
    }

    fn check_width(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.n_features() {
            return Err(MsbError::DimensionMismatch { expected: self.n_features(), found: x.ncols() });
        }
        Ok(())
    }

    pub fn predict_risk(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_width(x)?;
        Ok(match self {
            FittedLearner::CoxNet(m) => m.linear_predictor(x),
            FittedLearner::Rsf(m) => m.predict_risk(x),
            FittedLearner::Cwgb(m) => m.linear_predictor(x),
        })
    }

    pub fn predict_survival(&self, x: ArrayView2<f64>, grid: &[f64]) -> Result<Vec<StepCurve>> {
        self.check_width(x)?;
        if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(MsbError::invalid("survival grid must be nonempty and strictly increasing"));
        }
        Ok(match self {
            FittedLearner::CoxNet(m) => m.predict_survival(x, grid),
            FittedLearner::Rsf(m) => m.predict_survival(x, grid),
            FittedLearner::Cwgb(m) => m.predict_survival(x, grid),
        })
    }
}

/// Fold label per row: rows are shuffled within event status and dealt
/// round-robin, events first.
pub(crate) fn event_stratified_folds<R: rand::Rng>(y: &[SurvivalOutcome], k: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut fold = vec![0usize; y.len()];
    let mut counter = 0usize;
    for status in [true, false] {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i].event == status).collect();
        members.shuffle(rng);
        for i in members {
            fold[i] = counter % k;
            counter += 1;
        }
    }
    fold
}

/// Column-wise z-scoring fitted on training data; zero-variance columns keep
/// unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows() as f64;
        let means: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.sum() / n).collect();
        let scales = x
            .axis_iter(Axis(1))
            .zip(&means)
            .map(|(c, m)| {
                let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { means, scales }
    }

    pub fn identity(p: usize) -> Self {
        Self { means: vec![0.0; p], scales: vec![1.0; p] }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.means[j], self.scales[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}
