//! Synthetic multimodal survival cohorts with controllable blockwise
//! missingness.
//!
//! Features are standard normal with equicorrelation `rho` inside each
//! source. Event times follow an exponential Cox model with hazard
//! `baseline_hazard · exp(lp)`; censoring is an independent exponential
//! whose rate is tuned by bisection to hit the target censored fraction.
//! Missingness is applied after the outcomes are drawn.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::cohort::{missingness_profile, Cohort, ModalityManifest, Source, SurvivalOutcome};
use crate::error::{MsbError, Result};
use crate::kv;
use crate::seeds;
use crate::survival::StepCurve;

/// How one source's block goes missing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    None,
    /// Each row loses the block with this probability.
    Mcar(f64),
    /// Only patients of the coordinating center (drawn with this
    /// probability, shared across sources) observe the block.
    Center(f64),
    /// Missing with probability `logistic(logit(rate) + slope · z)` where
    /// `z` is the standardized true linear predictor.
    Prognostic {
        rate: f64,
        slope: f64,
    },
}

impl Mechanism {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Mechanism::None => true,
            Mechanism::Mcar(r) => (0.0..1.0).contains(&r),
            Mechanism::Center(p) => p > 0.0 && p <= 1.0,
            Mechanism::Prognostic { rate, slope } => rate > 0.0 && rate < 1.0 && slope.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(MsbError::config(format!("invalid missingness mechanism {self}")))
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mechanism::None => write!(f, "none"),
            Mechanism::Mcar(r) => write!(f, "mcar({r})"),
            Mechanism::Center(p) => write!(f, "center({p})"),
            Mechanism::Prognostic { rate, slope } => write!(f, "prognostic({rate},{slope})"),
        }
    }
}

impl FromStr for Mechanism {
    type Err = MsbError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "none" {
            return Ok(Mechanism::None);
        }
        let bad = || MsbError::config(format!("cannot parse missingness mechanism '{s}'"));
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args: Vec<f64> = rest
            .strip_suffix(')')
            .ok_or_else(bad)?
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let m = match (name.trim(), args.as_slice()) {
            ("mcar", [r]) => Mechanism::Mcar(*r),
            ("center", [p]) => Mechanism::Center(*p),
            ("prognostic", [r, k]) => Mechanism::Prognostic { rate: *r, slope: *k },
            _ => return Err(bad()),
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub n: usize,
    pub source_sizes: Vec<usize>,
    /// Sources whose first `signal_features` columns carry effect.
    pub signal_sources: Vec<usize>,
    pub signal_features: usize,
    /// Coefficient of each active feature; signs alternate.
    pub effect: f64,
    pub rho: f64,
    /// Target fraction of censored patients.
    pub censoring: f64,
    /// Per day.
    pub baseline_hazard: f64,
    pub mechanisms: Vec<Mechanism>,
    /// Probability that an individual cell of an observed block is missing.
    pub cell_missing: f64,
    pub seed: u64,
}

/// Block sizes of eight sources totalling 378 features.
pub const DEFAULT_SOURCE_SIZES: [usize; 8] = [12, 40, 60, 20, 3, 142, 38, 63];

impl Default for SimSpec {
    fn default() -> Self {
        use Mechanism::*;
        Self {
            n: 443,
            source_sizes: DEFAULT_SOURCE_SIZES.to_vec(),
            signal_sources: vec![0, 1, 4],
            signal_features: 3,
            effect: 0.35,
            rho: 0.5,
            censoring: 0.3,
            baseline_hazard: 1.0 / 200.0,
            mechanisms: vec![
                None,
                Mcar(0.2),
                Prognostic { rate: 0.3, slope: 1.0 },
                Center(0.6),
                Mcar(0.3),
                Prognostic { rate: 0.3, slope: 1.0 },
                Mcar(0.4),
                Mcar(0.3),
            ],
            cell_missing: 0.02,
            seed: 0,
        }
    }
}

impl SimSpec {
    /// A three-source cohort small enough for quick tests.
    pub fn small(seed: u64) -> Self {
        Self {
            n: 120,
            source_sizes: vec![4, 6, 5],
            signal_sources: vec![0, 1],
            signal_features: 2,
            effect: 0.6,
            mechanisms: vec![Mechanism::None, Mechanism::Mcar(0.3), Mechanism::Mcar(0.3)],
            seed,
            ..Default::default()
        }
    }

    /// Same mechanism for every source.
    pub fn with_mechanism(mut self, m: Mechanism) -> Self {
        self.mechanisms = vec![m; self.source_sizes.len()];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(MsbError::config("simulation needs n ≥ 2"));
        }
        if self.source_sizes.is_empty() || self.source_sizes.contains(&0) {
            return Err(MsbError::config("every source needs at least one feature"));
        }
        if self.mechanisms.len() != self.source_sizes.len() {
            return Err(MsbError::config(format!(
                "{} missingness mechanisms for {} sources",
                self.mechanisms.len(),
                self.source_sizes.len()
            )));
        }
        if let Some(&s) = self.signal_sources.iter().find(|&&s| s >= self.source_sizes.len()) {
            return Err(MsbError::config(format!("signal source {s} out of range")));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(MsbError::config("rho must lie in [0, 1)"));
        }
        if !(self.censoring > 0.0 && self.censoring < 1.0) {
            return Err(MsbError::config("censoring target must lie in (0, 1)"));
        }
        if !(self.baseline_hazard > 0.0) || !self.effect.is_finite() {
            return Err(MsbError::config("baseline hazard must be positive and effect finite"));
        }
        if !(0.0..1.0).contains(&self.cell_missing) {
            return Err(MsbError::config("cell missing rate must lie in [0, 1)"));
        }
        self.mechanisms.iter().try_for_each(Mechanism::validate)
    }

    /// True coefficients per source.
    pub fn coefficients(&self) -> Vec<Vec<f64>> {
        self.source_sizes
            .iter()
            .enumerate()
            .map(|(s, &w)| {
                let mut beta = vec![0.0; w];
                if self.signal_sources.contains(&s) {
                    for (j, b) in beta.iter_mut().take(self.signal_features).enumerate() {
                        *b = if j % 2 == 0 { self.effect } else { -self.effect };
                    }
                }
                beta
            })
            .collect()
    }

    /// Applies `key = value` overrides. Keys: n, seed, sizes, signal_sources,
    /// signal_features, effect, rho, censoring, baseline_hazard,
    /// cell_missing, missing (all sources) and missing.<source id or index>.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (key, value) in pairs {
            match key.as_str() {
                "n" => self.n = kv::number(key, value)?,
                "seed" => self.seed = kv::number(key, value)?,
                "sizes" => {
                    self.source_sizes = kv::list(key, value)?;
                    self.mechanisms.resize(self.source_sizes.len(), Mechanism::None);
                }
                "signal_sources" => {
                    self.signal_sources = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| source_index(s, self.source_sizes.len()))
                        .collect::<Result<_>>()?
                }
                "signal_features" => self.signal_features = kv::number(key, value)?,
                "effect" => self.effect = kv::number(key, value)?,
                "rho" => self.rho = kv::number(key, value)?,
                "censoring" => self.censoring = kv::number(key, value)?,
                "baseline_hazard" => self.baseline_hazard = kv::number(key, value)?,
                "cell_missing" => self.cell_missing = kv::number(key, value)?,
                "missing" => {
                    let m: Mechanism = value.parse()?;
                    self.mechanisms = vec![m; self.source_sizes.len()];
                }
                other => match other.strip_prefix("missing.") {
                    Some(src) => {
                        let s = source_index(src, self.source_sizes.len())?;
                        self.mechanisms[s] = value.parse()?;
                    }
                    None => return Err(MsbError::config(format!("unknown simulation key '{other}'"))),
                },
            }
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = SimSpec::default();
        spec.apply(&kv::parse(text)?)?;
        Ok(spec)
    }
}

/// Source id for position `s`: A, B, … then S27, S28, ….
pub fn source_id(s: usize) -> String {
    if s < 26 {
        char::from(b'A' + s as u8).to_string()
    } else {
        format!("S{}", s + 1)
    }
}

fn source_index(token: &str, n_sources: usize) -> Result<usize> {
    let idx = (0..n_sources).find(|&s| source_id(s).eq_ignore_ascii_case(token)).or_else(|| token.parse().ok());
    match idx {
        Some(s) if s < n_sources => Ok(s),
        _ => Err(MsbError::config(format!("unknown source '{token}'"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub linear_predictor: Vec<f64>,
    pub event_time: Vec<f64>,
    pub censor_time: Vec<f64>,
    pub baseline_hazard: f64,
    /// Rate of the exponential censoring distribution.
    pub censoring_rate: f64,
}

impl GroundTruth {
    pub fn survival(&self, i: usize, grid: &[f64]) -> StepCurve {
        let h = self.baseline_hazard * self.linear_predictor[i].exp();
        let values = grid.iter().map(|t| (-h * t).exp()).collect();
        StepCurve::new(grid.to_vec(), values, 1.0).expect("grid is increasing")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,true_risk,event_time,censor_time")?;
        for i in 0..self.linear_predictor.len() {
            writeln!(out, "{i},{:.6},{:.6},{:.6}", self.linear_predictor[i], self.event_time[i], self.censor_time[i])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub cohort: Cohort,
    pub truth: GroundTruth,
}

pub fn simulate(spec: &SimSpec) -> Result<Simulation> {
    spec.validate()?;
    let n = spec.n;
    let p: usize = spec.source_sizes.iter().sum();
    let manifest = ModalityManifest::new(
        {
            let mut start = 0;
            spec.source_sizes
                .iter()
                .enumerate()
                .map(|(s, &w)| {
                    let src = Source {
                        id: source_id(s),
                        name: format!("source {}", source_id(s)),
                        columns: (start..start + w).collect(),
                    };
                    start += w;
                    src
                })
                .collect()
        },
        p,
    )?;
    let column_names: Vec<String> =
        manifest.sources().iter().flat_map(|src| (1..=src.width()).map(move |j| format!("{}_{j}", src.id))).collect();

    let mut rng = seeds::rng(spec.seed, "sim-features", &[]);
    let mut x = Array2::zeros((n, p));
    let (a, b) = (spec.rho.sqrt(), (1.0 - spec.rho).sqrt());
    for i in 0..n {
        for src in manifest.sources() {
            let shared: f64 = StandardNormal.sample(&mut rng);
            for &c in &src.columns {
                let own: f64 = StandardNormal.sample(&mut rng);
                x[[i, c]] = a * shared + b * own;
            }
        }
    }
    let beta: Vec<f64> = spec.coefficients().concat();
    let lp: Vec<f64> = (0..n).map(|i| x.row(i).iter().zip(&beta).map(|(v, b)| v * b).sum()).collect();

    let mut rng = seeds::rng(spec.seed, "sim-outcomes", &[]);
    let event_time: Vec<f64> = lp
        .iter()
        .map(|l| {
            let e: f64 = Exp1.sample(&mut rng);
            e / (spec.baseline_hazard * l.exp())
        })
        .collect();
    let unit_censor: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
    let censoring_rate = calibrate_censoring(&event_time, &unit_censor, spec.censoring)?;
    let censor_time: Vec<f64> = unit_censor.iter().map(|e| e / censoring_rate).collect();
    let outcomes: Vec<SurvivalOutcome> =
        event_time.iter().zip(&censor_time).map(|(&t, &c)| SurvivalOutcome::new(t.min(c), t <= c)).collect();

    let (mean, sd) = mean_sd(&lp);
    let z: Vec<f64> = lp.iter().map(|l| if sd > 0.0 { (l - mean) / sd } else { 0.0 }).collect();
    let mut center_rng = seeds::rng(spec.seed, "sim-center", &[]);
    let center_u: Vec<f64> = (0..n).map(|_| center_rng.random::<f64>()).collect();
    for (s, (src, mech)) in manifest.sources().iter().zip(&spec.mechanisms).enumerate() {
        let mut rng = seeds::rng(spec.seed, "sim-missing", &[s as u64]);
        for i in 0..n {
            let u: f64 = rng.random();
            let absent = match *mech {
                Mechanism::None => false,
                Mechanism::Mcar(r) => u < r,
                Mechanism::Center(q) => center_u[i] >= q,
                Mechanism::Prognostic { rate, slope } => {
                    let logit = (rate / (1.0 - rate)).ln() + slope * z[i];
                    u < 1.0 / (1.0 + (-logit).exp())
                }
            };
            for &c in &src.columns {
                let cell: f64 = rng.random();
                if absent || cell < spec.cell_missing {
                    x[[i, c]] = f64::NAN;
                }
            }
        }
    }

    let cohort = Cohort::new(x, column_names, manifest, outcomes, None)?;
    let truth = GroundTruth {
        linear_predictor: lp,
        event_time,
        censor_time,
        baseline_hazard: spec.baseline_hazard,
        censoring_rate,
    };
    Ok(Simulation { cohort, truth })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt())
}

/// Censoring rate whose realized censored fraction is closest to `target`.
/// Row i is censored when `unit_i / rate < T_i`, so the fraction is
/// nondecreasing in the rate and bisection on log-rate applies.
fn calibrate_censoring(event_time: &[f64], unit: &[f64], target: f64) -> Result<f64> {
    let frac = |rate: f64| {
        event_time.iter().zip(unit).filter(|(&t, &e)| e / rate < t).count() as f64 / event_time.len() as f64
    };
    let (mut lo, mut hi) = (1e-12_f64, 1e12_f64);
    if frac(lo) > target || frac(hi) < target {
        return Err(MsbError::config(format!("censoring target {target} is unreachable")));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if (frac(lo) - target).abs() <= (frac(hi) - target).abs() { lo } else { hi })
}

/// Cohort summary: event rate, follow-up range and per-source missingness.
#[derive(Debug, Clone, PartialEq)]
pub struct Description {
    pub n: usize,
    pub events: usize,
    pub event_rate: f64,
    pub follow_up_min: f64,
    pub follow_up_max: f64,
    pub sources: Vec<SourceSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSummary {
    pub id: String,
    pub width: usize,
    /// Fraction of missing cells.
    pub missing_rate: f64,
    /// Fraction of rows whose block indicator is set.
    pub block_missing_rate: f64,
}

pub fn describe(cohort: &Cohort) -> Description {
    let profile = missingness_profile(cohort);
    let n = cohort.n_rows();
    let times = cohort.outcomes().iter().map(|o| o.time);
    let sources = cohort
        .manifest()
        .sources()
        .iter()
        .enumerate()
        .map(|(s, src)| SourceSummary {
            id: src.id.clone(),
            width: src.width(),
            missing_rate: profile.source_rates[s],
            block_missing_rate: profile.indicators.column(s).iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64,
        })
        .collect();
    Description {
        n,
        events: cohort.n_events(),
        event_rate: cohort.n_events() as f64 / n as f64,
        follow_up_min: times.clone().fold(f64::INFINITY, f64::min),
        follow_up_max: times.fold(f64::NEG_INFINITY, f64::max),
        sources,
    }
}

impl Description {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "source,width,missing_rate,block_missing_rate")?;
        for s in &self.sources {
            writeln!(out, "{},{},{:.6},{:.6}", s.id, s.width, s.missing_rate, s.block_missing_rate)?;
        }
        Ok(())
    }
}

impl fmt::Display for Description {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "patients: {}", self.n)?;
        writeln!(f, "events: {} ({:.1}%)", self.events, 100.0 * self.event_rate)?;
        writeln!(f, "follow-up: {:.1} to {:.1}", self.follow_up_min, self.follow_up_max)?;
        for s in &self.sources {
            writeln!(
                f,
                "source {:<4} {:>4} features  missing cells {:>5.1}%  missing blocks {:>5.1}%",
                s.id,
                s.width,
                100.0 * s.missing_rate,
                100.0 * s.block_missing_rate
            )?;
        }
        Ok(())
    }
}
