//! Multimodal cohorts: a feature matrix with missing cells, the partition of
//! its columns into sources, and right-censored outcomes.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MsbError, Result};

/// Missing cells are stored as NaN.
pub const MISSING: f64 = f64::NAN;

#[inline]
pub fn is_missing(x: f64) -> bool {
    x.is_nan()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOutcome {
    pub time: f64,
    pub event: bool,
}

impl SurvivalOutcome {
    pub fn new(time: f64, event: bool) -> Self {
        Self { time, event }
    }
}

/// One modality: a named group of feature columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub id: String,
    pub name: String,
    pub columns: Vec<usize>,
}

impl Source {
    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityManifest {
    sources: Vec<Source>,
}

impl ModalityManifest {
    /// Checks that the sources partition `0..n_columns`.
    pub fn new(sources: Vec<Source>, n_columns: usize) -> Result<Self> {
        if sources.is_empty() {
            return Err(MsbError::Manifest("manifest has no sources".into()));
        }
        let mut owner: Vec<Option<usize>> = vec![None; n_columns];
        let mut ids = HashSet::new();
        for (s, src) in sources.iter().enumerate() {
            if !ids.insert(src.id.as_str()) {
                return Err(MsbError::Manifest(format!("duplicate source id '{}'", src.id)));
            }
            if src.columns.is_empty() {
                return Err(MsbError::Manifest(format!("source '{}' has no columns", src.id)));
            }
            for &c in &src.columns {
                if c >= n_columns {
                    return Err(MsbError::Manifest(format!(
                        "source '{}' references column {c} beyond {n_columns} columns",
                        src.id
                    )));
                }
                if let Some(prev) = owner[c] {
                    return Err(MsbError::Manifest(format!(
                        "column {c} assigned to both '{}' and '{}'",
                        sources[prev].id, src.id
                    )));
                }
                owner[c] = Some(s);
            }
        }
        if let Some(c) = owner.iter().position(Option::is_none) {
            return Err(MsbError::Manifest(format!("column {c} belongs to no source")));
        }
        Ok(Self { sources })
    }

    /// Consecutive blocks of the given widths, ids `S1..SK`.
    pub fn contiguous(widths: &[usize]) -> Result<Self> {
        let mut start = 0;
        let sources = widths
            .iter()
            .enumerate()
            .map(|(s, &w)| {
                let src = Source {
                    id: format!("S{}", s + 1),
                    name: format!("source {}", s + 1),
                    columns: (start..start + w).collect(),
                };
                start += w;
                src
            })
            .collect();
        Self::new(sources, start)
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn n_columns(&self) -> usize {
        self.sources.iter().map(Source::width).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    #[serde(with = "crate::serde_nan::array2")]
    features: Array2<f64>,
    column_names: Vec<String>,
    manifest: ModalityManifest,
    outcomes: Vec<SurvivalOutcome>,
    strata: Option<Vec<String>>,
}

impl Cohort {
    pub fn new(
        features: Array2<f64>,
        column_names: Vec<String>,
        manifest: ModalityManifest,
        outcomes: Vec<SurvivalOutcome>,
        strata: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, p) = features.dim();
        if n == 0 || p == 0 {
            return Err(MsbError::invalid("cohort needs at least one row and one column"));
        }
        if column_names.len() != p {
            return Err(MsbError::DimensionMismatch { expected: p, found: column_names.len() });
        }
        if manifest.n_columns() != p {
            return Err(MsbError::Manifest(format!(
                "manifest covers {} columns, matrix has {p}",
                manifest.n_columns()
            )));
        }
        if outcomes.len() != n {
            return Err(MsbError::DimensionMismatch { expected: n, found: outcomes.len() });
        }
        if let Some((i, o)) = outcomes.iter().enumerate().find(|(_, o)| !(o.time.is_finite() && o.time > 0.0)) {
            return Err(MsbError::Outcome(format!("row {i}: time {} must be finite and positive", o.time)));
        }
        if let Some(s) = &strata {
            if s.len() != n {
                return Err(MsbError::DimensionMismatch { expected: n, found: s.len() });
            }
        }
        if features.iter().any(|x| x.is_infinite()) {
            return Err(MsbError::invalid("feature matrix contains an infinite value"));
        }
        Ok(Self { features, column_names, manifest, outcomes, strata })
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_sources(&self) -> usize {
        self.manifest.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn manifest(&self) -> &ModalityManifest {
        &self.manifest
    }

    pub fn outcomes(&self) -> &[SurvivalOutcome] {
        &self.outcomes
    }

    pub fn strata(&self) -> Option<&[String]> {
        self.strata.as_deref()
    }

    pub fn n_events(&self) -> usize {
        self.outcomes.iter().filter(|o| o.event).count()
    }

    /// Columns of source `s`, in manifest order.
    pub fn source_block(&self, s: usize) -> Array2<f64> {
        self.features.select(Axis(1), &self.manifest.sources[s].columns)
    }

    /// True when every cell of source `s` is missing in row `i`.
    pub fn source_absent(&self, i: usize, s: usize) -> bool {
        self.manifest.sources[s].columns.iter().all(|&c| is_missing(self.features[[i, c]]))
    }

    pub fn subset(&self, rows: &[usize]) -> Cohort {
        Cohort {
            features: self.features.select(Axis(0), rows),
            column_names: self.column_names.clone(),
            manifest: self.manifest.clone(),
            outcomes: rows.iter().map(|&i| self.outcomes[i]).collect(),
            strata: self.strata.as_ref().map(|s| rows.iter().map(|&i| s[i].clone()).collect()),
        }
    }

    /// Replaces the feature matrix, keeping everything else.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Cohort> {
        if features.dim() != self.features.dim() {
            return Err(MsbError::DimensionMismatch { expected: self.features.ncols(), found: features.ncols() });
        }
        Ok(Cohort { features, ..self.clone() })
    }
}

/// Per-row, per-source missingness.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingnessProfile {
    /// n × S fraction of missing cells within each source.
    pub rates: Array2<f64>,
    /// Fraction of missing cells per source over the whole cohort.
    pub source_rates: Vec<f64>,
    /// n × S block indicator: rate ≥ 0.5.
    pub indicators: Array2<u8>,
}

pub const BLOCK_THRESHOLD: f64 = 0.5;

pub fn missingness_profile(cohort: &Cohort) -> MissingnessProfile {
    let n = cohort.n_rows();
    let sources = cohort.manifest().sources();
    let mut rates = Array2::zeros((n, sources.len()));
    let mut counts = vec![0usize; sources.len()];
    for (s, src) in sources.iter().enumerate() {
        for i in 0..n {
            let missing = src.columns.iter().filter(|&&c| is_missing(cohort.features[[i, c]])).count();
            counts[s] += missing;
            rates[[i, s]] = missing as f64 / src.width() as f64;
        }
    }
    let source_rates = sources.iter().zip(&counts).map(|(src, &c)| c as f64 / (src.width() * n) as f64).collect();
    let indicators = rates.mapv(|r| u8::from(r >= BLOCK_THRESHOLD));
    MissingnessProfile { rates, source_rates, indicators }
}

/// Stable row order grouping identical block-indicator patterns,
/// lexicographic in the S-bit pattern.
pub fn sort_by_block_pattern(cohort: &Cohort) -> Vec<usize> {
    let profile = missingness_profile(cohort);
    let mut order: Vec<usize> = (0..cohort.n_rows()).collect();
    order.sort_by(|&a, &b| profile.indicators.row(a).iter().cmp(profile.indicators.row(b).iter()));
    order
}

/// Names of the outcome (and optional stratum) columns in a features CSV.
#[derive(Debug, Clone)]
pub struct CsvLayout {
    pub time_col: String,
    pub event_col: String,
    pub strata_col: Option<String>,
}

impl Default for CsvLayout {
    fn default() -> Self {
        Self { time_col: "time".into(), event_col: "event".into(), strata_col: None }
    }
}

fn parse_cell(raw: &str) -> f64 {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") {
        return MISSING;
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        _ => MISSING,
    }
}

/// Reads a features CSV and its manifest (`column_name,source_id,source_name`).
pub fn load_cohort(
    features_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
    layout: &CsvLayout,
) -> Result<Cohort> {
    let mut rdr = csv::Reader::from_path(features_path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MsbError::Outcome(format!("column '{name}' not found in features file")))
    };
    let time_idx = find(&layout.time_col)?;
    let event_idx = find(&layout.event_col)?;
    let strata_idx = layout.strata_col.as_deref().map(find).transpose()?;

    // source id -> (name, columns) in manifest order
    let mut mrdr = csv::Reader::from_path(manifest_path)?;
    let mut source_order: Vec<String> = Vec::new();
    let mut source_names: HashMap<String, String> = HashMap::new();
    let mut column_source: HashMap<String, String> = HashMap::new();
    for rec in mrdr.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(MsbError::Manifest(format!(
                "manifest line {} needs column_name,source_id,source_name",
                rec.position().map_or(0, |p| p.line())
            )));
        }
        let (col, sid, sname) = (rec[0].trim(), rec[1].trim(), rec[2].trim());
        if column_source.insert(col.to_string(), sid.to_string()).is_some() {
            return Err(MsbError::Manifest(format!("column '{col}' assigned more than once")));
        }
        if !source_names.contains_key(sid) {
            source_order.push(sid.to_string());
            source_names.insert(sid.to_string(), sname.to_string());
        }
    }

    let feature_cols: Vec<usize> =
        (0..header.len()).filter(|&j| j != time_idx && j != event_idx && Some(j) != strata_idx).collect();
    let mut column_names = Vec::with_capacity(feature_cols.len());
    let mut columns_by_source: HashMap<&str, Vec<usize>> = HashMap::new();
    for (k, &j) in feature_cols.iter().enumerate() {
        let name = &header[j];
        let sid = column_source
            .get(name)
            .ok_or_else(|| MsbError::Manifest(format!("column '{name}' is missing from the manifest")))?;
        columns_by_source.entry(sid.as_str()).or_default().push(k);
        column_names.push(name.clone());
    }
    if let Some(extra) = column_source.keys().find(|c| !column_names.contains(c)) {
        return Err(MsbError::Manifest(format!("manifest column '{extra}' not present in data")));
    }
    let sources = source_order
        .iter()
        .map(|sid| Source {
            id: sid.clone(),
            name: source_names[sid].clone(),
            columns: columns_by_source.remove(sid.as_str()).unwrap_or_default(),
        })
        .collect();
    let manifest = ModalityManifest::new(sources, feature_cols.len())?;

    let mut data = Vec::new();
    let mut outcomes = Vec::new();
    let mut strata = strata_idx.map(|_| Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(MsbError::invalid(format!("row {row} has {} fields, header has {}", rec.len(), header.len())));
        }
        let time: f64 = rec[time_idx]
            .trim()
            .parse()
            .map_err(|_| MsbError::Outcome(format!("row {row}: unparseable time '{}'", &rec[time_idx])))?;
        if !time.is_finite() || time < 0.0 {
            return Err(MsbError::Outcome(format!("row {row}: negative or non-finite time {time}")));
        }
        let event = match rec[event_idx].trim() {
            "1" | "1.0" | "true" | "TRUE" => true,
            "0" | "0.0" | "false" | "FALSE" => false,
            other => return Err(MsbError::Outcome(format!("row {row}: event indicator '{other}' is not 0/1"))),
        };
        outcomes.push(SurvivalOutcome { time, event });
        if let (Some(idx), Some(st)) = (strata_idx, strata.as_mut()) {
            st.push(rec[idx].trim().to_string());
        }
        data.extend(feature_cols.iter().map(|&j| parse_cell(&rec[j])));
    }
    let n = outcomes.len();
    let features =
        Array2::from_shape_vec((n, feature_cols.len()), data).map_err(|e| MsbError::invalid(e.to_string()))?;
    Cohort::new(features, column_names, manifest, outcomes, strata)
}

/// Writes the cohort as a features CSV (outcome columns first) and a manifest CSV.
pub fn write_cohort(
    cohort: &Cohort,
    features_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
    layout: &CsvLayout,
) -> Result<()> {
    let mut w = csv::Writer::from_path(features_path)?;
    let mut header = vec![layout.time_col.clone(), layout.event_col.clone()];
    if let Some(sc) = &layout.strata_col {
        header.push(sc.clone());
    }
    header.extend(cohort.column_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..cohort.n_rows() {
        let o = cohort.outcomes[i];
        let mut rec = vec![format!("{}", o.time), if o.event { "1".into() } else { "0".into() }];
        if layout.strata_col.is_some() {
            rec.push(cohort.strata.as_ref().map_or_else(String::new, |s| s[i].clone()));
        }
        rec.extend(cohort.features.row(i).iter().map(
            |&x| {
                if is_missing(x) {
                    "NA".to_string()
                } else {
                    format!("{x}")
                }
            },
        ));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut m = csv::Writer::from_path(manifest_path)?;
    m.write_record(["column_name", "source_id", "source_name"])?;
    for src in cohort.manifest.sources() {
        for &c in &src.columns {
            m.write_record([cohort.column_names[c].as_str(), src.id.as_str(), src.name.as_str()])?;
        }
    }
    m.flush()?;
    Ok(())
}
