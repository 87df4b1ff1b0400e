//! NaN-aware k-nearest-neighbour imputation.
//!
//! Distances ignore coordinates missing in either row and rescale the sum of
//! squares by `p / #shared` so rows observed on fewer coordinates are not
//! artificially close. A missing cell is replaced by the uniform mean of the
//! `k` nearest reference rows that observe that column; with no such row the
//! column mean is used.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::is_missing;
use crate::error::{MsbError, Result};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnImputer {
    k: usize,
    #[serde(with = "crate::serde_nan::array2")]
    reference: Array2<f64>,
    /// NaN for columns with no observed training value.
    #[serde(with = "crate::serde_nan::vec")]
    column_means: Vec<f64>,
    fallback: Option<f64>,
}

/// NaN-scaled Euclidean distance; infinite when no coordinate is shared.
pub fn nan_euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut shared = 0usize;
    let mut ss = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if !is_missing(x) && !is_missing(y) {
            shared += 1;
            ss += (x - y) * (x - y);
        }
    }
    if shared == 0 {
        f64::INFINITY
    } else {
        (a.len() as f64 / shared as f64 * ss).sqrt()
    }
}

impl KnnImputer {
    pub fn fit(x: ArrayView2<f64>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(MsbError::config("kNN imputer needs k ≥ 1"));
        }
        if x.nrows() == 0 {
            return Err(MsbError::Empty("imputer training matrix"));
        }
        if x.iter().all(|v| is_missing(*v)) {
            return Err(MsbError::Imputation("training matrix has no observed value".into()));
        }
        let column_means = x
            .axis_iter(Axis(1))
            .map(|col| {
                let (sum, cnt) =
                    col.iter().filter(|v| !is_missing(**v)).fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
                if cnt == 0 {
                    f64::NAN
                } else {
                    sum / cnt as f64
                }
            })
            .collect();
        Ok(Self { k, reference: x.to_owned(), column_means, fallback: None })
    }

    /// Value used for columns that were entirely missing at fit time.
    pub fn with_fallback(mut self, value: f64) -> Self {
        self.fallback = Some(value);
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_columns(&self) -> usize {
        self.reference.ncols()
    }

    pub fn column_means(&self) -> &[f64] {
        &self.column_means
    }

    fn column_default(&self, j: usize) -> Result<f64> {
        let m = self.column_means[j];
        if !m.is_nan() {
            return Ok(m);
        }
        self.fallback.ok_or_else(|| {
            MsbError::Imputation(format!("column {j} had no observed training value and no fallback is set"))
        })
    }

    fn impute_row(&self, row: ArrayView1<f64>) -> Result<Vec<f64>> {
        let mut out = row.to_vec();
        if !out.iter().any(|v| is_missing(*v)) {
            return Ok(out);
        }
        let mut neighbours: Vec<(f64, usize)> = self
            .reference
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(r, refrow)| (nan_euclidean(row, refrow), r))
            .filter(|(d, _)| d.is_finite())
            .collect();
        neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for j in 0..out.len() {
            if !is_missing(out[j]) {
                continue;
            }
            let mut sum = 0.0;
            let mut used = 0usize;
            for &(_, r) in &neighbours {
                let v = self.reference[[r, j]];
                if !is_missing(v) {
                    sum += v;
                    used += 1;
                    if used == self.k {
                        break;
                    }
                }
            }
            out[j] = if used > 0 { sum / used as f64 } else { self.column_default(j)? };
        }
        Ok(out)
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.reference.ncols() {
            return Err(MsbError::DimensionMismatch { expected: self.reference.ncols(), found: x.ncols() });
        }
        let rows: Vec<Vec<f64>> =
            (0..x.nrows()).into_par_iter().map(|i| self.impute_row(x.row(i))).collect::<Result<_>>()?;
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(Array2::from_shape_vec(x.dim(), flat).expect("shape preserved"))
    }
}
