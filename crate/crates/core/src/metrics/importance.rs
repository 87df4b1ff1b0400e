//! Permutation importance of the columns of the score matrix.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{ibss, integrated_brier, IbsWindow};
use crate::cohort::Cohort;
use crate::error::{MsbError, Result};
use crate::seeds;
use crate::stacking::{ColumnLabel, FittedMsb};

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnImportance {
    pub label: ColumnLabel,
    /// iBSS with the column intact.
    pub baseline: f64,
    /// iBSS of each permutation.
    pub permuted: Vec<f64>,
    pub permuted_mean: f64,
    /// `baseline − permuted_mean`.
    pub importance: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    /// Window actually integrated over, after truncation at the last
    /// training event time.
    pub window: IbsWindow,
    pub permutations: usize,
    pub columns: Vec<ColumnImportance>,
}

impl ImportanceReport {
    pub fn argmax(&self) -> Option<&ColumnImportance> {
        self.columns.iter().fold(None, |best: Option<&ColumnImportance>, c| match best {
            Some(b) if b.importance >= c.importance => Some(b),
            _ => Some(c),
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "source,model,importance,sd,baseline_ibss,mean_permuted_ibss")?;
        for c in &self.columns {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                c.label.source,
                c.label.model_name(),
                c.importance,
                c.sd,
                c.baseline,
                c.permuted_mean
            )?;
        }
        Ok(())
    }
}

/// For each Ẑ column, permutes its values `k` times across test rows,
/// re-runs only the meta-learner and records the drop in iBSS.
pub fn permutation_importance(
    model: &FittedMsb,
    test: &Cohort,
    window: &IbsWindow,
    k: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    if k == 0 {
        return Err(MsbError::config("permutation count must be ≥ 1"));
    }
    if test.n_rows() < 2 {
        return Err(MsbError::invalid("permutation importance needs at least two test rows"));
    }
    let window = window.truncated(model.last_event_time()).ok_or_else(|| {
        MsbError::Undefined(format!("window starts after the last training event time {}", model.last_event_time()))
    })?;
    let grid = window.grid();
    let g_hat = model.censoring_curve();
    let outcomes = test.outcomes();
    let z = model.score_matrix(test)?;
    let score = |values: &Array2<f64>| -> Result<f64> {
        let curves = model.meta_survival(values.view(), &grid)?;
        Ok(ibss(integrated_brier(outcomes, &curves, &window, g_hat)?))
    };
    let baseline = score(&z.values)?;

    let jobs: Vec<(usize, usize)> = (0..z.n_columns()).flat_map(|c| (0..k).map(move |r| (c, r))).collect();
    let permuted: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let mut rng = seeds::rng(seed, "permutation", &[c as u64, r as u64]);
            let mut column: Vec<f64> = z.values.column(c).to_vec();
            column.shuffle(&mut rng);
            let mut values = z.values.clone();
            for (cell, v) in values.column_mut(c).iter_mut().zip(column) {
                *cell = v;
            }
            score(&values)
        })
        .collect::<Result<_>>()?;

    let columns = z
        .labels
        .iter()
        .zip(permuted.chunks(k))
        .map(|(label, reps)| {
            let mean = reps.iter().sum::<f64>() / k as f64;
            let sd = if k > 1 {
                (reps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64).sqrt()
            } else {
                0.0
            };
            ColumnImportance {
                label: label.clone(),
                baseline,
                permuted: reps.to_vec(),
                permuted_mean: mean,
                importance: baseline - mean,
                sd,
            }
        })
        .collect();
    Ok(ImportanceReport { window, permutations: k, columns })
}
