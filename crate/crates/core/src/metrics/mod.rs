//! Discrimination and calibration metrics for survival predictions.

mod importance;

pub use importance::{permutation_importance, ColumnImportance, ImportanceReport};

use serde::{Deserialize, Serialize};

use crate::cohort::SurvivalOutcome;
use crate::error::{MsbError, Result};
use crate::survival::StepCurve;

/// Harrell's C-index.
///
/// Comparable pairs are (i, j) with `T_i < T_j` and an event at `T_i`;
/// a pair is concordant when `risk_i > risk_j` and counts one half on a
/// risk tie.
pub fn c_index(outcomes: &[SurvivalOutcome], risks: &[f64]) -> Result<f64> {
    if outcomes.len() != risks.len() {
        return Err(MsbError::DimensionMismatch { expected: outcomes.len(), found: risks.len() });
    }
    if risks.iter().any(|r| r.is_nan()) {
        return Err(MsbError::invalid("risk score is NaN"));
    }
    let n = outcomes.len();
    // dense ranks of risk
    let mut by_risk: Vec<usize> = (0..n).collect();
    by_risk.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]));
    let mut rank = vec![0usize; n];
    let mut r = 0;
    for k in 0..n {
        if k > 0 && risks[by_risk[k]] != risks[by_risk[k - 1]] {
            r += 1;
        }
        rank[by_risk[k]] = r;
    }
    let mut fenwick = vec![0u64; r + 2];
    let add = |tree: &mut Vec<u64>, pos: usize| {
        let mut i = pos + 1;
        while i < tree.len() {
            tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    };
    let prefix = |tree: &Vec<u64>, pos_exclusive: usize| {
        let mut i = pos_exclusive;
        let mut s = 0;
        while i > 0 {
            s += tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    };

    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| outcomes[b].time.total_cmp(&outcomes[a].time));
    let (mut twice_concordant, mut comparable, mut inserted) = (0u64, 0u64, 0u64);
    let mut k = 0;
    while k < n {
        let t = outcomes[by_time[k]].time;
        let mut end = k;
        while end < n && outcomes[by_time[end]].time == t {
            end += 1;
        }
        for &i in &by_time[k..end] {
            if outcomes[i].event {
                let lower = prefix(&fenwick, rank[i]);
                let tied = prefix(&fenwick, rank[i] + 1) - lower;
                twice_concordant += 2 * lower + tied;
                comparable += inserted;
            }
        }
        for &i in &by_time[k..end] {
            add(&mut fenwick, rank[i]);
            inserted += 1;
        }
        k = end;
    }
    if comparable == 0 {
        return Err(MsbError::Undefined("no comparable pairs for the C-index".into()));
    }
    Ok(twice_concordant as f64 / (2 * comparable) as f64)
}

/// Integration window for the integrated Brier score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbsWindow {
    pub start: f64,
    pub end: f64,
    pub resolution: usize,
}

impl IbsWindow {
    pub const EARLY: IbsWindow = IbsWindow { start: 15.0, end: 102.0, resolution: 50 };
    pub const LATE: IbsWindow = IbsWindow { start: 100.0, end: 1000.0, resolution: 50 };

    pub fn new(start: f64, end: f64, resolution: usize) -> Result<Self> {
        if !(start >= 0.0 && start < end) || resolution < 2 {
            return Err(MsbError::config("IBS window needs 0 ≤ start < end and resolution ≥ 2"));
        }
        Ok(Self { start, end, resolution })
    }

    /// Evenly spaced evaluation times, endpoints included.
    pub fn grid(&self) -> Vec<f64> {
        let step = (self.end - self.start) / (self.resolution - 1) as f64;
        (0..self.resolution).map(|k| self.start + step * k as f64).collect()
    }

    /// Clips the end to `horizon`; `None` when nothing of the window remains.
    pub fn truncated(&self, horizon: f64) -> Option<IbsWindow> {
        let end = self.end.min(horizon);
        (end > self.start).then_some(IbsWindow { end, ..*self })
    }
}

/// Brier score at one time with the count of rows dropped for a zero
/// censoring weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrierPoint {
    pub score: f64,
    pub dropped: usize,
}

/// IPCW Brier score at time `t`. `g_hat` is the censoring survival curve
/// estimated on training data.
pub fn brier_detailed(
    outcomes: &[SurvivalOutcome],
    curves: &[StepCurve],
    t: f64,
    g_hat: &StepCurve,
) -> Result<BrierPoint> {
    if outcomes.len() != curves.len() {
        return Err(MsbError::DimensionMismatch { expected: outcomes.len(), found: curves.len() });
    }
    let g_t = g_hat.eval(t);
    let mut sum = 0.0;
    let mut dropped = 0usize;
    for (o, curve) in outcomes.iter().zip(curves) {
        let s = curve.eval(t);
        if o.time <= t && o.event {
            let g = g_hat.eval_left(o.time);
            if g > 0.0 {
                sum += s * s / g;
            } else {
                dropped += 1;
            }
        } else if o.time > t {
            if g_t > 0.0 {
                sum += (1.0 - s) * (1.0 - s) / g_t;
            } else {
                dropped += 1;
            }
        }
    }
    let kept = outcomes.len() - dropped;
    if kept == 0 {
        return Err(MsbError::Undefined(format!("no usable rows for the Brier score at t = {t}")));
    }
    Ok(BrierPoint { score: sum / kept as f64, dropped })
}

pub fn brier(outcomes: &[SurvivalOutcome], curves: &[StepCurve], t: f64, g_hat: &StepCurve) -> Result<f64> {
    brier_detailed(outcomes, curves, t, g_hat).map(|b| b.score)
}

/// Trapezoidal integral of the Brier score over the window, divided by
/// its length.
pub fn integrated_brier(
    outcomes: &[SurvivalOutcome],
    curves: &[StepCurve],
    window: &IbsWindow,
    g_hat: &StepCurve,
) -> Result<f64> {
    let grid = window.grid();
    let scores: Vec<f64> = grid.iter().map(|&t| brier(outcomes, curves, t, g_hat)).collect::<Result<_>>()?;
    let area: f64 = grid.windows(2).zip(scores.windows(2)).map(|(t, s)| 0.5 * (s[0] + s[1]) * (t[1] - t[0])).sum();
    Ok(area / (window.end - window.start))
}

/// Brier skill score relative to the constant 0.5 predictor.
pub fn ibss(ibs: f64) -> f64 {
    1.0 - ibs / 0.25
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::censoring_km;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn o(t: f64, e: bool) -> SurvivalOutcome {
        SurvivalOutcome::new(t, e)
    }

    fn brute_c(outcomes: &[SurvivalOutcome], risks: &[f64]) -> Option<f64> {
        let (mut num, mut den) = (0u64, 0u64);
        for i in 0..outcomes.len() {
            for j in 0..outcomes.len() {
                if outcomes[i].event && outcomes[i].time < outcomes[j].time {
                    den += 2;
                    if risks[i] > risks[j] {
                        num += 2;
                    } else if risks[i] == risks[j] {
                        num += 1;
                    }
                }
            }
        }
        (den > 0).then(|| num as f64 / den as f64)
    }

    #[test]
    fn c_index_perfect_and_constant() {
        let out: Vec<_> = (1..=6).map(|t| o(f64::from(t), true)).collect();
        let inverse: Vec<f64> = (1..=6).map(|t| -f64::from(t)).collect();
        assert_eq!(c_index(&out, &inverse).unwrap(), 1.0);
        assert_eq!(c_index(&out, &[3.0; 6]).unwrap(), 0.5);
        assert!(c_index(&[o(1.0, false), o(2.0, false)], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn c_index_matches_pair_count(
            data in prop::collection::vec((1u32..12, any::<bool>(), -3i32..3), 2..15)
        ) {
            let out: Vec<_> = data.iter().map(|&(t, e, _)| o(f64::from(t), e)).collect();
            let risks: Vec<f64> = data.iter().map(|&(_, _, r)| f64::from(r)).collect();
            match brute_c(&out, &risks) {
                Some(b) => prop_assert_eq!(c_index(&out, &risks).unwrap(), b),
                None => prop_assert!(c_index(&out, &risks).is_err()),
            }
        }

        #[test]
        fn c_index_monotone_invariance_and_reflection(
            data in prop::collection::vec((1u32..30, any::<bool>(), -100.0f64..100.0), 3..20)
        ) {
            let out: Vec<_> = data.iter().map(|&(t, e, _)| o(f64::from(t), e)).collect();
            let risks: Vec<f64> = data.iter().map(|d| d.2).collect();
            prop_assume!(brute_c(&out, &risks).is_some());
            let c = c_index(&out, &risks).unwrap();
            let transformed: Vec<f64> = risks.iter().map(|r| (r / 50.0).exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(c, c_index(&out, &transformed).unwrap());
            let mut sorted = risks.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
                prop_assert!((c + c_index(&out, &neg).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn brier_constant_half_is_quarter() {
        let out: Vec<_> = (1..=8).map(|t| o(f64::from(t) * 10.0, true)).collect();
        let curves = vec![StepCurve::constant(0.5); 8];
        let g = censoring_km(&out).unwrap();
        for t in [5.0, 25.0, 55.0, 79.0] {
            assert_eq!(brier(&out, &curves, t, &g).unwrap(), 0.25);
        }
    }

    #[test]
    fn brier_oracle_prediction_is_zero() {
        let out: Vec<_> = (1..=5).map(|t| o(f64::from(t), true)).collect();
        let t = 2.5;
        let curves: Vec<_> = out.iter().map(|x| StepCurve::constant(if x.time > t { 1.0 } else { 0.0 })).collect();
        let g = censoring_km(&out).unwrap();
        assert_eq!(brier(&out, &curves, t, &g).unwrap(), 0.0);
    }

    #[test]
    fn brier_unit_weights_is_mse_on_uncensored() {
        let out: Vec<_> = [3.0, 7.0, 1.0, 9.0, 4.0].map(|t| o(t, true)).to_vec();
        let preds = [0.2, 0.9, 0.4, 0.7, 0.5];
        let curves: Vec<_> = preds.iter().map(|&p| StepCurve::constant(p)).collect();
        let t = 4.0;
        let mse: f64 = out
            .iter()
            .zip(&preds)
            .map(|(x, p)| {
                let alive = if x.time > t { 1.0 } else { 0.0 };
                (p - alive) * (p - alive)
            })
            .sum::<f64>()
            / 5.0;
        assert!((brier(&out, &curves, t, &StepCurve::constant(1.0)).unwrap() - mse).abs() < 1e-12);
    }

    #[test]
    fn brier_mixed_censoring_hand_weighted() {
        // ten patients, mixed censoring, prediction S = 0.6 everywhere, t = 5
        let out = vec![
            o(1.0, true),
            o(2.0, false),
            o(3.0, true),
            o(4.0, false),
            o(5.0, true),
            o(6.0, true),
            o(7.0, false),
            o(8.0, true),
            o(9.0, false),
            o(10.0, true),
        ];
        let g = censoring_km(&out).unwrap();
        // G: censorings at 2 (9 at risk), 4 (7 at risk), 7 (4), 9 (2)
        let g2 = 8.0 / 9.0;
        let g4 = g2 * 6.0 / 7.0;
        assert_abs_diff_eq!(g.eval(5.0), g4, epsilon = 1e-15);
        let s: f64 = 0.6;
        // events ≤ 5 at 1, 3, 5 weighted by G(T−): 1, g2, g4; survivors > 5: 5 rows
        let expected = (s * s / 1.0 + s * s / g2 + s * s / g4 + 5.0 * (1.0 - s) * (1.0 - s) / g4) / 10.0;
        let curves = vec![StepCurve::constant(s); 10];
        assert_abs_diff_eq!(brier(&out, &curves, 5.0, &g).unwrap(), expected, epsilon = 1e-10);
    }

    #[test]
    fn zero_censoring_weight_drops_rows() {
        let out = vec![o(1.0, true), o(2.0, false), o(3.0, true)];
        let g = StepCurve::new(vec![2.0], vec![0.0], 1.0).unwrap();
        let curves = vec![StepCurve::constant(0.5); 3];
        let b = brier_detailed(&out, &curves, 2.5, &g).unwrap();
        // row 0 counted (G(1−)=1), row 1 censored before t contributes 0, row 2 dropped
        assert_eq!(b.dropped, 1);
        assert_abs_diff_eq!(b.score, 0.25 / 2.0);
    }

    #[test]
    fn integrated_constant_and_linear() {
        let out: Vec<_> = (1..=8).map(|t| o(f64::from(t) * 10.0, true)).collect();
        let g = censoring_km(&out).unwrap();
        let curves = vec![StepCurve::constant(0.5); 8];
        let w = IbsWindow::new(5.0, 75.0, 50).unwrap();
        let ibs = integrated_brier(&out, &curves, &w, &g).unwrap();
        assert_abs_diff_eq!(ibs, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(ibss(ibs), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn integrated_trapezoid_by_hand() {
        // one uncensored patient failing at 100, predicted S = 1 before it:
        // brier(t) = 0 for t < 100, then S(t)^2 with S dropping to 0 — use a
        // survival curve that is 1 - t/10 on the grid points 0, 5, 10
        let out = vec![o(100.0, true)];
        let curve = StepCurve::new(vec![0.0, 5.0, 10.0], vec![1.0, 0.5, 0.0], 1.0).unwrap();
        // alive at all grid times: brier = (1 - S)^2 -> 0, 0.25, 1
        let w = IbsWindow::new(0.0, 10.0, 3).unwrap();
        let ibs = integrated_brier(&out, &[curve], &w, &StepCurve::constant(1.0)).unwrap();
        let hand = (0.5 * (0.0 + 0.25) * 5.0 + 0.5 * (0.25 + 1.0) * 5.0) / 10.0;
        assert_abs_diff_eq!(ibs, hand, epsilon = 1e-15);
    }

    #[test]
    fn ibss_reference_values() {
        assert_eq!(ibss(0.25), 0.0);
        assert_eq!(ibss(0.0), 1.0);
        assert_abs_diff_eq!(ibss(0.362), -0.448, epsilon = 1e-12);
    }

    #[test]
    fn default_windows() {
        assert_eq!((IbsWindow::EARLY.start, IbsWindow::EARLY.end), (15.0, 102.0));
        assert_eq!((IbsWindow::LATE.start, IbsWindow::LATE.end), (100.0, 1000.0));
        assert_eq!(IbsWindow::LATE.truncated(400.0).unwrap().end, 400.0);
        assert!(IbsWindow::LATE.truncated(50.0).is_none());
    }
}
