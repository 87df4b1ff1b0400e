//! Nonparametric survival estimators and the two-sample log-rank test.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cohort::SurvivalOutcome;
use crate::error::{MsbError, Result};
use crate::special::chi2_sf;

/// Right-continuous step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCurve {
    times: Vec<f64>,
    values: Vec<f64>,
    before: f64,
}

impl StepCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>, before: f64) -> Result<Self> {
        if times.len() != values.len() {
            return Err(MsbError::DimensionMismatch { expected: times.len(), found: values.len() });
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(MsbError::invalid("step curve times must be strictly increasing"));
        }
        Ok(Self { times, values, before })
    }

    pub fn constant(value: f64) -> Self {
        Self { times: Vec::new(), values: Vec::new(), before: value }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn before(&self) -> f64 {
        self.before
    }

    /// Value at the largest knot ≤ t.
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            self.before
        } else {
            self.values[k - 1]
        }
    }

    /// Left limit: value at the largest knot < t.
    pub fn eval_left(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x < t);
        if k == 0 {
            self.before
        } else {
            self.values[k - 1]
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "time,value")?;
        for (t, v) in self.times.iter().zip(&self.values) {
            writeln!(out, "{t:.6},{v:.6}")?;
        }
        Ok(())
    }
}

/// Distinct times in ascending order with (events, at-risk) counts.
/// Censorings tied with events are still at risk at that time.
pub(crate) fn event_table(outcomes: &[SurvivalOutcome]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<SurvivalOutcome> = outcomes.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let n = sorted.len();
    let mut table = Vec::new();
    let mut i = 0;
    while i < n {
        let t = sorted[i].time;
        let mut j = i;
        let mut d = 0;
        while j < n && sorted[j].time == t {
            d += usize::from(sorted[j].event);
            j += 1;
        }
        table.push((t, d, n - i));
        i = j;
    }
    table
}

fn nonempty(outcomes: &[SurvivalOutcome]) -> Result<()> {
    if outcomes.is_empty() {
        Err(MsbError::Empty("outcomes"))
    } else {
        Ok(())
    }
}

/// Product-limit survival estimate.
pub fn kaplan_meier(outcomes: &[SurvivalOutcome]) -> Result<StepCurve> {
    nonempty(outcomes)?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut s = 1.0;
    for (t, d, y) in event_table(outcomes) {
        if d > 0 {
            s *= 1.0 - d as f64 / y as f64;
            times.push(t);
            values.push(s);
        }
    }
    Ok(StepCurve { times, values, before: 1.0 })
}

/// Kaplan–Meier estimate of the censoring survival function G.
pub fn censoring_km(outcomes: &[SurvivalOutcome]) -> Result<StepCurve> {
    let flipped: Vec<SurvivalOutcome> =
        outcomes.iter().map(|o| SurvivalOutcome { time: o.time, event: !o.event }).collect();
    kaplan_meier(&flipped)
}

/// Nelson–Aalen cumulative hazard.
pub fn nelson_aalen(outcomes: &[SurvivalOutcome]) -> Result<StepCurve> {
    nonempty(outcomes)?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut h = 0.0;
    for (t, d, y) in event_table(outcomes) {
        if d > 0 {
            h += d as f64 / y as f64;
            times.push(t);
            values.push(h);
        }
    }
    Ok(StepCurve { times, values, before: 0.0 })
}

/// Breslow estimate of the baseline cumulative hazard given linear predictors.
pub fn breslow_baseline(outcomes: &[SurvivalOutcome], linear_predictors: &[f64]) -> Result<StepCurve> {
    nonempty(outcomes)?;
    if outcomes.len() != linear_predictors.len() {
        return Err(MsbError::DimensionMismatch { expected: outcomes.len(), found: linear_predictors.len() });
    }
    let n = outcomes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| outcomes[a].time.total_cmp(&outcomes[b].time));
    // Scale by the max to keep exp() finite; increments are rescaled back.
    let shift = linear_predictors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = order.iter().map(|&i| (linear_predictors[i] - shift).exp()).collect();
    let mut tail = vec![0.0; n + 1];
    for k in (0..n).rev() {
        tail[k] = tail[k + 1] + w[k];
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut h = 0.0;
    let mut i = 0;
    while i < n {
        let t = outcomes[order[i]].time;
        let mut j = i;
        let mut d = 0usize;
        while j < n && outcomes[order[j]].time == t {
            d += usize::from(outcomes[order[j]].event);
            j += 1;
        }
        if d > 0 {
            h += d as f64 / tail[i] * (-shift).exp();
            times.push(t);
            values.push(h);
        }
        i = j;
    }
    Ok(StepCurve { times, values, before: 0.0 })
}

/// exp(−H0(t)·exp(lp)) on the grid.
pub fn cox_survival(baseline: &StepCurve, lp: f64, grid: &[f64]) -> StepCurve {
    let scale = lp.exp();
    let values = grid.iter().map(|&t| (-baseline.eval(t) * scale).exp()).collect();
    StepCurve { times: grid.to_vec(), values, before: 1.0 }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample log-rank test (1 df).
pub fn logrank_test(group_a: &[SurvivalOutcome], group_b: &[SurvivalOutcome]) -> Result<LogRank> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(MsbError::Empty("log-rank group"));
    }
    let tagged: Vec<(SurvivalOutcome, bool)> =
        group_a.iter().map(|&o| (o, true)).chain(group_b.iter().map(|&o| (o, false))).collect();
    let mut sorted = tagged;
    sorted.sort_by(|a, b| a.0.time.total_cmp(&b.0.time));
    let n = sorted.len();
    let mut at_risk_a = group_a.len() as f64;
    let mut at_risk = n as f64;
    let mut o_minus_e = 0.0;
    let mut var = 0.0;
    let mut i = 0;
    while i < n {
        let t = sorted[i].0.time;
        let mut j = i;
        let (mut d, mut d_a, mut leave_a) = (0.0, 0.0, 0.0);
        while j < n && sorted[j].0.time == t {
            let (o, in_a) = sorted[j];
            if o.event {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            if in_a {
                leave_a += 1.0;
            }
            j += 1;
        }
        if d > 0.0 {
            let frac = at_risk_a / at_risk;
            o_minus_e += d_a - d * frac;
            if at_risk > 1.0 {
                var += d * frac * (1.0 - frac) * (at_risk - d) / (at_risk - 1.0);
            }
        }
        at_risk -= (j - i) as f64;
        at_risk_a -= leave_a;
        i = j;
    }
    if var <= 0.0 {
        return Ok(LogRank { statistic: 0.0, p_value: 1.0 });
    }
    let statistic = o_minus_e * o_minus_e / var;
    Ok(LogRank { statistic, p_value: chi2_sf(statistic, 1.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn o(t: f64, e: bool) -> SurvivalOutcome {
        SurvivalOutcome::new(t, e)
    }

    #[test]
    fn km_hand_product_limit() {
        let km = kaplan_meier(&[o(1.0, true), o(2.0, true), o(3.0, true)]).unwrap();
        assert_abs_diff_eq!(km.eval(1.0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(km.eval(2.5), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(km.eval(3.0), 0.0);
        assert_eq!(km.eval(0.5), 1.0);
    }

    #[test]
    fn km_all_censored_is_flat() {
        let km = kaplan_meier(&[o(1.0, false), o(4.0, false)]).unwrap();
        assert_eq!(km.eval(10.0), 1.0);
        assert!(km.times().is_empty());
    }

    #[test]
    fn km_without_censoring_is_one_minus_ecdf() {
        let data = [4.0, 1.0, 3.0, 3.0, 7.0, 2.0, 9.0];
        let km = kaplan_meier(&data.map(|t| o(t, true))).unwrap();
        for &t in &data {
            let ecdf = data.iter().filter(|&&x| x <= t).count() as f64 / data.len() as f64;
            assert_abs_diff_eq!(km.eval(t), 1.0 - ecdf, epsilon = 1e-14);
        }
    }

    #[test]
    fn censoring_km_flip_equivalence() {
        let sample = [o(2.0, true), o(3.0, false), o(5.0, true), o(7.0, false), o(8.0, false)];
        let flipped: Vec<_> = sample.iter().map(|x| o(x.time, !x.event)).collect();
        assert_eq!(censoring_km(&sample).unwrap(), kaplan_meier(&flipped).unwrap());
        assert_eq!(censoring_km(&[o(1.0, true), o(2.0, true)]).unwrap().eval(5.0), 1.0);
        // G at 3: 1 - 1/4 ; at 7: (3/4)(1/2) ; at 8: 0
        let g = censoring_km(&sample).unwrap();
        assert_abs_diff_eq!(g.eval(3.0), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(g.eval(7.0), 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(g.eval_left(7.0), 0.75, epsilon = 1e-15);
        assert_eq!(g.eval(8.0), 0.0);
    }

    #[test]
    fn nelson_aalen_hand_sums() {
        assert_eq!(nelson_aalen(&[o(1.0, true)]).unwrap().eval(1.0), 1.0);
        let h = nelson_aalen(&[o(1.0, true), o(2.0, true)]).unwrap();
        assert_abs_diff_eq!(h.eval(1.0), 0.5);
        assert_abs_diff_eq!(h.eval(2.0), 1.5);
        assert_eq!(nelson_aalen(&[o(1.0, false), o(2.0, false)]).unwrap().eval(3.0), 0.0);
        assert!(nelson_aalen(&[]).is_err());
    }

    #[test]
    fn breslow_hand_risk_set() {
        let out = [o(1.0, true), o(2.0, false), o(3.0, true)];
        let h = breslow_baseline(&out, &[2f64.ln(), 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(h.eval(1.0), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(h.eval(3.0), 1.25, epsilon = 1e-14);
        assert!(breslow_baseline(&out, &[0.0]).is_err());
    }

    #[test]
    fn logrank_identical_groups_and_separation() {
        let a = [o(1.0, true), o(3.0, false), o(4.0, true)];
        let r = logrank_test(&a, &a).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);

        let early: Vec<_> = (1..=5).map(|t| o(t as f64, true)).collect();
        let late: Vec<_> = (6..=10).map(|t| o(t as f64, true)).collect();
        // hand O-E: sum over t=1..5 of (1 - 1/(11-t)*... ) computed below
        let mut oe = 0.0;
        let mut v = 0.0;
        for k in 0..5 {
            let na = (5 - k) as f64;
            let n = (10 - k) as f64;
            oe += 1.0 - na / n;
            v += (na / n) * (1.0 - na / n);
        }
        let r = logrank_test(&early, &late).unwrap();
        assert_abs_diff_eq!(r.statistic, oe * oe / v, epsilon = 1e-12);
        assert!(r.p_value < 0.05);

        let none = [o(1.0, false), o(2.0, false)];
        assert_eq!(logrank_test(&none, &none).unwrap(), LogRank { statistic: 0.0, p_value: 1.0 });
    }

    fn outcomes_strategy(max: usize) -> impl Strategy<Value = Vec<SurvivalOutcome>> {
        prop::collection::vec((1u32..15, any::<bool>()), 1..=max)
            .prop_map(|v| v.into_iter().map(|(t, e)| o(f64::from(t), e)).collect())
    }

    proptest! {
        #[test]
        fn km_matches_bruteforce_product(sample in outcomes_strategy(20)) {
            let km = kaplan_meier(&sample).unwrap();
            for t in 0..16 {
                let t = f64::from(t);
                let mut prod = 1.0;
                for u in 1..=t as u32 {
                    let u = f64::from(u);
                    let d = sample.iter().filter(|x| x.time == u && x.event).count() as f64;
                    let y = sample.iter().filter(|x| x.time >= u).count() as f64;
                    if d > 0.0 {
                        prod *= 1.0 - d / y;
                    }
                }
                prop_assert!((km.eval(t) - prod).abs() < 1e-12);
            }
            prop_assert!(km.values().windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(km.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn breslow_zero_lp_is_nelson_aalen(sample in outcomes_strategy(20)) {
            let na = nelson_aalen(&sample).unwrap();
            let br = breslow_baseline(&sample, &vec![0.0; sample.len()]).unwrap();
            prop_assert_eq!(na.times(), br.times());
            for (a, b) in na.values().iter().zip(br.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(na.values().windows(2).all(|w| w[1] >= w[0]));
        }

        #[test]
        fn breslow_survival_shift_invariant(
            sample in outcomes_strategy(15),
            shift in -3.0f64..3.0,
            seed_lp in prop::collection::vec(-2.0f64..2.0, 15),
        ) {
            let lp: Vec<f64> = seed_lp[..sample.len()].to_vec();
            let shifted: Vec<f64> = lp.iter().map(|x| x + shift).collect();
            let h0 = breslow_baseline(&sample, &lp).unwrap();
            let h1 = breslow_baseline(&sample, &shifted).unwrap();
            let grid: Vec<f64> = (0..16).map(f64::from).collect();
            for i in 0..sample.len() {
                let a = cox_survival(&h0, lp[i], &grid);
                let b = cox_survival(&h1, shifted[i], &grid);
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn logrank_exchangeable(a in outcomes_strategy(8), b in outcomes_strategy(8)) {
            let r1 = logrank_test(&a, &b).unwrap();
            let mut ra = a.clone();
            ra.reverse();
            let r2 = logrank_test(&ra, &b).unwrap();
            let r3 = logrank_test(&b, &a).unwrap();
            prop_assert!((r1.statistic - r2.statistic).abs() < 1e-10);
            prop_assert!((r1.statistic - r3.statistic).abs() < 1e-10);
        }
    }
}
