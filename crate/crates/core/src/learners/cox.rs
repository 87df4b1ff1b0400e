//! Cox partial likelihood (Breslow ties) and its derivatives with respect to
//! the linear predictor.

use ndarray::ArrayView2;

use crate::cohort::SurvivalOutcome;

/// Outcomes pre-sorted for risk-set sums.
#[derive(Debug, Clone)]
pub(crate) struct CoxProblem {
    /// Row indices in ascending time order.
    order: Vec<usize>,
    /// (start, end) ranges into `order` sharing one time, with event count.
    groups: Vec<(usize, usize, usize)>,
    events: Vec<bool>,
}

impl CoxProblem {
    pub fn new(outcomes: &[SurvivalOutcome]) -> Self {
        let n = outcomes.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| outcomes[a].time.total_cmp(&outcomes[b].time));
        let mut groups = Vec::new();
        let mut i = 0;
        while i < n {
            let t = outcomes[order[i]].time;
            let mut j = i;
            let mut d = 0;
            while j < n && outcomes[order[j]].time == t {
                d += usize::from(outcomes[order[j]].event);
                j += 1;
            }
            groups.push((i, j, d));
            i = j;
        }
        Self { order, groups, events: outcomes.iter().map(|o| o.event).collect() }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    /// exp(η − max η) in sorted order, plus the shift.
    fn scaled_exp(&self, eta: &[f64]) -> (Vec<f64>, f64) {
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (self.order.iter().map(|&i| (eta[i] - shift).exp()).collect(), shift)
    }

    /// Σ exp(η) over each group's risk set, scaled by exp(−shift).
    fn risk_sums(&self, w: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.groups.len()];
        let mut acc = 0.0;
        for (g, &(s, e, _)) in self.groups.iter().enumerate().rev() {
            acc += w[s..e].iter().sum::<f64>();
            sums[g] = acc;
        }
        sums
    }

    /// Negative log partial likelihood.
    pub fn neg_log_likelihood(&self, eta: &[f64]) -> f64 {
        let (w, shift) = self.scaled_exp(eta);
        let sums = self.risk_sums(&w);
        let mut nll = 0.0;
        for (g, &(s, e, d)) in self.groups.iter().enumerate() {
            if d == 0 {
                continue;
            }
            for &i in &self.order[s..e] {
                if self.events[i] {
                    nll -= eta[i];
                }
            }
            nll += d as f64 * (sums[g].ln() + shift);
        }
        nll
    }

    /// Returns (u, w): u = ∂ℓ/∂η (the negative gradient of the loss) and
    /// w = −∂²ℓ/∂η² diagonal, both indexed by original row.
    pub fn eta_derivatives(&self, eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let (ew, _) = self.scaled_exp(eta);
        let sums = self.risk_sums(&ew);
        let mut u = vec![0.0; n];
        let mut w = vec![0.0; n];
        let (mut c1, mut c2) = (0.0, 0.0);
        for (g, &(s, e, d)) in self.groups.iter().enumerate() {
            if d > 0 {
                c1 += d as f64 / sums[g];
                c2 += d as f64 / (sums[g] * sums[g]);
            }
            for pos in s..e {
                let i = self.order[pos];
                let r = ew[pos];
                u[i] = f64::from(u8::from(self.events[i])) - r * c1;
                w[i] = r * c1 - r * r * c2;
            }
        }
        (u, w)
    }
}

/// Second-order expansion of −ℓ at a fixed η: the gradient and the full
/// Hessian as an O(n) operator.
pub(crate) struct CoxQuadratic<'a> {
    prob: &'a CoxProblem,
    /// ∂ℓ/∂η by original row.
    pub u: Vec<f64>,
    /// exp(η − shift) in sorted order.
    ew: Vec<f64>,
    /// Σ_{k ≤ g} d_k / S_k per group.
    c1: Vec<f64>,
    /// d_g / S_g² per group.
    c2: Vec<f64>,
}

impl CoxProblem {
    pub fn quadratic(&self, eta: &[f64]) -> CoxQuadratic<'_> {
        let n = self.len();
        let (ew, _) = self.scaled_exp(eta);
        let sums = self.risk_sums(&ew);
        let mut u = vec![0.0; n];
        let mut c1 = vec![0.0; self.groups.len()];
        let mut c2 = vec![0.0; self.groups.len()];
        let mut acc = 0.0;
        for (g, &(s, e, d)) in self.groups.iter().enumerate() {
            if d > 0 {
                acc += d as f64 / sums[g];
                c2[g] = d as f64 / (sums[g] * sums[g]);
            }
            c1[g] = acc;
            for pos in s..e {
                let i = self.order[pos];
                u[i] = f64::from(u8::from(self.events[i])) - ew[pos] * acc;
            }
        }
        CoxQuadratic { prob: self, u, ew, c1, c2 }
    }
}

impl CoxQuadratic<'_> {
    /// H v with H = −∂²ℓ/∂η², both indexed by original row.
    pub fn hess_times(&self, v: impl Fn(usize) -> f64) -> Vec<f64> {
        let prob = self.prob;
        let groups = &prob.groups;
        let mut s = vec![0.0; groups.len()];
        let mut acc = 0.0;
        for (g, &(a, b, _)) in groups.iter().enumerate().rev() {
            for pos in a..b {
                acc += self.ew[pos] * v(prob.order[pos]);
            }
            s[g] = acc;
        }
        let mut out = vec![0.0; prob.len()];
        let mut cross = 0.0;
        for (g, &(a, b, _)) in groups.iter().enumerate() {
            cross += self.c2[g] * s[g];
            for pos in a..b {
                let i = prob.order[pos];
                out[i] = self.ew[pos] * (self.c1[g] * v(i) - cross);
            }
        }
        out
    }
}

pub(crate) fn linear_predictor(x: ArrayView2<f64>, beta: &[f64]) -> Vec<f64> {
    x.rows().into_iter().map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum()).collect()
}

/// Negative log partial likelihood of coefficients `beta` on design `x`.
pub fn neg_log_partial_likelihood(x: ArrayView2<f64>, outcomes: &[SurvivalOutcome], beta: &[f64]) -> f64 {
    CoxProblem::new(outcomes).neg_log_likelihood(&linear_predictor(x, beta))
}

/// Gradient of the negative log partial likelihood with respect to `beta`.
pub fn partial_likelihood_gradient(x: ArrayView2<f64>, outcomes: &[SurvivalOutcome], beta: &[f64]) -> Vec<f64> {
    let prob = CoxProblem::new(outcomes);
    let (u, _) = prob.eta_derivatives(&linear_predictor(x, beta));
    (0..x.ncols()).map(|j| -x.column(j).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn o(t: f64, e: bool) -> SurvivalOutcome {
        SurvivalOutcome::new(t, e)
    }

    #[test]
    fn nll_hand_value() {
        // events at 1 and 3; risk sets {all} and {row 2}
        let out = [o(1.0, true), o(2.0, false), o(3.0, true)];
        let eta = [0.5, -1.0, 2.0];
        let s1 = 0.5f64.exp() + (-1.0f64).exp() + 2f64.exp();
        let expected = -(0.5 - s1.ln()) - (2.0 - 2.0);
        assert_abs_diff_eq!(CoxProblem::new(&out).neg_log_likelihood(&eta), expected, epsilon = 1e-12);
    }

    #[test]
    fn eta_gradient_matches_finite_differences() {
        let out = [o(1.0, true), o(2.0, true), o(2.0, false), o(4.0, true), o(5.0, false)];
        let eta = [0.3, -0.2, 0.8, 0.1, -0.5];
        let prob = CoxProblem::new(&out);
        let (u, w) = prob.eta_derivatives(&eta);
        let h = 1e-5;
        for i in 0..eta.len() {
            let mut p = eta;
            let mut m = eta;
            p[i] += h;
            m[i] -= h;
            let fd = -(prob.neg_log_likelihood(&p) - prob.neg_log_likelihood(&m)) / (2.0 * h);
            assert_abs_diff_eq!(u[i], fd, epsilon = 1e-8);
            let (up, _) = prob.eta_derivatives(&p);
            let (um, _) = prob.eta_derivatives(&m);
            assert_abs_diff_eq!(w[i], -(up[i] - um[i]) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn hessian_operator_matches_finite_differences() {
        let out = [o(1.0, true), o(2.0, true), o(2.0, false), o(4.0, true), o(5.0, false), o(5.0, true)];
        let eta = [0.3, -0.2, 0.8, 0.1, -0.5, 0.4];
        let v = [1.0, -2.0, 0.5, 0.0, 3.0, -1.0];
        let prob = CoxProblem::new(&out);
        let hv = prob.quadratic(&eta).hess_times(|i| v[i]);
        let h = 1e-5;
        let shifted = |t: f64| -> Vec<f64> {
            let e: Vec<f64> = eta.iter().zip(&v).map(|(a, b)| a + t * b).collect();
            prob.quadratic(&e).u
        };
        let (up, um) = (shifted(h), shifted(-h));
        for i in 0..eta.len() {
            assert_abs_diff_eq!(hv[i], -(up[i] - um[i]) / (2.0 * h), epsilon = 1e-7);
        }
        // invariance of the partial likelihood to a constant shift
        let h1 = prob.quadratic(&eta).hess_times(|_| 1.0);
        assert!(h1.iter().all(|x| x.abs() < 1e-12));
    }
}
