//! Incremental two-sample log-rank statistic for split search.
//!
//! For a node with distinct event times u_1 < … < u_K, let r_j be the number
//! of event times ≤ t_j. With Y_k at risk and d_k events at u_k, the left
//! group's observed-minus-expected count is Σ_{j∈L} (δ_j − Λ(r_j)) where
//! Λ(r) = Σ_{k≤r} d_k/Y_k, and its hypergeometric variance is
//! Σ_{j∈L} A(r_j) − Σ_k b_k Y_{L,k}², with c_k = d_k(Y_k−d_k)/(Y_k−1),
//! A(r) = Σ_{k≤r} c_k/Y_k and b_k = c_k/Y_k². Moving one sample into L
//! raises Y_{L,k} by one for every k ≤ r_j, which changes the quadratic term
//! by B(r_j) + 2 Σ_{k≤r_j} b_k Y_{L,k}; that sum is answered by two Fenwick
//! trees keyed by rank, so each insertion costs O(log K).

use crate::cohort::SurvivalOutcome;

#[derive(Debug, Clone)]
pub(crate) struct LogRankScan {
    ranks: Vec<usize>,
    events: Vec<bool>,
    /// Prefix sums indexed by rank 0..=K.
    lambda: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    total_events: usize,
}

impl LogRankScan {
    pub fn new(outcomes: &[SurvivalOutcome]) -> Self {
        let mut event_times: Vec<f64> = outcomes.iter().filter(|o| o.event).map(|o| o.time).collect();
        event_times.sort_by(f64::total_cmp);
        event_times.dedup();
        let k = event_times.len();
        let ranks: Vec<usize> = outcomes.iter().map(|o| event_times.partition_point(|&u| u <= o.time)).collect();
        let mut d = vec![0.0; k];
        let mut at_or_after = vec![0.0; k + 1];
        for (o, &r) in outcomes.iter().zip(&ranks) {
            if o.event {
                d[r - 1] += 1.0;
            }
            // at risk for u_1..u_r
            at_or_after[r] += 1.0;
        }
        // Y_k = #{j : r_j ≥ k}
        let mut y = vec![0.0; k + 2];
        for r in (1..=k).rev() {
            y[r] = y[r + 1] + at_or_after[r];
        }
        let mut lambda = vec![0.0; k + 1];
        let mut a = vec![0.0; k + 1];
        let mut b = vec![0.0; k + 1];
        for idx in 1..=k {
            let (dk, yk) = (d[idx - 1], y[idx]);
            let ck = if yk > 1.0 { dk * (yk - dk) / (yk - 1.0) } else { 0.0 };
            lambda[idx] = lambda[idx - 1] + dk / yk;
            a[idx] = a[idx - 1] + ck / yk;
            b[idx] = b[idx - 1] + ck / (yk * yk);
        }
        Self {
            ranks,
            events: outcomes.iter().map(|o| o.event).collect(),
            lambda,
            a,
            b,
            total_events: outcomes.iter().filter(|o| o.event).count(),
        }
    }

    pub fn total_events(&self) -> usize {
        self.total_events
    }

    pub fn group(&self) -> Group<'_> {
        let k = self.lambda.len();
        Group {
            scan: self,
            size: 0,
            events: 0,
            oe: 0.0,
            lin: 0.0,
            quad: 0.0,
            fen_count: vec![0.0; k + 1],
            fen_b: vec![0.0; k + 1],
        }
    }

    /// Statistic for an explicit partition given by left-member indices.
    #[cfg(test)]
    pub fn statistic_of(&self, left: impl IntoIterator<Item = usize>) -> Option<f64> {
        let mut g = self.group();
        for j in left {
            g.add(j);
        }
        g.statistic()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Group<'a> {
    scan: &'a LogRankScan,
    size: usize,
    events: usize,
    oe: f64,
    lin: f64,
    quad: f64,
    fen_count: Vec<f64>,
    fen_b: Vec<f64>,
}

fn fen_add(tree: &mut [f64], pos: usize, v: f64) {
    let mut i = pos + 1;
    while i < tree.len() {
        tree[i] += v;
        i += i & i.wrapping_neg();
    }
}

/// Sum over positions 0..=pos.
fn fen_sum(tree: &[f64], pos: usize) -> f64 {
    let mut i = pos + 1;
    let mut s = 0.0;
    while i > 0 {
        s += tree[i];
        i -= i & i.wrapping_neg();
    }
    s
}

impl Group<'_> {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn events(&self) -> usize {
        self.events
    }

    pub fn add(&mut self, j: usize) {
        let s = self.scan;
        let r = s.ranks[j];
        if r > 0 {
            let b_r = s.b[r];
            let below_count = fen_sum(&self.fen_count, r - 1);
            let below_b = fen_sum(&self.fen_b, r - 1);
            let at_or_above = self.size as f64 - below_count;
            let cross = b_r * at_or_above + below_b;
            self.quad += b_r + 2.0 * cross;
        }
        fen_add(&mut self.fen_count, r, 1.0);
        fen_add(&mut self.fen_b, r, s.b[r]);
        self.size += 1;
        if s.events[j] {
            self.events += 1;
            self.oe += 1.0;
        }
        self.oe -= s.lambda[r];
        self.lin += s.a[r];
    }

    /// (O−E)²/V, or None when the variance vanishes.
    pub fn statistic(&self) -> Option<f64> {
        let var = self.lin - self.quad;
        if var <= 1e-12 * self.lin.abs().max(1e-300) || var <= 0.0 {
            return None;
        }
        Some(self.oe * self.oe / var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::logrank_test;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn incremental_statistic_matches_direct_test(
            data in prop::collection::vec((1u32..10, any::<bool>(), any::<bool>()), 2..25)
        ) {
            let outcomes: Vec<SurvivalOutcome> =
                data.iter().map(|&(t, e, _)| SurvivalOutcome::new(f64::from(t), e)).collect();
            let scan = LogRankScan::new(&outcomes);
            let left: Vec<usize> = (0..data.len()).filter(|&i| data[i].2).collect();
            let a: Vec<_> = left.iter().map(|&i| outcomes[i]).collect();
            let b: Vec<_> = (0..data.len()).filter(|&i| !data[i].2).map(|i| outcomes[i]).collect();
            prop_assume!(!a.is_empty() && !b.is_empty());
            let direct = logrank_test(&a, &b).unwrap().statistic;
            match scan.statistic_of(left.iter().copied()) {
                Some(s) => prop_assert!((s - direct).abs() <= 1e-9 * direct.max(1.0), "{s} vs {direct}"),
                None => prop_assert!(direct.abs() < 1e-9),
            }
        }
    }
}
