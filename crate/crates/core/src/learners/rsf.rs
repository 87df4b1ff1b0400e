//! Random survival forest with log-rank splitting.
//!
//! Trees are grown on bootstrap samples; each node draws `max_features`
//! candidate columns and picks the midpoint threshold maximizing the
//! log-rank statistic. Leaves hold the Nelson–Aalen cumulative hazard of
//! their in-bag members; the ensemble hazard is the average over trees.
//!
//! When grown with missing-value support, a candidate split may send the
//! node's missing values left, right, or alone against all observed values
//! (missing incorporated in attributes); see [`route_missing`].

use ndarray::ArrayView2;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::split::LogRankScan;
use crate::cohort::{is_missing, SurvivalOutcome};
use crate::error::{MsbError, Result};
use crate::seeds;
use crate::survival::{nelson_aalen, StepCurve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsfParams {
    pub n_trees: usize,
    /// Candidate columns per node; `None` means ceil(sqrt(p)).
    pub max_features: Option<usize>,
    /// Nodes with fewer samples become leaves.
    pub min_samples_split: usize,
    /// Nodes with fewer events become leaves.
    pub min_events_split: usize,
    pub min_samples_leaf: usize,
}

impl Default for RsfParams {
    fn default() -> Self {
        Self { n_trees: 100, max_features: None, min_samples_split: 6, min_events_split: 3, min_samples_leaf: 3 }
    }
}

impl RsfParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(MsbError::config("rsf needs at least one tree"));
        }
        if self.max_features == Some(0) || self.min_samples_leaf == 0 {
            return Err(MsbError::config("rsf max_features and min_samples_leaf must be positive"));
        }
        Ok(())
    }
}

/// How a split treats missing values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingRouting {
    /// Missing values join the `≤ threshold` branch.
    Left,
    /// Missing values join the `> threshold` branch.
    Right,
    /// Missing values form one branch, every observed value the other.
    Alone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split { feature: usize, threshold: f64, missing_left: bool, left: usize, right: usize },
    Leaf(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Leaf {
    hazard: StepCurve,
    /// Σ over the training event grid of the leaf cumulative hazard.
    risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Tree {
    nodes: Vec<Node>,
    leaves: Vec<Leaf>,
}

impl Tree {
    fn leaf_for(&self, row: &[f64]) -> &Leaf {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(l) => return &self.leaves[l],
                Node::Split { feature, threshold, missing_left, left, right } => {
                    let v = row[feature];
                    let go_left = if is_missing(v) { missing_left } else { v <= threshold };
                    at = if go_left { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsfModel {
    trees: Vec<Tree>,
    n_features: usize,
    /// Distinct training event times.
    event_grid: Vec<f64>,
    /// Out-of-bag risk per training row (NaN if never out of bag).
    #[serde(with = "crate::serde_nan::vec")]
    oob_risk: Vec<f64>,
}

/// Best split found for one candidate column.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    statistic: f64,
    threshold: f64,
    missing_left: bool,
}

struct Grower<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [SurvivalOutcome],
    params: &'a RsfParams,
    mtry: usize,
    event_grid: &'a [f64],
}

impl Grower<'_> {
    fn leaf(&self, samples: &[usize]) -> Leaf {
        let members: Vec<SurvivalOutcome> = samples.iter().map(|&i| self.y[i]).collect();
        let hazard = nelson_aalen(&members).expect("leaf is nonempty");
        let risk = self.event_grid.iter().map(|&t| hazard.eval(t)).sum();
        Leaf { hazard, risk }
    }

    fn best_for_feature(&self, samples: &[usize], scan: &LogRankScan, feature: usize) -> Option<Candidate> {
        let min_leaf = self.params.min_samples_leaf;
        let total_events = scan.total_events();
        let n = samples.len();
        let mut observed: Vec<(f64, usize)> = Vec::with_capacity(n);
        let mut missing: Vec<usize> = Vec::new();
        for (local, &row) in samples.iter().enumerate() {
            let v = self.x[[row, feature]];
            if is_missing(v) {
                missing.push(local);
            } else {
                observed.push((v, local));
            }
        }
        observed.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best: Option<Candidate> = None;
        let mut consider = |stat: Option<f64>, threshold: f64, missing_left: bool| {
            if let Some(s) = stat {
                if best.is_none_or(|b| s > b.statistic) {
                    best = Some(Candidate { statistic: s, threshold, missing_left });
                }
            }
        };
        let valid = |size: usize, events: usize| {
            size >= min_leaf && n - size >= min_leaf && events >= 1 && total_events - events >= 1
        };

        // missing values routed right (or absent)
        let mut left = scan.group();
        for w in 0..observed.len().saturating_sub(1) {
            left.add(observed[w].1);
            let (a, b) = (observed[w].0, observed[w + 1].0);
            if a < b && valid(left.size(), left.events()) {
                let missing_left = if missing.is_empty() { left.size() * 2 >= n } else { false };
                consider(left.statistic(), 0.5 * (a + b), missing_left);
            }
        }
        if missing.is_empty() {
            return best;
        }
        // missing values routed left
        let mut left = scan.group();
        for &m in &missing {
            left.add(m);
        }
        for w in 0..observed.len().saturating_sub(1) {
            left.add(observed[w].1);
            let (a, b) = (observed[w].0, observed[w + 1].0);
            if a < b && valid(left.size(), left.events()) {
                consider(left.statistic(), 0.5 * (a + b), true);
            }
        }
        // missing alone: every observed value goes left
        if !observed.is_empty() {
            let mut obs = scan.group();
            for &(_, j) in &observed {
                obs.add(j);
            }
            if valid(obs.size(), obs.events()) {
                consider(obs.statistic(), f64::MAX, false);
            }
        }
        best
    }

    fn grow(&self, bootstrap: Vec<usize>, rng: &mut impl Rng) -> Tree {
        let p = self.x.ncols();
        let mut nodes = Vec::new();
        let mut leaves = Vec::new();
        let mut stack = vec![(0usize, bootstrap)];
        nodes.push(Node::Leaf(usize::MAX));
        while let Some((id, samples)) = stack.pop() {
            let outcomes: Vec<SurvivalOutcome> = samples.iter().map(|&i| self.y[i]).collect();
            let events = outcomes.iter().filter(|o| o.event).count();
            let mut chosen: Option<(usize, Candidate)> = None;
            if samples.len() >= self.params.min_samples_split && events >= self.params.min_events_split {
                let scan = LogRankScan::new(&outcomes);
                for f in index::sample(rng, p, self.mtry.min(p)) {
                    if let Some(c) = self.best_for_feature(&samples, &scan, f) {
                        if chosen.is_none_or(|(_, b)| c.statistic > b.statistic) {
                            chosen = Some((f, c));
                        }
                    }
                }
            }
            match chosen {
                None => {
                    nodes[id] = Node::Leaf(leaves.len());
                    leaves.push(self.leaf(&samples));
                }
                Some((feature, c)) => {
                    let (mut l, mut r) = (Vec::new(), Vec::new());
                    for &i in &samples {
                        let v = self.x[[i, feature]];
                        let go_left = if is_missing(v) { c.missing_left } else { v <= c.threshold };
                        if go_left {
                            l.push(i);
                        } else {
                            r.push(i);
                        }
                    }
                    let (li, ri) = (nodes.len(), nodes.len() + 1);
                    nodes.push(Node::Leaf(usize::MAX));
                    nodes.push(Node::Leaf(usize::MAX));
                    nodes[id] = Node::Split {
                        feature,
                        threshold: c.threshold,
                        missing_left: c.missing_left,
                        left: li,
                        right: ri,
                    };
                    stack.push((ri, r));
                    stack.push((li, l));
                }
            }
        }
        Tree { nodes, leaves }
    }
}

impl RsfModel {
    pub(crate) fn fit(
        params: &RsfParams,
        seed: u64,
        x: ArrayView2<f64>,
        y: &[SurvivalOutcome],
        allow_missing: bool,
    ) -> Result<Self> {
        if !allow_missing && x.iter().any(|v| is_missing(*v)) {
            return Err(MsbError::invalid("rsf without missing-value support got a missing cell"));
        }
        let (n, p) = x.dim();
        let mut event_grid: Vec<f64> = y.iter().filter(|o| o.event).map(|o| o.time).collect();
        event_grid.sort_by(f64::total_cmp);
        event_grid.dedup();
        let mtry = params.max_features.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).max(1);
        let grower = Grower { x, y, params, mtry, event_grid: &event_grid };

        let grown: Vec<(Tree, Vec<bool>)> = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = seeds::rng(seed, "rsf-tree", &[t as u64]);
                let bootstrap: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut in_bag = vec![false; n];
                for &i in &bootstrap {
                    in_bag[i] = true;
                }
                (grower.grow(bootstrap, &mut rng), in_bag)
            })
            .collect();

        let mut oob_sum = vec![0.0; n];
        let mut oob_cnt = vec![0usize; n];
        for (tree, in_bag) in &grown {
            for i in (0..n).filter(|&i| !in_bag[i]) {
                let row = x.row(i).to_vec();
                oob_sum[i] += tree.leaf_for(&row).risk;
                oob_cnt[i] += 1;
            }
        }
        let oob_risk =
            oob_sum.iter().zip(&oob_cnt).map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect();
        Ok(Self { trees: grown.into_iter().map(|(t, _)| t).collect(), n_features: p, event_grid, oob_risk })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn event_grid(&self) -> &[f64] {
        &self.event_grid
    }

    pub fn oob_risk(&self) -> &[f64] {
        &self.oob_risk
    }

    /// Leaf cumulative hazard curves reached by `row`, one per tree.
    pub fn leaf_hazards(&self, row: &[f64]) -> Vec<&StepCurve> {
        self.trees.iter().map(|t| &t.leaf_for(row).hazard).collect()
    }

    /// Ensemble cumulative hazard summed over the training event grid.
    pub fn predict_risk(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let t = self.trees.len() as f64;
        x.rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                self.trees.iter().map(|tree| tree.leaf_for(&row).risk).sum::<f64>() / t
            })
            .collect()
    }

    /// Ensemble cumulative hazard on `grid`.
    pub fn predict_hazard(&self, x: ArrayView2<f64>, grid: &[f64]) -> Vec<Vec<f64>> {
        let t = self.trees.len() as f64;
        x.rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                let mut acc = vec![0.0; grid.len()];
                for tree in &self.trees {
                    let h = &tree.leaf_for(&row).hazard;
                    for (a, &g) in acc.iter_mut().zip(grid) {
                        *a += h.eval(g);
                    }
                }
                acc.iter_mut().for_each(|a| *a /= t);
                acc
            })
            .collect()
    }

    pub fn predict_survival(&self, x: ArrayView2<f64>, grid: &[f64]) -> Vec<StepCurve> {
        self.predict_hazard(x, grid)
            .into_iter()
            .map(|h| {
                let values = h.iter().map(|v| (-v).exp()).collect();
                StepCurve::new(grid.to_vec(), values, 1.0).expect("grid validated by caller")
            })
            .collect()
    }
}

/// Log-rank statistics of the three ways to route missing values at a
/// threshold. `None` marks a routing that leaves one side empty or without
/// events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiaScores {
    pub left: Option<f64>,
    pub right: Option<f64>,
    pub alone: Option<f64>,
}

impl MiaScores {
    /// Highest-scoring routing; ties (up to rounding) resolve in the order
    /// left, right, alone.
    pub fn best(&self) -> Option<(MissingRouting, f64)> {
        [(MissingRouting::Left, self.left), (MissingRouting::Right, self.right), (MissingRouting::Alone, self.alone)]
            .into_iter()
            .filter_map(|(r, s)| s.map(|s| (r, s)))
            .fold(None, |acc: Option<(MissingRouting, f64)>, (r, s)| match acc {
                Some((_, b)) if b >= s - 1e-9 * s.abs().max(1.0) => acc,
                _ => Some((r, s)),
            })
    }
}

/// Scores each routing of missing `values` at `threshold` with the same
/// incremental log-rank machinery used to grow trees.
pub fn route_missing(values: &[f64], threshold: f64, outcomes: &[SurvivalOutcome]) -> Result<MiaScores> {
    if values.len() != outcomes.len() {
        return Err(MsbError::DimensionMismatch { expected: outcomes.len(), found: values.len() });
    }
    let scan = LogRankScan::new(outcomes);
    let n = values.len();
    let total_events = scan.total_events();
    let score = |left: Vec<usize>| -> Option<f64> {
        let mut g = scan.group();
        for j in left {
            g.add(j);
        }
        let ok = g.size() > 0 && g.size() < n && g.events() >= 1 && total_events - g.events() >= 1;
        if ok {
            g.statistic()
        } else {
            None
        }
    };
    let below: Vec<usize> = (0..n).filter(|&i| !is_missing(values[i]) && values[i] <= threshold).collect();
    let missing: Vec<usize> = (0..n).filter(|&i| is_missing(values[i])).collect();
    let observed: Vec<usize> = (0..n).filter(|&i| !is_missing(values[i])).collect();
    let with_missing: Vec<usize> = missing.iter().chain(&below).copied().collect();
    Ok(MiaScores {
        left: score(with_missing),
        right: score(below),
        alone: if missing.is_empty() { None } else { score(observed) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::c_index;
    use ndarray::Array2;

    fn noise(seed: u64, n: usize, p: usize) -> (Array2<f64>, Vec<SurvivalOutcome>) {
        let mut rng = seeds::rng(seed, "rsf-noise", &[]);
        let x = Array2::from_shape_fn((n, p), |_| rng.random::<f64>());
        let y = (0..n).map(|_| SurvivalOutcome::new(rng.random_range(1.0..100.0), rng.random::<f64>() < 0.7)).collect();
        (x, y)
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = noise(1, 60, 4);
        let params = RsfParams { n_trees: 10, ..Default::default() };
        let a = RsfModel::fit(&params, 9, x.view(), &y, false).unwrap();
        let b = RsfModel::fit(&params, 9, x.view(), &y, false).unwrap();
        assert_eq!(a, b);
        let c = RsfModel::fit(&params, 10, x.view(), &y, false).unwrap();
        assert_ne!(a.predict_risk(x.view()), c.predict_risk(x.view()));
    }

    #[test]
    fn risk_is_sum_of_leaf_hazards_over_grid() {
        let (x, y) = noise(2, 40, 3);
        let params = RsfParams { n_trees: 2, ..Default::default() };
        let m = RsfModel::fit(&params, 3, x.view(), &y, false).unwrap();
        let risk = m.predict_risk(x.view());
        let grid = m.event_grid().to_vec();
        let surv = m.predict_survival(x.view(), &grid);
        for i in 0..x.nrows() {
            let row = x.row(i).to_vec();
            let per_tree: Vec<f64> =
                m.leaf_hazards(&row).iter().map(|h| grid.iter().map(|&t| h.eval(t)).sum::<f64>()).collect();
            let brute = (per_tree[0] + per_tree[1]) / 2.0;
            assert!((risk[i] - brute).abs() < 1e-9);
            let end = *grid.last().unwrap();
            let terminal: f64 = m.leaf_hazards(&row).iter().map(|h| h.eval(end)).sum::<f64>() / 2.0;
            assert!((surv[i].eval(end) - (-terminal).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn oob_concordance_near_half_on_noise() {
        let params = RsfParams { n_trees: 50, ..Default::default() };
        let mut total = 0.0;
        for seed in 0..10 {
            let (x, y) = noise(100 + seed, 100, 5);
            let m = RsfModel::fit(&params, seed, x.view(), &y, false).unwrap();
            let keep: Vec<usize> = (0..100).filter(|&i| !m.oob_risk()[i].is_nan()).collect();
            let yy: Vec<_> = keep.iter().map(|&i| y[i]).collect();
            let rr: Vec<_> = keep.iter().map(|&i| m.oob_risk()[i]).collect();
            total += c_index(&yy, &rr).unwrap();
        }
        let mean = total / 10.0;
        assert!((mean - 0.5).abs() <= 0.1, "mean OOB c-index {mean}");
    }

    #[test]
    fn survival_curves_valid() {
        let (x, y) = noise(4, 50, 3);
        let m = RsfModel::fit(&RsfParams { n_trees: 5, ..Default::default() }, 0, x.view(), &y, false).unwrap();
        let grid: Vec<f64> = (0..=20).map(|k| f64::from(k) * 5.0).collect();
        for s in m.predict_survival(x.view(), &grid) {
            assert_eq!(s.eval(0.0), 1.0);
            assert!(s.values().windows(2).all(|w| w[1] <= w[0]));
            assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn routing_reduces_to_plain_split_without_missing() {
        let y: Vec<_> = (1..=6).map(|t| SurvivalOutcome::new(f64::from(t), true)).collect();
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s = route_missing(&v, 3.5, &y).unwrap();
        assert_eq!(s.left, s.right);
        assert_eq!(s.alone, None);
    }
}
