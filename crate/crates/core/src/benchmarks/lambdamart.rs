//! LambdaMART: gradient-boosted regression trees fitted to pairwise lambda
//! gradients weighted by the NDCG change of swapping each pair.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{macd_signal, past_return_signal, MACD_PAIRS};
use crate::error::{Error, Result};
use crate::marketdata::{PricePanel, ReturnsPanel, VolPanel};
use crate::ANNUALISATION;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub reg_alpha: f64,
    pub reg_lambda: f64,
    pub min_child_weight: f64,
    /// Rounds without validation NDCG improvement before stopping.
    pub early_stopping: usize,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_depth: 6,
            learning_rate: 0.1,
            reg_alpha: 1e-6,
            reg_lambda: 1e-6,
            min_child_weight: 1e-3,
            early_stopping: 25,
        }
    }
}

/// Query groups of items with feature rows and graded relevance labels.
#[derive(Debug, Clone, Default)]
pub struct RankDataset {
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
    pub groups: Vec<Range<usize>>,
}

impl RankDataset {
    pub fn new(features: Array2<f64>, labels: Vec<f64>, groups: Vec<Range<usize>>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape("features and labels differ in length".into()));
        }
        let mut expect = 0;
        for g in &groups {
            if g.start != expect || g.end < g.start {
                return Err(Error::Shape("groups must tile the rows in order".into()));
            }
            expect = g.end;
        }
        if expect != labels.len() {
            return Err(Error::Shape("groups do not cover every row".into()));
        }
        Ok(Self { features, labels, groups })
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaMart {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub n_features: usize,
}

impl LambdaMart {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| self.learning_rate * t.predict(x)).sum()
    }

    pub fn predict(&self, features: &Array2<f64>) -> Vec<f64> {
        features
            .rows()
            .into_iter()
            .map(|r| self.predict_row(r.as_slice().expect("standard layout")))
            .collect()
    }
}

fn gain_term(g: f64, h: f64, alpha: f64, lambda: f64) -> f64 {
    let t = g.signum() * (g.abs() - alpha).max(0.0);
    t * t / (h + lambda)
}

fn leaf_value(g: f64, h: f64, alpha: f64, lambda: f64) -> f64 {
    let t = g.signum() * (g.abs() - alpha).max(0.0);
    if h + lambda > 0.0 {
        -t / (h + lambda)
    } else {
        0.0
    }
}

struct TreeBuilder<'a> {
    x: &'a Array2<f64>,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a LmParams,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    /// `sorted[f]` lists this node's rows ordered by feature `f`.
    fn build(&mut self, sorted: Vec<Vec<usize>>, depth: usize) -> usize {
        let rows = &sorted[0];
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let (alpha, lambda) = (self.params.reg_alpha, self.params.reg_lambda);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(leaf_value(g, h, alpha, lambda)));
        if depth >= self.params.max_depth || rows.len() < 2 {
            return id;
        }
        let parent = gain_term(g, h, alpha, lambda);
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in sorted.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..order.len() - 1 {
                let i = order[k];
                gl += self.grad[i];
                hl += self.hess[i];
                let (a, b) = (self.x[[i, f]], self.x[[order[k + 1], f]]);
                if a == b {
                    continue;
                }
                let (gr, hr) = (g - gl, h - hl);
                if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                    continue;
                }
                let gain = 0.5 * (gain_term(gl, hl, alpha, lambda) + gain_term(gr, hr, alpha, lambda) - parent);
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, 0.5 * (a + b)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };
        let goes_left = |i: usize| self.x[[i, feature]] < threshold;
        let (left_sorted, right_sorted): (Vec<Vec<usize>>, Vec<Vec<usize>>) = sorted
            .iter()
            .map(|order| order.iter().partition(|&&i| goes_left(i)))
            .unzip();
        let left = self.build(left_sorted, depth + 1);
        let right = self.build(right_sorted, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

fn gain_of(label: f64) -> f64 {
    2f64.powf(label) - 1.0
}

fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

/// Positions of items when sorted by descending score, ties by index.
fn rank_positions(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut pos = vec![0; scores.len()];
    for (p, &i) in idx.iter().enumerate() {
        pos[i] = p;
    }
    pos
}

fn ideal_dcg(labels: &[f64]) -> f64 {
    let mut l = labels.to_vec();
    l.sort_by(|a, b| b.total_cmp(a));
    l.iter().enumerate().map(|(p, x)| gain_of(*x) * discount(p)).sum()
}

/// NDCG over the full list; groups with no relevant item count as 1.
pub fn ndcg(scores: &[f64], labels: &[f64]) -> f64 {
    let idcg = ideal_dcg(labels);
    if idcg <= 0.0 {
        return 1.0;
    }
    let pos = rank_positions(scores);
    let dcg: f64 = labels.iter().zip(&pos).map(|(l, p)| gain_of(*l) * discount(*p)).sum();
    dcg / idcg
}

pub fn mean_ndcg(data: &RankDataset, scores: &[f64]) -> f64 {
    let groups: Vec<&Range<usize>> = data.groups.iter().filter(|g| g.len() > 1).collect();
    if groups.is_empty() {
        return 1.0;
    }
    groups
        .iter()
        .map(|g| ndcg(&scores[(*g).clone()], &data.labels[(*g).clone()]))
        .sum::<f64>()
        / groups.len() as f64
}

/// Lambda gradients and hessians for the current scores.
pub fn lambda_gradients(data: &RankDataset, scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = data.labels.len();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for g in &data.groups {
        if g.len() < 2 {
            continue;
        }
        let labels = &data.labels[g.clone()];
        let s = &scores[g.clone()];
        let idcg = ideal_dcg(labels);
        if idcg <= 0.0 {
            continue;
        }
        let pos = rank_positions(s);
        for a in 0..g.len() {
            for b in 0..g.len() {
                if labels[a] <= labels[b] {
                    continue;
                }
                let delta = ((gain_of(labels[a]) - gain_of(labels[b])) * (discount(pos[a]) - discount(pos[b]))).abs()
                    / idcg;
                let rho = 1.0 / (1.0 + (s[a] - s[b]).exp());
                grad[g.start + a] -= rho * delta;
                grad[g.start + b] += rho * delta;
                let h = rho * (1.0 - rho) * delta;
                hess[g.start + a] += h;
                hess[g.start + b] += h;
            }
        }
    }
    (grad, hess)
}

/// Boosts trees on lambda gradients. With a validation set, keeps the prefix
/// of trees with the best validation NDCG and stops after
/// `params.early_stopping` rounds without improvement.
pub fn fit(train: &RankDataset, valid: Option<&RankDataset>, params: &LmParams) -> Result<LambdaMart> {
    if train.labels.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let nf = train.n_features();
    let n = train.labels.len();
    let presorted: Vec<Vec<usize>> = (0..nf)
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| train.features[[a, f]].total_cmp(&train.features[[b, f]]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut model = LambdaMart {
        trees: Vec::new(),
        learning_rate: params.learning_rate,
        n_features: nf,
    };
    let mut scores = vec![0.0; n];
    let mut valid_scores = valid.map(|v| vec![0.0; v.labels.len()]);
    let mut best = (valid.map_or(0.0, |v| mean_ndcg(v, valid_scores.as_ref().unwrap())), 0usize);
    for round in 0..params.n_estimators {
        let (grad, hess) = lambda_gradients(train, &scores);
        let mut builder = TreeBuilder {
            x: &train.features,
            grad: &grad,
            hess: &hess,
            params,
            nodes: Vec::new(),
        };
        builder.build(presorted.clone(), 0);
        let tree = Tree { nodes: builder.nodes };
        for (i, s) in scores.iter_mut().enumerate() {
            *s += params.learning_rate * tree.predict(train.features.row(i).as_slice().unwrap());
        }
        if let (Some(v), Some(vs)) = (valid, valid_scores.as_mut()) {
            for (i, s) in vs.iter_mut().enumerate() {
                *s += params.learning_rate * tree.predict(v.features.row(i).as_slice().unwrap());
            }
            let score = mean_ndcg(v, vs);
            model.trees.push(tree);
            if score > best.0 {
                best = (score, round + 1);
            } else if round + 1 - best.1 >= params.early_stopping {
                break;
            }
        } else {
            model.trees.push(tree);
        }
    }
    if valid.is_some() {
        model.trees.truncate(best.1);
    }
    Ok(model)
}

pub const N_LM_FEATURES: usize = 10;
const LM_LOOKBACKS: [usize; 6] = [1, 5, 21, 63, 126, 252];
pub const LM_GRADES: usize = 5;

/// Per-date LM features: returns over {1, 5, 21, 63, 126, 252} days divided
/// by `σ_daily·√k`, the three MACD indicators and the combined MACD.
/// `None` rows lack history. Rows align with `returns`.
pub fn lm_features(prices: &PricePanel, returns: &ReturnsPanel, vol: &VolPanel) -> Result<Vec<Option<Array2<f64>>>> {
    let (n, a) = returns.values.dim();
    let past: Vec<_> = LM_LOOKBACKS
        .iter()
        .map(|&k| past_return_signal(returns, k))
        .collect::<Result<_>>()?;
    let mut macds = Vec::new();
    for &pair in &MACD_PAIRS {
        macds.push(super::align_to_returns(&macd_signal(prices, Some(pair))?, returns)?);
    }
    macds.push(super::align_to_returns(&macd_signal(prices, None)?, returns)?);
    let ann = ANNUALISATION.sqrt();
    Ok((0..n)
        .map(|t| {
            let mut f = Array2::zeros((a, N_LM_FEATURES));
            for i in 0..a {
                let sd = vol.values[[t, i]] / ann;
                if !(sd > 0.0) {
                    return None;
                }
                for (j, (s, &k)) in past.iter().zip(&LM_LOOKBACKS).enumerate() {
                    f[[i, j]] = s.values[[t, i]]? / (sd * (k as f64).sqrt());
                }
                for (j, m) in macds.iter().enumerate() {
                    f[[i, 6 + j]] = m.values[[t, i]]?;
                }
            }
            Some(f)
        })
        .collect())
}

/// Grades `0..LM_GRADES` from the per-date quantile of the next-day
/// vol-scaled return.
pub fn lm_labels(next_scaled: &[f64]) -> Vec<f64> {
    let ranks = crate::stats::ranks(next_scaled);
    let n = next_scaled.len() as f64;
    ranks
        .iter()
        .map(|r| (((r - 1.0) / n) * LM_GRADES as f64).floor().min((LM_GRADES - 1) as f64))
        .collect()
}

/// Stacks per-date features for `rows` into a dataset; rows without
/// features are skipped. Labels use the return one row ahead.
pub fn lm_dataset(
    features: &[Option<Array2<f64>>],
    returns: &ReturnsPanel,
    vol: &VolPanel,
    rows: Range<usize>,
) -> Result<RankDataset> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let a = returns.n_assets();
    for t in rows {
        if t + 1 >= returns.n_rows() {
            break;
        }
        let Some(f) = &features[t] else { continue };
        let next: Vec<f64> = (0..a)
            .map(|i| {
                let r = returns.values[[t + 1, i]];
                let r = if r.is_finite() { r } else { 0.0 };
                r / vol.values[[t, i]]
            })
            .collect();
        let start = labels.len();
        labels.extend(lm_labels(&next));
        feats.extend(f.iter().copied());
        groups.push(start..labels.len());
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, N_LM_FEATURES), feats).map_err(|e| Error::Shape(e.to_string()))?;
    RankDataset::new(features, labels, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n_groups: usize, seed: u64, scale: f64) -> RankDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for _ in 0..n_groups {
            let start = labels.len();
            let xs: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            let grades = crate::stats::ranks(&xs);
            for (x, g) in xs.iter().zip(&grades) {
                feats.push(scale * x);
                labels.push(g - 1.0);
            }
            groups.push(start..labels.len());
        }
        let n = labels.len();
        RankDataset::new(Array2::from_shape_vec((n, 1), feats).unwrap(), labels, groups).unwrap()
    }

    /// Each group holds the levels 0..5 in random order; label = level.
    fn separable(n_groups: usize, seed: u64) -> RankDataset {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = Vec::new();
        let mut groups = Vec::new();
        for g in 0..n_groups {
            let mut levels = vec![0.0, 1.0, 2.0, 3.0, 4.0];
            levels.shuffle(&mut rng);
            feats.extend(levels);
            groups.push(5 * g..5 * g + 5);
        }
        let labels = feats.clone();
        RankDataset::new(Array2::from_shape_vec((5 * n_groups, 1), feats).unwrap(), labels, groups).unwrap()
    }

    #[test]
    fn separable_toy_reaches_perfect_ndcg() {
        let train = separable(40, 1);
        let params = LmParams {
            n_estimators: 50,
            max_depth: 6,
            learning_rate: 0.3,
            ..Default::default()
        };
        let m = fit(&train, None, &params).unwrap();
        assert!(m.trees.len() <= 50);
        // Every ordering of the five levels is a possible held-out group.
        let mut perms = vec![vec![]];
        for _ in 0..5 {
            perms = perms
                .into_iter()
                .flat_map(|p: Vec<f64>| {
                    (0..5)
                        .filter(|v| !p.contains(&(*v as f64)))
                        .map(|v| {
                            let mut q = p.clone();
                            q.push(v as f64);
                            q
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
        }
        assert_eq!(perms.len(), 120);
        for p in perms {
            let x = Array2::from_shape_vec((5, 1), p.clone()).unwrap();
            assert!((ndcg(&m.predict(&x), &p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_labels_give_constant_scores() {
        let mut d = toy(10, 3, 1.0);
        d.labels.iter_mut().for_each(|l| *l = 2.0);
        let (g, h) = lambda_gradients(&d, &vec![0.0; d.labels.len()]);
        assert!(g.iter().all(|x| *x == 0.0) && h.iter().all(|x| *x == 0.0));
        let m = fit(&d, None, &LmParams { n_estimators: 5, ..Default::default() }).unwrap();
        let s = m.predict(&d.features);
        assert!(s.iter().all(|x| *x == s[0]));
    }

    #[test]
    fn ordering_invariant_to_monotone_rescaling() {
        let train = toy(30, 4, 1.0);
        let scaled = toy(30, 4, 7.5);
        let params = LmParams { n_estimators: 10, max_depth: 3, learning_rate: 0.3, ..Default::default() };
        let a = fit(&train, None, &params).unwrap();
        let b = fit(&scaled, None, &params).unwrap();
        let probe = toy(10, 5, 1.0);
        let probe_scaled = toy(10, 5, 7.5);
        let sa = a.predict(&probe.features);
        let sb = b.predict(&probe_scaled.features);
        for g in &probe.groups {
            assert_eq!(rank_positions(&sa[g.clone()]), rank_positions(&sb[g.clone()]));
        }
    }

    #[test]
    fn single_item_groups_are_skipped() {
        let d = RankDataset::new(Array2::zeros((3, 1)), vec![1.0, 0.0, 3.0], vec![0..1, 1..2, 2..3]).unwrap();
        let (g, _) = lambda_gradients(&d, &[0.0; 3]);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn early_stopping_truncates_to_best_round() {
        let train = toy(30, 6, 1.0);
        let valid = toy(10, 7, 1.0);
        let params = LmParams { n_estimators: 60, early_stopping: 3, learning_rate: 0.3, ..Default::default() };
        let m = fit(&train, Some(&valid), &params).unwrap();
        assert!(m.trees.len() < 60);
    }

    #[test]
    fn label_grades_are_quintiles() {
        let l = lm_labels(&[0.5, -0.1, 0.2, 0.9, -0.7, 0.0, 0.3, 0.1, -0.2, 0.4]);
        assert_eq!(l, vec![4.0, 1.0, 2.0, 4.0, 0.0, 1.0, 3.0, 2.0, 0.0, 3.0]);
    }
}
