//! Hyperparameter search over finite grids: Random Search, Hyperband and
//! Gaussian-process Bayesian optimisation.
//!
//! Objectives are minimised. A trial returning a non-finite loss counts as
//! failed (infinite loss) and the search continues.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named grid axes; every parameter takes one of its listed values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<(String, Vec<f64>)>,
}

impl SearchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, values: &[f64]) -> Self {
        self.params.push((name.to_string(), values.to_vec()));
        self
    }

    /// Number of grid points.
    pub fn size(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).product()
    }

    fn validate(&self) -> Result<()> {
        if self.params.is_empty() || self.params.iter().any(|(_, v)| v.is_empty()) {
            return Err(Error::InvalidArgument("empty search space".into()));
        }
        Ok(())
    }

    fn point(&self, idx: &[usize]) -> Trial {
        self.params
            .iter()
            .zip(idx)
            .map(|((k, v), &i)| (k.clone(), v[i]))
            .collect()
    }

    fn random_index(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        self.params.iter().map(|(_, v)| rng.random_range(0..v.len())).collect()
    }

    fn all_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for (_, v) in &self.params {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..v.len()).map(move |i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Up to `n` distinct grid indices in random order.
    fn distinct_sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        if self.size() <= n.max(1) * 4 {
            let mut all = self.all_indices();
            all.shuffle(rng);
            all.truncate(n);
            return all;
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        while out.len() < n {
            let idx = self.random_index(rng);
            if seen.insert(idx.clone()) {
                out.push(idx);
            }
        }
        out
    }

    /// Grid coordinates scaled to `[0, 1]` per axis.
    fn unit_coords(&self, idx: &[usize]) -> Vec<f64> {
        self.params
            .iter()
            .zip(idx)
            .map(|((_, v), &i)| if v.len() > 1 { i as f64 / (v.len() - 1) as f64 } else { 0.0 })
            .collect()
    }
}

pub type Trial = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum TunerMethod {
    Hyperband {
        max_epochs: usize,
        factor: usize,
        iterations: usize,
    },
    Bayesian {
        max_trials: usize,
        initial_points: usize,
        noise: f64,
        beta: f64,
        trial_patience: usize,
    },
    Random {
        max_trials: usize,
        trial_patience: usize,
    },
}

impl TunerMethod {
    pub fn hyperband() -> Self {
        TunerMethod::Hyperband {
            max_epochs: 10,
            factor: 3,
            iterations: 1,
        }
    }

    pub fn bayesian() -> Self {
        TunerMethod::Bayesian {
            max_trials: 25,
            initial_points: 20,
            noise: 0.001,
            beta: 10.0,
            trial_patience: 5,
        }
    }

    pub fn random() -> Self {
        TunerMethod::Random {
            max_trials: 50,
            trial_patience: 25,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TunerMethod::Hyperband { .. } => "HB",
            TunerMethod::Bayesian { .. } => "BO",
            TunerMethod::Random { .. } => "RS",
        }
    }
}

/// Training budget handed to the objective for one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialBudget {
    /// Epoch cap; `None` means the objective's own default.
    pub max_epochs: Option<usize>,
    /// Early-stopping patience; `None` means the objective's own default.
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: usize,
    pub params: Trial,
    pub budget: TrialBudget,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: Trial,
    pub best_loss: f64,
    pub trials: Vec<TrialRecord>,
}

struct Runner<'a, F> {
    space: &'a SearchSpace,
    objective: F,
    trials: Vec<TrialRecord>,
}

impl<F: FnMut(&Trial, TrialBudget) -> Result<f64>> Runner<'_, F> {
    fn run(&mut self, idx: &[usize], budget: TrialBudget) -> Result<f64> {
        let params = self.space.point(idx);
        let loss = (self.objective)(&params, budget)?;
        let loss = if loss.is_finite() { loss } else { f64::INFINITY };
        self.trials.push(TrialRecord {
            id: self.trials.len(),
            params,
            budget,
            loss,
        });
        Ok(loss)
    }

    fn finish(self) -> Result<TuneResult> {
        let best = self
            .trials
            .iter()
            .filter(|t| t.loss.is_finite())
            .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.id.cmp(&b.id)))
            .ok_or_else(|| Error::Degenerate("every tuning trial failed".into()))?;
        Ok(TuneResult {
            best: best.params.clone(),
            best_loss: best.loss,
            trials: self.trials,
        })
    }
}

/// Runs `method` over `space`. The objective receives a parameter set and a
/// budget and returns a validation loss.
pub fn tune<F>(space: &SearchSpace, method: TunerMethod, seed: u64, objective: F) -> Result<TuneResult>
where
    F: FnMut(&Trial, TrialBudget) -> Result<f64>,
{
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runner = Runner {
        space,
        objective,
        trials: Vec::new(),
    };
    match method {
        TunerMethod::Random {
            max_trials,
            trial_patience,
        } => {
            let budget = TrialBudget {
                max_epochs: None,
                patience: Some(trial_patience),
            };
            for idx in space.distinct_sample(max_trials, &mut rng) {
                runner.run(&idx, budget)?;
            }
        }
        TunerMethod::Hyperband {
            max_epochs,
            factor,
            iterations,
        } => {
            for _ in 0..iterations {
                for bracket in hyperband_brackets(max_epochs, factor) {
                    let mut configs = space.distinct_sample(bracket[0].0, &mut rng);
                    for (round, &(keep, epochs)) in bracket.iter().enumerate() {
                        configs.truncate(keep);
                        let budget = TrialBudget {
                            max_epochs: Some(epochs),
                            patience: None,
                        };
                        let mut scored = Vec::with_capacity(configs.len());
                        for idx in &configs {
                            scored.push((runner.run(idx, budget)?, idx.clone()));
                        }
                        if round + 1 < bracket.len() {
                            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
                            configs = scored.into_iter().map(|(_, i)| i).collect();
                        }
                    }
                }
            }
        }
        TunerMethod::Bayesian {
            max_trials,
            initial_points,
            noise,
            beta,
            trial_patience,
        } => {
            let budget = TrialBudget {
                max_epochs: None,
                patience: Some(trial_patience),
            };
            let n_init = initial_points.min(max_trials);
            let mut evaluated: Vec<(Vec<usize>, f64)> = Vec::new();
            for idx in space.distinct_sample(n_init, &mut rng) {
                let loss = runner.run(&idx, budget)?;
                evaluated.push((idx, loss));
            }
            while evaluated.len() < max_trials {
                let seen: BTreeSet<Vec<usize>> = evaluated.iter().map(|(i, _)| i.clone()).collect();
                if seen.len() >= space.size() {
                    break;
                }
                let candidates: Vec<Vec<usize>> = if space.size() <= 4096 {
                    space.all_indices().into_iter().filter(|i| !seen.contains(i)).collect()
                } else {
                    (0..2048)
                        .map(|_| space.random_index(&mut rng))
                        .filter(|i| !seen.contains(i))
                        .collect()
                };
                if candidates.is_empty() {
                    break;
                }
                let xs: Vec<Vec<f64>> = evaluated.iter().map(|(i, _)| space.unit_coords(i)).collect();
                let ys: Vec<f64> = evaluated.iter().map(|(_, l)| *l).collect();
                let gp = GaussianProcess::fit(&xs, &ys, noise)?;
                let next = candidates
                    .into_iter()
                    .map(|c| {
                        let (mu, sd) = gp.predict(&space.unit_coords(&c));
                        (mu - beta * sd, c)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, c)| c)
                    .unwrap();
                let loss = runner.run(&next, budget)?;
                evaluated.push((next, loss));
            }
        }
    }
    runner.finish()
}

/// Successive-halving schedule per bracket as `(configs, epochs)` rounds.
///
/// With `max_epochs = 10` and `factor = 3` the brackets are
/// `[(9, 1), (3, 3), (1, 10)]`, `[(5, 3), (1, 10)]` and `[(3, 10)]`.
pub fn hyperband_brackets(max_epochs: usize, factor: usize) -> Vec<Vec<(usize, usize)>> {
    let r = max_epochs.max(1) as f64;
    let eta = factor.max(2) as f64;
    let s_max = (r.ln() / eta.ln() + 1e-9).floor() as i32;
    let b = (s_max + 1) as f64;
    (0..=s_max)
        .rev()
        .map(|s| {
            let n = (b / (s as f64 + 1.0) * eta.powi(s)).ceil();
            let r0 = r * eta.powi(-s);
            (0..=s)
                .map(|i| {
                    let n_i = (n * eta.powi(-i)).floor().max(1.0) as usize;
                    let r_i = (r0 * eta.powi(i)).round().clamp(1.0, r) as usize;
                    (n_i, r_i)
                })
                .collect()
        })
        .collect()
}

/// Gaussian-process regression with a unit-length-scale RBF kernel on
/// standardised targets.
struct GaussianProcess {
    xs: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    y_mean: f64,
    y_std: f64,
}

fn rbf(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2).exp()
}

/// Lower-triangular `L` with `L Lᵀ = A`.
fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 {
                    return Err(Error::Degenerate("kernel matrix is not positive definite".into()));
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

fn forward_sub(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    for i in 0..b.len() {
        let s: f64 = (0..i).map(|k| l[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

fn backward_sub_t(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

impl GaussianProcess {
    fn fit(xs: &[Vec<f64>], ys: &[f64], noise: f64) -> Result<Self> {
        let finite: Vec<f64> = ys.iter().copied().filter(|y| y.is_finite()).collect();
        let worst = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ys: Vec<f64> = ys.iter().map(|y| if y.is_finite() { *y } else { worst.max(0.0) + 1.0 }).collect();
        let y_mean = crate::stats::mean(&ys).unwrap_or(0.0);
        let y_std = crate::stats::std(&ys).filter(|s| *s > 0.0).unwrap_or(1.0);
        let yn: Vec<f64> = ys.iter().map(|y| (y - y_mean) / y_std).collect();
        let n = xs.len();
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = rbf(&xs[i], &xs[j]);
            }
            k[i][i] += noise.max(1e-10);
        }
        let chol = cholesky(&k)?;
        let alpha = backward_sub_t(&chol, &forward_sub(&chol, &yn));
        Ok(Self {
            xs: xs.to_vec(),
            chol,
            alpha,
            y_mean,
            y_std,
        })
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks: Vec<f64> = self.xs.iter().map(|xi| rbf(xi, x)).collect();
        let mu: f64 = ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = forward_sub(&self.chol, &ks);
        let var = (1.0 - v.iter().map(|x| x * x).sum::<f64>()).max(0.0);
        (self.y_mean + self.y_std * mu, self.y_std * var.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyperband_bracket_arithmetic() {
        let b = hyperband_brackets(10, 3);
        assert_eq!(b[0], vec![(9, 1), (3, 3), (1, 10)]);
        assert_eq!(b[1], vec![(5, 3), (1, 10)]);
        assert_eq!(b[2], vec![(3, 10)]);
    }

    #[test]
    fn random_search_on_single_point() {
        let space = SearchSpace::new().with("lr", &[1e-3]);
        let res = tune(&space, TunerMethod::random(), 0, |t, _| Ok(t["lr"])).unwrap();
        assert_eq!(res.best["lr"], 1e-3);
        assert_eq!(res.trials.len(), 1);
    }

    #[test]
    fn random_search_finds_grid_minimum_when_exhaustive() {
        let space = SearchSpace::new().with("a", &[0.0, 1.0, 2.0]).with("b", &[0.0, 1.0]);
        let res = tune(&space, TunerMethod::random(), 1, |t, _| Ok((t["a"] - 1.0).powi(2) + t["b"])).unwrap();
        assert_eq!(res.best["a"], 1.0);
        assert_eq!(res.best["b"], 0.0);
        assert_eq!(res.trials.len(), 6);
    }

    #[test]
    fn bayesian_finds_quadratic_minimiser() {
        let grid: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let space = SearchSpace::new().with("x", &grid);
        let res = tune(&space, TunerMethod::bayesian(), 2, |t, _| Ok((t["x"] - 6.0).powi(2))).unwrap();
        assert_eq!(res.best["x"], 6.0);
        assert!(res.trials.len() <= 25);
    }

    #[test]
    fn bayesian_guided_phase_exploits_surrogate() {
        // Large grid with few initial points: the guided trials should
        // approach the minimiser of a smooth bowl.
        let grid: Vec<f64> = (0..50).map(|k| k as f64 / 49.0).collect();
        let space = SearchSpace::new().with("x", &grid).with("y", &grid);
        let method = TunerMethod::Bayesian {
            max_trials: 25,
            initial_points: 8,
            noise: 0.001,
            beta: 1.0,
            trial_patience: 5,
        };
        let f = |t: &Trial| (t["x"] - 0.3).powi(2) + (t["y"] - 0.7).powi(2);
        let res = tune(&space, method, 3, |t, _| Ok(f(t))).unwrap();
        let initial_best = res.trials[..8].iter().map(|t| t.loss).fold(f64::INFINITY, f64::min);
        assert!(res.best_loss <= initial_best);
        assert!(res.best_loss < 0.02, "{}", res.best_loss);
    }

    #[test]
    fn hyperband_promotes_best_configs() {
        let grid: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let space = SearchSpace::new().with("x", &grid);
        let res = tune(&space, TunerMethod::hyperband(), 4, |t, b| {
            Ok((t["x"] - 4.0).abs() + 1.0 / b.max_epochs.unwrap() as f64)
        })
        .unwrap();
        let full: Vec<&TrialRecord> = res.trials.iter().filter(|t| t.budget.max_epochs == Some(10)).collect();
        assert_eq!(full.len(), 1 + 1 + 3);
        assert_eq!(res.trials.len(), 9 + 3 + 1 + 5 + 1 + 3);
        assert!(res.best_loss <= res.trials.iter().map(|t| t.loss).fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn failed_trials_are_skipped_and_all_failed_errors() {
        let space = SearchSpace::new().with("x", &[0.0, 1.0, 2.0]);
        let res = tune(&space, TunerMethod::random(), 5, |t, _| {
            Ok(if t["x"] == 0.0 { f64::NAN } else { t["x"] })
        })
        .unwrap();
        assert_eq!(res.best["x"], 1.0);
        assert!(tune(&space, TunerMethod::random(), 5, |_, _| Ok(f64::NAN)).is_err());
        assert!(tune(&SearchSpace::new(), TunerMethod::random(), 0, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = vec![vec![4.0, 2.0, 0.4], vec![2.0, 3.0, 0.5], vec![0.4, 0.5, 1.0]];
        let l = cholesky(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| l[i][k] * l[j][k]).sum();
                assert!((s - a[i][j]).abs() < 1e-12);
            }
        }
    }
}
