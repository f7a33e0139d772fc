use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{sigmoid, Predictor, Task, PROB_CLIP};
use crate::error::{Error, Result};

/// Leaf-value L2 penalty for the Newton step.
const LEAF_L2: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    /// Rows with `x[feature] <= threshold` go left.
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

/// Gradient-boosted depth-1 trees. Probability models boost the log-odds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub task: Task,
    pub dim: usize,
    pub base: f64,
    pub learning_rate: f64,
    pub stumps: Vec<Stump>,
}

impl BoostModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn raw_row(&self, x: &DMatrix<f64>, r: usize) -> f64 {
        self.base
            + self.learning_rate
                * self
                    .stumps
                    .iter()
                    .map(|s| {
                        if x[(r, s.feature)] <= s.threshold {
                            s.left
                        } else {
                            s.right
                        }
                    })
                    .sum::<f64>()
    }
}

impl Predictor for BoostModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_unchecked(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|r| {
                let raw = self.raw_row(x, r);
                match self.task {
                    Task::Regression => raw,
                    Task::Probability => sigmoid(raw),
                }
            })
            .collect()
    }
}

pub fn fit_stump_boost(
    x: &DMatrix<f64>,
    y: &[f64],
    task: Task,
    rounds: usize,
    learning_rate: f64,
) -> Result<BoostModel> {
    let (n, d) = x.shape();
    if n < 2 || y.len() != n {
        return Err(Error::Learner(format!(
            "stump boosting needs >= 2 matching rows ({n} rows, {} targets)",
            y.len()
        )));
    }
    if !(learning_rate > 0.0) {
        return Err(Error::Learner("learning rate must be positive".into()));
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    let base = match task {
        Task::Regression => ybar,
        Task::Probability => {
            let p = ybar.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            (p / (1.0 - p)).ln()
        }
    };

    // per-feature ascending order; ties by row index
    let orders: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[(a, j)].total_cmp(&x[(b, j)]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut raw = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![1.0; n];
    let mut stumps = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        for i in 0..n {
            match task {
                Task::Regression => grad[i] = y[i] - raw[i],
                Task::Probability => {
                    let p = sigmoid(raw[i]);
                    grad[i] = y[i] - p;
                    hess[i] = (p * (1.0 - p)).max(1e-12);
                }
            }
        }
        let g_tot: f64 = grad.iter().sum();
        let h_tot: f64 = hess.iter().sum();
        let root_score = g_tot * g_tot / (h_tot + LEAF_L2);

        let mut best: Option<(f64, Stump)> = None;
        for (j, order) in orders.iter().enumerate() {
            let mut gl = 0.0;
            let mut hl = 0.0;
            for w in 0..n - 1 {
                let i = order[w];
                gl += grad[i];
                hl += hess[i];
                let here = x[(i, j)];
                let next = x[(order[w + 1], j)];
                if next <= here {
                    continue;
                }
                let gr = g_tot - gl;
                let hr = h_tot - hl;
                let gain = gl * gl / (hl + LEAF_L2) + gr * gr / (hr + LEAF_L2) - root_score;
                if best.as_ref().map_or(true, |(g, _)| gain > *g) {
                    best = Some((
                        gain,
                        Stump {
                            feature: j,
                            threshold: 0.5 * (here + next),
                            left: gl / (hl + LEAF_L2),
                            right: gr / (hr + LEAF_L2),
                        },
                    ));
                }
            }
        }
        let Some((gain, stump)) = best else { break };
        if gain <= 1e-14 {
            break;
        }
        for i in 0..n {
            raw[i] += learning_rate
                * if x[(i, stump.feature)] <= stump.threshold {
                    stump.left
                } else {
                    stump.right
                };
        }
        stumps.push(stump);
    }
    Ok(BoostModel {
        task,
        dim: d,
        base,
        learning_rate,
        stumps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_a_step_function() {
        let n = 100;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { i as f64 } else { (i % 7) as f64 });
        let y: Vec<f64> = (0..n).map(|i| if i < 40 { -1.0 } else { 2.0 }).collect();
        let m = fit_stump_boost(&x, &y, Task::Regression, 200, 0.1).unwrap();
        assert_eq!(m.stumps[0].feature, 0);
        assert!((m.stumps[0].threshold - 39.5).abs() < 1e-12);
        let p = m.predict(&x).unwrap();
        for (a, b) in p.iter().zip(&y) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn probability_predictions_in_unit_interval() {
        let n = 60;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let y: Vec<f64> = (0..n)
            .map(|i| ((i * 7) % 3 == 0 || i > 40) as u8 as f64)
            .collect();
        let m = fit_stump_boost(&x, &y, Task::Probability, 100, 0.1).unwrap();
        for p in m.predict(&x).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn constant_feature_yields_no_splits() {
        let x = DMatrix::from_element(10, 1, 3.0);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let m = fit_stump_boost(&x, &y, Task::Regression, 50, 0.1).unwrap();
        assert!(m.stumps.is_empty());
        assert_eq!(m.predict(&x).unwrap(), vec![4.5; 10]);
    }
}
