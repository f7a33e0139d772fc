use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Predictor;
use crate::error::{Error, Result};

/// k-nearest-neighbour mean on per-feature standardized inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Row-major standardized training points.
    points: Vec<f64>,
    targets: Vec<f64>,
}

impl KnnModel {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn n_train(&self) -> usize {
        self.targets.len()
    }

    fn predict_point(&self, query: &[f64], scratch: &mut Vec<(f64, usize)>) -> f64 {
        let d = self.dim();
        let n = self.n_train();
        if self.k == n {
            return self.targets.iter().sum::<f64>() / n as f64;
        }
        scratch.clear();
        for i in 0..n {
            let row = &self.points[i * d..(i + 1) * d];
            let dist: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            scratch.push((dist, i));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        scratch.select_nth_unstable_by(self.k - 1, cmp);
        scratch[..self.k]
            .iter()
            .map(|&(_, i)| self.targets[i])
            .sum::<f64>()
            / self.k as f64
    }
}

impl Predictor for KnnModel {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn predict_unchecked(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let d = self.dim();
        let mut scratch = Vec::with_capacity(self.n_train());
        let mut query = vec![0.0; d];
        (0..x.nrows())
            .map(|r| {
                for j in 0..d {
                    query[j] = (x[(r, j)] - self.center[j]) / self.scale[j];
                }
                self.predict_point(&query, &mut scratch)
            })
            .collect()
    }
}

/// Neighbour ties are broken by training index.
pub fn fit_smoother(x: &DMatrix<f64>, y: &[f64], k: usize) -> Result<KnnModel> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(Error::Learner(format!("{n} rows but {} targets", y.len())));
    }
    if k == 0 || k > n {
        return Err(Error::Learner(format!(
            "neighbour count {k} outside 1..={n}"
        )));
    }
    let mut center = vec![0.0; d];
    let mut scale = vec![1.0; d];
    for j in 0..d {
        let col = x.column(j);
        let m = col.mean();
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        center[j] = m;
        scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let mut points = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            points.push((x[(i, j)] - center[j]) / scale[j]);
        }
    }
    Ok(KnnModel {
        k,
        center,
        scale,
        points,
        targets: y.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    use crate::dataio::SeedTree;

    #[test]
    fn k_equals_n_is_global_mean() {
        let x = DMatrix::from_fn(5, 1, |i, _| i as f64);
        let y = [1.0, 2.0, 3.0, 4.0, 10.0];
        let m = fit_smoother(&x, &y, 5).unwrap();
        let q = DMatrix::from_column_slice(3, 1, &[-4.0, 2.2, 100.0]);
        assert_eq!(m.predict(&q).unwrap(), vec![4.0; 3]);
    }

    #[test]
    fn one_neighbour_reproduces_training_targets() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i * 3 + j * 5) as f64 % 7.0);
        let y: Vec<f64> = (0..6).map(|i| i as f64 * 1.5).collect();
        let m = fit_smoother(&x, &y, 1).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn out_of_range_k() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(fit_smoother(&x, &[1.0; 3], 0).is_err());
        assert!(fit_smoother(&x, &[1.0; 3], 4).is_err());
    }

    #[test]
    fn beats_marginal_variance_on_smooth_signal() {
        // y = sin(3x) + N(0, 0.1^2), fixed seed
        let tree = SeedTree::new(11);
        let mut rng = tree.rng();
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut draw = |n: usize| {
            let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|x| (3.0 * x).sin() + noise.sample(&mut rng))
                .collect();
            (DMatrix::from_column_slice(n, 1, &xs), ys)
        };
        let (xtr, ytr) = draw(1000);
        let (xte, yte) = draw(500);
        let m = fit_smoother(&xtr, &ytr, 25).unwrap();
        let pred = m.predict(&xte).unwrap();
        let mse = pred
            .iter()
            .zip(&yte)
            .map(|(p, y)| (p - y).powi(2))
            .sum::<f64>()
            / 500.0;
        let ym = yte.iter().sum::<f64>() / 500.0;
        let var = yte.iter().map(|y| (y - ym).powi(2)).sum::<f64>() / 500.0;
        assert!(mse < var, "mse {mse} vs var {var}");
        assert!(mse < 0.05);
    }
}
