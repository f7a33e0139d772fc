use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;

use super::basis::{eval_monomial, monomials, VarInfo};
use super::{ApConfig, CondMeanEstimator, CondMeanPolicy, DeltaMetric, MAX_DISCRETE_LEVELS};
use crate::dataio::{Dataset, SeedTree};
use crate::error::{Error, Result};
use crate::graphs::CiConstraint;
use crate::stats::mean_squared_diff;

/// Output of one alternating-projection run.
#[derive(Debug, Clone, PartialEq)]
pub struct ApRun {
    /// Projected values on the fitting sample.
    pub fit: Vec<f64>,
    /// Projected values on the evaluation sample, when it differs from the
    /// fitting sample.
    pub eval: Option<Vec<f64>>,
    pub sweeps: usize,
    pub delta_history: Vec<f64>,
    pub converged: bool,
    /// Stopped early because the change metric kept growing; `fit` and
    /// `eval` then hold the iterate of sweep `best_sweep`.
    pub diverged: bool,
    pub best_sweep: usize,
}

impl ApRun {
    pub fn eval_values(&self) -> &[f64] {
        self.eval.as_deref().unwrap_or(&self.fit)
    }
}

/// Cell memberships of every unit under the four conditioning sets
/// `(i, j, S)`, `(i, S)`, `(j, S)`, `S`.
#[derive(Debug, Clone)]
struct CellBlock {
    fit: [Vec<usize>; 4],
    eval: Option<[Vec<usize>; 4]>,
    counts: [Vec<f64>; 4],
}

/// One polynomial degree for one constraint. The projection at this degree is
/// `phi + P beta` with `beta` the ridge coefficients of `phi` on `A`.
#[derive(Debug, Clone)]
pub(crate) struct PolyBlock {
    pub degree: u32,
    pub infos: Vec<VarInfo>,
    pub monos: Vec<Vec<u32>>,
    pub s_monos: Vec<Vec<u32>>,
    a_fit: DMatrix<f64>,
    p_fit: DMatrix<f64>,
    p_eval: Option<DMatrix<f64>>,
    full: Cholesky<f64, Dyn>,
    splits: Vec<(Vec<usize>, Cholesky<f64, Dyn>)>,
}

#[derive(Debug, Clone)]
enum Block {
    Cells(CellBlock),
    Poly(Vec<PolyBlock>),
}

/// Precomputed conditional-mean machinery for a fixed fitting sample, an
/// optional separate evaluation sample, and an ordered constraint list.
///
/// All covariate-only work (designs, factorizations, marginalization
/// operators) happens once here; each projection step only fits the current
/// influence function values.
#[derive(Debug, Clone)]
pub struct ProjectionContext {
    blocks: Vec<Block>,
    n_fit: usize,
    n_eval: Option<usize>,
    ridge_fallback: bool,
}

fn key_bits(v: f64) -> u64 {
    // -0.0 and 0.0 share a cell
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

fn std_rows(ds: &Dataset, cols: &[usize], infos: &[VarInfo]) -> Vec<Vec<f64>> {
    (0..ds.n())
        .map(|u| {
            cols.iter()
                .zip(infos)
                .map(|(&c, info)| info.standardize(ds.value(u, c)))
                .collect()
        })
        .collect()
}

fn design(rows: &[Vec<f64>], monos: &[Vec<u32>], offset: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), monos.len(), |r, t| {
        eval_monomial(&monos[t], &rows[r][offset..])
    })
}

/// Cholesky of a symmetric PSD matrix, adding a trace-relative ridge when the
/// plain factorization fails.
fn robust_cholesky(mut g: DMatrix<f64>, fallback: &mut bool) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = g.clone().cholesky() {
        return Ok(ch);
    }
    *fallback = true;
    let bump = 1e-10 * g.trace().max(1.0);
    for k in 0..g.nrows() {
        g[(k, k)] += bump;
    }
    g.cholesky()
        .ok_or_else(|| Error::Projection("conditioning design is not factorizable".into()))
}

impl ProjectionContext {
    /// `eval = None` fits and evaluates on the same units.
    pub fn new(
        est: &CondMeanEstimator,
        fit: &Dataset,
        eval: Option<&Dataset>,
        constraints: &[CiConstraint],
    ) -> Result<Self> {
        let p = fit.p();
        if let Some(e) = eval {
            if e.p() != p {
                return Err(Error::Dimension {
                    expected: p,
                    got: e.p(),
                });
            }
        }
        for c in constraints {
            if c.columns().iter().any(|&k| k >= p) {
                return Err(Error::InvalidArgument(format!(
                    "constraint references column outside 0..{p}"
                )));
            }
        }
        let mut ridge_fallback = false;
        let mut blocks = Vec::with_capacity(constraints.len());
        for (m, c) in constraints.iter().enumerate() {
            blocks.push(match est.policy {
                CondMeanPolicy::ExactDiscrete => Block::Cells(cell_block(fit, eval, c)?),
                CondMeanPolicy::Polynomial => {
                    let mut degrees = est.degrees.clone();
                    degrees.sort_unstable();
                    degrees.dedup();
                    if degrees.is_empty() || degrees[0] == 0 {
                        return Err(Error::Config("polynomial degrees must be >= 1".into()));
                    }
                    let labels = cv_labels(fit.n(), est.cv_folds, est.seed, m);
                    let blocks = degrees
                        .iter()
                        .map(|&d| {
                            poly_block(fit, eval, c, d, est.ridge, &labels, &mut ridge_fallback)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Block::Poly(blocks)
                }
            });
        }
        if ridge_fallback {
            log::warn!("singular conditioning design; ridge fallback applied");
        }
        Ok(Self {
            blocks,
            n_fit: fit.n(),
            n_eval: eval.map(|e| e.n()),
            ridge_fallback,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ridge_fallback(&self) -> bool {
        self.ridge_fallback
    }

    pub(crate) fn poly_blocks(&self, m: usize) -> Option<&[PolyBlock]> {
        match &self.blocks[m] {
            Block::Poly(b) => Some(b),
            Block::Cells(_) => None,
        }
    }

    fn check_lengths(&self, phi_fit: &[f64], phi_eval: Option<&[f64]>) -> Result<()> {
        if phi_fit.len() != self.n_fit {
            return Err(Error::Dimension {
                expected: self.n_fit,
                got: phi_fit.len(),
            });
        }
        match (self.n_eval, phi_eval) {
            (None, None) => Ok(()),
            (Some(n), Some(v)) if v.len() == n => Ok(()),
            (Some(n), Some(v)) => Err(Error::Dimension {
                expected: n,
                got: v.len(),
            }),
            _ => Err(Error::InvalidArgument(
                "evaluation values must be supplied exactly when the context has an evaluation sample"
                    .into(),
            )),
        }
    }

    /// Index into [`Self::poly_blocks`] chosen by cross-validated squared
    /// error, and the ridge coefficients at that degree.
    /// Index into [`Self::poly_blocks`] chosen by cross-validated squared
    /// error (or `fixed`), and the ridge coefficients at that degree.
    pub(crate) fn select_poly(
        &self,
        m: usize,
        phi_fit: &[f64],
        fixed: Option<usize>,
    ) -> Option<(usize, DVector<f64>)> {
        let blocks = self.poly_blocks(m)?;
        let phi = DVector::from_column_slice(phi_fit);
        let best = match fixed {
            Some(b) => b,
            None if blocks.len() == 1 => 0,
            None => {
                let mut best = 0;
                let mut best_err = f64::INFINITY;
                for (b, block) in blocks.iter().enumerate() {
                    let err = block.cv_error(&phi);
                    if err < best_err {
                        best_err = err;
                        best = b;
                    }
                }
                best
            }
        };
        let beta = blocks[best].full.solve(&blocks[best].a_fit.tr_mul(&phi));
        Some((best, beta))
    }

    /// Single-constraint projection of `phi` for constraint `m`.
    ///
    /// Polynomial degrees are chosen by cross-validation on `phi_fit`.
    pub fn project_step(
        &self,
        m: usize,
        phi_fit: &[f64],
        phi_eval: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        self.check_lengths(phi_fit, phi_eval)?;
        let (fit, eval, _) = self.step_with(m, phi_fit, phi_eval, None)?;
        Ok((fit, eval))
    }

    fn step_with(
        &self,
        m: usize,
        phi_fit: &[f64],
        phi_eval: Option<&[f64]>,
        fixed: Option<usize>,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>, Option<usize>)> {
        match &self.blocks[m] {
            Block::Cells(cb) => {
                let means: Vec<Vec<f64>> = (0..4)
                    .map(|g| {
                        let mut sums = vec![0.0; cb.counts[g].len()];
                        for (u, &cell) in cb.fit[g].iter().enumerate() {
                            sums[cell] += phi_fit[u];
                        }
                        sums.iter().zip(&cb.counts[g]).map(|(s, c)| s / c).collect()
                    })
                    .collect();
                let apply = |phi: &[f64], groups: &[Vec<usize>; 4]| -> Vec<f64> {
                    (0..phi.len())
                        .map(|u| {
                            phi[u] - means[0][groups[0][u]]
                                + means[1][groups[1][u]]
                                + means[2][groups[2][u]]
                                - means[3][groups[3][u]]
                        })
                        .collect()
                };
                let fit = apply(phi_fit, &cb.fit);
                let eval = match (phi_eval, &cb.eval) {
                    (Some(v), Some(groups)) => Some(apply(v, groups)),
                    _ => None,
                };
                Ok((fit, eval, None))
            }
            Block::Poly(blocks) => {
                let (b, beta) = self
                    .select_poly(m, phi_fit, fixed)
                    .expect("polynomial block");
                let block = &blocks[b];
                let step = |phi: &[f64], p: &DMatrix<f64>| -> Vec<f64> {
                    let delta = p * &beta;
                    phi.iter().zip(delta.iter()).map(|(a, d)| a + d).collect()
                };
                let fit = step(phi_fit, &block.p_fit);
                let eval = match (phi_eval, &block.p_eval) {
                    (Some(v), Some(p)) => Some(step(v, p)),
                    _ => None,
                };
                if fit
                    .iter()
                    .chain(eval.iter().flatten())
                    .any(|v| !v.is_finite())
                {
                    return Err(Error::Projection("non-finite projected values".into()));
                }
                Ok((fit, eval, Some(b)))
            }
        }
    }

    /// Sweeps of single-constraint projections in constraint order until the
    /// change metric drops to `ap.eps` or `ap.max_sweeps` sweeps have run.
    ///
    /// Polynomial degrees are chosen during the first sweep and then held
    /// fixed, so every later sweep applies the same projection operators.
    ///
    /// When the constraints do not hold in the sample the sweep map need not
    /// contract. With `ap.divergence_patience > 0` a run whose change grows
    /// on that many consecutive sweeps is cut short and the smallest-change
    /// iterate is returned.
    pub fn alternating(
        &self,
        phi_fit: &[f64],
        phi_eval: Option<&[f64]>,
        ap: &ApConfig,
    ) -> Result<ApRun> {
        self.check_lengths(phi_fit, phi_eval)?;
        if self.blocks.is_empty() {
            return Err(Error::InvalidArgument(
                "no constraints to project onto".into(),
            ));
        }
        if !(ap.eps > 0.0) || ap.max_sweeps == 0 {
            return Err(Error::Config(format!(
                "need eps > 0 and max_sweeps >= 1 (got {}, {})",
                ap.eps, ap.max_sweeps
            )));
        }
        let mut fit = phi_fit.to_vec();
        let mut eval = phi_eval.map(|v| v.to_vec());
        let mut history = Vec::new();
        let mut converged = false;
        let mut sweeps = 0;
        let single = self.blocks.len() == 1;
        let mut chosen: Vec<Option<usize>> = vec![None; self.blocks.len()];
        let mut best: Option<(f64, usize, Vec<f64>, Option<Vec<f64>>)> = None;
        let mut rising = 0;
        let mut diverged = false;
        while sweeps < ap.max_sweeps {
            sweeps += 1;
            let sweep_start = eval.clone().unwrap_or_else(|| fit.clone());
            let mut before_last = sweep_start.clone();
            for m in 0..self.blocks.len() {
                if m + 1 == self.blocks.len() {
                    before_last = eval.clone().unwrap_or_else(|| fit.clone());
                }
                let (f, e, b) = self.step_with(m, &fit, eval.as_deref(), chosen[m])?;
                fit = f;
                eval = e;
                chosen[m] = b;
            }
            let current = eval.as_deref().unwrap_or(&fit);
            let delta = match ap.metric {
                DeltaMetric::LastStep => mean_squared_diff(current, &before_last),
                DeltaMetric::FullSweep => mean_squared_diff(current, &sweep_start),
            };
            if !delta.is_finite() {
                return Err(Error::Projection(format!(
                    "non-finite change after sweep {sweeps}"
                )));
            }
            if history.last().is_some_and(|&prev| delta > prev) {
                rising += 1;
            } else {
                rising = 0;
            }
            history.push(delta);
            if single || delta <= ap.eps {
                converged = true;
                break;
            }
            if ap.divergence_patience > 0 {
                if best.as_ref().is_none_or(|b| delta < b.0) {
                    best = Some((delta, sweeps, fit.clone(), eval.clone()));
                }
                if rising >= ap.divergence_patience {
                    diverged = true;
                    break;
                }
            }
        }
        let mut best_sweep = sweeps;
        if diverged {
            let (_, s, f, e) = best.expect("at least one sweep");
            best_sweep = s;
            fit = f;
            eval = e;
        }
        Ok(ApRun {
            fit,
            eval,
            sweeps,
            delta_history: history,
            converged,
            diverged,
            best_sweep,
        })
    }
}

impl PolyBlock {
    fn cv_error(&self, phi: &DVector<f64>) -> f64 {
        let rhs_full = self.a_fit.tr_mul(phi);
        let mut sse = 0.0;
        for (test, chol) in &self.splits {
            let mut rhs = rhs_full.clone();
            for &u in test {
                for t in 0..rhs.len() {
                    rhs[t] -= self.a_fit[(u, t)] * phi[u];
                }
            }
            let beta = chol.solve(&rhs);
            for &u in test {
                let pred: f64 = (0..beta.len()).map(|t| self.a_fit[(u, t)] * beta[t]).sum();
                sse += (phi[u] - pred) * (phi[u] - pred);
            }
        }
        sse / phi.len() as f64
    }
}

fn cv_labels(n: usize, folds: usize, seed: u64, constraint: usize) -> Vec<usize> {
    let folds = folds.clamp(2, n.max(2));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(
        &mut SeedTree::new(seed)
            .child(0xC7)
            .child(constraint as u64)
            .rng(),
    );
    let mut labels = vec![0; n];
    for (slot, &u) in order.iter().enumerate() {
        labels[u] = slot % folds;
    }
    labels
}

fn poly_block(
    fit: &Dataset,
    eval: Option<&Dataset>,
    c: &CiConstraint,
    degree: u32,
    ridge: f64,
    labels: &[usize],
    fallback: &mut bool,
) -> Result<PolyBlock> {
    let cols = c.columns();
    let infos: Vec<VarInfo> = cols
        .iter()
        .map(|&k| VarInfo::from_column(fit.column(k), degree))
        .collect();
    let caps: Vec<u32> = infos.iter().map(|v| v.max_exp).collect();
    let monos = monomials(&caps, degree);
    let s_monos = monomials(&caps[2..], degree);

    let rows_fit = std_rows(fit, &cols, &infos);
    let rows_eval = eval.map(|e| std_rows(e, &cols, &infos));

    let a_fit = design(&rows_fit, &monos, 0);
    let zs_fit = design(&rows_fit, &s_monos, 2);
    let zs_chol = robust_cholesky(zs_fit.tr_mul(&zs_fit), fallback)?;

    // factors of each monomial x_i^a x_j^b h(s) with x_i or x_j removed
    let without = |drop: usize| -> Vec<Vec<u32>> {
        monos
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e[drop] = 0;
                e
            })
            .collect()
    };
    let g_i = design(&rows_fit, &without(0), 0);
    let g_j = design(&rows_fit, &without(1), 0);
    let r_i = zs_chol.solve(&zs_fit.tr_mul(&g_i));
    let r_j = zs_chol.solve(&zs_fit.tr_mul(&g_j));

    let build_p =
        |rows: &[Vec<f64>], a: &DMatrix<f64>, zs: &DMatrix<f64>, d_coef: &DMatrix<f64>| {
            let ri = zs * &r_i;
            let rj = zs * &r_j;
            let d = zs * d_coef;
            DMatrix::from_fn(rows.len(), monos.len(), |u, t| {
                let ci = rows[u][0].powi(monos[t][0] as i32) * ri[(u, t)];
                let cj = rows[u][1].powi(monos[t][1] as i32) * rj[(u, t)];
                -a[(u, t)] + ci + cj - d[(u, t)]
            })
        };
    let cj_fit = {
        let rj = &zs_fit * &r_j;
        DMatrix::from_fn(rows_fit.len(), monos.len(), |u, t| {
            rows_fit[u][1].powi(monos[t][1] as i32) * rj[(u, t)]
        })
    };
    let d_coef = zs_chol.solve(&zs_fit.tr_mul(&cj_fit));
    let p_fit = build_p(&rows_fit, &a_fit, &zs_fit, &d_coef);
    let p_eval = rows_eval.as_ref().map(|rows| {
        let a = design(rows, &monos, 0);
        let zs = design(rows, &s_monos, 2);
        build_p(rows, &a, &zs, &d_coef)
    });

    let n = fit.n();
    let lambda = ridge * n as f64;
    let gram = a_fit.tr_mul(&a_fit);
    let penalized = |mut g: DMatrix<f64>| {
        for k in 0..g.nrows() {
            g[(k, k)] += lambda;
        }
        g
    };
    let full = robust_cholesky(penalized(gram.clone()), fallback)?;
    let n_splits = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut splits = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let test: Vec<usize> = (0..n).filter(|&u| labels[u] == s).collect();
        let mut g = gram.clone();
        for &u in &test {
            let row = a_fit.row(u);
            g -= row.transpose() * row;
        }
        splits.push((test, robust_cholesky(penalized(g), fallback)?));
    }
    Ok(PolyBlock {
        degree,
        infos,
        monos,
        s_monos,
        a_fit,
        p_fit,
        p_eval,
        full,
        splits,
    })
}

fn cell_block(fit: &Dataset, eval: Option<&Dataset>, c: &CiConstraint) -> Result<CellBlock> {
    for k in c.columns() {
        let mut distinct: Vec<u64> = Vec::new();
        for &v in fit.column(k) {
            let b = key_bits(v);
            if !distinct.contains(&b) {
                distinct.push(b);
                if distinct.len() > MAX_DISCRETE_LEVELS {
                    return Err(Error::Policy(format!(
                        "exact-discrete means need <= {MAX_DISCRETE_LEVELS} distinct values; column `{}` has more",
                        fit.covariate_names()[k]
                    )));
                }
            }
        }
    }
    let mut with_i = vec![c.i];
    with_i.extend(&c.s);
    let mut with_j = vec![c.j];
    with_j.extend(&c.s);
    let sets = [c.columns(), with_i, with_j, c.s.clone()];

    let mut fit_groups: [Vec<usize>; 4] = Default::default();
    let mut eval_groups: [Vec<usize>; 4] = Default::default();
    let mut counts: [Vec<f64>; 4] = Default::default();
    for (g, cols) in sets.iter().enumerate() {
        let key = |ds: &Dataset, u: usize| -> Vec<u64> {
            cols.iter().map(|&k| key_bits(ds.value(u, k))).collect()
        };
        let mut ids: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        for u in 0..fit.n() {
            ids.entry(key(fit, u)).or_insert(0);
        }
        for (rank, id) in ids.values_mut().enumerate() {
            *id = rank;
        }
        counts[g] = vec![0.0; ids.len()];
        fit_groups[g] = (0..fit.n()).map(|u| ids[&key(fit, u)]).collect();
        for &cell in &fit_groups[g] {
            counts[g][cell] += 1.0;
        }
        if let Some(e) = eval {
            eval_groups[g] = (0..e.n())
                .map(|u| {
                    ids.get(&key(e, u)).copied().ok_or_else(|| {
                        Error::Policy(format!(
                            "evaluation unit {u} falls in a cell absent from the fitting sample"
                        ))
                    })
                })
                .collect::<Result<_>>()?;
        }
    }
    Ok(CellBlock {
        fit: fit_groups,
        eval: eval.map(|_| eval_groups),
        counts,
    })
}
