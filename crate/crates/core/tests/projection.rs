mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sensproj::dataio::Dataset;
use sensproj::graphs::CiConstraint;
use sensproj::mc::{generate, DgpKind, DgpSpec};
use sensproj::project::{
    alternating_project, fit_joint_cond_mean, marginalize_cond_mean, project_single,
    variance_gain, ApConfig, CondMeanEstimator, Keep, ProjectionContext,
};
use sensproj::sens::{cross_fit_curve, CurveFit, IfSamples, IfTarget, ProjectionSpec, SensConfig};

use common::*;

fn samples(values: Vec<f64>) -> IfSamples {
    IfSamples::new(values, IfTarget::Psi1, None, 0.0)
}

fn continuous(n: usize, seed: u64) -> (Dataset, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = vec![Vec::with_capacity(n); 3];
    let mut phi = Vec::with_capacity(n);
    for _ in 0..n {
        let s: f64 = rng.random_range(-1.0..1.0);
        let a = s + rng.random_range(-1.0..1.0);
        let b = 0.5 * s * s + rng.random_range(-1.0..1.0);
        cols[0].push(a);
        cols[1].push(b);
        cols[2].push(s);
        phi.push(a * b + s * a * a - b + rng.random_range(-0.5..0.5));
    }
    let t = (0..n).map(|u| (u % 2) as u8).collect();
    let y = vec![0.0; n];
    let ds = Dataset::new(vec!["A".into(), "B".into(), "S".into()], cols, t, y).unwrap();
    (ds, phi)
}

#[test]
fn polynomial_projection_matches_literal_marginalization() {
    let (ds, phi) = continuous(120, 5);
    let c = CiConstraint::new(0, 1, vec![2], 3).unwrap();
    for degree in [1, 2, 3] {
        let est = CondMeanEstimator {
            degrees: vec![degree],
            ..Default::default()
        };
        let fast = project_single(&samples(phi.clone()), &ds, &c, &est).unwrap();
        let joint = fit_joint_cond_mean(&phi, &ds, &c, &est).unwrap();
        let ei = marginalize_cond_mean(&joint, &ds, Keep::I).unwrap();
        let ej = marginalize_cond_mean(&joint, &ds, Keep::J).unwrap();
        let es = marginalize_cond_mean(&joint, &ds, Keep::S).unwrap();
        for u in 0..ds.n() {
            let full = joint
                .predict(ds.value(u, 0), ds.value(u, 1), &[ds.value(u, 2)])
                .unwrap();
            let literal = phi[u] - full + ei[u] + ej[u] - es[u];
            assert!(
                (fast.values[u] - literal).abs() < 1e-8,
                "degree {degree}, unit {u}: {} vs {literal}",
                fast.values[u]
            );
        }
    }
}

#[test]
fn marginal_constraint_matches_literal_marginalization() {
    let (ds, phi) = continuous(90, 8);
    let c = CiConstraint::new(0, 2, vec![], 3).unwrap();
    let est = CondMeanEstimator {
        degrees: vec![2],
        ..Default::default()
    };
    let fast = project_single(&samples(phi.clone()), &ds, &c, &est).unwrap();
    let joint = fit_joint_cond_mean(&phi, &ds, &c, &est).unwrap();
    let ei = marginalize_cond_mean(&joint, &ds, Keep::I).unwrap();
    let ej = marginalize_cond_mean(&joint, &ds, Keep::J).unwrap();
    let es = marginalize_cond_mean(&joint, &ds, Keep::S).unwrap();
    for u in 0..ds.n() {
        let full = joint.predict(ds.value(u, 0), ds.value(u, 2), &[]).unwrap();
        let literal = phi[u] - full + ei[u] + ej[u] - es[u];
        assert!((fast.values[u] - literal).abs() < 1e-8);
    }
}

#[test]
fn off_fold_context_applies_fit_sample_models() {
    let (ds, phi) = continuous(150, 2);
    let fit_idx: Vec<usize> = (0..100).collect();
    let eval_idx: Vec<usize> = (100..150).collect();
    let fit = ds.subset(&fit_idx);
    let eval = ds.subset(&eval_idx);
    let c = CiConstraint::new(0, 1, vec![2], 3).unwrap();
    let est = CondMeanEstimator {
        degrees: vec![2],
        ..Default::default()
    };
    let phi_fit = &phi[..100];
    let phi_eval = &phi[100..];
    let ctx = ProjectionContext::new(&est, &fit, Some(&eval), std::slice::from_ref(&c)).unwrap();
    let (_, out) = ctx.project_step(0, phi_fit, Some(phi_eval)).unwrap();
    let out = out.unwrap();

    // literal route: models fit on the fitting sample, marginalized over it,
    // read off at the evaluation units
    let joint = fit_joint_cond_mean(phi_fit, &fit, &c, &est).unwrap();
    let x = |ds: &Dataset, u: usize| (ds.value(u, 0), ds.value(u, 1), ds.value(u, 2));
    // regress joint(x_i(u), x_j(v), s(v)) over fitting units v on the S
    // basis {1, s, s^2} and read off at s(u)
    let s_fit: Vec<f64> = (0..fit.n()).map(|v| fit.value(v, 2)).collect();
    let ls = |targets: &[f64], s: f64| -> f64 { quadratic_fit(&s_fit, targets, s) };
    let e_js_fit: Vec<f64> = (0..fit.n())
        .map(|v| {
            let over: Vec<f64> = (0..fit.n())
                .map(|w| joint.predict(fit.value(w, 0), fit.value(v, 1), &[fit.value(w, 2)]).unwrap())
                .collect();
            ls(&over, fit.value(v, 2))
        })
        .collect();
    for u in 0..eval.n() {
        let (a, b, s) = x(&eval, u);
        let over_j: Vec<f64> = (0..fit.n())
            .map(|v| joint.predict(a, fit.value(v, 1), &[fit.value(v, 2)]).unwrap())
            .collect();
        let over_i: Vec<f64> = (0..fit.n())
            .map(|v| joint.predict(fit.value(v, 0), b, &[fit.value(v, 2)]).unwrap())
            .collect();
        let full = joint.predict(a, b, &[s]).unwrap();
        let literal = phi_eval[u] - full + ls(&over_j, s) + ls(&over_i, s) - ls(&e_js_fit, s);
        assert!(
            (out[u] - literal).abs() < 1e-7,
            "unit {u}: {} vs {literal}",
            out[u]
        );
    }
}

/// Least-squares fit of `y` on `{1, s, s^2}`, evaluated at `at`.
fn quadratic_fit(s: &[f64], y: &[f64], at: f64) -> f64 {
    let m = nalgebra::DMatrix::from_fn(s.len(), 3, |r, c| s[r].powi(c as i32));
    let v = nalgebra::DVector::from_column_slice(y);
    let beta = (m.tr_mul(&m)).cholesky().unwrap().solve(&m.tr_mul(&v));
    beta[0] + beta[1] * at + beta[2] * at * at
}

/// Cells of three discrete columns with counts `w_s[s] * w_i[s][a] * w_j[s][b]`,
/// so `A _||_ B | S` holds exactly in the sample.
fn conditional_design(w_s: &[usize], w_i: &[Vec<usize>], w_j: &[Vec<usize>]) -> Dataset {
    let mut cells = Vec::new();
    for (s, &ws) in w_s.iter().enumerate() {
        for (a, &wa) in w_i[s].iter().enumerate() {
            for (b, &wb) in w_j[s].iter().enumerate() {
                cells.push((vec![a as f64, b as f64, s as f64], ws * wa * wb));
            }
        }
    }
    from_cells(&cells)
}

fn design_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<Vec<usize>>, Vec<Vec<usize>>, u64)> {
    (2usize..4, 2usize..4, 2usize..4).prop_flat_map(|(ns, na, nb)| {
        (
            prop::collection::vec(1usize..4, ns),
            prop::collection::vec(prop::collection::vec(1usize..4, na), ns),
            prop::collection::vec(prop::collection::vec(1usize..4, nb), ns),
            any::<u64>(),
        )
    })
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exact_projection_preserves_mean_and_is_idempotent((w_s, w_i, w_j, seed) in design_strategy()) {
        let ds = conditional_design(&w_s, &w_i, &w_j);
        let c = CiConstraint::new(0, 1, vec![2], 3).unwrap();
        let est = CondMeanEstimator::exact();
        let phi = samples(noise(ds.n(), seed));
        let once = project_single(&phi, &ds, &c, &est).unwrap();
        let twice = project_single(&once, &ds, &c, &est).unwrap();
        prop_assert!((mean(&once.values) - mean(&phi.values)).abs() <= 1e-12);
        for (a, b) in once.values.iter().zip(&twice.values) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        prop_assert!(var(&once.values) <= var(&phi.values) + 1e-12);
        let gain = variance_gain(&phi, &once, &ds, &c, &est).unwrap();
        prop_assert!(gain.difference >= -1e-12);
    }

    #[test]
    fn additive_input_is_a_fixed_point((w_s, w_i, w_j, seed) in design_strategy()) {
        let ds = conditional_design(&w_s, &w_i, &w_j);
        let c = CiConstraint::new(0, 1, vec![2], 3).unwrap();
        let z = noise(16, seed);
        // f(a, s) + g(b, s) already satisfies the constraint
        let phi: Vec<f64> = (0..ds.n())
            .map(|u| {
                let (a, b, s) = (ds.value(u, 0) as usize, ds.value(u, 1) as usize, ds.value(u, 2) as usize);
                z[a + 4 * s] + z[(b + 4 * s + 7) % 16]
            })
            .collect();
        let ap = ApConfig { eps: 1e-300, max_sweeps: 1, ..Default::default() };
        let run = alternating_project(&samples(phi.clone()), &ds, &[c], &CondMeanEstimator::exact(), &ap).unwrap();
        prop_assert!(run.delta_history[0] <= 1e-12);
        for (a, b) in run.projected.values.iter().zip(&phi) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn noop_constraint_has_zero_gain(w1 in prop::array::uniform2(1usize..6), w2 in prop::array::uniform2(1usize..6)) {
        let ds = independent_binary(w1, w2);
        let c = CiConstraint::new(0, 1, vec![], 2).unwrap();
        // a function of X1 alone is unchanged
        let phi: Vec<f64> = (0..ds.n()).map(|u| 3.0 * ds.value(u, 0) - 1.0).collect();
        let est = CondMeanEstimator::exact();
        let input = samples(phi.clone());
        let out = project_single(&input, &ds, &c, &est).unwrap();
        let gain = variance_gain(&input, &out, &ds, &c, &est).unwrap();
        prop_assert!(gain.difference.abs() <= 1e-12);
        for (a, b) in out.values.iter().zip(&phi) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn delta_is_nonincreasing_on_discrete_constraint_sets() {
    let ds = discrete_example1();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let phi: Vec<f64> = (0..ds.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ap = ApConfig {
        eps: 1e-300,
        max_sweeps: 12,
        divergence_patience: 0,
        ..Default::default()
    };
    let run = alternating_project(
        &samples(phi),
        &ds,
        &DgpKind::Example1.constraints(),
        &CondMeanEstimator::exact(),
        &ap,
    )
    .unwrap();
    for w in run.delta_history.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-300, "{:?}", run.delta_history);
    }
    assert!(run.var_after <= run.var_before);
}

#[test]
fn divergence_guard_keeps_the_smallest_change_iterate() {
    // false constraints on the misspecified design: the off-fold sweep map
    // expands on some folds of this replication
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Misspec, 500, 1).replication(6)).unwrap();
    let cfg = SensConfig {
        gammas: vec![-4.0],
        seed: 6,
        ..Default::default()
    };
    let mut spec = ProjectionSpec::new(DgpKind::Misspec.constraints());
    spec.ap.divergence_patience = 0;
    let free = cross_fit_curve(&ds, &cfg, Some(&spec)).unwrap();
    spec.ap.divergence_patience = 3;
    let guarded = cross_fit_curve(&ds, &cfg, Some(&spec)).unwrap();

    let stopped: Vec<_> = guarded.diagnostics.iter().filter(|d| d.diverged).collect();
    assert!(!stopped.is_empty());
    for d in &stopped {
        assert!(!d.converged && d.sweeps < spec.ap.max_sweeps);
        let h = &d.delta_history;
        let argmin = (0..h.len()).min_by(|&a, &b| h[a].total_cmp(&h[b])).unwrap();
        assert_eq!(d.best_sweep, argmin + 1);
        assert!(h[h.len() - 3..].windows(2).all(|w| w[1] > w[0]));
        let twin = free
            .diagnostics
            .iter()
            .find(|f| f.fold == d.fold && f.target == d.target)
            .unwrap();
        assert!(!twin.converged && !twin.diverged);
        assert_eq!(twin.delta_history[..h.len()], h[..]);
        assert!(d.var_after < twin.var_after);
    }
    for d in guarded.diagnostics.iter().filter(|d| !d.diverged) {
        assert_eq!(d.best_sweep, d.sweeps);
    }
    let tau = |f: &CurveFit| f.projected.as_ref().unwrap().points[0].tau.variance;
    assert!(tau(&guarded) < tau(&free));
}
