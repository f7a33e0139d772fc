//! Projecting an influence function onto covariate independences, first on an
//! exactly factorizing discrete sample, then inside the cross-fitted curve.

use sensproj::dataio::Dataset;
use sensproj::graphs::{markov_constraints, parse_dag};
use sensproj::mc::{generate, DgpKind, DgpSpec};
use sensproj::project::{alternating_project, ApConfig, CondMeanEstimator};
use sensproj::sens::{cross_fit_curve, IfSamples, IfTarget, ProjectionSpec, SensConfig};

fn discrete() -> Dataset {
    // X1 _||_ X2 with cell counts w1[a] * w2[b]
    let (w1, w2) = ([2usize, 3], [1usize, 4]);
    let (mut x1, mut x2, mut t) = (Vec::new(), Vec::new(), Vec::new());
    for a in 0..2 {
        for b in 0..2 {
            for _ in 0..w1[a] * w2[b] * 4 {
                x1.push(a as f64);
                x2.push(b as f64);
                t.push((t.len() % 2) as u8);
            }
        }
    }
    let y = vec![0.0; t.len()];
    Dataset::new(vec!["X1".into(), "X2".into()], vec![x1, x2], t, y).unwrap()
}

fn main() -> sensproj::Result<()> {
    let ds = discrete();
    let phi: Vec<f64> = (0..ds.n())
        .map(|u| ds.value(u, 0) * ds.value(u, 1) + 0.3 * ((u * 7919) % 13) as f64)
        .collect();
    let g = parse_dag("X1 -> Y; X2 -> Y")?;
    let cs = markov_constraints(&g, &["X1", "X2"])?;
    let input = IfSamples::new(phi, IfTarget::Psi1, None, 0.0);
    let r = alternating_project(&input, &ds, &cs, &CondMeanEstimator::exact(), &ApConfig::default())?;
    println!(
        "exact means: var {:.4} -> {:.4}, mean drift {:.1e}, sweeps {}",
        r.var_before, r.var_after, r.mean_drift, r.sweeps
    );

    let (ds, _) = generate(&DgpSpec::new(DgpKind::Example2, 500, 3))?;
    let cfg = SensConfig {
        gammas: vec![-4.0, 0.0, 4.0],
        ..Default::default()
    };
    let spec = ProjectionSpec::new(DgpKind::Example2.constraints());
    let fit = cross_fit_curve(&ds, &cfg, Some(&spec))?;
    let projected = fit.projected.as_ref().expect("projection requested");
    for (u, p) in fit.unprojected.points.iter().zip(&projected.points) {
        println!(
            "gamma {:>4}: tau {:.4} (var {:.5})  projected {:.4} (var {:.5})",
            u.gamma, u.tau.estimate, u.tau.variance, p.tau.estimate, p.tau.variance
        );
    }
    let stopped = fit.diagnostics.iter().filter(|d| !d.converged).count();
    println!("{} fold projections, {stopped} not converged", fit.diagnostics.len());
    Ok(())
}
