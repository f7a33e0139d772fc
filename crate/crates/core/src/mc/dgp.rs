use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, SeedTree};
use crate::error::{Error, Result};
use crate::graphs::CiConstraint;
use crate::learners::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpKind {
    /// Covariates factorizing along a DAG; binary treatment and outcome.
    Example1,
    /// Two covariate pairs sharing a latent cause; constraints not
    /// representable by a DAG over the covariates.
    Example2,
    /// Dependent covariates, analysed under the `Example1` constraints.
    Misspec,
    /// `Example1` covariates and treatment with a continuous outcome.
    Ovb,
}

impl DgpKind {
    pub fn name(self) -> &'static str {
        match self {
            DgpKind::Example1 => "example1",
            DgpKind::Example2 => "example2",
            DgpKind::Misspec => "misspec",
            DgpKind::Ovb => "ovb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "example1" => Ok(DgpKind::Example1),
            "example2" => Ok(DgpKind::Example2),
            "misspec" => Ok(DgpKind::Misspec),
            "ovb" => Ok(DgpKind::Ovb),
            other => Err(Error::Config(format!(
                "unknown spec `{other}` (expected example1, example2, misspec or ovb)"
            ))),
        }
    }

    pub fn binary_outcome(self) -> bool {
        self != DgpKind::Ovb
    }

    /// Independences projected onto for this experiment, over `X1..X4`
    /// (column indices 0..3). `Misspec` uses the `Example1` set, which its
    /// covariates violate.
    pub fn constraints(self) -> Vec<CiConstraint> {
        let c =
            |i, j, s: &[usize]| CiConstraint::new(i, j, s.to_vec(), 4).expect("valid constraint");
        match self {
            DgpKind::Example1 | DgpKind::Misspec | DgpKind::Ovb => {
                vec![c(0, 1, &[]), c(0, 2, &[]), c(2, 3, &[1])]
            }
            DgpKind::Example2 => vec![c(0, 2, &[]), c(0, 3, &[2]), c(1, 2, &[0])],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub seed: u64,
    /// Extra seed-tree labels below `seed`, e.g. the replication index.
    #[serde(default)]
    pub path: Vec<u64>,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            seed,
            path: Vec::new(),
        }
    }

    pub fn replication(&self, r: usize) -> Self {
        let mut s = self.clone();
        s.path.push(r as u64);
        s
    }

    fn tree(&self) -> SeedTree {
        self.path
            .iter()
            .fold(SeedTree::new(self.seed).child(0xD6), |t, &l| t.child(l))
    }
}

/// Quantities kept out of the estimator's dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub u: Vec<f64>,
    /// Logit of `P(T=1 | X, U)`.
    pub lin_t: Vec<f64>,
    /// Logit of `P(Y=1 | X, U, T)`, or the mean of `Y` for [`DgpKind::Ovb`].
    pub lin_y: Vec<f64>,
}

pub fn covariate_names() -> Vec<String> {
    (1..=4).map(|k| format!("X{k}")).collect()
}

pub fn generate(spec: &DgpSpec) -> Result<(Dataset, Truth)> {
    if spec.n < 10 {
        return Err(Error::InvalidArgument(format!(
            "simulated datasets need n >= 10, got {}",
            spec.n
        )));
    }
    let mut rng = spec.tree().rng();
    let n = spec.n;
    let mut x = vec![Vec::with_capacity(n); 4];
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut truth = Truth {
        u: Vec::with_capacity(n),
        lin_t: Vec::with_capacity(n),
        lin_y: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let (u, e1, e2, e3, e4) = (normal(), normal(), normal(), normal(), normal());
        let (x1, x2, x3, x4, lin) = match spec.kind {
            DgpKind::Example1 | DgpKind::Ovb => {
                let x1 = e1;
                let x2 = (e2 < 0.0) as u8 as f64;
                let x3 = -0.5 + x2 + e3;
                let x4 = 1.5 * x1 * x2 + e4;
                (x1, x2, x3, x4, x1 * x2 + x1 * x3 + x2 * x3 * x4 + 0.2 * u)
            }
            DgpKind::Misspec => {
                let x1 = e1;
                let x2 = (x1 + 0.5 * e2 >= 0.0) as u8 as f64;
                let x3 = -0.5 + 2.0 * x1 + x2 + e3;
                let x4 = 1.5 * x1 * x2 + e4;
                (x1, x2, x3, x4, x1 * x2 + x1 * x3 + x2 * x3 * x4 + 0.2 * u)
            }
            DgpKind::Example2 => {
                let x1 = e1;
                let x2 = -0.5 + x1 + 1.5 * u + e2;
                let x3 = e3;
                let x4 = -0.5 + x3 + 2.0 * u + e4;
                (x1, x2, x3, x4, x1 * x3 + x1 * x2 * x3 + x1 * x3 * x4)
            }
        };
        let ti = (rng.random::<f64>() < sigmoid(lin)) as u8;
        let lin_y = ti as f64 * lin;
        let yi = if spec.kind == DgpKind::Ovb {
            lin_y + 0.5 * rng.sample::<f64, _>(StandardNormal)
        } else {
            (rng.random::<f64>() < sigmoid(lin_y)) as u8 as f64
        };
        for (col, v) in x.iter_mut().zip([x1, x2, x3, x4]) {
            col.push(v);
        }
        t.push(ti);
        y.push(yi);
        truth.u.push(u);
        truth.lin_t.push(lin);
        truth.lin_y.push(lin_y);
    }
    Ok((Dataset::new(covariate_names(), x, t, y)?, truth))
}
