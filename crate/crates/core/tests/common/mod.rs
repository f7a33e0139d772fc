#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use sensproj::dataio::Dataset;

/// d-separation by moralizing the ancestral graph of `{a, b} + given`,
/// deleting `given`, and checking whether `a` still reaches `b`.
pub fn moral_dsep(n: usize, edges: &[(usize, usize)], a: usize, b: usize, given: &[usize]) -> bool {
    let mut keep: BTreeSet<usize> = given.iter().copied().collect();
    keep.insert(a);
    keep.insert(b);
    let mut stack: Vec<usize> = keep.iter().copied().collect();
    while let Some(v) = stack.pop() {
        for &(p, c) in edges {
            if c == v && keep.insert(p) {
                stack.push(p);
            }
        }
    }
    let mut adj = vec![BTreeSet::new(); n];
    let mut link = |x: usize, y: usize| {
        adj[x].insert(y);
        adj[y].insert(x);
    };
    for &(p, c) in edges {
        if keep.contains(&p) && keep.contains(&c) {
            link(p, c);
        }
    }
    for &v in &keep {
        let parents: Vec<usize> = edges
            .iter()
            .filter(|&&(p, c)| c == v && keep.contains(&p))
            .map(|&(p, _)| p)
            .collect();
        for x in 0..parents.len() {
            for y in x + 1..parents.len() {
                link(parents[x], parents[y]);
            }
        }
    }
    let blocked: BTreeSet<usize> = given.iter().copied().collect();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([a]);
    seen[a] = true;
    while let Some(v) = queue.pop_front() {
        if v == b {
            return false;
        }
        for &w in &adj[v] {
            if !seen[w] && !blocked.contains(&w) {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    true
}

/// Random DAG with 2..=max_v vertices: edges follow a random order.
pub fn random_dag<R: Rng>(rng: &mut R, max_v: usize, p_edge: f64) -> (usize, Vec<(usize, usize)>) {
    let n = rng.random_range(2..=max_v);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut edges = Vec::new();
    for x in 0..n {
        for y in x + 1..n {
            if rng.random::<f64>() < p_edge {
                edges.push((order[x], order[y]));
            }
        }
    }
    (n, edges)
}

fn names(p: usize) -> Vec<String> {
    (1..=p).map(|k| format!("X{k}")).collect()
}

/// Rows repeated `count` times, with alternating treatment and a simple
/// outcome.
pub fn from_cells(cells: &[(Vec<f64>, usize)]) -> Dataset {
    let p = cells[0].0.len();
    let mut cols = vec![Vec::new(); p];
    let mut t = Vec::new();
    for (row, count) in cells {
        for _ in 0..*count {
            for (c, v) in cols.iter_mut().zip(row) {
                c.push(*v);
            }
            t.push((t.len() % 2) as u8);
        }
    }
    let y: Vec<f64> = t.iter().map(|&ti| ti as f64).collect();
    Dataset::new(names(p), cols, t, y).unwrap()
}

/// Binary `X1`, `X2` with cell counts `w1[a] * w2[b]`, so the sample is
/// exactly independent.
pub fn independent_binary(w1: [usize; 2], w2: [usize; 2]) -> Dataset {
    let mut cells = Vec::new();
    for a in 0..2 {
        for b in 0..2 {
            cells.push((vec![a as f64, b as f64], w1[a] * w2[b]));
        }
    }
    from_cells(&cells)
}

/// Discrete analogue of the first simulation design: `X1, X2` binary and
/// independent, `X3 | X2` on three levels, `X4 | X1, X2` binary. Counts are
/// products of the factor weights, so the sample factorizes exactly along
/// `X1 -> X4 <- X2 -> X3`.
pub fn discrete_example1() -> Dataset {
    let w1 = [2, 3];
    let w2 = [1, 1];
    let w3 = [[1, 2, 3], [3, 1, 1]];
    let w4 = [[1, 4], [2, 3], [3, 2], [4, 1]];
    let mut cells = Vec::new();
    for x1 in 0..2 {
        for x2 in 0..2 {
            for x3 in 0..3 {
                for x4 in 0..2 {
                    let count = w1[x1] * w2[x2] * w3[x2][x3] * w4[2 * x1 + x2][x4];
                    cells.push((
                        vec![x1 as f64, x2 as f64, x3 as f64 - 1.0, x4 as f64],
                        count,
                    ));
                }
            }
        }
    }
    from_cells(&cells)
}

/// Sample variance with the `n - 1` divisor.
pub fn var(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Group means of `phi` by the key columns, returned per unit.
pub fn cell_means(phi: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    let n = phi.len();
    (0..n)
        .map(|u| {
            let members: Vec<usize> = (0..n).filter(|&m| keys[m] == keys[u]).collect();
            members.iter().map(|&m| phi[m]).sum::<f64>() / members.len() as f64
        })
        .collect()
}

pub fn keys(ds: &Dataset, cols: &[usize]) -> Vec<Vec<f64>> {
    (0..ds.n())
        .map(|u| cols.iter().map(|&c| ds.value(u, c)).collect())
        .collect()
}
