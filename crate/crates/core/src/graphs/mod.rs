//! DAGs, d-separation, and covariate independence constraints.

mod constraints;

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::error::{Error, Result};

pub use constraints::{format_constraints, parse_constraints, CiConstraint};

/// Directed acyclic graph over named vertices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl Dag {
    /// Builds a DAG from vertex names and `(from, to)` index pairs.
    pub fn from_edges(names: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vertex `{n}`")));
            }
        }
        let p = names.len();
        let mut parents = vec![Vec::new(); p];
        let mut children = vec![Vec::new(); p];
        for &(a, b) in edges {
            if a >= p || b >= p {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) out of range"
                )));
            }
            if !parents[b].contains(&a) {
                parents[b].push(a);
                children[a].push(b);
            }
        }
        for v in parents.iter_mut().chain(children.iter_mut()) {
            v.sort_unstable();
        }
        let dag = Self {
            names,
            index,
            parents,
            children,
        };
        if let Some(cycle) = dag.find_cycle() {
            return Err(Error::Cycle(
                cycle.into_iter().map(|v| dag.names[v].clone()).collect(),
            ));
        }
        Ok(dag)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vertex(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownVertex(name.to_string()))
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (child, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                out.push((p, child));
            }
        }
        out.sort_unstable();
        out
    }

    fn find_cycle(&self) -> Option<Vec<usize>> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; self.len()];
        let mut stack: Vec<usize> = Vec::new();
        for root in 0..self.len() {
            if state[root] != 0 {
                continue;
            }
            let mut work = vec![(root, 0usize)];
            while let Some(&mut (v, ref mut next)) = work.last_mut() {
                if *next == 0 {
                    state[v] = 1;
                    stack.push(v);
                }
                if let Some(&c) = self.children[v].get(*next) {
                    *next += 1;
                    match state[c] {
                        0 => work.push((c, 0)),
                        1 => {
                            let start = stack.iter().position(|&s| s == c).unwrap();
                            let mut cycle = stack[start..].to_vec();
                            cycle.push(c);
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    state[v] = 2;
                    stack.pop();
                    work.pop();
                }
            }
        }
        None
    }

    /// `given` together with all of its ancestors.
    pub fn ancestors_of(&self, given: &[usize]) -> BTreeSet<usize> {
        let mut seen: BTreeSet<usize> = given.iter().copied().collect();
        let mut queue: VecDeque<usize> = given.iter().copied().collect();
        while let Some(v) = queue.pop_front() {
            for &p in &self.parents[v] {
                if seen.insert(p) {
                    queue.push_back(p);
                }
            }
        }
        seen
    }

    /// Reachability ("Bayes ball") d-separation test on vertex indices.
    pub fn d_separated_idx(&self, a: usize, b: usize, given: &[usize]) -> Result<bool> {
        let p = self.len();
        if a >= p || b >= p || given.iter().any(|&s| s >= p) {
            return Err(Error::InvalidArgument("vertex index out of range".into()));
        }
        if a == b {
            return Err(Error::InvalidArgument("query vertices must differ".into()));
        }
        if given.contains(&a) || given.contains(&b) {
            return Err(Error::InvalidArgument(
                "query vertices must not be in the conditioning set".into(),
            ));
        }
        let mut observed = vec![false; p];
        for &s in given {
            observed[s] = true;
        }
        let mut anc_of_observed = vec![false; p];
        for v in self.ancestors_of(given) {
            anc_of_observed[v] = true;
        }

        // visited[v][0]: arrived from a child (moving up); [1]: from a parent
        let mut visited = vec![[false; 2]; p];
        let mut queue = VecDeque::from([(a, 0usize)]);
        while let Some((v, dir)) = queue.pop_front() {
            if visited[v][dir] {
                continue;
            }
            visited[v][dir] = true;
            if v == b && !observed[v] {
                return Ok(false);
            }
            if dir == 0 {
                if !observed[v] {
                    queue.extend(self.parents[v].iter().map(|&u| (u, 0)));
                    queue.extend(self.children[v].iter().map(|&u| (u, 1)));
                }
            } else {
                if !observed[v] {
                    queue.extend(self.children[v].iter().map(|&u| (u, 1)));
                }
                if anc_of_observed[v] {
                    queue.extend(self.parents[v].iter().map(|&u| (u, 0)));
                }
            }
        }
        Ok(true)
    }

    pub fn d_separated(&self, a: &str, b: &str, given: &[&str]) -> Result<bool> {
        let a = self.vertex(a)?;
        let b = self.vertex(b)?;
        let given = given
            .iter()
            .map(|s| self.vertex(s))
            .collect::<Result<Vec<_>>>()?;
        self.d_separated_idx(a, b, &given)
    }
}

/// Free-function form of [`Dag::d_separated`].
pub fn d_separated(g: &Dag, a: &str, b: &str, given: &[&str]) -> Result<bool> {
    g.d_separated(a, b, given)
}

/// Parses the edge-list format.
///
/// Statements are separated by `;` or newlines; `#` starts a comment.
/// `A -> B` adds an edge (chains `A -> B -> C` are accepted) and
/// `vertex A` (or `vertex A, B`) declares vertices. When any declaration is
/// present, edges may only mention declared vertices; otherwise vertices are
/// implied by the edges in order of first appearance.
pub fn parse_dag(text: &str) -> Result<Dag> {
    let mut declared: Vec<String> = Vec::new();
    let mut edge_stmts: Vec<(usize, Vec<String>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for stmt in line.split(';') {
            let stmt = stmt.trim();
            if stmt.is_empty() {
                continue;
            }
            if let Some(rest) = stmt
                .strip_prefix("vertex ")
                .or_else(|| stmt.strip_prefix("vertex\t"))
            {
                for name in rest.split(',') {
                    let name = check_name(name.trim(), lineno + 1)?;
                    if !declared.contains(&name) {
                        declared.push(name);
                    }
                }
            } else if stmt.contains("->") {
                let names = stmt
                    .split("->")
                    .map(|s| check_name(s.trim(), lineno + 1))
                    .collect::<Result<Vec<_>>>()?;
                edge_stmts.push((lineno + 1, names));
            } else {
                return Err(Error::Syntax {
                    line: lineno + 1,
                    message: format!("expected `A -> B` or `vertex A`, found `{stmt}`"),
                });
            }
        }
    }

    let explicit = !declared.is_empty();
    let mut names = declared;
    let mut edges = Vec::new();
    for (_, chain) in &edge_stmts {
        let mut ids = Vec::with_capacity(chain.len());
        for name in chain {
            let id = match names.iter().position(|n| n == name) {
                Some(id) => id,
                None if explicit => return Err(Error::UnknownVertex(name.clone())),
                None => {
                    names.push(name.clone());
                    names.len() - 1
                }
            };
            ids.push(id);
        }
        for w in ids.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Cycle(vec![names[w[0]].clone(), names[w[0]].clone()]));
            }
            edges.push((w[0], w[1]));
        }
    }
    Dag::from_edges(names, &edges)
}

fn check_name(name: &str, line: usize) -> Result<String> {
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(Error::Syntax {
            line,
            message: format!("invalid vertex name `{name}`"),
        });
    }
    Ok(name.to_string())
}

/// All `(i, j, S)` over `covariates` with `|S| <= max_cond` that the DAG
/// implies. Indices refer to positions in `covariates`; output has `i < j`,
/// sorted `S`, and is sorted lexicographically.
pub fn implied_constraints(
    g: &Dag,
    covariates: &[&str],
    max_cond: usize,
) -> Result<Vec<CiConstraint>> {
    let ids = covariates
        .iter()
        .map(|c| g.vertex(c))
        .collect::<Result<Vec<_>>>()?;
    let p = ids.len();
    let mut out = Vec::new();
    for i in 0..p {
        for j in (i + 1)..p {
            let rest: Vec<usize> = (0..p).filter(|&k| k != i && k != j).collect();
            for size in 0..=max_cond.min(rest.len()) {
                for subset in combinations(&rest, size) {
                    let given: Vec<usize> = subset.iter().map(|&k| ids[k]).collect();
                    if g.d_separated_idx(ids[i], ids[j], &given)? {
                        out.push(CiConstraint::new(i, j, subset, p)?);
                    }
                }
            }
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Pairwise form of the DAG factorization over `covariates`: along a
/// topological order, each vertex `v` with parents `pa` and earlier
/// non-parents `w_1, w_2, ...` contributes `v _||_ w_k | pa, w_1..w_{k-1}`.
///
/// Unlike an arbitrary implied set, projecting onto these once, in the
/// returned order, already reaches their intersection. Every parent of a
/// covariate must itself be listed. Ties in the order follow `covariates`.
pub fn markov_constraints(g: &Dag, covariates: &[&str]) -> Result<Vec<CiConstraint>> {
    let ids = covariates
        .iter()
        .map(|c| g.vertex(c))
        .collect::<Result<Vec<_>>>()?;
    let pos = |v: usize| ids.iter().position(|&x| x == v);
    for &v in &ids {
        if let Some(&p) = g.parents(v).iter().find(|&&p| pos(p).is_none()) {
            return Err(Error::InvalidArgument(format!(
                "parent `{}` of `{}` is not among the covariates",
                g.names[p], g.names[v]
            )));
        }
    }
    let p = ids.len();
    let mut order: Vec<usize> = Vec::with_capacity(p);
    let mut placed = vec![false; p];
    while order.len() < p {
        let next = (0..p)
            .find(|&k| {
                !placed[k]
                    && g.parents(ids[k])
                        .iter()
                        .all(|&q| placed[pos(q).expect("parent listed")])
            })
            .expect("acyclic graph has a source");
        placed[next] = true;
        order.push(next);
    }
    let mut out = Vec::new();
    for (rank, &v) in order.iter().enumerate() {
        let mut cond: Vec<usize> = g
            .parents(ids[v])
            .iter()
            .map(|&q| pos(q).expect("parent listed"))
            .collect();
        for &w in &order[..rank] {
            if cond.contains(&w) {
                continue;
            }
            out.push(CiConstraint::new(w, v, cond.clone(), p)?);
            cond.push(w);
        }
    }
    Ok(out)
}

pub(crate) fn combinations(items: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(size);
    fn rec(
        items: &[usize],
        size: usize,
        start: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for k in start..items.len() {
            cur.push(items[k]);
            rec(items, size, k + 1, cur, out);
            cur.pop();
        }
    }
    rec(items, size, 0, &mut current, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_implicit_vertices() {
        let g = parse_dag("X1 -> T; X2 -> T; T -> Y").unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.edge_count(), 3);
        assert_eq!(g.names(), ["X1", "T", "X2", "Y"]);
    }

    #[test]
    fn two_cycle_rejected() {
        match parse_dag("A -> B; B -> A") {
            Err(Error::Cycle(c)) => {
                assert_eq!(c.first(), c.last());
                assert!(c.len() == 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn declared_vertices_without_edges() {
        let g = parse_dag("vertex A, B\nvertex C # comment\n").unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn undeclared_vertex_in_edge() {
        assert!(matches!(
            parse_dag("vertex A; vertex B; A -> C"),
            Err(Error::UnknownVertex(v)) if v == "C"
        ));
    }

    #[test]
    fn chains_and_syntax_errors() {
        let g = parse_dag("A -> B -> C").unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
        assert!(matches!(
            parse_dag("A => B"),
            Err(Error::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn figure_one_marginal_independence() {
        let g = parse_dag("X1 -> T; X2 -> T; T -> Y; U -> T; U -> Y").unwrap();
        assert!(g.d_separated("X1", "X2", &[]).unwrap());
        assert!(!g.d_separated("X1", "X2", &["T"]).unwrap());
        assert!(!g.d_separated("X1", "X2", &["Y"]).unwrap());
    }

    #[test]
    fn markov_pairs_of_simulation_dag() {
        let g = parse_dag("X1 -> X4; X2 -> X3; X2 -> X4").unwrap();
        let cs = markov_constraints(&g, &["X1", "X2", "X3", "X4"]).unwrap();
        let want = [(0, 1, vec![]), (0, 2, vec![1]), (2, 3, vec![0, 1])];
        assert_eq!(cs.len(), 3);
        for (c, (i, j, s)) in cs.iter().zip(want) {
            assert_eq!((c.i, c.j, &c.s), (i, j, &s));
            let given: Vec<&str> = c.s.iter().map(|&k| ["X1", "X2", "X3", "X4"][k]).collect();
            assert!(g
                .d_separated(["X1", "X2", "X3", "X4"][c.i], ["X1", "X2", "X3", "X4"][c.j], &given)
                .unwrap());
        }
        assert!(markov_constraints(&g, &["X3", "X4"]).is_err());
    }

    #[test]
    fn chain_blocked_by_middle() {
        let g = parse_dag("A -> B; B -> C").unwrap();
        assert!(g.d_separated("A", "C", &["B"]).unwrap());
        assert!(!g.d_separated("A", "C", &[]).unwrap());
    }

    #[test]
    fn query_preconditions() {
        let g = parse_dag("A -> B").unwrap();
        assert!(g.d_separated("A", "A", &[]).is_err());
        assert!(g.d_separated("A", "B", &["A"]).is_err());
        assert!(matches!(
            g.d_separated("A", "Z", &[]),
            Err(Error::UnknownVertex(_))
        ));
    }

    #[test]
    fn example_one_constraints() {
        let g = parse_dag("X2 -> X3; X1 -> X4; X2 -> X4").unwrap();
        let cov = ["X1", "X2", "X3", "X4"];
        let cs = implied_constraints(&g, &cov, 1).unwrap();
        let names: Vec<String> = cs
            .iter()
            .map(|c| c.display(&cov.map(String::from)))
            .collect();
        for want in ["X1 _||_ X2", "X1 _||_ X3", "X3 _||_ X4 | X2"] {
            assert!(
                names.iter().any(|n| n == want),
                "missing {want} in {names:?}"
            );
        }
        assert!(!names.iter().any(|n| n == "X2 _||_ X3"));
    }

    #[test]
    fn edgeless_and_complete_graphs() {
        let g = parse_dag("vertex A, B, C").unwrap();
        let cs = implied_constraints(&g, &["A", "B", "C"], 0).unwrap();
        assert_eq!(cs.len(), 3);
        assert!(cs.iter().all(|c| c.s.is_empty()));

        let g = parse_dag("A -> B; A -> C; B -> C").unwrap();
        assert!(implied_constraints(&g, &["A", "B", "C"], 2)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(&[0, 1, 2, 3], 2).len(), 6);
        assert_eq!(combinations(&[0, 1], 0), vec![Vec::<usize>::new()]);
    }
}
