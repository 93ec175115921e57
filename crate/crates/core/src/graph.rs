//! Network topologies, symmetric doubly-stochastic consensus matrices, and
//! nested consensus (mixing) rounds over a stacked agent state.
//!
//! A stacked state is an `n x p` matrix whose row `i` is agent `i`'s local
//! copy of the decision variable. One consensus round replaces the state
//! `Y` by `W Y`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::portable::fmt_f64;

/// Row/column sums must be within this distance of one.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Allowed deviation of the leading eigenvalue from one.
pub const LEADING_EIGEN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopologyKind {
    /// Ring where each node links to its `c` nearest neighbors (`c/2` per side).
    Cyclic { c: usize },
    Complete,
    Star { hub: usize },
    Custom { edges: Vec<(usize, usize)> },
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyKind::Cyclic { c } => write!(f, "cyclic({c})"),
            TopologyKind::Complete => write!(f, "complete"),
            TopologyKind::Star { hub } => write!(f, "star({hub})"),
            TopologyKind::Custom { edges } => write!(f, "custom({} edges)", edges.len()),
        }
    }
}

/// Connected undirected graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    kind: TopologyKind,
    /// Normalized `(i, j)` with `i < j`, sorted, deduplicated.
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    pub fn build(kind: TopologyKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("topology needs at least one agent"));
        }
        let mut edges = BTreeSet::new();
        match &kind {
            TopologyKind::Cyclic { c } => {
                if *c == 0 || c % 2 != 0 || *c >= n {
                    return Err(Error::invalid(format!(
                        "cyclic({c}) needs an even c with 2 <= c < n = {n}"
                    )));
                }
                for i in 0..n {
                    for off in 1..=c / 2 {
                        edges.insert(ordered(i, (i + off) % n));
                    }
                }
            }
            TopologyKind::Complete => {
                for i in 0..n {
                    for j in i + 1..n {
                        edges.insert((i, j));
                    }
                }
            }
            TopologyKind::Star { hub } => {
                if *hub >= n {
                    return Err(Error::invalid(format!("star hub {hub} out of range for n = {n}")));
                }
                for i in (0..n).filter(|i| i != hub) {
                    edges.insert(ordered(*hub, i));
                }
            }
            TopologyKind::Custom { edges: list } => {
                for &(i, j) in list {
                    if i >= n || j >= n {
                        return Err(Error::invalid(format!(
                            "edge ({i}, {j}) references a node outside 0..{n}"
                        )));
                    }
                    if i == j {
                        return Err(Error::invalid(format!("self-loop at node {i}")));
                    }
                    edges.insert(ordered(i, j));
                }
            }
        }
        let edges: Vec<_> = edges.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        let topo = Topology {
            n,
            kind,
            edges,
            neighbors,
        };
        if !topo.is_connected() {
            return Err(Error::invalid(format!("{} on {n} nodes is disconnected", topo.kind)));
        }
        Ok(topo)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> &TopologyKind {
        &self.kind
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.edges.binary_search(&ordered(i, j)).is_ok()
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == self.n
    }
}

fn ordered(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Topology block as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: String,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub c: Option<usize>,
    #[serde(default)]
    pub hub: Option<usize>,
    #[serde(default)]
    pub edges: Option<Vec<[usize; 2]>>,
}

impl TopologySpec {
    pub fn to_kind(&self) -> Result<TopologyKind> {
        match self.kind.as_str() {
            "cyclic" => {
                let c = self
                    .c
                    .ok_or_else(|| Error::invalid("cyclic topology requires `c`"))?;
                Ok(TopologyKind::Cyclic { c })
            }
            "complete" => Ok(TopologyKind::Complete),
            "star" => Ok(TopologyKind::Star {
                hub: self.hub.unwrap_or(0),
            }),
            "custom" => {
                let edges = self
                    .edges
                    .as_ref()
                    .ok_or_else(|| Error::invalid("custom topology requires `edges`"))?;
                Ok(TopologyKind::Custom {
                    edges: edges.iter().map(|e| (e[0], e[1])).collect(),
                })
            }
            other => Err(Error::invalid(format!(
                "unknown topology kind `{other}` (expected cyclic, complete, star, custom)"
            ))),
        }
    }

    /// Builds the topology; `default_n` applies when the block omits `n`.
    pub fn build(&self, default_n: usize) -> Result<Topology> {
        let n = self.n.unwrap_or(default_n);
        if n != default_n {
            return Err(Error::invalid(format!(
                "topology n = {n} disagrees with problem n = {default_n}"
            )));
        }
        Topology::build(self.to_kind()?, n)
    }
}

/// Symmetric doubly-stochastic mixing matrix with its spectral parameter.
#[derive(Debug, Clone)]
pub struct ConsensusMatrix {
    w: DMatrix<f64>,
    beta: f64,
    lambda_min: f64,
    provenance: String,
}

impl ConsensusMatrix {
    /// Validates `w` against every consensus-matrix invariant.
    ///
    /// When `topology` is given, the sparsity pattern must match its edges.
    pub fn from_matrix(
        w: DMatrix<f64>,
        topology: Option<&Topology>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let n = w.nrows();
        if n == 0 || w.ncols() != n {
            return Err(Error::dims("square nonempty matrix", format!("{}x{}", n, w.ncols())));
        }
        if let Some(t) = topology {
            if t.n() != n {
                return Err(Error::dims(format!("{}x{}", t.n(), t.n()), format!("{n}x{n}")));
            }
        }
        for i in 0..n {
            if w[(i, i)] <= 0.0 {
                return Err(Error::invalid(format!("diagonal entry w[{i},{i}] is not positive")));
            }
            let (mut row, mut col) = (0.0, 0.0);
            for j in 0..n {
                let v = w[(i, j)];
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::invalid(format!("entry w[{i},{j}] = {v} is not a weight")));
                }
                if v != w[(j, i)] {
                    return Err(Error::invalid(format!("w[{i},{j}] != w[{j},{i}]")));
                }
                if let Some(t) = topology {
                    if i != j && (v > 0.0) != t.has_edge(i, j) {
                        return Err(Error::invalid(format!(
                            "w[{i},{j}] = {v} disagrees with the edge set"
                        )));
                    }
                }
                row += v;
                col += w[(j, i)];
            }
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!("row/column {i} does not sum to 1")));
            }
        }
        let (beta, lambda_min) = spectrum(&w)?;
        if beta >= 1.0 {
            return Err(Error::invalid(format!(
                "second eigenvalue magnitude {beta} is not below 1 (disconnected or periodic)"
            )));
        }
        Ok(ConsensusMatrix {
            w,
            beta,
            lambda_min,
            provenance: provenance.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Second largest eigenvalue magnitude.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Smallest eigenvalue; `W - alpha L I` stays above `-1` iff
    /// `alpha L < 1 + lambda_min`.
    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Writes `W` row-major, one row per line, shortest round-trip decimals.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.n()).map(|j| fmt_f64(self.w[(i, j)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    /// One mixing round `dst = W src`, summing neighbors in index order.
    pub(crate) fn mix_into(&self, src: &DMatrix<f64>, dst: &mut DMatrix<f64>) {
        let n = self.n();
        let w = self.w.as_slice();
        let s = src.as_slice();
        let d = dst.as_mut_slice();
        d.fill(0.0);
        for (col_s, col_d) in s.chunks_exact(n).zip(d.chunks_exact_mut(n)) {
            for (j, &v) in col_s.iter().enumerate() {
                let w_col = &w[j * n..(j + 1) * n];
                for (acc, &wij) in col_d.iter_mut().zip(w_col) {
                    *acc += wij * v;
                }
            }
        }
    }
}

/// Metropolis-Hastings weights: `w_ij = 1 / (1 + max(d_i, d_j))` on edges,
/// diagonal fills each row to one.
pub fn metropolis_weights(topology: &Topology) -> Result<ConsensusMatrix> {
    let n = topology.n();
    let mut w = DMatrix::zeros(n, n);
    for &(i, j) in topology.edges() {
        let v = 1.0 / (1.0 + topology.degree(i).max(topology.degree(j)) as f64);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..n {
        let off: f64 = topology.neighbors(i).iter().map(|&j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    ConsensusMatrix::from_matrix(
        w,
        Some(topology),
        format!("{},n={n},metropolis", topology.kind()),
    )
}

/// Uniform `1/n` averaging (one-hop aggregation through a server).
pub fn uniform_weights(n: usize) -> Result<ConsensusMatrix> {
    if n == 0 {
        return Err(Error::invalid("uniform weights need at least one agent"));
    }
    Ok(ConsensusMatrix {
        w: DMatrix::from_element(n, n, 1.0 / n as f64),
        beta: 0.0,
        lambda_min: if n == 1 { 1.0 } else { 0.0 },
        provenance: format!("complete,n={n},uniform"),
    })
}

/// Applies `t_c` successive consensus rounds: returns `W^{t_c} Y`.
pub fn apply_consensus(w: &ConsensusMatrix, state: &DMatrix<f64>, t_c: usize) -> Result<DMatrix<f64>> {
    if state.nrows() != w.n() {
        return Err(Error::dims(
            format!("{} agent rows", w.n()),
            format!("{} rows", state.nrows()),
        ));
    }
    let mut cur = state.clone();
    let mut next = DMatrix::zeros(state.nrows(), state.ncols());
    for _ in 0..t_c {
        w.mix_into(&cur, &mut next);
        // A bitwise fixed point stays fixed, so remaining rounds are no-ops.
        if next == cur {
            break;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Largest magnitude among the non-leading eigenvalues of a symmetric `W`.
pub fn spectral_gap(w: &DMatrix<f64>) -> Result<f64> {
    spectrum(w).map(|(beta, _)| beta)
}

/// `(beta, lambda_min)` of a symmetric `W` whose leading eigenvalue is 1.
fn spectrum(w: &DMatrix<f64>) -> Result<(f64, f64)> {
    let n = w.nrows();
    if n == 0 || w.ncols() != n {
        return Err(Error::dims("square nonempty matrix", format!("{}x{}", n, w.ncols())));
    }
    let eig = SymmetricEigen::new(w.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    if (vals[0] - 1.0).abs() > LEADING_EIGEN_TOL {
        return Err(Error::MalformedMatrix(vals[0]));
    }
    let beta = vals[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((beta, vals[n - 1]))
}
