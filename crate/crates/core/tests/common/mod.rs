//! Independent reference computations shared by the integration tests.
//!
//! Nothing here calls into the crate's numerics: eigenvalues come from a
//! cyclic Jacobi sweep, products from triple loops, and descent from a
//! plain loop over `A x + b`.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use neardgd::graph::{metropolis_weights, ConsensusMatrix, Topology, TopologyKind};
use neardgd::objective::{generate_quadratic, ProblemInstance};

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| m[(i, j)]).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    vals.sort_by(|x, y| y.total_cmp(x));
    vals
}

/// Second largest eigenvalue magnitude by Jacobi.
pub fn beta_oracle(w: &DMatrix<f64>) -> f64 {
    let vals = jacobi_eigenvalues(w);
    vals[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn naive_matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(a.nrows(), b.ncols());
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[(i, k)] * b[(k, j)];
            }
            c[(i, j)] = s;
        }
    }
    c
}

/// Gradient of `1/2 x^T A x + b^T x`.
pub fn quad_grad(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut g = b.clone();
    for i in 0..x.len() {
        for j in 0..x.len() {
            g[i] += a[(i, j)] * x[j];
        }
    }
    g
}

/// Minimizer of `sum_i f_i` by Gaussian elimination with partial pivoting.
pub fn global_minimizer(inst: &ProblemInstance) -> DVector<f64> {
    let p = inst.p();
    let mut a = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for f in inst.locals() {
        a += f.a();
        rhs -= f.b();
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs())).unwrap();
        a.swap_rows(col, piv);
        rhs.swap_rows(col, piv);
        for r in col + 1..p {
            let f = a[(r, col)] / a[(col, col)];
            for c in col..p {
                a[(r, c)] -= f * a[(col, c)];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = DVector::zeros(p);
    for r in (0..p).rev() {
        let mut s = rhs[r];
        for c in r + 1..p {
            s -= a[(r, c)] * x[c];
        }
        x[r] = s / a[(r, r)];
    }
    x
}

pub fn rel_error(x: &DVector<f64>, x_star: &DVector<f64>) -> f64 {
    (x - x_star).norm_squared() / x_star.norm_squared()
}

/// The desk-scale setting: 10 agents, dimension 10, 4-cyclic Metropolis.
pub fn desk_setup(kappa: f64, seed: u64) -> (ProblemInstance, ConsensusMatrix) {
    let inst = generate_quadratic(10, 10, kappa, seed).unwrap();
    let topo = Topology::build(TopologyKind::Cyclic { c: 4 }, 10).unwrap();
    (inst, metropolis_weights(&topo).unwrap())
}

/// Minimal xorshift for test-side randomness independent of the crate.
pub struct XorShift(pub u64);

impl XorShift {
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// Random connected edge set: a random spanning tree plus extra edges.
pub fn random_connected_edges(n: usize, extra: usize, rng: &mut XorShift) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let mut edges = Vec::new();
    for i in 1..n {
        let parent = order[rng.below(i)];
        edges.push((order[i], parent));
    }
    for _ in 0..extra {
        let (a, b) = (rng.below(n), rng.below(n));
        if a != b {
            edges.push((a, b));
        }
    }
    edges
}
