//! Local objectives and the strongly convex quadratic benchmark.
//!
//! Agent `i` holds `f_i(x) = 1/2 x^T A_i x + b_i^T x` with `A_i` symmetric
//! positive definite. The global problem minimizes `sum_i f_i`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::portable::SeededRng;

/// A smooth strongly convex local objective.
pub trait LocalFunction {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    /// Writes the gradient at `x` into `out`.
    fn gradient_into(&self, x: &[f64], out: &mut [f64]);
    /// Strong convexity constant.
    fn mu(&self) -> f64;
    /// Gradient Lipschitz constant.
    fn lipschitz(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
enum Hessian {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalQuadratic {
    hessian: Hessian,
    b: DVector<f64>,
    mu: f64,
    l: f64,
}

impl LocalQuadratic {
    /// Diagonal Hessian; the curvature constants are the extreme entries.
    pub fn diagonal(diag: Vec<f64>, b: DVector<f64>) -> Result<Self> {
        if diag.is_empty() || diag.len() != b.len() {
            return Err(Error::dims(format!("{} diagonal entries", b.len()), format!("{}", diag.len())));
        }
        if diag.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::invalid("diagonal Hessian entries must be positive and finite"));
        }
        let mu = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let l = diag.iter().copied().fold(0.0, f64::max);
        Ok(LocalQuadratic {
            hessian: Hessian::Diagonal(diag),
            b,
            mu,
            l,
        })
    }

    /// General symmetric positive definite Hessian.
    pub fn dense(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let p = b.len();
        if a.nrows() != p || a.ncols() != p || p == 0 {
            return Err(Error::dims(format!("{p}x{p}"), format!("{}x{}", a.nrows(), a.ncols())));
        }
        for i in 0..p {
            for j in 0..i {
                if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 {
                    return Err(Error::invalid(format!("A is not symmetric at ({i}, {j})")));
                }
            }
        }
        let eig = SymmetricEigen::new(a.clone());
        let mu = eig.eigenvalues.min();
        let l = eig.eigenvalues.max();
        if mu <= 0.0 {
            return Err(Error::invalid(format!("A is not positive definite (min eigenvalue {mu})")));
        }
        Ok(LocalQuadratic {
            hessian: Hessian::Dense(a),
            b,
            mu,
            l,
        })
    }

    pub fn a(&self) -> DMatrix<f64> {
        match &self.hessian {
            Hessian::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            Hessian::Dense(a) => a.clone(),
        }
    }

    pub fn diag(&self) -> Option<&[f64]> {
        match &self.hessian {
            Hessian::Diagonal(d) => Some(d),
            Hessian::Dense(_) => None,
        }
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// `A x` with a fixed summation order.
    fn hessian_times(&self, x: &[f64], out: &mut [f64]) {
        match &self.hessian {
            Hessian::Diagonal(d) => {
                for ((o, &di), &xi) in out.iter_mut().zip(d).zip(x) {
                    *o = di * xi;
                }
            }
            Hessian::Dense(a) => {
                for (r, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (c, &xc) in x.iter().enumerate() {
                        acc += a[(r, c)] * xc;
                    }
                    *o = acc;
                }
            }
        }
    }

    /// Minimizer of this agent's own objective, `-A^{-1} b`.
    pub fn minimizer(&self) -> Result<DVector<f64>> {
        match &self.hessian {
            Hessian::Diagonal(d) => Ok(DVector::from_iterator(
                d.len(),
                d.iter().zip(self.b.iter()).map(|(&di, &bi)| -bi / di),
            )),
            Hessian::Dense(a) => cholesky_solve(a, &-&self.b),
        }
    }
}

impl LocalFunction for LocalQuadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        self.hessian_times(x, &mut ax);
        let quad: f64 = x.iter().zip(&ax).map(|(a, b)| a * b).sum();
        let lin: f64 = x.iter().zip(self.b.iter()).map(|(a, b)| a * b).sum();
        0.5 * quad + lin
    }

    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        self.hessian_times(x, out);
        for (o, &bi) in out.iter_mut().zip(self.b.iter()) {
            *o += bi;
        }
    }

    fn mu(&self) -> f64 {
        self.mu
    }

    fn lipschitz(&self) -> f64 {
        self.l
    }
}

/// Curvature summary used by step-length rules and the theory constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature {
    /// `L = max_i L_i`.
    pub l_max: f64,
    /// Mean of the per-agent strong convexity constants.
    pub mu_bar: f64,
    /// Mean of the per-agent Lipschitz constants.
    pub l_bar: f64,
    /// `min_i mu_i L_i / (mu_i + L_i)`.
    pub gamma: f64,
}

/// `n` local quadratics plus their exact global and local minimizers.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    locals: Vec<LocalQuadratic>,
    n: usize,
    p: usize,
    curvature: Curvature,
    x_star: DVector<f64>,
    u_star: DMatrix<f64>,
    kappa: f64,
    seed: Option<u64>,
}

impl ProblemInstance {
    pub fn new(locals: Vec<LocalQuadratic>, seed: Option<u64>) -> Result<Self> {
        let n = locals.len();
        if n == 0 {
            return Err(Error::invalid("problem needs at least one agent"));
        }
        let p = locals[0].dim();
        if let Some(bad) = locals.iter().find(|f| f.dim() != p) {
            return Err(Error::dims(format!("dimension {p}"), format!("{}", bad.dim())));
        }
        let curvature = curvature_of(&locals);
        let x_star = solve_global(&locals)?;
        let mut u_star = DMatrix::zeros(n, p);
        for (i, f) in locals.iter().enumerate() {
            u_star.set_row(i, &f.minimizer()?.transpose());
        }
        Ok(ProblemInstance {
            kappa: curvature.l_bar / curvature.mu_bar,
            locals,
            n,
            p,
            curvature,
            x_star,
            u_star,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn locals(&self) -> &[LocalQuadratic] {
        &self.locals
    }

    pub fn local(&self, i: usize) -> Result<&LocalQuadratic> {
        self.locals
            .get(i)
            .ok_or(Error::IndexOutOfRange { index: i, n: self.n })
    }

    pub fn x_star(&self) -> &DVector<f64> {
        &self.x_star
    }

    /// Row `i` is agent `i`'s own minimizer.
    pub fn u_star(&self) -> &DMatrix<f64> {
        &self.u_star
    }

    /// Realized condition number `L_bar / mu_bar`.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn local_gradient(&self, i: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let f = self.local(i)?;
        if x.len() != self.p {
            return Err(Error::dims(format!("{}-vector", self.p), format!("{}-vector", x.len())));
        }
        let mut g = DVector::zeros(self.p);
        f.gradient_into(x.as_slice(), g.as_mut_slice());
        Ok(g)
    }

    /// Row `i` of the result is `grad f_i` at row `i` of `x`.
    pub fn stacked_gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.n, self.p);
        self.stacked_gradient_into(x, &mut out)?;
        Ok(out)
    }

    pub(crate) fn stacked_gradient_into(&self, x: &DMatrix<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.n || x.ncols() != self.p {
            return Err(Error::dims(
                format!("{}x{}", self.n, self.p),
                format!("{}x{}", x.nrows(), x.ncols()),
            ));
        }
        let mut row = vec![0.0; self.p];
        let mut g = vec![0.0; self.p];
        for (i, f) in self.locals.iter().enumerate() {
            for (c, r) in row.iter_mut().enumerate() {
                *r = x[(i, c)];
            }
            f.gradient_into(&row, &mut g);
            for (c, &gc) in g.iter().enumerate() {
                out[(i, c)] = gc;
            }
        }
        Ok(())
    }

    /// `(1/n) sum_i grad f_i(x)` at a single point.
    pub fn mean_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(self.p);
        let mut g = vec![0.0; self.p];
        for f in &self.locals {
            f.gradient_into(x.as_slice(), &mut g);
            for (a, &gc) in acc.iter_mut().zip(&g) {
                *a += gc;
            }
        }
        acc / self.n as f64
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = InstanceFile::from_instance(self)?;
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: InstanceFile = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        file.into_instance()
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

fn curvature_of(locals: &[LocalQuadratic]) -> Curvature {
    let n = locals.len() as f64;
    let mut l_max: f64 = 0.0;
    let (mut mu_sum, mut l_sum) = (0.0, 0.0);
    let mut gamma = f64::INFINITY;
    for f in locals {
        l_max = l_max.max(f.l);
        mu_sum += f.mu;
        l_sum += f.l;
        gamma = gamma.min(f.mu * f.l / (f.mu + f.l));
    }
    Curvature {
        l_max,
        mu_bar: mu_sum / n,
        l_bar: l_sum / n,
        gamma,
    }
}

/// Solves `(sum_i A_i) x = -sum_i b_i`.
fn solve_global(locals: &[LocalQuadratic]) -> Result<DVector<f64>> {
    let p = locals[0].dim();
    let mut b_sum = DVector::zeros(p);
    for f in locals {
        b_sum += &f.b;
    }
    if locals.iter().all(|f| f.diag().is_some()) {
        let mut d_sum = vec![0.0; p];
        for f in locals {
            for (s, &d) in d_sum.iter_mut().zip(f.diag().unwrap()) {
                *s += d;
            }
        }
        return Ok(DVector::from_iterator(
            p,
            d_sum.iter().zip(b_sum.iter()).map(|(&d, &b)| -b / d),
        ));
    }
    let mut a_sum = DMatrix::zeros(p, p);
    for f in locals {
        a_sum += f.a();
    }
    cholesky_solve(&a_sum, &-b_sum)
}

/// Cholesky solve with a fixed operation order.
fn cholesky_solve(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let p = a.nrows();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(Error::Singular(format!("pivot {j} is {d}")));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..p {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    let mut z = DVector::zeros(p);
    for i in 0..p {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    let mut x = DVector::zeros(p);
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in i + 1..p {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

/// Generates the seeded diagonal quadratic benchmark.
///
/// Every agent gets one diagonal entry equal to `kappa` and one equal to 1 at
/// distinct seeded coordinates; the remaining entries are log-uniform on
/// `[1, kappa]` and `b_i` is uniform on `[0, 1)^p`. Since every `mu_i = 1` and
/// every `L_i = kappa`, the realized `L_bar / mu_bar` equals `kappa` exactly.
pub fn generate_quadratic(n: usize, p: usize, kappa: f64, seed: u64) -> Result<ProblemInstance> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if p == 0 {
        return Err(Error::invalid("p must be at least 1"));
    }
    if !(kappa >= 1.0 && kappa.is_finite()) {
        return Err(Error::invalid(format!("kappa must be a finite value >= 1, got {kappa}")));
    }
    if kappa > 1.0 && p < 2 {
        return Err(Error::invalid("p >= 2 is needed to pin both extreme eigenvalues"));
    }
    let mut rng = SeededRng::new(seed);
    let mut locals = Vec::with_capacity(n);
    for _ in 0..n {
        let mut diag = vec![1.0; p];
        if kappa > 1.0 {
            let hi = rng.below(p);
            let mut lo = rng.below(p - 1);
            if lo >= hi {
                lo += 1;
            }
            for (c, d) in diag.iter_mut().enumerate() {
                *d = if c == hi {
                    kappa
                } else if c == lo {
                    1.0
                } else {
                    rng.log_uniform(1.0, kappa)
                };
            }
        }
        let b = DVector::from_iterator(p, (0..p).map(|_| rng.uniform()));
        locals.push(LocalQuadratic::diagonal(diag, b)?);
    }
    ProblemInstance::new(locals, Some(seed))
}

const INSTANCE_FORMAT: &str = "neardgd-instance/1";

/// On-disk form of a diagonal quadratic instance.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    format: String,
    n: usize,
    p: usize,
    seed: Option<u64>,
    kappa: f64,
    diagonals: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl InstanceFile {
    fn from_instance(inst: &ProblemInstance) -> Result<Self> {
        let mut diagonals = Vec::with_capacity(inst.n);
        for f in &inst.locals {
            let d = f
                .diag()
                .ok_or_else(|| Error::invalid("only diagonal instances can be serialized"))?;
            diagonals.push(d.to_vec());
        }
        Ok(InstanceFile {
            format: INSTANCE_FORMAT.into(),
            n: inst.n,
            p: inst.p,
            seed: inst.seed,
            kappa: inst.kappa,
            diagonals,
            b: inst.locals.iter().map(|f| f.b.iter().copied().collect()).collect(),
        })
    }

    fn into_instance(self) -> Result<ProblemInstance> {
        if self.format != INSTANCE_FORMAT {
            return Err(Error::invalid(format!("unsupported format `{}`", self.format)));
        }
        if self.diagonals.len() != self.n || self.b.len() != self.n {
            return Err(Error::dims(format!("{} agents", self.n), format!("{}", self.diagonals.len())));
        }
        let mut locals = Vec::with_capacity(self.n);
        for (d, b) in self.diagonals.into_iter().zip(self.b) {
            if d.len() != self.p || b.len() != self.p {
                return Err(Error::dims(format!("p = {}", self.p), format!("{}", d.len())));
            }
            locals.push(LocalQuadratic::diagonal(d, DVector::from_vec(b))?);
        }
        ProblemInstance::new(locals, self.seed)
    }
}
