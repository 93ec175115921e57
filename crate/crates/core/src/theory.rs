//! Constants and error bounds of the convergence analysis, evaluated for a
//! concrete instance, and checks of those bounds against trajectories.
//!
//! Notation follows the analysis: `D` bounds the stacked iterates, `D_hat`
//! bounds the averaged gradient-descent iterates around `x*`, `M` bounds the
//! deviation of a local gradient from the mean gradient on that ball, and
//! `eta = 1 + alpha L`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::ConsensusMatrix;
use crate::objective::ProblemInstance;
use crate::portable::fmt_f64;
use crate::solver::{gradient_phase, max_step_length, row_mean, Schedule, SolverState};

/// Absolute slack allowed when comparing a measured quantity with its bound.
pub const BOUND_SLACK: f64 = 1e-9;

/// Tolerance for the averaged-iterate identity `xbar_{k+1} = xbar_k - alpha g_k`.
pub const MEAN_IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConstants {
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub l_max: f64,
    pub mu_bar: f64,
    pub l_bar: f64,
    pub gamma: f64,
    /// `2 alpha gamma`.
    pub nu: f64,
    /// `1 + alpha L`.
    pub eta: f64,
    pub d_big: f64,
    pub d_hat: f64,
    pub m_big: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    /// `alpha c2`.
    pub nu_bar: f64,
    pub tg0: usize,
    pub c3_hat: f64,
    pub c5_hat: f64,
    /// `T_i` for `i = 0..=tg0` under `t_g(i) = max(tg0 - i, 1)`.
    pub t_seq: Vec<f64>,
    pub tau: f64,
    pub rho: f64,
    pub c_big: f64,
    /// `||xbar_0 - x*||`.
    pub dist0: f64,
}

/// `x^t` by repeated multiplication.
fn powu(x: f64, t: usize) -> f64 {
    (0..t).fold(1.0, |acc, _| acc * x)
}

impl TheoryConstants {
    /// `eta^t - 1 - t (eta - 1)`; zero for `t = 1`.
    pub fn t_value(&self, t_g: usize) -> f64 {
        if t_g <= 1 {
            return 0.0;
        }
        (powu(self.eta, t_g) - 1.0 - t_g as f64 * (self.eta - 1.0)).max(0.0)
    }

    /// `(eta^t - 1) / (eta - 1)`, i.e. `sum_{j<t} eta^j`.
    fn geometric(&self, t: usize) -> f64 {
        (0..t).map(|j| powu(self.eta, j)).sum()
    }

    /// `c1^{t_g}`.
    pub fn rate(&self, t_g: usize) -> f64 {
        self.c1.powf(t_g as f64)
    }

    /// Limit of the fixed-schedule bound as `k -> infinity`.
    pub fn theorem1_neighborhood(&self, t_c: usize, t_g: usize) -> f64 {
        let denom = 1.0 - self.rate(t_g);
        let consensus = self.c3 * powu(self.beta, t_c) * (powu(self.eta, t_g) - 1.0) / denom;
        let drift = self.c5 * self.t_value(t_g) / denom;
        consensus + drift
    }

    /// `||xbar_k - x*|| <= c1^{k t_g} dist0 + c3 beta^{t_c} (eta^{t_g} - 1) / (1 - c1^{t_g})
    ///   + c5 T(t_g) / (1 - c1^{t_g})`.
    pub fn theorem1_bound(&self, k: usize, t_c: usize, t_g: usize, dist0: f64) -> f64 {
        self.c1.powf((k * t_g) as f64) * dist0 + self.theorem1_neighborhood(t_c, t_g)
    }

    /// `C rho^k`.
    pub fn theorem2_bound(&self, k: usize) -> f64 {
        self.c_big * self.rho.powf(k as f64)
    }

    /// Per-agent bounds on `||x_{i,k} - x*||` and `||y_{i,k} - x*||` for
    /// fixed schedules.
    pub fn corollary1_bounds(&self, k: usize, t_c: usize, t_g: usize, dist0: f64) -> (f64, f64) {
        let denom = 1.0 - self.rate(t_g);
        let delta = self.c3 * (powu(self.eta, t_g) - 1.0) / denom + self.d_big;
        let drift = self.c5 * self.t_value(t_g) / denom;
        let tail = powu(self.beta, t_c) * delta + drift;
        let x = self.c1.powf((k * t_g) as f64) * dist0 + tail;
        let y = self.c1.powf(((k + 1) * t_g) as f64) * dist0 + tail + 2.0 * self.d_big;
        (x, y)
    }

    /// Per-agent bounds under the increasing-consensus schedules.
    pub fn corollary2_bounds(&self, k: usize) -> (f64, f64) {
        let x = self.theorem2_bound(k) + self.beta.powf(k as f64) * self.d_big;
        let y = self.theorem2_bound(k + 1) + self.beta.powf((k + 1) as f64) * self.d_big + 2.0 * self.d_big;
        (x, y)
    }

    /// `(c3 - D, c5 - M/L)`; both vanish because `eta - 1 = alpha L`.
    pub fn identity_residuals(&self) -> (f64, f64) {
        (self.c3 - self.d_big, self.c5 - self.m_big / self.l_max)
    }

    fn lemma3_p1(&self, t_c: usize) -> f64 {
        powu(self.beta, t_c) * self.d_big
    }

    fn lemma3_p2(&self, t_c: usize, j: usize) -> f64 {
        powu(self.eta, j) * powu(self.beta, t_c) * self.d_big
            + self.alpha * self.m_big * self.geometric(j)
    }

    fn lemma3_p3(&self, t_c: usize, t_g: usize) -> f64 {
        let geo = self.geometric(t_g);
        powu(self.beta, t_c) * self.d_big * self.l_max * geo + self.m_big * (geo - t_g as f64)
    }
}

/// Evaluates every constant for step length `alpha`, initial gradient count
/// `tg0` and shared start `x0`.
///
/// `y_0` in `D` is the output of the first gradient phase (`tg0` steps) from
/// the replicated `x0`.
pub fn compute_constants(
    instance: &ProblemInstance,
    w: &ConsensusMatrix,
    alpha: f64,
    tg0: usize,
    x0: &DVector<f64>,
) -> Result<TheoryConstants> {
    let bound = max_step_length(instance);
    if !(alpha > 0.0) || alpha > bound {
        return Err(Error::StepLength { alpha, bound });
    }
    compute_constants_unchecked(instance, w, alpha, tg0, x0)
}

/// Same formulas without the step-length precondition. The resulting bounds
/// carry no guarantee.
pub fn compute_constants_unchecked(
    instance: &ProblemInstance,
    w: &ConsensusMatrix,
    alpha: f64,
    tg0: usize,
    x0: &DVector<f64>,
) -> Result<TheoryConstants> {
    if tg0 == 0 {
        return Err(Error::invalid("tg0 must be at least 1"));
    }
    if x0.len() != instance.p() {
        return Err(Error::dims(format!("x0 of length {}", instance.p()), format!("{}", x0.len())));
    }
    let n = instance.n();
    let curv = instance.curvature();
    let l = curv.l_max;
    let x_star = instance.x_star();
    let u_star = instance.u_star();

    let nu = 2.0 * alpha * curv.gamma;
    let eta = 1.0 + alpha * l;
    let x_init = DMatrix::from_fn(n, x0.len(), |_, c| x0[c]);
    let (y0, _) = gradient_phase(instance, &x_init, tg0, alpha, false)?;
    let d_big = (&y0 - u_star).norm() + (nu + 4.0) / nu * u_star.norm();
    let d_hat = x_star.norm() + d_big / (n as f64).sqrt();
    let grad_norms: f64 = (0..n)
        .map(|i| instance.local_gradient(i, x_star).map(|g| g.norm()))
        .sum::<Result<f64>>()?;
    let m_big = 2.0 * l * d_hat + grad_norms;

    let c2 = 2.0 * curv.mu_bar * curv.l_bar / (curv.mu_bar + curv.l_bar);
    let c1 = (1.0 - alpha * c2).max(0.0).sqrt();
    let c3 = alpha * d_big * l / (eta - 1.0);
    let c4 = 2.0 / (curv.mu_bar + curv.l_bar);
    let c5 = alpha * m_big / (eta - 1.0);

    let mut consts = TheoryConstants {
        n,
        alpha,
        beta: w.beta(),
        l_max: l,
        mu_bar: curv.mu_bar,
        l_bar: curv.l_bar,
        gamma: curv.gamma,
        nu,
        eta,
        d_big,
        d_hat,
        m_big,
        c1,
        c2,
        c3,
        c4,
        c5,
        nu_bar: alpha * c2,
        tg0,
        c3_hat: 0.0,
        c5_hat: 0.0,
        t_seq: Vec::new(),
        tau: 0.0,
        rho: 0.0,
        c_big: 0.0,
        dist0: (x0 - x_star).norm(),
    };
    consts.t_seq = (0..=tg0)
        .map(|i| consts.t_value(tg0.saturating_sub(i).max(1)))
        .collect();
    // Ratios only over indices with T_i > 0; tau = 0 when none exist.
    consts.tau = (0..tg0)
        .filter(|&i| consts.t_seq[i] > 0.0)
        .map(|i| consts.t_seq[i + 1] / consts.t_seq[i])
        .fold(0.0, f64::max);
    consts.c3_hat = c3 * (powu(eta, tg0) - 1.0);
    consts.c5_hat = c5 * consts.t_seq[0];
    consts.rho = consts.beta.max(consts.tau).max(1.0 - alpha * c2 / 2.0);
    consts.c_big = consts
        .dist0
        .max(8.0 * (consts.c3_hat + consts.c5_hat) / (alpha * c2).powi(2));
    Ok(consts)
}

/// One measured-versus-bound comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub k: usize,
    pub inequality_id: String,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

impl BoundCheck {
    fn new(k: usize, id: impl Into<String>, lhs: f64, rhs: f64, slack: f64) -> Self {
        BoundCheck {
            k,
            inequality_id: id.into(),
            lhs,
            rhs,
            satisfied: lhs <= rhs + slack,
        }
    }
}

/// Collection of bound checks; exportable as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosticReport {
    pub rows: Vec<BoundCheck>,
}

impl DiagnosticReport {
    pub fn violations(&self) -> impl Iterator<Item = &BoundCheck> {
        self.rows.iter().filter(|r| !r.satisfied)
    }

    pub fn is_clean(&self) -> bool {
        self.rows.iter().all(|r| r.satisfied)
    }

    /// Smallest `rhs - lhs` over all rows (negative on violation).
    pub fn min_margin(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.rhs - r.lhs).reduce(f64::min)
    }

    pub fn extend(&mut self, other: DiagnosticReport) {
        self.rows.extend(other.rows);
    }

    /// Distinct inequality ids in first-seen order.
    pub fn ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !ids.contains(&r.inequality_id.as_str()) {
                ids.push(&r.inequality_id);
            }
        }
        ids
    }

    /// Columns `k,inequality_id,lhs,rhs,satisfied`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("k,inequality_id,lhs,rhs,satisfied\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.k,
                r.inequality_id,
                fmt_f64(r.lhs),
                fmt_f64(r.rhs),
                r.satisfied
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

fn max_row_deviation(x: &DMatrix<f64>, center: &DVector<f64>) -> f64 {
    (0..x.nrows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(center.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

fn check_fixed_schedule(trajectory: &[SolverState], t_c: usize, t_g: usize) -> Result<()> {
    for s in trajectory.iter().filter(|s| s.k > 0) {
        if s.t_c != t_c || s.t_g != t_g {
            return Err(Error::ScheduleMismatch(format!(
                "iteration {} used (t_c, t_g) = ({}, {}), expected ({t_c}, {t_g})",
                s.k, s.t_c, s.t_g
            )));
        }
    }
    Ok(())
}

fn check_theorem2_schedule(trajectory: &[SolverState], tg0: usize) -> Result<()> {
    let tg = Schedule::DecreaseToOne { init: tg0 };
    for s in trajectory.iter().filter(|s| s.k > 0) {
        if s.t_c != s.k || s.t_g != tg.at(s.k) {
            return Err(Error::ScheduleMismatch(format!(
                "iteration {} used (t_c, t_g) = ({}, {}), expected ({}, {})",
                s.k,
                s.t_c,
                s.t_g,
                s.k,
                tg.at(s.k)
            )));
        }
    }
    Ok(())
}

/// Checks the fixed-schedule averaged-iterate bound and the per-agent
/// bounds at every recorded iteration.
pub fn check_theorem1(
    instance: &ProblemInstance,
    trajectory: &[SolverState],
    consts: &TheoryConstants,
    t_c: usize,
    t_g: usize,
) -> Result<DiagnosticReport> {
    check_fixed_schedule(trajectory, t_c, t_g)?;
    let x_star = instance.x_star();
    let mut report = DiagnosticReport::default();
    for (idx, s) in trajectory.iter().enumerate() {
        let k = s.k;
        let lhs = (s.mean_x() - x_star).norm();
        let rhs = consts.theorem1_bound(k, t_c, t_g, consts.dist0);
        report.rows.push(BoundCheck::new(k, "theorem1", lhs, rhs, BOUND_SLACK));
        let (xb, yb) = consts.corollary1_bounds(k, t_c, t_g, consts.dist0);
        let dev = max_row_deviation(&s.x, x_star);
        report.rows.push(BoundCheck::new(k, "corollary1_x", dev, xb, BOUND_SLACK));
        if let Some(y) = trajectory.get(idx + 1).and_then(|n| n.y.as_ref()) {
            let dev = max_row_deviation(y, x_star);
            report.rows.push(BoundCheck::new(k, "corollary1_y", dev, yb, BOUND_SLACK));
        }
    }
    Ok(report)
}

/// Checks `||xbar_k - x*|| <= C rho^k` and the per-agent companions under
/// `t_c(k) = k`, `t_g(k) = max(tg0 - (k - 1), 1)`.
pub fn check_theorem2(
    instance: &ProblemInstance,
    trajectory: &[SolverState],
    consts: &TheoryConstants,
) -> Result<DiagnosticReport> {
    check_theorem2_schedule(trajectory, consts.tg0)?;
    let x_star = instance.x_star();
    let mut report = DiagnosticReport::default();
    for (idx, s) in trajectory.iter().enumerate() {
        let k = s.k;
        let lhs = (s.mean_x() - x_star).norm();
        report
            .rows
            .push(BoundCheck::new(k, "theorem2", lhs, consts.theorem2_bound(k), BOUND_SLACK));
        let (xb, yb) = consts.corollary2_bounds(k);
        let dev = max_row_deviation(&s.x, x_star);
        report.rows.push(BoundCheck::new(k, "corollary2_x", dev, xb, BOUND_SLACK));
        if let Some(y) = trajectory.get(idx + 1).and_then(|n| n.y.as_ref()) {
            let dev = max_row_deviation(y, x_star);
            report.rows.push(BoundCheck::new(k, "corollary2_y", dev, yb, BOUND_SLACK));
        }
    }
    Ok(report)
}

/// `g_k`: mean over agents of the local gradients summed over the inner
/// iterates `x_k^0 .. x_k^{t_g - 1}`.
fn averaged_gradient_sum(instance: &ProblemInstance, inner: &[DMatrix<f64>]) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(instance.p());
    for x in &inner[..inner.len() - 1] {
        g += row_mean(&instance.stacked_gradient(x)?);
    }
    Ok(g)
}

/// Residuals of `xbar_{k+1} = xbar_k - alpha g_k` along a trajectory.
///
/// For NEAR-DGD states `g_k` comes from the recorded inner iterates; for
/// the DGD baseline it is the mean gradient at `x_k`.
pub fn mean_evolution(
    instance: &ProblemInstance,
    trajectory: &[SolverState],
    alpha: f64,
) -> Result<DiagnosticReport> {
    let mut report = DiagnosticReport::default();
    for pair in trajectory.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let g = match (&next.y, &next.inner) {
            (Some(_), Some(inner)) => averaged_gradient_sum(instance, inner)?,
            (Some(_), None) => return Err(Error::MissingInnerIterates),
            (None, _) => row_mean(&instance.stacked_gradient(&prev.x)?),
        };
        let predicted = prev.mean_x() - g * alpha;
        let lhs = (next.mean_x() - predicted).norm();
        report
            .rows
            .push(BoundCheck::new(next.k, "mean_identity", lhs, MEAN_IDENTITY_TOL, 0.0));
    }
    Ok(report)
}

/// Evaluates the iterate-bound, gradient-deviation and deviation-from-mean
/// inequalities at every iteration of a fixed-schedule trajectory recorded
/// with inner iterates.
///
/// Row ids: `lemma1_x`, `lemma1_y`, `lemma1_xhat[j]`, `lemma2[j]`,
/// `lemma3_p1`, `lemma3_p4`, `lemma3_p2[j]`, `lemma3_p3`. The averaged
/// sequence `xhat_k^j` (gradient descent on the mean objective from
/// `xbar_k`) is recomputed here and exists only for these checks.
pub fn lemma_diagnostics(
    instance: &ProblemInstance,
    trajectory: &[SolverState],
    consts: &TheoryConstants,
    t_c: usize,
    t_g: usize,
) -> Result<DiagnosticReport> {
    check_fixed_schedule(trajectory, t_c, t_g)?;
    let x_star = instance.x_star();
    let alpha = consts.alpha;
    let mut report = DiagnosticReport::default();
    let mut push = |k: usize, id: String, lhs: f64, rhs: f64| {
        report.rows.push(BoundCheck::new(k, id, lhs, rhs, BOUND_SLACK));
    };
    for (idx, s) in trajectory.iter().enumerate() {
        let k = s.k;
        let xbar = s.mean_x();
        push(k, "lemma1_x".into(), s.x.norm(), consts.d_big);
        push(
            k,
            "lemma3_p1".into(),
            max_row_deviation(&s.x, &xbar),
            consts.lemma3_p1(t_c),
        );

        let Some(next) = trajectory.get(idx + 1) else {
            continue;
        };
        let (Some(y), Some(inner)) = (next.y.as_ref(), next.inner.as_ref()) else {
            return Err(Error::MissingInnerIterates);
        };

        push(k, "lemma1_y".into(), y.norm(), consts.d_big);
        let ybar = row_mean(y);
        push(
            k,
            "lemma3_p4".into(),
            max_row_deviation(y, &ybar),
            consts.lemma3_p1(t_c) + 2.0 * consts.d_big,
        );

        let mut xhat = xbar.clone();
        let mut g_bar = DVector::zeros(instance.p());
        for (j, x_j) in inner.iter().enumerate() {
            push(
                k,
                format!("lemma1_xhat[{j}]"),
                (&xhat - x_star).norm(),
                consts.d_hat,
            );
            let mean_grad = instance.mean_gradient(&xhat);
            let mut dev: f64 = 0.0;
            for i in 0..instance.n() {
                dev = dev.max((instance.local_gradient(i, &xhat)? - &mean_grad).norm());
            }
            push(k, format!("lemma2[{j}]"), dev, consts.m_big);
            push(
                k,
                format!("lemma3_p2[{j}]"),
                max_row_deviation(x_j, &xhat),
                consts.lemma3_p2(t_c, j),
            );
            if j < t_g {
                g_bar += &mean_grad;
                xhat -= mean_grad * alpha;
            }
        }
        let g = averaged_gradient_sum(instance, inner)?;
        push(
            k,
            "lemma3_p3".into(),
            (g - g_bar).norm(),
            consts.lemma3_p3(t_c, t_g),
        );
    }
    Ok(report)
}

/// Exact communication/gradient counter audit.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterReport {
    pub iterations: usize,
    pub comm_measured: u64,
    pub comm_direct: u64,
    /// `K (K + 1) / 2`.
    pub comm_closed_form: u64,
    pub grad_measured: u64,
    pub grad_direct: u64,
    /// `K + (tg0^2 - tg0 + 2) / 2 - 1`, defined once `K >= tg0`.
    pub grad_closed_form: Option<u64>,
}

impl CounterReport {
    pub fn is_consistent(&self) -> bool {
        self.comm_measured == self.comm_direct
            && self.comm_direct == self.comm_closed_form
            && self.grad_measured == self.grad_direct
            && self.grad_closed_form.is_none_or(|g| g == self.grad_direct)
    }
}

/// Audits the final counters of a run under `t_c(k) = k` and
/// `t_g(k) = max(tg0 - (k - 1), 1)`. Direct summation of the schedules is
/// the reference; closed forms are reported alongside.
pub fn work_counters_check(
    trajectory: &[SolverState],
    tc_schedule: &Schedule,
    tg_schedule: &Schedule,
) -> Result<CounterReport> {
    let tg0 = match (tc_schedule, tg_schedule) {
        (Schedule::LinearInK, Schedule::DecreaseToOne { init }) => *init,
        (Schedule::LinearInK, Schedule::Constant(1)) => 1,
        _ => {
            return Err(Error::ScheduleMismatch(format!(
                "work counters need t_c = k and t_g = max(tg0-(k-1),1), got {tc_schedule} / {tg_schedule}"
            )))
        }
    };
    let last = trajectory
        .last()
        .ok_or_else(|| Error::invalid("empty trajectory"))?;
    let k = last.k;
    let k64 = k as u64;
    let t0 = tg0 as u64;
    Ok(CounterReport {
        iterations: k,
        comm_measured: last.comm_rounds,
        comm_direct: tc_schedule.total(k),
        comm_closed_form: k64 * (k64 + 1) / 2,
        grad_measured: last.grad_rounds,
        grad_direct: tg_schedule.total(k),
        grad_closed_form: (k >= tg0).then(|| k64 + (t0 * t0 - t0 + 2) / 2 - 1),
    })
}
