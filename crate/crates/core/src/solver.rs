//! The nested iteration `x_{k+1} = W^{t_c} [ T^{t_g} [x_k] ]` and the classic
//! DGD baseline.
//!
//! Iterations are numbered from 1: the step that turns `x_{k-1}` into `x_k`
//! evaluates both schedules at `k`. So `t_c(k) = k` performs one consensus
//! round on the first iteration.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ConsensusMatrix;
use crate::objective::ProblemInstance;

/// Iterate norms above this abort the run.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Fraction of the admissible bound used when no step length is given.
pub const DEFAULT_ALPHA_FRACTION: f64 = 0.999;

/// Per-iteration step counts. Every value is an integer >= 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Constant(usize),
    /// `k` at iteration `k`.
    LinearInK,
    /// `init + floor(k / period)`.
    IncreaseEvery { init: usize, period: usize },
    /// `max(init - (k - 1), 1)`: the first iteration performs `init` steps.
    DecreaseToOne { init: usize },
    /// `max(init - floor(k / period), 1)`.
    DecreaseEvery { init: usize, period: usize },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Constant(t) => t >= 1,
            Schedule::LinearInK => true,
            Schedule::IncreaseEvery { init, period } | Schedule::DecreaseEvery { init, period } => {
                init >= 1 && period >= 1
            }
            Schedule::DecreaseToOne { init } => init >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("schedule {self} has a zero count or period")))
        }
    }

    /// Value at iteration `k >= 1`.
    pub fn at(&self, k: usize) -> usize {
        debug_assert!(k >= 1);
        match *self {
            Schedule::Constant(t) => t,
            Schedule::LinearInK => k,
            Schedule::IncreaseEvery { init, period } => init + k / period,
            Schedule::DecreaseToOne { init } => init.saturating_sub(k - 1).max(1),
            Schedule::DecreaseEvery { init, period } => init.saturating_sub(k / period).max(1),
        }
    }

    /// Value before the first iteration (`t(0)` in closed-form counts).
    pub fn initial(&self) -> usize {
        match *self {
            Schedule::Constant(t) => t,
            Schedule::LinearInK => 1,
            Schedule::IncreaseEvery { init, .. }
            | Schedule::DecreaseToOne { init }
            | Schedule::DecreaseEvery { init, .. } => init,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Schedule::Constant(_))
    }

    /// `sum_{k=1}^{iters} at(k)`.
    pub fn total(&self, iters: usize) -> u64 {
        (1..=iters).map(|k| self.at(k) as u64).sum()
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant(t) => write!(f, "constant({t})"),
            Schedule::LinearInK => write!(f, "k"),
            Schedule::IncreaseEvery { init, period } => write!(f, "{init}+1/{period}"),
            Schedule::DecreaseToOne { init } => write!(f, "max({init}-(k-1),1)"),
            Schedule::DecreaseEvery { init, period } => write!(f, "{init}-1/{period}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    NearDgd,
    /// `x_{k+1} = W x_k - alpha grad f(x_k)`.
    DgdBaseline,
}

/// Largest step length covered by the convergence guarantees:
/// `min(1/L, 2/(mu_bar + L_bar))`.
pub fn max_step_length(instance: &ProblemInstance) -> f64 {
    let c = instance.curvature();
    (1.0 / c.l_max).min(2.0 / (c.mu_bar + c.l_bar))
}

pub fn default_step_length(instance: &ProblemInstance) -> f64 {
    DEFAULT_ALPHA_FRACTION * max_step_length(instance)
}

/// Default for the DGD baseline: the NEAR-DGD default, further capped by
/// `(1 + lambda_min(W)) / L` so that `W - alpha A` has no eigenvalue at or
/// below `-1`.
pub fn dgd_step_length(instance: &ProblemInstance, w: &ConsensusMatrix) -> f64 {
    let stable = (1.0 + w.lambda_min()) / instance.curvature().l_max;
    DEFAULT_ALPHA_FRACTION * max_step_length(instance).min(stable)
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    alpha: f64,
    pub tc_schedule: Schedule,
    pub tg_schedule: Schedule,
    pub max_iters: usize,
    /// Shared starting point, replicated to every agent.
    pub x0: DVector<f64>,
    pub method: Method,
    /// Keep the inner gradient iterates `x_k^0 .. x_k^{t_g}` of each step.
    pub record_inner: bool,
    /// Stop once `||xbar_k - x*||^2 / ||x*||^2` falls below this.
    pub tolerance: Option<f64>,
}

impl SolverConfig {
    /// Default step length, zero start, no inner recording, no early stop.
    pub fn new(
        instance: &ProblemInstance,
        tc_schedule: Schedule,
        tg_schedule: Schedule,
        max_iters: usize,
    ) -> Result<Self> {
        tc_schedule.validate()?;
        tg_schedule.validate()?;
        Ok(SolverConfig {
            alpha: default_step_length(instance),
            tc_schedule,
            tg_schedule,
            max_iters,
            x0: DVector::zeros(instance.p()),
            method: Method::NearDgd,
            record_inner: false,
            tolerance: None,
        })
    }

    pub fn dgd(instance: &ProblemInstance, max_iters: usize) -> Self {
        SolverConfig {
            method: Method::DgdBaseline,
            ..Self::new(instance, Schedule::Constant(1), Schedule::Constant(1), max_iters)
                .expect("constant schedules are valid")
        }
    }

    /// Sets `alpha`, rejecting values above `min(1/L, 2/(mu_bar + L_bar))`.
    pub fn with_alpha(mut self, instance: &ProblemInstance, alpha: f64) -> Result<Self> {
        let bound = max_step_length(instance);
        if !(alpha > 0.0) || alpha > bound {
            return Err(Error::StepLength { alpha, bound });
        }
        self.alpha = alpha;
        Ok(self)
    }

    /// Sets `alpha` without the bound check. Any positive finite value.
    pub fn with_alpha_unchecked(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("step length must be positive, got {alpha}")));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn with_x0(mut self, x0: DVector<f64>) -> Self {
        self.x0 = x0;
        self
    }

    pub fn with_inner(mut self, record_inner: bool) -> Self {
        self.record_inner = record_inner;
        self
    }

    pub fn with_tolerance(mut self, tolerance: Option<f64>) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// State after `k` iterations.
///
/// `y` and `inner` describe the step that produced `x` (absent at `k = 0`
/// and for the DGD baseline): `x == W^{t_c} y` where `y` is the gradient
/// phase output, and `inner[j]` is the `j`-th inner gradient iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub k: usize,
    pub x: DMatrix<f64>,
    pub y: Option<DMatrix<f64>>,
    pub inner: Option<Vec<DMatrix<f64>>>,
    /// Consensus rounds used by the step that produced this state.
    pub t_c: usize,
    /// Gradient steps used by the step that produced this state.
    pub t_g: usize,
    pub comm_rounds: u64,
    pub grad_rounds: u64,
}

impl SolverState {
    pub fn initial(n: usize, x0: &DVector<f64>) -> Self {
        let x = DMatrix::from_fn(n, x0.len(), |_, c| x0[c]);
        SolverState {
            k: 0,
            x,
            y: None,
            inner: None,
            t_c: 0,
            t_g: 0,
            comm_rounds: 0,
            grad_rounds: 0,
        }
    }

    /// Row mean of `x`.
    pub fn mean_x(&self) -> DVector<f64> {
        row_mean(&self.x)
    }
}

/// Row mean of a stacked state.
pub fn row_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// `t_g` local gradient steps per agent with no communication.
///
/// Returns the final iterate and, if requested, every inner iterate
/// `x^0 = x, x^1, .., x^{t_g}`.
pub fn gradient_phase(
    instance: &ProblemInstance,
    x: &DMatrix<f64>,
    t_g: usize,
    alpha: f64,
    record_inner: bool,
) -> Result<(DMatrix<f64>, Option<Vec<DMatrix<f64>>>)> {
    if t_g == 0 {
        return Err(Error::invalid("gradient phase needs t_g >= 1"));
    }
    let mut cur = x.clone();
    let mut grad = DMatrix::zeros(x.nrows(), x.ncols());
    let mut inner = record_inner.then(|| vec![x.clone()]);
    for _ in 0..t_g {
        instance.stacked_gradient_into(&cur, &mut grad)?;
        for (c, g) in cur.iter_mut().zip(grad.iter()) {
            *c -= alpha * g;
        }
        if let Some(v) = inner.as_mut() {
            v.push(cur.clone());
        }
    }
    Ok((cur, inner))
}

fn guard(k: usize, m: &DMatrix<f64>) -> Result<()> {
    let norm = m.norm();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::Diverged { k, norm });
    }
    Ok(())
}

/// One NEAR-DGD iteration: gradient phase, then consensus phase.
pub fn near_dgd_step(
    state: &SolverState,
    instance: &ProblemInstance,
    w: &ConsensusMatrix,
    config: &SolverConfig,
) -> Result<SolverState> {
    let k = state.k + 1;
    let t_c = config.tc_schedule.at(k);
    let t_g = config.tg_schedule.at(k);
    let (y, inner) = gradient_phase(instance, &state.x, t_g, config.alpha, config.record_inner)?;
    guard(k, &y)?;
    let x = crate::graph::apply_consensus(w, &y, t_c)?;
    guard(k, &x)?;
    Ok(SolverState {
        k,
        x,
        y: Some(y),
        inner,
        t_c,
        t_g,
        comm_rounds: state.comm_rounds + t_c as u64,
        grad_rounds: state.grad_rounds + t_g as u64,
    })
}

/// One DGD iteration: `x' = W x - alpha grad f(x)`.
pub fn dgd_step(
    state: &SolverState,
    instance: &ProblemInstance,
    w: &ConsensusMatrix,
    alpha: f64,
) -> Result<SolverState> {
    let k = state.k + 1;
    let grad = instance.stacked_gradient(&state.x)?;
    let mut x = crate::graph::apply_consensus(w, &state.x, 1)?;
    for (xi, g) in x.iter_mut().zip(grad.iter()) {
        *xi -= alpha * g;
    }
    guard(k, &x)?;
    Ok(SolverState {
        k,
        x,
        y: None,
        inner: None,
        t_c: 1,
        t_g: 1,
        comm_rounds: state.comm_rounds + 1,
        grad_rounds: state.grad_rounds + 1,
    })
}

/// `||xbar - x*||^2 / ||x*||^2`, or the plain squared distance when `x* = 0`.
pub fn relative_error(mean: &DVector<f64>, x_star: &DVector<f64>) -> f64 {
    let num = (mean - x_star).norm_squared();
    let den = x_star.norm_squared();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Streams states `k = 0, 1, ..` of a run.
///
/// Yields the initial state first. After an error it yields that error once
/// and then stops.
pub struct Run<'a> {
    instance: &'a ProblemInstance,
    w: &'a ConsensusMatrix,
    config: &'a SolverConfig,
    current: Option<SolverState>,
    started: bool,
    done: bool,
}

impl<'a> Run<'a> {
    pub fn new(
        instance: &'a ProblemInstance,
        w: &'a ConsensusMatrix,
        config: &'a SolverConfig,
    ) -> Result<Self> {
        if w.n() != instance.n() {
            return Err(Error::dims(
                format!("{} agents", instance.n()),
                format!("{}x{} consensus matrix", w.n(), w.n()),
            ));
        }
        if config.x0.len() != instance.p() {
            return Err(Error::dims(
                format!("x0 of length {}", instance.p()),
                format!("{}", config.x0.len()),
            ));
        }
        config.tc_schedule.validate()?;
        config.tg_schedule.validate()?;
        Ok(Run {
            instance,
            w,
            config,
            current: Some(SolverState::initial(instance.n(), &config.x0)),
            started: false,
            done: false,
        })
    }

    fn converged(&self, state: &SolverState) -> bool {
        self.config
            .tolerance
            .is_some_and(|tol| relative_error(&state.mean_x(), self.instance.x_star()) < tol)
    }
}

impl Iterator for Run<'_> {
    type Item = Result<SolverState>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let state = self.current.as_ref()?;
        if !self.started {
            self.started = true;
            if self.config.max_iters == 0 || self.converged(state) {
                self.done = true;
            }
            return Some(Ok(state.clone()));
        }
        let next = match self.config.method {
            Method::NearDgd => near_dgd_step(state, self.instance, self.w, self.config),
            Method::DgdBaseline => dgd_step(state, self.instance, self.w, self.config.alpha),
        };
        match next {
            Ok(s) => {
                if s.k >= self.config.max_iters || self.converged(&s) {
                    self.done = true;
                }
                self.current = Some(s.clone());
                Some(Ok(s))
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Runs to completion and collects every state.
pub fn run(
    instance: &ProblemInstance,
    w: &ConsensusMatrix,
    config: &SolverConfig,
) -> Result<Vec<SolverState>> {
    Run::new(instance, w, config)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{metropolis_weights, uniform_weights, Topology, TopologyKind};
    use crate::objective::generate_quadratic;

    fn setup() -> (ProblemInstance, ConsensusMatrix) {
        let inst = generate_quadratic(6, 4, 50.0, 11).unwrap();
        let topo = Topology::build(TopologyKind::Cyclic { c: 2 }, 6).unwrap();
        (inst, metropolis_weights(&topo).unwrap())
    }

    #[test]
    fn schedule_values() {
        assert_eq!(Schedule::LinearInK.at(1), 1);
        assert_eq!(Schedule::LinearInK.at(7), 7);
        let inc = Schedule::IncreaseEvery { init: 2, period: 500 };
        assert_eq!((inc.at(1), inc.at(499), inc.at(500), inc.at(1000)), (2, 2, 3, 4));
        let dec = Schedule::DecreaseToOne { init: 3 };
        assert_eq!((1..=5).map(|k| dec.at(k)).collect::<Vec<_>>(), vec![3, 2, 1, 1, 1]);
        let dec = Schedule::DecreaseEvery { init: 5, period: 10 };
        assert_eq!((dec.at(9), dec.at(10), dec.at(40), dec.at(100)), (5, 4, 1, 1));
        assert!(Schedule::Constant(0).validate().is_err());
        assert!(Schedule::IncreaseEvery { init: 1, period: 0 }.validate().is_err());
    }

    #[test]
    fn schedule_totals() {
        assert_eq!(Schedule::LinearInK.total(10), 55);
        assert_eq!(Schedule::Constant(3).total(4), 12);
        assert_eq!(Schedule::DecreaseToOne { init: 1 }.total(9), 9);
    }

    #[test]
    fn single_gradient_step_definition() {
        let (inst, _) = setup();
        let x = DMatrix::from_fn(6, 4, |i, j| (i as f64 - j as f64) * 0.1);
        let alpha = default_step_length(&inst);
        let (y, inner) = gradient_phase(&inst, &x, 1, alpha, true).unwrap();
        let want = &x - inst.stacked_gradient(&x).unwrap() * alpha;
        assert!((y.clone() - want).norm() < 1e-14);
        let inner = inner.unwrap();
        assert_eq!(inner.len(), 2);
        assert_eq!(inner[0], x);
        assert_eq!(inner[1], y);
        assert!(gradient_phase(&inst, &x, 0, alpha, false).is_err());
    }

    #[test]
    fn local_minimizers_are_fixed_by_gradient_phase() {
        let (inst, _) = setup();
        let u = inst.u_star().clone();
        let (y, _) = gradient_phase(&inst, &u, 7, default_step_length(&inst), false).unwrap();
        assert!((y - u).norm() < 1e-10);
    }

    #[test]
    fn uniform_mixing_step_gives_consensus_at_mean_of_y() {
        let (inst, _) = setup();
        let w = uniform_weights(6).unwrap();
        let cfg = SolverConfig::new(&inst, Schedule::Constant(1), Schedule::Constant(2), 3).unwrap();
        let s0 = SolverState::initial(6, &DVector::from_element(4, 0.5));
        let s1 = near_dgd_step(&s0, &inst, &w, &cfg).unwrap();
        let ybar = row_mean(s1.y.as_ref().unwrap());
        for i in 0..6 {
            for c in 0..4 {
                assert!((s1.x[(i, c)] - ybar[c]).abs() < 1e-14);
            }
        }
        assert_eq!((s1.comm_rounds, s1.grad_rounds), (1, 2));
    }

    #[test]
    fn step_length_bound_is_enforced() {
        let (inst, _) = setup();
        let cfg = SolverConfig::new(&inst, Schedule::Constant(1), Schedule::Constant(1), 1).unwrap();
        let bound = max_step_length(&inst);
        assert!(cfg.clone().with_alpha(&inst, bound).is_ok());
        assert!(matches!(
            cfg.clone().with_alpha(&inst, bound * 1.01),
            Err(Error::StepLength { .. })
        ));
        assert!(cfg.clone().with_alpha_unchecked(bound * 1.01).is_ok());
        assert!(cfg.with_alpha(&inst, -1.0).is_err());
    }

    #[test]
    fn zero_iterations_yields_initial_state_only() {
        let (inst, w) = setup();
        let cfg = SolverConfig::new(&inst, Schedule::Constant(1), Schedule::Constant(1), 0).unwrap();
        let traj = run(&inst, &w, &cfg).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0].k, 0);
        assert!(traj[0].x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_step_diverges_with_iteration() {
        let (inst, w) = setup();
        let cfg = SolverConfig::new(&inst, Schedule::Constant(1), Schedule::Constant(1), 10_000)
            .unwrap()
            .with_alpha_unchecked(10.0 / inst.curvature().l_max)
            .unwrap();
        let err = run(&inst, &w, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { k, .. } if k > 0));
    }

    #[test]
    fn early_stop_on_tolerance() {
        let inst = generate_quadratic(1, 3, 4.0, 2).unwrap();
        let w = uniform_weights(1).unwrap();
        let cfg = SolverConfig::new(&inst, Schedule::Constant(1), Schedule::Constant(1), 10_000)
            .unwrap()
            .with_tolerance(Some(1e-10));
        let traj = run(&inst, &w, &cfg).unwrap();
        let last = traj.last().unwrap();
        assert!(last.k < 10_000);
        assert!(relative_error(&last.mean_x(), inst.x_star()) < 1e-10);
    }

    #[test]
    fn dgd_counts_one_round_each() {
        let (inst, w) = setup();
        let cfg = SolverConfig::dgd(&inst, 5);
        let traj = run(&inst, &w, &cfg).unwrap();
        let last = traj.last().unwrap();
        assert_eq!((last.comm_rounds, last.grad_rounds), (5, 5));
        assert!(last.y.is_none());
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let (inst, _) = setup();
        let w = uniform_weights(5).unwrap();
        let cfg = SolverConfig::new(&inst, Schedule::Constant(1), Schedule::Constant(1), 1).unwrap();
        assert!(Run::new(&inst, &w, &cfg).is_err());
    }
}
