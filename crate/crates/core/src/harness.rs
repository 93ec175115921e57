//! Experiment orchestration: variant notation, cost accounting, sweeps and
//! CSV export.
//!
//! Variants use the notation `((g1,g2),(c1,c2))`:
//!
//! - `g1`: initial number of gradient steps. `g2` is `-` (constant),
//!   `P-` (one fewer every `P` iterations, floor 1) or `k-` (one fewer every
//!   iteration after the first, floor 1).
//! - `c1`: initial number of consensus rounds. `c2` is `-` (constant),
//!   `k` (`t_c(k) = k`, requires `c1 = 1`) or `P+` (one more every `P`
//!   iterations).
//!
//! `DGD` selects the classic baseline.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ConsensusMatrix;
use crate::objective::ProblemInstance;
use crate::portable::fmt_f64;
use crate::solver::{
    dgd_step_length, relative_error, Method, Run, Schedule, SolverConfig, SolverState,
};

/// `cost = comm_rounds * c_c + grad_rounds * c_g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub c_c: f64,
    pub c_g: f64,
}

impl CostModel {
    pub fn new(c_c: f64, c_g: f64) -> Result<Self> {
        if !(c_c >= 0.0 && c_g >= 0.0 && c_c.is_finite() && c_g.is_finite()) {
            return Err(Error::invalid(format!("costs must be nonnegative, got ({c_c}, {c_g})")));
        }
        Ok(CostModel { c_c, c_g })
    }

    pub fn unit() -> Self {
        CostModel { c_c: 1.0, c_g: 1.0 }
    }

    pub fn cost(&self, comm_rounds: u64, grad_rounds: u64) -> f64 {
        comm_rounds as f64 * self.c_c + grad_rounds as f64 * self.c_g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepLength {
    /// `0.999 * min(1/L, 2/(mu_bar + L_bar))`; for DGD also capped by
    /// `(1 + lambda_min(W)) / L`.
    Auto,
    /// Rejected if above the admissible bound.
    Checked(f64),
    /// Accepted as is.
    Unchecked(f64),
}


#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradRule {
    Constant,
    DecreaseEvery(usize),
    DecreaseEachIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommRule {
    Constant,
    LinearInK,
    IncreaseEvery(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantSpec {
    Dgd,
    NearDgd {
        g1: usize,
        g2: GradRule,
        c1: usize,
        c2: CommRule,
    },
}

impl VariantSpec {
    pub fn method(&self) -> Method {
        match self {
            VariantSpec::Dgd => Method::DgdBaseline,
            VariantSpec::NearDgd { .. } => Method::NearDgd,
        }
    }

    /// `(t_c schedule, t_g schedule)`.
    pub fn schedules(&self) -> (Schedule, Schedule) {
        match *self {
            VariantSpec::Dgd => (Schedule::Constant(1), Schedule::Constant(1)),
            VariantSpec::NearDgd { g1, g2, c1, c2 } => {
                let tg = match g2 {
                    GradRule::Constant => Schedule::Constant(g1),
                    GradRule::DecreaseEvery(period) => Schedule::DecreaseEvery { init: g1, period },
                    GradRule::DecreaseEachIteration => Schedule::DecreaseToOne { init: g1 },
                };
                let tc = match c2 {
                    CommRule::Constant => Schedule::Constant(c1),
                    CommRule::LinearInK => Schedule::LinearInK,
                    CommRule::IncreaseEvery(period) => Schedule::IncreaseEvery { init: c1, period },
                };
                (tc, tg)
            }
        }
    }

    pub fn solver_config(
        &self,
        instance: &ProblemInstance,
        w: &ConsensusMatrix,
        step: StepLength,
        horizon: usize,
    ) -> Result<SolverConfig> {
        let (tc, tg) = self.schedules();
        let mut cfg = SolverConfig::new(instance, tc, tg, horizon)?;
        cfg.method = self.method();
        match step {
            StepLength::Auto if *self == VariantSpec::Dgd => {
                cfg.with_alpha(instance, dgd_step_length(instance, w))
            }
            StepLength::Auto => Ok(cfg),
            StepLength::Checked(a) => cfg.with_alpha(instance, a),
            StepLength::Unchecked(a) => cfg.with_alpha_unchecked(a),
        }
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantSpec::Dgd => write!(f, "DGD"),
            VariantSpec::NearDgd { g1, g2, c1, c2 } => {
                let g2 = match g2 {
                    GradRule::Constant => "-".to_string(),
                    GradRule::DecreaseEvery(p) => format!("{p}-"),
                    GradRule::DecreaseEachIteration => "k-".to_string(),
                };
                let c2 = match c2 {
                    CommRule::Constant => "-".to_string(),
                    CommRule::LinearInK => "k".to_string(),
                    CommRule::IncreaseEvery(p) => format!("{p}+"),
                };
                write!(f, "(({g1},{g2}),({c1},{c2}))")
            }
        }
    }
}

struct NotationParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> NotationParser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.src.get(self.pos).is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        match self.peek() {
            Some(got) if got == c => {
                self.pos += 1;
                Ok(())
            }
            Some(got) => self.err(format!("expected '{}', found '{}'", c as char, got as char)),
            None => self.err(format!("expected '{}', found end of input", c as char)),
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.src.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected a positive integer");
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        match text.parse::<usize>() {
            Ok(v) if v >= 1 => Ok(v),
            _ => {
                self.pos = start;
                self.err(format!("`{text}` is not a positive integer"))
            }
        }
    }

    fn grad_rule(&mut self) -> Result<GradRule> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(GradRule::Constant)
            }
            Some(b'k') => {
                self.pos += 1;
                self.expect(b'-')?;
                Ok(GradRule::DecreaseEachIteration)
            }
            Some(c) if c.is_ascii_digit() => {
                let p = self.number()?;
                self.expect(b'-')?;
                Ok(GradRule::DecreaseEvery(p))
            }
            _ => self.err("expected '-', 'k-' or '<period>-' for the gradient rule"),
        }
    }

    fn comm_rule(&mut self) -> Result<CommRule> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(CommRule::Constant)
            }
            Some(b'k') => {
                self.pos += 1;
                Ok(CommRule::LinearInK)
            }
            Some(c) if c.is_ascii_digit() => {
                let p = self.number()?;
                self.expect(b'+')?;
                Ok(CommRule::IncreaseEvery(p))
            }
            _ => self.err("expected '-', 'k' or '<period>+' for the consensus rule"),
        }
    }

    fn variant(&mut self) -> Result<VariantSpec> {
        self.expect(b'(')?;
        self.expect(b'(')?;
        let g1 = self.number()?;
        self.expect(b',')?;
        let g2 = self.grad_rule()?;
        self.expect(b')')?;
        self.expect(b',')?;
        self.expect(b'(')?;
        let c1_pos = {
            self.skip_ws();
            self.pos
        };
        let c1 = self.number()?;
        self.expect(b',')?;
        let c2 = self.comm_rule()?;
        if c2 == CommRule::LinearInK && c1 != 1 {
            self.pos = c1_pos;
            return self.err("`(c1,k)` means t_c(k) = k, so c1 must be 1");
        }
        self.expect(b')')?;
        self.expect(b')')?;
        if self.peek().is_some() {
            return self.err("trailing input after variant");
        }
        Ok(VariantSpec::NearDgd { g1, g2, c1, c2 })
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("dgd") {
            return Ok(VariantSpec::Dgd);
        }
        NotationParser {
            src: s.as_bytes(),
            pos: 0,
        }
        .variant()
    }
}

pub fn parse_variant(notation: &str) -> Result<VariantSpec> {
    notation.parse()
}

/// One row per iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub k: usize,
    /// `||xbar_k - x*||^2 / ||x*||^2`.
    pub rel_error: f64,
    /// `(1/n) sum_i ||x_{i,k} - xbar_k||^2`.
    pub consensus_error: f64,
    pub cum_comm: u64,
    pub cum_grad: u64,
    pub cum_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub variant: String,
    pub n: usize,
    pub p: usize,
    pub kappa: f64,
    pub seed: Option<u64>,
    pub alpha: f64,
    pub beta: f64,
    pub c_c: f64,
    pub c_g: f64,
    pub horizon: usize,
    pub topology: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub meta: RunMetadata,
    pub rows: Vec<TrajectoryRow>,
}

/// Cost-independent part of a run.
#[derive(Debug, Clone)]
struct Trace {
    alpha: f64,
    rows: Vec<(usize, f64, f64, u64, u64)>,
}

fn consensus_error(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mean = crate::solver::row_mean(x);
    let mut total = 0.0;
    for i in 0..n {
        for (c, m) in mean.iter().enumerate() {
            let d = x[(i, c)] - m;
            total += d * d;
        }
    }
    total / n as f64
}

fn trace_row(state: &SolverState, instance: &ProblemInstance) -> (usize, f64, f64, u64, u64) {
    (
        state.k,
        relative_error(&state.mean_x(), instance.x_star()),
        consensus_error(&state.x),
        state.comm_rounds,
        state.grad_rounds,
    )
}

fn simulate(
    instance: &ProblemInstance,
    w: &ConsensusMatrix,
    variant: &VariantSpec,
    step: StepLength,
    horizon: usize,
) -> Result<Trace> {
    let cfg = variant.solver_config(instance, w, step, horizon)?;
    let mut rows = Vec::with_capacity(horizon + 1);
    for state in Run::new(instance, w, &cfg)? {
        rows.push(trace_row(&state?, instance));
    }
    Ok(Trace {
        alpha: cfg.alpha(),
        rows,
    })
}

impl Trace {
    fn to_record(&self, meta: RunMetadata, cost: &CostModel) -> TrajectoryRecord {
        let rows = self
            .rows
            .iter()
            .map(|&(k, rel_error, consensus_error, cum_comm, cum_grad)| TrajectoryRow {
                k,
                rel_error,
                consensus_error,
                cum_comm,
                cum_grad,
                cum_cost: cost.cost(cum_comm, cum_grad),
            })
            .collect();
        TrajectoryRecord { meta, rows }
    }
}

fn metadata(
    run_id: String,
    instance: &ProblemInstance,
    w: &ConsensusMatrix,
    variant: &VariantSpec,
    alpha: f64,
    cost: &CostModel,
    horizon: usize,
) -> RunMetadata {
    RunMetadata {
        run_id,
        variant: variant.to_string(),
        n: instance.n(),
        p: instance.p(),
        kappa: instance.kappa(),
        seed: instance.seed(),
        alpha,
        beta: w.beta(),
        c_c: cost.c_c,
        c_g: cost.c_g,
        horizon,
        topology: w.provenance().to_string(),
    }
}

/// Runs one variant for `horizon` iterations and folds the states into rows.
pub fn run_experiment(
    instance: &ProblemInstance,
    w: &ConsensusMatrix,
    variant: &VariantSpec,
    step: StepLength,
    cost: &CostModel,
    horizon: usize,
) -> Result<TrajectoryRecord> {
    let run_id = "run000".to_string();
    let trace = simulate(instance, w, variant, step, horizon).map_err(|e| Error::Run {
        run: format!("{run_id} {variant}"),
        source: Box::new(e),
    })?;
    let meta = metadata(run_id, instance, w, variant, trace.alpha, cost, horizon);
    Ok(trace.to_record(meta, cost))
}

/// A failed run inside a sweep.
#[derive(Debug)]
pub struct SweepFailure {
    pub variant: String,
    pub alpha: StepLength,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub records: Vec<TrajectoryRecord>,
    pub failures: Vec<SweepFailure>,
}

/// Runs every `variant x alpha` combination once and accounts each under
/// every cost model. An empty `alphas` list means the default step length.
///
/// Runs execute on `jobs` worker threads (`None`: rayon default). Output
/// order is `variant`, then `alpha`, then `cost model`, independent of
/// scheduling; run ids are assigned in that order.
pub fn sweep(
    instance: &ProblemInstance,
    w: &ConsensusMatrix,
    variants: &[VariantSpec],
    alphas: &[StepLength],
    cost_models: &[CostModel],
    horizon: usize,
    jobs: Option<usize>,
) -> Result<SweepOutcome> {
    if variants.is_empty() {
        return Err(Error::invalid("sweep needs at least one variant"));
    }
    if cost_models.is_empty() {
        return Err(Error::invalid("sweep needs at least one cost model"));
    }
    let alphas: Vec<StepLength> = if alphas.is_empty() {
        vec![StepLength::Auto]
    } else {
        alphas.to_vec()
    };
    let combos: Vec<(VariantSpec, StepLength)> = variants
        .iter()
        .flat_map(|v| alphas.iter().map(move |a| (*v, *a)))
        .collect();
    let work = || -> Vec<Result<Trace>> {
        combos
            .par_iter()
            .map(|(v, a)| simulate(instance, w, v, *a, horizon))
            .collect()
    };
    let traces = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut outcome = SweepOutcome::default();
    let mut next_id = 0;
    for ((variant, alpha), trace) in combos.iter().zip(traces) {
        match trace {
            Ok(trace) => {
                for cost in cost_models {
                    let run_id = format!("run{next_id:03}");
                    next_id += 1;
                    let meta = metadata(run_id, instance, w, variant, trace.alpha, cost, horizon);
                    outcome.records.push(trace.to_record(meta, cost));
                }
            }
            Err(error) => outcome.failures.push(SweepFailure {
                variant: variant.to_string(),
                alpha: *alpha,
                error,
            }),
        }
    }
    Ok(outcome)
}

pub const RECORD_HEADER: &str = "k,rel_error,consensus_error,cum_comm,cum_grad,cum_cost";
pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn record_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.csv"))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(contents))
        .map_err(|e| Error::io(path, e))
}

/// Writes one CSV per record plus `manifest.csv` with the run metadata.
pub fn export_csv(records: &[TrajectoryRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for rec in records {
        let mut out = String::with_capacity(64 * (rec.rows.len() + 1));
        out.push_str(RECORD_HEADER);
        out.push('\n');
        for r in &rec.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.k,
                fmt_f64(r.rel_error),
                fmt_f64(r.consensus_error),
                r.cum_comm,
                r.cum_grad,
                fmt_f64(r.cum_cost)
            ));
        }
        write_file(&record_path(dir, &rec.meta.run_id), out.as_bytes())?;
    }

    let manifest = dir.join(MANIFEST_FILE);
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let header = [
        "run_id", "variant", "n", "p", "kappa", "seed", "alpha", "beta", "c_c", "c_g", "horizon",
        "topology",
    ];
    wtr.write_record(header).map_err(|e| Error::csv(&manifest, e))?;
    for rec in records {
        let m = &rec.meta;
        wtr.write_record([
            m.run_id.clone(),
            m.variant.clone(),
            m.n.to_string(),
            m.p.to_string(),
            fmt_f64(m.kappa),
            m.seed.map(|s| s.to_string()).unwrap_or_default(),
            fmt_f64(m.alpha),
            fmt_f64(m.beta),
            fmt_f64(m.c_c),
            fmt_f64(m.c_g),
            m.horizon.to_string(),
            m.topology.clone(),
        ])
        .map_err(|e| Error::csv(&manifest, e))?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::format(&manifest, e.to_string()))?;
    write_file(&manifest, &bytes)
}

fn parse_field<T: FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::format(path, format!("line {line}: bad {name} `{raw}`")))
}

/// Reads back everything [`export_csv`] wrote.
pub fn read_records(dir: &Path) -> Result<Vec<TrajectoryRecord>> {
    let manifest = dir.join(MANIFEST_FILE);
    let mut rdr = csv::Reader::from_path(&manifest).map_err(|e| Error::csv(&manifest, e))?;
    let mut records = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::csv(&manifest, e))?;
        let line = idx + 2;
        if row.len() != 12 {
            return Err(Error::format(&manifest, format!("line {line}: expected 12 columns")));
        }
        let f = |i: usize| &row[i];
        let meta = RunMetadata {
            run_id: f(0).to_string(),
            variant: f(1).to_string(),
            n: parse_field(&manifest, line, "n", f(2))?,
            p: parse_field(&manifest, line, "p", f(3))?,
            kappa: parse_field(&manifest, line, "kappa", f(4))?,
            seed: if f(5).is_empty() {
                None
            } else {
                Some(parse_field(&manifest, line, "seed", f(5))?)
            },
            alpha: parse_field(&manifest, line, "alpha", f(6))?,
            beta: parse_field(&manifest, line, "beta", f(7))?,
            c_c: parse_field(&manifest, line, "c_c", f(8))?,
            c_g: parse_field(&manifest, line, "c_g", f(9))?,
            horizon: parse_field(&manifest, line, "horizon", f(10))?,
            topology: f(11).to_string(),
        };
        let path = record_path(dir, &meta.run_id);
        let rows = read_rows(&path)?;
        records.push(TrajectoryRecord { meta, rows });
    }
    Ok(records)
}

fn read_rows(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RECORD_HEADER) {
        return Err(Error::format(path, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(idx, l)| {
            let line = idx + 2;
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::format(path, format!("line {line}: expected 6 columns")));
            }
            Ok(TrajectoryRow {
                k: parse_field(path, line, "k", cols[0])?,
                rel_error: parse_field(path, line, "rel_error", cols[1])?,
                consensus_error: parse_field(path, line, "consensus_error", cols[2])?,
                cum_comm: parse_field(path, line, "cum_comm", cols[3])?,
                cum_grad: parse_field(path, line, "cum_grad", cols[4])?,
                cum_cost: parse_field(path, line, "cum_cost", cols[5])?,
            })
        })
        .collect()
}
