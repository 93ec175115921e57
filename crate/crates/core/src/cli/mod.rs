//! Implementations behind the `neardgd` binary.
//!
//! Each command returns `Ok` with a printable summary or a [`Failure`]
//! whose [`Failure::exit_code`] follows the contract: 0 success, 1 config
//! error, 2 run failure, 3 verification violation.

pub mod config;
pub mod plot;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::graph::ConsensusMatrix;
use crate::harness::{self, export_csv, read_records, sweep, TrajectoryRecord, VariantSpec};
use crate::objective::ProblemInstance;
use crate::solver::{run, Method, Schedule};
use crate::theory::{
    check_theorem1, check_theorem2, compute_constants, compute_constants_unchecked,
    lemma_diagnostics, mean_evolution, work_counters_check, BoundCheck, DiagnosticReport,
};

use config::ValidatedConfig;
use plot::{plot_records, PlotOptions};

pub use config::load as load_config;

/// Overrides the default output directory when neither the command line
/// nor the configuration names one.
pub const OUT_DIR_ENV: &str = "NEARDGD_OUT_DIR";
pub const FALLBACK_OUT_DIR: &str = "neardgd-out";
pub const VERIFY_SUMMARY_FILE: &str = "verify_summary.txt";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUN: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

#[derive(Debug)]
pub enum Failure {
    Config(Error),
    Run(String),
    Violation(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Run(_) => EXIT_RUN,
            Failure::Violation(_) => EXIT_VIOLATION,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e}"),
            Failure::Run(msg) => write!(f, "run failure: {msg}"),
            Failure::Violation(msg) => write!(f, "verification failed: {msg}"),
        }
    }
}

fn run_failure(e: Error) -> Failure {
    Failure::Run(e.to_string())
}

/// `--out`, then `output.dir`, then the environment, then `neardgd-out`.
pub fn resolve_out_dir(cli_out: Option<&Path>, cfg: &ValidatedConfig) -> PathBuf {
    cli_out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
}

struct Prepared {
    cfg: ValidatedConfig,
    w: ConsensusMatrix,
    instances: Vec<ProblemInstance>,
}

fn prepare(config: &str) -> Result<Prepared, Failure> {
    let cfg = load_config(config).map_err(Failure::Config)?;
    let w = cfg.consensus_matrix().map_err(Failure::Config)?;
    let instances = cfg
        .seeds
        .iter()
        .map(|&s| cfg.instance(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Config)?;
    for inst in &instances {
        if let (Some((alpha, bound)), false) = (cfg.alpha_excess(inst), cfg.unsafe_alpha) {
            return Err(Failure::Config(Error::invalid(format!(
                "run.alpha = {alpha} exceeds the admissible bound {bound} for seed {}; \
                 set run.unsafe_alpha = true to run anyway",
                inst.seed().unwrap_or_default()
            ))));
        }
    }
    Ok(Prepared { cfg, w, instances })
}

/// Options of `neardgd run`.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: String,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// Runs the configured sweep, exports CSVs, then plots and verifies if the
/// configuration asks for it.
pub fn cmd_run(opts: &RunOptions, log: &mut dyn Write) -> Result<(), Failure> {
    let Prepared { cfg, w, instances } = prepare(&opts.config)?;
    let out = resolve_out_dir(opts.out.as_deref(), &cfg);

    let mut records: Vec<TrajectoryRecord> = Vec::new();
    let mut failures = Vec::new();
    for inst in &instances {
        let outcome = sweep(
            inst,
            &w,
            &cfg.variants,
            &[cfg.step_length()],
            &cfg.costs,
            cfg.horizon,
            opts.jobs,
        )
        .map_err(Failure::Config)?;
        for mut rec in outcome.records {
            rec.meta.run_id = format!("run{:03}", records.len());
            records.push(rec);
        }
        for f in outcome.failures {
            failures.push(format!(
                "seed {}: {}: {}",
                inst.seed().unwrap_or_default(),
                f.variant,
                f.error
            ));
        }
    }
    export_csv(&records, &out).map_err(run_failure)?;
    let _ = writeln!(log, "wrote {} records to {}", records.len(), out.display());
    for rec in &records {
        if let Some(last) = rec.rows.last() {
            let _ = writeln!(
                log,
                "  {} {:<22} seed={} c_c={} c_g={}  k={} rel_error={:.3e} cost={}",
                rec.meta.run_id,
                rec.meta.variant,
                rec.meta.seed.unwrap_or_default(),
                rec.meta.c_c,
                rec.meta.c_g,
                last.k,
                last.rel_error,
                last.cum_cost
            );
        }
    }

    if let Some(p) = &cfg.plot {
        if !records.is_empty() {
            let opts = PlotOptions {
                axes: p.axes.clone(),
                marker_every: p.marker_every,
                log_y: p.log_y,
            };
            let files = plot_records(&records, &opts, &out).map_err(run_failure)?;
            let _ = writeln!(log, "wrote {} plot files", files.len());
        }
    }

    let verdict = if cfg.verify.any() {
        Some(verify_prepared(&cfg, &w, &instances, &out, log)?)
    } else {
        None
    };

    if !failures.is_empty() {
        return Err(Failure::Run(format!(
            "{} run(s) failed:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    match verdict {
        Some(v) => v.into_result(),
        None => Ok(()),
    }
}

/// Options of `neardgd verify`.
#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub config: String,
    pub out: Option<PathBuf>,
}

/// Re-runs every variant with inner-iterate recording and evaluates the
/// enabled checks. Writes one report CSV per run and a summary file.
pub fn cmd_verify(opts: &VerifyOptions, log: &mut dyn Write) -> Result<(), Failure> {
    let Prepared { cfg, w, instances } = prepare(&opts.config)?;
    if !cfg.verify.any() {
        return Err(Failure::Config(Error::invalid(
            "verify: enable at least one of theorem1, theorem2, lemma3, counters",
        )));
    }
    let out = resolve_out_dir(opts.out.as_deref(), &cfg);
    verify_prepared(&cfg, &w, &instances, &out, log)?.into_result()
}

struct Verdict {
    violations: usize,
    failures: Vec<String>,
}

impl Verdict {
    fn into_result(self) -> Result<(), Failure> {
        if !self.failures.is_empty() {
            Err(Failure::Run(self.failures.join("; ")))
        } else if self.violations > 0 {
            Err(Failure::Violation(format!("{} bound violation(s)", self.violations)))
        } else {
            Ok(())
        }
    }
}

fn is_theorem2_schedule(tc: &Schedule, tg: &Schedule) -> bool {
    matches!(
        (tc, tg),
        (Schedule::LinearInK, Schedule::DecreaseToOne { .. }) | (Schedule::LinearInK, Schedule::Constant(1))
    )
}

fn verify_one(
    cfg: &ValidatedConfig,
    w: &ConsensusMatrix,
    inst: &ProblemInstance,
    variant: &VariantSpec,
    notes: &mut Vec<String>,
) -> crate::Result<DiagnosticReport> {
    let solver_cfg = variant
        .solver_config(inst, w, cfg.step_length(), cfg.horizon)?
        .with_inner(true);
    let traj = run(inst, w, &solver_cfg)?;
    let alpha = solver_cfg.alpha();
    let (tc, tg) = (solver_cfg.tc_schedule, solver_cfg.tg_schedule);
    let mut report = DiagnosticReport::default();

    let excess = cfg.alpha_excess(inst);
    if let Some((a, bound)) = excess {
        report.rows.push(BoundCheck {
            k: 0,
            inequality_id: "step_length".into(),
            lhs: a,
            rhs: bound,
            satisfied: false,
        });
    }
    let consts = if excess.is_some() {
        compute_constants_unchecked(inst, w, alpha, tg.initial(), &solver_cfg.x0)?
    } else {
        compute_constants(inst, w, alpha, tg.initial(), &solver_cfg.x0)?
    };

    report.extend(mean_evolution(inst, &traj, alpha)?);
    let near = solver_cfg.method == Method::NearDgd;
    let fixed = near && tc.is_constant() && tg.is_constant();
    let thm2 = near && is_theorem2_schedule(&tc, &tg);
    let (t_c, t_g) = (tc.initial(), tg.initial());
    let mut skip = |what: &str| notes.push(format!("{what} not applicable to {variant}"));

    if cfg.verify.theorem1 {
        if fixed {
            report.extend(check_theorem1(inst, &traj, &consts, t_c, t_g)?);
        } else {
            skip("theorem1");
        }
    }
    if cfg.verify.lemma3 {
        if fixed {
            report.extend(lemma_diagnostics(inst, &traj, &consts, t_c, t_g)?);
        } else {
            skip("lemma3");
        }
    }
    if cfg.verify.theorem2 {
        if thm2 {
            report.extend(check_theorem2(inst, &traj, &consts)?);
        } else {
            skip("theorem2");
        }
    }
    if cfg.verify.counters {
        if thm2 {
            let c = work_counters_check(&traj, &tc, &tg)?;
            let closed_ok = c.comm_closed_form == c.comm_direct
                && c.grad_closed_form.is_none_or(|g| g == c.grad_direct);
            report.rows.push(BoundCheck {
                k: c.iterations,
                inequality_id: "counters_comm".into(),
                lhs: c.comm_measured as f64,
                rhs: c.comm_direct as f64,
                satisfied: c.comm_measured == c.comm_direct && closed_ok,
            });
            report.rows.push(BoundCheck {
                k: c.iterations,
                inequality_id: "counters_grad".into(),
                lhs: c.grad_measured as f64,
                rhs: c.grad_direct as f64,
                satisfied: c.grad_measured == c.grad_direct && closed_ok,
            });
        } else {
            skip("counters");
        }
    }
    Ok(report)
}

fn verify_prepared(
    cfg: &ValidatedConfig,
    w: &ConsensusMatrix,
    instances: &[ProblemInstance],
    out: &Path,
    log: &mut dyn Write,
) -> Result<Verdict, Failure> {
    std::fs::create_dir_all(out).map_err(|e| run_failure(Error::io(out, e)))?;
    let mut summary = String::new();
    let mut violations = 0;
    let mut failures = Vec::new();
    let mut checks = 0;
    let mut idx = 0;
    for inst in instances {
        let seed = inst.seed().unwrap_or_default();
        for variant in &cfg.variants {
            let name = format!("verify{idx:03}");
            idx += 1;
            let mut notes = Vec::new();
            match verify_one(cfg, w, inst, variant, &mut notes) {
                Ok(report) => {
                    let path = out.join(format!("{name}.csv"));
                    report.write_csv(&path).map_err(run_failure)?;
                    let bad = report.violations().count();
                    violations += bad;
                    checks += report.rows.len();
                    summary.push_str(&format!(
                        "{name} seed={seed} {variant}: {} checks, {bad} violation(s)\n",
                        report.rows.len()
                    ));
                    for id in report.ids() {
                        let rows = report.rows.iter().filter(|r| r.inequality_id == id);
                        let (count, worst) = rows.fold((0, f64::INFINITY), |(c, m), r| {
                            (c + 1, m.min(r.rhs - r.lhs))
                        });
                        summary.push_str(&format!("    {id:<14} {count:>6} rows, min slack {worst:.3e}\n"));
                    }
                    for v in report.violations().take(5) {
                        summary.push_str(&format!(
                            "    violated {} at k={}: lhs={:e} rhs={:e}\n",
                            v.inequality_id, v.k, v.lhs, v.rhs
                        ));
                    }
                }
                Err(e) => {
                    summary.push_str(&format!("{name} seed={seed} {variant}: failed: {e}\n"));
                    failures.push(format!("{variant} (seed {seed}): {e}"));
                }
            }
            for n in notes {
                summary.push_str(&format!("    note: {n}\n"));
            }
        }
    }
    summary.push_str(&if violations == 0 && failures.is_empty() {
        format!("all bounds satisfied ({checks} checks)\n")
    } else {
        format!("{violations} violation(s), {} failed run(s) over {checks} checks\n", failures.len())
    });
    let path = out.join(VERIFY_SUMMARY_FILE);
    std::fs::write(&path, &summary).map_err(|e| run_failure(Error::io(&path, e)))?;
    let _ = log.write_all(summary.as_bytes());
    Ok(Verdict {
        violations,
        failures,
    })
}

/// Options of `neardgd plot`.
#[derive(Debug, Clone)]
pub struct PlotCommand {
    pub records: PathBuf,
    pub axes: String,
    pub marker_every: usize,
    pub log_y: bool,
    pub out: Option<PathBuf>,
}

/// Draws the records in a directory written by `run`.
pub fn cmd_plot(opts: &PlotCommand, log: &mut dyn Write) -> Result<(), Failure> {
    let axes = plot::parse_axes(&opts.axes).map_err(Failure::Config)?;
    if opts.marker_every == 0 {
        return Err(Failure::Config(Error::invalid("--marker-every must be at least 1")));
    }
    let manifest = opts.records.join(harness::MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(Failure::Run(format!("no records found: {} is missing", manifest.display())));
    }
    let records = read_records(&opts.records).map_err(run_failure)?;
    if records.is_empty() {
        return Err(Failure::Run(format!("no records listed in {}", manifest.display())));
    }
    let out = opts.out.clone().unwrap_or_else(|| opts.records.clone());
    let files = plot_records(
        &records,
        &PlotOptions {
            axes,
            marker_every: opts.marker_every,
            log_y: opts.log_y,
        },
        &out,
    )
    .map_err(run_failure)?;
    for f in files {
        let _ = writeln!(log, "wrote {}", f.display());
    }
    Ok(())
}
