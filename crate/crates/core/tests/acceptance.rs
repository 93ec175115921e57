//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use neardgd::cli::{cmd_run, RunOptions};
use neardgd::graph::{
    apply_consensus, metropolis_weights, uniform_weights, ConsensusMatrix, Topology, TopologyKind,
    STOCHASTIC_TOL,
};
use neardgd::harness::{parse_variant, run_experiment, CostModel, StepLength, TrajectoryRecord};
use neardgd::objective::{generate_quadratic, ProblemInstance};
use neardgd::solver::{default_step_length, run, Schedule, SolverConfig, SolverState};
use neardgd::theory::{
    check_theorem1, check_theorem2, compute_constants, lemma_diagnostics, mean_evolution,
    DiagnosticReport, MEAN_IDENTITY_TOL,
};
use sha2::{Digest, Sha256};

use common::*;

const DESK_KAPPA: f64 = 1e2;
const DESK_SEED: u64 = 7;
const TRADEOFF_SEEDS: [u64; 3] = [7, 11, 13];
const FIGURE_SEED: u64 = 2021;
/// At the default step both AC3 runs settle within a few iterations, so the
/// transient is observed at a tenth of it.
const TRADEOFF_ALPHA_FRACTION: f64 = 0.1;
const GOLDEN: &str = include_str!("golden/paper-fig1.sha256");

type Verdict = Result<String, String>;

/// Mean-identity audit accumulated across every run of the suite.
#[derive(Default)]
struct IdentityLedger {
    runs: usize,
    steps: usize,
    worst: f64,
    offenders: Vec<String>,
}

impl IdentityLedger {
    fn audit(&mut self, label: &str, inst: &ProblemInstance, traj: &[SolverState], alpha: f64) {
        let report = mean_evolution(inst, traj, alpha).expect("identity audit");
        self.runs += 1;
        self.steps += report.rows.len();
        for r in &report.rows {
            self.worst = self.worst.max(r.lhs);
        }
        if report.rows.iter().any(|r| r.lhs > MEAN_IDENTITY_TOL) {
            self.offenders.push(label.to_string());
        }
    }
}

fn recorded_run(
    ledger: &mut IdentityLedger,
    label: &str,
    inst: &ProblemInstance,
    w: &ConsensusMatrix,
    cfg: SolverConfig,
) -> Vec<SolverState> {
    let cfg = cfg.with_inner(true);
    let traj = run(inst, w, &cfg).unwrap_or_else(|e| panic!("{label}: {e}"));
    ledger.audit(label, inst, &traj, cfg.alpha());
    traj
}

fn fixed(inst: &ProblemInstance, t_c: usize, t_g: usize, iters: usize) -> SolverConfig {
    SolverConfig::new(inst, Schedule::Constant(t_c), Schedule::Constant(t_g), iters).unwrap()
}

fn increasing(inst: &ProblemInstance, tg0: usize, iters: usize) -> SolverConfig {
    SolverConfig::new(inst, Schedule::LinearInK, Schedule::DecreaseToOne { init: tg0 }, iters).unwrap()
}

fn rel_at(inst: &ProblemInstance, traj: &[SolverState], k: usize) -> f64 {
    rel_error(&traj[k].mean_x(), inst.x_star())
}

fn describe_violations(report: &DiagnosticReport) -> String {
    let v: Vec<String> = report
        .violations()
        .take(3)
        .map(|r| format!("{}@k={} lhs={:e} rhs={:e}", r.inequality_id, r.k, r.lhs, r.rhs))
        .collect();
    format!("{} violations, e.g. {}", report.violations().count(), v.join("; "))
}

fn exact_convergence(ledger: &mut IdentityLedger) -> Verdict {
    let (inst, w) = desk_setup(DESK_KAPPA, DESK_SEED);
    let cfg = increasing(&inst, 3, 500);
    let consts = compute_constants(&inst, &w, cfg.alpha(), 3, &cfg.x0).map_err(|e| e.to_string())?;
    let traj = recorded_run(ledger, "ac1", &inst, &w, cfg);
    let hit = (0..traj.len()).find(|&k| rel_at(&inst, &traj, k) < 1e-12);
    let report = check_theorem2(&inst, &traj, &consts).map_err(|e| e.to_string())?;
    let theorem2_rows = report.rows.iter().filter(|r| r.inequality_id == "theorem2");
    let bad = theorem2_rows.clone().filter(|r| !r.satisfied).count();
    match (hit, bad) {
        (Some(k), 0) => Ok(format!(
            "rel_error < 1e-12 at k={k}; ||xbar-x*|| <= C rho^k at all {} iterates (C={:.3e}, rho={:.6})",
            theorem2_rows.count(),
            consts.c_big,
            consts.rho
        )),
        (None, _) => Err(format!("rel_error at k=500 is {:e}", rel_at(&inst, &traj, 500))),
        (_, _) => Err(describe_violations(&report)),
    }
}

fn neighborhood_stagnation(ledger: &mut IdentityLedger) -> Verdict {
    const HORIZON: usize = 5000;
    let (inst, w) = desk_setup(DESK_KAPPA, DESK_SEED);
    let mut plateaus = Vec::new();
    for t_c in [1, 2, 4] {
        let cfg = fixed(&inst, t_c, 1, HORIZON);
        let consts = compute_constants(&inst, &w, cfg.alpha(), 1, &cfg.x0).map_err(|e| e.to_string())?;
        let traj = recorded_run(ledger, &format!("ac2 t_c={t_c}"), &inst, &w, cfg);
        let report = check_theorem1(&inst, &traj, &consts, t_c, 1).map_err(|e| e.to_string())?;
        let thm: Vec<_> = report.rows.iter().filter(|r| r.inequality_id == "theorem1").collect();
        if thm.iter().any(|r| !r.satisfied) {
            return Err(format!("t_c={t_c}: {}", describe_violations(&report)));
        }
        let tail = rel_at(&inst, &traj, HORIZON);
        let prev = rel_at(&inst, &traj, HORIZON - 500);
        if (tail - prev).abs() > 1e-6 * tail {
            return Err(format!("t_c={t_c}: not stagnated ({prev:e} -> {tail:e})"));
        }
        plateaus.push(tail);
    }
    let text = format!(
        "plateaus t_c=1,2,4: {:.4e}, {:.4e}, {:.4e}; Theorem 1 bound holds at every k",
        plateaus[0], plateaus[1], plateaus[2]
    );
    if plateaus[0] > 0.0 && plateaus[1] < plateaus[0] && plateaus[2] < plateaus[1] {
        Ok(text)
    } else {
        Err(text)
    }
}

fn gradient_tradeoff(ledger: &mut IdentityLedger) -> Verdict {
    const HORIZON: usize = 5000;
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in TRADEOFF_SEEDS {
        let (inst, w) = desk_setup(DESK_KAPPA, seed);
        let alpha = TRADEOFF_ALPHA_FRACTION * default_step_length(&inst);
        let cfg = |t_g| fixed(&inst, 3, t_g, HORIZON).with_alpha(&inst, alpha).unwrap();
        let one = recorded_run(ledger, &format!("ac3 seed={seed} t_g=1"), &inst, &w, cfg(1));
        let three = recorded_run(ledger, &format!("ac3 seed={seed} t_g=3"), &inst, &w, cfg(3));
        let early = (rel_at(&inst, &three, 20), rel_at(&inst, &one, 20));
        let late = (rel_at(&inst, &three, HORIZON), rel_at(&inst, &one, HORIZON));
        ok &= early.0 < early.1 && late.0 >= late.1;
        lines.push(format!(
            "seed {seed}: k=20 {:.3e} vs {:.3e}, k=5000 {:.3e} vs {:.3e}",
            early.0, early.1, late.0, late.1
        ));
    }
    let text = format!(
        "alpha = {TRADEOFF_ALPHA_FRACTION} x default; t_g=3 vs t_g=1 ({})",
        lines.join("; ")
    );
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn lemma_suite(ledger: &mut IdentityLedger) -> Verdict {
    let (inst, w) = desk_setup(DESK_KAPPA, DESK_SEED);
    let cfg = fixed(&inst, 2, 3, 500);
    let consts = compute_constants(&inst, &w, cfg.alpha(), 3, &cfg.x0).map_err(|e| e.to_string())?;
    let traj = recorded_run(ledger, "ac4", &inst, &w, cfg);
    let report = lemma_diagnostics(&inst, &traj, &consts, 2, 3).map_err(|e| e.to_string())?;
    let families = [
        "lemma1_x", "lemma1_y", "lemma1_xhat", "lemma2", "lemma3_p1", "lemma3_p2", "lemma3_p3",
        "lemma3_p4",
    ];
    let ids = report.ids();
    let missing: Vec<_> = families
        .iter()
        .filter(|f| !ids.iter().any(|id| id.starts_with(*f)))
        .collect();
    if !missing.is_empty() {
        return Err(format!("families not evaluated: {missing:?}"));
    }
    if report.is_clean() {
        Ok(format!(
            "{} checks over {} ids, zero violations, min margin {:.3e}",
            report.rows.len(),
            ids.len(),
            report.min_margin().unwrap_or(f64::NAN)
        ))
    } else {
        Err(describe_violations(&report))
    }
}

fn centralized_reduction(ledger: &mut IdentityLedger) -> Verdict {
    let inst = generate_quadratic(1, 10, DESK_KAPPA, DESK_SEED).map_err(|e| e.to_string())?;
    let w = uniform_weights(1).map_err(|e| e.to_string())?;
    let a = inst.local(0).unwrap().a();
    let b = inst.local(0).unwrap().b().clone();
    let mut worst = 0.0f64;
    for t_g in [1, 2, 5] {
        let cfg = fixed(&inst, 1, t_g, 200);
        let alpha = cfg.alpha();
        let traj = recorded_run(ledger, &format!("ac6 t_g={t_g}"), &inst, &w, cfg);
        let mut x = DVector::zeros(10);
        for (k, state) in traj.iter().enumerate() {
            if k > 0 {
                for _ in 0..t_g {
                    x -= quad_grad(&a, &b, &x) * alpha;
                }
            }
            let dev = (state.x.row(0).transpose() - &x).amax();
            worst = worst.max(dev);
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max deviation from plain gradient descent {worst:e} over 200 iterations"))
    } else {
        Err(format!("max deviation {worst:e}"))
    }
}

fn work_counters(ledger: &mut IdentityLedger) -> Verdict {
    let (inst, w) = desk_setup(DESK_KAPPA, DESK_SEED);
    let traj = recorded_run(ledger, "ac7", &inst, &w, increasing(&inst, 3, 100));
    let last = traj.last().unwrap();
    let direct: u64 = (1..=100u64).map(|k| 3u64.saturating_sub(k - 1).max(1)).sum();
    if last.comm_rounds == 5050 && last.grad_rounds == direct {
        Ok(format!("cum_comm = 5050, cum_grad = {direct} (direct sum)"))
    } else {
        Err(format!(
            "cum_comm = {} (want 5050), cum_grad = {} (want {direct})",
            last.comm_rounds, last.grad_rounds
        ))
    }
}

fn check_matrix(w: &ConsensusMatrix, rng: &mut XorShift) -> Result<(), String> {
    let m = w.matrix();
    let n = w.n();
    for i in 0..n {
        let row: f64 = (0..n).map(|j| m[(i, j)]).sum();
        let col: f64 = (0..n).map(|j| m[(j, i)]).sum();
        if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
            return Err(format!("{}: row/col {i} sums {row}, {col}", w.provenance()));
        }
        if (0..n).any(|j| m[(i, j)].to_bits() != m[(j, i)].to_bits()) {
            return Err(format!("{}: asymmetric row {i}", w.provenance()));
        }
    }
    let beta = if n == 1 { 0.0 } else { beta_oracle(m) };
    if !(w.beta() < 1.0) || (beta - w.beta()).abs() > 1e-10 {
        return Err(format!("{}: beta {} vs oracle {beta}", w.provenance(), w.beta()));
    }
    for _ in 0..100 {
        let x = DMatrix::from_fn(n, 3, |_, _| rng.unit() * 2.0 - 1.0);
        let mean = DMatrix::from_fn(n, 3, |_, c| x.column(c).mean());
        let mixed = apply_consensus(w, &x, 1).map_err(|e| e.to_string())?;
        let reference = naive_matmul(m, &x);
        if (&mixed - &reference).amax() > 1e-14 {
            return Err(format!("{}: mixing disagrees with product", w.provenance()));
        }
        let before = (&x - &mean).norm();
        let after = (&mixed - &mean).norm();
        if after > w.beta() * before + 1e-12 {
            return Err(format!("{}: contraction {after} > {} * {before}", w.provenance(), w.beta()));
        }
    }
    Ok(())
}

fn consensus_matrix_properties(_: &mut IdentityLedger) -> Verdict {
    let mut rng = XorShift(0x5eed_1234_abcd_0001);
    let mut presets = Vec::new();
    for n in [2, 5, 10, 16] {
        presets.push(metropolis_weights(&Topology::build(TopologyKind::Complete, n).unwrap()).unwrap());
        presets.push(metropolis_weights(&Topology::build(TopologyKind::Star { hub: n / 2 }, n).unwrap()).unwrap());
        for c in [2, 4, 6] {
            if c < n {
                presets.push(
                    metropolis_weights(&Topology::build(TopologyKind::Cyclic { c }, n).unwrap()).unwrap(),
                );
            }
        }
        let u = uniform_weights(n).unwrap();
        if u.beta() != 0.0 {
            return Err(format!("uniform n={n}: beta = {}", u.beta()));
        }
        presets.push(u);
    }
    for w in &presets {
        check_matrix(w, &mut rng)?;
    }
    for g in 0..50 {
        let n = 3 + rng.below(18);
        let extra = rng.below(2 * n);
        let edges = random_connected_edges(n, extra, &mut rng);
        let topo = Topology::build(TopologyKind::Custom { edges }, n).map_err(|e| format!("graph {g}: {e}"))?;
        let w = metropolis_weights(&topo).map_err(|e| format!("graph {g}: {e}"))?;
        check_matrix(&w, &mut rng).map_err(|e| format!("graph {g}: {e}"))?;
    }
    Ok(format!(
        "{} preset matrices and 50 random graphs: stochastic, symmetric, beta < 1 (Jacobi oracle), contraction on 100 states each",
        presets.len()
    ))
}

/// Error of the last row whose cumulative cost fits in `budget`.
fn error_within_budget(rec: &TrajectoryRecord, budget: f64) -> f64 {
    rec.rows
        .iter()
        .take_while(|r| r.cum_cost <= budget)
        .last()
        .map_or(f64::INFINITY, |r| r.rel_error)
}

fn figure_ordering(ledger: &mut IdentityLedger) -> Verdict {
    const HORIZON: usize = 10_000;
    let inst = generate_quadratic(10, 10, 1e4, FIGURE_SEED).map_err(|e| e.to_string())?;
    let topo = Topology::build(TopologyKind::Cyclic { c: 4 }, 10).unwrap();
    let w = metropolis_weights(&topo).unwrap();
    let names = ["DGD", "((1,-),(1,-))", "((1,-),(1,k))"];
    let pricey = CostModel::new(100.0, 1.0).unwrap();
    let mut records = Vec::new();
    for name in names {
        let v = parse_variant(name).map_err(|e| e.to_string())?;
        let rec = run_experiment(&inst, &w, &v, StepLength::Auto, &pricey, HORIZON).map_err(|e| e.to_string())?;
        let cfg = v.solver_config(&inst, &w, StepLength::Auto, HORIZON).unwrap();
        recorded_run(ledger, &format!("ac9 {name}"), &inst, &w, cfg);
        records.push(rec);
    }
    let finals: Vec<f64> = records.iter().map(|r| r.rows[HORIZON].rel_error).collect();
    let costs: Vec<f64> = records.iter().map(|r| r.rows[HORIZON].cum_cost).collect();
    let fastest = finals[2] < finals[0] && finals[2] < finals[1];
    let not_cheapest = costs[2] > costs[0].min(costs[1]);
    // Some budget at which a baseline is strictly more accurate.
    let overtaken: Vec<f64> = records[..2]
        .iter()
        .flat_map(|r| &r.rows)
        .filter(|row| row.rel_error < error_within_budget(&records[2], row.cum_cost))
        .map(|row| row.cum_cost)
        .collect();
    let text = format!(
        "k=1e4 rel_error DGD {:.2e}, ((1,-),(1,-)) {:.2e}, ((1,-),(1,k)) {:.2e}; \
         cost at k=1e4 (c_c=100,c_g=1): {:.3e}, {:.3e}, {:.3e}; {}",
        finals[0],
        finals[1],
        finals[2],
        costs[0],
        costs[1],
        costs[2],
        match overtaken.iter().copied().reduce(f64::max) {
            Some(c) => format!(
                "a baseline is more accurate at {} budgets up to cost {c}",
                overtaken.len()
            ),
            None => "no baseline is ever more accurate per unit cost".into(),
        }
    );
    if fastest && not_cheapest && !overtaken.is_empty() {
        Ok(text)
    } else {
        Err(text)
    }
}

fn identity_everywhere(ledger: &mut IdentityLedger) -> Verdict {
    let text = format!(
        "{} runs, {} steps, max residual {:e}",
        ledger.runs, ledger.steps, ledger.worst
    );
    if ledger.offenders.is_empty() && ledger.runs > 0 {
        Ok(text)
    } else {
        Err(format!("{text}; offending runs: {:?}", ledger.offenders))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn csv_digests(dir: &std::path::Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                sha256_hex(&std::fs::read(p).unwrap()),
            )
        })
        .collect()
}

fn determinism(_: &mut IdentityLedger) -> Verdict {
    let mut digests = Vec::new();
    for jobs in [Some(1), None] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let opts = RunOptions {
            config: "preset:paper-fig1".into(),
            out: Some(dir.path().to_path_buf()),
            jobs,
        };
        cmd_run(&opts, &mut std::io::sink()).map_err(|e| e.to_string())?;
        digests.push(csv_digests(dir.path()));
    }
    if digests[0] != digests[1] {
        return Err("two runs produced different CSV bytes".into());
    }
    let golden: Vec<(String, String)> = GOLDEN
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (hash, name) = l.split_once("  ").expect("`<sha256>  <file>` lines");
            (name.to_string(), hash.to_string())
        })
        .collect();
    let mismatched: Vec<&str> = digests[0]
        .iter()
        .zip(&golden)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    if golden.len() == digests[0].len() && mismatched.is_empty() {
        Ok(format!("{} CSVs byte-identical across runs and match the golden SHA-256 digests", golden.len()))
    } else {
        for (name, hash) in &digests[0] {
            eprintln!("{hash}  {name}");
        }
        Err(format!("golden mismatch in {mismatched:?} ({} files vs {} golden)", digests[0].len(), golden.len()))
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn(&mut IdentityLedger) -> Verdict); 10] = [
        ("AC1", "exact convergence under increasing consensus", exact_convergence),
        ("AC2", "neighborhood stagnation shrinks with t_c", neighborhood_stagnation),
        ("AC3", "t_g trades transient speed for plateau", gradient_tradeoff),
        ("AC4", "iterate, gradient-deviation and mean-deviation bounds", lemma_suite),
        ("AC6", "single agent reduces to gradient descent", centralized_reduction),
        ("AC7", "communication and gradient work counters", work_counters),
        ("AC8", "consensus matrix properties", consensus_matrix_properties),
        ("AC9", "figure ordering at kappa = 1e4", figure_ordering),
        ("AC5", "mean evolution identity on every run above", identity_everywhere),
        ("AC10", "deterministic paper-fig1 CSVs", determinism),
    ];
    let mut ledger = IdentityLedger::default();
    let mut failed = 0;
    for (id, title, check) in criteria {
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut ledger)))
            .unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {id:<4} {title} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id:<4} {title} [{secs:.1}s]: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
