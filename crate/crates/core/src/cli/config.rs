//! TOML run configuration.
//!
//! ```toml
//! [problem]
//! n = 10
//! p = 10
//! kappa = 1e4
//! seed = 7            # or: seeds = [7, 8, 9]
//!
//! [topology]
//! kind = "cyclic"     # cyclic | complete | star | custom
//! c = 4
//! weights = "metropolis"   # metropolis | uniform
//!
//! [run]
//! variants = ["DGD", "((1,-),(1,-))", "((1,-),(1,k))"]
//! alpha = "auto"      # or a number
//! horizon = 10000
//! unsafe_alpha = false
//!
//! [[costs]]
//! c_c = 1.0
//! c_g = 1.0
//!
//! [output]
//! dir = "out/fig1"
//!
//! [verify]
//! theorem1 = false
//! theorem2 = false
//! lemma3 = false
//! counters = false
//!
//! [plot]
//! enabled = true
//! axes = ["iters", "grads", "comms", "cost"]
//! marker_every = 500
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::{metropolis_weights, uniform_weights, ConsensusMatrix, TopologySpec};
use crate::harness::{parse_variant, CostModel, StepLength, VariantSpec};
use crate::objective::{generate_quadratic, ProblemInstance};
use crate::solver::max_step_length;

use super::plot::Axis;

pub const PRESETS: &[(&str, &str)] = &[
    ("paper-fig1", include_str!("presets/paper-fig1.toml")),
    ("paper-fig2-costs", include_str!("presets/paper-fig2-costs.toml")),
    ("paper-fig3-practical", include_str!("presets/paper-fig3-practical.toml")),
    ("theorem2-verify", include_str!("presets/theorem2-verify.toml")),
];

/// Prefix selecting a shipped preset instead of a file path.
pub const PRESET_PREFIX: &str = "preset:";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemBlock,
    pub topology: TopologyBlock,
    pub run: RunBlock,
    #[serde(default)]
    pub costs: Vec<CostModel>,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub verify: VerifyBlock,
    #[serde(default)]
    pub plot: PlotBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub n: usize,
    pub p: usize,
    pub kappa: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyBlock {
    pub kind: String,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub c: Option<usize>,
    #[serde(default)]
    pub hub: Option<usize>,
    #[serde(default)]
    pub edges: Option<Vec<[usize; 2]>>,
    #[serde(default = "default_weights")]
    pub weights: String,
}

fn default_weights() -> String {
    "metropolis".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Number(f64),
    Keyword(String),
}

impl Default for AlphaSetting {
    fn default() -> Self {
        AlphaSetting::Keyword("auto".into())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub variants: Vec<String>,
    #[serde(default)]
    pub alpha: AlphaSetting,
    pub horizon: usize,
    #[serde(default)]
    pub unsafe_alpha: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    #[serde(default)]
    pub theorem1: bool,
    #[serde(default)]
    pub theorem2: bool,
    #[serde(default)]
    pub lemma3: bool,
    #[serde(default)]
    pub counters: bool,
}

impl VerifyBlock {
    pub fn any(&self) -> bool {
        self.theorem1 || self.theorem2 || self.lemma3 || self.counters
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotBlock {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_axes")]
    pub axes: Vec<String>,
    #[serde(default = "default_marker_every")]
    pub marker_every: usize,
    #[serde(default)]
    pub linear_y: bool,
}

impl Default for PlotBlock {
    fn default() -> Self {
        PlotBlock {
            enabled: false,
            axes: default_axes(),
            marker_every: default_marker_every(),
            linear_y: false,
        }
    }
}

fn default_axes() -> Vec<String> {
    ["iters", "grads", "comms", "cost"].map(String::from).to_vec()
}

fn default_marker_every() -> usize {
    500
}

/// A configuration with every field checked and every string resolved.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub seeds: Vec<u64>,
    pub n: usize,
    pub p: usize,
    pub kappa: f64,
    pub topology: TopologySpec,
    pub weights: Weights,
    pub variants: Vec<VariantSpec>,
    pub alpha: Option<f64>,
    pub unsafe_alpha: bool,
    pub horizon: usize,
    pub costs: Vec<CostModel>,
    pub out_dir: Option<PathBuf>,
    pub verify: VerifyBlock,
    pub plot: Option<PlotSettings>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Metropolis,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSettings {
    pub axes: Vec<Axis>,
    pub marker_every: usize,
    pub log_y: bool,
}

fn field(name: &str, e: impl std::fmt::Display) -> Error {
    Error::invalid(format!("{name}: {e}"))
}

/// Reads `source`, either a file path or `preset:<name>`.
pub fn load(source: &str) -> Result<ValidatedConfig> {
    let (text, origin) = match source.strip_prefix(PRESET_PREFIX) {
        Some(name) => {
            let text = PRESETS
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.to_string())
                .ok_or_else(|| {
                    let names: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
                    Error::invalid(format!("unknown preset `{name}` (available: {})", names.join(", ")))
                })?;
            (text, PathBuf::from(source))
        }
        None => {
            let path = Path::new(source);
            (std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?, path.to_path_buf())
        }
    };
    parse(&text).map_err(|e| match e {
        Error::InvalidParameter(msg) => Error::format(origin, msg),
        other => other,
    })
}

pub fn parse(text: &str) -> Result<ValidatedConfig> {
    let raw: RunConfig = toml::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
    raw.validate()
}

impl RunConfig {
    pub fn validate(self) -> Result<ValidatedConfig> {
        let RunConfig {
            problem,
            topology,
            run,
            costs,
            output,
            verify,
            plot,
        } = self;

        let seeds = match (problem.seed, problem.seeds) {
            (Some(s), None) => vec![s],
            (None, Some(list)) if !list.is_empty() => list,
            (None, Some(_)) => return Err(field("problem.seeds", "must not be empty")),
            (None, None) => return Err(field("problem", "one of `seed` or `seeds` is required")),
            (Some(_), Some(_)) => return Err(field("problem", "give `seed` or `seeds`, not both")),
        };
        if problem.n == 0 {
            return Err(field("problem.n", "must be at least 1"));
        }
        if problem.p == 0 {
            return Err(field("problem.p", "must be at least 1"));
        }
        if !(problem.kappa >= 1.0 && problem.kappa.is_finite()) {
            return Err(field("problem.kappa", format!("must be finite and >= 1, got {}", problem.kappa)));
        }

        let weights = match topology.weights.as_str() {
            "metropolis" => Weights::Metropolis,
            "uniform" => Weights::Uniform,
            other => {
                return Err(field(
                    "topology.weights",
                    format!("unknown scheme `{other}` (expected metropolis or uniform)"),
                ))
            }
        };
        let topo = TopologySpec {
            kind: topology.kind,
            n: topology.n,
            c: topology.c,
            hub: topology.hub,
            edges: topology.edges,
        };
        topo.build(problem.n).map_err(|e| field("topology", e))?;

        if run.variants.is_empty() {
            return Err(field("run.variants", "must list at least one variant"));
        }
        let variants = run
            .variants
            .iter()
            .map(|v| parse_variant(v).map_err(|e| field("run.variants", format!("`{v}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let alpha = match run.alpha {
            AlphaSetting::Keyword(k) if k == "auto" => None,
            AlphaSetting::Keyword(k) => {
                return Err(field("run.alpha", format!("expected \"auto\" or a number, got `{k}`")))
            }
            AlphaSetting::Number(a) if a > 0.0 && a.is_finite() => Some(a),
            AlphaSetting::Number(a) => return Err(field("run.alpha", format!("must be positive, got {a}"))),
        };

        let costs = if costs.is_empty() {
            vec![CostModel::unit()]
        } else {
            costs
                .into_iter()
                .map(|c| CostModel::new(c.c_c, c.c_g).map_err(|e| field("costs", e)))
                .collect::<Result<_>>()?
        };

        let plot = if plot.enabled {
            if plot.marker_every == 0 {
                return Err(field("plot.marker_every", "must be at least 1"));
            }
            Some(PlotSettings {
                axes: plot
                    .axes
                    .iter()
                    .map(|a| a.parse().map_err(|e| field("plot.axes", e)))
                    .collect::<Result<_>>()?,
                marker_every: plot.marker_every,
                log_y: !plot.linear_y,
            })
        } else {
            None
        };

        Ok(ValidatedConfig {
            seeds,
            n: problem.n,
            p: problem.p,
            kappa: problem.kappa,
            topology: topo,
            weights,
            variants,
            alpha,
            unsafe_alpha: run.unsafe_alpha,
            horizon: run.horizon,
            costs,
            out_dir: output.dir,
            verify,
            plot,
        })
    }
}

impl ValidatedConfig {
    pub fn instance(&self, seed: u64) -> Result<ProblemInstance> {
        generate_quadratic(self.n, self.p, self.kappa, seed)
    }

    pub fn consensus_matrix(&self) -> Result<ConsensusMatrix> {
        match self.weights {
            Weights::Metropolis => metropolis_weights(&self.topology.build(self.n)?),
            Weights::Uniform => {
                self.topology.build(self.n)?;
                uniform_weights(self.n)
            }
        }
    }

    /// Step-length policy; an explicit alpha above the bound is accepted
    /// only with `unsafe_alpha`.
    pub fn step_length(&self) -> StepLength {
        match self.alpha {
            None => StepLength::Auto,
            Some(a) if self.unsafe_alpha => StepLength::Unchecked(a),
            Some(a) => StepLength::Checked(a),
        }
    }

    /// `Some((alpha, bound))` if the configured step exceeds the bound.
    pub fn alpha_excess(&self, instance: &ProblemInstance) -> Option<(f64, f64)> {
        let bound = max_step_length(instance);
        self.alpha.filter(|&a| a > bound).map(|a| (a, bound))
    }
}
