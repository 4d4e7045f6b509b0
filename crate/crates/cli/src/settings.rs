//! Flat experiment configuration shared by every subcommand.
//!
//! The same struct is read from a JSON file and from command-line flags;
//! flags win wherever both are present.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum DriftChoice {
    Linear,
    PerturbedLinear,
    MeanFieldGame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum PayoffChoice {
    Sin,
    Cos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorChoice {
    Mc,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum CostChoice {
    Euclidean,
    Rho,
    RhoTilde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Emit {
    Json,
    Csv,
    Both,
}

impl Emit {
    pub fn json(self) -> bool {
        matches!(self, Emit::Json | Emit::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, Emit::Csv | Emit::Both)
    }
}

/// Experiment configuration. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// Subcommand path the file was written for, e.g. "verify rho-onestep".
    #[arg(skip)]
    pub experiment: Option<String>,

    // -- model --
    /// Built-in drift.
    #[arg(long, value_enum)]
    pub drift: Option<DriftChoice>,
    /// Drift document (JSON) with an optional certificate.
    #[arg(long)]
    pub drift_file: Option<PathBuf>,
    /// Dimension of one particle.
    #[arg(long)]
    pub d: Option<usize>,
    /// Linear confinement strength.
    #[arg(long)]
    pub c0: Option<f64>,
    /// Amplitude of the bump perturbation.
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Width of the bump perturbation.
    #[arg(long)]
    pub r0: Option<f64>,
    /// Payoff of the mean-field game.
    #[arg(long, value_enum)]
    pub payoff: Option<PayoffChoice>,
    /// Payoff strength.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Particles per block of the mean-field game.
    #[arg(long)]
    pub block: Option<usize>,
    /// Sampled pairs for numeric certification.
    #[arg(long)]
    pub cert_pairs: Option<usize>,
    /// Inflation applied to sampled constants.
    #[arg(long)]
    pub safety_factor: Option<f64>,
    /// Override of the weight-function decrease rate `a`.
    #[arg(long)]
    pub kappa_a: Option<f64>,
    /// Override of the weight-function growth rate `L`.
    #[arg(long)]
    pub kappa_l: Option<f64>,
    /// Override of the weight-function `ε`.
    #[arg(long)]
    pub kappa_eps: Option<f64>,

    // -- (delta, T) --
    /// Step size.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Temperature.
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub t: Option<f64>,
    /// Iteration cap of the pair solver used when delta or T is missing.
    #[arg(long)]
    pub max_iter: Option<usize>,

    // -- experiment parameters --
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (also WCLB_THREADS).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorChoice>,
    /// Monte Carlo samples per point.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Number of generated state pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Kernel power.
    #[arg(long)]
    pub k: Option<usize>,
    /// Last step of the envelope check.
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub replicas: Option<usize>,
    /// Keep every m-th step.
    #[arg(long)]
    pub record_every: Option<usize>,
    /// First state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Option<Vec<f64>>,
    /// Second state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y: Option<Vec<f64>>,
    /// Standard deviation of Gaussian starting laws around `x` and `y`.
    #[arg(long)]
    pub init_std: Option<f64>,
    /// Binary frame file for simulated clouds.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// CSV point cloud.
    #[arg(long)]
    pub mu: Option<PathBuf>,
    /// CSV point cloud.
    #[arg(long)]
    pub nu: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub cost: Option<CostChoice>,
    /// Exponent of the Euclidean cost.
    #[arg(long)]
    pub p: Option<f64>,
    /// Path length.
    #[arg(long)]
    pub n: Option<usize>,
    /// Deviations, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub u: Option<Vec<f64>>,
    /// Independent chains.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Coordinate of the observable.
    #[arg(long)]
    pub index: Option<usize>,
    /// Confidence level.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub two_sided: Option<bool>,
    /// Contraction rate per step.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Local Poincaré constant `C`.
    #[arg(long)]
    pub c_local: Option<f64>,
    /// Poincaré constant `C₀` of the initial law.
    #[arg(long)]
    pub c_init: Option<f64>,
    /// Prefactor `M`.
    #[arg(long)]
    pub m: Option<f64>,
    /// Rate `h`.
    #[arg(long)]
    pub h: Option<f64>,
    /// Time horizon of the path average.
    #[arg(long)]
    pub t_horizon: Option<f64>,
    /// `W₁(ν₀, π∞)`.
    #[arg(long)]
    pub w1: Option<f64>,
    /// Discretisation bias constant.
    #[arg(long)]
    pub c2: Option<f64>,
    /// Lipschitz constant of the drift.
    #[arg(long)]
    pub l_b: Option<f64>,
    /// Lipschitz constant of the drift Jacobian.
    #[arg(long)]
    pub hessian_c: Option<f64>,
    /// Horizon `c` of the entropy bound.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Largest radius of a profile table.
    #[arg(long)]
    pub r_max: Option<f64>,
    /// Points in a profile table or inner check grid.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Points of the outer check grid.
    #[arg(long)]
    pub grid_outer: Option<usize>,

    // -- output --
    #[arg(long, value_enum)]
    pub emit: Option<Emit>,
    /// Directory for reports; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Settings {
    /// Reads a config file; any malformed or unknown key is an error.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `self` with every value present in `flags` replaced.
    pub fn overlay(self, flags: &Settings) -> Result<Self> {
        let mut base = serde_json::to_value(&self)?;
        let top = serde_json::to_value(flags)?;
        if let (Value::Object(b), Value::Object(t)) = (&mut base, top) {
            for (key, v) in t {
                if !v.is_null() {
                    b.insert(key, v);
                }
            }
        }
        Ok(serde_json::from_value(base)?)
    }

    pub fn check_experiment(&self, command: &str) -> Result<()> {
        match &self.experiment {
            Some(e) if e != command => bail!("config was written for {e:?}, not {command:?}"),
            _ => Ok(()),
        }
    }

    pub fn emit(&self) -> Emit {
        self.emit.unwrap_or(Emit::Json)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

pub fn schema() -> String {
    let schema = schemars::schema_for!(Settings);
    serde_json::to_string_pretty(&schema).expect("schema serialises") + "\n"
}
