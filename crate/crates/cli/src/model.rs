//! Drift, certificate, weight function and `(δ, T)` from settings.

use anyhow::{anyhow, bail, Context, Result};
use wclb_core::constants::{solve_admissible_pair, solve_particle_pair, PairOutcome, PairStrategy};
use wclb_core::drift::{
    build_mean_field_game, AssumptionCertificate, CertifyMode, DriftDocument, DriftSpec, NumericOptions,
    ParticleDriftSpec, Payoff,
};
use wclb_core::kappa::{build_kappa, KappaFn, KappaOverrides};
use wclb_core::sim::System;

use crate::settings::{DriftChoice, PayoffChoice, Settings};

pub const DEFAULT_MAX_ITER: usize = 200;

pub enum Model {
    Single {
        drift: DriftSpec,
        cert: AssumptionCertificate,
        kappa: KappaFn,
    },
    Particles {
        spec: ParticleDriftSpec,
        kappa: KappaFn,
    },
}

impl Model {
    pub fn build(s: &Settings) -> Result<Self> {
        let overrides = KappaOverrides {
            a: s.kappa_a,
            l: s.kappa_l,
            eps: s.kappa_eps,
        };
        let numeric = || NumericOptions {
            pairs: s.cert_pairs.unwrap_or(NumericOptions::default().pairs),
            safety_factor: s.safety_factor.unwrap_or(NumericOptions::default().safety_factor),
            seed: s.seed(),
            ..NumericOptions::default()
        };
        if let Some(path) = &s.drift_file {
            if s.drift.is_some() {
                bail!("--drift and --drift-file are exclusive");
            }
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let doc: DriftDocument =
                serde_json::from_str(&text).with_context(|| format!("parsing drift document {}", path.display()))?;
            let (drift, cert) = DriftSpec::from_document(&doc)?;
            let cert = match cert {
                Some(c) => c,
                None => drift.certify(&CertifyMode::Numeric(numeric()))?,
            };
            let kappa = build_kappa(&cert, drift.dim(), overrides)?;
            return Ok(Model::Single { drift, cert, kappa });
        }
        let c0 = s.c0.unwrap_or(1.0);
        match s.drift.unwrap_or(DriftChoice::Linear) {
            DriftChoice::Linear => {
                let drift = DriftSpec::linear(s.d.unwrap_or(2), c0)?;
                let cert = drift.certify(&CertifyMode::Analytic)?;
                let kappa = build_kappa(&cert, drift.dim(), overrides)?;
                Ok(Model::Single { drift, cert, kappa })
            }
            DriftChoice::PerturbedLinear => {
                let drift =
                    DriftSpec::perturbed_linear(s.d.unwrap_or(2), c0, s.beta.unwrap_or(2.0), s.r0.unwrap_or(4.0))?;
                let cert = drift.certify(&CertifyMode::Numeric(numeric()))?;
                let kappa = build_kappa(&cert, drift.dim(), overrides)?;
                Ok(Model::Single { drift, cert, kappa })
            }
            DriftChoice::MeanFieldGame => {
                let confinement = DriftSpec::linear(s.d.unwrap_or(1), c0)?;
                let cert = confinement.certify(&CertifyMode::Analytic)?;
                let eps = s.eps.unwrap_or(0.02);
                let payoff = match s.payoff.unwrap_or(PayoffChoice::Sin) {
                    PayoffChoice::Sin => Payoff::ScaledSin { eps },
                    PayoffChoice::Cos => Payoff::ScaledCos { eps },
                };
                let kappa = build_kappa(&cert, confinement.dim(), overrides)?;
                let spec = build_mean_field_game(payoff, s.block.unwrap_or(2), confinement, cert)?;
                Ok(Model::Particles { spec, kappa })
            }
        }
    }

    pub fn kappa(&self) -> &KappaFn {
        match self {
            Model::Single { kappa, .. } | Model::Particles { kappa, .. } => kappa,
        }
    }

    pub fn system(&self) -> System {
        match self {
            Model::Single { drift, .. } => System::Single(drift.clone()),
            Model::Particles { spec, .. } => System::Particles(spec.clone()),
        }
    }

    pub fn state_len(&self) -> usize {
        match self {
            Model::Single { drift, .. } => drift.dim(),
            Model::Particles { spec, .. } => spec.state_len(),
        }
    }

    pub fn single(&self) -> Result<(&DriftSpec, &AssumptionCertificate, &KappaFn)> {
        match self {
            Model::Single { drift, cert, kappa } => Ok((drift, cert, kappa)),
            Model::Particles { .. } => bail!("this experiment needs a single-chain drift"),
        }
    }

    pub fn particles(&self) -> Result<(&ParticleDriftSpec, &KappaFn)> {
        match self {
            Model::Particles { spec, kappa } => Ok((spec, kappa)),
            Model::Single { .. } => bail!("this experiment needs --drift mean-field-game"),
        }
    }

    /// Runs the alternating pair solver.
    pub fn solve_pair(&self, max_iter: usize) -> Result<PairOutcome> {
        Ok(match self {
            Model::Single { drift, cert, kappa } => {
                solve_admissible_pair(drift, cert, kappa, PairStrategy::Alternate { max_iter })?
            }
            Model::Particles { spec, kappa } => solve_particle_pair(spec, kappa, max_iter)?,
        })
    }

    /// The user's `(δ, T)`, or the solver's when either is missing.
    pub fn pair(&self, s: &Settings) -> Result<(f64, f64)> {
        if let (Some(delta), Some(t)) = (s.delta, s.t) {
            return Ok((delta, t));
        }
        if s.delta.is_some() || s.t.is_some() {
            bail!("give both --delta and --T, or neither to solve for them");
        }
        match self.solve_pair(s.max_iter.unwrap_or(DEFAULT_MAX_ITER))? {
            PairOutcome::Converged { delta, t, .. } => Ok((delta, t)),
            PairOutcome::NotConverged { iterations, .. } => {
                Err(anyhow!("pair solver did not converge in {iterations} iterations"))
            }
            _ => unreachable!("alternate strategy"),
        }
    }
}
