//! Ready-made drifts with their certificates, weight functions and a
//! solved admissible `(δ, T)`.

use crate::constants::{solve_admissible_pair, solve_particle_pair, PairOutcome, PairStrategy};
use crate::drift::{
    build_mean_field_game, AssumptionCertificate, CertifyMode, DriftSpec, NumericOptions, ParticleDriftSpec, Payoff,
};
use crate::error::{Error, Result};
use crate::kappa::{build_kappa, KappaFn, KappaOverrides};

const MAX_ITER: usize = 200;

#[derive(Debug, Clone)]
pub struct Example {
    pub name: &'static str,
    pub drift: DriftSpec,
    pub cert: AssumptionCertificate,
    pub kappa: KappaFn,
    pub delta: f64,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct ParticleExample {
    pub name: &'static str,
    pub spec: ParticleDriftSpec,
    pub kappa: KappaFn,
    pub delta: f64,
    pub t: f64,
}

fn converged(outcome: PairOutcome) -> Result<(f64, f64)> {
    match outcome {
        PairOutcome::Converged { delta, t, .. } => Ok((delta, t)),
        PairOutcome::NotConverged { iterations, .. } => Err(Error::Inadmissible(format!(
            "no admissible pair after {iterations} iterations"
        ))),
        _ => unreachable!("alternate strategy"),
    }
}

fn finish(name: &'static str, drift: DriftSpec, cert: AssumptionCertificate) -> Result<Example> {
    let kappa = build_kappa(&cert, drift.dim(), KappaOverrides::default())?;
    let (delta, t) = converged(solve_admissible_pair(
        &drift,
        &cert,
        &kappa,
        PairStrategy::Alternate { max_iter: MAX_ITER },
    )?)?;
    Ok(Example {
        name,
        drift,
        cert,
        kappa,
        delta,
        t,
    })
}

/// `b(x) = -c₀ x` with the analytic certificate.
pub fn linear(d: usize, c0: f64) -> Result<Example> {
    let drift = DriftSpec::linear(d, c0)?;
    let cert = drift.certify(&CertifyMode::Analytic)?;
    finish("linear", drift, cert)
}

/// `b(x) = -c₀ x + β ∇(bump)` with a numerically certified `(L_b, R, c, K)`.
pub fn perturbed_linear(d: usize, c0: f64, beta: f64, r0: f64, opts: NumericOptions) -> Result<Example> {
    let drift = DriftSpec::perturbed_linear(d, c0, beta, r0)?;
    let cert = drift.certify(&CertifyMode::Numeric(opts))?;
    finish("perturbed-linear", drift, cert)
}

/// Two blocks of `block` particles in `d = 1` with `l(x, y) = ε sin(x - y)`
/// and linear confinement.
pub fn mean_field_game(block: usize, eps: f64, c0: f64) -> Result<ParticleExample> {
    let confinement = DriftSpec::linear(1, c0)?;
    let cert = confinement.certify(&CertifyMode::Analytic)?;
    let spec = build_mean_field_game(Payoff::ScaledSin { eps }, block, confinement, cert.clone())?;
    let kappa = build_kappa(&cert, 1, KappaOverrides::default())?;
    let (delta, t) = converged(solve_particle_pair(&spec, &kappa, MAX_ITER)?)?;
    Ok(ParticleExample {
        name: "mean-field-game",
        spec,
        kappa,
        delta,
        t,
    })
}
