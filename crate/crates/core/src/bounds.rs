//! Concentration, confidence-interval and entropy-cost bounds, with the
//! experiments that check them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::linear_kernel_moments;
use crate::constants::single_chain_constants;
use crate::drift::{AssumptionCertificate, DriftSpec};
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::kappa::KappaFn;
use crate::report::{CheckRow, Provenance, VerificationReport};
use crate::sim::{advance, diverged, ChainConfig, InitialLaw, System};

/// Standard deviation of the Gaussian stand-in for a Dirac initial law.
pub const DIRAC_FALLBACK_STD: f64 = 1e-2;

const TAG_MAIN: u64 = 0xc0c0_0001;
const TAG_PILOT: u64 = 0xc0c0_0002;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationInput {
    pub n: usize,
    pub u: f64,
    pub theta: f64,
    pub c: f64,
    pub c0: f64,
    pub m: f64,
}

impl ConcentrationInput {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n must be >= 1"));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(invalid(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(self.c >= 0.0 && self.c0 >= 0.0) {
            return Err(invalid("C and C0 must be nonnegative"));
        }
        if !(self.m >= 1.0) {
            return Err(invalid(format!("M must be >= 1, got {}", self.m)));
        }
        if !(self.u >= 0.0) {
            return Err(invalid(format!("u must be nonnegative, got {}", self.u)));
        }
        Ok(())
    }
}

/// `exp(-n²u²θ² / (2((n-1)Cθ² + C₀M²)))`, clamped to `[0, 1]`.
pub fn concentration_tail_bound(inp: &ConcentrationInput) -> Result<f64> {
    inp.validate()?;
    let n = inp.n as f64;
    let num = n * n * inp.u * inp.u * inp.theta * inp.theta;
    if num == 0.0 {
        return Ok(1.0);
    }
    let den = 2.0 * ((n - 1.0) * inp.c * inp.theta * inp.theta + inp.c0 * inp.m * inp.m);
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((-num / den).exp().clamp(0.0, 1.0))
}

/// Time-parametrised form with `n = ⌈t/δ⌉` and `θ = hδ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceInput {
    pub t_horizon: f64,
    pub h: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub c0: f64,
    pub m: f64,
}

impl ConfidenceInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_horizon > 0.0 && self.h > 0.0 && self.temperature > 0.0) {
            return Err(invalid("horizon, h and T must be positive"));
        }
        if !(self.c0 >= 0.0 && self.m >= 1.0) {
            return Err(invalid("need C0 >= 0 and M >= 1"));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        let t = self.t_horizon;
        t * self.h * self.h / (2.0 * (self.temperature + self.c0 * self.m * self.m / t))
    }

    /// `k exp(-t u² h² / (2(T + C₀M²/t)))` with `k = 2` when two-sided, clamped to `[0, 1]`.
    pub fn bound(&self, u: f64, two_sided: bool) -> Result<f64> {
        self.validate()?;
        let k = if two_sided { 2.0 } else { 1.0 };
        Ok((k * (-self.scale() * u * u).exp()).clamp(0.0, 1.0))
    }

    /// Smallest `u` whose bound is at most `alpha`.
    pub fn half_width(&self, alpha: f64, two_sided: bool) -> Result<f64> {
        self.validate()?;
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if alpha == 1.0 {
            return Ok(0.0);
        }
        let k = if two_sided { 2.0 } else { 1.0 };
        Ok(((k / alpha).ln().max(0.0) / self.scale()).sqrt())
    }

    /// Number of steps `⌈t/δ⌉`.
    pub fn steps(&self, delta: f64) -> usize {
        (self.t_horizon / delta).ceil() as usize
    }
}

/// `M W₁(ν₀, π∞) / (nθ)`.
pub fn bias_bound(m: f64, n: usize, theta: f64, w1: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(invalid(format!("theta must lie in (0, 1), got {theta}")));
    }
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    if !(w1 >= 0.0) {
        return Err(invalid("W1 must be nonnegative"));
    }
    Ok(m * w1 / (n as f64 * theta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTerms {
    pub long_time: f64,
    pub long_time_provenance: Provenance,
    /// `c₂ √δ` when `c₂` is supplied.
    pub discretisation: Option<f64>,
    pub total: f64,
}

pub fn bias_terms(
    m: f64,
    n: usize,
    theta: f64,
    w1: f64,
    w1_provenance: Provenance,
    c2: Option<f64>,
    delta: f64,
) -> Result<BiasTerms> {
    let long_time = bias_bound(m, n, theta, w1)?;
    let discretisation = c2.map(|c| c * delta.sqrt());
    Ok(BiasTerms {
        long_time,
        long_time_provenance: w1_provenance,
        discretisation,
        total: long_time + discretisation.unwrap_or(0.0),
    })
}

/// A 1-Lipschitz observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Observable {
    Coordinate {
        index: usize,
    },
    Norm,
    /// `<v, x>/|v|`.
    Projection {
        direction: Vec<f64>,
    },
}

impl Observable {
    pub fn check(&self, d: usize) -> Result<()> {
        match self {
            Observable::Coordinate { index } if *index >= d => Err(invalid(format!("coordinate {index} out of range"))),
            Observable::Projection { direction } => {
                ensure_dim(d, direction.len())?;
                if direction.iter().all(|v| *v == 0.0) {
                    return Err(invalid("projection direction must be nonzero"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Observable::Coordinate { index } => x[*index],
            Observable::Norm => crate::drift::norm(x),
            Observable::Projection { direction } => {
                let n = crate::drift::norm(direction);
                direction.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / n
            }
        }
    }
}

/// Values substituted for the defaults `θ = hδ`, `C = δT`, `M`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationOverrides {
    pub theta: Option<f64>,
    pub c: Option<f64>,
    pub m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationSetup {
    pub init: InitialLaw,
    pub observable: Observable,
    pub n: usize,
    pub u: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    #[serde(default)]
    pub overrides: ConcentrationOverrides,
}

/// Averages `(1/n) Σ_{k<n} φ(X_k)` over `runs` independent chains.
fn path_averages(init: &InitialLaw, config: &ChainConfig, phi: &Observable, tag: u64) -> Result<Vec<f64>> {
    let len = config.system.state_len();
    let init_stream = config.stream().derive(tag);
    let noise_cfg = ChainConfig {
        seed: config.stream().derive(tag ^ 0xffff).seed(),
        ..config.clone()
    };
    let sigma = config.sigma();
    let out: Vec<Option<f64>> = (0..config.replicas as u32)
        .into_par_iter()
        .map(|r| {
            let mut x = init.sample(&init_stream, r);
            let mut b = vec![0.0; len];
            let mut z = vec![0.0; len];
            let mut acc = 0.0;
            for k in 0..config.steps {
                acc += phi.eval(&x);
                if k + 1 < config.steps {
                    noise_cfg.noise(r, k as u32, &mut z);
                    advance(&config.system, &mut x, &mut b, &z, config.delta, sigma);
                    if diverged(&x) {
                        return None;
                    }
                }
            }
            Some(acc / config.steps as f64)
        })
        .collect();
    let bad = out.iter().filter(|v| v.is_none()).count();
    if bad > 0 {
        return Err(Error::NonFinite(format!("{bad} chains diverged")));
    }
    Ok(out.into_iter().flatten().collect())
}

/// Empirical tail of the centred path average against the concentration bound.
pub fn concentration_experiment(
    drift: &DriftSpec,
    cert: &AssumptionCertificate,
    kappa: &KappaFn,
    delta: f64,
    t: f64,
    setup: &ConcentrationSetup,
) -> Result<VerificationReport> {
    let consts = single_chain_constants(drift, cert, kappa, delta, t)?;
    if !consts.admissible {
        return Err(Error::Inadmissible(format!("gates fail: {:?}", consts.gates.failing())));
    }
    let d = drift.dim();
    ensure_dim(d, setup.init.dim())?;
    setup.observable.check(d)?;
    if setup.runs < 2 || setup.n == 0 {
        return Err(invalid("need runs >= 2 and n >= 1"));
    }
    let mut notes = Vec::new();
    let (init, c0) = match &setup.init {
        InitialLaw::Gaussian { std, .. } => (setup.init.clone(), std * std),
        InitialLaw::Dirac { point } => {
            notes.push(format!(
                "Dirac start replaced by a Gaussian with std {DIRAC_FALLBACK_STD}"
            ));
            (
                InitialLaw::Gaussian {
                    mean: point.clone(),
                    std: DIRAC_FALLBACK_STD,
                },
                DIRAC_FALLBACK_STD * DIRAC_FALLBACK_STD,
            )
        }
        InitialLaw::Samples { .. } => {
            return Err(Error::Unsupported(
                "empirical initial laws have no analytic transport constant".into(),
            ))
        }
    };
    let theta = setup.overrides.theta.unwrap_or(consts.h * delta);
    let c = setup.overrides.c.unwrap_or(delta * t);
    let m = setup.overrides.m.unwrap_or(consts.m);
    let system = System::Single(drift.clone());
    let main = ChainConfig::new(system.clone(), delta, t, setup.n, setup.seed, setup.runs)?;
    let pilot = ChainConfig::new(system, delta, t, setup.n, setup.seed, 10 * setup.runs)?;
    let averages = path_averages(&init, &main, &setup.observable, TAG_MAIN)?;
    let centre_samples = path_averages(&init, &pilot, &setup.observable, TAG_PILOT)?;
    let centre = centre_samples.iter().sum::<f64>() / centre_samples.len() as f64;
    let runs = averages.len() as f64;
    let mut rows = Vec::new();
    for &u in &setup.u {
        let bound = concentration_tail_bound(&ConcentrationInput {
            n: setup.n,
            u,
            theta,
            c,
            c0,
            m,
        })?;
        let hits = averages.iter().filter(|a| **a - centre >= u).count() as f64;
        let p = hits / runs;
        let se = (p * (1.0 - p) / runs).sqrt();
        rows.push(
            CheckRow::new(
                format!("u={u}"),
                vec![u],
                p,
                bound,
                3.0 * se,
                Provenance::MonteCarlo { n: averages.len(), se },
            )
            .with_extra("hits", hits),
        );
    }
    let mut report = VerificationReport::from_rows("concentration", rows)
        .with_param("n", setup.n as f64)
        .with_param("theta", theta)
        .with_param("C", c)
        .with_param("C0", c0)
        .with_param("M", m)
        .with_param("centre", centre)
        .with_note("C defaults to delta T although the one-step kernel has covariance 2 delta T I");
    for n in notes {
        report = report.with_note(n);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStepKl {
    /// `|x + δb(x) - y - δb(y)|² / (4δT)`.
    pub exact: f64,
    /// The same squared distance over `2δT`.
    pub half_variance_form: f64,
    /// `(1 + δL_b)² |x - y|² / (2δT)`.
    pub lipschitz_form: f64,
}

/// KL divergence between `δ_x Q` and `δ_y Q`.
pub fn one_step_kl(drift: &DriftSpec, l_b: f64, delta: f64, t: f64, x: &[f64], y: &[f64]) -> Result<OneStepKl> {
    if !(delta > 0.0 && t > 0.0) {
        return Err(invalid("delta and T must be positive"));
    }
    let bx = drift.eval(x)?;
    let by = drift.eval(y)?;
    let mut dm2 = 0.0;
    let mut dx2 = 0.0;
    for k in 0..x.len() {
        let dm = (x[k] - y[k]) + delta * (bx[k] - by[k]);
        dm2 += dm * dm;
        dx2 += (x[k] - y[k]) * (x[k] - y[k]);
    }
    Ok(OneStepKl {
        exact: dm2 / (4.0 * delta * t),
        half_variance_form: dm2 / (2.0 * delta * t),
        lipschitz_form: (1.0 + delta * l_b).powi(2) * dx2 / (2.0 * delta * t),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyInput {
    pub n: usize,
    pub delta: f64,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "L_b")]
    pub l_b: f64,
    /// Lipschitz constant of the Jacobian of `b`.
    pub hessian_lipschitz_c: f64,
    /// Horizon `c` with `nδ < c`.
    pub horizon: f64,
    pub d: usize,
}

impl EntropyInput {
    /// `1 / (16 c L_b² e^{2cL_b})`.
    pub fn delta_gate(&self) -> f64 {
        let (c, l) = (self.horizon, self.l_b);
        1.0 / (16.0 * c * l * l * (2.0 * c * l).exp())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(invalid(format!("n must be >= 2, got {}", self.n)));
        }
        if !(self.delta > 0.0 && self.t > 0.0 && self.horizon > 0.0) {
            return Err(invalid("delta, T and the horizon must be positive"));
        }
        if !(self.l_b >= 0.0 && self.hessian_lipschitz_c >= 0.0) {
            return Err(invalid("L_b and C must be nonnegative"));
        }
        if !(self.n as f64 * self.delta < self.horizon) {
            return Err(Error::Inadmissible(format!(
                "n delta = {} is not below the horizon {}",
                self.n as f64 * self.delta,
                self.horizon
            )));
        }
        let gate = self.delta_gate();
        if !(self.delta <= gate) {
            return Err(Error::Inadmissible(format!(
                "delta = {} exceeds 1/(16 c L_b^2 exp(2 c L_b)) = {gate}",
                self.delta
            )));
        }
        Ok(())
    }

    fn regularity_term(&self) -> f64 {
        let c = self.horizon;
        0.5 * c * c * self.hessian_lipschitz_c.powi(2) * self.d as f64 * (2.0 * c * self.l_b).exp()
    }

    /// Multiplier of `|x - y|²` for `KL(δ_y Qⁿ | δ_x Qⁿ)`.
    pub fn point_factor(&self) -> Result<f64> {
        self.validate()?;
        let nd = self.n as f64 * self.delta;
        Ok((self.horizon * self.l_b * self.l_b + 1.0 / nd) / (2.0 * self.t) + self.regularity_term())
    }

    /// Multiplier of `W₂²(ν, π∞)` for `KL(νQⁿ | π∞)`.
    pub fn measure_factor(&self) -> Result<f64> {
        self.validate()?;
        let nd = self.n as f64 * self.delta;
        Ok((nd * self.l_b * self.l_b + 1.0 / nd) / (2.0 * self.t) + self.regularity_term())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyBound {
    pub point_factor: f64,
    pub measure_factor: f64,
    /// `point_factor · |x - y|²`.
    pub point_bound: f64,
}

pub fn entropy_bound_n_step(inp: &EntropyInput, x: &[f64], y: &[f64]) -> Result<EntropyBound> {
    ensure_dim(inp.d, x.len())?;
    ensure_dim(inp.d, y.len())?;
    let point_factor = inp.point_factor()?;
    let dx2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(EntropyBound {
        point_factor,
        measure_factor: inp.measure_factor()?,
        point_bound: point_factor * dx2,
    })
}

/// Exact KL between the `n`-step kernels of `b = -c₀x` from `x` and `y`.
pub fn linear_n_step_kl(c0: f64, delta: f64, t: f64, n: usize, x: &[f64], y: &[f64]) -> f64 {
    let (a, var) = linear_kernel_moments(c0, delta, t, n);
    let dx2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
    a * a * dx2 / (2.0 * var)
}

/// Exact n-step KL for the linear drift against the entropy-cost bound.
pub fn entropy_check_linear(
    c0: f64,
    delta: f64,
    t: f64,
    n: usize,
    horizon: f64,
    x: &[f64],
    y: &[f64],
) -> Result<VerificationReport> {
    ensure_dim(x.len(), y.len())?;
    let inp = EntropyInput {
        n,
        delta,
        t,
        l_b: c0,
        hessian_lipschitz_c: 0.0,
        horizon,
        d: x.len(),
    };
    let bound = entropy_bound_n_step(&inp, x, y)?;
    let kl = linear_n_step_kl(c0, delta, t, n, x, y);
    let row = CheckRow::new(
        format!("n={n} delta={delta}"),
        x.iter().chain(y).copied().collect(),
        kl,
        bound.point_bound,
        0.0,
        Provenance::Formula,
    )
    .with_extra("measure_factor", bound.measure_factor);
    Ok(VerificationReport::from_rows("entropy-check", vec![row])
        .with_param("n", n as f64)
        .with_param("delta", delta)
        .with_param("T", t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_reference() {
        let inp = ConcentrationInput {
            n: 100,
            u: 0.1,
            theta: 0.05,
            c: 0.01,
            c0: 0.25,
            m: 2.0,
        };
        let b = concentration_tail_bound(&inp).unwrap();
        assert!((b - (-0.25f64 / 2.00495).exp()).abs() < 1e-15);
        assert_eq!(
            concentration_tail_bound(&ConcentrationInput { u: 0.0, ..inp }).unwrap(),
            1.0
        );
        assert!(concentration_tail_bound(&ConcentrationInput { theta: 1.0, ..inp }).is_err());
    }

    #[test]
    fn half_width_inverts() {
        let ci = ConfidenceInput {
            t_horizon: 10.0,
            h: 0.5,
            temperature: 1.0,
            c0: 0.0,
            m: 1.0,
        };
        let u = ci.half_width(0.05, true).unwrap();
        assert!((ci.bound(u, true).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(ci.half_width(1.0, true).unwrap(), 0.0);
        assert!(ci.half_width(0.0, true).is_err());
    }

    #[test]
    fn bias_reference() {
        assert!((bias_bound(2.0, 1000, 0.005, 1.0).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(bias_bound(2.0, 10, 0.5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn one_step_kl_reference() {
        let b = DriftSpec::linear(1, 1.0).unwrap();
        let kl = one_step_kl(&b, 1.0, 0.1, 1.0, &[0.0], &[1.0]).unwrap();
        assert!((kl.exact - 2.025).abs() < 1e-12);
        assert!((kl.half_variance_form - 4.05).abs() < 1e-12);
        assert!((kl.lipschitz_form - 6.05).abs() < 1e-12);
    }

    #[test]
    fn entropy_gate() {
        let inp = EntropyInput {
            n: 100,
            delta: 0.005,
            t: 1.0,
            l_b: 1.0,
            hessian_lipschitz_c: 0.0,
            horizon: 1.0,
            d: 1,
        };
        let b = entropy_bound_n_step(&inp, &[0.0], &[1.0]).unwrap();
        assert!((b.point_bound - 1.5).abs() < 1e-12);
        assert!(EntropyInput {
            delta: 0.009,
            n: 10,
            ..inp
        }
        .validate()
        .is_err());
        assert!(EntropyInput { n: 1, ..inp }.validate().is_err());
    }
}
