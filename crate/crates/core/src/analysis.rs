//! Numerical checks of the contraction and Poincaré inequalities.
//!
//! Under the synchronous coupling the difference `X₁ - Y₁` is deterministic,
//! so `E ρ(X₁, Y₁) / ρ(x, y) - 1` splits into a closed-form drift part and a
//! Gaussian expectation of κ increments. Reports store that ratio minus one
//! because for certified step sizes `1 - hδ` rounds to one in double precision.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{corollary_poincare, particle_constants, single_chain_constants, ConstantsReport};
use crate::drift::{norm, AssumptionCertificate, DriftKind, DriftSpec, ParticleDriftSpec};
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::kappa::{mean_se, Estimator, KappaFn};
use crate::quadrature::normal_nodes;
use crate::report::{CheckRow, Provenance, VerificationReport};
use crate::rng::{normal_quantile, NoiseStream};
use crate::sim::{coupled_ensemble, ensemble, ChainConfig, CoupledOptions, InitialLaw, Record, System};
use crate::transport::{coupling_upper_bound, optimal_transport, CostSpec, DEFAULT_CAP};

const MC_CHUNK: usize = 4096;
const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Van der Corput radical inverse of `i` in base `b`.
pub fn radical_inverse(mut i: u64, b: u32) -> f64 {
    let b = u64::from(b);
    let inv = 1.0 / b as f64;
    let mut out = 0.0;
    let mut f = inv;
    while i > 0 {
        out += (i % b) as f64 * f;
        i /= b;
        f *= inv;
    }
    out
}

/// Halton point `i` (1-based internally) in `[0,1)^dim`.
pub fn halton(i: u64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| radical_inverse(i + 1, PRIMES[k % PRIMES.len()]))
        .collect()
}

/// Regime of a pair relative to the radii of the weight function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    BothInside,
    InsideOutside,
    BothOutsideRStar,
    Mixed,
    NearDiagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPoint {
    pub regime: Regime,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Low-discrepancy pairs; every regime gets at least `n / 5` points.
pub fn regime_pairs(r: f64, r_star: f64, d: usize, n: usize) -> Vec<PairPoint> {
    let regimes = [
        Regime::BothInside,
        Regime::InsideOutside,
        Regime::BothOutsideRStar,
        Regime::Mixed,
        Regime::NearDiagonal,
    ];
    let dirs = |h: &[f64]| -> Vec<f64> {
        // Gaussian direction from d uniforms.
        let mut v: Vec<f64> = h.iter().map(|u| normal_quantile(u.clamp(1e-12, 1.0 - 1e-12))).collect();
        let nv = norm(&v);
        if nv == 0.0 {
            v[0] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|c| *c /= nv);
        v
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let regime = regimes[i % regimes.len()];
        let h = halton((i / regimes.len()) as u64 + 7 * (i % regimes.len()) as u64, 2 * d + 2);
        let ux = dirs(&h[..d]);
        let uy = dirs(&h[d..2 * d]);
        let (s, t) = (h[2 * d], h[2 * d + 1]);
        let (rx, ry) = match regime {
            Regime::BothInside => (r * s, r * t),
            Regime::InsideOutside => (r * s, r + (2.0 * r_star - r) * t),
            Regime::BothOutsideRStar => (r_star * (1.0 + s), r_star * (1.0 + t)),
            Regime::Mixed => (2.0 * r_star * s, 2.0 * r_star * t),
            Regime::NearDiagonal => (2.0 * r_star * s, 0.0),
        };
        let x: Vec<f64> = ux.iter().map(|u| u * rx).collect();
        let y: Vec<f64> = if regime == Regime::NearDiagonal {
            let step = r * 1e-2 * (0.1 + t);
            x.iter().zip(&uy).map(|(a, u)| a + step * u).collect()
        } else {
            uy.iter().map(|u| u * ry).collect()
        };
        out.push(PairPoint { regime, x, y });
    }
    out
}

/// One κ increment inside a weighted sum: `coef · E[κ(x + m + σ Z_slot) - κ(x)]`.
struct Term<'a> {
    x: &'a [f64],
    shift: Vec<f64>,
    slot: u32,
    coef: f64,
}

/// Expectation of a weighted sum of κ increments, with shared noise per slot.
fn weighted_increment(
    kappa: &KappaFn,
    terms: &[Term<'_>],
    sigma: f64,
    estimator: Estimator,
    tag: u64,
) -> Result<(f64, f64, Provenance)> {
    match estimator {
        Estimator::Quadrature => {
            let mut value = 0.0;
            let mut err = 0.0;
            let mut any_quad = false;
            for term in terms.iter().filter(|t| t.coef != 0.0) {
                let inc = kappa.gaussian_increment(term.x, &term.shift, sigma, Estimator::Quadrature, 0)?;
                value += term.coef * inc.value;
                err += term.coef.abs() * inc.err;
                any_quad |= !matches!(inc.provenance, Provenance::Formula);
            }
            let prov = if any_quad {
                Provenance::Quadrature { abs_err: err }
            } else {
                Provenance::Formula
            };
            Ok((value, err, prov))
        }
        Estimator::MonteCarlo { samples, seed } => {
            let d = kappa.dim();
            let stream = NoiseStream::new(seed).derive(tag);
            let grads: Vec<Vec<f64>> = terms
                .iter()
                .map(|t| {
                    let mut g = vec![0.0; d];
                    kappa.grad_unchecked(t.x, &mut g);
                    g
                })
                .collect();
            let slots = terms.iter().map(|t| t.slot).max().map_or(0, |m| m as usize + 1);
            let chunks = samples.div_ceil(MC_CHUNK);
            let partial: Vec<(f64, f64)> = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut z = vec![0.0; slots * d];
                    let mut v = vec![0.0; d];
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for i in c * MC_CHUNK..((c + 1) * MC_CHUNK).min(samples) {
                        for s in 0..slots {
                            stream.normals(0, i as u32, s as u32, &mut z[s * d..(s + 1) * d]);
                        }
                        let mut q = 0.0;
                        for (term, g) in terms.iter().zip(&grads) {
                            if term.coef == 0.0 {
                                continue;
                            }
                            let zs = &z[term.slot as usize * d..(term.slot as usize + 1) * d];
                            let mut cv = 0.0;
                            for k in 0..d {
                                v[k] = term.shift[k] + sigma * zs[k];
                                cv += g[k] * sigma * zs[k];
                            }
                            q += term.coef * (kappa.diff_offset(term.x, &v) - cv);
                        }
                        s1 += q;
                        s2 += q * q;
                    }
                    (s1, s2)
                })
                .collect();
            let (s1, s2) = partial.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
            let (mean, se) = mean_se(s1, s2, samples);
            Ok((mean, se, Provenance::MonteCarlo { n: samples, se }))
        }
    }
}

fn estimator_margin(estimator: Estimator, err: f64) -> f64 {
    match estimator {
        Estimator::Quadrature => err,
        Estimator::MonteCarlo { .. } => 3.0 * err,
    }
}

/// Per-particle pieces of `E ρ̃(X₁, Y₁) - ρ̃(x, y)` for one state pair.
struct OneStep<'a> {
    /// Closed-form part `Σ e_i S_i`.
    drift_part: f64,
    rho0: f64,
    terms: Vec<Term<'a>>,
}

/// Builds the one-step decomposition for flat states of `blocks` particles.
fn one_step_terms<'a>(
    kappa: &KappaFn,
    t: f64,
    delta: f64,
    x: &'a [f64],
    y: &'a [f64],
    bx: &[f64],
    by: &[f64],
) -> OneStep<'a> {
    let d = kappa.dim();
    let mut drift_part = 0.0;
    let mut rho0 = 0.0;
    let mut terms = Vec::new();
    let blocks = x.len() / d;
    // Collect raw pieces first; coefficients need ρ̃(x, y).
    let mut pieces = Vec::with_capacity(blocks);
    for i in 0..blocks {
        let s = i * d..(i + 1) * d;
        let (xi, yi) = (&x[s.clone()], &y[s.clone()]);
        let (dx2, e) = {
            let mut dx2 = 0.0;
            let mut cross = 0.0;
            let mut db2 = 0.0;
            for k in s.clone() {
                let dk = x[k] - y[k];
                let bk = bx[k] - by[k];
                dx2 += dk * dk;
                cross += dk * bk;
                db2 += bk * bk;
            }
            (dx2, 2.0 * delta * cross + delta * delta * db2)
        };
        let weight = t + kappa.profile(norm(xi)) + kappa.profile(norm(yi));
        rho0 += dx2 * weight;
        drift_part += e * weight;
        pieces.push((xi, yi, dx2 + e, bx[s.clone()].to_vec(), by[s].to_vec()));
    }
    for (i, (xi, yi, d1, bxi, byi)) in pieces.into_iter().enumerate() {
        for (p, b) in [(xi, bxi), (yi, byi)] {
            terms.push(Term {
                x: p,
                shift: b.iter().map(|v| delta * v).collect(),
                slot: i as u32,
                coef: d1,
            });
        }
    }
    OneStep {
        drift_part,
        rho0,
        terms,
    }
}

fn require_admissible(report: &ConstantsReport) -> Result<()> {
    if report.admissible {
        Ok(())
    } else {
        Err(Error::Inadmissible(format!(
            "(delta, T) = ({:e}, {}) fails gates {:?}",
            report.delta,
            report.t,
            report.gates.failing()
        )))
    }
}

/// `E ρ(X₁, Y₁) <= (1 - hδ) ρ(x, y)` on every pair.
pub fn one_step_rho_contraction(
    drift: &DriftSpec,
    cert: &AssumptionCertificate,
    kappa: &KappaFn,
    delta: f64,
    t: f64,
    pairs: &[PairPoint],
    estimator: Estimator,
) -> Result<VerificationReport> {
    let consts = single_chain_constants(drift, cert, kappa, delta, t)?;
    require_admissible(&consts)?;
    let d = drift.dim();
    for p in pairs {
        ensure_dim(d, p.x.len())?;
        ensure_dim(d, p.y.len())?;
    }
    let sigma = (2.0 * delta * t).sqrt();
    let h = consts.h;
    let rows: Vec<Result<CheckRow>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let bx = drift.eval(&p.x)?;
            let by = drift.eval(&p.y)?;
            let step = one_step_terms(kappa, t, delta, &p.x, &p.y, &bx, &by);
            let label = format!("pair[{i}] {:?}", p.regime);
            let location = p.x.iter().chain(&p.y).copied().collect();
            if step.rho0 == 0.0 {
                return Ok(CheckRow::new(label, location, 0.0, 0.0, 0.0, Provenance::Formula));
            }
            let (inc, err, prov) = weighted_increment(kappa, &step.terms, sigma, estimator, i as u64)?;
            let est = (step.drift_part + inc) / step.rho0;
            let margin = estimator_margin(estimator, err) / step.rho0;
            Ok(CheckRow::new(label, location, est, -h * delta, margin, prov)
                .with_extra("rho", step.rho0)
                .with_extra("drift_part", step.drift_part / step.rho0)
                .with_extra("kappa_part", inc / step.rho0))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport::from_rows("rho-onestep", rows)
        .with_param("delta", delta)
        .with_param("T", t)
        .with_param("h", h)
        .with_note("estimate is E rho(X1,Y1)/rho(x,y) - 1; bound is -h delta"))
}

/// `E ρ̃(X₁, Y₁) <= (1 - (h - h̃)δ) ρ̃(x, y)` with the ratio-form `h̃`.
pub fn particle_contraction(
    pspec: &ParticleDriftSpec,
    kappa: &KappaFn,
    delta: f64,
    t: f64,
    pairs: &[(Vec<f64>, Vec<f64>)],
    estimator: Estimator,
) -> Result<VerificationReport> {
    let consts = particle_constants(pspec, kappa, delta, t)?;
    let pc = consts.particle.as_ref().expect("particle block");
    if pc.r_tilde.is_none() {
        return Err(Error::UndefinedRadius(delta * (pc.l_f + pc.m_g)));
    }
    if !pc.admissible {
        return Err(Error::Inadmissible(format!(
            "particle gates fail: {:?}",
            pc.gates.failing()
        )));
    }
    let len = pspec.state_len();
    for (x, y) in pairs {
        ensure_dim(len, x.len())?;
        ensure_dim(len, y.len())?;
    }
    let net = pc.net_rate_ratio;
    let predicted = net > 0.0;
    let sigma = (2.0 * delta * t).sqrt();
    let rows: Vec<Result<CheckRow>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let bx = pspec.full_drift(x)?;
            let by = pspec.full_drift(y)?;
            let step = one_step_terms(kappa, t, delta, x, y, &bx, &by);
            let label = format!("state-pair[{i}]");
            let location = x.iter().chain(y).copied().collect();
            if step.rho0 == 0.0 {
                return Ok(CheckRow::new(label, location, 0.0, 0.0, 0.0, Provenance::Formula));
            }
            let (inc, err, prov) = weighted_increment(kappa, &step.terms, sigma, estimator, i as u64)?;
            let est = (step.drift_part + inc) / step.rho0;
            let margin = estimator_margin(estimator, err) / step.rho0;
            let bound = if predicted { -net * delta } else { f64::MAX };
            Ok(CheckRow::new(label, location, est, bound, margin, prov).with_extra("rho_tilde", step.rho0))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mut report = VerificationReport::from_rows("particles", rows)
        .with_param("delta", delta)
        .with_param("T", t)
        .with_param("h", consts.h)
        .with_param("h_tilde_ratio", pc.h_tilde_ratio)
        .with_param("net_rate", net)
        .with_note("estimate is E rho~(X1,Y1)/rho~(x,y) - 1; bound is -(h - h~) delta");
    if let Some(hd) = pc.h_tilde_displayed {
        report = report.with_param("h_tilde_displayed", hd);
    }
    if !predicted {
        report = report.with_note("no contraction predicted: net rate h - h~ <= 0; decay is only monitored");
    }
    Ok(report)
}

/// `k* = ceil(log M / -log(1 - hδ))`: first step where the weak envelope drops below `W₂(μ, ν)`.
pub fn informative_step(m: f64, h: f64, delta: f64) -> f64 {
    (m.ln() / -(-h * delta).ln_1p()).ceil()
}

#[derive(Debug, Clone)]
pub struct EnvelopeSetup {
    pub mu0: InitialLaw,
    pub nu0: InitialLaw,
    pub k_max: usize,
    pub replicas: usize,
    pub seed: u64,
    /// Steps at which distances are evaluated; defaults to about 20 evenly spaced steps.
    pub record: Option<Vec<usize>>,
}

/// `W₂(μQᵏ, νQᵏ) <= M (1 - hδ)ᵏ W₂(μ, ν)` through the synchronous coupling
/// started from an optimal coupling of the initial samples.
pub fn w2_contraction_envelope(
    drift: &DriftSpec,
    cert: &AssumptionCertificate,
    kappa: &KappaFn,
    delta: f64,
    t: f64,
    setup: &EnvelopeSetup,
) -> Result<VerificationReport> {
    let consts = single_chain_constants(drift, cert, kappa, delta, t)?;
    require_admissible(&consts)?;
    let d = drift.dim();
    ensure_dim(d, setup.mu0.dim())?;
    ensure_dim(d, setup.nu0.dim())?;
    let n = setup.replicas;
    if n == 0 {
        return Err(invalid("replicas must be >= 1"));
    }
    let base = NoiseStream::new(setup.seed);
    let (sx, sy) = (base.derive(0xa0), base.derive(0xb0));
    let xs: Vec<Vec<f64>> = (0..n as u32).map(|r| setup.mu0.sample(&sx, r)).collect();
    let ys: Vec<Vec<f64>> = (0..n as u32).map(|r| setup.nu0.sample(&sy, r)).collect();
    let mu = crate::sim::EmpiricalMeasure::from_points(d, &xs)?;
    let nu = crate::sim::EmpiricalMeasure::from_points(d, &ys)?;
    let w2 = CostSpec::Euclidean { p: 2.0 };
    let plan = optimal_transport(&mu, &nu, &w2, DEFAULT_CAP)?;
    let w0 = plan.value;
    let paired: Vec<Vec<f64>> = plan.assignment.iter().map(|&j| ys[j].clone()).collect();

    let steps = setup.record.clone().unwrap_or_else(|| {
        let m = (setup.k_max / 20).max(1);
        (0..=setup.k_max).filter(|k| k % m == 0 || *k == setup.k_max).collect()
    });
    let config = ChainConfig::new(System::Single(drift.clone()), delta, t, setup.k_max, setup.seed, n)?;
    let x_init = InitialLaw::Samples {
        measure: crate::sim::EmpiricalMeasure::from_points(d, &xs)?,
    };
    let y_init = InitialLaw::Samples {
        measure: crate::sim::EmpiricalMeasure::from_points(d, &paired)?,
    };
    let trajs = coupled_ensemble(
        &x_init,
        &y_init,
        &config,
        &CoupledOptions {
            record: Some(Record::At(steps.clone())),
            kappa: None,
        },
    )?;
    let diverged = trajs.iter().filter(|t| t.diverged()).count();
    if diverged > 0 {
        return Err(Error::NonFinite(format!("{diverged} replicas diverged")));
    }
    let m = consts.m;
    let h = consts.h;
    let rows: Vec<Result<CheckRow>> = steps
        .par_iter()
        .map(|&k| {
            let upper = coupling_upper_bound(&trajs, &w2, k)?;
            // Standard error of the mean squared distance, mapped through the square root.
            let sq: Vec<f64> = trajs
                .iter()
                .map(|tr| {
                    let j = tr.index_of(k).expect("recorded");
                    tr.distance[j] * tr.distance[j]
                })
                .collect();
            let (s1, s2) = sq.iter().fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
            let (_, se_sq) = mean_se(s1, s2, sq.len());
            let se = if upper > 0.0 { se_sq / (2.0 * upper) } else { 0.0 };
            let se = if se.is_finite() { se } else { 0.0 };
            let xk: Vec<Vec<f64>> = trajs.iter().map(|tr| tr.x[tr.index_of(k).unwrap()].clone()).collect();
            let yk: Vec<Vec<f64>> = trajs.iter().map(|tr| tr.y[tr.index_of(k).unwrap()].clone()).collect();
            let exact = optimal_transport(
                &crate::sim::EmpiricalMeasure::from_points(d, &xk)?,
                &crate::sim::EmpiricalMeasure::from_points(d, &yk)?,
                &w2,
                DEFAULT_CAP,
            )?
            .value;
            let decay = (k as f64 * (-h * delta).ln_1p()).exp();
            let bound = m * decay * w0;
            Ok(CheckRow::new(
                format!("k={k}"),
                vec![k as f64],
                upper,
                bound,
                3.0 * se,
                Provenance::MonteCarlo { n, se },
            )
            .with_extra("exact_ot", exact)
            .with_extra("sqrt_m_envelope", m.sqrt() * decay.sqrt() * w0))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport::from_rows("w2-envelope", rows)
        .with_param("delta", delta)
        .with_param("T", t)
        .with_param("M", m)
        .with_param("h", h)
        .with_param("w2_initial", w0)
        .with_param("k_star", informative_step(m, h, delta))
        .with_note(
            "pass is decided on the synchronous-coupling bound; exact OT of the marginals is reported as exact_ot",
        )
        .with_note("sqrt_m_envelope is sqrt(M)(1-h delta)^(k/2) W2, the bound obtained from the squared sandwich"))
}

/// Smooth test functions for the Poincaré and gradient checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    Constant {
        value: f64,
    },
    Coordinate {
        index: usize,
    },
    /// `|x|²`.
    SquaredNorm,
    /// `cos(<θ, x>)`.
    Cosine {
        theta: Vec<f64>,
    },
}

impl TestFunction {
    pub fn name(&self) -> String {
        match self {
            TestFunction::Constant { value } => format!("const({value})"),
            TestFunction::Coordinate { index } => format!("x{index}"),
            TestFunction::SquaredNorm => "|x|^2".into(),
            TestFunction::Cosine { theta } => format!("cos(theta.x) theta={theta:?}"),
        }
    }

    pub fn check(&self, d: usize) -> Result<()> {
        match self {
            TestFunction::Coordinate { index } if *index >= d => {
                Err(invalid(format!("coordinate {index} out of range for d = {d}")))
            }
            TestFunction::Cosine { theta } => ensure_dim(d, theta.len()),
            _ => Ok(()),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Constant { value } => *value,
            TestFunction::Coordinate { index } => x[*index],
            TestFunction::SquaredNorm => x.iter().map(|v| v * v).sum(),
            TestFunction::Cosine { theta } => theta.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().cos(),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            TestFunction::Constant { .. } => vec![0.0; x.len()],
            TestFunction::Coordinate { index } => {
                let mut g = vec![0.0; x.len()];
                g[*index] = 1.0;
                g
            }
            TestFunction::SquaredNorm => x.iter().map(|v| 2.0 * v).collect(),
            TestFunction::Cosine { theta } => {
                let s = -theta.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().sin();
                theta.iter().map(|a| s * a).collect()
            }
        }
    }

    /// Coordinates, the squared norm and a cosine.
    pub fn default_family(d: usize) -> Vec<TestFunction> {
        let mut out: Vec<TestFunction> = (0..d).map(|index| TestFunction::Coordinate { index }).collect();
        out.push(TestFunction::SquaredNorm);
        out.push(TestFunction::Cosine {
            theta: (0..d).map(|k| 1.0 / (k + 1) as f64).collect(),
        });
        out
    }
}

/// `Qᵏ(x, ·)` for `b = -c₀ x` is Gaussian with mean `aₖ x` and variance `sₖ²` per coordinate.
pub fn linear_kernel_moments(c0: f64, delta: f64, t: f64, k: usize) -> (f64, f64) {
    let q = 1.0 - c0 * delta;
    let a = q.powi(k as i32);
    let mut var = 0.0;
    let mut w = 1.0;
    for _ in 0..k {
        var += w;
        w *= q * q;
    }
    (a, 2.0 * delta * t * var)
}

/// Product Gauss-Hermite expectation of `g(a x + s Z)`.
fn gh_expectation<F: Fn(&[f64]) -> f64>(x: &[f64], a: f64, s: f64, nodes: &[(f64, f64)], g: F) -> f64 {
    let d = x.len();
    let m = nodes.len();
    let total = m.pow(d as u32);
    let mut point = vec![0.0; d];
    let mut acc = 0.0;
    for idx in 0..total {
        let mut rest = idx;
        let mut w = 1.0;
        for k in 0..d {
            let (z, wk) = nodes[rest % m];
            rest /= m;
            point[k] = a * x[k] + s * z;
            w *= wk;
        }
        acc += w * g(&point);
    }
    acc
}

/// Checks `∇Qᵏf(x) = (1 - c₀δ)ᵏ Qᵏ∇f(x)` for the linear drift.
pub fn gradient_commutation_linear(
    drift: &DriftSpec,
    delta: f64,
    t: f64,
    k: usize,
    f: &TestFunction,
    x: &[f64],
) -> Result<VerificationReport> {
    let c0 = match drift.kind() {
        DriftKind::Linear { c0 } => *c0,
        _ => return Err(Error::Unsupported("gradient commutation needs a linear drift".into())),
    };
    let d = drift.dim();
    ensure_dim(d, x.len())?;
    f.check(d)?;
    if d > 3 {
        return Err(Error::Unsupported("product quadrature limited to d <= 3".into()));
    }
    let (a, var) = linear_kernel_moments(c0, delta, t, k);
    let s = var.sqrt();
    let nodes = normal_nodes(40);
    let qf = |p: &[f64]| gh_expectation(p, a, s, &nodes, |z| f.value(z));
    let h0 = 1e-4 * (1.0 + norm(x));
    // Central differences cannot resolve below eps |Qf| / h.
    let floor = 64.0 * f64::EPSILON * (1.0 + qf(x).abs()) / h0;
    let mut rows = Vec::new();
    for j in 0..d {
        let fd = |h: f64| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            (qf(&xp) - qf(&xm)) / (2.0 * h)
        };
        let richardson = (4.0 * fd(0.5 * h0) - fd(h0)) / 3.0;
        let predicted = a * gh_expectation(x, a, s, &nodes, |z| f.gradient(z)[j]);
        let err = (richardson - predicted).abs();
        let tol = 1e-4 * predicted.abs() + floor;
        rows.push(
            CheckRow::new(
                format!("d/dx{j}"),
                x.to_vec(),
                err,
                tol,
                0.0,
                Provenance::Quadrature { abs_err: 0.0 },
            )
            .with_extra("finite_difference", richardson)
            .with_extra("predicted", predicted),
        );
    }
    Ok(VerificationReport::from_rows("grad-commute", rows)
        .with_param("k", k as f64)
        .with_param("contraction", a)
        .with_note("estimate is |finite difference - (1 - c0 delta)^k Q^k grad f|; bound is 1e-4 relative plus the difference roundoff floor"))
}

/// Variance and gradient statistics of one test function over a cloud.
fn poincare_row(label: String, f: &TestFunction, points: &[&[f64]], constant: f64, location: Vec<f64>) -> CheckRow {
    let n = points.len();
    let vals: Vec<f64> = points.iter().map(|p| f.value(p)).collect();
    let grads: Vec<f64> = points
        .iter()
        .map(|p| f.gradient(p).iter().map(|g| g * g).sum())
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    let grad_term = grads.iter().sum::<f64>() / n as f64;
    // q_i = (f_i - mean)² - C |∇f_i|²; its standard error covers both sides.
    let (s1, s2) = vals
        .iter()
        .zip(&grads)
        .map(|(v, g)| (v - mean).powi(2) - constant * g)
        .fold((0.0, 0.0), |(a, b), q| (a + q, b + q * q));
    let (_, se) = mean_se(s1, s2, n);
    let se = if se.is_finite() { se } else { 0.0 };
    CheckRow::new(
        label,
        location,
        var,
        constant * grad_term,
        3.0 * se,
        Provenance::MonteCarlo { n, se },
    )
    .with_extra("gradient_term", grad_term)
    .with_extra("constant", constant)
}

/// `Var_{Qᵏ(x,·)} f <= C_P Qᵏ|∇f|²(x)` for each test function, plus the
/// one-step Gaussian case with constant `2δT`.
#[allow(clippy::too_many_arguments)]
pub fn poincare_check(
    drift: &DriftSpec,
    cert: &AssumptionCertificate,
    kappa: &KappaFn,
    delta: f64,
    t: f64,
    k: usize,
    x: &[f64],
    family: &[TestFunction],
    samples: usize,
    seed: u64,
) -> Result<VerificationReport> {
    let consts = single_chain_constants(drift, cert, kappa, delta, t)?;
    require_admissible(&consts)?;
    let d = drift.dim();
    ensure_dim(d, x.len())?;
    for f in family {
        f.check(d)?;
    }
    if k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    let cp = corollary_poincare(t, consts.m, consts.h, delta)
        .ok_or_else(|| Error::Inadmissible("2h - h^2 delta <= 0".into()))?;
    let config = ChainConfig::new(System::Single(drift.clone()), delta, t, k, seed, samples)?;
    let init = InitialLaw::Dirac { point: x.to_vec() };
    let ens = ensemble(&init, &config, &[1, k])?;
    if !ens.diverged.is_empty() {
        return Err(Error::NonFinite(format!("{} replicas diverged", ens.diverged.len())));
    }
    let cloud_at = |step: usize| {
        ens.measures
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, m)| m.clone())
            .expect("recorded step")
    };
    let one = cloud_at(1);
    let kth = cloud_at(k);
    let pts_k: Vec<&[f64]> = kth.points().collect();
    let pts_1: Vec<&[f64]> = one.points().collect();
    let base = 2.0 * delta * t;
    let mut rows = Vec::new();
    for f in family {
        rows.push(poincare_row(format!("k={k} {}", f.name()), f, &pts_k, cp, x.to_vec()));
        rows.push(poincare_row(
            format!("k=1 gaussian {}", f.name()),
            f,
            &pts_1,
            base,
            x.to_vec(),
        ));
    }
    Ok(VerificationReport::from_rows("poincare", rows)
        .with_param("k", k as f64)
        .with_param("C_P", cp)
        .with_param("one_step_constant", base))
}

/// Two-sided check that the k = 1 coordinate variance equals `2δT`.
pub fn gaussian_base_case(
    drift: &DriftSpec,
    delta: f64,
    t: f64,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<VerificationReport> {
    let d = drift.dim();
    ensure_dim(d, x.len())?;
    let config = ChainConfig::new(System::Single(drift.clone()), delta, t, 1, seed, samples)?;
    let ens = ensemble(&InitialLaw::Dirac { point: x.to_vec() }, &config, &[1])?;
    let cloud = &ens.measures[0].1;
    let pts: Vec<&[f64]> = cloud.points().collect();
    let base = 2.0 * delta * t;
    let mut rows = Vec::new();
    for j in 0..d {
        let f = TestFunction::Coordinate { index: j };
        let upper = poincare_row(format!("x{j} upper"), &f, &pts, base, x.to_vec());
        let lower = CheckRow::new(
            format!("x{j} lower"),
            x.to_vec(),
            upper.bound,
            upper.estimate,
            upper.margin,
            upper.provenance.clone(),
        );
        rows.push(upper);
        rows.push(lower);
    }
    Ok(VerificationReport::from_rows("poincare-base-case", rows).with_param("constant", base))
}

/// Stationary variance `2δT/(1 - (1 - c₀δ)²)` of the linear chain against `2TM²/(2h - h²δ)`.
pub fn stationary_variance_check(c0: f64, delta: f64, t: f64, consts: &ConstantsReport) -> Result<VerificationReport> {
    let q = 1.0 - c0 * delta;
    let den = 1.0 - q * q;
    if !(den > 0.0) {
        return Err(invalid("linear chain has no stationary law at this step size"));
    }
    let var = 2.0 * delta * t / den;
    let cp = consts
        .poincare
        .ok_or_else(|| Error::Inadmissible("2h - h^2 delta <= 0".into()))?;
    let row = CheckRow::new("stationary-variance", vec![], var, cp, 0.0, Provenance::Formula);
    Ok(VerificationReport::from_rows("poincare-stationary", vec![row]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_first_points() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert!((radical_inverse(1, 3) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn regimes_are_covered() {
        let pairs = regime_pairs(1.0, 405.2, 2, 60);
        let count = |r: Regime| pairs.iter().filter(|p| p.regime == r).count();
        assert_eq!(count(Regime::BothInside), 12);
        for p in &pairs {
            match p.regime {
                Regime::BothInside => assert!(norm(&p.x) <= 1.0 && norm(&p.y) <= 1.0),
                Regime::InsideOutside => assert!(norm(&p.x) <= 1.0 && norm(&p.y) >= 1.0),
                Regime::BothOutsideRStar => assert!(norm(&p.x) >= 405.2 && norm(&p.y) >= 405.2),
                _ => {}
            }
        }
    }

    #[test]
    fn linear_kernel() {
        let (a, v) = linear_kernel_moments(1.0, 0.1, 1.0, 2);
        assert!((a - 0.81).abs() < 1e-15);
        assert!((v - 0.2 * (1.0 + 0.81)).abs() < 1e-15);
        assert_eq!(linear_kernel_moments(1.0, 0.1, 1.0, 0), (1.0, 0.0));
    }

    #[test]
    fn commutation_on_quadratic() {
        let b = DriftSpec::linear(1, 1.0).unwrap();
        for k in [0, 1, 5] {
            let r = gradient_commutation_linear(&b, 0.1, 1.0, k, &TestFunction::SquaredNorm, &[0.7]).unwrap();
            assert!(r.pass, "{k}: {}", r.summary_line());
            let expected = 2.0 * 0.9f64.powi(2 * k as i32) * 0.7;
            assert!((r.rows[0].extra["predicted"] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn commutation_holds_for_the_default_family() {
        let b = DriftSpec::linear(2, 1.0).unwrap();
        for x in [[0.2, -0.4], [0.0, 0.0], [3.0, 1.5]] {
            for k in [1, 3, 10] {
                for f in TestFunction::default_family(2) {
                    let r = gradient_commutation_linear(&b, 0.01, 2.0, k, &f, &x).unwrap();
                    assert!(r.pass, "{} at {x:?}, k = {k}: {}", f.name(), r.summary_line());
                }
            }
        }
    }

    #[test]
    fn commutation_rejects_nonlinear() {
        let b = DriftSpec::perturbed_linear(1, 1.0, 2.0, 4.0).unwrap();
        assert!(gradient_commutation_linear(&b, 0.1, 1.0, 1, &TestFunction::SquaredNorm, &[0.0]).is_err());
    }

    #[test]
    fn informative_step_threshold() {
        let k = informative_step(2.0, 0.5, 0.1);
        assert!(2.0 * 0.95f64.powf(k) <= 1.0);
        assert!(2.0 * 0.95f64.powf(k - 1.0) > 1.0);
    }
}
