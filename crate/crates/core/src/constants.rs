//! Step-size and temperature ranges, rates and prefactors.
//!
//! Everything here is a closed-form function of a certificate, a κ and a
//! candidate pair `(δ, T)`. The only non-formula inputs are sup-norms of the
//! drift over balls, which carry their own provenance.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::drift::{AssumptionCertificate, DriftSpec, ParticleDriftSpec};
use crate::error::{invalid, Error, Result};
use crate::kappa::KappaFn;
use crate::report::Provenance;

/// `Γ((d+2)/2) / Γ(d/2)` evaluated through Γ, falling back to logs for large `d`.
pub fn gamma_ratio(d: usize) -> f64 {
    let x = 0.5 * d as f64;
    let (num, den) = (gamma(x + 1.0), gamma(x));
    if num.is_finite() && den.is_finite() && den > 0.0 {
        num / den
    } else {
        (ln_gamma(x + 1.0) - ln_gamma(x)).exp()
    }
}

/// `R² d Γ(d/2) / (8T(d+2)(d Γ(d/2) + 2T Γ((d+2)/2)))`.
pub fn delta4(r: f64, d: usize, t: f64) -> f64 {
    let df = d as f64;
    let g = gamma_ratio(d);
    r * r * df / (8.0 * t * (df + 2.0) * (df + 2.0 * t * g))
}

/// `R² Γ(d/2) / (T(d+2)Γ(d/2) + 16T Γ((d+2)/2))`.
pub fn delta4_tilde(r: f64, d: usize, t: f64) -> f64 {
    let df = d as f64;
    let g = gamma_ratio(d);
    r * r / (t * (df + 2.0) + 16.0 * t * g)
}

/// `min(c/2, a/4)`.
pub fn rate_h(c: f64, a: f64) -> f64 {
    (0.5 * c).min(0.25 * a)
}

/// `1 + 2‖κ‖∞/T`.
pub fn prefactor_m(kappa_sup: f64, t: f64) -> f64 {
    1.0 + 2.0 * kappa_sup / t
}

/// `C_LP M̄² / (1 - (1 - w̄)²)`.
pub fn poincare_constant(c_lp: f64, m_bar: f64, w_bar: f64) -> Result<f64> {
    if !(c_lp > 0.0 && c_lp.is_finite()) {
        return Err(invalid(format!("C_LP must be positive, got {c_lp}")));
    }
    if !(m_bar >= 1.0 && m_bar.is_finite()) {
        return Err(invalid(format!("M must be >= 1, got {m_bar}")));
    }
    if !(w_bar > 0.0 && w_bar <= 1.0) {
        return Err(invalid(format!("w must lie in (0, 1], got {w_bar}")));
    }
    Ok(c_lp * m_bar * m_bar / (1.0 - (1.0 - w_bar) * (1.0 - w_bar)))
}

/// `2TM² / (2h - h²δ)`; `None` when the denominator is not positive.
pub fn corollary_poincare(t: f64, m: f64, h: f64, delta: f64) -> Option<f64> {
    let den = 2.0 * h - h * h * delta;
    (den > 0.0).then(|| 2.0 * t * m * m / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gates {
    pub delta1: bool,
    pub delta2: bool,
    pub delta3: bool,
    pub delta4: bool,
    pub t1: bool,
    pub t2: bool,
    pub t3: bool,
}

impl Gates {
    pub fn all(&self) -> bool {
        self.delta1 && self.delta2 && self.delta3 && self.delta4 && self.t1 && self.t2 && self.t3
    }

    pub fn failing(&self) -> Vec<&'static str> {
        [
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
            ("delta4", self.delta4),
            ("T1", self.t1),
            ("T2", self.t2),
            ("T3", self.t3),
        ]
        .into_iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| n)
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub delta: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub d: usize,
    pub certificate: AssumptionCertificate,
    pub kappa: KappaFn,
    pub kappa_sup: f64,
    pub grad_kappa_sup: f64,
    pub sup_b_ball_r: f64,
    pub sup_b_ball_r_provenance: Provenance,
    pub b_at_origin: f64,
    /// Undefined when `δ L_b >= 1`.
    pub r_bar: Option<f64>,
    pub sup_b_ball_r_bar: Option<f64>,
    pub sup_b_ball_r_bar_provenance: Option<Provenance>,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub delta4: f64,
    pub delta0: f64,
    pub t1: f64,
    pub t2: Option<f64>,
    pub t3: f64,
    pub t0: Option<f64>,
    pub h: f64,
    pub m: f64,
    /// `2TM²/(2h - h²δ)`.
    pub poincare: Option<f64>,
    pub gates: Gates,
    pub admissible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particle: Option<ParticleConstants>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleConstants {
    pub n: usize,
    #[serde(rename = "L_F")]
    pub l_f: f64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    #[serde(rename = "C_G")]
    pub c_g: f64,
    #[serde(rename = "M_G")]
    pub m_g: f64,
    pub p: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub delta4: f64,
    pub delta0: f64,
    pub t1: f64,
    pub t2: Option<f64>,
    pub t3: f64,
    pub t0: Option<f64>,
    /// Undefined when `δ(L_F + M_G) >= 1`.
    pub r_tilde: Option<f64>,
    pub sup_f_ball_r: f64,
    pub sup_f_ball_r_tilde: Option<f64>,
    /// `(δL_G² + 2C_G + 2δL_F C_G)(T̃₀ + 2‖κ‖∞)`.
    pub h_tilde_displayed: Option<f64>,
    /// `(δL_G² + 2C_G + 2δL_F C_G)(1 + 2‖κ‖∞/T)`.
    pub h_tilde_ratio: f64,
    pub net_rate_displayed: Option<f64>,
    pub net_rate_ratio: f64,
    /// `min(c/2, L_F/2) >= 5 C_G`.
    pub sufficient_condition: bool,
    pub gates: Gates,
    pub admissible: bool,
}

fn check_pair(delta: f64, t: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid(format!("delta must be positive, got {delta}")));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid(format!("T must be positive, got {t}")));
    }
    Ok(())
}

/// All single-chain constants at `(δ, T)`.
pub fn single_chain_constants(
    drift: &DriftSpec,
    cert: &AssumptionCertificate,
    kappa: &KappaFn,
    delta: f64,
    t: f64,
) -> Result<ConstantsReport> {
    check_pair(delta, t)?;
    cert.validate()?;
    let d = drift.dim();
    if kappa.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: kappa.dim(),
        });
    }
    let kp = kappa.params();
    let mut notes = Vec::new();
    if (kp.r, kp.c, kp.k) != (cert.r, cert.c, cert.k) {
        notes.push("kappa was built from different (R, c, K) than the certificate".to_string());
    }
    if !cert.is_rigorous() {
        notes.push("certificate is numeric and not rigorous".to_string());
    }
    let lb = cert.lb;
    let kappa_sup = kappa.sup_norm();
    let grad_sup = kappa.grad_sup_norm();
    let (sup_r, prov_r) = drift.sup_on_ball(cert.r);
    let b0 = drift.norm_at_origin();

    let delta1 = 1.0 / lb;
    let delta2 = cert.c / (lb * lb);
    let delta3 = cert.k / (lb * lb);
    let d4 = delta4(cert.r, d, t);
    let delta0 = delta1.min(delta2).min(delta3).min(d4);

    let t1 = 2.0 * grad_sup * sup_r / kp.a;
    let t3 = 2.0 * kappa_sup;
    let (r_bar, sup_rbar, t2) = if delta * lb < 1.0 {
        let r_bar = (kappa.r_star() + delta * b0) / (1.0 - delta * lb);
        let (s, p) = drift.sup_on_ball(r_bar);
        (Some(r_bar), Some((s, p)), Some(2.0 * grad_sup * s / kp.l))
    } else {
        notes.push(format!(
            "R-bar undefined since delta * L_b = {} >= 1; T2 and T0 withheld",
            delta * lb
        ));
        (None, None, None)
    };
    let t0 = t2.map(|t2| t1.max(t2).max(t3));

    let h = rate_h(cert.c, kp.a);
    let m = prefactor_m(kappa_sup, t);
    let gates = Gates {
        delta1: delta <= delta1,
        delta2: delta <= delta2,
        delta3: delta <= delta3,
        delta4: delta <= d4,
        t1: t >= t1,
        t2: t2.is_some_and(|t2| t >= t2),
        t3: t >= t3,
    };
    Ok(ConstantsReport {
        delta,
        t,
        d,
        certificate: cert.clone(),
        kappa: *kappa,
        kappa_sup,
        grad_kappa_sup: grad_sup,
        sup_b_ball_r: sup_r,
        sup_b_ball_r_provenance: prov_r,
        b_at_origin: b0,
        r_bar,
        sup_b_ball_r_bar: sup_rbar.as_ref().map(|s| s.0),
        sup_b_ball_r_bar_provenance: sup_rbar.map(|s| s.1),
        delta1,
        delta2,
        delta3,
        delta4: d4,
        delta0,
        t1,
        t2,
        t3,
        t0,
        h,
        m,
        poincare: corollary_poincare(t, m, h, delta),
        admissible: gates.all(),
        gates,
        particle: None,
        notes,
    })
}

/// Single-chain constants of the confinement plus the particle-system block.
pub fn particle_constants(pspec: &ParticleDriftSpec, kappa: &KappaFn, delta: f64, t: f64) -> Result<ConstantsReport> {
    let mut report = single_chain_constants(&pspec.confinement, &pspec.confinement_cert, kappa, delta, t)?;
    let cert = &pspec.confinement_cert;
    let g = pspec.constants;
    let kp = kappa.params();
    let d = pspec.dim();
    let l_f = cert.lb;
    let kappa_sup = kappa.sup_norm();
    let grad_sup = kappa.grad_sup_norm();
    let f0 = pspec.confinement.norm_at_origin();

    let delta1 = 1.0 / (l_f + g.m_g);
    let delta2 = cert.c / (l_f * l_f);
    let delta3 = cert.k / (l_f * l_f);
    let d4 = delta4_tilde(cert.r, d, t);
    let delta0 = delta1.min(delta2).min(delta3).min(d4);

    let (sup_f_r, _) = pspec.confinement.sup_on_ball(cert.r);
    let t1 = 2.0 * (sup_f_r + g.m_g + g.m_g * cert.r.powf(g.p)) * grad_sup / kp.a;
    let t3 = 2.0 * kappa_sup;
    let shrink = 1.0 - delta * l_f - delta * g.m_g;
    let (r_tilde, sup_f_rt, t2) = if shrink > 0.0 {
        let rt = ((kappa.r_star() + delta * f0 + delta * g.m_g) / shrink).max(1.0);
        let (s, _) = pspec.confinement.sup_on_ball(rt);
        let t2 = 2.0 * (s + g.m_g + g.m_g * rt.powf(g.p)) * grad_sup / kp.l;
        (Some(rt), Some(s), Some(t2))
    } else {
        report.notes.push(format!(
            "R-tilde undefined since delta (L_F + M_G) = {} >= 1",
            delta * (l_f + g.m_g)
        ));
        (None, None, None)
    };
    let t0 = t2.map(|t2| t1.max(t2).max(t3));

    let coupling = delta * g.l_g * g.l_g + 2.0 * g.c_g + 2.0 * delta * l_f * g.c_g;
    let h_ratio = coupling * (1.0 + 2.0 * kappa_sup / t);
    let h_disp = t0.map(|t0| coupling * (t0 + 2.0 * kappa_sup));
    let h = report.h;
    let gates = Gates {
        delta1: delta <= delta1,
        delta2: delta <= delta2,
        delta3: delta <= delta3,
        delta4: delta <= d4,
        t1: t >= t1,
        t2: t2.is_some_and(|t2| t >= t2),
        t3: t >= t3,
    };
    report.particle = Some(ParticleConstants {
        n: pspec.n,
        l_f,
        l_g: g.l_g,
        c_g: g.c_g,
        m_g: g.m_g,
        p: g.p,
        delta1,
        delta2,
        delta3,
        delta4: d4,
        delta0,
        t1,
        t2,
        t3,
        t0,
        r_tilde,
        sup_f_ball_r: sup_f_r,
        sup_f_ball_r_tilde: sup_f_rt,
        h_tilde_displayed: h_disp,
        h_tilde_ratio: h_ratio,
        net_rate_displayed: h_disp.map(|x| h - x),
        net_rate_ratio: h - h_ratio,
        sufficient_condition: (0.5 * cert.c).min(0.5 * l_f) >= 5.0 * g.c_g,
        admissible: gates.all(),
        gates,
    });
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "strategy")]
pub enum PairStrategy {
    ValidateOnly { delta: f64, t: f64 },
    Alternate { max_iter: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStep {
    pub delta: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum PairOutcome {
    Admissible {
        report: Box<ConstantsReport>,
    },
    Inadmissible {
        failing: Vec<String>,
        report: Box<ConstantsReport>,
    },
    Converged {
        delta: f64,
        #[serde(rename = "T")]
        t: f64,
        iterations: usize,
        tight: Vec<String>,
        transcript: Vec<IterationStep>,
        report: Box<ConstantsReport>,
    },
    NotConverged {
        iterations: usize,
        transcript: Vec<IterationStep>,
    },
}

impl PairOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, PairOutcome::Admissible { .. } | PairOutcome::Converged { .. })
    }
}

/// Validates a user pair, or searches for one by alternating
/// `δ <- δ₀(T)` and `T <- T₀(δ)` from `T = T₃`.
pub fn solve_admissible_pair(
    drift: &DriftSpec,
    cert: &AssumptionCertificate,
    kappa: &KappaFn,
    strategy: PairStrategy,
) -> Result<PairOutcome> {
    match strategy {
        PairStrategy::ValidateOnly { delta, t } => {
            let report = single_chain_constants(drift, cert, kappa, delta, t)?;
            Ok(if report.admissible {
                PairOutcome::Admissible {
                    report: Box::new(report),
                }
            } else {
                PairOutcome::Inadmissible {
                    failing: report.gates.failing().into_iter().map(String::from).collect(),
                    report: Box::new(report),
                }
            })
        }
        PairStrategy::Alternate { max_iter } => alternate(drift, cert, kappa, max_iter),
    }
}

fn alternate(drift: &DriftSpec, cert: &AssumptionCertificate, kappa: &KappaFn, max_iter: usize) -> Result<PairOutcome> {
    let d = drift.dim();
    let lb = cert.lb;
    // Strictly inside δ₁ so that R-bar exists.
    let cap = (1.0 / lb).min(cert.c / (lb * lb)).min(cert.k / (lb * lb)) * (1.0 - 1e-9);
    let delta_of = |t: f64| cap.min(delta4(cert.r, d, t));
    let t_of = |delta: f64| -> Result<f64> {
        let rep = single_chain_constants(drift, cert, kappa, delta, 1.0)?;
        rep.t0.ok_or(Error::UndefinedRadius(delta * lb))
    };
    let mut t = 2.0 * kappa.sup_norm();
    let mut delta = 1.0 / lb;
    let mut transcript = vec![IterationStep { delta, t }];
    for it in 1..=max_iter {
        let nd = delta_of(t);
        let nt = t_of(nd)?;
        transcript.push(IterationStep { delta: nd, t: nt });
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
        let done = rel(nd, delta) < 1e-10 && rel(nt, t) < 1e-10;
        delta = nd;
        t = nt;
        if done {
            // Nudge T up, then clamp δ; T₀ is non-decreasing in δ so both gates hold.
            let t_fin = t_of(delta)? * (1.0 + 1e-9);
            let d_fin = delta.min(delta_of(t_fin));
            let report = single_chain_constants(drift, cert, kappa, d_fin, t_fin)?;
            if !report.admissible {
                return Err(Error::Inadmissible(format!(
                    "fixed point failed gates {:?}",
                    report.gates.failing()
                )));
            }
            let tight = tight_gates(&report);
            return Ok(PairOutcome::Converged {
                delta: d_fin,
                t: t_fin,
                iterations: it,
                tight,
                transcript,
                report: Box::new(report),
            });
        }
    }
    Ok(PairOutcome::NotConverged {
        iterations: max_iter,
        transcript,
    })
}

/// Same alternation for the particle thresholds `δ̃₀(T)` and `T̃₀(δ)`.
pub fn solve_particle_pair(pspec: &ParticleDriftSpec, kappa: &KappaFn, max_iter: usize) -> Result<PairOutcome> {
    let cert = &pspec.confinement_cert;
    let g = pspec.constants;
    let d = pspec.dim();
    let lf = cert.lb;
    let cap = (1.0 / (lf + g.m_g)).min(cert.c / (lf * lf)).min(cert.k / (lf * lf)) * (1.0 - 1e-9);
    let delta_of = |t: f64| cap.min(delta4_tilde(cert.r, d, t));
    let t_of = |delta: f64| -> Result<f64> {
        let rep = particle_constants(pspec, kappa, delta, 1.0)?;
        rep.particle
            .and_then(|p| p.t0)
            .ok_or(Error::UndefinedRadius(delta * (lf + g.m_g)))
    };
    let mut t = 2.0 * kappa.sup_norm();
    let mut delta = cap;
    let mut transcript = vec![IterationStep { delta, t }];
    for it in 1..=max_iter {
        let nd = delta_of(t);
        let nt = t_of(nd)?;
        transcript.push(IterationStep { delta: nd, t: nt });
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
        let done = rel(nd, delta) < 1e-10 && rel(nt, t) < 1e-10;
        delta = nd;
        t = nt;
        if done {
            let t_fin = t_of(delta)? * (1.0 + 1e-9);
            let d_fin = delta.min(delta_of(t_fin));
            let report = particle_constants(pspec, kappa, d_fin, t_fin)?;
            let pc = report.particle.as_ref().expect("particle block");
            if !pc.admissible {
                return Err(Error::Inadmissible(format!(
                    "fixed point failed particle gates {:?}",
                    pc.gates.failing()
                )));
            }
            return Ok(PairOutcome::Converged {
                delta: d_fin,
                t: t_fin,
                iterations: it,
                tight: Vec::new(),
                transcript,
                report: Box::new(report),
            });
        }
    }
    Ok(PairOutcome::NotConverged {
        iterations: max_iter,
        transcript,
    })
}

fn tight_gates(r: &ConstantsReport) -> Vec<String> {
    let near = |a: f64, b: f64| (a - b).abs() <= 1e-6 * b.abs();
    let mut out = Vec::new();
    for (name, v, lim) in [
        ("delta1", r.delta, r.delta1),
        ("delta2", r.delta, r.delta2),
        ("delta3", r.delta, r.delta3),
        ("delta4", r.delta, r.delta4),
        ("T1", r.t, r.t1),
        ("T3", r.t, r.t3),
    ] {
        if near(v, lim) {
            out.push(name.to_string());
        }
    }
    if let Some(t2) = r.t2 {
        if near(r.t, t2) {
            out.push("T2".to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::CertifyMode;
    use crate::kappa::KappaParams;

    fn linear() -> (DriftSpec, AssumptionCertificate, KappaFn) {
        let b = DriftSpec::linear(2, 1.0).unwrap();
        let c = b.certify(&CertifyMode::Analytic).unwrap();
        let k = KappaParams::from_certificate(&c, 2).build().unwrap();
        (b, c, k)
    }

    #[test]
    fn gamma_at_half_integers() {
        let pi = std::f64::consts::PI;
        let exact = [
            (0.5, pi.sqrt()),
            (1.0, 1.0),
            (1.5, 0.5 * pi.sqrt()),
            (2.5, 0.75 * pi.sqrt()),
            (5.0, 24.0),
        ];
        for (x, g) in exact {
            assert!((gamma(x) - g).abs() <= 1e-13 * g, "{x}");
        }
        for d in 1..12 {
            assert!((gamma_ratio(d) - 0.5 * d as f64).abs() < 1e-12 * d as f64);
        }
        assert!((gamma_ratio(1000) - 500.0).abs() < 1e-8);
    }

    #[test]
    fn delta4_reference() {
        assert!((delta4(1.0, 2, 1.0) - 0.015625).abs() < 1e-15);
        assert!((delta4_tilde(1.0, 1, 2.0) - 1.0 / 22.0).abs() < 1e-15);
    }

    #[test]
    fn reference_thresholds() {
        let (b, c, k) = linear();
        let r = single_chain_constants(&b, &c, &k, 0.01, 1.0).unwrap();
        assert!((r.t1 - 4.0).abs() < 1e-12);
        assert_eq!(r.h, 0.5);
        assert!((r.delta4 - 0.015625).abs() < 1e-15);
        assert!((r.delta0 - 0.015625).abs() < 1e-15);
        assert_eq!(r.t3, 2.0 * k.alpha1());
    }

    #[test]
    fn undefined_radius_withholds_only_dependent_constants() {
        let (b, c, k) = linear();
        let r = single_chain_constants(&b, &c, &k, 2.0, 1e5).unwrap();
        assert!(r.r_bar.is_none() && r.t2.is_none() && r.t0.is_none());
        assert!(!r.admissible);
        assert!(!r.gates.delta1);
    }

    #[test]
    fn poincare_examples() {
        assert_eq!(poincare_constant(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((poincare_constant(2.0, 2.0, 0.5).unwrap() - 32.0 / 3.0).abs() < 1e-15);
        assert!(poincare_constant(1.0, 1.0, 0.0).is_err());
        assert!(poincare_constant(1.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn alternate_converges_to_admissible_pair() {
        let (b, c, k) = linear();
        let out = solve_admissible_pair(&b, &c, &k, PairStrategy::Alternate { max_iter: 100 }).unwrap();
        match out {
            PairOutcome::Converged { report, tight, .. } => {
                assert!(report.admissible);
                assert!(!tight.is_empty());
            }
            other => panic!("{other:?}"),
        }
    }
}
