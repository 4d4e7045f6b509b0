//! Drift functions and certificates of their monotonicity constants.
//!
//! A single chain moves by `x + δ b(x) + √(2δT) Z`. The constants the rest of
//! the crate needs are the Lipschitz constant `L_b` and a triple `(R, c, K)`
//! with
//!
//! ```text
//! <x - y, b(x) - b(y)> <= -c |x - y|^2   if |x| >= R or |y| >= R
//! <x - y, b(x) - b(y)> <=  K |x - y|^2   otherwise
//! ```
//!
//! Particle systems add an interaction `G = (G_1, ..., G_N)` with constants
//! `L_G`, `C_G`, `M_G` and growth exponent `p`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::kappa::KappaParams;
use crate::report::{CheckRow, Provenance, VerificationReport};
use crate::rng::NoiseStream;

/// In-place vector field `x -> out`.
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Pairwise payoff `(x, y) -> out`, all in `R^d`.
pub type PairField = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Radius multipliers tried when a numeric certificate picks `R`.
pub const RADIUS_MULTIPLIERS: [f64; 8] = [0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0, 4.0];

#[derive(Clone)]
pub enum DriftKind {
    Linear {
        c0: f64,
    },
    PerturbedLinear {
        c0: f64,
        beta: f64,
        r0: f64,
    },
    Custom {
        name: String,
        field: VectorField,
        smooth: bool,
    },
}

impl fmt::Debug for DriftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftKind::Linear { c0 } => write!(f, "Linear {{ c0: {c0} }}"),
            DriftKind::PerturbedLinear { c0, beta, r0 } => {
                write!(f, "PerturbedLinear {{ c0: {c0}, beta: {beta}, r0: {r0} }}")
            }
            DriftKind::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

/// Smooth bump: 1 on `[0, 1/2]`, 0 on `[1, inf)`.
pub fn bump(r: f64) -> f64 {
    if r <= 0.5 {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        let u = 2.0 * r - 1.0;
        let q = 1.0 - u * u;
        (1.0 - 1.0 / q).exp()
    }
}

pub fn bump_deriv(r: f64) -> f64 {
    if r <= 0.5 || r >= 1.0 {
        0.0
    } else {
        let u = 2.0 * r - 1.0;
        let q = 1.0 - u * u;
        -4.0 * u * (1.0 - 1.0 / q).exp() / (q * q)
    }
}

#[derive(Clone, Debug)]
pub struct DriftSpec {
    kind: DriftKind,
    d: usize,
}

impl DriftSpec {
    pub fn linear(d: usize, c0: f64) -> Result<Self> {
        check_dim(d)?;
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(invalid(format!("linear rate c0 must be positive, got {c0}")));
        }
        Ok(DriftSpec {
            kind: DriftKind::Linear { c0 },
            d,
        })
    }

    pub fn perturbed_linear(d: usize, c0: f64, beta: f64, r0: f64) -> Result<Self> {
        check_dim(d)?;
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(invalid(format!("linear rate c0 must be positive, got {c0}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(invalid(format!("amplitude beta must be >= 0, got {beta}")));
        }
        if !(r0 > 0.0 && r0.is_finite()) {
            return Err(invalid(format!("support radius r0 must be positive, got {r0}")));
        }
        Ok(DriftSpec {
            kind: DriftKind::PerturbedLinear { c0, beta, r0 },
            d,
        })
    }

    /// User drift; `smooth` declares it continuously differentiable.
    pub fn custom(d: usize, name: impl Into<String>, field: VectorField, smooth: bool) -> Result<Self> {
        check_dim(d)?;
        Ok(DriftSpec {
            kind: DriftKind::Custom {
                name: name.into(),
                field,
                smooth,
            },
            d,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> &DriftKind {
        &self.kind
    }

    pub fn name(&self) -> String {
        match &self.kind {
            DriftKind::Linear { .. } => "linear".into(),
            DriftKind::PerturbedLinear { .. } => "perturbed-linear".into(),
            DriftKind::Custom { name, .. } => name.clone(),
        }
    }

    pub fn is_smooth(&self) -> bool {
        match &self.kind {
            DriftKind::Custom { smooth, .. } => *smooth,
            _ => true,
        }
    }

    /// Radial profile `phi` with `b(x) = phi(|x|) x`, for built-in kinds.
    pub fn radial_profile(&self, r: f64) -> Option<f64> {
        match self.kind {
            DriftKind::Linear { c0 } => Some(-c0),
            DriftKind::PerturbedLinear { c0, beta, r0 } => Some(-c0 + beta * bump(r / r0)),
            DriftKind::Custom { .. } => None,
        }
    }

    fn radial_profile_deriv(&self, r: f64) -> Option<f64> {
        match self.kind {
            DriftKind::Linear { .. } => Some(0.0),
            DriftKind::PerturbedLinear { beta, r0, .. } => Some(beta * bump_deriv(r / r0) / r0),
            DriftKind::Custom { .. } => None,
        }
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            DriftKind::Custom { field, .. } => field(x, out),
            _ => {
                let r = norm(x);
                let phi = self.radial_profile(r).expect("built-in");
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = phi * xi;
                }
            }
        }
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        ensure_dim(self.d, x.len())?;
        ensure_dim(self.d, out.len())?;
        self.eval_unchecked(x, out);
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.d];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    pub fn norm_at_origin(&self) -> f64 {
        let zero = vec![0.0; self.d];
        let mut out = vec![0.0; self.d];
        self.eval_unchecked(&zero, &mut out);
        norm(&out)
    }

    /// `sup_{|y| <= radius} |b(y)|`.
    ///
    /// Linear drifts use the closed form. The perturbed kind is radial, so a
    /// fine radial grid plus a Lipschitz correction for the gaps is an upper
    /// bound. Custom drifts are sampled and inflated by 5%.
    pub fn sup_on_ball(&self, radius: f64) -> (f64, Provenance) {
        let radius = radius.max(0.0);
        match self.kind {
            DriftKind::Linear { c0 } => (c0 * radius, Provenance::Formula),
            DriftKind::PerturbedLinear { .. } => {
                let n = 20_000usize;
                let h = radius / n as f64;
                let mut best: f64 = 0.0;
                let mut slope: f64 = 0.0;
                for i in 0..=n {
                    let s = i as f64 * h;
                    let phi = self.radial_profile(s).unwrap_or(0.0);
                    let dphi = self.radial_profile_deriv(s).unwrap_or(0.0);
                    best = best.max((phi * s).abs());
                    slope = slope.max((phi + s * dphi).abs());
                }
                (
                    best + 0.5 * slope * h,
                    Provenance::numeric("radial grid with Lipschitz gap bound"),
                )
            }
            DriftKind::Custom { .. } => {
                let stream = NoiseStream::new(0x5b_a11);
                let n = 20_000u32;
                let d = self.d;
                let mut x = vec![0.0; d];
                let mut out = vec![0.0; d];
                let mut best: f64 = self.norm_at_origin();
                for i in 0..n {
                    for (k, xk) in x.iter_mut().enumerate() {
                        *xk = stream.normal(0, i, 0, k as u32);
                    }
                    let nx = norm(&x).max(f64::MIN_POSITIVE);
                    let scale = radius * stream.uniform(0, i, 1, 0).powf(1.0 / d as f64) / nx;
                    // Every eighth point is put on the sphere itself.
                    let scale = if i % 8 == 0 { radius / nx } else { scale };
                    for xk in x.iter_mut() {
                        *xk *= scale;
                    }
                    self.eval_unchecked(&x, &mut out);
                    best = best.max(norm(&out));
                }
                (1.05 * best, Provenance::numeric("sampled ball sup x1.05"))
            }
        }
    }

    /// Sup over `r` of the eigenvalues `phi` and `phi + r phi'` of the
    /// Jacobian of a radial drift: `(max signed, max absolute)`.
    fn radial_jacobian_bounds(&self, rmax: f64) -> Option<(f64, f64)> {
        if matches!(self.kind, DriftKind::Custom { .. }) {
            return None;
        }
        let n = 50_000usize;
        let mut upper = f64::NEG_INFINITY;
        let mut abs: f64 = 0.0;
        for i in 0..=n {
            let r = rmax * i as f64 / n as f64;
            let phi = self.radial_profile(r)?;
            let rad = phi + r * self.radial_profile_deriv(r)?;
            upper = upper.max(phi).max(rad);
            abs = abs.max(phi.abs()).max(rad.abs());
        }
        Some((upper, abs))
    }

    pub fn certify(&self, mode: &CertifyMode) -> Result<AssumptionCertificate> {
        match mode {
            CertifyMode::Analytic => self.certify_analytic(),
            CertifyMode::Numeric(opts) => self.certify_numeric(opts),
        }
    }

    fn certify_analytic(&self) -> Result<AssumptionCertificate> {
        match self.kind {
            DriftKind::Linear { c0 } => Ok(AssumptionCertificate {
                lb: c0,
                r: 1.0,
                c: c0,
                k: c0,
                method: CertMethod::Analytic,
                safety_factor: 1.0,
                hessian_lipschitz_c: Some(0.0),
            }),
            _ => Err(Error::Unsupported(format!(
                "analytic certification of {} drift; use numeric mode",
                self.name()
            ))),
        }
    }

    fn default_radii(&self) -> Vec<f64> {
        let base = match self.kind {
            DriftKind::PerturbedLinear { r0, .. } => r0,
            _ => 1.0,
        };
        RADIUS_MULTIPLIERS.iter().map(|m| m * base).collect()
    }

    fn certify_numeric(&self, opts: &NumericOptions) -> Result<AssumptionCertificate> {
        let sf = opts.safety_factor;
        if !(sf > 1.0 && sf.is_finite()) {
            return Err(invalid(format!("numeric safety factor must exceed 1, got {sf}")));
        }
        let radii = opts.radii.clone().unwrap_or_else(|| self.default_radii());
        if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(invalid("candidate radii must be positive"));
        }
        let rmax = radii.iter().copied().fold(0.0, f64::max);
        let half_width = opts.box_half_width.unwrap_or(3.0 * rmax);
        if half_width < 3.0 * rmax {
            return Err(invalid(format!(
                "certification box half-width {half_width} is below 3 R = {}",
                3.0 * rmax
            )));
        }
        let samples = self.pair_samples(&radii, half_width, opts.pairs, opts.seed);
        if samples.is_empty() {
            return Err(Error::NotCertifiable("no usable pairs".into()));
        }

        let mut k_obs = samples.iter().map(|s| s.ratio).fold(f64::NEG_INFINITY, f64::max);
        let mut lip_obs = samples.iter().map(|s| s.lip).fold(0.0, f64::max);
        if let Some((upper, abs)) = self.radial_jacobian_bounds(half_width) {
            k_obs = k_obs.max(upper);
            lip_obs = lip_obs.max(abs);
        }
        if !(k_obs.is_finite() && lip_obs.is_finite()) {
            return Err(Error::NonFinite("drift produced non-finite ratios".into()));
        }

        let mut best: Option<(f64, AssumptionCertificate)> = None;
        for &r in &radii {
            let worst_outside = samples
                .iter()
                .filter(|s| s.outer >= r)
                .map(|s| s.ratio)
                .fold(f64::NEG_INFINITY, f64::max);
            if !(worst_outside < 0.0) {
                continue;
            }
            let c = -worst_outside / sf;
            let k = if k_obs > 0.0 { sf * k_obs } else { c };
            let cert = AssumptionCertificate {
                lb: sf * lip_obs.max(f64::MIN_POSITIVE),
                r,
                c,
                k,
                method: CertMethod::Numeric,
                safety_factor: sf,
                hessian_lipschitz_c: None,
            };
            let alpha1 = KappaParams::defaults(r, c, k, self.d).alpha1();
            if best.as_ref().is_none_or(|(a, _)| alpha1 < *a) {
                best = Some((alpha1, cert));
            }
        }
        best.map(|(_, c)| c).ok_or_else(|| {
            Error::NotCertifiable(format!(
                "no positive contraction rate outside any of the radii {radii:?}"
            ))
        })
    }

    fn pair_samples(&self, radii: &[f64], half_width: f64, pairs: usize, seed: u64) -> Vec<PairSample> {
        let d = self.d;
        let stream = NoiseStream::new(seed).derive(0xce47);
        let rmin = radii.iter().copied().fold(f64::INFINITY, f64::min);
        let random: Vec<PairSample> = (0..pairs)
            .into_par_iter()
            .filter_map(|i| {
                let (x, y) = sample_pair(&stream, i as u32, d, radii, rmin, half_width);
                self.pair_sample(&x, &y)
            })
            .collect();

        // Deterministic grid: x on shells just outside each radius, y along
        // the coordinate axes out to the box edge.
        let mut dirs = Vec::new();
        for k in 0..d {
            for sign in [1.0, -1.0] {
                let mut e = vec![0.0; d];
                e[k] = sign;
                dirs.push(e);
            }
        }
        let mut grid = Vec::new();
        for &r in radii {
            for f in [1.0, 1.02, 1.1, 1.25, 1.5, 2.0] {
                for u in &dirs {
                    for v in &dirs {
                        for j in 0..64 {
                            let t = half_width * j as f64 / 63.0;
                            grid.push((
                                u.iter().map(|ui| ui * r * f).collect::<Vec<_>>(),
                                v.iter().map(|vi| vi * t).collect::<Vec<_>>(),
                            ));
                        }
                    }
                }
            }
        }
        let grid: Vec<PairSample> = grid.par_iter().filter_map(|(x, y)| self.pair_sample(x, y)).collect();
        random.into_iter().chain(grid).collect()
    }

    fn pair_sample(&self, x: &[f64], y: &[f64]) -> Option<PairSample> {
        let d = self.d;
        let mut bx = vec![0.0; d];
        let mut by = vec![0.0; d];
        self.eval_unchecked(x, &mut bx);
        self.eval_unchecked(y, &mut by);
        let mut dx2 = 0.0;
        let mut ip = 0.0;
        let mut db2 = 0.0;
        for k in 0..d {
            let dx = x[k] - y[k];
            let db = bx[k] - by[k];
            dx2 += dx * dx;
            ip += dx * db;
            db2 += db * db;
        }
        if dx2 < 1e-24 {
            return None;
        }
        Some(PairSample {
            outer: norm(x).max(norm(y)),
            ratio: ip / dx2,
            lip: (db2 / dx2).sqrt(),
        })
    }

    /// Fresh pair test of a certificate; one row per inequality.
    pub fn check_certificate(&self, cert: &AssumptionCertificate, pairs: usize, seed: u64) -> VerificationReport {
        let half_width = 3.0 * cert.r;
        let radii = [cert.r];
        let samples = self.pair_samples(&radii, half_width, pairs, seed ^ 0x7e57);
        let prov = Provenance::numeric(format!("{} sampled pairs", samples.len()));
        let upper = samples.iter().map(|s| s.ratio).fold(f64::NEG_INFINITY, f64::max);
        let outside = samples
            .iter()
            .filter(|s| s.outer >= cert.r)
            .map(|s| s.ratio)
            .fold(f64::NEG_INFINITY, f64::max);
        let lip = samples.iter().map(|s| s.lip).fold(0.0, f64::max);
        let tol = 1e-12;
        let rows = vec![
            CheckRow::new("upper-K", vec![], upper, cert.k, tol * cert.k, prov.clone()),
            CheckRow::new("outside-c", vec![], outside, -cert.c, tol * cert.c, prov.clone()),
            CheckRow::new("lipschitz", vec![], lip, cert.lb, tol * cert.lb, prov),
        ];
        VerificationReport::from_rows("drift-certificate", rows)
    }

    pub fn to_document(&self, cert: Option<&AssumptionCertificate>) -> Result<DriftDocument> {
        let mut params = BTreeMap::new();
        let kind = match self.kind {
            DriftKind::Linear { c0 } => {
                params.insert("c0".to_string(), c0);
                "linear"
            }
            DriftKind::PerturbedLinear { c0, beta, r0 } => {
                params.insert("c0".to_string(), c0);
                params.insert("beta".to_string(), beta);
                params.insert("r0".to_string(), r0);
                "perturbed-linear"
            }
            DriftKind::Custom { .. } => return Err(Error::Unsupported("custom drifts do not serialise".into())),
        };
        Ok(DriftDocument {
            kind: kind.to_string(),
            d: self.d,
            params,
            certificate: cert.cloned(),
        })
    }

    pub fn from_document(doc: &DriftDocument) -> Result<(Self, Option<AssumptionCertificate>)> {
        let get = |key: &str| {
            doc.params
                .get(key)
                .copied()
                .ok_or_else(|| Error::Malformed(format!("missing parameter {key:?}")))
        };
        let allowed: &[&str] = match doc.kind.as_str() {
            "linear" => &["c0"],
            "perturbed-linear" => &["c0", "beta", "r0"],
            other => return Err(Error::Malformed(format!("unknown drift kind {other:?}"))),
        };
        if let Some(extra) = doc.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Malformed(format!("unknown parameter {extra:?}")));
        }
        let spec = match doc.kind.as_str() {
            "linear" => DriftSpec::linear(doc.d, get("c0")?)?,
            _ => DriftSpec::perturbed_linear(doc.d, get("c0")?, get("beta")?, get("r0")?)?,
        };
        if let Some(cert) = &doc.certificate {
            cert.validate()?;
        }
        Ok((spec, doc.certificate.clone()))
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        return Err(invalid("dimension must be positive"));
    }
    Ok(())
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

struct PairSample {
    outer: f64,
    ratio: f64,
    lip: f64,
}

fn sample_pair(
    stream: &NoiseStream,
    i: u32,
    d: usize,
    radii: &[f64],
    rmin: f64,
    half_width: f64,
) -> (Vec<f64>, Vec<f64>) {
    let u = |slot: u32, k: usize| stream.uniform(1, i, slot, k as u32);
    // Log-uniform scale so both the small ball and the box edge get pairs.
    let lo = (0.25 * rmin).ln();
    let hi = half_width.ln();
    let scale = (lo + (hi - lo) * u(2, 0)).exp();
    let cube = |slot: u32, s: f64| -> Vec<f64> { (0..d).map(|k| s * (2.0 * u(slot, k) - 1.0)).collect() };
    match i % 4 {
        0 => (cube(0, scale), cube(1, scale)),
        1 => {
            let x = cube(0, scale);
            let y = x
                .iter()
                .enumerate()
                .map(|(k, xk)| xk + 1e-3 * scale * (2.0 * u(1, k) - 1.0))
                .collect();
            (x, y)
        }
        2 => {
            let r = radii[(u(2, 1) * radii.len() as f64) as usize % radii.len()];
            let mut x: Vec<f64> = (0..d).map(|k| stream.normal(2, i, 0, k as u32)).collect();
            let nx = norm(&x).max(f64::MIN_POSITIVE);
            let target = r * (1.0 + 0.05 * u(2, 2));
            for xk in x.iter_mut() {
                *xk *= target / nx;
            }
            (x, cube(1, scale))
        }
        _ => (cube(0, half_width), cube(1, half_width)),
    }
}

#[derive(Debug, Clone)]
pub enum CertifyMode {
    Analytic,
    Numeric(NumericOptions),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericOptions {
    pub pairs: usize,
    pub safety_factor: f64,
    pub seed: u64,
    /// Half-width `B` of the sampling box; defaults to three times the largest radius.
    #[serde(default)]
    pub box_half_width: Option<f64>,
    /// Candidate radii `R`; the one with the smallest default `alpha_1` wins.
    #[serde(default)]
    pub radii: Option<Vec<f64>>,
}

impl Default for NumericOptions {
    fn default() -> Self {
        NumericOptions {
            pairs: 100_000,
            safety_factor: 1.1,
            seed: 0,
            box_half_width: None,
            radii: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertMethod {
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionCertificate {
    #[serde(rename = "L_b")]
    pub lb: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub c: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub method: CertMethod,
    pub safety_factor: f64,
    #[serde(default)]
    pub hessian_lipschitz_c: Option<f64>,
}

impl AssumptionCertificate {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("L_b", self.lb), ("R", self.r), ("c", self.c), ("K", self.k)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!(
                    "certificate constant {name} must be positive, got {v}"
                )));
            }
        }
        match self.method {
            CertMethod::Numeric if !(self.safety_factor > 1.0) => {
                return Err(invalid("numeric certificates need a safety factor above 1"))
            }
            CertMethod::Analytic if self.safety_factor < 1.0 => return Err(invalid("safety factor must be >= 1")),
            _ => {}
        }
        if let Some(h) = self.hessian_lipschitz_c {
            if !(h >= 0.0 && h.is_finite()) {
                return Err(invalid("Hessian-Lipschitz constant must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn is_rigorous(&self) -> bool {
        self.method == CertMethod::Analytic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftDocument {
    pub kind: String,
    pub d: usize,
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub certificate: Option<AssumptionCertificate>,
}

// ---------------------------------------------------------------------------
// Particle systems

#[derive(Clone)]
pub enum Payoff {
    Zero,
    /// `l(x, y)_k = eps sin(x_k - y_k)`.
    ScaledSin {
        eps: f64,
    },
    /// `l(x, y)_k = eps cos(x_k - y_k)`.
    ScaledCos {
        eps: f64,
    },
    Custom {
        name: String,
        field: PairField,
        sup: Option<f64>,
        lip: Option<f64>,
    },
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::Zero => write!(f, "Zero"),
            Payoff::ScaledSin { eps } => write!(f, "ScaledSin {{ eps: {eps} }}"),
            Payoff::ScaledCos { eps } => write!(f, "ScaledCos {{ eps: {eps} }}"),
            Payoff::Custom { name, sup, lip, .. } => {
                write!(f, "Custom({name}, sup={sup:?}, lip={lip:?})")
            }
        }
    }
}

impl Payoff {
    pub fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self {
            Payoff::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Payoff::ScaledSin { eps } => {
                for k in 0..out.len() {
                    out[k] = eps * (x[k] - y[k]).sin();
                }
            }
            Payoff::ScaledCos { eps } => {
                for k in 0..out.len() {
                    out[k] = eps * (x[k] - y[k]).cos();
                }
            }
            Payoff::Custom { field, .. } => field(x, y, out),
        }
    }

    /// `(sup |l|, Lip(l))` in each argument.
    pub fn bounds(&self, d: usize) -> Result<(f64, f64)> {
        match self {
            Payoff::Zero => Ok((0.0, 0.0)),
            Payoff::ScaledSin { eps } | Payoff::ScaledCos { eps } => Ok((eps.abs() * (d as f64).sqrt(), eps.abs())),
            Payoff::Custom { sup, lip, name, .. } => match (sup, lip) {
                (Some(s), Some(l)) if *s >= 0.0 && *l >= 0.0 => Ok((*s, *l)),
                _ => Err(invalid(format!(
                    "payoff {name} needs nonnegative sup and Lipschitz bounds"
                ))),
            },
        }
    }

    /// `(x, y) -> l(y, x)`.
    pub fn transposed(&self) -> Payoff {
        match self {
            Payoff::Zero => Payoff::Zero,
            Payoff::ScaledSin { eps } => Payoff::ScaledSin { eps: -eps },
            Payoff::ScaledCos { eps } => Payoff::ScaledCos { eps: *eps },
            Payoff::Custom { name, field, sup, lip } => {
                let f = field.clone();
                Payoff::Custom {
                    name: format!("{name}^T"),
                    field: Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| f(y, x, out)),
                    sup: *sup,
                    lip: *lip,
                }
            }
        }
    }
}

#[derive(Clone)]
pub enum Interaction {
    None,
    /// Two blocks of `block` particles playing against each other.
    MeanFieldGame {
        payoff: Payoff,
        block: usize,
    },
    /// `state -> out`, both of length `N d`.
    Custom {
        name: String,
        field: VectorField,
    },
}

impl fmt::Debug for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interaction::None => write!(f, "None"),
            Interaction::MeanFieldGame { payoff, block } => {
                write!(f, "MeanFieldGame {{ payoff: {payoff:?}, block: {block} }}")
            }
            Interaction::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionConstants {
    #[serde(rename = "L_G")]
    pub l_g: f64,
    #[serde(rename = "C_G")]
    pub c_g: f64,
    #[serde(rename = "M_G")]
    pub m_g: f64,
    pub p: f64,
}

#[derive(Clone, Debug)]
pub struct ParticleDriftSpec {
    pub confinement: DriftSpec,
    pub confinement_cert: AssumptionCertificate,
    pub interaction: Interaction,
    /// Total number of particles.
    pub n: usize,
    pub constants: InteractionConstants,
}

/// Largest observed ratios of the three interaction inequalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionObservation {
    pub l_g: f64,
    pub c_g: f64,
    pub m_g: f64,
    pub pairs: usize,
}

/// Two-block game: `G_i = -(1/N) sum_j l(x_i, y_j)` on the first block and
/// `G_{N+i} = (1/N) sum_j l(x_j, y_i)` on the second.
pub fn build_mean_field_game(
    payoff: Payoff,
    block: usize,
    confinement: DriftSpec,
    confinement_cert: AssumptionCertificate,
) -> Result<ParticleDriftSpec> {
    if block == 0 {
        return Err(invalid("block size must be positive"));
    }
    confinement_cert.validate()?;
    let (sup, lip) = payoff.bounds(confinement.dim())?;
    let spec = ParticleDriftSpec {
        confinement,
        confinement_cert,
        interaction: Interaction::MeanFieldGame { payoff, block },
        n: 2 * block,
        constants: InteractionConstants {
            l_g: 2.0 * lip,
            c_g: 2.0 * lip,
            m_g: sup,
            p: 1.0,
        },
    };
    spec.validate_interaction(20_000, 0)?;
    Ok(spec)
}

impl ParticleDriftSpec {
    pub fn new(
        confinement: DriftSpec,
        confinement_cert: AssumptionCertificate,
        interaction: Interaction,
        n: usize,
        constants: InteractionConstants,
    ) -> Result<Self> {
        if n == 0 {
            return Err(invalid("particle count must be positive"));
        }
        confinement_cert.validate()?;
        let c = constants;
        if !(c.l_g >= 0.0 && c.c_g >= 0.0 && c.m_g >= 0.0 && c.p >= 1.0) {
            return Err(invalid("interaction constants must be >= 0 with p >= 1"));
        }
        if let Interaction::MeanFieldGame { block, .. } = &interaction {
            if 2 * block != n {
                return Err(invalid("mean-field game needs n = 2 * block"));
            }
        }
        Ok(ParticleDriftSpec {
            confinement,
            confinement_cert,
            interaction,
            n,
            constants,
        })
    }

    pub fn dim(&self) -> usize {
        self.confinement.dim()
    }

    pub fn state_len(&self) -> usize {
        self.n * self.dim()
    }

    pub(crate) fn interaction_unchecked(&self, state: &[f64], out: &mut [f64]) {
        let d = self.dim();
        match &self.interaction {
            Interaction::None => out.iter_mut().for_each(|o| *o = 0.0),
            Interaction::Custom { field, .. } => field(state, out),
            Interaction::MeanFieldGame { payoff, block } => {
                let nb = *block;
                let w = 1.0 / nb as f64;
                let mut tmp = vec![0.0; d];
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in 0..nb {
                    let xi = &state[i * d..(i + 1) * d];
                    for j in 0..nb {
                        let yj = &state[(nb + j) * d..(nb + j + 1) * d];
                        payoff.eval(xi, yj, &mut tmp);
                        for k in 0..d {
                            out[i * d + k] -= w * tmp[k];
                            out[(nb + j) * d + k] += w * tmp[k];
                        }
                    }
                }
            }
        }
    }

    pub fn interaction(&self, state: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.state_len(), state.len())?;
        let mut out = vec![0.0; state.len()];
        self.interaction_unchecked(state, &mut out);
        Ok(out)
    }

    /// `F(x_i) + G_i(x)` for every particle.
    pub(crate) fn full_drift_unchecked(&self, state: &[f64], out: &mut [f64]) {
        let d = self.dim();
        self.interaction_unchecked(state, out);
        let mut f = vec![0.0; d];
        for i in 0..self.n {
            self.confinement.eval_unchecked(&state[i * d..(i + 1) * d], &mut f);
            for k in 0..d {
                out[i * d + k] += f[k];
            }
        }
    }

    pub fn full_drift(&self, state: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.state_len(), state.len())?;
        let mut out = vec![0.0; state.len()];
        self.full_drift_unchecked(state, &mut out);
        Ok(out)
    }

    /// Brute-force maxima of the three interaction ratios over random state pairs.
    pub fn observe_interaction(&self, pairs: usize, seed: u64, half_width: f64) -> InteractionObservation {
        let len = self.state_len();
        let d = self.dim();
        let stream = NoiseStream::new(seed).derive(0x6a11);
        let p = self.constants.p;
        let rows: Vec<(f64, f64, f64)> = (0..pairs)
            .into_par_iter()
            .map(|i| {
                let i = i as u32;
                let scale = half_width * stream.uniform(3, i, 2, 0);
                let x: Vec<f64> = (0..len)
                    .map(|k| scale * (2.0 * stream.uniform(3, i, 0, k as u32) - 1.0))
                    .collect();
                let close = i % 3 == 1;
                let y: Vec<f64> = (0..len)
                    .map(|k| {
                        let u = 2.0 * stream.uniform(3, i, 1, k as u32) - 1.0;
                        if close {
                            x[k] + 1e-3 * u
                        } else {
                            scale * u
                        }
                    })
                    .collect();
                let mut gx = vec![0.0; len];
                let mut gy = vec![0.0; len];
                self.interaction_unchecked(&x, &mut gx);
                self.interaction_unchecked(&y, &mut gy);
                let mut dx2 = 0.0;
                let mut dg2 = 0.0;
                let mut cross = 0.0;
                let mut growth: f64 = 0.0;
                for j in 0..self.n {
                    let s = j * d..(j + 1) * d;
                    let dxj = dist(&x[s.clone()], &y[s.clone()]);
                    let dgj = dist(&gx[s.clone()], &gy[s.clone()]);
                    dx2 += dxj * dxj;
                    dg2 += dgj * dgj;
                    cross += dxj * dgj;
                    growth = growth.max(norm(&gx[s.clone()]) / (1.0 + norm(&x[s]).powf(p)));
                }
                if dx2 < 1e-24 {
                    return (0.0, 0.0, growth);
                }
                ((dg2 / dx2).sqrt(), cross / dx2, growth)
            })
            .collect();
        let fold = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).fold(0.0, f64::max);
        InteractionObservation {
            l_g: fold(|r| r.0),
            c_g: fold(|r| r.1),
            m_g: fold(|r| r.2),
            pairs,
        }
    }

    /// Fails with `Invalidated` when an observed ratio exceeds its constant.
    pub fn validate_interaction(&self, pairs: usize, seed: u64) -> Result<InteractionObservation> {
        let half_width = 3.0 * self.confinement_cert.r;
        let obs = self.observe_interaction(pairs, seed, half_width);
        let c = self.constants;
        let over = |seen: f64, claimed: f64| seen > claimed * (1.0 + 1e-9) + 1e-14;
        for (name, seen, claimed) in [
            ("L_G", obs.l_g, c.l_g),
            ("C_G", obs.c_g, c.c_g),
            ("M_G", obs.m_g, c.m_g),
        ] {
            if over(seen, claimed) {
                return Err(Error::Invalidated(format!(
                    "{name}: observed {seen:e} exceeds certified {claimed:e}"
                )));
            }
        }
        Ok(obs)
    }

    /// Shrinks the constants to `safety * observed` where that is smaller.
    pub fn tightened(&self, obs: &InteractionObservation, safety: f64) -> Self {
        let mut out = self.clone();
        let c = &mut out.constants;
        c.l_g = c.l_g.min(safety * obs.l_g);
        c.c_g = c.c_g.min(safety * obs.c_g);
        c.m_g = c.m_g.min(safety * obs.m_g);
        out
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_eval() {
        let b = DriftSpec::linear(2, 1.0).unwrap();
        assert_eq!(b.eval(&[2.0, 0.0]).unwrap(), vec![-2.0, 0.0]);
        assert_eq!(b.eval(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(b.eval(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn perturbed_is_linear_outside_support() {
        let b = DriftSpec::perturbed_linear(2, 1.0, 2.0, 4.0).unwrap();
        for x in [[4.0, 0.0], [3.0, 3.0], [-10.0, 2.0]] {
            assert_eq!(b.eval(&x).unwrap(), vec![-x[0], -x[1]]);
        }
        assert_eq!(b.eval(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn bump_is_smooth_at_edges() {
        assert_eq!(bump(0.5), 1.0);
        assert!(bump(0.5 + 1e-9) > 0.999_999);
        assert!(bump(1.0 - 1e-3) < 1e-100);
        let h = 1e-6;
        for r in [0.6, 0.75, 0.9] {
            let fd = (bump(r + h) - bump(r - h)) / (2.0 * h);
            assert!((fd - bump_deriv(r)).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn linear_analytic_certificate() {
        let c = DriftSpec::linear(3, 2.0)
            .unwrap()
            .certify(&CertifyMode::Analytic)
            .unwrap();
        assert_eq!((c.lb, c.r, c.c, c.k), (2.0, 1.0, 2.0, 2.0));
        assert_eq!(c.hessian_lipschitz_c, Some(0.0));
    }

    #[test]
    fn expanding_drift_is_not_certifiable() {
        let b = DriftSpec::custom(1, "expand", Arc::new(|x: &[f64], o: &mut [f64]| o[0] = x[0]), true).unwrap();
        let opts = NumericOptions {
            pairs: 2000,
            ..Default::default()
        };
        assert!(matches!(
            b.certify(&CertifyMode::Numeric(opts)),
            Err(Error::NotCertifiable(_))
        ));
    }

    #[test]
    fn document_round_trip() {
        let b = DriftSpec::perturbed_linear(2, 1.0, 2.0, 4.0).unwrap();
        let doc = b.to_document(None).unwrap();
        let json = serde_json::to_string(&doc).unwrap();
        let back: DriftDocument = serde_json::from_str(&json).unwrap();
        let (spec, cert) = DriftSpec::from_document(&back).unwrap();
        assert_eq!(spec.name(), "perturbed-linear");
        assert!(cert.is_none());
        let bad = r#"{"kind":"linear","d":1,"params":{"c0":1,"zz":2}}"#;
        let bad: DriftDocument = serde_json::from_str(bad).unwrap();
        assert!(DriftSpec::from_document(&bad).is_err());
    }

    #[test]
    fn zero_payoff_has_zero_interaction() {
        let f = DriftSpec::linear(1, 1.0).unwrap();
        let cert = f.certify(&CertifyMode::Analytic).unwrap();
        let p = build_mean_field_game(Payoff::Zero, 2, f, cert).unwrap();
        assert_eq!(p.constants.l_g, 0.0);
        assert_eq!(p.constants.m_g, 0.0);
        assert_eq!(p.interaction(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn custom_payoff_needs_bounds() {
        let f = DriftSpec::linear(1, 1.0).unwrap();
        let cert = f.certify(&CertifyMode::Analytic).unwrap();
        let payoff = Payoff::Custom {
            name: "p".into(),
            field: Arc::new(|x: &[f64], y: &[f64], o: &mut [f64]| o[0] = (x[0] * y[0]).tanh()),
            sup: Some(1.0),
            lip: None,
        };
        assert!(build_mean_field_game(payoff, 2, f, cert).is_err());
    }

    #[test]
    fn understated_constants_are_invalidated() {
        let f = DriftSpec::linear(1, 1.0).unwrap();
        let cert = f.certify(&CertifyMode::Analytic).unwrap();
        let payoff = Payoff::Custom {
            name: "lying".into(),
            field: Arc::new(|x: &[f64], y: &[f64], o: &mut [f64]| o[0] = (3.0 * (x[0] - y[0])).sin()),
            sup: Some(1.0),
            lip: Some(0.1),
        };
        assert!(matches!(
            build_mean_field_game(payoff, 2, f, cert),
            Err(Error::Invalidated(_))
        ));
    }
}
