//! The radial weight function κ and the semimetrics built from it.
//!
//! With `A = L/(2d) - ε` and `R_* = 2R (1 + 2a/(L - 2dε))` the profile is
//!
//! ```text
//! f(r) = α₁ - (a/d) r²     r <= 2R
//!        A (r - R_*)²      2R < r <= R_*
//!        0                 r > R_*
//! ```
//!
//! and `κ(x) = f(|x|)`. The constant `α₁` glues the first two pieces in a C¹ way.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{norm, AssumptionCertificate, DriftSpec};
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::quadrature::{integrate, Integral};
use crate::report::{CheckRow, Provenance, VerificationReport};
use crate::rng::NoiseStream;

/// Relative width of the band around `2R` that uses the inner branch.
const SEAM_TOL: f64 = 1e-12;
/// Gaussian truncation in standard deviations.
const Z_MAX: f64 = 12.0;
/// Chunk size for Monte Carlo sums; fixed so sums do not depend on thread count.
const MC_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KappaParams {
    #[serde(rename = "R")]
    pub r: f64,
    pub c: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub d: usize,
    pub a: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub eps: f64,
}

impl KappaParams {
    /// `a = 12K`, `L = c/6`, `ε = c/(42d)`.
    pub fn defaults(r: f64, c: f64, k: f64, d: usize) -> Self {
        KappaParams {
            r,
            c,
            k,
            d,
            a: 12.0 * k,
            l: c / 6.0,
            eps: c / (42.0 * d as f64),
        }
    }

    pub fn from_certificate(cert: &AssumptionCertificate, d: usize) -> Self {
        Self::defaults(cert.r, cert.c, cert.k, d)
    }

    fn df(&self) -> f64 {
        self.d as f64
    }

    /// Quadratic coefficient of the middle branch.
    pub fn big_a(&self) -> f64 {
        self.l / (2.0 * self.df()) - self.eps
    }

    pub fn alpha1(&self) -> f64 {
        let gap = self.l - 2.0 * self.df() * self.eps;
        4.0 * self.a * self.r * self.r * (1.0 / self.df() + self.big_a() * 4.0 * self.a / (gap * gap))
    }

    pub fn r_star(&self) -> f64 {
        let gap = self.l - 2.0 * self.df() * self.eps;
        2.0 * self.r * (1.0 + 2.0 * self.a / gap)
    }

    pub fn check(&self) -> Result<()> {
        let d = self.df();
        if self.d == 0 {
            return Err(invalid("dimension must be positive"));
        }
        for (name, v) in [("R", self.r), ("c", self.c), ("K", self.k)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.a >= 12.0 * self.k && self.a.is_finite()) {
            return Err(invalid(format!("a = {} must be >= 12K = {}", self.a, 12.0 * self.k)));
        }
        if !(self.l > 0.0 && self.l <= self.c / 6.0) {
            return Err(invalid(format!(
                "L = {} must lie in (0, c/6 = {}]",
                self.l,
                self.c / 6.0
            )));
        }
        if !(self.eps > 0.0 && self.eps < self.l / (2.0 * d)) {
            return Err(invalid(format!(
                "eps = {} must lie in (0, L/(2d) = {})",
                self.eps,
                self.l / (2.0 * d)
            )));
        }
        Ok(())
    }

    pub fn build(self) -> Result<KappaFn> {
        self.check()?;
        Ok(KappaFn {
            params: self,
            alpha1: self.alpha1(),
            big_a: self.big_a(),
            r_star: self.r_star(),
            grad_norm: 4.0 * self.a * self.r / self.df(),
        })
    }
}

/// Optional overrides of the default `(a, L, ε)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KappaOverrides {
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default, rename = "L")]
    pub l: Option<f64>,
    #[serde(default)]
    pub eps: Option<f64>,
}

pub fn build_kappa(cert: &AssumptionCertificate, d: usize, overrides: KappaOverrides) -> Result<KappaFn> {
    let mut p = KappaParams::from_certificate(cert, d);
    if let Some(a) = overrides.a {
        p.a = a;
    }
    if let Some(l) = overrides.l {
        p.l = l;
        if overrides.eps.is_none() {
            p.eps = l * 6.0 / (42.0 * d as f64);
        }
    }
    if let Some(e) = overrides.eps {
        p.eps = e;
    }
    p.build()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    Inner,
    Middle,
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KappaRecord", into = "KappaRecord")]
pub struct KappaFn {
    params: KappaParams,
    alpha1: f64,
    big_a: f64,
    r_star: f64,
    grad_norm: f64,
}

/// Serialised form: parameters plus the derived values for readers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KappaRecord {
    #[serde(flatten)]
    params: KappaParams,
    #[serde(default)]
    alpha1: Option<f64>,
    #[serde(default)]
    alpha2: Option<f64>,
    #[serde(default)]
    r_star: Option<f64>,
    #[serde(default)]
    kappa_sup: Option<f64>,
    #[serde(default)]
    grad_sup: Option<f64>,
}

impl From<KappaFn> for KappaRecord {
    fn from(k: KappaFn) -> Self {
        KappaRecord {
            params: k.params,
            alpha1: Some(k.alpha1),
            alpha2: Some(k.r_star),
            r_star: Some(k.r_star),
            kappa_sup: Some(k.alpha1),
            grad_sup: Some(k.grad_norm),
        }
    }
}

impl TryFrom<KappaRecord> for KappaFn {
    type Error = Error;

    fn try_from(rec: KappaRecord) -> Result<Self> {
        let k = rec.params.build()?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
        for (name, stored, derived) in [
            ("alpha1", rec.alpha1, k.alpha1),
            ("alpha2", rec.alpha2, k.r_star),
            ("r_star", rec.r_star, k.r_star),
            ("kappa_sup", rec.kappa_sup, k.alpha1),
            ("grad_sup", rec.grad_sup, k.grad_norm),
        ] {
            if let Some(v) = stored {
                if !close(v, derived) {
                    return Err(Error::Malformed(format!(
                        "{name} = {v} disagrees with parameters ({derived})"
                    )));
                }
            }
        }
        Ok(k)
    }
}

/// Gaussian increment `E[κ(x + m + σZ)] - κ(x)` with its error.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    pub value: f64,
    /// Quadrature error estimate, or one Monte Carlo standard error.
    pub err: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    Quadrature,
    MonteCarlo { samples: usize, seed: u64 },
}

impl KappaFn {
    pub fn params(&self) -> &KappaParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.d
    }

    pub fn alpha1(&self) -> f64 {
        self.alpha1
    }

    /// `α₂`, equal to `R_*`.
    pub fn alpha2(&self) -> f64 {
        self.r_star
    }

    pub fn r_star(&self) -> f64 {
        self.r_star
    }

    pub fn big_a(&self) -> f64 {
        self.big_a
    }

    pub fn sup_norm(&self) -> f64 {
        self.alpha1
    }

    /// `‖∇κ‖∞ = 4aR/d`.
    pub fn grad_sup_norm(&self) -> f64 {
        self.grad_norm
    }

    pub fn a(&self) -> f64 {
        self.params.a
    }

    pub fn l(&self) -> f64 {
        self.params.l
    }

    fn inner_seam(&self) -> f64 {
        2.0 * self.params.r
    }

    /// `a/d`, the curvature of the inner branch.
    fn inner_coef(&self) -> f64 {
        self.params.a / self.params.d as f64
    }

    fn branch(&self, r: f64) -> Branch {
        if r <= self.inner_seam() * (1.0 + SEAM_TOL) {
            Branch::Inner
        } else if r <= self.r_star {
            Branch::Middle
        } else {
            Branch::Outer
        }
    }

    /// Radial profile `f(r)`.
    pub fn profile(&self, r: f64) -> f64 {
        match self.branch(r) {
            Branch::Inner => self.alpha1 - self.inner_coef() * r * r,
            Branch::Middle => {
                let u = r - self.r_star;
                self.big_a * u * u
            }
            Branch::Outer => 0.0,
        }
    }

    /// `f'(r)`.
    pub fn profile_deriv(&self, r: f64) -> f64 {
        match self.branch(r) {
            Branch::Inner => -2.0 * self.inner_coef() * r,
            Branch::Middle => 2.0 * self.big_a * (r - self.r_star),
            Branch::Outer => 0.0,
        }
    }

    /// `f''(r)` away from the seams.
    pub fn profile_second(&self, r: f64) -> f64 {
        match self.branch(r) {
            Branch::Inner => -2.0 * self.inner_coef(),
            Branch::Middle => 2.0 * self.big_a,
            Branch::Outer => 0.0,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        ensure_dim(self.params.d, x.len())?;
        Ok(self.profile(norm(x)))
    }

    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        ensure_dim(self.params.d, x.len())?;
        ensure_dim(self.params.d, out.len())?;
        self.grad_unchecked(x, out);
        Ok(())
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.grad_into(x, &mut out)?;
        Ok(out)
    }

    pub(crate) fn grad_unchecked(&self, x: &[f64], out: &mut [f64]) {
        let r = norm(x);
        let scale = match self.branch(r) {
            Branch::Inner => -2.0 * self.inner_coef(),
            Branch::Middle => 2.0 * self.big_a * (r - self.r_star) / r,
            Branch::Outer => 0.0,
        };
        for (o, xi) in out.iter_mut().zip(x) {
            *o = scale * xi;
        }
    }

    /// `f(r1) - f(r0)` where `s = r1² - r0²` is known to full precision.
    pub fn radial_diff(&self, r0: f64, r1: f64, s: f64) -> f64 {
        let b0 = self.branch(r0);
        let b1 = self.branch(r1);
        if b0 == b1 {
            return match b0 {
                Branch::Inner => -self.inner_coef() * s,
                Branch::Middle => {
                    let sum = r0 + r1;
                    let dr = if sum > 0.0 { s / sum } else { 0.0 };
                    self.big_a * dr * (sum - 2.0 * self.r_star)
                }
                Branch::Outer => 0.0,
            };
        }
        // Walk across the seams; each piece stays inside one branch.
        let seams = [self.inner_seam() * (1.0 + SEAM_TOL), self.r_star];
        let (lo, hi, sign) = if r0 <= r1 { (r0, r1, 1.0) } else { (r1, r0, -1.0) };
        let mut total = 0.0;
        let mut start = lo;
        for &seam in seams.iter().chain(std::iter::once(&f64::INFINITY)) {
            if seam <= start {
                continue;
            }
            let end = hi.min(seam);
            total += self.piece_diff(start, end);
            start = end;
            if end >= hi {
                break;
            }
        }
        sign * total
    }

    fn piece_diff(&self, ra: f64, rb: f64) -> f64 {
        let mid = 0.5 * (ra + rb);
        match self.branch(mid) {
            Branch::Inner => -self.inner_coef() * (rb - ra) * (rb + ra),
            Branch::Middle => self.big_a * (rb - ra) * (rb + ra - 2.0 * self.r_star),
            Branch::Outer => 0.0,
        }
    }

    /// `κ(x + v) - κ(x)` without forming `x + v`.
    pub fn diff_offset(&self, x: &[f64], v: &[f64]) -> f64 {
        let mut xx = 0.0;
        let mut s = 0.0;
        for (xi, vi) in x.iter().zip(v) {
            xx += xi * xi;
            s += (2.0 * xi + vi) * vi;
        }
        let r0 = xx.sqrt();
        let r1 = (xx + s).max(0.0).sqrt();
        self.radial_diff(r0, r1, s)
    }

    /// `(r, κ, |∇κ|)` on `n` evenly spaced radii in `[0, r_max]`.
    pub fn profile_table(&self, r_max: f64, n: usize) -> Vec<[f64; 3]> {
        let n = n.max(2);
        (0..n)
            .map(|i| {
                let r = r_max * i as f64 / (n - 1) as f64;
                [r, self.profile(r), self.profile_deriv(r).abs()]
            })
            .collect()
    }

    /// `E[f(|y + σZ|)] - f(|y|)` for `|y| = rho0`, by nested quadrature over
    /// the axial coordinate and the χ-distributed orthogonal radius.
    pub fn radial_increment(&self, rho0: f64, sigma: f64) -> Integral {
        let d = self.params.d;
        if sigma == 0.0 {
            return Integral {
                value: 0.0,
                abs_err: 0.0,
                evaluations: 0,
            };
        }
        let t_max = if d > 1 { ((d - 1) as f64).sqrt() + Z_MAX } else { 0.0 };
        let reach = sigma * (Z_MAX * Z_MAX + t_max * t_max).sqrt();
        // Whole Gaussian cloud inside one quadratic piece.
        if rho0 - reach > self.r_star {
            return Integral {
                value: 0.0,
                abs_err: 0.0,
                evaluations: 0,
            };
        }
        if rho0 + reach < self.inner_seam() {
            return Integral {
                value: -self.inner_coef() * sigma * sigma * d as f64,
                abs_err: 0.0,
                evaluations: 0,
            };
        }
        let scale = sigma * sigma * (2.0 * self.inner_coef() + 2.0 * self.big_a) * d as f64;
        let tol = 1e-9 * scale;
        let fp = self.profile_deriv(rho0);
        let seams = [self.inner_seam(), self.r_star];
        let ln_norm = if d > 1 {
            let k = (d - 1) as f64;
            -((0.5 * k - 1.0) * std::f64::consts::LN_2 + statrs::function::gamma::ln_gamma(0.5 * k))
        } else {
            0.0
        };
        let mut worst_inner: f64 = 0.0;
        let mut evals = 0usize;

        let mut breaks = vec![-rho0 / sigma];
        for &seam in &seams {
            for sgn in [-1.0, 1.0] {
                breaks.push((sgn * seam - rho0) / sigma);
                if d > 1 {
                    let w2 = seam * seam - sigma * sigma * t_max * t_max;
                    if w2 > 0.0 {
                        breaks.push((sgn * w2.sqrt() - rho0) / sigma);
                    }
                }
            }
        }

        let outer = integrate(
            |z: f64| {
                let u = rho0 + sigma * z;
                let base = 2.0 * rho0 * sigma * z + sigma * sigma * z * z;
                let lin = fp * sigma * z;
                let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                if d == 1 {
                    evals += 1;
                    let r1 = u.abs();
                    return phi * (self.radial_diff(rho0, r1, base) - lin);
                }
                let k = (d - 1) as f64;
                let mut tb = Vec::with_capacity(2);
                for &seam in &seams {
                    let w2 = seam * seam - u * u;
                    if w2 > 0.0 {
                        tb.push(w2.sqrt() / sigma);
                    }
                }
                let inner = integrate(
                    |t: f64| {
                        let dens = if t <= 0.0 {
                            if d == 2 {
                                ln_norm.exp()
                            } else {
                                0.0
                            }
                        } else {
                            ((k - 1.0) * t.ln() - 0.5 * t * t + ln_norm).exp()
                        };
                        let s = base + sigma * sigma * t * t;
                        let r1 = (u * u + sigma * sigma * t * t).sqrt();
                        dens * (self.radial_diff(rho0, r1, s) - lin)
                    },
                    0.0,
                    t_max,
                    &tb,
                    0.1 * tol,
                    1e-12,
                    400,
                );
                evals += inner.evaluations;
                worst_inner = worst_inner.max(inner.abs_err);
                phi * inner.value
            },
            -Z_MAX,
            Z_MAX,
            &breaks,
            tol,
            1e-12,
            2000,
        );
        Integral {
            value: outer.value,
            abs_err: outer.abs_err + worst_inner,
            evaluations: outer.evaluations + evals,
        }
    }

    /// `E[κ(x + m + σZ)] - κ(x)` for a fixed shift `m`.
    pub fn gaussian_increment(
        &self,
        x: &[f64],
        shift: &[f64],
        sigma: f64,
        estimator: Estimator,
        tag: u64,
    ) -> Result<Increment> {
        ensure_dim(self.params.d, x.len())?;
        ensure_dim(self.params.d, shift.len())?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("noise scale must be finite and >= 0, got {sigma}")));
        }
        match estimator {
            Estimator::Quadrature => {
                let mut xx = 0.0;
                let mut s = 0.0;
                for (xi, mi) in x.iter().zip(shift) {
                    xx += xi * xi;
                    s += (2.0 * xi + mi) * mi;
                }
                let r0 = xx.sqrt();
                let rho0 = (xx + s).max(0.0).sqrt();
                let jump = self.radial_diff(r0, rho0, s);
                let q = self.radial_increment(rho0, sigma);
                Ok(Increment {
                    value: jump + q.value,
                    err: q.abs_err,
                    provenance: if q.evaluations == 0 {
                        Provenance::Formula
                    } else {
                        Provenance::Quadrature { abs_err: q.abs_err }
                    },
                })
            }
            Estimator::MonteCarlo { samples, seed } => {
                let stream = NoiseStream::new(seed).derive(tag);
                let (mean, se) = self.mc_increment(x, shift, sigma, samples, &stream);
                Ok(Increment {
                    value: mean,
                    err: se,
                    provenance: Provenance::MonteCarlo { n: samples, se },
                })
            }
        }
    }

    /// Monte Carlo mean and standard error, with `∇κ(x)·σZ` as control variate.
    pub fn mc_increment(
        &self,
        x: &[f64],
        shift: &[f64],
        sigma: f64,
        samples: usize,
        stream: &NoiseStream,
    ) -> (f64, f64) {
        let d = x.len();
        let mut g = vec![0.0; d];
        self.grad_unchecked(x, &mut g);
        let chunks = samples.div_ceil(MC_CHUNK);
        let partial: Vec<(f64, f64)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut z = vec![0.0; d];
                let mut v = vec![0.0; d];
                let (mut s1, mut s2) = (0.0, 0.0);
                for i in c * MC_CHUNK..((c + 1) * MC_CHUNK).min(samples) {
                    stream.normals(0, i as u32, 0, &mut z);
                    let mut cv = 0.0;
                    for k in 0..d {
                        v[k] = shift[k] + sigma * z[k];
                        cv += g[k] * sigma * z[k];
                    }
                    let y = self.diff_offset(x, &v) - cv;
                    s1 += y;
                    s2 += y * y;
                }
                (s1, s2)
            })
            .collect();
        let (s1, s2) = partial.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
        mean_se(s1, s2, samples)
    }
}

pub(crate) fn mean_se(s1: f64, s2: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (f64::NAN, f64::INFINITY);
    }
    let nf = n as f64;
    let mean = s1 / nf;
    if n < 2 {
        return (mean, f64::INFINITY);
    }
    let var = ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

/// `|x - y|² (T + κ(x) + κ(y))`.
pub fn rho(kappa: &KappaFn, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    if !(t > 0.0) {
        return Err(invalid(format!("T must be positive, got {t}")));
    }
    ensure_dim(kappa.dim(), x.len())?;
    ensure_dim(kappa.dim(), y.len())?;
    Ok(rho_unchecked(kappa, t, x, y))
}

pub(crate) fn rho_unchecked(kappa: &KappaFn, t: f64, x: &[f64], y: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    if d2 == 0.0 {
        return 0.0;
    }
    d2 * (t + kappa.profile(norm(x)) + kappa.profile(norm(y)))
}

/// Sum of per-particle `ρ` terms for flat states of `N d` coordinates.
pub fn rho_tilde(kappa: &KappaFn, t: f64, xs: &[f64], ys: &[f64]) -> Result<f64> {
    if !(t > 0.0) {
        return Err(invalid(format!("T must be positive, got {t}")));
    }
    let d = kappa.dim();
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if !xs.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d * (xs.len() / d + 1),
            got: xs.len(),
        });
    }
    Ok(xs
        .chunks(d)
        .zip(ys.chunks(d))
        .map(|(x, y)| rho_unchecked(kappa, t, x, y))
        .sum())
}

/// Points at which the two expectation conditions are checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaGrid {
    /// Points with `|x| <= R` (the decrease condition).
    pub inner: Vec<Vec<f64>>,
    /// Points anywhere (the bounded-increase condition).
    pub global: Vec<Vec<f64>>,
}

impl KappaGrid {
    /// Points on the first axis: `n_inner` radii in `[0, R]`, and `n_global`
    /// radii up to `2 R_*` that include probes around both seams.
    pub fn radial(kappa: &KappaFn, n_inner: usize, n_global: usize) -> Self {
        let d = kappa.dim();
        let r = kappa.params.r;
        let point = |rad: f64| {
            let mut p = vec![0.0; d];
            p[0] = rad;
            p
        };
        let spread = |n: usize, hi: f64| -> Vec<f64> {
            match n {
                0 => vec![],
                1 => vec![hi],
                _ => (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect(),
            }
        };
        let inner = spread(n_inner, r).into_iter().map(point).collect();
        let offsets = [-1e-3, -1e-6, 0.0, 1e-6, 1e-3, 1e-2];
        let mut probes = Vec::new();
        for seam in [2.0 * r, kappa.r_star] {
            for o in offsets {
                probes.push(seam * (1.0 + o));
            }
        }
        let probes: Vec<f64> = probes.into_iter().take(n_global).collect();
        let mut radii = spread(n_global - probes.len(), 2.0 * kappa.r_star);
        radii.extend(probes);
        radii.sort_by(f64::total_cmp);
        KappaGrid {
            inner,
            global: radii.into_iter().map(point).collect(),
        }
    }
}

/// Checks the two expectation conditions that define κ on a grid.
///
/// Without a drift: `E κ(x + σZ) <= κ(x) - aδT` for `|x| <= R` and
/// `<= κ(x) + LδT` everywhere. With a drift the point is first moved by
/// `δ b(x)` and the bounds become `-(a/2)δT` and `+(3/2)LδT`.
pub fn verify_kappa_conditions(
    kappa: &KappaFn,
    delta: f64,
    t: f64,
    drift: Option<(&DriftSpec, &AssumptionCertificate)>,
    estimator: Estimator,
    grid: &KappaGrid,
) -> Result<VerificationReport> {
    if !(delta > 0.0 && t > 0.0) {
        return Err(invalid("delta and T must be positive"));
    }
    let p = kappa.params;
    let d4 = crate::constants::delta4(p.r, p.d, t);
    if delta > d4 {
        return Err(Error::Inadmissible(format!(
            "delta = {delta:e} exceeds delta_4 = {d4:e}"
        )));
    }
    let (dec, inc) = match drift {
        None => (p.a * delta * t, p.l * delta * t),
        Some((spec, cert)) => {
            ensure_dim(p.d, spec.dim())?;
            let c = crate::constants::single_chain_constants(spec, cert, kappa, delta, t)?;
            if delta > c.delta1 {
                return Err(Error::Inadmissible(format!(
                    "delta = {delta:e} exceeds delta_1 = {:e}",
                    c.delta1
                )));
            }
            let t12 = c.t1.max(c.t2.ok_or(Error::UndefinedRadius(delta * cert.lb))?);
            if t < t12 {
                return Err(Error::Inadmissible(format!("T = {t} is below max(T1, T2) = {t12}")));
            }
            (0.5 * p.a * delta * t, 1.5 * p.l * delta * t)
        }
    };
    let sigma = (2.0 * delta * t).sqrt();
    let jobs: Vec<(bool, usize, &Vec<f64>)> = grid
        .inner
        .iter()
        .enumerate()
        .map(|(i, x)| (true, i, x))
        .chain(grid.global.iter().enumerate().map(|(i, x)| (false, i, x)))
        .collect();
    for (_, _, x) in &jobs {
        ensure_dim(p.d, x.len())?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("grid point".into()));
        }
    }
    if grid.inner.iter().any(|x| norm(x) > p.r * (1.0 + 1e-12)) {
        return Err(invalid("decrease-condition grid points must satisfy |x| <= R"));
    }
    let rows: Vec<Result<CheckRow>> = jobs
        .par_iter()
        .map(|&(is_inner, i, x)| {
            let mut shift = vec![0.0; p.d];
            if let Some((spec, _)) = drift {
                spec.eval_unchecked(x, &mut shift);
                shift.iter_mut().for_each(|v| *v *= delta);
            }
            let tag = if is_inner { i as u64 } else { (1 << 32) | i as u64 };
            let inc_est = kappa.gaussian_increment(x, &shift, sigma, estimator, tag)?;
            let margin = match estimator {
                Estimator::Quadrature => inc_est.err,
                Estimator::MonteCarlo { .. } => 3.0 * inc_est.err,
            };
            let (label, bound) = if is_inner {
                (format!("decrease[{i}]"), -dec)
            } else {
                (format!("increase[{i}]"), inc)
            };
            Ok(
                CheckRow::new(label, x.clone(), inc_est.value, bound, margin, inc_est.provenance)
                    .with_extra("radius", norm(x)),
            )
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport::from_rows("kappa-conditions", rows)
        .with_param("delta", delta)
        .with_param("T", t)
        .with_param("delta4", d4)
        .with_param("sigma", sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> KappaFn {
        KappaParams::defaults(1.0, 1.0, 1.0, 2).build().unwrap()
    }

    #[test]
    fn reference_values() {
        let k = example();
        assert!((k.alpha1() - 4862.4).abs() < 1e-9);
        assert!((k.r_star() - 405.2).abs() < 1e-9);
        assert_eq!(k.grad_sup_norm(), 24.0);
        assert_eq!(k.eval(&[0.0, 0.0]).unwrap(), k.alpha1());
        assert_eq!(k.eval(&[2.0, 0.0]).unwrap(), k.alpha1() - 24.0);
        assert_eq!(k.eval(&[k.r_star(), 0.0]).unwrap(), 0.0);
        assert_eq!(k.eval(&[500.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn seams_glue() {
        let k = example();
        let p = k.params;
        let r = 2.0 * p.r;
        let middle = k.big_a() * (r - k.r_star()).powi(2);
        assert!((middle - (k.alpha1() - 4.0 * p.a / p.d as f64)).abs() < 1e-9 * k.alpha1());
        let g = k.grad(&[2.0, 0.0]).unwrap();
        assert!((g[0] + 2.0 * p.a / p.d as f64 * 2.0).abs() < 1e-12);
        let mid_grad = 2.0 * k.big_a() * (r - k.r_star());
        assert!((mid_grad - g[0]).abs() < 1e-9 * g[0].abs());
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut p = KappaParams::defaults(1.0, 1.0, 1.0, 2);
        p.a = 11.0;
        assert!(p.build().is_err());
        let mut p = KappaParams::defaults(1.0, 1.0, 1.0, 2);
        p.eps = p.l;
        assert!(p.build().is_err());
    }

    #[test]
    fn radial_diff_matches_direct() {
        let k = example();
        for &(r0, r1) in &[(0.5, 1.5), (1.9, 2.1), (3.0, 410.0), (500.0, 1.0), (100.0, 100.5)] {
            let s = r1 * r1 - r0 * r0;
            let direct = k.profile(r1) - k.profile(r0);
            assert!((k.radial_diff(r0, r1, s) - direct).abs() < 1e-9 * k.alpha1());
        }
    }

    #[test]
    fn deep_inside_is_exact() {
        let k = example();
        let q = k.radial_increment(0.0, 1e-4);
        assert_eq!(q.value, -k.a() * 1e-8);
    }

    #[test]
    fn quadrature_agrees_with_monte_carlo() {
        let k = example();
        let sigma = 0.3;
        for rho0 in [2.0, 200.0, 405.0] {
            let q = k.radial_increment(rho0, sigma);
            let stream = NoiseStream::new(11);
            let (m, se) = k.mc_increment(&[rho0, 0.0], &[0.0, 0.0], sigma, 200_000, &stream);
            assert!(
                (q.value - m).abs() < 5.0 * se + 1e-9,
                "{rho0}: {} vs {m} ± {se}",
                q.value
            );
        }
    }

    #[test]
    fn serde_round_trip_checks_derived() {
        let k = example();
        let json = serde_json::to_string(&k).unwrap();
        let back: KappaFn = serde_json::from_str(&json).unwrap();
        assert_eq!(back, k);
        let bad = json.replace("\"alpha1\":4862.4", "\"alpha1\":2040.0");
        assert!(serde_json::from_str::<KappaFn>(&bad).is_err());
    }

    #[test]
    fn rho_basics() {
        let k = example();
        let x = [0.0, 0.0];
        let y = [1.0, 0.0];
        assert_eq!(rho(&k, 4080.0, &x, &x).unwrap(), 0.0);
        let expect = 4080.0 + k.alpha1() + k.eval(&y).unwrap();
        assert!((rho(&k, 4080.0, &x, &y).unwrap() - expect).abs() < 1e-9);
        assert!(rho(&k, 0.0, &x, &y).is_err());
        let far = rho(&k, 2.0, &[500.0, 0.0], &[501.0, 0.0]).unwrap();
        assert_eq!(far, 2.0);
        let tilde = rho_tilde(&k, 2.0, &[0.0, 0.0, 500.0, 0.0], &[1.0, 0.0, 501.0, 0.0]).unwrap();
        assert!((tilde - (rho(&k, 2.0, &x, &y).unwrap() + 2.0)).abs() < 1e-9);
    }
}
