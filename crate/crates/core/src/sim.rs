//! Euler chains, synchronous couplings and ensembles.
//!
//! Noise for replica `r`, step `k`, particle `i` is read from the counter
//! `(r, k, i, ·)` of a [`NoiseStream`], so every path is a pure function of the
//! seed and the configuration.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{norm, DriftSpec, ParticleDriftSpec};
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::kappa::{rho_unchecked, KappaFn};
use crate::rng::NoiseStream;

/// States beyond this norm are treated as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

const FRAME_MAGIC: &[u8; 4] = b"WCLB";
const FRAME_VERSION: u32 = 1;

const TAG_INIT_X: u64 = 0x1_0001;
const TAG_INIT_Y: u64 = 0x1_0002;

#[derive(Debug, Clone)]
pub enum System {
    Single(DriftSpec),
    Particles(ParticleDriftSpec),
}

impl System {
    pub fn particle_dim(&self) -> usize {
        match self {
            System::Single(b) => b.dim(),
            System::Particles(p) => p.dim(),
        }
    }

    pub fn particles(&self) -> usize {
        match self {
            System::Single(_) => 1,
            System::Particles(p) => p.n,
        }
    }

    /// Length of a full state vector.
    pub fn state_len(&self) -> usize {
        self.particle_dim() * self.particles()
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            System::Single(b) => b.eval_unchecked(x, out),
            System::Particles(p) => p.full_drift_unchecked(x, out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub system: System,
    pub delta: f64,
    pub t: f64,
    pub steps: usize,
    pub seed: u64,
    pub replicas: usize,
}

impl ChainConfig {
    pub fn new(system: System, delta: f64, t: f64, steps: usize, seed: u64, replicas: usize) -> Result<Self> {
        let cfg = ChainConfig {
            system,
            delta,
            t,
            steps,
            seed,
            replicas,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(invalid(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(invalid(format!("T must be positive, got {}", self.t)));
        }
        if self.replicas == 0 {
            return Err(invalid("replicas must be >= 1"));
        }
        if self.steps > u32::MAX as usize || self.replicas > u32::MAX as usize {
            return Err(invalid("steps and replicas must fit in 32 bits"));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        (2.0 * self.delta * self.t).sqrt()
    }

    pub fn stream(&self) -> NoiseStream {
        NoiseStream::new(self.seed)
    }

    /// Standard normals for every particle of one step.
    pub fn noise(&self, replica: u32, step: u32, out: &mut [f64]) {
        let d = self.system.particle_dim();
        let stream = self.stream();
        for (i, chunk) in out.chunks_mut(d).enumerate() {
            stream.normals(replica, step, i as u32, chunk);
        }
    }
}

/// One Euler step `x + δ b(x) + σ z` written into `out`.
pub fn euler_step(drift: &DriftSpec, x: &[f64], delta: f64, t: f64, z: &[f64]) -> Result<Vec<f64>> {
    ensure_dim(drift.dim(), x.len())?;
    ensure_dim(drift.dim(), z.len())?;
    let mut out = vec![0.0; x.len()];
    drift.eval_unchecked(x, &mut out);
    let sigma = (2.0 * delta * t).sqrt();
    for k in 0..x.len() {
        out[k] = x[k] + delta * out[k] + sigma * z[k];
    }
    check_finite(&out)?;
    Ok(out)
}

/// One particle-system step with one noise vector per particle.
pub fn particle_step(p: &ParticleDriftSpec, x: &[f64], delta: f64, t: f64, z: &[f64]) -> Result<Vec<f64>> {
    ensure_dim(p.state_len(), x.len())?;
    ensure_dim(p.state_len(), z.len())?;
    let mut out = vec![0.0; x.len()];
    p.full_drift_unchecked(x, &mut out);
    let sigma = (2.0 * delta * t).sqrt();
    for k in 0..x.len() {
        out[k] = x[k] + delta * out[k] + sigma * z[k];
    }
    check_finite(&out)?;
    Ok(out)
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("state".into()))
    }
}

pub(crate) fn advance(system: &System, x: &mut [f64], drift: &mut [f64], z: &[f64], delta: f64, sigma: f64) {
    system.drift_into(x, drift);
    for k in 0..x.len() {
        x[k] += delta * drift[k] + sigma * z[k];
    }
}

pub(crate) fn diverged(x: &[f64]) -> bool {
    !x.iter().all(|v| v.is_finite()) || norm(x) > DIVERGENCE_THRESHOLD
}

/// Which steps to keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Record {
    All,
    Every(usize),
    At(Vec<usize>),
}

impl Record {
    fn keeps(&self, k: usize, last: usize) -> bool {
        match self {
            Record::All => true,
            Record::Every(m) => k.is_multiple_of((*m).max(1)) || k == last,
            Record::At(list) => list.contains(&k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledTrajectory {
    pub replica: u32,
    pub steps: Vec<usize>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    /// `|X_k - Y_k|` over the whole state.
    pub distance: Vec<f64>,
    /// `ρ` (single chain) or `ρ̃` (particles) when κ was supplied.
    pub rho: Option<Vec<f64>>,
    pub shared_noise: bool,
    pub diverged_at: Option<usize>,
}

impl CoupledTrajectory {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn index_of(&self, step: usize) -> Option<usize> {
        self.steps.iter().position(|&s| s == step)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CoupledOptions {
    pub record: Option<Record>,
    pub kappa: Option<KappaFn>,
}

fn weighted(system: &System, kappa: &KappaFn, t: f64, x: &[f64], y: &[f64]) -> f64 {
    let d = system.particle_dim();
    x.chunks(d)
        .zip(y.chunks(d))
        .map(|(a, b)| rho_unchecked(kappa, t, a, b))
        .sum()
}

/// Two chains from `x0` and `y0` driven by the same noise.
pub fn simulate_coupled(
    x0: &[f64],
    y0: &[f64],
    config: &ChainConfig,
    replica: u32,
    opts: &CoupledOptions,
) -> Result<CoupledTrajectory> {
    config.validate()?;
    let len = config.system.state_len();
    ensure_dim(len, x0.len())?;
    ensure_dim(len, y0.len())?;
    check_finite(x0)?;
    check_finite(y0)?;
    if let Some(k) = &opts.kappa {
        ensure_dim(config.system.particle_dim(), k.dim())?;
    }
    let record = opts.record.clone().unwrap_or(Record::All);
    let sigma = config.sigma();
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut bx = vec![0.0; len];
    let mut by = vec![0.0; len];
    let mut z = vec![0.0; len];
    let mut traj = CoupledTrajectory {
        replica,
        steps: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        distance: Vec::new(),
        rho: opts.kappa.as_ref().map(|_| Vec::new()),
        shared_noise: true,
        diverged_at: None,
    };
    let last = config.steps;
    for k in 0..=last {
        if k > 0 {
            config.noise(replica, (k - 1) as u32, &mut z);
            advance(&config.system, &mut x, &mut bx, &z, config.delta, sigma);
            advance(&config.system, &mut y, &mut by, &z, config.delta, sigma);
            if diverged(&x) || diverged(&y) {
                traj.diverged_at = Some(k);
                break;
            }
        }
        if record.keeps(k, last) {
            traj.steps.push(k);
            traj.distance
                .push(x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
            if let (Some(kappa), Some(series)) = (&opts.kappa, traj.rho.as_mut()) {
                series.push(weighted(&config.system, kappa, config.t, &x, &y));
            }
            traj.x.push(x.clone());
            traj.y.push(y.clone());
        }
    }
    Ok(traj)
}

/// [`simulate_coupled`] restricted to particle systems.
pub fn simulate_particles_coupled(
    x0: &[f64],
    y0: &[f64],
    config: &ChainConfig,
    replica: u32,
    opts: &CoupledOptions,
) -> Result<CoupledTrajectory> {
    if !matches!(config.system, System::Particles(_)) {
        return Err(invalid("particle simulation needs a particle system"));
    }
    simulate_coupled(x0, y0, config, replica, opts)
}

/// Law of the starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitialLaw {
    Dirac {
        point: Vec<f64>,
    },
    /// Independent coordinates `mean_k + std * Z_k`.
    Gaussian {
        mean: Vec<f64>,
        std: f64,
    },
    /// Replica `r` starts from sample `r mod n`.
    Samples {
        measure: EmpiricalMeasure,
    },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Dirac { point } => point.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Samples { measure } => measure.dim(),
        }
    }

    pub fn sample(&self, stream: &NoiseStream, replica: u32) -> Vec<f64> {
        match self {
            InitialLaw::Dirac { point } => point.clone(),
            InitialLaw::Gaussian { mean, std } => {
                let mut z = vec![0.0; mean.len()];
                stream.normals(replica, 0, 0, &mut z);
                mean.iter().zip(z).map(|(m, zi)| m + std * zi).collect()
            }
            InitialLaw::Samples { measure } => measure.point(replica as usize % measure.len()).to_vec(),
        }
    }
}

/// Equally weighted point cloud stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRecord", into = "MeasureRecord")]
pub struct EmpiricalMeasure {
    d: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MeasureRecord {
    d: usize,
    points: Vec<Vec<f64>>,
}

impl From<EmpiricalMeasure> for MeasureRecord {
    fn from(m: EmpiricalMeasure) -> Self {
        MeasureRecord {
            d: m.d,
            points: m.points().map(|p| p.to_vec()).collect(),
        }
    }
}

impl TryFrom<MeasureRecord> for EmpiricalMeasure {
    type Error = Error;
    fn try_from(r: MeasureRecord) -> Result<Self> {
        EmpiricalMeasure::from_points(r.d, &r.points)
    }
}

impl EmpiricalMeasure {
    pub fn new(d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(invalid("dimension must be positive"));
        }
        if data.is_empty() || !data.len().is_multiple_of(d) {
            return Err(invalid(format!(
                "need a positive multiple of d = {d} coordinates, got {}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(EmpiricalMeasure { d, data })
    }

    pub fn from_points(d: usize, points: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(points.len() * d);
        for p in points {
            ensure_dim(d, p.len())?;
            data.extend_from_slice(p);
        }
        EmpiricalMeasure::new(d, data)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.d)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.d];
        for p in self.points() {
            for (mk, pk) in m.iter_mut().zip(p) {
                *mk += pk;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased per-coordinate variance.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.len();
        let m = self.mean();
        let mut v = vec![0.0; self.d];
        for p in self.points() {
            for k in 0..self.d {
                v[k] += (p[k] - m[k]).powi(2);
            }
        }
        let den = (n.max(2) - 1) as f64;
        v.iter_mut().for_each(|x| *x /= den);
        v
    }

    /// Comma-separated rows, header `x0,...,x{d-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = (0..self.d).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",");
        out.push('\n');
        for p in self.points() {
            out.push_str(&p.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    /// Parses CSV rows; a first line that is not numeric is taken as a header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            match parsed {
                Ok(row) => rows.push(row),
                Err(_) if rows.is_empty() && i == 0 => continue,
                Err(e) => return Err(Error::Malformed(format!("line {}: {e}", i + 1))),
            }
        }
        let d = rows
            .first()
            .map(|r| r.len())
            .ok_or_else(|| Error::Malformed("no rows".into()))?;
        EmpiricalMeasure::from_points(d, &rows)
    }

    /// Binary frame: `"WCLB"`, version (u32), n (u64), d (u64), then f64 data, all little-endian.
    pub fn write_frame<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(FRAME_MAGIC)?;
        w.write_all(&FRAME_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.d as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_frame<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Malformed(format!("frame: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != FRAME_MAGIC {
            return Err(Error::Malformed("bad frame magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != FRAME_VERSION {
            return Err(Error::Malformed(format!("unsupported frame version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let d = u64::from_le_bytes(b8) as usize;
        let count = n
            .checked_mul(d)
            .ok_or_else(|| Error::Malformed("frame size overflow".into()))?;
        let mut data = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            r.read_exact(&mut b8).map_err(io)?;
            data.push(f64::from_le_bytes(b8));
        }
        EmpiricalMeasure::new(d, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    /// `(step, cloud of surviving replicas)`.
    pub measures: Vec<(usize, EmpiricalMeasure)>,
    pub diverged: Vec<u32>,
}

/// Independent replicas from `init`, recorded at the listed steps.
pub fn ensemble(init: &InitialLaw, config: &ChainConfig, record_at: &[usize]) -> Result<Ensemble> {
    config.validate()?;
    let len = config.system.state_len();
    ensure_dim(len, init.dim())?;
    let mut steps: Vec<usize> = record_at.iter().copied().filter(|&s| s <= config.steps).collect();
    steps.sort_unstable();
    steps.dedup();
    let init_stream = config.stream().derive(TAG_INIT_X);
    let sigma = config.sigma();
    let paths: Vec<Option<Vec<Vec<f64>>>> = (0..config.replicas as u32)
        .into_par_iter()
        .map(|r| {
            let mut x = init.sample(&init_stream, r);
            let mut drift = vec![0.0; len];
            let mut z = vec![0.0; len];
            let mut kept = Vec::with_capacity(steps.len());
            let mut next = 0;
            let last = steps.last().copied().unwrap_or(0);
            for k in 0..=last {
                if k > 0 {
                    config.noise(r, (k - 1) as u32, &mut z);
                    advance(&config.system, &mut x, &mut drift, &z, config.delta, sigma);
                    if diverged(&x) {
                        return None;
                    }
                }
                if next < steps.len() && steps[next] == k {
                    kept.push(x.clone());
                    next += 1;
                }
            }
            Some(kept)
        })
        .collect();
    let diverged: Vec<u32> = paths
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_none())
        .map(|(i, _)| i as u32)
        .collect();
    let alive: Vec<&Vec<Vec<f64>>> = paths.iter().flatten().collect();
    let mut measures = Vec::new();
    if !alive.is_empty() {
        for (j, &s) in steps.iter().enumerate() {
            let data: Vec<f64> = alive.iter().flat_map(|p| p[j].iter().copied()).collect();
            measures.push((s, EmpiricalMeasure::new(len, data)?));
        }
    }
    Ok(Ensemble { measures, diverged })
}

/// Coupled replicas with starting points drawn from `x0` and `y0`.
pub fn coupled_ensemble(
    x0: &InitialLaw,
    y0: &InitialLaw,
    config: &ChainConfig,
    opts: &CoupledOptions,
) -> Result<Vec<CoupledTrajectory>> {
    config.validate()?;
    let sx = config.stream().derive(TAG_INIT_X);
    let sy = config.stream().derive(TAG_INIT_Y);
    (0..config.replicas as u32)
        .into_par_iter()
        .map(|r| simulate_coupled(&x0.sample(&sx, r), &y0.sample(&sy, r), config, r, opts))
        .collect()
}

/// CSV rows `step,replica,chain,x0..` for a set of coupled trajectories.
pub fn trajectories_csv(trajs: &[CoupledTrajectory]) -> String {
    let width = trajs.first().and_then(|t| t.x.first()).map_or(0, |x| x.len());
    let mut out = String::from("step,replica,chain");
    for k in 0..width {
        out.push_str(&format!(",x{k}"));
    }
    out.push_str(",distance,rho\n");
    for t in trajs {
        for (j, &s) in t.steps.iter().enumerate() {
            let rho = t.rho.as_ref().map_or(String::new(), |r| format!("{:e}", r[j]));
            for (chain, state) in [("x", &t.x[j]), ("y", &t.y[j])] {
                out.push_str(&format!("{s},{},{chain}", t.replica));
                for v in state {
                    out.push_str(&format!(",{v:e}"));
                }
                out.push_str(&format!(",{:e},{rho}\n", t.distance[j]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{build_mean_field_game, CertifyMode, Payoff};

    fn linear_cfg(delta: f64, steps: usize, replicas: usize) -> ChainConfig {
        let b = DriftSpec::linear(1, 1.0).unwrap();
        ChainConfig::new(System::Single(b), delta, 1.0, steps, 9, replicas).unwrap()
    }

    #[test]
    fn deterministic_step() {
        let b = DriftSpec::linear(1, 1.0).unwrap();
        assert_eq!(euler_step(&b, &[1.0], 0.1, 5.0, &[0.0]).unwrap(), vec![0.9]);
        assert_eq!(euler_step(&b, &[0.0], 0.1, 5.0, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn coupled_linear_difference_is_geometric() {
        let cfg = linear_cfg(0.1, 200, 1);
        let t = simulate_coupled(&[1.0], &[-1.0], &cfg, 0, &CoupledOptions::default()).unwrap();
        for (k, dist) in t.steps.iter().zip(&t.distance) {
            let expect = 2.0 * 0.9f64.powi(*k as i32);
            assert!((dist - expect).abs() < 1e-13, "{k}");
        }
    }

    #[test]
    fn equal_starts_stay_equal() {
        let cfg = linear_cfg(0.1, 50, 1);
        let t = simulate_coupled(&[0.3], &[0.3], &cfg, 0, &CoupledOptions::default()).unwrap();
        assert!(t.x.iter().zip(&t.y).all(|(a, b)| a == b));
    }

    #[test]
    fn steps_zero_returns_initial_samples() {
        let cfg = linear_cfg(0.1, 0, 5);
        let e = ensemble(&InitialLaw::Dirac { point: vec![2.0] }, &cfg, &[0]).unwrap();
        assert_eq!(e.measures[0].1.data(), &[2.0; 5]);
    }

    #[test]
    fn divergence_is_flagged() {
        let b = DriftSpec::custom(
            1,
            "blowup",
            std::sync::Arc::new(|x: &[f64], o: &mut [f64]| o[0] = 10.0 * x[0]),
            true,
        )
        .unwrap();
        let cfg = ChainConfig::new(System::Single(b), 1.0, 1.0, 100, 0, 3).unwrap();
        let e = ensemble(&InitialLaw::Dirac { point: vec![1.0] }, &cfg, &[100]).unwrap();
        assert_eq!(e.diverged.len(), 3);
        assert!(e.measures.is_empty());
    }

    #[test]
    fn zero_interaction_decouples_particles() {
        let f = DriftSpec::linear(1, 1.0).unwrap();
        let cert = f.certify(&CertifyMode::Analytic).unwrap();
        let p = build_mean_field_game(Payoff::Zero, 2, f.clone(), cert).unwrap();
        let z = [0.1, -0.2, 0.3, 0.4];
        let x = [1.0, 2.0, -1.0, 0.5];
        let joint = particle_step(&p, &x, 0.1, 2.0, &z).unwrap();
        for i in 0..4 {
            let single = euler_step(&f, &[x[i]], 0.1, 2.0, &[z[i]]).unwrap();
            assert_eq!(joint[i], single[0]);
        }
    }

    #[test]
    fn frame_and_csv_round_trip() {
        let m = EmpiricalMeasure::new(2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap();
        let mut buf = Vec::new();
        m.write_frame(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"WCLB");
        assert_eq!(EmpiricalMeasure::read_frame(&mut buf.as_slice()).unwrap(), m);
        assert_eq!(EmpiricalMeasure::from_csv(&m.to_csv()).unwrap(), m);
        assert!(EmpiricalMeasure::read_frame(&mut &b"NOPE"[..]).is_err());
    }
}
