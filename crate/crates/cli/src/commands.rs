//! One function per leaf subcommand.

use anyhow::{anyhow, bail, Result};
use serde::Serialize;
use wclb_core::analysis::{
    gaussian_base_case, gradient_commutation_linear, one_step_rho_contraction, particle_contraction, poincare_check,
    regime_pairs, stationary_variance_check, w2_contraction_envelope, EnvelopeSetup, TestFunction,
};
use wclb_core::bounds::{
    bias_terms, concentration_experiment, concentration_tail_bound, entropy_bound_n_step, entropy_check_linear,
    one_step_kl, ConcentrationInput, ConcentrationOverrides, ConcentrationSetup, ConfidenceInput, EntropyInput,
    Observable,
};
use wclb_core::constants::{particle_constants, single_chain_constants, ConstantsReport};
use wclb_core::drift::DriftKind;
use wclb_core::kappa::{self, Estimator, KappaGrid};
use wclb_core::report::{Provenance, VerificationReport};
use wclb_core::rng::NoiseStream;
use wclb_core::sim::{
    coupled_ensemble, ensemble, trajectories_csv, ChainConfig, CoupledOptions, EmpiricalMeasure, InitialLaw, Record,
};
use wclb_core::transport::{optimal_transport, CostSpec, DEFAULT_CAP};

use crate::model::{Model, DEFAULT_MAX_ITER};
use crate::output::Artifact;
use crate::settings::{CostChoice, EstimatorChoice, Settings};

fn need<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| anyhow!("missing --{flag}"))
}

fn point(s: &Option<Vec<f64>>, flag: &str, len: usize) -> Result<Vec<f64>> {
    let p = s.clone().unwrap_or_else(|| vec![0.0; len]);
    if p.len() != len {
        bail!("--{flag} has {} coordinates, expected {len}", p.len());
    }
    Ok(p)
}

fn law(center: Vec<f64>, std: Option<f64>) -> InitialLaw {
    match std {
        Some(std) if std > 0.0 => InitialLaw::Gaussian { mean: center, std },
        _ => InitialLaw::Dirac { point: center },
    }
}

fn estimator(s: &Settings, default: EstimatorChoice, samples: usize) -> Estimator {
    match s.estimator.unwrap_or(default) {
        EstimatorChoice::Quadrature => Estimator::Quadrature,
        EstimatorChoice::Mc => Estimator::MonteCarlo {
            samples: s.samples.unwrap_or(samples),
            seed: s.seed(),
        },
    }
}

fn report(name: &str, r: VerificationReport) -> Result<Artifact> {
    let csv = r.rows_csv();
    let mut art = Artifact::new(name, &r, Some(csv))?;
    art.pass = Some(r.pass);
    eprintln!("{}", r.summary_line());
    Ok(art)
}

fn constants_at(model: &Model, delta: f64, t: f64) -> Result<ConstantsReport> {
    Ok(match model {
        Model::Single { drift, cert, kappa } => single_chain_constants(drift, cert, kappa, delta, t)?,
        Model::Particles { spec, kappa } => particle_constants(spec, kappa, delta, t)?,
    })
}

/// Thresholds next to the user's pair, printed when a verification is refused.
pub fn gate_diagnostics(s: &Settings) -> Vec<String> {
    let (Some(delta), Some(t)) = (s.delta, s.t) else {
        return Vec::new();
    };
    let Ok(model) = Model::build(s) else {
        return Vec::new();
    };
    let Ok(c) = constants_at(&model, delta, t) else {
        return Vec::new();
    };
    let mut lines = vec![format!("delta = {delta:e}, T = {t}")];
    let show = |name: &str, ok: bool, rel: &str, v: Option<f64>| {
        let v = v.map_or("undefined".to_string(), |v| format!("{v:e}"));
        format!("  {name:<7} {} {rel} {v}", if ok { "ok  " } else { "FAIL" })
    };
    let g = c.gates;
    lines.push(show("delta1", g.delta1, "delta <=", Some(c.delta1)));
    lines.push(show("delta2", g.delta2, "delta <=", Some(c.delta2)));
    lines.push(show("delta3", g.delta3, "delta <=", Some(c.delta3)));
    lines.push(show("delta4", g.delta4, "delta <=", Some(c.delta4)));
    lines.push(show("T1", g.t1, "T >=", Some(c.t1)));
    lines.push(show("T2", g.t2, "T >=", c.t2));
    lines.push(show("T3", g.t3, "T >=", Some(c.t3)));
    if let Some(p) = &c.particle {
        lines.push(format!("  particle gates failing: {:?}", p.gates.failing()));
    }
    lines
}

pub fn constants(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    match (s.delta, s.t) {
        (Some(delta), Some(t)) => Artifact::flat("constants", &constants_at(&model, delta, t)?),
        (None, None) => Artifact::flat("constants", &model.solve_pair(s.max_iter.unwrap_or(DEFAULT_MAX_ITER))?),
        _ => bail!("give both --delta and --T, or neither to solve for them"),
    }
}

#[derive(Serialize)]
struct KappaPoint<'a> {
    kappa: &'a wclb_core::kappa::KappaFn,
    x: Vec<f64>,
    value: f64,
    gradient: Vec<f64>,
}

pub fn kappa_eval(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let kappa = model.kappa();
    let x = point(&s.x, "x", kappa.dim())?;
    let p = KappaPoint {
        kappa,
        value: kappa.eval(&x)?,
        gradient: kappa.grad(&x)?,
        x,
    };
    Artifact::flat("kappa", &p)
}

#[derive(Serialize)]
struct Profile<'a> {
    kappa: &'a wclb_core::kappa::KappaFn,
    r: Vec<f64>,
    value: Vec<f64>,
    derivative: Vec<f64>,
}

pub fn kappa_profile(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let kappa = model.kappa();
    let r_max = s.r_max.unwrap_or(2.0 * kappa.r_star());
    let table = kappa.profile_table(r_max, s.grid.unwrap_or(1001));
    let mut csv = String::from("r,kappa,dkappa\n");
    for [r, v, dv] in &table {
        csv.push_str(&format!("{r:e},{v:e},{dv:e}\n"));
    }
    let p = Profile {
        kappa,
        r: table.iter().map(|t| t[0]).collect(),
        value: table.iter().map(|t| t[1]).collect(),
        derivative: table.iter().map(|t| t[2]).collect(),
    };
    Artifact::new("kappa-profile", &p, Some(csv))
}

#[derive(Serialize)]
struct StepSummary {
    step: usize,
    mean: Vec<f64>,
    variance: Vec<f64>,
}

#[derive(Serialize)]
struct EnsembleSummary {
    delta: f64,
    #[serde(rename = "T")]
    t: f64,
    seed: u64,
    replicas: usize,
    diverged: Vec<u32>,
    steps: Vec<StepSummary>,
}

#[derive(Serialize)]
struct CoupledSummary {
    delta: f64,
    #[serde(rename = "T")]
    t: f64,
    seed: u64,
    replicas: usize,
    diverged: usize,
    steps: Vec<usize>,
    mean_distance: Vec<f64>,
    mean_rho: Vec<f64>,
}

pub fn simulate(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (delta, t) = model.pair(s)?;
    let steps = s.steps.unwrap_or(100);
    let every = s.record_every.unwrap_or(1).max(1);
    let config = ChainConfig::new(model.system(), delta, t, steps, s.seed(), s.replicas.unwrap_or(1))?;
    let len = model.state_len();
    let x = point(&s.x, "x", len)?;
    if s.y.is_some() {
        let y = point(&s.y, "y", len)?;
        let opts = CoupledOptions {
            record: Some(Record::Every(every)),
            kappa: Some(*model.kappa()),
        };
        let trajs = coupled_ensemble(&law(x, s.init_std), &law(y, s.init_std), &config, &opts)?;
        let alive: Vec<_> = trajs.iter().filter(|t| !t.diverged()).collect();
        let recorded = alive.first().map(|t| t.steps.clone()).unwrap_or_default();
        let mean = |f: &dyn Fn(&wclb_core::sim::CoupledTrajectory, usize) -> f64| -> Vec<f64> {
            (0..recorded.len())
                .map(|j| alive.iter().map(|t| f(t, j)).sum::<f64>() / alive.len() as f64)
                .collect()
        };
        let summary = CoupledSummary {
            delta,
            t,
            seed: s.seed(),
            replicas: trajs.len(),
            diverged: trajs.len() - alive.len(),
            mean_distance: mean(&|t, j| t.distance[j]),
            mean_rho: mean(&|t, j| t.rho.as_ref().map_or(0.0, |r| r[j])),
            steps: recorded,
        };
        return Artifact::new("simulate", &summary, Some(trajectories_csv(&trajs)));
    }
    let record: Vec<usize> = (0..=steps).filter(|k| k % every == 0 || *k == steps).collect();
    let ens = ensemble(&law(x, s.init_std), &config, &record)?;
    let mut csv = String::from("step,replica");
    for k in 0..len {
        csv.push_str(&format!(",x{k}"));
    }
    csv.push('\n');
    for (step, m) in &ens.measures {
        for (i, p) in m.points().enumerate() {
            csv.push_str(&format!("{step},{i}"));
            for v in p {
                csv.push_str(&format!(",{v:e}"));
            }
            csv.push('\n');
        }
    }
    if let Some(path) = &s.frames {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (_, m) in &ens.measures {
            m.write_frame(&mut file)?;
        }
    }
    let summary = EnsembleSummary {
        delta,
        t,
        seed: s.seed(),
        replicas: config.replicas,
        diverged: ens.diverged.clone(),
        steps: ens
            .measures
            .iter()
            .map(|(step, m)| StepSummary {
                step: *step,
                mean: m.mean(),
                variance: m.variance(),
            })
            .collect(),
    };
    Artifact::new("simulate", &summary, Some(csv))
}

#[derive(Serialize)]
struct OtSummary {
    cost: String,
    n: usize,
    value: f64,
    mean_cost: f64,
    assignment: Vec<usize>,
}

pub fn ot(s: &Settings) -> Result<Artifact> {
    let read = |flag: &str, p: &Option<std::path::PathBuf>| -> Result<EmpiricalMeasure> {
        let path = p.as_ref().ok_or_else(|| anyhow!("missing --{flag}"))?;
        let text = std::fs::read_to_string(path).map_err(|e| anyhow!("reading {}: {e}", path.display()))?;
        Ok(EmpiricalMeasure::from_csv(&text)?)
    };
    let mu = read("mu", &s.mu)?;
    let nu = read("nu", &s.nu)?;
    let choice = s.cost.unwrap_or(CostChoice::Euclidean);
    let cost = match choice {
        CostChoice::Euclidean => CostSpec::Euclidean { p: s.p.unwrap_or(2.0) },
        CostChoice::Rho | CostChoice::RhoTilde => {
            let model = Model::build(s)?;
            let t = need(&s.t, "T")?;
            let kappa = *model.kappa();
            if choice == CostChoice::Rho {
                CostSpec::Rho { kappa, t }
            } else {
                CostSpec::RhoTilde { kappa, t }
            }
        }
    };
    let plan = optimal_transport(&mu, &nu, &cost, DEFAULT_CAP)?;
    let mut csv = String::from("i,j\n");
    for (i, j) in plan.assignment.iter().enumerate() {
        csv.push_str(&format!("{i},{j}\n"));
    }
    let name = serde_json::to_value(choice)?.as_str().unwrap_or_default().to_string();
    let summary = OtSummary {
        cost: name,
        n: mu.len(),
        value: plan.value,
        mean_cost: plan.mean_cost,
        assignment: plan.assignment,
    };
    Artifact::new("ot", &summary, Some(csv))
}

// ---------------------------------------------------------------------------
// verify

pub fn verify_kappa_conditions(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (delta, t) = model.pair(s)?;
    let kappa = model.kappa();
    let grid = KappaGrid::radial(kappa, s.grid.unwrap_or(50), s.grid_outer.unwrap_or(200));
    let est = estimator(s, EstimatorChoice::Quadrature, 100_000);
    report(
        "kappa-conditions",
        kappa::verify_kappa_conditions(kappa, delta, t, None, est, &grid)?,
    )
}

pub fn verify_certificate(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (drift, cert, _) = model.single()?;
    report(
        "drift-certificate",
        drift.check_certificate(cert, s.pairs.unwrap_or(10_000), s.seed()),
    )
}

pub fn verify_rho_onestep(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (delta, t) = model.pair(s)?;
    let (drift, cert, kappa) = model.single()?;
    let pairs = regime_pairs(cert.r, kappa.r_star(), drift.dim(), s.pairs.unwrap_or(60));
    let est = estimator(s, EstimatorChoice::Mc, 100_000);
    report(
        "rho-onestep",
        one_step_rho_contraction(drift, cert, kappa, delta, t, &pairs, est)?,
    )
}

/// State pairs at several scales up to past `R_*`.
fn particle_pairs(len: usize, r_star: f64, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let stream = NoiseStream::new(seed);
    let scales = [0.5, 2.0, 0.5 * r_star, 1.2 * r_star];
    (0..count as u32)
        .map(|i| {
            let a = scales[i as usize % 4];
            let b = scales[(i as usize / 4) % 4];
            let x = (0..len as u32)
                .map(|c| a * (2.0 * stream.uniform(i, 0, 0, c) - 1.0))
                .collect();
            let y = (0..len as u32)
                .map(|c| b * (2.0 * stream.uniform(i, 1, 0, c) - 1.0))
                .collect();
            (x, y)
        })
        .collect()
}

pub fn verify_particles(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (delta, t) = model.pair(s)?;
    let (spec, kappa) = model.particles()?;
    let pairs = match (&s.x, &s.y) {
        (Some(x), Some(y)) => vec![(
            point(&Some(x.clone()), "x", spec.state_len())?,
            point(&Some(y.clone()), "y", spec.state_len())?,
        )],
        _ => particle_pairs(spec.state_len(), kappa.r_star(), s.pairs.unwrap_or(20), s.seed()),
    };
    let est = estimator(s, EstimatorChoice::Mc, 100_000);
    report("particles", particle_contraction(spec, kappa, delta, t, &pairs, est)?)
}

pub fn verify_w2_envelope(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (delta, t) = model.pair(s)?;
    let (drift, cert, kappa) = model.single()?;
    let d = drift.dim();
    let x = s.x.clone().unwrap_or_else(|| vec![1.0; d]);
    let y = s.y.clone().unwrap_or_else(|| vec![-1.0; d]);
    let setup = EnvelopeSetup {
        mu0: law(point(&Some(x), "x", d)?, s.init_std),
        nu0: law(point(&Some(y), "y", d)?, s.init_std),
        k_max: s.k_max.unwrap_or(1000),
        replicas: s.replicas.unwrap_or(256),
        seed: s.seed(),
        record: None,
    };
    report(
        "w2-envelope",
        w2_contraction_envelope(drift, cert, kappa, delta, t, &setup)?,
    )
}

pub fn verify_poincare(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (delta, t) = model.pair(s)?;
    let (drift, cert, kappa) = model.single()?;
    let x = point(&s.x, "x", drift.dim())?;
    let family = TestFunction::default_family(drift.dim());
    report(
        "poincare",
        poincare_check(
            drift,
            cert,
            kappa,
            delta,
            t,
            s.k.unwrap_or(10),
            &x,
            &family,
            s.samples.unwrap_or(20_000),
            s.seed(),
        )?,
    )
}

pub fn verify_gaussian_base(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (delta, t) = model.pair(s)?;
    let (drift, _, _) = model.single()?;
    let x = point(&s.x, "x", drift.dim())?;
    report(
        "gaussian-base",
        gaussian_base_case(drift, delta, t, &x, s.samples.unwrap_or(100_000), s.seed())?,
    )
}

fn linear_c0(model: &Model) -> Result<f64> {
    match model.single()?.0.kind() {
        DriftKind::Linear { c0 } => Ok(*c0),
        _ => bail!("this check needs --drift linear"),
    }
}

pub fn verify_stationary_variance(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (delta, t) = model.pair(s)?;
    let c0 = linear_c0(&model)?;
    let consts = constants_at(&model, delta, t)?;
    report("stationary-variance", stationary_variance_check(c0, delta, t, &consts)?)
}

pub fn verify_grad_commute(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (delta, t) = model.pair(s)?;
    let (drift, _, _) = model.single()?;
    let x = point(&s.x, "x", drift.dim())?;
    let k = s.k.unwrap_or(10);
    let parts = TestFunction::default_family(drift.dim())
        .iter()
        .map(|f| gradient_commutation_linear(drift, delta, t, k, f, &x))
        .collect::<wclb_core::Result<Vec<_>>>()?;
    report("grad-commute", VerificationReport::combine("grad-commute", parts))
}

pub fn verify_concentration(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (delta, t) = model.pair(s)?;
    let (drift, cert, kappa) = model.single()?;
    let x = point(&s.x, "x", drift.dim())?;
    let setup = ConcentrationSetup {
        init: law(x, s.init_std),
        observable: Observable::Coordinate {
            index: s.index.unwrap_or(0),
        },
        n: s.n.unwrap_or(100),
        u: s.u.clone().unwrap_or_else(|| vec![0.0, 1e-3, 1e-2, 5e-2]),
        runs: s.runs.unwrap_or(10_000),
        seed: s.seed(),
        overrides: ConcentrationOverrides {
            theta: s.theta,
            c: s.c_local,
            m: s.m,
        },
    };
    report(
        "concentration",
        concentration_experiment(drift, cert, kappa, delta, t, &setup)?,
    )
}

pub fn verify_entropy(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let c0 = linear_c0(&model)?;
    let d = model.state_len();
    let x = point(&s.x, "x", d)?;
    let y = s.y.clone().unwrap_or_else(|| vec![1.0; d]);
    let y = point(&Some(y), "y", d)?;
    report(
        "entropy-check",
        entropy_check_linear(
            c0,
            need(&s.delta, "delta")?,
            need(&s.t, "T")?,
            s.n.unwrap_or(100),
            s.horizon.unwrap_or(1.0),
            &x,
            &y,
        )?,
    )
}

// ---------------------------------------------------------------------------
// bounds

#[derive(Serialize)]
struct TailRow {
    u: f64,
    bound: f64,
}

pub fn bounds_tail(s: &Settings) -> Result<Artifact> {
    let us = need(&s.u, "u")?;
    let base = ConcentrationInput {
        n: need(&s.n, "n")?,
        u: 0.0,
        theta: need(&s.theta, "theta")?,
        c: need(&s.c_local, "c-local")?,
        c0: need(&s.c_init, "c-init")?,
        m: need(&s.m, "m")?,
    };
    let rows = us
        .iter()
        .map(|&u| {
            Ok(TailRow {
                u,
                bound: concentration_tail_bound(&ConcentrationInput { u, ..base })?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("u,bound\n");
    rows.iter()
        .for_each(|r| csv.push_str(&format!("{:e},{:e}\n", r.u, r.bound)));
    Artifact::new("tail", &serde_json::json!({ "input": base, "rows": rows }), Some(csv))
}

pub fn bounds_ci(s: &Settings) -> Result<Artifact> {
    let inp = ConfidenceInput {
        t_horizon: need(&s.t_horizon, "t-horizon")?,
        h: need(&s.h, "h")?,
        temperature: need(&s.t, "T")?,
        c0: need(&s.c_init, "c-init")?,
        m: need(&s.m, "m")?,
    };
    inp.validate()?;
    let two = s.two_sided.unwrap_or(true);
    let mut out = serde_json::json!({ "input": inp, "two_sided": two });
    if let Some(delta) = s.delta {
        out["steps"] = inp.steps(delta).into();
    }
    if let Some(alpha) = s.alpha {
        out["alpha"] = alpha.into();
        out["half_width"] = inp.half_width(alpha, two)?.into();
    }
    if let Some(us) = &s.u {
        let rows = us
            .iter()
            .map(|&u| {
                Ok(TailRow {
                    u,
                    bound: inp.bound(u, two)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out["rows"] = serde_json::to_value(rows)?;
    }
    if s.alpha.is_none() && s.u.is_none() {
        bail!("give --alpha for a half-width or --u for tail bounds");
    }
    Artifact::flat("ci", &out)
}

pub fn bounds_bias(s: &Settings) -> Result<Artifact> {
    let terms = bias_terms(
        need(&s.m, "m")?,
        need(&s.n, "n")?,
        need(&s.theta, "theta")?,
        need(&s.w1, "w1")?,
        Provenance::Formula,
        s.c2,
        s.delta.unwrap_or(0.0),
    )?;
    Artifact::flat("bias", &terms)
}

pub fn bounds_kl(s: &Settings) -> Result<Artifact> {
    let model = Model::build(s)?;
    let (drift, cert, _) = model.single()?;
    let d = drift.dim();
    let x = point(&s.x, "x", d)?;
    let y = point(&s.y, "y", d)?;
    let kl = one_step_kl(
        drift,
        s.l_b.unwrap_or(cert.lb),
        need(&s.delta, "delta")?,
        need(&s.t, "T")?,
        &x,
        &y,
    )?;
    Artifact::flat("kl", &kl)
}

pub fn bounds_entropy(s: &Settings) -> Result<Artifact> {
    let x = need(&s.x, "x")?;
    let y = point(&s.y, "y", x.len())?;
    let inp = EntropyInput {
        n: need(&s.n, "n")?,
        delta: need(&s.delta, "delta")?,
        t: need(&s.t, "T")?,
        l_b: need(&s.l_b, "l-b")?,
        hessian_lipschitz_c: s.hessian_c.unwrap_or(0.0),
        horizon: need(&s.horizon, "horizon")?,
        d: x.len(),
    };
    let bound = entropy_bound_n_step(&inp, &x, &y)?;
    Artifact::flat(
        "entropy",
        &serde_json::json!({ "input": inp, "delta_gate": inp.delta_gate(), "bound": bound }),
    )
}
