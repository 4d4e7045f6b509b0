//! Acceptance suite: one line per criterion, non-zero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use wclb_core::analysis::{
    gaussian_base_case, one_step_rho_contraction, particle_contraction, poincare_check, regime_pairs,
    stationary_variance_check, w2_contraction_envelope, EnvelopeSetup, TestFunction,
};
use wclb_core::bounds::{
    concentration_experiment, concentration_tail_bound, entropy_bound_n_step, entropy_check_linear, one_step_kl,
    ConcentrationInput, ConcentrationSetup, EntropyInput, Observable,
};
use wclb_core::constants::{delta4, single_chain_constants};
use wclb_core::drift::{CertifyMode, DriftSpec, NumericOptions};
use wclb_core::kappa::{build_kappa, verify_kappa_conditions, Estimator, KappaFn, KappaGrid, KappaOverrides};
use wclb_core::presets;
use wclb_core::rng::NoiseStream;
use wclb_core::sim::{simulate_coupled, ChainConfig, CoupledOptions, EmpiricalMeasure, InitialLaw, Record, System};
use wclb_core::transport::{brute_force_wasserstein, wasserstein, CostSpec};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn unit_kappa(d: usize) -> KappaFn {
    let drift = DriftSpec::linear(d, 1.0).unwrap();
    let cert = drift.certify(&CertifyMode::Analytic).unwrap();
    build_kappa(&cert, d, KappaOverrides::default()).unwrap()
}

/// Uniform point in the ball of radius `r`.
fn ball_point(s: &NoiseStream, i: u32, d: usize, r: f64) -> Vec<f64> {
    let mut z = vec![0.0; d];
    s.normals(0, i, 0, &mut z);
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rad = r * s.uniform(0, i, 1, 0).powf(1.0 / d as f64);
    z.iter().map(|v| v / n * rad).collect()
}

fn criterion_1() -> Outcome {
    let k = unit_kappa(2);
    let p = k.params();
    ensure((k.alpha1() - 4862.4).abs() < 1e-9, format!("alpha1 = {}", k.alpha1()))?;
    ensure((k.r_star() - 405.2).abs() < 1e-9, format!("R* = {}", k.r_star()))?;
    ensure(k.grad_sup_norm() == 24.0, format!("grad sup = {}", k.grad_sup_norm()))?;
    // Independent maximisation of |κ'| on a radial grid of 10⁶ points through r = 2R.
    let n = 1_000_000;
    let mut max_slope: f64 = 0.0;
    for i in 0..=n {
        max_slope = max_slope.max(k.profile_deriv(4.0 * p.r * i as f64 / n as f64).abs());
        let r = 2.0 * k.r_star() * i as f64 / n as f64;
        ensure(k.profile(r) >= 0.0, format!("kappa({r}) < 0"))?;
        if r > k.r_star() {
            ensure(k.profile(r) == 0.0, format!("kappa({r}) != 0 beyond R*"))?;
        }
    }
    ensure((max_slope - 24.0).abs() <= 1e-9, format!("grid max slope {max_slope}"))?;

    let s = NoiseStream::new(11);
    let mut worst_seam: f64 = 0.0;
    let h = 1e-6;
    for (j, seam) in [2.0 * p.r, k.r_star()].into_iter().enumerate() {
        for (m, off) in [-1e-3, -1e-7, 0.0, 1e-7, 1e-3].into_iter().enumerate() {
            for rep in 0..8u32 {
                let dir = ball_point(&s, 1000 * j as u32 + 100 * m as u32 + rep, 2, 1.0);
                let nd = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let x: Vec<f64> = dir.iter().map(|v| v / nd * (seam + off)).collect();
                let g = k.grad(&x).unwrap();
                for c in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[c] += h;
                    xm[c] -= h;
                    let fd = (k.eval(&xp).unwrap() - k.eval(&xm).unwrap()) / (2.0 * h);
                    worst_seam = worst_seam.max((fd - g[c]).abs() / g[c].abs().max(1.0));
                }
            }
        }
    }
    ensure(worst_seam <= 1e-6, format!("seam gradient mismatch {worst_seam:e}"))?;

    // κ - (L/2d)|x|² is concave along random segments.
    let phi = |x: &[f64]| k.eval(x).unwrap() - p.l / (2.0 * p.d as f64) * x.iter().map(|v| v * v).sum::<f64>();
    let mut worst_concavity: f64 = 0.0;
    for i in 0..1000u32 {
        let a = ball_point(&s, 10_000 + 2 * i, 2, 1.2 * k.r_star());
        let b = ball_point(&s, 10_001 + 2 * i, 2, 1.2 * k.r_star());
        let (fa, fb) = (phi(&a), phi(&b));
        for q in 1..10 {
            let w = q as f64 / 10.0;
            let x: Vec<f64> = a.iter().zip(&b).map(|(u, v)| (1.0 - w) * u + w * v).collect();
            worst_concavity = worst_concavity.max((1.0 - w) * fa + w * fb - phi(&x));
        }
    }
    ensure(
        worst_concavity <= 1e-10,
        format!("concavity violated by {worst_concavity:e}"),
    )?;
    Ok(format!(
        "alpha1 = {:.1}, R* = {:.1}, |grad kappa| = 24, seam err {worst_seam:.1e}, concavity slack {worst_concavity:.1e}",
        k.alpha1(),
        k.r_star()
    ))
}

fn criterion_2() -> Outcome {
    let e = presets::linear(2, 1.0).map_err(|e| e.to_string())?;
    let t = single_chain_constants(&e.drift, &e.cert, &e.kappa, e.delta, e.t)
        .map_err(|e| e.to_string())?
        .t0
        .ok_or("T0 undefined")?;
    let delta = delta4(e.cert.r, 2, t) / 2.0;
    let grid = KappaGrid::radial(&e.kappa, 50, 200);
    let report =
        verify_kappa_conditions(&e.kappa, delta, t, None, Estimator::Quadrature, &grid).map_err(|e| e.to_string())?;
    let max_err = report.rows.iter().map(|r| r.margin).fold(0.0f64, f64::max);
    ensure(
        max_err <= 1e-8 * report.rows.iter().map(|r| r.bound.abs()).fold(0.0, f64::max).max(1.0),
        format!("quadrature error {max_err:e}"),
    )?;
    ensure(report.pass, report.summary_line())?;
    Ok(format!(
        "{} rows at delta = {delta:.3e}, T = {t:.1}; worst {}",
        report.rows.len(),
        report.summary_line()
    ))
}

fn criterion_3() -> Outcome {
    let s = NoiseStream::new(3);
    let kappa = unit_kappa(2);
    let costs = [CostSpec::Euclidean { p: 2.0 }, CostSpec::Rho { kappa, t: 50.0 }];
    let mut worst: f64 = 0.0;
    for inst in 0..100u32 {
        let scale = [1.0, 10.0, 300.0, 600.0][inst as usize % 4];
        let pts = |side: u32| -> Vec<f64> {
            (0..10)
                .map(|c| scale * (2.0 * s.uniform(inst, side, 0, c) - 1.0))
                .collect()
        };
        let mu = EmpiricalMeasure::new(2, pts(0)).unwrap();
        let nu = EmpiricalMeasure::new(2, pts(1)).unwrap();
        for cost in &costs {
            let a = wasserstein(&mu, &nu, cost).map_err(|e| e.to_string())?;
            let b = brute_force_wasserstein(&mu, &nu, cost).map_err(|e| e.to_string())?;
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    ensure(worst <= 1e-9, format!("solver differs from brute force by {worst:e}"))?;
    Ok(format!("200 instances, max deviation {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let e = presets::linear(2, 1.0).map_err(|e| e.to_string())?;
    let x0: [f64; 2] = [0.8, -1.3];
    let y0 = [-2.1, 0.4];
    let d0 = (x0[0] - y0[0]).hypot(x0[1] - y0[1]);
    let mut worst: f64 = 0.0;
    for (delta, t) in [(e.delta, e.t), (0.01, 1.0)] {
        let config = ChainConfig::new(System::Single(e.drift.clone()), delta, t, 1000, 5, 1).unwrap();
        let tr = simulate_coupled(
            &x0,
            &y0,
            &config,
            0,
            &CoupledOptions {
                record: Some(Record::All),
                kappa: None,
            },
        )
        .map_err(|e| e.to_string())?;
        let q = 1.0 - delta;
        for (j, &k) in tr.steps.iter().enumerate() {
            let expect = q.powi(k as i32) * d0;
            let scale = tr.x[j].iter().chain(&tr.y[j]).fold(1.0f64, |m, v| m.max(v.abs()));
            let tol = 64.0 * f64::EPSILON * (k.max(1) as f64) * scale;
            worst = worst.max((tr.distance[j] - expect).abs() / tol);
        }
    }
    ensure(worst <= 1.0, format!("coupled distance off by {worst:.2} tolerances"))?;
    let setup = EnvelopeSetup {
        mu0: InitialLaw::Gaussian {
            mean: vec![1.0, 0.0],
            std: 0.5,
        },
        nu0: InitialLaw::Gaussian {
            mean: vec![-1.0, 2.0],
            std: 0.3,
        },
        k_max: 1000,
        replicas: 256,
        seed: 9,
        record: None,
    };
    let report =
        w2_contraction_envelope(&e.drift, &e.cert, &e.kappa, e.delta, e.t, &setup).map_err(|e| e.to_string())?;
    ensure(report.pass, report.summary_line())?;
    Ok(format!(
        "distance identity within {worst:.2} of 64 eps k scale; envelope {}",
        report.summary_line()
    ))
}

fn criterion_5() -> Outcome {
    let e = presets::perturbed_linear(2, 1.0, 2.0, 4.0, NumericOptions::default()).map_err(|e| e.to_string())?;
    let pairs = regime_pairs(e.cert.r, e.kappa.r_star(), 2, 60);
    let report = one_step_rho_contraction(
        &e.drift,
        &e.cert,
        &e.kappa,
        e.delta,
        e.t,
        &pairs,
        Estimator::MonteCarlo {
            samples: 100_000,
            seed: 21,
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(report.pass, report.summary_line())?;
    Ok(format!(
        "60 pairs, delta = {:.3e}, T = {:.4e}; {}",
        e.delta,
        e.t,
        report.summary_line()
    ))
}

fn criterion_6() -> Outcome {
    let ex = presets::mean_field_game(2, 0.02, 1.0).map_err(|e| e.to_string())?;
    let consts =
        wclb_core::constants::particle_constants(&ex.spec, &ex.kappa, ex.delta, ex.t).map_err(|e| e.to_string())?;
    let pc = consts.particle.as_ref().unwrap();
    ensure(pc.sufficient_condition, "sufficient condition on C_G fails")?;
    let s = NoiseStream::new(6);
    let rs = ex.kappa.r_star();
    let scales = [0.5, 2.0, 0.5 * rs, 1.2 * rs];
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..20u32)
        .map(|i| {
            let a = scales[i as usize % 4];
            let b = scales[(i as usize / 4) % 4];
            let x = (0..4).map(|c| a * (2.0 * s.uniform(i, 0, 0, c) - 1.0)).collect();
            let y = (0..4).map(|c| b * (2.0 * s.uniform(i, 1, 0, c) - 1.0)).collect();
            (x, y)
        })
        .collect();
    let report = particle_contraction(
        &ex.spec,
        &ex.kappa,
        ex.delta,
        ex.t,
        &pairs,
        Estimator::MonteCarlo {
            samples: 100_000,
            seed: 61,
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(report.pass, report.summary_line())?;
    Ok(format!(
        "net rate {:.4}, delta = {:.3e}; {}",
        pc.net_rate_ratio,
        ex.delta,
        report.summary_line()
    ))
}

fn criterion_7() -> Outcome {
    let e = presets::linear(2, 1.0).map_err(|e| e.to_string())?;
    let base = gaussian_base_case(&e.drift, e.delta, e.t, &[0.5, -0.3], 100_000, 71).map_err(|e| e.to_string())?;
    ensure(base.pass, format!("base case: {}", base.summary_line()))?;
    let consts = single_chain_constants(&e.drift, &e.cert, &e.kappa, e.delta, e.t).map_err(|e| e.to_string())?;
    let stat = stationary_variance_check(1.0, e.delta, e.t, &consts).map_err(|e| e.to_string())?;
    ensure(stat.pass, format!("stationary: {}", stat.summary_line()))?;
    let p = presets::perturbed_linear(2, 1.0, 2.0, 4.0, NumericOptions::default()).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for ex in [&e, &p] {
        let family = TestFunction::default_family(2);
        for k in [1, 10, 100] {
            let r = poincare_check(
                &ex.drift,
                &ex.cert,
                &ex.kappa,
                ex.delta,
                ex.t,
                k,
                &[1.5, -0.5],
                &family,
                20_000,
                7 + k as u64,
            )
            .map_err(|e| e.to_string())?;
            ensure(r.pass, format!("{} k = {k}: {}", ex.name, r.summary_line()))?;
            checked += r.rows.len();
        }
    }
    Ok(format!(
        "base case within 3 SE, stationary variance {:.4e} <= {:.4e}, {checked} MC rows pass",
        stat.estimate, stat.bound
    ))
}

fn criterion_8() -> Outcome {
    let inp = ConcentrationInput {
        n: 100,
        u: 0.0,
        theta: 0.05,
        c: 0.01,
        c0: 0.25,
        m: 2.0,
    };
    ensure(concentration_tail_bound(&inp).unwrap() == 1.0, "u = 0 limit")?;
    ensure(
        concentration_tail_bound(&ConcentrationInput {
            u: f64::INFINITY,
            ..inp
        })
        .unwrap()
            == 0.0,
        "u -> infinity limit",
    )?;
    let e = presets::linear(2, 1.0).map_err(|e| e.to_string())?;
    let setup = ConcentrationSetup {
        init: InitialLaw::Gaussian {
            mean: vec![1.0, 0.0],
            std: 0.1,
        },
        observable: Observable::Coordinate { index: 0 },
        n: 100,
        u: vec![0.0, 1e-3, 1e-2, 5e-2, 1e3],
        runs: 10_000,
        seed: 8,
        overrides: Default::default(),
    };
    let report =
        concentration_experiment(&e.drift, &e.cert, &e.kappa, e.delta, e.t, &setup).map_err(|e| e.to_string())?;
    ensure(report.pass, report.summary_line())?;
    let last = report.rows.last().unwrap();
    ensure(last.estimate == 0.0, "empirical tail at huge u is not zero")?;
    Ok(format!(
        "10000 runs, {} u values; {}",
        report.rows.len(),
        report.summary_line()
    ))
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_9() -> Outcome {
    let sweep = [
        (2usize, 0.001),
        (2, 0.008),
        (5, 0.004),
        (10, 0.005),
        (25, 0.002),
        (50, 0.008),
        (100, 0.005),
        (150, 0.006),
        (199, 0.005),
        (1000, 0.0009),
    ];
    for (n, delta) in sweep {
        let r = entropy_check_linear(1.0, delta, 1.0, n, 1.0, &[0.0], &[1.0]).map_err(|e| e.to_string())?;
        ensure(r.pass, format!("n = {n}, delta = {delta}: {}", r.summary_line()))?;
        // Oracle: step the mean gap and the variance one transition at a time.
        let (mut gap, mut var) = (1.0f64, 0.0f64);
        for _ in 0..n {
            gap *= 1.0 - delta;
            var = (1.0 - delta).powi(2) * var + 2.0 * delta;
        }
        let kl = gap * gap / (2.0 * var);
        ensure(
            (kl - r.estimate).abs() <= 1e-12 * kl,
            format!("KL oracle mismatch at n = {n}"),
        )?;
    }
    let reference = entropy_check_linear(1.0, 0.005, 1.0, 100, 1.0, &[0.0], &[1.0]).unwrap();
    ensure(
        (reference.estimate - 0.289_112_194_838).abs() < 1e-11,
        format!("KL = {}", reference.estimate),
    )?;
    let bound = entropy_bound_n_step(
        &EntropyInput {
            n: 100,
            delta: 0.005,
            t: 1.0,
            l_b: 1.0,
            hessian_lipschitz_c: 0.0,
            horizon: 1.0,
            d: 1,
        },
        &[0.0],
        &[1.0],
    )
    .unwrap();
    ensure((bound.point_bound - 1.5).abs() < 1e-12, "bound at the reference point")?;

    // One-step KL against a direct integral of the log-density ratio.
    let drift = DriftSpec::linear(1, 1.0).unwrap();
    let (delta, t, x, y) = (0.1, 1.0, 0.0, 1.0);
    let kl = one_step_kl(&drift, 1.0, delta, t, &[x], &[y]).unwrap();
    let var = 2.0 * delta * t;
    let (mx, my) = (x - delta * x, y - delta * y);
    let dens = |z: f64, m: f64| (-(z - m).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    let sd = var.sqrt();
    let numeric = simpson(
        |z| {
            let p = dens(z, mx);
            if p == 0.0 {
                0.0
            } else {
                p * (p / dens(z, my)).ln()
            }
        },
        mx - 30.0 * sd,
        mx + 30.0 * sd,
        200_000,
    );
    ensure(
        (kl.exact - numeric).abs() <= 1e-6,
        format!("one-step KL {} vs {numeric}", kl.exact),
    )?;
    Ok(format!(
        "10-point sweep passes; KL(n=100) = {:.7} <= 1.5; one-step KL {:.6} vs integral {numeric:.6}",
        reference.estimate, kl.exact
    ))
}

fn criterion_10() -> Outcome {
    let run = |threads: usize| -> Result<String, String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| {
            let e = presets::linear(2, 1.0).map_err(|e| e.to_string())?;
            let pairs = regime_pairs(e.cert.r, e.kappa.r_star(), 2, 10);
            let a = one_step_rho_contraction(
                &e.drift,
                &e.cert,
                &e.kappa,
                e.delta,
                e.t,
                &pairs,
                Estimator::MonteCarlo {
                    samples: 20_000,
                    seed: 4,
                },
            )
            .map_err(|e| e.to_string())?;
            let b = w2_contraction_envelope(
                &e.drift,
                &e.cert,
                &e.kappa,
                e.delta,
                e.t,
                &EnvelopeSetup {
                    mu0: InitialLaw::Gaussian {
                        mean: vec![0.0, 0.0],
                        std: 1.0,
                    },
                    nu0: InitialLaw::Dirac { point: vec![3.0, 0.0] },
                    k_max: 50,
                    replicas: 64,
                    seed: 2,
                    record: None,
                },
            )
            .map_err(|e| e.to_string())?;
            let c = concentration_experiment(
                &e.drift,
                &e.cert,
                &e.kappa,
                e.delta,
                e.t,
                &ConcentrationSetup {
                    init: InitialLaw::Dirac { point: vec![1.0, 1.0] },
                    observable: Observable::Norm,
                    n: 20,
                    u: vec![0.0, 0.01],
                    runs: 500,
                    seed: 3,
                    overrides: Default::default(),
                },
            )
            .map_err(|e| e.to_string())?;
            serde_json::to_string(&(a, b, c)).map_err(|e| e.to_string())
        })
    };
    let one = run(1)?;
    let four = run(4)?;
    let seven = run(7)?;
    ensure(one == four && one == seven, "reports differ across thread counts")?;
    Ok(format!("{} bytes identical across 1, 4 and 7 threads", one.len()))
}

fn main() {
    type Criterion = (usize, &'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 10] = [
        (1, "kappa construction", criterion_1, Duration::from_secs(1)),
        (2, "kappa expectation conditions", criterion_2, Duration::from_secs(30)),
        (3, "exact optimal transport", criterion_3, Duration::from_secs(5)),
        (4, "linear-drift contraction", criterion_4, Duration::from_secs(5)),
        (5, "one-step rho contraction", criterion_5, Duration::from_secs(600)),
        (6, "particle contraction", criterion_6, Duration::from_secs(600)),
        (7, "Poincare inequality", criterion_7, Duration::from_secs(300)),
        (8, "concentration", criterion_8, Duration::from_secs(300)),
        (9, "entropy", criterion_9, Duration::from_secs(60)),
        (10, "determinism", criterion_10, Duration::from_secs(600)),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f, budget) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over time budget {budget:?}")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] criterion {id:>2} {name}: {detail} ({:.2}s)",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
