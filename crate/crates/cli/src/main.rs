//! `wclb`: constants, simulations, transport distances, verifications and
//! bounds from the command line.
//!
//! Exit status: 0 when every check passes, 2 when a verification fails or is
//! refused for an inadmissible `(δ, T)`, 1 on usage or configuration errors.

mod commands;
mod model;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Parser, Subcommand};

use output::Artifact;
use settings::Settings;

#[derive(Parser)]
#[command(name = "wclb", version, about = "Wasserstein contraction laboratory")]
struct Cli {
    /// JSON config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Thresholds, rates and gates at (delta, T), or a solved pair.
    Constants(Settings),
    /// The weight function.
    Kappa {
        #[command(subcommand)]
        action: KappaCmd,
    },
    /// Euler chains: a replica cloud, or coupled pairs when --y is given.
    Simulate(Settings),
    /// Exact transport between two CSV point clouds of equal size.
    Ot(Settings),
    /// Numerical verification of a contraction or inequality.
    Verify {
        #[command(subcommand)]
        claim: VerifyCmd,
    },
    /// Closed-form bounds.
    Bounds {
        #[command(subcommand)]
        kind: BoundsCmd,
    },
    /// Prints the JSON schema of config files.
    Schema,
}

#[derive(Subcommand)]
enum KappaCmd {
    /// Value and gradient at --x.
    Eval(Settings),
    /// Radial profile table up to --r-max.
    Profile(Settings),
}

#[derive(Subcommand)]
enum VerifyCmd {
    KappaConditions(Settings),
    DriftCertificate(Settings),
    RhoOnestep(Settings),
    Particles(Settings),
    W2Envelope(Settings),
    Poincare(Settings),
    GaussianBase(Settings),
    StationaryVariance(Settings),
    GradCommute(Settings),
    Concentration(Settings),
    Entropy(Settings),
}

#[derive(Subcommand)]
enum BoundsCmd {
    Tail(Settings),
    Ci(Settings),
    Bias(Settings),
    Kl(Settings),
    Entropy(Settings),
}

type Runner = fn(&Settings) -> Result<Artifact>;

fn dispatch(command: Command) -> Option<(&'static str, Runner, Settings, bool)> {
    use commands::*;
    Some(match command {
        Command::Schema => return None,
        Command::Constants(s) => ("constants", constants as Runner, s, false),
        Command::Kappa { action } => match action {
            KappaCmd::Eval(s) => ("kappa eval", kappa_eval, s, false),
            KappaCmd::Profile(s) => ("kappa profile", kappa_profile, s, false),
        },
        Command::Simulate(s) => ("simulate", simulate, s, false),
        Command::Ot(s) => ("ot", ot, s, false),
        Command::Verify { claim } => {
            let (name, run, s): (_, Runner, _) = match claim {
                VerifyCmd::KappaConditions(s) => ("verify kappa-conditions", verify_kappa_conditions, s),
                VerifyCmd::DriftCertificate(s) => ("verify drift-certificate", verify_certificate, s),
                VerifyCmd::RhoOnestep(s) => ("verify rho-onestep", verify_rho_onestep, s),
                VerifyCmd::Particles(s) => ("verify particles", verify_particles, s),
                VerifyCmd::W2Envelope(s) => ("verify w2-envelope", verify_w2_envelope, s),
                VerifyCmd::Poincare(s) => ("verify poincare", verify_poincare, s),
                VerifyCmd::GaussianBase(s) => ("verify gaussian-base", verify_gaussian_base, s),
                VerifyCmd::StationaryVariance(s) => ("verify stationary-variance", verify_stationary_variance, s),
                VerifyCmd::GradCommute(s) => ("verify grad-commute", verify_grad_commute, s),
                VerifyCmd::Concentration(s) => ("verify concentration", verify_concentration, s),
                VerifyCmd::Entropy(s) => ("verify entropy", verify_entropy, s),
            };
            (name, run, s, true)
        }
        Command::Bounds { kind } => match kind {
            BoundsCmd::Tail(s) => ("bounds tail", bounds_tail, s, false),
            BoundsCmd::Ci(s) => ("bounds ci", bounds_ci, s, false),
            BoundsCmd::Bias(s) => ("bounds bias", bounds_bias, s, false),
            BoundsCmd::Kl(s) => ("bounds kl", bounds_kl, s, false),
            BoundsCmd::Entropy(s) => ("bounds entropy", bounds_entropy, s, false),
        },
    })
}

fn threads(s: &Settings) -> Result<usize> {
    let from_env = match std::env::var("WCLB_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| anyhow::anyhow!("WCLB_THREADS must be a positive integer, got {v:?}"))?,
        ),
        Err(_) => None,
    };
    let k = s.threads.or(from_env).unwrap_or(0);
    rayon::ThreadPoolBuilder::new().num_threads(k).build_global()?;
    Ok(rayon::current_num_threads())
}

/// True when the failure is a refused verification rather than bad input.
fn refused(err: &anyhow::Error) -> bool {
    matches!(
        err.downcast_ref::<wclb_core::Error>(),
        Some(wclb_core::Error::Inadmissible(_) | wclb_core::Error::UndefinedRadius(_))
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let Some((name, run, flags, is_verify)) = dispatch(cli.command) else {
        print!("{}", settings::schema());
        return ExitCode::SUCCESS;
    };
    let s = match cli.config.as_deref().map(Settings::from_file).transpose() {
        Ok(file) => file.unwrap_or_default().overlay(&flags),
        Err(e) => Err(e),
    };
    let s = match s.and_then(|s| s.check_experiment(name).map(|_| s)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let n_threads = match threads(&s) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let start = Instant::now();
    let result = run(&s).and_then(|art| {
        output::write(&s, &art, name, start.elapsed(), n_threads)?;
        Ok(art.pass)
    });
    match result {
        Ok(Some(false)) => ExitCode::from(2),
        Ok(_) => ExitCode::SUCCESS,
        Err(e) if is_verify && refused(&e) => {
            eprintln!("error: {e:#}");
            for line in commands::gate_diagnostics(&s) {
                eprintln!("{line}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
