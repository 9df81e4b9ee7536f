//! `delaygame`: scenario-driven runs of the delay-game pipeline.
//!
//! Exit codes: 0 success, 1 a verification or reproduction check failed,
//! 2 bad configuration or missing input, 3 divergence (partial output
//! written), 4 numerical instability in the grid solver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use delaygame::harness::{cmd_reach, cmd_repro, cmd_simulate, cmd_solve, cmd_verify, Figure, Scenario, VerifySuite};
use delaygame::Error;

#[derive(Parser)]
#[command(name = "delaygame", version, about = "Delay-robust feedback for coupled agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (flat TOML).
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,

    /// Built-in scenario: fig2, fig3, fig4, fig5 or smoke.
    #[arg(long)]
    preset: Option<String>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads for solves, sweeps and Monte-Carlo rollouts.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll the true delayed system and classify its stability.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Step-1 value dump, needed when the scenario uses value control.
        #[arg(long)]
        value_file: Option<PathBuf>,
    },
    /// Solve the stabilization game and dump the value function.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Worst-case terminal error under the extracted feedback and its safe set.
    Reach {
        #[command(flatten)]
        common: Common,
        /// Step-1 value dump written by `solve`.
        #[arg(long)]
        value_file: Option<PathBuf>,
    },
    /// Run one oracle suite: lemma1, theorem2, lk, hamiltonian or dde.
    Verify {
        suite: String,
        #[command(flatten)]
        common: Common,
    },
    /// Full pipeline for one figure: fig2, fig3, fig4 or fig5.
    Repro {
        figure: String,
        #[command(flatten)]
        common: Common,
    },
    /// Print a built-in scenario as TOML.
    Preset { name: String },
}

fn load(common: &Common, fallback: &str) -> Result<Scenario, Error> {
    let mut sc = match (&common.scenario, &common.preset) {
        (Some(path), _) => Scenario::load(path)?,
        (None, Some(name)) => Scenario::preset(name)?,
        (None, None) => Scenario::preset(fallback)?,
    };
    if let Some(seed) = common.seed {
        sc.seed = seed;
    }
    Ok(sc)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("out").join(default))
}

fn set_threads(common: &Common) -> Result<(), Error> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot set up {n} threads: {e}")))?;
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Precondition(_) | Error::Format(_) | Error::Io(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Instability { .. } => 4,
        _ => 1,
    }
}

fn with_value_file(mut sc: Scenario, value_file: Option<PathBuf>) -> Scenario {
    if let Some(p) = value_file {
        sc.value_file = Some(p.display().to_string());
    }
    sc
}

/// Runs the command; `Ok(false)` means the run completed but a check failed.
fn run(cmd: Command) -> Result<bool, Error> {
    match cmd {
        Command::Simulate { common, value_file } => {
            set_threads(&common)?;
            let sc = with_value_file(load(&common, "smoke")?, value_file);
            let out = out_dir(&common, "simulate");
            let s = cmd_simulate(&sc, &out)?;
            for p in &s.phases {
                println!(
                    "phase {} [{}, {}]: {} (envelope ratio {:.4}, max |e_p| {:.4})",
                    p.label, p.start, p.end, p.verdict.class, p.verdict.envelope_ratio, p.max_abs_ep
                );
            }
            println!("overall: {}; final |e_p| {:.3e}; max |u| {:.4}", s.overall.class, s.final_abs_ep, s.max_abs_u);
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Solve { common } => {
            set_threads(&common)?;
            let sc = load(&common, "smoke")?;
            let out = out_dir(&common, "solve");
            let s = cmd_solve(&sc, &out)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} nodes, {} steps to t = 0; V in [{:.4}, {:.4}]",
                s.nodes, s.steps, s.value_min, s.value_max
            );
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Reach { common, value_file } => {
            set_threads(&common)?;
            let sc = with_value_file(load(&common, "smoke")?, value_file);
            let out = out_dir(&common, "reach");
            let s = cmd_reach(&sc, &out)?;
            for (d, a) in &s.slice_areas {
                println!("d = {d:.4}: safe area {a:.4}");
            }
            println!("{} of {} nodes safe at threshold {}", s.safe_nodes, s.total_nodes, s.threshold);
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Verify { suite, common } => {
            set_threads(&common)?;
            let suite: VerifySuite = suite.parse()?;
            let sc = load(&common, "fig5")?;
            let out = out_dir(&common, &format!("verify_{suite}"));
            let r = cmd_verify(&sc, suite, &out)?;
            for c in &r.checks {
                println!("{c}");
            }
            Ok(r.passed())
        }
        Command::Repro { figure, common } => {
            set_threads(&common)?;
            let figure: Figure = figure.parse()?;
            let sc = load(&common, figure.name())?;
            let out = out_dir(&common, figure.name());
            let r = cmd_repro(&sc, figure, &out)?;
            for c in &r.criteria {
                println!("{c}");
            }
            println!("wrote {}", out.display());
            Ok(r.passed())
        }
        Command::Preset { name } => {
            print!("{}", Scenario::preset(&name)?.to_toml());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Divergence { partial: Some(p), .. } = &e {
                eprintln!("partial trajectory with {} samples was written", p.len());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
