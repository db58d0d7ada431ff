use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psm_cli::config::RunConfig;
use psm_cli::{cmd_eval, cmd_run, cmd_show, cmd_suite, exit_code_for, OutputPaths, Preset};
use psm_core::SolverKind;

#[derive(Parser)]
#[command(name = "psm", version, about = "Polynomial surrogate PDE solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem and append its record.
    Run(RunArgs),
    /// Run every built-in problem.
    Suite {
        #[arg(long, default_value = "smoke")]
        preset: Preset,
        /// Run problems concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long, default_value = "psm-results")]
        out: PathBuf,
    },
    /// Pretty-print records from a JSON-lines file.
    Show {
        path: PathBuf,
        /// Zero-based record index; all records if omitted.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Evaluate a saved surrogate at points from a CSV file.
    Eval {
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        points: PathBuf,
        /// Write to this file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file (`key = value` lines or JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in problem name (see `psm suite`).
    #[arg(long)]
    problem: Option<String>,
    /// ad, gf-implicit-euler, quasi-newton or newton.
    #[arg(long)]
    solver: Option<SolverKind>,
    /// Polynomial degree of the domain grid.
    #[arg(long)]
    n_domain: Option<usize>,
    /// Polynomial degree of the boundary face grids.
    #[arg(long)]
    n_boundary: Option<usize>,
    /// PDE loss metric, e.g. l2, h1, h-1-star, h-2-star-weak.
    #[arg(long)]
    pde_norm: Option<String>,
    /// Square the boundary cubature weights (weak boundary form).
    #[arg(long)]
    boundary_weak: Option<bool>,
    /// Initial implicit-Euler step size.
    #[arg(long)]
    tau: Option<f64>,
    /// Step-size multiplier after each accepted step (≥ 1).
    #[arg(long)]
    tau_growth: Option<f64>,
    /// Iteration cap for iterative solvers.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Convergence tolerance override.
    #[arg(long)]
    tol: Option<f64>,
    /// Uniform evaluation points per axis for the error metrics.
    #[arg(long)]
    eval_points: Option<usize>,
    /// Gauss–Newton preconditioner refresh period for quasi-Newton (0 = off).
    #[arg(long)]
    precondition_every: Option<usize>,
    /// Recorded with the results; all solvers are deterministic.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the reduced smoke-test degrees as defaults.
    #[arg(long)]
    smoke: bool,
    /// Directory for records and surrogates.
    #[arg(long, default_value = "psm-results")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.merge(&RunConfig {
            problem: self.problem.clone().unwrap_or_default(),
            solver: self.solver,
            n_domain: self.n_domain,
            n_boundary: self.n_boundary,
            pde_norm: self.pde_norm.clone(),
            boundary_weak: self.boundary_weak,
            tau: self.tau,
            tau_growth: self.tau_growth,
            max_iters: self.max_iters,
            tol: self.tol,
            eval_points: self.eval_points,
            precondition_every: self.precondition_every,
            seed: self.seed,
        });
        if let Some(n) = &cfg.pde_norm {
            n.parse::<psm_core::MetricSpec>()?;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => args
            .config()
            .and_then(|cfg| cmd_run(&cfg, &OutputPaths::new(&args.out), args.smoke)),
        Command::Suite {
            preset,
            parallel,
            out,
        } => cmd_suite(preset, parallel, &OutputPaths::new(out)).map(|(code, _)| code),
        Command::Show { path, index } => {
            cmd_show(&path, index, &mut std::io::stdout().lock()).map(|_| 0)
        }
        Command::Eval {
            surrogate,
            points,
            output,
        } => match output {
            Some(p) => std::fs::File::create(&p)
                .map_err(anyhow::Error::from)
                .and_then(|f| cmd_eval(&surrogate, &points, &mut std::io::BufWriter::new(f)))
                .map(|_| 0),
            None => cmd_eval(&surrogate, &points, &mut std::io::stdout().lock()).map(|_| 0),
        },
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
