//! Command-line harness: single runs and the convergence, constraint and
//! CFL studies, each writing CSV tables into the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use llgfem::experiments::{
    bounds_csv, cmd_cfl, cmd_constraint, cmd_conv_space, cmd_conv_time, cmd_run, run_summary_csv, StudyConfig,
    SolverSection,
};
use llgfem::Error;

#[derive(Parser, Debug)]
#[command(name = "llgfem", version, about = "Tangent-plane finite element integrators for the LLG equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One simulation per scheme: per-step trajectory and a summary
    Run(Options),
    /// Errors and orders under time-step halving on a fixed mesh
    ConvTime(Options),
    /// Errors and orders under uniform mesh refinement at a fixed step
    ConvSpace(Options),
    /// Deviation from unit length and the regularity sums along a step ladder
    Constraint(Options),
    /// The indicator sqrt(eta0² + eta_N²) along a ladder of steps tied to h
    Cfl(Options),
}

#[derive(Args, Debug, Clone)]
struct Options {
    /// TOML file with study settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// radial, manufactured or blowup
    #[arg(long)]
    problem: Option<String>,
    /// Comma-separated list of bdf2, tps, mid
    #[arg(long, value_delimiter = ',')]
    scheme: Option<Vec<String>>,
    /// halved or criss-cross
    #[arg(long)]
    mesh: Option<String>,
    /// Mesh level: 2^l x 2^l squares
    #[arg(long)]
    level: Option<u32>,
    /// Comma-separated mesh levels (conv-space, cfl)
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<u32>>,
    /// Time step, or the coarsest step of a halving ladder
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated explicit time-step ladder
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    /// Step as a function of h, e.g. h/10 or h^2/10; for cfl also a list
    /// or one of the ladders `fractions`, `powers`
    #[arg(long)]
    tau_rule: Option<String>,
    /// Number of halvings of the coarsest step
    #[arg(long)]
    bisections: Option<u32>,
    /// Number of time steps
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda_sq: Option<f64>,
    #[arg(long)]
    final_time: Option<f64>,
    /// Output directory [default: results]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep points run concurrently
    #[arg(long)]
    jobs: Option<usize>,
    /// Use the full-size ladders instead of the desk-scale ones
    #[arg(long)]
    full: bool,
    /// krylov, dense or auto
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    solver_tol: Option<f64>,
    #[arg(long)]
    solver_maxit: Option<usize>,
    /// Recorded only; the computations are deterministic
    #[arg(long)]
    seed: Option<u64>,
}

impl Options {
    fn study_config(&self) -> Result<StudyConfig, Error> {
        let base = match &self.config {
            Some(path) => StudyConfig::load(path)?,
            None => StudyConfig::default(),
        };
        let flags = StudyConfig {
            problem: self.problem.clone(),
            schemes: self.scheme.clone(),
            mesh: self.mesh.clone(),
            level: self.level,
            levels: self.levels.clone(),
            tau: self.tau,
            taus: self.taus.clone(),
            tau_rule: self.tau_rule.clone(),
            bisections: self.bisections,
            steps: self.steps,
            alpha: self.alpha,
            lambda_sq: self.lambda_sq,
            final_time: self.final_time,
            out: self.out.clone(),
            jobs: self.jobs,
            full: self.full.then_some(true),
            seed: self.seed,
            solver: SolverSection {
                method: self.solver.clone(),
                tolerance: self.solver_tol,
                max_iterations: self.solver_maxit,
                ..Default::default()
            },
            ..Default::default()
        };
        Ok(base.overlaid(flags))
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn fmt_orders(orders: &[Option<f64>]) -> String {
    let parts: Vec<String> = orders.iter().map(|o| o.map_or("-".into(), |x| format!("{x:.3}"))).collect();
    parts.join(" ")
}

fn execute(command: &Command) -> Result<(), Error> {
    let (Command::Run(opts)
    | Command::ConvTime(opts)
    | Command::ConvSpace(opts)
    | Command::Constraint(opts)
    | Command::Cfl(opts)) = command;
    let cfg = opts.study_config()?;
    // reject bad input before any long computation
    cfg.benchmark()?;
    cfg.linear()?;
    cfg.jobs()?;
    let out = cfg.output_dir();
    let results = match command {
        Command::Run(_) => Results::Run(cmd_run(&cfg)?),
        Command::ConvTime(_) => Results::Convergence("conv_time", cmd_conv_time(&cfg)?),
        Command::ConvSpace(_) => Results::Convergence("conv_space", cmd_conv_space(&cfg)?),
        Command::Constraint(_) => Results::Constraint(cmd_constraint(&cfg)?),
        Command::Cfl(_) => Results::Cfl(cmd_cfl(&cfg)?),
    };
    fs::create_dir_all(&out)?;
    match results {
        Results::Run(trajectories) => {
            for tr in &trajectories {
                let s = tr.scheme();
                write(&out, &format!("trajectory_{s}.csv"), &tr.to_csv())?;
                write(&out, &format!("summary_{s}.csv"), &run_summary_csv(tr))?;
            }
        }
        Results::Convergence(stem, tables) => {
            for t in &tables {
                write(&out, &format!("{stem}_{}.csv", t.scheme), &t.to_csv())?;
                println!("{}: eoc_l2 {}  eoc_h1 {}", t.scheme, fmt_orders(&t.eoc_l2()), fmt_orders(&t.eoc_h1()));
                if let Some(k) = t.stagnation_l2 {
                    println!("{}: L2 order stagnates from row {k}", t.scheme);
                }
                if let Some(k) = t.stagnation_h1 {
                    println!("{}: H1 order stagnates from row {k}", t.scheme);
                }
            }
        }
        Results::Constraint(tables) => {
            for t in &tables {
                write(&out, &format!("constraint_{}.csv", t.scheme), &t.to_csv())?;
                println!("{}: deviation eoc {}", t.scheme, fmt_orders(&t.eocs()));
            }
            write(&out, "bounds.csv", &bounds_csv(&tables))?;
        }
        Results::Cfl(tables) => {
            for t in &tables {
                write(&out, &format!("cfl_{}_h{:.5}.csv", t.scheme, t.h), &t.to_csv())?;
                println!("{} h={}: strictly decaying = {}", t.scheme, t.h, t.strictly_decaying());
            }
        }
    }
    Ok(())
}

enum Results {
    Run(Vec<llgfem::Trajectory>),
    Convergence(&'static str, Vec<llgfem::experiments::ConvergenceTable>),
    Constraint(Vec<llgfem::experiments::DeviationTable>),
    Cfl(Vec<llgfem::experiments::CflTable>),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                if let Some(step) = e.step_index() {
                    eprintln!("failed step: {step}");
                }
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
