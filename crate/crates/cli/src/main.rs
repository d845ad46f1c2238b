use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mixot_cli::run::{mesh_info, project_test};
use mixot_cli::{run_dual_comparison, run_refinement_study, run_solve, CliError, RunConfig, StudyReference};

#[derive(Parser)]
#[command(name = "mixot", version, about = "Dynamical optimal transport with mixed finite elements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one transport problem and write its artifacts.
    Solve { config: PathBuf },
    /// Repeat a solve on a sequence of n x n meshes.
    Study {
        config: PathBuf,
        /// Mesh sizes, e.g. `--levels 8,16,32`.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<usize>,
        /// Known transport distance; the finest level is used otherwise.
        #[arg(long)]
        reference: Option<f64>,
    },
    /// Residual curves of both dual orders against their own long-run references.
    Compare {
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 10_000)]
        reference_iterations: usize,
    },
    /// Print size and quality of a mesh file.
    MeshInfo { path: PathBuf },
    /// Check the projection properties on the configured problem.
    ProjectTest { config: PathBuf },
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Solve { config } => {
            let out = run_solve(&RunConfig::load(&config)?)?;
            let w = out.report.wasserstein.map_or("inf".to_string(), |w| format!("{w:.10e}"));
            println!(
                "W {w} iterations {} converged {} output {}",
                out.report.iterations,
                out.report.converged,
                out.output_dir.display()
            );
        }
        Command::Study { config, levels, reference } => {
            let reference = reference.map_or(StudyReference::Finest, StudyReference::Analytic);
            let rows = run_refinement_study(&RunConfig::load(&config)?, &levels, reference)?;
            println!("level h tau iterations W error");
            for r in rows {
                println!(
                    "{} {:.4e} {:.4e} {} {:.8e} {:.3e}",
                    r.level, r.h, r.tau, r.iterations, r.wasserstein, r.error
                );
            }
        }
        Command::Compare { config, iterations, reference_iterations } => {
            let c = run_dual_comparison(&RunConfig::load(&config)?, iterations, reference_iterations)?;
            let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
            println!("residual p0 {:.6e} p1 {:.6e}", last(&c.residual_p0), last(&c.residual_p1));
        }
        Command::MeshInfo { path } => print!("{}", mesh_info(&path)?),
        Command::ProjectTest { config } => {
            let checks = project_test(&RunConfig::load(&config)?)?;
            let mut failed = 0;
            for c in &checks {
                let status = if c.passed() { "PASS" } else { "FAIL" };
                println!("{status} {}: {:.3e} (tolerance {:.0e})", c.name, c.value, c.tolerance);
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(CliError::Numerical(format!("{failed} projection checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
