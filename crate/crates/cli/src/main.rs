use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use skei_cli::{bench, figures, report, run, rundir, verify};

#[derive(Parser)]
#[command(name = "skei", version, about = "Sketched equivariant imaging experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration into its output directory.
    Run {
        config: PathBuf,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Allow configs marked paper_scale (hours of CPU time).
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Summarize a run directory, or a directory of runs, as CSV.
    Report { dir: PathBuf },
    /// Redraw the two figures of each run.
    Plot { dir: PathBuf },
    /// Run every point of a config grid, then report.
    Bench {
        grid: PathBuf,
        /// Parallel processes, overriding the grid file.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Sketch deviation, spectrum and Lipschitz checks for a config.
    VerifyTheory {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run {
            config,
            out,
            paper_scale,
            quiet,
        } => {
            let (dir, m) = run::run_path(
                &config,
                &run::RunOptions {
                    out,
                    paper_scale,
                    quiet,
                },
            )?;
            let psnr = m
                .final_psnr
                .map(|p| format!("{p:.2} dB"))
                .unwrap_or_else(|| "n/a".into());
            println!(
                "{}: {:?}, {} iterations, {:.4} s/iter, final psnr {psnr}",
                dir.display(),
                m.status,
                m.iterations,
                m.s_per_iter
            );
        }
        Cmd::Report { dir } => print!("{}", report::report(&dir)?),
        Cmd::Plot { dir } => {
            for f in figures::plot_dir(&dir)? {
                println!("{}", f.display());
            }
        }
        Cmd::Bench { grid, jobs } => {
            let exe = std::env::current_exe()?;
            let dirs = bench::bench(&grid, Some(&exe), jobs)?;
            let root = dirs
                .first()
                .and_then(|d| d.parent())
                .map(PathBuf::from)
                .unwrap_or_default();
            print!("{}", report::report(&root)?);
        }
        Cmd::VerifyTheory { config, out } => {
            let (cfg, _) = rundir::load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let r = verify::verify_theory(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}
