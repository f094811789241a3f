use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gatta_core::harness::config::ExperimentConfig;
use gatta_core::harness::{plot, report, run, sweep, validate};
use gatta_core::topology::{complete, erdos_renyi, ring, star, Graph, MixingMatrix};

#[derive(Parser)]
#[command(name = "gatta", version, about = "Personalized decentralized learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Defaults to `trials` in the config.
    #[arg(long)]
    trials: Option<usize>,
    /// Defaults to `seed` in the config.
    #[arg(long)]
    seed_base: Option<u64>,
    /// Run trials on all cores. Results are identical either way.
    #[arg(long)]
    parallel: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    ErdosRenyi,
    Ring,
    Complete,
    Star,
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm and write metrics.jsonl, ledger.csv, alphas.csv, meta.json.
    Run(RunArgs),
    /// Run every listed algorithm over several trials and tabulate accuracy.
    Sweep(RunArgs),
    /// Communication totals and the CE-GATTA reduction over finished runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render accuracy, cost and attention-weight SVG charts.
    Plot {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Node whose attention weights are drawn.
        #[arg(long, default_value_t = 0)]
        node: usize,
    },
    /// Check step size, fusion bounds and spectral gap before running.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed_base: Option<u64>,
    },
    /// Write a communication graph as an edge list and print its spectrum.
    GenTopology {
        /// Take the topology section of this config instead of the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "erdos-renyi")]
        kind: Kind,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the non-lazy Metropolis rule for the reported spectrum.
        #[arg(long)]
        non_lazy: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load(path: &Path) -> gatta_core::Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn execute(cli: Cli) -> gatta_core::Result<ExitCode> {
    match cli.command {
        Command::Run(a) => {
            let cfg = load(&a.config)?;
            let trials = a.trials.unwrap_or(cfg.trials);
            let outcomes = run::cmd_run(&cfg, &a.out_dir, trials, a.seed_base.unwrap_or(cfg.seed), a.parallel)?;
            for o in &outcomes {
                println!(
                    "{} trial {}: final mean test accuracy {:.4}, transmitted scalars {}",
                    o.algorithm,
                    o.trial,
                    o.final_accuracy(),
                    o.ledger.totals().scalars()
                );
            }
            if let Some(o) = outcomes.first() {
                print!("{}", o.validation.render_text());
            }
        }
        Command::Sweep(a) => {
            let cfg = load(&a.config)?;
            let trials = a.trials.unwrap_or(cfg.trials);
            let summary = sweep::cmd_sweep(&cfg, &a.out_dir, trials, a.seed_base.unwrap_or(cfg.seed), a.parallel)?;
            print!("{}", summary.render_table());
        }
        Command::Report { runs, out_dir } => {
            let rep = report::cost_report(&runs)?;
            let table = rep.render_table();
            print!("{table}");
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.md"), table)?;
            }
        }
        Command::Plot { runs, out_dir, node } => {
            for p in plot::cmd_plot(&runs, &out_dir, node)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Validate { config, seed_base } => {
            let cfg = load(&config)?;
            let check = validate::cmd_validate(&cfg, seed_base.unwrap_or(cfg.seed))?;
            print!("{}", check.render_text());
            if check.is_hard_failure() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::GenTopology {
            config,
            kind,
            n,
            p,
            seed,
            non_lazy,
            out_dir,
        } => {
            let (graph, lazy): (Graph, bool) = match config {
                Some(path) => {
                    let cfg = load(&path)?;
                    (cfg.build_graph()?, cfg.topology.lazy)
                }
                None => {
                    let g = match kind {
                        Kind::ErdosRenyi => erdos_renyi(n, p, seed)?,
                        Kind::Ring => ring(n)?,
                        Kind::Complete => complete(n)?,
                        Kind::Star => star(n, 0)?,
                    };
                    (g, !non_lazy)
                }
            };
            std::fs::create_dir_all(&out_dir)?;
            let path = out_dir.join("topology.txt");
            std::fs::write(&path, graph.to_edge_list())?;
            println!(
                "wrote {} (n = {}, edges = {})",
                path.display(),
                graph.n(),
                graph.edge_count()
            );
            match MixingMatrix::metropolis(&graph, lazy) {
                Ok(w) => println!(
                    "{} Metropolis: rho = {:.6}, spectral gap = {:.6}",
                    if lazy { "lazy" } else { "non-lazy" },
                    w.rho(),
                    w.spectral_gap()
                ),
                Err(e) => {
                    eprintln!("mixing matrix rejected: {e}");
                    return Ok(ExitCode::from(2));
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
