use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchbench::config::RunConfig;
use patchbench::gradcheck::{self, GradcheckConfig};
use patchbench::pipeline;
use patchbench::Error;

/// Adversarial patch benchmark pipeline: train models, craft patches,
/// generate the patched dataset and evaluate robustness.
#[derive(Parser, Debug)]
#[command(
    name = "patchbench",
    version,
    after_help = "Flags given on the command line override the same keys in the config file.\n\
                  Exit codes: 0 success, 1 numerical failure, 2 usage or config error."
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 = one per core (overrides `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Ranks to report, e.g. 1,3,5 (overrides `k`).
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every configured model and write model files.
    Train,
    /// Craft one patch per target with the ensemble models.
    Craft,
    /// Apply the patches to the test split and write the manifest.
    GenDataset,
    /// Score all models and write the report CSVs.
    Eval,
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        /// Maximum per-element relative error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Random instances per check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Print the table of an existing report.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 1 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(k) = &cli.k {
        cfg.k = k.clone();
    }
    Ok(cfg)
}

fn set_threads(n: usize) -> Result<(), Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    if let Command::Gradcheck { tolerance, instances } = cli.command {
        set_threads(cli.threads.unwrap_or(0))?;
        let cfg = GradcheckConfig {
            instances,
            tolerance,
            seed: cli.seed.unwrap_or(0),
            ..GradcheckConfig::default()
        };
        let outcomes = gradcheck::run_all(&cfg)?;
        let mut ok = true;
        for o in &outcomes {
            println!(
                "{:<5} {:<38} instances={:<3} elements={:<5} skipped={:<3} max_rel_error={:.3e}",
                if o.passed { "PASS" } else { "FAIL" },
                o.name,
                o.instances,
                o.elements,
                o.skipped,
                o.max_rel_error
            );
            ok &= o.passed;
        }
        println!("tolerance {tolerance:e}: {}", if ok { "all checks passed" } else { "FAILED" });
        return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
    }

    let cfg = load_config(&cli)?;
    set_threads(cfg.threads)?;
    match cli.command {
        Command::Train => {
            let out = pipeline::cmd_train(&cfg)?;
            print!("{}", out.summary);
            println!("wrote {} model files to {}", out.models.len(), pipeline::models_dir(&cfg.out).display());
        }
        Command::Craft => {
            let results = pipeline::cmd_craft(&cfg)?;
            for r in &results {
                println!(
                    "{} target={} loss {:.4} -> {:.4} corpus success {:.3}",
                    r.patch.patch_id,
                    r.patch.target_class,
                    r.loss_history.first().copied().unwrap_or(f64::NAN),
                    r.loss_history.last().copied().unwrap_or(f64::NAN),
                    r.final_ensemble_success
                );
            }
            println!("wrote {} patch files to {}", results.len(), pipeline::patches_dir(&cfg.out).display());
        }
        Command::GenDataset => {
            let m = pipeline::cmd_gen_dataset(&cfg)?;
            println!(
                "wrote {} perturbed images ({} patches x {} images) to {}",
                m.entries.len(),
                m.patch_count,
                m.image_count,
                pipeline::dataset_dir(&cfg.out).display()
            );
        }
        Command::Eval => {
            let report = pipeline::cmd_eval(&cfg)?;
            print!("{}", pipeline::render_report(&report));
        }
        Command::Report => print!("{}", pipeline::cmd_report(&cfg)?),
        Command::Gradcheck { .. } => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}
