//! `hmdd`: simulate, preprocess, augment, train and evaluate radar
//! motion-direction classifiers.
//!
//! Exit status is 0 on success, 2 when some samples failed and the rest were
//! written (see `failures.csv` in the output directory), and 1 on a fatal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hmdd::harness::{self, ExperimentConfig, InputMode, Outcome};
use hmdd::Error;

#[derive(Parser)]
#[command(name = "hmdd", version, about = "Radar micro-Doppler motion direction experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to `paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for batch stages (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Starts from the desk-scale preset instead of the full-size defaults.
    #[arg(long, global = true)]
    toy: bool,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesizes the labelled cube dataset and its manifest.
    Simulate,
    /// Converts cubes to Doppler-time maps.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// Also writes FLM-augmented maps.
        #[arg(long)]
        with_augment: bool,
    },
    /// Runs FLM augmentation over a DTM manifest.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Trains a classifier on a DTM manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Trains on augmented maps regardless of `train.input`.
        #[arg(long)]
        with_augment: bool,
    },
    /// Confusion matrix of a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        with_augment: bool,
    },
    /// Accuracy against injected SNR drops.
    Robustness {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        with_augment: bool,
    },
    /// Raw versus augmented inputs over several training seeds.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Per-stage latency.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        with_augment: bool,
    },
    /// Prints or checks a configuration.
    Config {
        /// Prints the defaults with a description of every key.
        #[arg(long)]
        print_default: bool,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = if c.toy { ExperimentConfig::toy() } else { ExperimentConfig::default() };
    if let Some(path) = &c.config {
        cfg.apply(&std::fs::read_to_string(path)?)?;
    }
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input(cfg: &ExperimentConfig, with_augment: bool) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    if with_augment {
        cfg.input = InputMode::Augmented;
    }
    cfg
}

fn report(outcome: &Outcome, out: &Path) -> bool {
    if outcome.is_partial() {
        log::warn!(
            "{} of {} samples failed; see {}",
            outcome.failures.len(),
            outcome.failures.len() + outcome.processed,
            out.join("failures.csv").display()
        );
    }
    outcome.is_partial()
}

fn run(cli: &Cli) -> Result<bool, Error> {
    if let Command::Config { print_default } = cli.command {
        let cfg = load_config(&cli.common)?;
        if print_default {
            print!("{}", if cli.common.toy { ExperimentConfig::toy() } else { ExperimentConfig::default() }.to_text());
        } else {
            println!("# config_hash={}\n{}", cfg.hash(), cfg.to_text());
        }
        return Ok(false);
    }
    let cfg = load_config(&cli.common)?;
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let out = cfg.out.clone();
    log::info!("config_hash={} out={}", cfg.hash(), out.display());
    let partial = match &cli.command {
        Command::Simulate => {
            let m = harness::cmd_simulate(&cfg, &out)?;
            println!("wrote {} cubes to {}", m.len(), out.display());
            false
        }
        Command::Preprocess { manifest, with_augment } => {
            let o = harness::cmd_preprocess(&cfg, manifest, &out, *with_augment)?;
            println!("preprocessed {} samples", o.processed);
            report(&o, &out)
        }
        Command::Augment { manifest } => {
            let o = harness::cmd_augment(&cfg, manifest, &out)?;
            println!("augmented {} samples", o.processed);
            report(&o, &out)
        }
        Command::Train { manifest, with_augment } => {
            let (run, o) = harness::cmd_train(&input(&cfg, *with_augment), manifest, &out)?;
            println!(
                "val accuracy {:.4} after {} epochs ({:.1} s)",
                run.confusion.accuracy(),
                run.report.epochs.len(),
                run.seconds
            );
            report(&o, &out)
        }
        Command::Eval { model, manifest, with_augment } => {
            let (cm, o) = harness::cmd_eval(&input(&cfg, *with_augment), model, manifest, &out)?;
            println!("accuracy {:.4} on {} samples", cm.accuracy(), cm.total());
            report(&o, &out)
        }
        Command::Robustness { model, manifest, with_augment } => {
            let (rows, o) = harness::cmd_robustness(&input(&cfg, *with_augment), model, manifest, &out)?;
            for r in rows {
                println!("drop {:>5.1} dB: accuracy {:.4}", r.drop_db, r.mean);
            }
            report(&o, &out)
        }
        Command::Ablate { manifest } => {
            let (rows, o) = harness::cmd_ablate(&cfg, manifest, &out)?;
            for r in rows {
                println!("{:<10} accuracy {:.4}", r.input.name(), r.mean);
            }
            report(&o, &out)
        }
        Command::Bench { manifest, model, with_augment } => {
            let (b, o) = harness::cmd_bench(&input(&cfg, *with_augment), model.as_deref(), manifest, &out)?;
            println!(
                "augmentation {:.3} ms, inference {:.3} ms, end-to-end {:.3} ms per DTM; {} parameters",
                b.augmentation.mean * 1e3,
                b.inference.mean * 1e3,
                b.end_to_end.mean * 1e3,
                b.parameter_count
            );
            report(&o, &out)
        }
        Command::Config { .. } => unreachable!("handled above"),
    };
    Ok(partial)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
