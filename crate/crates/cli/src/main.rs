//! `exdistill` — train small CNNs on deliberately biased data and distill
//! an unbiased teacher's explanations into them.
//!
//! Subcommands: `gen-data`, `train-teacher`, `distill`, `eval`, `explain`.
//! Failures exit nonzero with a machine-readable JSON object on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use exdistill_core::biasdata::Split;
use exdistill_core::harness::{self, ExperimentConfig};
use exdistill_core::Error;

#[derive(Parser)]
#[command(name = "exdistill", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment configuration (JSON). Defaults apply field-by-field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a biased corpus (manifest + XTSR shards).
    GenData {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train the teacher with ERM on unbiased or debiased data.
    TrainTeacher {
        #[command(flatten)]
        common: ConfigArgs,
        /// Load the corpus from a gen-data directory instead of regenerating.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Distill the teacher into a student on the biased corpus.
    Distill {
        #[command(flatten)]
        common: ConfigArgs,
        /// Teacher output directory (holding checkpoint/).
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Distillation method, overriding the config:
        /// lrp|gradxinput|inputgrad|gradcam|attention|output.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate a checkpoint over the three test splits.
    Eval {
        /// Model output directory (holding checkpoint/).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Export explanation heatmaps (PNG + PGM + sidecar JSON + XTSR).
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to draw samples from.
        #[arg(long, default_value = "test-iid")]
        split: String,
        /// Sample indices within the split.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        index: Vec<usize>,
        /// lrp|gradxinput|inputgrad|gradcam|attention.
        #[arg(long, default_value = "lrp")]
        method: String,
        /// Class to explain (defaults to the model's prediction).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(common: &ConfigArgs) -> exdistill_core::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.distill.seed = seed;
    } else if cfg.distill.seed == 0 {
        cfg.distill.seed = cfg.seed;
    }
    Ok(cfg)
}

fn parse_split(name: &str) -> exdistill_core::Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.dir_name() == name)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown split '{name}' (train|val|test-iid|test-ood|test-shift)"
            ))
        })
}

fn run(cli: Cli) -> exdistill_core::Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            harness::cmd_gen_data(&cfg, &common.out)?;
            println!("dataset written to {}", common.out.display());
        }
        Command::TrainTeacher { common, data } => {
            let cfg = load_config(&common)?;
            let report = harness::cmd_train_teacher(&cfg, data.as_deref(), &common.out)?;
            println!(
                "teacher trained: best hold-out accuracy {:.2}% (epoch {:?})",
                report.best_val_accuracy, report.best_epoch
            );
        }
        Command::Distill {
            common,
            teacher,
            data,
            method,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(name) = method {
                cfg.distill.technique = harness::technique_from_name(&name)?;
            }
            let report = harness::cmd_distill(&cfg, &teacher, data.as_deref(), &common.out)?;
            println!(
                "student distilled: best hold-out accuracy {:.2}% (epoch {:?})",
                report.best_val_accuracy, report.best_epoch
            );
        }
        Command::Eval { model, data, out } => {
            let metrics = harness::cmd_eval(&model, &data, &out)?;
            println!(
                "iid {:.2}%  ood {:.2}%  shift {:.2}%  gaps {:.2}/{:.2}",
                metrics.iid, metrics.ood, metrics.shift, metrics.gap_iid_ood, metrics.gap_iid_shift
            );
        }
        Command::Explain {
            model,
            data,
            split,
            index,
            method,
            class,
            out,
        } => {
            let split = parse_split(&split)?;
            let method = harness::explanation_from_name(&method)?;
            let files =
                harness::cmd_explain(&model, &data, split, &index, &method, class, &out)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.kind(),
                "message": err.to_string(),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
