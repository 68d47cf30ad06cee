use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use subcenter::corpus::SyntheticCorpus;
use subcenter::experiment::{self, ExperimentConfig};
use subcenter::train::TrainedModel;
use subcenter::Error;

/// Sub-center AAM-Softmax experiments on synthetic speaker data.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write corpus.csv, train.csv, eval.csv and config.json to the output dir.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one variant on the generated training split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: String,
        /// Run seed; defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score trials on held-out speakers and print the metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        /// Training corpus, for sub-center utilization.
        #[arg(long)]
        train_corpus: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write `label,score` trial scores.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Train and evaluate every variant for every seed and tabulate.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> subcenter::Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => std::io::stdout().write_all(bytes).map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
    }
}

fn run(cli: Cli) -> subcenter::Result<bool> {
    match cli.command {
        Command::Generate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (train, eval) = experiment::generate(&cfg)?;
            eprintln!(
                "wrote {} training and {} held-out utterances to {}",
                train.len(),
                eval.len(),
                cfg.output_dir.display()
            );
        }
        Command::Train {
            config,
            variant,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.variant(&variant)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let dir = experiment::train_variant(&cfg, &variant, seed)?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            trials,
            seed,
            train_corpus,
            out,
            scores,
        } => {
            let model = TrainedModel::load(&checkpoint)?;
            let eval = SyntheticCorpus::load(&corpus)?;
            let train = train_corpus
                .as_deref()
                .map(SyntheticCorpus::load)
                .transpose()?;
            let (report, trial_set) =
                experiment::evaluate(&model, &eval, trials, seed, train.as_ref())?;
            if let Some(path) = scores {
                let file = std::fs::File::create(&path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                trial_set.write_scores(std::io::BufWriter::new(file))?;
            }
            let mut json = serde_json::to_vec_pretty(&report)?;
            json.push(b'\n');
            write_out(out.as_deref(), &json)?;
        }
        Command::Experiment { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = experiment::run_experiment(&cfg)?;
            print!("{}", summary.table());
            return Ok(summary.all_ok());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
