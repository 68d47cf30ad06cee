//! Config-driven runs: corpus generation, training, evaluation and the
//! variant comparison table.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! config.json                  resolved config echo
//! corpus.csv train.csv eval.csv
//! runs/<variant>/seed-<n>/model.json loss.csv metrics.json
//! experiment.json experiment.txt
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, split_corpus, CorpusConfig, SyntheticCorpus};
use crate::encoder::{Activation, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{build_trials, median, subcenter_utilization, MetricsReport, TrialSet};
use crate::train::{extract_all, train, OptimizerKind, TrainConfig, TrainedModel};

fn default_train_fraction() -> f64 {
    0.818
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_embedding_dim() -> usize {
    16
}

fn default_batch_size() -> usize {
    32
}

fn default_learning_rate() -> f64 {
    1e-4
}

/// Encoder shape; input size comes from the corpus and the seed from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            hidden_dims: default_hidden(),
            embedding_dim: default_embedding_dim(),
            activation: Activation::default(),
        }
    }
}

/// Optimization settings shared by every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    /// Fraction of speakers used for training; the rest are held out.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub encoder: EncoderSection,
    pub training: TrainingSection,
    pub variants: Vec<Variant>,
    pub trials: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse and validate a JSON config. Relative `output_dir` values are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if cfg.output_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.output_dir = parent.join(&cfg.output_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must lie in (0, 1)"));
        }
        let speakers = self.corpus.num_speakers;
        let n_train = (self.train_fraction * speakers as f64).round() as usize;
        if n_train < 2 || n_train >= speakers {
            return Err(Error::config(
                "train_fraction",
                format!("{n_train} training speakers out of {speakers}; need >= 2 and at least one held out"),
            ));
        }
        self.encoder_config(0).validate()?;
        self.train_config(&LossConfig::default(), 0).validate()?;
        if self.variants.is_empty() {
            return Err(Error::config("variants", "need at least one variant"));
        }
        let mut names = BTreeSet::new();
        for v in &self.variants {
            let safe = !v.name.is_empty()
                && v.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
            if !safe {
                return Err(Error::config(
                    "variants.name",
                    format!("`{}` must be non-empty and use only [A-Za-z0-9._-]", v.name),
                ));
            }
            if !names.insert(v.name.as_str()) {
                return Err(Error::config(
                    "variants.name",
                    format!("duplicate `{}`", v.name),
                ));
            }
            v.loss.validate().map_err(|e| match e {
                Error::InvalidConfig { field, reason } => {
                    Error::config(format!("variants.loss.{field}"), reason)
                }
                Error::InvalidTemperature(t) => {
                    Error::config("variants.loss.temperature", format!("{t} must be > 0"))
                }
                other => other,
            })?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.trials < 2 {
            return Err(Error::config("trials", "need at least 2 trials"));
        }
        let eval_speakers = (speakers - n_train) as u128;
        let utts = self.corpus.utterances_per_speaker as u128;
        let pos_capacity = eval_speakers * utts * utts.saturating_sub(1) / 2;
        let neg_capacity = eval_speakers * (eval_speakers - 1) / 2 * utts * utts;
        let (pos, neg) = (self.trials - self.trials / 2, self.trials / 2);
        if utts < 2 || pos as u128 > pos_capacity || neg as u128 > neg_capacity {
            return Err(Error::config(
                "trials",
                format!(
                    "{} trials infeasible for {eval_speakers} held-out speakers with {utts} utterances",
                    self.trials
                ),
            ));
        }
        Ok(())
    }

    pub fn encoder_config(&self, seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.corpus.feature_dim,
            hidden_dims: self.encoder.hidden_dims.clone(),
            embedding_dim: self.encoder.embedding_dim,
            activation: self.encoder.activation,
            seed,
        }
    }

    pub fn train_config(&self, loss: &LossConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            optimizer: self.training.optimizer,
            loss: *loss,
            seed,
        }
    }

    pub fn variant(&self, name: &str) -> Result<&Variant> {
        self.variants
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::UnknownVariant {
                name: name.to_string(),
                available: self
                    .variants
                    .iter()
                    .map(|v| v.name.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }

    pub fn run_dir(&self, variant: &str, seed: u64) -> PathBuf {
        self.output_dir
            .join("runs")
            .join(variant)
            .join(format!("seed-{seed}"))
    }

    /// Generate the corpus and its speaker split. The split reuses the
    /// corpus seed.
    pub fn corpora(&self) -> Result<(SyntheticCorpus, SyntheticCorpus, SyntheticCorpus)> {
        let corpus = generate_corpus(&self.corpus)?;
        let (train, eval) = split_corpus(&corpus, self.train_fraction, self.corpus.seed)?;
        Ok((corpus, train, eval))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Write the corpus, its split and the resolved config under `output_dir`.
/// The saved config points `output_dir` at its own directory, so it reloads
/// to the same place and carries no absolute paths.
pub fn generate(cfg: &ExperimentConfig) -> Result<(SyntheticCorpus, SyntheticCorpus)> {
    let (corpus, train, eval) = cfg.corpora()?;
    create_dir(&cfg.output_dir)?;
    let saved = ExperimentConfig {
        output_dir: PathBuf::from("."),
        ..cfg.clone()
    };
    write_file(&cfg.output_dir.join("config.json"), &to_json(&saved)?)?;
    corpus.save(&cfg.output_dir.join("corpus.csv"))?;
    train.save(&cfg.output_dir.join("train.csv"))?;
    eval.save(&cfg.output_dir.join("eval.csv"))?;
    Ok((train, eval))
}

fn loss_log(history: &[f64]) -> Vec<u8> {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{}", epoch + 1, loss);
    }
    out.into_bytes()
}

fn save_run(dir: &Path, model: &TrainedModel) -> Result<()> {
    create_dir(dir)?;
    model.save(&dir.join("model.json"))?;
    write_file(&dir.join("loss.csv"), &loss_log(&model.history))
}

/// Train one variant on `output_dir/train.csv`, saving the checkpoint and
/// loss log in the run directory.
pub fn train_variant(cfg: &ExperimentConfig, variant: &str, seed: u64) -> Result<PathBuf> {
    let v = cfg.variant(variant)?;
    let corpus = SyntheticCorpus::load(&cfg.output_dir.join("train.csv"))?;
    let model = train(
        &corpus,
        &cfg.encoder_config(seed),
        &cfg.train_config(&v.loss, seed),
    )?;
    let dir = cfg.run_dir(variant, seed);
    save_run(&dir, &model)?;
    Ok(dir)
}

/// Embed held-out speakers, score seeded trials and compute the report.
/// Utilization is included when the training corpus is given.
pub fn evaluate(
    model: &TrainedModel,
    eval: &SyntheticCorpus,
    trials: usize,
    seed: u64,
    train_corpus: Option<&SyntheticCorpus>,
) -> Result<(MetricsReport, TrialSet)> {
    if eval.speakers().len() < 2 {
        return Err(Error::DegenerateConfiguration(
            "evaluation needs at least 2 speakers".into(),
        ));
    }
    let embeddings = extract_all(model, eval)?;
    let speakers: Vec<u32> = embeddings.iter().map(|e| e.speaker_id).collect();
    let mut trial_set = build_trials(&speakers, trials, seed)?;
    let vectors: Vec<&[f64]> = embeddings.iter().map(|e| e.embedding.as_slice()).collect();
    trial_set.score(&vectors)?;
    let utilization = train_corpus
        .map(|c| subcenter_utilization(model, c))
        .transpose()?;
    let report = MetricsReport::compute(&embeddings, &trial_set, utilization.as_ref())?;
    Ok((report, trial_set))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub subcenters: usize,
    pub temperature: f64,
    /// Medians over seeds; `None` when any run failed.
    pub eer: Option<f64>,
    pub var_ratio: Option<f64>,
    pub utilization: Option<f64>,
    pub status: String,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub rows: Vec<VariantRow>,
}

impl ExperimentSummary {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.status == "ok")
    }

    pub fn row(&self, variant: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Aligned text table: variant, EER (%), var, utilization, status.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>, scale: f64, digits: usize| {
            v.map_or_else(|| "-".to_string(), |x| format!("{:.*}", digits, x * scale))
        };
        let rows: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    fmt(r.eer, 100.0, 2),
                    fmt(r.var_ratio, 1.0, 3),
                    fmt(r.utilization, 1.0, 2),
                    r.status.clone(),
                ]
            })
            .collect();
        let header = ["variant", "EER(%)", "var", "util", "status"];
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: [&str; 5]| {
            let _ = write!(out, "{:<w$}", cells[0], w = widths[0]);
            for (cell, w) in cells.iter().zip(widths).skip(1) {
                let _ = write!(out, "  {cell:>w$}");
            }
            out.push('\n');
        };
        line(header);
        for row in &rows {
            line([&row[0], &row[1], &row[2], &row[3], &row[4]]);
        }
        out
    }
}

fn run_one(
    cfg: &ExperimentConfig,
    variant: &Variant,
    seed: u64,
    train_corpus: &SyntheticCorpus,
    eval_corpus: &SyntheticCorpus,
) -> Result<RunResult> {
    let model = train(
        train_corpus,
        &cfg.encoder_config(seed),
        &cfg.train_config(&variant.loss, seed),
    )?;
    let (report, _) = evaluate(&model, eval_corpus, cfg.trials, seed, Some(train_corpus))?;
    let dir = cfg.run_dir(&variant.name, seed);
    save_run(&dir, &model)?;
    write_file(&dir.join("metrics.json"), &to_json(&report)?)?;
    Ok(RunResult {
        seed,
        first_loss: model.history[0],
        final_loss: *model.history.last().expect("at least one epoch"),
        report,
    })
}

/// Train and evaluate every variant for every seed, in parallel, then
/// summarize medians over seeds. Failed runs mark their row as failed but
/// never stop the other rows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let (train_corpus, eval_corpus) = generate(cfg)?;
    let jobs: Vec<(usize, u64)> = (0..cfg.variants.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<RunResult>> = jobs
        .par_iter()
        .map(|&(v, seed)| run_one(cfg, &cfg.variants[v], seed, &train_corpus, &eval_corpus))
        .collect();

    let mut rows = Vec::with_capacity(cfg.variants.len());
    let mut results = results.into_iter();
    for variant in &cfg.variants {
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        for &seed in &cfg.seeds {
            match results.next().expect("one result per job") {
                Ok(r) => runs.push(r),
                Err(e) => failures.push(format!("seed {seed}: {e}")),
            }
        }
        let ok = failures.is_empty();
        let med = |f: &dyn Fn(&RunResult) -> Option<f64>| -> Option<f64> {
            if !ok {
                return None;
            }
            let values: Option<Vec<f64>> = runs.iter().map(f).collect();
            values.map(|v| median(&v))
        };
        rows.push(VariantRow {
            variant: variant.name.clone(),
            subcenters: variant.loss.subcenters,
            temperature: variant.loss.temperature,
            eer: med(&|r| Some(r.report.eer)),
            var_ratio: med(&|r| Some(r.report.var_ratio)),
            utilization: med(&|r| r.report.utilization_mean),
            status: if ok {
                "ok".to_string()
            } else {
                format!("failed ({})", failures.join("; "))
            },
            runs,
        });
    }
    let summary = ExperimentSummary { rows };
    write_file(&cfg.output_dir.join("experiment.json"), &to_json(&summary)?)?;
    write_file(
        &cfg.output_dir.join("experiment.txt"),
        summary.table().as_bytes(),
    )?;
    Ok(summary)
}
