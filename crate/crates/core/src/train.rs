//! Mini-batch training of the encoder and sub-center head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticCorpus;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::{compute_loss, EmbeddingVector, LossConfig, SubCenterBank};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

fn default_batch_size() -> usize {
    32
}

fn default_learning_rate() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, loss: LossConfig, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            optimizer: OptimizerKind::default(),
            loss,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        self.loss.validate()
    }
}

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) or plain SGD over a flat
/// parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, learning_rate: f64, num_params: usize) -> Self {
        Self {
            kind,
            learning_rate,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            steps: 0,
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: &[f64]) {
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - Self::BETA1.powi(self.steps);
                let c2 = 1.0 - Self::BETA2.powi(self.steps);
                for (((p, g), m), v) in params
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub encoder_config: EncoderConfig,
    pub train_config: TrainConfig,
    pub encoder: Encoder,
    pub bank: SubCenterBank,
    /// Speaker id of each bank class.
    pub class_speakers: Vec<u32>,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

impl TrainedModel {
    /// Freshly initialized encoder and bank for the speakers in `corpus`.
    pub fn initialize(
        corpus: &SyntheticCorpus,
        encoder_cfg: &EncoderConfig,
        train_cfg: &TrainConfig,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        train_cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::DegenerateConfiguration(
                "empty training corpus".into(),
            ));
        }
        if corpus.feature_dim != encoder_cfg.input_dim {
            return Err(Error::DimensionMismatch {
                expected: encoder_cfg.input_dim,
                actual: corpus.feature_dim,
            });
        }
        let class_speakers = corpus.speakers();
        if class_speakers.len() < 2 {
            return Err(Error::DegenerateConfiguration(
                "training needs at least 2 speakers".into(),
            ));
        }
        let encoder = Encoder::new(encoder_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        let bank = SubCenterBank::random(
            class_speakers.len(),
            train_cfg.loss.subcenters,
            encoder_cfg.embedding_dim,
            &mut rng,
        )?;
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            encoder_config: encoder_cfg.clone(),
            train_config: train_cfg.clone(),
            encoder,
            bank,
            class_speakers,
            history: Vec::new(),
        })
    }

    pub fn encode(&self, features: &[f64]) -> Result<EmbeddingVector> {
        self.encoder.encode(features)
    }

    /// Bank class of a speaker seen in training.
    pub fn class_of(&self, speaker: u32) -> Option<usize> {
        self.class_speakers.binary_search(&speaker).ok()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_slice(&bytes)?;
        if model.format_version != CHECKPOINT_VERSION {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("unsupported checkpoint version {}", model.format_version),
            });
        }
        Ok(model)
    }

    fn all_finite(&self) -> bool {
        self.encoder.params().all(|p| p.is_finite())
            && self.bank.weights().iter().all(|w| w.is_finite())
    }
}

/// Train an encoder and sub-center head on `corpus`.
///
/// Batches come from a seeded permutation per epoch; the short last batch is
/// kept. Bank rows are projected back to the unit sphere after every step.
pub fn train(
    corpus: &SyntheticCorpus,
    encoder_cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let mut model = TrainedModel::initialize(corpus, encoder_cfg, train_cfg)?;
    // Separate stream from the bank initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(1);

    let labels: Vec<usize> = corpus
        .utterances
        .iter()
        .map(|u| {
            model
                .class_of(u.speaker_id)
                .expect("speaker listed in class map")
        })
        .collect();
    let encoder_params = model.encoder.num_params();
    let mut optimizer = Optimizer::new(
        train_cfg.optimizer,
        train_cfg.learning_rate,
        encoder_params + model.bank.weights().len(),
    );
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_idx, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            let traces = batch
                .iter()
                .map(|&i| model.encoder.forward(&corpus.utterances[i].features))
                .collect::<Result<Vec<_>>>()?;
            let outputs: Vec<Vec<f64>> = traces.iter().map(|t| t.output().to_vec()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let out = compute_loss(&outputs, &batch_labels, &model.bank, &train_cfg.loss).map_err(
                |e| match e {
                    Error::DegenerateVector => Error::NonFinite {
                        epoch,
                        batch: batch_idx,
                        what: "embedding collapsed to zero or non-finite".into(),
                    },
                    other => other,
                },
            )?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                    what: format!("loss = {}", out.loss),
                });
            }
            total += out.loss * batch.len() as f64;

            let mut grads = model.encoder.zero_grads();
            for (trace, g) in traces.iter().zip(&out.grad_embeddings) {
                model.encoder.backward(trace, g, &mut grads);
            }
            let flat: Vec<f64> = grads.iter().copied().chain(out.grad_weights).collect();
            optimizer.step(
                model
                    .encoder
                    .params_mut()
                    .chain(model.bank.weights_mut().iter_mut()),
                &flat,
            );
            model.bank.project().map_err(|_| Error::NonFinite {
                epoch,
                batch: batch_idx,
                what: "sub-center collapsed".into(),
            })?;
        }
        if !model.all_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: order.len().div_ceil(train_cfg.batch_size) - 1,
                what: "non-finite weights".into(),
            });
        }
        model.history.push(total / corpus.len() as f64);
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub embedding: EmbeddingVector,
    pub speaker_id: u32,
    pub subcluster_id: u32,
}

/// Encode every utterance, keeping corpus order and labels.
pub fn extract_all(
    model: &TrainedModel,
    corpus: &SyntheticCorpus,
) -> Result<Vec<LabeledEmbedding>> {
    corpus
        .utterances
        .par_iter()
        .map(|u| {
            Ok(LabeledEmbedding {
                embedding: model.encode(&u.features)?,
                speaker_id: u.speaker_id,
                subcluster_id: u.subcluster_id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    fn tiny_corpus(speakers: usize) -> SyntheticCorpus {
        generate_corpus(&CorpusConfig {
            num_speakers: speakers,
            subclusters_per_speaker: 2,
            utterances_per_speaker: 30,
            feature_dim: 8,
            speaker_spread: 3.0,
            subcluster_spread: 1.0,
            noise_sigma: 0.3,
            seed: 5,
        })
        .unwrap()
    }

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            input_dim: 8,
            hidden_dims: vec![16],
            embedding_dim: 4,
            activation: Default::default(),
            seed: 1,
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut params = vec![0.5, -1.25, 3.0];
            let before = params.clone();
            let mut opt = Optimizer::new(kind, 0.0, 3);
            for _ in 0..3 {
                opt.step(params.iter_mut(), &[0.3, -2.0, 1e-3]);
            }
            assert_eq!(params, before);
        }
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut params = vec![1.0, 1.0];
        Optimizer::new(OptimizerKind::Sgd, 0.5, 2).step(params.iter_mut(), &[2.0, -4.0]);
        assert_eq!(params, vec![0.0, 3.0]);
    }

    #[test]
    fn separable_pair_learns() {
        let corpus = tiny_corpus(2);
        let mut cfg = TrainConfig::new(50, LossConfig::default(), 3);
        cfg.learning_rate = 1e-3;
        let model = train(&corpus, &small_encoder(), &cfg).unwrap();
        assert_eq!(model.history.len(), 50);
        assert!(model.history[49] < model.history[0]);
        for row in model.bank.weights().chunks(4) {
            let n: f64 = row.iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus(3);
        let loss = LossConfig {
            subcenters: 3,
            ..LossConfig::default()
        };
        let cfg = TrainConfig::new(3, loss, 8);
        let a = train(&corpus, &small_encoder(), &cfg).unwrap();
        let b = train(&corpus, &small_encoder(), &cfg).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip_reproduces_encodings() {
        let corpus = tiny_corpus(3);
        let cfg = TrainConfig::new(2, LossConfig::default(), 4);
        let model = train(&corpus, &small_encoder(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back, model);
        for u in &corpus.utterances {
            let a = model.encode(&u.features).unwrap();
            let b = back.encode(&u.features).unwrap();
            assert!(a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn extract_all_preserves_order_and_labels() {
        let corpus = tiny_corpus(3);
        let model = TrainedModel::initialize(
            &corpus,
            &small_encoder(),
            &TrainConfig::new(1, LossConfig::default(), 0),
        )
        .unwrap();
        let out = extract_all(&model, &corpus).unwrap();
        assert_eq!(out.len(), corpus.len());
        for (e, u) in out.iter().zip(&corpus.utterances) {
            assert_eq!(
                (e.speaker_id, e.subcluster_id),
                (u.speaker_id, u.subcluster_id)
            );
            assert_eq!(e.embedding, model.encode(&u.features).unwrap());
        }
        assert_eq!(out, extract_all(&model, &corpus).unwrap());
        assert!(extract_all(&model, &SyntheticCorpus::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        let corpus = tiny_corpus(2);
        let mut enc = small_encoder();
        enc.input_dim = 7;
        assert!(train(
            &corpus,
            &enc,
            &TrainConfig::new(1, LossConfig::default(), 0)
        )
        .is_err());
        assert!(train(
            &tiny_corpus(1),
            &small_encoder(),
            &TrainConfig::new(1, LossConfig::default(), 0)
        )
        .is_err());
        let mut cfg = TrainConfig::new(1, LossConfig::default(), 0);
        cfg.learning_rate = 0.0;
        assert!(train(&corpus, &small_encoder(), &cfg).is_err());
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let corpus = tiny_corpus(2);
        let mut cfg = TrainConfig::new(5, LossConfig::default(), 0);
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.learning_rate = 1e300;
        match train(&corpus, &small_encoder(), &cfg) {
            Err(Error::NonFinite { epoch, .. }) => assert!(epoch < 5),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
