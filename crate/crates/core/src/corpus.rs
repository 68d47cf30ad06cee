//! Seeded multi-speaker corpus with latent per-speaker sub-styles.
//!
//! Every speaker draws from its own ChaCha stream, so adding speakers to a
//! config leaves the earlier speakers' utterances untouched.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub subclusters_per_speaker: usize,
    pub utterances_per_speaker: usize,
    pub feature_dim: usize,
    /// Radius of the sphere the speaker means lie on.
    pub speaker_spread: f64,
    /// Distance of each sub-cluster mean from its speaker mean.
    pub subcluster_spread: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("num_speakers", self.num_speakers),
            ("subclusters_per_speaker", self.subclusters_per_speaker),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("feature_dim", self.feature_dim),
        ] {
            if value < 1 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        for (field, value) in [
            ("speaker_spread", self.speaker_spread),
            ("subcluster_spread", self.subcluster_spread),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::config(field, "must be a finite value >= 0"));
            }
        }
        if self.subcluster_spread >= self.speaker_spread {
            return Err(Error::config(
                "subcluster_spread",
                "must be smaller than speaker_spread",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub features: Vec<f64>,
    pub speaker_id: u32,
    /// Ground-truth latent style; diagnostics only.
    pub subcluster_id: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticCorpus {
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

fn sphere_point(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| radius * x / n).collect();
        }
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let dim = cfg.feature_dim;
    let mut utterances = Vec::with_capacity(cfg.num_speakers * cfg.utterances_per_speaker);
    for speaker in 0..cfg.num_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(speaker as u64);

        let mean = sphere_point(&mut rng, dim, cfg.speaker_spread);
        let styles: Vec<Vec<f64>> = (0..cfg.subclusters_per_speaker)
            .map(|_| {
                sphere_point(&mut rng, dim, cfg.subcluster_spread)
                    .into_iter()
                    .zip(&mean)
                    .map(|(o, m)| m + o)
                    .collect()
            })
            .collect();
        for i in 0..cfg.utterances_per_speaker {
            let style = i % cfg.subclusters_per_speaker;
            let features = styles[style]
                .iter()
                .map(|m| m + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            utterances.push(Utterance {
                features,
                speaker_id: speaker as u32,
                subcluster_id: style as u32,
            });
        }
    }
    Ok(SyntheticCorpus {
        feature_dim: dim,
        utterances,
    })
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Distinct speaker ids, ascending.
    pub fn speakers(&self) -> Vec<u32> {
        self.utterances
            .iter()
            .map(|u| u.speaker_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn filter_speakers(&self, keep: &BTreeSet<u32>) -> SyntheticCorpus {
        SyntheticCorpus {
            feature_dim: self.feature_dim,
            utterances: self
                .utterances
                .iter()
                .filter(|u| keep.contains(&u.speaker_id))
                .cloned()
                .collect(),
        }
    }

    /// Write `speaker_id,subcluster_id,f0..f{D-1}` rows with a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["speaker_id".to_string(), "subcluster_id".to_string()];
        header.extend((0..self.feature_dim).map(|d| format!("f{d}")));
        w.write_record(&header)?;
        for u in &self.utterances {
            let mut row = vec![u.speaker_id.to_string(), u.subcluster_id.to_string()];
            row.extend(u.features.iter().map(|f| f.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "speaker_id" || &header[1] != "subcluster_id" {
            return Err(malformed(
                "expected header speaker_id,subcluster_id,f0,...".into(),
            ));
        }
        for (d, name) in header.iter().skip(2).enumerate() {
            if name != format!("f{d}") {
                return Err(malformed(format!("unexpected column `{name}`")));
            }
        }
        let feature_dim = header.len() - 2;
        let mut utterances = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let parse_err = |what: &str| malformed(format!("row {}: bad {what}", line + 1));
            let speaker_id = record[0].parse().map_err(|_| parse_err("speaker_id"))?;
            let subcluster_id = record[1].parse().map_err(|_| parse_err("subcluster_id"))?;
            let features = record
                .iter()
                .skip(2)
                .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| parse_err("feature"))?;
            utterances.push(Utterance {
                features,
                speaker_id,
                subcluster_id,
            });
        }
        Ok(Self {
            feature_dim,
            utterances,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), path)
    }
}

/// Speaker-disjoint split. The train side gets
/// `round(train_fraction * speakers)` randomly chosen speakers.
pub fn split_corpus(
    corpus: &SyntheticCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(SyntheticCorpus, SyntheticCorpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction", "must lie in (0, 1)"));
    }
    let mut speakers = corpus.speakers();
    if speakers.len() < 2 {
        return Err(Error::DegenerateConfiguration(
            "a split needs at least 2 speakers".into(),
        ));
    }
    let n_train = (train_fraction * speakers.len() as f64).round() as usize;
    if n_train == 0 || n_train == speakers.len() {
        return Err(Error::config(
            "train_fraction",
            format!(
                "{train_fraction} of {} speakers leaves one side empty",
                speakers.len()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    speakers.shuffle(&mut rng);
    let train: BTreeSet<u32> = speakers[..n_train].iter().copied().collect();
    let eval: BTreeSet<u32> = speakers[n_train..].iter().copied().collect();
    Ok((
        corpus.filter_speakers(&train),
        corpus.filter_speakers(&eval),
    ))
}
