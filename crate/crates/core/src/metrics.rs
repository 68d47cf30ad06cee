//! Embedding-space diagnostics: cosine intra/inter-class variance, their
//! ratio, verification trials with equal error rate, and sub-center
//! utilization.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticCorpus;
use crate::error::{Error, Result};
use crate::loss::{dot, norm};
use crate::train::{LabeledEmbedding, TrainedModel};

/// Embeddings of one speaker.
pub type SpeakerGroup = Vec<Vec<f64>>;

/// Group embeddings by speaker id, ascending.
pub fn group_by_speaker(embeddings: &[LabeledEmbedding]) -> Vec<SpeakerGroup> {
    let mut groups: BTreeMap<u32, SpeakerGroup> = BTreeMap::new();
    for e in embeddings {
        groups
            .entry(e.speaker_id)
            .or_default()
            .push(e.embedding.as_slice().to_vec());
    }
    groups.into_values().collect()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let denom = norm(a) * norm(b);
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(Error::DegenerateVector);
    }
    Ok(dot(a, b) / denom)
}

/// Plain arithmetic mean, not renormalized.
fn speaker_means(groups: &[SpeakerGroup]) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .enumerate()
        .map(|(s, group)| {
            let first = group.first().ok_or_else(|| {
                Error::DegenerateConfiguration(format!("speaker {s} has no embeddings"))
            })?;
            let mut mean = vec![0.0; first.len()];
            for e in group {
                if e.len() != mean.len() {
                    return Err(Error::DimensionMismatch {
                        expected: mean.len(),
                        actual: e.len(),
                    });
                }
                mean.iter_mut().zip(e).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= group.len() as f64);
            if norm(&mean) == 0.0 {
                return Err(Error::DegenerateSpeakerMean(s as u32));
            }
            Ok(mean)
        })
        .collect()
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Variance of the cosine similarity between every embedding and its own
/// speaker's mean, over all embeddings.
pub fn intra_class_variance(groups: &[SpeakerGroup]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::DegenerateConfiguration("no speakers".into()));
    }
    let means = speaker_means(groups)?;
    let mut sims = Vec::new();
    for (group, mean) in groups.iter().zip(&means) {
        for e in group {
            sims.push(cosine(e, mean)?);
        }
    }
    Ok(population_variance(&sims))
}

/// Variance of the cosine similarity between every embedding and the mean
/// of each other speaker, `N * (S - 1)` terms.
pub fn inter_class_variance(groups: &[SpeakerGroup]) -> Result<f64> {
    if groups.len() < 2 {
        return Err(Error::DegenerateConfiguration(
            "inter-class variance needs at least 2 speakers".into(),
        ));
    }
    let means = speaker_means(groups)?;
    let mut sims = Vec::new();
    for (s, group) in groups.iter().enumerate() {
        for e in group {
            for (_, mean) in means.iter().enumerate().filter(|&(t, _)| t != s) {
                sims.push(cosine(e, mean)?);
            }
        }
    }
    Ok(population_variance(&sims))
}

/// Intra-class over inter-class variance.
pub fn variance_ratio(groups: &[SpeakerGroup]) -> Result<f64> {
    let inter = inter_class_variance(groups)?;
    if inter <= 0.0 {
        return Err(Error::DegenerateConfiguration(
            "inter-class variance is zero".into(),
        ));
    }
    Ok(intra_class_variance(groups)? / inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Trial {
    /// Index of the first embedding.
    pub a: usize,
    /// Index of the second embedding, `a < b`.
    pub b: usize,
    pub same_speaker: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialSet {
    pub pairs: Vec<Trial>,
    pub scores: Option<Vec<f64>>,
}

/// Row `i` and column `j > i` of the `k`-th pair of an `n`-element set in
/// lexicographic order.
fn decode_pair(mut k: u64, n: u64) -> (u64, u64) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
        i += 1;
    }
}

/// Seeded, duplicate-free target and non-target pairs.
///
/// `speakers[i]` is the speaker of embedding `i`. The first
/// `ceil(num_trials / 2)` trials are same-speaker pairs, the rest
/// different-speaker pairs.
pub fn build_trials(speakers: &[u32], num_trials: usize, seed: u64) -> Result<TrialSet> {
    let mut by_speaker: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &s) in speakers.iter().enumerate() {
        by_speaker.entry(s).or_default().push(i);
    }
    if by_speaker.len() < 2 || by_speaker.values().any(|v| v.len() < 2) {
        return Err(Error::DegenerateConfiguration(
            "trials need at least 2 speakers with at least 2 embeddings each".into(),
        ));
    }
    let groups: Vec<Vec<usize>> = by_speaker.into_values().collect();
    let num_pos = num_trials - num_trials / 2;
    let num_neg = num_trials / 2;

    let mut pos_offsets = vec![0_u64];
    for g in &groups {
        let n = g.len() as u64;
        pos_offsets.push(pos_offsets.last().unwrap() + n * (n - 1) / 2);
    }
    let pos_total = *pos_offsets.last().unwrap();

    // Embeddings laid out group after group; position p pairs with every
    // later position outside its own group.
    let order: Vec<usize> = groups.iter().flatten().copied().collect();
    let mut group_end = Vec::with_capacity(order.len());
    let mut end = 0;
    for g in &groups {
        end += g.len();
        group_end.extend(std::iter::repeat_n(end, g.len()));
    }
    let total = order.len();
    let mut neg_offsets = vec![0_u64];
    for &e in &group_end {
        neg_offsets.push(neg_offsets.last().unwrap() + (total - e) as u64);
    }
    let neg_total = *neg_offsets.last().unwrap();

    if num_pos as u64 > pos_total {
        return Err(Error::InsufficientPairs {
            kind: "target",
            requested: num_pos,
            available: pos_total as u128,
        });
    }
    if num_neg as u64 > neg_total {
        return Err(Error::InsufficientPairs {
            kind: "non-target",
            requested: num_neg,
            available: neg_total as u128,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(num_trials);
    for k in index::sample(&mut rng, pos_total as usize, num_pos) {
        let k = k as u64;
        let g = pos_offsets.partition_point(|&o| o <= k) - 1;
        let (i, j) = decode_pair(k - pos_offsets[g], groups[g].len() as u64);
        let (a, b) = (groups[g][i as usize], groups[g][j as usize]);
        pairs.push(Trial {
            a: a.min(b),
            b: a.max(b),
            same_speaker: true,
        });
    }
    for k in index::sample(&mut rng, neg_total as usize, num_neg) {
        let k = k as u64;
        let p = neg_offsets.partition_point(|&o| o <= k) - 1;
        let q = group_end[p] + (k - neg_offsets[p]) as usize;
        let (a, b) = (order[p], order[q]);
        pairs.push(Trial {
            a: a.min(b),
            b: a.max(b),
            same_speaker: false,
        });
    }
    Ok(TrialSet {
        pairs,
        scores: None,
    })
}

impl TrialSet {
    /// Cosine score every pair against `embeddings`.
    pub fn score<E: AsRef<[f64]> + Sync>(&mut self, embeddings: &[E]) -> Result<()> {
        let scores = self
            .pairs
            .par_iter()
            .map(|t| {
                let (a, b) = (embeddings.get(t.a), embeddings.get(t.b));
                match (a, b) {
                    (Some(a), Some(b)) => Ok(cosine(a.as_ref(), b.as_ref())?.clamp(-1.0, 1.0)),
                    _ => Err(Error::DimensionMismatch {
                        expected: t.a.max(t.b) + 1,
                        actual: embeddings.len(),
                    }),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        self.scores = Some(scores);
        Ok(())
    }

    /// Scores split into (target, non-target).
    pub fn split_scores(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let scores = self.scores.as_ref()?;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (t, &s) in self.pairs.iter().zip(scores) {
            if t.same_speaker {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        Some((pos, neg))
    }

    /// `label,score` rows, label in {target, nontarget}.
    pub fn write_scores<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["label", "score"])?;
        if let Some(scores) = &self.scores {
            for (t, s) in self.pairs.iter().zip(scores) {
                let label = if t.same_speaker {
                    "target"
                } else {
                    "nontarget"
                };
                w.write_record([label, &s.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Read a `label,score` file into (target, non-target) scores.
pub fn read_scores<R: Read>(reader: R, path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().collect::<Vec<_>>() != ["label", "score"] {
        return Err(malformed("expected header label,score".into()));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let score: f64 = record[1]
            .parse()
            .map_err(|_| malformed(format!("row {}: bad score", line + 1)))?;
        match &record[0] {
            "target" => pos.push(score),
            "nontarget" => neg.push(score),
            other => return Err(malformed(format!("row {}: bad label `{other}`", line + 1))),
        }
    }
    Ok((pos, neg))
}

/// Equal error rate, accepting a trial when `score >= threshold`.
///
/// Sweeps every distinct score as a threshold and linearly interpolates
/// between the two ROC points where FRR - FAR changes sign.
pub fn compute_eer(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() {
        return Err(Error::EmptyScores("target"));
    }
    if neg_scores.is_empty() {
        return Err(Error::EmptyScores("non-target"));
    }
    if pos_scores.iter().chain(neg_scores).any(|s| s.is_nan()) {
        return Err(Error::DegenerateConfiguration("NaN score".into()));
    }
    let mut pos = pos_scores.to_vec();
    let mut neg = neg_scores.to_vec();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut pi, mut ni) = (0, 0);
    let mut prev: Option<(f64, f64)> = None;
    for t in thresholds {
        while pi < pos.len() && pos[pi] < t {
            pi += 1;
        }
        while ni < neg.len() && neg[ni] < t {
            ni += 1;
        }
        let frr = pi as f64 / np;
        let far = (neg.len() - ni) as f64 / nn;
        if frr >= far {
            return Ok(match prev {
                Some((frr0, far0)) if frr > far => {
                    let (d0, d1) = (frr0 - far0, frr - far);
                    let alpha = d0 / (d0 - d1);
                    far0 + alpha * (far - far0)
                }
                _ => frr,
            });
        }
        prev = Some((frr, far));
    }
    unreachable!("FRR reaches 1 and FAR 0 at the infinite threshold")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub per_class: Vec<usize>,
    pub mean: f64,
}

/// Number of sub-centers per class that are the best match for at least one
/// of that class's utterances. Utterances of speakers unknown to the model
/// are ignored.
pub fn subcenter_utilization(
    model: &TrainedModel,
    corpus: &SyntheticCorpus,
) -> Result<Utilization> {
    let bank = &model.bank;
    let c = bank.num_subcenters();
    let assignments = corpus
        .utterances
        .par_iter()
        .filter_map(|u| model.class_of(u.speaker_id).map(|class| (u, class)))
        .map(|(u, class)| {
            let x = model.encode(&u.features)?;
            let best = (0..c)
                .map(|k| dot(bank.row(class, k), x.as_slice()))
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (k, s)| if s > acc.1 { (k, s) } else { acc },
                )
                .0;
            Ok((class, best))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut active = vec![vec![false; c]; bank.num_classes()];
    for (class, best) in assignments {
        active[class][best] = true;
    }
    let per_class: Vec<usize> = active
        .iter()
        .map(|row| row.iter().filter(|&&a| a).count())
        .collect();
    let mean = per_class.iter().sum::<usize>() as f64 / per_class.len() as f64;
    Ok(Utilization { per_class, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub intra_var: f64,
    pub inter_var: f64,
    pub var_ratio: f64,
    pub utilization_mean: Option<f64>,
    pub utilization_per_class: Vec<usize>,
}

impl MetricsReport {
    /// Variance and EER diagnostics for embeddings scored on `trials`.
    pub fn compute(
        embeddings: &[LabeledEmbedding],
        trials: &TrialSet,
        utilization: Option<&Utilization>,
    ) -> Result<Self> {
        let groups = group_by_speaker(embeddings);
        let intra_var = intra_class_variance(&groups)?;
        let inter_var = inter_class_variance(&groups)?;
        if inter_var <= 0.0 {
            return Err(Error::DegenerateConfiguration(
                "inter-class variance is zero".into(),
            ));
        }
        let (pos, neg) = trials
            .split_scores()
            .ok_or_else(|| Error::DegenerateConfiguration("trials are not scored".into()))?;
        Ok(Self {
            eer: compute_eer(&pos, &neg)?,
            intra_var,
            inter_var,
            var_ratio: intra_var / inter_var,
            utilization_mean: utilization.map(|u| u.mean),
            utilization_per_class: utilization.map(|u| u.per_class.clone()).unwrap_or_default(),
        })
    }
}

/// Median of a non-empty slice; the mean of the middle two for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn identical_embeddings_have_zero_intra_variance() {
        let groups = vec![vec![vec![1.0, 2.0]; 3], vec![vec![-1.0, 0.5]; 4]];
        assert!(intra_class_variance(&groups).unwrap() < 1e-30);
    }

    #[test]
    fn symmetric_pair_has_zero_intra_variance() {
        let groups = vec![vec![vec![0.6, 0.8], vec![0.6, -0.8]]];
        assert_eq!(intra_class_variance(&groups).unwrap(), 0.0);
    }

    #[test]
    fn three_point_intra_variance() {
        // mean = (0, 2/3); cosines with it are 0, 1 and 1/sqrt2.
        // Reference from mpmath at 30 digits.
        let groups = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 1.0]]];
        let got = intra_class_variance(&groups).unwrap();
        assert!((got - 0.176_198_493_069_656_1).abs() < 1e-15, "{got}");
    }

    #[test]
    fn zero_mean_speaker_is_rejected() {
        let groups = vec![vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![vec![0.0, 1.0]]];
        assert!(matches!(
            intra_class_variance(&groups),
            Err(Error::DegenerateSpeakerMean(0))
        ));
    }

    #[test]
    fn inter_variance_constant_cases() {
        let antipodal = vec![vec![vec![1.0, 0.0]; 3], vec![vec![-1.0, 0.0]; 2]];
        assert_eq!(inter_class_variance(&antipodal).unwrap(), 0.0);

        let pts: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let triangle: Vec<SpeakerGroup> = pts.iter().map(|p| vec![p.clone(); 2]).collect();
        assert!(inter_class_variance(&triangle).unwrap() < 1e-30);

        assert!(inter_class_variance(&antipodal[..1]).is_err());
    }

    #[test]
    fn ratio_zero_for_collapsed_speakers_and_errors_when_degenerate() {
        let groups = vec![
            vec![vec![1.0, 0.0]; 3],
            vec![vec![0.0, 1.0]; 3],
            vec![vec![0.6, 0.8]; 3],
        ];
        assert!(variance_ratio(&groups).unwrap() < 1e-20);
        let antipodal = vec![vec![vec![1.0, 0.0]; 3], vec![vec![-1.0, 0.0]; 2]];
        assert!(variance_ratio(&antipodal)
            .unwrap_err()
            .to_string()
            .contains("degenerate configuration"));
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(compute_eer(&[0.8, 0.4], &[0.6, 0.2]).unwrap(), 0.5);
        let same = [0.1, 0.5, 0.9, 0.3];
        assert_eq!(compute_eer(&same, &same).unwrap(), 0.5);
        assert_eq!(compute_eer(&[0.1], &[0.9]).unwrap(), 1.0);
        assert!(matches!(
            compute_eer(&[], &[0.1]),
            Err(Error::EmptyScores(_))
        ));
        assert!(matches!(
            compute_eer(&[0.1], &[]),
            Err(Error::EmptyScores(_))
        ));
    }

    #[test]
    fn tiny_trial_set_is_exhaustive() {
        let trials = build_trials(&[0, 0, 1, 1], 2, 9).unwrap();
        let pos: Vec<_> = trials.pairs.iter().filter(|t| t.same_speaker).collect();
        assert_eq!(pos.len(), 1);
        assert_eq!(trials.pairs.len(), 2);
        assert!(matches!(
            build_trials(&[0, 0, 1, 1], 6, 9),
            Err(Error::InsufficientPairs { .. })
        ));
        assert!(build_trials(&[0, 0, 1], 2, 9).is_err());
        assert!(build_trials(&[0, 0, 0], 1, 9).is_err());
    }

    #[test]
    fn trials_balanced_unique_and_deterministic() {
        let speakers: Vec<u32> = (0..20).flat_map(|s| std::iter::repeat_n(s, 50)).collect();
        let trials = build_trials(&speakers, 10_000, 4).unwrap();
        let pos = trials.pairs.iter().filter(|t| t.same_speaker).count();
        assert_eq!((pos, trials.pairs.len() - pos), (5_000, 5_000));
        let unique: HashSet<_> = trials.pairs.iter().map(|t| (t.a, t.b)).collect();
        assert_eq!(unique.len(), 10_000);
        for t in &trials.pairs {
            assert!(t.a < t.b);
            assert_eq!(speakers[t.a] == speakers[t.b], t.same_speaker);
        }
        assert_eq!(trials, build_trials(&speakers, 10_000, 4).unwrap());
    }

    #[test]
    fn trial_capacity_can_be_exhausted_exactly() {
        // 3 speakers of 3: 9 target pairs, 27 non-target pairs.
        let speakers = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let trials = build_trials(&speakers, 18, 1).unwrap();
        let unique: HashSet<_> = trials.pairs.iter().map(|t| (t.a, t.b)).collect();
        assert_eq!(unique.len(), 18);
        let err = build_trials(&speakers, 20, 1).unwrap_err();
        assert!(err.to_string().contains("target"));
    }

    #[test]
    fn scores_file_round_trip() {
        let mut trials = build_trials(&[0, 0, 1, 1], 4, 2).unwrap();
        let emb = vec![
            vec![1.0, 0.0],
            vec![0.8, 0.6],
            vec![0.0, 1.0],
            vec![-0.6, 0.8],
        ];
        trials.score(&emb).unwrap();
        let mut buf = Vec::new();
        trials.write_scores(&mut buf).unwrap();
        assert!(buf.starts_with(b"label,score\n"));
        let (pos, neg) = read_scores(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(Some((pos, neg)), trials.split_scores());
        assert!(read_scores(&b"label,score\nmaybe,0.1\n"[..], Path::new("mem")).is_err());
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
