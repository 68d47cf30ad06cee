//! Helpers shared by integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use subcenter::metrics::SpeakerGroup;

pub mod oracle {
    //! Direct transcriptions of the metric definitions, written without
    //! sharing any helper with the library.

    pub fn cos(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        ab / (aa.sqrt() * bb.sqrt())
    }

    pub fn mean_of(group: &[Vec<f64>]) -> Vec<f64> {
        let dim = group[0].len();
        (0..dim)
            .map(|d| group.iter().map(|e| e[d]).sum::<f64>() / group.len() as f64)
            .collect()
    }

    fn variance(values: &[f64]) -> f64 {
        let mu = values.iter().sum::<f64>() / values.len() as f64;
        values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / values.len() as f64
    }

    pub fn intra(groups: &[Vec<Vec<f64>>]) -> f64 {
        let mut values = Vec::new();
        for g in groups {
            let m = mean_of(g);
            for e in g {
                values.push(cos(e, &m));
            }
        }
        variance(&values)
    }

    pub fn inter(groups: &[Vec<Vec<f64>>]) -> f64 {
        let means: Vec<Vec<f64>> = groups.iter().map(|g| mean_of(g)).collect();
        let mut values = Vec::new();
        for (s, g) in groups.iter().enumerate() {
            for e in g {
                for (t, m) in means.iter().enumerate() {
                    if t != s {
                        values.push(cos(e, m));
                    }
                }
            }
        }
        variance(&values)
    }

    /// EER as the operating point minimizing |FAR - FRR| over thresholds at
    /// every midpoint between adjacent distinct scores, plus both extremes.
    pub fn eer(pos: &[f64], neg: &[f64]) -> f64 {
        let mut all: Vec<f64> = pos.iter().chain(neg).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        let mut thresholds = vec![f64::NEG_INFINITY, f64::INFINITY];
        thresholds.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        let mut best = (f64::INFINITY, 0.0);
        for t in thresholds {
            let far = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
            let frr = pos.iter().filter(|&&s| s < t).count() as f64 / pos.len() as f64;
            let gap = (far - frr).abs();
            if gap < best.0 {
                best = (gap, 0.5 * (far + frr));
            }
        }
        best.1
    }
}

pub fn random_groups(seed: u64, speakers: usize, max_per: usize, dim: usize) -> Vec<SpeakerGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..speakers)
        .map(|_| {
            let center: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let n = rng.random_range(1..=max_per);
            (0..n)
                .map(|_| {
                    center
                        .iter()
                        .map(|c| c + 0.7 * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect()
}
