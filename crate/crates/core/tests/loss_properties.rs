use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use subcenter::loss::{
    aam_softmax_loss, aggregate_similarity, normalize, subcenter_loss, LossConfig, SubCenterBank,
};

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

struct Instance {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    bank: SubCenterBank,
}

fn instance(seed: u64, n: usize, c: usize, dim: usize, batch: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = SubCenterBank::random(n, c, dim, &mut rng).unwrap();
    Instance {
        embeddings: (0..batch).map(|_| gaussian(&mut rng, dim)).collect(),
        labels: (0..batch).map(|_| rng.random_range(0..n)).collect(),
        bank,
    }
}

fn sims(x: &[f64], block: &[f64], dim: usize) -> Vec<f64> {
    block
        .chunks(dim)
        .map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_lies_between_min_and_max(
        seed in any::<u64>(),
        c in 1usize..12,
        dim in 2usize..10,
        t in 1e-3f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normalize(&gaussian(&mut rng, dim)).unwrap();
        let block: Vec<f64> = (0..c)
            .flat_map(|_| normalize(&gaussian(&mut rng, dim)).unwrap().into_inner())
            .collect();
        let s = sims(x.as_slice(), &block, dim);
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let agg = aggregate_similarity(&x, &block, t).unwrap();
        prop_assert!(agg >= lo - 1e-12 && agg <= hi + 1e-12);
    }

    #[test]
    fn aggregate_sharpens_monotonically(
        seed in any::<u64>(),
        c in 2usize..12,
        dim in 2usize..10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normalize(&gaussian(&mut rng, dim)).unwrap();
        let block: Vec<f64> = (0..c)
            .flat_map(|_| normalize(&gaussian(&mut rng, dim)).unwrap().into_inner())
            .collect();
        let max = sims(x.as_slice(), &block, dim)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut prev = f64::NEG_INFINITY;
        for t in [10.0, 1.0, 0.1, 0.01] {
            let agg = aggregate_similarity(&x, &block, t).unwrap();
            prop_assert!(agg >= prev - 1e-12, "T={t}: {agg} < {prev}");
            prop_assert!(agg <= max + 1e-12);
            prev = agg;
        }
    }

    #[test]
    fn single_center_subcenter_loss_equals_aam(
        seed in any::<u64>(),
        n in 2usize..8,
        dim in 2usize..10,
        batch in 1usize..6,
        margin in 0.0f64..1.5,
        scale in 0.5f64..64.0,
        t in 0.05f64..5.0,
    ) {
        let inst = instance(seed, n, 1, dim, batch);
        let cfg = LossConfig { margin, scale, temperature: t, subcenters: 1 };
        let a = aam_softmax_loss(&inst.embeddings, &inst.labels, &inst.bank, &cfg).unwrap();
        let b = subcenter_loss(&inst.embeddings, &inst.labels, &inst.bank, &cfg).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-9);
        for (ga, gb) in a.grad_embeddings.iter().flatten().zip(b.grad_embeddings.iter().flatten()) {
            prop_assert!((ga - gb).abs() < 1e-9);
        }
        for (ga, gb) in a.grad_weights.iter().zip(&b.grad_weights) {
            prop_assert!((ga - gb).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_positive_and_outputs_finite(
        seed in any::<u64>(),
        n in 2usize..8,
        c in 1usize..6,
        dim in 2usize..10,
        batch in 1usize..6,
        t in 0.01f64..5.0,
    ) {
        let inst = instance(seed, n, c, dim, batch);
        let cfg = LossConfig { subcenters: c, temperature: t, ..LossConfig::default() };
        let out = subcenter_loss(&inst.embeddings, &inst.labels, &inst.bank, &cfg).unwrap();
        prop_assert!(out.loss > 0.0 && out.loss.is_finite());
        prop_assert!(out.grad_embeddings.iter().flatten().all(|g| g.is_finite()));
        prop_assert!(out.grad_weights.iter().all(|g| g.is_finite()));
        for a in &out.per_example_target_angle {
            prop_assert!((0.0..=std::f64::consts::PI).contains(a));
        }
    }

    #[test]
    fn permuting_subcenters_is_equivariant(
        seed in any::<u64>(),
        n in 2usize..6,
        c in 2usize..6,
        dim in 2usize..8,
        batch in 1usize..5,
        t in 0.05f64..3.0,
    ) {
        let inst = instance(seed, n, c, dim, batch);
        let cfg = LossConfig { subcenters: c, temperature: t, ..LossConfig::default() };
        // Reverse the sub-centers of every class.
        let perm: Vec<usize> = (0..c).rev().collect();
        let mut permuted = Vec::with_capacity(inst.bank.weights().len());
        for j in 0..n {
            for &k in &perm {
                permuted.extend_from_slice(inst.bank.row(j, k));
            }
        }
        let bank2 = SubCenterBank::from_raw(n, c, dim, permuted).unwrap();
        let a = subcenter_loss(&inst.embeddings, &inst.labels, &inst.bank, &cfg).unwrap();
        let b = subcenter_loss(&inst.embeddings, &inst.labels, &bank2, &cfg).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-10 * a.loss.max(1.0));
        for (ga, gb) in a.grad_embeddings.iter().flatten().zip(b.grad_embeddings.iter().flatten()) {
            prop_assert!((ga - gb).abs() < 1e-10);
        }
        for j in 0..n {
            for (k, &p) in perm.iter().enumerate() {
                for d in 0..dim {
                    let ga = a.grad_weights[(j * c + p) * dim + d];
                    let gb = b.grad_weights[(j * c + k) * dim + d];
                    prop_assert!((ga - gb).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn margin_free_unit_scale_is_plain_cross_entropy(
        seed in any::<u64>(),
        n in 2usize..8,
        c in 1usize..6,
        dim in 2usize..8,
        batch in 1usize..5,
        t in 0.05f64..3.0,
    ) {
        let inst = instance(seed, n, c, dim, batch);
        let cfg = LossConfig { margin: 0.0, scale: 1.0, temperature: t, subcenters: c };
        let out = subcenter_loss(&inst.embeddings, &inst.labels, &inst.bank, &cfg).unwrap();
        let mut expected = 0.0;
        for (e, &y) in inst.embeddings.iter().zip(&inst.labels) {
            let x = normalize(e).unwrap();
            let logits: Vec<f64> = (0..n)
                .map(|j| aggregate_similarity(&x, inst.bank.class_subcenters(j), t).unwrap())
                .collect();
            let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
            expected += lse - logits[y];
        }
        expected /= inst.embeddings.len() as f64;
        prop_assert!((out.loss - expected).abs() < 1e-9);
    }
}

#[test]
fn loss_decreases_as_target_similarity_grows() {
    // x = e1; the target sub-center rotates towards x in the e1-e2 plane
    // while the other class stays orthogonal to x.
    let cfg = LossConfig::default();
    let mut prev = f64::INFINITY;
    for step in (0..=20).rev() {
        let angle = 2.0 * step as f64 / 20.0;
        let bank = SubCenterBank::new(2, 1, 3, vec![angle.cos(), angle.sin(), 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let loss = subcenter_loss(&[vec![1.0, 0.0, 0.0]], &[0], &bank, &cfg)
            .unwrap()
            .loss;
        assert!(loss < prev, "angle {angle}: {loss} >= {prev}");
        prev = loss;
    }
}

#[test]
fn hard_temperature_approaches_max_subcenter_loss() {
    let inst = instance(21, 4, 5, 6, 6);
    let cfg = LossConfig {
        subcenters: 5,
        temperature: 1e-6,
        ..LossConfig::default()
    };
    let soft = subcenter_loss(&inst.embeddings, &inst.labels, &inst.bank, &cfg).unwrap();
    // Same loss with each class replaced by its best-matching sub-center.
    let mut total = 0.0;
    for (e, &y) in inst.embeddings.iter().zip(&inst.labels) {
        let x = normalize(e).unwrap();
        let best: Vec<Vec<f64>> = (0..4)
            .map(|j| {
                let s = sims(x.as_slice(), inst.bank.class_subcenters(j), 6);
                let k = (0..5).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
                inst.bank.row(j, k).to_vec()
            })
            .collect();
        let bank = SubCenterBank::new(4, 1, 6, best.concat()).unwrap();
        let one = LossConfig {
            subcenters: 1,
            ..cfg
        };
        total += aam_softmax_loss(std::slice::from_ref(e), &[y], &bank, &one)
            .unwrap()
            .loss;
    }
    let hard = total / inst.embeddings.len() as f64;
    assert!(
        (soft.loss - hard).abs() < 1e-3 * hard.max(1.0),
        "{} vs {hard}",
        soft.loss
    );
}
