//! Additive angular margin softmax with optional sub-centers.
//!
//! Both losses take raw (not necessarily unit-norm) embeddings and a
//! [`SubCenterBank`] whose rows are also renormalized on every call, so all
//! dot products are cosines. Gradients are returned with respect to the raw
//! inputs, i.e. they flow through the normalization.
//!
//! With `C` sub-centers per class the angle to class `j` is
//! `G_j = arccos(sum_c softmax_c(w_jc.x / T) * w_jc.x)`, and the target
//! logit is `s * cos(G_y + m)`. For `C = 1` this is exactly ArcFace-style
//! AAM-Softmax.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to aggregated cosines before `arccos`.
pub const ACOS_EPS: f64 = 1e-7;

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scale `v` to unit Euclidean length.
pub fn normalize(v: &[f64]) -> Result<EmbeddingVector> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::DegenerateVector);
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / n).collect()))
}

/// `N x C x L` class sub-center directions, stored row-major.
///
/// Rows may drift off the unit sphere between optimizer steps; every loss
/// evaluation renormalizes them and [`SubCenterBank::project`] puts them back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubCenterBank {
    num_classes: usize,
    num_subcenters: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl SubCenterBank {
    /// Build a bank from raw weights, normalizing every row.
    pub fn new(
        num_classes: usize,
        num_subcenters: usize,
        dim: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let mut bank = Self::from_raw(num_classes, num_subcenters, dim, weights)?;
        bank.project()?;
        Ok(bank)
    }

    /// Build a bank without normalizing the rows.
    pub fn from_raw(
        num_classes: usize,
        num_subcenters: usize,
        dim: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        if num_subcenters < 1 {
            return Err(Error::config("subcenters", "must be >= 1"));
        }
        if dim < 1 {
            return Err(Error::config("dim", "must be >= 1"));
        }
        let expected = num_classes * num_subcenters * dim;
        if weights.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: weights.len(),
            });
        }
        Ok(Self {
            num_classes,
            num_subcenters,
            dim,
            weights,
        })
    }

    /// Unit-normalized Gaussian draws for every sub-center.
    pub fn random<R: Rng + ?Sized>(
        num_classes: usize,
        num_subcenters: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = (0..num_classes * num_subcenters * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(num_classes, num_subcenters, dim, weights)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_subcenters(&self) -> usize {
        self.num_subcenters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// The `C x L` block for one class.
    pub fn class_subcenters(&self, class: usize) -> &[f64] {
        let stride = self.num_subcenters * self.dim;
        &self.weights[class * stride..(class + 1) * stride]
    }

    pub fn row(&self, class: usize, subcenter: usize) -> &[f64] {
        let start = (class * self.num_subcenters + subcenter) * self.dim;
        &self.weights[start..start + self.dim]
    }

    /// Renormalize every row to unit length.
    pub fn project(&mut self) -> Result<()> {
        for row in self.weights.chunks_mut(self.dim) {
            let n = norm(row);
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::DegenerateVector);
            }
            row.iter_mut().for_each(|w| *w /= n);
        }
        Ok(())
    }

    /// Unit rows plus the original row norms.
    fn unit_rows(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut unit = self.weights.clone();
        let mut norms = Vec::with_capacity(self.num_classes * self.num_subcenters);
        for row in unit.chunks_mut(self.dim) {
            let n = norm(row);
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::DegenerateVector);
            }
            row.iter_mut().for_each(|w| *w /= n);
            norms.push(n);
        }
        Ok((unit, norms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Additive angular margin, radians.
    pub margin: f64,
    pub scale: f64,
    pub temperature: f64,
    pub subcenters: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.4,
            scale: 30.0,
            temperature: 1.0,
            subcenters: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin < std::f64::consts::FRAC_PI_2) {
            return Err(Error::config("margin", "must lie in [0, pi/2)"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("scale", "must be > 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if self.subcenters < 1 {
            return Err(Error::config("subcenters", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean negative log-probability over the batch.
    pub loss: f64,
    /// Gradient with respect to each raw input embedding.
    pub grad_embeddings: Vec<Vec<f64>>,
    /// Gradient with respect to the raw bank weights, same layout as the bank.
    pub grad_weights: Vec<f64>,
    /// Aggregated angle to the target class for each example.
    pub per_example_target_angle: Vec<f64>,
}

/// Softmax over `sims / T`, then the weighted sum of `sims`.
///
/// Returns the aggregate and the softmax weights.
fn aggregate(sims: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = sims
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let agg = weights.iter().zip(sims).map(|(w, s)| w * s).sum();
    (agg, weights)
}

/// Temperature-weighted similarity between `x` and one class's sub-centers.
///
/// `class_subcenters` holds `C` rows of length `x.dim()`.
pub fn aggregate_similarity(
    x: &EmbeddingVector,
    class_subcenters: &[f64],
    temperature: f64,
) -> Result<f64> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidTemperature(temperature));
    }
    let dim = x.dim();
    if dim == 0 || class_subcenters.is_empty() || !class_subcenters.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: class_subcenters.len(),
        });
    }
    let sims: Vec<f64> = class_subcenters
        .chunks(dim)
        .map(|w| dot(w, x.as_slice()))
        .collect();
    Ok(aggregate(&sims, temperature).0)
}

fn clamp_cos(u: f64) -> f64 {
    u.clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS)
}

/// Logit for one class given its (unclamped) aggregated cosine.
fn class_logit(u: f64, is_target: bool, cfg: &LossConfig) -> f64 {
    let u = clamp_cos(u);
    if is_target {
        cfg.scale * (u.acos() + cfg.margin).cos()
    } else {
        cfg.scale * u
    }
}

/// d(logit)/du, with the clamp treated as identity.
fn class_logit_grad(u: f64, is_target: bool, cfg: &LossConfig) -> f64 {
    let u = clamp_cos(u);
    if is_target {
        let angle = u.acos();
        cfg.scale * (angle + cfg.margin).sin() / (1.0 - u * u).sqrt()
    } else {
        cfg.scale
    }
}

/// `-log softmax(z)[target]`, returned with `softmax(z)`.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let (argmax, max) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (k, z)| if z > acc.1 { (k, z) } else { acc },
            );
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != argmax)
        .map(|(_, e)| e)
        .sum();
    let loss = (max - logits[target]) + rest.ln_1p();
    let total = 1.0 + rest;
    (loss, exps.into_iter().map(|e| e / total).collect())
}

fn check_batch(embeddings: &[Vec<f64>], labels: &[usize], bank: &SubCenterBank) -> Result<()> {
    if embeddings.is_empty() {
        return Err(Error::DegenerateConfiguration("empty batch".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            actual: labels.len(),
        });
    }
    for (e, &label) in embeddings.iter().zip(labels) {
        if e.len() != bank.dim() {
            return Err(Error::DimensionMismatch {
                expected: bank.dim(),
                actual: e.len(),
            });
        }
        if label >= bank.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: bank.num_classes(),
            });
        }
    }
    Ok(())
}

/// Gradient w.r.t. a raw vector given the gradient w.r.t. its unit version.
fn through_normalization(grad_unit: &[f64], unit: &[f64], raw_norm: f64) -> Vec<f64> {
    let radial = dot(grad_unit, unit);
    grad_unit
        .iter()
        .zip(unit)
        .map(|(g, u)| (g - radial * u) / raw_norm)
        .collect()
}

fn finish_weight_grads(grad_unit: &mut [f64], unit: &[f64], norms: &[f64], dim: usize) {
    for ((g, u), &n) in grad_unit.chunks_mut(dim).zip(unit.chunks(dim)).zip(norms) {
        let projected = through_normalization(g, u, n);
        g.copy_from_slice(&projected);
    }
}

/// Single-center AAM-Softmax. The bank must have `C = 1`.
pub fn aam_softmax_loss(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    bank: &SubCenterBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if bank.num_subcenters() != 1 || cfg.subcenters != 1 {
        return Err(Error::config(
            "subcenters",
            "single-center AAM-Softmax requires exactly one sub-center per class",
        ));
    }
    check_batch(embeddings, labels, bank)?;

    let (n, dim) = (bank.num_classes(), bank.dim());
    let batch = embeddings.len() as f64;
    let (centers, center_norms) = bank.unit_rows()?;

    let mut loss = 0.0;
    let mut grad_embeddings = Vec::with_capacity(embeddings.len());
    let mut grad_centers = vec![0.0; centers.len()];
    let mut angles = Vec::with_capacity(embeddings.len());

    for (raw, &label) in embeddings.iter().zip(labels) {
        let x = normalize(raw)?;
        let raw_norm = norm(raw);
        let cosines: Vec<f64> = centers.chunks(dim).map(|w| dot(w, x.as_slice())).collect();
        let logits: Vec<f64> = cosines
            .iter()
            .enumerate()
            .map(|(j, &c)| class_logit(c, j == label, cfg))
            .collect();
        let (l, probs) = cross_entropy(&logits, label);
        loss += l;
        angles.push(clamp_cos(cosines[label]).acos());

        let mut grad_x = vec![0.0; dim];
        for j in 0..n {
            let dz = (probs[j] - if j == label { 1.0 } else { 0.0 }) / batch;
            let dcos = dz * class_logit_grad(cosines[j], j == label, cfg);
            let w = &centers[j * dim..(j + 1) * dim];
            let gw = &mut grad_centers[j * dim..(j + 1) * dim];
            for k in 0..dim {
                grad_x[k] += dcos * w[k];
                gw[k] += dcos * x.as_slice()[k];
            }
        }
        grad_embeddings.push(through_normalization(&grad_x, x.as_slice(), raw_norm));
    }

    finish_weight_grads(&mut grad_centers, &centers, &center_norms, dim);
    Ok(LossOutput {
        loss: loss / batch,
        grad_embeddings,
        grad_weights: grad_centers,
        per_example_target_angle: angles,
    })
}

/// Sub-center AAM-Softmax: each class angle is the arccos of the
/// temperature-weighted aggregate over that class's sub-centers; the margin
/// is added to the target angle after aggregation.
pub fn subcenter_loss(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    bank: &SubCenterBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if bank.num_subcenters() != cfg.subcenters {
        return Err(Error::config(
            "subcenters",
            format!(
                "config has {} sub-centers but bank has {}",
                cfg.subcenters,
                bank.num_subcenters()
            ),
        ));
    }
    check_batch(embeddings, labels, bank)?;

    let (n, c, dim) = (bank.num_classes(), bank.num_subcenters(), bank.dim());
    let t = cfg.temperature;
    let batch = embeddings.len() as f64;
    let (rows, row_norms) = bank.unit_rows()?;

    let mut loss = 0.0;
    let mut grad_embeddings = Vec::with_capacity(embeddings.len());
    let mut grad_rows = vec![0.0; rows.len()];
    let mut angles = Vec::with_capacity(embeddings.len());

    for (raw, &label) in embeddings.iter().zip(labels) {
        let x = normalize(raw)?;
        let raw_norm = norm(raw);

        let mut sims = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut aggs = Vec::with_capacity(n);
        for j in 0..n {
            let s: Vec<f64> = rows[j * c * dim..(j + 1) * c * dim]
                .chunks(dim)
                .map(|w| dot(w, x.as_slice()))
                .collect();
            let (u, p) = aggregate(&s, t);
            sims.push(s);
            weights.push(p);
            aggs.push(u);
        }

        let logits: Vec<f64> = aggs
            .iter()
            .enumerate()
            .map(|(j, &u)| class_logit(u, j == label, cfg))
            .collect();
        let (l, probs) = cross_entropy(&logits, label);
        loss += l;
        angles.push(clamp_cos(aggs[label]).acos());

        let mut grad_x = vec![0.0; dim];
        for j in 0..n {
            let dz = (probs[j] - if j == label { 1.0 } else { 0.0 }) / batch;
            let du = dz * class_logit_grad(aggs[j], j == label, cfg);
            for k in 0..c {
                // d(sum_c p_c s_c)/d s_k = p_k (1 + (s_k - u) / T)
                let ds = du * weights[j][k] * (1.0 + (sims[j][k] - aggs[j]) / t);
                let start = (j * c + k) * dim;
                let w = &rows[start..start + dim];
                let gw = &mut grad_rows[start..start + dim];
                for d in 0..dim {
                    grad_x[d] += ds * w[d];
                    gw[d] += ds * x.as_slice()[d];
                }
            }
        }
        grad_embeddings.push(through_normalization(&grad_x, x.as_slice(), raw_norm));
    }

    finish_weight_grads(&mut grad_rows, &rows, &row_norms, dim);
    Ok(LossOutput {
        loss: loss / batch,
        grad_embeddings,
        grad_weights: grad_rows,
        per_example_target_angle: angles,
    })
}

/// AAM-Softmax for single-center banks, the sub-center loss otherwise.
pub fn compute_loss(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    bank: &SubCenterBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if bank.num_subcenters() == 1 && cfg.subcenters == 1 {
        aam_softmax_loss(embeddings, labels, bank, cfg)
    } else {
        subcenter_loss(embeddings, labels, bank, cfg)
    }
}

/// `lse(a) - lse(b)` for nearby logit vectors without cancellation.
fn logsumexp_diff(a: &[f64], b: &[f64]) -> f64 {
    let max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut base = 0.0;
    let mut delta = 0.0;
    for (x, y) in a.iter().zip(b) {
        let e = (y - max).exp();
        base += e;
        delta += e * (x - y).exp_m1();
    }
    (delta / base).ln_1p()
}

fn class_logits_for(
    x_unit: &[f64],
    class_rows_unit: &[f64],
    is_target: bool,
    dim: usize,
    cfg: &LossConfig,
) -> f64 {
    let sims: Vec<f64> = class_rows_unit
        .chunks(dim)
        .map(|w| dot(w, x_unit))
        .collect();
    class_logit(aggregate(&sims, cfg.temperature).0, is_target, cfg)
}

/// Logit of one class at the `minus` point and its change between the
/// `minus` and `plus` points, when only sub-center similarity `k` moves.
///
/// Writes the aggregate as `u = u_rest + q(s_k) (s_k - u_rest)`, where `q` is
/// the softmax weight of sub-center `k`, so the change keeps full relative
/// precision even when `q` is tiny.
fn single_subcenter_logit_delta(
    others: &[f64],
    s_plus: f64,
    s_minus: f64,
    is_target: bool,
    cfg: &LossConfig,
) -> (f64, f64) {
    let t = cfg.temperature;
    let (u_plus, u_minus, du) = if others.is_empty() {
        (s_plus, s_minus, s_plus - s_minus)
    } else {
        let max = others.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut r, mut a) = (0.0, 0.0);
        for &s in others {
            let e = ((s - max) / t).exp();
            r += e;
            a += e * s;
        }
        let u_rest = a / r;
        let log_r = r.ln();
        let f = |s: f64| (s - u_rest) / (1.0 + (log_r - (s - max) / t).exp());
        let (fp, fm) = (f(s_plus), f(s_minus));
        (u_rest + fp, u_rest + fm, fp - fm)
    };
    let (cp, cm) = (clamp_cos(u_plus), clamp_cos(u_minus));
    let du = if cp == u_plus && cm == u_minus {
        du
    } else {
        cp - cm
    };
    let dz = if is_target {
        // cos(acos u + m) = u cos m - sqrt(1 - u^2) sin m, differenced exactly.
        let m = cfg.margin;
        let roots = (1.0 - cp * cp).sqrt() + (1.0 - cm * cm).sqrt();
        du * (m.cos() + m.sin() * (cp + cm) / roots)
    } else {
        du
    };
    (class_logit(u_minus, is_target, cfg), cfg.scale * dz)
}

fn unit_block(raw: &[f64], dim: usize) -> Vec<f64> {
    let mut out = raw.to_vec();
    for row in out.chunks_mut(dim) {
        let n = norm(row);
        row.iter_mut().for_each(|w| *w /= n);
    }
    out
}

/// Largest relative disagreement between the analytic gradient of
/// [`compute_loss`] and central differences over every raw input entry.
///
/// Each difference `L(p + h) - L(p - h)` is accumulated per example as a
/// log-sum-exp difference of the perturbed logits, so gradients of classes
/// with vanishing probability are resolved instead of drowning in rounding
/// noise of the full loss value.
pub fn loss_backward_check(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    bank: &SubCenterBank,
    cfg: &LossConfig,
    h: f64,
) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::config(
            "h",
            "finite-difference step must lie in [1e-6, 1e-4]",
        ));
    }
    let analytic = compute_loss(embeddings, labels, bank, cfg)?;

    let (n, c, dim) = (bank.num_classes(), bank.num_subcenters(), bank.dim());
    let batch = embeddings.len() as f64;
    let block = c * dim;
    let units: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| normalize(e).map(EmbeddingVector::into_inner))
        .collect::<Result<_>>()?;
    let bank_unit = unit_block(bank.weights(), dim);
    let logits: Vec<Vec<f64>> = units
        .iter()
        .zip(labels)
        .map(|(x, &label)| {
            (0..n)
                .map(|j| {
                    class_logits_for(
                        x,
                        &bank_unit[j * block..(j + 1) * block],
                        j == label,
                        dim,
                        cfg,
                    )
                })
                .collect()
        })
        .collect();

    let mut worst = 0.0_f64;
    let mut record = |analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    };

    for (i, raw) in embeddings.iter().enumerate() {
        let label = labels[i];
        for d in 0..dim {
            let shifted = |delta: f64| {
                let mut e = raw.clone();
                e[d] += delta;
                let x = normalize(&e).map(EmbeddingVector::into_inner)?;
                Ok::<_, Error>(
                    (0..n)
                        .map(|j| {
                            class_logits_for(
                                &x,
                                &bank_unit[j * block..(j + 1) * block],
                                j == label,
                                dim,
                                cfg,
                            )
                        })
                        .collect::<Vec<f64>>(),
                )
            };
            let plus = shifted(h)?;
            let minus = shifted(-h)?;
            let diff = logsumexp_diff(&plus, &minus) - (plus[label] - minus[label]);
            record(analytic.grad_embeddings[i][d], diff / batch / (2.0 * h));
        }
    }

    for j in 0..n {
        let class_raw = &bank.weights()[j * block..(j + 1) * block];
        let class_unit = &bank_unit[j * block..(j + 1) * block];
        for p in 0..block {
            let k = p / dim;
            let row = &class_raw[k * dim..(k + 1) * dim];
            let shifted_row = |delta: f64| {
                let mut raw = row.to_vec();
                raw[p % dim] += delta;
                unit_block(&raw, dim)
            };
            let plus_row = shifted_row(h);
            let minus_row = shifted_row(-h);
            let mut diff = 0.0;
            for (i, x) in units.iter().enumerate() {
                let target = labels[i] == j;
                let others: Vec<f64> = class_unit
                    .chunks(dim)
                    .enumerate()
                    .filter(|&(c, _)| c != k)
                    .map(|(_, w)| dot(w, x))
                    .collect();
                let (z_minus, dz) = single_subcenter_logit_delta(
                    &others,
                    dot(&plus_row, x),
                    dot(&minus_row, x),
                    target,
                    cfg,
                );
                // Only logit j moves, so lse(plus) - lse(minus) is
                // log(1 + softmax(minus)_j * expm1(dz)).
                let mut minus = logits[i].clone();
                minus[j] = z_minus;
                let max = minus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = minus.iter().map(|z| (z - max).exp()).sum();
                let p_j = (z_minus - max).exp() / total;
                diff += (p_j * dz.exp_m1()).ln_1p();
                if target {
                    diff -= dz;
                }
            }
            record(
                analytic.grad_weights[j * block + p],
                diff / batch / (2.0 * h),
            );
        }
    }

    Ok(worst)
}
