//! Training objectives, each returned together with its gradient so the
//! trainer can push it back through the networks.
//!
//! The contrastive losses share one form: for anchor `q`, stored keys `A`
//! and a positive subset `P`,
//!
//! ```text
//! l(q) = -1/|P| * sum_{p in P} log( exp(q.k_p / t) / sum_{a in A} exp(q.k_a / t) )
//!      = logsumexp_a(q.k_a / t) - mean_p(q.k_p / t)
//! ```
//!
//! with gradient `(sum_a softmax_a k_a - mean_p k_p) / t`. The queue loss
//! takes `P` = keys from the anchor's own image; the refinement loss takes
//! `P` = every normal-weather key.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DensityMap, ProjVector};
use crate::multiqueue::KeyMemory;

/// How per-anchor (and per-image) terms are combined over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    /// Weight of the count loss during representation learning.
    pub lambda1: f64,
    /// Weight of the count loss during refinement.
    pub lambda2: f64,
    /// Gaussian width of the count-loss posterior, in density cells.
    pub sigma_bl: f64,
    pub loss_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.05, lambda1: 10.0, lambda2: 10.0, sigma_bl: 1.0, loss_reduction: Reduction::Mean }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("loss.temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.sigma_bl > 0.0) {
            return Err(Error::Config(format!("loss.sigma_bl must be > 0, got {}", self.sigma_bl)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to each input row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-anchor contrastive term from precomputed logits; `positives` index
/// into `logits`. Invariant to adding a constant to every logit.
pub fn contrastive_term(logits: &[f64], positives: &[usize]) -> f64 {
    let (lse, _) = log_softmax_parts(logits);
    lse - positives.iter().map(|&p| logits[p]).sum::<f64>() / positives.len() as f64
}

/// `(logsumexp, softmax)` computed with the max shifted out.
fn log_softmax_parts(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    (max + total.ln(), exps.into_iter().map(|e| e / total).collect())
}

/// Contrastive loss over explicit key and positive sets. `positives[i]`
/// indexes into `keys` for anchor `i` and must not be empty.
pub fn contrastive(
    anchors: &[&[f64]],
    keys: &[&[f64]],
    positives: &[Vec<usize>],
    temperature: f64,
    reduction: Reduction,
) -> Result<LossGrad> {
    if anchors.is_empty() {
        return Err(Error::Invalid("no anchors".into()));
    }
    if keys.is_empty() {
        return Err(Error::Protocol("key memory is empty".into()));
    }
    if positives.len() != anchors.len() {
        return Err(Error::Shape(format!("{} positive sets for {} anchors", positives.len(), anchors.len())));
    }
    let dim = anchors[0].len();
    if anchors.iter().chain(keys).any(|v| v.len() != dim) {
        return Err(Error::Shape("anchors and keys differ in dimension".into()));
    }
    let scale = reduction.scale(anchors.len());
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(anchors.len());
    for (i, (q, pos)) in anchors.iter().zip(positives).enumerate() {
        if pos.is_empty() {
            return Err(Error::Protocol(format!("anchor {i} has no positive key in memory")));
        }
        if let Some(&bad) = pos.iter().find(|&&p| p >= keys.len()) {
            return Err(Error::Invalid(format!("positive index {bad} out of range")));
        }
        let logits: Vec<f64> = keys.iter().map(|k| dot(q, k) / temperature).collect();
        let (lse, softmax) = log_softmax_parts(&logits);
        let mean_pos = pos.iter().map(|&p| logits[p]).sum::<f64>() / pos.len() as f64;
        loss += (lse - mean_pos) * scale;

        let mut g = vec![0.0; dim];
        for (s, k) in softmax.iter().zip(keys) {
            for (gd, kd) in g.iter_mut().zip(k.iter()) {
                *gd += s * kd;
            }
        }
        let inv = 1.0 / pos.len() as f64;
        for &p in pos {
            for (gd, kd) in g.iter_mut().zip(keys[p].iter()) {
                *gd -= inv * kd;
            }
        }
        g.iter_mut().for_each(|v| *v *= scale / temperature);
        grad.push(g);
    }
    Ok(LossGrad { loss, grad })
}

const UNIT_TOL: f64 = 1e-3;

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Invalid(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

fn key_rows<'a>(keys: &[&'a ProjVector]) -> Result<Vec<&'a [f64]>> {
    keys.iter()
        .map(|k| {
            check_unit(&k.vector, "stored key")?;
            Ok(k.vector.as_slice())
        })
        .collect()
}

/// Which stored keys count as positives for a queue-loss anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveSelection {
    /// Keys from the same source image.
    #[default]
    SameImage,
    /// Keys with the same weather label.
    SameWeatherLabel,
}

/// Queue loss: positives are stored keys of each anchor's own image (or of
/// its weather class, under [`PositiveSelection::SameWeatherLabel`]).
pub fn contra1_with(
    anchors: &[ProjVector],
    memory: &dyn KeyMemory,
    temperature: f64,
    reduction: Reduction,
    selection: PositiveSelection,
) -> Result<LossGrad> {
    let all = memory.all();
    let keys = key_rows(&all)?;
    let positives = anchors
        .iter()
        .map(|a| {
            check_unit(&a.vector, "anchor")?;
            Ok(all
                .iter()
                .enumerate()
                .filter(|(_, k)| match selection {
                    PositiveSelection::SameImage => k.image_index == a.image_index,
                    PositiveSelection::SameWeatherLabel => k.weather == a.weather,
                })
                .map(|(i, _)| i)
                .collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let rows: Vec<&[f64]> = anchors.iter().map(|a| a.vector.as_slice()).collect();
    contrastive(&rows, &keys, &positives, temperature, reduction)
}

/// Queue loss with same-image positives.
pub fn contra1(anchors: &[ProjVector], memory: &dyn KeyMemory, temperature: f64, reduction: Reduction) -> Result<LossGrad> {
    contra1_with(anchors, memory, temperature, reduction, PositiveSelection::SameImage)
}

/// Refinement loss: every stored key of `normal_class` is a positive for
/// every anchor.
pub fn contra2(
    anchors: &[Vec<f64>],
    memory: &dyn KeyMemory,
    normal_class: usize,
    temperature: f64,
    reduction: Reduction,
) -> Result<LossGrad> {
    if memory.class(normal_class)?.is_empty() {
        return Err(Error::Protocol(format!("class-{normal_class} memory is empty")));
    }
    let all = memory.all();
    let keys = key_rows(&all)?;
    let normal: Vec<usize> = all.iter().enumerate().filter(|(_, k)| k.weather == normal_class).map(|(i, _)| i).collect();
    for a in anchors {
        check_unit(a, "anchor")?;
    }
    let rows: Vec<&[f64]> = anchors.iter().map(Vec::as_slice).collect();
    let positives = vec![normal; anchors.len()];
    contrastive(&rows, &keys, &positives, temperature, reduction)
}

/// Point-supervised count loss for one density map.
///
/// Each cell's mass is split among annotations by a Gaussian posterior
/// centred on the points (cell centres sit at `(j + 0.5, i + 0.5)` in grid
/// units); each annotation's expected count is pushed toward one. With no
/// annotations the loss is the total mass. `points` are `(x, y)` in
/// density-grid units.
pub fn bayesian_loss(density: &DensityMap, points: &[[f64; 2]], sigma: f64) -> Result<(f64, Vec<f64>)> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be > 0, got {sigma}")));
    }
    if let Some(v) = density.data.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Invalid(format!("density value {v} is negative or NaN")));
    }
    let (h, w) = (density.height, density.width);
    if let Some(p) = points.iter().find(|p| !(0.0..=w as f64).contains(&p[0]) || !(0.0..=h as f64).contains(&p[1])) {
        return Err(Error::Invalid(format!("point {p:?} outside the {h}x{w} grid")));
    }
    if points.is_empty() {
        return Ok((density.sum(), vec![1.0; density.data.len()]));
    }
    let posterior = posterior(h, w, points, sigma);
    let n = points.len();
    let mut expected = vec![0.0; n];
    for (cell, d) in density.data.iter().enumerate() {
        for (e, p) in expected.iter_mut().zip(&posterior[cell * n..(cell + 1) * n]) {
            *e += p * d;
        }
    }
    let loss = expected.iter().map(|e| (1.0 - e).abs()).sum();
    let signs: Vec<f64> = expected.iter().map(|e| -sign(1.0 - e)).collect();
    let grad = (0..h * w)
        .map(|cell| posterior[cell * n..(cell + 1) * n].iter().zip(&signs).map(|(p, s)| p * s).sum())
        .collect();
    Ok((loss, grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-major `[cell][annotation]` posterior probabilities.
fn posterior(h: usize, w: usize, points: &[[f64; 2]], sigma: f64) -> Vec<f64> {
    let n = points.len();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; h * w * n];
    let mut logits = vec![0.0; n];
    for i in 0..h {
        for j in 0..w {
            let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
            for (l, p) in logits.iter_mut().zip(points) {
                *l = -((cx - p[0]).powi(2) + (cy - p[1]).powi(2)) * inv;
            }
            let (_, soft) = log_softmax_parts(&logits);
            out[(i * w + j) * n..(i * w + j + 1) * n].copy_from_slice(&soft);
        }
    }
    out
}

/// Count loss over a batch, reduced like the contrastive terms.
pub fn bayesian_batch(
    densities: &[DensityMap],
    points: &[Vec<[f64; 2]>],
    sigma: f64,
    reduction: Reduction,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if densities.len() != points.len() || densities.is_empty() {
        return Err(Error::Shape(format!("{} density maps for {} point lists", densities.len(), points.len())));
    }
    let scale = reduction.scale(densities.len());
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(densities.len());
    for (d, p) in densities.iter().zip(points) {
        let (l, mut g) = bayesian_loss(d, p, sigma)?;
        total += l * scale;
        g.iter_mut().for_each(|v| *v *= scale);
        grads.push(g);
    }
    Ok((total, grads))
}

/// Representation-learning objective.
pub fn wrl_total(contra1: f64, bayesian: f64, lambda1: f64) -> f64 {
    contra1 + lambda1 * bayesian
}

/// Refinement objective.
pub fn crr_total(contra2: f64, bayesian: f64, lambda2: f64) -> f64 {
    contra2 + lambda2 * bayesian
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multiqueue::MultiQueue;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn uniform_logits_give_ln_two() {
        let mut mq = MultiQueue::new(2, 4, 2).unwrap();
        mq.push(ProjVector::new(vec![0.0, 1.0], 1, 0)).unwrap();
        mq.push(ProjVector::new(vec![0.0, 1.0], 2, 1)).unwrap();
        let anchor = ProjVector::new(vec![1.0, 0.0], 1, 0);
        let l = contra1(&[anchor.clone()], &mq, 0.05, Reduction::Mean).unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-12);
        let l2 = contra2(&[anchor.vector], &mq, 0, 0.05, Reduction::Mean).unwrap();
        assert!((l2.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separated_pair_has_negligible_loss() {
        let mut mq = MultiQueue::new(3, 4, 2).unwrap();
        mq.push(ProjVector::new(vec![1.0, 0.0], 7, 0)).unwrap();
        mq.push(ProjVector::new(vec![-1.0, 0.0], 8, 2)).unwrap();
        let anchor = ProjVector::new(vec![1.0, 0.0], 7, 1);
        let l = contra1(&[anchor.clone()], &mq, 0.05, Reduction::Mean).unwrap();
        assert!(l.loss >= 0.0 && l.loss < 1e-15, "{}", l.loss);
        let l2 = contra2(&[anchor.vector], &mq, 0, 0.05, Reduction::Mean).unwrap();
        assert!(l2.loss < 1e-15);
    }

    #[test]
    fn protocol_errors() {
        let mut mq = MultiQueue::new(2, 4, 2).unwrap();
        let anchor = ProjVector::new(vec![1.0, 0.0], 1, 0);
        assert!(matches!(contra1(&[anchor.clone()], &mq, 0.05, Reduction::Mean), Err(Error::Protocol(_))));
        mq.push(ProjVector::new(vec![1.0, 0.0], 2, 1)).unwrap();
        assert!(matches!(contra1(&[anchor.clone()], &mq, 0.05, Reduction::Mean), Err(Error::Protocol(_))));
        assert!(matches!(contra2(&[anchor.vector.clone()], &mq, 0, 0.05, Reduction::Mean), Err(Error::Protocol(_))));
        assert!(contra2(&[anchor.vector], &mq, 5, 0.05, Reduction::Mean).is_err());
    }

    #[test]
    fn non_unit_anchor_rejected() {
        let mut mq = MultiQueue::new(2, 4, 2).unwrap();
        mq.push(ProjVector::new(vec![1.0, 0.0], 1, 0)).unwrap();
        let anchor = ProjVector::new(vec![2.0, 0.0], 1, 0);
        assert!(matches!(contra1(&[anchor], &mq, 0.05, Reduction::Mean), Err(Error::Invalid(_))));
    }

    #[test]
    fn label_selection_changes_only_positive_sets() {
        let mut mq = MultiQueue::new(2, 4, 2).unwrap();
        mq.push(ProjVector::new(unit(&[1.0, 0.2]), 1, 0)).unwrap();
        mq.push(ProjVector::new(unit(&[0.3, 1.0]), 2, 0)).unwrap();
        mq.push(ProjVector::new(unit(&[-1.0, 0.1]), 3, 1)).unwrap();
        let anchor = ProjVector::new(unit(&[0.8, 0.6]), 1, 0);
        let by_label = contra1_with(&[anchor.clone()], &mq, 0.5, Reduction::Mean, PositiveSelection::SameWeatherLabel).unwrap();
        let keys: Vec<&[f64]> = mq.all().iter().map(|k| k.vector.as_slice()).collect();
        let direct = contrastive(&[&anchor.vector], &keys, &[vec![0, 1]], 0.5, Reduction::Mean).unwrap();
        assert_eq!(by_label, direct);
    }

    #[test]
    fn sum_reduction_scales_mean_by_batch() {
        let keys = [unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let key_rows: Vec<&[f64]> = keys.iter().map(Vec::as_slice).collect();
        let anchors = [unit(&[1.0, 1.0]), unit(&[1.0, -0.5]), unit(&[-0.2, 1.0])];
        let rows: Vec<&[f64]> = anchors.iter().map(Vec::as_slice).collect();
        let pos = vec![vec![0], vec![1], vec![0, 1]];
        let mean = contrastive(&rows, &key_rows, &pos, 0.1, Reduction::Mean).unwrap();
        let sum = contrastive(&rows, &key_rows, &pos, 0.1, Reduction::Sum).unwrap();
        assert!((sum.loss - 3.0 * mean.loss).abs() < 1e-12);
    }

    #[test]
    fn bayesian_zero_density() {
        let d = DensityMap::zeros(8, 8);
        let (l, _) = bayesian_loss(&d, &[[1.0, 1.0], [4.0, 4.0], [7.5, 2.0]], 1.0).unwrap();
        assert_eq!(l, 3.0);
    }

    #[test]
    fn bayesian_single_point_delta() {
        let mut d = DensityMap::zeros(8, 8);
        d.set(6, 1, 1.0);
        let (l, _) = bayesian_loss(&d, &[[2.0, 3.0]], 1.0).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn bayesian_without_points_is_total_mass() {
        let mut d = DensityMap::zeros(4, 4);
        d.set(0, 0, 0.25);
        d.set(3, 2, 0.5);
        let (l, g) = bayesian_loss(&d, &[], 1.0).unwrap();
        assert_eq!(l, 0.75);
        assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bayesian_rejects_negative_density_and_outside_points() {
        let mut d = DensityMap::zeros(4, 4);
        assert!(bayesian_loss(&d, &[[5.0, 1.0]], 1.0).is_err());
        d.set(0, 0, -0.1);
        assert!(matches!(bayesian_loss(&d, &[[1.0, 1.0]], 1.0), Err(Error::Invalid(_))));
    }

    #[test]
    fn stage_totals() {
        assert!((wrl_total(0.7, 0.02, 10.0) - 0.9).abs() < 1e-12);
        assert_eq!(wrl_total(0.0, 0.0, 10.0), 0.0);
        assert_eq!(wrl_total(0.4, 3.0, 0.0), 0.4);
        assert!((crr_total(0.7, 0.02, 10.0) - 0.9).abs() < 1e-12);
        assert_eq!(crr_total(1.0, 0.0, 10.0), 1.0);
        assert_eq!(crr_total(0.4, 3.0, 0.0), 0.4);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { temperature: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { sigma_bl: -1.0, ..LossConfig::default() }.validate().is_err());
    }
}
