//! Central finite-difference checks of the analytic loss gradients on small
//! random scenes.
//!
//! The classification loss is differentiated with respect to probabilities
//! that must stay on the simplex, so it is checked through a softmax over
//! free logits: `dL/dz_j = p_j (g_j - sum_c g_c p_c)`.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{
    classification_loss, classification_loss_raw, embedding_loss, embedding_loss_raw,
    sample_pairs_with, BackgroundMode, ClassTargetBatch, PairBatch,
};
use crate::scene::{ClassScoreStack, EmbeddingField, InstanceLabelMap};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub max_side: usize,
    pub max_dim: usize,
    pub max_classes: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub eps: f64,
    pub seed: u64,
    /// Test hook: scales every analytic gradient by `1 + perturb` before
    /// comparison. Zero disables it.
    pub perturb: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            max_side: 8,
            max_dim: 4,
            max_classes: 3,
            step: 1e-4,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            eps: 1e-6,
            seed: 0,
            perturb: 0.0,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.max_side < 2 || self.max_dim < 2 || self.max_classes < 1 {
            return Err(Error::Config(
                "scene bounds need side >= 2, dim >= 2, classes >= 1".into(),
            ));
        }
        if !(self.step > 0.0 && self.rel_tol > 0.0 && self.abs_tol >= 0.0) {
            return Err(Error::Config("step and tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Embedding,
    Classification,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Embedding => "embedding",
            LossKind::Classification => "classification",
        })
    }
}

/// One compared coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coordinate {
    pub loss: LossKind,
    pub trial: usize,
    /// Embedding: `(row, col, k)`; classification: `(row, col, channel)`.
    pub row: usize,
    pub col: usize,
    pub index: usize,
    /// Classification threshold index (0 for the embedding loss).
    pub tau_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub abs_error: f64,
}

impl fmt::Display for Coordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} trial {} at ({}, {}) index {} tau#{}: analytic {:.9e} numeric {:.9e} (rel {:.3e}, abs {:.3e})",
            self.loss,
            self.trial,
            self.row,
            self.col,
            self.index,
            self.tau_index,
            self.analytic,
            self.numeric,
            self.rel_error,
            self.abs_error
        )
    }
}

const REPORT_MAGNITUDE: f64 = 1e-4;

#[derive(Debug, Clone, Default, Serialize)]
pub struct LossSummary {
    pub coordinates: usize,
    pub failures: usize,
    pub worst: Option<Coordinate>,
    pub first_failure: Option<Coordinate>,
    #[serde(skip)]
    abs_floor: f64,
}

impl LossSummary {
    fn record(&mut self, c: Coordinate, failed: bool) {
        self.coordinates += 1;
        if failed {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(c.clone());
            }
        }
        // Tiny coordinates settled by the absolute floor do not count toward
        // the reported worst relative error.
        let magnitude = c.analytic.abs().max(c.numeric.abs());
        let judged = c.abs_error > self.abs_floor || magnitude >= REPORT_MAGNITUDE;
        if judged && self.worst.as_ref().is_none_or(|w| c.rel_error > w.rel_error) {
            self.worst = Some(c);
        }
    }

    pub fn worst_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub embedding: LossSummary,
    pub classification: LossSummary,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.embedding.failures == 0 && self.classification.failures == 0
    }
}

/// Relative error against the larger magnitude. A coordinate fails only when
/// both the relative error exceeds `rel_tol` and the absolute error exceeds
/// `abs_tol`, so gradients near zero are judged by the absolute floor.
fn compare(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> (f64, f64, bool) {
    let abs = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = if scale <= abs_tol { 0.0 } else { abs / scale };
    (rel, abs, rel > rel_tol && abs > abs_tol)
}

pub fn run_grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        trials: config.trials,
        embedding: LossSummary { abs_floor: config.abs_tol, ..Default::default() },
        classification: LossSummary { abs_floor: config.abs_tol, ..Default::default() },
    };
    for trial in 0..config.trials {
        let scene = random_scene(config, &mut rng);
        check_embedding(config, trial, &scene, &mut report.embedding)?;
        check_classification(config, trial, &scene, &mut rng, &mut report.classification)?;
    }
    Ok(report)
}

struct TrialScene {
    labels: InstanceLabelMap,
    field: EmbeddingField,
    batch: PairBatch,
    num_classes: usize,
}

const EMBED_RANGE: f64 = 0.8;
/// Pairs closer than this sit near the similarity clamp for same-instance
/// targets, where the loss is not differentiable.
const MIN_PAIR_SQ_DIST: f64 = 1e-2;

fn random_scene(config: &GradCheckConfig, rng: &mut ChaCha8Rng) -> TrialScene {
    loop {
        let h = rng.random_range(2..=config.max_side);
        let w = rng.random_range(2..=config.max_side);
        let d = rng.random_range(2..=config.max_dim);
        let num_classes = rng.random_range(1..=config.max_classes);
        let n_inst = rng.random_range(1..=3u16);
        let raw: Vec<u16> = (0..h * w).map(|_| rng.random_range(0..=n_inst)).collect();
        // Renumber to contiguous ids.
        let mut remap = BTreeMap::new();
        for &l in &raw {
            if l != 0 {
                let next = remap.len() as u16 + 1;
                remap.entry(l).or_insert(next);
            }
        }
        if remap.is_empty() {
            continue;
        }
        let raw: Vec<u16> = raw.iter().map(|l| remap.get(l).copied().unwrap_or(0)).collect();
        let class_of = (1..=remap.len() as u16)
            .map(|i| (i, rng.random_range(1..=num_classes as u16)))
            .collect();
        let labels = InstanceLabelMap::new(h, w, raw, class_of).expect("consistent labels");
        let values: Vec<f32> = (0..h * w * d)
            .map(|_| rng.random_range(-EMBED_RANGE..=EMBED_RANGE) as f32)
            .collect();
        let field = EmbeddingField::new(h, w, d, values).expect("field shape");
        let mode = [BackgroundMode::Exclude, BackgroundMode::Repel, BackgroundMode::Group]
            [rng.random_range(0..3)];
        let k = rng.random_range(2..=4);
        let Ok(batch) = sample_pairs_with(&labels, k, mode, rng) else {
            continue;
        };
        let too_close = batch.pairs().iter().any(|p| {
            let a = &batch.points()[p.a];
            let b = &batch.points()[p.b];
            crate::metric::sq_dist(field.at(a.row, a.col), field.at(b.row, b.col)) < MIN_PAIR_SQ_DIST
        });
        if too_close {
            continue;
        }
        return TrialScene { labels, field, batch, num_classes };
    }
}

fn check_embedding(
    config: &GradCheckConfig,
    trial: usize,
    scene: &TrialScene,
    summary: &mut LossSummary,
) -> Result<()> {
    let field = &scene.field;
    let (_, grad) = embedding_loss(field, &scene.batch, config.eps)?;
    let (w, d) = (field.width(), field.dim());
    let mut values: Vec<f64> = field.values().iter().map(|&v| v as f64).collect();
    let mut scratch = vec![0.0f64; values.len()];
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + config.step;
        let plus = embedding_loss_raw(&values, w, d, &scene.batch, config.eps, &mut scratch);
        values[i] = orig - config.step;
        let minus = embedding_loss_raw(&values, w, d, &scene.batch, config.eps, &mut scratch);
        values[i] = orig;
        let numeric = (plus - minus) / (2.0 * config.step);
        let analytic = grad.values()[i] as f64 * (1.0 + config.perturb);
        let (rel, abs, failed) = compare(analytic, numeric, config.rel_tol, config.abs_tol);
        let px = i / d;
        summary.record(
            Coordinate {
                loss: LossKind::Embedding,
                trial,
                row: px / w,
                col: px % w,
                index: i % d,
                tau_index: 0,
                analytic,
                numeric,
                rel_error: rel,
                abs_error: abs,
            },
            failed,
        );
    }
    Ok(())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

const LOGIT_RANGE: f64 = 2.0;
const CHECK_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

fn check_classification(
    config: &GradCheckConfig,
    trial: usize,
    scene: &TrialScene,
    rng: &mut ChaCha8Rng,
    summary: &mut LossSummary,
) -> Result<()> {
    let (h, w) = (scene.labels.height(), scene.labels.width());
    let n = h * w;
    let channels = scene.num_classes + 1;
    let n_tau = rng.random_range(1..=CHECK_THRESHOLDS.len());
    let thresholds = CHECK_THRESHOLDS[..n_tau].to_vec();

    let logits: Vec<Vec<f64>> = (0..n_tau)
        .map(|_| (0..n * channels).map(|_| rng.random_range(-LOGIT_RANGE..=LOGIT_RANGE)).collect())
        .collect();
    let mut probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|z| z.chunks_exact(channels).flat_map(softmax).collect())
        .collect();

    let n_points = rng.random_range(1..=n.min(6));
    let points: Vec<(usize, usize)> =
        sample(rng, n, n_points).into_iter().map(|i| (i / w, i % w)).collect();
    let labels: Vec<Vec<u16>> = (0..n_tau)
        .map(|_| (0..n_points).map(|_| rng.random_range(0..channels as u16)).collect())
        .collect();
    let ious = vec![vec![0.0; n_points]; n_tau];
    let targets = ClassTargetBatch::new(thresholds.clone(), points, labels, ious)?;

    let stack = ClassScoreStack::new(
        h,
        w,
        scene.num_classes,
        thresholds,
        probs.iter().map(|p| p.iter().map(|&v| v as f32).collect()).collect(),
    )?;
    let (_, grad_p) = classification_loss(&stack, &targets, config.eps)?;

    let mut scratch: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut loss_with = |probs: &[Vec<f64>]| {
        classification_loss_raw(probs, w, channels, &targets, config.eps, &mut scratch)
    };
    for ti in 0..n_tau {
        for px in 0..n {
            let base = px * channels;
            let p = &probs[ti][base..base + channels].to_vec();
            let g: Vec<f64> = grad_p[ti][base..base + channels].iter().map(|&v| v as f64).collect();
            let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
            for j in 0..channels {
                let analytic = p[j] * (g[j] - dot) * (1.0 + config.perturb);
                let mut z = logits[ti][base..base + channels].to_vec();
                z[j] += config.step;
                probs[ti][base..base + channels].copy_from_slice(&softmax(&z));
                let plus = loss_with(&probs);
                z[j] -= 2.0 * config.step;
                probs[ti][base..base + channels].copy_from_slice(&softmax(&z));
                let minus = loss_with(&probs);
                probs[ti][base..base + channels].copy_from_slice(p);
                let numeric = (plus - minus) / (2.0 * config.step);
                let (rel, abs, failed) = compare(analytic, numeric, config.rel_tol, config.abs_tol);
                summary.record(
                    Coordinate {
                        loss: LossKind::Classification,
                        trial,
                        row: px / w,
                        col: px % w,
                        index: j,
                        tau_index: ti,
                        analytic,
                        numeric,
                        rel_error: rel,
                        abs_error: abs,
                    },
                    failed,
                );
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run_grad_check(&GradCheckConfig { trials: 10, ..Default::default() }).unwrap();
        assert!(report.passed(), "{:?}", report.embedding.first_failure);
        assert!(report.embedding.coordinates > 0 && report.classification.coordinates > 0);
    }

    #[test]
    fn perturbation_is_caught() {
        let cfg = GradCheckConfig { trials: 3, perturb: 1e-2, ..Default::default() };
        let report = run_grad_check(&cfg).unwrap();
        assert!(!report.passed());
        assert!(report.embedding.failures > 0);
        assert!(report.classification.failures > 0);
    }

    #[test]
    fn zero_trials_rejected() {
        let cfg = GradCheckConfig { trials: 0, ..Default::default() };
        assert!(matches!(run_grad_check(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn comparison_floor() {
        assert_eq!(compare(0.0, 5e-8, 1e-4, 1e-7), (0.0, 5e-8, false));
        // Large relative error on a tiny coordinate passes on the floor.
        assert!(!compare(2e-7, 1.5e-7, 1e-4, 1e-7).2);
        let (rel, _, failed) = compare(1.0, 1.001, 1e-4, 1e-7);
        assert!(failed && (rel - 0.001 / 1.001).abs() < 1e-12);
    }
}
