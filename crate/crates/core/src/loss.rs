//! Pairwise embedding loss, per-threshold seed classification loss, their
//! λ-weighted combination, and the samplers that feed them.
//!
//! Both losses are evaluated in f64 and return analytic gradients with
//! respect to the embedding field and the class probabilities respectively.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::metric::{pixel_sq_norms, similarity_from_sq_dist, sq_dist_plane};
use crate::proposer::threshold_plane;
use crate::scene::{ClassScoreStack, EmbeddingField, InstanceLabelMap};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Points sampled per instance.
    pub k: usize,
    pub lambda_max: f64,
    /// Steps over which λ ramps linearly from 0 to `lambda_max`.
    pub ramp_steps: usize,
    /// Clamp applied to similarities and probabilities before taking logs.
    pub eps: f64,
    pub iou_good_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { k: 10, lambda_max: 0.2, ramp_steps: 1000, eps: 1e-6, iou_good_threshold: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!("eps must be in (0, 0.5), got {}", self.eps)));
        }
        if !(self.lambda_max >= 0.0) {
            return Err(Error::Config(format!("lambda_max must be >= 0, got {}", self.lambda_max)));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {}", self.k)));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        if self.ramp_steps == 0 {
            return self.lambda_max;
        }
        self.lambda_max * step.min(self.ramp_steps) as f64 / self.ramp_steps as f64
    }
}

// ---------------------------------------------------------------------------
// Pair sampling
// ---------------------------------------------------------------------------

/// How background pixels take part in pair sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackgroundMode {
    /// Only instance pixels are sampled.
    #[default]
    Exclude,
    /// Background points are sampled and paired against every instance as
    /// negatives; background-background pairs are skipped.
    Repel,
    /// Background is sampled like one more instance, including positive pairs.
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledPoint {
    pub row: usize,
    pub col: usize,
    /// Instance id, 0 for background.
    pub instance: u16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    points: Vec<SampledPoint>,
    pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn points(&self) -> &[SampledPoint] {
        &self.points
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    /// Builds a batch from explicit points and pairs. Weights are used as given.
    pub fn from_parts(points: Vec<SampledPoint>, pairs: Vec<Pair>) -> Result<Self> {
        for p in &pairs {
            if p.a >= points.len() || p.b >= points.len() || p.a == p.b {
                return Err(Error::Config(format!("pair ({}, {}) is invalid", p.a, p.b)));
            }
        }
        Ok(Self { points, pairs })
    }
}

/// Draws `k` pixels uniformly without replacement from each non-empty label
/// group in `groups`, returned in ascending pixel order.
fn sample_group<R: Rng + ?Sized>(pixels: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if pixels.len() <= k {
        return pixels.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, pixels.len(), k)
        .into_iter()
        .map(|i| pixels[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Samples `k` points per instance and enumerates every unordered pair.
pub fn sample_pairs<R: Rng + ?Sized>(
    labels: &InstanceLabelMap,
    k: usize,
    rng: &mut R,
) -> Result<PairBatch> {
    sample_pairs_with(labels, k, BackgroundMode::Exclude, rng)
}

/// Pair weights are inversely proportional to the number of pairs in their
/// instance-pair block, so every (instance, instance) block carries the same
/// total mass regardless of instance sizes.
pub fn sample_pairs_with<R: Rng + ?Sized>(
    labels: &InstanceLabelMap,
    k: usize,
    background: BackgroundMode,
    rng: &mut R,
) -> Result<PairBatch> {
    if k == 0 {
        return Err(Error::Config("K must be positive".into()));
    }
    let groups = labels.pixels_by_label();
    if groups.iter().skip(1).all(|g| g.is_empty()) {
        return Err(Error::EmptyScene);
    }
    let width = labels.width();
    let mut points = Vec::new();
    let first_label = if background == BackgroundMode::Exclude { 1 } else { 0 };
    for (label, pixels) in groups.iter().enumerate().skip(first_label) {
        for idx in sample_group(pixels, k, rng) {
            points.push(SampledPoint { row: idx / width, col: idx % width, instance: label as u16 });
        }
    }

    let skip = |a: u16, b: u16| background == BackgroundMode::Repel && a == 0 && b == 0;
    let mut block_pairs: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            if !skip(p.instance, q.instance) {
                *block_pairs.entry(block_key(p.instance, q.instance)).or_default() += 1;
            }
        }
    }
    if block_pairs.is_empty() {
        return Err(Error::Config("fewer than two sampled points; no pairs to score".into()));
    }
    let blocks = block_pairs.len() as f64;
    let mut pairs = Vec::new();
    for (i, p) in points.iter().enumerate() {
        for (j, q) in points.iter().enumerate().skip(i + 1) {
            if skip(p.instance, q.instance) {
                continue;
            }
            let n = block_pairs[&block_key(p.instance, q.instance)] as f64;
            pairs.push(Pair { a: i, b: j, weight: 1.0 / (n * blocks), same: p.instance == q.instance });
        }
    }
    Ok(PairBatch { points, pairs })
}

fn block_key(a: u16, b: u16) -> (u16, u16) {
    (a.min(b), a.max(b))
}

// ---------------------------------------------------------------------------
// Embedding loss
// ---------------------------------------------------------------------------

/// Loss of one pair and its derivative with respect to the squared distance.
#[inline]
fn pair_term(dist2: f64, same: bool, eps: f64) -> (f64, f64) {
    let sim = similarity_from_sq_dist(dist2);
    // 1 - sim = (1 - e^-s) / (1 + e^-s), computed without cancellation.
    let e = (-dist2).exp();
    let dissim = -(-dist2).exp_m1() / (1.0 + e);
    let lo = eps;
    let hi = 1.0 - eps;
    if same {
        if sim < lo {
            (-lo.ln(), 0.0)
        } else if sim > hi {
            (-hi.ln(), 0.0)
        } else {
            (-sim.ln(), 1.0 - 0.5 * sim)
        }
    } else if dissim < lo {
        (-lo.ln(), 0.0)
    } else if dissim > hi {
        (-hi.ln(), 0.0)
    } else {
        (-dissim.ln(), -sim * (1.0 - 0.5 * sim) / dissim)
    }
}

/// Accumulates the embedding loss over `batch` on a raw `[h*w*d]` buffer and
/// adds its gradient into `grad`. Returns the loss.
pub(crate) fn embedding_loss_raw(
    values: &[f64],
    width: usize,
    dim: usize,
    batch: &PairBatch,
    eps: f64,
    grad: &mut [f64],
) -> f64 {
    let offset = |p: &SampledPoint| (p.row * width + p.col) * dim;
    let mut loss = 0.0;
    let mut diff = vec![0.0f64; dim];
    for pair in &batch.pairs {
        let pa = offset(&batch.points[pair.a]);
        let pb = offset(&batch.points[pair.b]);
        let mut dist2 = 0.0;
        for (k, d) in diff.iter_mut().enumerate() {
            *d = values[pa + k] - values[pb + k];
            dist2 += *d * *d;
        }
        let (l, dl_ds) = pair_term(dist2, pair.same, eps);
        loss += pair.weight * l;
        if dl_ds != 0.0 {
            let scale = 2.0 * pair.weight * dl_ds;
            for (k, d) in diff.iter().enumerate() {
                grad[pa + k] += scale * d;
                grad[pb + k] -= scale * d;
            }
        }
    }
    loss
}

fn check_points_in_bounds(points: &[SampledPoint], height: usize, width: usize) -> Result<()> {
    for p in points {
        if p.row >= height || p.col >= width {
            return Err(Error::OutOfBounds { row: p.row, col: p.col, height, width });
        }
    }
    Ok(())
}

/// Weighted pairwise cross-entropy on clamped similarities. The gradient has
/// the field's shape and is zero at pixels that were not sampled.
pub fn embedding_loss(
    field: &EmbeddingField,
    batch: &PairBatch,
    eps: f64,
) -> Result<(f64, EmbeddingField)> {
    field.ensure_valid()?;
    check_points_in_bounds(&batch.points, field.height(), field.width())?;
    let values: Vec<f64> = field.values().iter().map(|&v| v as f64).collect();
    let mut grad = vec![0.0f64; values.len()];
    let loss = embedding_loss_raw(&values, field.width(), field.dim(), batch, eps, &mut grad);
    let grad = EmbeddingField::new(
        field.height(),
        field.width(),
        field.dim(),
        grad.into_iter().map(|g| g as f32).collect(),
    )?;
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Classification targets and loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTargetBatch {
    thresholds: Vec<f64>,
    points: Vec<(usize, usize)>,
    /// `labels[tau][point]`, 0 = background.
    labels: Vec<Vec<u16>>,
    /// IoU of the grown mask against its best ground-truth match.
    ious: Vec<Vec<f64>>,
}

impl ClassTargetBatch {
    pub fn new(
        thresholds: Vec<f64>,
        points: Vec<(usize, usize)>,
        labels: Vec<Vec<u16>>,
        ious: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let ok = labels.len() == thresholds.len()
            && ious.len() == thresholds.len()
            && labels.iter().all(|l| l.len() == points.len())
            && ious.iter().all(|l| l.len() == points.len());
        if !ok {
            return Err(Error::Shape("target batch dimensions disagree".into()));
        }
        Ok(Self { thresholds, points, labels, ious })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn labels(&self, tau_index: usize) -> &[u16] {
        &self.labels[tau_index]
    }

    pub fn ious(&self, tau_index: usize) -> &[f64] {
        &self.ious[tau_index]
    }
}

/// Best-matching ground-truth instance for a mask given as a bit plane:
/// returns `(instance, iou)`, lowest id on ties, `(0, 0.0)` when nothing overlaps.
pub(crate) fn best_match(mask: &[bool], labels: &[u16], sizes: &[usize]) -> (u16, f64) {
    let mut inter = vec![0usize; sizes.len()];
    let mut area = 0usize;
    for (&m, &l) in mask.iter().zip(labels) {
        if m {
            area += 1;
            inter[l as usize] += 1;
        }
    }
    let mut best = (0u16, 0.0f64);
    for inst in 1..sizes.len() {
        if sizes[inst] == 0 {
            continue;
        }
        let union = area + sizes[inst] - inter[inst];
        let iou = inter[inst] as f64 / union as f64;
        if iou > best.1 || best.0 == 0 {
            best = (inst as u16, iou);
        }
    }
    best
}

/// Target label for a grown mask: the best match's class when its IoU reaches
/// `iou_good_threshold`, background otherwise.
pub(crate) fn assign_label(
    mask: &[bool],
    labels: &InstanceLabelMap,
    sizes: &[usize],
    iou_good_threshold: f64,
) -> (u16, f64) {
    let (inst, iou) = best_match(mask, labels.labels(), sizes);
    if inst != 0 && iou >= iou_good_threshold {
        (labels.class_of(inst).unwrap_or(0), iou)
    } else {
        (0, iou)
    }
}

pub fn build_class_targets<R: Rng + ?Sized>(
    field: &EmbeddingField,
    labels: &InstanceLabelMap,
    thresholds: &[f64],
    k: usize,
    iou_good_threshold: f64,
    rng: &mut R,
) -> Result<ClassTargetBatch> {
    crate::scene::ensure_scene(field, labels, None)?;
    check_thresholds(thresholds)?;
    let groups = labels.pixels_by_label();
    if groups.iter().skip(1).all(|g| g.is_empty()) {
        return Err(Error::EmptyScene);
    }
    let width = labels.width();
    let sizes = labels.label_sizes();
    let norms = pixel_sq_norms(field);
    let mut dist = vec![0.0f32; field.num_pixels()];
    let mut mask = vec![false; field.num_pixels()];

    let mut points = Vec::new();
    for pixels in groups.iter().skip(1) {
        points.extend(sample_group(pixels, k, rng).into_iter().map(|i| (i / width, i % width)));
    }
    let mut out_labels = vec![Vec::with_capacity(points.len()); thresholds.len()];
    let mut out_ious = vec![Vec::with_capacity(points.len()); thresholds.len()];
    for &(row, col) in &points {
        sq_dist_plane(field, &norms, field.at(row, col), &mut dist);
        for (ti, &tau) in thresholds.iter().enumerate() {
            threshold_plane(&dist, tau, &mut mask);
            let (label, iou) = assign_label(&mask, labels, &sizes, iou_good_threshold);
            out_labels[ti].push(label);
            out_ious[ti].push(iou);
        }
    }
    ClassTargetBatch::new(thresholds.to_vec(), points, out_labels, out_ious)
}

pub(crate) fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Config("threshold set is empty".into()));
    }
    for (i, &t) in thresholds.iter().enumerate() {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("threshold {t} is outside (0, 1)")));
        }
        if i > 0 && thresholds[i - 1] >= t {
            return Err(Error::Config("thresholds must be strictly ascending".into()));
        }
    }
    Ok(())
}

fn same_thresholds(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9)
}

/// Cross-entropy on f64 probabilities laid out as `probs[tau][pixel * channels + c]`.
/// Adds the gradient into `grad` (same layout) and returns the loss.
pub(crate) fn classification_loss_raw(
    probs: &[Vec<f64>],
    width: usize,
    channels: usize,
    targets: &ClassTargetBatch,
    eps: f64,
    grad: &mut [Vec<f64>],
) -> f64 {
    let n_points = targets.points.len();
    if n_points == 0 {
        return 0.0;
    }
    let scale = 1.0 / (n_points as f64 * probs.len() as f64);
    let mut loss = 0.0;
    for (ti, tau_probs) in probs.iter().enumerate() {
        for (pi, &(row, col)) in targets.points.iter().enumerate() {
            let at = (row * width + col) * channels + targets.labels[ti][pi] as usize;
            let p = tau_probs[at];
            if p < eps {
                loss -= scale * eps.ln();
            } else if p > 1.0 - eps {
                loss -= scale * (1.0 - eps).ln();
            } else {
                loss -= scale * p.ln();
                grad[ti][at] -= scale / p;
            }
        }
    }
    loss
}

/// Per-threshold cross-entropy at the sampled points, averaged over thresholds.
pub fn classification_loss(
    scores: &ClassScoreStack,
    targets: &ClassTargetBatch,
    eps: f64,
) -> Result<(f64, Vec<Vec<f32>>)> {
    if !same_thresholds(scores.thresholds(), targets.thresholds()) {
        return Err(Error::Config(format!(
            "score thresholds {:?} differ from target thresholds {:?}",
            scores.thresholds(),
            targets.thresholds()
        )));
    }
    scores.ensure_valid()?;
    for &(row, col) in &targets.points {
        if row >= scores.height() || col >= scores.width() {
            return Err(Error::OutOfBounds {
                row,
                col,
                height: scores.height(),
                width: scores.width(),
            });
        }
    }
    if let Some(&bad) = targets.labels.iter().flatten().find(|&&l| l as usize > scores.num_classes()) {
        return Err(Error::Config(format!(
            "target class {bad} exceeds the {} classes in the score stack",
            scores.num_classes()
        )));
    }
    let probs: Vec<Vec<f64>> = (0..scores.thresholds().len())
        .map(|t| scores.scores(t).iter().map(|&v| v as f64).collect())
        .collect();
    let mut grad: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.len()]).collect();
    let loss =
        classification_loss_raw(&probs, scores.width(), scores.channels(), targets, eps, &mut grad);
    let grad = grad
        .into_iter()
        .map(|g| g.into_iter().map(|v| v as f32).collect())
        .collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub total: f64,
    pub embedding: f64,
    pub classification: f64,
    pub lambda: f64,
    pub embedding_grad: EmbeddingField,
    /// Gradients of the total with respect to each threshold's probabilities,
    /// already scaled by λ.
    pub score_grads: Vec<Vec<f32>>,
}

/// `L_e + λ(step) L_cls` with λ ramping linearly to `config.lambda_max`.
pub fn combined_loss(
    field: &EmbeddingField,
    pairs: &PairBatch,
    scores: &ClassScoreStack,
    targets: &ClassTargetBatch,
    step: usize,
    config: &LossConfig,
) -> Result<CombinedLoss> {
    config.validate()?;
    let (embedding, embedding_grad) = embedding_loss(field, pairs, config.eps)?;
    let (classification, cls_grad) = classification_loss(scores, targets, config.eps)?;
    let lambda = config.lambda_at(step);
    let score_grads = cls_grad
        .into_iter()
        .map(|g| g.into_iter().map(|v| (lambda * v as f64) as f32).collect())
        .collect();
    Ok(CombinedLoss {
        total: embedding + lambda * classification,
        embedding,
        classification,
        lambda,
        embedding_grad,
        score_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels_from(h: usize, w: usize, raw: &[u16]) -> InstanceLabelMap {
        let n = raw.iter().copied().max().unwrap_or(0);
        let classes = (1..=n).map(|i| (i, 1 + (i - 1) % 3)).collect();
        InstanceLabelMap::new(h, w, raw.to_vec(), classes).unwrap()
    }

    #[test]
    fn tiny_instance_gets_uniform_weights() {
        let labels = labels_from(2, 3, &[0, 1, 1, 0, 1, 0]);
        let batch = sample_pairs(&labels, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(batch.points().len(), 3);
        assert_eq!(batch.pairs().len(), 3);
        for p in batch.pairs() {
            assert!((p.weight - 1.0 / 3.0).abs() < 1e-12);
            assert!(p.same);
        }
    }

    #[test]
    fn two_instances_k2() {
        let labels = labels_from(2, 4, &[1, 1, 1, 0, 2, 2, 2, 2]);
        let batch = sample_pairs(&labels, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(batch.points().len(), 4);
        assert_eq!(batch.pairs().len(), 6);
        for p in batch.pairs() {
            let (a, b) = (batch.points()[p.a], batch.points()[p.b]);
            assert_eq!(p.same, a.instance == b.instance);
        }
        let total: f64 = batch.pairs().iter().map(|p| p.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic() {
        let labels = labels_from(3, 3, &[1, 1, 2, 1, 2, 2, 0, 3, 3]);
        let a = sample_pairs(&labels, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_pairs(&labels, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_scene_is_rejected() {
        let labels = labels_from(2, 2, &[0, 0, 0, 0]);
        assert!(matches!(
            sample_pairs(&labels, 3, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::EmptyScene)
        ));
    }

    #[test]
    fn small_and_large_instances_get_equal_mass() {
        // 100-pixel instance and a 4-pixel instance.
        let mut raw = vec![1u16; 100];
        raw.extend([2u16; 4]);
        raw.extend([0u16; 6]);
        let labels = labels_from(10, 11, &raw);
        let batch = sample_pairs(&labels, 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mass = |inst: u16| -> f64 {
            batch
                .pairs()
                .iter()
                .filter(|p| {
                    batch.points()[p.a].instance == inst && batch.points()[p.b].instance == inst
                })
                .map(|p| p.weight)
                .sum()
        };
        assert!((mass(1) - mass(2)).abs() < 1e-6);
    }

    #[test]
    fn background_modes() {
        let labels = labels_from(2, 4, &[0, 0, 0, 0, 1, 1, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let repel = sample_pairs_with(&labels, 4, BackgroundMode::Repel, &mut rng).unwrap();
        assert!(repel
            .pairs()
            .iter()
            .all(|p| repel.points()[p.a].instance != 0 || repel.points()[p.b].instance != 0));
        assert!(repel.points().iter().any(|p| p.instance == 0));
        let group = sample_pairs_with(&labels, 4, BackgroundMode::Group, &mut rng).unwrap();
        assert!(group
            .pairs()
            .iter()
            .any(|p| group.points()[p.a].instance == 0 && group.points()[p.b].instance == 0));
        for b in [&repel, &group] {
            let total: f64 = b.pairs().iter().map(|p| p.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    fn single_pair(same: bool) -> PairBatch {
        PairBatch::from_parts(
            vec![
                SampledPoint { row: 0, col: 0, instance: 1 },
                SampledPoint { row: 0, col: 1, instance: if same { 1 } else { 2 } },
            ],
            vec![Pair { a: 0, b: 1, weight: 1.0, same }],
        )
        .unwrap()
    }

    #[test]
    fn identical_same_instance_is_near_zero() {
        let field = EmbeddingField::new(1, 3, 2, vec![0.5, 0.5, 0.5, 0.5, 9.0, 9.0]).unwrap();
        let (loss, grad) = embedding_loss(&field, &single_pair(true), 1e-6).unwrap();
        assert!((loss - -(1.0f64 - 1e-6).ln()).abs() < 1e-15);
        assert!(grad.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ln3_same_pair_loss_is_ln2() {
        let x = (3.0f64.ln()).sqrt();
        let field = EmbeddingField::new(1, 2, 1, vec![0.0, x as f32]).unwrap();
        let (loss, _) = embedding_loss(&field, &single_pair(true), 1e-6).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-7, "{loss}");
    }

    #[test]
    fn identical_cross_pair_is_clamped() {
        let field = EmbeddingField::new(1, 2, 2, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let (loss, grad) = embedding_loss(&field, &single_pair(false), 1e-6).unwrap();
        assert!((loss - -(1e-6f64).ln()).abs() < 1e-9);
        let diff: Vec<f32> = field.at(0, 0).iter().zip(field.at(0, 1)).map(|(a, b)| a - b).collect();
        let dot: f32 = grad.at(0, 0).iter().zip(&diff).map(|(g, d)| g * d).sum();
        assert!(dot >= 0.0);
    }

    #[test]
    fn cross_pair_descent_separates() {
        let field = EmbeddingField::new(1, 2, 2, vec![0.0, 0.0, 0.3, -0.1]).unwrap();
        let (_, grad) = embedding_loss(&field, &single_pair(false), 1e-6).unwrap();
        // Descent direction at p is -grad; it must point away from q.
        let diff = [0.0f32 - 0.3, 0.0 + 0.1];
        let along: f32 = grad.at(0, 0).iter().zip(&diff).map(|(g, d)| -g * d).sum();
        assert!(along > 0.0);
    }

    #[test]
    fn non_finite_field_is_rejected() {
        let field = EmbeddingField::new(1, 2, 1, vec![f32::INFINITY, 0.0]).unwrap();
        assert!(matches!(
            embedding_loss(&field, &single_pair(true), 1e-6),
            Err(Error::Validation(_))
        ));
    }

    fn one_hot_scene() -> (EmbeddingField, InstanceLabelMap) {
        // 4x4: instance 1 top-left 2x2, instance 2 bottom row, rest background.
        let raw = [1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 2, 2, 2, 2];
        let labels = InstanceLabelMap::new(4, 4, raw.to_vec(), BTreeMap::from([(1, 2), (2, 3)]))
            .unwrap();
        let mut values = Vec::new();
        for &l in &raw {
            let mut v = [0.0f32; 3];
            v[l as usize] = 1.0;
            values.extend(v);
        }
        (EmbeddingField::new(4, 4, 3, values).unwrap(), labels)
    }

    #[test]
    fn perfect_embedding_targets_true_class() {
        let (field, labels) = one_hot_scene();
        let t = build_class_targets(
            &field,
            &labels,
            &[0.25, 0.5, 0.75, 0.9],
            10,
            0.5,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(t.points().len(), 8);
        for ti in 0..4 {
            for (pi, &(r, c)) in t.points().iter().enumerate() {
                let want = labels.class_of(labels.get(r, c)).unwrap();
                assert_eq!(t.labels(ti)[pi], want);
                assert_eq!(t.ious(ti)[pi], 1.0);
            }
        }
    }

    #[test]
    fn constant_field_targets_background() {
        let (_, labels) = one_hot_scene();
        let field = EmbeddingField::zeros(4, 4, 3).unwrap();
        let t = build_class_targets(&field, &labels, &[0.5], 10, 0.5, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        // Whole-image mask: IoU 4/16 with either instance.
        for (pi, _) in t.points().iter().enumerate() {
            assert_eq!(t.labels(0)[pi], 0);
            assert!((t.ious(0)[pi] - 0.25).abs() < 1e-12);
        }
        let t = build_class_targets(&field, &labels, &[0.5], 10, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(t.labels(0).iter().all(|&l| l != 0));
    }

    fn stack_from(probs: &[f32], h: usize, w: usize, c: usize, taus: &[f64]) -> ClassScoreStack {
        ClassScoreStack::new(h, w, c, taus.to_vec(), vec![probs.to_vec(); taus.len()]).unwrap()
    }

    #[test]
    fn uniform_scores_give_log_channels() {
        let taus = [0.25, 0.5];
        let scores = stack_from(&[0.2f32; 2 * 2 * 5], 2, 2, 4, &taus);
        let targets = ClassTargetBatch::new(
            taus.to_vec(),
            vec![(0, 0), (1, 1)],
            vec![vec![1, 0], vec![3, 4]],
            vec![vec![1.0; 2]; 2],
        )
        .unwrap();
        let (loss, grad) = classification_loss(&scores, &targets, 1e-6).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-6);
        // Only sampled points carry gradient.
        let nonzero = grad.iter().flatten().filter(|&&g| g != 0.0).count();
        assert_eq!(nonzero, 4);
    }

    #[test]
    fn one_hot_scores_give_near_zero_loss() {
        let taus = [0.5];
        let mut probs = vec![0.0f32; 3 * 3];
        for (px, label) in [(0usize, 1usize), (1, 2), (2, 0)] {
            probs[px * 3 + label] = 1.0;
        }
        let scores = stack_from(&probs, 1, 3, 2, &taus);
        let targets = ClassTargetBatch::new(
            taus.to_vec(),
            vec![(0, 0), (0, 1), (0, 2)],
            vec![vec![1, 2, 0]],
            vec![vec![1.0; 3]],
        )
        .unwrap();
        let (loss, _) = classification_loss(&scores, &targets, 1e-6).unwrap();
        assert!((loss - -(1.0f64 - 1e-6).ln()).abs() < 1e-12);
    }

    #[test]
    fn threshold_mismatch_is_config_error() {
        let scores = stack_from(&[0.5, 0.5], 1, 1, 1, &[0.5]);
        let targets =
            ClassTargetBatch::new(vec![0.75], vec![(0, 0)], vec![vec![1]], vec![vec![1.0]]).unwrap();
        assert!(matches!(classification_loss(&scores, &targets, 1e-6), Err(Error::Config(_))));
    }

    #[test]
    fn lambda_ramp() {
        let cfg = LossConfig { ramp_steps: 100, ..LossConfig::default() };
        assert_eq!(cfg.lambda_at(0), 0.0);
        assert!((cfg.lambda_at(50) - 0.1).abs() < 1e-15);
        assert_eq!(cfg.lambda_at(100), 0.2);
        assert_eq!(cfg.lambda_at(10_000), 0.2);
    }

    #[test]
    fn combined_at_step_zero_is_embedding_loss() {
        let (field, labels) = one_hot_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = sample_pairs(&labels, 3, &mut rng).unwrap();
        let taus = [0.5];
        let targets = build_class_targets(&field, &labels, &taus, 3, 0.5, &mut rng).unwrap();
        let scores = stack_from(&vec![0.25f32; 16 * 4], 4, 4, 3, &taus);
        let cfg = LossConfig::default();
        let out = combined_loss(&field, &pairs, &scores, &targets, 0, &cfg).unwrap();
        let (le, _) = embedding_loss(&field, &pairs, cfg.eps).unwrap();
        assert_eq!(out.total, le);
        assert!(out.score_grads.iter().flatten().all(|&g| g == 0.0));
        let late = combined_loss(&field, &pairs, &scores, &targets, 5000, &cfg).unwrap();
        assert_eq!(late.lambda, 0.2);
        assert!((late.total - (le + 0.2 * late.classification)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { eps: 0.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { k: 1, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda_max: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn weights_normalized_and_loss_nonnegative(seed in any::<u64>(), k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (rng.random_range(2..8), rng.random_range(2..8));
            let n_inst = rng.random_range(1..5u16);
            let raw: Vec<u16> = (0..h * w).map(|i| if i < n_inst as usize { i as u16 + 1 } else { rng.random_range(0..=n_inst) }).collect();
            let labels = labels_from(h, w, &raw);
            let batch = sample_pairs(&labels, k, &mut rng);
            prop_assume!(batch.is_ok());
            let batch = batch.unwrap();
            let total: f64 = batch.pairs().iter().map(|p| p.weight).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            prop_assert!(batch.pairs().iter().all(|p| p.weight > 0.0));
            let d = 3;
            let values = (0..h * w * d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let field = EmbeddingField::new(h, w, d, values).unwrap();
            let (loss, _) = embedding_loss(&field, &batch, 1e-6).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}
