//! Synthetic scenes, training-time augmentations, a per-image embedding fit
//! driven by the pairwise loss, and dense oracle class scores.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{assign_label, embedding_loss_raw, sample_pairs_with, BackgroundMode};
use crate::metric::{pixel_sq_norms, sq_dist_plane};
use crate::proposer::threshold_plane;
use crate::scene::{ClassScoreStack, EmbeddingField, InstanceLabelMap};
use crate::tensor::DenseTensor;

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Rectangle,
    Ellipse,
    /// Two disjoint blobs sharing one instance id.
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub num_classes: u16,
    /// Families instances are drawn from (one split instance is forced when
    /// three or more instances are generated).
    pub families: Vec<ShapeFamily>,
    /// Minimum visible pixels per instance after occlusion.
    pub min_visible: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_instances: 2,
            max_instances: 5,
            num_classes: 4,
            families: vec![ShapeFamily::Rectangle, ShapeFamily::Ellipse, ShapeFamily::Split],
            min_visible: 16,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "raster {}x{} is too small (minimum 4x4)",
                self.height, self.width
            )));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::Config(format!(
                "instance range [{}, {}] is invalid",
                self.min_instances, self.max_instances
            )));
        }
        if self.max_instances > u16::MAX as usize {
            return Err(Error::Config("too many instances for 16-bit labels".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.families.is_empty() {
            return Err(Error::Config("no shape families enabled".into()));
        }
        Ok(())
    }
}

/// Labels plus a flat-colored `[h, w, 3]` u8 reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub labels: InstanceLabelMap,
    pub image: DenseTensor,
}

const GENERATION_ATTEMPTS: usize = 200;

pub fn generate_scene(spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..GENERATION_ATTEMPTS {
        if let Some(scene) = try_generate(spec, &mut rng) {
            return Ok(scene);
        }
    }
    Err(Error::Generation {
        seed: spec.seed,
        reason: format!("no feasible layout after {GENERATION_ATTEMPTS} attempts"),
    })
}

fn try_generate(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<SynthScene> {
    let (h, w) = (spec.height, spec.width);
    let n = rng.random_range(spec.min_instances..=spec.max_instances);
    let force_split = n >= 3;
    let split_at = if force_split { Some(rng.random_range(0..n)) } else { None };
    let mut raster = vec![0u16; h * w];
    let mut families = Vec::with_capacity(n);
    for i in 0..n {
        let family = if split_at == Some(i) {
            ShapeFamily::Split
        } else {
            spec.families[rng.random_range(0..spec.families.len())]
        };
        families.push(family);
        paint_shape(&mut raster, h, w, family, i as u16 + 1, rng);
    }

    let mut sizes = vec![0usize; n + 1];
    for &l in &raster {
        sizes[l as usize] += 1;
    }
    if sizes[0] == 0 || sizes[1..].iter().any(|&s| s < spec.min_visible) {
        return None;
    }
    for (i, family) in families.iter().enumerate() {
        let id = i as u16 + 1;
        let parts = count_components(&raster, h, w, id);
        let ok = match family {
            ShapeFamily::Split => parts >= 2 || !force_split,
            _ => true,
        };
        if !ok {
            return None;
        }
    }
    if force_split && !families.iter().enumerate().any(|(i, f)| {
        *f == ShapeFamily::Split && count_components(&raster, h, w, i as u16 + 1) >= 2
    }) {
        return None;
    }

    let class_of: BTreeMap<u16, u16> =
        (1..=n as u16).map(|id| (id, rng.random_range(1..=spec.num_classes))).collect();
    let labels = InstanceLabelMap::new(h, w, raster, class_of).ok()?;
    let image = render_image(&labels);
    Some(SynthScene { labels, image })
}

fn paint_shape(
    raster: &mut [u16],
    h: usize,
    w: usize,
    family: ShapeFamily,
    id: u16,
    rng: &mut ChaCha8Rng,
) {
    let max_side = |n: usize| (n / 3).max(3);
    let min_side = |n: usize| (n / 8).max(2);
    match family {
        ShapeFamily::Rectangle => {
            let rh = rng.random_range(min_side(h)..=max_side(h));
            let rw = rng.random_range(min_side(w)..=max_side(w));
            let r0 = rng.random_range(0..=h - rh);
            let c0 = rng.random_range(0..=w - rw);
            fill_rect(raster, w, r0, c0, rh, rw, id);
        }
        ShapeFamily::Ellipse => {
            let ry = rng.random_range(min_side(h) as f64 / 2.0..=max_side(h) as f64 / 2.0 + 0.5);
            let rx = rng.random_range(min_side(w) as f64 / 2.0..=max_side(w) as f64 / 2.0 + 0.5);
            let cy = rng.random_range(ry..=(h as f64 - ry).max(ry));
            let cx = rng.random_range(rx..=(w as f64 - rx).max(rx));
            for r in 0..h {
                for c in 0..w {
                    let dy = (r as f64 + 0.5 - cy) / ry;
                    let dx = (c as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        raster[r * w + c] = id;
                    }
                }
            }
        }
        ShapeFamily::Split => {
            // Two rectangles side by side with an occluding gap between them.
            let rh = rng.random_range(min_side(h)..=max_side(h));
            let part = rng.random_range(min_side(w).max(2)..=(max_side(w) / 2 + 1).max(3));
            let gap = rng.random_range(2..=(w / 10).max(3));
            let total = 2 * part + gap;
            if total > w {
                return;
            }
            let r0 = rng.random_range(0..=h - rh);
            let c0 = rng.random_range(0..=w - total);
            fill_rect(raster, w, r0, c0, rh, part, id);
            let r1 = (r0 as i64 + rng.random_range(-2i64..=2)).clamp(0, (h - rh) as i64) as usize;
            fill_rect(raster, w, r1, c0 + part + gap, rh, part, id);
        }
    }
}

fn fill_rect(raster: &mut [u16], w: usize, r0: usize, c0: usize, rh: usize, rw: usize, id: u16) {
    for r in r0..r0 + rh {
        raster[r * w + c0..r * w + c0 + rw].fill(id);
    }
}

/// 4-connected components of the pixels labeled `id`.
pub fn count_components(raster: &[u16], h: usize, w: usize, id: u16) -> usize {
    let mut seen = vec![false; raster.len()];
    let mut stack = Vec::new();
    let mut parts = 0;
    for start in 0..raster.len() {
        if raster[start] != id || seen[start] {
            continue;
        }
        parts += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if raster[q] == id && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
    }
    parts
}

const CLASS_COLORS: [[u8; 3]; 8] = [
    [220, 60, 60],
    [60, 170, 70],
    [60, 90, 220],
    [230, 180, 40],
    [170, 60, 200],
    [40, 190, 200],
    [240, 120, 30],
    [120, 120, 40],
];

fn render_image(labels: &InstanceLabelMap) -> DenseTensor {
    let mut data = Vec::with_capacity(labels.num_pixels() * 3);
    for &l in labels.labels() {
        if l == 0 {
            data.extend([128, 128, 128]);
        } else {
            let class = labels.class_of(l).unwrap_or(1) as usize;
            let base = CLASS_COLORS[(class - 1) % CLASS_COLORS.len()];
            // Shade per instance so same-class instances stay distinguishable.
            let shade = (l as i32 * 23 % 60) - 30;
            data.extend(base.map(|v| (v as i32 + shade).clamp(0, 255) as u8));
        }
    }
    DenseTensor::from_u8(vec![labels.height(), labels.width(), 3], data).expect("image shape")
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

pub const ROTATION_RANGE_DEG: f64 = 10.0;
pub const RESIZE_RANGE: (f64, f64) = (0.7, 1.5);
pub const CROP_CANDIDATES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    Rotate,
    Resize,
    Crop { height: usize, width: usize },
    Flip,
}

/// Applies one randomized augmentation.
pub fn augment<R: Rng + ?Sized>(scene: &SynthScene, op: AugmentOp, rng: &mut R) -> Result<SynthScene> {
    scene.labels.ensure_valid()?;
    match op {
        AugmentOp::Rotate => {
            let deg = rng.random_range(-ROTATION_RANGE_DEG..=ROTATION_RANGE_DEG);
            rotate_scene(scene, deg)
        }
        AugmentOp::Resize => {
            let scale = rng.random_range(RESIZE_RANGE.0..=RESIZE_RANGE.1);
            resize_scene(scene, scale)
        }
        AugmentOp::Crop { height, width } => {
            if height == 0 || width == 0 {
                return Err(Error::Config(format!("crop window {height}x{width} is empty")));
            }
            let ch = height.min(scene.labels.height());
            let cw = width.min(scene.labels.width());
            let windows: Vec<(usize, usize)> = (0..CROP_CANDIDATES)
                .map(|_| {
                    (
                        rng.random_range(0..=scene.labels.height() - ch),
                        rng.random_range(0..=scene.labels.width() - cw),
                    )
                })
                .collect();
            let weights: Vec<f64> = windows
                .iter()
                .map(|&(r, c)| instances_in_window(&scene.labels, r, c, ch, cw) as f64)
                .collect();
            let (r, c) = windows[choose_weighted(&weights, rng)];
            crop_scene(scene, r, c, ch, cw)
        }
        AugmentOp::Flip => {
            if rng.random_bool(0.5) {
                flip_scene(scene)
            } else {
                Ok(scene.clone())
            }
        }
    }
}

/// Index drawn with probability proportional to `weights`; uniform when all are zero.
pub fn choose_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let mut x = rng.random_range(0.0..total);
    for (i, &wt) in weights.iter().enumerate() {
        if x < wt {
            return i;
        }
        x -= wt;
    }
    weights.iter().rposition(|&wt| wt > 0.0).unwrap_or(0)
}

pub fn instances_in_window(labels: &InstanceLabelMap, r0: usize, c0: usize, h: usize, w: usize) -> usize {
    let mut present = vec![false; labels.num_instances() + 1];
    for r in r0..r0 + h {
        for c in c0..c0 + w {
            present[labels.get(r, c) as usize] = true;
        }
    }
    present[1..].iter().filter(|&&p| p).count()
}

/// Rebuilds a scene from resampled labels: instances that vanished are
/// dropped and the rest renumbered 1..N in their original order.
fn rebuild(
    old: &InstanceLabelMap,
    h: usize,
    w: usize,
    mut raw: Vec<u16>,
    image: Vec<u8>,
) -> Result<SynthScene> {
    let mut present = vec![false; old.num_instances() + 1];
    for &l in &raw {
        present[l as usize] = true;
    }
    let mut remap = vec![0u16; present.len()];
    let mut class_of = BTreeMap::new();
    let mut next = 1u16;
    for id in 1..present.len() {
        if present[id] {
            remap[id] = next;
            class_of.insert(next, old.class_of(id as u16).unwrap_or(0));
            next += 1;
        }
    }
    for l in &mut raw {
        *l = remap[*l as usize];
    }
    Ok(SynthScene {
        labels: InstanceLabelMap::new(h, w, raw, class_of)?,
        image: DenseTensor::from_u8(vec![h, w, 3], image)?,
    })
}

/// Nearest-neighbor resampling: `src(dst_row, dst_col)` gives the source
/// pixel or `None` for background fill.
fn resample(
    scene: &SynthScene,
    h: usize,
    w: usize,
    src: impl Fn(usize, usize) -> Option<(usize, usize)>,
) -> Result<SynthScene> {
    let labels = &scene.labels;
    let pixels = scene.image.as_u8().ok_or_else(|| Error::Format("image must be uint8".into()))?;
    let mut raw = vec![0u16; h * w];
    let mut image = vec![0u8; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            if let Some((sr, sc)) = src(r, c) {
                let s = sr * labels.width() + sc;
                raw[r * w + c] = labels.labels()[s];
                image[(r * w + c) * 3..(r * w + c + 1) * 3].copy_from_slice(&pixels[s * 3..s * 3 + 3]);
            }
        }
    }
    rebuild(labels, h, w, raw, image)
}

/// Rotation about the raster center; uncovered pixels become background.
pub fn rotate_scene(scene: &SynthScene, degrees: f64) -> Result<SynthScene> {
    let (h, w) = (scene.labels.height(), scene.labels.width());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    resample(scene, h, w, |r, c| {
        let y = r as f64 + 0.5 - cy;
        let x = c as f64 + 0.5 - cx;
        // Inverse rotation maps the destination back into the source.
        let sy = cos * y - sin * x + cy;
        let sx = sin * y + cos * x + cx;
        let (sr, sc) = (sy.floor(), sx.floor());
        (sr >= 0.0 && sc >= 0.0 && (sr as usize) < h && (sc as usize) < w)
            .then_some((sr as usize, sc as usize))
    })
}

pub fn resize_scene(scene: &SynthScene, scale: f64) -> Result<SynthScene> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("resize scale {scale} must be positive")));
    }
    let (h, w) = (scene.labels.height(), scene.labels.width());
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let (fy, fx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    resample(scene, nh, nw, |r, c| {
        let sr = (((r as f64 + 0.5) * fy).floor() as usize).min(h - 1);
        let sc = (((c as f64 + 0.5) * fx).floor() as usize).min(w - 1);
        Some((sr, sc))
    })
}

pub fn crop_scene(scene: &SynthScene, r0: usize, c0: usize, h: usize, w: usize) -> Result<SynthScene> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("crop window {h}x{w} is empty")));
    }
    if r0 + h > scene.labels.height() || c0 + w > scene.labels.width() {
        return Err(Error::Config(format!(
            "crop window {h}x{w} at ({r0}, {c0}) exceeds the {}x{} raster",
            scene.labels.height(),
            scene.labels.width()
        )));
    }
    resample(scene, h, w, |r, c| Some((r0 + r, c0 + c)))
}

pub fn flip_scene(scene: &SynthScene) -> Result<SynthScene> {
    let (h, w) = (scene.labels.height(), scene.labels.width());
    resample(scene, h, w, |r, c| Some((r, w - 1 - c)))
}

// ---------------------------------------------------------------------------
// Embedding fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitConfig {
    pub dim: usize,
    /// Gradient step, applied per pair block (the step is multiplied by the
    /// number of blocks in each sampled batch).
    pub step_size: f64,
    pub iterations: usize,
    /// Points per instance (and per background group) in each batch.
    pub k: usize,
    pub eps: f64,
    pub seed: u64,
    /// Initial embeddings are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    #[serde(skip)]
    pub background: BackgroundMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            step_size: 2.0,
            iterations: 500,
            k: 10,
            eps: 1e-6,
            seed: 0,
            init_scale: 1.0,
            background: BackgroundMode::Repel,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("embedding dim must be >= 2, got {}", self.dim)));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step size must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!("eps must be in (0, 0.5), got {}", self.eps)));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub field: EmbeddingField,
    /// Loss of each iteration's batch, evaluated before its update.
    pub losses: Vec<f64>,
}

impl FitResult {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Gradient descent on the pairwise embedding loss directly over the pixels
/// of one image, with a fresh batch of pairs every iteration.
pub fn fit_embedding(labels: &InstanceLabelMap, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    labels.ensure_valid()?;
    if labels.num_instances() == 0 {
        return Err(Error::EmptyScene);
    }
    let (h, w, d) = (labels.height(), labels.width(), config.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init: Vec<f32> = if config.init_scale > 0.0 {
        (0..h * w * d)
            .map(|_| rng.random_range(-config.init_scale..=config.init_scale) as f32)
            .collect()
    } else {
        vec![0.0; h * w * d]
    };
    let mut losses = Vec::with_capacity(config.iterations);
    if config.iterations == 0 {
        return Ok(FitResult { field: EmbeddingField::new(h, w, d, init)?, losses });
    }

    let mut values: Vec<f64> = init.iter().map(|&v| v as f64).collect();
    let mut grad = vec![0.0f64; values.len()];
    for step in 0..config.iterations {
        let batch = sample_pairs_with(labels, config.k, config.background, &mut rng)?;
        let loss = embedding_loss_raw(&values, w, d, &batch, config.eps, &mut grad);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        let blocks = batch_blocks(&batch) as f64;
        let lr = config.step_size * blocks;
        for p in batch.points() {
            let at = (p.row * w + p.col) * d;
            for k in at..at + d {
                values[k] -= lr * grad[k];
                grad[k] = 0.0;
            }
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged { step, loss: values[bad] });
        }
    }
    let field = EmbeddingField::new(h, w, d, values.into_iter().map(|v| v as f32).collect())?;
    Ok(FitResult { field, losses })
}

fn batch_blocks(batch: &crate::loss::PairBatch) -> usize {
    let mut blocks: Vec<(u16, u16)> = batch
        .pairs()
        .iter()
        .map(|p| {
            let (a, b) = (batch.points()[p.a].instance, batch.points()[p.b].instance);
            (a.min(b), a.max(b))
        })
        .collect();
    blocks.sort_unstable();
    blocks.dedup();
    blocks.len()
}

// ---------------------------------------------------------------------------
// Oracle scores
// ---------------------------------------------------------------------------

/// Dense stand-in for a trained classification head: every pixel grows a mask
/// at each threshold, gets the target label of that mask, and scores
/// `1 - eps` on that label and `eps / C` on every other channel.
pub fn oracle_scores(
    field: &EmbeddingField,
    labels: &InstanceLabelMap,
    thresholds: &[f64],
    num_classes: usize,
    iou_good_threshold: f64,
    eps: f64,
) -> Result<ClassScoreStack> {
    crate::scene::ensure_scene(field, labels, None)?;
    crate::loss::check_thresholds(thresholds)?;
    if num_classes == 0 || num_classes < labels.num_classes() {
        return Err(Error::Config(format!(
            "num_classes {num_classes} does not cover the label map's {} classes",
            labels.num_classes()
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("eps must be in (0, 1), got {eps}")));
    }
    let channels = num_classes + 1;
    let n = field.num_pixels();
    let sizes = labels.label_sizes();
    let norms = pixel_sq_norms(field);
    let on = (1.0 - eps) as f32;
    let off = (eps / num_classes as f64) as f32;
    let mut scores = vec![vec![off; n * channels]; thresholds.len()];
    let mut dist = vec![0.0f32; n];
    let mut mask = vec![false; n];
    // Pixels with bit-identical embeddings grow identical masks.
    let mut cache: std::collections::HashMap<Vec<u32>, Vec<u16>> = std::collections::HashMap::new();
    for px in 0..n {
        let e = field.pixel(px);
        let key: Vec<u32> = e.iter().map(|v| v.to_bits()).collect();
        let assigned = match cache.get(&key) {
            Some(a) => a.clone(),
            None => {
                sq_dist_plane(field, &norms, e, &mut dist);
                let a: Vec<u16> = thresholds
                    .iter()
                    .map(|&tau| {
                        threshold_plane(&dist, tau, &mut mask);
                        assign_label(&mask, labels, &sizes, iou_good_threshold).0
                    })
                    .collect();
                cache.insert(key, a.clone());
                a
            }
        };
        for (ti, &label) in assigned.iter().enumerate() {
            scores[ti][px * channels + label as usize] = on;
        }
    }
    ClassScoreStack::new(field.height(), field.width(), num_classes, thresholds.to_vec(), scores)
}
