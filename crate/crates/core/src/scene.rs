//! Typed views over dense tensors: embedding fields, instance labels and
//! per-threshold class score stacks, plus scene validation and the on-disk
//! scene directory layout.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, DenseTensor};

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

/// Per-pixel `d`-dimensional embedding vectors stored as `[h, w, d]` f32.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingField {
    /// Builds a field; only checks the buffer length. Use [`EmbeddingField::violations`]
    /// for value checks.
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "embedding field {height}x{width}x{dim} has an empty dimension"
            )));
        }
        if values.len() != height * width * dim {
            return Err(Error::Shape(format!(
                "embedding field {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                values.len()
            )));
        }
        Ok(Self { height, width, dim, values })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Result<Self> {
        Self::new(height, width, dim, vec![0.0; height * width * dim])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        self.pixel(row * self.width + col)
    }

    /// Embedding of the pixel with flat row-major index `idx`.
    pub fn pixel(&self, idx: usize) -> &[f32] {
        &self.values[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn check_bounds(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.height || col >= self.width {
            return Err(Error::OutOfBounds {
                row,
                col,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            let px = i / self.dim;
            out.push(Violation::NonFiniteEmbedding {
                row: px / self.width,
                col: px % self.width,
                channel: i % self.dim,
            });
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        first_violation(self.violations())
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_f32(vec![self.height, self.width, self.dim], self.values.clone())
            .expect("field shape is valid")
    }

    pub fn from_tensor(t: DenseTensor) -> Result<Self> {
        let shape = t.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("embedding tensor must be [h,w,d], got {shape:?}")));
        }
        let values = t
            .as_f32()
            .ok_or_else(|| Error::Format(format!("embedding dtype is {}", t.dtype().name())))?
            .to_vec();
        Self::new(shape[0], shape[1], shape[2], values)
    }
}

/// Ground-truth instance ids per pixel (0 = background) and their classes.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
    class_of: BTreeMap<u16, u16>,
}

impl InstanceLabelMap {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u16>,
        class_of: BTreeMap<u16, u16>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels, class_of })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn class_map(&self) -> &BTreeMap<u16, u16> {
        &self.class_of
    }

    pub fn class_of(&self, instance: u16) -> Option<u16> {
        self.class_of.get(&instance).copied()
    }

    /// Largest instance id present in the raster.
    pub fn num_instances(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Number of classes referenced by the class map (largest class id).
    pub fn num_classes(&self) -> usize {
        self.class_of.values().copied().max().unwrap_or(0) as usize
    }

    /// Pixel count per label; index 0 is the background.
    pub fn label_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_instances() + 1];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Flat pixel indices grouped by label; index 0 is the background.
    pub fn pixels_by_label(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_instances() + 1];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l as usize].push(i);
        }
        groups
    }

    pub fn instance_mask(&self, instance: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == instance).collect()
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let sizes = self.label_sizes();
        for (id, &n) in sizes.iter().enumerate().skip(1) {
            if n == 0 {
                out.push(Violation::NonContiguousIds { missing: id as u16 });
            } else if !self.class_of.contains_key(&(id as u16)) {
                out.push(Violation::MissingClass { instance: id as u16 });
            }
        }
        for (&id, &class) in &self.class_of {
            if class == 0 {
                out.push(Violation::BackgroundClass { instance: id });
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        first_violation(self.violations())
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_u16(vec![self.height, self.width], self.labels.clone())
            .expect("label shape is valid")
    }

    pub fn from_tensor(t: DenseTensor, class_of: BTreeMap<u16, u16>) -> Result<Self> {
        let shape = t.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("label tensor must be [h,w], got {shape:?}")));
        }
        let labels = t
            .as_u16()
            .ok_or_else(|| Error::Format(format!("label dtype is {}", t.dtype().name())))?
            .to_vec();
        Self::new(shape[0], shape[1], labels, class_of)
    }
}

/// Per-threshold class probabilities `[h, w, C+1]`, channel 0 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScoreStack {
    height: usize,
    width: usize,
    num_classes: usize,
    thresholds: Vec<f64>,
    scores: Vec<Vec<f32>>,
}

impl ClassScoreStack {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        thresholds: Vec<f64>,
        scores: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("score stack has an empty raster".into()));
        }
        if thresholds.len() != scores.len() {
            return Err(Error::Shape(format!(
                "{} thresholds but {} score tensors",
                thresholds.len(),
                scores.len()
            )));
        }
        let per = height * width * (num_classes + 1);
        if let Some(s) = scores.iter().find(|s| s.len() != per) {
            return Err(Error::Shape(format!(
                "score tensor needs {per} values, got {}",
                s.len()
            )));
        }
        Ok(Self { height, width, num_classes, thresholds, scores })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.num_classes + 1
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn scores(&self, tau_index: usize) -> &[f32] {
        &self.scores[tau_index]
    }

    pub fn scores_mut(&mut self, tau_index: usize) -> &mut [f32] {
        &mut self.scores[tau_index]
    }

    /// Channel probabilities of pixel `idx` (flat row-major) at threshold `tau_index`.
    pub fn pixel(&self, tau_index: usize, idx: usize) -> &[f32] {
        let c = self.channels();
        &self.scores[tau_index][idx * c..(idx + 1) * c]
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, &t) in self.thresholds.iter().enumerate() {
            let sorted = i == 0 || self.thresholds[i - 1] < t;
            if !(t > 0.0 && t < 1.0) || !sorted {
                out.push(Violation::BadThreshold { tau: t });
            }
        }
        let c = self.channels();
        for (ti, tensor) in self.scores.iter().enumerate() {
            for (px, probs) in tensor.chunks_exact(c).enumerate() {
                let (row, col) = (px / self.width, px % self.width);
                if let Some(ch) = probs.iter().position(|&p| !(0.0..=1.0).contains(&p)) {
                    out.push(Violation::ScoreRange {
                        tau: self.thresholds[ti],
                        row,
                        col,
                        channel: ch,
                        value: probs[ch],
                    });
                    continue;
                }
                let sum: f64 = probs.iter().map(|&p| p as f64).sum();
                if (sum - 1.0).abs() > 1e-5 {
                    out.push(Violation::ScoreSum { tau: self.thresholds[ti], row, col, sum });
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        first_violation(self.violations())
    }

    pub fn tensor_at(&self, tau_index: usize) -> DenseTensor {
        DenseTensor::from_f32(
            vec![self.height, self.width, self.channels()],
            self.scores[tau_index].clone(),
        )
        .expect("score shape is valid")
    }
}

/// A single failed check reported by [`validate_scene`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    NonFiniteEmbedding { row: usize, col: usize, channel: usize },
    NonContiguousIds { missing: u16 },
    MissingClass { instance: u16 },
    BackgroundClass { instance: u16 },
    BadThreshold { tau: f64 },
    ScoreRange { tau: f64, row: usize, col: usize, channel: usize, value: f32 },
    ScoreSum { tau: f64, row: usize, col: usize, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ShapeMismatch { what, expected, actual } => write!(
                f,
                "{what} is {}x{}, expected {}x{}",
                actual.0, actual.1, expected.0, expected.1
            ),
            Violation::NonFiniteEmbedding { row, col, channel } => {
                write!(f, "non-finite embedding at ({row}, {col}) channel {channel}")
            }
            Violation::NonContiguousIds { missing } => {
                write!(f, "instance ids are not contiguous: {missing} is absent")
            }
            Violation::MissingClass { instance } => {
                write!(f, "instance {instance} has no class entry")
            }
            Violation::BackgroundClass { instance } => {
                write!(f, "instance {instance} is mapped to class 0")
            }
            Violation::BadThreshold { tau } => {
                write!(f, "threshold {tau} is outside (0,1) or out of order")
            }
            Violation::ScoreRange { tau, row, col, channel, value } => write!(
                f,
                "score {value} at ({row}, {col}) channel {channel}, tau {tau} is outside [0,1]"
            ),
            Violation::ScoreSum { tau, row, col, sum } => {
                write!(f, "scores at ({row}, {col}), tau {tau} sum to {sum}")
            }
        }
    }
}

fn first_violation(v: Vec<Violation>) -> Result<()> {
    match v.into_iter().next() {
        None => Ok(()),
        Some(v) => Err(Error::Validation(v.to_string())),
    }
}

/// Checks raster agreement between the inputs and each input's own invariants.
pub fn validate_scene(
    emb: &EmbeddingField,
    labels: &InstanceLabelMap,
    scores: Option<&ClassScoreStack>,
) -> Vec<Violation> {
    let expected = (emb.height(), emb.width());
    let mut out = Vec::new();
    if (labels.height(), labels.width()) != expected {
        out.push(Violation::ShapeMismatch {
            what: "labels",
            expected,
            actual: (labels.height(), labels.width()),
        });
    }
    if let Some(s) = scores {
        if (s.height(), s.width()) != expected {
            out.push(Violation::ShapeMismatch {
                what: "scores",
                expected,
                actual: (s.height(), s.width()),
            });
        }
    }
    out.extend(emb.violations());
    out.extend(labels.violations());
    if let Some(s) = scores {
        out.extend(s.violations());
    }
    out
}

/// Rejects the inputs with the first violation found, if any.
pub fn ensure_scene(
    emb: &EmbeddingField,
    labels: &InstanceLabelMap,
    scores: Option<&ClassScoreStack>,
) -> Result<()> {
    first_violation(validate_scene(emb, labels, scores))
}

// ---------------------------------------------------------------------------
// Scene directories
// ---------------------------------------------------------------------------

pub const EMBEDDING_FILE: &str = "emb.tnsr";
pub const LABELS_FILE: &str = "labels.tnsr";
pub const CLASSMAP_FILE: &str = "classmap.json";
pub const IMAGE_FILE: &str = "image.tnsr";

pub fn scores_file_name(tau: f64) -> String {
    format!("scores_{tau}.tnsr")
}

pub fn save_tensor(path: &Path, t: &DenseTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(t, &mut w)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<DenseTensor> {
    let file = File::open(path).map_err(|e| {
        Error::Format(format!("cannot open {}: {e}", path.display()))
    })?;
    read_tensor(&mut BufReader::new(file))
}

pub fn save_labels(dir: &Path, labels: &InstanceLabelMap) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_tensor(&dir.join(LABELS_FILE), &labels.to_tensor())?;
    let map: BTreeMap<String, u16> =
        labels.class_map().iter().map(|(k, v)| (k.to_string(), *v)).collect();
    fs::write(dir.join(CLASSMAP_FILE), serde_json::to_string_pretty(&map)? + "\n")?;
    Ok(())
}

pub fn load_labels(dir: &Path) -> Result<InstanceLabelMap> {
    let text = fs::read_to_string(dir.join(CLASSMAP_FILE)).map_err(|e| {
        Error::Format(format!("cannot read {}: {e}", dir.join(CLASSMAP_FILE).display()))
    })?;
    let raw: BTreeMap<String, u16> = serde_json::from_str(&text)?;
    let class_of = raw
        .into_iter()
        .map(|(k, v)| {
            k.parse::<u16>()
                .map(|id| (id, v))
                .map_err(|_| Error::Format(format!("bad instance id {k:?} in class map")))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    InstanceLabelMap::from_tensor(load_tensor(&dir.join(LABELS_FILE))?, class_of)
}

pub fn save_embedding(dir: &Path, emb: &EmbeddingField) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_tensor(&dir.join(EMBEDDING_FILE), &emb.to_tensor())
}

pub fn load_embedding(dir: &Path) -> Result<EmbeddingField> {
    EmbeddingField::from_tensor(load_tensor(&dir.join(EMBEDDING_FILE))?)
}

pub fn save_scores(dir: &Path, scores: &ClassScoreStack) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, &tau) in scores.thresholds().iter().enumerate() {
        save_tensor(&dir.join(scores_file_name(tau)), &scores.tensor_at(i))?;
    }
    Ok(())
}

/// Loads every `scores_<tau>.tnsr` in `dir`, ordered by ascending tau.
/// Returns `None` when the directory holds no score files.
pub fn load_scores(dir: &Path) -> Result<Option<ClassScoreStack>> {
    let mut found: Vec<(f64, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(tau) = name
            .strip_prefix("scores_")
            .and_then(|rest| rest.strip_suffix(".tnsr"))
        {
            let tau: f64 = tau
                .parse()
                .map_err(|_| Error::Format(format!("bad threshold in file name {name:?}")))?;
            found.push((tau, path));
        }
    }
    if found.is_empty() {
        return Ok(None);
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut shape: Option<Vec<usize>> = None;
    let mut thresholds = Vec::new();
    let mut tensors = Vec::new();
    for (tau, path) in found {
        let t = load_tensor(&path)?;
        if t.shape().len() != 3 || t.shape()[2] < 2 {
            return Err(Error::Shape(format!(
                "{} must be [h,w,C+1] with C >= 1",
                path.display()
            )));
        }
        match &shape {
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected {s:?}",
                    path.display(),
                    t.shape()
                )))
            }
            None => shape = Some(t.shape().to_vec()),
            _ => {}
        }
        let values = t
            .as_f32()
            .ok_or_else(|| Error::Format(format!("{} is not float32", path.display())))?
            .to_vec();
        thresholds.push(tau);
        tensors.push(values);
    }
    let shape = shape.expect("at least one score file");
    ClassScoreStack::new(shape[0], shape[1], shape[2] - 1, thresholds, tensors).map(Some)
}
