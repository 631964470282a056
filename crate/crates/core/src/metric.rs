//! Pixel-pair similarity `2 / (1 + exp(||e_p - e_q||^2))` and its batched
//! seed-versus-field form.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::scene::EmbeddingField;
use crate::tensor::DenseTensor;

/// Similarity for a squared distance, evaluated as `2 * sigmoid(-dist2)` so
/// large distances go to 0 instead of overflowing.
#[inline]
pub fn similarity_from_sq_dist(dist2: f64) -> f64 {
    let dist2 = dist2.max(0.0);
    let e = (-dist2).exp();
    2.0 * e / (1.0 + e)
}

/// Squared Euclidean distance accumulated in f64.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

pub fn similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), actual: b.len() });
    }
    Ok(similarity_from_sq_dist(sq_dist(a, b)))
}

/// Embeddings of `k` seed pixels gathered from a field.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSet {
    coords: Vec<(usize, usize)>,
    dim: usize,
    embeddings: Vec<f32>,
}

impl SeedSet {
    pub fn gather(field: &EmbeddingField, coords: &[(usize, usize)]) -> Result<Self> {
        let mut seen = HashSet::with_capacity(coords.len());
        let mut embeddings = Vec::with_capacity(coords.len() * field.dim());
        for &(row, col) in coords {
            field.check_bounds(row, col)?;
            if !seen.insert((row, col)) {
                return Err(Error::Config(format!("duplicate seed ({row}, {col})")));
            }
            embeddings.extend_from_slice(field.at(row, col));
        }
        Ok(Self { coords: coords.to_vec(), dim: field.dim(), embeddings })
    }

    /// Seeds given by explicit vectors; coordinates are only labels here.
    pub fn from_parts(coords: Vec<(usize, usize)>, dim: usize, embeddings: Vec<f32>) -> Result<Self> {
        if embeddings.len() != coords.len() * dim {
            return Err(Error::Shape(format!(
                "{} seeds of dim {dim} need {} values, got {}",
                coords.len(),
                coords.len() * dim,
                embeddings.len()
            )));
        }
        Ok(Self { coords, dim, embeddings })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }
}

/// A `[k, h, w]` stack of per-seed maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedMaps {
    seeds: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SeedMaps {
    pub fn seeds(&self) -> usize {
        self.seeds
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, seed: usize, row: usize, col: usize) -> f32 {
        self.values[(seed * self.height + row) * self.width + col]
    }

    pub fn plane(&self, seed: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[seed * n..(seed + 1) * n]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_tensor(self) -> Option<DenseTensor> {
        DenseTensor::from_f32(vec![self.seeds, self.height, self.width], self.values).ok()
    }
}

/// Squared norms of every pixel embedding, in f64.
pub(crate) fn pixel_sq_norms(field: &EmbeddingField) -> Vec<f64> {
    field
        .values()
        .chunks_exact(field.dim())
        .map(|v| dot(v, v))
        .collect()
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Distances from one seed vector to every pixel via `|a|^2 + |b|^2 - 2 a.b`,
/// clamped at zero.
pub(crate) fn sq_dist_plane(
    field: &EmbeddingField,
    norms: &[f64],
    seed: &[f32],
    out: &mut [f32],
) {
    let seed_norm = dot(seed, seed);
    for ((px, &n), o) in field.values().chunks_exact(field.dim()).zip(norms).zip(out) {
        *o = (n + seed_norm - 2.0 * dot(px, seed)).max(0.0) as f32;
    }
}

pub fn batched_sq_distances(field: &EmbeddingField, seeds: &SeedSet) -> Result<SeedMaps> {
    if seeds.dim() != field.dim() {
        return Err(Error::Dimension { expected: field.dim(), actual: seeds.dim() });
    }
    let n = field.num_pixels();
    let norms = pixel_sq_norms(field);
    let mut values = vec![0.0f32; seeds.len() * n];
    for (i, plane) in values.chunks_exact_mut(n.max(1)).enumerate().take(seeds.len()) {
        sq_dist_plane(field, &norms, seeds.embedding(i), plane);
    }
    Ok(SeedMaps { seeds: seeds.len(), height: field.height(), width: field.width(), values })
}

pub fn similarity_map(field: &EmbeddingField, seeds: &SeedSet) -> Result<SeedMaps> {
    let mut maps = batched_sq_distances(field, seeds)?;
    for v in &mut maps.values {
        *v = similarity_from_sq_dist(*v as f64) as f32;
    }
    Ok(maps)
}
