//! Inference side: seediness from class scores, greedy seed selection that
//! trades seediness against embedding-space diversity, mask growing and
//! per-mask class/confidence assignment.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::check_thresholds;
use crate::mask::{BinaryMask, Rle};
use crate::metric::{pixel_sq_norms, sq_dist, sq_dist_plane};
use crate::scene::{ClassScoreStack, EmbeddingField};

pub const DEFAULT_GROW_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];
pub const DEFAULT_CLASS_THRESHOLDS: [f64; 4] = [0.25, 0.5, 0.75, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub struct ProposerConfig {
    /// Weight of the diversity term in seed selection.
    pub alpha: f64,
    pub num_seeds: usize,
    /// Thresholds masks may be grown at.
    pub tau_grow: Vec<f64>,
    /// Thresholds the class score stack is defined over.
    pub tau_cls: Vec<f64>,
    /// Pixels with seediness below this are never selected.
    pub seediness_floor: f64,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            num_seeds: 20,
            tau_grow: DEFAULT_GROW_THRESHOLDS.to_vec(),
            tau_cls: DEFAULT_CLASS_THRESHOLDS.to_vec(),
            seediness_floor: 0.0,
        }
    }
}

impl ProposerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.num_seeds == 0 {
            return Err(Error::Config("num_seeds must be at least 1".into()));
        }
        check_thresholds(&self.tau_grow)?;
        check_thresholds(&self.tau_cls)?;
        Ok(())
    }

    /// Threshold a mask is grown at for a classifier threshold: the same
    /// value when it is a grow threshold, otherwise the nearest one (lower on ties).
    pub fn grow_tau_for(&self, tau_cls: f64) -> f64 {
        let mut best = self.tau_grow[0];
        for &t in &self.tau_grow[1..] {
            if (t - tau_cls).abs() < (best - tau_cls).abs() {
                best = t;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedinessField {
    height: usize,
    width: usize,
    values: Vec<f32>,
    /// Per pixel: (threshold index, class) attaining the maximum.
    argmax: Vec<(usize, u16)>,
}

impl SeedinessField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn argmax(&self, row: usize, col: usize) -> (usize, u16) {
        self.argmax[row * self.width + col]
    }

    /// Field with explicit values and no class information (argmax = (0, 1)).
    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "seediness {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        let argmax = vec![(0, 1); values.len()];
        Ok(Self { height, width, values, argmax })
    }
}

/// `S_p = max_tau max_{c >= 1} C[p, c, tau]`; ties go to the smaller tau,
/// then the smaller class.
pub fn seediness(scores: &ClassScoreStack) -> Result<SeedinessField> {
    if scores.num_classes() == 0 {
        return Err(Error::Config("score stack has no foreground classes".into()));
    }
    let n = scores.height() * scores.width();
    let mut values = vec![f32::NEG_INFINITY; n];
    let mut argmax = vec![(0usize, 1u16); n];
    for ti in 0..scores.thresholds().len() {
        for (px, (best, arg)) in values.iter_mut().zip(argmax.iter_mut()).enumerate() {
            for (c, &p) in scores.pixel(ti, px).iter().enumerate().skip(1) {
                if p > *best {
                    *best = p;
                    *arg = (ti, c as u16);
                }
            }
        }
    }
    Ok(SeedinessField { height: scores.height(), width: scores.width(), values, argmax })
}

/// Squared distance at which the similarity drops to `tau`:
/// `sim(d) >= tau` exactly when `d <= ln(2 / tau - 1)`.
pub fn distance_cutoff(tau: f64) -> f64 {
    (2.0 / tau - 1.0).ln()
}

/// Marks every entry of a squared-distance plane whose similarity is at least `tau`.
pub(crate) fn threshold_plane(dist: &[f32], tau: f64, mask: &mut [bool]) {
    let cutoff = distance_cutoff(tau);
    for (m, &d) in mask.iter_mut().zip(dist) {
        *m = d as f64 <= cutoff;
    }
}

/// All pixels whose similarity to the seed is at least `tau`.
pub fn grow_mask(field: &EmbeddingField, seed: (usize, usize), tau: f64) -> Result<BinaryMask> {
    field.check_bounds(seed.0, seed.1)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("threshold {tau} is outside (0, 1)")));
    }
    let norms = pixel_sq_norms(field);
    let mut dist = vec![0.0f32; field.num_pixels()];
    sq_dist_plane(field, &norms, field.at(seed.0, seed.1), &mut dist);
    let mut bits = vec![false; dist.len()];
    threshold_plane(&dist, tau, &mut bits);
    BinaryMask::new(field.height(), field.width(), bits)
}

/// Greedy selection: the first seed maximizes seediness, each later seed
/// maximizes `ln S_p + alpha * ln D(p)` where `D` is the squared embedding
/// distance to the closest seed already chosen. Exhaustive scan per step,
/// row-major order on ties.
pub fn select_seeds(
    field: &EmbeddingField,
    seediness: &SeedinessField,
    config: &ProposerConfig,
) -> Result<Vec<(usize, usize)>> {
    config.validate()?;
    if (seediness.height, seediness.width) != (field.height(), field.width()) {
        return Err(Error::Shape(format!(
            "seediness is {}x{}, field is {}x{}",
            seediness.height,
            seediness.width,
            field.height(),
            field.width()
        )));
    }
    let log_s: Vec<f64> = seediness.values.iter().map(|&s| (s as f64).ln()).collect();
    let mut open: Vec<bool> = seediness
        .values
        .iter()
        .map(|&s| s > 0.0 && s as f64 >= config.seediness_floor)
        .collect();
    if !open.iter().any(|&o| o) {
        return Err(Error::NoSeed);
    }
    let width = field.width();
    let mut min_d = vec![f64::INFINITY; open.len()];
    let mut chosen = Vec::with_capacity(config.num_seeds);

    while chosen.len() < config.num_seeds {
        let first = chosen.is_empty();
        let mut best: Option<(usize, f64)> = None;
        for (px, _) in open.iter().enumerate().filter(|(_, &o)| o) {
            let score = if first || config.alpha == 0.0 {
                log_s[px]
            } else {
                log_s[px] + config.alpha * min_d[px].ln()
            };
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((px, score));
            }
        }
        let Some((px, _)) = best else { break };
        open[px] = false;
        chosen.push((px / width, px % width));
        let e = field.pixel(px);
        for (q, d) in min_d.iter_mut().enumerate() {
            if open[q] {
                *d = d.min(sq_dist(field.pixel(q), e));
            }
        }
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    pub seed: (usize, usize),
    /// Classifier threshold attaining the best score at the seed.
    pub tau: f64,
    /// Threshold the mask was actually grown at.
    pub grow_tau: f64,
    pub class: u16,
    pub confidence: f64,
    pub mask: Rle,
    pub pixels: usize,
}

pub fn propose(
    field: &EmbeddingField,
    scores: &ClassScoreStack,
    config: &ProposerConfig,
) -> Result<Vec<MaskProposal>> {
    config.validate()?;
    field.ensure_valid()?;
    scores.ensure_valid()?;
    if (scores.height(), scores.width()) != (field.height(), field.width()) {
        return Err(Error::Shape(format!(
            "scores are {}x{}, field is {}x{}",
            scores.height(),
            scores.width(),
            field.height(),
            field.width()
        )));
    }
    let same_taus = scores.thresholds().len() == config.tau_cls.len()
        && scores.thresholds().iter().zip(&config.tau_cls).all(|(a, b)| (a - b).abs() <= 1e-9);
    if !same_taus {
        return Err(Error::Config(format!(
            "score thresholds {:?} differ from classifier thresholds {:?}",
            scores.thresholds(),
            config.tau_cls
        )));
    }
    let seed_field = seediness(scores)?;
    let seeds = select_seeds(field, &seed_field, config)?;

    let norms = pixel_sq_norms(field);
    let mut dist = vec![0.0f32; field.num_pixels()];
    let mut proposals = Vec::with_capacity(seeds.len());
    for (row, col) in seeds {
        let (ti, class) = seed_field.argmax(row, col);
        let tau = scores.thresholds()[ti];
        let grow_tau = config.grow_tau_for(tau);
        sq_dist_plane(field, &norms, field.at(row, col), &mut dist);
        let mut bits = vec![false; dist.len()];
        threshold_plane(&dist, grow_tau, &mut bits);
        let mask = BinaryMask::new(field.height(), field.width(), bits)?;
        proposals.push(MaskProposal {
            seed: (row, col),
            tau,
            grow_tau,
            class,
            confidence: seed_field.get(row, col) as f64,
            pixels: mask.count(),
            mask: mask.encode(),
        });
    }
    // Stable: equal confidences keep selection order.
    proposals.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(proposals)
}

// ---------------------------------------------------------------------------
// Proposal files: one JSON object per line.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub seed_row: usize,
    pub seed_col: usize,
    pub tau: f64,
    pub grow_tau: f64,
    pub class: u16,
    pub confidence: f64,
    pub pixels: usize,
    pub height: usize,
    pub width: usize,
    pub runs: Vec<u32>,
}

impl From<&MaskProposal> for ProposalRecord {
    fn from(p: &MaskProposal) -> Self {
        Self {
            seed_row: p.seed.0,
            seed_col: p.seed.1,
            tau: p.tau,
            grow_tau: p.grow_tau,
            class: p.class,
            confidence: p.confidence,
            pixels: p.pixels,
            height: p.mask.height,
            width: p.mask.width,
            runs: p.mask.runs.clone(),
        }
    }
}

impl From<ProposalRecord> for MaskProposal {
    fn from(r: ProposalRecord) -> Self {
        Self {
            seed: (r.seed_row, r.seed_col),
            tau: r.tau,
            grow_tau: r.grow_tau,
            class: r.class,
            confidence: r.confidence,
            pixels: r.pixels,
            mask: Rle { height: r.height, width: r.width, runs: r.runs },
        }
    }
}

pub fn write_proposals<W: Write>(sink: &mut W, proposals: &[MaskProposal]) -> Result<()> {
    for p in proposals {
        serde_json::to_writer(&mut *sink, &ProposalRecord::from(p))?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_proposals<R: BufRead>(source: R) -> Result<Vec<MaskProposal>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProposalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("proposal line {}: {e}", i + 1)))?;
        let p = MaskProposal::from(rec);
        if p.mask.area() != p.pixels as u64 || p.mask.decode().is_err() {
            return Err(Error::Format(format!("proposal line {}: inconsistent mask", i + 1)));
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack(h: usize, w: usize, c: usize, taus: &[f64], fill: impl Fn(usize, usize) -> Vec<f32>) -> ClassScoreStack {
        let scores = (0..taus.len())
            .map(|ti| (0..h * w).flat_map(|px| fill(ti, px)).collect())
            .collect();
        ClassScoreStack::new(h, w, c, taus.to_vec(), scores).unwrap()
    }

    #[test]
    fn background_heavy_pixel_has_low_seediness() {
        let s = stack(1, 2, 2, &[0.25, 0.5], |_, px| {
            if px == 0 { vec![0.95, 0.03, 0.02] } else { vec![0.2, 0.6, 0.2] }
        });
        let f = seediness(&s).unwrap();
        assert!(f.get(0, 0) <= 0.05 + 1e-6);
        assert!(f.get(0, 1) >= 0.6);
    }

    #[test]
    fn uniform_scores_tie_break() {
        let s = stack(2, 2, 3, &[0.25, 0.5, 0.75], |_, _| vec![0.25; 4]);
        let f = seediness(&s).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(f.get(r, c), 0.25);
                assert_eq!(f.argmax(r, c), (0, 1));
            }
        }
    }

    #[test]
    fn no_foreground_classes_is_config_error() {
        let s = stack(1, 1, 0, &[0.5], |_, _| vec![1.0]);
        assert!(matches!(seediness(&s), Err(Error::Config(_))));
    }

    #[test]
    fn constant_field_grows_everything() {
        let field = EmbeddingField::new(3, 4, 2, [1.5f32, -0.5].repeat(12)).unwrap();
        for tau in [0.1, 0.5, 0.99] {
            assert_eq!(grow_mask(&field, (1, 2), tau).unwrap().count(), 12);
        }
    }

    fn one_hot(labels: &[u16], n: usize) -> Vec<f32> {
        labels
            .iter()
            .flat_map(|&l| {
                let mut v = vec![0.0f32; n];
                v[l as usize] = 1.0;
                v
            })
            .collect()
    }

    #[test]
    fn one_hot_field_grows_exact_instance() {
        let labels = [1u16, 1, 0, 2, 0, 2, 2, 0, 1];
        let field = EmbeddingField::new(3, 3, 3, one_hot(&labels, 3)).unwrap();
        let m = grow_mask(&field, (1, 2), 0.5).unwrap();
        let want: Vec<bool> = labels.iter().map(|&l| l == 2).collect();
        assert_eq!(m.bits(), want.as_slice());
    }

    #[test]
    fn high_threshold_keeps_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let values = (0..5 * 5 * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let field = EmbeddingField::new(5, 5, 3, values).unwrap();
        let m = grow_mask(&field, (2, 3), 0.999).unwrap();
        assert!(m.get(2, 3));
        assert_eq!(m.count(), 1);
    }

    #[test]
    fn grow_rejects_bad_inputs() {
        let field = EmbeddingField::zeros(2, 2, 1).unwrap();
        assert!(matches!(grow_mask(&field, (0, 2), 0.5), Err(Error::OutOfBounds { .. })));
        assert!(grow_mask(&field, (0, 0), 1.0).is_err());
    }

    #[test]
    fn grow_threshold_resolution() {
        let cfg = ProposerConfig::default();
        assert_eq!(cfg.grow_tau_for(0.5), 0.5);
        assert_eq!(cfg.grow_tau_for(0.9), 0.75);
        let cfg = ProposerConfig { tau_grow: vec![0.25, 0.5, 0.75, 0.9], ..cfg };
        assert_eq!(cfg.grow_tau_for(0.9), 0.9);
        let cfg = ProposerConfig { tau_grow: vec![0.4, 0.6], ..cfg };
        assert_eq!(cfg.grow_tau_for(0.5), 0.4);
    }

    #[test]
    fn alpha_zero_is_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w) = (4, 5);
        let values = (0..h * w * 2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let field = EmbeddingField::new(h, w, 2, values).unwrap();
        // Coarse seediness levels force ties.
        let s: Vec<f32> = (0..h * w).map(|_| rng.random_range(1..5) as f32 / 5.0).collect();
        let seed_field = SeedinessField::from_values(h, w, s.clone()).unwrap();
        let cfg = ProposerConfig { alpha: 0.0, num_seeds: 7, ..Default::default() };
        let got = select_seeds(&field, &seed_field, &cfg).unwrap();
        let mut order: Vec<usize> = (0..h * w).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let want: Vec<(usize, usize)> = order[..7].iter().map(|&i| (i / w, i % w)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn two_clusters_second_seed_switches() {
        // Left half embeds at [0,0], right half at [10,0]; equal seediness.
        let (h, w) = (2, 4);
        let values: Vec<f32> = (0..h * w)
            .flat_map(|px| if px % w < 2 { [0.0, 0.0] } else { [10.0, 0.0] })
            .collect();
        let field = EmbeddingField::new(h, w, 2, values).unwrap();
        let seed_field = SeedinessField::from_values(h, w, vec![0.8; h * w]).unwrap();
        for alpha in [1e-3, 0.3, 1.0, 5.0] {
            let cfg = ProposerConfig { alpha, num_seeds: 2, ..Default::default() };
            let seeds = select_seeds(&field, &seed_field, &cfg).unwrap();
            assert_eq!(seeds[0], (0, 0));
            assert!(seeds[1].1 >= 2, "alpha {alpha}: {seeds:?}");
        }
        let cfg = ProposerConfig { alpha: 0.0, num_seeds: 2, ..Default::default() };
        assert_eq!(select_seeds(&field, &seed_field, &cfg).unwrap(), vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn zero_seediness_is_no_seed() {
        let field = EmbeddingField::zeros(2, 2, 1).unwrap();
        let seed_field = SeedinessField::from_values(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            select_seeds(&field, &seed_field, &ProposerConfig::default()),
            Err(Error::NoSeed)
        ));
    }

    #[test]
    fn fewer_candidates_than_seeds() {
        let field = EmbeddingField::zeros(1, 3, 1).unwrap();
        let seed_field = SeedinessField::from_values(1, 3, vec![0.0, 0.5, 0.2]).unwrap();
        let cfg = ProposerConfig { num_seeds: 10, ..Default::default() };
        assert_eq!(select_seeds(&field, &seed_field, &cfg).unwrap(), vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn single_seed_is_global_argmax() {
        let field = EmbeddingField::new(1, 3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let s = stack(1, 3, 1, &DEFAULT_CLASS_THRESHOLDS, |ti, px| {
            let p = if px == 2 && ti == 1 { 0.7 } else { 0.4 };
            vec![1.0 - p, p]
        });
        let cfg = ProposerConfig { num_seeds: 1, ..Default::default() };
        let props = propose(&field, &s, &cfg).unwrap();
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].seed, (0, 2));
        assert_eq!(props[0].tau, 0.5);
        assert!((props[0].confidence - 0.7).abs() < 1e-6);
    }

    #[test]
    fn background_dominated_seed_still_proposes_foreground() {
        let field = EmbeddingField::zeros(1, 1, 1).unwrap();
        let s = stack(1, 1, 2, &DEFAULT_CLASS_THRESHOLDS, |_, _| vec![0.9, 0.04, 0.06]);
        let props = propose(&field, &s, &ProposerConfig::default()).unwrap();
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].class, 2);
        assert!((props[0].confidence - 0.06).abs() < 1e-7);
    }

    #[test]
    fn threshold_mismatch_is_rejected() {
        let field = EmbeddingField::zeros(1, 1, 1).unwrap();
        let s = stack(1, 1, 1, &[0.5], |_, _| vec![0.5, 0.5]);
        assert!(matches!(propose(&field, &s, &ProposerConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn proposal_file_round_trip() {
        let field = EmbeddingField::new(2, 2, 1, vec![0.0, 0.0, 5.0, 5.0]).unwrap();
        let s = stack(2, 2, 1, &DEFAULT_CLASS_THRESHOLDS, |_, px| {
            let p = 0.5 + 0.1 * px as f32;
            vec![1.0 - p, p]
        });
        let props = propose(&field, &s, &ProposerConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_proposals(&mut buf, &props).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), props.len());
        let back = read_proposals(buf.as_slice()).unwrap();
        assert_eq!(back, props);
        assert!(back.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }
}
