//! Region-level detection metrics: mask IoU, confidence-ordered matching,
//! precision/recall curves, AP^r / mAP^r, and class-agnostic average recall.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Rle};
use crate::proposer::MaskProposal;
use crate::scene::InstanceLabelMap;

pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.5, 0.6, 0.7];
pub const DEFAULT_BUDGETS: [usize; 13] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 200, 500, 1000];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Inclusive IoU range the recall curve is averaged over.
    pub ar_range: (f64, f64),
    pub ar_step: f64,
    /// Proposal budgets (per image) for the recall tables.
    pub budgets: Vec<usize>,
    /// When false, ground truths flagged difficult are ignored.
    pub include_difficult: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            ar_range: (0.5, 1.0),
            ar_step: 0.05,
            budgets: DEFAULT_BUDGETS.to_vec(),
            include_difficult: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, &b) in self.iou_thresholds.iter().enumerate() {
            if !(b > 0.0 && b <= 1.0) || (i > 0 && self.iou_thresholds[i - 1] >= b) {
                return Err(Error::Config(format!(
                    "IoU thresholds must be ascending in (0, 1], got {:?}",
                    self.iou_thresholds
                )));
            }
        }
        let (lo, hi) = self.ar_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0 && self.ar_step > 0.0) {
            return Err(Error::Config(format!(
                "bad AR grid: range {:?}, step {}",
                self.ar_range, self.ar_step
            )));
        }
        if self.budgets.contains(&0) {
            return Err(Error::Config("proposal budgets must be positive".into()));
        }
        Ok(())
    }

    /// IoU thresholds of the AR integration grid, endpoints included.
    pub fn ar_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.ar_range;
        let n = ((hi - lo) / self.ar_step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| ((lo + i as f64 * self.ar_step) * 1e9).round() / 1e9)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class: u16,
    pub confidence: f64,
    pub mask: Rle,
}

impl Detection {
    pub fn from_proposal(image: usize, p: &MaskProposal) -> Self {
        Self { image, class: p.class, confidence: p.confidence, mask: p.mask.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub class: u16,
    pub mask: BinaryMask,
    pub difficult: bool,
}

/// Ground-truth masks of every instance in a label map, in id order.
pub fn gt_from_labels(labels: &InstanceLabelMap) -> Vec<GtInstance> {
    (1..=labels.num_instances() as u16)
        .map(|id| GtInstance {
            class: labels.class_of(id).unwrap_or(0),
            mask: BinaryMask::new(labels.height(), labels.width(), labels.instance_mask(id))
                .expect("label raster shape"),
            difficult: false,
        })
        .collect()
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "cannot compare a {}x{} mask with a {}x{} mask",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::UndefinedIou);
    }
    Ok(inter as f64 / union as f64)
}

/// IoU that treats two empty masks as non-overlapping.
fn iou_or_zero(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    match mask_iou(a, b) {
        Err(Error::UndefinedIou) => Ok(0.0),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MatchOutcome {
    TruePositive { gt: usize },
    FalsePositive,
    /// Best match is a ground truth excluded from scoring.
    Ignored,
}

/// Labels detections of one class in the given (confidence) order.
///
/// Each detection is compared with every ground truth of its image; the one
/// with the highest IoU (lowest index on ties) is its match. The detection is
/// a true positive when that IoU reaches `beta` and the match has not already
/// been claimed; a repeated hit on a claimed ground truth is a false positive.
pub fn match_detections(
    dets: &[Detection],
    gts: &[Vec<GtInstance>],
    beta: f64,
    include_difficult: bool,
) -> Result<Vec<MatchOutcome>> {
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(dets.len());
    for det in dets {
        let Some(image_gts) = gts.get(det.image) else {
            out.push(MatchOutcome::FalsePositive);
            continue;
        };
        let mask = det.mask.decode()?;
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in image_gts.iter().enumerate() {
            let iou = iou_or_zero(&mask, &gt.mask)?;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        let outcome = match best {
            Some((gi, iou)) if iou >= beta => {
                if image_gts[gi].difficult && !include_difficult {
                    MatchOutcome::Ignored
                } else if claimed[det.image][gi] {
                    MatchOutcome::FalsePositive
                } else {
                    claimed[det.image][gi] = true;
                    MatchOutcome::TruePositive { gt: gi }
                }
            }
            _ => MatchOutcome::FalsePositive,
        };
        out.push(outcome);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall after each ranked detection. `None` when there is no
/// ground truth to recall.
pub fn pr_curve(outcomes: &[MatchOutcome], num_gt: usize) -> Option<Vec<PrPoint>> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut points = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            MatchOutcome::TruePositive { .. } => tp += 1,
            MatchOutcome::FalsePositive => {}
            MatchOutcome::Ignored => continue,
        }
        seen += 1;
        points.push(PrPoint {
            recall: tp as f64 / num_gt as f64,
            precision: tp as f64 / seen as f64,
        });
    }
    Some(points)
}

/// Area under the precision envelope (every-point interpolation).
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut envelope = 0.0f64;
    let mut area = 0.0;
    let mut next_recall = None::<f64>;
    for p in points.iter().rev() {
        if let Some(r) = next_recall {
            area += (r - p.recall) * envelope;
        }
        envelope = envelope.max(p.precision);
        next_recall = Some(p.recall);
    }
    if let Some(r) = next_recall {
        area += r * envelope;
    }
    area.clamp(0.0, 1.0)
}

/// Unweighted mean over the classes that have an AP.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Maximum number of ground truths that can be paired one-to-one with
/// proposals at IoU >= `threshold` (augmenting paths).
fn max_matching(ious: &[Vec<f64>], threshold: f64) -> usize {
    // ious[gt][proposal]
    let n_props = ious.first().map_or(0, |r| r.len());
    let mut owner: Vec<Option<usize>> = vec![None; n_props];

    fn augment(
        gt: usize,
        ious: &[Vec<f64>],
        threshold: f64,
        visited: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for p in 0..owner.len() {
            if ious[gt][p] >= threshold && !visited[p] {
                visited[p] = true;
                if owner[p].is_none_or(|o| augment(o, ious, threshold, visited, owner)) {
                    owner[p] = Some(gt);
                    return true;
                }
            }
        }
        false
    }

    let mut matched = 0;
    for gt in 0..ious.len() {
        let mut visited = vec![false; n_props];
        if augment(gt, ious, threshold, &mut visited, &mut owner) {
            matched += 1;
        }
    }
    matched
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallCurve {
    pub budget: usize,
    /// (IoU threshold, recall) over the AR grid.
    pub curve: Vec<(f64, f64)>,
    pub average_recall: f64,
    pub recall_at_50: f64,
}

/// Class-agnostic recall of the top-`budget` proposals per image.
///
/// `proposals[image]` must be ranked by descending confidence.
pub fn average_recall(
    proposals: &[Vec<Rle>],
    gts: &[Vec<GtInstance>],
    budget: usize,
    config: &EvalConfig,
) -> Result<RecallCurve> {
    if budget == 0 {
        return Err(Error::Config("proposal budget must be positive".into()));
    }
    let grid = config.ar_grid();
    let mut matched = vec![0usize; grid.len()];
    let mut matched_50 = 0usize;
    let mut total_gt = 0usize;
    for (image, image_gts) in gts.iter().enumerate() {
        let image_gts: Vec<&GtInstance> = image_gts
            .iter()
            .filter(|g| config.include_difficult || !g.difficult)
            .collect();
        total_gt += image_gts.len();
        let props: Vec<BinaryMask> = proposals
            .get(image)
            .map(|p| p.iter().take(budget).map(Rle::decode).collect::<Result<_>>())
            .transpose()?
            .unwrap_or_default();
        if props.is_empty() || image_gts.is_empty() {
            continue;
        }
        let ious = image_gts
            .iter()
            .map(|g| props.iter().map(|p| iou_or_zero(p, &g.mask)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        for (m, &t) in matched.iter_mut().zip(&grid) {
            *m += max_matching(&ious, t);
        }
        matched_50 += max_matching(&ious, 0.5);
    }
    let frac = |m: usize| if total_gt == 0 { 0.0 } else { m as f64 / total_gt as f64 };
    let curve: Vec<(f64, f64)> = grid.iter().zip(&matched).map(|(&t, &m)| (t, frac(m))).collect();
    let average_recall = curve.iter().map(|c| c.1).sum::<f64>() / curve.len() as f64;
    Ok(RecallCurve { budget, curve, average_recall, recall_at_50: frac(matched_50) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub beta: f64,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassResult {
    pub class: u16,
    pub num_gt: usize,
    pub num_detections: usize,
    pub per_beta: Vec<ClassAp>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassResult>,
    /// mAP^r per IoU threshold; `None` if no class has ground truth.
    pub map: Vec<Option<f64>>,
    pub recall: Vec<RecallCurve>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn map_at(&self, beta: f64) -> Option<f64> {
        self.iou_thresholds
            .iter()
            .position(|&b| (b - beta).abs() < 1e-9)
            .and_then(|i| self.map[i])
    }

    /// Plain-text tables: per-class AP^r rows with a mAP^r row, then recall per budget.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "IoU");
        for c in &self.classes {
            let _ = write!(s, " {:>7}", format!("c{}", c.class));
        }
        let _ = writeln!(s, " {:>7}", "mAP^r");
        for (bi, beta) in self.iou_thresholds.iter().enumerate() {
            let _ = write!(s, "{:<8}", format!("{beta:.2}"));
            for c in &self.classes {
                let cell = c.per_beta[bi].ap.map_or("-".to_string(), |ap| format!("{:.1}", 100.0 * ap));
                let _ = write!(s, " {cell:>7}");
            }
            let cell = self.map[bi].map_or("-".to_string(), |m| format!("{:.1}", 100.0 * m));
            let _ = writeln!(s, " {cell:>7}");
        }
        if !self.recall.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<10} {:>10} {:>10}", "proposals", "recall@0.5", "AR");
            for r in &self.recall {
                let _ = writeln!(
                    s,
                    "{:<10} {:>10.3} {:>10.3}",
                    r.budget, r.recall_at_50, r.average_recall
                );
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

/// Sorts detections by descending confidence. Ties keep input order.
pub fn rank_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
}

/// Full protocol: per-class AP^r at every IoU threshold with detections
/// pooled across images, mAP^r, and recall/AR per proposal budget.
pub fn evaluate(dets: &[Detection], gts: &[Vec<GtInstance>], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    if let Some(d) = dets.iter().find(|d| !(0.0..=1.0).contains(&d.confidence)) {
        return Err(Error::Validation(format!("detection confidence {} outside [0, 1]", d.confidence)));
    }
    let gt_classes: BTreeSet<u16> = gts.iter().flatten().map(|g| g.class).collect();
    let det_classes: BTreeSet<u16> = dets.iter().map(|d| d.class).collect();
    let mut warnings = Vec::new();
    for c in det_classes.difference(&gt_classes) {
        warnings.push(format!("class {c} appears in detections but not in ground truth"));
    }
    let classes: BTreeSet<u16> = gt_classes.union(&det_classes).copied().collect();

    let mut results = Vec::new();
    for &class in &classes {
        let mut class_dets: Vec<Detection> = dets.iter().filter(|d| d.class == class).cloned().collect();
        rank_detections(&mut class_dets);
        let class_gts: Vec<Vec<GtInstance>> = gts
            .iter()
            .map(|g| g.iter().filter(|g| g.class == class).cloned().collect())
            .collect();
        let num_gt = class_gts
            .iter()
            .flatten()
            .filter(|g| config.include_difficult || !g.difficult)
            .count();
        let mut per_beta = Vec::new();
        for &beta in &config.iou_thresholds {
            let outcomes = match_detections(&class_dets, &class_gts, beta, config.include_difficult)?;
            let (ap, curve) = match pr_curve(&outcomes, num_gt) {
                Some(curve) => (Some(average_precision(&curve)), curve),
                None => (None, Vec::new()),
            };
            per_beta.push(ClassAp { beta, ap, curve });
        }
        results.push(ClassResult { class, num_gt, num_detections: class_dets.len(), per_beta });
    }
    let map = (0..config.iou_thresholds.len())
        .map(|bi| {
            let aps: Vec<Option<f64>> = results.iter().map(|r| r.per_beta[bi].ap).collect();
            mean_ap(&aps)
        })
        .collect();

    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); gts.len()];
    for d in dets {
        if let Some(v) = per_image.get_mut(d.image) {
            v.push(d.clone());
        }
    }
    let ranked: Vec<Vec<Rle>> = per_image
        .into_iter()
        .map(|mut v| {
            rank_detections(&mut v);
            v.into_iter().map(|d| d.mask).collect()
        })
        .collect();
    let recall = config
        .budgets
        .iter()
        .map(|&b| average_recall(&ranked, gts, b, config))
        .collect::<Result<Vec<_>>>()?;

    Ok(EvalReport { iou_thresholds: config.iou_thresholds.clone(), classes: results, map, recall, warnings })
}

/// Keeps the `n` highest-confidence detections of each image.
pub fn top_n_per_image(dets: &[Detection], n: usize) -> Vec<Detection> {
    let images = dets.iter().map(|d| d.image + 1).max().unwrap_or(0);
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); images];
    for d in dets {
        per_image[d.image].push(d.clone());
    }
    per_image
        .into_iter()
        .flat_map(|mut v| {
            rank_detections(&mut v);
            v.truncate(n);
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: usize, w: usize, r0: usize, c0: usize, rh: usize, cw: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for r in r0..r0 + rh {
            for c in c0..c0 + cw {
                m.set(r, c, true);
            }
        }
        m
    }

    fn det(image: usize, conf: f64, m: &BinaryMask) -> Detection {
        Detection { image, class: 1, confidence: conf, mask: m.encode() }
    }

    fn gt(m: BinaryMask) -> GtInstance {
        GtInstance { class: 1, mask: m, difficult: false }
    }

    #[test]
    fn iou_basics() {
        let a = block(4, 4, 0, 0, 2, 2);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &block(4, 4, 2, 2, 2, 2)).unwrap(), 0.0);
        let shifted = block(4, 4, 0, 1, 2, 2);
        assert!((mask_iou(&a, &shifted).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        let e = BinaryMask::empty(4, 4);
        assert!(matches!(mask_iou(&e, &e), Err(Error::UndefinedIou)));
        assert!(mask_iou(&a, &BinaryMask::empty(3, 4)).is_err());
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let m = block(4, 4, 0, 0, 2, 2);
        let gts = vec![vec![gt(m.clone())]];
        let out = match_detections(&[det(0, 0.9, &m), det(0, 0.8, &m)], &gts, 0.5, true).unwrap();
        assert_eq!(out, vec![MatchOutcome::TruePositive { gt: 0 }, MatchOutcome::FalsePositive]);
    }

    #[test]
    fn threshold_is_inclusive() {
        // IoU exactly 0.5: 2x2 GT vs 2x4 detection covering it.
        let g = block(4, 4, 0, 0, 2, 2);
        let d = block(4, 4, 0, 0, 2, 4);
        assert_eq!(mask_iou(&d, &g).unwrap(), 0.5);
        let out = match_detections(&[det(0, 0.5, &d)], &[vec![gt(g)]], 0.5, true).unwrap();
        assert_eq!(out, vec![MatchOutcome::TruePositive { gt: 0 }]);
    }

    #[test]
    fn no_ground_truth_means_all_false_positives() {
        let m = block(3, 3, 0, 0, 1, 1);
        let out = match_detections(&[det(0, 0.9, &m), det(0, 0.1, &m)], &[vec![]], 0.5, true).unwrap();
        assert!(out.iter().all(|o| *o == MatchOutcome::FalsePositive));
    }

    #[test]
    fn ap_worked_examples() {
        use MatchOutcome::*;
        let tp = TruePositive { gt: 0 };
        assert_eq!(average_precision(&pr_curve(&[tp], 1).unwrap()), 1.0);
        let ap = average_precision(&pr_curve(&[tp, FalsePositive, tp], 2).unwrap());
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12, "{ap}");
        assert_eq!(average_precision(&pr_curve(&[FalsePositive; 3], 2).unwrap()), 0.0);
        assert!(pr_curve(&[tp], 0).is_none());
        assert_eq!(average_precision(&pr_curve(&[], 3).unwrap()), 0.0);
    }

    #[test]
    fn mean_ap_cases() {
        assert_eq!(mean_ap(&[Some(1.0), Some(0.0)]), Some(0.5));
        assert_eq!(mean_ap(&[Some(0.7)]), Some(0.7));
        assert_eq!(mean_ap(&[Some(0.4), None]), Some(0.4));
        assert_eq!(mean_ap(&[None]), None);
        let aps: Vec<Option<f64>> = (0..20).map(|i| Some(i as f64 / 19.0)).collect();
        let want: f64 = (0..20).map(|i| i as f64 / 19.0).sum::<f64>() / 20.0;
        assert!((mean_ap(&aps).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn perfect_proposals_recall_everything() {
        let g1 = block(4, 4, 0, 0, 2, 2);
        let g2 = block(4, 4, 2, 2, 2, 2);
        let gts = vec![vec![gt(g1.clone()), gt(g2.clone())]];
        let props = vec![vec![g2.encode(), g1.encode()]];
        let cfg = EvalConfig::default();
        let r = average_recall(&props, &gts, 2, &cfg).unwrap();
        assert_eq!(r.average_recall, 1.0);
        assert!(r.curve.iter().all(|c| c.1 == 1.0));
        assert_eq!(r.curve.len(), 11);
        let none = average_recall(&[vec![]], &gts, 5, &cfg).unwrap();
        assert_eq!(none.average_recall, 0.0);
        let one = average_recall(&props, &gts, 1, &cfg).unwrap();
        assert_eq!(one.recall_at_50, 0.5);
    }

    #[test]
    fn ar_grid_endpoints() {
        let g = EvalConfig::default().ar_grid();
        assert_eq!(g.first(), Some(&0.5));
        assert_eq!(g.last(), Some(&1.0));
        assert_eq!(g[2], 0.6);
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let g1 = block(4, 4, 0, 0, 2, 2);
        let gts = vec![vec![gt(g1.clone())], vec![gt(block(4, 4, 1, 1, 3, 3))]];
        let dets = vec![det(0, 0.9, &g1), det(1, 0.8, &block(4, 4, 1, 1, 3, 3))];
        let cfg = EvalConfig { budgets: vec![1, 10], ..Default::default() };
        let report = evaluate(&dets, &gts, &cfg).unwrap();
        for b in DEFAULT_IOU_THRESHOLDS {
            assert_eq!(report.map_at(b), Some(1.0));
        }
        let empty = evaluate(&[], &gts, &cfg).unwrap();
        assert_eq!(empty.map_at(0.5), Some(0.0));
        assert!(empty.to_table().contains("mAP^r"));
    }

    #[test]
    fn unknown_class_warns() {
        let g1 = block(4, 4, 0, 0, 2, 2);
        let gts = vec![vec![gt(g1.clone())]];
        let mut d = det(0, 0.9, &g1);
        d.class = 7;
        let report = evaluate(&[d], &gts, &EvalConfig::default()).unwrap();
        assert_eq!(report.warnings.len(), 1);
        let c7 = report.classes.iter().find(|c| c.class == 7).unwrap();
        assert_eq!(c7.num_gt, 0);
        assert!(c7.per_beta.iter().all(|b| b.ap.is_none()));
        assert_eq!(report.map_at(0.5), Some(0.0));
    }

    #[test]
    fn difficult_ground_truth_can_be_ignored() {
        let g1 = block(4, 4, 0, 0, 2, 2);
        let mut hard = gt(g1.clone());
        hard.difficult = true;
        let gts = vec![vec![hard, gt(block(4, 4, 2, 2, 2, 2))]];
        let dets = vec![det(0, 0.9, &g1)];
        let cfg = EvalConfig { include_difficult: false, budgets: vec![5], ..Default::default() };
        let out = match_detections(&dets, &gts, 0.5, false).unwrap();
        assert_eq!(out, vec![MatchOutcome::Ignored]);
        let report = evaluate(&dets, &gts, &cfg).unwrap();
        assert_eq!(report.classes[0].num_gt, 1);
        assert_eq!(report.map_at(0.5), Some(0.0));
    }

    #[test]
    fn confidence_ties_keep_input_order() {
        let m = block(4, 4, 0, 0, 2, 2);
        let mut dets = vec![det(0, 0.5, &m), det(1, 0.5, &m), det(2, 0.9, &m)];
        rank_detections(&mut dets);
        assert_eq!(dets.iter().map(|d| d.image).collect::<Vec<_>>(), vec![2, 0, 1]);
    }
}
