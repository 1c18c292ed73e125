//! Marking-point and slot matching, precision/recall curves and
//! all-point-interpolated average precision.
//!
//! Every tolerance test is a strict inequality.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::Detections;
use crate::types::{angles_within, AnnotatedImage, MarkingPoint, ParkingSlot, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchTarget {
    Points,
    Slots,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Position tolerance, pixels.
    pub i_px: f64,
    /// Angle tolerance, degrees.
    pub b_deg: f64,
    pub target: MatchTarget,
}

impl MatchConfig {
    /// Tolerances for 512-px images (10 px rescaled from 600-px data).
    pub fn for_512(target: MatchTarget) -> Self {
        Self {
            i_px: 8.53,
            b_deg: 10.0,
            target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.i_px > 0.0) || !(self.b_deg > 0.0 && self.b_deg < 180.0) {
            return Err(Error::Config(format!(
                "match tolerances need I > 0 and 0 < B < 180, got I={} B={}",
                self.i_px, self.b_deg
            )));
        }
        Ok(())
    }
}

/// Whether `det` may match `gt`; on success the matching cost (distance).
pub fn point_match_cost(gt: &MarkingPoint, det: &MarkingPoint, cfg: &MatchConfig) -> Option<f64> {
    let d2 = (gt.x - det.x).powi(2) + (gt.y - det.y).powi(2);
    let ok = d2 < cfg.i_px * cfg.i_px
        && angles_within(gt.theta1, det.theta1, cfg.b_deg)
        && angles_within(gt.theta2, det.theta2, cfg.b_deg)
        && gt.shape == det.shape
        && gt.ptype == det.ptype;
    ok.then(|| d2.sqrt())
}

/// Whether `det` may match `gt` under either endpoint assignment; on success
/// the summed endpoint distance of the better valid assignment.
///
/// Under the swapped assignment the detection's direction is reversed
/// before the angle test.
pub fn slot_match_cost(gt: &ParkingSlot, det: &ParkingSlot, cfg: &MatchConfig) -> Option<f64> {
    let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let straight = (dist(gt.p1, det.p1), dist(gt.p2, det.p2), det.theta_s);
    let swapped = (dist(gt.p1, det.p2), dist(gt.p2, det.p1), det.theta_s + 180.0);
    [straight, swapped]
        .into_iter()
        .filter(|(d1, d2, theta)| *d1 < cfg.i_px && *d2 < cfg.i_px && angles_within(gt.theta_s, *theta, cfg.b_deg))
        .map(|(d1, d2, _)| d1 + d2)
        .min_by(f64::total_cmp)
}

/// Detection processing order: descending confidence, input order on ties.
pub fn confidence_order(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    order
}

/// Greedy one-to-one matching; returns a TP flag per detection (input order).
fn greedy_match(n_gt: usize, confidences: &[f64], cost: impl Fn(usize, usize) -> Option<f64>) -> Vec<bool> {
    let mut taken = vec![false; n_gt];
    let mut flags = vec![false; confidences.len()];
    for d in confidence_order(confidences) {
        let best = (0..n_gt)
            .filter(|g| !taken[*g])
            .filter_map(|g| cost(g, d).map(|c| (g, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((g, _)) = best {
            taken[g] = true;
            flags[d] = true;
        }
    }
    flags
}

pub fn match_points(gt: &[MarkingPoint], det: &[MarkingPoint], cfg: &MatchConfig) -> Vec<bool> {
    let conf: Vec<f64> = det.iter().map(|d| d.confidence).collect();
    greedy_match(gt.len(), &conf, |g, d| point_match_cost(&gt[g], &det[d], cfg))
}

pub fn match_slots(gt: &[ParkingSlot], det: &[ParkingSlot], cfg: &MatchConfig) -> Vec<bool> {
    let conf: Vec<f64> = det.iter().map(|d| d.confidence).collect();
    greedy_match(gt.len(), &conf, |g, d| slot_match_cost(&gt[g], &det[d], cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recalls: Vec<f64>,
    pub precisions: Vec<f64>,
    pub n_gt: usize,
}

/// Cumulative precision and recall at every rank of the confidence-sorted
/// `(confidence, is_tp)` list.
pub fn pr_curve(flags: &[(f64, bool)], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 && !flags.is_empty() {
        return Err(Error::ZeroGt);
    }
    let conf: Vec<f64> = flags.iter().map(|f| f.0).collect();
    let mut tp = 0usize;
    let mut recalls = Vec::with_capacity(flags.len());
    let mut precisions = Vec::with_capacity(flags.len());
    for (rank, i) in confidence_order(&conf).into_iter().enumerate() {
        if flags[i].1 {
            tp += 1;
        }
        recalls.push(tp as f64 / n_gt as f64);
        precisions.push(tp as f64 / (rank + 1) as f64);
    }
    Ok(PrCurve {
        recalls,
        precisions,
        n_gt,
    })
}

/// All-point interpolated AP: recall steps weighted by the maximum precision
/// at any equal or higher recall.
pub fn average_precision(curve: &PrCurve) -> f64 {
    if curve.recalls.is_empty() {
        return 0.0;
    }
    let mut mrec = Vec::with_capacity(curve.recalls.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(&curve.recalls);
    mrec.push(1.0);
    let mut mpre = Vec::with_capacity(mrec.len());
    mpre.push(0.0);
    mpre.extend_from_slice(&curve.precisions);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (0..mrec.len() - 1)
        .filter(|&i| mrec[i + 1] != mrec[i])
        .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
        .sum()
}

/// Tolerances used by [`evaluate`] for both targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub i_px: f64,
    pub b_deg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { i_px: 8.53, b_deg: 10.0 }
    }
}

impl EvalConfig {
    pub fn match_config(&self, target: MatchTarget) -> MatchConfig {
        MatchConfig {
            i_px: self.i_px,
            b_deg: self.b_deg,
            target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub ap_slot: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_point: f64,
    pub ap_slot: f64,
    pub per_scene: BTreeMap<String, SceneReport>,
    pub config: EvalConfig,
}

/// Per-image TP/FP flags for points and slots.
#[derive(Debug, Clone, Default)]
pub struct ImageFlags {
    pub points: Vec<(f64, bool)>,
    pub slots: Vec<(f64, bool)>,
    pub n_gt_points: usize,
    pub n_gt_slots: usize,
}

pub fn image_flags(gt_points: &[MarkingPoint], gt_slots: &[ParkingSlot], det: &Detections, cfg: &EvalConfig) -> ImageFlags {
    let pf = match_points(gt_points, &det.points, &cfg.match_config(MatchTarget::Points));
    let sf = match_slots(gt_slots, &det.slots, &cfg.match_config(MatchTarget::Slots));
    ImageFlags {
        points: det.points.iter().map(|p| p.confidence).zip(pf).collect(),
        slots: det.slots.iter().map(|s| s.confidence).zip(sf).collect(),
        n_gt_points: gt_points.len(),
        n_gt_slots: gt_slots.len(),
    }
}

fn pooled_ap<'a>(flags: impl Iterator<Item = &'a ImageFlags>, slots: bool) -> Result<f64> {
    let mut pooled = Vec::new();
    let mut n_gt = 0;
    for f in flags {
        if slots {
            pooled.extend_from_slice(&f.slots);
            n_gt += f.n_gt_slots;
        } else {
            pooled.extend_from_slice(&f.points);
            n_gt += f.n_gt_points;
        }
    }
    Ok(average_precision(&pr_curve(&pooled, n_gt)?))
}

/// Pools detections across the whole set and reports overall and per-scene AP.
pub fn evaluate(dataset: &[AnnotatedImage], detections: &[Detections], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.match_config(MatchTarget::Slots).validate()?;
    if dataset.len() != detections.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} detection sets",
            dataset.len(),
            detections.len()
        )));
    }
    let flags: Vec<ImageFlags> = dataset
        .par_iter()
        .zip(detections.par_iter())
        .map(|(img, det)| {
            let ann = img.annotation();
            image_flags(&ann.points, &ann.slots, det, cfg)
        })
        .collect();
    let mut per_scene = BTreeMap::new();
    for scene in Scene::ALL {
        let idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].scene == scene).collect();
        if idx.is_empty() {
            continue;
        }
        let ap_slot = pooled_ap(idx.iter().map(|&i| &flags[i]), true)?;
        per_scene.insert(
            scene.as_str().to_string(),
            SceneReport {
                ap_slot,
                n_images: idx.len(),
            },
        );
    }
    Ok(EvalReport {
        ap_point: pooled_ap(flags.iter(), false)?,
        ap_slot: pooled_ap(flags.iter(), true)?,
        per_scene,
        config: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Shape, SlotType};

    fn pt(x: f64, y: f64, t1: f64, t2: f64) -> MarkingPoint {
        MarkingPoint::new(x, y, t1, t2, Shape::T, SlotType::Perpendicular)
    }

    #[test]
    fn point_matching_fixtures() {
        let cfg = MatchConfig::for_512(MatchTarget::Points);
        assert_eq!(match_points(&[pt(100.0, 100.0, 359.0, 90.0)], &[pt(100.0, 100.0, 1.0, 90.0)], &cfg), vec![true]);
        let g = vec![pt(10.0, 10.0, 0.0, 90.0), pt(200.0, 50.0, 45.0, 135.0)];
        assert_eq!(match_points(&g, &g, &cfg), vec![true, true]);
        let mut l = g[0];
        l.shape = Shape::L;
        assert_eq!(match_points(&g[..1], &[l], &cfg), vec![false]);
        // a duplicate detection is a false positive
        assert_eq!(match_points(&g[..1], &[g[0], g[0]], &cfg), vec![true, false]);
        // nearest GT wins when both are admissible
        let gts = vec![pt(100.0, 100.0, 0.0, 90.0), pt(104.0, 100.0, 0.0, 90.0)];
        let d = pt(103.0, 100.0, 0.0, 90.0).with_confidence(0.9);
        let d2 = pt(97.0, 100.0, 0.0, 90.0).with_confidence(0.8);
        assert_eq!(match_points(&gts, &[d, d2], &cfg), vec![true, true]);
    }

    #[test]
    fn slot_matching_fixtures() {
        let cfg = MatchConfig {
            i_px: 10.0,
            b_deg: 10.0,
            target: MatchTarget::Slots,
        };
        let g = ParkingSlot::from_endpoints([100.0, 100.0], [300.0, 100.0], SlotType::Perpendicular, 1.0);
        let swapped = ParkingSlot {
            p1: g.p2,
            p2: g.p1,
            theta_s: 180.0,
            ..g
        };
        assert_eq!(match_slots(&[g], &[swapped], &cfg), vec![true]);
        let shifted = ParkingSlot::from_endpoints([110.0, 100.0], [300.0, 100.0], SlotType::Perpendicular, 1.0);
        assert_eq!(match_slots(&[g], &[shifted], &cfg), vec![false]);
        let close = ParkingSlot::from_endpoints([109.0, 100.0], [300.0, 100.0], SlotType::Perpendicular, 1.0);
        assert_eq!(match_slots(&[g], &[close], &cfg), vec![true]);
        // lexicographic order flips for a nearly vertical slot
        let v = ParkingSlot::from_endpoints([200.0, 100.0], [200.5, 300.0], SlotType::Perpendicular, 1.0);
        let vd = ParkingSlot::from_endpoints([200.5, 100.0], [200.0, 300.0], SlotType::Perpendicular, 1.0);
        assert!((v.theta_s - vd.theta_s).abs() > 170.0);
        assert_eq!(match_slots(&[v], &[vd], &cfg), vec![true]);
    }

    #[test]
    fn pr_and_ap_fixtures() {
        let c = pr_curve(&[(1.0, true)], 1).unwrap();
        assert_eq!((c.recalls.clone(), c.precisions.clone()), (vec![1.0], vec![1.0]));
        assert_eq!(average_precision(&c), 1.0);
        let c = pr_curve(&[(0.95, false), (0.90, true)], 1).unwrap();
        assert_eq!(c.precisions, vec![0.0, 0.5]);
        assert_eq!(c.recalls, vec![0.0, 1.0]);
        assert_eq!(average_precision(&c), 0.5);
        let c = pr_curve(&[], 5).unwrap();
        assert_eq!(average_precision(&c), 0.0);
        assert!(matches!(pr_curve(&[(0.5, false)], 0), Err(Error::ZeroGt)));
    }

    #[test]
    fn config_validation() {
        assert!(MatchConfig::for_512(MatchTarget::Points).validate().is_ok());
        let bad = MatchConfig {
            b_deg: 180.0,
            ..MatchConfig::for_512(MatchTarget::Points)
        };
        assert!(bad.validate().is_err());
    }
}
