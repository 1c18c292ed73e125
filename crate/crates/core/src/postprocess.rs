//! Grid to parking slots: confidence filtering, duplicate suppression and
//! template matching of point pairs into entrance lines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{decode_grid, direction_deg, normalize_deg, MarkingPoint, ParkingSlot, PredictionGrid, SlotType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub conf_threshold: f64,
    /// Pixels.
    pub suppress_radius: f64,
    pub perp_length_range: [f64; 2],
    pub slant_length_range: [f64; 2],
    /// Degrees.
    pub direction_tolerance: f64,
    pub midline_clearance: bool,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.5,
            suppress_radius: 16.0,
            perp_length_range: [120.0, 300.0],
            slant_length_range: [120.0, 300.0],
            direction_tolerance: 10.0,
            midline_clearance: true,
        }
    }
}

impl TemplateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("perp_length_range", self.perp_length_range), ("slant_length_range", self.slant_length_range)] {
            if !(r[0] >= 0.0 && r[0] < r[1]) {
                return Err(Error::Config(format!("{name} [{}, {}] is degenerate", r[0], r[1])));
            }
        }
        if !(self.direction_tolerance > 0.0) {
            return Err(Error::Config("direction_tolerance must be positive".into()));
        }
        if !(self.suppress_radius >= 0.0) || !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Config("suppress_radius must be >= 0 and conf_threshold in [0, 1]".into()));
        }
        Ok(())
    }

    fn length_range(&self, ptype: SlotType) -> [f64; 2] {
        match ptype {
            SlotType::Perpendicular => self.perp_length_range,
            SlotType::Slanted => self.slant_length_range,
        }
    }
}

/// Per-image detector output after post-processing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Detections {
    pub points: Vec<MarkingPoint>,
    pub slots: Vec<ParkingSlot>,
}

/// Greedy non-maximum suppression over points in descending confidence;
/// equal confidences keep their input order.
pub fn suppress(points: Vec<MarkingPoint>, radius: f64) -> Vec<MarkingPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].confidence.total_cmp(&points[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<MarkingPoint> = Vec::new();
    for i in order {
        let p = points[i];
        if kept.iter().all(|k| k.distance_to(&p) >= radius) {
            kept.push(p);
        }
    }
    kept
}

/// Decodes the grid and suppresses near-duplicates.
pub fn extract_marking_points(grid: &PredictionGrid, cfg: &TemplateConfig) -> Vec<MarkingPoint> {
    suppress(decode_grid(grid, cfg.conf_threshold), cfg.suppress_radius)
}

/// Smallest angle between two undirected lines, in `[0, 90]`.
fn line_angle(a: f64, b: f64) -> f64 {
    let d = (normalize_deg(a) - normalize_deg(b)).abs() % 180.0;
    d.min(180.0 - d)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Signed side of direction `theta` relative to the line direction `(dx, dy)`.
fn side(dx: f64, dy: f64, theta: f64) -> f64 {
    let (s, c) = theta.to_radians().sin_cos();
    dx * s - dy * c
}

fn pair_matches(a: &MarkingPoint, b: &MarkingPoint, cfg: &TemplateConfig) -> bool {
    if a.ptype != b.ptype {
        return false;
    }
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = dx.hypot(dy);
    let [lo, hi] = cfg.length_range(a.ptype);
    if len < lo || len > hi {
        return false;
    }
    let entrance = direction_deg(dx, dy);
    if line_angle(a.theta1, entrance) >= cfg.direction_tolerance || line_angle(b.theta1, entrance) >= cfg.direction_tolerance {
        return false;
    }
    // both separating lines must leave the entrance line on the same side
    let (sa, sb) = (side(dx, dy, a.theta2), side(dx, dy, b.theta2));
    sa * sb > 0.0
}

/// Template matching over all unordered point pairs.
///
/// The result is sorted (by `p1`, then `p2`) so it does not depend on the
/// input order.
pub fn pair_slots(points: &[MarkingPoint], cfg: &TemplateConfig) -> Vec<ParkingSlot> {
    let mut slots = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (a, b) = (&points[i], &points[j]);
            if !pair_matches(a, b, cfg) {
                continue;
            }
            if cfg.midline_clearance {
                let blocked = points.iter().enumerate().any(|(k, p)| {
                    k != i && k != j && segment_distance([p.x, p.y], [a.x, a.y], [b.x, b.y]) < cfg.suppress_radius
                });
                if blocked {
                    continue;
                }
            }
            slots.push(ParkingSlot::between(a, b, a.ptype, a.confidence.min(b.confidence)));
        }
    }
    slots.sort_by(|s, t| {
        (s.p1[0], s.p1[1], s.p2[0], s.p2[1])
            .partial_cmp(&(t.p1[0], t.p1[1], t.p2[0], t.p2[1]))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    slots
}

/// Full post-processing of one predicted grid.
pub fn detect(grid: &PredictionGrid, cfg: &TemplateConfig) -> Detections {
    let points = extract_marking_points(grid, cfg);
    let slots = pair_slots(&points, cfg);
    Detections { points, slots }
}
