//! Marking points, parking slots and the S×S×9 grid encoding that links
//! annotation space to the detector's output space.
//!
//! Grid cell layout (per cell, 9 reals):
//!
//! | index | channel   | range     |
//! |-------|-----------|-----------|
//! | 0     | C         | [0, 1]    |
//! | 1, 2  | x/y offset inside the cell, from the top-left corner | [0, 1) |
//! | 3, 4  | cos θ₁, sin θ₁ | [-1, 1] |
//! | 5, 6  | cos θ₂, sin θ₂ | [-1, 1] |
//! | 7     | shape code, 1 = T, 0 = L | [0, 1] |
//! | 8     | type code, 1 = slanted, 0 = perpendicular | [0, 1] |

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels per grid cell.
pub const CHANNELS: usize = 9;
/// Default grid resolution.
pub const GRID_SIZE: usize = 16;
/// Default image side length in pixels.
pub const IMAGE_SIZE: usize = 512;

pub const CH_CONF: usize = 0;
pub const CH_X: usize = 1;
pub const CH_Y: usize = 2;
pub const CH_COS1: usize = 3;
pub const CH_SIN1: usize = 4;
pub const CH_COS2: usize = 5;
pub const CH_SIN2: usize = 6;
pub const CH_SHAPE: usize = 7;
pub const CH_TYPE: usize = 8;

/// Wraps an angle in degrees into `[0, 360)`.
pub fn normalize_deg(angle: f64) -> f64 {
    let a = angle.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

/// Angular agreement test with 360° wraparound: `|a - b| < tol` or
/// `360 - |a - b| < tol`, evaluated on canonical angles.
pub fn angles_within(a: f64, b: f64, tol: f64) -> bool {
    let d = (normalize_deg(a) - normalize_deg(b)).abs();
    d < tol || 360.0 - d < tol
}

/// Smallest absolute difference between two angles, in `[0, 180]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (normalize_deg(a) - normalize_deg(b)).abs();
    d.min(360.0 - d)
}

/// Direction of the vector `(dx, dy)` in image coordinates, degrees in `[0, 360)`.
pub fn direction_deg(dx: f64, dy: f64) -> f64 {
    normalize_deg(dy.atan2(dx).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    #[serde(rename = "T")]
    T,
    #[serde(rename = "L")]
    L,
}

impl Shape {
    pub fn code(self) -> f64 {
        match self {
            Shape::T => 1.0,
            Shape::L => 0.0,
        }
    }

    pub fn from_code(code: f64) -> Self {
        if code >= 0.5 {
            Shape::T
        } else {
            Shape::L
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotType {
    Perpendicular,
    Slanted,
}

impl SlotType {
    pub fn code(self) -> f64 {
        match self {
            SlotType::Slanted => 1.0,
            SlotType::Perpendicular => 0.0,
        }
    }

    pub fn from_code(code: f64) -> Self {
        if code >= 0.5 {
            SlotType::Slanted
        } else {
            SlotType::Perpendicular
        }
    }
}

/// The eight scene tags of the dataset taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scene {
    IndoorLowLight,
    IndoorBrightLight,
    OutdoorDaylight,
    OutdoorRainy,
    OutdoorShadow,
    OutdoorNight,
    Slanted,
    Damaged,
}

impl Scene {
    pub const ALL: [Scene; 8] = [
        Scene::IndoorLowLight,
        Scene::IndoorBrightLight,
        Scene::OutdoorDaylight,
        Scene::OutdoorRainy,
        Scene::OutdoorShadow,
        Scene::OutdoorNight,
        Scene::Slanted,
        Scene::Damaged,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scene::IndoorLowLight => "indoor_low_light",
            Scene::IndoorBrightLight => "indoor_bright_light",
            Scene::OutdoorDaylight => "outdoor_daylight",
            Scene::OutdoorRainy => "outdoor_rainy",
            Scene::OutdoorShadow => "outdoor_shadow",
            Scene::OutdoorNight => "outdoor_night",
            Scene::Slanted => "slanted",
            Scene::Damaged => "damaged",
        }
    }

    pub fn parse(tag: &str) -> Option<Scene> {
        Scene::ALL.into_iter().find(|s| s.as_str() == tag)
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A directional slot corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkingPoint {
    pub x: f64,
    pub y: f64,
    /// Entrance-line edge direction, degrees in `[0, 360)`.
    pub theta1: f64,
    /// Separating-line edge direction, degrees in `[0, 360)`.
    pub theta2: f64,
    pub shape: Shape,
    #[serde(rename = "type")]
    pub ptype: SlotType,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

impl MarkingPoint {
    /// Ground-truth point (confidence 1) with canonicalised angles.
    pub fn new(x: f64, y: f64, theta1: f64, theta2: f64, shape: Shape, ptype: SlotType) -> Self {
        Self {
            x,
            y,
            theta1: normalize_deg(theta1),
            theta2: normalize_deg(theta2),
            shape,
            ptype,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn distance_to(&self, other: &MarkingPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn in_bounds(&self, size: usize) -> bool {
        let s = size as f64;
        self.x.is_finite() && self.y.is_finite() && self.x >= 0.0 && self.y >= 0.0 && self.x < s && self.y < s
    }
}

/// A parking slot described by its entrance line.
///
/// `p1` is always the lexicographically smaller endpoint (by x, then y) and
/// `theta_s` is the direction from `p1` to `p2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParkingSlot {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
    pub theta_s: f64,
    #[serde(rename = "type")]
    pub ptype: SlotType,
    #[serde(default = "one")]
    pub confidence: f64,
}

impl ParkingSlot {
    /// Builds a slot from two endpoints, ordering them canonically.
    pub fn from_endpoints(a: [f64; 2], b: [f64; 2], ptype: SlotType, confidence: f64) -> Self {
        let (p1, p2) = if (a[0], a[1]) <= (b[0], b[1]) { (a, b) } else { (b, a) };
        Self {
            p1,
            p2,
            theta_s: direction_deg(p2[0] - p1[0], p2[1] - p1[1]),
            ptype,
            confidence,
        }
    }

    pub fn between(a: &MarkingPoint, b: &MarkingPoint, ptype: SlotType, confidence: f64) -> Self {
        Self::from_endpoints([a.x, a.y], [b.x, b.y], ptype, confidence)
    }

    pub fn length(&self) -> f64 {
        (self.p2[0] - self.p1[0]).hypot(self.p2[1] - self.p1[1])
    }
}

/// The detector output (or an encoded target): `grid_size²` cells × 9 channels,
/// stored cell-major in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    pub grid_size: usize,
    pub image_size: usize,
    pub cells: Vec<f64>,
}

impl PredictionGrid {
    pub fn zeros(grid_size: usize, image_size: usize) -> Self {
        Self {
            grid_size,
            image_size,
            cells: vec![0.0; grid_size * grid_size * CHANNELS],
        }
    }

    pub fn from_cells(grid_size: usize, image_size: usize, cells: Vec<f64>) -> Result<Self> {
        let expected = grid_size * grid_size * CHANNELS;
        if cells.len() != expected {
            return Err(Error::Shape {
                expected: format!("{expected} values"),
                actual: format!("{} values", cells.len()),
            });
        }
        Ok(Self {
            grid_size,
            image_size,
            cells,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.cells[index * CHANNELS..(index + 1) * CHANNELS]
    }

    pub fn cell_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.cells[index * CHANNELS..(index + 1) * CHANNELS]
    }

    pub fn cell_px(&self) -> f64 {
        self.image_size as f64 / self.grid_size as f64
    }

    pub fn same_shape(&self, other: &PredictionGrid) -> bool {
        self.grid_size == other.grid_size && self.cells.len() == other.cells.len()
    }

    pub(crate) fn check_same_shape(&self, other: &PredictionGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "grid {}x{} vs {}x{}",
                self.grid_size, self.grid_size, other.grid_size, other.grid_size
            )))
        }
    }
}

/// Encodes ground-truth points into a target grid.
pub fn encode_ground_truth(
    points: &[MarkingPoint],
    grid_size: usize,
    image_size: usize,
) -> Result<PredictionGrid> {
    let mut grid = PredictionGrid::zeros(grid_size, image_size);
    let cell_px = grid.cell_px();
    for p in points {
        if !p.in_bounds(image_size) {
            return Err(Error::PointOutOfBounds {
                x: p.x,
                y: p.y,
                size: image_size,
            });
        }
        let fx = p.x / cell_px;
        let fy = p.y / cell_px;
        let col = (fx.floor() as usize).min(grid_size - 1);
        let row = (fy.floor() as usize).min(grid_size - 1);
        let cell = grid.cell_mut(row * grid_size + col);
        if cell[CH_CONF] != 0.0 {
            return Err(Error::TwoPointsOneCell { row, col });
        }
        let (s1, c1) = p.theta1.to_radians().sin_cos();
        let (s2, c2) = p.theta2.to_radians().sin_cos();
        cell.copy_from_slice(&[
            1.0,
            fx - col as f64,
            fy - row as f64,
            c1,
            s1,
            c2,
            s2,
            p.shape.code(),
            p.ptype.code(),
        ]);
    }
    Ok(grid)
}

fn decode_angle(cos: f64, sin: f64) -> f64 {
    let norm = cos.hypot(sin);
    if norm == 0.0 || !norm.is_finite() {
        return 0.0;
    }
    direction_deg(cos / norm, sin / norm)
}

/// Decodes every cell whose confidence reaches `conf_threshold` into a point,
/// in cell-index order.
pub fn decode_grid(grid: &PredictionGrid, conf_threshold: f64) -> Vec<MarkingPoint> {
    let s = grid.grid_size;
    let cell_px = grid.cell_px();
    let limit = (grid.image_size as f64).next_down();
    (0..grid.num_cells())
        .filter_map(|i| {
            let c = grid.cell(i);
            if c[CH_CONF] < conf_threshold {
                return None;
            }
            let (row, col) = (i / s, i % s);
            let x = ((col as f64 + c[CH_X]) * cell_px).clamp(0.0, limit);
            let y = ((row as f64 + c[CH_Y]) * cell_px).clamp(0.0, limit);
            Some(MarkingPoint {
                x,
                y,
                theta1: decode_angle(c[CH_COS1], c[CH_SIN1]),
                theta2: decode_angle(c[CH_COS2], c[CH_SIN2]),
                shape: Shape::from_code(c[CH_SHAPE]),
                ptype: SlotType::from_code(c[CH_TYPE]),
                confidence: c[CH_CONF].clamp(0.0, 1.0),
            })
        })
        .collect()
}

/// Ground-truth content of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotation {
    pub points: Vec<MarkingPoint>,
    pub slots: Vec<ParkingSlot>,
}

/// Tolerance for a slot endpoint to coincide with an annotated point.
pub const ENDPOINT_TOLERANCE: f64 = 1e-6;

impl Annotation {
    /// Index of the point coinciding with `pos`, if any.
    pub fn point_index(&self, pos: [f64; 2]) -> Option<usize> {
        self.points.iter().position(|p| {
            (p.x - pos[0]).abs() <= ENDPOINT_TOLERANCE && (p.y - pos[1]).abs() <= ENDPOINT_TOLERANCE
        })
    }

    pub fn validate(&self, file: &str, image_size: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !p.in_bounds(image_size) {
                return Err(Error::schema(
                    file,
                    format!("point {i} at ({}, {}) outside {image_size}x{image_size} image", p.x, p.y),
                ));
            }
        }
        for (i, s) in self.slots.iter().enumerate() {
            if self.point_index(s.p1).is_none() || self.point_index(s.p2).is_none() {
                return Err(Error::schema(file, format!("slot {i} endpoints do not coincide with points")));
            }
        }
        Ok(())
    }
}

/// One dataset image with its annotation, scene tag and labeled flag.
///
/// Ground truth of an unlabeled image stays in memory but is only reachable
/// through crate-internal accessors; [`AnnotatedImage::ground_truth`] refuses
/// it and counts the attempt.
#[derive(Debug)]
pub struct AnnotatedImage {
    pub name: String,
    pub image: Arc<GrayImage>,
    pub scene: Scene,
    labeled: bool,
    annotation: Annotation,
    unlabeled_reads: AtomicUsize,
}

impl Clone for AnnotatedImage {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            image: Arc::clone(&self.image),
            scene: self.scene,
            labeled: self.labeled,
            annotation: self.annotation.clone(),
            unlabeled_reads: AtomicUsize::new(self.unlabeled_reads.load(Ordering::Relaxed)),
        }
    }
}

impl AnnotatedImage {
    pub fn new(name: impl Into<String>, image: Arc<GrayImage>, scene: Scene, annotation: Annotation) -> Result<Self> {
        let name = name.into();
        if image.width() != image.height() {
            return Err(Error::schema(
                &name,
                format!("image must be square, got {}x{}", image.width(), image.height()),
            ));
        }
        annotation.validate(&name, image.width() as usize)?;
        Ok(Self {
            name,
            image,
            scene,
            labeled: true,
            annotation,
            unlabeled_reads: AtomicUsize::new(0),
        })
    }

    pub fn image_size(&self) -> usize {
        self.image.width() as usize
    }

    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    pub fn set_labeled(&mut self, labeled: bool) {
        self.labeled = labeled;
    }

    /// Ground truth for labeled images. For unlabeled images returns `None`
    /// and increments the tripwire counter.
    pub fn ground_truth(&self) -> Option<&Annotation> {
        if self.labeled {
            Some(&self.annotation)
        } else {
            self.unlabeled_reads.fetch_add(1, Ordering::Relaxed);
            None
        }
    }

    /// How often ground truth was requested while the image was unlabeled.
    pub fn unlabeled_reads(&self) -> usize {
        self.unlabeled_reads.load(Ordering::Relaxed)
    }

    /// Annotation access for dataset bookkeeping (statistics, serialization,
    /// held-out evaluation); never used on the training path.
    pub(crate) fn annotation(&self) -> &Annotation {
        &self.annotation
    }
}
