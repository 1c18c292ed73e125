//! Synthetic bird's-eye parking scenes with exact ground truth.
//!
//! A scene holds one or two rows of adjacent slots. Two-row scenes face each
//! other across an aisle. Each row has an entrance line running along the row
//! direction `u` and separating lines leaving every entrance corner towards
//! the slot interior. Interior corners are T junctions, row ends are L
//! junctions. θ₁ is the row direction, θ₂ the separating-line direction.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    direction_deg, AnnotatedImage, Annotation, MarkingPoint, ParkingSlot, Scene, Shape, SlotType,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: usize,
    /// Grid used to guarantee at most one marking point per cell.
    pub grid_size: usize,
    /// Exact number of annotated slots per image.
    pub slots_per_image: usize,
    /// Spacing of adjacent corners along the entrance line, pixels.
    pub slot_width_range: [f64; 2],
    pub slot_depth_range: [f64; 2],
    pub aisle_width_range: [f64; 2],
    /// Minimum distance of any marking point from the image border.
    pub margin: f64,
    /// Probability that an image contains slanted rows (tagged `slanted`).
    pub slanted_fraction: f64,
    /// Off-perpendicular angle of slanted separating lines, degrees.
    pub slant_angle_range: [f64; 2],
    /// Row orientation is a multiple of 90° plus uniform jitter of this size.
    pub orientation_jitter: f64,
    pub line_thickness: f64,
    /// Per-pixel Gaussian noise on the [0, 1] intensity scale.
    pub noise_std: f64,
    pub brightness_range: [f64; 2],
    pub occlusion_prob: f64,
    /// Relative weights of the appearance scenes. The `slanted` tag is driven
    /// by `slanted_fraction` and must not appear here.
    pub scene_mix: BTreeMap<Scene, f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // scene weights follow the test-set composition of the real dataset
        let scene_mix = BTreeMap::from([
            (Scene::IndoorLowLight, 545.0),
            (Scene::IndoorBrightLight, 786.0),
            (Scene::OutdoorDaylight, 1703.0),
            (Scene::OutdoorRainy, 323.0),
            (Scene::OutdoorShadow, 1389.0),
            (Scene::OutdoorNight, 86.0),
            (Scene::Damaged, 302.0),
        ]);
        Self {
            n_images: 100,
            image_size: 512,
            grid_size: 16,
            slots_per_image: 4,
            slot_width_range: [120.0, 300.0],
            slot_depth_range: [150.0, 250.0],
            aisle_width_range: [140.0, 220.0],
            margin: 24.0,
            slanted_fraction: 0.12,
            slant_angle_range: [30.0, 60.0],
            orientation_jitter: 15.0,
            line_thickness: 8.0,
            noise_std: 0.04,
            brightness_range: [0.8, 1.2],
            occlusion_prob: 0.15,
            scene_mix,
        }
    }
}

impl SynthConfig {
    /// Noise-free, occlusion-free variant of `self`.
    pub fn clean(mut self) -> Self {
        self.noise_std = 0.0;
        self.occlusion_prob = 0.0;
        self.brightness_range = [1.0, 1.0];
        self
    }

    fn span(&self) -> f64 {
        self.image_size as f64 - 2.0 * self.margin
    }

    fn max_slots_per_row(&self) -> usize {
        (self.span() / self.slot_width_range[0]).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        for (name, r) in [
            ("slot_width_range", self.slot_width_range),
            ("slot_depth_range", self.slot_depth_range),
            ("aisle_width_range", self.aisle_width_range),
            ("slant_angle_range", self.slant_angle_range),
            ("brightness_range", self.brightness_range),
        ] {
            if !ordered(r) || r[0] < 0.0 {
                return bad(format!("{name} must be an ordered non-negative range, got {r:?}"));
            }
        }
        for (name, v) in [("slanted_fraction", self.slanted_fraction), ("occlusion_prob", self.occlusion_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.image_size == 0 || self.grid_size == 0 || self.image_size % self.grid_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of grid_size {}",
                self.image_size, self.grid_size
            ));
        }
        if self.slot_width_range[0] <= 0.0 || self.line_thickness <= 0.0 || self.noise_std < 0.0 {
            return bad("slot widths and line thickness must be positive, noise non-negative".into());
        }
        let max_row = self.max_slots_per_row();
        if self.slots_per_image > 2 * max_row {
            return bad(format!(
                "{} slots per image do not fit: at most {max_row} per row at minimum width",
                self.slots_per_image
            ));
        }
        if self.slant_angle_range[1] >= 90.0 {
            return bad("slant angles must stay below 90 degrees".into());
        }
        if self.scene_mix.get(&Scene::Slanted).is_some_and(|w| *w != 0.0) {
            return bad("scene_mix must not weight `slanted`; use slanted_fraction".into());
        }
        if self.slanted_fraction < 1.0 && self.scene_mix.values().all(|w| *w <= 0.0) {
            return bad("scene_mix needs at least one positive weight".into());
        }
        if self.scene_mix.values().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("scene_mix weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// One row of adjacent slots.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLayout {
    /// First entrance corner.
    pub origin: [f64; 2],
    /// Row direction (θ₁), degrees.
    pub direction: f64,
    pub width: f64,
    pub count: usize,
    /// Signed off-perpendicular angle of the separating lines; 0 = perpendicular.
    pub slant: f64,
    pub depth: f64,
}

impl RowLayout {
    fn unit(&self) -> [f64; 2] {
        let (s, c) = self.direction.to_radians().sin_cos();
        [c, s]
    }

    /// Separating-line direction: rotate the row normal by the slant angle.
    fn separator(&self) -> [f64; 2] {
        let u = self.unit();
        let n = [-u[1], u[0]];
        let (s, c) = self.slant.to_radians().sin_cos();
        [c * n[0] + s * u[0], c * n[1] + s * u[1]]
    }

    pub fn ptype(&self) -> SlotType {
        if self.slant == 0.0 {
            SlotType::Perpendicular
        } else {
            SlotType::Slanted
        }
    }

    pub fn corners(&self) -> Vec<[f64; 2]> {
        let u = self.unit();
        (0..=self.count)
            .map(|j| {
                let t = j as f64 * self.width;
                [self.origin[0] + t * u[0], self.origin[1] + t * u[1]]
            })
            .collect()
    }

    fn points(&self) -> Vec<MarkingPoint> {
        let sep = self.separator();
        let theta2 = direction_deg(sep[0], sep[1]);
        let corners = self.corners();
        let last = corners.len() - 1;
        corners
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let shape = if j == 0 || j == last { Shape::L } else { Shape::T };
                MarkingPoint::new(c[0], c[1], self.direction, theta2, shape, self.ptype())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub image_size: usize,
    pub rows: Vec<RowLayout>,
}

impl SceneLayout {
    /// Ground truth: every corner is a point, every adjacent corner pair a slot.
    pub fn annotation(&self) -> Annotation {
        let mut ann = Annotation::default();
        for row in &self.rows {
            let pts = row.points();
            for pair in pts.windows(2) {
                ann.slots.push(ParkingSlot::between(&pair[0], &pair[1], row.ptype(), 1.0));
            }
            ann.points.extend(pts);
        }
        ann
    }

    /// Samples a layout with exactly `config.slots_per_image` slots.
    pub fn sample(config: &SynthConfig, slanted: bool, rng: &mut impl Rng) -> Result<SceneLayout> {
        for _ in 0..10_000 {
            if let Some(layout) = try_sample(config, slanted, rng) {
                return Ok(layout);
            }
        }
        Err(Error::Config("could not place the requested slots inside the image".into()))
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn try_sample(config: &SynthConfig, slanted: bool, rng: &mut impl Rng) -> Option<SceneLayout> {
    let total = config.slots_per_image;
    let size = config.image_size as f64;
    let max_row = config.max_slots_per_row();
    if total == 0 {
        return Some(SceneLayout {
            image_size: config.image_size,
            rows: Vec::new(),
        });
    }
    let one_row = total <= max_row && (total == 1 || rng.random_bool(0.3));
    let counts: Vec<usize> = if one_row {
        vec![total]
    } else {
        let lo = total.saturating_sub(max_row).max(1);
        let hi = max_row.min(total - 1);
        let k = rng.random_range(lo..=hi);
        vec![k, total - k]
    };

    let quadrant = rng.random_range(0..4) as f64 * 90.0;
    let jitter = config.orientation_jitter;
    let direction = quadrant + if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
    let (s, c) = direction.to_radians().sin_cos();
    let u = [c, s];
    let n = [-s, c];

    let center = [
        size / 2.0 + rng.random_range(-0.15..=0.15) * size,
        size / 2.0 + rng.random_range(-0.15..=0.15) * size,
    ];
    let half_aisle = if counts.len() == 2 {
        uniform(rng, config.aisle_width_range) / 2.0
    } else {
        0.0
    };

    let mut rows = Vec::new();
    for (r, &count) in counts.iter().enumerate() {
        let max_w = config.slot_width_range[1].min(config.span() / count as f64);
        if max_w < config.slot_width_range[0] {
            return None;
        }
        let width = uniform(rng, [config.slot_width_range[0], max_w]);
        // row 0 sits on the +n side of the aisle, row 1 on the -n side facing it
        let (dir, sign) = if r == 0 { (direction, 1.0) } else { (direction + 180.0, -1.0) };
        let ru = [sign * u[0], sign * u[1]];
        let line = [center[0] + sign * half_aisle * n[0], center[1] + sign * half_aisle * n[1]];
        let length = width * count as f64;
        let start = rng.random_range(-length..=0.0);
        let origin = [line[0] + start * ru[0], line[1] + start * ru[1]];
        let slant = if slanted {
            let a = uniform(rng, config.slant_angle_range);
            if rng.random_bool(0.5) {
                a
            } else {
                -a
            }
        } else {
            0.0
        };
        rows.push(RowLayout {
            origin,
            direction: crate::types::normalize_deg(dir),
            width,
            count,
            slant,
            depth: uniform(rng, config.slot_depth_range),
        });
    }

    let layout = SceneLayout {
        image_size: config.image_size,
        rows,
    };
    let cell = size / config.grid_size as f64;
    let mut cells = HashSet::new();
    for p in layout.annotation().points {
        let inside = p.x >= config.margin && p.y >= config.margin && p.x < size - config.margin && p.y < size - config.margin;
        if !inside || !cells.insert(((p.x / cell) as usize, (p.y / cell) as usize)) {
            return None;
        }
    }
    Some(layout)
}

/// Appearance parameters for one rendered image.
#[derive(Debug, Clone, Copy)]
struct Appearance {
    background: f64,
    paint: f64,
    noise_scale: f64,
}

fn appearance(scene: Scene) -> Appearance {
    let (background, paint, noise_scale) = match scene {
        Scene::IndoorLowLight => (0.20, 0.50, 1.2),
        Scene::IndoorBrightLight => (0.50, 0.92, 1.0),
        Scene::OutdoorDaylight | Scene::Slanted | Scene::Damaged => (0.42, 0.88, 1.0),
        Scene::OutdoorRainy => (0.32, 0.68, 1.6),
        Scene::OutdoorShadow => (0.45, 0.90, 1.0),
        Scene::OutdoorNight => (0.10, 0.38, 1.5),
    };
    Appearance {
        background,
        paint,
        noise_scale,
    }
}

/// Paints an oriented rectangle of the given thickness along segment `a`–`b`.
fn paint_segment(buf: &mut [f32], size: usize, a: [f64; 2], b: [f64; 2], thickness: f64, value: f32, skip: &[(f64, f64)]) {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = d[0].hypot(d[1]);
    if len == 0.0 {
        return;
    }
    let u = [d[0] / len, d[1] / len];
    let half = thickness / 2.0;
    let lo_x = (a[0].min(b[0]) - half).floor().max(0.0) as usize;
    let hi_x = ((a[0].max(b[0]) + half).ceil().max(0.0) as usize).min(size);
    let lo_y = (a[1].min(b[1]) - half).floor().max(0.0) as usize;
    let hi_y = ((a[1].max(b[1]) + half).ceil().max(0.0) as usize).min(size);
    for py in lo_y..hi_y {
        for px in lo_x..hi_x {
            let c = [px as f64 + 0.5 - a[0], py as f64 + 0.5 - a[1]];
            let along = c[0] * u[0] + c[1] * u[1];
            let perp = (c[0] * u[1] - c[1] * u[0]).abs();
            if along >= 0.0 && along <= len && perp <= half && !skip.iter().any(|(s, e)| along >= *s && along <= *e) {
                buf[py * size + px] = value;
            }
        }
    }
}

/// Renders a layout. With `noise_std = 0`, `occlusion_prob = 0` and a
/// non-damaged scene the output is a clean line drawing.
pub fn render_scene(layout: &SceneLayout, scene: Scene, config: &SynthConfig, rng: &mut impl Rng) -> GrayImage {
    let size = layout.image_size;
    let look = appearance(scene);
    let brightness = uniform(rng, config.brightness_range);

    // background with a mild linear illumination gradient
    let gx = rng.random_range(-0.08..=0.08);
    let gy = rng.random_range(-0.08..=0.08);
    let mut buf = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 / size as f64 - 0.5;
            let fy = y as f64 / size as f64 - 0.5;
            buf[y * size + x] = (look.background + gx * fx + gy * fy) as f32;
        }
    }

    let t = config.line_thickness;
    let damaged = scene == Scene::Damaged;
    for row in &layout.rows {
        let u = row.unit();
        let sep = row.separator();
        let corners = row.corners();
        let mut segments = Vec::with_capacity(corners.len() + 1);
        let first = corners[0];
        let last = corners[corners.len() - 1];
        segments.push((
            [first[0] - t / 2.0 * u[0], first[1] - t / 2.0 * u[1]],
            [last[0] + t / 2.0 * u[0], last[1] + t / 2.0 * u[1]],
        ));
        for c in &corners {
            segments.push((
                [c[0] - t / 2.0 * sep[0], c[1] - t / 2.0 * sep[1]],
                [c[0] + row.depth * sep[0], c[1] + row.depth * sep[1]],
            ));
        }
        for (k, (a, b)) in segments.into_iter().enumerate() {
            let mut value = look.paint;
            let mut gaps = Vec::new();
            if damaged {
                value *= rng.random_range(0.55..=1.0);
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                for _ in 0..rng.random_range(0..3) {
                    let gap = rng.random_range(8.0..=24.0);
                    // keep 25 px around every corner intact
                    let candidates: Vec<f64> = if k == 0 {
                        (0..row.count)
                            .map(|j| t / 2.0 + (j as f64 + 0.5) * row.width - gap / 2.0)
                            .collect()
                    } else if len > 60.0 + gap {
                        vec![rng.random_range(30.0 + t..=len - gap - 10.0)]
                    } else {
                        Vec::new()
                    };
                    if let Some(start) = candidates.get(rng.random_range(0..candidates.len().max(1))) {
                        gaps.push((*start, start + gap));
                    }
                }
            }
            paint_segment(&mut buf, size, a, b, t, value as f32, &gaps);
        }
    }

    if scene == Scene::OutdoorShadow {
        // darken a random half-plane
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (s, c) = angle.sin_cos();
        let offset = rng.random_range(-0.3..=0.3) * size as f64;
        let mid = size as f64 / 2.0;
        for y in 0..size {
            for x in 0..size {
                if (x as f64 - mid) * c + (y as f64 - mid) * s > offset {
                    buf[y * size + x] *= 0.55;
                }
            }
        }
    }

    if config.occlusion_prob > 0.0 && rng.random_bool(config.occlusion_prob) {
        for _ in 0..rng.random_range(1..=2) {
            let cx = rng.random_range(0.0..size as f64);
            let cy = rng.random_range(0.0..size as f64);
            let len = rng.random_range(80.0..=170.0);
            let (s, c) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
            let a = [cx - len / 2.0 * c, cy - len / 2.0 * s];
            let b = [cx + len / 2.0 * c, cy + len / 2.0 * s];
            let shade = rng.random_range(0.05..=0.3) as f32;
            paint_segment(&mut buf, size, a, b, rng.random_range(50.0..=80.0), shade, &[]);
        }
    }

    let sigma = config.noise_std * look.noise_scale;
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    let mut out = GrayImage::new(size as u32, size as u32);
    for (dst, v) in out.as_mut().iter_mut().zip(&buf) {
        let mut value = *v as f64 * brightness;
        if let Some(n) = &noise {
            value += n.sample(rng);
        }
        *dst = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out
}

fn sample_scene(config: &SynthConfig, rng: &mut impl Rng) -> Scene {
    let total: f64 = config.scene_mix.values().sum();
    let mut pick = rng.random_range(0.0..total);
    for (scene, w) in &config.scene_mix {
        if pick < *w {
            return *scene;
        }
        pick -= w;
    }
    *config.scene_mix.keys().next_back().unwrap_or(&Scene::OutdoorDaylight)
}

/// Generates one image; `index` selects an independent RNG stream so images
/// can be produced in any order.
pub fn generate_one(config: &SynthConfig, seed: u64, index: usize) -> Result<AnnotatedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let slanted = config.slanted_fraction > 0.0 && rng.random_bool(config.slanted_fraction);
    let scene = if slanted { Scene::Slanted } else { sample_scene(config, &mut rng) };
    let layout = SceneLayout::sample(config, slanted, &mut rng)?;
    let image = render_scene(&layout, scene, config, &mut rng);
    AnnotatedImage::new(format!("{index:06}"), Arc::new(image), scene, layout.annotation())
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<AnnotatedImage>> {
    config.validate()?;
    (0..config.n_images)
        .into_par_iter()
        .map(|i| generate_one(config, seed, i))
        .collect()
}
