//! Per-image JSON sidecar annotations next to PNG images.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotatedImage, Annotation, MarkingPoint, ParkingSlot, Scene, Shape, SlotType};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRecord {
    pub x: f64,
    pub y: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub shape: Shape,
    #[serde(rename = "type")]
    pub ptype: SlotType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotRecord {
    pub p1: usize,
    pub p2: usize,
    pub theta_s: f64,
    #[serde(rename = "type")]
    pub ptype: SlotType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// On-disk annotation record, one JSON file per image.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub scene: String,
    pub points: Vec<PointRecord>,
    pub slots: Vec<SlotRecord>,
}

impl AnnotationRecord {
    /// Builds a record; confidences are written only when `with_confidence`.
    pub fn from_annotation(image: &str, scene: Scene, ann: &Annotation, with_confidence: bool) -> Self {
        let conf = |c: f64| with_confidence.then_some(c);
        let points = ann
            .points
            .iter()
            .map(|p| PointRecord {
                x: p.x,
                y: p.y,
                theta1: p.theta1,
                theta2: p.theta2,
                shape: p.shape,
                ptype: p.ptype,
                confidence: conf(p.confidence),
            })
            .collect();
        let slots = ann
            .slots
            .iter()
            .map(|s| SlotRecord {
                // endpoints always resolve for a validated annotation
                p1: ann.point_index(s.p1).unwrap_or(usize::MAX),
                p2: ann.point_index(s.p2).unwrap_or(usize::MAX),
                theta_s: s.theta_s,
                ptype: s.ptype,
                confidence: conf(s.confidence),
            })
            .collect();
        Self {
            image: image.to_string(),
            scene: scene.as_str().to_string(),
            points,
            slots,
        }
    }

    /// Converts to an in-memory annotation, checking ranges against `image_size`.
    pub fn to_annotation(&self, file: &str, image_size: usize) -> Result<(Scene, Annotation)> {
        let scene = Scene::parse(&self.scene)
            .ok_or_else(|| Error::schema(file, format!("unknown scene tag {:?}", self.scene)))?;
        let size = image_size as f64;
        let mut points = Vec::with_capacity(self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            let finite = [p.x, p.y, p.theta1, p.theta2].iter().all(|v| v.is_finite());
            if !finite || p.x < 0.0 || p.y < 0.0 || p.x >= size || p.y >= size {
                return Err(Error::schema(
                    file,
                    format!("point {i} at ({}, {}) outside {image_size}x{image_size} image", p.x, p.y),
                ));
            }
            let confidence = p.confidence.unwrap_or(1.0);
            if !(0.0..=1.0).contains(&confidence) {
                return Err(Error::schema(file, format!("point {i} confidence {confidence} outside [0, 1]")));
            }
            points.push(
                MarkingPoint::new(p.x, p.y, p.theta1, p.theta2, p.shape, p.ptype).with_confidence(confidence),
            );
        }
        let mut slots = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            for index in [s.p1, s.p2] {
                if index >= points.len() {
                    return Err(Error::DanglingSlotRef {
                        file: file.to_string(),
                        index,
                    });
                }
            }
            if s.p1 == s.p2 {
                return Err(Error::schema(file, "slot endpoints must differ"));
            }
            let (a, b) = (&points[s.p1], &points[s.p2]);
            slots.push(ParkingSlot {
                p1: [a.x, a.y],
                p2: [b.x, b.y],
                theta_s: crate::types::normalize_deg(s.theta_s),
                ptype: s.ptype,
                confidence: s.confidence.unwrap_or(1.0),
            });
        }
        Ok((scene, Annotation { points, slots }))
    }
}

fn read_record(path: &Path) -> Result<AnnotationRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))
}

/// JSON files in a dataset directory that are not annotations.
pub const RESERVED_FILES: &[&str] = &["resolved_config.json"];

/// Sorted list of `*.json` annotation files in `dir`.
pub fn annotation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .filter(|p| !p.file_name().is_some_and(|n| RESERVED_FILES.iter().any(|r| n == *r)))
        .collect();
    files.sort();
    Ok(files)
}

fn load_one(path: &Path) -> Result<AnnotatedImage> {
    let file = path.display().to_string();
    let record = read_record(path)?;
    let image_path = path.parent().unwrap_or(Path::new(".")).join(&record.image);
    let image = image::open(&image_path)
        .map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?
        .into_luma8();
    if image.width() != image.height() {
        return Err(Error::schema(&file, format!("image {} is not square", record.image)));
    }
    let (scene, annotation) = record.to_annotation(&file, image.width() as usize)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    AnnotatedImage::new(name, Arc::new(image), scene, annotation)
}

/// Loads every annotated image in `dir`, ordered by annotation file name.
pub fn load_annotations(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    let files = annotation_files(dir)?;
    files.par_iter().map(|p| load_one(p)).collect()
}

/// Writes `<name>.png` and `<name>.json` for every image.
pub fn save_annotations(dir: &Path, images: &[AnnotatedImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images.par_iter().try_for_each(|item| {
        let png = format!("{}.png", item.name);
        let png_path = dir.join(&png);
        item.image.save(&png_path).map_err(|source| Error::Image {
            path: png_path.clone(),
            source,
        })?;
        let record = AnnotationRecord::from_annotation(&png, item.scene, item.annotation(), false);
        write_json(&dir.join(format!("{}.json", item.name)), &record)
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
