#![allow(dead_code)]

use rand::Rng;
use sspsd_core::dataset::SynthConfig;
use sspsd_core::model::{ModelConfig, Network, Tensor};
use sspsd_core::postprocess::TemplateConfig;
use sspsd_core::trainer::TrainConfig;
use sspsd_core::types::{MarkingPoint, PredictionGrid, Shape, SlotType, CHANNELS};

/// 32 px input, 4x4 grid.
pub fn toy_net() -> Network {
    Network::new(ModelConfig {
        image_size: 32,
        grid_size: 4,
        encoder_channels: vec![4, 6],
        latent_channels: 5,
        decoder_channels: vec![6],
        ..ModelConfig::default()
    })
    .unwrap()
}

/// 128 px scenes on an 8x8 grid, small enough for end-to-end training tests.
pub fn small_synth(n_images: usize) -> SynthConfig {
    SynthConfig {
        n_images,
        image_size: 128,
        grid_size: 8,
        slots_per_image: 2,
        slot_width_range: [36.0, 50.0],
        slot_depth_range: [30.0, 40.0],
        aisle_width_range: [24.0, 32.0],
        margin: 8.0,
        line_thickness: 3.0,
        ..SynthConfig::default()
    }
}

pub fn small_train_config() -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        batch_size: 8,
        labeled_ratio_n: 4,
        epochs: 2,
        ema_alpha_max: 0.99,
        val_fraction: 0.2,
        model: ModelConfig {
            image_size: 128,
            grid_size: 8,
            encoder_channels: vec![4, 8],
            latent_channels: 8,
            decoder_channels: vec![8],
            ..ModelConfig::default()
        },
        template: TemplateConfig {
            suppress_radius: 8.0,
            perp_length_range: [30.0, 56.0],
            slant_length_range: [30.0, 56.0],
            ..TemplateConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn random_tensor(c: usize, n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(c, n, h, w);
    t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    t
}

/// A grid with values inside the head's activation ranges.
pub fn random_grid(grid_size: usize, image_size: usize, rng: &mut impl Rng) -> PredictionGrid {
    let mut g = PredictionGrid::zeros(grid_size, image_size);
    for cell in g.cells.chunks_mut(CHANNELS) {
        for (ch, v) in cell.iter_mut().enumerate() {
            *v = if (3..=6).contains(&ch) { rng.random_range(-1.0..1.0) } else { rng.random_range(0.0..1.0) };
        }
    }
    g
}

/// Random points, at most one per cell.
pub fn random_points(grid_size: usize, image_size: usize, count: usize, rng: &mut impl Rng) -> Vec<MarkingPoint> {
    let cell = image_size as f64 / grid_size as f64;
    let mut cells: Vec<usize> = (0..grid_size * grid_size).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count.min(cells.len()) {
        let c = cells.swap_remove(rng.random_range(0..cells.len()));
        let (row, col) = (c / grid_size, c % grid_size);
        let shape = if rng.random_bool(0.5) { Shape::T } else { Shape::L };
        let ptype = if rng.random_bool(0.5) { SlotType::Perpendicular } else { SlotType::Slanted };
        out.push(MarkingPoint::new(
            (col as f64 + rng.random_range(0.0..1.0)) * cell,
            (row as f64 + rng.random_range(0.0..1.0)) * cell,
            rng.random_range(0.0..360.0),
            rng.random_range(0.0..360.0),
            shape,
            ptype,
        ));
    }
    out
}
