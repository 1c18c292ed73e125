//! Encoder-decoder marking-point detector and teacher EMA maintenance.
//!
//! Architecture (defaults in brackets):
//!
//! * fixed area pooling of the normalised grey image down to
//!   `grid_size · 2^len(encoder_channels)` pixels [512 → 64];
//! * one stride-2 3×3 conv block per entry of `encoder_channels` [64 → 32 → 16];
//! * a stride-1 3×3 conv producing the latent feature, `S × S × latent_channels`;
//! * decoder: stride-1 3×3 conv blocks per `decoder_channels`, then a 1×1 head
//!   to 9 channels with sigmoid on (C, x, y, s, t) and tanh on the angle pairs.
//!
//! All hidden convolutions use a leaky ReLU.

pub mod checkpoint;
pub mod conv;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use image::GrayImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{PredictionGrid, CHANNELS, CH_CONF, CH_COS1, CH_COS2, CH_SIN1, CH_SIN2};
pub use conv::{ConvSpec, Tensor};

/// A batch of latent features, `[C_lat][N][S][S]`.
pub type LatentFeature = Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub grid_size: usize,
    pub encoder_channels: Vec<usize>,
    pub latent_channels: usize,
    pub decoder_channels: Vec<usize>,
    pub leaky_slope: f64,
    /// Initial bias of the confidence logit.
    pub conf_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            grid_size: 16,
            encoder_channels: vec![16, 32],
            latent_channels: 32,
            decoder_channels: vec![32, 32],
            leaky_slope: 0.1,
            conf_bias_init: -2.0,
        }
    }
}

impl ModelConfig {
    /// Side length of the pooled network input.
    pub fn input_size(&self) -> usize {
        self.grid_size << self.encoder_channels.len()
    }

    pub fn pool_factor(&self) -> usize {
        self.image_size / self.input_size()
    }

    pub fn validate(&self) -> Result<()> {
        let input = self.input_size();
        if self.grid_size == 0 || input == 0 || self.image_size % input != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of grid_size·2^{} = {input}",
                self.image_size,
                self.encoder_channels.len()
            )));
        }
        if self.latent_channels == 0 || self.encoder_channels.iter().chain(&self.decoder_channels).any(|c| *c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config("leaky_slope must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn encoder_specs(&self) -> Vec<ConvSpec> {
        let mut specs = Vec::new();
        let mut cin = 1;
        for &c in &self.encoder_channels {
            specs.push(ConvSpec {
                cin,
                cout: c,
                kernel: 3,
                stride: 2,
            });
            cin = c;
        }
        specs.push(ConvSpec {
            cin,
            cout: self.latent_channels,
            kernel: 3,
            stride: 1,
        });
        specs
    }

    fn decoder_specs(&self) -> Vec<ConvSpec> {
        let mut specs = Vec::new();
        let mut cin = self.latent_channels;
        for &c in &self.decoder_channels {
            specs.push(ConvSpec {
                cin,
                cout: c,
                kernel: 3,
                stride: 1,
            });
            cin = c;
        }
        specs.push(ConvSpec {
            cin,
            cout: CHANNELS,
            kernel: 1,
            stride: 1,
        });
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered named parameter arrays: encoder layers first, then decoder.
/// Each conv contributes a `weight` array followed by a `bias` array.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arrays: Vec<NamedArray>,
}

impl ModelParams {
    /// He-initialised parameters for `config`.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut arrays = Vec::new();
        let enc = config.encoder_specs();
        let dec = config.decoder_specs();
        let head = dec.len() - 1;
        let layers = enc
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("encoder.{i}"), *s, false))
            .chain(dec.iter().enumerate().map(|(i, s)| (format!("decoder.{i}"), *s, i == head)));
        for (prefix, spec, is_head) in layers {
            let fan_in = (spec.cin * spec.kernel * spec.kernel) as f64;
            let std = if is_head { (1.0 / fan_in).sqrt() } else { (2.0 / fan_in).sqrt() };
            let normal = Normal::new(0.0, std).expect("finite std");
            let weight = (0..spec.weight_len()).map(|_| normal.sample(rng)).collect();
            let mut bias = vec![0.0; spec.cout];
            if is_head {
                bias[CH_CONF] = config.conf_bias_init;
            }
            arrays.push(NamedArray {
                name: format!("{prefix}.weight"),
                shape: vec![spec.cout, spec.cin, spec.kernel, spec.kernel],
                data: weight,
            });
            arrays.push(NamedArray {
                name: format!("{prefix}.bias"),
                shape: vec![spec.cout],
                data: bias,
            });
        }
        Self { arrays }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|a| NamedArray {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    data: vec![0.0; a.data.len()],
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.len() == b.data.len())
    }

    pub fn check_layout(&self, other: &ModelParams) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("parameter collections differ in names or shapes".into()))
        }
    }

    /// Checks the collection matches what `config` expects.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let expected: Vec<(String, usize)> = config
            .encoder_specs()
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("encoder.{i}"), *s))
            .chain(config.decoder_specs().iter().enumerate().map(|(i, s)| (format!("decoder.{i}"), *s)))
            .flat_map(|(p, s)| [(format!("{p}.weight"), s.weight_len()), (format!("{p}.bias"), s.cout)])
            .collect();
        let actual: Vec<(String, usize)> = self.arrays.iter().map(|a| (a.name.clone(), a.data.len())).collect();
        if expected == actual {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("parameters do not match the model configuration".into()))
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = &f64> {
        self.arrays.iter().flat_map(|a| a.data.iter())
    }

    pub fn iter_values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.arrays.iter_mut().flat_map(|a| a.data.iter_mut())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }

    /// Hash of names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for a in &self.arrays {
            a.name.hash(&mut h);
            a.shape.hash(&mut h);
            for v in &a.data {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Elementwise `alpha · teacher + (1 − alpha) · student`.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, alpha: f64) -> Result<ModelParams> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, alpha)?;
    Ok(out)
}

pub fn ema_update_in_place(teacher: &mut ModelParams, student: &ModelParams, alpha: f64) -> Result<()> {
    teacher.check_layout(student)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA alpha {alpha} outside [0, 1]")));
    }
    for (t, s) in teacher.iter_values_mut().zip(student.iter_values()) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

/// Warm-up EMA decay: `min(1 − 1/(step + 1), alpha_max)`.
pub fn ema_alpha(step: u64, alpha_max: f64) -> f64 {
    (1.0 - 1.0 / (step as f64 + 1.0)).min(alpha_max)
}

/// Intermediate values of a forward pass kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer (shape only is needed for the first).
    shapes: Vec<(usize, usize, usize)>,
    cols: Vec<Vec<f64>>,
    /// Post-activation output of every layer.
    outputs: Vec<Tensor>,
}

/// Model architecture; the parameter values live in [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    encoder: Vec<ConvSpec>,
    decoder: Vec<ConvSpec>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn is_angle_channel(ch: usize) -> bool {
    matches!(ch, CH_COS1 | CH_SIN1 | CH_COS2 | CH_SIN2)
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: config.encoder_specs(),
            decoder: config.decoder_specs(),
            config,
        })
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ModelParams {
        ModelParams::init(&self.config, rng)
    }

    /// Area-pools a grey image to the network input size, values in [-1, 1].
    pub fn preprocess(&self, image: &GrayImage) -> Result<Tensor> {
        let size = self.config.image_size;
        if image.width() as usize != size || image.height() as usize != size {
            return Err(Error::Shape {
                expected: format!("{size}x{size} image"),
                actual: format!("{}x{}", image.width(), image.height()),
            });
        }
        let f = self.config.pool_factor();
        let out_size = self.config.input_size();
        let mut out = Tensor::zeros(1, 1, out_size, out_size);
        let raw = image.as_raw();
        let scale = 1.0 / (255.0 * (f * f) as f64);
        for oy in 0..out_size {
            for ox in 0..out_size {
                let mut acc = 0u32;
                for dy in 0..f {
                    let row = &raw[(oy * f + dy) * size + ox * f..(oy * f + dy) * size + ox * f + f];
                    acc += row.iter().map(|v| *v as u32).sum::<u32>();
                }
                out.data[oy * out_size + ox] = 2.0 * acc as f64 * scale - 1.0;
            }
        }
        Ok(out)
    }

    fn param_index(&self, decoder: bool, layer: usize) -> usize {
        2 * (if decoder { self.encoder.len() + layer } else { layer })
    }

    fn run(&self, params: &ModelParams, decoder: bool, x: &Tensor) -> (Tensor, ForwardCache) {
        let specs = if decoder { &self.decoder } else { &self.encoder };
        let mut cache = ForwardCache {
            shapes: Vec::with_capacity(specs.len()),
            cols: Vec::with_capacity(specs.len()),
            outputs: Vec::with_capacity(specs.len()),
        };
        let slope = self.config.leaky_slope;
        let mut cur = x.clone();
        for (l, spec) in specs.iter().enumerate() {
            let pi = self.param_index(decoder, l);
            let (mut y, col) = conv_forward_params(spec, params, pi, &cur);
            let is_head = decoder && l == specs.len() - 1;
            if is_head {
                let plane = y.n * y.h * y.w;
                for ch in 0..y.c {
                    let vals = &mut y.data[ch * plane..(ch + 1) * plane];
                    if is_angle_channel(ch) {
                        vals.iter_mut().for_each(|v| *v = v.tanh());
                    } else {
                        vals.iter_mut().for_each(|v| *v = sigmoid(*v));
                    }
                }
            } else {
                y.data.iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v *= slope
                    }
                });
            }
            cache.shapes.push((cur.n, cur.h, cur.w));
            cache.cols.push(col);
            cache.outputs.push(y.clone());
            cur = y;
        }
        (cur, cache)
    }

    fn back(
        &self,
        params: &ModelParams,
        decoder: bool,
        cache: &ForwardCache,
        grad_out: &Tensor,
        mut grads: Option<&mut ModelParams>,
        need_input: bool,
    ) -> Option<Tensor> {
        let specs = if decoder { &self.decoder } else { &self.encoder };
        let slope = self.config.leaky_slope;
        let mut g = grad_out.clone();
        for l in (0..specs.len()).rev() {
            let y = &cache.outputs[l];
            let is_head = decoder && l == specs.len() - 1;
            if is_head {
                let plane = y.n * y.h * y.w;
                for ch in 0..y.c {
                    let ys = &y.data[ch * plane..(ch + 1) * plane];
                    let gs = &mut g.data[ch * plane..(ch + 1) * plane];
                    if is_angle_channel(ch) {
                        gs.iter_mut().zip(ys).for_each(|(gv, yv)| *gv *= 1.0 - yv * yv);
                    } else {
                        gs.iter_mut().zip(ys).for_each(|(gv, yv)| *gv *= yv * (1.0 - yv));
                    }
                }
            } else {
                g.data.iter_mut().zip(&y.data).for_each(|(gv, yv)| {
                    if *yv < 0.0 {
                        *gv *= slope
                    }
                });
            }
            let pi = self.param_index(decoder, l);
            let weight = &params.arrays[pi].data;
            let want_input = l > 0 || need_input;
            let pg = grads.as_deref_mut().map(|gr| {
                let (w, b) = gr.arrays.split_at_mut(pi + 1);
                (w[pi].data.as_mut_slice(), b[0].data.as_mut_slice())
            });
            match conv::conv_backward(&specs[l], weight, &cache.cols[l], cache.shapes[l], &g, pg, want_input) {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        Some(g)
    }

    /// Encoder forward on a pooled input batch `[1][N][P][P]`.
    pub fn encode_batch(&self, params: &ModelParams, x: &Tensor) -> (LatentFeature, ForwardCache) {
        self.run(params, false, x)
    }

    /// Backpropagates a latent gradient into the encoder parameter gradients.
    /// Returns the input gradient when `need_input` is set.
    pub fn encode_backward(
        &self,
        params: &ModelParams,
        cache: &ForwardCache,
        grad_latent: &Tensor,
        grads: Option<&mut ModelParams>,
        need_input: bool,
    ) -> Option<Tensor> {
        self.back(params, false, cache, grad_latent, grads, need_input)
    }

    /// Decoder forward: latent batch to activated `[9][N][S][S]` output.
    pub fn decode_batch(&self, params: &ModelParams, z: &LatentFeature) -> (Tensor, ForwardCache) {
        self.run(params, true, z)
    }

    /// Backpropagates an output gradient through the decoder; returns the
    /// latent gradient and accumulates decoder parameter gradients if asked.
    pub fn decode_backward(
        &self,
        params: &ModelParams,
        cache: &ForwardCache,
        grad_out: &Tensor,
        grads: Option<&mut ModelParams>,
    ) -> Tensor {
        self.back(params, true, cache, grad_out, grads, true)
            .expect("decoder backward always yields a latent gradient")
    }

    fn check_latent(&self, z: &LatentFeature) -> Result<()> {
        let s = self.config.grid_size;
        if z.c != self.config.latent_channels || z.h != s || z.w != s {
            return Err(Error::Shape {
                expected: format!("{}x{s}x{s} latent", self.config.latent_channels),
                actual: format!("{}x{}x{}", z.c, z.h, z.w),
            });
        }
        Ok(())
    }

    /// Encodes one image into its `S × S × C_lat` latent feature.
    pub fn encode(&self, params: &ModelParams, image: &GrayImage) -> Result<LatentFeature> {
        let x = self.preprocess(image)?;
        Ok(self.encode_batch(params, &x).0)
    }

    /// Decodes one latent feature into a prediction grid.
    pub fn decode(&self, params: &ModelParams, latent: &LatentFeature) -> Result<PredictionGrid> {
        self.check_latent(latent)?;
        let (out, _) = self.decode_batch(params, latent);
        Ok(self.to_grids(&out).remove(0))
    }

    /// Full inference on one image.
    pub fn predict(&self, params: &ModelParams, image: &GrayImage) -> Result<PredictionGrid> {
        let z = self.encode(params, image)?;
        self.decode(params, &z)
    }

    /// Inference on a pooled input batch.
    pub fn predict_batch(&self, params: &ModelParams, x: &Tensor) -> Vec<PredictionGrid> {
        let (z, _) = self.encode_batch(params, x);
        let (out, _) = self.decode_batch(params, &z);
        self.to_grids(&out)
    }

    /// Splits a `[9][N][S][S]` output into per-sample grids.
    pub fn to_grids(&self, out: &Tensor) -> Vec<PredictionGrid> {
        let s = out.h;
        let plane = s * s;
        (0..out.n)
            .map(|b| {
                let mut cells = vec![0.0; plane * CHANNELS];
                for ch in 0..CHANNELS {
                    let src = &out.data[(ch * out.n + b) * plane..(ch * out.n + b + 1) * plane];
                    for (i, v) in src.iter().enumerate() {
                        cells[i * CHANNELS + ch] = *v;
                    }
                }
                PredictionGrid {
                    grid_size: s,
                    image_size: self.config.image_size,
                    cells,
                }
            })
            .collect()
    }

    /// Inverse of [`Network::to_grids`].
    pub fn from_grids(&self, grids: &[PredictionGrid]) -> Tensor {
        let s = grids[0].grid_size;
        let plane = s * s;
        let n = grids.len();
        let mut out = Tensor::zeros(CHANNELS, n, s, s);
        for (b, g) in grids.iter().enumerate() {
            for ch in 0..CHANNELS {
                let dst = &mut out.data[(ch * n + b) * plane..(ch * n + b + 1) * plane];
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = g.cells[i * CHANNELS + ch];
                }
            }
        }
        out
    }
}

fn conv_forward_params(spec: &ConvSpec, params: &ModelParams, pi: usize, x: &Tensor) -> (Tensor, Vec<f64>) {
    conv::conv_forward(spec, &params.arrays[pi].data, &params.arrays[pi + 1].data, x)
}
