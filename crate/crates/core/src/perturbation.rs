//! Virtual adversarial noise in latent space and adaptive decoder selection.
//!
//! Noise is computed per sample: each latent in the batch receives its own
//! direction with `‖r‖₂ = eps`. The adaptive selection is made once per batch
//! from batch-mean induced distances.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentFeature, ModelParams, Network, Tensor};

/// Gradient norms below this are treated as zero.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

/// A decoder bound to a parameter set.
#[derive(Debug, Clone, Copy)]
pub struct Decoder<'a> {
    pub net: &'a Network,
    pub params: &'a ModelParams,
}

impl<'a> Decoder<'a> {
    pub fn new(net: &'a Network, params: &'a ModelParams) -> Self {
        Self { net, params }
    }

    pub fn forward(&self, z: &LatentFeature) -> Tensor {
        self.net.decode_batch(self.params, z).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VatMode {
    /// Keep the noise of the decoder with the lower self-induced distance.
    #[default]
    RobustMin,
    /// Keep the noise of the decoder with the higher self-induced distance.
    AggressiveMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderChoice {
    Teacher,
    Student,
}

#[derive(Debug, Clone)]
pub struct VatNoise {
    pub noise: Tensor,
    /// Per sample: the gradient vanished and the random start was kept.
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct NoiseResult {
    pub noise: Tensor,
    pub induced_distance_teacher: f64,
    pub induced_distance_student: f64,
    pub selected: DecoderChoice,
    /// Both candidates fell back to their random start for every sample.
    pub degenerate: bool,
}

/// Finite-difference step used by the power iteration.
pub fn default_xi(sample_numel: usize) -> f64 {
    1e-6 * (sample_numel as f64).sqrt()
}

fn per_sample_sq_norms(t: &Tensor) -> Vec<f64> {
    let plane = t.h * t.w;
    let mut out = vec![0.0; t.n];
    for ch in 0..t.c {
        for (b, acc) in out.iter_mut().enumerate() {
            let base = (ch * t.n + b) * plane;
            *acc += t.data[base..base + plane].iter().map(|v| v * v).sum::<f64>();
        }
    }
    out
}

fn scale_samples(t: &mut Tensor, factors: &[f64]) {
    let plane = t.h * t.w;
    for ch in 0..t.c {
        for (b, f) in factors.iter().enumerate() {
            let base = (ch * t.n + b) * plane;
            t.data[base..base + plane].iter_mut().for_each(|v| *v *= f);
        }
    }
}

/// Per-sample mean squared difference between two decoder outputs.
pub fn grid_distance(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut diff = a.clone();
    diff.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x -= y);
    let numel = a.sample_len() as f64;
    per_sample_sq_norms(&diff).into_iter().map(|s| s / numel).collect()
}

fn add_scaled(z: &Tensor, r: &Tensor, scale: f64) -> Tensor {
    let mut out = z.clone();
    out.data.iter_mut().zip(&r.data).for_each(|(a, b)| *a += scale * b);
    out
}

/// Random per-sample directions of norm `eps`.
pub fn random_noise(shape: &Tensor, eps: f64, rng: &mut impl Rng) -> Tensor {
    let mut r = Tensor::zeros(shape.c, shape.n, shape.h, shape.w);
    r.data.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    let factors: Vec<f64> = per_sample_sq_norms(&r).iter().map(|s| eps / s.sqrt()).collect();
    scale_samples(&mut r, &factors);
    r
}

/// Adversarial latent noise against one decoder by power iteration.
pub fn vat_noise(
    z: &LatentFeature,
    decoder: Decoder<'_>,
    eps: f64,
    xi: f64,
    n_power_iter: usize,
    rng: &mut impl Rng,
) -> Result<VatNoise> {
    if !(eps > 0.0) || !(xi > 0.0) {
        return Err(Error::Config(format!("vat needs eps > 0 and xi > 0, got eps={eps} xi={xi}")));
    }
    let mut r = random_noise(z, 1.0, rng);
    let mut degenerate = vec![false; z.n];
    let clean = decoder.forward(z);
    let numel_out = clean.sample_len() as f64;
    for _ in 0..n_power_iter {
        let (out, cache) = decoder.net.decode_batch(decoder.params, &add_scaled(z, &r, xi));
        let mut g = out;
        g.data.iter_mut().zip(&clean.data).for_each(|(o, c)| *o = 2.0 * (*o - c) / numel_out);
        // ∇_δ d at δ = ξ·r, divided by ξ so the degeneracy test does not depend on ξ
        let mut grad = decoder.net.decode_backward(decoder.params, &cache, &g, None);
        grad.data.iter_mut().for_each(|v| *v /= xi);
        let norms = per_sample_sq_norms(&grad);
        let mut factors = vec![0.0; z.n];
        for b in 0..z.n {
            let n = norms[b].sqrt();
            if n < DEGENERATE_GRAD_NORM || !n.is_finite() {
                degenerate[b] = true;
            } else {
                degenerate[b] = false;
                factors[b] = 1.0 / n;
            }
        }
        // samples with a vanished gradient keep their previous direction
        let mut keep = r.clone();
        scale_samples(&mut grad, &factors);
        let plane = z.h * z.w;
        for ch in 0..z.c {
            for b in 0..z.n {
                if !degenerate[b] {
                    let base = (ch * z.n + b) * plane;
                    keep.data[base..base + plane].copy_from_slice(&grad.data[base..base + plane]);
                }
            }
        }
        r = keep;
    }
    scale_samples(&mut r, &vec![eps; z.n]);
    Ok(VatNoise { noise: r, degenerate })
}

/// Batch-mean distance a decoder shows between clean and perturbed latents.
pub fn induced_distance(decoder: Decoder<'_>, z: &LatentFeature, noise: &Tensor) -> f64 {
    let d = grid_distance(&decoder.forward(z), &decoder.forward(&add_scaled(z, noise, 1.0)));
    d.iter().sum::<f64>() / d.len() as f64
}

/// Computes VAT candidates against both decoders and keeps one per `mode`.
///
/// Both candidates start from the same random direction, so identical
/// decoders yield identical distances and the tie goes to the teacher.
pub fn adaptive_vat(
    z: &LatentFeature,
    teacher: Decoder<'_>,
    student: Decoder<'_>,
    eps: f64,
    mode: VatMode,
    rng: &mut impl Rng,
) -> Result<NoiseResult> {
    if !teacher.params.same_layout(student.params) {
        return Err(Error::ShapeMismatch("teacher and student decoders differ in layout".into()));
    }
    let xi = default_xi(z.sample_len());
    let seed: u64 = rng.random();
    let candidate = |dec: Decoder<'_>| {
        let mut local = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        vat_noise(z, dec, eps, xi, 1, &mut local)
    };
    let r_t = candidate(teacher)?;
    let r_s = candidate(student)?;
    let d_t = induced_distance(teacher, z, &r_t.noise);
    let d_s = induced_distance(student, z, &r_s.noise);
    let all_degenerate = r_t.degenerate.iter().chain(&r_s.degenerate).all(|d| *d);
    let selected = if all_degenerate || d_t == d_s {
        DecoderChoice::Teacher
    } else {
        match mode {
            VatMode::RobustMin if d_s < d_t => DecoderChoice::Student,
            VatMode::AggressiveMax if d_s > d_t => DecoderChoice::Student,
            _ => DecoderChoice::Teacher,
        }
    };
    let noise = match selected {
        DecoderChoice::Teacher => r_t.noise,
        DecoderChoice::Student => r_s.noise,
    };
    Ok(NoiseResult {
        noise,
        induced_distance_teacher: d_t,
        induced_distance_student: d_s,
        selected,
        degenerate: all_degenerate,
    })
}

/// Per-sample L2 norms of a latent-shaped tensor.
pub fn sample_norms(t: &Tensor) -> Vec<f64> {
    per_sample_sq_norms(t).into_iter().map(f64::sqrt).collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::tests::toy;

    fn latent(net: &Network, n: usize, rng: &mut impl Rng) -> Tensor {
        let s = net.config.grid_size;
        let mut z = Tensor::zeros(net.config.latent_channels, n, s, s);
        z.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        z
    }

    #[test]
    fn noise_has_exact_norm_and_is_deterministic() {
        let net = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = net.init_params(&mut rng);
        let z = latent(&net, 3, &mut rng);
        let before = p.fingerprint();
        let a = vat_noise(&z, Decoder::new(&net, &p), 0.1, 1e-6, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = vat_noise(&z, Decoder::new(&net, &p), 0.1, 1e-6, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.noise, b.noise);
        assert_eq!(p.fingerprint(), before);
        for n in sample_norms(&a.noise) {
            assert!((n - 0.1).abs() < 1e-9);
        }
        assert!(a.degenerate.iter().all(|d| !d));
    }

    #[test]
    fn constant_decoder_falls_back_to_random_start() {
        let net = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = net.init_params(&mut rng);
        let head = p.arrays.len() - 2;
        p.arrays[head].data.fill(0.0);
        let z = latent(&net, 2, &mut rng);
        let r = vat_noise(&z, Decoder::new(&net, &p), 1.0, 1e-6, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(r.degenerate.iter().all(|d| *d));
        let start = random_noise(&z, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        for (a, b) in r.noise.data.iter().zip(&start.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_decoders_tie_to_teacher() {
        let net = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = net.init_params(&mut rng);
        let z = latent(&net, 2, &mut rng);
        for mode in [VatMode::RobustMin, VatMode::AggressiveMax] {
            let r = adaptive_vat(&z, Decoder::new(&net, &p), Decoder::new(&net, &p), 0.1, mode, &mut rng).unwrap();
            assert_eq!(r.induced_distance_teacher, r.induced_distance_student);
            assert_eq!(r.selected, DecoderChoice::Teacher);
        }
    }

    #[test]
    fn modes_pick_opposite_decoders_when_distances_differ() {
        let net = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = net.init_params(&mut rng);
        let s = net.init_params(&mut rng);
        let z = latent(&net, 2, &mut rng);
        let lo = adaptive_vat(&z, Decoder::new(&net, &t), Decoder::new(&net, &s), 0.1, VatMode::RobustMin, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let hi = adaptive_vat(&z, Decoder::new(&net, &t), Decoder::new(&net, &s), 0.1, VatMode::AggressiveMax, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_ne!(lo.induced_distance_teacher, lo.induced_distance_student);
        assert_ne!(lo.selected, hi.selected);
        for n in sample_norms(&lo.noise).into_iter().chain(sample_norms(&hi.noise)) {
            assert!((n - 0.1).abs() < 1e-9);
        }
    }
}
