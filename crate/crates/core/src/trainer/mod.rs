//! Teacher-student training loop.
//!
//! Each step draws `batch_size / 2` labeled and up to `batch_size / 2`
//! unlabeled images. An epoch is one pass over the unlabeled pool; the
//! labeled pool cycles. Data order and noise depend only on the seed and the
//! global step, so a resumed run replays the same stream.

pub mod adam;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_annotations, split_semi, write_json, SplitProtocol};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, EvalReport};
use crate::losses::{consistency_loss_grad, supervised_loss_grad, ConsistencyMode};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ema_alpha, ema_update_in_place, ModelConfig, ModelParams, Network, Tensor};
use crate::perturbation::{adaptive_vat, default_xi, vat_noise, Decoder, DecoderChoice, VatMode};
use crate::postprocess::{detect, Detections, TemplateConfig};
use crate::types::{encode_ground_truth, AnnotatedImage, PredictionGrid};
pub use adam::{Adam, AdamConfig};

/// Which decoder the latent noise is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSource {
    /// Adaptive selection between teacher and student per `vat_mode`.
    #[default]
    Adaptive,
    Student,
    Teacher,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub labeled_ratio_n: usize,
    pub tau: f64,
    pub eps: f64,
    pub ema_alpha_max: f64,
    pub epochs: usize,
    pub seed: u64,
    pub vat_mode: VatMode,
    pub noise_source: NoiseSource,
    pub perturb_labeled: bool,
    pub consistency: ConsistencyMode,
    /// Force β = 0 and skip the unlabeled branch.
    pub supervised_only: bool,
    /// Ramp β linearly over the first epoch.
    pub beta_warmup: bool,
    /// Fraction held out for validation when no separate split is given.
    pub val_fraction: f64,
    /// Evaluate on the validation split every this many epochs.
    pub eval_every: usize,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub template: TemplateConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 24,
            labeled_ratio_n: 12,
            tau: 0.9,
            eps: 0.1,
            ema_alpha_max: 0.999,
            epochs: 30,
            seed: 0,
            vat_mode: VatMode::RobustMin,
            noise_source: NoiseSource::Adaptive,
            perturb_labeled: true,
            consistency: ConsistencyMode::Cgm,
            supervised_only: false,
            beta_warmup: false,
            val_fraction: 0.1,
            eval_every: 1,
            deterministic: true,
            model: ModelConfig::default(),
            template: TemplateConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.labeled_ratio_n == 0 || self.epochs == 0 || self.eval_every == 0 {
            return bad("labeled_ratio_n, epochs and eval_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.ema_alpha_max) {
            return bad("tau and ema_alpha_max must lie in [0, 1]");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        self.model.validate()?;
        self.template.validate()
    }

    fn half_batch(&self) -> usize {
        self.batch_size / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub total_loss: f64,
    pub beta: f64,
    pub selected_decoder: Option<DecoderChoice>,
    pub masked_cell_fraction: f64,
    pub induced_distance_teacher: Option<f64>,
    pub induced_distance_student: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub ap_point: f64,
    pub ap_slot: f64,
}

/// Student, teacher and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam: Adam,
    /// Number of completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(net: &Network, config: &TrainConfig) -> Self {
        let student = net.init_params(&mut ChaCha8Rng::seed_from_u64(config.seed));
        Self {
            teacher: student.clone(),
            adam: Adam::new(AdamConfig::with_lr(config.lr), &student),
            student,
            step: 0,
        }
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            step: self.step,
            meta,
            sections: vec![
                ("student".into(), self.student.clone()),
                ("teacher".into(), self.teacher.clone()),
                ("adam.m".into(), self.adam.m.clone()),
                ("adam.v".into(), self.adam.v.clone()),
            ],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        let section = |name: &str| {
            ck.section(name).cloned().ok_or_else(|| Error::Config(format!("checkpoint lacks section {name}")))
        };
        let student = section("student")?;
        student.check_config(&config.model)?;
        let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &student);
        adam.m = section("adam.m")?;
        adam.v = section("adam.v")?;
        adam.t = ck.meta.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(ck.step);
        Ok(Self {
            teacher: section("teacher")?,
            student,
            adam,
            step: ck.step,
        })
    }
}

/// Labeled images of one step with their encoded targets.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    /// Pooled inputs `[1][N][P][P]`.
    pub x: Tensor,
    pub targets: Vec<PredictionGrid>,
    /// Dataset indices, for diagnostics.
    pub indices: Vec<usize>,
}

fn zero_samples(t: &mut Tensor, count: usize) {
    let plane = t.h * t.w;
    for ch in 0..t.c {
        let base = ch * t.n * plane;
        t.data[base..base + count * plane].fill(0.0);
    }
}

/// One optimisation step on the student followed by the teacher EMA update.
///
/// `unlabeled` carries images only; it is ignored when `beta == 0`.
pub fn train_step(
    net: &Network,
    state: &mut TrainState,
    labeled: &LabeledBatch,
    unlabeled: Option<&Tensor>,
    beta: f64,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    let n_l = labeled.x.n;
    if n_l == 0 {
        return Err(Error::ZeroLabeled);
    }
    let unlabeled = unlabeled.filter(|u| u.n > 0 && beta > 0.0);
    let n_u = unlabeled.map_or(0, |u| u.n);
    let x = match unlabeled {
        Some(u) => Tensor::concat(&labeled.x, u),
        None => labeled.x.clone(),
    };

    let (z, enc_cache) = net.encode_batch(&state.student, &x);
    let teacher_dec = Decoder::new(net, &state.teacher);
    let student_dec = Decoder::new(net, &state.student);
    let xi = default_xi(z.sample_len());
    let (noise, selected, d_t, d_s) = match config.noise_source {
        NoiseSource::None => (None, None, None, None),
        NoiseSource::Adaptive => {
            let r = adaptive_vat(&z, teacher_dec, student_dec, config.eps, config.vat_mode, rng)?;
            (
                Some(r.noise),
                Some(r.selected),
                Some(r.induced_distance_teacher),
                Some(r.induced_distance_student),
            )
        }
        NoiseSource::Student => (Some(vat_noise(&z, student_dec, config.eps, xi, 1, rng)?.noise), Some(DecoderChoice::Student), None, None),
        NoiseSource::Teacher => (Some(vat_noise(&z, teacher_dec, config.eps, xi, 1, rng)?.noise), Some(DecoderChoice::Teacher), None, None),
    };
    let z_in = match noise {
        Some(mut r) => {
            if !config.perturb_labeled {
                zero_samples(&mut r, n_l);
            }
            z.add(&r)
        }
        None => z,
    };
    let (out, dec_cache) = net.decode_batch(&state.student, &z_in);
    let preds = net.to_grids(&out);

    let mut grad_grids = Vec::with_capacity(preds.len());
    let mut sample_losses = Vec::with_capacity(preds.len());
    let mut sup = 0.0;
    for (pred, target) in preds[..n_l].iter().zip(&labeled.targets) {
        let (l, mut g) = supervised_loss_grad(pred, target)?;
        g.cells.iter_mut().for_each(|v| *v /= n_l as f64);
        sup += l / n_l as f64;
        sample_losses.push(l);
        grad_grids.push(g);
    }
    let mut unsup = 0.0;
    let mut masked = 0.0;
    if let Some(u) = unlabeled {
        let (tz, _) = net.encode_batch(&state.teacher, u);
        let teacher_preds = net.to_grids(&net.decode_batch(&state.teacher, &tz).0);
        for (pred, tp) in preds[n_l..].iter().zip(&teacher_preds) {
            let c = consistency_loss_grad(pred, tp, config.tau, config.consistency)?;
            let mut g = c.grad;
            g.cells.iter_mut().for_each(|v| *v *= beta / n_u as f64);
            unsup += c.value / n_u as f64;
            masked += c.masked_cell_fraction / n_u as f64;
            sample_losses.push(c.value);
            grad_grids.push(g);
        }
    }
    let total = sup + beta * unsup;
    if !total.is_finite() {
        let bad = sample_losses.iter().position(|l| !l.is_finite()).unwrap_or(0);
        let batch = labeled.indices.get(bad).copied().unwrap_or(bad);
        return Err(Error::NonFiniteLoss {
            step: state.step,
            batch,
            detail: format!("sup={sup} unsup={unsup} beta={beta} sample_losses={sample_losses:?}"),
        });
    }

    let mut grads = state.student.zeros_like();
    let g_out = net.from_grids(&grad_grids);
    let dz = net.decode_backward(&state.student, &dec_cache, &g_out, Some(&mut grads));
    net.encode_backward(&state.student, &enc_cache, &dz, Some(&mut grads), false);
    state.adam.step(&mut state.student, &grads)?;
    ema_update_in_place(&mut state.teacher, &state.student, ema_alpha(state.step, config.ema_alpha_max))?;

    let metrics = StepMetrics {
        step: state.step,
        epoch: 0,
        sup_loss: sup,
        unsup_loss: unsup,
        total_loss: total,
        beta,
        selected_decoder: selected,
        masked_cell_fraction: masked,
        induced_distance_teacher: d_t,
        induced_distance_student: d_s,
    };
    state.step += 1;
    Ok(metrics)
}

/// Deterministic batch order.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub half: usize,
    pub seed: u64,
}

const LABELED_STREAM: u64 = 1 << 32;
const UNLABELED_STREAM: u64 = 2 << 32;
const NOISE_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

impl Schedule {
    pub fn steps_per_epoch(&self) -> usize {
        let pool = if self.n_unlabeled > 0 { self.n_unlabeled } else { self.n_labeled };
        pool.div_ceil(self.half)
    }

    fn permutation(&self, n: usize, stream: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Positions in the labeled pool used at a global step.
    pub fn labeled(&self, step: u64) -> Vec<usize> {
        let start = step as usize * self.half;
        let mut out = Vec::with_capacity(self.half);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for p in start..start + self.half {
            let cycle = p / self.n_labeled;
            if cached.as_ref().map(|c| c.0) != Some(cycle) {
                cached = Some((cycle, self.permutation(self.n_labeled, LABELED_STREAM + cycle as u64)));
            }
            out.push(cached.as_ref().unwrap().1[p % self.n_labeled]);
        }
        out
    }

    /// Positions in the unlabeled pool for batch `b` of `epoch`.
    pub fn unlabeled(&self, epoch: usize, b: usize) -> Vec<usize> {
        if self.n_unlabeled == 0 {
            return Vec::new();
        }
        let perm = self.permutation(self.n_unlabeled, UNLABELED_STREAM + epoch as u64);
        let start = (b * self.half).min(self.n_unlabeled);
        let end = ((b + 1) * self.half).min(self.n_unlabeled);
        perm[start..end].to_vec()
    }

    pub fn noise_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ NOISE_SEED_OFFSET);
        rng.set_stream(step);
        rng
    }
}

/// Runs the teacher (or any parameter set) over images and post-processes.
pub fn detect_images(
    net: &Network,
    params: &ModelParams,
    images: &[&GrayImage],
    template: &TemplateConfig,
) -> Result<Vec<Detections>> {
    const CHUNK: usize = 16;
    let chunks: Vec<Result<Vec<Detections>>> = images
        .par_chunks(CHUNK)
        .map(|chunk| {
            let xs = chunk.iter().map(|im| net.preprocess(im)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor> = xs.iter().collect();
            let grids = net.predict_batch(params, &Tensor::stack(&refs));
            Ok(grids.iter().map(|g| detect(g, template)).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn evaluate_params(
    net: &Network,
    params: &ModelParams,
    dataset: &[AnnotatedImage],
    template: &TemplateConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let images: Vec<&GrayImage> = dataset.iter().map(|d| d.image.as_ref()).collect();
    let dets = detect_images(net, params, &images, template)?;
    evaluate(dataset, &dets, eval)
}

/// In-memory training input: `train` carries labeled flags from
/// [`split_semi`]; `val` is held out for model selection.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_val_ap: Option<f64>,
    pub evals: Vec<EvalRecord>,
    pub steps: u64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.ckpt";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.ckpt";

/// Splits a loaded dataset into a validation hold-out and a labeled/unlabeled
/// training pool.
pub fn prepare_data(dataset: Vec<AnnotatedImage>, config: &TrainConfig) -> Result<TrainData> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_val = ((dataset.len() as f64) * config.val_fraction).round() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    let mut val_mask = vec![false; dataset.len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ NOISE_SEED_OFFSET));
    for &i in &order[..n_val] {
        val_mask[i] = true;
    }
    let mut val = Vec::new();
    let mut rest = Vec::new();
    for (img, is_val) in dataset.into_iter().zip(val_mask) {
        if is_val {
            val.push(img);
        } else {
            rest.push(img);
        }
    }
    let (mut labeled, unlabeled) = split_semi(
        rest,
        SplitProtocol {
            n: config.labeled_ratio_n,
            seed: config.seed,
        },
    );
    labeled.extend(unlabeled);
    Ok(TrainData { train: labeled, val })
}

/// Loads `dataset_dir`, holds out a validation split and trains.
pub fn train(config: &TrainConfig, dataset_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let data = prepare_data(load_annotations(dataset_dir)?, config)?;
    train_with_data(config, &data, out_dir, None)
}

fn append_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let file = if append {
        OpenOptions::new().create(true).append(true).open(path)
    } else {
        File::create(path)
    };
    file.map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Trains on pre-split data. With `resume`, continues from a checkpoint
/// written by an earlier run with the same configuration.
pub fn train_with_data(
    config: &TrainConfig,
    data: &TrainData,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let net = Network::new(config.model.clone())?;
    let labeled: Vec<&AnnotatedImage> = data.train.iter().filter(|d| d.is_labeled()).collect();
    let unlabeled: Vec<&AnnotatedImage> = data.train.iter().filter(|d| !d.is_labeled()).collect();
    if labeled.is_empty() {
        return Err(Error::ZeroLabeled);
    }
    let targets = labeled
        .iter()
        .map(|d| {
            let gt = d.ground_truth().expect("labeled image exposes ground truth");
            encode_ground_truth(&gt.points, config.model.grid_size, config.model.image_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let pre = |set: &[&AnnotatedImage]| -> Result<Vec<Tensor>> { set.par_iter().map(|d| net.preprocess(&d.image)).collect() };
    let x_labeled = pre(&labeled)?;
    let x_unlabeled = if config.supervised_only { Vec::new() } else { pre(&unlabeled)? };

    let beta = if config.supervised_only {
        0.0
    } else {
        unlabeled.len() as f64 / labeled.len() as f64
    };
    let schedule = Schedule {
        n_labeled: labeled.len(),
        n_unlabeled: unlabeled.len(),
        half: config.half_batch(),
        seed: config.seed,
    };
    let spe = schedule.steps_per_epoch();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(CONFIG_FILE), config)?;
    let (mut state, mut best) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let best = ck.meta.get("best_val_ap").and_then(|v| v.as_f64());
            (TrainState::from_checkpoint(&ck, config)?, best)
        }
        None => (TrainState::new(&net, config), None),
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    let eval_path = out_dir.join(EVAL_FILE);
    let mut metrics_log = open_log(&metrics_path, resume.is_some())?;
    let mut eval_log = open_log(&eval_path, resume.is_some())?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut evals = Vec::new();

    let meta = |state: &TrainState, best: Option<f64>, epoch: usize| {
        serde_json::json!({
            "config": config,
            "adam_t": state.adam.t,
            "best_val_ap": best,
            "epoch": epoch,
        })
    };

    let start_epoch = state.step as usize / spe;
    for epoch in start_epoch..config.epochs {
        let first_batch = if epoch == start_epoch { state.step as usize % spe } else { 0 };
        for b in first_batch..spe {
            let step = state.step;
            let l_idx = schedule.labeled(step);
            let refs: Vec<&Tensor> = l_idx.iter().map(|&i| &x_labeled[i]).collect();
            let batch = LabeledBatch {
                x: Tensor::stack(&refs),
                targets: l_idx.iter().map(|&i| targets[i].clone()).collect(),
                indices: l_idx.clone(),
            };
            let u_idx = if beta > 0.0 { schedule.unlabeled(epoch, b) } else { Vec::new() };
            let x_u = (!u_idx.is_empty()).then(|| {
                let refs: Vec<&Tensor> = u_idx.iter().map(|&i| &x_unlabeled[i]).collect();
                Tensor::stack(&refs)
            });
            let step_beta = if config.beta_warmup {
                beta * ((step + 1) as f64 / spe as f64).min(1.0)
            } else {
                beta
            };
            let mut rng = schedule.noise_rng(step);
            let mut m = train_step(&net, &mut state, &batch, x_u.as_ref(), step_beta, config, &mut rng)?;
            m.epoch = epoch;
            append_line(&mut metrics_log, &metrics_path, &m)?;
        }
        metrics_log.flush().map_err(|e| Error::io(&metrics_path, e))?;

        let is_last = epoch + 1 == config.epochs;
        if !data.val.is_empty() && ((epoch + 1) % config.eval_every == 0 || is_last) {
            let snapshot = state.teacher.clone();
            let report = evaluate_params(&net, &snapshot, &data.val, &config.template, &config.eval)?;
            let rec = EvalRecord {
                epoch,
                step: state.step,
                ap_point: report.ap_point,
                ap_slot: report.ap_slot,
            };
            append_line(&mut eval_log, &eval_path, &rec)?;
            eval_log.flush().map_err(|e| Error::io(&eval_path, e))?;
            if best.is_none_or(|b| rec.ap_slot > b) {
                best = Some(rec.ap_slot);
                state.to_checkpoint(meta(&state, best, epoch + 1)).save(&best_path)?;
            }
            evals.push(rec);
        }
        state.to_checkpoint(meta(&state, best, epoch + 1)).save(&last_path)?;
    }
    if !best_path.exists() {
        fs::copy(&last_path, &best_path).map_err(|e| Error::io(&best_path, e))?;
    }
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_val_ap: best,
        evals,
        steps: state.step,
    })
}

/// Rebuilds the network and teacher parameters stored in a training checkpoint.
pub fn load_teacher(path: &Path) -> Result<(Network, ModelParams, TrainConfig)> {
    let ck = Checkpoint::load(path)?;
    let config: TrainConfig = ck
        .meta
        .get("config")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::json(path, e))?
        .unwrap_or_default();
    let params = ck
        .section("teacher")
        .or_else(|| ck.section("student"))
        .cloned()
        .ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            message: "no teacher or student section".into(),
        })?;
    params.check_config(&config.model)?;
    Ok((Network::new(config.model.clone())?, params, config))
}
