//! Desk-scale experiment protocol shared by the `ablate` command and the
//! acceptance suite: one synthetic train/val/test draw, a set of training
//! variants and per-seed runs summarised by the median.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, split_semi, SplitProtocol, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::ConsistencyMode;
use crate::model::ModelConfig;
use crate::trainer::{evaluate_params, load_teacher, train_with_data, NoiseSource, TrainConfig, TrainData};
use crate::types::AnnotatedImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskProtocol {
    /// Training pool; `synth.n_images` images.
    pub synth: SynthConfig,
    pub val_images: usize,
    pub test_images: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    /// Shared training configuration; variants override single fields.
    pub train: TrainConfig,
}

impl Default for DeskProtocol {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                n_images: 2000,
                ..SynthConfig::default()
            },
            val_images: 200,
            test_images: 400,
            data_seed: 2024,
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                lr: 1e-2,
                labeled_ratio_n: 10,
                ema_alpha_max: 0.99,
                epochs: 15,
                model: ModelConfig {
                    encoder_channels: vec![8, 16, 16],
                    latent_channels: 16,
                    decoder_channels: vec![16, 16],
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub consistency: ConsistencyMode,
    pub noise_source: NoiseSource,
    pub supervised_only: bool,
    pub tau: Option<f64>,
    pub eps: Option<f64>,
}

impl Variant {
    fn new(name: &str, consistency: ConsistencyMode, noise_source: NoiseSource) -> Self {
        Self {
            name: name.into(),
            consistency,
            noise_source,
            supervised_only: false,
            tau: None,
            eps: None,
        }
    }

    /// CGM consistency with adaptive noise.
    pub fn ss_psd() -> Self {
        Self::new("ss_psd", ConsistencyMode::Cgm, NoiseSource::Adaptive)
    }

    /// Same network and noise, β forced to 0.
    pub fn supervised() -> Self {
        Self {
            supervised_only: true,
            ..Self::new("supervised", ConsistencyMode::Cgm, NoiseSource::Adaptive)
        }
    }

    pub fn consistency(mode: ConsistencyMode) -> Self {
        let name = match mode {
            ConsistencyMode::Cgm => "cgm",
            ConsistencyMode::Cg => "cg",
            ConsistencyMode::C => "c",
        };
        Self::new(name, mode, NoiseSource::Adaptive)
    }

    pub fn noise(source: NoiseSource) -> Self {
        let name = match source {
            NoiseSource::Adaptive => "adaptive_vat",
            NoiseSource::Student => "s_vat",
            NoiseSource::Teacher => "t_vat",
            NoiseSource::None => "no_vat",
        };
        Self::new(name, ConsistencyMode::Cgm, source)
    }

    pub fn tau(tau: f64) -> Self {
        Self {
            tau: Some(tau),
            ..Self::new(&format!("tau={tau}"), ConsistencyMode::Cgm, NoiseSource::Adaptive)
        }
    }

    pub fn eps(eps: f64) -> Self {
        Self {
            eps: Some(eps),
            ..Self::new(&format!("eps={eps}"), ConsistencyMode::Cgm, NoiseSource::Adaptive)
        }
    }

    /// Training configuration for this variant and seed.
    pub fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            consistency: self.consistency,
            noise_source: self.noise_source,
            supervised_only: self.supervised_only,
            tau: self.tau.unwrap_or(base.tau),
            eps: self.eps.unwrap_or(base.eps),
            seed,
            ..base.clone()
        }
    }
}

/// The consistency × noise grid plus the τ and ε sweeps.
pub fn full_grid() -> Vec<Variant> {
    let mut out = vec![Variant::supervised()];
    for mode in [ConsistencyMode::C, ConsistencyMode::Cg, ConsistencyMode::Cgm] {
        for source in [NoiseSource::Student, NoiseSource::Teacher, NoiseSource::Adaptive] {
            let mut v = Variant::new("", mode, source);
            v.name = format!("{}+{}", Variant::consistency(mode).name, Variant::noise(source).name);
            out.push(v);
        }
    }
    out.extend((1..=9).map(|i| Variant::tau(i as f64 / 10.0)));
    out.extend([10.0, 1.0, 0.1].map(Variant::eps));
    out
}

/// Generated train pool, validation and test sets.
#[derive(Debug, Clone)]
pub struct ProtocolData {
    pub pool: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
}

impl DeskProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("protocol needs at least one seed".into()));
        }
        self.synth.validate()?;
        self.train.validate()
    }

    pub fn generate(&self) -> Result<ProtocolData> {
        self.validate()?;
        let with_n = |n: usize| SynthConfig {
            n_images: n,
            ..self.synth.clone()
        };
        Ok(ProtocolData {
            pool: generate_synthetic(&self.synth, self.data_seed)?,
            val: generate_synthetic(&with_n(self.val_images), self.data_seed.wrapping_add(1))?,
            test: generate_synthetic(&with_n(self.test_images), self.data_seed.wrapping_add(2))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub best_val_ap_slot: Option<f64>,
    pub test_ap_point: f64,
    pub test_ap_slot: f64,
}

/// Trains one variant on one seed and scores the best checkpoint on the test set.
pub fn run_variant(
    protocol: &DeskProtocol,
    data: &ProtocolData,
    variant: &Variant,
    seed: u64,
    out_dir: &Path,
) -> Result<RunResult> {
    let config = variant.config(&protocol.train, seed);
    let (labeled, unlabeled) = split_semi(
        data.pool.clone(),
        SplitProtocol {
            n: config.labeled_ratio_n,
            seed,
        },
    );
    let mut train = labeled;
    train.extend(unlabeled);
    let train_data = TrainData {
        train,
        val: data.val.clone(),
    };
    let outcome = train_with_data(&config, &train_data, out_dir, None)?;
    let (net, params, _) = load_teacher(&outcome.best_checkpoint)?;
    let report = evaluate_params(&net, &params, &data.test, &config.template, &config.eval)?;
    Ok(RunResult {
        variant: variant.name.clone(),
        seed,
        best_val_ap_slot: outcome.best_val_ap,
        test_ap_point: report.ap_point,
        test_ap_slot: report.ap_slot,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub median_ap_slot: f64,
    pub median_ap_point: f64,
    pub runs: Vec<RunResult>,
}

/// Groups results by variant, keeping first-seen order.
pub fn summarize(results: &[RunResult]) -> Vec<VariantSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let runs: Vec<RunResult> = results.iter().filter(|r| r.variant == name).cloned().collect();
            let slot: Vec<f64> = runs.iter().map(|r| r.test_ap_slot).collect();
            let point: Vec<f64> = runs.iter().map(|r| r.test_ap_point).collect();
            VariantSummary {
                variant: name.to_string(),
                median_ap_slot: median(&slot),
                median_ap_point: median(&point),
                runs,
            }
        })
        .collect()
}

/// Markdown table of medians and per-seed slot AP, in percent.
pub fn render_table(summaries: &[VariantSummary]) -> String {
    let mut out = String::from("| variant | AP_slot (median) | AP_point (median) | AP_slot per seed |\n|---|---|---|---|\n");
    for s in summaries {
        let per_seed: Vec<String> = s.runs.iter().map(|r| format!("{}:{:.2}", r.seed, 100.0 * r.test_ap_slot)).collect();
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.2} | {} |",
            s.variant,
            100.0 * s.median_ap_slot,
            100.0 * s.median_ap_point,
            per_seed.join(" ")
        );
    }
    out
}
