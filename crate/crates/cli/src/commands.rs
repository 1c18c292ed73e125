use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sspsd_core::dataset::{dataset_stats, generate_synthetic, load_annotations, read_json, save_annotations, write_json, SynthConfig};
use sspsd_core::evaluation::{evaluate, EvalConfig};
use sspsd_core::losses::ConsistencyMode;
use sspsd_core::postprocess::{Detections, TemplateConfig};
use sspsd_core::protocol::{full_grid, render_table, run_variant, summarize, DeskProtocol, Variant};
use sspsd_core::trainer::{detect_images, load_teacher, prepare_data, train_with_data, NoiseSource, TrainConfig};
use sspsd_core::{Error, Result};

use crate::{AblateArgs, Command, EvalArgs, InferArgs, StatsArgs, SynthArgs, TrainArgs, TrainFlags};

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

/// Post-processing and matching settings for `eval` and `infer`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub template: TemplateConfig,
    pub eval: EvalConfig,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Synth(a) => synth(a),
        Command::Stats(a) => stats(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn load_or_default<T: Default + for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn snapshot(out: &Path, command: &str, body: serde_json::Value) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut value = json!({ "command": command });
    if let (Some(dst), serde_json::Value::Object(src)) = (value.as_object_mut(), body) {
        dst.extend(src);
    }
    write_json(&out.join(SNAPSHOT_FILE), &value)
}

fn apply_flags(cfg: &mut TrainConfig, flags: &TrainFlags) {
    if let Some(n) = flags.ratio_n {
        cfg.labeled_ratio_n = n;
    }
    if let Some(t) = flags.tau {
        cfg.tau = t;
    }
    if let Some(e) = flags.eps {
        cfg.eps = e;
    }
    if let Some(m) = flags.vat_mode {
        cfg.vat_mode = m;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    if flags.deterministic {
        cfg.deterministic = true;
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_or_default(a.config.as_deref())?;
    apply_flags(&mut cfg, &a.flags);
    cfg.validate()?;
    snapshot(
        &a.out,
        "train",
        json!({ "data": a.data, "val_data": a.val_data, "resume": a.resume, "config": cfg }),
    )?;
    let dataset = load_annotations(&a.data)?;
    let data = match &a.val_data {
        Some(dir) => {
            let held_in = TrainConfig {
                val_fraction: 0.0,
                ..cfg.clone()
            };
            let mut data = prepare_data(dataset, &held_in)?;
            data.val = load_annotations(dir)?;
            data
        }
        None => prepare_data(dataset, &cfg)?,
    };
    let outcome = train_with_data(&cfg, &data, &a.out, a.resume.as_deref())?;
    println!(
        "{}",
        json!({
            "best_checkpoint": outcome.best_checkpoint,
            "last_checkpoint": outcome.last_checkpoint,
            "best_val_ap_slot": outcome.best_val_ap,
            "steps": outcome.steps,
        })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg: DetectConfig = load_or_default(a.config.as_deref())?;
    if let Some(i) = a.i_px {
        cfg.eval.i_px = i;
    }
    if let Some(b) = a.b_deg {
        cfg.eval.b_deg = b;
    }
    cfg.template.validate()?;
    let dataset = load_annotations(&a.data)?;
    let detections = match (&a.checkpoint, &a.detections) {
        (Some(ck), _) => {
            let (net, params, _) = load_teacher(ck)?;
            let images: Vec<_> = dataset.iter().map(|d| d.image.as_ref()).collect();
            detect_images(&net, &params, &images, &cfg.template)?
        }
        (None, Some(dir)) => dataset
            .iter()
            .map(|d| read_json::<Detections>(&dir.join(format!("{}.json", d.name))))
            .collect::<Result<Vec<_>>>()?,
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --detections".into())),
    };
    let report = evaluate(&dataset, &detections, &cfg.eval)?;
    if let Some(out) = &a.out {
        snapshot(
            out,
            "eval",
            json!({ "data": a.data, "checkpoint": a.checkpoint, "detections": a.detections, "config": cfg }),
        )?;
        write_json(&out.join("report.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn infer(a: InferArgs) -> Result<()> {
    let cfg: DetectConfig = load_or_default(a.config.as_deref())?;
    cfg.template.validate()?;
    let (net, params, _) = load_teacher(&a.checkpoint)?;
    snapshot(
        &a.out,
        "infer",
        json!({ "data": a.data, "checkpoint": a.checkpoint, "overlay": !a.no_overlay, "config": cfg }),
    )?;
    let files = png_files(&a.data)?;
    let images = files
        .iter()
        .map(|p| {
            image::open(p).map(|im| im.into_luma8()).map_err(|e| Error::Image {
                path: p.clone(),
                source: e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = images.iter().collect();
    let detections = detect_images(&net, &params, &refs, &cfg.template)?;
    for ((path, img), det) in files.iter().zip(&images).zip(&detections) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        write_json(&a.out.join(format!("{stem}.json")), det)?;
        if !a.no_overlay {
            let out = a.out.join(format!("{stem}_overlay.png"));
            crate::overlay::render(img, det).save(&out).map_err(|e| Error::Image { path: out, source: e })?;
        }
    }
    println!("{}", json!({ "images": files.len(), "out": a.out }));
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_or_default(a.config.as_deref())?;
    if let Some(n) = a.n_images {
        cfg.n_images = n;
    }
    if a.clean {
        cfg = cfg.clean();
    }
    let seed = a.seed.unwrap_or(0);
    cfg.validate()?;
    snapshot(&a.out, "synth", json!({ "seed": seed, "config": cfg }))?;
    let images = generate_synthetic(&cfg, seed)?;
    save_annotations(&a.out, &images)?;
    println!("{}", json!({ "images": images.len(), "out": a.out }));
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let stats = dataset_stats(&load_annotations(&a.data)?)?;
    if let Some(out) = &a.out {
        snapshot(out, "stats", json!({ "data": a.data }))?;
        write_json(&out.join("stats.json"), &stats)?;
    }
    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    Ok(())
}

fn parse_variant(name: &str) -> Result<Vec<Variant>> {
    let one = |v: Variant| Ok(vec![v]);
    let number = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number in variant {name}")));
    match name {
        "full" => Ok(full_grid()),
        "ss_psd" => one(Variant::ss_psd()),
        "supervised" => one(Variant::supervised()),
        "c" => one(Variant::consistency(ConsistencyMode::C)),
        "cg" => one(Variant::consistency(ConsistencyMode::Cg)),
        "cgm" => one(Variant::consistency(ConsistencyMode::Cgm)),
        "s_vat" => one(Variant::noise(NoiseSource::Student)),
        "t_vat" => one(Variant::noise(NoiseSource::Teacher)),
        "adaptive_vat" => one(Variant::noise(NoiseSource::Adaptive)),
        "no_vat" => one(Variant::noise(NoiseSource::None)),
        _ => {
            if let Some(t) = name.strip_prefix("tau=") {
                one(Variant::tau(number(t)?))
            } else if let Some(e) = name.strip_prefix("eps=") {
                one(Variant::eps(number(e)?))
            } else {
                Err(Error::Config(format!("unknown variant {name}")))
            }
        }
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut protocol: DeskProtocol = load_or_default(a.config.as_deref())?;
    apply_flags(&mut protocol.train, &a.flags);
    if let Some(seed) = a.flags.seed {
        protocol.seeds = vec![seed];
    }
    protocol.validate()?;
    let mut variants = Vec::new();
    for name in a.variants.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        variants.extend(parse_variant(name)?);
    }
    snapshot(&a.out, "ablate", json!({ "variants": a.variants, "protocol": protocol }))?;
    let data = protocol.generate()?;
    let mut results = Vec::new();
    for v in &variants {
        for &seed in &protocol.seeds {
            let dir = a.out.join("runs").join(format!("{}-seed{seed}", v.name.replace('=', "_")));
            let r = run_variant(&protocol, &data, v, seed, &dir)?;
            eprintln!("{} seed {seed}: AP_slot {:.4}", v.name, r.test_ap_slot);
            results.push(r);
            write_json(&a.out.join("results.json"), &results)?;
        }
    }
    let summaries = summarize(&results);
    let table = render_table(&summaries);
    fs::write(a.out.join("table.md"), &table).map_err(|e| Error::Io {
        path: a.out.join("table.md"),
        source: e,
    })?;
    write_json(&a.out.join("summary.json"), &summaries)?;
    print!("{table}");
    Ok(())
}
