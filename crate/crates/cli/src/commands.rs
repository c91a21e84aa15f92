//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use vesselnext::pipeline::io::{read_image, write_atomic, write_mask_png, write_pgm16};
use vesselnext::pipeline::{binarize, preprocess, FundusSample, Manifest, Record, Split};
use vesselnext::trainer::{evaluate, fit, history_csv, segment, Checkpoint, FitState, TrainImage};
use vesselnext::{Model, ModelConfig};

use crate::config::{model_mismatches, Overrides, RunConfig};
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| vesselnext::Error::io(dir, e).into())
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let path = cfg.manifest()?;
    Manifest::load(path).map_err(|e| CliError::Usage(format!("cannot load manifest: {e}")))
}

fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<FundusSample>, CliError> {
    manifest
        .split(split)
        .par_iter()
        .map(|r| r.load().map_err(CliError::from))
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serialises");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

#[derive(Serialize)]
struct PreprocessEntry {
    split: String,
    id: String,
    source: PathBuf,
    output: PathBuf,
    height: usize,
    width: usize,
    degenerate: bool,
}

#[derive(Serialize)]
struct PreprocessLog<'a> {
    preprocess: &'a vesselnext::pipeline::PreprocessConfig,
    images: Vec<PreprocessEntry>,
}

pub fn preprocess_cmd(o: &Overrides, only: Option<Split>) -> Result<(), CliError> {
    let cfg = o.resolve()?;
    let manifest = load_manifest(&cfg)?;
    let out = cfg.out_dir();
    let splits: Vec<Split> = match only {
        Some(s) => vec![s],
        None => vec![Split::Train, Split::Val, Split::Test],
    };
    let jobs: Vec<(Split, &Record)> = splits
        .iter()
        .flat_map(|&s| manifest.split(s).iter().map(move |r| (s, r)))
        .collect();
    if jobs.is_empty() {
        return Err(CliError::Usage("manifest lists no images".into()));
    }
    for s in &splits {
        create_dir(&out.join("preprocessed").join(s.to_string()))?;
    }
    let results: Vec<Result<PreprocessEntry, String>> = jobs
        .par_iter()
        .map(|&(split, r)| {
            let run = || -> vesselnext::Result<PreprocessEntry> {
                let image = read_image(&r.image)?;
                let prepared = preprocess(&image, &cfg.preprocess)?;
                let output = out.join("preprocessed").join(split.to_string()).join(format!("{}.pgm", r.id));
                write_pgm16(&output, &prepared.image)?;
                Ok(PreprocessEntry {
                    split: split.to_string(),
                    id: r.id.clone(),
                    source: r.image.clone(),
                    output,
                    height: prepared.image.height(),
                    width: prepared.image.width(),
                    degenerate: prepared.degenerate,
                })
            };
            run().map_err(|e| e.to_string())
        })
        .collect();
    let mut images = Vec::new();
    let mut failed = 0;
    for r in results {
        match r {
            Ok(entry) => images.push(entry),
            Err(msg) => {
                eprintln!("error: {msg}");
                failed += 1;
            }
        }
    }
    write_json(
        &out.join("preprocess_log.json"),
        &PreprocessLog {
            preprocess: &cfg.preprocess,
            images,
        },
    )?;
    info!("preprocessed {} of {} images into {}", jobs.len() - failed, jobs.len(), out.display());
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} image(s) could not be preprocessed")));
    }
    Ok(())
}

fn train_images(cfg: &RunConfig, samples: &[FundusSample]) -> Result<Vec<TrainImage>, CliError> {
    samples
        .par_iter()
        .map(|s| {
            let truth = s
                .truth
                .clone()
                .ok_or_else(|| CliError::Usage(format!("{}: training needs a truth mask", s.id)))?;
            let image = preprocess(&s.image, &cfg.preprocess)?.image;
            Ok(TrainImage { image, truth })
        })
        .collect()
}

pub fn train_cmd(o: &Overrides, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = o.resolve()?;
    let manifest = load_manifest(&cfg)?;
    let out = cfg.out_dir();
    let (mut model, start) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path, cfg.train.adam())?;
            check_architecture(o, &cfg, ckpt.model.config())?;
            let adam = ckpt.adam.ok_or_else(|| {
                CliError::Usage(format!("{}: checkpoint has no optimiser state to resume from", path.display()))
            })?;
            info!("resuming after epoch {}", ckpt.epoch);
            let state = FitState {
                adam,
                epoch: ckpt.epoch,
                best_val_loss: ckpt.best_val_loss,
            };
            (ckpt.model, Some(state))
        }
        None => {
            let model_cfg = cfg.model.clone().unwrap_or_default();
            (Model::build(model_cfg, cfg.train.seed)?, None)
        }
    };
    let train = train_images(&cfg, &load_split(&manifest, Split::Train)?)?;
    let val = train_images(&cfg, &load_split(&manifest, Split::Val)?)?;
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Usage("training needs non-empty train and val splits".into()));
    }
    create_dir(&out)?;
    let mut effective = cfg.clone();
    effective.model = Some(model.config().clone());
    write_json(&out.join("config.json"), &effective)?;
    let cost = model.cost()?;
    write_atomic(out.join("cost.csv"), cost.to_csv().as_bytes())?;
    write_atomic(out.join("cost.txt"), cost.to_string().as_bytes())?;

    info!(
        "training on {} images ({} val), {} steps per epoch",
        train.len(),
        val.len(),
        cfg.train.steps_per_epoch(train.len())
    );
    let mut history = Vec::new();
    let history_path = out.join("history.csv");
    let report = fit(&mut model, &train, &val, &cfg.train, start, |rec, _| {
        info!("epoch {}: train {:.5}, val {:.5}", rec.epoch, rec.train_loss, rec.val_loss);
        history.push(rec.clone());
        write_atomic(&history_path, history_csv(&history).as_bytes())
    })?;
    if report.stopped_early {
        info!("stopped early; best epoch {}", report.best_epoch);
    }
    Checkpoint {
        model,
        adam: Some(report.state.adam),
        epoch: report.state.epoch,
        best_val_loss: report.best_val_loss,
    }
    .save(out.join("checkpoint.tunx"))?;
    info!("best val loss {:.5} at epoch {}", report.best_val_loss, report.best_epoch);
    Ok(())
}

/// Refuses architecture flags or config entries that contradict the
/// checkpoint.
fn check_architecture(o: &Overrides, cfg: &RunConfig, stored: &ModelConfig) -> Result<(), CliError> {
    let mut requested = cfg.model.clone().unwrap_or_else(|| stored.clone());
    o.apply_model(&mut requested);
    let diffs = model_mismatches(&requested, stored);
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "checkpoint does not match the requested model: {}",
            diffs.join("; ")
        )))
    }
}

fn load_checkpoint(o: &Overrides, cfg: &RunConfig, path: &Path) -> Result<Model, CliError> {
    let ckpt = Checkpoint::load(path, cfg.train.adam())?;
    check_architecture(o, cfg, ckpt.model.config())?;
    Ok(ckpt.model)
}

pub fn segment_cmd(o: &Overrides, checkpoint: &Path, image: &Path) -> Result<(), CliError> {
    let cfg = o.resolve()?;
    let model = load_checkpoint(o, &cfg, checkpoint)?;
    let raw = read_image(image)?;
    let prepared = preprocess(&raw, &cfg.preprocess)?;
    let prob = segment(&model, &prepared.image, &cfg.inference)?;
    let mask = binarize(&prob, cfg.inference.threshold);
    let out = cfg.out_dir();
    create_dir(&out)?;
    let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    write_pgm16(out.join(format!("{stem}_prob.pgm")), &prob)?;
    write_mask_png(out.join(format!("{stem}_mask.png")), &mask)?;
    info!("{stem}: {}×{} segmented into {}", prob.height(), prob.width(), out.display());
    Ok(())
}

pub fn eval_cmd(o: &Overrides, checkpoint: &Path, split: Split) -> Result<(), CliError> {
    let cfg = o.resolve()?;
    let manifest = load_manifest(&cfg)?;
    let model = load_checkpoint(o, &cfg, checkpoint)?;
    let samples = load_split(&manifest, split)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("the {split} split is empty")));
    }
    let report = evaluate(&model, &samples, &cfg.preprocess, &cfg.inference, &cfg.cal)?;
    let out = cfg.out_dir();
    let maps = out.join("eval");
    create_dir(&maps)?;
    for im in &report.images {
        write_pgm16(maps.join(format!("{}_prob.pgm", im.id)), &im.probability)?;
        write_mask_png(maps.join(format!("{}_mask.png", im.id)), &im.mask)?;
    }
    write_atomic(out.join("metrics.csv"), report.metrics_csv().as_bytes())?;
    write_atomic(out.join("roc.csv"), report.roc.to_csv().as_bytes())?;
    write_atomic(out.join("cal.csv"), report.cal_csv().as_bytes())?;
    if !report.roc.defined {
        warn!("pooled AUC undefined: the truth has a single class");
    }
    println!("{}", report.metrics_csv().lines().last().unwrap_or_default());
    Ok(())
}

pub fn cost_cmd(o: &Overrides) -> Result<(), CliError> {
    let cfg = o.resolve()?;
    let model = Model::build(cfg.model.clone().unwrap_or_default(), cfg.train.seed)?;
    let report = model.cost()?;
    print!("{report}");
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        write_atomic(out.join("cost.csv"), report.to_csv().as_bytes())?;
    }
    Ok(())
}
