use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use wsseg::evaluation::{self, kfold_split, sha256_hex, FoldReport, RunResult};
use wsseg::imaging::{self, Grid};
use wsseg::network::{self, NetConfig};
use wsseg::synthdata::{
    corrupt_indices, fit_oval, Accuracy, DatasetManifest, DatasetSpec, ManifestRecord, SampleRecord, OVAL_SCALE,
};
use wsseg::training::{self, prepare_weights, Moi};
use wsseg::weakmodels::{power_transform, InaccuracyModel};
use wsseg::{Error, Result};

use crate::run_config::RunConfig;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn subset_manifest_name(subset: usize) -> String {
    format!("subset{subset}.manifest")
}

/// Writes phantoms, accurate masks, the ovals used by any subset, one
/// manifest per subset and a generation log.
pub fn gen(spec: &DatasetSpec, out: &Path) -> Result<()> {
    let phantoms = spec.phantoms()?;
    for sub in ["images", "truth", "ovals"] {
        create_dir(&out.join(sub))?;
    }
    let chosen: Vec<Vec<usize>> = (0..spec.subsets)
        .map(|s| corrupt_indices(spec.samples, spec.k, spec.seed, s, spec.subsets))
        .collect::<Result<_>>()?;

    let mut log = String::from("index,lesions,lesion_fraction,oval_subsets,oval_scale,oval_bbox_fallback\n");
    for (i, p) in phantoms.iter().enumerate() {
        imaging::write_pfm(out.join(format!("images/{i:03}.pfm")), &p.image)?;
        imaging::write_pgm(out.join(format!("truth/{i:03}.pgm")), &p.truth)?;
        let subsets: Vec<String> = (0..spec.subsets)
            .filter(|&s| chosen[s].contains(&i))
            .map(|s| s.to_string())
            .collect();
        let (scale, fallback) = if subsets.is_empty() {
            (String::from("-"), String::from("-"))
        } else {
            let fit = fit_oval(&p.truth, OVAL_SCALE)?;
            imaging::write_pgm(out.join(format!("ovals/{i:03}.pgm")), &fit.mask)?;
            (format!("{:.4}", fit.scale), fit.bounding_box_fallback.to_string())
        };
        let _ = writeln!(
            log,
            "{i},{},{:.5},{},{scale},{fallback}",
            p.lesions.len(),
            p.lesion_fraction(),
            if subsets.is_empty() { "-".into() } else { subsets.join(" ") },
        );
    }
    for (s, idx) in chosen.iter().enumerate() {
        let records = (0..spec.samples)
            .map(|i| {
                let oval = idx.contains(&i);
                ManifestRecord {
                    index: i,
                    image_path: PathBuf::from(format!("images/{i:03}.pfm")),
                    mask_path: PathBuf::from(if oval {
                        format!("ovals/{i:03}.pgm")
                    } else {
                        format!("truth/{i:03}.pgm")
                    }),
                    flag: if oval { Accuracy::Oval } else { Accuracy::Accurate },
                    weight_path: None,
                }
            })
            .collect();
        let m = DatasetManifest {
            records,
            k_corrupted: spec.k,
            seed: spec.seed,
            subset_id: s,
        };
        m.write(out.join(subset_manifest_name(s)))?;
    }
    write_text(&out.join("gen.log"), &log)?;
    let mut echo = String::new();
    for (k, v) in wsseg::config::KeyValue::entries(spec) {
        let _ = writeln!(echo, "{k} = {v}");
    }
    write_text(&out.join("gen.cfg"), &echo)
}

pub struct WeightsArgs<'a> {
    pub manifest: &'a Path,
    pub model: InaccuracyModel,
    pub power: f64,
    pub epsilon: f64,
    pub out_manifest: Option<&'a Path>,
}

/// Writes one confidence map per record and points the manifest at them.
/// Returns how many oval masks needed a fallback.
pub fn weights(args: &WeightsArgs) -> Result<usize> {
    if !(args.power > 0.0 && args.power.is_finite()) {
        return Err(Error::InvalidArgument(format!("power must be positive, got {}", args.power)));
    }
    let mut manifest = DatasetManifest::read(args.manifest)?;
    let base = base_dir(args.manifest);
    let stem = args.manifest.file_stem().map_or("manifest".into(), |s| s.to_string_lossy().into_owned());
    let rel_dir = PathBuf::from("weights").join(format!("{stem}-{}-n{}", args.model, args.power));
    create_dir(&base.join(&rel_dir))?;
    let mut fallbacks = 0;
    for r in &mut manifest.records {
        let mask = imaging::read_pgm(base.join(&r.mask_path))
            .map_err(|e| Error::InvalidInput(format!("record {}: {e}", r.index)))?;
        let map = match r.flag {
            Accuracy::Oval => {
                let w = args.model.weights(&mask, args.epsilon)?;
                fallbacks += usize::from(w.fallback.is_some());
                power_transform(&w.map, args.power)?
            }
            Accuracy::Accurate => Grid::filled(mask.height(), mask.width(), 1.0),
        };
        let rel = rel_dir.join(format!("{:03}.pfm", r.index));
        imaging::write_pfm(base.join(&rel), &map)?;
        r.weight_path = Some(rel);
    }
    manifest.write(args.out_manifest.unwrap_or(args.manifest))?;
    Ok(fallbacks)
}

fn load_manifest_samples(path: &Path) -> Result<(DatasetManifest, Vec<SampleRecord>)> {
    let m = DatasetManifest::read(path)?;
    let samples = m.load_samples(&base_dir(path))?;
    Ok((m, samples))
}

/// Indices to use for training (`test == false`) or scoring.
fn fold_indices(cfg: &RunConfig, n: usize, test: bool) -> Result<Vec<usize>> {
    match cfg.fold {
        None => Ok((0..n).collect()),
        Some(f) => {
            let folds = kfold_split(n, cfg.sweep.folds, cfg.sweep.split_seed)?;
            Ok(if test { folds[f].test.clone() } else { folds[f].train.clone() })
        }
    }
}

/// Trains on the manifest (or one fold of it). Stored weight maps are used
/// when the manifest has them; otherwise maps are computed from `moi`,
/// `power_n` and `moi_epsilon`.
pub fn train(cfg: &RunConfig, verbose: bool) -> Result<()> {
    let Some(manifest) = &cfg.manifest else {
        return Err(Error::Config("train needs a manifest (--manifest or `manifest = ...`)".into()));
    };
    let (m, mut samples) = load_manifest_samples(manifest)?;
    let has_maps = m.records.iter().all(|r| r.weight_path.is_some());
    if cfg.train.moi != Moi::None && !has_maps {
        samples = prepare_weights(&samples, cfg.train.moi, cfg.train.power_n, cfg.train.moi_epsilon)?;
    }
    let idx = fold_indices(cfg, samples.len(), false)?;
    let train_set: Vec<SampleRecord> = idx.iter().map(|&i| samples[i].clone()).collect();
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join("run.cfg"), &cfg.echo())?;
    let outcome = training::train(&train_set, &cfg.net, &cfg.train, |r| {
        if verbose {
            eprintln!("epoch {} lr {:.3e} loss {:.6}", r.epoch, r.lr, r.loss);
        }
    })?;
    network::save_params(cfg.out.join("model.ckpt"), &outcome.net, &outcome.params)?;
    write_text(&cfg.out.join("train.log"), &training::format_log(&outcome.log))
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub fold: Option<usize>,
    pub folds: usize,
    pub split_seed: u64,
    pub out: Option<&'a Path>,
}

/// Scores the checkpoint's EMA weights on the manifest's accurate records.
pub fn eval(args: &EvalArgs) -> Result<FoldReport> {
    let bytes = fs::read(args.checkpoint).map_err(|e| Error::Io {
        path: args.checkpoint.to_path_buf(),
        source: e,
    })?;
    let (net_cfg, params): (NetConfig, _) = network::decode_checkpoint(&bytes, args.checkpoint)?;
    let manifest_text = fs::read(args.manifest).map_err(|e| Error::Io {
        path: args.manifest.to_path_buf(),
        source: e,
    })?;
    let (_, samples) = load_manifest_samples(args.manifest)?;
    let indices: Vec<usize> = match args.fold {
        None => (0..samples.len()).collect(),
        Some(f) => {
            let folds = kfold_split(samples.len(), args.folds, args.split_seed)?;
            folds
                .get(f)
                .ok_or_else(|| Error::Config(format!("fold {f} out of range for {} folds", args.folds)))?
                .test
                .clone()
        }
    };
    let dsc = evaluation::evaluate_params(&net_cfg, &params, &samples, &indices)?;
    let mut key = bytes;
    key.extend_from_slice(&manifest_text);
    key.extend_from_slice(format!("fold={:?} folds={} split_seed={}", args.fold, args.folds, args.split_seed).as_bytes());
    let report = FoldReport::new(args.fold, dsc, sha256_hex(&key));
    if let Some(dir) = args.out {
        create_dir(dir)?;
        write_text(&dir.join("eval.csv"), &report.to_text())?;
    }
    Ok(report)
}

/// Subsets from a `gen` directory, or generated in memory from the
/// dataset keys.
pub fn sweep_subsets(cfg: &RunConfig) -> Result<Vec<Vec<SampleRecord>>> {
    match &cfg.data {
        Some(dir) => (0..cfg.dataset.subsets)
            .map(|s| load_manifest_samples(&dir.join(subset_manifest_name(s))).map(|(_, v)| v))
            .collect(),
        None => cfg.dataset.build_subsets(),
    }
}

pub fn sweep(cfg: &RunConfig, verbose: bool) -> Result<evaluation::SweepReport> {
    let subsets = sweep_subsets(cfg)?;
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join("run.cfg"), &cfg.echo())?;
    let total = evaluation::sweep_cells(&cfg.sweep).len() * subsets.len() * cfg.sweep.folds * cfg.sweep.repeats;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let report = evaluation::run_sweep(
        &subsets,
        &cfg.net,
        &cfg.train,
        &cfg.sweep,
        Some(&cfg.out.join("runs")),
        |r: &RunResult| {
            let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if verbose {
                let dsc = r.mean_dsc().map_or("-".into(), |d| format!("{d:.4}"));
                let how = if r.cached { "cached".to_string() } else { format!("{:.1}s", r.seconds) };
                eprintln!(
                    "[{k}/{total}] {} subset {} fold {} repeat {}: dsc {dsc} loss {:.5} ({how})",
                    r.cell.key(),
                    r.subset,
                    r.fold,
                    r.repeat,
                    r.final_loss
                );
            }
        },
    )?;
    write_text(&cfg.out.join("report.csv"), &report.to_csv())?;
    write_text(&cfg.out.join("report.txt"), &report.to_table())?;
    Ok(report)
}
