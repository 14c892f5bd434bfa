//! Dice scoring, k-fold splits and the subset x fold x cell sweep.
//!
//! A sweep trains one network per (cell, subset, fold, repeat). Each run is
//! persisted as a small text file keyed by a SHA-256 fingerprint of
//! everything that determines it, so an interrupted sweep resumes where it
//! stopped and a changed config never reuses stale results.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{self, KeyValue};
use crate::error::{Error, Result};
use crate::imaging::{Grid, Mask};
use crate::network::{NetConfig, ParameterSet, UNet};
use crate::nn::Tensor;
use crate::synthdata::{derive_seed, rng_from_seed, Accuracy, DatasetManifest, SampleRecord};
use crate::training::{prepare_weights, stack_batch, train, Moi, TrainConfig};
use crate::weakmodels::InaccuracyModel;

/// Probabilities at or above this count as foreground.
pub const THRESHOLD: f32 = 0.5;

/// Images per forward pass when scoring.
const EVAL_BATCH: usize = 8;

/// `2|P ∩ G| / (|P| + |G|)`, with two empty masks scoring 1.
pub fn dsc(pred: &Mask, truth: &Mask) -> Result<f64> {
    if !pred.same_dims(truth) {
        return Err(Error::Shape(format!(
            "prediction is {:?} but truth is {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

pub fn binarize(probs: &Grid<f32>) -> Mask {
    probs.map(|p| (p >= THRESHOLD) as u8)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub id: usize,
    /// Sorted sample indices.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it into `k` folds whose sizes differ
/// by at most one; the first `n % k` folds get the extra sample.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!("{n} samples cannot fill {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for id in 0..k {
        let size = n / k + usize::from(id < n % k);
        let mut test = perm[start..start + size].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = perm[..start].iter().chain(&perm[start + size..]).copied().collect();
        train.sort_unstable();
        folds.push(Fold { id, train, test });
        start += size;
    }
    Ok(folds)
}

/// Test indices that are scored: oval annotations are not ground truth.
pub fn scored(test: &[usize], samples: &[SampleRecord]) -> Vec<usize> {
    test.iter().copied().filter(|&i| samples[i].flag == Accuracy::Accurate).collect()
}

/// Splits a manifest into the train and test manifests of one fold.
pub fn fold_manifests(manifest: &DatasetManifest, fold: &Fold) -> (DatasetManifest, DatasetManifest) {
    let pick = |idx: &[usize]| {
        let records: Vec<_> = idx.iter().map(|&i| manifest.records[i].clone()).collect();
        DatasetManifest {
            k_corrupted: records.iter().filter(|r| r.flag == Accuracy::Oval).count(),
            records,
            seed: manifest.seed,
            subset_id: manifest.subset_id,
        }
    };
    (pick(&fold.train), pick(&fold.test))
}

/// Foreground probabilities for each listed sample.
pub fn predict(net: &UNet, params: &[Tensor<f32>], samples: &[SampleRecord], indices: &[usize]) -> Result<Vec<Grid<f32>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let refs: Vec<&SampleRecord> = chunk.iter().map(|&i| &samples[i]).collect();
        let (x, _, _) = stack_batch(&refs)?;
        let (h, w) = refs[0].image.dims();
        let p = net.predict(params, &x)?;
        for plane in p.data().chunks_exact(h * w) {
            out.push(Grid::new(h, w, plane.to_vec())?);
        }
    }
    Ok(out)
}

/// `(index, dsc)` for each listed sample, predicted with `params`.
pub fn score(net: &UNet, params: &[Tensor<f32>], samples: &[SampleRecord], indices: &[usize]) -> Result<Vec<(usize, f64)>> {
    let probs = predict(net, params, samples, indices)?;
    indices
        .iter()
        .zip(&probs)
        .map(|(&i, p)| Ok((i, dsc(&binarize(p), &samples[i].mask)?)))
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold_id: Option<usize>,
    pub dsc: Vec<(usize, f64)>,
    /// `None` when no sample was scored.
    pub mean_dsc: Option<f64>,
    pub config_fingerprint: String,
}

impl FoldReport {
    pub fn new(fold_id: Option<usize>, dsc: Vec<(usize, f64)>, config_fingerprint: String) -> Self {
        let values: Vec<f64> = dsc.iter().map(|d| d.1).collect();
        let mean_dsc = (!values.is_empty()).then(|| mean(&values));
        FoldReport {
            fold_id,
            dsc,
            mean_dsc,
            config_fingerprint,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fold = self.fold_id.map_or("all".to_string(), |f| f.to_string());
        let _ = writeln!(s, "# fold = {fold}");
        let _ = writeln!(s, "# fingerprint = {}", self.config_fingerprint);
        match self.mean_dsc {
            Some(m) => {
                let _ = writeln!(s, "# mean_dsc = {m}");
            }
            None => s.push_str("# mean_dsc = none (no accurately labelled samples)\n"),
        }
        s.push_str("index,dsc\n");
        for (i, d) in &self.dsc {
            let _ = writeln!(s, "{i},{d}");
        }
        s
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the images, masks and flags of a dataset.
pub fn dataset_digest(samples: &[SampleRecord]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        let (rows, cols) = s.image.dims();
        h.update((rows as u64).to_le_bytes());
        h.update((cols as u64).to_le_bytes());
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
        h.update(s.mask.data());
        h.update(s.flag.as_str());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub folds: usize,
    pub grid: Vec<f64>,
    pub models: Vec<InaccuracyModel>,
    /// Independent training seeds per (subset, fold).
    pub repeats: usize,
    pub split_seed: u64,
    /// Runs trained concurrently.
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            folds: 5,
            grid: vec![1.0, 1.5, 2.0],
            models: vec![InaccuracyModel::Euclidean, InaccuracyModel::Mahalanobis],
            repeats: 1,
            split_seed: 0,
            workers: 1,
        }
    }
}

impl KeyValue for SweepConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "folds" => self.folds = config::value(key, value)?,
            "grid" => self.grid = config::list(key, value)?,
            "models" => self.models = config::list(key, value)?,
            "repeats" => self.repeats = config::value(key, value)?,
            "split_seed" => self.split_seed = config::value(key, value)?,
            "workers" => self.workers = config::value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("folds", self.folds.to_string()),
            ("grid", config::join(&self.grid)),
            ("models", config::join(&self.models)),
            ("repeats", self.repeats.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("workers", self.workers.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.grid.is_empty() || self.grid.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(Error::Config(format!("grid must be positive powers, got {:?}", self.grid)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the report: a weighting model and power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub moi: Moi,
    pub power_n: f64,
}

impl Cell {
    pub const BASELINE: Cell = Cell {
        moi: Moi::None,
        power_n: 1.0,
    };

    pub fn key(&self) -> String {
        match self.moi {
            Moi::None => "none".into(),
            m => format!("{m}-n{}", self.power_n),
        }
    }

    fn n_label(&self) -> String {
        match self.moi {
            Moi::None => "-".into(),
            _ => self.power_n.to_string(),
        }
    }
}

/// The baseline followed by every model x power combination.
pub fn sweep_cells(cfg: &SweepConfig) -> Vec<Cell> {
    let mut cells = vec![Cell::BASELINE];
    for &m in &cfg.models {
        for &n in &cfg.grid {
            cells.push(Cell {
                moi: Moi::Model(m),
                power_n: n,
            });
        }
    }
    cells
}

/// Training seed of a run. It does not depend on the cell, so every cell
/// sees the same initial weights, shuffles and augmentations.
pub fn run_seed(base: u64, subset: usize, fold: usize, repeat: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(base, subset as u64), fold as u64), repeat as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub cell: Cell,
    pub subset: usize,
    pub fold: usize,
    pub repeat: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub final_loss: f64,
    pub dsc: Vec<(usize, f64)>,
    /// Loaded from a previous sweep rather than trained now.
    pub cached: bool,
    /// Training plus scoring time when the run was computed.
    pub seconds: f64,
}

impl RunResult {
    /// Mean test DSC, or `None` if the fold held only ovals.
    pub fn mean_dsc(&self) -> Option<f64> {
        let v: Vec<f64> = self.dsc.iter().map(|d| d.1).collect();
        (!v.is_empty()).then(|| mean(&v))
    }

    fn file_name(&self) -> String {
        format!("s{}-f{}-r{}", self.subset, self.fold, self.repeat)
    }

    fn to_text(&self) -> String {
        let dsc: Vec<String> = self.dsc.iter().map(|(i, d)| format!("{i}:{d}")).collect();
        format!(
            "fingerprint = {}\nseed = {}\nfinal_loss = {}\ndsc = {}\n",
            self.fingerprint,
            self.seed,
            self.final_loss,
            dsc.join(",")
        )
    }

    /// Parses a stored run, returning `None` if it belongs to another config.
    fn from_text(text: &str, path: &Path, expect: &RunResult) -> Result<Option<RunResult>> {
        let bad = |m: String| Error::format(path, 0, m);
        let mut out = expect.clone();
        let mut seen_fp = false;
        for e in config::parse(text).map_err(|e| bad(e.to_string()))? {
            match e.key.as_str() {
                "fingerprint" => {
                    if e.value != expect.fingerprint {
                        return Ok(None);
                    }
                    seen_fp = true;
                }
                "seed" => out.seed = config::value(&e.key, &e.value).map_err(|e| bad(e.to_string()))?,
                "final_loss" => out.final_loss = config::value(&e.key, &e.value).map_err(|e| bad(e.to_string()))?,
                "dsc" => {
                    out.dsc = e
                        .value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|pair| {
                            let (i, d) = pair.split_once(':').ok_or_else(|| bad(format!("bad dsc entry `{pair}`")))?;
                            Ok((
                                i.trim().parse().map_err(|_| bad(format!("bad index `{i}`")))?,
                                d.trim().parse().map_err(|_| bad(format!("bad dsc `{d}`")))?,
                            ))
                        })
                        .collect::<Result<_>>()?;
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        if !seen_fp {
            return Err(bad("missing fingerprint".into()));
        }
        out.cached = true;
        Ok(Some(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: Cell,
    /// Runs contributing to the statistics.
    pub runs: usize,
    pub mean_dsc: f64,
    pub std_dsc: f64,
    /// Relative change of `mean_dsc` against the baseline row, in percent.
    pub improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunResult>,
}

pub const REPORT_HEADER: &str = "model,n,mean_dsc,std_dsc,improvement_pct";

impl SweepReport {
    /// Pools per-run mean DSC over subsets, folds and repeats for each cell.
    /// Runs whose test fold held only ovals carry no score and are skipped.
    pub fn from_runs(cells: &[Cell], runs: Vec<RunResult>) -> Result<Self> {
        let mut rows = Vec::with_capacity(cells.len());
        for cell in cells {
            let values: Vec<f64> = runs.iter().filter(|r| r.cell == *cell).filter_map(RunResult::mean_dsc).collect();
            if values.is_empty() {
                return Err(Error::InvalidState(format!("no scored runs for cell {}", cell.key())));
            }
            rows.push(SweepRow {
                cell: *cell,
                runs: values.len(),
                mean_dsc: mean(&values),
                std_dsc: std_dev(&values),
                improvement_pct: 0.0,
            });
        }
        if let Some(base) = rows.iter().find(|r| r.cell.moi == Moi::None).map(|r| r.mean_dsc) {
            for r in &mut rows {
                r.improvement_pct = (r.mean_dsc - base) / base * 100.0;
            }
        }
        Ok(SweepReport { rows, runs })
    }

    pub fn baseline(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.cell.moi == Moi::None)
    }

    /// Weighted row with the highest mean DSC.
    pub fn best_weighted(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.cell.moi != Moi::None)
            .max_by(|a, b| a.mean_dsc.total_cmp(&b.mean_dsc))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.4}",
                r.cell.moi,
                r.cell.n_label(),
                r.mean_dsc,
                r.std_dsc,
                r.improvement_pct
            );
        }
        s
    }

    /// Human-readable table. The spread is the sample standard deviation
    /// of per-run mean DSC, pooled over every subset, fold and repeat.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>4}  {:<18} {:>12}", "Model", "n", "DSC (mean ± std)", "Improvement");
        for r in &self.rows {
            let imp = match r.cell.moi {
                Moi::None => "-".to_string(),
                _ => format!("{:+.2}%", r.improvement_pct),
            };
            let _ = writeln!(
                s,
                "{:<8} {:>4}  {:<18} {:>12}",
                r.cell.moi.to_string(),
                r.cell.n_label(),
                format!("{:.4} ± {:.4}", r.mean_dsc, r.std_dsc),
                imp
            );
        }
        let runs = self.rows.first().map_or(0, |r| r.runs);
        let _ = writeln!(s, "std pooled over {runs} subset x fold x repeat runs per row");
        s
    }
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Everything a single run depends on, hashed.
fn run_fingerprint(net: &NetConfig, train: &TrainConfig, fold: &Fold, data: &str) -> String {
    let text = format!(
        "[net]\n{}[train]\n{}[fold]\ntrain = {}\ntest = {}\n[data]\n{data}\n",
        net.to_text(),
        train.to_text(),
        config::join(&fold.train),
        config::join(&fold.test)
    );
    sha256_hex(text.as_bytes())
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Job {
    cell_index: usize,
    subset: usize,
    fold: usize,
    repeat: usize,
}

/// Runs (or resumes) the full protocol: for every corrupted subset, every
/// cell and every fold, train on the fold's training part with the cell's
/// weighting and score the EMA weights on the accurately labelled test
/// samples.
///
/// With `store`, each finished run is written to
/// `store/<cell>/s<subset>-f<fold>-r<repeat>.run` and reused on the next
/// call if its fingerprint still matches. Wall time per run goes to a
/// `.time` sidecar, which is the only non-reproducible output.
pub fn run_sweep(
    subsets: &[Vec<SampleRecord>],
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    sweep: &SweepConfig,
    store: Option<&Path>,
    progress: impl Fn(&RunResult) + Sync,
) -> Result<SweepReport> {
    sweep.validate()?;
    train_cfg.validate()?;
    let Some(first) = subsets.first() else {
        return Err(Error::Config("sweep needs at least one subset".into()));
    };
    if subsets.iter().any(|s| s.len() != first.len()) {
        return Err(Error::Config("subsets differ in size".into()));
    }
    let folds = kfold_split(first.len(), sweep.folds, sweep.split_seed)?;
    let cells = sweep_cells(sweep);
    let digests: Vec<String> = subsets.iter().map(|s| dataset_digest(s)).collect();
    // weighted copies per (subset, cell)
    let weighted: Vec<Vec<Vec<SampleRecord>>> = subsets
        .iter()
        .map(|s| {
            cells
                .iter()
                .map(|c| prepare_weights(s, c.moi, c.power_n, train_cfg.moi_epsilon))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = store {
        for c in &cells {
            let d = dir.join(c.key());
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }

    let mut jobs = Vec::new();
    for subset in 0..subsets.len() {
        for fold in 0..folds.len() {
            for repeat in 0..sweep.repeats {
                for cell_index in 0..cells.len() {
                    jobs.push(Job {
                        cell_index,
                        subset,
                        fold,
                        repeat,
                    });
                }
            }
        }
    }

    let run_one = |job: &Job| -> Result<RunResult> {
        let cell = cells[job.cell_index];
        let fold = &folds[job.fold];
        let cfg = TrainConfig {
            moi: cell.moi,
            power_n: cell.power_n,
            seed: run_seed(train_cfg.seed, job.subset, job.fold, job.repeat),
            ..train_cfg.clone()
        };
        let mut result = RunResult {
            cell,
            subset: job.subset,
            fold: job.fold,
            repeat: job.repeat,
            seed: cfg.seed,
            fingerprint: run_fingerprint(net_cfg, &cfg, fold, &digests[job.subset]),
            final_loss: f64::NAN,
            dsc: Vec::new(),
            cached: false,
            seconds: 0.0,
        };
        let path: Option<PathBuf> = store.map(|d| d.join(cell.key()).join(format!("{}.run", result.file_name())));
        if let Some(p) = path.as_deref().filter(|p| p.exists()) {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            if let Some(mut r) = RunResult::from_text(&text, p, &result)? {
                r.seconds = fs::read_to_string(p.with_extension("time"))
                    .ok()
                    .and_then(|t| t.trim().parse().ok())
                    .unwrap_or(f64::NAN);
                progress(&r);
                return Ok(r);
            }
        }
        let started = Instant::now();
        let samples = &weighted[job.subset][job.cell_index];
        let train_set: Vec<SampleRecord> = fold.train.iter().map(|&i| samples[i].clone()).collect();
        let outcome = train(&train_set, net_cfg, &cfg, |_| {})?;
        result.final_loss = outcome.log.last().map_or(f64::NAN, |r| r.loss);
        let net = UNet::new(&outcome.net)?;
        result.dsc = score(&net, outcome.params.shadow(), samples, &scored(&fold.test, samples))?;
        result.seconds = started.elapsed().as_secs_f64();
        if let Some(p) = &path {
            write_atomic(p, &result.to_text())?;
            write_atomic(&p.with_extension("time"), &format!("{}\n", result.seconds))?;
        }
        progress(&result);
        Ok(result)
    };

    let runs: Vec<RunResult> = if sweep.workers == 1 {
        jobs.iter().map(run_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(sweep.workers)
            .build()
            .map_err(|e| Error::InvalidState(format!("cannot start worker pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_one).collect::<Result<_>>())?
    };
    SweepReport::from_runs(&cells, runs)
}

/// Scores `params` (normally the EMA shadow) on the accurate samples among
/// `indices`.
pub fn evaluate_params(
    net_cfg: &NetConfig,
    params: &ParameterSet<f32>,
    samples: &[SampleRecord],
    indices: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let net = UNet::new(net_cfg)?;
    net.check_params(params)?;
    score(&net, params.shadow(), samples, &scored(indices, samples))
}
