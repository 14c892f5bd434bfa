//! Synthetic phantoms, oval annotation corruption and joint augmentation.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::{self, KeyValue};
use crate::error::{Error, Result};
use crate::imaging::{self, Grid, Image, Mask, WeightMap};

/// Radius multiplier (in standard deviations) applied to fitted ovals.
pub const OVAL_SCALE: f64 = 2.2;
/// Minimum fraction of the true lesion an oval must cover.
pub const OVAL_MIN_COVERAGE: f64 = 0.99;

const MIN_LESION_FRACTION: f64 = 0.005;
const MAX_LESION_FRACTION: f64 = 0.15;

/// Mixes a base seed with an index (splitmix64 finaliser), so per-item
/// streams do not depend on iteration order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseParams {
    pub center: (f64, f64),
    /// Semi-axes `(a, b)` in pixels.
    pub axes: (f64, f64),
    /// Rotation in radians.
    pub angle: f64,
}

impl EllipseParams {
    /// Normalised radius of `(r, c)`: below 1 inside the ellipse.
    fn radius_at(&self, r: f64, c: f64) -> f64 {
        let (s, co) = self.angle.sin_cos();
        let dr = r - self.center.0;
        let dc = c - self.center.1;
        let u = (dr * co + dc * s) / self.axes.0;
        let v = (-dr * s + dc * co) / self.axes.1;
        (u * u + v * v).sqrt()
    }
}

/// A lesion blob: union of jittered ellipses sharing one intensity offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub components: Vec<EllipseParams>,
    pub intensity_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Image,
    pub truth: Mask,
    pub lesions: Vec<Lesion>,
}

impl Phantom {
    pub fn lesion_fraction(&self) -> f64 {
        self.truth.foreground_count() as f64 / self.truth.len() as f64
    }
}

/// Deterministic brain-like phantom of `size x size` pixels.
///
/// The image is an elliptical head with a bright rim, smooth texture, one to
/// three darker lesion blobs and additive Gaussian noise, min-max normalised
/// to `[0, 1]`. `truth` marks exactly the lesion pixels.
pub fn generate_phantom(seed: u64, size: usize) -> Result<Phantom> {
    if size < 32 {
        return Err(Error::InvalidArgument(format!(
            "phantom size must be at least 32, got {size}"
        )));
    }
    for attempt in 0u64.. {
        let p = phantom_attempt(derive_seed(seed, attempt), size)?;
        let frac = p.lesion_fraction();
        if (MIN_LESION_FRACTION..=MAX_LESION_FRACTION).contains(&frac) {
            return Ok(p);
        }
    }
    unreachable!()
}

fn phantom_attempt(seed: u64, size: usize) -> Result<Phantom> {
    let mut rng = rng_from_seed(seed);
    let n = size as f64;
    let mid = (n - 1.0) / 2.0;
    let head = EllipseParams {
        center: (mid + rng.random_range(-1.5..1.5), mid + rng.random_range(-1.5..1.5)),
        axes: (n * rng.random_range(0.38..0.44), n * rng.random_range(0.31..0.37)),
        angle: rng.random_range(-0.3..0.3),
    };

    let fr = rng.random_range(0.08..0.2);
    let fc = rng.random_range(0.08..0.2);
    let (ph1, ph2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let white = Grid::from_fn(size, size, |_, _| rng.random_range(-1.0..1.0));
    let blotches = imaging::gaussian_blur(&white, 3.0);
    let blotch_scale = {
        let m = blotches.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if m > 0.0 {
            0.05 / m
        } else {
            0.0
        }
    };

    let n_lesions = rng.random_range(1..=3usize);
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let rho = rng.random_range(0.0..0.6f64).sqrt();
        let theta = rng.random_range(0.0..2.0 * PI);
        let (st, ct) = theta.sin_cos();
        let center = (
            head.center.0 + rho * head.axes.0 * st * 0.85,
            head.center.1 + rho * head.axes.1 * ct * 0.85,
        );
        let base = rng.random_range(3.0..7.0) * n / 64.0;
        let n_comp = rng.random_range(2..=4usize);
        let components = (0..n_comp)
            .map(|_| EllipseParams {
                center: (
                    center.0 + rng.random_range(-0.6..0.6) * base,
                    center.1 + rng.random_range(-0.6..0.6) * base,
                ),
                axes: (base * rng.random_range(0.45..1.0), base * rng.random_range(0.45..1.0)),
                angle: rng.random_range(0.0..PI),
            })
            .collect();
        lesions.push(Lesion {
            components,
            intensity_delta: -rng.random_range(0.14..0.22),
        });
    }

    let noise = Normal::new(0.0, 0.025).expect("valid normal");
    let mut truth = Grid::filled(size, size, 0u8);
    let mut raw = Grid::filled(size, size, 0f32);
    for r in 0..size {
        for c in 0..size {
            let (rf, cf) = (r as f64, c as f64);
            let rho = head.radius_at(rf, cf);
            let mut v = if rho > 1.0 {
                0.0
            } else if rho > 0.9 {
                0.95
            } else {
                0.55 + 0.06 * (fr * rf + ph1).sin() * (fc * cf + ph2).cos()
                    + blotch_scale * blotches.get(r, c)
            };
            if rho <= 0.85 {
                if let Some(l) = lesions
                    .iter()
                    .find(|l| l.components.iter().any(|e| e.radius_at(rf, cf) <= 1.0))
                {
                    v += l.intensity_delta;
                    truth.set(r, c, 1);
                }
            }
            v += noise.sample(&mut rng);
            raw.set(r, c, v as f32);
        }
    }
    let image = imaging::minmax_normalize(&raw)?;
    Ok(Phantom {
        image,
        truth,
        lesions,
    })
}

/// Generates `n` phantoms with per-sample seeds `derive_seed(seed, i)`.
pub fn generate_phantoms(n: usize, size: usize, seed: u64) -> Result<Vec<Phantom>> {
    (0..n)
        .into_par_iter()
        .map(|i| generate_phantom(derive_seed(seed, i as u64), size))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvalFit {
    pub mask: Mask,
    /// Set when the foreground was degenerate and a bounding box was used.
    pub bounding_box_fallback: bool,
    /// Radius multiplier actually used (at least the requested scale).
    pub scale: f64,
}

/// Coarse elliptical annotation of `truth`.
///
/// The ellipse is centred on the foreground centroid with axes along the
/// eigenvectors of the foreground index covariance and radii `scale`
/// standard deviations. If that covers less than 99% of the foreground the
/// scale is grown to the 99th percentile of the pixels' normalised radii.
pub fn fit_oval(truth: &Mask, scale: f64) -> Result<OvalFit> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("oval scale must be positive, got {scale}")));
    }
    let pixels = truth.foreground();
    let bbox = || OvalFit {
        mask: bounding_box(truth, &pixels),
        bounding_box_fallback: true,
        scale,
    };
    if pixels.len() < 3 {
        return Ok(bbox());
    }
    let n = pixels.len() as f64;
    let mr = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mc = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
    for &(r, c) in &pixels {
        let dr = r as f64 - mr;
        let dc = c as f64 - mc;
        a += dr * dr;
        b += dr * dc;
        d += dc * dc;
    }
    a /= n - 1.0;
    b /= n - 1.0;
    d /= n - 1.0;
    let half_tr = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (half_tr + disc, half_tr - disc);
    if !(l2 > 1e-9 * l1) {
        return Ok(bbox());
    }
    let theta = 0.5 * (2.0 * b).atan2(a - d);
    let (s, co) = theta.sin_cos();
    let radius = |r: f64, c: f64| {
        let dr = r - mr;
        let dc = c - mc;
        let u = dr * co + dc * s;
        let v = -dr * s + dc * co;
        (u * u / l1 + v * v / l2).sqrt()
    };

    let mut q: Vec<f64> = pixels.iter().map(|&(r, c)| radius(r as f64, c as f64)).collect();
    q.sort_by(f64::total_cmp);
    let need = ((OVAL_MIN_COVERAGE * n).ceil() as usize).clamp(1, q.len());
    let scale_used = scale.max(q[need - 1]);
    let limit = scale_used * (1.0 + 1e-12);
    let mask = Grid::from_fn(truth.height(), truth.width(), |r, c| {
        (radius(r as f64, c as f64) <= limit) as u8
    });
    Ok(OvalFit {
        mask,
        bounding_box_fallback: false,
        scale: scale_used,
    })
}

fn bounding_box(truth: &Mask, pixels: &[(usize, usize)]) -> Mask {
    let mut out = Grid::filled(truth.height(), truth.width(), 0u8);
    if pixels.is_empty() {
        return out;
    }
    let r0 = pixels.iter().map(|p| p.0).min().unwrap();
    let r1 = pixels.iter().map(|p| p.0).max().unwrap();
    let c0 = pixels.iter().map(|p| p.1).min().unwrap();
    let c1 = pixels.iter().map(|p| p.1).max().unwrap();
    for r in r0..=r1 {
        for c in c0..=c1 {
            out.set(r, c, 1);
        }
    }
    out
}

/// Whether a sample's mask is the precise annotation or a coarse oval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Accuracy {
    Accurate,
    Oval,
}

impl Accuracy {
    pub fn as_str(self) -> &'static str {
        match self {
            Accuracy::Accurate => "accurate",
            Accuracy::Oval => "oval",
        }
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Accuracy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accurate" => Ok(Accuracy::Accurate),
            "oval" => Ok(Accuracy::Oval),
            other => Err(Error::InvalidInput(format!("unknown accuracy flag {other:?}"))),
        }
    }
}

/// One training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: Image,
    pub mask: Mask,
    pub weights: WeightMap,
    pub flag: Accuracy,
}

impl SampleRecord {
    /// Accurate sample with all-ones weights.
    pub fn accurate(image: Image, mask: Mask) -> Result<Self> {
        imaging::check_dims(&image, &mask, "image vs mask")?;
        let weights = Grid::filled(image.height(), image.width(), 1.0);
        Ok(SampleRecord {
            image,
            mask,
            weights,
            flag: Accuracy::Accurate,
        })
    }
}

/// Indices whose masks are replaced for corrupted subset `subset_id`.
///
/// All subsets slice the same seeded permutation, so subsets
/// `0..n_subsets` are pairwise disjoint.
pub fn corrupt_indices(
    n: usize,
    k: usize,
    seed: u64,
    subset_id: usize,
    n_subsets: usize,
) -> Result<Vec<usize>> {
    if n_subsets == 0 || subset_id >= n_subsets {
        return Err(Error::Config(format!(
            "subset id {subset_id} out of range for {n_subsets} subsets"
        )));
    }
    if k * n_subsets > n {
        return Err(Error::Config(format!(
            "{n_subsets} disjoint subsets of {k} corrupted samples need {} records, have {n}",
            k * n_subsets
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(derive_seed(seed, 0xC0_22_07)));
    let mut chosen = perm[subset_id * k..(subset_id + 1) * k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Replaces the masks of the chosen records with fitted ovals and flags
/// them. Images and weight maps are left untouched.
pub fn corrupt_dataset(
    records: &[SampleRecord],
    k: usize,
    seed: u64,
    subset_id: usize,
    n_subsets: usize,
) -> Result<Vec<SampleRecord>> {
    let chosen = corrupt_indices(records.len(), k, seed, subset_id, n_subsets)?;
    let mut out = records.to_vec();
    for i in chosen {
        out[i].mask = fit_oval(&records[i].mask, OVAL_SCALE)?.mask;
        out[i].flag = Accuracy::Oval;
    }
    Ok(out)
}

/// Size and corruption of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub samples: usize,
    pub size: usize,
    /// Oval-corrupted records per subset.
    pub k: usize,
    pub subsets: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            samples: 40,
            size: 64,
            k: 8,
            subsets: 5,
            seed: 0,
        }
    }
}

impl KeyValue for DatasetSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "samples" => self.samples = config::value(key, value)?,
            "size" => self.size = config::value(key, value)?,
            "k" => self.k = config::value(key, value)?,
            "subsets" => self.subsets = config::value(key, value)?,
            "data_seed" => self.seed = config::value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("samples", self.samples.to_string()),
            ("size", self.size.to_string()),
            ("k", self.k.to_string()),
            ("subsets", self.subsets.to_string()),
            ("data_seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.subsets == 0 {
            return Err(Error::Config("subsets must be at least 1".into()));
        }
        if self.k * self.subsets > self.samples {
            return Err(Error::Config(format!(
                "{} disjoint subsets of {} corrupted samples need {} records, have {}",
                self.subsets,
                self.k,
                self.k * self.subsets,
                self.samples
            )));
        }
        if self.size < 32 {
            return Err(Error::Config(format!("size must be at least 32, got {}", self.size)));
        }
        Ok(())
    }
}

impl DatasetSpec {
    /// Phantoms with accurate masks.
    pub fn phantoms(&self) -> Result<Vec<Phantom>> {
        self.validate()?;
        generate_phantoms(self.samples, self.size, self.seed)
    }

    /// One record list per subset, each with its own disjoint set of `k`
    /// oval masks.
    pub fn build_subsets(&self) -> Result<Vec<Vec<SampleRecord>>> {
        let records: Vec<SampleRecord> = self
            .phantoms()?
            .into_iter()
            .map(|p| SampleRecord::accurate(p.image, p.truth))
            .collect::<Result<_>>()?;
        (0..self.subsets)
            .map(|s| corrupt_dataset(&records, self.k, self.seed, s, self.subsets))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Probability of applying each transform independently.
    pub probability: f64,
    pub max_rotation_deg: f64,
    pub min_crop_area: f64,
    pub elastic_sigma: f64,
    pub elastic_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            probability: 0.5,
            max_rotation_deg: 15.0,
            min_crop_area: 0.7,
            elastic_sigma: 8.0,
            elastic_alpha: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Concrete transform parameters drawn for one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentPlan {
    pub flip: bool,
    /// Rotation in radians.
    pub rotation: Option<f64>,
    pub crop: Option<CropWindow>,
    /// Row and column displacement fields.
    pub elastic: Option<(Grid<f64>, Grid<f64>)>,
}

impl AugmentPlan {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.rotation.is_none() && self.crop.is_none() && self.elastic.is_none()
    }

    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut plan = AugmentPlan {
            flip: rng.random_bool(cfg.probability),
            ..Default::default()
        };
        if rng.random_bool(cfg.probability) {
            let max = cfg.max_rotation_deg.to_radians();
            plan.rotation = Some(rng.random_range(-max..=max));
        }
        if rng.random_bool(cfg.probability) {
            let area = rng.random_range(cfg.min_crop_area..=1.0);
            let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
            let ratio = log_ratio.exp();
            let ch = ((height as f64 * (area * ratio).sqrt()).round() as usize).clamp(2, height);
            let cw = ((width as f64 * (area / ratio).sqrt()).round() as usize).clamp(2, width);
            plan.crop = Some(CropWindow {
                top: rng.random_range(0..=height - ch),
                left: rng.random_range(0..=width - cw),
                height: ch,
                width: cw,
            });
        }
        if rng.random_bool(cfg.probability) {
            let mut field = || {
                let raw = Grid::from_fn(height, width, |_, _| rng.random_range(-1.0..=1.0));
                imaging::gaussian_blur(&raw, cfg.elastic_sigma).map(|v| v * cfg.elastic_alpha)
            };
            let dr = field();
            let dc = field();
            plan.elastic = Some((dr, dc));
        }
        plan
    }

    /// Source coordinate feeding output pixel `(r, c)`, or `None` when an
    /// intermediate stage falls outside the grid.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> Option<(f64, f64)> {
        let inside = |p: (f64, f64)| {
            p.0 >= -0.5 && p.1 >= -0.5 && p.0 <= h as f64 - 0.5 && p.1 <= w as f64 - 0.5
        };
        let mut p = (r as f64, c as f64);
        if let Some((dr, dc)) = &self.elastic {
            p = (p.0 + dr.get(r, c), p.1 + dc.get(r, c));
            if !inside(p) {
                return None;
            }
        }
        if let Some(win) = &self.crop {
            let sr = if h > 1 { (win.height - 1) as f64 / (h - 1) as f64 } else { 0.0 };
            let sc = if w > 1 { (win.width - 1) as f64 / (w - 1) as f64 } else { 0.0 };
            p = (win.top as f64 + p.0 * sr, win.left as f64 + p.1 * sc);
        }
        if let Some(theta) = self.rotation {
            let cr = (h as f64 - 1.0) / 2.0;
            let cc = (w as f64 - 1.0) / 2.0;
            let (s, co) = theta.sin_cos();
            let (dr, dc) = (p.0 - cr, p.1 - cc);
            p = (cr + co * dr - s * dc, cc + s * dr + co * dc);
            if !inside(p) {
                return None;
            }
        }
        if self.flip {
            p.1 = (w - 1) as f64 - p.1;
        }
        Some(p)
    }

    /// Applies the same spatial transform to image, mask and weight map.
    pub fn apply(&self, sample: &SampleRecord) -> Result<SampleRecord> {
        imaging::check_dims(&sample.image, &sample.mask, "image vs mask")?;
        imaging::check_dims(&sample.image, &sample.weights, "image vs weight map")?;
        if self.is_identity() {
            return Ok(sample.clone());
        }
        let (h, w) = sample.image.dims();
        let mut image = Grid::filled(h, w, 0f32);
        let mut mask = Grid::filled(h, w, 0u8);
        let mut weights = Grid::filled(h, w, 1f32);
        for r in 0..h {
            for c in 0..w {
                if let Some((sr, sc)) = self.source(r, c, h, w) {
                    let (cr, cc) = (sr.clamp(0.0, (h - 1) as f64), sc.clamp(0.0, (w - 1) as f64));
                    image.set(r, c, imaging::sample_bilinear(&sample.image, cr, cc, 0.0));
                    mask.set(r, c, imaging::sample_nearest(&sample.mask, cr, cc, 0));
                    weights.set(r, c, imaging::sample_nearest(&sample.weights, cr, cc, 1.0));
                }
            }
        }
        Ok(SampleRecord {
            image,
            mask,
            weights,
            flag: sample.flag,
        })
    }
}

/// Random flip, rotation, resized crop and elastic deformation, each with
/// probability `cfg.probability`, applied jointly to all three grids.
pub fn augment(sample: &SampleRecord, seed: u64, cfg: &AugmentConfig) -> Result<SampleRecord> {
    let (h, w) = sample.image.dims();
    AugmentPlan::sample(cfg, h, w, seed).apply(sample)
}

// ---------------------------------------------------------------------------
// Manifest files

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub index: usize,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub flag: Accuracy,
    pub weight_path: Option<PathBuf>,
}

/// Line-oriented dataset description.
///
/// Body lines are `index<TAB>image<TAB>mask<TAB>flag<TAB>weightmap`, with
/// `-` for a missing weight map. Metadata lives in `# key = value` comment
/// lines. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub k_corrupted: usize,
    pub seed: u64,
    pub subset_id: usize,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# k_corrupted = {}\n", self.k_corrupted));
        out.push_str(&format!("# seed = {}\n", self.seed));
        out.push_str(&format!("# subset_id = {}\n", self.subset_id));
        for r in &self.records {
            let wp = r
                .weight_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.index,
                r.image_path.display(),
                r.mask_path.display(),
                r.flag,
                wp
            ));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = DatasetManifest::default();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let line_offset = offset;
            offset += line.len() as u64;
            let body = line.trim_end_matches(['\n', '\r']);
            if body.trim().is_empty() {
                continue;
            }
            if let Some(meta) = body.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    let v = v.trim();
                    let bad = || Error::format(path, line_offset, format!("bad value {v:?}"));
                    match k.trim() {
                        "k_corrupted" => m.k_corrupted = v.parse().map_err(|_| bad())?,
                        "seed" => m.seed = v.parse().map_err(|_| bad())?,
                        "subset_id" => m.subset_id = v.parse().map_err(|_| bad())?,
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = body.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::format(
                    path,
                    line_offset,
                    format!("expected 5 tab-separated fields, found {}", fields.len()),
                ));
            }
            let index = fields[0]
                .parse()
                .map_err(|_| Error::format(path, line_offset, "bad record index"))?;
            let flag = fields[3]
                .parse()
                .map_err(|_| Error::format(path, line_offset, format!("bad flag {:?}", fields[3])))?;
            m.records.push(ManifestRecord {
                index,
                image_path: PathBuf::from(fields[1]),
                mask_path: PathBuf::from(fields[2]),
                flag,
                weight_path: (fields[4] != "-").then(|| PathBuf::from(fields[4])),
            });
        }
        let flagged = m.records.iter().filter(|r| r.flag == Accuracy::Oval).count();
        if flagged != m.k_corrupted {
            return Err(Error::format(
                path,
                0,
                format!("k_corrupted = {} but {flagged} records are flagged oval", m.k_corrupted),
            ));
        }
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Loads every record's grids. Records without a weight map get all
    /// ones, which is what accurate samples carry.
    pub fn load_samples(&self, base_dir: &Path) -> Result<Vec<SampleRecord>> {
        self.records
            .iter()
            .map(|r| {
                let image = imaging::read_pfm(base_dir.join(&r.image_path))?;
                let mask = imaging::read_pgm(base_dir.join(&r.mask_path))?;
                imaging::check_dims(&image, &mask, "image vs mask")?;
                let weights = match &r.weight_path {
                    Some(p) => {
                        let wm = imaging::read_pfm(base_dir.join(p))?;
                        crate::weakmodels::validate_weight_map(&wm, &mask)?;
                        wm
                    }
                    None => Grid::filled(image.height(), image.width(), 1.0),
                };
                Ok(SampleRecord {
                    image,
                    mask,
                    weights,
                    flag: r.flag,
                })
            })
            .collect()
    }
}
