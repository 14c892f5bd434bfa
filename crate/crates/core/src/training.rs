//! Loss, optimizer, learning-rate schedule and the training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::config::{self, KeyValue};
use crate::error::{Error, Result};
use crate::imaging::Grid;
use crate::network::{NetConfig, ParamInfo, ParameterSet, UNet, DEFAULT_EMA_BETA};
use crate::nn::{Mode, Real, Tensor};
use crate::synthdata::{augment, derive_seed, rng_from_seed, Accuracy, AugmentConfig, SampleRecord};
use crate::weakmodels::{power_transform, InaccuracyModel, DEFAULT_EPSILON};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside logarithms.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the cross-entropy term; Dice gets `1 - alpha`.
    pub alpha: f64,
    pub dice_epsilon: f64,
    /// Multiply the positive log term by the per-pixel confidence.
    pub use_moi_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            dice_epsilon: 1.0,
            use_moi_weights: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.dice_epsilon > 0.0 && self.dice_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "dice_epsilon must be positive, got {}",
                self.dice_epsilon
            )));
        }
        Ok(())
    }
}

/// Per-class cross-entropy weights for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    /// `N1 / N0`.
    pub background: f64,
    pub foreground: f64,
    /// Set when the batch lacks one of the classes and both weights fell
    /// back to 1.
    pub fallback: bool,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights {
        background: 1.0,
        foreground: 1.0,
        fallback: false,
    };
}

/// Counts foreground (`N1`) and background (`N0`) labels over the whole
/// batch.
pub fn class_weights(labels: &[u8]) -> ClassWeights {
    let n1 = labels.iter().filter(|&&y| y != 0).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return ClassWeights {
            fallback: true,
            ..ClassWeights::UNIFORM
        };
    }
    ClassWeights {
        background: n1 as f64 / n0 as f64,
        foreground: 1.0,
        fallback: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: f64,
    pub bce: f64,
    pub dice: f64,
    /// `d value / d p`, same shape as the probabilities.
    pub grad: Tensor<T>,
}

fn check_loss_inputs<T: Real>(p: &[T], y: &[u8], phi: Option<&[f32]>) -> Result<()> {
    if y.len() != p.len() || phi.is_some_and(|f| f.len() != p.len()) {
        return Err(Error::Shape(format!(
            "loss inputs differ in size: {} probabilities, {} labels{}",
            p.len(),
            y.len(),
            phi.map(|f| format!(", {} weights", f.len())).unwrap_or_default()
        )));
    }
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite probability at index {i}")));
    }
    Ok(())
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// Mean class-weighted binary cross-entropy. With `phi`, the positive term
/// of each pixel is scaled by its confidence.
pub fn weighted_bce<T: Real>(p: &[T], y: &[u8], phi: Option<&[f32]>, cw: &ClassWeights) -> Result<f64> {
    check_loss_inputs(p, y, phi)?;
    if p.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0f64;
    for i in 0..p.len() {
        let pi = clamp_p(p[i].to_f64());
        let yi = y[i] as f64;
        let w = if y[i] != 0 { cw.foreground } else { cw.background };
        let pos = match phi {
            Some(f) => f[i] as f64 * yi,
            None => yi,
        };
        sum += w * (-(pos * pi.ln()) - (1.0 - yi) * (1.0 - pi).ln());
    }
    Ok(sum / p.len() as f64)
}

/// `alpha * BCE + (1 - alpha) * (1 - Dice)` over the whole batch, with its
/// gradient.
///
/// Logs use clamped probabilities and the gradient is taken at the
/// clamped value; Dice uses the raw probabilities.
pub fn combined_loss<T: Real>(
    p: &Tensor<T>,
    y: &[u8],
    phi: &[f32],
    cw: &ClassWeights,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    let pd = p.data();
    let phi = cfg.use_moi_weights.then_some(phi);
    let bce = weighted_bce(pd, y, phi, cw)?;
    let n = pd.len().max(1) as f64;

    let mut inter = 0.0f64;
    let mut sum_sq = 0.0f64;
    for (&pi, &yi) in pd.iter().zip(y) {
        let (pi, yi) = (pi.to_f64(), yi as f64);
        inter += pi * yi;
        sum_sq += pi * pi + yi * yi;
    }
    let eps = cfg.dice_epsilon;
    let num = 2.0 * inter + eps;
    let den = sum_sq + eps;
    let dice = 1.0 - num / den;

    let a = cfg.alpha;
    let grad = pd
        .iter()
        .enumerate()
        .map(|(i, &pi)| {
            let yi = y[i] as f64;
            let pc = clamp_p(pi.to_f64());
            let w = if y[i] != 0 { cw.foreground } else { cw.background };
            let f = phi.map_or(1.0, |f| f[i] as f64);
            let d_bce = w * (-(f * yi) / pc + (1.0 - yi) / (1.0 - pc)) / n;
            let d_dice = -(2.0 * yi * den - num * 2.0 * pi.to_f64()) / (den * den);
            T::from_f64(a * d_bce + (1.0 - a) * d_dice)
        })
        .collect();
    Ok(LossOutput {
        value: a * bce + (1.0 - a) * dice,
        bce,
        dice,
        grad: Tensor::from_vec(p.shape(), grad)?,
    })
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: `weight_decay * theta` is added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0005,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &[Tensor<T>]) -> Self {
        Adam {
            cfg,
            m: params.iter().map(|p| vec![T::ZERO; p.len()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every tensor that has a gradient.
    ///
    /// All gradients are checked first, so a non-finite one aborts the
    /// step before anything changes.
    pub fn step(
        &mut self,
        info: &[ParamInfo],
        params: &mut [Tensor<T>],
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || info.len() != params.len() {
            return Err(Error::InvalidState(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((i, p), g) in info.iter().zip(params.iter()).zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::InvalidState(format!(
                        "gradient of `{}` has shape {:?}, expected {:?}",
                        i.name,
                        g.shape(),
                        p.shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient in `{}`", i.name)));
                }
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (nb1, nb2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let (wd, eps, lr) = (T::from_f64(c.weight_decay), T::from_f64(c.eps), T::from_f64(lr));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((th, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi + wd * *th;
                *mi = b1 * *mi + nb1 * gi;
                *vi = b2 * *vi + nb2 * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *th -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    /// Fraction of steps spent warming up.
    pub pct_start: f64,
    /// Initial rate is `max_lr / div_factor`.
    pub div_factor: f64,
    /// Final rate is `max_lr / final_div_factor`.
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64) -> Self {
        OneCycle {
            max_lr,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    /// Step at which the rate peaks.
    pub fn peak_step(&self, total_steps: usize) -> usize {
        ((self.pct_start * total_steps as f64).floor() as usize).min(total_steps.saturating_sub(1))
    }

    /// Cosine warm-up from `max/div` to `max`, then cosine decay to
    /// `max/final_div` at the last step.
    pub fn lr(&self, step: usize, total_steps: usize) -> Result<f64> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument("one-cycle schedule needs at least one step".into()));
        }
        if step >= total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} is past the end of a {total_steps}-step schedule"
            )));
        }
        let start = self.max_lr / self.div_factor;
        let end = self.max_lr / self.final_div_factor;
        let peak = self.peak_step(total_steps);
        // weight on `from`: 1 at frac 0, exactly 0 at frac 1
        let cos_mix = |from: f64, to: f64, frac: f64| {
            let c = (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
            from * c + to * (1.0 - c)
        };
        Ok(if step <= peak {
            let frac = if peak == 0 { 1.0 } else { step as f64 / peak as f64 };
            cos_mix(start, self.max_lr, frac)
        } else {
            let frac = (step - peak) as f64 / (total_steps - 1 - peak) as f64;
            cos_mix(self.max_lr, end, frac)
        })
    }
}

/// One-cycle rate with the default shape parameters.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    OneCycle::new(max_lr).lr(step, total_steps)
}

// ---------------------------------------------------------------------------
// Training loop

/// Source of per-pixel confidence during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Moi {
    /// Every pixel has confidence 1.
    None,
    Model(InaccuracyModel),
}

impl Moi {
    pub const ALL: [Moi; 3] = [
        Moi::None,
        Moi::Model(InaccuracyModel::Euclidean),
        Moi::Model(InaccuracyModel::Mahalanobis),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Moi::None => "none",
            Moi::Model(m) => m.as_str(),
        }
    }
}

impl fmt::Display for Moi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Moi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Moi::None),
            other => other.parse().map(Moi::Model),
        }
    }
}

/// Fills in confidence maps: the chosen model raised to `power_n` for
/// oval samples, all ones for accurate samples or when `moi` is `None`.
pub fn prepare_weights(samples: &[SampleRecord], moi: Moi, power_n: f64, epsilon: f64) -> Result<Vec<SampleRecord>> {
    samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.weights = match (moi, s.flag) {
                (Moi::Model(m), Accuracy::Oval) => power_transform(&m.weights(&s.mask, epsilon)?.map, power_n)?,
                _ => Grid::filled(s.mask.height(), s.mask.width(), 1.0),
            };
            Ok(s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub ema_beta: f64,
    pub dropout_p: f64,
    pub moi: Moi,
    pub power_n: f64,
    /// Offset in the confidence normalisation.
    pub moi_epsilon: f64,
    pub alpha: f64,
    pub dice_epsilon: f64,
    pub augment: bool,
    /// Refit batch-norm statistics of both weight sets after training.
    pub recalibrate_bn: bool,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 280,
            max_lr: 0.001,
            weight_decay: 0.0005,
            ema_beta: DEFAULT_EMA_BETA,
            dropout_p: 0.4,
            moi: Moi::None,
            power_n: 1.0,
            moi_epsilon: DEFAULT_EPSILON,
            alpha: 0.5,
            dice_epsilon: 1.0,
            augment: true,
            recalibrate_bn: true,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            dice_epsilon: self.dice_epsilon,
            use_moi_weights: self.moi != Moi::None,
        }
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            max_lr: self.max_lr,
            pct_start: self.pct_start,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Sizes of the mini-batches of one epoch. A trailing single sample is
    /// folded into the previous batch because train-mode batch norm needs
    /// at least two.
    pub fn batch_sizes(&self, n: usize) -> Vec<usize> {
        let b = self.batch_size.max(1);
        let mut sizes = vec![b; n / b];
        match n % b {
            0 => {}
            1 if !sizes.is_empty() => *sizes.last_mut().expect("non-empty") += 1,
            r => sizes.push(r),
        }
        sizes
    }
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = config::value(key, value)?,
            "epochs" => self.epochs = config::value(key, value)?,
            "max_lr" => self.max_lr = config::value(key, value)?,
            "weight_decay" => self.weight_decay = config::value(key, value)?,
            "ema_beta" => self.ema_beta = config::value(key, value)?,
            "dropout_p" => self.dropout_p = config::value(key, value)?,
            "moi" => self.moi = config::value(key, value)?,
            "power_n" => self.power_n = config::value(key, value)?,
            "moi_epsilon" => self.moi_epsilon = config::value(key, value)?,
            "alpha" => self.alpha = config::value(key, value)?,
            "dice_epsilon" => self.dice_epsilon = config::value(key, value)?,
            "augment" => self.augment = config::value(key, value)?,
            "recalibrate_bn" => self.recalibrate_bn = config::value(key, value)?,
            "pct_start" => self.pct_start = config::value(key, value)?,
            "div_factor" => self.div_factor = config::value(key, value)?,
            "final_div_factor" => self.final_div_factor = config::value(key, value)?,
            "seed" => self.seed = config::value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_lr", self.max_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("ema_beta", self.ema_beta.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
            ("moi", self.moi.to_string()),
            ("power_n", self.power_n.to_string()),
            ("moi_epsilon", self.moi_epsilon.to_string()),
            ("alpha", self.alpha.to_string()),
            ("dice_epsilon", self.dice_epsilon.to_string()),
            ("augment", self.augment.to_string()),
            ("recalibrate_bn", self.recalibrate_bn.to_string()),
            ("pct_start", self.pct_start.to_string()),
            ("div_factor", self.div_factor.to_string()),
            ("final_div_factor", self.final_div_factor.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        for (k, v) in [
            ("max_lr", self.max_lr),
            ("power_n", self.power_n),
            ("moi_epsilon", self.moi_epsilon),
            ("div_factor", self.div_factor),
            ("final_div_factor", self.final_div_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.ema_beta > 0.0 && self.ema_beta < 1.0) {
            return Err(Error::Config(format!("ema_beta must be in (0, 1), got {}", self.ema_beta)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(Error::Config(format!("pct_start must be in (0, 1), got {}", self.pct_start)));
        }
        self.loss().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    /// Mean mini-batch loss over the epoch.
    pub loss: f64,
}

pub const LOG_HEADER: &str = "epoch,step,lr,loss";

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.epoch, self.step, self.lr, self.loss)
    }
}

pub fn format_log(records: &[EpochRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in records {
        s.push_str(&format!("{r}\n"));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: NetConfig,
    pub params: ParameterSet<f32>,
    pub log: Vec<EpochRecord>,
    pub ema_updates: usize,
}

/// Stacks samples into an image tensor, a label vector and a confidence
/// vector, all in `[N, 1, H, W]` order.
pub fn stack_batch(samples: &[&SampleRecord]) -> Result<(Tensor<f32>, Vec<u8>, Vec<f32>)> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let (h, w) = first.image.dims();
    let mut img = Vec::with_capacity(samples.len() * h * w);
    let mut y = Vec::with_capacity(img.capacity());
    let mut phi = Vec::with_capacity(img.capacity());
    for s in samples {
        if s.image.dims() != (h, w) || s.mask.dims() != (h, w) || s.weights.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} with {:?} samples",
                s.image.dims()
            )));
        }
        img.extend_from_slice(s.image.data());
        y.extend_from_slice(s.mask.data());
        phi.extend_from_slice(s.weights.data());
    }
    Ok((Tensor::from_vec(&[samples.len(), 1, h, w], img)?, y, phi))
}

/// Pixels per batch-norm recalibration pass.
const CALIBRATION_PIXELS: usize = 1 << 22;

// seed streams
const INIT: u64 = 0;
const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;
const DROPOUT: u64 = 3;

/// Trains on `samples` using their stored confidence maps.
///
/// With `moi = none` the maps are ignored and every pixel counts fully.
/// Each step runs forward, loss, backward, Adam and one EMA update.
/// `on_epoch` sees each log record as soon as it is complete.
pub fn train(
    samples: &[SampleRecord],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let net_cfg = NetConfig {
        dropout_p: cfg.dropout_p,
        ..net_cfg.clone()
    };
    let net = UNet::new(&net_cfg)?;
    let mut params = net.init_params::<f32>(derive_seed(cfg.seed, INIT), cfg.ema_beta)?;
    let info = params.info().to_vec();
    let mut adam = Adam::new(cfg.adam(), params.values());
    let loss_cfg = cfg.loss();
    let schedule = cfg.schedule();
    let aug_cfg = AugmentConfig::default();
    let sizes = cfg.batch_sizes(samples.len());
    let total = sizes.len() * cfg.epochs;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut ema_updates = 0usize;
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        order.shuffle(&mut rng_from_seed(derive_seed(epoch_seed, SHUFFLE)));
        let mut start = 0;
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, &size) in sizes.iter().enumerate() {
            let idx = &order[start..start + size];
            start += size;
            let batch: Vec<SampleRecord> = if cfg.augment {
                let aug_seed = derive_seed(epoch_seed, AUGMENT);
                idx.iter()
                    .map(|&i| augment(&samples[i], derive_seed(aug_seed, i as u64), &aug_cfg))
                    .collect::<Result<_>>()?
            } else {
                idx.iter().map(|&i| samples[i].clone()).collect()
            };
            let refs: Vec<&SampleRecord> = batch.iter().collect();
            let (x, y, phi) = stack_batch(&refs)?;

            lr = schedule.lr(step, total)?;
            let fwd = net.forward(params.values(), &x, Mode::Train, derive_seed(derive_seed(cfg.seed, DROPOUT), step as u64))?;
            let cw = class_weights(&y);
            let loss = combined_loss(&fwd.output, &y, &phi, &cw, &loss_cfg)?;
            if !loss.value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {}, batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            let grads = net.backward(params.values(), &fwd, &loss.grad, false)?;
            adam.step(&info, params.values_mut(), &grads.params, lr)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {}, batch {}: {m}", epoch + 1, b + 1)),
                    other => other,
                })?;
            net.update_running_stats(&fwd, params.values_mut())?;
            params.ema_update()?;
            ema_updates += 1;
            step += 1;
            loss_sum += loss.value;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            step,
            lr,
            loss: loss_sum / sizes.len() as f64,
        };
        on_epoch(&rec);
        log.push(rec);
    }
    if cfg.recalibrate_bn {
        let all: Vec<&SampleRecord> = samples.iter().collect();
        let (x, _, _) = stack_batch(&all)?;
        let (h, w) = samples[0].image.dims();
        let chunk = (CALIBRATION_PIXELS / (h * w)).max(2);
        net.recalibrate_bn(params.values_mut(), &x, chunk)?;
        net.recalibrate_bn(params.shadow_mut(), &x, chunk)?;
    }
    Ok(TrainOutcome {
        net: net_cfg,
        params,
        log,
        ema_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{self, compare};

    #[test]
    fn class_weight_examples() {
        let mut y = vec![0u8; 1000];
        y[..100].iter_mut().for_each(|v| *v = 1);
        let cw = class_weights(&y);
        assert!((cw.background - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(cw.foreground, 1.0);
        assert!(!cw.fallback);
        assert_eq!(class_weights(&[0, 1, 1, 0]).background, 1.0);
        assert!(class_weights(&[1, 1, 1]).fallback);
        let bg = class_weights(&[0, 0]);
        assert!(bg.fallback && bg.background == 1.0);
    }

    fn single(p: f64, y: u8, phi: f32, alpha: f64) -> LossOutput<f64> {
        let cfg = LossConfig {
            alpha,
            ..LossConfig::default()
        };
        let pt = Tensor::from_vec(&[1, 1, 1, 1], vec![p]).unwrap();
        combined_loss(&pt, &[y], &[phi], &ClassWeights::UNIFORM, &cfg).unwrap()
    }

    #[test]
    fn single_pixel_cross_entropy() {
        // alpha = 1 is outside the training range but isolates the BCE term
        let l = single(0.5, 1, 1.0, 1.0);
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l.grad.data()[0] + 2.0).abs() < 1e-12);
        let h = single(0.5, 1, 0.5, 1.0);
        assert!((h.value - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction() {
        let y: Vec<u8> = (0..64).map(|i| (i % 5 == 0) as u8).collect();
        let p = Tensor::from_vec(&[1, 1, 8, 8], y.iter().map(|&v| v as f64).collect()).unwrap();
        let l = combined_loss(&p, &y, &[1.0; 64], &class_weights(&y), &LossConfig::default()).unwrap();
        assert_eq!(l.dice, 0.0);
        assert!(l.bce < 1e-5);
    }

    #[test]
    fn all_ones_confidence_matches_plain_cross_entropy_bitwise() {
        let mut rng = rng_from_seed(3);
        let p = gradcheck::random_tensor(&mut rng, &[2, 1, 8, 8], 0.01, 0.99);
        let y: Vec<u8> = (0..128).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let cw = class_weights(&y);
        let a = weighted_bce(p.data(), &y, Some(&[1.0; 128]), &cw).unwrap();
        let b = weighted_bce(p.data(), &y, None, &cw).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for inst in 0..5u64 {
            let mut rng = rng_from_seed(inst);
            let p = gradcheck::random_tensor(&mut rng, &[2, 1, 4, 4], 0.02, 0.98);
            let y: Vec<u8> = (0..32).map(|i| ((i as u64 * 5 + inst) % 3 == 0) as u8).collect();
            let phi: Vec<f32> = (0..32).map(|i| if y[i] == 1 { 0.3 + (i as f32) / 64.0 } else { 1.0 }).collect();
            let cw = class_weights(&y);
            let cfg = LossConfig::default();
            let l = combined_loss(&p, &y, &phi, &cw, &cfg).unwrap();
            let c = compare(l.grad.data(), p.data(), |pd| {
                let t = Tensor::from_vec(p.shape(), pd.to_vec()).unwrap();
                combined_loss(&t, &y, &phi, &cw, &cfg).unwrap().value
            });
            assert!(c.max_rel_error < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn loss_input_errors() {
        let p = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5f64, f64::NAN]).unwrap();
        let e = combined_loss(&p, &[0, 1], &[1.0, 1.0], &ClassWeights::UNIFORM, &LossConfig::default());
        assert!(matches!(e, Err(Error::InvalidInput(_))));
        let p = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5f64, 0.5]).unwrap();
        let e = combined_loss(&p, &[0], &[1.0, 1.0], &ClassWeights::UNIFORM, &LossConfig::default());
        assert!(matches!(e, Err(Error::Shape(_))));
    }

    fn one_param(v: f32) -> (Vec<ParamInfo>, Vec<Tensor<f32>>) {
        (
            vec![ParamInfo { name: "w".into(), trainable: true }],
            vec![Tensor::filled(&[3], v)],
        )
    }

    #[test]
    fn adam_fixed_point_and_first_step() {
        let (info, mut p) = one_param(0.25);
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }, &p);
        adam.step(&info, &mut p, &[Some(Tensor::zeros(&[3]))], 0.1).unwrap();
        assert!(p[0].data().iter().all(|&v| v == 0.25));

        let (info, mut p) = one_param(0.0);
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }, &p);
        adam.step(&info, &mut p, &[Some(Tensor::filled(&[3], 1.0))], 0.1).unwrap();
        assert!(p[0].data().iter().all(|&v| (v + 0.1).abs() < 1e-6), "{:?}", p[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_without_touching_params() {
        let (info, mut p) = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = Tensor::from_vec(&[3], vec![0.0, f32::INFINITY, 0.0]).unwrap();
        let e = adam.step(&info, &mut p, &[Some(g)], 0.1).unwrap_err();
        assert!(matches!(e, Error::Numeric(ref m) if m.contains("`w`")), "{e}");
        assert!(p[0].data().iter().all(|&v| v == 1.0));
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn one_cycle_shape() {
        let total = 100;
        assert!((one_cycle_lr(0, total, 0.001).unwrap() - 4e-5).abs() < 1e-18);
        assert_eq!(one_cycle_lr(30, total, 0.001).unwrap(), 0.001);
        let last = one_cycle_lr(total - 1, total, 0.001).unwrap();
        assert!((last - 1e-7).abs() < 1e-20);
        let lrs: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, 0.001).unwrap()).collect();
        let peaks = (0..total)
            .filter(|&i| (i == 0 || lrs[i] > lrs[i - 1]) && (i + 1 == total || lrs[i] > lrs[i + 1]))
            .count();
        assert_eq!(peaks, 1);
        assert!(one_cycle_lr(0, 0, 0.001).is_err());
        assert!(one_cycle_lr(5, 5, 0.001).is_err());
        assert_eq!(one_cycle_lr(0, 1, 0.001).unwrap(), 0.001);
    }

    #[test]
    fn batch_sizes_fold_a_lone_sample() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch_sizes(40), vec![4; 10]);
        assert_eq!(cfg.batch_sizes(9), vec![4, 5]);
        assert_eq!(cfg.batch_sizes(10), vec![4, 4, 2]);
        assert_eq!(cfg.batch_sizes(3), vec![3]);
    }

    #[test]
    fn train_config_text_round_trip() {
        let cfg = TrainConfig {
            moi: Moi::Model(InaccuracyModel::Mahalanobis),
            power_n: 1.5,
            seed: 9,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::from_text("batch_size = 1").is_err());
        assert!(TrainConfig::from_text("moi = moi3").is_err());
        assert!(TrainConfig::from_text("learning_rate = 1").is_err());
    }
}
