//! The segmentation network: a U-Net whose bottleneck is followed by a
//! pyramid pooling module and one more conv block, ending in a sigmoid.
//!
//! Every conv block is two `conv3x3 -> BN -> ReLU -> dropout` units. Decoder
//! levels reduce channels with a 1x1 conv before upsampling, concatenate the
//! skip and run a conv block. Parameters live in a flat [`ParameterSet`] so
//! the optimizer and the EMA shadow can treat them uniformly.

use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::config::{self, KeyValue};
use crate::error::{Error, Result};
use crate::nn::layers::{self, BatchNormCache, BatchStats, ConvCache, Mode};
use crate::nn::gradcheck::{self, Comparison};
use crate::nn::{Real, Tensor};
use crate::synthdata::{derive_seed, rng_from_seed};

pub const DEFAULT_EMA_BETA: f64 = 0.995;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub init_channels: usize,
    /// Number of 2x down-samplings.
    pub depth: usize,
    pub pyramid_scales: Vec<usize>,
    pub dropout_p: f64,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            init_channels: 8,
            depth: 3,
            pyramid_scales: vec![1, 2, 3, 6],
            dropout_p: 0.4,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl NetConfig {
    /// Full-size configuration: 32 initial channels, four down-samplings.
    pub fn full_size() -> Self {
        NetConfig {
            init_channels: 32,
            depth: 4,
            ..Self::default()
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.init_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels_at(self.depth)
    }

    /// Checks that an `h x w` input can pass through the network.
    ///
    /// Both sides must halve cleanly `depth` times, and the bottleneck must
    /// be at least as large as the biggest pyramid scale. Adaptive pooling
    /// uses uneven bins, so the bottleneck need not be a multiple of it.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        for (name, v) in [("height", h), ("width", w)] {
            if v == 0 || v % f != 0 {
                return Err(Error::Config(format!(
                    "input {name} {v} is not divisible by 2^{} = {f}",
                    self.depth
                )));
            }
            let max_scale = self.pyramid_scales.iter().copied().max().unwrap_or(1);
            if v / f < max_scale {
                return Err(Error::Config(format!(
                    "input {name} {v} gives a {}-pixel bottleneck, smaller than pyramid scale {max_scale}",
                    v / f
                )));
            }
        }
        Ok(())
    }
}

impl KeyValue for NetConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "init_channels" => self.init_channels = config::value(key, value)?,
            "depth" => self.depth = config::value(key, value)?,
            "pyramid_scales" => self.pyramid_scales = config::list(key, value)?,
            "dropout_p" => self.dropout_p = config::value(key, value)?,
            "in_channels" => self.in_channels = config::value(key, value)?,
            "out_channels" => self.out_channels = config::value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("init_channels", self.init_channels.to_string()),
            ("depth", self.depth.to_string()),
            ("pyramid_scales", config::join(&self.pyramid_scales)),
            ("dropout_p", self.dropout_p.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("out_channels", self.out_channels.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.init_channels < 4 || self.init_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "init_channels must be a multiple of 4 and at least 4, got {}",
                self.init_channels
            )));
        }
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("depth must be in 1..=8, got {}", self.depth)));
        }
        if self.pyramid_scales.is_empty() || self.pyramid_scales.contains(&0) {
            return Err(Error::Config("pyramid_scales must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.out_channels != 1 {
            return Err(Error::Config(format!(
                "only a single output channel is supported, got {}",
                self.out_channels
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    /// `false` for batch-norm running statistics.
    pub trainable: bool,
}

/// Network parameters `theta` and their exponential moving average.
///
/// The shadow covers every tensor, running statistics included, so a
/// forward pass over the shadow is a self-consistent averaged model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T = f32> {
    info: Vec<ParamInfo>,
    values: Vec<Tensor<T>>,
    shadow: Vec<Tensor<T>>,
    beta: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("EMA beta must be in (0, 1), got {beta}")))
    }
}

impl<T: Real> ParameterSet<T> {
    /// Starts the shadow at the initial values.
    pub fn new(info: Vec<ParamInfo>, values: Vec<Tensor<T>>, beta: f64) -> Result<Self> {
        let shadow = values.clone();
        Self::with_shadow(info, values, shadow, beta)
    }

    pub fn with_shadow(
        info: Vec<ParamInfo>,
        values: Vec<Tensor<T>>,
        shadow: Vec<Tensor<T>>,
        beta: f64,
    ) -> Result<Self> {
        check_beta(beta)?;
        if info.len() != values.len() || values.len() != shadow.len() {
            return Err(Error::InvalidState(format!(
                "{} names, {} tensors and {} shadow tensors",
                info.len(),
                values.len(),
                shadow.len()
            )));
        }
        for ((i, v), s) in info.iter().zip(&values).zip(&shadow) {
            if v.shape() != s.shape() {
                return Err(Error::InvalidState(format!(
                    "`{}` has shape {:?} but its shadow has {:?}",
                    i.name,
                    v.shape(),
                    s.shape()
                )));
            }
        }
        Ok(ParameterSet {
            info,
            values,
            shadow,
            beta,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Shapes must be kept.
    pub fn shadow_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.shadow
    }

    pub fn shadow(&self) -> &[Tensor<T>] {
        &self.shadow
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|i| i.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.info
            .iter()
            .zip(&self.values)
            .filter(|(i, _)| i.trainable)
            .map(|(_, v)| v.len())
            .sum()
    }

    /// One EMA step: `shadow <- beta * shadow + (1 - beta) * theta`.
    ///
    /// Evaluated as `shadow + (1 - beta) * (theta - shadow)` and clamped to
    /// the segment between the two, so a constant parameter is an exact
    /// fixed point and rounding can never leave the convex hull.
    pub fn ema_update(&mut self) -> Result<()> {
        let gamma = T::from_f64(1.0 - self.beta);
        for ((info, v), s) in self.info.iter().zip(&self.values).zip(&mut self.shadow) {
            if v.shape() != s.shape() {
                return Err(Error::InvalidState(format!(
                    "`{}`: shadow shape {:?} differs from {:?}",
                    info.name,
                    s.shape(),
                    v.shape()
                )));
            }
            for (sv, &tv) in s.data_mut().iter_mut().zip(v.data()) {
                let old = *sv;
                let mut next = old + gamma * (tv - old);
                let (lo, hi) = if old <= tv { (old, tv) } else { (tv, old) };
                if next < lo {
                    next = lo;
                } else if next > hi {
                    next = hi;
                }
                *sv = next;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            info: self.info.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            shadow: self.shadow.iter().map(Tensor::cast).collect(),
            beta: self.beta,
        }
    }
}

// ---------------------------------------------------------------------------
// Architecture

#[derive(Debug, Clone, Copy)]
enum Init {
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct UnitIdx {
    conv: ConvIdx,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    units: [UnitIdx; 2],
}

#[derive(Debug, Clone, Copy)]
struct DecLevel {
    reduce: ConvIdx,
    block: Block,
}

/// Parameter layout plus the forward and backward passes.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: NetConfig,
    specs: Vec<ParamSpec>,
    enc: Vec<Block>,
    bottleneck: Block,
    pyramid: Vec<ConvIdx>,
    post: Block,
    /// Indexed by level, `dec[0]` is the full-resolution one.
    dec: Vec<DecLevel>,
    head: ConvIdx,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            init,
            trainable,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvIdx {
        ConvIdx {
            w: self.push(
                format!("{name}.weight"),
                vec![cout, cin, k, k],
                Init::Kaiming { fan_in: cin * k * k },
                true,
            ),
            b: self.push(format!("{name}.bias"), vec![cout], Init::Zeros, true),
        }
    }

    fn unit(&mut self, name: &str, cin: usize, cout: usize) -> UnitIdx {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3);
        UnitIdx {
            conv,
            gamma: self.push(format!("{name}.bn.gamma"), vec![cout], Init::Ones, true),
            beta: self.push(format!("{name}.bn.beta"), vec![cout], Init::Zeros, true),
            mean: self.push(format!("{name}.bn.running_mean"), vec![cout], Init::Zeros, false),
            var: self.push(format!("{name}.bn.running_var"), vec![cout], Init::Ones, false),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            units: [
                self.unit(&format!("{name}.0"), cin, cout),
                self.unit(&format!("{name}.1"), cout, cout),
            ],
        }
    }
}

#[derive(Debug, Clone)]
struct UnitTape<T> {
    conv: ConvCache<T>,
    bn: BatchNormCache<T>,
    relu: Vec<bool>,
    drop: Option<Vec<T>>,
}

type BlockTape<T> = [UnitTape<T>; 2];

#[derive(Debug, Clone)]
struct PoolTape {
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct PyramidTape<T> {
    conv: ConvCache<T>,
    branch_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct DecTape<T> {
    reduce: ConvCache<T>,
    reduced_shape: Vec<usize>,
    block: BlockTape<T>,
}

#[derive(Debug, Clone)]
struct Tape<T> {
    enc: Vec<(BlockTape<T>, PoolTape)>,
    bottleneck: BlockTape<T>,
    feature_shape: Vec<usize>,
    pyramid: Vec<PyramidTape<T>>,
    post: BlockTape<T>,
    /// Deepest level first.
    dec: Vec<DecTape<T>>,
    head: ConvCache<T>,
}

/// Result of a forward pass: the probability map plus what backward needs.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub output: Tensor<T>,
    tape: Tape<T>,
    batch_stats: Vec<(UnitIdx, BatchStats<T>)>,
}

impl<T> Forward<T> {
    /// Hash of every ReLU sign and max-pool winner in the pass. Two passes
    /// with equal fingerprints lie on the same smooth piece of the network.
    pub fn branch_fingerprint(&self) -> u64 {
        let t = &self.tape;
        let mut h = DefaultHasher::new();
        let blocks = t
            .enc
            .iter()
            .map(|(b, _)| b)
            .chain([&t.bottleneck, &t.post])
            .chain(t.dec.iter().map(|d| &d.block));
        for unit in blocks.flatten() {
            unit.relu.hash(&mut h);
        }
        for (_, pool) in &t.enc {
            pool.argmax.hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// Aligned with the parameter list; `None` for running statistics.
    pub params: Vec<Option<Tensor<T>>>,
    pub input: Option<Tensor<T>>,
}

struct Ctx<'a, T> {
    params: &'a [Tensor<T>],
    mode: Mode,
    seed: u64,
    unit_counter: u64,
    batch_stats: Vec<(UnitIdx, BatchStats<T>)>,
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) -> Result<()> {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl UNet {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { specs: Vec::new() };
        let mut enc = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels;
        for l in 0..cfg.depth {
            let c = cfg.channels_at(l);
            enc.push(b.block(&format!("enc{l}"), cin, c));
            cin = c;
        }
        let cb = cfg.bottleneck_channels();
        let bottleneck = b.block("bottleneck", cin, cb);
        let pyramid = (0..cfg.pyramid_scales.len())
            .map(|i| b.conv(&format!("pyramid{i}"), cb, cb / 4, 1))
            .collect();
        let post = b.block("post", cb + cfg.pyramid_scales.len() * (cb / 4), cb);
        let mut dec: Vec<DecLevel> = Vec::with_capacity(cfg.depth);
        for l in (0..cfg.depth).rev() {
            let c = cfg.channels_at(l);
            let reduce = b.conv(&format!("dec{l}.reduce"), 2 * c, c, 1);
            let block = b.block(&format!("dec{l}"), 2 * c, c);
            dec.push(DecLevel { reduce, block });
        }
        dec.reverse();
        let head = b.conv("head", cfg.init_channels, cfg.out_channels, 1);
        Ok(UNet {
            cfg: cfg.clone(),
            specs: b.specs,
            enc,
            bottleneck,
            pyramid,
            post,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        self.specs
            .iter()
            .map(|s| ParamInfo {
                name: s.name.clone(),
                trainable: s.trainable,
            })
            .collect()
    }

    /// Kaiming-normal conv kernels, zero biases, unit BN scale.
    pub fn init_params<T: Real>(&self, seed: u64, beta: f64) -> Result<ParameterSet<T>> {
        let mut rng = rng_from_seed(seed);
        let values = self
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![T::ZERO; n],
                    Init::Ones => vec![T::ONE; n],
                    Init::Kaiming { fan_in } => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                            .expect("positive standard deviation");
                        (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                    }
                };
                Tensor::from_vec(&s.shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        ParameterSet::new(self.param_info(), values, beta)
    }

    /// Checks names, kinds and shapes against this architecture.
    pub fn check_params<T: Real>(&self, params: &ParameterSet<T>) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::InvalidState(format!(
                "network expects {} tensors, parameter set has {}",
                self.specs.len(),
                params.len()
            )));
        }
        for ((s, i), v) in self.specs.iter().zip(params.info()).zip(params.values()) {
            if s.name != i.name || s.trainable != i.trainable || s.shape != v.shape() {
                return Err(Error::InvalidState(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    i.name,
                    v.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(())
    }

    fn check_values<T: Real>(&self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.specs.len() {
            return Err(Error::InvalidState(format!(
                "network expects {} tensors, got {}",
                self.specs.len(),
                values.len()
            )));
        }
        for (s, v) in self.specs.iter().zip(values) {
            if s.shape != v.shape() {
                return Err(Error::InvalidState(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    s.name,
                    v.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    fn unit_forward<T: Real>(&self, u: &UnitIdx, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<(Tensor<T>, UnitTape<T>)> {
        let p = ctx.params;
        let (y, conv) = layers::conv2d_forward(x, &p[u.conv.w], &p[u.conv.b], 1)?;
        let (y, bn, stats) =
            layers::batchnorm_forward(&y, &p[u.gamma], &p[u.beta], &p[u.mean], &p[u.var], ctx.mode)?;
        if let Some(st) = stats {
            ctx.batch_stats.push((*u, st));
        }
        let (y, relu) = layers::relu_forward(&y);
        let seed = derive_seed(ctx.seed, ctx.unit_counter);
        ctx.unit_counter += 1;
        let (y, drop) = layers::dropout_forward(&y, self.cfg.dropout_p, seed, ctx.mode)?;
        Ok((y, UnitTape { conv, bn, relu, drop }))
    }

    fn block_forward<T: Real>(&self, b: &Block, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<(Tensor<T>, BlockTape<T>)> {
        let (y, t0) = self.unit_forward(&b.units[0], ctx, x)?;
        let (y, t1) = self.unit_forward(&b.units[1], ctx, &y)?;
        Ok((y, [t0, t1]))
    }

    /// Runs the network on an `[N, C, H, W]` batch.
    ///
    /// Dropout masks derive from `seed`; in eval mode the result does not
    /// depend on it. Train mode needs a batch of at least two.
    pub fn forward<T: Real>(&self, params: &[Tensor<T>], x: &Tensor<T>, mode: Mode, seed: u64) -> Result<Forward<T>> {
        self.check_values(params)?;
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_input(h, w)?;
        let mut ctx = Ctx {
            params,
            mode,
            seed,
            unit_counter: 0,
            batch_stats: Vec::new(),
        };

        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut enc_tapes = Vec::with_capacity(self.cfg.depth);
        for b in &self.enc {
            let (y, bt) = self.block_forward(b, &mut ctx, &cur)?;
            let (pooled, argmax) = layers::maxpool2_forward(&y)?;
            enc_tapes.push((
                bt,
                PoolTape {
                    argmax,
                    input_shape: y.shape().to_vec(),
                },
            ));
            skips.push(y);
            cur = pooled;
        }

        let (feat, bottleneck) = self.block_forward(&self.bottleneck, &mut ctx, &cur)?;
        let (_, _, hb, wb) = feat.dims4()?;
        let mut branches = Vec::with_capacity(self.pyramid.len());
        let mut pyramid = Vec::with_capacity(self.pyramid.len());
        for (&s, conv) in self.cfg.pyramid_scales.iter().zip(&self.pyramid) {
            let pooled = layers::adaptive_avgpool_forward(&feat, s, s)?;
            let (q, cache) = layers::conv2d_forward(&pooled, &params[conv.w], &params[conv.b], 0)?;
            branches.push(layers::resize_bilinear_forward(&q, hb, wb)?);
            pyramid.push(PyramidTape {
                conv: cache,
                branch_shape: q.shape().to_vec(),
            });
        }
        let mut parts = vec![&feat];
        parts.extend(branches.iter());
        let cat = layers::concat_channels(&parts)?;
        let (mut cur, post) = self.block_forward(&self.post, &mut ctx, &cat)?;

        let mut dec = Vec::with_capacity(self.cfg.depth);
        for (lvl, skip) in self.dec.iter().zip(&skips).rev() {
            let (r, reduce) = layers::conv2d_forward(&cur, &params[lvl.reduce.w], &params[lvl.reduce.b], 0)?;
            let up = layers::upsample2_bilinear_forward(&r)?;
            let cat = layers::concat_channels(&[skip, &up])?;
            let (y, block) = self.block_forward(&lvl.block, &mut ctx, &cat)?;
            dec.push(DecTape {
                reduce,
                reduced_shape: r.shape().to_vec(),
                block,
            });
            cur = y;
        }

        let (logits, head) = layers::conv2d_forward(&cur, &params[self.head.w], &params[self.head.b], 0)?;
        let output = layers::sigmoid_forward(&logits);
        Ok(Forward {
            output,
            tape: Tape {
                enc: enc_tapes,
                bottleneck,
                feature_shape: feat.shape().to_vec(),
                pyramid,
                post,
                dec,
                head,
            },
            batch_stats: ctx.batch_stats,
        })
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates.
    pub fn update_running_stats<T: Real>(&self, fwd: &Forward<T>, values: &mut [Tensor<T>]) -> Result<()> {
        self.check_values(values)?;
        for (u, st) in &fwd.batch_stats {
            let mut mean = values[u.mean].clone();
            let mut var = values[u.var].clone();
            layers::update_running_stats(&mut mean, &mut var, st);
            values[u.mean] = mean;
            values[u.var] = var;
        }
        Ok(())
    }

    /// Replaces the running statistics in `values` with statistics of `x`
    /// under those weights, with dropout off, pooled over batches of
    /// `chunk` images.
    ///
    /// Averaged (shadow) weights never trained with buffers of their own,
    /// and dropout in front of a convolution inflates the variances batch
    /// norm sees in training, so both sets of buffers are refit this way
    /// after training.
    pub fn recalibrate_bn<T: Real>(&self, values: &mut [Tensor<T>], x: &Tensor<T>, chunk: usize) -> Result<()> {
        self.check_values(values)?;
        let (n, c, h, w) = x.dims4()?;
        if chunk < 2 || n < 2 {
            return Err(Error::InvalidArgument(format!(
                "recalibration needs batches of at least 2 images, got {n} images in chunks of {chunk}"
            )));
        }
        let quiet = UNet::new(&NetConfig {
            dropout_p: 0.0,
            ..self.cfg.clone()
        })?;
        let per = c * h * w;
        // per unit: (indices, sum of weighted means, sum of weighted second moments)
        let mut acc: Vec<(usize, usize, Vec<f64>, Vec<f64>)> = Vec::new();
        let mut start = 0;
        while start < n {
            // a trailing single image joins the previous chunk
            let mut end = (start + chunk).min(n);
            if n - end == 1 {
                end = n;
            }
            let b = end - start;
            let xb = Tensor::from_vec(&[b, c, h, w], x.data()[start * per..end * per].to_vec())?;
            let fwd = quiet.forward(values, &xb, Mode::Train, 0)?;
            if acc.is_empty() {
                acc = fwd
                    .batch_stats
                    .iter()
                    .map(|(u, st)| (u.mean, u.var, vec![0.0; st.mean.len()], vec![0.0; st.mean.len()]))
                    .collect();
            }
            for ((_, _, m1, m2), (_, st)) in acc.iter_mut().zip(&fwd.batch_stats) {
                for (i, (&m, &v)) in st.mean.iter().zip(&st.var_unbiased).enumerate() {
                    let (m, v) = (m.to_f64(), v.to_f64());
                    m1[i] += b as f64 * m;
                    m2[i] += b as f64 * (v + m * m);
                }
            }
            start = end;
        }
        for (mi, vi, m1, m2) in acc {
            let mean: Vec<T> = m1.iter().map(|&s| T::from_f64(s / n as f64)).collect();
            let var: Vec<T> = m1
                .iter()
                .zip(&m2)
                .map(|(&s1, &s2)| {
                    let m = s1 / n as f64;
                    T::from_f64((s2 / n as f64 - m * m).max(0.0))
                })
                .collect();
            values[mi] = Tensor::from_vec(&[mean.len()], mean)?;
            values[vi] = Tensor::from_vec(&[var.len()], var)?;
        }
        Ok(())
    }

    fn unit_backward<T: Real>(
        &self,
        u: &UnitIdx,
        params: &[Tensor<T>],
        t: &UnitTape<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let d = layers::dropout_backward(t.drop.as_deref(), dy);
        let d = layers::relu_backward(&t.relu, &d);
        let (d, dgamma, dbeta) = layers::batchnorm_backward(&t.bn, &params[u.gamma], &d)?;
        accumulate(grads, u.gamma, dgamma)?;
        accumulate(grads, u.beta, dbeta)?;
        let (dx, dw, db) = layers::conv2d_backward(&t.conv, &params[u.conv.w], &d, need_input_grad)?;
        accumulate(grads, u.conv.w, dw)?;
        accumulate(grads, u.conv.b, db)?;
        Ok(dx)
    }

    fn block_backward<T: Real>(
        &self,
        b: &Block,
        params: &[Tensor<T>],
        t: &BlockTape<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let d = self
            .unit_backward(&b.units[1], params, &t[1], dy, grads, true)?
            .expect("requested input gradient");
        self.unit_backward(&b.units[0], params, &t[0], &d, grads, need_input_grad)
    }

    /// Backpropagates `d loss / d output` through the pass recorded in `fwd`.
    pub fn backward<T: Real>(
        &self,
        params: &[Tensor<T>],
        fwd: &Forward<T>,
        d_output: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Gradients<T>> {
        self.check_values(params)?;
        if d_output.shape() != fwd.output.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                d_output.shape(),
                fwd.output.shape()
            )));
        }
        let tape = &fwd.tape;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.specs.len()];
        let need = "requested input gradient";

        let dlogits = layers::sigmoid_backward(&fwd.output, d_output);
        let (d, dw, db) = layers::conv2d_backward(&tape.head, &params[self.head.w], &dlogits, true)?;
        accumulate(&mut grads, self.head.w, dw)?;
        accumulate(&mut grads, self.head.b, db)?;
        let mut cur = d.expect(need);

        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; self.cfg.depth];
        for (l, dt) in (0..self.cfg.depth).zip(tape.dec.iter().rev()) {
            let lvl = &self.dec[l];
            let dcat = self
                .block_backward(&lvl.block, params, &dt.block, &cur, &mut grads, true)?
                .expect(need);
            let c = self.cfg.channels_at(l);
            let mut parts = layers::split_channels(&dcat, &[c, c])?;
            let dup = parts.pop().expect("two parts");
            dskips[l] = parts.pop();
            let dr = layers::upsample2_bilinear_backward(&dt.reduced_shape, &dup)?;
            let (d, dw, db) = layers::conv2d_backward(&dt.reduce, &params[lvl.reduce.w], &dr, true)?;
            accumulate(&mut grads, lvl.reduce.w, dw)?;
            accumulate(&mut grads, lvl.reduce.b, db)?;
            cur = d.expect(need);
        }

        let dcat = self
            .block_backward(&self.post, params, &tape.post, &cur, &mut grads, true)?
            .expect(need);
        let cb = self.cfg.bottleneck_channels();
        let mut widths = vec![cb];
        widths.extend(std::iter::repeat(cb / 4).take(self.pyramid.len()));
        let mut parts = layers::split_channels(&dcat, &widths)?.into_iter();
        let mut dfeat = parts.next().expect("feature part");
        for ((conv, pt), dbranch) in self.pyramid.iter().zip(&tape.pyramid).zip(parts) {
            let dq = layers::resize_bilinear_backward(&pt.branch_shape, &dbranch)?;
            let (dp, dw, db) = layers::conv2d_backward(&pt.conv, &params[conv.w], &dq, true)?;
            accumulate(&mut grads, conv.w, dw)?;
            accumulate(&mut grads, conv.b, db)?;
            dfeat.add_assign(&layers::adaptive_avgpool_backward(&tape.feature_shape, &dp.expect(need))?)?;
        }

        cur = self
            .block_backward(&self.bottleneck, params, &tape.bottleneck, &dfeat, &mut grads, true)?
            .expect(need);
        let mut input = None;
        for l in (0..self.cfg.depth).rev() {
            let (bt, pool) = &tape.enc[l];
            let mut d = layers::maxpool2_backward(&pool.argmax, &pool.input_shape, &cur)?;
            if let Some(ds) = &dskips[l] {
                d.add_assign(ds)?;
            }
            let want = l > 0 || need_input_grad;
            let dx = self.block_backward(&self.enc[l], params, bt, &d, &mut grads, want)?;
            if l == 0 {
                input = dx;
            } else {
                cur = dx.expect(need);
            }
        }

        for (s, g) in self.specs.iter().zip(&mut grads) {
            if !s.trainable {
                *g = None;
            }
        }
        Ok(Gradients { params: grads, input })
    }

    /// Eval-mode probabilities.
    pub fn predict<T: Real>(&self, params: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(params, x, Mode::Eval, 0)?.output)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian layout:
//   magic "WSSEGCKP", version u32, beta f64,
//   config: u32 length + `key = value` text,
//   "PARM", count u32, tensors, "SHDW", count u32, tensors.
// A tensor is: name length u32, name, trainable u8, rank u32, dims u32 each,
// f32 payload.

const MAGIC: &[u8; 8] = b"WSSEGCKP";
const VERSION: u32 = 1;
const PARAM_TAG: &[u8; 4] = b"PARM";
const SHADOW_TAG: &[u8; 4] = b"SHDW";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], info: &[ParamInfo], tensors: &[Tensor<f32>]) {
    out.extend_from_slice(tag);
    put_u32(out, tensors.len());
    for (i, t) in info.iter().zip(tensors) {
        put_u32(out, i.name.len());
        out.extend_from_slice(i.name.as_bytes());
        out.push(i.trainable as u8);
        put_u32(out, t.shape().len());
        for &d in t.shape() {
            put_u32(out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(cfg: &NetConfig, params: &ParameterSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.beta().to_le_bytes());
    let text = cfg.to_text();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_section(&mut out, PARAM_TAG, params.info(), params.values());
    put_section(&mut out, SHADOW_TAG, params.info(), params.shadow());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::format(self.path, at as u64, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.bytes.len(), format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn section(&mut self, tag: &[u8; 4], name: &str) -> Result<(Vec<ParamInfo>, Vec<Tensor<f32>>)> {
        if self.pos == self.bytes.len() {
            return Err(self.err(self.pos, format!("missing section {name}")));
        }
        let at = self.pos;
        if self.take(4, "section tag")? != tag {
            return Err(self.err(at, format!("expected section {name}")));
        }
        let count = self.u32("tensor count")?;
        let mut info = Vec::new();
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = self.u32("name length")?;
            let at = self.pos;
            let name = std::str::from_utf8(self.take(len, "name")?)
                .map_err(|_| self.err(at, "tensor name is not UTF-8"))?
                .to_string();
            let at = self.pos;
            let trainable = match self.take(1, "flags")?[0] {
                0 => false,
                1 => true,
                f => return Err(self.err(at, format!("bad flag byte {f}"))),
            };
            let rank = self.u32("rank")?;
            if rank > 8 {
                return Err(self.err(self.pos - 4, format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32("dimension")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| self.err(self.pos, "tensor size overflows"))?;
            let data = self
                .take(n, &format!("payload of `{name}`"))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::from_vec(&shape, data)?);
            info.push(ParamInfo { name, trainable });
        }
        Ok((info, tensors))
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(NetConfig, ParameterSet<f32>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(r.err(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(r.err(8, format!("unsupported version {version}")));
    }
    let beta = f64::from_le_bytes(r.take(8, "beta")?.try_into().expect("8 bytes"));
    let len = r.u32("config length")?;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| r.err(at, "config is not UTF-8"))?;
    let cfg = NetConfig::from_text(text).map_err(|e| r.err(at, format!("bad network config: {e}")))?;
    let (info, values) = r.section(PARAM_TAG, "PARM")?;
    let shadow_at = r.pos;
    let (shadow_info, shadow) = r.section(SHADOW_TAG, "SHDW")?;
    if shadow_info != info {
        return Err(r.err(shadow_at, "shadow tensors do not match parameter names"));
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, "trailing bytes after last section"));
    }
    let params = ParameterSet::with_shadow(info, values, shadow, beta).map_err(|e| r.err(shadow_at, e.to_string()))?;
    UNet::new(&cfg)?
        .check_params(&params)
        .map_err(|e| r.err(0, format!("parameters do not fit the stored config: {e}")))?;
    Ok((cfg, params))
}

/// Writes via a temporary file and rename so readers never see a partial
/// checkpoint.
pub fn save_params(path: impl AsRef<Path>, cfg: &NetConfig, params: &ParameterSet<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(cfg, params);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(NetConfig, ParameterSet<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Compares the analytic gradient of `sum(r * output)` for a random
/// cotangent `r` against central differences at 64-bit.
///
/// Every input pixel is checked, plus up to six evenly spaced elements of
/// each trainable tensor. Running statistics are randomised so eval mode is
/// not a plain identity normalisation.
pub fn check_gradients(cfg: &NetConfig, mode: Mode, batch: usize, size: usize, seed: u64) -> Result<Comparison> {
    let net = UNet::new(cfg)?;
    let mut p = net.init_params::<f64>(seed, DEFAULT_EMA_BETA)?;
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let info = p.info().to_vec();
    for (i, v) in info.iter().zip(p.values_mut()) {
        if i.name.ends_with("running_mean") {
            *v = gradcheck::random_tensor(&mut rng, v.shape(), -0.2, 0.2);
        } else if i.name.ends_with("running_var") {
            *v = gradcheck::random_tensor(&mut rng, v.shape(), 0.5, 1.5);
        }
    }
    let shape = [batch, cfg.in_channels, size, size];
    let x = gradcheck::random_tensor(&mut rng, &shape, 0.0, 1.0);
    let r = gradcheck::random_tensor(&mut rng, &[batch, 1, size, size], -1.0, 1.0);
    let values = p.values().to_vec();
    let dropout_seed = derive_seed(seed, 2);
    let objective = |vals: &[Tensor<f64>], x: &Tensor<f64>| -> (f64, u64) {
        match net.forward(vals, x, mode, dropout_seed) {
            Ok(f) => (f.output.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(), f.branch_fingerprint()),
            Err(_) => (f64::NAN, 0),
        }
    };
    let fwd = net.forward(&values, &x, mode, dropout_seed)?;
    let g = net.backward(&values, &fwd, &r, true)?;
    let dx = g.input.as_ref().expect("input gradient requested");

    let mut cmp = gradcheck::compare_branches(dx.data(), x.data(), |xd| {
        let xt = Tensor::from_vec(&shape, xd.to_vec()).expect("same shape");
        objective(&values, &xt)
    });
    let h = gradcheck::STEP;
    for (k, spec) in net.specs.iter().enumerate() {
        let Some(ga) = &g.params[k] else { continue };
        let n = values[k].len();
        for e in (0..n).step_by((n / 6).max(1)).take(6) {
            let mut vals = values.clone();
            let orig = vals[k].data()[e];
            vals[k].data_mut()[e] = orig + h;
            let (lp, bp) = objective(&vals, &x);
            vals[k].data_mut()[e] = orig - h;
            let (lm, bm) = objective(&vals, &x);
            debug_assert!(spec.trainable);
            if bp != bm {
                cmp.skipped += 1;
                continue;
            }
            cmp = cmp.merge(Comparison::single(e, ga.data()[e], (lp - lm) / (2.0 * h)));
        }
    }
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two levels so decoder ordering is exercised; 16x16 input leaves a
    /// 4x4 bottleneck, enough for scales up to 3.
    fn tiny() -> NetConfig {
        NetConfig {
            init_channels: 4,
            depth: 2,
            pyramid_scales: vec![1, 2, 3],
            dropout_p: 0.0,
            ..NetConfig::default()
        }
    }

    #[test]
    fn desk_output_shape_and_range() {
        let cfg = NetConfig::default();
        let net = UNet::new(&cfg).unwrap();
        let p = net.init_params::<f32>(1, DEFAULT_EMA_BETA).unwrap();
        let x = Tensor::from_vec(&[1, 1, 64, 64], (0..4096).map(|i| (i % 61) as f32 / 60.0).collect()).unwrap();
        let y = net.predict(p.values(), &x).unwrap();
        assert_eq!(y.shape(), [1, 1, 64, 64]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn pyramid_concat_doubles_channels() {
        let cfg = NetConfig {
            init_channels: 4,
            ..NetConfig::default()
        };
        let net = UNet::new(&cfg).unwrap();
        // 4 << 3 = 32 bottleneck channels, post block reads 32 + 4*8
        let i = net.param_info().iter().position(|p| p.name == "post.0.conv.weight").unwrap();
        assert_eq!(net.specs[i].shape, vec![32, 64, 3, 3]);
        let p = net.init_params::<f32>(0, 0.9).unwrap();
        let x = Tensor::filled(&[2, 1, 128, 128], 0.5f32);
        let f = net.forward(p.values(), &x, Mode::Train, 3).unwrap();
        assert_eq!(f.tape.feature_shape, vec![2, 32, 16, 16]);
    }

    #[test]
    fn divisibility_errors_name_the_dimension() {
        let cfg = NetConfig::default();
        let e = cfg.check_input(64, 60).unwrap_err().to_string();
        assert!(e.contains("width 60"), "{e}");
        let e = cfg.check_input(40, 64).unwrap_err().to_string();
        assert!(e.contains("height 40"), "{e}");
        assert!(cfg.check_input(48, 48).is_ok());
    }

    #[test]
    fn config_validation() {
        for bad in [
            NetConfig { init_channels: 6, ..NetConfig::default() },
            NetConfig { depth: 0, ..NetConfig::default() },
            NetConfig { pyramid_scales: vec![], ..NetConfig::default() },
            NetConfig { dropout_p: 1.0, ..NetConfig::default() },
            NetConfig { out_channels: 2, ..NetConfig::default() },
        ] {
            assert!(UNet::new(&bad).is_err(), "{bad:?}");
        }
        let cfg = NetConfig::full_size();
        assert_eq!(NetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = UNet::new(&NetConfig::default()).unwrap();
        let p = net.init_params::<f32>(4, 0.99).unwrap();
        let x = Tensor::from_vec(&[2, 1, 64, 64], (0..8192).map(|i| ((i * 7) % 13) as f32 / 13.0).collect()).unwrap();
        let a = net.forward(p.values(), &x, Mode::Eval, 1).unwrap().output;
        let b = net.forward(p.values(), &x, Mode::Eval, 99).unwrap().output;
        assert_eq!(a, b);
        let s = net.predict(p.shadow(), &x).unwrap();
        assert_eq!(s.shape(), a.shape());
    }

    #[test]
    fn ema_fixed_point_and_single_step() {
        let info = vec![ParamInfo { name: "w".into(), trainable: true }];
        let mut p = ParameterSet::new(info.clone(), vec![Tensor::filled(&[3], 0.7f32)], 0.995).unwrap();
        for _ in 0..1000 {
            p.ema_update().unwrap();
        }
        assert!(p.shadow()[0].data().iter().all(|&v| v == 0.7));

        let mut p = ParameterSet::with_shadow(
            info,
            vec![Tensor::filled(&[1], 1.0f32)],
            vec![Tensor::filled(&[1], 0.0f32)],
            0.995,
        )
        .unwrap();
        p.ema_update().unwrap();
        assert_eq!(p.shadow()[0].data()[0], 0.005f32);
    }

    #[test]
    fn ema_rejects_bad_beta_and_shapes() {
        let info = vec![ParamInfo { name: "w".into(), trainable: true }];
        assert!(ParameterSet::new(info.clone(), vec![Tensor::<f32>::zeros(&[2])], 1.0).is_err());
        assert!(ParameterSet::with_shadow(info, vec![Tensor::<f32>::zeros(&[2])], vec![Tensor::zeros(&[3])], 0.5).is_err());
    }

    #[test]
    fn running_stats_move_in_train_mode() {
        let net = UNet::new(&tiny()).unwrap();
        let mut p = net.init_params::<f32>(2, 0.9).unwrap();
        let x = Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let f = net.forward(p.values(), &x, Mode::Train, 0).unwrap();
        let before = p.values().to_vec();
        net.update_running_stats(&f, p.values_mut()).unwrap();
        let i = p.index_of("enc0.0.bn.running_mean").unwrap();
        assert_ne!(before[i], p.values()[i]);
        let j = p.index_of("enc0.0.conv.weight").unwrap();
        assert_eq!(before[j], p.values()[j]);
    }

    #[test]
    fn end_to_end_gradient_eval_mode() {
        let cfg = NetConfig { dropout_p: 0.4, ..tiny() };
        let c = check_gradients(&cfg, Mode::Eval, 1, 16, 7).unwrap();
        assert!(c.max_rel_error < 1e-3, "{c:?}");
    }

    #[test]
    fn end_to_end_gradient_train_mode() {
        let cfg = NetConfig { dropout_p: 0.4, ..tiny() };
        let c = check_gradients(&cfg, Mode::Train, 2, 16, 8).unwrap();
        assert!(c.max_rel_error < 1e-3, "{c:?}");
    }

    #[test]
    fn end_to_end_gradient_all_pyramid_scales() {
        let cfg = NetConfig {
            init_channels: 4,
            depth: 1,
            ..NetConfig::default()
        };
        let c = check_gradients(&cfg, Mode::Eval, 1, 16, 9).unwrap();
        assert!(c.max_rel_error < 1e-3, "{c:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = tiny();
        let net = UNet::new(&cfg).unwrap();
        let mut p = net.init_params::<f32>(3, 0.995).unwrap();
        p.values_mut()[0].data_mut()[0] = 1.25;
        p.ema_update().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_params(&path, &cfg, &p).unwrap();
        let (cfg2, p2) = load_params(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(p2, p);
        save_params(dir.path().join("again.ckpt"), &cfg2, &p2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("again.ckpt")).unwrap());
    }

    #[test]
    fn checkpoint_truncation_and_missing_shadow() {
        let cfg = tiny();
        let net = UNet::new(&cfg).unwrap();
        let p = net.init_params::<f32>(3, 0.995).unwrap();
        let bytes = encode_checkpoint(&cfg, &p);
        let path = Path::new("mem.ckpt");
        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            let e = decode_checkpoint(&bytes[..cut], path).unwrap_err();
            assert!(matches!(e, Error::Format { .. }), "cut {cut}: {e}");
        }
        let shadow_at = bytes.windows(4).rposition(|w| w == SHADOW_TAG).unwrap();
        let e = decode_checkpoint(&bytes[..shadow_at], path).unwrap_err().to_string();
        assert!(e.contains("missing section SHDW"), "{e}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, path).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_checkpoint(&bad, path).unwrap_err().to_string().contains("version"));
        let mut bad = bytes;
        bad.push(0);
        assert!(decode_checkpoint(&bad, path).unwrap_err().to_string().contains("trailing"));
    }
}
