//! Warp-predicting generator and PatchGAN discriminator.

use crate::autodiff::{Graph, Parameter, Tensor, TensorError, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::lie::WarpParams;
use crate::raster::{ForegroundLayer, Raster};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const CONV_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];
pub const HIDDEN_WIDTH: usize = 256;
pub const KERNEL: usize = 4;
pub const INIT_STD: f64 = 0.01;
/// Foreground RGB, foreground alpha, background RGB.
pub const GENERATOR_INPUT_CHANNELS: usize = 7;
pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("bad resolution {height}x{width}: {reason}")]
    BadResolution {
        height: usize,
        width: usize,
        reason: String,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture of either network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub width_mult: f64,
    /// Number of stride-2 convolutions (the discriminator counts its final
    /// one-channel layer).
    pub depth: usize,
}

impl NetConfig {
    pub fn generator(height: usize, width: usize, width_mult: f64) -> Self {
        NetConfig {
            height,
            width,
            width_mult,
            depth: 5,
        }
    }

    pub fn discriminator(height: usize, width: usize, width_mult: f64) -> Self {
        NetConfig {
            height,
            width,
            width_mult,
            depth: 6,
        }
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(1)
    }

    fn validate(&self, max_depth: usize) -> Result<(), NetError> {
        let bad = |reason: &str| NetError::BadResolution {
            height: self.height,
            width: self.width,
            reason: reason.into(),
        };
        if !(self.width_mult.is_finite() && self.width_mult > 0.0) {
            return Err(bad("width multiplier must be positive"));
        }
        if self.depth == 0 || self.depth > max_depth {
            return Err(bad(&format!("depth must be in 1..={max_depth}")));
        }
        if self.height < 2 || self.width < 2 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(bad("extents must be even and at least 2"));
        }
        Ok(())
    }

    /// Spatial extent after `levels` stride-2 halvings (rounded up).
    pub fn extent_at(&self, levels: usize) -> (usize, usize) {
        let mut hw = (self.height, self.width);
        for _ in 0..levels {
            hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
        }
        hw
    }
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

fn conv_params(prefix: &str, c_out: usize, c_in: usize, rng: &mut ChaCha8Rng) -> [Parameter; 2] {
    [
        Parameter::new(format!("{prefix}.weight"), normal_tensor(&[c_out, c_in, KERNEL, KERNEL], rng)),
        Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[c_out])),
    ]
}

fn linear_params(prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> [Parameter; 2] {
    [
        Parameter::new(format!("{prefix}.weight"), normal_tensor(&[fan_in, fan_out], rng)),
        Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])),
    ]
}

/// Binds parameters as graph leaves, trainable or frozen.
pub fn bind(g: &mut Graph, params: &[Parameter], trainable: bool) -> Vec<Var> {
    params.iter().map(|p| g.input(p.value.clone(), trainable)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    pub config: NetConfig,
    pub params: Vec<Parameter>,
}

impl GeneratorNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate(CONV_WIDTHS.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut c_in = GENERATOR_INPUT_CHANNELS;
        for d in 0..config.depth {
            let c_out = config.scaled(CONV_WIDTHS[d]);
            params.extend(conv_params(&format!("conv{d}"), c_out, c_in, &mut rng));
            c_in = c_out + GENERATOR_INPUT_CHANNELS;
        }
        let hidden = config.scaled(HIDDEN_WIDTH);
        params.extend(linear_params("fc0", Self::flat_width(&config), hidden, &mut rng));
        params.extend(linear_params("fc1", hidden, 8, &mut rng));
        Ok(GeneratorNet { config, params })
    }

    fn flat_width(config: &NetConfig) -> usize {
        let (h, w) = config.extent_at(config.depth);
        config.scaled(CONV_WIDTHS[config.depth - 1]) * h * w
    }

    /// Closed-form parameter count.
    pub fn expected_param_count(config: &NetConfig) -> usize {
        let mut total = 0;
        let mut c_in = GENERATOR_INPUT_CHANNELS;
        for d in 0..config.depth {
            let c_out = config.scaled(CONV_WIDTHS[d]);
            total += c_out * (c_in * KERNEL * KERNEL + 1);
            c_in = c_out + GENERATOR_INPUT_CHANNELS;
        }
        let hidden = config.scaled(HIDDEN_WIDTH);
        total + (Self::flat_width(config) + 1) * hidden + (hidden + 1) * 8
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
    }

    /// Zeroes the output layer so the network predicts the identity update.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Copies weights from another network of the same architecture.
    pub fn warm_start_from(&mut self, other: &GeneratorNet) -> Result<(), NetError> {
        if other.config != self.config {
            return Err(NetError::ShapeMismatch("warm start from a different architecture".into()));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.value = q.value.clone();
        }
        Ok(())
    }

    /// `(N, 7, H, W)` → `(N, 8)` warp updates.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<Var, NetError> {
        let s = g.shape(input).to_vec();
        let want = [GENERATOR_INPUT_CHANNELS, self.config.height, self.config.width];
        if s.len() != 4 || s[1..] != want {
            return Err(NetError::ShapeMismatch(format!("generator input {s:?}, expected (N, {want:?})")));
        }
        let n = s[0];
        let mut pooled = input;
        let mut h = input;
        for d in 0..self.config.depth {
            if d > 0 {
                pooled = g.avg_pool2(pooled)?;
                h = g.concat_channels(&[h, pooled])?;
            }
            h = g.conv2d(h, vars[2 * d], 2)?;
            h = g.bias_add(h, vars[2 * d + 1])?;
            h = g.relu(h);
        }
        let k = 2 * self.config.depth;
        let flat = g.reshape(h, &[n, Self::flat_width(&self.config)])?;
        let z = g.matmul(flat, vars[k], false, false)?;
        let z = g.bias_add(z, vars[k + 1])?;
        let z = g.relu(z);
        let out = g.matmul(z, vars[k + 2], false, false)?;
        Ok(g.bias_add(out, vars[k + 3])?)
    }

    /// Single-sample prediction outside of training.
    pub fn predict(&self, fg: &ForegroundLayer, bg: &Raster) -> Result<WarpParams, NetError> {
        let input = generator_input(&[fg], &[bg])?;
        let mut g = Graph::new();
        let vars = bind(&mut g, &self.params, false);
        let x = g.constant(input);
        let out = self.forward(&mut g, &vars, x)?;
        let d = g.value(out).data();
        Ok(WarpParams(std::array::from_fn(|i| d[i] as f64)))
    }
}

/// Stacks foreground RGBA and background RGB into a `(N, 7, H, W)` tensor.
pub fn generator_input(fgs: &[&ForegroundLayer], bgs: &[&Raster]) -> Result<Tensor, NetError> {
    if fgs.len() != bgs.len() || fgs.is_empty() {
        return Err(NetError::ShapeMismatch("foreground and background batch sizes differ".into()));
    }
    let (h, w) = (fgs[0].height(), fgs[0].width());
    let mut data = Vec::with_capacity(fgs.len() * 7 * h * w);
    for (fg, bg) in fgs.iter().zip(bgs) {
        if fg.height() != h || fg.width() != w || bg.height != h || bg.width != w || bg.channels != 3 {
            return Err(NetError::ShapeMismatch("inconsistent layer sizes in batch".into()));
        }
        data.extend_from_slice(&fg.color.data);
        data.extend_from_slice(&fg.mask.data);
        data.extend_from_slice(&bg.data);
    }
    Ok(Tensor::new(&[fgs.len(), GENERATOR_INPUT_CHANNELS, h, w], data)?)
}

/// Stacks 3-channel rasters into `(N, 3, H, W)`.
pub fn image_batch(imgs: &[&Raster]) -> Result<Tensor, NetError> {
    let first = imgs.first().ok_or_else(|| NetError::ShapeMismatch("empty batch".into()))?;
    let mut data = Vec::with_capacity(imgs.len() * first.data.len());
    for im in imgs {
        if !im.same_size(first) || im.channels != first.channels {
            return Err(NetError::ShapeMismatch("inconsistent image sizes in batch".into()));
        }
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::new(&[imgs.len(), first.channels, first.height, first.width], data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorNet {
    pub config: NetConfig,
    pub params: Vec<Parameter>,
}

impl DiscriminatorNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate(CONV_WIDTHS.len() + 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut c_in = 3;
        for (d, c_out) in Self::widths(&config).into_iter().enumerate() {
            params.extend(conv_params(&format!("conv{d}"), c_out, c_in, &mut rng));
            c_in = c_out;
        }
        Ok(DiscriminatorNet { config, params })
    }

    fn widths(config: &NetConfig) -> Vec<usize> {
        let mut w: Vec<usize> = (0..config.depth - 1).map(|d| config.scaled(CONV_WIDTHS[d])).collect();
        w.push(1);
        w
    }

    pub fn expected_param_count(config: &NetConfig) -> usize {
        let mut c_in = 3;
        let mut total = 0;
        for c_out in Self::widths(config) {
            total += c_out * (c_in * KERNEL * KERNEL + 1);
            c_in = c_out;
        }
        total
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Spatial extent of the score map.
    pub fn score_map_extent(&self) -> (usize, usize) {
        self.config.extent_at(self.config.depth)
    }

    pub fn zero_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
    }

    /// Raw `(N, 1, h, w)` score map.
    pub fn score_map(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, NetError> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1..] != [3, self.config.height, self.config.width] {
            return Err(NetError::ShapeMismatch(format!(
                "discriminator input {s:?}, expected (N, 3, {}, {})",
                self.config.height, self.config.width
            )));
        }
        let mut h = x;
        let last = self.config.depth - 1;
        for d in 0..self.config.depth {
            h = g.conv2d(h, vars[2 * d], 2)?;
            h = g.bias_add(h, vars[2 * d + 1])?;
            if d < last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    /// Per-sample scores `(N)`: the mean of each patch map.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, NetError> {
        let map = self.score_map(g, vars, x)?;
        let (h, w) = self.score_map_extent();
        let sums = g.sum_per_sample(map);
        Ok(g.scale(sums, 1.0 / (h * w) as f32))
    }

    pub fn score(&self, img: &Raster) -> Result<f64, NetError> {
        let mut g = Graph::new();
        let vars = bind(&mut g, &self.params, false);
        let x = g.constant(image_batch(&[img])?);
        let s = self.forward(&mut g, &vars, x)?;
        Ok(g.value(s).item() as f64)
    }
}

/// Generators `G_1..G_N` sharing one discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorStack {
    pub generators: Vec<GeneratorNet>,
    pub discriminator: DiscriminatorNet,
}

impl GeneratorStack {
    pub fn new(stages: usize, gen: NetConfig, disc: NetConfig, seed: u64) -> Result<Self, NetError> {
        let generators = (0..stages)
            .map(|i| GeneratorNet::new(gen, seed.wrapping_add(1 + i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let discriminator = DiscriminatorNet::new(disc, seed)?;
        Ok(GeneratorStack {
            generators,
            discriminator,
        })
    }

    pub fn stages(&self) -> usize {
        self.generators.len()
    }
}

/// Stores parameter values, and optionally Adam moments, under `prefix`.
pub fn store_params(ckpt: &mut Checkpoint, prefix: &str, params: &[Parameter], moments: bool) {
    for p in params {
        ckpt.push(format!("{prefix}.{}", p.name), &p.value);
        if moments {
            let shape = p.value.shape();
            let m = Tensor::new(shape, p.m.clone()).expect("moment shape");
            let v = Tensor::new(shape, p.v.clone()).expect("moment shape");
            ckpt.push(format!("{prefix}.{}#m", p.name), &m);
            ckpt.push(format!("{prefix}.{}#v", p.name), &v);
        }
    }
}

/// Inverse of [`store_params`]; shapes must match the freshly built network.
pub fn restore_params(ckpt: &Checkpoint, prefix: &str, params: &mut [Parameter], moments: bool) -> Result<(), CheckpointError> {
    for p in params {
        let name = format!("{prefix}.{}", p.name);
        let t = ckpt.get(&name)?;
        if t.shape() != p.value.shape() {
            return Err(CheckpointError::CorruptCheckpoint(format!(
                "{name} has shape {:?}, network expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
        if moments {
            p.m = ckpt.get(&format!("{name}#m"))?.data().to_vec();
            p.v = ckpt.get(&format!("{name}#v"))?.data().to_vec();
        } else {
            p.reset_moments();
        }
    }
    Ok(())
}

/// Architecture record stored in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackSpec {
    pub stages: usize,
    pub generator: NetConfig,
    pub discriminator: NetConfig,
}

impl GeneratorStack {
    pub fn spec(&self) -> StackSpec {
        StackSpec {
            stages: self.stages(),
            generator: self.generators.first().map(|g| g.config).unwrap_or(self.discriminator.config),
            discriminator: self.discriminator.config,
        }
    }

    pub fn store(&self, ckpt: &mut Checkpoint, moments: bool) {
        for (i, g) in self.generators.iter().enumerate() {
            store_params(ckpt, &format!("g{i}"), &g.params, moments);
        }
        store_params(ckpt, "d", &self.discriminator.params, moments);
    }

    pub fn restore(spec: &StackSpec, ckpt: &Checkpoint, moments: bool) -> Result<Self, CheckpointError> {
        let bad = |e: NetError| CheckpointError::CorruptCheckpoint(e.to_string());
        let mut stack = GeneratorStack::new(spec.stages, spec.generator, spec.discriminator, 0).map_err(bad)?;
        for (i, g) in stack.generators.iter_mut().enumerate() {
            restore_params(ckpt, &format!("g{i}"), &mut g.params, moments)?;
        }
        restore_params(ckpt, "d", &mut stack.discriminator.params, moments)?;
        Ok(stack)
    }

    /// Reads the stack from any checkpoint whose manifest carries `model`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        let spec: StackSpec = serde_json::from_value(ckpt.meta["model"].clone())?;
        Self::restore(&spec, ckpt, false)
    }
}
