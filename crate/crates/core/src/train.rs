//! Sequential WGAN-GP training of the generator stack.

use crate::autodiff::{gradient_penalty, Adam, AdamConfig, Graph, Parameter, Tensor, TensorError, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::cubes::CubesDataset;
use crate::eval::{self, EvalConfig, WarpPredictor};
use crate::lie::{FrameMap, WarpParams};
use crate::nets::{bind, DiscriminatorNet, GeneratorNet, GeneratorStack, NetConfig, NetError, StackSpec};
use crate::perturb::{sample_initial_warp, PerturbationModel};
use crate::raster::{ForegroundLayer, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_KIND: &str = "stgan";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("unknown preset {0:?} (known: cubes, indoor, glasses, desk)")]
    UnknownPreset(String),
    #[error("stage {requested} requested while in phase {phase}")]
    StageOrderViolation { requested: usize, phase: String },
    #[error("training data: {0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Each fake is judged against the real render of the same scene.
    Paired,
    /// Reals are drawn independently from the pool.
    Unpaired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    Random,
    /// Zeroed output layer, so every stage starts at the identity update.
    ZeroOutput,
    /// Copy a trained direct regressor into every generator.
    Regressor(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub height: usize,
    pub width: usize,
    pub stages: usize,
    pub iters_per_stage: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lambda_grad: f64,
    pub lambda_update: f64,
    pub n_critic: usize,
    pub taylor_order: usize,
    pub width_mult: f64,
    pub generator_depth: usize,
    pub discriminator_depth: usize,
    pub perturbation: PerturbationModel,
    pub pairing: Pairing,
    /// Half-range in pixels of a random shift applied when re-rendering each
    /// real through the warp; 0 uses the stored reals as they are.
    pub real_jitter: f64,
    pub warm_start: WarmStart,
    pub pretrain_iters: usize,
    pub finetune_iters: usize,
    pub seed: u64,
    pub log_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub moving_average_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small configuration that trains on one CPU core in hours.
    pub fn desk() -> Self {
        TrainConfig {
            height: 32,
            width: 32,
            stages: 2,
            iters_per_stage: 5000,
            batch_size: 20,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            lambda_grad: 10.0,
            lambda_update: 0.1,
            n_critic: 5,
            taylor_order: 20,
            width_mult: 0.25,
            generator_depth: 5,
            discriminator_depth: 6,
            perturbation: PerturbationModel::default(),
            pairing: Pairing::Paired,
            real_jitter: 0.5,
            warm_start: WarmStart::Random,
            pretrain_iters: 0,
            finetune_iters: 0,
            seed: 0,
            log_every: 10,
            eval_every: 500,
            checkpoint_every: 500,
            moving_average_window: 100,
        }
    }

    pub fn cubes() -> Self {
        TrainConfig {
            height: 120,
            width: 160,
            stages: 4,
            iters_per_stage: 50_000,
            width_mult: 1.0,
            real_jitter: 0.0,
            ..Self::desk()
        }
    }

    pub fn indoor() -> Self {
        TrainConfig {
            iters_per_stage: 40_000,
            lr_generator: 1e-6,
            lr_discriminator: 1e-4,
            lambda_update: 0.3,
            pairing: Pairing::Unpaired,
            warm_start: WarmStart::Regressor(PathBuf::from("homnet.ckpt")),
            finetune_iters: 40_000,
            ..Self::cubes()
        }
    }

    pub fn glasses() -> Self {
        TrainConfig {
            height: 144,
            width: 144,
            stages: 5,
            iters_per_stage: 50_000,
            lr_generator: 1e-5,
            lr_discriminator: 1e-5,
            lambda_update: 1.0,
            pairing: Pairing::Unpaired,
            pretrain_iters: 50_000,
            perturbation: PerturbationModel {
                translation_jitter: Some(0.05),
                ..PerturbationModel::default()
            },
            ..Self::cubes()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "cubes" => Ok(Self::cubes()),
            "indoor" => Ok(Self::indoor()),
            "glasses" => Ok(Self::glasses()),
            other => Err(TrainError::UnknownPreset(other.into())),
        }
    }

    /// Parses TOML, or JSON when the text starts with `{`. Missing fields
    /// take desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = parse_config(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::InvalidConfig {
            field: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(TrainError::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        for (field, v) in [
            ("height", self.height),
            ("width", self.width),
            ("stages", self.stages),
            ("batch_size", self.batch_size),
            ("n_critic", self.n_critic),
            ("taylor_order", self.taylor_order),
            ("generator_depth", self.generator_depth),
            ("discriminator_depth", self.discriminator_depth),
            ("moving_average_window", self.moving_average_window),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        for (field, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("width_mult", self.width_mult),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(field, "must be a positive number");
            }
        }
        for (field, v) in [
            ("lambda_grad", self.lambda_grad),
            ("lambda_update", self.lambda_update),
            ("real_jitter", self.real_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, "must be non-negative");
            }
        }
        let pm = &self.perturbation;
        if !(pm.sigma.is_finite() && pm.sigma >= 0.0) {
            return bad("perturbation.sigma", "must be non-negative");
        }
        if let Some([a, b]) = pm.rescale {
            if !(a > 0.0 && b >= a) {
                return bad("perturbation.rescale", "must be a positive range");
            }
        }
        if let Some(t) = pm.translation_jitter {
            if !(t.is_finite() && t >= 0.0) {
                return bad("perturbation.translation_jitter", "must be non-negative");
            }
        }
        check_net("generator_depth", GeneratorNet::new(self.generator_net(), 0))?;
        check_net("discriminator_depth", DiscriminatorNet::new(self.discriminator_net(), 0))?;
        Ok(())
    }

    pub fn generator_net(&self) -> NetConfig {
        NetConfig {
            depth: self.generator_depth,
            ..NetConfig::generator(self.height, self.width, self.width_mult)
        }
    }

    pub fn discriminator_net(&self) -> NetConfig {
        NetConfig {
            depth: self.discriminator_depth,
            ..NetConfig::discriminator(self.height, self.width, self.width_mult)
        }
    }

    /// Ordered training phases with their lengths.
    pub fn schedule(&self) -> Vec<(Phase, usize)> {
        let mut out = Vec::new();
        if self.pretrain_iters > 0 {
            out.push((Phase::Pretrain, self.pretrain_iters));
        }
        for i in 0..self.stages {
            out.push((Phase::Stage(i), self.iters_per_stage));
        }
        if self.finetune_iters > 0 {
            out.push((Phase::Finetune, self.finetune_iters));
        }
        out
    }
}

/// Deserializes a TOML document, or JSON when the text starts with `{`.
pub fn parse_config<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| TrainError::InvalidConfig {
            field: format!("line {} column {}", e.line(), e.column()),
            reason: e.to_string(),
        })
    } else {
        toml::from_str(text).map_err(|e| TrainError::InvalidConfig {
            field: e.span().map_or("document".into(), |s| format!("bytes {}..{}", s.start, s.end)),
            reason: e.message().to_string(),
        })
    }
}

fn check_net<T>(field: &str, built: std::result::Result<T, NetError>) -> Result<()> {
    built.map(|_| ()).map_err(|e| TrainError::InvalidConfig {
        field: field.into(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Stage(usize),
    Finetune,
    Done,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Pretrain => write!(f, "pretrain"),
            Phase::Stage(i) => write!(f, "stage {i}"),
            Phase::Finetune => write!(f, "finetune"),
            Phase::Done => write!(f, "done"),
        }
    }
}

/// One line of the JSONL metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub phase: Phase,
    pub stage: Option<usize>,
    pub d_loss: f64,
    pub g_loss: Option<f64>,
    pub gp: f64,
    pub mean_update_norm: Option<f64>,
    pub corner_error_eval: Option<f64>,
}

/// Mean of the last `window` update norms in `records`.
pub fn moving_average_update_norm(records: &[MetricsRecord], window: usize) -> Option<f64> {
    let v: Vec<f64> = records.iter().filter_map(|r| r.mean_update_norm).collect();
    if v.is_empty() || window == 0 {
        return None;
    }
    let tail = &v[v.len().saturating_sub(window)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Composites and real images in flat per-sample layout.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub height: usize,
    pub width: usize,
    /// Foreground RGBA, `4·H·W` floats per sample.
    fg: Vec<f32>,
    /// Background RGB, `3·H·W` per sample.
    bg: Vec<f32>,
    /// Real RGB pool, `3·H·W` per image.
    real: Vec<f32>,
    /// The real pool's foreground layers (RGBA) and backgrounds, when known,
    /// so that reals can be re-rendered through the warp.
    real_layers: Option<(Vec<f32>, Vec<f32>)>,
}

impl TrainData {
    pub fn from_cubes(data: &CubesDataset) -> Result<Self> {
        let fgs: Vec<&ForegroundLayer> = data.samples.iter().map(|s| &s.fg).collect();
        let bgs: Vec<&Raster> = data.samples.iter().map(|s| &s.bg).collect();
        let reals: Vec<&Raster> = data.samples.iter().map(|s| &s.real).collect();
        let mut out = Self::new(&fgs, &bgs, &reals)?;
        let mut layers = Vec::with_capacity(out.fg.len());
        for s in &data.samples {
            let r = s.reference_layer();
            layers.extend_from_slice(&r.color.data);
            layers.extend_from_slice(&r.mask.data);
        }
        out.real_layers = Some((layers, out.bg.clone()));
        Ok(out)
    }

    pub fn has_real_layers(&self) -> bool {
        self.real_layers.is_some()
    }

    /// Realistic layers paired with their backgrounds, for self-supervised
    /// regression.
    pub fn reference_from_cubes(data: &CubesDataset) -> Result<Self> {
        let layers: Vec<ForegroundLayer> = data.samples.iter().map(|s| s.reference_layer()).collect();
        let fgs: Vec<&ForegroundLayer> = layers.iter().collect();
        let bgs: Vec<&Raster> = data.samples.iter().map(|s| &s.bg).collect();
        let reals: Vec<&Raster> = data.samples.iter().map(|s| &s.real).collect();
        Self::new(&fgs, &bgs, &reals)
    }

    pub fn new(fgs: &[&ForegroundLayer], bgs: &[&Raster], reals: &[&Raster]) -> Result<Self> {
        let (Some(first), false) = (fgs.first(), reals.is_empty()) else {
            return Err(TrainError::Data("no training samples".into()));
        };
        if fgs.len() != bgs.len() {
            return Err(TrainError::Data(format!("{} foregrounds, {} backgrounds", fgs.len(), bgs.len())));
        }
        let (h, w) = (first.height(), first.width());
        let mut out = TrainData {
            height: h,
            width: w,
            fg: Vec::with_capacity(fgs.len() * 4 * h * w),
            bg: Vec::with_capacity(bgs.len() * 3 * h * w),
            real: Vec::with_capacity(reals.len() * 3 * h * w),
            real_layers: None,
        };
        let rgb_ok = |r: &Raster| r.height == h && r.width == w && r.channels == 3;
        for (f, b) in fgs.iter().zip(bgs) {
            if f.height() != h || f.width() != w || !rgb_ok(b) {
                return Err(TrainError::Data("inconsistent image sizes".into()));
            }
            out.fg.extend_from_slice(&f.color.data);
            out.fg.extend_from_slice(&f.mask.data);
            out.bg.extend_from_slice(&b.data);
        }
        for r in reals {
            if !rgb_ok(r) {
                return Err(TrainError::Data("inconsistent real image sizes".into()));
            }
            out.real.extend_from_slice(&r.data);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.fg.len() / (4 * self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn real_count(&self) -> usize {
        self.real.len() / (3 * self.height * self.width)
    }

    fn gather(src: &[f32], per: usize, idx: &[usize], channels: usize, h: usize, w: usize) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        Tensor::new(&[idx.len(), channels, h, w], data).expect("gathered batch")
    }

    /// Real layers and their backgrounds for `b.real_index`.
    fn real_layer_batch(&self, b: &Batch) -> Option<(Tensor, Tensor)> {
        let (layers, bgs) = self.real_layers.as_ref()?;
        let (h, w) = (self.height, self.width);
        Some((
            Self::gather(layers, 4 * h * w, &b.real_index, 4, h, w),
            Self::gather(bgs, 3 * h * w, &b.real_index, 3, h, w),
        ))
    }

    pub(crate) fn batch(&self, b: &Batch) -> (Tensor, Tensor, Tensor) {
        let (h, w) = (self.height, self.width);
        (
            Self::gather(&self.fg, 4 * h * w, &b.index, 4, h, w),
            Self::gather(&self.bg, 3 * h * w, &b.index, 3, h, w),
            Self::gather(&self.real, 3 * h * w, &b.real_index, 3, h, w),
        )
    }
}

/// Random draws for one batch, in a fixed consumption order.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    pub index: Vec<usize>,
    pub real_index: Vec<usize>,
    pub p0: Tensor,
    pub eps: Vec<f32>,
}

pub(crate) fn sample_batch(rng: &mut ChaCha8Rng, data: &TrainData, batch_size: usize, pairing: Pairing, pm: &PerturbationModel) -> Batch {
    let n = batch_size;
    let index: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
    let real_index = match pairing {
        Pairing::Paired if data.real_count() == data.len() => index.clone(),
        _ => (0..n).map(|_| rng.random_range(0..data.real_count())).collect(),
    };
    let mut p0 = Vec::with_capacity(8 * n);
    for _ in 0..n {
        let p = sample_initial_warp(pm, rng);
        p0.extend(p.0.iter().map(|v| *v as f32));
    }
    let eps = (0..n).map(|_| rng.random::<f32>()).collect();
    Batch {
        index,
        real_index,
        p0: Tensor::new(&[n, 8], p0).expect("p0 batch"),
        eps,
    }
}

/// Differentiable `composite(warp(fg, p), bg)` for RGBA `fg`.
pub fn composite_at(g: &mut Graph, fg: Var, params: Var, bg: Var, frame: FrameMap, order: usize) -> Result<Var> {
    let warped = g.warp(fg, params, frame, order)?;
    let color = g.slice_channels(warped, 0, 3)?;
    let mask = g.slice_channels(warped, 3, 1)?;
    Ok(g.composite(color, mask, bg)?)
}

/// Terms of the critic loss.
#[derive(Debug, Clone, Copy)]
pub struct DLoss {
    pub loss: Var,
    pub wasserstein: f64,
    pub gp: f64,
}

/// `mean D(fake) − mean D(real) + λ_grad · mean (‖∇D(x̂)‖ − 1)²` with
/// `x̂ = ε·real + (1 − ε)·fake` and one `ε` per sample.
///
/// `critic` maps an `(N, C, H, W)` batch to `(N)` scores.
pub fn d_loss(
    g: &mut Graph,
    critic: &mut dyn FnMut(&mut Graph, Var) -> Result<Var>,
    real: Var,
    fake: Var,
    eps: &[f32],
    lambda_grad: f64,
) -> Result<DLoss> {
    let (rt, ft) = (g.value(real), g.value(fake));
    if rt.shape() != ft.shape() || rt.batch() != eps.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "real {:?}, fake {:?}, {} interpolation weights",
            rt.shape(),
            ft.shape(),
            eps.len()
        ))
        .into());
    }
    let per = rt.inner() * rt.channels();
    let mut mix = Vec::with_capacity(rt.numel());
    if lambda_grad != 0.0 {
        for (b, e) in eps.iter().enumerate() {
            let (r, f) = (&rt.data()[b * per..(b + 1) * per], &ft.data()[b * per..(b + 1) * per]);
            mix.extend(r.iter().zip(f).map(|(r, f)| e * r + (1.0 - e) * f));
        }
    }
    let shape = rt.shape().to_vec();
    let sr = critic(g, real)?;
    let sf = critic(g, fake)?;
    let mr = g.mean_all(sr);
    let mf = g.mean_all(sf);
    let w = g.sub(mf, mr)?;
    let wasserstein = g.value(w).item() as f64;
    if lambda_grad == 0.0 {
        return Ok(DLoss {
            loss: w,
            wasserstein,
            gp: 0.0,
        });
    }
    let xhat = g.input(Tensor::new(&shape, mix)?, true);
    let sh = critic(g, xhat)?;
    let total = g.sum_all(sh);
    let gp = gradient_penalty(g, total, xhat)?;
    let gp_value = g.value(gp).item() as f64;
    let weighted = g.scale(gp, lambda_grad as f32);
    let loss = g.add(w, weighted)?;
    Ok(DLoss {
        loss,
        wasserstein,
        gp: gp_value,
    })
}

/// `−mean D + λ_update · mean ‖Δp‖²` from per-sample `scores` and `(N, 8)` `dp`.
pub fn g_loss(g: &mut Graph, scores: Var, dp: Var, lambda_update: f64) -> Result<Var> {
    let m = g.mean_all(scores);
    let adv = g.scale(m, -1.0);
    if lambda_update == 0.0 {
        return Ok(adv);
    }
    let sq = g.square(dp);
    let per = g.sum_per_sample(sq);
    let mean = g.mean_all(per);
    let pen = g.scale(mean, lambda_update as f32);
    Ok(g.add(adv, pen)?)
}

fn mean_row_norm(t: &Tensor) -> f64 {
    let rows = t.batch();
    t.data()
        .chunks(8)
        .map(|r| r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows as f64
}

fn adam_step(opt: &mut Adam, params: &mut [Parameter], grads: &[Var], g: &Graph) -> Result<()> {
    let grads: Vec<&Tensor> = grads.iter().map(|v| g.value(*v)).collect();
    let mut refs: Vec<&mut Parameter> = params.iter_mut().collect();
    opt.update(&mut refs, &grads)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    pub(crate) fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub(crate) fn restore(&self) -> std::result::Result<ChaCha8Rng, CheckpointError> {
        let bad = |m: &str| CheckpointError::CorruptCheckpoint(format!("rng state: {m}"));
        if self.seed.len() != 64 {
            return Err(bad("seed length"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed digits"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerMeta {
    config: TrainConfig,
    model: StackSpec,
    phase: Phase,
    iteration: usize,
    global_iter: usize,
    d_opt: Adam,
    g_opts: Vec<Adam>,
    rng: RngState,
}

/// Whether [`Trainer::run`] should keep going after an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Owns the stack, optimizers, rng and schedule position.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub stack: GeneratorStack,
    d_opt: Adam,
    g_opts: Vec<Adam>,
    rng: ChaCha8Rng,
    phase: Phase,
    iteration: usize,
    global_iter: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut stack = GeneratorStack::new(config.stages, config.generator_net(), config.discriminator_net(), config.seed)?;
        match &config.warm_start {
            WarmStart::Random => {}
            WarmStart::ZeroOutput => stack.generators.iter_mut().for_each(|g| g.zero_output_layer()),
            WarmStart::Regressor(path) => {
                let reg = crate::baselines::HomNet::load(path).map_err(|e| TrainError::InvalidConfig {
                    field: "warm_start".into(),
                    reason: e.to_string(),
                })?;
                for g in &mut stack.generators {
                    g.warm_start_from(&reg.net)?;
                }
            }
        }
        Ok(Self::with_stack(config, stack))
    }

    /// Starts training from an existing stack (its architecture must match
    /// the config).
    pub fn with_stack(config: TrainConfig, stack: GeneratorStack) -> Self {
        let phase = config.schedule().first().map(|(p, _)| *p).unwrap_or(Phase::Done);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let mut t = Trainer {
            d_opt: Adam::new(AdamConfig::with_lr(config.lr_discriminator)),
            g_opts: (0..stack.stages()).map(|_| Adam::new(AdamConfig::with_lr(config.lr_generator))).collect(),
            rng,
            phase,
            iteration: 0,
            global_iter: 0,
            stack,
            config,
        };
        t.advance_if_finished();
        t
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn global_iter(&self) -> usize {
        self.global_iter
    }

    fn frame(&self) -> FrameMap {
        FrameMap::new(self.config.width, self.config.height)
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        if data.height != self.config.height || data.width != self.config.width {
            return Err(TrainError::Data(format!(
                "data is {}x{}, config expects {}x{}",
                data.height, data.width, self.config.height, self.config.width
            )));
        }
        if data.is_empty() || data.real_count() == 0 {
            return Err(TrainError::Data("empty training set".into()));
        }
        if self.config.real_jitter > 0.0 && !data.has_real_layers() {
            return Err(TrainError::Data("real_jitter needs real foreground layers; set it to 0 for image pools".into()));
        }
        Ok(())
    }

    /// Warp states `p_0..=p_upto` under the current generators, without
    /// recording gradients.
    fn warp_states(&self, fg: &Tensor, bg: &Tensor, p0: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let fgv = g.constant(fg.clone());
        let bgv = g.constant(bg.clone());
        let mut p = g.constant(p0.clone());
        let mut out = vec![p0.clone()];
        for j in 0..upto {
            let net = &self.stack.generators[j];
            let vars = bind(&mut g, &net.params, false);
            let warped = g.warp(fgv, p, self.frame(), self.config.taylor_order)?;
            let x = g.concat_channels(&[warped, bgv])?;
            let dp = net.forward(&mut g, &vars, x)?;
            p = g.add(p, dp)?;
            out.push(g.value(p).clone());
        }
        Ok(out)
    }

    fn fake_batch(&self, fg: &Tensor, bg: &Tensor, p: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (f, b, p) = (g.constant(fg.clone()), g.constant(bg.clone()), g.constant(p.clone()));
        let c = composite_at(&mut g, f, p, b, self.frame(), self.config.taylor_order)?;
        Ok(g.value(c).clone())
    }

    /// Reals re-rendered through the warp at a uniform random sub-pixel
    /// shift, so that both sides of the critic carry the same resampling.
    fn jittered_reals(&mut self, data: &TrainData, b: &Batch) -> Result<Tensor> {
        let (layers, bgs) = data
            .real_layer_batch(b)
            .ok_or_else(|| TrainError::Data("real_jitter needs real foreground layers".into()))?;
        let (sx, sy) = (
            2.0 * self.config.real_jitter / self.config.width as f64,
            2.0 * self.config.real_jitter / self.config.height as f64,
        );
        let mut q = Vec::with_capacity(8 * b.real_index.len());
        for _ in &b.real_index {
            let tx = self.rng.random_range(-sx..=sx);
            let ty = self.rng.random_range(-sy..=sy);
            q.extend(WarpParams::translation(tx, ty).0.iter().map(|v| *v as f32));
        }
        let q = Tensor::new(&[b.real_index.len(), 8], q)?;
        self.fake_batch(&layers, &bgs, &q)
    }

    /// One critic update against fakes produced by the first `stages`
    /// generators. Returns `(loss, gp)`.
    fn critic_step(&mut self, data: &TrainData, stages: usize) -> Result<(f64, f64)> {
        let b = sample_batch(&mut self.rng, data, self.config.batch_size, self.config.pairing, &self.config.perturbation);
        let (fg, bg, mut real) = data.batch(&b);
        if self.config.real_jitter > 0.0 {
            real = self.jittered_reals(data, &b)?;
        }
        let p = self.warp_states(&fg, &bg, &b.p0, stages)?.pop().expect("p0 present");
        let fake = self.fake_batch(&fg, &bg, &p)?;
        let mut g = Graph::new();
        let d = &self.stack.discriminator;
        let vars = bind(&mut g, &d.params, true);
        let rv = g.constant(real);
        let fv = g.constant(fake);
        let mut critic = |g: &mut Graph, x: Var| -> Result<Var> { Ok(d.forward(g, &vars, x)?) };
        let out = d_loss(&mut g, &mut critic, rv, fv, &b.eps, self.config.lambda_grad)?;
        let grads = g.grad(out.loss, &vars, false)?;
        let loss = g.value(out.loss).item() as f64;
        adam_step(&mut self.d_opt, &mut self.stack.discriminator.params, &grads, &g)?;
        Ok((loss, out.gp))
    }

    /// One update of generator `stage` with earlier stages frozen. Returns
    /// `(loss, mean ‖Δp‖)`.
    fn generator_step(&mut self, data: &TrainData, stage: usize) -> Result<(f64, f64)> {
        let b = sample_batch(&mut self.rng, data, self.config.batch_size, self.config.pairing, &self.config.perturbation);
        let (fg, bg, _) = data.batch(&b);
        let prev = self.warp_states(&fg, &bg, &b.p0, stage)?.pop().expect("p0 present");
        let (frame, order) = (self.frame(), self.config.taylor_order);
        let mut g = Graph::new();
        let fgv = g.constant(fg);
        let bgv = g.constant(bg);
        let pv = g.constant(prev);
        let warped = g.warp(fgv, pv, frame, order)?;
        let x = g.concat_channels(&[warped, bgv])?;
        let net = &self.stack.generators[stage];
        let gvars = bind(&mut g, &net.params, true);
        let dp = net.forward(&mut g, &gvars, x)?;
        let p = g.add(pv, dp)?;
        let comp = composite_at(&mut g, fgv, p, bgv, frame, order)?;
        let d = &self.stack.discriminator;
        let dvars = bind(&mut g, &d.params, false);
        let scores = d.forward(&mut g, &dvars, comp)?;
        let loss = g_loss(&mut g, scores, dp, self.config.lambda_update)?;
        let grads = g.grad(loss, &gvars, false)?;
        let (lv, norm) = (g.value(loss).item() as f64, mean_row_norm(g.value(dp)));
        adam_step(&mut self.g_opts[stage], &mut self.stack.generators[stage].params, &grads, &g)?;
        Ok((lv, norm))
    }

    /// One joint update of every generator against the summed objective.
    fn finetune_step(&mut self, data: &TrainData) -> Result<(f64, f64)> {
        let b = sample_batch(&mut self.rng, data, self.config.batch_size, self.config.pairing, &self.config.perturbation);
        let (fg, bg, _) = data.batch(&b);
        let (frame, order) = (self.frame(), self.config.taylor_order);
        let mut g = Graph::new();
        let fgv = g.constant(fg);
        let bgv = g.constant(bg);
        let d = &self.stack.discriminator;
        let dvars = bind(&mut g, &d.params, false);
        let mut p = g.constant(b.p0.clone());
        let mut total: Option<Var> = None;
        let mut all_vars = Vec::new();
        let mut norm_sum = 0.0;
        for net in &self.stack.generators {
            let vars = bind(&mut g, &net.params, true);
            let warped = g.warp(fgv, p, frame, order)?;
            let x = g.concat_channels(&[warped, bgv])?;
            let dp = net.forward(&mut g, &vars, x)?;
            norm_sum += mean_row_norm(g.value(dp));
            p = g.add(p, dp)?;
            let comp = composite_at(&mut g, fgv, p, bgv, frame, order)?;
            let scores = d.forward(&mut g, &dvars, comp)?;
            let l = g_loss(&mut g, scores, dp, self.config.lambda_update)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
            all_vars.push(vars);
        }
        let total = total.ok_or_else(|| TrainError::Data("no generators to fine-tune".into()))?;
        let flat: Vec<Var> = all_vars.iter().flatten().copied().collect();
        let grads = g.grad(total, &flat, false)?;
        let lv = g.value(total).item() as f64;
        let mut offset = 0;
        for (i, vars) in all_vars.iter().enumerate() {
            let gs = &grads[offset..offset + vars.len()];
            adam_step(&mut self.g_opts[i], &mut self.stack.generators[i].params, gs, &g)?;
            offset += vars.len();
        }
        Ok((lv, norm_sum / self.stack.stages() as f64))
    }

    /// One iteration of the current phase, then advances the schedule.
    pub fn step(&mut self, data: &TrainData) -> Result<MetricsRecord> {
        self.check_data(data)?;
        let phase = self.phase;
        let n = self.stack.stages();
        let (fake_stages, g_update) = match phase {
            Phase::Done => return Err(TrainError::StageOrderViolation { requested: n, phase: phase.to_string() }),
            Phase::Pretrain => (0, None),
            Phase::Stage(i) => (i + 1, Some(i)),
            Phase::Finetune => (n, None),
        };
        let (mut d_loss_sum, mut gp_sum) = (0.0, 0.0);
        let critic_steps = if phase == Phase::Pretrain { 1 } else { self.config.n_critic };
        for _ in 0..critic_steps {
            let (l, gp) = self.critic_step(data, fake_stages)?;
            d_loss_sum += l;
            gp_sum += gp;
        }
        let (g_loss, norm) = match (phase, g_update) {
            (Phase::Stage(_), Some(i)) => {
                let (l, n) = self.generator_step(data, i)?;
                (Some(l), Some(n))
            }
            (Phase::Finetune, _) => {
                let (l, n) = self.finetune_step(data)?;
                (Some(l), Some(n))
            }
            _ => (None, None),
        };
        let record = MetricsRecord {
            iter: self.global_iter,
            phase,
            stage: match phase {
                Phase::Stage(i) => Some(i),
                _ => None,
            },
            d_loss: d_loss_sum / critic_steps as f64,
            g_loss,
            gp: gp_sum / critic_steps as f64,
            mean_update_norm: norm,
            corner_error_eval: None,
        };
        self.global_iter += 1;
        self.iteration += 1;
        self.advance_if_finished();
        Ok(record)
    }

    fn advance_if_finished(&mut self) {
        let schedule = self.config.schedule();
        loop {
            let pos = schedule.iter().position(|(p, _)| *p == self.phase);
            match pos {
                Some(k) if self.iteration >= schedule[k].1 => {
                    self.phase = schedule.get(k + 1).map(|(p, _)| *p).unwrap_or(Phase::Done);
                    self.iteration = 0;
                }
                None if self.phase != Phase::Done => {
                    self.phase = Phase::Done;
                    self.iteration = 0;
                }
                _ => break,
            }
        }
    }

    /// Runs the schedule to completion or until `observe` stops it. The
    /// observer sees every record; evaluation records are filled in every
    /// `eval_every` iterations when `eval_data` is given.
    pub fn run(
        &mut self,
        data: &TrainData,
        eval_data: Option<(&CubesDataset, &EvalConfig)>,
        observe: &mut dyn FnMut(&Trainer, &MetricsRecord) -> Control,
    ) -> Result<()> {
        while self.phase != Phase::Done {
            let mut rec = self.step(data)?;
            let every = self.config.eval_every;
            if let (Some((ds, ecfg)), true) = (eval_data, every > 0 && self.global_iter % every == 0) {
                let stages = match rec.phase {
                    Phase::Stage(i) => i + 1,
                    Phase::Finetune => self.stack.stages(),
                    _ => 0,
                };
                let view = StackView {
                    stack: &self.stack,
                    stages,
                };
                let ev = eval::evaluate(&view, ds, ecfg)?;
                rec.corner_error_eval = Some(ev.report.final_stage().median_aligned_error);
            }
            if observe(self, &rec) == Control::Stop {
                break;
            }
        }
        Ok(())
    }

    /// Runs every iteration of stage `stage`; earlier phases must be done.
    pub fn train_stage(&mut self, data: &TrainData, stage: usize) -> Result<Vec<MetricsRecord>> {
        if self.config.iters_per_stage == 0 && stage < self.stack.stages() {
            return Ok(Vec::new());
        }
        if self.phase != Phase::Stage(stage) {
            return Err(TrainError::StageOrderViolation {
                requested: stage,
                phase: self.phase.to_string(),
            });
        }
        let mut out = Vec::new();
        while self.phase == Phase::Stage(stage) {
            out.push(self.step(data)?);
        }
        Ok(out)
    }

    /// Runs the end-to-end phase; all stages must be trained.
    pub fn finetune_end_to_end(&mut self, data: &TrainData) -> Result<Vec<MetricsRecord>> {
        if self.config.finetune_iters == 0 {
            return Ok(Vec::new());
        }
        if self.phase != Phase::Finetune {
            return Err(TrainError::StageOrderViolation {
                requested: self.stack.stages(),
                phase: self.phase.to_string(),
            });
        }
        let mut out = Vec::new();
        while self.phase == Phase::Finetune {
            out.push(self.step(data)?);
        }
        Ok(out)
    }

    /// Critic-only updates against initial composites at `p0`, outside the
    /// schedule.
    pub fn pretrain_discriminator(&mut self, data: &TrainData, iters: usize) -> Result<Vec<f64>> {
        self.check_data(data)?;
        (0..iters).map(|_| self.critic_step(data, 0).map(|(l, _)| l)).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = TrainerMeta {
            config: self.config.clone(),
            model: self.stack.spec(),
            phase: self.phase,
            iteration: self.iteration,
            global_iter: self.global_iter,
            d_opt: self.d_opt.clone(),
            g_opts: self.g_opts.clone(),
            rng: RngState::capture(&self.rng),
        };
        let mut ckpt = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(&meta)?);
        self.stack.store(&mut ckpt, true);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let meta: TrainerMeta = serde_json::from_value(ckpt.meta.clone())?;
        let stack = GeneratorStack::restore(&meta.model, ckpt, true)?;
        if stack.stages() != meta.g_opts.len() {
            return Err(CheckpointError::CorruptCheckpoint("optimizer count differs from stage count".into()).into());
        }
        Ok(Trainer {
            config: meta.config,
            stack,
            d_opt: meta.d_opt,
            g_opts: meta.g_opts,
            rng: meta.rng.restore()?,
            phase: meta.phase,
            iteration: meta.iteration,
            global_iter: meta.global_iter,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// The first `stages` generators of a stack plus its critic.
#[derive(Debug, Clone, Copy)]
pub struct StackView<'a> {
    pub stack: &'a GeneratorStack,
    pub stages: usize,
}

impl WarpPredictor for StackView<'_> {
    fn stages(&self) -> usize {
        self.stages
    }

    fn predict(&self, stage: usize, fg: &ForegroundLayer, bg: &Raster) -> std::result::Result<WarpParams, eval::EvalError> {
        self.stack.generators[stage]
            .predict(fg, bg)
            .map_err(|e| eval::EvalError::Model(e.to_string()))
    }

    fn discriminator(&self) -> Option<&DiscriminatorNet> {
        Some(&self.stack.discriminator)
    }
}
