//! Self-supervised baselines: a cascade of ridge regressors on raw pixels
//! (SDM) and a direct convolutional regressor (HomographyNet).
//!
//! Both learn to undo a random `p0` applied to the realistic foreground,
//! with target `−p0`.

use crate::autodiff::{Adam, AdamConfig, Graph, TensorError, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::cubes::CubesDataset;
use crate::eval::{EvalError, WarpPredictor};
use crate::lie::{FrameMap, WarpParams};
use crate::nets::{bind, restore_params, store_params, GeneratorNet, NetConfig, NetError};
use crate::par;
use crate::perturb::{initial_warp_for, PerturbationModel};
use crate::raster::{ForegroundLayer, Raster};
use crate::train::{sample_batch, Pairing, RngState, TrainData};
use crate::warp::{self, WarpError};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SDM_KIND: &str = "sdm";
pub const HOMNET_KIND: &str = "homnet";

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("normal equations are singular at ridge weight {0}")]
    SingularSystem(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least two samples to hold out a validation split")]
    TooFewSamples,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, BaselineError>;

/// Streaming sufficient statistics for multi-output ridge regression with an
/// unregularized bias.
#[derive(Debug, Clone)]
pub struct RidgeAccumulator {
    n: usize,
    sum_f: DVector<f64>,
    sum_y: DVector<f64>,
    gram: DMatrix<f64>,
    cross: DMatrix<f64>,
}

/// `y ≈ W f + b` with `W` of shape `(outputs, features)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStage {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lambda: f64,
}

impl LinearStage {
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let y = &self.w * DVector::from_column_slice(f) + &self.b;
        y.iter().copied().collect()
    }
}

impl RidgeAccumulator {
    pub fn new(features: usize, outputs: usize) -> Self {
        RidgeAccumulator {
            n: 0,
            sum_f: DVector::zeros(features),
            sum_y: DVector::zeros(outputs),
            gram: DMatrix::zeros(features, features),
            cross: DMatrix::zeros(features, outputs),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Adds rows of `features` `(m, d)` with `targets` `(m, k)`.
    pub fn push(&mut self, features: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<()> {
        let (d, k) = (self.sum_f.len(), self.sum_y.len());
        if features.ncols() != d || targets.ncols() != k || features.nrows() != targets.nrows() {
            return Err(BaselineError::ShapeMismatch(format!(
                "rows {}x{} and {}x{} into a {d}->{k} regression",
                features.nrows(),
                features.ncols(),
                targets.nrows(),
                targets.ncols()
            )));
        }
        self.n += features.nrows();
        self.sum_f += features.row_sum().transpose();
        self.sum_y += targets.row_sum().transpose();
        self.gram.gemm_tr(1.0, features, features, 1.0);
        self.cross.gemm_tr(1.0, features, targets, 1.0);
        Ok(())
    }

    /// Minimizes `Σ‖y − W f − b‖² + λ‖W‖²_F` via Cholesky on the centered
    /// normal equations.
    pub fn solve(&self, lambda: f64) -> Result<LinearStage> {
        if self.n == 0 {
            return Err(BaselineError::SingularSystem(lambda));
        }
        let n = self.n as f64;
        let mu = &self.sum_f / n;
        let ybar = &self.sum_y / n;
        let mut a = &self.gram - (&mu * mu.transpose()) * n;
        let rhs = &self.cross - (&mu * ybar.transpose()) * n;
        let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        let chol = Cholesky::new(a).ok_or(BaselineError::SingularSystem(lambda))?;
        let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
        if min_pivot <= 1e-12 * (scale + lambda) {
            return Err(BaselineError::SingularSystem(lambda));
        }
        let w = chol.solve(&rhs).transpose();
        let b = &ybar - &w * &mu;
        Ok(LinearStage { w, b, lambda })
    }
}

/// One regression stage from in-memory rows.
pub fn sdm_train_stage(features: &DMatrix<f64>, targets: &DMatrix<f64>, lambda: f64) -> Result<LinearStage> {
    let mut acc = RidgeAccumulator::new(features.ncols(), targets.ncols());
    acc.push(features, targets)?;
    acc.solve(lambda)
}

/// Grayscale background followed by the grayscale masked foreground.
pub fn sdm_features(fg: &ForegroundLayer, bg: &Raster) -> Vec<f64> {
    let mut f: Vec<f64> = bg.gray().iter().map(|v| *v as f64).collect();
    let g = fg.color.gray();
    f.extend(g.iter().zip(&fg.mask.data).map(|(c, m)| (*c * *m) as f64));
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdmConfig {
    pub stages: usize,
    /// Random `p0` draws per training scene.
    pub perturbations_per_sample: usize,
    pub lambda_grid: Vec<f64>,
    pub validation_fraction: f64,
    pub perturbation: PerturbationModel,
    pub seed: u64,
}

impl Default for SdmConfig {
    fn default() -> Self {
        SdmConfig {
            stages: 4,
            perturbations_per_sample: 25,
            lambda_grid: vec![1e-2, 1e-1, 1.0, 10.0, 100.0],
            validation_fraction: 0.1,
            perturbation: PerturbationModel::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdmStageReport {
    pub stage: usize,
    pub lambda: f64,
    /// Mean `‖p‖` on the validation split before and after the stage.
    pub residual_before: f64,
    pub residual_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdmCascade {
    pub height: usize,
    pub width: usize,
    pub stages: Vec<LinearStage>,
}

impl SdmCascade {
    pub fn to_checkpoint(&self, config: &SdmConfig, reports: &[SdmStageReport]) -> Result<Checkpoint> {
        let lambdas: Vec<f64> = self.stages.iter().map(|s| s.lambda).collect();
        let meta = serde_json::json!({
            "config": config,
            "height": self.height,
            "width": self.width,
            "lambdas": lambdas,
            "reports": reports,
        });
        let mut ckpt = Checkpoint::new(SDM_KIND, meta);
        for (i, s) in self.stages.iter().enumerate() {
            let (k, d) = s.w.shape();
            // row-major (outputs, features)
            let w: Vec<f32> = (0..k).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| s.w[(r, c)] as f32).collect();
            ckpt.push(format!("stage{i}.w"), &crate::autodiff::Tensor::new(&[k, d], w)?);
            let b: Vec<f32> = s.b.iter().map(|v| *v as f32).collect();
            ckpt.push(format!("stage{i}.b"), &crate::autodiff::Tensor::new(&[k], b)?);
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(SDM_KIND)?;
        let get = |k: &str| -> Result<usize> {
            ckpt.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| CheckpointError::CorruptCheckpoint(format!("missing {k}")).into())
        };
        let (height, width) = (get("height")?, get("width")?);
        let lambdas: Vec<f64> = serde_json::from_value(ckpt.meta["lambdas"].clone())?;
        let mut stages = Vec::new();
        for (i, lambda) in lambdas.into_iter().enumerate() {
            let w = ckpt.get(&format!("stage{i}.w"))?;
            let b = ckpt.get(&format!("stage{i}.b"))?;
            let (k, d) = (w.shape()[0], w.shape()[1]);
            stages.push(LinearStage {
                w: DMatrix::from_row_iterator(k, d, w.data().iter().map(|v| *v as f64)),
                b: DVector::from_iterator(k, b.data().iter().map(|v| *v as f64)),
                lambda,
            });
        }
        Ok(SdmCascade { height, width, stages })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl WarpPredictor for SdmCascade {
    fn stages(&self) -> usize {
        self.stages.len()
    }

    fn predict(&self, stage: usize, fg: &ForegroundLayer, bg: &Raster) -> std::result::Result<WarpParams, EvalError> {
        let s = &self.stages[stage];
        let f = sdm_features(fg, bg);
        if f.len() != s.w.ncols() {
            return Err(EvalError::ShapeMismatch(format!(
                "{} features for a regressor trained on {}",
                f.len(),
                s.w.ncols()
            )));
        }
        let y = s.apply(&f);
        Ok(WarpParams::from_slice(&y).expect("8 outputs"))
    }
}

struct Example {
    sample: usize,
    state: WarpParams,
}

fn features_for(layers: &[ForegroundLayer], bgs: &[&Raster], ex: &[Example], fm: &FrameMap) -> Result<DMatrix<f64>> {
    let rows = par::map_indexed(ex.len(), |i| {
        let e = &ex[i];
        warp::warp_foreground(&layers[e.sample], &e.state, fm).map(|w| sdm_features(&w, bgs[e.sample]))
    });
    let rows = rows.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    let d = rows.first().map_or(0, |r| r.len());
    Ok(DMatrix::from_row_iterator(rows.len(), d, rows.into_iter().flatten()))
}

fn targets_for(ex: &[Example]) -> DMatrix<f64> {
    DMatrix::from_row_iterator(ex.len(), 8, ex.iter().flat_map(|e| e.state.0.map(|v| -v)))
}

fn mean_norm(ex: &[Example]) -> f64 {
    ex.iter().map(|e| e.state.norm()).sum::<f64>() / ex.len().max(1) as f64
}

const SDM_CHUNK: usize = 1024;

/// Greedy stagewise training: each stage regresses `−p` from features at the
/// current states, with `λ` picked per stage on the held-out split.
pub fn sdm_train(data: &CubesDataset, cfg: &SdmConfig) -> Result<(SdmCascade, Vec<SdmStageReport>)> {
    if cfg.lambda_grid.is_empty() || cfg.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(BaselineError::InvalidConfig("lambda_grid must hold non-negative values".into()));
    }
    if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) || cfg.perturbations_per_sample == 0 {
        return Err(BaselineError::InvalidConfig(
            "validation_fraction must be in (0, 1) and perturbations_per_sample positive".into(),
        ));
    }
    let n = data.len();
    if n < 2 {
        return Err(BaselineError::TooFewSamples);
    }
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let n_train = n - n_val;
    let (h, w) = data.resolution().ok_or(BaselineError::TooFewSamples)?;
    let fm = FrameMap::new(w, h);
    let layers: Vec<ForegroundLayer> = data.samples.iter().map(|s| s.reference_layer()).collect();
    let bgs: Vec<&Raster> = data.samples.iter().map(|s| &s.bg).collect();
    let ppers = cfg.perturbations_per_sample;
    let draw = |range: std::ops::Range<usize>, seed: u64| -> Vec<Example> {
        range
            .flat_map(|s| (0..ppers).map(move |r| (s, r)))
            .map(|(s, r)| Example {
                sample: s,
                state: initial_warp_for(&cfg.perturbation, seed, s * ppers + r),
            })
            .collect()
    };
    let mut train = draw(0..n_train, cfg.seed);
    let mut val = draw(n_train..n, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut stages = Vec::new();
    let mut reports = Vec::new();
    for stage in 0..cfg.stages {
        let d = 2 * h * w;
        let mut acc = RidgeAccumulator::new(d, 8);
        for chunk in train.chunks(SDM_CHUNK) {
            acc.push(&features_for(&layers, &bgs, chunk, &fm)?, &targets_for(chunk))?;
        }
        let vf = features_for(&layers, &bgs, &val, &fm)?;
        let before = mean_norm(&val);
        let mut best: Option<(f64, LinearStage)> = None;
        let mut last_err = None;
        for &lambda in &cfg.lambda_grid {
            let fit = match acc.solve(lambda) {
                Ok(f) => f,
                Err(e) => {
                    last_err = Some(e);
                    continue;
                }
            };
            let pred = &vf * fit.w.transpose();
            let resid = val
                .iter()
                .enumerate()
                .map(|(i, e)| (0..8).map(|j| (e.state.0[j] + pred[(i, j)] + fit.b[j]).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / val.len() as f64;
            if best.as_ref().is_none_or(|(r, _)| resid < *r) {
                best = Some((resid, fit));
            }
        }
        let Some((after, fit)) = best else {
            return Err(last_err.unwrap_or(BaselineError::SingularSystem(f64::NAN)));
        };
        let advance = |ex: &mut [Example], f: &DMatrix<f64>| {
            let pred = f * fit.w.transpose();
            for (i, e) in ex.iter_mut().enumerate() {
                for j in 0..8 {
                    e.state.0[j] += pred[(i, j)] + fit.b[j];
                }
            }
        };
        for start in (0..train.len()).step_by(SDM_CHUNK) {
            let end = (start + SDM_CHUNK).min(train.len());
            let f = features_for(&layers, &bgs, &train[start..end], &fm)?;
            advance(&mut train[start..end], &f);
        }
        advance(&mut val, &vf);
        reports.push(SdmStageReport {
            stage,
            lambda: fit.lambda,
            residual_before: before,
            residual_after: after,
        });
        stages.push(fit);
    }
    Ok((SdmCascade { height: h, width: w, stages }, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomNetConfig {
    pub height: usize,
    pub width: usize,
    pub width_mult: f64,
    pub depth: usize,
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub perturbation: PerturbationModel,
    pub seed: u64,
}

impl Default for HomNetConfig {
    fn default() -> Self {
        HomNetConfig {
            height: 32,
            width: 32,
            width_mult: 0.25,
            depth: 5,
            iters: 5000,
            batch_size: 20,
            lr: 1e-4,
            perturbation: PerturbationModel::default(),
            seed: 0,
        }
    }
}

impl HomNetConfig {
    /// The indoor-objects schedule at full size.
    pub fn full_size() -> Self {
        HomNetConfig {
            height: 120,
            width: 160,
            width_mult: 1.0,
            iters: 200_000,
            ..Self::default()
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            depth: self.depth,
            ..NetConfig::generator(self.height, self.width, self.width_mult)
        }
    }
}

/// `mean ‖Δp̂ + p0‖²` over the batch.
pub fn homnet_loss(g: &mut Graph, dp: Var, p0: Var) -> std::result::Result<Var, TensorError> {
    let s = g.add(dp, p0)?;
    let sq = g.square(s);
    let per = g.sum_per_sample(sq);
    Ok(g.mean_all(per))
}

#[derive(Debug, Clone)]
pub struct HomNet {
    pub config: HomNetConfig,
    pub net: GeneratorNet,
    opt: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HomNetMeta {
    config: HomNetConfig,
    iteration: usize,
    opt: Adam,
    rng: RngState,
}

impl HomNet {
    pub fn new(config: HomNetConfig) -> Result<Self> {
        let net = GeneratorNet::new(config.net(), config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX - 1);
        Ok(HomNet {
            opt: Adam::new(AdamConfig::with_lr(config.lr)),
            config,
            net,
            rng,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Supervised update on a random batch of perturbed realistic layers.
    /// Returns the batch loss before the update.
    pub fn step(&mut self, data: &TrainData) -> Result<f64> {
        if data.height != self.config.height || data.width != self.config.width {
            return Err(BaselineError::ShapeMismatch(format!(
                "data is {}x{}, regressor expects {}x{}",
                data.height, data.width, self.config.height, self.config.width
            )));
        }
        let b = sample_batch(&mut self.rng, data, self.config.batch_size, Pairing::Paired, &self.config.perturbation);
        let (fg, bg, _) = data.batch(&b);
        let loss = self.loss_on(&fg, &bg, &b.p0, true)?;
        self.iteration += 1;
        Ok(loss)
    }

    /// Loss on given tensors, optionally followed by an Adam update.
    pub fn loss_on(
        &mut self,
        fg: &crate::autodiff::Tensor,
        bg: &crate::autodiff::Tensor,
        p0: &crate::autodiff::Tensor,
        update: bool,
    ) -> Result<f64> {
        let frame = FrameMap::new(self.config.width, self.config.height);
        let mut g = Graph::new();
        let fgv = g.constant(fg.clone());
        let bgv = g.constant(bg.clone());
        let pv = g.constant(p0.clone());
        let warped = g.warp(fgv, pv, frame, crate::lie::DEFAULT_TAYLOR_ORDER)?;
        let x = g.concat_channels(&[warped, bgv])?;
        let vars = bind(&mut g, &self.net.params, update);
        let dp = self.net.forward(&mut g, &vars, x)?;
        let loss = homnet_loss(&mut g, dp, pv)?;
        let value = g.value(loss).item() as f64;
        if update {
            let grads = g.grad(loss, &vars, false)?;
            let grads: Vec<_> = grads.iter().map(|v| g.value(*v)).collect();
            let mut refs: Vec<_> = self.net.params.iter_mut().collect();
            self.opt.update(&mut refs, &grads)?;
        }
        Ok(value)
    }

    /// Trains until `config.iters`, calling `observe(iteration, loss)`;
    /// returning `false` stops early.
    pub fn train(&mut self, data: &TrainData, observe: &mut dyn FnMut(&HomNet, usize, f64) -> bool) -> Result<()> {
        while self.iteration < self.config.iters {
            let loss = self.step(data)?;
            if !observe(self, self.iteration, loss) {
                break;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = HomNetMeta {
            config: self.config.clone(),
            iteration: self.iteration,
            opt: self.opt.clone(),
            rng: RngState::capture(&self.rng),
        };
        let mut ckpt = Checkpoint::new(HOMNET_KIND, serde_json::to_value(&meta)?);
        store_params(&mut ckpt, "g", &self.net.params, true);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(HOMNET_KIND)?;
        let meta: HomNetMeta = serde_json::from_value(ckpt.meta.clone())?;
        let mut net = GeneratorNet::new(meta.config.net(), 0)?;
        restore_params(ckpt, "g", &mut net.params, true)?;
        Ok(HomNet {
            config: meta.config,
            net,
            opt: meta.opt,
            rng: meta.rng.restore()?,
            iteration: meta.iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl WarpPredictor for HomNet {
    fn stages(&self) -> usize {
        1
    }

    fn predict(&self, _stage: usize, fg: &ForegroundLayer, bg: &Raster) -> std::result::Result<WarpParams, EvalError> {
        self.net.predict(fg, bg).map_err(|e| EvalError::Model(e.to_string()))
    }
}
