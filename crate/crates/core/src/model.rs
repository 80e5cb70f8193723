//! Trained predictors loaded from checkpoints, and the inference warp chain.

use crate::baselines::{BaselineError, HomNet, SdmCascade, HOMNET_KIND, SDM_KIND};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::eval::{EvalError, WarpPredictor};
use crate::lie::{self, FrameMap, Homography, WarpParams};
use crate::nets::{DiscriminatorNet, GeneratorStack, NetConfig};
use crate::raster::{ForegroundLayer, Raster};
use crate::train::CHECKPOINT_KIND;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unsupported checkpoint kind {0:?}")]
    UnknownKind(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone)]
pub enum Model {
    Stgan(GeneratorStack),
    HomNet(Box<HomNet>),
    Sdm(SdmCascade),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub kind: String,
    pub stages: usize,
    pub height: usize,
    pub width: usize,
    pub parameters: usize,
    /// CRC32 of the checkpoint bytes, or of nothing for built-in models.
    pub model_id: String,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        match ckpt.kind.as_str() {
            CHECKPOINT_KIND => Ok(Model::Stgan(GeneratorStack::from_checkpoint(ckpt)?)),
            HOMNET_KIND => Ok(Model::HomNet(Box::new(HomNet::from_checkpoint(ckpt)?))),
            SDM_KIND => Ok(Model::Sdm(SdmCascade::from_checkpoint(ckpt)?)),
            other => Err(ModelError::UnknownKind(other.into())),
        }
    }

    /// Loads the checkpoint and returns it with its info record.
    pub fn load(path: &Path) -> Result<(Self, ModelInfo), ModelError> {
        let bytes = std::fs::read(path).map_err(CheckpointError::from)?;
        let model = Self::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
        let info = model.info(format!("{:08x}", crc32fast::hash(&bytes)));
        Ok((model, info))
    }

    /// A stack whose generators predict exactly zero updates.
    pub fn identity(height: usize, width: usize, stages: usize) -> Result<Self, crate::nets::NetError> {
        let mut stack = GeneratorStack::new(
            stages,
            NetConfig::generator(height, width, 0.25),
            NetConfig::discriminator(height, width, 0.25),
            0,
        )?;
        stack.generators.iter_mut().for_each(|g| g.zero_all());
        Ok(Model::Stgan(stack))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Stgan(_) => CHECKPOINT_KIND,
            Model::HomNet(_) => HOMNET_KIND,
            Model::Sdm(_) => SDM_KIND,
        }
    }

    /// Training resolution as `(height, width)`.
    pub fn resolution(&self) -> (usize, usize) {
        match self {
            Model::Stgan(s) => (s.discriminator.config.height, s.discriminator.config.width),
            Model::HomNet(h) => (h.config.height, h.config.width),
            Model::Sdm(s) => (s.height, s.width),
        }
    }

    pub fn info(&self, model_id: String) -> ModelInfo {
        let (height, width) = self.resolution();
        let parameters = match self {
            Model::Stgan(s) => s.generators.iter().map(|g| g.param_count()).sum::<usize>() + s.discriminator.param_count(),
            Model::HomNet(h) => h.net.param_count(),
            Model::Sdm(s) => s.stages.iter().map(|l| l.w.len() + l.b.len()).sum(),
        };
        ModelInfo {
            kind: self.kind().into(),
            stages: self.stages(),
            height,
            width,
            parameters,
            model_id,
        }
    }
}

impl WarpPredictor for Model {
    fn stages(&self) -> usize {
        match self {
            Model::Stgan(s) => s.stages(),
            Model::HomNet(h) => h.stages(),
            Model::Sdm(s) => s.stages(),
        }
    }

    fn predict(&self, stage: usize, fg: &ForegroundLayer, bg: &Raster) -> Result<WarpParams, EvalError> {
        match self {
            Model::Stgan(s) => s.generators[stage].predict(fg, bg).map_err(|e| EvalError::Model(e.to_string())),
            Model::HomNet(h) => h.predict(stage, fg, bg),
            Model::Sdm(s) => s.predict(stage, fg, bg),
        }
    }

    fn discriminator(&self) -> Option<&DiscriminatorNet> {
        match self {
            Model::Stgan(s) => Some(&s.discriminator),
            _ => None,
        }
    }
}

/// Warp states `p_0..p_k` for `k = min(stages, model stages)`, computed at
/// the model's resolution. Inputs of another size are resampled first;
/// the states live in the canonical frame and so apply at any resolution.
pub fn warp_chain(
    model: &dyn WarpPredictor,
    resolution: (usize, usize),
    fg: &ForegroundLayer,
    bg: &Raster,
    p0: WarpParams,
    stages: Option<usize>,
) -> Result<Vec<WarpParams>, EvalError> {
    let (h, w) = resolution;
    let fg = if fg.height() == h && fg.width() == w { fg.clone() } else { fg.resize(h, w) };
    let bg = if bg.height == h && bg.width == w { bg.clone() } else { bg.resize(h, w) };
    let fm = FrameMap::new(w, h);
    let n = stages.unwrap_or(model.stages()).min(model.stages());
    let mut states = vec![p0];
    let mut p = p0;
    for stage in 0..n {
        let warped = crate::warp::warp_foreground(&fg, &p, &fm)?;
        let dp = model.predict(stage, &warped, &bg)?;
        p = p + dp;
        states.push(p);
    }
    Ok(states)
}

/// Pixel-frame homographies of each state for a `width × height` image.
pub fn pixel_homographies(states: &[WarpParams], width: usize, height: usize) -> Vec<Homography> {
    let fm = FrameMap::new(width, height);
    states
        .iter()
        .map(|p| lie::pixel_homography(p, &fm, lie::DEFAULT_TAYLOR_ORDER))
        .collect()
}
