//! Geometric evaluation of warp predictors on the cubes task.

use crate::cubes::{CubeSample, CubesDataset};
use crate::lie::{self, FrameMap, LieError, WarpParams};
use crate::nets::DiscriminatorNet;
use crate::par;
use crate::perturb::{self, PerturbationModel};
use crate::raster::{ForegroundLayer, Raster};
use crate::warp;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("both masks are empty")]
    EmptyUnion,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error(transparent)]
    Warp(#[from] warp::WarpError),
    #[error("model failed: {0}")]
    Model(String),
}

/// Anything that proposes warp updates stage by stage.
pub trait WarpPredictor: Sync {
    fn stages(&self) -> usize;

    /// Update `Δp` of `stage` (0-based) given the currently warped foreground.
    fn predict(&self, stage: usize, fg: &ForegroundLayer, bg: &Raster) -> Result<WarpParams, EvalError>;

    fn discriminator(&self) -> Option<&DiscriminatorNet> {
        None
    }
}

/// Predicts zero updates for a fixed number of stages.
#[derive(Debug, Clone, Copy)]
pub struct IdentityPredictor(pub usize);

impl WarpPredictor for IdentityPredictor {
    fn stages(&self) -> usize {
        self.0
    }

    fn predict(&self, _: usize, _: &ForegroundLayer, _: &Raster) -> Result<WarpParams, EvalError> {
        Ok(WarpParams::ZERO)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerError {
    pub absolute: f64,
    /// After removing the mean displacement.
    pub aligned: f64,
}

/// Mean corner distance between `H(p)` applied to the foreground cube corners
/// and the ground-truth corners, in pixels.
pub fn corner_error(p: &WarpParams, fg_corners: &[[f64; 2]], gt_corners: &[[f64; 2]], fm: &FrameMap) -> Result<CornerError, EvalError> {
    if fg_corners.len() != gt_corners.len() || fg_corners.is_empty() {
        return Err(EvalError::ShapeMismatch("corner lists differ".into()));
    }
    let h = lie::pixel_homography(p, fm, lie::DEFAULT_TAYLOR_ORDER);
    let moved = lie::warp_points(&h, fg_corners)?;
    let n = moved.len() as f64;
    let d: Vec<[f64; 2]> = moved.iter().zip(gt_corners).map(|(a, b)| [a[0] - b[0], a[1] - b[1]]).collect();
    let mean = d.iter().fold([0.0, 0.0], |m, v| [m[0] + v[0] / n, m[1] + v[1] / n]);
    let absolute = d.iter().map(|v| v[0].hypot(v[1])).sum::<f64>() / n;
    let aligned = d.iter().map(|v| (v[0] - mean[0]).hypot(v[1] - mean[1])).sum::<f64>() / n;
    Ok(CornerError { absolute, aligned })
}

pub fn sample_corner_error(p: &WarpParams, s: &CubeSample, fm: &FrameMap) -> Result<CornerError, EvalError> {
    corner_error(p, &s.fg_corners, &s.gt_corners, fm)
}

/// Intersection over union of two masks binarized at `threshold`.
pub fn mask_iou(a: &Raster, b: &Raster, threshold: f32) -> Result<f64, EvalError> {
    if a.data.len() != b.data.len() {
        return Err(EvalError::ShapeMismatch("mask sizes differ".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (p, q) = (*x >= threshold, *y >= threshold);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        return Err(EvalError::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: usize,
    pub mean_corner_error: f64,
    pub median_corner_error: f64,
    pub mean_aligned_error: f64,
    pub median_aligned_error: f64,
    pub mean_mask_iou: f64,
    /// Mean `‖Δp‖` of the update that produced this stage (0 for stage 0).
    pub mean_update_norm: f64,
    /// Mean real score minus mean fake score, when a discriminator is known.
    pub score_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub seed: u64,
    pub config_hash: String,
    pub stages: Vec<StageStats>,
}

impl EvalReport {
    pub fn stage(&self, i: usize) -> &StageStats {
        &self.stages[i]
    }

    pub fn final_stage(&self) -> &StageStats {
        self.stages.last().expect("stage 0 is always present")
    }

    /// Relative reduction of the median aligned corner error from stage 0.
    pub fn median_aligned_reduction(&self) -> f64 {
        1.0 - self.final_stage().median_aligned_error / self.stages[0].median_aligned_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub stage: usize,
    pub corner_error: f64,
    pub aligned_error: f64,
    pub mask_iou: f64,
    pub update_norm: f64,
    pub state: WarpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub rows: Vec<SampleRow>,
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,stage,corner_error,aligned_error,mask_iou,update_norm");
        for i in 0..8 {
            out.push_str(&format!(",p{}", i + 1));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                r.index, r.stage, r.corner_error, r.aligned_error, r.mask_iou, r.update_norm
            ));
            for v in r.state.0 {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub perturbation: PerturbationModel,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            perturbation: PerturbationModel::default(),
            seed: 0x5eed,
        }
    }
}

struct SampleTrace {
    rows: Vec<SampleRow>,
    fakes: Vec<Raster>,
}

fn trace_sample(model: &dyn WarpPredictor, s: &CubeSample, p0: WarpParams, index: usize) -> Result<SampleTrace, EvalError> {
    let fm = FrameMap::new(s.bg.width, s.bg.height);
    let mut p = p0;
    let mut rows = Vec::with_capacity(model.stages() + 1);
    let mut fakes = Vec::new();
    let mut update_norm = 0.0;
    for stage in 0..=model.stages() {
        let warped = warp::warp_foreground(&s.fg, &p, &fm)?;
        let ce = sample_corner_error(&p, s, &fm)?;
        let iou = mask_iou(&warped.mask, &s.gt_mask, 0.5)?;
        rows.push(SampleRow {
            index,
            stage,
            corner_error: ce.absolute,
            aligned_error: ce.aligned,
            mask_iou: iou,
            update_norm,
            state: p,
        });
        if model.discriminator().is_some() {
            fakes.push(warp::composite(&warped, &s.bg)?);
        }
        if stage < model.stages() {
            let dp = model.predict(stage, &warped, &s.bg)?;
            update_norm = dp.norm();
            p = p + dp;
        }
    }
    Ok(SampleTrace { rows, fakes })
}

/// Runs every sample through the predictor's warp chain from a seeded `p0`.
pub fn evaluate(model: &dyn WarpPredictor, data: &CubesDataset, cfg: &EvalConfig) -> Result<Evaluation, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let traces = par::map_indexed(data.len(), |i| {
        let p0 = perturb::initial_warp_for(&cfg.perturbation, cfg.seed, i);
        trace_sample(model, &data.samples[i], p0, i)
    });
    let traces = traces.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = data.len();
    let real_score = match model.discriminator() {
        Some(d) => Some(mean_score(d, data.samples.iter().map(|s| &s.real))?),
        None => None,
    };
    let mut stages = Vec::new();
    for stage in 0..=model.stages() {
        let rows: Vec<&SampleRow> = traces.iter().map(|t| &t.rows[stage]).collect();
        let col = |f: fn(&SampleRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let corner = col(|r| r.corner_error);
        let aligned = col(|r| r.aligned_error);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let score_gap = match (model.discriminator(), real_score) {
            (Some(d), Some(real)) => Some(real - mean_score(d, traces.iter().map(|t| &t.fakes[stage]))?),
            _ => None,
        };
        stages.push(StageStats {
            stage,
            mean_corner_error: mean(&corner),
            median_corner_error: median(&corner),
            mean_aligned_error: mean(&aligned),
            median_aligned_error: median(&aligned),
            mean_mask_iou: mean(&col(|r| r.mask_iou)),
            mean_update_norm: mean(&col(|r| r.update_norm)),
            score_gap,
        });
    }
    let hash_input = serde_json::to_string(&(cfg, n, model.stages())).expect("serializable");
    let report = EvalReport {
        samples: n,
        seed: cfg.seed,
        config_hash: format!("{:08x}", crc32fast::hash(hash_input.as_bytes())),
        stages,
    };
    let mut rows: Vec<SampleRow> = traces.into_iter().flat_map(|t| t.rows).collect();
    rows.sort_by_key(|r| (r.stage, r.index));
    Ok(Evaluation { report, rows })
}

fn mean_score<'a>(d: &DiscriminatorNet, imgs: impl Iterator<Item = &'a Raster>) -> Result<f64, EvalError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for im in imgs {
        total += d.score(im).map_err(|e| EvalError::Model(e.to_string()))?;
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubes::CubesConfig;

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Raster {
        let mut m = Raster::zeros(h, w, 1);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(0, y, x, 1.0);
            }
        }
        m
    }

    #[test]
    fn iou_cases() {
        let a = square(8, 8, 0, 0, 4);
        assert_eq!(mask_iou(&a, &a, 0.5).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &square(8, 8, 4, 4, 4), 0.5).unwrap(), 0.0);
        // shifted by half the side: overlap 8, union 24
        let b = square(8, 8, 0, 2, 4);
        assert!((mask_iou(&a, &b, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_iou(&a, &b, 0.5).unwrap(), mask_iou(&b, &a, 0.5).unwrap());
        let z = Raster::zeros(8, 8, 1);
        assert!(matches!(mask_iou(&z, &z, 0.5), Err(EvalError::EmptyUnion)));
    }

    #[test]
    fn corner_error_of_translation() {
        let fm = FrameMap::new(32, 32);
        let pts = [[4.0, 4.0], [20.0, 6.0], [10.0, 25.0]];
        // one canonical unit is 16 px here
        let p = WarpParams::translation(0.25, 0.0);
        let e = corner_error(&p, &pts, &pts, &fm).unwrap();
        assert!((e.absolute - 4.0).abs() < 1e-9);
        assert!(e.aligned < 1e-9);
        let z = corner_error(&WarpParams::ZERO, &pts, &pts, &fm).unwrap();
        assert_eq!(z.absolute, 0.0);
    }

    #[test]
    fn aligned_never_exceeds_absolute() {
        let fm = FrameMap::new(32, 32);
        let pts = [[4.0, 4.0], [20.0, 6.0], [10.0, 25.0], [28.0, 28.0]];
        let gt = [[5.0, 3.0], [21.0, 8.0], [9.0, 24.0], [27.0, 30.0]];
        for k in 0..50 {
            let p = perturb::initial_warp_for(&PerturbationModel::default(), 3, k);
            let e = corner_error(&p, &pts, &gt, &fm).unwrap();
            assert!(e.aligned <= e.absolute + 1e-12);
        }
    }

    #[test]
    fn identity_model_keeps_stage_zero_stats() {
        let data = CubesDataset::generate(&CubesConfig::default(), 2, 0, 6).unwrap();
        let ev = evaluate(&IdentityPredictor(2), &data, &EvalConfig::default()).unwrap();
        let r = &ev.report;
        assert_eq!(r.stages.len(), 3);
        for s in &r.stages[1..] {
            assert_eq!(s.median_corner_error, r.stages[0].median_corner_error);
            assert_eq!(s.mean_mask_iou, r.stages[0].mean_mask_iou);
        }
        let json = serde_json::to_string(r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, r);
        assert_eq!(ev.to_csv().lines().count(), 1 + 3 * 6);
    }

    #[test]
    fn exact_inverse_has_no_error() {
        let cfg = CubesConfig::default().without_camera_perturbation();
        let data = CubesDataset::generate(&cfg, 4, 0, 3).unwrap();
        let fm = FrameMap::new(32, 32);
        for (i, s) in data.samples.iter().enumerate() {
            let p0 = perturb::initial_warp_for(&PerturbationModel::default(), 1, i);
            let corrected = p0 + (-p0);
            assert!(sample_corner_error(&corrected, s, &fm).unwrap().absolute < 0.5);
            assert!(sample_corner_error(&p0, s, &fm).unwrap().absolute > 0.0);
        }
    }
}
