//! Initial warp perturbations.

use crate::lie::{self, FrameMap, Placement, WarpParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationModel {
    /// Per-element standard deviation of `p0` in the canonical frame.
    pub sigma: f64,
    /// Optional uniform foreground rescale range.
    pub rescale: Option<[f64; 2]>,
    /// Optional Gaussian translation jitter, in units of the image extent.
    pub translation_jitter: Option<f64>,
}

impl Default for PerturbationModel {
    fn default() -> Self {
        PerturbationModel {
            sigma: 0.1,
            rescale: None,
            translation_jitter: None,
        }
    }
}

impl PerturbationModel {
    pub fn none() -> Self {
        PerturbationModel {
            sigma: 0.0,
            rescale: None,
            translation_jitter: None,
        }
    }
}

/// Draws `p0`: eight i.i.d. `N(0, σ²)` elements, plus the optional
/// similarity terms lifted into the algebra.
pub fn sample_initial_warp(pm: &PerturbationModel, rng: &mut impl Rng) -> WarpParams {
    let mut p = WarpParams::ZERO;
    if pm.sigma > 0.0 {
        let n = Normal::new(0.0, pm.sigma).expect("finite sigma");
        for v in &mut p.0 {
            *v = n.sample(rng);
        }
    }
    if pm.rescale.is_some() || pm.translation_jitter.is_some() {
        // the placement lift works in any frame; a 2x2 one keeps the math canonical
        let fm = FrameMap::new(2, 2);
        let scale = match pm.rescale {
            Some([a, b]) if b > a => rng.random_range(a..b),
            Some([a, _]) => a,
            None => 1.0,
        };
        let (mut tx, mut ty) = (0.0, 0.0);
        if let Some(j) = pm.translation_jitter.filter(|j| *j > 0.0) {
            let n = Normal::new(0.0, j).expect("finite jitter");
            // one image extent spans two canonical units
            tx = 2.0 * n.sample(rng);
            ty = 2.0 * n.sample(rng);
        }
        let center = fm.to_pixel(tx, ty);
        let q = lie::placement_to_params(&Placement { center, scale }, &fm).expect("finite placement");
        p = p + q;
    }
    p
}

/// Deterministic `p0` for sample `index` of an evaluation or dataset stream.
pub fn initial_warp_for(pm: &PerturbationModel, seed: u64, index: usize) -> WarpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    sample_initial_warp(pm, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_initial_warp(&PerturbationModel::none(), &mut rng), WarpParams::ZERO);
        }
    }

    #[test]
    fn moments_match_sigma() {
        let pm = PerturbationModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut sum = [0.0f64; 8];
        let mut sq = [0.0f64; 8];
        for _ in 0..n {
            let p = sample_initial_warp(&pm, &mut rng);
            for i in 0..8 {
                sum[i] += p.0[i];
                sq[i] += p.0[i] * p.0[i];
            }
        }
        let bound = 3.0 * 0.1 / (n as f64).sqrt();
        for i in 0..8 {
            let mean = sum[i] / n as f64;
            let std = (sq[i] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() < bound, "element {i} mean {mean}");
            assert!((std - 0.1).abs() < 0.005, "element {i} std {std}");
        }
    }

    #[test]
    fn similarity_terms() {
        let pm = PerturbationModel {
            sigma: 0.0,
            rescale: Some([1.1, 1.1]),
            translation_jitter: None,
        };
        let p = initial_warp_for(&pm, 1, 0);
        let h = lie::exp_sl3(&p, 20);
        // pure scale about the canonical origin: corner (1, 1) maps to (1.1, 1.1)
        let [x, y] = h.apply(1.0, 1.0).unwrap();
        assert!((x - 1.1).abs() < 1e-9 && (y - 1.1).abs() < 1e-9);
    }
}
