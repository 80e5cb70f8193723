//! Homographies parameterized by the sl(3) Lie algebra.
//!
//! A warp is an 8-vector `p` of algebra coordinates living in the canonical
//! frame, where both image axes span `[-1, 1]`. The matrix exponential of the
//! traceless generator `X(p)` gives a unit-determinant homography, and warp
//! composition is plain parameter addition.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::ops::{Add, Neg, Sub};

/// Default Taylor order of the exponential series.
pub const DEFAULT_TAYLOR_ORDER: usize = 20;

/// Below this magnitude the homogeneous coordinate is treated as zero.
pub const INFINITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LieError {
    #[error("point ({x}, {y}) maps to the line at infinity")]
    PointAtInfinity { x: f64, y: f64 },
    #[error("warp parameters must be finite")]
    NonFinite,
}

/// sl(3) coordinates `p1..p8` of a homography in the canonical frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WarpParams(pub [f64; 8]);

impl WarpParams {
    pub const ZERO: WarpParams = WarpParams([0.0; 8]);

    pub fn new(p: [f64; 8]) -> Self {
        WarpParams(p)
    }

    pub fn from_slice(p: &[f64]) -> Option<Self> {
        let arr: [f64; 8] = p.try_into().ok()?;
        Some(WarpParams(arr))
    }

    pub fn as_array(&self) -> &[f64; 8] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        WarpParams(self.0.map(|v| v * s))
    }

    /// Pure translation by `(tx, ty)` canonical units, to first order.
    pub fn translation(tx: f64, ty: f64) -> Self {
        WarpParams([0.0, 0.0, tx, 0.0, ty, 0.0, 0.0, 0.0])
    }
}

impl Add for WarpParams {
    type Output = WarpParams;
    fn add(self, rhs: WarpParams) -> WarpParams {
        compose(&self, &rhs)
    }
}

impl Sub for WarpParams {
    type Output = WarpParams;
    fn sub(self, rhs: WarpParams) -> WarpParams {
        compose(&self, &invert(&rhs))
    }
}

impl Neg for WarpParams {
    type Output = WarpParams;
    fn neg(self) -> WarpParams {
        invert(&self)
    }
}

/// A 3×3 projective transform. Those produced by [`exp_sl3`] have unit
/// determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn inverse(&self) -> Option<Homography> {
        self.0.try_inverse().map(Homography)
    }

    pub fn compose(&self, rhs: &Homography) -> Homography {
        Homography(self.0 * rhs.0)
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Homography {
        Homography(Matrix3::from_row_slice(v))
    }

    /// Projective action on a single point.
    pub fn apply(&self, x: f64, y: f64) -> Result<[f64; 2], LieError> {
        let m = &self.0;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w.abs() < INFINITY_EPS {
            return Err(LieError::PointAtInfinity { x, y });
        }
        Ok([
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        ])
    }
}

/// The traceless generator `X(p)`.
pub fn generator_matrix(p: &WarpParams) -> Matrix3<f64> {
    let [p1, p2, p3, p4, p5, p6, p7, p8] = p.0;
    Matrix3::new(p1, p2, p3, p4, -p1 - p8, p5, p6, p7, p8)
}

/// `dX/dp_j`, the j-th basis element of sl(3) in this parameterization.
pub fn generator_basis(j: usize) -> Matrix3<f64> {
    let mut p = [0.0; 8];
    p[j] = 1.0;
    generator_matrix(&WarpParams(p))
}

/// Truncated Taylor series `Σ_{k=0..order} X(p)^k / k!`.
pub fn exp_sl3(p: &WarpParams, order: usize) -> Homography {
    let x = generator_matrix(p);
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for k in 1..=order.max(1) {
        term = term * x / k as f64;
        sum += term;
    }
    Homography(sum)
}

/// The exponential together with its partial derivatives with respect to
/// each of the eight parameters, using the same truncated series.
pub fn exp_sl3_with_jacobian(p: &WarpParams, order: usize) -> (Homography, [Matrix3<f64>; 8]) {
    let x = generator_matrix(p);
    let basis: [Matrix3<f64>; 8] = std::array::from_fn(generator_basis);
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    let mut dterm = [Matrix3::zeros(); 8];
    let mut dsum = [Matrix3::zeros(); 8];
    for k in 1..=order.max(1) {
        let kf = k as f64;
        for j in 0..8 {
            // d(T_{k-1} X)/dp_j = dT_{k-1} X + T_{k-1} E_j
            dterm[j] = (dterm[j] * x + term * basis[j]) / kf;
            dsum[j] += dterm[j];
        }
        term = term * x / kf;
        sum += term;
    }
    (Homography(sum), dsum)
}

/// Warp composition: `pa ∘ pb = pa + pb`.
pub fn compose(pa: &WarpParams, pb: &WarpParams) -> WarpParams {
    WarpParams(std::array::from_fn(|i| pa.0[i] + pb.0[i]))
}

pub fn invert(p: &WarpParams) -> WarpParams {
    WarpParams(p.0.map(|v| -v))
}

pub fn warp_points(h: &Homography, pts: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, LieError> {
    pts.iter().map(|&[x, y]| h.apply(x, y)).collect()
}

/// Affine correspondence between pixel coordinates and the canonical frame.
///
/// Pixel centers sit at integer coordinates, so the image extent is
/// `[-0.5, width - 0.5]`; that extent maps onto `[-1, 1]` on each axis
/// independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMap {
    pub width: usize,
    pub height: usize,
}

impl FrameMap {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "frame must be non-empty");
        FrameMap { width, height }
    }

    pub fn to_canonical(&self, x: f64, y: f64) -> [f64; 2] {
        [
            (2.0 * x + 1.0) / self.width as f64 - 1.0,
            (2.0 * y + 1.0) / self.height as f64 - 1.0,
        ]
    }

    pub fn to_pixel(&self, xc: f64, yc: f64) -> [f64; 2] {
        [
            (xc + 1.0) * self.width as f64 / 2.0 - 0.5,
            (yc + 1.0) * self.height as f64 / 2.0 - 0.5,
        ]
    }

    /// Matrix taking canonical coordinates to pixel coordinates.
    pub fn canonical_to_pixel(&self) -> Matrix3<f64> {
        let sx = self.width as f64 / 2.0;
        let sy = self.height as f64 / 2.0;
        Matrix3::new(sx, 0.0, sx - 0.5, 0.0, sy, sy - 0.5, 0.0, 0.0, 1.0)
    }

    pub fn pixel_to_canonical(&self) -> Matrix3<f64> {
        let sx = 2.0 / self.width as f64;
        let sy = 2.0 / self.height as f64;
        Matrix3::new(sx, 0.0, sx * 0.5 - 1.0, 0.0, sy, sy * 0.5 - 1.0, 0.0, 0.0, 1.0)
    }
}

/// Conjugates a canonical-frame homography into the pixel frame of `fm`.
pub fn to_image_frame(h: &Homography, fm: &FrameMap) -> Homography {
    Homography(fm.canonical_to_pixel() * h.0 * fm.pixel_to_canonical())
}

/// Inverse of [`to_image_frame`].
pub fn to_canonical_frame(h: &Homography, fm: &FrameMap) -> Homography {
    Homography(fm.pixel_to_canonical() * h.0 * fm.canonical_to_pixel())
}

/// Pixel-frame homography of a warp for the given frame.
pub fn pixel_homography(p: &WarpParams, fm: &FrameMap, order: usize) -> Homography {
    to_image_frame(&exp_sl3(p, order), fm)
}

/// Relative placement of a foreground over a background: the foreground's
/// full extent is scaled by `scale` about its center, and that center is put
/// at `center` (background pixel coordinates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub center: [f64; 2],
    pub scale: f64,
}

/// Lifts a placement similarity into the algebra in closed form.
///
/// In canonical coordinates the similarity is `A = [[s,0,cx],[0,s,cy],[0,0,1]]`.
/// Normalized to unit determinant it is the exponential of
/// `[[a,0,u],[0,a,v],[0,0,b]]` with `a = ln(s)/3`, `b = -2a`, and
/// `u = s^(-2/3)·cx·(a-b)/(e^a-e^b)`.
pub fn placement_to_params(pl: &Placement, fm: &FrameMap) -> Result<WarpParams, LieError> {
    if !(pl.scale.is_finite() && pl.scale > 0.0) || !pl.center.iter().all(|v| v.is_finite()) {
        return Err(LieError::NonFinite);
    }
    let [cx, cy] = fm.to_canonical(pl.center[0], pl.center[1]);
    let a = pl.scale.ln() / 3.0;
    let b = -2.0 * a;
    let norm = pl.scale.powf(-2.0 / 3.0);
    let gain = if (a - b).abs() < 1e-12 {
        (-a).exp()
    } else {
        (a - b) / (a.exp() - b.exp())
    };
    let u = norm * cx * gain;
    let v = norm * cy * gain;
    Ok(WarpParams([a, 0.0, u, 0.0, v, 0.0, 0.0, b]))
}

/// Homogeneous lift used by tests and callers building custom matrices.
pub fn homogeneous(x: f64, y: f64) -> Vector3<f64> {
    Vector3::new(x, y, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn generator_layout() {
        let x = generator_matrix(&WarpParams([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(x[(0, 0)], 1.0);
        assert_eq!(x[(1, 1)], -1.0);
        let nonzero = x.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 2);
        assert_eq!(generator_matrix(&WarpParams::ZERO), Matrix3::zeros());
    }

    #[test]
    fn trace_is_zero() {
        let p = WarpParams([0.3, -1.2, 2.0, 0.7, -0.1, 0.05, 9.0, -3.3]);
        assert_eq!(generator_matrix(&p).trace(), 0.0);
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_sl3(&WarpParams::ZERO, 20).0, Matrix3::identity());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = WarpParams([0.1, -0.05, 0.2, 0.03, -0.1, 0.07, -0.02, 0.04]);
        let (h, jac) = exp_sl3_with_jacobian(&p, 20);
        assert_relative_eq!(h.0, exp_sl3(&p, 20).0, epsilon = 1e-15);
        let eps = 1e-6;
        for (j, dj) in jac.iter().enumerate() {
            let mut a = p;
            let mut b = p;
            a.0[j] += eps;
            b.0[j] -= eps;
            let fd = (exp_sl3(&a, 20).0 - exp_sl3(&b, 20).0) / (2.0 * eps);
            assert_relative_eq!(*dj, fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn point_at_infinity() {
        let h = Homography(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0));
        assert!(matches!(
            h.apply(0.0, 3.0),
            Err(LieError::PointAtInfinity { .. })
        ));
    }

    #[test]
    fn translation_first_order() {
        let p = WarpParams::translation(0.01, -0.02);
        let out = warp_points(&exp_sl3(&p, 20), &[[0.0, 0.0]]).unwrap();
        assert!((out[0][0] - 0.01).abs() < 1e-4);
        assert!((out[0][1] + 0.02).abs() < 1e-4);
    }

    #[test]
    fn frame_roundtrip() {
        let fm = FrameMap::new(40, 30);
        let [xc, yc] = fm.to_canonical(3.25, 17.5);
        let [x, y] = fm.to_pixel(xc, yc);
        assert_relative_eq!(x, 3.25, epsilon = 1e-12);
        assert_relative_eq!(y, 17.5, epsilon = 1e-12);
        assert_eq!(fm.to_canonical(-0.5, -0.5), [-1.0, -1.0]);
        assert_eq!(fm.to_canonical(39.5, 29.5), [1.0, 1.0]);
        assert_relative_eq!(
            fm.canonical_to_pixel() * fm.pixel_to_canonical(),
            Matrix3::identity(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn identity_conjugates_to_identity() {
        let fm = FrameMap::new(17, 9);
        let h = to_image_frame(&Homography::identity(), &fm);
        assert_relative_eq!(h.0, Matrix3::identity(), epsilon = 1e-14);
    }

    #[test]
    fn placement_maps_extent_to_rectangle() {
        let fm = FrameMap::new(64, 48);
        let pl = Placement {
            center: [40.0, 20.0],
            scale: 0.5,
        };
        let p = placement_to_params(&pl, &fm).unwrap();
        let h = pixel_homography(&p, &fm, 20);
        let corners = [[-0.5, -0.5], [63.5, -0.5], [63.5, 47.5], [-0.5, 47.5]];
        let out = warp_points(&h, &corners).unwrap();
        let expect = [[24.0, 8.0], [56.0, 8.0], [56.0, 32.0], [24.0, 32.0]];
        for (o, e) in out.iter().zip(expect.iter()) {
            assert!((o[0] - e[0]).abs() < 1e-6 && (o[1] - e[1]).abs() < 1e-6, "{o:?} vs {e:?}");
        }
    }

    #[test]
    fn unit_scale_placement_is_translation() {
        let fm = FrameMap::new(32, 32);
        let pl = Placement {
            center: [15.5, 15.5],
            scale: 1.0,
        };
        let p = placement_to_params(&pl, &fm).unwrap();
        assert!(p.max_abs() < 1e-12);
    }
}
