//! Bilinear warping, alpha compositing and the iterative warp chain.

use crate::lie::{self, FrameMap, Homography, LieError, WarpParams};
use crate::raster::{ForegroundLayer, Raster, RasterError};
use nalgebra::Matrix3;
use num_traits::Float;

#[derive(Debug, thiserror::Error)]
pub enum WarpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Lie(#[from] LieError),
}

impl From<RasterError> for WarpError {
    fn from(e: RasterError) -> Self {
        WarpError::DimensionMismatch(e.to_string())
    }
}

/// Per-output-pixel source coordinates, in source pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
}

impl SampleGrid {
    pub fn new(height: usize, width: usize, coords: Vec<[f64; 2]>) -> Result<Self, WarpError> {
        if coords.len() != height * width {
            return Err(WarpError::DimensionMismatch(format!(
                "{} grid points for a {height}x{width} output",
                coords.len()
            )));
        }
        Ok(SampleGrid {
            height,
            width,
            coords,
        })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        let coords = (0..height)
            .flat_map(|y| (0..width).map(move |x| [x as f64, y as f64]))
            .collect();
        SampleGrid {
            height,
            width,
            coords,
        }
    }

    /// Grid sampling the source at `source_map · u` for every output pixel `u`.
    pub fn from_homography(source_map: &Homography, height: usize, width: usize) -> Result<Self, WarpError> {
        let mut coords = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                coords.push(source_map.apply(x as f64, y as f64)?);
            }
        }
        Ok(SampleGrid {
            height,
            width,
            coords,
        })
    }
}

/// Neighborhood of a bilinear tap; out-of-range neighbors carry `None`.
#[derive(Clone, Copy)]
struct Tap {
    idx: [Option<usize>; 4],
    fx: f64,
    fy: f64,
}

#[inline]
fn tap(h: usize, w: usize, x: f64, y: f64) -> Tap {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |xi: f64, yi: f64| -> Option<usize> {
        if xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 {
            Some(yi as usize * w + xi as usize)
        } else {
            None
        }
    };
    Tap {
        idx: [at(x0, y0), at(x0 + 1.0, y0), at(x0, y0 + 1.0), at(x0 + 1.0, y0 + 1.0)],
        fx,
        fy,
    }
}

#[inline]
fn tap_values<T: Float>(plane: &[T], t: &Tap) -> [T; 4] {
    t.idx.map(|i| i.map_or(T::zero(), |i| plane[i]))
}

#[inline]
fn tap_weights<T: Float>(t: &Tap) -> [T; 4] {
    let fx = T::from(t.fx).unwrap();
    let fy = T::from(t.fy).unwrap();
    let one = T::one();
    [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy]
}

/// Bilinear sample of one plane at `(x, y)`, zero outside.
#[inline]
pub fn sample_plane<T: Float>(plane: &[T], h: usize, w: usize, x: f64, y: f64) -> T {
    let t = tap(h, w, x, y);
    let v = tap_values(plane, &t);
    let k = tap_weights::<T>(&t);
    v[0] * k[0] + v[1] * k[1] + v[2] * k[2] + v[3] * k[3]
}

/// Samples every plane of a `channels × h × w` buffer on `grid`.
pub fn sample_planes<T: Float>(src: &[T], channels: usize, h: usize, w: usize, grid: &SampleGrid) -> Vec<T> {
    let n = grid.height * grid.width;
    let mut out = vec![T::zero(); channels * n];
    for (i, &[x, y]) in grid.coords.iter().enumerate() {
        let t = tap(h, w, x, y);
        let k = tap_weights::<T>(&t);
        for c in 0..channels {
            let v = tap_values(&src[c * h * w..(c + 1) * h * w], &t);
            out[c * n + i] = v[0] * k[0] + v[1] * k[1] + v[2] * k[2] + v[3] * k[3];
        }
    }
    out
}

/// Vector-Jacobian product of [`sample_planes`]: returns the gradient with
/// respect to the source values and to each grid coordinate.
pub fn sample_planes_vjp<T: Float>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    grid: &SampleGrid,
    upstream: &[T],
) -> (Vec<T>, Vec<[T; 2]>) {
    let n = grid.height * grid.width;
    let mut dsrc = vec![T::zero(); src.len()];
    let mut dgrid = vec![[T::zero(); 2]; n];
    for (i, &[x, y]) in grid.coords.iter().enumerate() {
        let t = tap(h, w, x, y);
        let k = tap_weights::<T>(&t);
        let fx = T::from(t.fx).unwrap();
        let fy = T::from(t.fy).unwrap();
        let one = T::one();
        let mut gx = T::zero();
        let mut gy = T::zero();
        for c in 0..channels {
            let g = upstream[c * n + i];
            let plane = &src[c * h * w..(c + 1) * h * w];
            let v = tap_values(plane, &t);
            gx = gx + g * ((one - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]));
            gy = gy + g * ((one - fx) * (v[2] - v[0]) + fx * (v[3] - v[1]));
            for (j, idx) in t.idx.iter().enumerate() {
                if let Some(idx) = idx {
                    let d = &mut dsrc[c * h * w + idx];
                    *d = *d + g * k[j];
                }
            }
        }
        dgrid[i] = [gx, gy];
    }
    (dsrc, dgrid)
}

pub fn bilinear_sample(img: &Raster, grid: &SampleGrid) -> Raster {
    let data = sample_planes(&img.data, img.channels, img.height, img.width, grid);
    Raster {
        height: grid.height,
        width: grid.width,
        channels: img.channels,
        data,
    }
}

/// Gradients of `Σ upstream ⊙ bilinear_sample(img, grid)` with respect to the
/// image values and to the grid coordinates.
pub fn bilinear_sample_vjp(img: &Raster, grid: &SampleGrid, upstream: &Raster) -> Result<(Raster, Vec<[f32; 2]>), WarpError> {
    if upstream.height != grid.height || upstream.width != grid.width || upstream.channels != img.channels {
        return Err(WarpError::DimensionMismatch("upstream shape differs from sample output".into()));
    }
    let (d, g) = sample_planes_vjp(&img.data, img.channels, img.height, img.width, grid, &upstream.data);
    let dimg = Raster {
        height: img.height,
        width: img.width,
        channels: img.channels,
        data: d,
    };
    Ok((dimg, g))
}

/// Pixel-frame matrix that maps output pixels to their source positions for
/// the warp `p` (the inverse mapping `H(p)⁻¹ = H(-p)`).
pub fn source_map(p: &WarpParams, fm: &FrameMap, order: usize) -> Homography {
    lie::pixel_homography(&lie::invert(p), fm, order)
}

/// Warps color and mask of `fg` by `p` with one shared sampling grid.
pub fn warp_foreground(fg: &ForegroundLayer, p: &WarpParams, fm: &FrameMap) -> Result<ForegroundLayer, WarpError> {
    warp_foreground_with_order(fg, p, fm, lie::DEFAULT_TAYLOR_ORDER)
}

pub fn warp_foreground_with_order(
    fg: &ForegroundLayer,
    p: &WarpParams,
    fm: &FrameMap,
    order: usize,
) -> Result<ForegroundLayer, WarpError> {
    if fm.width != fg.width() || fm.height != fg.height() {
        return Err(WarpError::DimensionMismatch(format!(
            "frame {}x{} vs layer {}x{}",
            fm.height,
            fm.width,
            fg.height(),
            fg.width()
        )));
    }
    if !p.is_finite() {
        return Err(LieError::NonFinite.into());
    }
    if *p == WarpParams::ZERO {
        return Ok(fg.clone());
    }
    let grid = SampleGrid::from_homography(&source_map(p, fm, order), fg.height(), fg.width())?;
    Ok(ForegroundLayer {
        color: bilinear_sample(&fg.color, &grid),
        mask: bilinear_sample(&fg.mask, &grid),
    })
}

/// `fg.color ⊙ fg.mask + bg ⊙ (1 - fg.mask)`, clamped to `[0, 1]`.
pub fn composite(fg: &ForegroundLayer, bg: &Raster) -> Result<Raster, WarpError> {
    if !fg.color.same_size(bg) || bg.channels != fg.color.channels {
        return Err(WarpError::DimensionMismatch(format!(
            "foreground {}x{}x{} vs background {}x{}x{}",
            fg.height(),
            fg.width(),
            fg.color.channels,
            bg.height,
            bg.width,
            bg.channels
        )));
    }
    let n = bg.plane_len();
    let m = &fg.mask.data;
    let mut out = bg.clone();
    for c in 0..bg.channels {
        let col = fg.color.plane(c);
        let dst = out.plane_mut(c);
        for i in 0..n {
            dst[i] = (col[i] * m[i] + dst[i] * (1.0 - m[i])).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Warp states `p_0..p_N` and the composite at each.
#[derive(Debug, Clone)]
pub struct WarpChainResult {
    pub states: Vec<WarpParams>,
    pub composites: Vec<Raster>,
}

impl WarpChainResult {
    pub fn final_state(&self) -> WarpParams {
        *self.states.last().expect("chain has p0")
    }

    pub fn final_composite(&self) -> &Raster {
        self.composites.last().expect("chain has p0")
    }
}

/// Accumulates `deltas` onto `p0`. Each composite warps the original
/// foreground once at the accumulated state.
pub fn apply_warp_chain(
    fg: &ForegroundLayer,
    bg: &Raster,
    p0: &WarpParams,
    deltas: &[WarpParams],
    fm: &FrameMap,
) -> Result<WarpChainResult, WarpError> {
    let mut states = Vec::with_capacity(deltas.len() + 1);
    states.push(*p0);
    for d in deltas {
        if !d.is_finite() {
            return Err(LieError::NonFinite.into());
        }
        let prev = *states.last().unwrap();
        states.push(lie::compose(&prev, d));
    }
    let composites = states
        .iter()
        .map(|p| composite(&warp_foreground(fg, p, fm)?, bg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(WarpChainResult { states, composites })
}

/// Mean over non-overlapping `factor × factor` blocks.
pub fn avg_pool(img: &Raster, factor: usize) -> Result<Raster, WarpError> {
    if factor == 0 || img.height % factor != 0 || img.width % factor != 0 {
        return Err(WarpError::DimensionMismatch(format!(
            "pool factor {factor} does not divide {}x{}",
            img.height, img.width
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (oh, ow) = (img.height / factor, img.width / factor);
    let mut out = Raster::zeros(oh, ow, img.channels);
    let inv = 1.0 / (factor * factor) as f32;
    for c in 0..img.channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += img.get(c, y * factor + dy, x * factor + dx);
                    }
                }
                out.set(c, y, x, s * inv);
            }
        }
    }
    Ok(out)
}

/// Warps a batch-free `channels × h × w` buffer through a pixel-frame source
/// map. Used by the autodiff warp node.
pub fn warp_planes(src: &[f32], channels: usize, h: usize, w: usize, source: &Homography) -> Result<Vec<f32>, WarpError> {
    let grid = SampleGrid::from_homography(source, h, w)?;
    Ok(sample_planes(src, channels, h, w, &grid))
}

/// Gradient of `Σ upstream ⊙ warp_planes(src, source)` with respect to the
/// source values and the nine entries of `source` (row-major).
pub fn warp_planes_vjp(
    src: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    source: &Homography,
    upstream: &[f32],
    want_src: bool,
) -> Result<(Option<Vec<f32>>, Matrix3<f64>), WarpError> {
    let grid = SampleGrid::from_homography(source, h, w)?;
    let m = source.matrix();
    let n = h * w;
    let mut dsrc = want_src.then(|| vec![0f32; src.len()]);
    let mut dh = Matrix3::<f64>::zeros();
    for (i, &[sx, sy]) in grid.coords.iter().enumerate() {
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        let t = tap(h, w, sx, sy);
        let k = tap_weights::<f32>(&t);
        let (fx, fy) = (t.fx, t.fy);
        let mut gx = 0f64;
        let mut gy = 0f64;
        for c in 0..channels {
            let g = upstream[c * n + i];
            if g == 0.0 {
                continue;
            }
            let plane = &src[c * n..(c + 1) * n];
            let val = tap_values(plane, &t).map(|x| x as f64);
            let g64 = g as f64;
            gx += g64 * ((1.0 - fy) * (val[1] - val[0]) + fy * (val[3] - val[2]));
            gy += g64 * ((1.0 - fx) * (val[2] - val[0]) + fx * (val[3] - val[1]));
            if let Some(d) = dsrc.as_mut() {
                for (j, idx) in t.idx.iter().enumerate() {
                    if let Some(idx) = idx {
                        d[c * n + idx] += g * k[j];
                    }
                }
            }
        }
        if gx == 0.0 && gy == 0.0 {
            continue;
        }
        let wden = m[(2, 0)] * u + m[(2, 1)] * v + m[(2, 2)];
        let uh = [u / wden, v / wden, 1.0 / wden];
        for col in 0..3 {
            dh[(0, col)] += gx * uh[col];
            dh[(1, col)] += gy * uh[col];
            dh[(2, col)] -= (gx * sx + gy * sy) * uh[col];
        }
    }
    Ok((dsrc, dh))
}
