//! Double-precision reference implementations used as test oracles.
#![allow(dead_code)]

use stgan::lie::{self, FrameMap, WarpParams};

pub fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed;
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    }
}

/// NCHW array in f64.
#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Arr { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        let mut s = [1usize; 4];
        s[..shape.len()].copy_from_slice(shape);
        Arr { shape: s, data: data.iter().map(|v| *v as f64).collect() }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((n * cc + c) * h + y) * w + x
    }
}

/// Leading pad of a "ceil" strided convolution.
fn pad(len: usize, k: usize, s: usize) -> (usize, isize) {
    let out = len.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(len);
    (out, (total / 2) as isize)
}

pub fn conv(x: &Arr, w: &Arr, stride: usize) -> Arr {
    let [n, c, h, wd] = x.shape;
    let [o, _, k, _] = w.shape;
    let (oh, pt) = pad(h, k, stride);
    let (ow, pl) = pad(wd, k, stride);
    let mut y = Arr::zeros([n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pt;
                                let ix = (ox * stride + kx) as isize - pl;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(b, ic, iy as usize, ix as usize) * w.at(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    let i = y.idx(b, oc, oy, ox);
                    y.data[i] = s;
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv`] in its input.
pub fn conv_t(gy: &Arr, w: &Arr, in_shape: [usize; 4], stride: usize) -> Arr {
    let [n, c, h, wd] = in_shape;
    let [o, _, k, _] = w.shape;
    let (oh, pt) = pad(h, k, stride);
    let (ow, pl) = pad(wd, k, stride);
    let mut x = Arr::zeros(in_shape);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gy.at(b, oc, oy, ox);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pt;
                                let ix = (ox * stride + kx) as isize - pl;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    let i = x.idx(b, ic, iy as usize, ix as usize);
                                    x.data[i] += g * w.at(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn bias(x: &Arr, b: &[f64]) -> Arr {
    let mut y = x.clone();
    let [_, c, h, w] = x.shape;
    for (i, v) in y.data.iter_mut().enumerate() {
        *v += b[(i / (h * w)) % c];
    }
    y
}

pub fn leaky(x: &Arr, slope: f64) -> Arr {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| if *v <= 0.0 { *v *= slope });
    y
}

pub fn relu(x: &Arr) -> Arr {
    leaky(x, 0.0)
}

pub fn pool2(x: &Arr) -> Arr {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = Arr::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    let mut cnt = 0.0;
                    for iy in 2 * oy..(2 * oy + 2).min(h) {
                        for ix in 2 * ox..(2 * ox + 2).min(w) {
                            s += x.at(b, ch, iy, ix);
                            cnt += 1.0;
                        }
                    }
                    let i = y.idx(b, ch, oy, ox);
                    y.data[i] = s / cnt;
                }
            }
        }
    }
    y
}

pub fn pool2_t(g: &Arr, shape: [usize; 4]) -> Arr {
    let [n, c, h, w] = shape;
    let mut x = Arr::zeros(shape);
    for b in 0..n {
        for ch in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let (oy, ox) = (iy / 2, ix / 2);
                    let cy = ((2 * oy + 2).min(h) - 2 * oy) as f64;
                    let cx = ((2 * ox + 2).min(w) - 2 * ox) as f64;
                    let i = x.idx(b, ch, iy, ix);
                    x.data[i] = g.at(b, ch, oy, ox) / (cy * cx);
                }
            }
        }
    }
    x
}

pub fn concat(a: &Arr, b: &Arr) -> Arr {
    let [n, ca, h, w] = a.shape;
    let cb = b.shape[1];
    let mut y = Arr::zeros([n, ca + cb, h, w]);
    let plane = h * w;
    for s in 0..n {
        y.data[s * (ca + cb) * plane..][..ca * plane].copy_from_slice(&a.data[s * ca * plane..][..ca * plane]);
        y.data[(s * (ca + cb) + ca) * plane..][..cb * plane].copy_from_slice(&b.data[s * cb * plane..][..cb * plane]);
    }
    y
}

/// Zero-padded bilinear sample of plane `(n, c)` at `(x, y)`.
pub fn bilinear(img: &Arr, n: usize, c: usize, x: f64, y: f64) -> f64 {
    let [_, _, h, w] = img.shape;
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let px = |xi: f64, yi: f64| {
        if xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 {
            img.at(n, c, yi as usize, xi as usize)
        } else {
            0.0
        }
    };
    px(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + px(x0 + 1.0, y0) * fx * (1.0 - fy)
        + px(x0, y0 + 1.0) * (1.0 - fx) * fy
        + px(x0 + 1.0, y0 + 1.0) * fx * fy
}

/// Inverse-mapping warp of every sample by its own parameters.
pub fn warp(img: &Arr, params: &[WarpParams]) -> Arr {
    let [n, c, h, w] = img.shape;
    let fm = FrameMap::new(w, h);
    let mut y = Arr::zeros(img.shape);
    for b in 0..n {
        let hs = lie::pixel_homography(&lie::invert(&params[b]), &fm, 30);
        for v in 0..h {
            for u in 0..w {
                let [sx, sy] = hs.apply(u as f64, v as f64).unwrap();
                for ch in 0..c {
                    let i = y.idx(b, ch, v, u);
                    y.data[i] = bilinear(img, b, ch, sx, sy);
                }
            }
        }
    }
    y
}

/// Nearest distance of any sample coordinate of the warp to a bilinear kink
/// (an integer coordinate); finite differences are only trusted well inside.
pub fn kink_margin(h: usize, w: usize, p: &WarpParams) -> f64 {
    let fm = FrameMap::new(w, h);
    let hs = lie::pixel_homography(&lie::invert(p), &fm, 30);
    let mut m = f64::INFINITY;
    for v in 0..h {
        for u in 0..w {
            let [sx, sy] = hs.apply(u as f64, v as f64).unwrap();
            m = m.min((sx - sx.round()).abs()).min((sy - sy.round()).abs());
        }
    }
    m
}

pub fn dot(a: &Arr, b: &Arr) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
