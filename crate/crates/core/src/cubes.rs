//! Synthetic cube-in-a-room scenes.
//!
//! A random axis-aligned cube floats inside a box room. The background is
//! the empty room seen from a fixed camera, the foreground is the cube seen
//! from a randomly perturbed copy of that camera, and the real image is the
//! cube composited from the unperturbed camera.

use crate::par;
use crate::raster::{ForegroundLayer, Raster, RasterError};
use crate::warp;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

const NEAR: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum CubesError {
    #[error("no cube placement satisfies the margins")]
    InfeasiblePlacement,
    #[error("no visible sample after {0} attempts")]
    RetryExhausted(usize),
    #[error("cube is not fully visible")]
    CubeNotVisible,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    /// Vertical field of view in radians.
    pub vfov: f64,
}

impl CameraSpec {
    /// World-to-camera rotation. At zero angles the camera looks along +z
    /// with +y up; camera axes are x right, y down, z forward.
    pub fn rotation(&self) -> Matrix3<f64> {
        let base = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let (sr, cr) = self.roll.sin_cos();
        let yaw = Matrix3::new(cy, 0.0, -sy, 0.0, 1.0, 0.0, sy, 0.0, cy);
        let pitch = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
        let roll = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
        roll * pitch * yaw * base
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (p - Vector3::from(self.position))
    }

    /// Focal length in pixels for an image `height` rows tall.
    pub fn focal(&self, height: usize) -> f64 {
        height as f64 / 2.0 / (self.vfov / 2.0).tan()
    }
}

/// Pinhole projection with pixel centers at integer coordinates.
#[derive(Debug, Clone, Copy)]
struct Projector {
    r: Matrix3<f64>,
    c: Vector3<f64>,
    f: f64,
    cx: f64,
    cy: f64,
}

impl Projector {
    fn new(cam: &CameraSpec, height: usize, width: usize) -> Self {
        Projector {
            r: cam.rotation(),
            c: Vector3::from(cam.position),
            f: cam.focal(height),
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    fn camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * (p - self.c)
    }

    fn image(&self, q: &Vector3<f64>) -> [f64; 2] {
        [self.f * q.x / q.z + self.cx, self.f * q.y / q.z + self.cy]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Room extent; the room spans `[0, room[i]]` on each axis.
    pub room: [f64; 3],
    pub cube_center: [f64; 3],
    pub cube_side: f64,
    pub cube_colors: [[f32; 3]; 6],
    pub room_colors: [[f32; 3]; 6],
}

impl SceneSpec {
    pub fn cube_corners(&self) -> [Vector3<f64>; 8] {
        let h = self.cube_side / 2.0;
        let c = Vector3::from(self.cube_center);
        std::array::from_fn(|i| {
            let sx = if i & 1 == 0 { -h } else { h };
            let sy = if i & 2 == 0 { -h } else { h };
            let sz = if i & 4 == 0 { -h } else { h };
            c + Vector3::new(sx, sy, sz)
        })
    }
}

/// Uniform half-ranges of a camera perturbation: metres per axis, radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CameraRanges {
    pub position: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl CameraRanges {
    pub const ZERO: CameraRanges = CameraRanges {
        position: 0.0,
        yaw: 0.0,
        pitch: 0.0,
        roll: 0.0,
    };

    fn is_valid(&self) -> bool {
        [self.position, self.yaw, self.pitch, self.roll].iter().all(|r| *r >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubesConfig {
    pub height: usize,
    pub width: usize,
    pub room: [f64; 3],
    pub side_range: [f64; 2],
    pub margin: f64,
    pub base_camera: CameraSpec,
    /// Perturbation of the foreground camera only; the source of misalignment.
    pub perturbation: CameraRanges,
    /// Per-sample jitter of the base camera, shared by all three views.
    #[serde(default)]
    pub view_jitter: CameraRanges,
    pub retry_limit: usize,
    pub mask_fraction: [f64; 2],
    pub supersample: usize,
}

impl Default for CubesConfig {
    fn default() -> Self {
        CubesConfig {
            height: 32,
            width: 32,
            room: [4.0, 3.0, 4.0],
            side_range: [0.6, 1.0],
            margin: 0.05,
            base_camera: CameraSpec {
                position: [2.0, 1.5, 0.25],
                yaw: 0.0,
                pitch: 0.0,
                roll: 0.0,
                vfov: 60f64.to_radians(),
            },
            perturbation: CameraRanges {
                position: 0.4,
                yaw: 10f64.to_radians(),
                pitch: 10f64.to_radians(),
                roll: 5f64.to_radians(),
            },
            view_jitter: CameraRanges::ZERO,
            retry_limit: 100,
            mask_fraction: [0.02, 0.6],
            supersample: 2,
        }
    }
}

impl CubesConfig {
    pub fn with_resolution(height: usize, width: usize) -> Self {
        CubesConfig {
            height,
            width,
            ..Default::default()
        }
    }

    pub fn without_camera_perturbation(mut self) -> Self {
        self.perturbation = CameraRanges::ZERO;
        self
    }

    /// Turns the camera perturbation into viewpoint diversity: every view
    /// of a sample shares one jittered camera, so only `p0` misaligns.
    pub fn perturbation_as_view_jitter(mut self) -> Self {
        self.view_jitter = self.perturbation;
        self.perturbation = CameraRanges::ZERO;
        self
    }

    fn validate(&self) -> Result<(), CubesError> {
        if self.height == 0 || self.width == 0 || self.supersample == 0 {
            return Err(CubesError::InvalidConfig("empty resolution".into()));
        }
        let [lo, hi] = self.side_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(CubesError::InvalidConfig("side range must be positive and ordered".into()));
        }
        let ranges = [self.perturbation, self.view_jitter];
        if ranges.iter().any(|r| !r.is_valid()) || self.margin < 0.0 {
            return Err(CubesError::InvalidConfig("ranges must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn sample_scene(cfg: &CubesConfig, rng: &mut impl Rng) -> Result<SceneSpec, CubesError> {
    let [lo, hi] = cfg.side_range;
    let side = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let reach = side / 2.0 + cfg.margin;
    let mut center = [0.0; 3];
    for (i, c) in center.iter_mut().enumerate() {
        let (a, b) = (reach, cfg.room[i] - reach);
        if a >= b {
            return Err(CubesError::InfeasiblePlacement);
        }
        *c = rng.random_range(a..b);
    }
    let mut color = || -> [f32; 3] { std::array::from_fn(|_| rng.random::<f32>()) };
    let cube_colors = std::array::from_fn(|_| color());
    let room_colors = std::array::from_fn(|_| color());
    Ok(SceneSpec {
        room: cfg.room,
        cube_center: center,
        cube_side: side,
        cube_colors,
        room_colors,
    })
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..half)
    } else {
        0.0
    }
}

/// Uniformly perturbs all six camera degrees of freedom, keeping the camera
/// strictly inside the room.
pub fn perturb_camera(cam: &CameraSpec, ranges: &CameraRanges, cfg: &CubesConfig, rng: &mut impl Rng) -> Result<CameraSpec, CubesError> {
    if *ranges == CameraRanges::ZERO {
        return Ok(*cam);
    }
    for _ in 0..cfg.retry_limit.max(1) {
        let mut out = *cam;
        for p in out.position.iter_mut() {
            *p += symmetric(rng, ranges.position);
        }
        out.yaw += symmetric(rng, ranges.yaw);
        out.pitch += symmetric(rng, ranges.pitch);
        out.roll += symmetric(rng, ranges.roll);
        let inside = out.position.iter().zip(&cfg.room).all(|(p, r)| *p > NEAR && *p < r - NEAR);
        if inside {
            return Ok(out);
        }
    }
    Err(CubesError::RetryExhausted(cfg.retry_limit))
}

/// Projected cube corners (pixel coordinates) in the given camera.
pub fn project_corners(scene: &SceneSpec, cam: &CameraSpec, height: usize, width: usize) -> Result<[[f64; 2]; 8], CubesError> {
    let pr = Projector::new(cam, height, width);
    let corners = scene.cube_corners();
    let mut out = [[0.0; 2]; 8];
    for (o, c) in out.iter_mut().zip(&corners) {
        let q = pr.camera(c);
        if q.z <= NEAR {
            return Err(CubesError::CubeNotVisible);
        }
        *o = pr.image(&q);
    }
    Ok(out)
}

struct Face {
    verts: [Vector3<f64>; 4],
    color: [f32; 3],
}

fn cube_faces(scene: &SceneSpec) -> Vec<(Face, Vector3<f64>)> {
    let c = scene.cube_corners();
    // corner index bits: x = 1, y = 2, z = 4; each face listed as a loop
    let quads: [([usize; 4], [f64; 3]); 6] = [
        ([0, 2, 6, 4], [-1.0, 0.0, 0.0]),
        ([1, 5, 7, 3], [1.0, 0.0, 0.0]),
        ([0, 4, 5, 1], [0.0, -1.0, 0.0]),
        ([2, 3, 7, 6], [0.0, 1.0, 0.0]),
        ([0, 1, 3, 2], [0.0, 0.0, -1.0]),
        ([4, 6, 7, 5], [0.0, 0.0, 1.0]),
    ];
    quads
        .iter()
        .enumerate()
        .map(|(i, (q, n))| {
            (
                Face {
                    verts: q.map(|k| c[k]),
                    color: scene.cube_colors[i],
                },
                Vector3::from(*n),
            )
        })
        .collect()
}

fn room_faces(scene: &SceneSpec) -> Vec<Face> {
    let [x, y, z] = scene.room;
    let v = |a: f64, b: f64, c: f64| Vector3::new(a, b, c);
    let quads = [
        [v(0.0, 0.0, 0.0), v(0.0, y, 0.0), v(0.0, y, z), v(0.0, 0.0, z)],
        [v(x, 0.0, 0.0), v(x, 0.0, z), v(x, y, z), v(x, y, 0.0)],
        [v(0.0, 0.0, 0.0), v(0.0, 0.0, z), v(x, 0.0, z), v(x, 0.0, 0.0)],
        [v(0.0, y, 0.0), v(x, y, 0.0), v(x, y, z), v(0.0, y, z)],
        [v(0.0, 0.0, 0.0), v(x, 0.0, 0.0), v(x, y, 0.0), v(0.0, y, 0.0)],
        [v(0.0, 0.0, z), v(0.0, y, z), v(x, y, z), v(x, 0.0, z)],
    ];
    quads
        .into_iter()
        .enumerate()
        .map(|(i, verts)| Face {
            verts,
            color: scene.room_colors[i],
        })
        .collect()
}

/// Clips a camera-space polygon against the near plane.
fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ina, inb) = (a.z > NEAR, b.z > NEAR);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

/// Planar RGB plus coverage at the supersampled resolution.
struct Canvas {
    h: usize,
    w: usize,
    color: Vec<[f32; 3]>,
    cover: Vec<bool>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas {
            h,
            w,
            color: vec![[0.0; 3]; h * w],
            cover: vec![false; h * w],
        }
    }

    /// Fills a convex polygon, testing pixel centers inclusively.
    fn fill(&mut self, pts: &[[f64; 2]], color: [f32; 3]) {
        if pts.len() < 3 {
            return;
        }
        let area: f64 = (0..pts.len())
            .map(|i| {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum();
        if area.abs() < 1e-12 {
            return;
        }
        let sign = area.signum();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let clampi = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0) as usize;
        if x1 < 0.0 || y1 < 0.0 || x0 > (self.w - 1) as f64 || y0 > (self.h - 1) as f64 {
            return;
        }
        let (xa, xb) = (clampi(x0.ceil(), self.w), clampi(x1.floor(), self.w));
        let (ya, yb) = (clampi(y0.ceil(), self.h), clampi(y1.floor(), self.h));
        for y in ya..=yb {
            for x in xa..=xb {
                let (px, py) = (x as f64, y as f64);
                let inside = (0..pts.len()).all(|i| {
                    let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                    sign * ((b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])) >= 0.0
                });
                if inside {
                    self.color[y * self.w + x] = color;
                    self.cover[y * self.w + x] = true;
                }
            }
        }
    }

    fn draw(&mut self, pr: &Projector, face: &Face) {
        let cam: Vec<Vector3<f64>> = face.verts.iter().map(|v| pr.camera(v)).collect();
        let clipped = clip_near(&cam);
        let pts: Vec<[f64; 2]> = clipped.iter().map(|q| pr.image(q)).collect();
        self.fill(&pts, face.color);
    }

    /// Box-downsamples by `f`: returns premultiplied-then-normalized color
    /// and fractional coverage.
    fn downsample(&self, f: usize) -> (Raster, Raster) {
        let (h, w) = (self.h / f, self.w / f);
        let mut color = Raster::zeros(h, w, 3);
        let mut mask = Raster::zeros(h, w, 1);
        let n = (f * f) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                let mut cov = 0f32;
                for dy in 0..f {
                    for dx in 0..f {
                        let i = (y * f + dy) * self.w + x * f + dx;
                        if self.cover[i] {
                            cov += 1.0;
                            for c in 0..3 {
                                acc[c] += self.color[i][c];
                            }
                        }
                    }
                }
                mask.set(0, y, x, cov / n);
                if cov > 0.0 {
                    for c in 0..3 {
                        color.set(c, y, x, acc[c] / cov);
                    }
                }
            }
        }
        (color, mask)
    }
}

/// Renders the cube alone: color and anti-aliased coverage.
pub fn render_foreground(scene: &SceneSpec, cam: &CameraSpec, cfg: &CubesConfig) -> ForegroundLayer {
    let f = cfg.supersample;
    let (h, w) = (cfg.height * f, cfg.width * f);
    let pr = Projector::new(cam, h, w);
    let mut canvas = Canvas::new(h, w);
    let eye = Vector3::from(cam.position);
    for (face, normal) in cube_faces(scene) {
        let center = face.verts.iter().sum::<Vector3<f64>>() / 4.0;
        if normal.dot(&(eye - center)) > 0.0 {
            canvas.draw(&pr, &face);
        }
    }
    let (color, mask) = canvas.downsample(f);
    ForegroundLayer::new(color, mask).expect("consistent sizes")
}

/// Renders the empty room.
pub fn render_background(scene: &SceneSpec, cam: &CameraSpec, cfg: &CubesConfig) -> Raster {
    let f = cfg.supersample;
    let (h, w) = (cfg.height * f, cfg.width * f);
    let pr = Projector::new(cam, h, w);
    let mut canvas = Canvas::new(h, w);
    let eye = Vector3::from(cam.position);
    let mut faces = room_faces(scene);
    // far to near by face-center distance
    faces.sort_by(|a, b| {
        let da = (a.verts.iter().sum::<Vector3<f64>>() / 4.0 - eye).norm();
        let db = (b.verts.iter().sum::<Vector3<f64>>() / 4.0 - eye).norm();
        db.total_cmp(&da)
    });
    for face in &faces {
        canvas.draw(&pr, face);
    }
    canvas.downsample(f).0
}

/// One training pair plus its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeSample {
    pub fg: ForegroundLayer,
    pub bg: Raster,
    pub real: Raster,
    /// Cube coverage from the unperturbed camera.
    pub gt_mask: Raster,
    /// Cube corners in the foreground image.
    pub fg_corners: [[f64; 2]; 8],
    /// Cube corners from the unperturbed camera.
    pub gt_corners: [[f64; 2]; 8],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub scene: SceneSpec,
    pub camera: CameraSpec,
    pub perturbed_camera: CameraSpec,
    pub fg_corners: [[f64; 2]; 8],
    pub gt_corners: [[f64; 2]; 8],
    pub mask_fraction: f64,
    pub attempts: usize,
}

fn corners_inside(c: &[[f64; 2]; 8], h: usize, w: usize) -> bool {
    c.iter()
        .all(|p| p[0] >= -0.5 && p[1] >= -0.5 && p[0] <= w as f64 - 0.5 && p[1] <= h as f64 - 0.5)
}

fn mask_fraction(m: &Raster) -> f64 {
    m.data.iter().map(|v| *v as f64).sum::<f64>() / m.data.len() as f64
}

/// Renders the pair for sample `index` of the stream seeded with `seed`.
pub fn generate_sample(cfg: &CubesConfig, seed: u64, index: usize) -> Result<(CubeSample, SampleMeta), CubesError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (h, w) = (cfg.height, cfg.width);
    for attempt in 1..=cfg.retry_limit.max(1) {
        let scene = sample_scene(cfg, &mut rng)?;
        let cam = perturb_camera(&cfg.base_camera, &cfg.view_jitter, cfg, &mut rng)?;
        let pert = perturb_camera(&cam, &cfg.perturbation, cfg, &mut rng)?;
        let (Ok(gt), Ok(fgc)) = (project_corners(&scene, &cam, h, w), project_corners(&scene, &pert, h, w)) else {
            continue;
        };
        if !corners_inside(&gt, h, w) || !corners_inside(&fgc, h, w) {
            continue;
        }
        let fg = render_foreground(&scene, &pert, cfg);
        let orig = render_foreground(&scene, &cam, cfg);
        let [lo, hi] = cfg.mask_fraction;
        let (ff, fo) = (mask_fraction(&fg.mask), mask_fraction(&orig.mask));
        if !(ff >= lo && ff <= hi && fo >= lo && fo <= hi) {
            continue;
        }
        let bg = render_background(&scene, &cam, cfg);
        let real = warp::composite(&orig, &bg).expect("same sizes");
        let meta = SampleMeta {
            index,
            scene,
            camera: cam,
            perturbed_camera: pert,
            fg_corners: fgc,
            gt_corners: gt,
            mask_fraction: ff,
            attempts: attempt,
        };
        let sample = CubeSample {
            fg,
            bg,
            real,
            gt_mask: orig.mask,
            fg_corners: fgc,
            gt_corners: gt,
        };
        return Ok((sample, meta));
    }
    Err(CubesError::RetryExhausted(cfg.retry_limit))
}

/// In-memory dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CubesDataset {
    pub samples: Vec<CubeSample>,
    pub meta: Vec<SampleMeta>,
}

impl CubeSample {
    /// The realistic foreground: the cube as the unperturbed camera sees it,
    /// recovered from `real` by undoing the composite. Zero color where
    /// uncovered, like a rendered layer. Self-supervised baselines perturb
    /// this layer and regress back.
    pub fn reference_layer(&self) -> ForegroundLayer {
        let n = self.real.plane_len();
        let mut color = Raster::zeros(self.real.height, self.real.width, 3);
        for c in 0..3 {
            let (real, bg) = (self.real.plane(c), self.bg.plane(c));
            let dst = color.plane_mut(c);
            for i in 0..n {
                let m = self.gt_mask.data[i];
                if m > 0.0 {
                    dst[i] = ((real[i] - (1.0 - m) * bg[i]) / m).clamp(0.0, 1.0);
                }
            }
        }
        ForegroundLayer {
            color,
            mask: self.gt_mask.clone(),
        }
    }
}

impl CubesDataset {
    /// Samples `first..first + n` of the stream, rendered in parallel.
    pub fn generate(cfg: &CubesConfig, seed: u64, first: usize, n: usize) -> Result<Self, CubesError> {
        let results = par::map_indexed(n, |i| generate_sample(cfg, seed, first + i));
        let mut ds = CubesDataset::default();
        for r in results {
            let (s, m) = r?;
            ds.samples.push(s);
            ds.meta.push(m);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.bg.height, s.bg.width))
    }

    /// Splits off the last `n` samples.
    pub fn split_off(&mut self, n: usize) -> CubesDataset {
        let at = self.samples.len().saturating_sub(n);
        CubesDataset {
            samples: self.samples.split_off(at),
            meta: self.meta.split_off(at),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CubesError> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
        for (s, m) in self.samples.iter().zip(&self.meta) {
            let stem = format!("{:06}", m.index);
            s.fg.to_rgba().write_png(&dir.join(format!("{stem}_fg.png")))?;
            s.bg.write_png(&dir.join(format!("{stem}_bg.png")))?;
            s.real.write_png(&dir.join(format!("{stem}_real.png")))?;
            s.gt_mask.write_png(&dir.join(format!("{stem}_mask.png")))?;
            serde_json::to_writer(&mut manifest, m)?;
            manifest.write_all(b"\n")?;
        }
        manifest.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CubesError> {
        let file = std::fs::File::open(dir.join("manifest.jsonl"))?;
        let mut ds = CubesDataset::default();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: SampleMeta = serde_json::from_str(&line)
                .map_err(|e| CubesError::Dataset(format!("manifest line {}: {e}", lineno + 1)))?;
            let path = |kind: &str| -> PathBuf { dir.join(format!("{:06}_{kind}.png", m.index)) };
            let fg = ForegroundLayer::from_rgba(&Raster::read_png(&path("fg"))?)?;
            let bg = Raster::read_png(&path("bg"))?;
            let real = Raster::read_png(&path("real"))?;
            let gt_mask = Raster::read_png(&path("mask"))?;
            if !fg.color.same_size(&bg) || !bg.same_size(&real) || bg.channels != 3 {
                return Err(CubesError::Dataset(format!("sample {} has inconsistent images", m.index)));
            }
            ds.samples.push(CubeSample {
                fg,
                bg,
                real,
                gt_mask,
                fg_corners: m.fg_corners,
                gt_corners: m.gt_corners,
            });
            ds.meta.push(m);
        }
        Ok(ds)
    }
}

/// Renders `n` samples and writes them to `dir`.
pub fn make_dataset(n: usize, cfg: &CubesConfig, seed: u64, dir: &Path) -> Result<CubesDataset, CubesError> {
    let ds = CubesDataset::generate(cfg, seed, 0, n)?;
    ds.write(dir)?;
    Ok(ds)
}
