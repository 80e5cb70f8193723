//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `STGAN_ACCEPTANCE_ONLY=1,3,8` runs a subset.

use nalgebra::{DMatrix, DVector, Matrix3};
use std::process::ExitCode;
use std::time::Instant;
use stgan::autodiff::{gradient_penalty, Graph, Tensor};
use stgan::baselines::{sdm_train_stage, HomNet, HomNetConfig, RidgeAccumulator};
use stgan::cubes::{CubesConfig, CubesDataset};
use stgan::eval::{evaluate, EvalConfig, Evaluation};
use stgan::lie::{self, FrameMap, WarpParams};
use stgan::nets::{bind, DiscriminatorNet, GeneratorStack, NetConfig, LEAKY_SLOPE};
use stgan::perturb::initial_warp_for;
use stgan::raster::{ForegroundLayer, Raster};
use stgan::train::{moving_average_update_norm, Control, MetricsRecord, Phase, StackView, TrainConfig, TrainData, Trainer};
use stgan::{model, par, warp};

mod common;
use common::{lcg, rel_err, Arr};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn frob(m: &Matrix3<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- 1

/// exp by scaling and squaring: Horner-evaluated Taylor polynomial of
/// `X / 2^s` with `‖X / 2^s‖₁ ≤ 1/4`, squared `s` times.
fn expm_oracle(x: &Matrix3<f64>) -> Matrix3<f64> {
    let norm1 = (0..3).map(|c| x.column(c).abs().sum()).fold(0.0, f64::max);
    let s = if norm1 > 0.25 { (norm1 / 0.25).log2().ceil() as i32 } else { 0 };
    let a = x / 2f64.powi(s);
    let mut e = Matrix3::identity();
    for k in (1..=18).rev() {
        e = Matrix3::identity() + a * e / k as f64;
    }
    for _ in 0..s {
        e *= e;
    }
    e
}

fn lie_suite() -> Outcome {
    let start = Instant::now();
    ensure(lie::exp_sl3(&WarpParams::ZERO, 20).0 == Matrix3::identity(), || "H(0) is not exactly I".into())?;
    let mut r = lcg(11);
    let frames = [FrameMap::new(32, 32), FrameMap::new(40, 30), FrameMap::new(160, 120), FrameMap::new(7, 3)];
    let (mut worst_det, mut worst_rel, mut worst_inv, mut worst_frame) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..1000 {
        // ‖p‖∞ ≤ 0.5, with every tenth draw pushed onto the boundary
        let mut p = WarpParams(std::array::from_fn(|_| r()));
        if i % 10 == 0 {
            let k = i / 10 % 8;
            p.0[k] = 0.5f64.copysign(p.0[k]);
        }
        let h = lie::exp_sl3(&p, 20);
        worst_det = worst_det.max((h.determinant() - 1.0).abs());
        let oracle = expm_oracle(&lie::generator_matrix(&p));
        worst_rel = worst_rel.max(frob(&(h.0 - oracle)) / frob(&oracle));

        let back = lie::exp_sl3(&lie::invert(&p), 20);
        worst_inv = worst_inv.max(frob(&(h.0 * back.0 - Matrix3::identity())));
        let inv = h.inverse().ok_or("singular homography")?;
        worst_inv = worst_inv.max(frob(&(inv.0 - back.0)) / frob(&back.0));

        let fm = frames[i % frames.len()];
        let round = lie::to_canonical_frame(&lie::to_image_frame(&h, &fm), &fm);
        worst_frame = worst_frame.max(frob(&(round.0 - h.0)) / frob(&h.0));
        let hp = lie::pixel_homography(&p, &fm, 20);
        for (u, v) in [(0.0, 0.0), (fm.width as f64 - 1.0, 0.0), (3.25, fm.height as f64 - 1.0)] {
            let [xc, yc] = fm.to_canonical(u, v);
            let [qx, qy] = h.apply(xc, yc).map_err(|e| e.to_string())?;
            let want = fm.to_pixel(qx, qy);
            let got = hp.apply(u, v).map_err(|e| e.to_string())?;
            let scale = want[0].abs().max(want[1].abs()).max(1.0);
            worst_frame = worst_frame.max((got[0] - want[0]).hypot(got[1] - want[1]) / scale);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "max |det-1| {worst_det:.1e}, max rel err vs oracle {worst_rel:.1e}, inverse {worst_inv:.1e}, frames {worst_frame:.1e}, {secs:.2} s"
    );
    ensure(worst_det <= 1e-6, || format!("determinant: {detail}"))?;
    ensure(worst_rel <= 1e-10, || format!("oracle agreement: {detail}"))?;
    ensure(worst_inv <= 1e-8 && worst_frame <= 1e-8, || format!("identities: {detail}"))?;
    ensure(secs < 10.0, || format!("too slow: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn raster_from(r: &mut impl FnMut() -> f64, h: usize, w: usize, c: usize) -> Raster {
    let data = (0..h * w * c).map(|_| (r() + 0.5) as f32).collect();
    Raster::new(h, w, c, data).unwrap()
}

/// Central differences of the f64 sampler against the sampler's own
/// adjoint, at coordinates kept away from integer kinks.
fn sampler_check(probes: usize) -> Result<f64, String> {
    let (h, w) = (16, 16);
    let mut r = lcg(21);
    let img = raster_from(&mut r, h, w, 3);
    let upstream = raster_from(&mut r, h, w, 3);
    let coords: Vec<[f64; 2]> = (0..h * w)
        .map(|_| {
            let off = |r: &mut dyn FnMut() -> f64| ((r() + 0.5) * 17.0).floor() - 1.0 + 0.05 + 0.9 * (r() + 0.5);
            [off(&mut r), off(&mut r)]
        })
        .collect();
    let grid = warp::SampleGrid::new(h, w, coords.clone()).map_err(|e| e.to_string())?;
    let img64 = Arr::from_f32(&[1, 3, h, w], &img.data);
    let loss = |img: &Arr, coords: &[[f64; 2]]| -> f64 {
        let mut s = 0.0;
        for c in 0..3 {
            for (i, [x, y]) in coords.iter().enumerate() {
                s += upstream.data[c * h * w + i] as f64 * common::bilinear(img, 0, c, *x, *y);
            }
        }
        s
    };
    let out = warp::bilinear_sample(&img, &grid);
    for c in 0..3 {
        for (i, [x, y]) in coords.iter().enumerate() {
            let want = common::bilinear(&img64, 0, c, *x, *y);
            let got = out.data[c * h * w + i] as f64;
            ensure((want - got).abs() < 1e-5, || format!("sample {c}/{i}: {got} vs {want}"))?;
        }
    }
    let (dimg, dgrid) = warp::bilinear_sample_vjp(&img, &grid, &upstream).map_err(|e| e.to_string())?;
    let eps = 1e-6;
    let mut worst = 0f64;
    for k in 0..probes {
        let (fd, an) = if k % 2 == 0 {
            let (i, axis) = (((r() + 0.5) * (h * w) as f64) as usize % (h * w), k / 2 % 2);
            let (mut a, mut b) = (coords.clone(), coords.clone());
            a[i][axis] += eps;
            b[i][axis] -= eps;
            ((loss(&img64, &a) - loss(&img64, &b)) / (2.0 * eps), dgrid[i][axis] as f64)
        } else {
            let i = ((r() + 0.5) * img64.data.len() as f64) as usize % img64.data.len();
            let (mut a, mut b) = (img64.clone(), img64.clone());
            a.data[i] += eps;
            b.data[i] -= eps;
            ((loss(&a, &coords) - loss(&b, &coords)) / (2.0 * eps), dimg.data[i] as f64)
        };
        let e = rel_err(fd, an, 1e-3);
        worst = worst.max(e);
        ensure(e < 1e-3, || format!("sampler probe {k}: fd {fd} analytic {an}"))?;
    }
    Ok(worst)
}

struct EndToEnd {
    fg: Tensor,
    bg: Tensor,
    p: Tensor,
    disc: DiscriminatorNet,
}

/// f64 reference of `mean D(composite(warp(fg, p), bg))`, plus the smallest
/// pre-activation magnitude seen.
fn reference_score(fg: &Arr, bg: &Arr, p: &WarpParams, disc: &[Arr]) -> (f64, f64) {
    let warped = common::warp(fg, &[*p]);
    let [n, _, h, w] = bg.shape;
    let mut x = bg.clone();
    for c in 0..3 {
        for y in 0..h {
            for u in 0..w {
                let m = warped.at(0, 3, y, u);
                let i = (c * h + y) * w + u;
                x.data[i] = warped.at(0, c, y, u) * m + bg.data[i] * (1.0 - m);
            }
        }
    }
    let layers = disc.len() / 2;
    let mut margin = f64::INFINITY;
    for d in 0..layers {
        x = common::bias(&common::conv(&x, &disc[2 * d], 2), &disc[2 * d + 1].data);
        if d + 1 < layers {
            margin = x.data.iter().fold(margin, |m, v| m.min(v.abs()));
            x = common::leaky(&x, LEAKY_SLOPE as f64);
        }
    }
    (x.data.iter().sum::<f64>() / (n * x.shape[2] * x.shape[3]) as f64, margin)
}

fn end_to_end_instance(seed: u64) -> EndToEnd {
    let (h, w) = (16, 16);
    let mut r = lcg(seed);
    let fg = Tensor::from_fn(&[1, 4, h, w], |_| (r() + 0.5) as f32);
    let bg = Tensor::from_fn(&[1, 3, h, w], |_| (r() + 0.5) as f32);
    let p = Tensor::from_fn(&[1, 8], |_| (0.2 * r()) as f32);
    let cfg = NetConfig {
        depth: 4,
        ..NetConfig::discriminator(h, w, 0.25)
    };
    let mut disc = DiscriminatorNet::new(cfg, seed).unwrap();
    for prm in &mut disc.params {
        let fan_in = if prm.value.shape().len() == 4 { prm.value.numel() / prm.value.shape()[0] } else { 4 };
        let scale = 2.0 / (fan_in as f64).sqrt();
        prm.value.data_mut().iter_mut().for_each(|v| *v = (scale * r()) as f32);
    }
    EndToEnd { fg, bg, p, disc }
}

fn end_to_end_check(probes: usize) -> Result<(f64, u64), String> {
    let (h, w) = (16, 16);
    let fm = FrameMap::new(w, h);
    let as_p = |t: &Tensor| WarpParams(std::array::from_fn(|i| t.data()[i] as f64));
    let to_arrs = |d: &DiscriminatorNet| -> Vec<Arr> { d.params.iter().map(|p| Arr::from_f32(p.value.shape(), p.value.data())).collect() };
    // an instance whose probes stay clear of bilinear and leaky kinks
    let (seed, inst) = (100..200)
        .map(|s| (s, end_to_end_instance(s)))
        .find(|(_, e)| {
            let fg = Arr::from_f32(e.fg.shape(), e.fg.data());
            let bg = Arr::from_f32(e.bg.shape(), e.bg.data());
            common::kink_margin(h, w, &as_p(&e.p)) > 1e-4 && reference_score(&fg, &bg, &as_p(&e.p), &to_arrs(&e.disc)).1 > 1e-4
        })
        .ok_or("no kink-free instance among 100 seeds")?;

    let mut g = Graph::new();
    let fgv = g.param(inst.fg.clone());
    let pv = g.param(inst.p.clone());
    let bgv = g.constant(inst.bg.clone());
    let dvars = bind(&mut g, &inst.disc.params, true);
    let x = stgan::train::composite_at(&mut g, fgv, pv, bgv, fm, 20).map_err(|e| e.to_string())?;
    let s = inst.disc.forward(&mut g, &dvars, x).map_err(|e| e.to_string())?;
    let out = g.sum_all(s);
    let mut wrt = vec![fgv, pv];
    wrt.extend(&dvars);
    let grads = g.grad(out, &wrt, false).map_err(|e| e.to_string())?;

    let fg64 = Arr::from_f32(inst.fg.shape(), inst.fg.data());
    let bg64 = Arr::from_f32(inst.bg.shape(), inst.bg.data());
    let p64 = as_p(&inst.p);
    let d64 = to_arrs(&inst.disc);
    let (value, _) = reference_score(&fg64, &bg64, &p64, &d64);
    ensure(rel_err(value, g.value(out).item() as f64, 1e-3) < 1e-4, || format!("forward {value} vs {}", g.value(out).item()))?;

    let eps = 1e-6;
    let mut r = lcg(31);
    let mut pick = |n: usize| ((r() + 0.5) * n as f64) as usize % n;
    let mut worst = 0f64;
    for k in 0..probes {
        let (fd, an) = match k % 3 {
            // every warp parameter, then random foreground and critic entries
            _ if k < 8 => {
                let (mut a, mut b) = (p64, p64);
                a.0[k] += eps;
                b.0[k] -= eps;
                let fd = (reference_score(&fg64, &bg64, &a, &d64).0 - reference_score(&fg64, &bg64, &b, &d64).0) / (2.0 * eps);
                (fd, g.value(grads[1]).data()[k] as f64)
            }
            0 => {
                let i = pick(fg64.data.len());
                let (mut a, mut b) = (fg64.clone(), fg64.clone());
                a.data[i] += eps;
                b.data[i] -= eps;
                let fd = (reference_score(&a, &bg64, &p64, &d64).0 - reference_score(&b, &bg64, &p64, &d64).0) / (2.0 * eps);
                (fd, g.value(grads[0]).data()[i] as f64)
            }
            _ => {
                let l = pick(d64.len());
                let i = pick(d64[l].data.len());
                let (mut a, mut b) = (d64.clone(), d64.clone());
                a[l].data[i] += eps;
                b[l].data[i] -= eps;
                let fd = (reference_score(&fg64, &bg64, &p64, &a).0 - reference_score(&fg64, &bg64, &p64, &b).0) / (2.0 * eps);
                (fd, g.value(grads[2 + l]).data()[i] as f64)
            }
        };
        let e = rel_err(fd, an, 1e-3);
        worst = worst.max(e);
        ensure(e < 1e-2, || format!("end-to-end probe {k}: fd {fd} analytic {an}"))?;
    }
    Ok((worst, seed))
}

fn differentiability_suite() -> Outcome {
    let start = Instant::now();
    let op = sampler_check(100)?;
    let (e2e, seed) = end_to_end_check(100)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("too slow: {secs:.1} s"))?;
    Ok(format!(
        "sampler worst rel err {op:.1e} (tol 1e-3), warp-composite-critic worst {e2e:.1e} (tol 1e-2, instance {seed}), 200 probes, {secs:.1} s"
    ))
}

// ---------------------------------------------------------------- 3

fn penalty_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0f64;
    // dense linear critic s = x·w
    let mut r = lcg(41);
    for target in [0.4, 1.0, 1.7] {
        let d = 12;
        let raw: Vec<f64> = (0..d).map(|_| r()).collect();
        let n0 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w: Vec<f32> = raw.iter().map(|v| (v * target / n0) as f32).collect();
        let w64: Vec<f64> = w.iter().map(|v| *v as f64).collect();
        let norm = w64.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[5, d], |_| r() as f32), true);
        let wv = g.param(Tensor::new(&[d, 1], w).unwrap());
        let s = g.matmul(x, wv, false, false).map_err(|e| e.to_string())?;
        let s = g.sum_all(s);
        let gp = gradient_penalty(&mut g, s, x).map_err(|e| e.to_string())?;
        let gw = g.grad(gp, &[wv], false).map_err(|e| e.to_string())?[0];
        worst = worst.max((g.value(gp).item() as f64 - (norm - 1.0).powi(2)).abs());
        for (k, an) in g.value(gw).data().iter().enumerate() {
            worst = worst.max((*an as f64 - 2.0 * (norm - 1.0) * w64[k] / norm).abs());
        }
    }
    // the critic network itself at depth 1: a single strided conv, then the patch mean
    let cfg = NetConfig {
        height: 8,
        width: 8,
        width_mult: 1.0,
        depth: 1,
    };
    let mut disc = DiscriminatorNet::new(cfg, 3).unwrap();
    disc.params[0].value.data_mut().iter_mut().for_each(|v| *v = (0.6 * r()) as f32);
    disc.params[1].value.data_mut()[0] = 0.3;
    let mut g = Graph::new();
    let x = g.input(Tensor::from_fn(&[3, 3, 8, 8], |_| r() as f32), true);
    let vars = bind(&mut g, &disc.params, true);
    let s = disc.forward(&mut g, &vars, x).map_err(|e| e.to_string())?;
    let s = g.sum_all(s);
    let gp = gradient_penalty(&mut g, s, x).map_err(|e| e.to_string())?;
    // the bias drops out of ∇ₓ s, so only the weight has a penalty gradient
    let gw = g.grad(gp, &vars[..1], false).map_err(|e| e.to_string())?[0];
    // ∇ₓ s = convᵀ(1/16, w) =: A w; penalty (‖A w‖ − 1)², gradient 2(‖v‖−1)/‖v‖ · Aᵀv
    let w64 = Arr::from_f32(disc.params[0].value.shape(), disc.params[0].value.data());
    let mut gy = Arr::zeros([1, 1, 4, 4]);
    gy.data.fill(1.0 / 16.0);
    let v = common::conv_t(&gy, &w64, [1, 3, 8, 8], 2);
    let nv = v.data.iter().map(|a| a * a).sum::<f64>().sqrt();
    worst = worst.max((g.value(gp).item() as f64 - (nv - 1.0).powi(2)).abs());
    for k in 0..w64.data.len() {
        let mut e = Arr::zeros(w64.shape);
        e.data[k] = 1.0;
        let atv = common::dot(&common::conv_t(&gy, &e, [1, 3, 8, 8], 2), &v);
        let want = 2.0 * (nv - 1.0) / nv * atv;
        worst = worst.max((g.value(gw).data()[k] as f64 - want).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max abs deviation {worst:.1e} (tol 1e-6, exact double backward), {secs:.2} s");
    ensure(worst <= 1e-6 && secs < 10.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 4

fn random_matrix(r: &mut impl FnMut() -> f64, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r())
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.row_mean();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - mean[j])
}

fn sdm_suite() -> Outcome {
    let start = Instant::now();
    let (m, d, k) = (400, 30, 8);
    let mut r = lcg(51);
    let f = random_matrix(&mut r, m, d);
    let w_true = random_matrix(&mut r, k, d);
    let b_true = DVector::from_fn(k, |_, _| r());
    let planted = DMatrix::from_fn(m, k, |i, j| (w_true.row(j) * f.row(i).transpose())[0] + b_true[j]);
    let fit = sdm_train_stage(&f, &planted, 0.0).map_err(|e| e.to_string())?;
    let recovered = (&fit.w - &w_true).amax().max((&fit.b - &b_true).amax());
    ensure(recovered <= 1e-6, || format!("planted model recovered to {recovered:.1e}"))?;

    // noisy targets: the normal equations of the centered ridge problem hold
    let noisy = &planted + random_matrix(&mut r, m, k) * 0.3;
    let (fc, yc) = (centered(&f), centered(&noisy));
    let mut worst_normal = 0f64;
    for lambda in [1e-3, 1.0, 50.0] {
        let fit = sdm_train_stage(&f, &noisy, lambda).map_err(|e| e.to_string())?;
        let gram = fc.transpose() * &fc;
        let lhs = (&gram + DMatrix::identity(d, d) * lambda) * fit.w.transpose();
        let rhs = fc.transpose() * &yc;
        let bound = 1e-10 * ((&gram).norm() * fit.w.norm() + rhs.norm() + lambda * fit.w.norm());
        worst_normal = worst_normal.max((&lhs - &rhs).norm() / bound * 1e-10);
        ensure((&lhs - &rhs).norm() <= bound, || format!("normal-equation residual {:.1e} at λ={lambda}", (&lhs - &rhs).norm()))?;
        // the ridge objective at the fit never exceeds the one at the planted model
        let objective = |w: &DMatrix<f64>, b: &DVector<f64>| {
            let pred = &f * w.transpose() + DMatrix::from_fn(m, k, |_, j| b[j]);
            (&noisy - pred).norm_squared() + lambda * w.norm_squared()
        };
        ensure(objective(&fit.w, &fit.b) <= objective(&w_true, &b_true), || format!("objective above the planted model at λ={lambda}"))?;
    }

    // ridge limits: λ → 0 is least squares, λ → ∞ is the mean predictor
    let ols = fc.clone().svd(true, true).solve(&yc, 1e-14).map_err(|e| e.to_string())?;
    let tiny = sdm_train_stage(&f, &noisy, 1e-10).map_err(|e| e.to_string())?;
    let ols_gap = (&tiny.w - ols.transpose()).amax();
    ensure(ols_gap <= 1e-6, || format!("λ→0 differs from least squares by {ols_gap:.1e}"))?;
    let huge = sdm_train_stage(&f, &noisy, 1e12).map_err(|e| e.to_string())?;
    let mean = noisy.row_mean().transpose();
    let (w_max, b_gap) = (huge.w.amax(), (&huge.b - &mean).amax());
    ensure(w_max <= 1e-6 && b_gap <= 1e-6, || format!("λ→∞: |W| {w_max:.1e}, |b − ȳ| {b_gap:.1e}"))?;

    // streaming in uneven chunks matches the one-shot fit
    let mut acc = RidgeAccumulator::new(d, k);
    let mut row = 0;
    while row < m {
        let n = 37.min(m - row);
        acc.push(&f.rows(row, n).into_owned(), &noisy.rows(row, n).into_owned()).map_err(|e| e.to_string())?;
        row += n;
    }
    let streamed = acc.solve(1.0).map_err(|e| e.to_string())?;
    let once = sdm_train_stage(&f, &noisy, 1.0).map_err(|e| e.to_string())?;
    let stream_gap = (&streamed.w - &once.w).amax().max((&streamed.b - &once.b).amax());
    ensure(stream_gap <= 1e-9, || format!("streamed fit differs by {stream_gap:.1e}"))?;

    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("too slow: {secs:.1} s"))?;
    Ok(format!(
        "planted {recovered:.1e}, λ→0 gap {ols_gap:.1e}, λ→∞ |W| {w_max:.1e} |b−ȳ| {b_gap:.1e}, streaming {stream_gap:.1e}, {secs:.2} s"
    ))
}

// ---------------------------------------------------------------- 5-8

struct Cubes {
    train: CubesDataset,
    test: CubesDataset,
    data: TrainData,
}

fn cubes_data() -> Result<Cubes, String> {
    let cfg = CubesConfig::default().perturbation_as_view_jitter();
    let train = CubesDataset::generate(&cfg, 1, 0, 2000).map_err(|e| e.to_string())?;
    let test = CubesDataset::generate(&cfg, 2, 0, 200).map_err(|e| e.to_string())?;
    let data = TrainData::from_cubes(&train).map_err(|e| e.to_string())?;
    Ok(Cubes { train, test, data })
}

fn stage_line(ev: &Evaluation) -> String {
    ev.report
        .stages
        .iter()
        .map(|s| format!("stage {} {:.3}", s.stage, s.median_aligned_error))
        .collect::<Vec<_>>()
        .join(", ")
}

fn cubes_training(cubes: &Cubes, stack_out: &mut Option<GeneratorStack>, info: &mut Vec<String>) -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        finetune_iters: 1000,
        eval_every: 0,
        ..TrainConfig::desk()
    };
    let (stages, iters) = (cfg.stages, cfg.iters_per_stage);
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let mut sequential: Option<GeneratorStack> = None;
    trainer
        .run(&cubes.data, None, &mut |t, rec| {
            if rec.iter % 1000 == 999 {
                eprintln!("  [5] iter {} {} d {:.4} dp {:?}", rec.iter + 1, rec.phase, rec.d_loss, rec.mean_update_norm);
            }
            if t.phase() == Phase::Finetune && sequential.is_none() {
                sequential = Some(t.stack.clone());
            }
            Control::Continue
        })
        .map_err(|e| e.to_string())?;
    let seq = sequential.ok_or("schedule skipped the fine-tuning phase")?;
    let ecfg = EvalConfig::default();
    let ev = evaluate(&StackView { stack: &seq, stages }, &cubes.test, &ecfg).map_err(|e| e.to_string())?;
    let ft = evaluate(&StackView { stack: &trainer.stack, stages }, &cubes.test, &ecfg).map_err(|e| e.to_string())?;
    info.push(format!(
        "with 1000 end-to-end fine-tuning iterations: {} (reduction {:.1}%)",
        stage_line(&ft),
        100.0 * ft.report.median_aligned_reduction()
    ));
    *stack_out = Some(seq);
    let reduction = ev.report.median_aligned_reduction();
    let (s1, s2) = (ev.report.stage(1).median_aligned_error, ev.report.stage(2).median_aligned_error);
    let detail = format!(
        "{} train / {} test at 32x32, N={stages}, {iters} iters/stage: {} (reduction {:.1}%, need >= 40% and stage 2 <= stage 1), {:.0} s",
        cubes.train.len(),
        cubes.test.len(),
        stage_line(&ev),
        100.0 * reduction,
        start.elapsed().as_secs_f64()
    );
    ensure(reduction >= 0.4 && s2 <= s1, || detail.clone())?;
    Ok(detail)
}

fn baseline_regressor(cubes: &Cubes) -> Outcome {
    let start = Instant::now();
    let cfg = HomNetConfig::default();
    let iters = cfg.iters;
    let data = TrainData::reference_from_cubes(&cubes.train).map_err(|e| e.to_string())?;
    let mut net = HomNet::new(cfg).map_err(|e| e.to_string())?;
    net.train(&data, &mut |_, _, _| true).map_err(|e| e.to_string())?;
    let ev = evaluate(&net, &cubes.test, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let detail = format!(
        "direct regressor, {iters} iters: {} (reduction {:.1}%, need > 0), {:.0} s",
        stage_line(&ev),
        100.0 * ev.report.median_aligned_reduction(),
        start.elapsed().as_secs_f64()
    );
    ensure(ev.report.median_aligned_reduction() > 0.0, || detail.clone())?;
    Ok(detail)
}

fn trust_region(cubes: &Cubes) -> Outcome {
    let start = Instant::now();
    let iters = 300;
    let mut norms = Vec::new();
    for lambda_update in [0.1, 10.0] {
        let cfg = TrainConfig {
            stages: 1,
            iters_per_stage: iters,
            lambda_update,
            eval_every: 0,
            ..TrainConfig::desk()
        };
        let window = cfg.moving_average_window;
        let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
        let recs = trainer.train_stage(&cubes.data, 0).map_err(|e| e.to_string())?;
        norms.push(moving_average_update_norm(&recs, window).ok_or("no update norms recorded")?);
    }
    let detail = format!(
        "{iters} iters, mean |dp| over the last 100: {:.4} at λ=0.1, {:.4} at λ=10, {:.0} s",
        norms[0],
        norms[1],
        start.elapsed().as_secs_f64()
    );
    ensure(norms[1] < norms[0], || detail.clone())?;
    Ok(detail)
}

fn high_res_transfer(stack: Option<&GeneratorStack>) -> Outcome {
    let start = Instant::now();
    let fresh;
    let (stack, source) = match stack {
        Some(s) => (s, "trained stack"),
        None => {
            fresh = Trainer::new(TrainConfig::desk()).map_err(|e| e.to_string())?.stack;
            (&fresh, "untrained stack")
        }
    };
    let view = StackView { stack, stages: stack.stages() };
    let cfg = CubesConfig::with_resolution(64, 64).perturbation_as_view_jitter();
    let hr = CubesDataset::generate(&cfg, 3, 0, 20).map_err(|e| e.to_string())?;
    let (fm_lo, fm_hi) = (FrameMap::new(32, 32), FrameMap::new(64, 64));
    let ecfg = EvalConfig::default();
    let mut diffs = Vec::new();
    for (i, s) in hr.samples.iter().enumerate() {
        let pool = |r: &Raster| warp::avg_pool(r, 2).map_err(|e| e.to_string());
        let fg = ForegroundLayer::new(pool(&s.fg.color)?, pool(&s.fg.mask)?).map_err(|e| e.to_string())?;
        let bg = pool(&s.bg)?;
        let p0 = initial_warp_for(&ecfg.perturbation, ecfg.seed, i);
        let states = model::warp_chain(&view, (32, 32), &fg, &bg, p0, None).map_err(|e| e.to_string())?;
        let p = *states.last().unwrap();
        let low = warp::composite(&warp::warp_foreground(&fg, &p, &fm_lo).map_err(|e| e.to_string())?, &bg).map_err(|e| e.to_string())?;
        let high = warp::composite(&warp::warp_foreground(&s.fg, &p, &fm_hi).map_err(|e| e.to_string())?, &s.bg).map_err(|e| e.to_string())?;
        diffs.push(high.mean_abs_diff(&low.resize(64, 64)));
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let max = diffs.iter().cloned().fold(0.0, f64::max);
    let detail = format!(
        "{source}, {} samples at 64x64 vs upsampled 32x32: mean abs diff {mean:.4} (max {max:.4}, need < 0.02), {:.1} s",
        diffs.len(),
        start.elapsed().as_secs_f64()
    );
    ensure(mean < 0.02, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn tiny_config() -> TrainConfig {
    TrainConfig {
        height: 16,
        width: 16,
        stages: 2,
        iters_per_stage: 6,
        batch_size: 4,
        n_critic: 2,
        generator_depth: 4,
        discriminator_depth: 4,
        pretrain_iters: 2,
        finetune_iters: 3,
        eval_every: 0,
        ..TrainConfig::desk()
    }
}

fn curve(recs: &[MetricsRecord]) -> Vec<[u64; 4]> {
    let bits = |v: Option<f64>| v.map_or(u64::MAX, f64::to_bits);
    recs.iter()
        .map(|r| [r.d_loss.to_bits(), bits(r.g_loss), r.gp.to_bits(), bits(r.mean_update_norm)])
        .collect()
}

fn run_to_end(t: &mut Trainer, data: &TrainData, stop_at: Option<usize>) -> Result<Vec<MetricsRecord>, String> {
    let mut recs = Vec::new();
    while t.phase() != Phase::Done && stop_at.is_none_or(|n| t.global_iter() < n) {
        recs.push(t.step(data).map_err(|e| e.to_string())?);
    }
    Ok(recs)
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let cfg16 = CubesConfig::with_resolution(16, 16).perturbation_as_view_jitter();
    let ds = CubesDataset::generate(&cfg16, 4, 0, 8).map_err(|e| e.to_string())?;
    let data = TrainData::from_cubes(&ds).map_err(|e| e.to_string())?;
    let bytes = |t: &Trainer| t.to_checkpoint().and_then(|c| Ok(c.to_bytes()?)).map_err(|e| e.to_string());

    let (a_recs, a_bytes, b_recs, b_bytes) = par::sequential(|| -> Result<_, String> {
        let mut a = Trainer::new(tiny_config()).map_err(|e| e.to_string())?;
        let a_recs = run_to_end(&mut a, &data, None)?;
        let mut b = Trainer::new(tiny_config()).map_err(|e| e.to_string())?;
        let b_recs = run_to_end(&mut b, &data, None)?;
        Ok((a_recs, bytes(&a)?, b_recs, bytes(&b)?))
    })?;
    ensure(curve(&a_recs) == curve(&b_recs), || "retrain loss curves differ".into())?;
    ensure(a_bytes == b_bytes, || "retrain checkpoints differ".into())?;

    // interrupted mid-stage, saved, reloaded and continued
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("resume.ckpt");
    let (c_recs, c_bytes) = par::sequential(|| -> Result<_, String> {
        let mut c = Trainer::new(tiny_config()).map_err(|e| e.to_string())?;
        let mut recs = run_to_end(&mut c, &data, Some(7))?;
        c.save(&path).map_err(|e| e.to_string())?;
        drop(c);
        let mut c = Trainer::load(&path).map_err(|e| e.to_string())?;
        recs.extend(run_to_end(&mut c, &data, None)?);
        Ok((recs, bytes(&c)?))
    })?;
    ensure(curve(&c_recs) == curve(&a_recs), || "resumed loss curve differs".into())?;
    ensure(c_bytes == a_bytes, || "resumed checkpoint differs".into())?;

    // the parallel kernels give the same bits as the sequential fallback
    let mut p = Trainer::new(tiny_config()).map_err(|e| e.to_string())?;
    let p_recs = run_to_end(&mut p, &data, None)?;
    ensure(curve(&p_recs) == curve(&a_recs) && bytes(&p)? == a_bytes, || "parallel run differs from sequential".into())?;

    Ok(format!(
        "{} iterations: retrain, resume at iteration 7 and parallel run all bit-identical ({} checkpoint bytes), {:.1} s",
        a_recs.len(),
        a_bytes.len(),
        start.elapsed().as_secs_f64()
    ))
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, outcome: &Outcome, info: &[String]) -> bool {
    match outcome {
        Ok(d) => println!("criterion {n} {name}: PASS  {d}"),
        Err(d) => println!("criterion {n} {name}: FAIL  {d}"),
    }
    for line in info {
        println!("    {line}");
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("STGAN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let want = |n: usize| only.as_ref().is_none_or(|v| v.contains(&n));
    let mut ok = true;

    if want(1) {
        ok &= report(1, "lie algebra", &lie_suite(), &[]);
    }
    if want(2) {
        ok &= report(2, "differentiability", &differentiability_suite(), &[]);
    }
    if want(3) {
        ok &= report(3, "gradient penalty", &penalty_suite(), &[]);
    }
    if want(4) {
        ok &= report(4, "ridge cascade", &sdm_suite(), &[]);
    }
    let mut stack = None;
    if want(5) || want(6) || want(7) {
        match cubes_data() {
            Ok(cubes) => {
                if want(5) {
                    let mut info = Vec::new();
                    let out = cubes_training(&cubes, &mut stack, &mut info);
                    ok &= report(5, "cubes training", &out, &info);
                }
                if want(6) {
                    ok &= report(6, "direct regressor", &baseline_regressor(&cubes), &[]);
                }
                if want(7) {
                    ok &= report(7, "trust region", &trust_region(&cubes), &[]);
                }
            }
            Err(e) => {
                for n in [5, 6, 7].into_iter().filter(|n| want(*n)) {
                    ok &= report(n, "cubes data", &Err(e.clone()), &[]);
                }
            }
        }
    }
    if want(8) {
        ok &= report(8, "high-res transfer", &high_res_transfer(stack.as_ref()), &[]);
    }
    if want(9) {
        ok &= report(9, "determinism", &determinism(), &[]);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
