//! Subcommand implementations.

use anyhow::{bail, Context, Result};
use std::io::Write;
use std::path::{Path, PathBuf};
use stgan::baselines::{sdm_train, HomNet, HomNetConfig, SdmConfig};
use stgan::cubes::{self, CubesConfig, CubesDataset};
use stgan::eval::{evaluate, EvalConfig, WarpPredictor};
use stgan::lie::{FrameMap, WarpParams};
use stgan::model::{pixel_homographies, warp_chain, Model};
use stgan::raster::{ForegroundLayer, Raster};
use stgan::train::{parse_config, Control, TrainConfig, TrainData, Trainer};
use stgan::warp;

/// Parses `HxW`, e.g. `30x40`.
pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

/// Parses eight comma-separated reals.
pub fn parse_params(s: &str) -> Result<[f64; 8], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number {t:?}")))
        .collect::<Result<_, _>>()?;
    <[f64; 8]>::try_from(v).map_err(|v| format!("expected 8 values, got {}", v.len()))
}

pub fn gen_cubes(n: usize, resolution: (usize, usize), seed: u64, view_jitter: bool, out: &Path) -> Result<()> {
    let mut cfg = CubesConfig::with_resolution(resolution.0, resolution.1);
    if view_jitter {
        cfg = cfg.perturbation_as_view_jitter();
    }
    let ds = cubes::make_dataset(n, &cfg, seed, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    eprintln!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn load_data(dir: &Path) -> Result<CubesDataset> {
    let ds = CubesDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if ds.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    Ok(ds)
}

fn check_resolution(ds: &CubesDataset, want: (usize, usize), what: &str) -> Result<()> {
    match ds.resolution() {
        Some(r) if r == want => Ok(()),
        Some((h, w)) => bail!("dataset is {h}x{w} but the {what} expects {}x{}", want.0, want.1),
        None => bail!("dataset is empty"),
    }
}

fn read_config_text(path: Option<&Path>) -> Result<Option<String>> {
    path.map(|p| std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())))
        .transpose()
}

struct MetricsLog(Option<std::io::BufWriter<std::fs::File>>);

impl MetricsLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("opening metrics log {}", path.display()))?;
        Ok(MetricsLog(Some(std::io::BufWriter::new(f))))
    }

    fn write(&mut self, value: &impl serde::Serialize) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, value)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

pub struct TrainArgs {
    pub mode: String,
    pub config: Option<PathBuf>,
    pub preset: String,
    pub data: PathBuf,
    pub out: PathBuf,
    pub iters: Option<usize>,
    pub resume: bool,
    pub metrics: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let text = read_config_text(args.config.as_deref())?;
    let metrics_path = args.metrics.clone().unwrap_or_else(|| args.out.with_extension("metrics.jsonl"));
    match args.mode.as_str() {
        "stgan" => train_stgan(args, text.as_deref(), &metrics_path),
        "homnet" => train_homnet(args, text.as_deref(), &metrics_path),
        "sdm" => train_sdm(args, text.as_deref(), &metrics_path),
        other => bail!("unknown training mode {other:?} (expected stgan, homnet or sdm)"),
    }
}

fn train_stgan(args: &TrainArgs, text: Option<&str>, metrics_path: &Path) -> Result<()> {
    let resuming = args.resume && args.out.exists();
    let mut trainer = if resuming {
        Trainer::load(&args.out).with_context(|| format!("resuming from {}", args.out.display()))?
    } else {
        let mut cfg = match text {
            Some(t) => TrainConfig::parse(t)?,
            None => TrainConfig::preset(&args.preset)?,
        };
        if let Some(n) = args.iters {
            cfg.iters_per_stage = n;
            if n == 0 {
                cfg.pretrain_iters = 0;
                cfg.finetune_iters = 0;
            }
        }
        Trainer::new(cfg)?
    };
    let cfg = trainer.config.clone();
    let ds = load_data(&args.data)?;
    check_resolution(&ds, (cfg.height, cfg.width), "config")?;
    let td = TrainData::from_cubes(&ds)?;
    let eval_ds = args.eval_data.as_deref().map(load_data).transpose()?;
    let ecfg = EvalConfig::default();
    let mut log = MetricsLog::open(metrics_path, resuming)?;
    let mut failure = None;
    trainer.run(&td, eval_ds.as_ref().map(|d| (d, &ecfg)), &mut |t, rec| {
        let every = cfg.log_every.max(1);
        if rec.iter % every == 0 || rec.corner_error_eval.is_some() {
            if let Err(e) = log.write(rec) {
                failure = Some(e);
                return Control::Stop;
            }
            eprintln!(
                "iter {} {} d_loss {:.4} gp {:.4} g_loss {} |dp| {}",
                rec.iter,
                rec.phase,
                rec.d_loss,
                rec.gp,
                rec.g_loss.map_or("-".into(), |v| format!("{v:.4}")),
                rec.mean_update_norm.map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
        if cfg.checkpoint_every > 0 && (rec.iter + 1) % cfg.checkpoint_every == 0 {
            if let Err(e) = t.save(&args.out) {
                failure = Some(e.into());
                return Control::Stop;
            }
        }
        Control::Continue
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    trainer.save(&args.out)?;
    eprintln!("saved {}", args.out.display());
    Ok(())
}

fn train_homnet(args: &TrainArgs, text: Option<&str>, metrics_path: &Path) -> Result<()> {
    let resuming = args.resume && args.out.exists();
    let mut net = if resuming {
        HomNet::load(&args.out)?
    } else {
        let mut cfg: HomNetConfig = match text {
            Some(t) => parse_config(t)?,
            None => HomNetConfig::default(),
        };
        if let Some(n) = args.iters {
            cfg.iters = n;
        }
        HomNet::new(cfg)?
    };
    let ds = load_data(&args.data)?;
    check_resolution(&ds, (net.config.height, net.config.width), "config")?;
    let td = TrainData::reference_from_cubes(&ds)?;
    let mut log = MetricsLog::open(metrics_path, resuming)?;
    let out = args.out.clone();
    let mut failure = None;
    net.train(&td, &mut |n, iter, loss| {
        if iter % 10 == 0 {
            if let Err(e) = log.write(&serde_json::json!({ "iter": iter, "loss": loss })) {
                failure = Some(e);
                return false;
            }
        }
        if iter % 500 == 0 {
            eprintln!("iter {iter} loss {loss:.5}");
            if let Err(e) = n.save(&out) {
                failure = Some(e.into());
                return false;
            }
        }
        true
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    net.save(&args.out)?;
    eprintln!("saved {}", args.out.display());
    Ok(())
}

fn train_sdm(args: &TrainArgs, text: Option<&str>, metrics_path: &Path) -> Result<()> {
    let cfg: SdmConfig = match text {
        Some(t) => parse_config(t)?,
        None => SdmConfig::default(),
    };
    let ds = load_data(&args.data)?;
    let (cascade, reports) = sdm_train(&ds, &cfg)?;
    let mut log = MetricsLog::open(metrics_path, false)?;
    for r in &reports {
        eprintln!(
            "stage {} lambda {} residual {:.5} -> {:.5}",
            r.stage, r.lambda, r.residual_before, r.residual_after
        );
        log.write(r)?;
    }
    cascade.to_checkpoint(&cfg, &reports)?.save(&args.out)?;
    eprintln!("saved {}", args.out.display());
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, out: &Path, csv: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let (model, info) = Model::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let ds = load_data(data)?;
    check_resolution(&ds, model.resolution(), "model")?;
    let mut cfg = EvalConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ev = evaluate(&model, &ds, &cfg)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({ "model": info, "report": ev.report, "rows": ev.rows }))?;
    std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = csv {
        std::fs::write(path, ev.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    for s in &ev.report.stages {
        eprintln!(
            "stage {}: median corner {:.4} median aligned {:.4} mask IoU {:.4}",
            s.stage, s.median_corner_error, s.median_aligned_error, s.mean_mask_iou
        );
    }
    Ok(())
}

fn read_layer(path: &Path) -> Result<ForegroundLayer> {
    let r = Raster::read_png(path).with_context(|| format!("reading {}", path.display()))?;
    if r.channels != 4 {
        bail!("{} must be an RGBA image", path.display());
    }
    Ok(ForegroundLayer::from_rgba(&r)?)
}

fn read_rgb(path: &Path) -> Result<Raster> {
    let r = Raster::read_png(path).with_context(|| format!("reading {}", path.display()))?;
    match r.channels {
        3 => Ok(r),
        4 => Ok(Raster::new(r.height, r.width, 3, r.data[..3 * r.plane_len()].to_vec())?),
        c => bail!("{} has {c} channels, expected RGB", path.display()),
    }
}

fn write_composites(fg: &ForegroundLayer, bg: &Raster, states: &[WarpParams], dir: &Path, prefix: &str) -> Result<()> {
    let fg = if fg.height() == bg.height && fg.width() == bg.width { fg.clone() } else { fg.resize(bg.height, bg.width) };
    let fm = FrameMap::new(bg.width, bg.height);
    for (i, p) in states.iter().enumerate() {
        let comp = warp::composite(&warp::warp_foreground(&fg, p, &fm)?, bg)?;
        comp.write_png(&dir.join(format!("{prefix}stage_{i}.png")))?;
    }
    Ok(())
}

pub struct InferArgs {
    pub ckpt: PathBuf,
    pub fg: PathBuf,
    pub bg: PathBuf,
    pub p0: [f64; 8],
    pub stages: Option<usize>,
    pub out: PathBuf,
    pub full_res: Option<(PathBuf, PathBuf)>,
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let (model, info) = Model::load(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let fg = read_layer(&args.fg)?;
    let bg = read_rgb(&args.bg)?;
    let p0 = WarpParams(args.p0);
    if !p0.is_finite() {
        bail!("p0 must be finite");
    }
    let states = warp_chain(&model, model.resolution(), &fg, &bg, p0, args.stages)?;
    std::fs::create_dir_all(&args.out)?;
    write_composites(&fg, &bg, &states, &args.out, "")?;
    let mut report = serde_json::json!({
        "model": info,
        "states": states.iter().map(|p| p.0).collect::<Vec<_>>(),
        "homographies": pixel_homographies(&states, bg.width, bg.height).iter().map(|h| h.to_row_major()).collect::<Vec<_>>(),
        "width": bg.width,
        "height": bg.height,
    });
    if let Some((fg2, bg2)) = &args.full_res {
        let fg2 = read_layer(fg2)?;
        let bg2 = read_rgb(bg2)?;
        write_composites(&fg2, &bg2, &states, &args.out, "full_res_")?;
        report["full_res"] = serde_json::json!({
            "width": bg2.width,
            "height": bg2.height,
            "homographies": pixel_homographies(&states, bg2.width, bg2.height).iter().map(|h| h.to_row_major()).collect::<Vec<_>>(),
        });
    }
    std::fs::write(args.out.join("warps.json"), serde_json::to_string_pretty(&report)?)?;
    eprintln!("ran {} stages; outputs in {}", model.stages().min(states.len() - 1), args.out.display());
    Ok(())
}
