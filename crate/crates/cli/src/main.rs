use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use stgan_cli::commands::{self, parse_params, parse_resolution, InferArgs, TrainArgs};
use stgan_cli::serve::{router, AppState};

#[derive(Parser)]
#[command(name = "stgan", version, about = "Spatial transformer GAN for geometric image compositing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic cubes dataset.
    GenCubes {
        #[arg(long)]
        n: usize,
        /// Image size as HxW.
        #[arg(long, value_parser = parse_resolution, default_value = "32x32")]
        resolution: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the camera perturbation for viewpoint variety only: foreground,
        /// background and real share one camera, so p0 is the only misalignment.
        #[arg(long)]
        view_jitter: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an ST-GAN stack or a baseline.
    Train {
        #[arg(long, default_value = "stgan", value_parser = ["stgan", "homnet", "sdm"])]
        mode: String,
        /// TOML or JSON config; overrides --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path, rewritten periodically.
        #[arg(long)]
        out: PathBuf,
        /// Override iterations per stage. 0 writes the initial checkpoint.
        #[arg(long)]
        iters: Option<usize>,
        /// Continue from --out if it exists.
        #[arg(long)]
        resume: bool,
        /// JSONL metrics log; defaults next to --out.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Held-out dataset for periodic evaluation.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a cubes dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report.
        #[arg(long)]
        out: PathBuf,
        /// Per-sample table.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Perturbation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the warp chain on one foreground/background pair.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// RGBA PNG.
        #[arg(long)]
        fg: PathBuf,
        /// RGB PNG.
        #[arg(long)]
        bg: PathBuf,
        /// Initial warp as eight comma-separated values.
        #[arg(long, value_parser = parse_params, default_value = "0,0,0,0,0,0,0,0")]
        p0: [f64; 8],
        #[arg(long)]
        stages: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Apply the predicted warps to a higher-resolution FG and BG too.
        #[arg(long, num_args = 2, value_names = ["FG", "BG"])]
        full_res: Option<Vec<PathBuf>>,
    },
    /// Serve predictions over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "STGAN_ADDR", default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = 8)]
        max_body_mb: usize,
        /// Static UI bundle served under /ui.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCubes {
            n,
            resolution,
            seed,
            view_jitter,
            out,
        } => commands::gen_cubes(n, resolution, seed, view_jitter, &out),
        Command::Train {
            mode,
            config,
            preset,
            data,
            out,
            iters,
            resume,
            metrics,
            eval_data,
        } => commands::train(&TrainArgs {
            mode,
            config,
            preset,
            data,
            out,
            iters,
            resume,
            metrics,
            eval_data,
        }),
        Command::Eval { ckpt, data, out, csv, seed } => commands::eval(&ckpt, &data, &out, csv.as_deref(), seed),
        Command::Infer {
            ckpt,
            fg,
            bg,
            p0,
            stages,
            out,
            full_res,
        } => commands::infer(&InferArgs {
            ckpt,
            fg,
            bg,
            p0,
            stages,
            out,
            full_res: full_res.map(|v| (v[0].clone(), v[1].clone())),
        }),
        Command::Serve {
            ckpt,
            addr,
            max_body_mb,
            ui_dir,
        } => serve(ckpt, addr, max_body_mb, ui_dir),
    }
}

fn serve(ckpt: PathBuf, addr: String, max_body_mb: usize, ui_dir: Option<PathBuf>) -> Result<()> {
    let (model, info) = stgan::model::Model::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut state = AppState::new(model, info);
    state.body_limit = max_body_mb * 1024 * 1024;
    state.ui_dir = ui_dir;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
