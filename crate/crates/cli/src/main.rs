//! `epoch-splat`: generate synthetic multi-period scenes, train, render,
//! sweep time, evaluate and inspect checkpoints.
//!
//! Exit status: 0 success, 2 usage or configuration error, 3 data or
//! checkpoint error, 4 internal invariant violation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use epoch_splat::dataio::{
    generate_synthetic, load_dataset, parse_colmap, parse_pose, write_ppm, Image, SyntheticSceneSpec,
};
use epoch_splat::geom::Camera;
use epoch_splat::model::TENSOR_NAMES;
use epoch_splat::raster::render;
use epoch_splat::trainer::{evaluate, load_checkpoint, save_checkpoint, LogRecord, TrainConfig, TrainState, VERSION};
use epoch_splat::Error;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "epoch-splat", version, about = "Multi-period anchor-based Gaussian splatting")]
struct Cli {
    /// Worker threads for the data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Component {
    Base,
    Var,
    Global,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene description into a dataset directory.
    Generate {
        /// Scene description (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed stored in the scene description.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a dataset directory.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// `key = value` file; defaults to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Recorded in the config. Reductions always run in a fixed order, so equal seeds reproduce bitwise either way.
        #[arg(long)]
        deterministic: bool,
        /// Remove a feature component from fusion (repeatable).
        #[arg(long, value_enum)]
        ablate: Vec<Component>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides a single config key (`key=value`, repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Metric log path; defaults to the checkpoint path with a `.jsonl` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Render one image from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Camera id in `--data`, or a pose file.
        #[arg(long)]
        camera: String,
        /// Dataset directory that resolves camera ids.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Period coordinate in `[0, T-1]`; fractional values blend adjacent periods.
        #[arg(long)]
        time: f64,
        /// Output PPM image.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render frames at evenly spaced times over `[0, T-1]`.
    Interp {
        #[arg(long)]
        ckpt: PathBuf,
        /// Camera id in `--data`, or a pose file.
        #[arg(long)]
        camera: String,
        /// Dataset directory that resolves camera ids.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of frames; frame `i` is rendered at `i·(T−1)/(steps−1)`.
        #[arg(long)]
        steps: usize,
        /// Directory receiving `frame_0000.ppm`, `frame_0001.ppm`, ...
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out PSNR and SSIM per period and averaged over periods.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSONL metrics file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_) | Error::OutOfRange { .. } | Error::SpecInvalid(_) => 2,
        Error::Invariant(_) | Error::MissingForwardState | Error::BehindCamera { .. } => 4,
        _ => 3,
    }
}

/// Reads an operator-supplied input (spec, config, pose); failures are usage errors.
fn read_input(path: &Path, what: &str) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn open_output(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Core(Error::Io { path: path.to_path_buf(), source: e })
}

fn resolve_camera(spec: &str, data: Option<&Path>) -> CliResult<Camera> {
    if let Ok(id) = spec.parse::<u32>() {
        let dir = data.ok_or_else(|| Failure::Usage(format!("camera id {id} needs --data")))?;
        let scene = parse_colmap(dir)?;
        let cam = scene
            .cameras
            .into_iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Failure::Usage(format!("no camera with id {id} in {}", dir.display())))?;
        return Ok(cam);
    }
    let path = Path::new(spec);
    Ok(parse_pose(&read_input(path, "pose file")?, path)?)
}

fn render_to(state: &TrainState, camera: &Camera, t: f64, out: &Path) -> CliResult {
    let graph = render(&state.model, camera, t, &state.config.raster_settings(), false)?;
    let img = Image { width: camera.width, height: camera.height, data: graph.image().to_vec() };
    write_ppm(out, &img)?;
    Ok(())
}

fn cmd_generate(spec: &Path, out: &Path, seed: Option<u64>) -> CliResult {
    let mut s = SyntheticSceneSpec::from_json(&read_input(spec, "scene spec")?)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let ds = generate_synthetic(&s, out)?;
    log::info!(
        "wrote {} images over {} periods to {}",
        ds.cameras.len(),
        ds.periods,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    deterministic: bool,
    ablate: &[Component],
    seed: Option<u64>,
    overrides: &[String],
    log_path: Option<&Path>,
) -> CliResult {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_text(&read_input(p, "config")?)?,
        None => TrainConfig::desk(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.deterministic |= deterministic;
    for c in ablate {
        match c {
            Component::Base => cfg.disable_base = true,
            Component::Var => cfg.disable_var = true,
            Component::Global => cfg.disable_global = true,
        }
    }
    cfg.validate()?;
    let ds = load_dataset(data)?;
    let mut state = TrainState::new(cfg, &ds)?;
    log::info!(
        "training {} iterations on {} images ({} periods), {} anchors, {} thread(s)",
        state.config.total_iters,
        ds.train_indices().len(),
        ds.periods,
        state.model.scaffold.len(),
        epoch_splat::par::threads()
    );
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("jsonl"));
    let mut log = open_output(&log_path)?;
    let settings = state.config.raster_settings();
    let total = state.config.total_iters;
    state.train(&ds, |s, r| {
        let c = &s.config;
        let eval_now = c.eval_every > 0 && r.iteration % c.eval_every == 0;
        if r.iteration % c.log_every == 0 || eval_now || r.iteration == total {
            let mut rec = LogRecord::from_step(r);
            if eval_now {
                rec = rec.with_eval(&evaluate(&s.model, &ds, &settings)?);
            }
            rec.write_to(&mut log)?;
            log::info!(
                "iter {:>6} loss {:.5} anchors {}",
                r.iteration,
                r.loss.total,
                r.anchors
            );
        }
        if c.checkpoint_every > 0 && r.iteration % c.checkpoint_every == 0 && r.iteration < total {
            save_checkpoint(s, out)?;
        }
        Ok(())
    })?;
    log.flush().map_err(io_err(&log_path))?;
    save_checkpoint(&state, out)?;
    log::info!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_interp(ckpt: &Path, camera: &str, data: Option<&Path>, steps: usize, out: &Path) -> CliResult {
    if steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    let state = load_checkpoint(ckpt)?;
    let cam = resolve_camera(camera, data)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let last = (state.model.periods() - 1) as f64;
    for i in 0..steps {
        let t = if steps == 1 { 0.0 } else { i as f64 * last / (steps - 1) as f64 };
        render_to(&state, &cam, t, &out.join(format!("frame_{i:04}.ppm")))?;
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, out: &Path) -> CliResult {
    let state = load_checkpoint(ckpt)?;
    let ds = load_dataset(data)?;
    if ds.periods != state.model.periods() {
        return Err(Failure::Core(Error::ShapeMismatch {
            expected: format!("{} periods", state.model.periods()),
            actual: format!("{} periods in {}", ds.periods, data.display()),
        }));
    }
    let report = evaluate(&state.model, &ds, &state.config.raster_settings())?;
    let mut w = open_output(out)?;
    let mut lines = Vec::new();
    for m in &report.per_period {
        lines.push(json!({"kind": "period", "period": m.period, "views": m.views, "psnr": m.psnr, "ssim": m.ssim}));
    }
    lines.push(json!({"kind": "average", "periods": report.per_period.len(), "psnr": report.psnr, "ssim": report.ssim}));
    for l in lines {
        writeln!(w, "{l}").map_err(io_err(out))?;
    }
    w.flush().map_err(io_err(out))?;
    println!("{:>8} {:>6} {:>10} {:>8}", "period", "views", "PSNR", "SSIM");
    for m in &report.per_period {
        println!("{:>8} {:>6} {:>10.3} {:>8.4}", m.period, m.views, m.psnr, m.ssim);
    }
    println!("{:>8} {:>6} {:>10.3} {:>8.4}", "mean", "", report.psnr, report.ssim);
    Ok(())
}

fn cmd_inspect(ckpt: &Path) -> CliResult {
    let s = load_checkpoint(ckpt)?;
    println!("format version: {VERSION}");
    println!("periods: {}", s.model.periods());
    println!("anchors: {}", s.model.scaffold.len());
    println!("iteration: {}", s.iteration);
    println!("parameters:");
    for (name, g) in TENSOR_NAMES.iter().zip(&s.groups) {
        println!("  {name}: {}", g.m.len());
    }
    println!("config:");
    for line in s.config.to_text().lines() {
        println!("  {line}");
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        epoch_splat::par::set_threads(n).map_err(Failure::Usage)?;
    }
    match cli.command {
        Command::Generate { spec, out, seed } => cmd_generate(&spec, &out, seed),
        Command::Train { data, out, config, deterministic, ablate, seed, overrides, log } => cmd_train(
            &data,
            &out,
            config.as_deref(),
            deterministic,
            &ablate,
            seed,
            &overrides,
            log.as_deref(),
        ),
        Command::Render { ckpt, camera, data, time, out } => {
            let state = load_checkpoint(&ckpt)?;
            let cam = resolve_camera(&camera, data.as_deref())?;
            render_to(&state, &cam, time, &out)
        }
        Command::Interp { ckpt, camera, data, steps, out } => cmd_interp(&ckpt, &camera, data.as_deref(), steps, &out),
        Command::Eval { ckpt, data, out } => cmd_eval(&ckpt, &data, &out),
        Command::Inspect { ckpt } => cmd_inspect(&ckpt),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

