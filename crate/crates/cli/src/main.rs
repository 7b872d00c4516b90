use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use sdavs::ablate::{expand, parse_grid, run_one, runs_csv};
use sdavs::audio::write_wav;
use sdavs::checkpoint::{load_checkpoint, save_checkpoint, Container};
use sdavs::config::{NoiseKind, RunConfig};
use sdavs::data::{Clip, Dataset, Split};
use sdavs::eval::evaluate;
use sdavs::train::train;
use sdavs::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "sdavs", version, about = "Audio-visual sounding-object segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic split as WAV audio, PPM frames and PGM masks.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Config supplying sizes and scene probabilities.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        /// Number of clips; defaults to the split size in the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = NoiseArg::None)]
        noise: NoiseArg,
        #[arg(long, default_value_t = 0.1)]
        scale: f64,
        /// Output path; `.csv` and `.json` siblings are both written.
        #[arg(long)]
        report: PathBuf,
        /// Require the checkpoint to have been trained with this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accept a checkpoint whose config hash differs from `--config`.
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate every point of a grid such as `snrp=on,off;seed=0,1,2`.
    Ablate {
        /// Inline grid or a file holding one.
        #[arg(long)]
        grid: String,
        /// Base config the grid modifies.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Print tensor names and shapes of a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum NoiseArg {
    None,
    Brownian,
    ChirpTrain,
}

impl From<NoiseArg> for NoiseKind {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::None => NoiseKind::None,
            NoiseArg::Brownian => NoiseKind::Brownian,
            NoiseArg::ChirpTrain => NoiseKind::ChirpTrain,
        }
    }
}

fn load_config(path: Option<&Path>) -> sdavs::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, bytes: &[u8]) -> sdavs::Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(bytes)?;
    Ok(())
}

fn write_clip(dir: &Path, clip: &Clip) -> sdavs::Result<()> {
    fs::create_dir_all(dir)?;
    write_wav(dir.join("audio.wav"), &clip.waveform)?;
    let s = clip.frames.shape();
    let (h, w) = (s[2], s[3]);
    let fd = clip.frames.data();
    for t in 0..clip.num_frames() {
        let mut rgb = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            for c in 0..3 {
                rgb.push(to_byte(fd[(t * 3 + c) * h * w + i]));
            }
        }
        write_netpbm(&dir.join(format!("frame_{t}.ppm")), "P6", w, h, &rgb)?;
        let mask: Vec<u8> = clip.gt_mask(t).iter().map(|&m| if m { 255 } else { 0 }).collect();
        write_netpbm(&dir.join(format!("mask_{t}.pgm")), "P5", w, h, &mask)?;
    }
    Ok(())
}

fn gen(seed: u64, out: &Path, config: Option<&Path>, split: SplitArg, count: Option<usize>) -> sdavs::Result<()> {
    let mut cfg = load_config(config)?;
    cfg.data.seed = seed;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
    };
    if let Some(n) = count {
        if n == 0 {
            return Err(Error::Config("--count must be positive".into()));
        }
        cfg.data.train_clips = n;
        cfg.data.eval_clips = n;
    }
    let ds = Dataset::generate(&cfg.data, split, cfg.model.height, cfg.model.width, None)?;
    fs::create_dir_all(out)?;
    let mut clips = Vec::new();
    for (i, clip) in ds.clips.iter().enumerate() {
        let name = format!("clip_{i:04}");
        write_clip(&out.join(&name), clip)?;
        clips.push(json!({ "clip_id": i, "dir": name, "seed": clip.seed, "scene": clip.scene }));
    }
    let manifest = json!({ "data": cfg.data, "height": cfg.model.height, "width": cfg.model.width, "clips": clips });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    eprintln!("wrote {} clips to {}", ds.len(), out.display());
    Ok(())
}

fn train_cmd(config: &Path, out: &Path) -> sdavs::Result<()> {
    let cfg = RunConfig::load(config)?;
    let start = Instant::now();
    let ds = Dataset::generate(&cfg.data, Split::Train, cfg.model.height, cfg.model.width, None)?;
    let log_path = out.with_extension("log.jsonl");
    let mut log = fs::File::create(&log_path)?;
    let mut io_err = None;
    let outcome = train(&cfg, &ds, |e| {
        let secs = start.elapsed().as_secs_f64();
        eprintln!(
            "epoch {:>3}  lr {:.1e}  loss {:.4} (ce {:.4} iou {:.4} dice {:.4})  running J&F {:.4}{}  {:.0}s",
            e.epoch,
            e.lr,
            e.loss.total,
            e.loss.l_ce,
            e.loss.l_iou,
            e.loss.l_dice,
            e.running_jf,
            e.train_jf.map_or(String::new(), |v| format!("  train J&F {v:.4}")),
            secs
        );
        let mut line = serde_json::to_value(e).expect("log serializes");
        line["elapsed_s"] = json!(secs);
        if let Err(err) = writeln!(log, "{line}") {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save_checkpoint(&outcome.state, out)?;
    if let Some(reached) = outcome.reached_target {
        eprintln!("early-stop target {}", if reached { "reached" } else { "not reached" });
    }
    eprintln!(
        "wrote {} after {} epochs in {:.1}s (config hash {})",
        out.display(),
        outcome.state.epochs_run,
        start.elapsed().as_secs_f64(),
        cfg.config_hash()
    );
    Ok(())
}

fn eval_cmd(ckpt: &Path, noise: NoiseKind, scale: f64, report: &Path, config: Option<&Path>, force: bool) -> sdavs::Result<()> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Config("--scale must be a non-negative number".into()));
    }
    let expected = config.map(RunConfig::load).transpose()?.map(|c| c.config_hash());
    let state = load_checkpoint(ckpt, expected.as_deref(), force)?;
    let start = Instant::now();
    let r = evaluate(&state, noise, scale)?;
    let (csv, json) = r.write(report)?;
    let a = r.aggregate;
    println!("J {:.4}  F {:.4}  J&F {:.4}  over {} clips", a.j, a.f, a.jf, r.rows.len());
    if let (Some(c), Some(d)) = (r.clean, r.degradation) {
        println!("clean J&F {:.4}  degradation {:.4}", c.jf, d);
    }
    let (b, f) = (r.consistency.before, r.consistency.after);
    println!("CKA {:.4} -> {:.4}  KL {:.4} -> {:.4}  JS {:.4} -> {:.4}", b.cka, f.cka, b.kl, f.kl, b.js, f.js);
    eprintln!("wrote {} and {} in {:.1}s", csv.display(), json.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn ablate_cmd(grid: &str, config: Option<&Path>, out: &Path) -> sdavs::Result<()> {
    let spec = if Path::new(grid).is_file() { fs::read_to_string(grid)? } else { grid.to_string() };
    let base = load_config(config)?;
    let points = expand(&base, &parse_grid(&spec)?)?;
    let total = points.len();
    let mut runs = Vec::with_capacity(total);
    for (i, (settings, cfg)) in points.into_iter().enumerate() {
        let label: Vec<String> = settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let start = Instant::now();
        let run = run_one(settings, cfg)?;
        eprintln!(
            "[{}/{}] {}  J&F {:.4}  {:.0}s",
            i + 1,
            total,
            label.join(" "),
            run.clean.aggregate.jf,
            start.elapsed().as_secs_f64()
        );
        runs.push(run);
        fs::write(out, runs_csv(&runs))?;
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn inspect(ckpt: &Path) -> sdavs::Result<()> {
    let c = Container::load(ckpt)?;
    let mut total = 0;
    for (name, t) in &c.tensors {
        println!("{name}\t{:?}", t.shape());
        total += t.len();
    }
    println!("# {} tensors, {} values", c.tensors.len(), total);
    for (k, v) in &c.metadata {
        if k != "config" {
            println!("# {k}: {v}");
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("SDAVS_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SDAVS_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Gen { seed, out, config, split, count } => gen(seed, &out, config.as_deref(), split, count),
        Command::Train { config, out } => train_cmd(&config, &out),
        Command::Eval { ckpt, noise, scale, report, config, force } => {
            eval_cmd(&ckpt, noise.into(), scale, &report, config.as_deref(), force)
        }
        Command::Ablate { grid, config, out } => ablate_cmd(&grid, config.as_deref(), &out),
        Command::Inspect { ckpt } => inspect(&ckpt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                e if e.is_numeric() => 3,
                _ => 1,
            })
        }
    }
}
