//! `duodet`: command-line entry point for data preparation, training,
//! evaluation, inference, ensembling and benchmarking.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use duodet::augment::{apply_pipeline, AugmentConfig, RngStream};
use duodet::config::parse_config;
use duodet::detections::{write_detections, DetectionSet};
use duodet::ensemble::ensemble_run;
use duodet::infer::{benchmark_fps, Detector};
use duodet::ingest::{prepare_data, SourceFormat};
use duodet::manifest::{load_manifest, manifest_base};
use duodet::model::load_checkpoint;
use duodet::raster::{Image8, PairedSample};
use duodet::train::train;

/// Overrides the directory for checkpoints and run logs.
const RUN_DIR_ENV: &str = "DUODET_RUN_DIR";
const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("DUODET_GIT_DESCRIBE"), ")");

#[derive(Parser, Debug)]
#[command(name = "duodet", version = VERSION, about = "RGB + thermal object detection toolkit", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Import a dataset, crop it into tiles and write a manifest.
    PrepareData {
        #[arg(long)]
        input: PathBuf,
        /// `paired` (rgb/ + tir/) or `rgb-only` (thermal synthesized).
        #[arg(long, default_value = "paired")]
        format: SourceFormat,
        #[arg(long = "crop-size", default_value_t = 640)]
        crop: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented samples for visual inspection.
    AugmentPreview {
        #[arg(long)]
        manifest: PathBuf,
        /// Training config whose `aug` table is used; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on every record of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Square network resolution; defaults to each image rounded to 32.
        #[arg(long)]
        size: Option<usize>,
        /// Also write the detections of every image.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect objects in one RGB/thermal pair.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        tir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Image id in the output; defaults to the RGB file stem.
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Fuse detection files from several models.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// One per input; all 1 when omitted.
        #[arg(long, num_args = 1..)]
        weights: Vec<f64>,
        #[arg(long, default_value_t = 0.55)]
        iou: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure single-image inference throughput.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PrepareData { .. } => "prepare-data",
            Command::AugmentPreview { .. } => "augment-preview",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Infer { .. } => "infer",
            Command::Ensemble { .. } => "ensemble",
            Command::Benchmark { .. } => "benchmark",
        }
    }
}

/// Append-only log of one invocation.
struct RunLog {
    file: File,
    path: PathBuf,
}

impl RunLog {
    fn open(dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{command}.log"));
        let file = OpenOptions::new().create(true).append(true).open(&path).with_context(|| format!("opening {}", path.display()))?;
        let mut log = RunLog { file, path };
        let stamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        log.line(&format!("== duodet {VERSION} {command} at unix {stamp}"))?;
        log.line(&format!("argv: {}", std::env::args().collect::<Vec<_>>().join(" ")))?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}").with_context(|| format!("writing {}", self.path.display()))
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn run_dir_or(default: PathBuf) -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or(default)
}

fn load_samples(manifest: &Path) -> Result<(duodet::DatasetManifest, Vec<PairedSample>)> {
    let m = load_manifest(manifest)?;
    let base = manifest_base(manifest);
    let samples = (0..m.records.len()).map(|i| m.load_sample(i, &base)).collect::<duodet::Result<Vec<_>>>()?;
    Ok((m, samples))
}

fn outline(img: &mut Image8, b: &duodet::Box64) {
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return;
    }
    let cx = |v: f64| (v.max(0.0) as usize).min(w - 1);
    let cy = |v: f64| (v.max(0.0) as usize).min(h - 1);
    let (x0, x1, y0, y1) = (cx(b.x_min), cx(b.x_max - 1.0), cy(b.y_min), cy(b.y_max - 1.0));
    let c = img.channels();
    let mut put = |x: usize, y: usize| {
        for ch in 0..c {
            img.set(x, y, ch, if ch == 1 || c == 1 { 255 } else { 0 });
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn run(cmd: Command) -> Result<()> {
    let name = cmd.name();
    match cmd {
        Command::PrepareData { input, format, crop, out } => {
            let mut log = RunLog::open(&run_dir_or(out.clone()), name)?;
            log.line(&format!("input = {}\nformat = {format:?}\ncrop = {crop}\nout = {}", input.display(), out.display()))?;
            let manifest = prepare_data(&input, format, crop, &out)?;
            let m = load_manifest(&manifest)?;
            log.line(&format!("wrote {} records to {}", m.records.len(), manifest.display()))?;
            println!("{}", manifest.display());
        }
        Command::AugmentPreview { manifest, config, count, epoch, out } => {
            let aug = match &config {
                Some(p) => parse_config(p)?.aug,
                None => AugmentConfig::default(),
            };
            aug.validate()?;
            let mut log = RunLog::open(&run_dir_or(out.clone()), name)?;
            log.line(&format!("seed = {}\nepoch = {epoch}\naug = {}", aug.global_seed, serde_json::to_string(&aug)?))?;
            let (_, samples) = load_samples(&manifest)?;
            for index in 0..count.min(samples.len()) {
                let mut rng = RngStream::new(aug.global_seed, epoch, index as u64);
                let mut s = apply_pipeline(&samples[index], &aug, &mut rng)?;
                let mut tir = s.tir.gray_to_rgb();
                for b in &s.boxes {
                    outline(&mut s.rgb, b);
                    outline(&mut tir, b);
                }
                s.rgb.save(&out.join(format!("{index:04}_rgb.png")))?;
                tir.save(&out.join(format!("{index:04}_tir.png")))?;
            }
            log.line(&format!("wrote {} previews", count.min(samples.len())))?;
        }
        Command::Train { config } => {
            let cfg = parse_config(&config)?;
            let dir = run_dir_or(cfg.checkpoint_dir.clone());
            let mut log = RunLog::open(&dir, name)?;
            log.line(&format!("seed = {}\n# effective config\n{}", cfg.seed, cfg.echo()))?;
            match train(&cfg, &dir) {
                Ok(o) => {
                    log.line(&format!("finished after {} steps; final loss {:?}; checkpoint {}", o.steps, o.final_loss, o.checkpoint.display()))?;
                    println!("{}", o.checkpoint.display());
                }
                Err(e) => {
                    log.line(&format!("aborted: {e}"))?;
                    return Err(e.into());
                }
            }
        }
        Command::Eval { checkpoint, manifest, iou, size, out } => {
            let mut log = RunLog::open(&run_dir_or(parent_dir(&checkpoint)), name)?;
            log.line(&format!("checkpoint = {}\nmanifest = {}\niou = {iou}\nsize = {size:?}", checkpoint.display(), manifest.display()))?;
            let params = load_checkpoint::<f32>(&checkpoint)?;
            let (m, samples) = load_samples(&manifest)?;
            if m.num_classes != params.config().num_classes {
                anyhow::bail!(duodet::Error::InvalidArgument(format!(
                    "manifest has {} classes, checkpoint {}",
                    m.num_classes,
                    params.config().num_classes
                )));
            }
            let det = Detector::new(&params, size)?;
            let preds = samples.iter().map(|s| det.detect_sample(s)).collect::<duodet::Result<Vec<_>>>()?;
            let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
            let report = duodet::eval::evaluate_map(&preds, &gts, m.num_classes as usize, iou)?;
            for (k, ap) in report.per_class_ap.iter().enumerate() {
                let c = report.counts[k];
                let ap = ap.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                println!("{:>12}  AP {ap}  TP {} FP {} FN {}", m.class_names[k], c.tp, c.fp, c.fn_);
            }
            let line = format!("mAP@{iou:.2} = {:.6}", report.map);
            println!("{line}");
            log.line(&serde_json::to_string(&report)?)?;
            log.line(&line)?;
            if let Some(out) = out {
                let mut set = DetectionSet::new();
                for (r, p) in m.records.iter().zip(preds) {
                    set.insert(r.rgb_path.clone(), p);
                }
                write_detections(&out, &set)?;
            }
        }
        Command::Infer { checkpoint, rgb, tir, out, image_id, size } => {
            let mut log = RunLog::open(&run_dir_or(parent_dir(&out)), name)?;
            log.line(&format!("checkpoint = {}\nrgb = {}\ntir = {}\nsize = {size:?}", checkpoint.display(), rgb.display(), tir.display()))?;
            let params = load_checkpoint::<f32>(&checkpoint)?;
            let id = image_id.unwrap_or_else(|| rgb.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            let det = Detector::new(&params, size)?;
            let boxes = det.detect(&Image8::load(&rgb, 3)?, &Image8::load(&tir, 1)?)?;
            log.line(&format!("{} detections for {id}", boxes.len()))?;
            let mut set = DetectionSet::new();
            set.insert(id, boxes);
            write_detections(&out, &set)?;
            println!("{}", out.display());
        }
        Command::Ensemble { inputs, weights, iou, out } => {
            let weights = if weights.is_empty() { vec![1.0; inputs.len()] } else { weights };
            let mut log = RunLog::open(&run_dir_or(parent_dir(&out)), name)?;
            log.line(&format!("inputs = {inputs:?}\nweights = {weights:?}\niou = {iou}"))?;
            let s = ensemble_run(&inputs, &weights, iou, &out)?;
            log.line(&format!("{} images, {} id mismatches", s.images, s.id_mismatches))?;
            if s.id_mismatches > 0 {
                eprintln!("warning: {} images missing from some inputs", s.id_mismatches);
            }
            println!("{}", out.display());
        }
        Command::Benchmark { checkpoint, size, iters, warmup } => {
            let mut log = RunLog::open(&run_dir_or(parent_dir(&checkpoint)), name)?;
            log.line(&format!("checkpoint = {}\nsize = {size}\niters = {iters}\nwarmup = {warmup}", checkpoint.display()))?;
            let params = load_checkpoint::<f32>(&checkpoint)?;
            let r = benchmark_fps(&params, size, iters, warmup)?;
            let line = format!("FPS = {:.2} (median {:.4} s over {} runs at {size}x{size}; {})", r.fps, r.median_secs, r.iterations, r.hardware);
            log.line(&line)?;
            println!("{line}");
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<duodet::Error>() {
        Some(d) if d.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes whose text the message already carries.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}
