//! `sonarmark`: simulate recordings, build cochleogram datasets, train and
//! evaluate the landmark networks, and run inference on a recording.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use sonarmark_core::dataset::{self, DatasetError, LabeledSample, Manifest, SplitSpec};
use sonarmark_core::geometry::ArrayGeometry;
use sonarmark_core::imaging::raster_to_pgm;
use sonarmark_core::net::checkpoint::{self, CheckpointError};
use sonarmark_core::net::train::{history_csv, TrainConfig};
use sonarmark_core::net::{argmax_rows, softmax, Mode, Network, NetworkConfig, Task, Tensor4, NUM_CLASSES};
use sonarmark_core::pipeline::{
    build_labeled_dataset, evaluate_models, label_recording, read_recording, train_classifier, train_regressor,
    write_recording, ExperimentConfig, PipelineError, Preprocessor,
};
use sonarmark_core::reports::{boxplot_csv, recall_csv};

#[derive(Parser)]
#[command(name = "sonarmark", version, about = "Synthetic sonar landmark pipeline")]
struct Cli {
    /// Worker threads for simulate/preprocess (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize scene recordings, or cochleograms directly.
    Simulate(SimulateArgs),
    /// Recordings → acoustic image → detections → labeled cochleograms.
    Preprocess(PreprocessArgs),
    /// Train the classification or orientation network.
    Train(TrainArgs),
    /// Test-split metrics and report files for a pair of checkpoints.
    Evaluate(EvaluateArgs),
    /// Detections of one recording with class, confidence and orientation.
    Infer(InferArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_landmark: Option<usize>,
    #[arg(long)]
    n_empty: Option<usize>,
    #[arg(long, env = "SONARMARK_SEED", default_value_t = 0)]
    seed: u64,
    /// Write `dataset.cqb` with this many landmark and empty cochleograms
    /// instead of raw scenes.
    #[arg(long)]
    to_cochleograms: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `simulate`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Class,
    Orient,
}

#[derive(Args, Clone)]
struct SplitArgs {
    #[arg(long, default_value_t = 0.64)]
    split_train: f64,
    #[arg(long, default_value_t = 0.16)]
    split_val: f64,
    #[arg(long, default_value_t = 0.20)]
    split_test: f64,
    /// Defaults to the training seed (evaluate: the one stored in the
    /// classification checkpoint).
    #[arg(long)]
    split_seed: Option<u64>,
}

impl SplitArgs {
    fn spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            train: self.split_train,
            val: self.split_val,
            test: self.split_test,
            seed: self.split_seed.unwrap_or(seed),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "SONARMARK_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    bn_momentum: Option<f64>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt_class: PathBuf,
    #[arg(long)]
    ckpt_orient: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Evaluate on every sample instead of the test partition.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 5.0)]
    bin_width: f64,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    recording: PathBuf,
    /// Array layout JSON; defaults to `geometry.json` next to or above the
    /// recording, then the generated layout.
    #[arg(long)]
    geometry: Option<PathBuf>,
    #[arg(long)]
    ckpt_class: PathBuf,
    #[arg(long)]
    ckpt_orient: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn preprocessor(cfg: &ExperimentConfig, geometry: Option<&Path>) -> Result<Preprocessor> {
    Ok(match geometry {
        Some(g) => Preprocessor::with_geometry(cfg.pipeline.clone(), ArrayGeometry::from_json_file(g)?)?,
        None => Preprocessor::new(cfg.pipeline.clone())?,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?.seeded(args.seed);
    if let Some(n) = args.n_landmark {
        cfg.dataset.n_landmark = n;
    }
    if let Some(n) = args.n_empty {
        cfg.dataset.n_empty = n;
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let pre = Preprocessor::new(cfg.pipeline.clone())?;
    write(&args.out.join("config.json"), pretty(&cfg))?;
    if args.to_cochleograms {
        cfg.harvest.n_landmark = cfg.dataset.n_landmark;
        cfg.harvest.n_empty = cfg.dataset.n_empty;
        let samples = build_labeled_dataset(&pre, &cfg.dataset, &cfg.harvest)?;
        dataset::save_batch(&args.out.join("dataset.cqb"), &samples)?;
        Manifest::new(&samples, serde_json::to_value(&cfg)?).save(&args.out.join("dataset.json"))?;
        println!("{}", json!({"samples": samples.len(), "out": args.out.join("dataset.cqb")}));
        return Ok(());
    }
    cfg.dataset.validate().map_err(PipelineError::from)?;
    write(&args.out.join("geometry.json"), pre.geometry.to_json())?;
    let scenes = cfg.dataset.scenes();
    scenes.par_iter().enumerate().try_for_each(|(i, scene)| -> Result<()> {
        let rec = pre.synthesize(scene)?;
        write_recording(&args.out.join(format!("scene_{i:05}")), scene, &rec)?;
        Ok(())
    })?;
    println!("{}", json!({"scenes": scenes.len(), "out": args.out}));
    Ok(())
}

fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scene_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no scene_* directories in {}", root.display());
    }
    Ok(dirs)
}

fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => load_config(Some(p))?,
        None if args.input.join("config.json").exists() => load_config(Some(&args.input.join("config.json")))?,
        None => ExperimentConfig::default(),
    };
    let geometry = args.input.join("geometry.json");
    let pre = preprocessor(&cfg, geometry.exists().then_some(geometry.as_path()))?;
    let dirs = scene_dirs(&args.input)?;
    let results: Vec<Result<(String, Vec<LabeledSample>)>> = dirs
        .par_iter()
        .map(|dir| {
            let (scene, rec) = read_recording(dir)?;
            let scene = scene.with_context(|| format!("{} has no scene.json labels", dir.display()))?;
            let (processed, samples) = label_recording(&pre, &scene, &rec, &cfg.harvest)?;
            let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let mut rows = String::new();
            for (k, d) in processed.detections.iter().enumerate() {
                rows.push_str(&format!(
                    "{name},{k},{:.6},{:.4},{:.6e}\n",
                    d.range_r, d.azimuth_theta, d.strength
                ));
            }
            log::info!("{name}: {} detections, {} samples", processed.detections.len(), samples.len());
            Ok((rows, samples))
        })
        .collect();
    let mut csv = String::from("scene,index,range_m,azimuth_deg,strength\n");
    let mut samples = Vec::new();
    for r in results {
        let (rows, s) = r?;
        csv.push_str(&rows);
        samples.extend(s);
    }
    dataset::save_batch(&args.out, &samples)?;
    write(&args.out.with_extension("detections.csv"), csv)?;
    Manifest::new(&samples, serde_json::to_value(&cfg)?).save(&args.out.with_extension("json"))?;
    println!("{}", json!({"scenes": dirs.len(), "samples": samples.len(), "out": args.out}));
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let samples = dataset::load_batch(&args.data)?;
    let mut tc = TrainConfig {
        seed: args.seed,
        ..TrainConfig::default()
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { tc.$f = v; } )* };
    }
    set!(lr, beta1, beta2, adam_eps, max_epochs, patience, batch_size, bn_momentum);
    let spec = args.split.spec(args.seed);
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let parts = dataset::split(&labels, &spec)?;
    let (task, net, history, weights) = match args.task {
        TaskArg::Class => {
            let (out, w) = train_classifier(&samples, &parts.train, &parts.val, &tc)?;
            (Task::Classification, out.network, out.history, Some(w))
        }
        TaskArg::Orient => {
            let out = train_regressor(&samples, &parts.train, &parts.val, &tc)?;
            (Task::Regression, out.network, out.history, None)
        }
    };
    let best = history
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .map(|r| r.epoch);
    let meta = json!({
        "task": task,
        "seed": args.seed,
        "split": spec,
        "train_config": tc,
        "class_weights": weights,
        "best_epoch": best,
        "epochs_run": history.len(),
    });
    checkpoint::save(&net, &args.out, meta.clone())?;
    write(&args.out.with_extension("history.csv"), history_csv(&history))?;
    println!("{meta}");
    Ok(())
}

fn load_pair(class: &Path, orient: &Path) -> Result<(Network<f32>, Network<f32>, serde_json::Value)> {
    let (c, header) = checkpoint::load(class, Some(&NetworkConfig::for_task(Task::Classification)))
        .with_context(|| format!("classification checkpoint {}", class.display()))?;
    let (o, _) = checkpoint::load(orient, Some(&NetworkConfig::for_task(Task::Regression)))
        .with_context(|| format!("orientation checkpoint {}", orient.display()))?;
    Ok((c, o, header.meta))
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let samples = dataset::load_batch(&args.data)?;
    let (class_net, orient_net, meta) = load_pair(&args.ckpt_class, &args.ckpt_orient)?;
    let idx: Vec<usize> = if args.all {
        (0..samples.len()).collect()
    } else {
        let stored = meta.get("split").and_then(|v| serde_json::from_value::<SplitSpec>(v.clone()).ok());
        let spec = match (stored, args.split.split_seed) {
            (Some(s), None) => s,
            _ => args.split.spec(meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0)),
        };
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        dataset::split(&labels, &spec)?.test
    };
    let ev = evaluate_models(&class_net, &orient_net, &samples, &idx, args.bin_width)?;
    std::fs::create_dir_all(&args.report).with_context(|| format!("creating {}", args.report.display()))?;
    write(&args.report.join("confusion.csv"), ev.confusion.to_csv())?;
    write(&args.report.join("recall.csv"), recall_csv(&ev.confusion))?;
    write(&args.report.join("boxplot.csv"), boxplot_csv(&ev.boxplot))?;
    write(&args.report.join("metrics.json"), pretty(&ev.metrics))?;
    for label in 0..dataset::NUM_LABELS as u8 {
        if let Some(&i) = idx.iter().find(|&&i| samples[i].label == label) {
            let pgm = raster_to_pgm(&samples[i].cochleogram, dataset::SAMPLE_LEN / 106, 106);
            write(&args.report.join(format!("cochleogram_class{label:02}.pgm")), pgm)?;
        }
    }
    println!("{}", serde_json::to_string(&ev.metrics)?);
    Ok(())
}

fn infer(args: &InferArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let geometry = args.geometry.clone().or_else(|| {
        [args.recording.join("geometry.json"), args.recording.join("../geometry.json")]
            .into_iter()
            .find(|p| p.exists())
    });
    let pre = preprocessor(&cfg, geometry.as_deref())?;
    let (class_net, orient_net, _) = load_pair(&args.ckpt_class, &args.ckpt_orient)?;
    let (_, rec) = read_recording(&args.recording)?;
    let processed = pre.process(&rec)?;
    for (index, det) in processed.detections.iter().enumerate() {
        let c = pre.cochleogram(&rec, det)?;
        let x: Vec<f32> = c.values().iter().map(|&v| v as f32).collect();
        let dims = [1, 1, c.bands(), c.frames()];
        let logits = class_net.forward(&Tensor4::new(x.clone(), dims)?, Mode::Eval)?.0;
        let p = softmax(&logits, NUM_CLASSES);
        let class = argmax_rows(&p, NUM_CLASSES)[0];
        let gamma = if class > 0 {
            let g = orient_net.forward(&Tensor4::new(x, dims)?, Mode::Eval)?.0[0];
            Some(g as f64 * sonarmark_core::net::train::GAMMA_SCALE)
        } else {
            None
        };
        println!(
            "{}",
            json!({
                "index": index,
                "range_m": det.range_r,
                "azimuth_deg": det.azimuth_theta,
                "strength": det.strength,
                "class": class,
                "confidence": p[class],
                "gamma_deg": gamma,
            })
        );
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<DatasetError>() {
            return "dataset";
        }
        if cause.is::<CheckpointError>() {
            return "checkpoint";
        }
        if cause.is::<PipelineError>() {
            return "pipeline";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "error"
}

fn run(cli: &Cli) -> Result<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Infer(a) => infer(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": "usage", "message": e.to_string().trim_end()}}));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": error_kind(&e), "message": format!("{e:#}")}}));
            ExitCode::FAILURE
        }
    }
}
