//! End-to-end wiring: recording → acoustic image → detections →
//! cochleograms, labeled dataset construction and the train/evaluate
//! experiment.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamform::{image_from_analytic, AnalyticChannels, BeamformError, ImageParams, SteeringGrid};
use crate::cochleo::{make_cochleogram, Cochleogram, CochleoError, CochleoParams, GammatoneBank};
use crate::dataset::{split, DatasetError, LabeledSample, SplitSpec, NUM_LABELS, SAMPLE_LEN};
use crate::geometry::{default_array, direction, distance, ArrayGeometry};
use crate::imaging::{detect_echoes, smooth_image, AcousticImage, DetectionParams, EchoDetection, ImagingError};
use crate::net::train::{class_weights, evaluate, predict, train, EpochRecord, TrainConfig, TrainOutcome, TrainSet, Targets, GAMMA_SCALE};
use crate::net::{argmax_rows, NetError, Network, NetworkConfig, Task, INPUT_HEIGHT, INPUT_WIDTH, NUM_CLASSES};
use crate::reports::{confusion_matrix, functional_boxplot, rmse, BoxplotBin, ConfusionMatrix, ReportError};
use crate::signals::{make_chirp, ChirpSpec, SignalError, Waveform};
use crate::simulator::{synthesize_recording, DatasetConfig, Scene, SceneKind, SimError, SynthesisParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Beamform(#[from] BeamformError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Cochleo(#[from] CochleoError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    File { path: String, reason: String },
    #[error("gave up after {attempts} {kind} scenes with only {got} of {wanted} samples")]
    Exhausted {
        kind: &'static str,
        attempts: usize,
        got: usize,
        wanted: usize,
    },
}

/// Every tunable of the recording → cochleogram chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub chirp: ChirpSpec,
    pub synthesis: SynthesisParams,
    /// Seed of the generated microphone layout.
    pub array_seed: u64,
    pub azimuth_min: f64,
    pub azimuth_max: f64,
    pub azimuth_step: f64,
    pub image: ImageParams,
    pub median_k: usize,
    pub gauss_sigma: f64,
    pub detection: DetectionParams,
    pub cochleo: CochleoParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chirp: ChirpSpec::default(),
            synthesis: SynthesisParams::default(),
            array_seed: 0,
            azimuth_min: -60.0,
            azimuth_max: 60.0,
            azimuth_step: 1.0,
            image: ImageParams::default(),
            median_k: 3,
            gauss_sigma: 1.0,
            detection: DetectionParams::default(),
            cochleo: CochleoParams::default(),
        }
    }
}

/// Output of [`Preprocessor::process`].
#[derive(Debug, Clone)]
pub struct Processed {
    pub image: AcousticImage,
    pub detections: Vec<EchoDetection>,
}

/// Reusable state for preprocessing many recordings with one config.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub config: PipelineConfig,
    pub chirp: Waveform,
    pub geometry: ArrayGeometry,
    pub grid: SteeringGrid,
    pub bank: GammatoneBank,
}

impl Preprocessor {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let geometry = default_array(config.array_seed);
        Self::with_geometry(config, geometry)
    }

    pub fn with_geometry(config: PipelineConfig, geometry: ArrayGeometry) -> Result<Self, PipelineError> {
        let chirp = make_chirp(&config.chirp)?;
        if (chirp.sample_rate() - config.synthesis.sample_rate).abs() > 0.0 {
            return Err(PipelineError::Config(format!(
                "chirp rate {} differs from recording rate {}",
                chirp.sample_rate(),
                config.synthesis.sample_rate
            )));
        }
        config.cochleo.validate()?;
        if (INPUT_HEIGHT, INPUT_WIDTH) != (crate::cochleo::NUM_BANDS, config.cochleo.frames()) {
            return Err(PipelineError::Config(format!(
                "cochleogram frames {} do not match the network input width {INPUT_WIDTH}",
                config.cochleo.frames()
            )));
        }
        let grid = SteeringGrid::uniform(config.azimuth_min, config.azimuth_max, config.azimuth_step)?;
        let bank = GammatoneBank::standard(config.synthesis.sample_rate)?;
        Ok(Self {
            config,
            chirp,
            geometry,
            grid,
            bank,
        })
    }

    pub fn synthesize(&self, scene: &Scene) -> Result<Vec<Waveform>, PipelineError> {
        Ok(synthesize_recording(scene, &self.geometry, &self.chirp, &self.config.synthesis)?)
    }

    /// Matched filter, beamformed image, smoothing and echo detection.
    pub fn process(&self, channels: &[Waveform]) -> Result<Processed, PipelineError> {
        let c = &self.config;
        let a = AnalyticChannels::from_recording(channels, &self.chirp, c.image.envelope.hilbert_taps)?;
        let raw = image_from_analytic(&a, &self.geometry, &self.grid, &c.image)?;
        let image = smooth_image(&raw, c.median_k, c.gauss_sigma)?;
        let detections = detect_echoes(&image, &c.detection)?;
        Ok(Processed { image, detections })
    }

    pub fn cochleogram(&self, channels: &[Waveform], det: &EchoDetection) -> Result<Cochleogram, PipelineError> {
        Ok(make_cochleogram(
            channels,
            &self.geometry,
            det,
            &self.bank,
            &self.config.cochleo,
        )?)
    }
}

fn to_sample(c: &Cochleogram, label: u8, gamma_deg: Option<f32>, scene_seed: u64) -> LabeledSample {
    LabeledSample {
        cochleogram: c.values().iter().map(|&v| v as f32).collect(),
        label,
        gamma_deg,
        scene_seed,
    }
}

/// How many cochleograms of each kind to harvest, and how.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestConfig {
    pub n_landmark: usize,
    pub n_empty: usize,
    /// Strongest clutter detections turned into empty samples per scene.
    pub empties_per_scene: usize,
    /// A landmark scene counts only if some detection lies within this
    /// distance (m) of the true reflector position.
    pub match_radius: f64,
    /// Scenes processed per parallel batch; also the granularity of the
    /// deterministic quota cut.
    pub chunk: usize,
    pub parallel: bool,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            n_landmark: 5500,
            n_empty: 5500,
            empties_per_scene: 4,
            match_radius: 0.15,
            chunk: 32,
            parallel: true,
        }
    }
}

/// Scene indices interleave so the two kinds never share a seed.
fn scene_index(kind: SceneKind, i: usize) -> u64 {
    match kind {
        SceneKind::Landmark => 2 * i as u64,
        SceneKind::Empty => 2 * i as u64 + 1,
    }
}

/// Detection nearest the reflector when within `radius` (m) of it.
pub fn match_landmark<'a>(scene: &Scene, dets: &'a [EchoDetection], radius: f64) -> Option<&'a EchoDetection> {
    let truth = scene.landmark.as_ref()?.pose.position();
    dets.iter()
        .map(|d| {
            let u = direction(d.azimuth_theta, 0.0);
            let pos = [d.range_r * u[0], d.range_r * u[1], d.range_r * u[2]];
            (distance(&pos, &truth), d)
        })
        .filter(|(dist, _)| *dist <= radius)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, d)| d)
}

/// Labeled cochleograms of one recording: the matched reflector echo of a
/// landmark scene, or the strongest `empties_per_scene` echoes of an empty
/// one.
pub fn label_recording(
    pre: &Preprocessor,
    scene: &Scene,
    rec: &[Waveform],
    h: &HarvestConfig,
) -> Result<(Processed, Vec<LabeledSample>), PipelineError> {
    let p = pre.process(rec)?;
    let samples = match &scene.landmark {
        Some(l) => match match_landmark(scene, &p.detections, h.match_radius) {
            Some(det) => {
                let c = pre.cochleogram(rec, det)?;
                let gamma = l.pose.orientation_gamma as f32;
                vec![to_sample(&c, l.spec.class_id, Some(gamma), scene.seed)]
            }
            None => Vec::new(),
        },
        None => p
            .detections
            .iter()
            .take(h.empties_per_scene)
            .map(|d| Ok(to_sample(&pre.cochleogram(rec, d)?, 0, None, scene.seed)))
            .collect::<Result<_, PipelineError>>()?,
    };
    Ok((p, samples))
}

fn harvest(
    pre: &Preprocessor,
    ds: &DatasetConfig,
    h: &HarvestConfig,
    kind: SceneKind,
    wanted: usize,
) -> Result<Vec<LabeledSample>, PipelineError> {
    let mut out = Vec::with_capacity(wanted);
    let max_scenes = 4 * wanted + 64;
    let chunk = h.chunk.max(1);
    let mut next = 0;
    let one = |i: usize| {
        let scene = ds.scene(scene_index(kind, i), kind);
        let rec = pre.synthesize(&scene)?;
        Ok::<_, PipelineError>(label_recording(pre, &scene, &rec, h)?.1)
    };
    while out.len() < wanted {
        if next >= max_scenes {
            return Err(PipelineError::Exhausted {
                kind: match kind {
                    SceneKind::Landmark => "landmark",
                    SceneKind::Empty => "empty",
                },
                attempts: next,
                got: out.len(),
                wanted,
            });
        }
        let range = next..next + chunk;
        let batch: Vec<Result<Vec<LabeledSample>, PipelineError>> = if h.parallel {
            range.into_par_iter().map(one).collect()
        } else {
            range.map(one).collect()
        };
        for r in batch {
            out.extend(r?);
        }
        next += chunk;
    }
    out.truncate(wanted);
    log::info!("{kind:?}: {wanted} samples from {next} scenes");
    Ok(out)
}

/// Landmark samples (one per scene whose reflector was detected) followed
/// by empty samples (the strongest clutter detections of empty scenes).
/// Scenes that yield nothing are replaced by drawing further scenes.
pub fn build_labeled_dataset(
    pre: &Preprocessor,
    ds: &DatasetConfig,
    h: &HarvestConfig,
) -> Result<Vec<LabeledSample>, PipelineError> {
    ds.validate()?;
    let mut samples = harvest(pre, ds, h, SceneKind::Landmark, h.n_landmark)?;
    samples.extend(harvest(pre, ds, h, SceneKind::Empty, h.n_empty)?);
    Ok(samples)
}

/// Stacks the given samples into a training set for `task`.
pub fn train_set(samples: &[LabeledSample], idx: &[usize], task: Task) -> Result<TrainSet<f32>, PipelineError> {
    let mut inputs = Vec::with_capacity(idx.len() * SAMPLE_LEN);
    for &i in idx {
        inputs.extend_from_slice(&samples[i].cochleogram);
    }
    let targets = match task {
        Task::Classification => Targets::Classes(idx.iter().map(|&i| samples[i].label as usize).collect()),
        Task::Regression => Targets::Values(
            idx.iter()
                .map(|&i| {
                    let g = samples[i].gamma_deg.ok_or_else(|| {
                        PipelineError::Config(format!("sample {i} has no orientation for regression"))
                    })?;
                    Ok(g as f64 / GAMMA_SCALE)
                })
                .collect::<Result<_, PipelineError>>()?,
        ),
    };
    Ok(TrainSet::new(inputs, INPUT_HEIGHT, INPUT_WIDTH, targets)?)
}

/// Indices of landmark samples; the regression network never sees empties.
pub fn landmark_only(samples: &[LabeledSample], idx: &[usize]) -> Vec<usize> {
    idx.iter().copied().filter(|&i| samples[i].label > 0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub harvest: HarvestConfig,
    pub pipeline: PipelineConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub boxplot_bin_deg: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            harvest: HarvestConfig::default(),
            pipeline: PipelineConfig::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            boxplot_bin_deg: 5.0,
        }
    }
}

impl ExperimentConfig {
    /// The same config with every seed derived from `seed`.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Trained networks plus their test-split metrics.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub classifier: Network<f32>,
    pub regressor: Network<f32>,
    pub class_history: Vec<EpochRecord>,
    pub orient_history: Vec<EpochRecord>,
    pub class_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub empty_recall: f64,
    pub rmse_deg: f64,
    pub n_test: usize,
    pub n_test_landmark: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    pub boxplot: Vec<BoxplotBin>,
    pub predicted_classes: Vec<usize>,
    pub predicted_gamma: Vec<f64>,
    pub true_gamma: Vec<f64>,
}

/// Classifier trained on every training sample, with class weights from
/// their counts.
pub fn train_classifier(
    samples: &[LabeledSample],
    train_idx: &[usize],
    val_idx: &[usize],
    tc: &TrainConfig,
) -> Result<(TrainOutcome<f32>, Vec<f64>), PipelineError> {
    let mut counts = [0usize; NUM_LABELS];
    for &i in train_idx {
        counts[samples[i].label as usize] += 1;
    }
    let weights = class_weights(&counts)?;
    let tc = TrainConfig {
        class_weights: Some(weights.clone()),
        ..tc.clone()
    };
    let net = Network::<f32>::new(NetworkConfig::for_task(Task::Classification), tc.seed)?;
    let tr = train_set(samples, train_idx, Task::Classification)?;
    let va = train_set(samples, val_idx, Task::Classification)?;
    Ok((train(net, &tr, &va, &tc)?, weights))
}

/// Orientation regressor trained on the landmark part of the given splits.
pub fn train_regressor(
    samples: &[LabeledSample],
    train_idx: &[usize],
    val_idx: &[usize],
    tc: &TrainConfig,
) -> Result<TrainOutcome<f32>, PipelineError> {
    let tc = TrainConfig {
        class_weights: None,
        ..tc.clone()
    };
    let net = Network::<f32>::new(NetworkConfig::for_task(Task::Regression), tc.seed.wrapping_add(1))?;
    let tr = train_set(samples, &landmark_only(samples, train_idx), Task::Regression)?;
    let va = train_set(samples, &landmark_only(samples, val_idx), Task::Regression)?;
    Ok(train(net, &tr, &va, &tc)?)
}

pub fn train_models(
    samples: &[LabeledSample],
    train_idx: &[usize],
    val_idx: &[usize],
    tc: &TrainConfig,
) -> Result<TrainedModels, PipelineError> {
    let (class_out, weights) = train_classifier(samples, train_idx, val_idx, tc)?;
    let orient_out = train_regressor(samples, train_idx, val_idx, tc)?;
    Ok(TrainedModels {
        classifier: class_out.network,
        regressor: orient_out.network,
        class_history: class_out.history,
        orient_history: orient_out.history,
        class_weights: weights,
    })
}

/// Test-split accuracy, empty recall, landmark RMSE and the box-plot table.
pub fn evaluate_models(
    classifier: &Network<f32>,
    regressor: &Network<f32>,
    samples: &[LabeledSample],
    test_idx: &[usize],
    bin_deg: f64,
) -> Result<Evaluation, PipelineError> {
    let set = train_set(samples, test_idx, Task::Classification)?;
    let logits = predict(classifier, &set, 256)?;
    let predicted_classes = argmax_rows(&logits, NUM_CLASSES);
    let labels: Vec<usize> = test_idx.iter().map(|&i| samples[i].label as usize).collect();
    let confusion = confusion_matrix(&predicted_classes, &labels, NUM_LABELS)?;

    let lm = landmark_only(samples, test_idx);
    let set = train_set(samples, &lm, Task::Regression)?;
    let predicted_gamma: Vec<f64> = predict(regressor, &set, 256)?
        .iter()
        .map(|v| *v as f64 * GAMMA_SCALE)
        .collect();
    let true_gamma: Vec<f64> = lm.iter().map(|&i| samples[i].gamma_deg.unwrap_or(0.0) as f64).collect();
    let metrics = Metrics {
        accuracy: confusion.accuracy(),
        empty_recall: confusion.recall(0).unwrap_or(f64::NAN),
        rmse_deg: rmse(&predicted_gamma, &true_gamma)?,
        n_test: test_idx.len(),
        n_test_landmark: lm.len(),
    };
    let boxplot = functional_boxplot(&predicted_gamma, &true_gamma, bin_deg)?;
    Ok(Evaluation {
        metrics,
        confusion,
        boxplot,
        predicted_classes,
        predicted_gamma,
        true_gamma,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub dataset_s: f64,
    pub train_s: f64,
    pub evaluate_s: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub samples: Vec<LabeledSample>,
    pub models: TrainedModels,
    pub evaluation: Evaluation,
    pub timings: Timings,
    pub val_metrics: (f64, f64),
}

/// Harvest, split, train both networks and evaluate on the test split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, PipelineError> {
    let t0 = Instant::now();
    let pre = Preprocessor::new(cfg.pipeline.clone())?;
    let samples = build_labeled_dataset(&pre, &cfg.dataset, &cfg.harvest)?;
    let t1 = Instant::now();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let parts = split(&labels, &cfg.split)?;
    let models = train_models(&samples, &parts.train, &parts.val, &cfg.train)?;
    let t2 = Instant::now();
    let val_class = evaluate(
        &models.classifier,
        &train_set(&samples, &parts.val, Task::Classification)?,
        Some(&models.class_weights),
    )?;
    let val_orient = evaluate(
        &models.regressor,
        &train_set(&samples, &landmark_only(&samples, &parts.val), Task::Regression)?,
        None,
    )?;
    let evaluation = evaluate_models(
        &models.classifier,
        &models.regressor,
        &samples,
        &parts.test,
        cfg.boxplot_bin_deg,
    )?;
    let t3 = Instant::now();
    Ok(ExperimentOutcome {
        samples,
        models,
        evaluation,
        timings: Timings {
            dataset_s: (t1 - t0).as_secs_f64(),
            train_s: (t2 - t1).as_secs_f64(),
            evaluate_s: (t3 - t2).as_secs_f64(),
        },
        val_metrics: (val_class.1, val_orient.1),
    })
}

/// Saves a recording as `ch00.f32`/`ch00.json` … plus `scene.json`.
pub fn write_recording(dir: &Path, scene: &Scene, channels: &[Waveform]) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    for (m, ch) in channels.iter().enumerate() {
        ch.write_raw(&dir.join(format!("ch{m:02}")))?;
    }
    let path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(scene).expect("scene serializes");
    std::fs::write(&path, text).map_err(|e| file_err(&path, e))
}

/// Reads channels `ch00`, `ch01`, … until one is missing, and the scene
/// description when present.
pub fn read_recording(dir: &Path) -> Result<(Option<Scene>, Vec<Waveform>), PipelineError> {
    let mut channels = Vec::new();
    while dir.join(format!("ch{:02}.f32", channels.len())).exists() {
        channels.push(Waveform::read_raw(&dir.join(format!("ch{:02}", channels.len())))?);
    }
    if channels.is_empty() {
        return Err(PipelineError::File {
            path: dir.display().to_string(),
            reason: "no channel files ch00.f32, ch01.f32, …".into(),
        });
    }
    let path = dir.join("scene.json");
    let scene = if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| file_err(&path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| file_err(&path, e))?)
    } else {
        None
    };
    Ok((scene, channels))
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::File {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}
