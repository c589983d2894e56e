//! Synthetic 32-channel recordings of landmark and clutter scenes.
//!
//! Echoes are placed with the same fractional-delay kernel the beamformer
//! uses. The landmark dish is represented by a small set of glints:
//!
//! * rim: delay 0, amplitude `rim_amplitude` (0.4)
//! * cavity: delay `2·h·cos γ / c` with dish depth `h = 0.68·d`, amplitude `cos² γ`
//! * mount edge: delay `2·(mount_depth + mount_lever·sin γ) / c`, amplitude
//!   `mount_amplitude`. The mounting plate sits on one side of the dish, so
//!   this glint is the only part of the echo that is odd in γ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    direction, distance, ArrayGeometry, GeometryError, LandmarkSpec, Point3, ScenePose,
    DEFAULT_SPEED_OF_SOUND, NUM_LANDMARK_CLASSES,
};
use crate::signals::{add_delayed, Interpolation, SignalError, Waveform};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("echo from {source_desc} ends at {end_s:.6} s, beyond the {window_s:.6} s record window")]
    EchoOutOfWindow {
        source_desc: String,
        end_s: f64,
        window_s: f64,
    },
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("chirp sampled at {chirp} Hz but recording at {record} Hz")]
    ChirpRate { chirp: f64, record: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Constants of the glint surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectorModel {
    pub rim_amplitude: f64,
    pub mount_amplitude: f64,
    /// Distance (m) from the rim plane back to the mounting edge at γ = 0.
    pub mount_depth: f64,
    /// Lateral offset (m) of the mounting edge from the rotation axis.
    pub mount_lever: f64,
    /// Overall reflectivity applied to every glint.
    pub gain: f64,
}

impl Default for ReflectorModel {
    fn default() -> Self {
        Self {
            rim_amplitude: 0.4,
            mount_amplitude: 0.25,
            mount_depth: 0.06,
            mount_lever: 0.05,
            gain: 1.0,
        }
    }
}

impl ReflectorModel {
    /// The two-glint variant (rim and cavity only).
    pub fn two_glint() -> Self {
        Self {
            mount_amplitude: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlintKind {
    Rim,
    Cavity,
    Mount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Glint {
    pub kind: GlintKind,
    /// Extra two-way delay after the rim return, seconds.
    pub delay: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectorResponse {
    pub glints: Vec<Glint>,
}

impl ReflectorResponse {
    pub fn glint(&self, kind: GlintKind) -> Option<&Glint> {
        self.glints.iter().find(|g| g.kind == kind)
    }

    /// Spacing (Hz) of the rim/cavity comb notches, `1/δt`.
    pub fn notch_spacing(&self) -> Option<f64> {
        self.glint(GlintKind::Cavity)
            .filter(|g| g.delay > 0.0)
            .map(|g| 1.0 / g.delay)
    }
}

/// Glint delays and amplitudes for a landmark at orientation `gamma_deg`.
pub fn reflector_response(
    spec: &LandmarkSpec,
    gamma_deg: f64,
    model: &ReflectorModel,
    c_sound: f64,
) -> ReflectorResponse {
    let g = gamma_deg.to_radians();
    let depth = spec.dish_depth();
    let mut glints = vec![
        Glint {
            kind: GlintKind::Rim,
            delay: 0.0,
            amplitude: model.rim_amplitude,
        },
        Glint {
            kind: GlintKind::Cavity,
            delay: (2.0 * depth * g.cos() / c_sound).max(0.0),
            amplitude: g.cos().powi(2),
        },
    ];
    if model.mount_amplitude > 0.0 {
        glints.push(Glint {
            kind: GlintKind::Mount,
            delay: (2.0 * (model.mount_depth + model.mount_lever * g.sin()) / c_sound).max(0.0),
            amplitude: model.mount_amplitude,
        });
    }
    ReflectorResponse { glints }
}

/// Ideal point reflector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Point3,
    pub reflectivity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedLandmark {
    pub spec: LandmarkSpec,
    pub pose: ScenePose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub landmark: Option<PlacedLandmark>,
    pub clutter: Vec<Scatterer>,
    pub noise_rms: f64,
    pub seed: u64,
}

impl Scene {
    pub fn empty(seed: u64) -> Self {
        Self {
            landmark: None,
            clutter: Vec::new(),
            noise_rms: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.noise_rms >= 0.0) {
            return Err(SimError::Scene(format!("noise_rms {} < 0", self.noise_rms)));
        }
        if let Some((i, s)) = self
            .clutter
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.reflectivity >= 0.0))
        {
            return Err(SimError::Scene(format!(
                "clutter {i} has negative reflectivity {}",
                s.reflectivity
            )));
        }
        if let Some(l) = &self.landmark {
            l.pose.validate()?;
        }
        Ok(())
    }

    /// Scene containing the sources of both (noise settings from `self`).
    pub fn union(&self, other: &Scene) -> Result<Scene, SimError> {
        if self.landmark.is_some() && other.landmark.is_some() {
            return Err(SimError::Scene("union of two landmark scenes".into()));
        }
        let mut clutter = self.clutter.clone();
        clutter.extend_from_slice(&other.clutter);
        Ok(Scene {
            landmark: self.landmark.or(other.landmark),
            clutter,
            noise_rms: self.noise_rms,
            seed: self.seed,
        })
    }
}

/// Recording parameters shared by every synthesized scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    pub sample_rate: f64,
    pub duration: f64,
    pub c_sound: f64,
    pub interpolation: Interpolation,
    pub reflector: ReflectorModel,
}

impl Default for SynthesisParams {
    /// 36.4 ms at 450 kHz, 343 m/s
    fn default() -> Self {
        Self {
            sample_rate: 450e3,
            duration: 36.4e-3,
            c_sound: DEFAULT_SPEED_OF_SOUND,
            interpolation: Interpolation::Linear,
            reflector: ReflectorModel::default(),
        }
    }
}

impl SynthesisParams {
    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }
}

struct EchoSource {
    desc: String,
    position: Point3,
    gain: f64,
    extra_delay: f64,
}

fn echo_sources(scene: &Scene, params: &SynthesisParams) -> Vec<EchoSource> {
    let mut sources = Vec::new();
    if let Some(l) = &scene.landmark {
        let response = reflector_response(
            &l.spec,
            l.pose.orientation_gamma,
            &params.reflector,
            params.c_sound,
        );
        let p = l.pose.position();
        for g in response.glints {
            sources.push(EchoSource {
                desc: format!("landmark {:?} glint", g.kind),
                position: p,
                gain: params.reflector.gain * g.amplitude,
                extra_delay: g.delay,
            });
        }
    }
    for (i, s) in scene.clutter.iter().enumerate() {
        sources.push(EchoSource {
            desc: format!("clutter scatterer {i} at {:?}", s.position),
            position: s.position,
            gain: s.reflectivity,
            extra_delay: 0.0,
        });
    }
    sources
}

/// One waveform per microphone: every echo is the chirp delayed by the
/// emitter→scatterer→microphone path and scaled by `gain/(r_out·r_back)`,
/// plus independent Gaussian noise of `scene.noise_rms`.
pub fn synthesize_recording(
    scene: &Scene,
    geometry: &ArrayGeometry,
    chirp: &Waveform,
    params: &SynthesisParams,
) -> Result<Vec<Waveform>, SimError> {
    scene.validate()?;
    if chirp.sample_rate() != params.sample_rate {
        return Err(SimError::ChirpRate {
            chirp: chirp.sample_rate(),
            record: params.sample_rate,
        });
    }
    let fs = params.sample_rate;
    let n = params.num_samples();
    let window_s = n as f64 / fs;
    let emitter = geometry.emitter();
    let mut channels = vec![vec![0.0; n]; geometry.num_mics()];
    for src in echo_sources(scene, params) {
        let r_out = distance(&emitter, &src.position);
        for (m, mic) in geometry.mics().iter().enumerate() {
            let r_back = distance(&src.position, mic);
            let delay_s = (r_out + r_back) / params.c_sound + src.extra_delay;
            let end_s = delay_s + chirp.duration();
            if end_s > window_s {
                return Err(SimError::EchoOutOfWindow {
                    source_desc: src.desc,
                    end_s,
                    window_s,
                });
            }
            let spread = (r_out * r_back).max(1e-12);
            add_delayed(
                &mut channels[m],
                chirp.samples(),
                delay_s * fs,
                src.gain / spread,
                params.interpolation,
            );
        }
    }
    if scene.noise_rms > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        for ch in channels.iter_mut() {
            for v in ch.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += scene.noise_rms * z;
            }
        }
    }
    channels
        .into_iter()
        .map(|c| Waveform::new(c, fs).map_err(SimError::from))
        .collect()
}

/// Inclusive-exclusive range for uniform draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

impl Span {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..self.max)
        } else {
            self.min
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClutterConfig {
    pub landmark_scene_max: usize,
    pub empty_scene_min: usize,
    pub empty_scene_max: usize,
    pub range: Span,
    pub azimuth: Span,
    pub elevation: Span,
    pub reflectivity: Span,
    /// Clutter closer than this (in range, m) *and* `exclusion_azimuth`
    /// (deg) to the landmark is redrawn.
    pub exclusion_range: f64,
    pub exclusion_azimuth: f64,
}

impl Default for ClutterConfig {
    fn default() -> Self {
        Self {
            landmark_scene_max: 5,
            empty_scene_min: 1,
            empty_scene_max: 8,
            range: Span::new(0.5, 4.5),
            azimuth: Span::new(-70.0, 70.0),
            elevation: Span::new(-15.0, 15.0),
            reflectivity: Span::new(0.05, 0.5),
            exclusion_range: 0.3,
            exclusion_azimuth: 10.0,
        }
    }
}

/// Sampling plan for a synthetic measurement campaign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_landmark: usize,
    pub n_empty: usize,
    pub seed: u64,
    pub noise_rms: f64,
    pub landmark_range: Span,
    pub landmark_azimuth: Span,
    pub landmark_gamma: Span,
    pub clutter: ClutterConfig,
}

impl Default for DatasetConfig {
    /// 1000 landmark and 4600 empty scenes, about the 1:4.6 campaign mix.
    fn default() -> Self {
        Self {
            n_landmark: 1000,
            n_empty: 4600,
            seed: 0,
            noise_rms: 0.002,
            landmark_range: Span::new(0.5, 3.0),
            landmark_azimuth: Span::new(-60.0, 60.0),
            landmark_gamma: Span::new(-60.0, 60.0),
            clutter: ClutterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Landmark,
    Empty,
}

/// SplitMix64 finalizer; derives independent per-scene seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DatasetConfig {
    pub fn total(&self) -> usize {
        self.n_landmark + self.n_empty
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.total() == 0 {
            return Err(SimError::Scene("dataset needs at least one scene".into()));
        }
        if !(self.noise_rms >= 0.0) {
            return Err(SimError::Scene("noise_rms must be ≥ 0".into()));
        }
        let c = &self.clutter;
        if c.empty_scene_min > c.empty_scene_max {
            return Err(SimError::Scene("empty_scene_min > empty_scene_max".into()));
        }
        Ok(())
    }

    /// Seeded shuffle of `n_landmark` landmark and `n_empty` empty slots.
    pub fn scene_kinds(&self) -> Vec<SceneKind> {
        let mut kinds = vec![SceneKind::Landmark; self.n_landmark];
        kinds.extend(std::iter::repeat_n(SceneKind::Empty, self.n_empty));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, u64::MAX));
        kinds.shuffle(&mut rng);
        kinds
    }

    /// Scene number `index` of the given kind. Pure in `(seed, index, kind)`,
    /// so replacement scenes can be drawn past the planned count.
    pub fn scene(&self, index: u64, kind: SceneKind) -> Scene {
        let seed = mix_seed(self.seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.clutter;
        let (landmark, n_clutter) = match kind {
            SceneKind::Landmark => {
                let class = rng.random_range(1..=NUM_LANDMARK_CLASSES as u8);
                let spec = LandmarkSpec::from_class(class).expect("class in range");
                let pose = ScenePose {
                    range_r: self.landmark_range.draw(&mut rng),
                    azimuth_theta: self.landmark_azimuth.draw(&mut rng),
                    orientation_gamma: self.landmark_gamma.draw(&mut rng),
                };
                let n = rng.random_range(0..=c.landmark_scene_max);
                (Some(PlacedLandmark { spec, pose }), n)
            }
            SceneKind::Empty => (None, rng.random_range(c.empty_scene_min..=c.empty_scene_max)),
        };
        let mut clutter = Vec::with_capacity(n_clutter);
        while clutter.len() < n_clutter {
            let mut s = draw_scatterer(c, &mut rng);
            if let Some(l) = &landmark {
                for _ in 0..100 {
                    if !in_exclusion(c, &s, &l.pose) {
                        break;
                    }
                    s = draw_scatterer(c, &mut rng);
                }
                if in_exclusion(c, &s, &l.pose) {
                    continue;
                }
            }
            clutter.push(s);
        }
        Scene {
            landmark,
            clutter,
            noise_rms: self.noise_rms,
            seed,
        }
    }

    /// The planned scene list, in campaign order.
    pub fn scenes(&self) -> Vec<Scene> {
        self.scene_kinds()
            .into_iter()
            .enumerate()
            .map(|(i, k)| self.scene(i as u64, k))
            .collect()
    }
}

fn draw_scatterer(c: &ClutterConfig, rng: &mut impl Rng) -> Scatterer {
    let r = c.range.draw(rng);
    let az = c.azimuth.draw(rng);
    let el = c.elevation.draw(rng);
    let u = direction(az, el);
    Scatterer {
        position: [r * u[0], r * u[1], r * u[2]],
        reflectivity: c.reflectivity.draw(rng),
    }
}

fn in_exclusion(c: &ClutterConfig, s: &Scatterer, pose: &ScenePose) -> bool {
    let p = s.position;
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let az = p[1].atan2(p[0]).to_degrees();
    (r - pose.range_r).abs() < c.exclusion_range && (az - pose.azimuth_theta).abs() < c.exclusion_azimuth
}

/// Lazily synthesizes every planned scene of `config`.
pub fn generate_dataset<'a>(
    config: &'a DatasetConfig,
    geometry: &'a ArrayGeometry,
    chirp: &'a Waveform,
    params: &'a SynthesisParams,
) -> impl Iterator<Item = Result<(Scene, Vec<Waveform>), SimError>> + 'a {
    config.scenes().into_iter().map(move |scene| {
        let rec = synthesize_recording(&scene, geometry, chirp, params)?;
        Ok((scene, rec))
    })
}
