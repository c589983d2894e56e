//! Array layout, landmark geometry and the sensor frame.
//!
//! Sensor frame: x forward (boresight), y left, z up, meters. Azimuth is the
//! rotation from +x towards +y; elevation lifts towards +z.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_MICS: usize = 32;
pub const MIN_MIC_SPACING: f64 = 0.004;
pub const MAX_MIC_RADIUS: f64 = 0.1;
pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
pub const CUT_FACTOR: f64 = 0.66;
/// Landmark sphere radii in millimetres, index = class id − 1.
pub const RADII_MM: [u32; 10] = [10, 15, 20, 25, 30, 35, 40, 45, 50, 55];
pub const NUM_LANDMARK_CLASSES: usize = RADII_MM.len();

const LAYOUT_RADIUS: f64 = 0.08;
const MAX_DRAWS_PER_MIC: usize = 10_000;

pub type Point3 = [f64; 3];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("expected {expected} microphones, got {got}")]
    MicCount { expected: usize, got: usize },
    #[error("microphones {a} and {b} are {dist:.4} m apart (minimum {MIN_MIC_SPACING} m)")]
    Spacing { a: usize, b: usize, dist: f64 },
    #[error("microphone {index} lies {dist:.4} m from the origin (maximum {MAX_MIC_RADIUS} m)")]
    Radius { index: usize, dist: f64 },
    #[error("non-finite coordinate in {what}")]
    NonFinite { what: String },
    #[error("invalid landmark: {0}")]
    Landmark(String),
    #[error("invalid pose: {0}")]
    Pose(String),
    #[error("cannot read array file {path}: {reason}")]
    File { path: String, reason: String },
}

/// Microphone positions plus emitter position, sensor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    mics: Vec<Point3>,
    emitter: Point3,
}

impl ArrayGeometry {
    /// Validated constructor: exactly 32 microphones, ≥ 4 mm apart, within 0.1 m.
    pub fn new(mics: Vec<Point3>, emitter: Point3) -> Result<Self, GeometryError> {
        let g = Self { mics, emitter };
        g.validate()?;
        Ok(g)
    }

    /// Skips layout validation. Used for synthetic layouts such as every
    /// microphone at the origin.
    pub fn new_unchecked(mics: Vec<Point3>, emitter: Point3) -> Self {
        Self { mics, emitter }
    }

    /// `n` coincident microphones and the emitter at the origin.
    pub fn collocated(n: usize) -> Self {
        Self::new_unchecked(vec![[0.0; 3]; n], [0.0; 3])
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.mics.len() != NUM_MICS {
            return Err(GeometryError::MicCount {
                expected: NUM_MICS,
                got: self.mics.len(),
            });
        }
        if self.mics.iter().chain([&self.emitter]).flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite {
                what: "array geometry".into(),
            });
        }
        for (i, p) in self.mics.iter().enumerate() {
            let r = norm(p);
            if r > MAX_MIC_RADIUS {
                return Err(GeometryError::Radius { index: i, dist: r });
            }
        }
        if let Some((a, b, dist)) = self.closest_pair() {
            if dist < MIN_MIC_SPACING {
                return Err(GeometryError::Spacing { a, b, dist });
            }
        }
        Ok(())
    }

    pub fn mics(&self) -> &[Point3] {
        &self.mics
    }

    pub fn emitter(&self) -> Point3 {
        self.emitter
    }

    pub fn num_mics(&self) -> usize {
        self.mics.len()
    }

    /// Closest microphone pair `(a, b, distance)`.
    pub fn closest_pair(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..self.mics.len() {
            for j in i + 1..self.mics.len() {
                let d = distance(&self.mics[i], &self.mics[j]);
                if best.is_none_or(|b| d < b.2) {
                    best = Some((i, j, d));
                }
            }
        }
        best
    }

    /// Layout mirrored through the x–z plane (y → −y).
    pub fn mirrored_y(&self) -> Self {
        let flip = |p: &Point3| [p[0], -p[1], p[2]];
        Self::new_unchecked(self.mics.iter().map(flip).collect(), flip(&self.emitter))
    }

    /// Loads `{mics: [[x,y,z],…], emitter: [x,y,z]}` and validates it.
    pub fn from_json_file(path: &Path) -> Result<Self, GeometryError> {
        let file_err = |reason: String| GeometryError::File {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        Self::from_json_str(&text).map_err(|e| match e {
            GeometryError::File { reason, .. } => file_err(reason),
            other => other,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, GeometryError> {
        let g: ArrayGeometry = serde_json::from_str(text).map_err(|e| GeometryError::File {
            path: "<string>".into(),
            reason: e.to_string(),
        })?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }

    /// Per-microphone steering delays for a far-field direction.
    pub fn steering_delays(&self, azimuth_deg: f64, elevation_deg: f64, c_sound: f64) -> Vec<f64> {
        steering_delays(&self.mics, azimuth_deg, elevation_deg, c_sound)
    }
}

/// Deterministic pseudo-random layout: 32 microphones rejection-sampled in
/// a 0.08 m disk in the y–z plane with 4 mm minimum spacing, emitter at the
/// origin. Falls back to a fixed grid if sampling stalls.
pub fn default_array(seed: u64) -> ArrayGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mics: Vec<Point3> = Vec::with_capacity(NUM_MICS);
    'outer: while mics.len() < NUM_MICS {
        for _ in 0..MAX_DRAWS_PER_MIC {
            let y = rng.random_range(-LAYOUT_RADIUS..LAYOUT_RADIUS);
            let z = rng.random_range(-LAYOUT_RADIUS..LAYOUT_RADIUS);
            if y * y + z * z > LAYOUT_RADIUS * LAYOUT_RADIUS {
                continue;
            }
            let p = [0.0, y, z];
            if mics.iter().all(|q| distance(q, &p) >= MIN_MIC_SPACING) {
                mics.push(p);
                continue 'outer;
            }
        }
        log::warn!("array sampling stalled for seed {seed}; using fallback grid");
        return fallback_grid();
    }
    ArrayGeometry::new_unchecked(mics, [0.0; 3])
}

/// 6×6 grid at 2.5 cm pitch with the four corners removed.
fn fallback_grid() -> ArrayGeometry {
    let pitch = 0.025;
    let mut mics = Vec::with_capacity(NUM_MICS);
    for i in 0..6 {
        for j in 0..6 {
            let corner = (i == 0 || i == 5) && (j == 0 || j == 5);
            if !corner {
                mics.push([0.0, (i as f64 - 2.5) * pitch, (j as f64 - 2.5) * pitch]);
            }
        }
    }
    ArrayGeometry::new_unchecked(mics, [0.0; 3])
}

/// Unit vector for (azimuth, elevation) in degrees.
pub fn direction(azimuth_deg: f64, elevation_deg: f64) -> Point3 {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Far-field arrival delays `τ_m = −(p_m·u)/c`, mean-subtracted.
///
/// A plane wave from `u` reaches microphone `m` at `t0 + τ_m`, so reading
/// channel `m` at `t + τ_m` aligns all channels.
pub fn steering_delays(
    positions: &[Point3],
    azimuth_deg: f64,
    elevation_deg: f64,
    c_sound: f64,
) -> Vec<f64> {
    let u = direction(azimuth_deg, elevation_deg);
    let mut tau: Vec<f64> = positions.iter().map(|p| -dot(p, &u) / c_sound).collect();
    if !tau.is_empty() {
        let mean = tau.iter().sum::<f64>() / tau.len() as f64;
        tau.iter_mut().for_each(|t| *t -= mean);
    }
    tau
}

pub fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Dish reflector cut from a sphere of radius `radius_d` at cut factor `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSpec {
    pub radius_d: f64,
    pub cut_factor_c: f64,
    pub class_id: u8,
}

impl LandmarkSpec {
    pub fn from_class(class_id: u8) -> Result<Self, GeometryError> {
        if !(1..=NUM_LANDMARK_CLASSES as u8).contains(&class_id) {
            return Err(GeometryError::Landmark(format!(
                "class id {class_id} outside 1..={NUM_LANDMARK_CLASSES}"
            )));
        }
        Ok(Self {
            radius_d: RADII_MM[class_id as usize - 1] as f64 / 1000.0,
            cut_factor_c: CUT_FACTOR,
            class_id,
        })
    }

    /// Radius in meters; must be one of the ten landmark radii.
    pub fn from_radius(radius_d: f64) -> Result<Self, GeometryError> {
        let steps = (radius_d - 0.010) / 0.005;
        let k = steps.round();
        if (steps - k).abs() > 1e-6 || !(0.0..NUM_LANDMARK_CLASSES as f64).contains(&k) {
            return Err(GeometryError::Landmark(format!(
                "radius {radius_d} m is not a landmark radius"
            )));
        }
        Self::from_class(k as u8 + 1)
    }

    /// Depth of the dish, `d·(1 − (2c − 1))`.
    pub fn dish_depth(&self) -> f64 {
        self.radius_d * (1.0 - (2.0 * self.cut_factor_c - 1.0))
    }
}

/// Landmark placement relative to the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePose {
    pub range_r: f64,
    pub azimuth_theta: f64,
    pub orientation_gamma: f64,
}

impl ScenePose {
    pub fn new(range_r: f64, azimuth_theta: f64, orientation_gamma: f64) -> Result<Self, GeometryError> {
        let pose = Self {
            range_r,
            azimuth_theta,
            orientation_gamma,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.range_r > 0.3 && self.range_r <= 3.0) {
            return Err(GeometryError::Pose(format!("range {} m outside (0.3, 3]", self.range_r)));
        }
        if !(-60.0..=60.0).contains(&self.azimuth_theta) {
            return Err(GeometryError::Pose(format!(
                "azimuth {}° outside [−60, 60]",
                self.azimuth_theta
            )));
        }
        if !(-60.0..=60.0).contains(&self.orientation_gamma) {
            return Err(GeometryError::Pose(format!(
                "orientation {}° outside [−60, 60]",
                self.orientation_gamma
            )));
        }
        Ok(())
    }

    /// Landmark position in the sensor frame (zero elevation).
    pub fn position(&self) -> Point3 {
        let u = direction(self.azimuth_theta, 0.0);
        [self.range_r * u[0], self.range_r * u[1], self.range_r * u[2]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_array_is_deterministic_and_valid() {
        let a = default_array(42);
        let b = default_array(42);
        assert_eq!(a, b);
        assert_eq!(a.num_mics(), 32);
        a.validate().unwrap();
        let (_, _, d) = a.closest_pair().unwrap();
        assert!(d >= MIN_MIC_SPACING);
        assert!(a.mics().iter().all(|p| p[0] == 0.0 && norm(p) <= 0.08));
        assert_ne!(default_array(43), a);
    }

    #[test]
    fn fallback_grid_satisfies_layout_rules() {
        fallback_grid().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_layouts() {
        let mut mics = default_array(1).mics().to_vec();
        mics.pop();
        assert!(matches!(
            ArrayGeometry::new(mics.clone(), [0.0; 3]),
            Err(GeometryError::MicCount { got: 31, .. })
        ));
        mics.push(mics[0]);
        assert!(matches!(
            ArrayGeometry::new(mics.clone(), [0.0; 3]),
            Err(GeometryError::Spacing { .. })
        ));
        *mics.last_mut().unwrap() = [0.0, 0.2, 0.0];
        assert!(matches!(
            ArrayGeometry::new(mics, [0.0; 3]),
            Err(GeometryError::Radius { index: 31, .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let g = default_array(5);
        let back = ArrayGeometry::from_json_str(&g.to_json()).unwrap();
        assert_eq!(g, back);
        let text = r#"{"mics": [[0,0,0]], "emitter": [0,0,0]}"#;
        assert!(matches!(
            ArrayGeometry::from_json_str(text),
            Err(GeometryError::MicCount { .. })
        ));
    }

    #[test]
    fn collocated_mics_have_zero_delays() {
        let g = ArrayGeometry::collocated(32);
        assert!(g.steering_delays(37.0, 10.0, 343.0).iter().all(|&t| t == 0.0));
    }

    #[test]
    fn broadside_pair_delay_difference() {
        let pos = [[0.0, 0.05, 0.0], [0.0, -0.05, 0.0]];
        let tau = steering_delays(&pos, 90.0, 0.0, 343.0);
        let diff = tau[1] - tau[0];
        // 0.1 m / 343 m/s
        assert!((diff - 291.545e-6).abs() < 1e-9, "{diff}");
    }

    #[test]
    fn class_ids_round_trip_with_radius() {
        for class in 1..=10u8 {
            let spec = LandmarkSpec::from_class(class).unwrap();
            assert_eq!(spec.cut_factor_c, 0.66);
            let k = ((spec.radius_d - 0.010) / 0.005).round() as u8 + 1;
            assert_eq!(k, class);
            assert_eq!(LandmarkSpec::from_radius(spec.radius_d).unwrap(), spec);
        }
        assert!(LandmarkSpec::from_class(0).is_err());
        assert!(LandmarkSpec::from_class(11).is_err());
        assert!(LandmarkSpec::from_radius(0.012).is_err());
        let d55 = LandmarkSpec::from_class(10).unwrap();
        assert!((d55.dish_depth() - 0.68 * 0.055).abs() < 1e-15);
    }

    #[test]
    fn pose_bounds() {
        assert!(ScenePose::new(1.5, 20.0, 0.0).is_ok());
        assert!(ScenePose::new(0.3, 0.0, 0.0).is_err());
        assert!(ScenePose::new(3.0, 60.0, -60.0).is_ok());
        assert!(ScenePose::new(3.01, 0.0, 0.0).is_err());
        assert!(ScenePose::new(1.0, 61.0, 0.0).is_err());
        assert!(ScenePose::new(1.0, 0.0, -60.5).is_err());
    }

    proptest! {
        #[test]
        fn delays_are_zero_mean(seed in 0u64..200, az in -90.0f64..90.0, el in -90.0f64..90.0) {
            let g = default_array(seed);
            let tau = g.steering_delays(az, el, 343.0);
            let mean = tau.iter().sum::<f64>() / tau.len() as f64;
            prop_assert!(mean.abs() < 1e-12);
        }

        #[test]
        fn mirrored_layout_mirrors_azimuth(seed in 0u64..200, az in -90.0f64..90.0) {
            let g = default_array(seed);
            let m = g.mirrored_y();
            let a = g.steering_delays(az, 0.0, 343.0);
            let b = m.steering_delays(-az, 0.0, 343.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
