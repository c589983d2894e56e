//! Labeled cochleogram batches: `CQB1` persistence, stratified splits and
//! JSON manifests.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cochleo::{NUM_BANDS, NUM_FRAMES};
use crate::geometry::NUM_LANDMARK_CLASSES;
use crate::simulator::mix_seed;

pub const MAGIC: &[u8; 4] = b"CQB1";
/// Label 0 plus one label per landmark radius class.
pub const NUM_LABELS: usize = NUM_LANDMARK_CLASSES + 1;
pub const SAMPLE_LEN: usize = NUM_BANDS * NUM_FRAMES;
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 4 * SAMPLE_LEN + 1 + 1 + 4 + 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a cochleogram batch: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("batch truncated: need {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("raster shape {height}×{width}, expected {NUM_BANDS}×{NUM_FRAMES}")]
    Shape { height: usize, width: usize },
    #[error("invalid sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("split needs at least 10 samples, got {0}")]
    TooFew(usize),
    #[error("class {class} has {count} samples, split needs at least 3")]
    ClassTooSmall { class: u8, count: usize },
    #[error("split fractions: {0}")]
    Fractions(String),
}

/// A cochleogram with its class label (0 = empty) and, for landmarks, the
/// orientation in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// Row-major bands × frames raster.
    pub cochleogram: Vec<f32>,
    pub label: u8,
    pub gamma_deg: Option<f32>,
    pub scene_seed: u64,
}

impl LabeledSample {
    pub fn validate(&self) -> Result<(), String> {
        if self.cochleogram.len() != SAMPLE_LEN {
            return Err(format!("raster holds {} values, expected {SAMPLE_LEN}", self.cochleogram.len()));
        }
        if self.cochleogram.iter().any(|v| !v.is_finite()) {
            return Err("non-finite raster value".into());
        }
        if self.label as usize >= NUM_LABELS {
            return Err(format!("label {} out of range 0..{}", self.label, NUM_LABELS - 1));
        }
        match (self.label, self.gamma_deg) {
            (0, Some(_)) => Err("empty sample carries an orientation".into()),
            (l, None) if l > 0 => Err("landmark sample lacks an orientation".into()),
            (_, Some(g)) if !(g.abs() <= 60.0) => Err(format!("orientation {g}° outside ±60°")),
            _ => Ok(()),
        }
    }
}

fn validate_all(samples: &[LabeledSample]) -> Result<(), DatasetError> {
    for (index, s) in samples.iter().enumerate() {
        s.validate().map_err(|reason| DatasetError::InvalidSample { index, reason })?;
    }
    Ok(())
}

pub fn to_bytes(samples: &[LabeledSample]) -> Result<Vec<u8>, DatasetError> {
    validate_all(samples)?;
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * samples.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_BANDS as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_FRAMES as u32).to_le_bytes());
    for s in samples {
        for v in &s.cochleogram {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(s.label);
        out.push(s.gamma_deg.is_some() as u8);
        out.extend_from_slice(&s.gamma_deg.unwrap_or(0.0).to_le_bytes());
        out.extend_from_slice(&s.scene_seed.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<LabeledSample>, DatasetError> {
    if bytes.len() < HEADER_LEN {
        return Err(DatasetError::Truncated {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let count = u32_at(bytes, 4) as usize;
    let (height, width) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    if (height, width) != (NUM_BANDS, NUM_FRAMES) {
        return Err(DatasetError::Shape { height, width });
    }
    let expected = HEADER_LEN + count * RECORD_LEN;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    let mut samples = Vec::with_capacity(count);
    for rec in bytes[HEADER_LEN..expected].chunks_exact(RECORD_LEN) {
        let (raster, tail) = rec.split_at(4 * SAMPLE_LEN);
        let cochleogram = raster
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let gamma = f32::from_le_bytes(tail[2..6].try_into().expect("4 bytes"));
        samples.push(LabeledSample {
            cochleogram,
            label: tail[0],
            gamma_deg: (tail[1] != 0).then_some(gamma),
            scene_seed: u64::from_le_bytes(tail[6..14].try_into().expect("8 bytes")),
        });
    }
    validate_all(&samples)?;
    Ok(samples)
}

pub fn save_batch(path: &Path, samples: &[LabeledSample]) -> Result<(), DatasetError> {
    let bytes = to_bytes(samples)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_batch(path: &Path) -> Result<Vec<LabeledSample>, DatasetError> {
    from_bytes(&std::fs::read(path)?)
}

/// Per-class sample counts, indexed by label.
pub fn class_counts(samples: &[LabeledSample]) -> [usize; NUM_LABELS] {
    let mut counts = [0; NUM_LABELS];
    for s in samples {
        counts[(s.label as usize).min(NUM_LABELS - 1)] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.64,
            val: 0.16,
            test: 0.20,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DatasetError::Fractions(format!("{parts:?} must each lie in [0, 1]")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Fractions(format!("{parts:?} must sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `floor(n·f)`, tolerant of fractions like 0.64 + 0.16 landing a hair
/// below the exact product.
fn cut(n: usize, f: f64) -> usize {
    ((n as f64 * f + 1e-9).floor() as usize).min(n)
}

/// Stratified split: each class is shuffled with its own seeded stream and
/// cut at `floor(n·train)` and `floor(n·(train + val))`. Partitions come
/// back sorted.
pub fn split(labels: &[u8], spec: &SplitSpec) -> Result<Split, DatasetError> {
    spec.validate()?;
    if labels.len() < 10 {
        return Err(DatasetError::TooFew(labels.len()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 3 {
            return Err(DatasetError::ClassTooSmall {
                class: class as u8,
                count: idx.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, class as u64));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let (a, b) = (cut(n, spec.train), cut(n, spec.train + spec.val));
        out.train.extend_from_slice(&idx[..a]);
        out.val.extend_from_slice(&idx[a..b]);
        out.test.extend_from_slice(&idx[b..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Sidecar summary written next to a batch file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub class_counts: Vec<usize>,
    /// SHA-256 of the compact JSON generator config.
    pub config_hash: String,
    pub config: serde_json::Value,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("JSON values serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Manifest {
    pub fn new(samples: &[LabeledSample], config: serde_json::Value) -> Self {
        Self {
            format: String::from_utf8_lossy(MAGIC).into_owned(),
            count: samples.len(),
            height: NUM_BANDS,
            width: NUM_FRAMES,
            class_counts: class_counts(samples).to_vec(),
            config_hash: config_hash(&config),
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}
