//! `SMK1` checkpoints: magic, u32 header length, JSON header, then
//! little-endian f32 values in layer order (batch-norm running statistics
//! follow each block's scale and shift).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Network, NetworkConfig, Scalar};

pub const MAGIC: &[u8; 4] = b"SMK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint truncated: need {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint config {found} does not match expected {expected}")]
    ConfigMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub num_params: usize,
    pub num_state: usize,
    /// Free-form provenance (task, seed, best epoch, …).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn layer_order<T: Scalar>(net: &Network<T>) -> Vec<T> {
    let lay = net.config.layout();
    let (p, s) = (&net.params, &net.state);
    let mut out = Vec::with_capacity(p.len() + s.len());
    for b in &lay.blocks {
        out.extend_from_slice(&p[b.weight.clone()]);
        if let Some(r) = &b.bias {
            out.extend_from_slice(&p[r.clone()]);
        }
        if let (Some(g), Some(be)) = (&b.gamma, &b.beta) {
            out.extend_from_slice(&p[g.clone()]);
            out.extend_from_slice(&p[be.clone()]);
            out.extend_from_slice(&s[b.state..b.state + 2 * b.c_out]);
        }
    }
    for r in [&lay.fc1_w, &lay.fc1_b, &lay.fc2_w, &lay.fc2_b] {
        out.extend_from_slice(&p[r.clone()]);
    }
    out
}

fn from_layer_order(config: &NetworkConfig, values: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let lay = config.layout();
    let mut params = vec![0.0; lay.num_params];
    let mut state = vec![0.0; lay.num_state];
    let mut it = values.iter().copied();
    let mut fill = |dst: &mut [f32]| dst.iter_mut().for_each(|d| *d = it.next().unwrap_or(0.0));
    for b in &lay.blocks {
        fill(&mut params[b.weight.clone()]);
        if let Some(r) = &b.bias {
            fill(&mut params[r.clone()]);
        }
        if let (Some(g), Some(be)) = (&b.gamma, &b.beta) {
            fill(&mut params[g.clone()]);
            fill(&mut params[be.clone()]);
            fill(&mut state[b.state..b.state + 2 * b.c_out]);
        }
    }
    for r in [&lay.fc1_w, &lay.fc1_b, &lay.fc2_w, &lay.fc2_b] {
        fill(&mut params[r.clone()]);
    }
    (params, state)
}

pub fn to_bytes<T: Scalar>(net: &Network<T>, meta: serde_json::Value) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: net.config.clone(),
        num_params: net.params.len(),
        num_state: net.state.len(),
        meta,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let values = layer_order(net);
    let mut out = Vec::with_capacity(8 + json.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

/// Parses a checkpoint; when `expected` is given the stored config must
/// match it exactly.
pub fn from_bytes(
    bytes: &[u8],
    expected: Option<&NetworkConfig>,
) -> Result<(Network<f32>, CheckpointHeader), CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated {
            expected: 8,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + hlen {
        return Err(CheckpointError::Truncated {
            expected: 8 + hlen,
            got: bytes.len(),
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Header(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if let Some(exp) = expected {
        if exp != &header.config {
            return Err(CheckpointError::ConfigMismatch {
                expected: serde_json::to_string(exp).unwrap_or_default(),
                found: serde_json::to_string(&header.config).unwrap_or_default(),
            });
        }
    }
    let lay = header.config.layout();
    if lay.num_params != header.num_params || lay.num_state != header.num_state {
        return Err(CheckpointError::Header(format!(
            "header counts {}/{} disagree with config layout {}/{}",
            header.num_params, header.num_state, lay.num_params, lay.num_state
        )));
    }
    let body = &bytes[8 + hlen..];
    let need = 4 * (lay.num_params + lay.num_state);
    if body.len() < need {
        return Err(CheckpointError::Truncated {
            expected: 8 + hlen + need,
            got: bytes.len(),
        });
    }
    if body.len() > need {
        return Err(CheckpointError::Header(format!("{} trailing bytes", body.len() - need)));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (params, state) = from_layer_order(&header.config, &values);
    let net = Network::from_parts(header.config.clone(), params, state)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((net, header))
}

pub fn save<T: Scalar>(net: &Network<T>, path: &Path, meta: serde_json::Value) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(net, meta))?;
    Ok(())
}

pub fn load(
    path: &Path,
    expected: Option<&NetworkConfig>,
) -> Result<(Network<f32>, CheckpointHeader), CheckpointError> {
    from_bytes(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Mode, Task, Tensor4};

    fn trained_ish() -> Network<f32> {
        let mut net = Network::<f32>::new(NetworkConfig::for_task(Task::Classification), 9).unwrap();
        let x = Tensor4::new((0..2 * 4240).map(|i| (i % 7) as f32).collect(), [2, 1, 40, 106]).unwrap();
        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        net.update_running_stats(&cache, 0.9);
        net
    }

    #[test]
    fn round_trip_is_bitwise() {
        let net = trained_ish();
        let bytes = to_bytes(&net, serde_json::json!({"task": "classification"}));
        assert_eq!(&bytes[..4], b"SMK1");
        let (back, header) = from_bytes(&bytes, Some(net.config())).unwrap();
        assert_eq!(back, net);
        assert_eq!(header.meta["task"], "classification");
    }

    #[test]
    fn body_is_layer_ordered() {
        let net = trained_ish();
        let bytes = to_bytes(&net, serde_json::Value::Null);
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8 + hlen..];
        let f = |i: usize| f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap());
        // conv1 weights come first, then γ (ones), β, running mean, running var
        assert_eq!(f(0), net.params()[0]);
        assert_eq!(f(144), 1.0);
        assert_eq!(f(144 + 16), 0.0);
        assert_eq!(f(144 + 32), net.state()[0]);
        assert_eq!(body.len(), 4 * (557_435 + 2 * (16 + 32 + 64)));
    }

    #[test]
    fn rejects_corruption() {
        let net = trained_ish();
        let bytes = to_bytes(&net, serde_json::Value::Null);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, None), Err(CheckpointError::BadMagic(_))));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3], None),
            Err(CheckpointError::Truncated { .. })
        ));
        let other = NetworkConfig::for_task(Task::Regression);
        assert!(matches!(
            from_bytes(&bytes, Some(&other)),
            Err(CheckpointError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let net = trained_ish();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.smk");
        save(&net, &path, serde_json::Value::Null).unwrap();
        assert_eq!(load(&path, None).unwrap().0, net);
    }
}
