//! Versioned checkpoint files: JSON metadata with every floating-point array
//! stored as base64 of little-endian binary64 so reloads are bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelParams;
use crate::diff::ParamVector;
use crate::error::{Error, Result};
use crate::oracle::{Environment, Region};
use crate::pln::{InputNormalization, PlnArchitecture, PlnParams, INPUT_DIM};
use crate::signal::AnalyticPulse;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "aqualoc-checkpoint";

/// Provenance of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub env: Environment,
    pub region: Region,
    pub n_train: usize,
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    architecture: PlnArchitecture,
    adapt_sound_speed: bool,
    pulse: AnalyticPulse,
    meta: TrainMeta,
    /// base64 of [sound_speed, receiver_depth, length_scale, shift(5), scale(5), weights...]
    payload: String,
    payload_len: usize,
    sha256: String,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let m = &ckpt.model;
    let mut flat = vec![m.sound_speed, m.receiver_depth, m.pln.length_scale];
    flat.extend(m.pln.norm.shift);
    flat.extend(m.pln.norm.scale);
    flat.extend(&m.pln.weights.values);
    let payload = encode(&flat);
    let header = Header {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        architecture: m.pln.arch.clone(),
        adapt_sound_speed: m.adapt_sound_speed,
        pulse: m.pulse,
        meta: ckpt.meta.clone(),
        sha256: digest(payload.as_bytes()),
        payload_len: flat.len(),
        payload,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&header)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probe: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptPayload(format!("unreadable checkpoint: {e}")))?;
    let version = probe.get("version").and_then(|v| v.as_u64());
    if probe.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(Error::CorruptPayload("not a checkpoint file".into()));
    }
    match version {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::VersionMismatch {
                found: v as u32,
                expected: CHECKPOINT_VERSION,
            })
        }
        None => return Err(Error::CorruptPayload("missing version".into())),
    }
    let h: Header = serde_json::from_value(probe).map_err(|e| Error::CorruptPayload(e.to_string()))?;
    if digest(h.payload.as_bytes()) != h.sha256 {
        return Err(Error::CorruptPayload("payload checksum mismatch".into()));
    }
    let bytes = STANDARD
        .decode(&h.payload)
        .map_err(|e| Error::CorruptPayload(format!("payload is not base64: {e}")))?;
    if bytes.len() != 8 * h.payload_len {
        return Err(Error::CorruptPayload("payload length mismatch".into()));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    h.architecture.validate()?;
    let layout = h.architecture.layout();
    let head = 3 + 2 * INPUT_DIM;
    if flat.len() != head + layout.len() {
        return Err(Error::CorruptPayload(format!(
            "expected {} weights for the stored architecture, found {}",
            layout.len(),
            flat.len().saturating_sub(head)
        )));
    }
    let mut shift = [0.0; INPUT_DIM];
    let mut scale = [0.0; INPUT_DIM];
    shift.copy_from_slice(&flat[3..3 + INPUT_DIM]);
    scale.copy_from_slice(&flat[3 + INPUT_DIM..head]);
    let model = ModelParams {
        pln: PlnParams {
            arch: h.architecture,
            norm: InputNormalization { shift, scale },
            length_scale: flat[2],
            weights: ParamVector::new(layout, flat[head..].to_vec())?,
        },
        sound_speed: flat[0],
        adapt_sound_speed: h.adapt_sound_speed,
        receiver_depth: flat[1],
        pulse: h.pulse,
    };
    model.validate()?;
    Ok(Checkpoint { model, meta: h.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::model_output;
    use crate::oracle::SourceLocation;
    use crate::pln::pln_init;
    use crate::signal::{make_pulse, TimeGrid};

    fn sample(seed: u64) -> Checkpoint {
        let region = Region::default_training();
        let norm = InputNormalization::from_region(&region, 120.0);
        let pln = pln_init(&PlnArchitecture::default(), norm, 500.0, seed).unwrap();
        Checkpoint {
            model: ModelParams {
                pln,
                sound_speed: 1500.0,
                adapt_sound_speed: false,
                receiver_depth: 120.0,
                pulse: make_pulse(750.0, 500.0, 0.05).unwrap().with_amplitude(0.1 + seed as f64 / 7.0),
            },
            meta: TrainMeta {
                env: Environment::reference(),
                region,
                n_train: 256,
                epochs: 3,
                initial_loss: 1.0 / 3.0,
                final_loss: 1e-7 / 3.0,
                seed,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..4 {
            let ck = sample(seed);
            let path = dir.path().join(format!("m{seed}.json"));
            save_checkpoint(&ck, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, ck);
            let bits = |c: &Checkpoint| c.model.pln.weights.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&ck));
        }
    }

    #[test]
    fn reload_reproduces_output_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample(9);
        let path = dir.path().join("m.json");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let grid = TimeGrid::new(4000.0, 2.0).unwrap();
        let p = SourceLocation::new(610.0, 20.0);
        let a = model_output(&ck.model, &p, &grid).unwrap();
        let b = model_output(&back.model, &p, &grid).unwrap();
        let bytes = |s: &crate::signal::SampledSignal| s.values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&sample(1), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn tampered_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&sample(1), &path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let p = v["payload"].as_str().unwrap().replacen('A', "B", 1);
        v["payload"] = p.into();
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn other_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&sample(1), &path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["version"] = 7.into();
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_checkpoint(Path::new("/nonexistent/model.json")).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}
