//! Checkpoint directories: `manifest.json` with the config, training
//! progress and a tensor index, plus `weights.bin` holding every tensor as
//! little-endian `f64` values at the recorded offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Detector, DetectorConfig, TrainProgress};
use crate::corpus::{read_json, write_json};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    offset: u64,
    /// Number of values.
    len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: DetectorConfig,
    progress: TrainProgress,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(det: &Detector, progress: &TrainProgress, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(det.store.num_scalars() * 8);
    let mut tensors = Vec::new();
    for (name, t) in det.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            len: t.numel() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join(WEIGHTS);
    fs::write(&path, &blob).map_err(|e| Error::io(&path, e))?;
    write_json(
        &dir.join(MANIFEST),
        &Manifest {
            version: CHECKPOINT_VERSION,
            config: det.cfg.clone(),
            progress: progress.clone(),
            tensors,
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<(Detector, TrainProgress)> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: mpath,
            detail: format!("unsupported checkpoint version {}", manifest.version),
        });
    }
    let wpath = dir.join(WEIGHTS);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut det = Detector::new(manifest.config)?;
    if manifest.tensors.len() != det.store.len() {
        return Err(Error::Format {
            path: mpath,
            detail: format!(
                "{} tensors recorded, model has {}",
                manifest.tensors.len(),
                det.store.len()
            ),
        });
    }
    for e in &manifest.tensors {
        let start = e.offset as usize;
        let end = start + 8 * e.len as usize;
        let bytes = blob.get(start..end).ok_or_else(|| Error::Format {
            path: wpath.clone(),
            detail: format!("tensor {} extends past end of file", e.name),
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        det.store.assign(&e.name, t).map_err(|err| Error::Format {
            path: mpath.clone(),
            detail: err.to_string(),
        })?;
    }
    Ok((det, manifest.progress))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Variant;
    use crate::rng::seeded;

    #[test]
    fn round_trip_restores_weights_and_progress() {
        let mut cfg = DetectorConfig::for_canvas(16, 16);
        cfg.variant = Variant::Full;
        cfg.seed = 9;
        let mut det = Detector::new(cfg).unwrap();
        let ids: Vec<_> = det.store.ids().collect();
        for (j, id) in ids.into_iter().enumerate() {
            det.store.get_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| {
                *v += (i as f64 * 0.37 + j as f64).sin() * 1e-3;
            });
        }
        let progress = TrainProgress {
            epoch: 0,
            history: vec![],
            rng: seeded(4),
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&det, &progress, dir.path()).unwrap();
        let (back, p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, det);
        assert_eq!(p2, progress);

        fs::write(dir.path().join(WEIGHTS), [0u8; 16]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
    }
}
