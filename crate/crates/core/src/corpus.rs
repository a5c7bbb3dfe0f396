//! On-disk scene corpora.
//!
//! A corpus directory holds `manifest.json` and `data.bin`. For every scene,
//! `data.bin` contains the input map as `height·width` little-endian `f32`
//! values followed by the instance label map as `height·width` bytes (0 is
//! background, `i + 1` is the i-th instance), both row-major. The manifest
//! records each scene's spec, geometry and byte offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::postprocess::TextInstance;
use crate::raster::{BinaryMask, ProbMap};
use crate::synth::{generate_scene, RectGeom, Scene, SceneSpec, SpecDistribution};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const DATA: &str = "data.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::Config(format!("unknown split {s}; expected train, val, test or all"))),
        }
    }
}

/// Train/val/test sizes for `n` scenes taken in seed order: 70/15/15 with
/// rounding, the remainder going to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = ((n as f64) * 0.7).round() as usize;
    let val = (((n as f64) * 0.15).round() as usize).min(n - train);
    (train, val, n - train - val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub spec: SceneSpec,
    pub geometry: Vec<RectGeom>,
    pub input_offset: u64,
    pub input_len: u64,
    pub labels_offset: u64,
    pub labels_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub base_seed: u64,
    pub distribution: SpecDistribution,
    pub split: (usize, usize, usize),
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub base_seed: u64,
    pub distribution: SpecDistribution,
    pub scenes: Vec<Scene>,
}

impl Corpus {
    /// Scenes with seeds `base_seed..base_seed + n`.
    pub fn generate(n: usize, base_seed: u64, dist: &SpecDistribution, exec: Execution) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("corpus size must be at least 1".into()));
        }
        dist.validate()?;
        let scenes = par::map_range(exec, n, |i| generate_scene(&dist.sample(base_seed + i as u64)));
        Ok(Self {
            base_seed,
            distribution: dist.clone(),
            scenes: scenes.into_iter().collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn split(&self, which: Split) -> &[Scene] {
        let (tr, va, _) = split_sizes(self.scenes.len());
        match which {
            Split::Train => &self.scenes[..tr],
            Split::Val => &self.scenes[tr..tr + va],
            Split::Test => &self.scenes[tr + va..],
            Split::All => &self.scenes,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.scenes.len());
        for s in &self.scenes {
            let input_offset = blob.len() as u64;
            for &v in &s.input.data {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let labels_offset = blob.len() as u64;
            blob.extend_from_slice(&s.labels());
            entries.push(SceneEntry {
                spec: s.spec.clone(),
                geometry: s.geometry.clone(),
                input_offset,
                input_len: labels_offset - input_offset,
                labels_offset,
                labels_len: blob.len() as u64 - labels_offset,
            });
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            height: self.distribution.height,
            width: self.distribution.width,
            base_seed: self.base_seed,
            distribution: self.distribution.clone(),
            split: split_sizes(self.scenes.len()),
            scenes: entries,
        };
        let data_path = dir.join(DATA);
        fs::write(&data_path, &blob).map_err(|e| Error::io(&data_path, e))?;
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Format {
                path: manifest_path,
                detail: format!("unsupported version {}", manifest.version),
            });
        }
        let data_path = dir.join(DATA);
        let blob = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let bad = |detail: String| Error::Format {
            path: data_path.clone(),
            detail,
        };
        let mut scenes = Vec::with_capacity(manifest.scenes.len());
        for (i, e) in manifest.scenes.iter().enumerate() {
            let (h, w) = (e.spec.height, e.spec.width);
            let px = h * w;
            if e.input_len != 4 * px as u64 || e.labels_len != px as u64 {
                return Err(bad(format!("scene {i}: blob lengths do not match {h}x{w}")));
            }
            let slice = |off: u64, len: u64| {
                blob.get(off as usize..(off + len) as usize)
                    .ok_or_else(|| bad(format!("scene {i}: range {off}+{len} past end of file")))
            };
            let raw = slice(e.input_offset, e.input_len)?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let input = ProbMap::new(h, w, values)
                .map_err(|err| bad(format!("scene {i}: {err}")))?
                .with_scene(e.spec.seed);
            let labels = slice(e.labels_offset, e.labels_len)?;
            let n = labels.iter().copied().max().unwrap_or(0) as usize;
            let mut gt = Vec::with_capacity(n);
            for label in 1..=n {
                let mask = BinaryMask {
                    height: h,
                    width: w,
                    data: labels.iter().map(|&l| l as usize == label).collect(),
                };
                gt.push(TextInstance::from_mask(mask).map_err(|err| bad(format!("scene {i}: {err}")))?);
            }
            scenes.push(Scene {
                spec: e.spec.clone(),
                input,
                gt,
                geometry: e.geometry.clone(),
            });
        }
        Ok(Self {
            base_seed: manifest.base_seed,
            distribution: manifest.distribution,
            scenes,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
