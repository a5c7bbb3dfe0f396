//! Single-channel rasters: probability maps and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel text probability over an `height × width` canvas, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub provenance: Provenance,
}

/// Where a map came from: the scene seed (if any) and its scale relative to
/// the scene canvas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene: Option<u64>,
    pub scale: f64,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            scene: None,
            scale: 1.0,
        }
    }
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("prob map", &[height, width], &[data.len()]));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain {
                op: "prob map",
                detail: format!("value {v} outside [0, 1]"),
            });
        }
        Ok(Self {
            height,
            width,
            data,
            provenance: Provenance::default(),
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
            provenance: Provenance::default(),
        }
    }

    pub fn with_scene(mut self, scene: u64) -> Self {
        self.provenance.scene = Some(scene);
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[usize]) -> Self {
        let mut mask = Self::new(height, width);
        for &p in pixels {
            mask.data[p] = true;
        }
        mask
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn pixels(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}
