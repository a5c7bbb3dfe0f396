//! From binary masks to scored text instances.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ProbMap};

/// Smallest instance kept by [`extract_instances`] by default.
pub const DEFAULT_MIN_AREA: usize = 20;

/// Axis-aligned extent, inclusive start and exclusive end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        (!b.is_empty()).then_some(b)
    }

    /// Tight extent of the set pixels, `None` for an empty mask.
    pub fn of_mask(mask: &BinaryMask) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x) {
                    let e = b.get_or_insert(BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                    e.x0 = e.x0.min(x);
                    e.x1 = e.x1.max(x + 1);
                    e.y1 = e.y1.max(y + 1);
                }
            }
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextInstance {
    pub mask: BinaryMask,
    pub bbox: BBox,
    pub area: usize,
    pub score: f64,
}

impl TextInstance {
    /// Builds a ground-truth instance (score 1) from a mask.
    pub fn from_mask(mask: BinaryMask) -> Result<Self> {
        let bbox = BBox::of_mask(&mask).ok_or_else(|| Error::Degenerate {
            op: "text instance",
            detail: "empty mask".into(),
        })?;
        let area = mask.count();
        Ok(Self {
            mask,
            bbox,
            area,
            score: 1.0,
        })
    }
}

/// 8-connected components of `bm` with at least `min_area` pixels, each
/// scored by the mean probability under it, sorted by descending score.
pub fn extract_instances(bm: &BinaryMask, prob: &ProbMap, min_area: usize) -> Result<Vec<TextInstance>> {
    if bm.dims() != prob.dims() {
        let (a, b) = (bm.dims(), prob.dims());
        return Err(Error::shape("extract_instances", &[a.0, a.1], &[b.0, b.1]));
    }
    if min_area == 0 {
        return Err(Error::Config("min_area must be at least 1".into()));
    }
    let (h, w) = bm.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !bm.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (y, x) = (p / w, p % w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if bm.data[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if pixels.len() < min_area {
            continue;
        }
        let score = pixels.iter().map(|&p| prob.data[p]).sum::<f64>() / pixels.len() as f64;
        let mask = BinaryMask::from_pixels(h, w, &pixels);
        let bbox = BBox::of_mask(&mask).expect("component is non-empty");
        out.push(TextInstance {
            area: pixels.len(),
            mask,
            bbox,
            score,
        });
    }
    // stable: equal scores keep raster discovery order
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Nearest-neighbour resize of `mask` into `bbox` on an empty canvas.
pub fn mask_to_canvas(mask: &BinaryMask, bbox: BBox, canvas: (usize, usize)) -> Result<BinaryMask> {
    if bbox.is_empty() || mask.height == 0 || mask.width == 0 {
        return Err(Error::Degenerate {
            op: "mask_to_canvas",
            detail: format!("bbox {bbox:?} or mask {}x{} has a zero side", mask.height, mask.width),
        });
    }
    if bbox.y1 > canvas.0 || bbox.x1 > canvas.1 {
        return Err(Error::Contract(format!("bbox {bbox:?} outside canvas {canvas:?}")));
    }
    let (bh, bw) = (bbox.height(), bbox.width());
    let mut out = BinaryMask::new(canvas.0, canvas.1);
    for dy in 0..bh {
        let sy = ((2 * dy + 1) * mask.height) / (2 * bh);
        for dx in 0..bw {
            let sx = ((2 * dx + 1) * mask.width) / (2 * bw);
            if mask.get(sy, sx) {
                out.set(bbox.y0 + dy, bbox.x0 + dx, true);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(mask: &mut BinaryMask, y0: usize, x0: usize, h: usize, w: usize) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                mask.set(y, x, true);
            }
        }
    }

    #[test]
    fn empty_mask_has_no_instances() {
        let bm = BinaryMask::new(8, 8);
        let pm = ProbMap::filled(8, 8, 0.3);
        assert!(extract_instances(&bm, &pm, 1).unwrap().is_empty());
    }

    #[test]
    fn two_rectangles() {
        let mut bm = BinaryMask::new(20, 20);
        rect(&mut bm, 1, 1, 4, 6);
        rect(&mut bm, 10, 3, 5, 7);
        let pm = ProbMap::filled(20, 20, 0.9);
        let inst = extract_instances(&bm, &pm, 20).unwrap();
        let mut areas: Vec<_> = inst.iter().map(|i| i.area).collect();
        areas.sort();
        assert_eq!(areas, vec![24, 35]);
        assert_eq!(inst[0].bbox.width() * inst[0].bbox.height(), inst[0].area);
    }

    #[test]
    fn diagonal_chain_is_one_component() {
        let bm = BinaryMask::from_fn(6, 6, |y, x| y == x);
        let pm = ProbMap::filled(6, 6, 1.0);
        let inst = extract_instances(&bm, &pm, 1).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].area, 6);
    }

    #[test]
    fn sorted_by_score_and_min_area_filters() {
        let mut bm = BinaryMask::new(10, 10);
        rect(&mut bm, 0, 0, 2, 2);
        rect(&mut bm, 5, 5, 3, 3);
        let pm = ProbMap::new(10, 10, (0..100).map(|i| i as f64 / 100.0).collect()).unwrap();
        let inst = extract_instances(&bm, &pm, 1).unwrap();
        assert!(inst[0].score > inst[1].score);
        assert_eq!(extract_instances(&bm, &pm, 5).unwrap().len(), 1);
    }

    #[test]
    fn shape_mismatch_errors() {
        let bm = BinaryMask::new(4, 4);
        let pm = ProbMap::filled(4, 5, 0.0);
        assert!(matches!(extract_instances(&bm, &pm, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn mask_to_canvas_identity_and_blocks() {
        let m = BinaryMask::from_fn(5, 7, |y, x| (y * 7 + x) % 3 == 0);
        let full = BBox { x0: 0, y0: 0, x1: 7, y1: 5 };
        assert_eq!(mask_to_canvas(&m, full, (5, 7)).unwrap(), m);

        let m = BinaryMask::from_fn(2, 2, |y, x| y == x);
        let out = mask_to_canvas(&m, BBox { x0: 1, y0: 1, x1: 5, y1: 5 }, (6, 6)).unwrap();
        let expect = BinaryMask::from_fn(6, 6, |y, x| {
            (1..5).contains(&y) && (1..5).contains(&x) && ((y - 1) / 2 == (x - 1) / 2)
        });
        assert_eq!(out, expect);
    }

    #[test]
    fn mask_to_canvas_degenerate() {
        let m = BinaryMask::new(2, 2);
        let zero = BBox { x0: 1, y0: 1, x1: 1, y1: 3 };
        assert!(matches!(mask_to_canvas(&m, zero, (4, 4)), Err(Error::Degenerate { .. })));
    }
}
