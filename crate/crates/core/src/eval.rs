//! Detection metrics at an IoU threshold and fixed-threshold sweeps.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::write_json;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::postprocess::{extract_instances, TextInstance, DEFAULT_MIN_AREA};
use crate::raster::{BinaryMask, ProbMap};
use crate::threshold::binarize;

pub const MATCHING_RULE: &str = "greedy, detections in descending score order, each claims the unmatched gt of highest IoU at or above the threshold";

/// Pixel-mask intersection over union.
pub fn iou(a: &TextInstance, b: &TextInstance) -> Result<f64> {
    if a.mask.dims() != b.mask.dims() {
        let (x, y) = (a.mask.dims(), b.mask.dims());
        return Err(Error::shape("iou", &[x.0, x.1], &[y.0, y.1]));
    }
    let union_area = a.area + b.area;
    if union_area == 0 {
        return Err(Error::Degenerate {
            op: "iou",
            detail: "both masks are empty".into(),
        });
    }
    let inter = match a.bbox.intersect(&b.bbox) {
        None => 0,
        Some(r) => {
            let w = a.mask.width;
            (r.y0..r.y1)
                .map(|y| {
                    (r.x0..r.x1)
                        .filter(|&x| a.mask.data[y * w + x] && b.mask.data[y * w + x])
                        .count()
                })
                .sum()
        }
    };
    Ok(inter as f64 / (union_area - inter) as f64)
}

/// Matching outcome for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMatch {
    pub n_det: usize,
    pub n_gt: usize,
    /// `(detection index, gt index, iou)` for every true positive.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl ImageMatch {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }
}

/// Precision, recall and F from raw counts. Both empty is a vacuous
/// success; otherwise an empty side scores 0 precision (no detections) or
/// full recall (nothing to find).
pub fn prf(tp: usize, n_det: usize, n_gt: usize) -> (f64, f64, f64) {
    if n_det == 0 && n_gt == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if n_det == 0 { 0.0 } else { tp as f64 / n_det as f64 };
    let r = if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 };
    (p, r, fmeasure(p, r))
}

pub fn fmeasure(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn iou_matrix(dets: &[TextInstance], gts: &[TextInstance]) -> Result<Vec<Vec<f64>>> {
    dets.iter()
        .map(|d| gts.iter().map(|g| iou(d, g)).collect())
        .collect()
}

/// Greedy one-to-one matching of one image.
pub fn match_image(dets: &[TextInstance], gts: &[TextInstance], iou_thresh: f64) -> Result<ImageMatch> {
    if let Some(i) = dets.windows(2).position(|w| w[0].score < w[1].score) {
        return Err(Error::Contract(format!(
            "detections must be sorted by descending score (index {} < index {})",
            i,
            i + 1
        )));
    }
    let m = iou_matrix(dets, gts)?;
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (d, row) in m.iter().enumerate() {
        let best = row
            .iter()
            .enumerate()
            .filter(|&(g, &v)| !taken[g] && v >= iou_thresh)
            .fold(None, |acc: Option<(usize, f64)>, (g, &v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            taken[g] = true;
            pairs.push((d, g, v));
        }
    }
    Ok(ImageMatch {
        n_det: dets.len(),
        n_gt: gts.len(),
        pairs,
    })
}

/// Largest achievable number of one-to-one matches with IoU at or above the
/// threshold, by exhaustive search. Exponential; meant as a test oracle.
pub fn exhaustive_tp(dets: &[TextInstance], gts: &[TextInstance], iou_thresh: f64) -> Result<usize> {
    let m = iou_matrix(dets, gts)?;
    fn go(m: &[Vec<f64>], d: usize, used: &mut Vec<bool>, t: f64) -> usize {
        if d == m.len() {
            return 0;
        }
        let mut best = go(m, d + 1, used, t);
        for g in 0..used.len() {
            if !used[g] && m[d][g] >= t {
                used[g] = true;
                best = best.max(1 + go(m, d + 1, used, t));
                used[g] = false;
            }
        }
        best
    }
    Ok(go(&m, 0, &mut vec![false; gts.len()], iou_thresh))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub fmeasure: f64,
    pub tp: usize,
    pub n_det: usize,
    pub n_gt: usize,
    pub iou_threshold: f64,
    pub matching: String,
    pub per_image: Vec<ImageMatch>,
}

impl EvalReport {
    /// Pools counts over images before computing the rates.
    pub fn aggregate(per_image: Vec<ImageMatch>, iou_threshold: f64) -> Self {
        let tp = per_image.iter().map(ImageMatch::tp).sum();
        let n_det = per_image.iter().map(|m| m.n_det).sum();
        let n_gt = per_image.iter().map(|m| m.n_gt).sum();
        let (precision, recall, fmeasure) = prf(tp, n_det, n_gt);
        Self {
            precision,
            recall,
            fmeasure,
            tp,
            n_det,
            n_gt,
            iou_threshold,
            matching: MATCHING_RULE.to_string(),
            per_image,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,n_det,n_gt,tp,precision,recall,fmeasure\n");
        for (i, m) in self.per_image.iter().enumerate() {
            let (p, r, f) = prf(m.tp(), m.n_det, m.n_gt);
            let _ = writeln!(s, "{i},{},{},{},{p:.6},{r:.6},{f:.6}", m.n_det, m.n_gt, m.tp());
        }
        let _ = writeln!(
            s,
            "total,{},{},{},{:.6},{:.6},{:.6}",
            self.n_det, self.n_gt, self.tp, self.precision, self.recall, self.fmeasure
        );
        s
    }
}

/// Greedy matching of one image, wrapped as a report.
pub fn match_and_score(dets: &[TextInstance], gts: &[TextInstance], iou_thresh: f64) -> Result<EvalReport> {
    Ok(EvalReport::aggregate(vec![match_image(dets, gts, iou_thresh)?], iou_thresh))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub min_area: usize,
    pub iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_area: DEFAULT_MIN_AREA,
            iou: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_area == 0 {
            return Err(Error::Config("min_area must be at least 1".into()));
        }
        if !(self.iou > 0.0 && self.iou <= 1.0) {
            return Err(Error::Config(format!("iou threshold {} outside (0, 1]", self.iou)));
        }
        Ok(())
    }
}

fn check_aligned(maps: &[ProbMap], gts: &[Vec<TextInstance>], thresholds: Option<&[f64]>) -> Result<()> {
    if maps.len() != gts.len() || thresholds.is_some_and(|t| t.len() != maps.len()) {
        return Err(Error::shape(
            "evaluate",
            &[maps.len()],
            &[gts.len(), thresholds.map_or(maps.len(), <[f64]>::len)],
        ));
    }
    Ok(())
}

/// Binarizes image `i` at `thresholds[i]`, extracts and matches.
pub fn evaluate(
    maps: &[ProbMap],
    gts: &[Vec<TextInstance>],
    thresholds: &[f64],
    cfg: EvalConfig,
    exec: Execution,
) -> Result<EvalReport> {
    cfg.validate()?;
    check_aligned(maps, gts, Some(thresholds))?;
    let per = par::map_range(exec, maps.len(), |i| {
        let dets = extract_instances(&binarize(&maps[i], thresholds[i]), &maps[i], cfg.min_area)?;
        match_image(&dets, &gts[i], cfg.iou)
    });
    Ok(EvalReport::aggregate(per.into_iter().collect::<Result<_>>()?, cfg.iou))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub coarse_step: f64,
    pub fine_step: f64,
    pub eval: EvalConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            coarse_step: 0.1,
            fine_step: 0.01,
            eval: EvalConfig::default(),
        }
    }
}

/// `{k·step : k ≥ 1} ∩ (0, 1)`, each value rounded to 1e-9.
pub fn grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::Config(format!("grid step {step} outside (0, 1)")));
    }
    let mut out = Vec::new();
    let mut k = 1u64;
    loop {
        let t = ((k as f64 * step) * 1e9).round() / 1e9;
        if t >= 1.0 {
            break;
        }
        out.push(t);
        k += 1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub fmeasure: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean over images of the hard pixel dice against the gt foreground.
    pub pixel_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub coarse: Vec<SweepPoint>,
    pub fine: Vec<SweepPoint>,
    /// Best fixed threshold over both grids: highest F, ties broken by
    /// highest pixel dice, then by lowest threshold.
    pub oracle: SweepPoint,
    /// Mean per-image threshold and the F it achieves, if given.
    pub ith_point: Option<(f64, f64)>,
    pub ith_report: Option<EvalReport>,
}

impl SweepCurve {
    pub fn best_coarse(&self) -> &SweepPoint {
        best_point(&self.coarse)
    }

    pub fn median_coarse_f(&self) -> f64 {
        let mut f: Vec<f64> = self.coarse.iter().map(|p| p.fmeasure).collect();
        f.sort_by(f64::total_cmp);
        let n = f.len();
        if n % 2 == 1 {
            f[n / 2]
        } else {
            (f[n / 2 - 1] + f[n / 2]) / 2.0
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid,threshold,fmeasure,precision,recall,pixel_dice\n");
        for (name, pts) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            for p in pts.iter() {
                let _ = writeln!(
                    s,
                    "{name},{:.4},{:.6},{:.6},{:.6},{:.6}",
                    p.threshold, p.fmeasure, p.precision, p.recall, p.pixel_dice
                );
            }
        }
        let o = &self.oracle;
        let _ = writeln!(
            s,
            "oracle,{:.4},{:.6},{:.6},{:.6},{:.6}",
            o.threshold, o.fmeasure, o.precision, o.recall, o.pixel_dice
        );
        if let (Some((t, f)), Some(r)) = (self.ith_point, &self.ith_report) {
            let _ = writeln!(s, "ith,{t:.4},{f:.6},{:.6},{:.6},", r.precision, r.recall);
        }
        s
    }

    /// Line chart of F against threshold with the ITH point marked.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (480.0, 320.0, 40.0);
        let px = |t: f64| m + t * (w - 2.0 * m);
        let py = |f: f64| h - m - f * (h - 2.0 * m);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{:.1} {:.1} L{:.1} {:.1} L{:.1} {:.1}" fill="none" stroke="black"/>"#,
            px(0.0),
            py(1.0),
            px(0.0),
            py(0.0),
            px(1.0),
            py(0.0)
        );
        for i in 0..=10 {
            let v = i as f64 / 10.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{v:.1}</text>"#,
                px(v),
                py(0.0) + 14.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.1}</text>"#,
                px(0.0) - 4.0,
                py(v) + 3.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">threshold</text>"#,
            w / 2.0,
            h - 6.0
        );
        let _ = writeln!(s, r#"<text x="12" y="{:.1}" font-size="11">F</text>"#, h / 2.0);
        let line = |pts: &[SweepPoint]| {
            pts.iter()
                .map(|p| format!("{:.1},{:.1}", px(p.threshold), py(p.fmeasure)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#bbbbbb"/>"##,
            line(&self.fine)
        );
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
            line(&self.coarse)
        );
        for p in &self.coarse {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4"/>"##,
                px(p.threshold),
                py(p.fmeasure)
            );
        }
        if let Some((t, f)) = self.ith_point {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.1}" cy="{:.1}" r="5" fill="#d62728"/>"##,
                px(t),
                py(f)
            );
            let _ = writeln!(
                s,
                r##"<text x="{:.1}" y="{:.1}" font-size="10" fill="#d62728">ITH F={f:.3}</text>"##,
                px(t) + 7.0,
                py(f) - 7.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn best_point(points: &[SweepPoint]) -> &SweepPoint {
    points
        .iter()
        .reduce(|best, p| {
            let better = p.fmeasure > best.fmeasure
                || (p.fmeasure == best.fmeasure && p.pixel_dice > best.pixel_dice);
            if better {
                p
            } else {
                best
            }
        })
        .expect("grids are non-empty")
}

fn hard_dice(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn union_mask(gts: &[TextInstance], dims: (usize, usize)) -> BinaryMask {
    let mut fg = BinaryMask::new(dims.0, dims.1);
    for g in gts {
        for (d, &s) in fg.data.iter_mut().zip(&g.mask.data) {
            *d |= s;
        }
    }
    fg
}

/// F over the corpus at each fixed threshold of a coarse and a fine grid,
/// plus F with per-image thresholds `ith` when given.
pub fn sweep(
    maps: &[ProbMap],
    gts: &[Vec<TextInstance>],
    ith: Option<&[f64]>,
    cfg: SweepConfig,
    exec: Execution,
) -> Result<SweepCurve> {
    cfg.eval.validate()?;
    check_aligned(maps, gts, ith)?;
    let coarse_grid = grid(cfg.coarse_step)?;
    let fine_grid = grid(cfg.fine_step)?;
    let all: Vec<f64> = coarse_grid.iter().chain(&fine_grid).copied().collect();

    // per image, per threshold: (match, dice)
    let per_image = par::map_range(exec, maps.len(), |i| -> Result<Vec<(ImageMatch, f64)>> {
        let fg = union_mask(&gts[i], maps[i].dims());
        all.iter()
            .map(|&t| {
                let bm = binarize(&maps[i], t);
                let dets = extract_instances(&bm, &maps[i], cfg.eval.min_area)?;
                Ok((match_image(&dets, &gts[i], cfg.eval.iou)?, hard_dice(&bm, &fg)))
            })
            .collect()
    });
    let per_image: Vec<Vec<(ImageMatch, f64)>> = per_image.into_iter().collect::<Result<_>>()?;

    let n = maps.len().max(1) as f64;
    let points: Vec<SweepPoint> = all
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let (mut tp, mut nd, mut ng, mut dice) = (0, 0, 0, 0.0);
            for img in &per_image {
                let (m, d) = &img[j];
                tp += m.tp();
                nd += m.n_det;
                ng += m.n_gt;
                dice += d;
            }
            let (p, r, f) = prf(tp, nd, ng);
            SweepPoint {
                threshold: t,
                fmeasure: f,
                precision: p,
                recall: r,
                pixel_dice: dice / n,
            }
        })
        .collect();
    let (coarse, fine) = points.split_at(coarse_grid.len());
    let mut candidates: Vec<SweepPoint> = points.clone();
    candidates.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
    let oracle = best_point(&candidates).clone();

    let (ith_point, ith_report) = match ith {
        Some(t) => {
            let report = evaluate(maps, gts, t, cfg.eval, exec)?;
            let mean = t.iter().sum::<f64>() / t.len().max(1) as f64;
            (Some((mean, report.fmeasure)), Some(report))
        }
        None => (None, None),
    };
    Ok(SweepCurve {
        coarse: coarse.to_vec(),
        fine: fine.to_vec(),
        oracle,
        ith_point,
        ith_report,
    })
}
