//! Synthetic text-like scenes.
//!
//! A scene is a handful of non-touching rotated rectangles with large aspect
//! ratios. The ground truth is their rasterized masks; the model input is
//! that mask blurred, passed through a per-scene gamma curve and perturbed
//! with Gaussian noise. Gamma moves the half-intensity contour, so the best
//! fixed binarization threshold differs from scene to scene.
//!
//! Randomness is split into independent streams derived from the scene seed:
//! stream 0 draws the degradation parameters (see [`SpecDistribution`]),
//! stream 1 the geometry and stream 2 the noise. Changing the gamma of a
//! spec therefore leaves its geometry untouched.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::TextInstance;
use crate::raster::{BinaryMask, ProbMap};
use crate::rng::{mix, seeded, Rng};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
pub const MIN_INSTANCE_AREA: usize = 20;

const STREAM_SPEC: u64 = 0;
const STREAM_GEOMETRY: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Fully resolved parameters of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_instances: usize,
    /// Inclusive bounds on the long/short side ratio.
    pub aspect_range: (f64, f64),
    /// Inclusive bounds on the short side, in pixels.
    pub short_side: (f64, f64),
    /// Minimum Chebyshev distance between pixels of different instances.
    pub min_gap: usize,
    /// Gaussian blur standard deviation in pixels; 0 disables blurring.
    pub blur_sigma: f64,
    pub gamma: f64,
    pub noise_std: f64,
}

impl SceneSpec {
    /// An undegraded scene: no blur, unit gamma, no noise.
    pub fn clean(seed: u64, height: usize, width: usize, n_instances: usize) -> Self {
        Self {
            seed,
            height,
            width,
            n_instances,
            aspect_range: (1.0, 20.0),
            short_side: (4.0, 10.0),
            min_gap: 2,
            blur_sigma: 0.0,
            gamma: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return fail(format!("canvas {}x{} is too small", self.height, self.width));
        }
        if self.n_instances > 6 {
            return fail(format!("n_instances {} exceeds 6", self.n_instances));
        }
        let (a0, a1) = self.aspect_range;
        if !(1.0 <= a0 && a0 <= a1 && a1 <= 20.0) {
            return fail(format!("aspect range {a0}..{a1} outside [1, 20]"));
        }
        let (s0, s1) = self.short_side;
        if !(s0 >= 1.0 && s0 <= s1) {
            return fail(format!("short side range {s0}..{s1} is invalid"));
        }
        if !(0.0..=3.0).contains(&self.blur_sigma) {
            return fail(format!("blur sigma {} outside [0, 3]", self.blur_sigma));
        }
        if !(0.4..=2.5).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0.4, 2.5]", self.gamma));
        }
        if !(0.0..=0.08).contains(&self.noise_std) {
            return fail(format!("noise std {} outside [0, 0.08]", self.noise_std));
        }
        Ok(())
    }
}

/// Geometry of one placed rectangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectGeom {
    pub cx: f64,
    pub cy: f64,
    pub long: f64,
    pub short: f64,
    pub angle_deg: f64,
}

impl RectGeom {
    pub fn aspect(&self) -> f64 {
        self.long / self.short
    }

    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (hl, hs) = (self.long / 2.0, self.short / 2.0);
        ((hl * c).abs() + (hs * s).abs(), (hl * s).abs() + (hs * c).abs())
    }

    /// Pixels whose centres fall inside the rectangle.
    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (hl, hs) = (self.long / 2.0, self.short / 2.0);
        let (ex, ey) = self.half_extents();
        let y0 = (self.cy - ey).floor().max(0.0) as usize;
        let y1 = ((self.cy + ey).ceil() as usize).min(height);
        let x0 = (self.cx - ex).floor().max(0.0) as usize;
        let x1 = ((self.cx + ex).ceil() as usize).min(width);
        let mut mask = BinaryMask::new(height, width);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - self.cx;
                let dy = y as f64 + 0.5 - self.cy;
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if u.abs() <= hl && v.abs() <= hs {
                    mask.set(y, x, true);
                }
            }
        }
        mask
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub input: ProbMap,
    pub gt: Vec<TextInstance>,
    pub geometry: Vec<RectGeom>,
}

impl Scene {
    pub fn foreground(&self) -> BinaryMask {
        let mut fg = BinaryMask::new(self.spec.height, self.spec.width);
        for inst in &self.gt {
            for (d, &s) in fg.data.iter_mut().zip(&inst.mask.data) {
                *d |= s;
            }
        }
        fg
    }

    /// Instance label map: 0 for background, `i + 1` for instance `i`.
    pub fn labels(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.spec.height * self.spec.width];
        for (i, inst) in self.gt.iter().enumerate() {
            for (d, &s) in out.iter_mut().zip(&inst.mask.data) {
                if s {
                    *d = i as u8 + 1;
                }
            }
        }
        out
    }
}

fn sample_rect(spec: &SceneSpec, rng: &mut Rng) -> Option<RectGeom> {
    let (s0, s1) = spec.short_side;
    let short = if s1 > s0 { rng.random_range(s0..=s1) } else { s0 };
    let max_long = 0.9 * spec.height.min(spec.width) as f64;
    let (a0, mut a1) = spec.aspect_range;
    a1 = a1.min(max_long / short);
    if a1 < a0 {
        return None;
    }
    let aspect = if a1 > a0 {
        (rng.random_range(a0.ln()..=a1.ln())).exp()
    } else {
        a0
    };
    let angle_deg = rng.random_range(-90.0..90.0);
    let mut g = RectGeom {
        cx: 0.0,
        cy: 0.0,
        long: short * aspect,
        short,
        angle_deg,
    };
    let (ex, ey) = g.half_extents();
    let (w, h) = (spec.width as f64, spec.height as f64);
    if 2.0 * ex >= w || 2.0 * ey >= h {
        return None;
    }
    g.cx = rng.random_range(ex..=w - ex);
    g.cy = rng.random_range(ey..=h - ey);
    Some(g)
}

fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut rows = BinaryMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    rows.set(y, xx, true);
                }
            }
        }
    }
    let mut out = BinaryMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            if rows.get(y, x) {
                for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                    out.set(yy, x, true);
                }
            }
        }
    }
    out
}

/// Places `spec.n_instances` rectangles by rejection sampling.
pub fn place_instances(spec: &SceneSpec) -> Result<Vec<(RectGeom, BinaryMask)>> {
    let mut rng = seeded(mix(spec.seed, STREAM_GEOMETRY));
    let (h, w) = (spec.height, spec.width);
    let mut blocked = BinaryMask::new(h, w);
    let mut placed = Vec::with_capacity(spec.n_instances);
    for instance in 0..spec.n_instances {
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let Some(g) = sample_rect(spec, &mut rng) else { continue };
            let mask = g.rasterize(h, w);
            if mask.count() < MIN_INSTANCE_AREA {
                continue;
            }
            if mask.data.iter().zip(&blocked.data).any(|(&m, &b)| m && b) {
                continue;
            }
            let grown = dilate(&mask, spec.min_gap);
            for (b, &g) in blocked.data.iter_mut().zip(&grown.data) {
                *b |= g;
            }
            placed.push((g, mask));
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Placement {
                seed: spec.seed,
                instance,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }
    Ok(placed)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur truncated at 3σ, replicating edge pixels.
pub fn gaussian_blur(data: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * data[y * width + clampi(x as i64 + j as i64 - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clampi(y as i64 + j as i64 - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Renders the scene described by `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let placed = place_instances(spec)?;
    let mut gt_map = vec![0.0; h * w];
    for (_, mask) in &placed {
        for (d, &m) in gt_map.iter_mut().zip(&mask.data) {
            if m {
                *d = 1.0;
            }
        }
    }
    let blurred = gaussian_blur(&gt_map, h, w, spec.blur_sigma);
    let mut noise_rng = seeded(mix(spec.seed, STREAM_NOISE));
    let normal = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("finite std"));
    let input: Vec<f64> = blurred
        .iter()
        .map(|&b| {
            let mut v = b.clamp(0.0, 1.0).powf(spec.gamma);
            if let Some(n) = &normal {
                v += n.sample(&mut noise_rng);
            }
            // stored maps are f32; keep the in-memory copy identical
            v.clamp(0.0, 1.0) as f32 as f64
        })
        .collect();
    let input = ProbMap::new(h, w, input)?.with_scene(spec.seed);
    let mut gt = Vec::with_capacity(placed.len());
    let mut geometry = Vec::with_capacity(placed.len());
    for (g, mask) in placed {
        gt.push(TextInstance::from_mask(mask)?);
        geometry.push(g);
    }
    Ok(Scene {
        spec: spec.clone(),
        input,
        gt,
        geometry,
    })
}

/// Long/short ratio of a pixel set from its second moments, correcting for
/// the pixel-grid variance of a discrete run.
pub fn measured_aspect(mask: &BinaryMask) -> f64 {
    let px = mask.pixels();
    let n = px.len() as f64;
    let (mut my, mut mx) = (0.0, 0.0);
    for &p in &px {
        my += (p / mask.width) as f64;
        mx += (p % mask.width) as f64;
    }
    my /= n;
    mx /= n;
    let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
    for &p in &px {
        let dy = (p / mask.width) as f64 - my;
        let dx = (p % mask.width) as f64 - mx;
        syy += dy * dy;
        sxx += dx * dx;
        sxy += dx * dy;
    }
    let (syy, sxx, sxy) = (syy / n, sxx / n, sxy / n);
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) / 4.0 + sxy * sxy).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    ((12.0 * l1 + 1.0) / (12.0 * l2 + 1.0)).sqrt()
}

/// Inclusive sampling ranges from which per-scene specs are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecDistribution {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub n_instances: (usize, usize),
    pub aspect_range: (f64, f64),
    pub short_side: (f64, f64),
    pub min_gap: usize,
    pub blur_sigma: (f64, f64),
    /// Gamma is drawn log-uniformly.
    pub gamma: (f64, f64),
    pub noise_std: (f64, f64),
}

pub const PRESETS: [&str; 4] = ["default", "easy", "hetero", "fixed-gamma"];

impl SpecDistribution {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            name: name.to_string(),
            height: 128,
            width: 128,
            n_instances: (1, 6),
            aspect_range: (1.0, 20.0),
            short_side: (4.0, 10.0),
            min_gap: 4,
            blur_sigma: (0.5, 3.0),
            gamma: (0.4, 2.5),
            noise_std: (0.0, 0.08),
        };
        let d = match name {
            "default" => base,
            "easy" => Self {
                blur_sigma: (0.5, 1.0),
                gamma: (0.8, 1.25),
                noise_std: (0.0, 0.01),
                ..base
            },
            "hetero" => Self {
                blur_sigma: (1.0, 2.0),
                noise_std: (0.0, 0.02),
                ..base
            },
            "fixed-gamma" => Self {
                blur_sigma: (1.0, 2.0),
                gamma: (1.8, 1.8),
                noise_std: (0.0, 0.02),
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(d)
    }

    /// Same distribution on a `height × width` canvas. Below 64 pixels the
    /// short side and gap shrink with the canvas and the instance count
    /// with its area, so placement stays feasible.
    pub fn resized(self, height: usize, width: usize) -> Self {
        let f = (height.min(width) as f64 / 64.0).min(1.0);
        let (lo, hi) = self.short_side;
        let n_max = ((self.n_instances.1 as f64 * f * f).round() as usize).max(1);
        Self {
            min_gap: ((self.min_gap as f64 * f).round() as usize).max(2),
            n_instances: (self.n_instances.0.min(n_max), n_max),
            ..self.with_canvas(height, width, Some((lo * f, hi * f)))
        }
    }

    /// Same distribution on a different canvas, optionally with a new
    /// short-side range.
    pub fn with_canvas(mut self, height: usize, width: usize, short_side: Option<(f64, f64)>) -> Self {
        self.height = height;
        self.width = width;
        if let Some(s) = short_side {
            self.short_side = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let probe = |blur: f64, gamma: f64, noise: f64, n: usize| SceneSpec {
            seed: 0,
            height: self.height,
            width: self.width,
            n_instances: n,
            aspect_range: self.aspect_range,
            short_side: self.short_side,
            min_gap: self.min_gap,
            blur_sigma: blur,
            gamma,
            noise_std: noise,
        };
        let ordered = |(a, b): (f64, f64)| a <= b;
        if !ordered(self.blur_sigma) || !ordered(self.gamma) || !ordered(self.noise_std) {
            return Err(Error::Config("distribution ranges must be ordered".into()));
        }
        if self.n_instances.0 > self.n_instances.1 || self.n_instances.0 == 0 {
            return Err(Error::Config("n_instances range must be ordered and start at 1".into()));
        }
        if self.gamma.0 <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        probe(self.blur_sigma.0, self.gamma.0, self.noise_std.0, self.n_instances.0).validate()?;
        probe(self.blur_sigma.1, self.gamma.1, self.noise_std.1, self.n_instances.1).validate()
    }

    pub fn sample(&self, seed: u64) -> SceneSpec {
        let mut rng = seeded(mix(seed, STREAM_SPEC));
        let mut uni = |(a, b): (f64, f64)| if b > a { rng.random_range(a..=b) } else { a };
        let blur_sigma = uni(self.blur_sigma);
        let gamma = uni((self.gamma.0.ln(), self.gamma.1.ln())).exp();
        let noise_std = uni(self.noise_std);
        let (n0, n1) = self.n_instances;
        let n_instances = rng.random_range(n0..=n1);
        SceneSpec {
            seed,
            height: self.height,
            width: self.width,
            n_instances,
            aspect_range: self.aspect_range,
            short_side: self.short_side,
            min_gap: self.min_gap,
            blur_sigma,
            gamma: gamma.clamp(0.4, 2.5),
            noise_std,
        }
    }
}
