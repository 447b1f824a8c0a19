//! Procedural segmentation scenes.
//!
//! Every scene starts from a tissue-coloured background: a base colour,
//! two octaves of value noise and, last of all, Gaussian pixel noise with
//! sigma 0.05, clamped to `[0, 1]`. A blob is a wobbly ellipse with domed
//! shading and a colour shift. An elongated object is a capsule entering
//! from the border, grey, cylindrically shaded and carrying a bright
//! streak. The mask is exactly the generating shape, sampled at pixel
//! centres. Shapes are redrawn until the mask is a single 4-connected
//! component covering between 2% and 40% of the frame.
//!
//! A scene is a pure function of `(seed, kind, height, width)`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::ensemble::BinaryMask;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.40;
const NOISE_SIGMA: f64 = 0.05;
const MAX_ATTEMPTS: usize = 1000;
/// Stream index of the kind-assignment shuffle; scene `i` uses stream `i`.
const ASSIGNMENT_STREAM: u64 = u64::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid kind mix: {0}")]
    Mix(String),
    #[error("invalid scene size {height}x{width}: {reason}")]
    Size { height: usize, width: usize, reason: &'static str },
    #[error("no admissible shape after {MAX_ATTEMPTS} attempts for seed {0}")]
    Resample(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneKind {
    Blob,
    Elongated,
    Empty,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::Blob, SceneKind::Elongated, SceneKind::Empty];

    pub fn as_str(self) -> &'static str {
        match self {
            SceneKind::Blob => "blob",
            SceneKind::Elongated => "elongated",
            SceneKind::Empty => "empty",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SceneKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        SceneKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown scene kind `{s}`"))
    }
}

/// Fractions of blob, elongated and empty scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindMix {
    pub blob: f64,
    pub elongated: f64,
    pub empty: f64,
}

impl Default for KindMix {
    fn default() -> Self {
        Self { blob: 0.5, elongated: 0.4, empty: 0.1 }
    }
}

impl KindMix {
    pub fn new(blob: f64, elongated: f64, empty: f64) -> Result<Self, SynthError> {
        let mix = Self { blob, elongated, empty };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let f = self.fractions();
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SynthError::Mix(format!("fractions must be finite and non-negative, got {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(SynthError::Mix(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.blob, self.elongated, self.empty]
    }
}

impl FromStr for KindMix {
    type Err = String;
    /// `blob,elongated,empty`, e.g. `0.5,0.4,0.1`.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad fraction `{p}` in mix `{s}`")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [b, e, m] => KindMix::new(b, e, m).map_err(|e| e.to_string()),
            _ => Err(format!("mix `{s}` needs three comma-separated fractions")),
        }
    }
}

/// Scene counts per kind by largest remainder; ties go to the earlier kind.
pub fn kind_counts(mix: &KindMix, n: usize) -> Result<[usize; 3], SynthError> {
    mix.validate()?;
    let sum: f64 = mix.fractions().iter().sum();
    let exact = mix.fractions().map(|f| f / sum * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[3,H,W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: BinaryMask,
    pub kind: SceneKind,
    pub seed: u64,
}

/// `n` square scenes of side `size`. Kinds are counted by [`kind_counts`]
/// and assigned in a seeded shuffle; scene `i` has seed
/// `derive_seed(seed, i)`.
pub fn generate_dataset(seed: u64, n: usize, size: usize, mix: &KindMix) -> Result<Vec<SyntheticScene>, SynthError> {
    let counts = kind_counts(mix, n)?;
    let mut kinds: Vec<SceneKind> =
        SceneKind::ALL.iter().zip(counts).flat_map(|(&k, c)| std::iter::repeat(k).take(c)).collect();
    Rng::new(derive_seed(seed, ASSIGNMENT_STREAM)).shuffle(&mut kinds);
    kinds.into_iter().enumerate().map(|(i, kind)| generate_scene(derive_seed(seed, i as u64), kind, size, size)).collect()
}

pub fn generate_scene(seed: u64, kind: SceneKind, height: usize, width: usize) -> Result<SyntheticScene, SynthError> {
    if height < 8 || width < 8 {
        return Err(SynthError::Size { height, width, reason: "both sides must be at least 8" });
    }
    let mut rng = Rng::new(seed);
    let plane = height * width;
    let mut image = background(&mut rng, height, width);
    let mut mask = BinaryMask::empty(width, height);
    if kind != SceneKind::Empty {
        let mut attempt = 0;
        let shape = loop {
            if attempt == MAX_ATTEMPTS {
                return Err(SynthError::Resample(seed));
            }
            attempt += 1;
            let shape = match kind {
                SceneKind::Blob => Shape::Blob(Blob::sample(&mut rng, height, width)),
                _ => Shape::Capsule(Capsule::sample(&mut rng, height, width)),
            };
            mask = BinaryMask::from_fn(width, height, |x, y| shape.inside(x as f64 + 0.5, y as f64 + 0.5));
            let frac = mask.foreground() as f64 / plane as f64;
            if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) && is_single_component(&mask) {
                break shape;
            }
        };
        shape.paint(&mut rng, &mut image, &mask);
    }
    for v in image.iter_mut() {
        *v = (*v + NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0);
    }
    let image = Tensor::new(vec![3, height, width], image).expect("consistent dims");
    Ok(SyntheticScene { image, mask, kind, seed })
}

/// True iff the foreground is non-empty and 4-connected.
pub fn is_single_component(mask: &BinaryMask) -> bool {
    let (w, h) = mask.dims();
    let Some(start) = mask.values().iter().position(|&v| v == 1) else {
        return false;
    };
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut reached = 0;
    while let Some(i) = queue.pop_front() {
        reached += 1;
        let (x, y) = (i % w, i / w);
        let neighbours = [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ];
        for j in neighbours.into_iter().flatten() {
            if !seen[j] && mask.values()[j] == 1 {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    reached == mask.foreground()
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
struct ValueNoise {
    cols: usize,
    cell: f64,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut Rng, height: usize, width: usize, cell: f64) -> Self {
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let rows = (height as f64 / cell).ceil() as usize + 2;
        let lattice = (0..rows * cols).map(|_| rng.uniform()).collect();
        Self { cols, cell, lattice }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(gx.fract()), smooth(gy.fract()));
        let v = |cx: usize, cy: usize| self.lattice[cy * self.cols + cx];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn background(rng: &mut Rng, height: usize, width: usize) -> Vec<f64> {
    let base = [rng.range(0.50, 0.72), rng.range(0.28, 0.44), rng.range(0.22, 0.36)];
    let side = height.max(width) as f64;
    let coarse = ValueNoise::new(rng, height, width, side / 3.0);
    let fine = ValueNoise::new(rng, height, width, (side / 10.0).max(2.0));
    let tint = [rng.range(0.8, 1.2), rng.range(0.8, 1.2), rng.range(0.8, 1.2)];
    let plane = height * width;
    let mut img = vec![0.0; 3 * plane];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let n = 0.30 * (coarse.at(px, py) - 0.5) + 0.12 * (fine.at(px, py) - 0.5);
            for c in 0..3 {
                img[c * plane + y * width + x] = base[c] + n * tint[c];
            }
        }
    }
    img
}

enum Shape {
    Blob(Blob),
    Capsule(Capsule),
}

impl Shape {
    fn inside(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Blob(b) => b.radius(x, y) <= 1.0,
            Shape::Capsule(c) => c.offsets(x, y).1.abs() <= c.radius && c.along_ok(x, y),
        }
    }

    fn paint(&self, rng: &mut Rng, img: &mut [f64], mask: &BinaryMask) {
        let (w, h) = mask.dims();
        let plane = w * h;
        match self {
            Shape::Blob(b) => {
                let shift = [rng.range(0.10, 0.22), rng.range(0.02, 0.10), rng.range(-0.02, 0.06)];
                let texture = ValueNoise::new(rng, h, w, (w.max(h) as f64 / 12.0).max(2.0));
                for y in 0..h {
                    for x in 0..w {
                        if !mask.get(x, y) {
                            continue;
                        }
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        let r = b.radius(px, py).min(1.0);
                        let dome = 0.12 * (1.0 - r * r) - 0.04;
                        let t = 0.10 * (texture.at(px, py) - 0.5);
                        for c in 0..3 {
                            img[c * plane + y * w + x] += shift[c] + dome + t;
                        }
                    }
                }
            }
            Shape::Capsule(cap) => {
                let grey = rng.range(0.55, 0.78);
                let cast = [rng.range(-0.03, 0.03), 0.0, rng.range(0.0, 0.05)];
                let streak_at = rng.range(0.2, 0.5) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                for y in 0..h {
                    for x in 0..w {
                        if !mask.get(x, y) {
                            continue;
                        }
                        let (_, across) = cap.offsets(x as f64 + 0.5, y as f64 + 0.5);
                        let u = (across / cap.radius).clamp(-1.0, 1.0);
                        let shade = 0.7 + 0.3 * (1.0 - u * u).sqrt();
                        let streak = (-((u - streak_at) / 0.15).powi(2)).exp();
                        for c in 0..3 {
                            let v = (grey + cast[c]) * shade;
                            img[c * plane + y * w + x] = v + (0.98 - v) * streak;
                        }
                    }
                }
            }
        }
    }
}

/// Ellipse with a low-order angular wobble on its boundary.
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    wobble: [(f64, f64, f64); 2],
}

impl Blob {
    fn sample(rng: &mut Rng, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        let a = rng.range(0.10, 0.30) * side;
        let b = a * rng.range(0.6, 1.0);
        let angle = rng.range(0.0, std::f64::consts::PI);
        Self {
            cx: rng.range(0.2, 0.8) * w as f64,
            cy: rng.range(0.2, 0.8) * h as f64,
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
            wobble: [
                (3.0, rng.range(0.0, 0.10), rng.range(0.0, std::f64::consts::TAU)),
                (5.0, rng.range(0.0, 0.05), rng.range(0.0, std::f64::consts::TAU)),
            ],
        }
    }

    /// Normalised radius; the boundary is at 1.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let phi = v.atan2(u);
        let boundary = 1.0 + self.wobble.iter().map(|&(k, amp, ph)| amp * (k * phi + ph).sin()).sum::<f64>();
        (u * u + v * v).sqrt() / boundary
    }
}

/// Round-capped segment from `p0` (outside or on the border) into the frame.
struct Capsule {
    p0: (f64, f64),
    dir: (f64, f64),
    length: f64,
    radius: f64,
}

impl Capsule {
    fn sample(rng: &mut Rng, h: usize, w: usize) -> Self {
        let (wf, hf) = (w as f64, h as f64);
        let side = wf.min(hf);
        let t = rng.uniform();
        let (p0, inward) = match rng.below(4) {
            0 => ((t * wf, 0.0), std::f64::consts::FRAC_PI_2),
            1 => ((t * wf, hf), -std::f64::consts::FRAC_PI_2),
            2 => ((0.0, t * hf), 0.0),
            _ => ((wf, t * hf), std::f64::consts::PI),
        };
        let angle = inward + rng.range(-1.0, 1.0);
        Self {
            p0,
            dir: (angle.cos(), angle.sin()),
            length: rng.range(0.45, 0.9) * side,
            radius: rng.range(0.05, 0.10) * side,
        }
    }

    /// Offset along the axis from `p0` and signed distance across it.
    fn offsets(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.p0.0, y - self.p0.1);
        (dx * self.dir.0 + dy * self.dir.1, -dx * self.dir.1 + dy * self.dir.0)
    }

    fn along_ok(&self, x: f64, y: f64) -> bool {
        let (along, across) = self.offsets(x, y);
        if along <= self.length {
            return true;
        }
        let tip = along - self.length;
        tip * tip + across * across <= self.radius * self.radius
    }
}
