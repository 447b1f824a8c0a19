//! Temperature sharpening, fold-model averaging and binarization.
//!
//! The ensemble prediction is the pixelwise mean of powered maps,
//! `p = (1/K) * sum_i map_i^t`. Because `v^t` is non-increasing in `t` for
//! `v` in `[0, 1]`, lowering `t` can only grow the predicted foreground,
//! which is why recall rises as the temperature falls.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("temperature must be finite and positive, got {0}")]
    Temperature(f64),
    #[error("ensemble needs at least one map")]
    Empty,
    #[error("map {index} is {found:?} but the first map is {expected:?}")]
    Dimensions { index: usize, expected: (usize, usize), found: (usize, usize) },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

/// Per-pixel foreground probability, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(EnsembleError::Invalid(format!(
                "{} values for a {width}x{height} probability map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EnsembleError::Invalid(format!("probability {v} outside [0,1]")));
        }
        Ok(Self { width, height, values })
    }

    /// From a `[1,H,W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.chw() {
            Some((1, h, w)) => Self::new(w, h, t.data().to_vec()),
            _ => Err(EnsembleError::Invalid(format!("expected a [1,H,W] tensor, got {:?}", t.shape()))),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Hard segmentation with pixels in {0, 1}, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(EnsembleError::Invalid(format!("{} values for a {width}x{height} mask", values.len())));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(EnsembleError::Invalid(format!("mask value {v} not in {{0,1}}")));
        }
        Ok(Self { width, height, values })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let values = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y) as u8).collect();
        Self { width, height, values }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground() == 0
    }

    /// As a `[1,H,W]` tensor of 0.0/1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.values.iter().map(|&v| v as f64).collect())
            .expect("consistent dims")
    }
}

/// How each map is sharpened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SharpenMode {
    /// `v^t`.
    #[default]
    Power,
    /// `v^t / (v^t + (1-v)^t)`.
    Normalized,
}

/// Whether maps are sharpened before or after averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SharpenOrder {
    #[default]
    SharpenThenMean,
    MeanThenSharpen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnsembleOptions {
    pub mode: SharpenMode,
    pub order: SharpenOrder,
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(EnsembleError::Temperature(t))
    }
}

/// `v^t`, with the common temperatures computed by correctly rounded
/// operations (`t = 1` is the identity).
pub fn power(v: f64, t: f64) -> f64 {
    if t == 1.0 {
        v
    } else if t == 2.0 {
        v * v
    } else if t == 0.5 {
        v.sqrt()
    } else {
        v.powf(t)
    }
}

fn sharpen_value(v: f64, t: f64, mode: SharpenMode) -> f64 {
    match mode {
        SharpenMode::Power => power(v, t),
        SharpenMode::Normalized => {
            if t == 1.0 {
                return v;
            }
            let a = power(v, t);
            let b = power(1.0 - v, t);
            if a + b == 0.0 {
                0.5
            } else {
                a / (a + b)
            }
        }
    }
}

/// Elementwise `v^t`.
pub fn sharpen(map: &ProbabilityMap, t: f64) -> Result<ProbabilityMap> {
    sharpen_with(map, t, SharpenMode::Power)
}

pub fn sharpen_with(map: &ProbabilityMap, t: f64, mode: SharpenMode) -> Result<ProbabilityMap> {
    check_temperature(t)?;
    let values = map.values.iter().map(|&v| sharpen_value(v, t, mode)).collect();
    Ok(ProbabilityMap { width: map.width, height: map.height, values })
}

/// Pixelwise mean of the sharpened maps.
pub fn ensemble(maps: &[ProbabilityMap], t: f64) -> Result<ProbabilityMap> {
    ensemble_with(maps, t, EnsembleOptions::default())
}

pub fn ensemble_with(maps: &[ProbabilityMap], t: f64, options: EnsembleOptions) -> Result<ProbabilityMap> {
    check_temperature(t)?;
    let first = maps.first().ok_or(EnsembleError::Empty)?;
    for (index, m) in maps.iter().enumerate() {
        if m.dims() != first.dims() {
            return Err(EnsembleError::Dimensions { index, expected: first.dims(), found: m.dims() });
        }
    }
    let k = maps.len() as f64;
    let values = (0..first.values.len())
        .map(|i| match options.order {
            SharpenOrder::SharpenThenMean => {
                maps.iter().map(|m| sharpen_value(m.values[i], t, options.mode)).sum::<f64>() / k
            }
            SharpenOrder::MeanThenSharpen => {
                let mean = maps.iter().map(|m| m.values[i]).sum::<f64>() / k;
                sharpen_value(mean.min(1.0), t, options.mode)
            }
        })
        .map(|v| v.min(1.0))
        .collect();
    Ok(ProbabilityMap { width: first.width, height: first.height, values })
}

/// Foreground iff `value >= threshold`.
pub fn binarize(map: &ProbabilityMap, threshold: f64) -> BinaryMask {
    BinaryMask {
        width: map.width,
        height: map.height,
        values: map.values.iter().map(|&v| (v >= threshold) as u8).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn px(v: f64) -> ProbabilityMap {
        ProbabilityMap::new(1, 1, vec![v]).unwrap()
    }

    fn random_map(rng: &mut Rng, w: usize, h: usize) -> ProbabilityMap {
        ProbabilityMap::new(w, h, (0..w * h).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn sharpen_examples() {
        assert_eq!(sharpen(&px(0.25), 0.5).unwrap().values(), &[0.5]);
        let mut rng = Rng::new(1);
        let m = random_map(&mut rng, 5, 4);
        assert_eq!(sharpen(&m, 1.0).unwrap(), m);
        for t in [0.1, 0.5, 1.0, 2.0, 3.7] {
            let fixed = ProbabilityMap::new(2, 1, vec![0.0, 1.0]).unwrap();
            assert_eq!(sharpen(&fixed, t).unwrap(), fixed);
        }
    }

    #[test]
    fn sharpen_rejects_bad_temperature() {
        for t in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(sharpen(&px(0.5), t), Err(EnsembleError::Temperature(_))));
            assert!(ensemble(&[px(0.5)], t).is_err());
        }
    }

    #[test]
    fn ensemble_examples() {
        let mut rng = Rng::new(2);
        let m = random_map(&mut rng, 3, 3);
        assert_eq!(ensemble(&vec![m.clone(); 4], 1.0).unwrap(), m);

        let maps: Vec<_> = [0.2, 0.4, 0.6, 0.8].iter().map(|&v| px(v)).collect();
        let p = ensemble(&maps, 2.0).unwrap().values()[0];
        assert!((p - 0.30).abs() < 1e-12, "{p}");

        for t in [0.5, 1.0, 2.0, 1.3] {
            assert_eq!(ensemble(std::slice::from_ref(&m), t).unwrap(), sharpen(&m, t).unwrap());
        }
    }

    #[test]
    fn ensemble_errors() {
        assert_eq!(ensemble(&[], 1.0), Err(EnsembleError::Empty));
        let a = ProbabilityMap::new(2, 2, vec![0.1; 4]).unwrap();
        let b = ProbabilityMap::new(4, 1, vec![0.1; 4]).unwrap();
        assert!(matches!(ensemble(&[a, b], 1.0), Err(EnsembleError::Dimensions { index: 1, .. })));
    }

    #[test]
    fn map_validation() {
        assert!(ProbabilityMap::new(2, 1, vec![0.5, 1.2]).is_err());
        assert!(ProbabilityMap::new(2, 1, vec![0.5, f64::NAN]).is_err());
        assert!(ProbabilityMap::new(2, 2, vec![0.5]).is_err());
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
    }

    #[test]
    fn binarize_tie_goes_to_foreground() {
        let m = ProbabilityMap::new(3, 1, vec![0.9, 0.5, 0.4999]).unwrap();
        assert_eq!(binarize(&m, 0.5).values(), &[1, 1, 0]);
        let all = ProbabilityMap::new(2, 2, vec![0.9; 4]).unwrap();
        assert_eq!(binarize(&all, 0.5).foreground(), 4);
    }

    #[test]
    fn normalized_mode_and_order() {
        let m = px(0.8);
        let n = sharpen_with(&m, 2.0, SharpenMode::Normalized).unwrap().values()[0];
        assert!((n - 0.64 / (0.64 + 0.04)).abs() < 1e-12);
        assert_eq!(sharpen_with(&px(0.0), 2.0, SharpenMode::Normalized).unwrap().values()[0], 0.0);
        assert_eq!(sharpen_with(&px(1.0), 0.5, SharpenMode::Normalized).unwrap().values()[0], 1.0);

        let maps = [px(0.2), px(0.6)];
        let opts = EnsembleOptions { order: SharpenOrder::MeanThenSharpen, ..Default::default() };
        let v = ensemble_with(&maps, 2.0, opts).unwrap().values()[0];
        assert!((v - 0.16).abs() < 1e-12);
    }

    #[test]
    fn pointwise_monotone_in_temperature() {
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let maps: Vec<_> = (0..4).map(|_| random_map(&mut rng, 8, 8)).collect();
            let e: Vec<_> = [0.5, 1.0, 2.0].iter().map(|&t| ensemble(&maps, t).unwrap()).collect();
            for w in e.windows(2) {
                assert!(w[0].values().iter().zip(w[1].values()).all(|(a, b)| a >= b));
                assert!(binarize(&w[0], 0.5).foreground() >= binarize(&w[1], 0.5).foreground());
            }
            assert!(e.iter().all(|m| m.values().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = Rng::new(5);
        let mut maps: Vec<_> = (0..4).map(|_| random_map(&mut rng, 6, 6)).collect();
        let a = ensemble(&maps, 0.7).unwrap();
        maps.reverse();
        maps.swap(0, 2);
        let b = ensemble(&maps, 0.7).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}
