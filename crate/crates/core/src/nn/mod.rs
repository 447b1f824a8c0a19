//! FPN-style encoder-decoder and the two-stage composition
//! `E(x) = E2(x, E1(x))`.
//!
//! Encoder: one stride-2 3x3 conv + ReLU block per entry of `stage_widths`,
//! each halving resolution. Decoder: 1x1 lateral convs project every stage
//! to `lateral_width`; the coarsest lateral is upsampled (nearest, 2x) and
//! added to the next finer one until the finest stage, which is upsampled
//! once more to full resolution, passed through a 3x3 conv + ReLU and a 1x1
//! sigmoid head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC};

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderDecoderConfig {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    pub lateral_width: usize,
}

impl Default for EncoderDecoderConfig {
    fn default() -> Self {
        Self { in_channels: 3, stage_widths: vec![8, 16, 32], lateral_width: 8 }
    }
}

impl EncoderDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(ModelError::Config("in_channels must be positive".into()));
        }
        if self.stage_widths.len() < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 encoder stages, got {}",
                self.stage_widths.len()
            )));
        }
        if self.stage_widths.contains(&0) || self.lateral_width == 0 {
            return Err(ModelError::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.stage_widths.len()
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let l = self.lateral_width;
        let mut total = 0;
        let mut prev = self.in_channels;
        for &w in &self.stage_widths {
            total += conv(prev, w, 3) + conv(w, l, 1);
            prev = w;
        }
        total + conv(l, l, 3) + conv(l, 1, 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
}

impl ConvParams {
    fn register(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        // He-uniform on fan-in; values rounded to f32 so checkpoints are exact.
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let data = (0..cout * cin * k * k)
            .map(|_| rng.range(-bound, bound) as f32 as f64)
            .collect();
        let weight = store.add(format!("{name}.weight"), Tensor::new(vec![cout, cin, k, k], data)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]))?;
        Ok(Self { weight, bias })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(g.conv2d(x, w, b, stride, padding)?)
    }
}

/// One encoder-decoder network whose parameters live in a shared store.
#[derive(Debug, Clone)]
pub struct EncoderDecoder {
    config: EncoderDecoderConfig,
    prefix: String,
    stages: Vec<ConvParams>,
    laterals: Vec<ConvParams>,
    smooth: ConvParams,
    head: ConvParams,
}

impl EncoderDecoder {
    /// Registers the network's parameters under `prefix` in `store`.
    pub fn new(config: EncoderDecoderConfig, prefix: &str, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let l = config.lateral_width;
        let mut stages = Vec::new();
        let mut laterals = Vec::new();
        let mut prev = config.in_channels;
        for (i, &w) in config.stage_widths.iter().enumerate() {
            stages.push(ConvParams::register(store, &format!("{prefix}enc.stage{i}.conv"), prev, w, 3, rng)?);
            prev = w;
        }
        for (i, &w) in config.stage_widths.iter().enumerate() {
            laterals.push(ConvParams::register(store, &format!("{prefix}fpn.lateral{i}"), w, l, 1, rng)?);
        }
        let smooth = ConvParams::register(store, &format!("{prefix}fpn.smooth"), l, l, 3, rng)?;
        let head = ConvParams::register(store, &format!("{prefix}head"), l, 1, 1, rng)?;
        Ok(Self { config, prefix: prefix.to_string(), stages, laterals, smooth, head })
    }

    pub fn config(&self) -> &EncoderDecoderConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head.weight, self.head.bias)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[c, h, w] = shape else {
            return Err(ModelError::Input(format!("expected [C,H,W], got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(ModelError::Input(format!(
                "{}: expected {} input channels, got {c}",
                self.prefix, self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(ModelError::Input(format!(
                "{}: spatial size {h}x{w} must be a positive multiple of {m}",
                self.prefix
            )));
        }
        Ok(())
    }

    /// Per-pixel foreground probability, shape `[1,H,W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        let mut features = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for stage in &self.stages {
            let c = stage.apply(g, store, h, 2, 1)?;
            h = g.relu(c);
            features.push(h);
        }
        let mut top: Option<Var> = None;
        for (feat, lateral) in features.iter().zip(&self.laterals).rev() {
            let lat = lateral.apply(g, store, *feat, 1, 0)?;
            top = Some(match top {
                None => lat,
                Some(t) => {
                    let up = g.upsample_nearest2x(t)?;
                    g.add(lat, up)?
                }
            });
        }
        let finest = top.expect("at least two stages");
        let full = g.upsample_nearest2x(finest)?;
        let smoothed = self.smooth.apply(g, store, full, 1, 1)?;
        let act = g.relu(smoothed);
        let logits = self.head.apply(g, store, act, 1, 0)?;
        Ok(g.sigmoid(logits))
    }
}

/// Outputs of [`DoubleEncoderDecoder::forward`].
#[derive(Debug, Clone, Copy)]
pub struct DoubleOutput {
    pub final_map: Var,
    pub intermediate: Var,
    /// Image stacked with the intermediate map; input of the second network.
    pub stacked_input: Var,
}

/// Two chained encoder-decoders: the first sees the RGB image, the second
/// sees the image plus the first's probability map as a fourth channel.
#[derive(Debug, Clone)]
pub struct DoubleEncoderDecoder {
    first: EncoderDecoder,
    second: EncoderDecoder,
    params: ParamStore,
}

impl DoubleEncoderDecoder {
    /// `config` describes the first network; the second uses the same
    /// widths with one more input channel.
    pub fn new(config: EncoderDecoderConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let second_config = EncoderDecoderConfig { in_channels: config.in_channels + 1, ..config.clone() };
        let first = EncoderDecoder::new(config, "e1.", &mut params, &mut rng)?;
        let second = EncoderDecoder::new(second_config, "e2.", &mut params, &mut rng)?;
        Ok(Self { first, second, params })
    }

    pub fn config(&self) -> &EncoderDecoderConfig {
        self.first.config()
    }

    pub fn first(&self) -> &EncoderDecoder {
        &self.first
    }

    pub fn second(&self) -> &EncoderDecoder {
        &self.second
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<DoubleOutput> {
        self.first.check_input(g.value(x).shape())?;
        let intermediate = self.first.forward(g, &self.params, x)?;
        let stacked_input = g.concat_channels(x, intermediate)?;
        let final_map = self.second.forward(g, &self.params, stacked_input)?;
        Ok(DoubleOutput { final_map, intermediate, stacked_input })
    }

    /// Inference on one image; returns `(final, intermediate)` maps of shape
    /// `[1,H,W]`.
    pub fn predict(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, x)?;
        Ok((g.value(out.final_map).clone(), g.value(out.intermediate).clone()))
    }

    /// Training loss on the final map, optionally plus `aux_weight` times the
    /// same loss on the intermediate map.
    pub fn loss(&self, g: &mut Graph, image: &Tensor, target: &Tensor, aux_weight: Option<f64>) -> Result<Var> {
        let x = g.constant(image.clone());
        let out = self.forward(g, x)?;
        let main = g.bce_dice_loss(out.final_map, target)?;
        match aux_weight {
            None => Ok(main),
            Some(w) => {
                let aux = g.bce_dice_loss(out.intermediate, target)?;
                let wv = g.constant(Tensor::scalar(w));
                let scaled = g.mul(aux, wv)?;
                Ok(g.add(main, scaled)?)
            }
        }
    }

    /// Computes the loss and accumulates its gradients into the store.
    pub fn loss_and_backward(&mut self, image: &Tensor, target: &Tensor, aux_weight: Option<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, image, target, aux_weight)?;
        g.backward(loss, &mut self.params)?;
        Ok(g.value(loss).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderDecoderConfig {
        EncoderDecoderConfig { in_channels: 3, stage_widths: vec![4, 6], lateral_width: 4 }
    }

    fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn default_parameter_count() {
        // Stage convs 224 + 1168 + 4640, laterals 72 + 136 + 264, smooth 584, head 9.
        let cfg = EncoderDecoderConfig::default();
        assert_eq!(cfg.parameter_count(), 7097);
        let model = DoubleEncoderDecoder::new(cfg, 0).unwrap();
        assert_eq!(model.params().numel(), 7097 + 7169);
        assert_eq!(model.second().config().parameter_count(), 7169);
    }

    #[test]
    fn parameter_count_matches_store() {
        for widths in [vec![2, 3], vec![4, 8, 16], vec![5, 5, 5, 5]] {
            let cfg = EncoderDecoderConfig { in_channels: 3, stage_widths: widths, lateral_width: 6 };
            let model = DoubleEncoderDecoder::new(cfg.clone(), 1).unwrap();
            assert_eq!(
                model.params().numel(),
                cfg.parameter_count() + model.second().config().parameter_count()
            );
        }
    }

    #[test]
    fn names_disjoint_by_prefix() {
        let model = DoubleEncoderDecoder::new(small(), 0).unwrap();
        let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
        let e1 = names.iter().filter(|n| n.starts_with("e1.")).count();
        let e2 = names.iter().filter(|n| n.starts_with("e2.")).count();
        assert_eq!(e1 + e2, names.len());
        assert_eq!(e1, e2);
        assert!(names.contains(&"e1.enc.stage0.conv.weight"));
        assert_eq!(model.second().config().in_channels, model.first().config().in_channels + 1);
    }

    #[test]
    fn config_validation() {
        let bad = EncoderDecoderConfig { stage_widths: vec![8], ..Default::default() };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
        let bad = EncoderDecoderConfig { lateral_width: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shape_and_range() {
        let model = DoubleEncoderDecoder::new(EncoderDecoderConfig::default(), 3).unwrap();
        let (fin, inter) = model.predict(&image(3, 64, 64, 1)).unwrap();
        for map in [&fin, &inter] {
            assert_eq!(map.shape(), &[1, 64, 64]);
            assert!(map.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let (again, _) = model.predict(&image(3, 64, 64, 1)).unwrap();
        assert_eq!(fin, again);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = DoubleEncoderDecoder::new(small(), 0).unwrap();
        let err = model.predict(&image(4, 8, 8, 0)).unwrap_err();
        assert!(err.to_string().contains("expected 3 input channels"), "{err}");
        let err = model.predict(&image(3, 10, 8, 0)).unwrap_err();
        assert!(err.to_string().contains("multiple of 4"), "{err}");
    }

    #[test]
    fn second_stage_sees_four_channels() {
        let model = DoubleEncoderDecoder::new(small(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(image(3, 8, 8, 2));
        let out = model.forward(&mut g, x).unwrap();
        assert_eq!(g.value(out.stacked_input).shape(), &[4, 8, 8]);
    }

    #[test]
    fn zeroed_first_head_feeds_half_plane() {
        let mut model = DoubleEncoderDecoder::new(small(), 5).unwrap();
        let (hw, hb) = model.first().head_params();
        model.params_mut().get_mut(hw).value.data_mut().fill(0.0);
        model.params_mut().get_mut(hb).value.data_mut().fill(0.0);
        let img = image(3, 8, 8, 4);
        let (fin, inter) = model.predict(&img).unwrap();
        assert!(inter.data().iter().all(|&v| v == 0.5));

        let mut stacked = img.data().to_vec();
        stacked.extend(std::iter::repeat(0.5).take(64));
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 8, 8], stacked).unwrap());
        let y = model.second().forward(&mut g, model.params(), x).unwrap();
        assert_eq!(g.value(y), &fin);
    }

    #[test]
    fn gradients_reach_both_stages() {
        let mut model = DoubleEncoderDecoder::new(small(), 11).unwrap();
        let img = image(3, 8, 8, 6);
        let target = Tensor::new(vec![1, 8, 8], (0..64).map(|i| ((i / 8 + i % 8) % 3 == 0) as u8 as f64).collect())
            .unwrap();
        model.loss_and_backward(&img, &target, None).unwrap();
        for p in model.params().iter() {
            assert!(p.grad.data().iter().any(|&g| g != 0.0), "{} has zero gradient", p.name);
        }
    }
}
