//! Network architectures: class-conditioned generator, dual-head residual
//! discriminator whose trunk doubles as the feature encoder, reconstruction
//! decoder, and linear liveness classifiers.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::nn::Network;
use crate::nn::{
    BatchNorm, Conv2d, ConvTranspose2d, GlobalAvgPool, Init, Layer, LeakyRelu, Linear, ParamVisitor, ParamVisitorMut, Relu, Reshape,
    ResidualUnit, Sequential, Sigmoid,
};
use crate::tensor::Tensor;

/// Widest generator/decoder feature map, in multiples of `base_channels`.
const MAX_WIDTH_FACTOR: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub resolution: usize,
    pub noise_dim: usize,
    pub feature_dim: usize,
    pub num_class_outputs: usize,
    pub residual_blocks: usize,
    pub upsample_stages: usize,
    pub base_channels: usize,
    /// Batch-norm after the generator/decoder upsampling stages.
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    /// Weight std for generator, decoder and head layers. Encoder trunk
    /// convolutions are fan-in scaled instead.
    #[serde(default = "default_init_std")]
    pub init_std: f32,
    #[serde(default = "default_slope")]
    pub leaky_slope: f32,
}

fn default_true() -> bool {
    true
}
fn default_init_std() -> f32 {
    0.02
}
fn default_slope() -> f32 {
    0.2
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    /// Small CPU-friendly configuration for 32×32 inputs.
    pub fn desk() -> Self {
        NetConfig {
            resolution: 32,
            noise_dim: 32,
            feature_dim: 64,
            num_class_outputs: 2,
            residual_blocks: 4,
            upsample_stages: 3,
            base_channels: 8,
            batch_norm: true,
            init_std: 0.02,
            leaky_slope: 0.2,
        }
    }

    /// Full-size configuration: 256×256×3 images from 512-D noise through
    /// seven upsampling stages, four residual blocks, 1024-D features.
    pub fn full_scale() -> Self {
        NetConfig {
            resolution: 256,
            noise_dim: 512,
            feature_dim: 1024,
            num_class_outputs: 2,
            residual_blocks: 4,
            upsample_stages: 7,
            base_channels: 64,
            batch_norm: true,
            init_std: 0.02,
            leaky_slope: 0.2,
        }
    }

    pub fn with_classes(&self, k: usize) -> Self {
        NetConfig {
            num_class_outputs: k,
            ..self.clone()
        }
    }

    pub fn initial_spatial_size(&self) -> usize {
        self.resolution >> self.upsample_stages
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(name, "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("resolution", self.resolution)?;
        pos("noise_dim", self.noise_dim)?;
        pos("feature_dim", self.feature_dim)?;
        pos("residual_blocks", self.residual_blocks)?;
        pos("upsample_stages", self.upsample_stages)?;
        pos("base_channels", self.base_channels)?;
        if self.num_class_outputs < 2 {
            return Err(Error::config("num_class_outputs", "must be at least 2"));
        }
        if self.upsample_stages >= usize::BITS as usize
            || self.initial_spatial_size() == 0
            || self.initial_spatial_size() << self.upsample_stages != self.resolution
        {
            return Err(Error::config(
                "upsample_stages",
                format!("resolution {} is not a multiple of 2^{}", self.resolution, self.upsample_stages),
            ));
        }
        if self.residual_blocks >= usize::BITS as usize || self.resolution < 1 << self.residual_blocks {
            return Err(Error::config(
                "residual_blocks",
                format!(
                    "resolution {} too small for {} downsampling blocks",
                    self.resolution, self.residual_blocks
                ),
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std", "must be positive and finite"));
        }
        Ok(())
    }

    fn init(&self) -> Init {
        Init::Normal { std: self.init_std }
    }

    fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 3, self.resolution, self.resolution]
    }

    fn check_images(&self, x: &Tensor, context: &str) -> Result<()> {
        x.ensure_shape(context, &self.image_shape(x.batch()))
    }

    /// Channel widths entering each upsampling stage.
    fn upsample_widths(&self) -> Vec<usize> {
        (0..self.upsample_stages)
            .map(|i| {
                let f = (self.upsample_stages - 1 - i).min(MAX_WIDTH_FACTOR.trailing_zeros() as usize);
                self.base_channels << f
            })
            .collect()
    }

    /// Output channels of each residual block; the last equals `feature_dim`.
    fn block_widths(&self) -> Vec<usize> {
        (0..self.residual_blocks)
            .map(|i| {
                if i + 1 == self.residual_blocks {
                    self.feature_dim
                } else {
                    self.base_channels << i
                }
            })
            .collect()
    }
}

/// FC stage into a low-resolution map followed by stride-2 transposed
/// convolutions (kernel 3), ReLU between stages and a sigmoid at the end.
fn upsampler(cfg: &NetConfig, inputs: usize, rng: &mut impl Rng) -> Sequential {
    let widths = cfg.upsample_widths();
    let s0 = cfg.initial_spatial_size();
    let init = cfg.init();
    let mut body = Sequential::new();
    body.push("fc", Linear::new(inputs, widths[0] * s0 * s0, init, rng));
    body.push("view", Reshape::new(&[widths[0], s0, s0]));
    if cfg.batch_norm {
        body.push("bn_in", BatchNorm::new(widths[0]));
    }
    body.push("act_in", Relu::default());
    for (i, &w) in widths.iter().enumerate() {
        let last = i + 1 == widths.len();
        let out = if last { 3 } else { widths[i + 1] };
        body.push(format!("up{i}"), ConvTranspose2d::new(w, out, 3, 2, 1, 1, init, rng));
        if last {
            body.push("squash", Sigmoid::default());
        } else {
            if cfg.batch_norm {
                body.push(format!("bn{i}"), BatchNorm::new(out));
            }
            body.push(format!("act{i}"), Relu::default());
        }
    }
    body
}

/// Class-conditioned generator: noise ⊕ one-hot class code → image in [0,1].
pub struct GeneratorNet {
    cfg: NetConfig,
    body: Sequential,
}

impl GeneratorNet {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(GeneratorNet {
            cfg: cfg.clone(),
            body: upsampler(cfg, cfg.noise_dim + cfg.num_class_outputs, rng),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn input(&self, noise: &Tensor, codes: &Tensor) -> Result<Tensor> {
        let b = noise.batch();
        noise.ensure_shape("generator noise", &[b, self.cfg.noise_dim])?;
        codes.ensure_shape("generator class codes", &[b, self.cfg.num_class_outputs])?;
        Tensor::cat_cols(noise, codes)
    }

    pub fn forward(&self, noise: &Tensor, codes: &Tensor) -> Result<Tensor> {
        self.body.forward(&self.input(noise, codes)?)
    }

    pub fn forward_train(&mut self, noise: &Tensor, codes: &Tensor) -> Result<Tensor> {
        let x = self.input(noise, codes)?;
        self.body.forward_train(&x)
    }

    /// Backpropagates an image gradient; parameter gradients accumulate.
    pub fn backward(&mut self, grad: &Tensor) {
        self.body.backward(grad);
    }
}

impl Network for GeneratorNet {
    fn params(&self, f: &mut ParamVisitor<'_>) {
        self.body.visit("body", f);
    }
    fn params_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        self.body.visit_mut("body", f);
    }
}

/// One-hot rows for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &y) in labels.iter().enumerate() {
        t.data_mut()[r * classes + y] = 1.0;
    }
    t
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B, 1]` real/generated logits.
    pub adv: Tensor,
    /// `[B, K]` class logits.
    pub cls: Tensor,
    /// `[B, feature_dim]` pooled trunk features.
    pub features: Tensor,
}

/// Residual trunk shared by a real/fake head and a classification head.
///
/// The trunk is a strided stem convolution followed by `residual_blocks`
/// blocks of two residual units (four 3×3 convolutions), then global
/// average pooling. Each block after the first halves the resolution.
pub struct EncoderNet {
    cfg: NetConfig,
    trunk: Sequential,
    head_adv: Linear,
    head_cls: Linear,
}

impl EncoderNet {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let init = cfg.init();
        let slope = cfg.leaky_slope;
        let trunk_init = Init::FanIn {
            gain: (2.0 / (1.0 + slope * slope)).sqrt(),
        };
        let mut trunk = Sequential::new();
        trunk.push("stem", Conv2d::new(3, cfg.base_channels, 3, 2, 1, trunk_init, rng));
        trunk.push("stem_act", LeakyRelu::new(slope));
        let mut width = cfg.base_channels;
        for (i, out) in cfg.block_widths().into_iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            trunk.push(
                format!("block{i}.unit0"),
                ResidualUnit::new(width, out, stride, slope, trunk_init, rng),
            );
            trunk.push(format!("block{i}.unit1"), ResidualUnit::new(out, out, 1, slope, trunk_init, rng));
            width = out;
        }
        trunk.push("pool", GlobalAvgPool::default());
        Ok(EncoderNet {
            cfg: cfg.clone(),
            trunk,
            head_adv: Linear::new(cfg.feature_dim, 1, init, rng),
            head_cls: Linear::new(cfg.feature_dim, cfg.num_class_outputs, init, rng),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_class_outputs
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.cfg.check_images(x, "encoder input")?;
        self.trunk.forward(x)
    }

    pub fn forward(&self, x: &Tensor) -> Result<EncoderOutput> {
        let features = self.features(x)?;
        Ok(EncoderOutput {
            adv: self.head_adv.forward(&features)?,
            cls: self.head_cls.forward(&features)?,
            features,
        })
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<EncoderOutput> {
        let features = self.features_train(x)?;
        Ok(EncoderOutput {
            adv: self.head_adv.forward_train(&features)?,
            cls: self.head_cls.forward_train(&features)?,
            features,
        })
    }

    /// Backpropagates head gradients from the last `forward_train` through
    /// the trunk. Returns the input-image gradient.
    pub fn backward(&mut self, adv_grad: &Tensor, cls_grad: &Tensor) -> Tensor {
        let mut g = self.head_adv.backward(adv_grad);
        g.add_assign(&self.head_cls.backward(cls_grad));
        self.trunk.backward(&g)
    }

    /// Trunk-only training pass, for use as a feature encoder.
    pub fn features_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cfg.check_images(x, "encoder input")?;
        self.trunk.forward_train(x)
    }

    pub fn backward_features(&mut self, grad: &Tensor) -> Tensor {
        self.trunk.backward(grad)
    }

    /// Trunk as a layer, e.g. for optimizer groups that exclude the heads.
    pub fn trunk_mut(&mut self) -> &mut dyn Layer {
        &mut self.trunk
    }

    pub fn head_cls_mut(&mut self) -> &mut Linear {
        &mut self.head_cls
    }
}

impl Network for EncoderNet {
    fn params(&self, f: &mut ParamVisitor<'_>) {
        self.trunk.visit("trunk", f);
        self.head_adv.visit("head_adv", f);
        self.head_cls.visit("head_cls", f);
    }
    fn params_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        self.trunk.visit_mut("trunk", f);
        self.head_adv.visit_mut("head_adv", f);
        self.head_cls.visit_mut("head_cls", f);
    }
}

/// Reconstructs an image from a `2·feature_dim` multi-domain feature.
pub struct DecoderNet {
    cfg: NetConfig,
    body: Sequential,
}

impl DecoderNet {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(DecoderNet {
            cfg: cfg.clone(),
            body: upsampler(cfg, 2 * cfg.feature_dim, rng),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        2 * self.cfg.feature_dim
    }

    fn check(&self, u: &Tensor) -> Result<()> {
        u.ensure_shape("decoder input", &[u.batch(), self.input_dim()])
    }

    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        self.check(u)?;
        self.body.forward(u)
    }

    pub fn forward_train(&mut self, u: &Tensor) -> Result<Tensor> {
        self.check(u)?;
        self.body.forward_train(u)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        self.body.backward(grad)
    }
}

impl Network for DecoderNet {
    fn params(&self, f: &mut ParamVisitor<'_>) {
        self.body.visit("body", f);
    }
    fn params_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        self.body.visit_mut("body", f);
    }
}

/// Affine map to a single liveness logit; `σ(logit)` is the live probability.
pub struct LinearClassifier {
    fc: Linear,
}

impl LinearClassifier {
    pub fn new(inputs: usize, init_std: f32, rng: &mut impl Rng) -> Self {
        LinearClassifier {
            fc: Linear::new(inputs, 1, Init::Normal { std: init_std }, rng),
        }
    }

    /// Builds a classifier from explicit weights and bias.
    pub fn from_weights(weights: Vec<f32>, bias: f32) -> Self {
        LinearClassifier {
            fc: Linear::from_parts(weights, vec![bias]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.fc.inputs()
    }

    pub fn weights(&self) -> &[f32] {
        &self.fc.weight.value
    }

    pub fn bias(&self) -> f32 {
        self.fc.bias.value[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc.forward(x)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.fc.forward_train(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        self.fc.backward(grad)
    }

    /// Live probabilities, one per row.
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .forward(x)?
            .data()
            .iter()
            .map(|&z| crate::objectives::sigmoid(z as f64))
            .collect())
    }

    pub fn as_layer(&mut self) -> &mut dyn Layer {
        &mut self.fc
    }
}

impl Network for LinearClassifier {
    fn params(&self, f: &mut ParamVisitor<'_>) {
        self.fc.visit("fc", f);
    }
    fn params_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        self.fc.visit_mut("fc", f);
    }
}

/// Deep copy of every named parameter (running statistics included).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSnapshot {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

pub fn snapshot_params(net: &dyn Network) -> ParamSnapshot {
    let mut tensors = BTreeMap::new();
    net.params(&mut |name, p| {
        tensors.insert(name.to_string(), (p.shape.clone(), p.value.clone()));
    });
    ParamSnapshot { tensors }
}

pub fn restore_params(net: &mut dyn Network, snapshot: &ParamSnapshot) -> Result<()> {
    let mut names = Vec::new();
    net.params(&mut |name, p| names.push((name.to_string(), p.shape.clone())));
    if names.len() != snapshot.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "architecture has {} tensors, snapshot has {}",
            names.len(),
            snapshot.tensors.len()
        )));
    }
    for (name, shape) in &names {
        match snapshot.tensors.get(name) {
            Some((s, _)) if s == shape => {}
            Some((s, _)) => return Err(Error::Checkpoint(format!("{name}: shape {s:?} does not match {shape:?}"))),
            None => return Err(Error::Checkpoint(format!("snapshot lacks tensor {name}"))),
        }
    }
    net.params_mut(&mut |name, p| {
        let (_, v) = &snapshot.tensors[name];
        p.value.copy_from_slice(v);
    });
    Ok(())
}

/// Exact bitwise equality of two snapshots.
pub fn params_equal(a: &ParamSnapshot, b: &ParamSnapshot) -> bool {
    a.tensors.len() == b.tensors.len()
        && a.tensors.iter().zip(&b.tensors).all(|((na, (sa, va)), (nb, (sb, vb)))| {
            na == nb && sa == sb && va.len() == vb.len() && va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn desk_encoder_has_four_blocks_of_four_convolutions() {
        let e = EncoderNet::new(&NetConfig::desk(), &mut rng()).unwrap();
        let mut main_convs = 0;
        e.params(&mut |n, _| {
            if n.contains("block") && (n.ends_with("conv1.weight") || n.ends_with("conv2.weight")) {
                main_convs += 1;
            }
        });
        assert_eq!(main_convs, 16);
    }

    #[test]
    fn config_validation() {
        let mut c = NetConfig::desk();
        c.resolution = 30;
        assert!(c.validate().is_err());
        let c = NetConfig::desk().with_classes(1);
        assert!(matches!(c.validate(), Err(Error::InvalidConfig { .. })));
        NetConfig::full_scale().validate().unwrap();
        assert_eq!(NetConfig::full_scale().initial_spatial_size(), 2);
    }

    #[test]
    fn generator_rejects_wrong_code_width() {
        let g = GeneratorNet::new(&NetConfig::desk(), &mut rng()).unwrap();
        let z = Tensor::zeros(&[2, 32]);
        assert!(g.forward(&z, &one_hot(&[0, 1], 3)).is_err());
        assert_eq!(g.forward(&z, &one_hot(&[0, 1], 2)).unwrap().shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn head_cls_update_leaves_features_unchanged() {
        let mut e = EncoderNet::new(&NetConfig::desk(), &mut rng()).unwrap();
        let x = Tensor::full(&[2, 3, 32, 32], 0.3);
        let before = e.features(&x).unwrap();
        for v in e.head_cls_mut().weight.value.iter_mut() {
            *v += 1.0;
        }
        assert_eq!(before, e.features(&x).unwrap());
    }

    #[test]
    fn restore_rejects_other_architecture() {
        let e = EncoderNet::new(&NetConfig::desk(), &mut rng()).unwrap();
        let mut e3 = EncoderNet::new(&NetConfig::desk().with_classes(3), &mut rng()).unwrap();
        assert!(restore_params(&mut e3, &snapshot_params(&e)).is_err());
    }

    #[test]
    fn params_equal_is_bitwise() {
        let c = LinearClassifier::from_weights(vec![0.0, 1.0], 0.5);
        let d = LinearClassifier::from_weights(vec![-0.0, 1.0], 0.5);
        assert!(!params_equal(&snapshot_params(&c), &snapshot_params(&d)));
        assert!(params_equal(&snapshot_params(&c), &snapshot_params(&c)));
    }
}
