//! Network builders and execution.
//!
//! A [`ModelGraph`] is a flat layer list whose last two entries are always a
//! global average pool and a linear classifier; the tensor entering that pool
//! is reported as `final_features` and drives class activation maps.

mod cam;
mod gradcheck;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{NormalizationMode, Preprocess};
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::{self, Element, Parameter, Tensor};

pub use cam::{compute_cam, raw_cam};
pub use gradcheck::{finite_difference_check, FdOptions, FdReport};

pub const FILTER_CLASSES: [&str; 2] = ["valid", "nonvalid"];
pub const STAGE1_CLASSES: [&str; 2] = ["no_finding", "lung_opacity"];
pub const STAGE2_CLASSES: [&str; 3] = ["no_finding", "lung_opacity", "covid19"];

fn default_input_size() -> usize {
    224
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterNetConfig {
    pub stem_channels: usize,
    pub num_ds_blocks: usize,
    pub width_multiplier: f64,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FilterNetConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            num_ds_blocks: 4,
            width_multiplier: 1.0,
            input_size: default_input_size(),
            seed: 0,
        }
    }
}

impl FilterNetConfig {
    pub fn stem_width(&self) -> usize {
        (self.stem_channels as f64 * self.width_multiplier).round() as usize
    }

    /// Output channels of depthwise-separable block `i`: the stem width
    /// doubled `i + 1` times.
    pub fn block_width(&self, i: usize) -> usize {
        (self.stem_channels as f64 * 2f64.powi(i as i32 + 1) * self.width_multiplier).round() as usize
    }

    /// Odd-indexed blocks downsample.
    pub fn block_stride(i: usize) -> usize {
        if i % 2 == 1 {
            2
        } else {
            1
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.num_ds_blocks == 0 {
            return Err(Error::Config("filter net needs at least one block".into()));
        }
        if self.stem_width() == 0 {
            return Err(Error::Config(format!(
                "stem of {} channels × {} rounds to zero",
                self.stem_channels, self.width_multiplier
            )));
        }
        check_input_size(self.input_size, 8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovidNetConfig {
    pub growth_rate: usize,
    pub layers_per_block: usize,
    pub head_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CovidNetConfig {
    fn default() -> Self {
        Self {
            growth_rate: 12,
            layers_per_block: 4,
            head_channels: 64,
            num_classes: 2,
            input_size: default_input_size(),
            seed: 0,
        }
    }
}

impl CovidNetConfig {
    pub const NUM_BLOCKS: usize = 3;

    pub fn stem_width(&self) -> usize {
        2 * self.growth_rate
    }

    /// Channels entering and leaving dense block `b`.
    pub fn block_channels(&self, b: usize) -> (usize, usize) {
        let mut c = self.stem_width();
        for i in 0..=b {
            if i > 0 {
                c /= 2;
            }
            let out = c + self.layers_per_block * self.growth_rate;
            if i == b {
                return (c, out);
            }
            c = out;
        }
        unreachable!()
    }

    fn validate(&self) -> Result<()> {
        if self.growth_rate == 0 || self.layers_per_block == 0 || self.head_channels == 0 {
            return Err(Error::Config(
                "growth_rate, layers_per_block and head_channels must be positive".into(),
            ));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "covid net has 2 or 3 classes, got {}",
                self.num_classes
            )));
        }
        // Stem stride 2, stem pool, two transition pools.
        check_input_size(self.input_size, 16)
    }
}

fn check_input_size(size: usize, min: usize) -> Result<()> {
    if size < min {
        return Err(Error::Config(format!(
            "input_size {size} is below the minimum {min} for this architecture"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Filter(FilterNetConfig),
    Covid(CovidNetConfig),
}

impl ModelConfig {
    pub fn input_channels(&self) -> usize {
        match self {
            Self::Filter(_) => 1,
            Self::Covid(_) => 3,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Self::Filter(c) => c.input_size,
            Self::Covid(c) => c.input_size,
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            input_size: self.input_size(),
            channels: self.input_channels(),
            normalization: match self {
                Self::Filter(_) => NormalizationMode::UnitInterval,
                Self::Covid(_) => NormalizationMode::ImagenetStats,
            },
        }
    }
}

/// One step of the layer list. Indices refer to [`ModelGraph::params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Depthwise {
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    AvgPool {
        window: usize,
        stride: usize,
    },
    /// `concat(x, conv3x3(relu(x)))` along channels.
    DenseUnit {
        weight: usize,
        bias: usize,
    },
    GlobalAvgPool,
    Linear {
        weight: usize,
        bias: usize,
    },
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Element = f32> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
    pub final_features: Tensor<T>,
}

/// Layer inputs recorded during a forward pass, consumed by
/// [`ModelGraph::backward`].
pub struct Trace<T: Element = f32> {
    inputs: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T: Element = f32> {
    pub config: ModelConfig,
    /// `[C, H, W]` of one input sample.
    pub input_shape: [usize; 3],
    pub class_names: Vec<String>,
    pub layers: Vec<Layer>,
    pub params: Vec<Parameter<T>>,
}

/// Convolution biases start slightly positive: a channel fed by an all-zero
/// (dead) input then sits off the ReLU kink instead of exactly on it.
pub const CONV_BIAS_INIT: f32 = 0.01;

struct Builder {
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
    params: Vec<Parameter<f32>>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers: Vec::new(),
            params: Vec::new(),
        }
    }

    fn param(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let value = if std == 0.0 {
            Tensor::zeros(shape)
        } else {
            let normal = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| normal.sample(&mut self.rng) as f32)
        };
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    /// He-normal weight plus a bias of [`CONV_BIAS_INIT`].
    fn weight_bias(&mut self, prefix: &str, shape: &[usize], fan_in: usize) -> (usize, usize) {
        let w = self.param(format!("{prefix}.weight"), shape, (2.0 / fan_in as f64).sqrt());
        let b = self.param(format!("{prefix}.bias"), &shape[..1], 0.0);
        self.params[b].value.fill(CONV_BIAS_INIT);
        (w, b)
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) {
        let (weight, bias) = self.weight_bias(prefix, &[cout, cin, k, k], cin * k * k);
        self.layers.push(Layer::Conv {
            weight,
            bias,
            stride,
            padding,
        });
    }

    fn classifier(&mut self, prefix: &str, features: usize, classes: usize) {
        let weight = self.param(
            format!("{prefix}.weight"),
            &[classes, features],
            (1.0 / features as f64).sqrt(),
        );
        let bias = self.param(format!("{prefix}.bias"), &[classes], 0.0);
        self.layers.push(Layer::GlobalAvgPool);
        self.layers.push(Layer::Linear { weight, bias });
    }
}

/// Validity filter: strided stem, depthwise-separable blocks, GAP, 2 logits.
pub fn build_filter_net(config: &FilterNetConfig) -> Result<ModelGraph> {
    config.validate()?;
    let mut b = Builder::new(config.seed);
    let stem = config.stem_width();
    b.conv("stem", 1, stem, 3, 2, 1);
    b.layers.push(Layer::Relu);
    let mut c = stem;
    for i in 0..config.num_ds_blocks {
        let out = config.block_width(i);
        if out == 0 {
            return Err(Error::Config(format!("block {i} rounds to zero channels")));
        }
        let prefix = format!("ds{i}");
        let (weight, bias) = b.weight_bias(&format!("{prefix}.depthwise"), &[c, 1, 3, 3], 9);
        b.layers.push(Layer::Depthwise {
            weight,
            bias,
            stride: FilterNetConfig::block_stride(i),
            padding: 1,
        });
        b.layers.push(Layer::Relu);
        b.conv(&format!("{prefix}.pointwise"), c, out, 1, 1, 0);
        b.layers.push(Layer::Relu);
        c = out;
    }
    b.classifier("head", c, 2);
    Ok(ModelGraph {
        config: ModelConfig::Filter(config.clone()),
        input_shape: [1, config.input_size, config.input_size],
        class_names: FILTER_CLASSES.iter().map(|s| s.to_string()).collect(),
        layers: b.layers,
        params: b.params,
    })
}

/// Dense-block classifier: strided stem + pool, three dense blocks joined by
/// 1×1-conv/avg-pool transitions, 1×1 head conv, GAP, linear.
pub fn build_covid_net(config: &CovidNetConfig) -> Result<ModelGraph> {
    config.validate()?;
    let mut b = Builder::new(config.seed);
    let k = config.growth_rate;
    b.conv("stem", 3, config.stem_width(), 3, 2, 1);
    b.layers.push(Layer::AvgPool { window: 2, stride: 2 });
    let mut c = config.stem_width();
    for block in 0..CovidNetConfig::NUM_BLOCKS {
        if block > 0 {
            b.layers.push(Layer::Relu);
            b.conv(&format!("transition{block}"), c, c / 2, 1, 1, 0);
            b.layers.push(Layer::AvgPool { window: 2, stride: 2 });
            c /= 2;
        }
        for l in 0..config.layers_per_block {
            let (weight, bias) = b.weight_bias(&format!("block{block}.layer{l}"), &[k, c, 3, 3], c * 9);
            b.layers.push(Layer::DenseUnit { weight, bias });
            c += k;
        }
    }
    b.layers.push(Layer::Relu);
    b.conv("head_conv", c, config.head_channels, 1, 1, 0);
    b.layers.push(Layer::Relu);
    b.classifier("classifier", config.head_channels, config.num_classes);
    let names: &[&str] = if config.num_classes == 2 {
        &STAGE1_CLASSES
    } else {
        &STAGE2_CLASSES
    };
    Ok(ModelGraph {
        config: ModelConfig::Covid(config.clone()),
        input_shape: [3, config.input_size, config.input_size],
        class_names: names.iter().map(|s| s.to_string()).collect(),
        layers: b.layers,
        params: b.params,
    })
}

pub fn build(config: &ModelConfig) -> Result<ModelGraph> {
    match config {
        ModelConfig::Filter(c) => build_filter_net(c),
        ModelConfig::Covid(c) => build_covid_net(c),
    }
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    model: ModelConfig,
    class_names: Vec<String>,
}

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.ckpt";

impl ModelGraph<f32> {
    /// Writes `config.json` and `weights.ckpt` into `dir`, creating it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stored = StoredConfig {
            model: self.config.clone(),
            class_names: self.class_names.clone(),
        };
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, serde_json::to_vec_pretty(&stored)?).map_err(|e| Error::io(&cfg_path, e))?;
        write_checkpoint(&dir.join(WEIGHTS_FILE), &self.named_tensors())
    }

    /// Rebuilds the architecture from `config.json` and fills it from
    /// `weights.ckpt`; every parameter must be present with its exact shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let raw = std::fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let stored: StoredConfig = serde_json::from_slice(&raw)?;
        let mut model = build(&stored.model)?;
        if stored.class_names.len() != model.num_classes() {
            return Err(Error::Config(format!(
                "{} class names for a {}-class model",
                stored.class_names.len(),
                model.num_classes()
            )));
        }
        model.class_names = stored.class_names;
        model.load_tensors(read_checkpoint(&dir.join(WEIGHTS_FILE))?)?;
        Ok(model)
    }

    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in tensors {
            let p = self
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            *p = Parameter {
                frozen: p.frozen,
                ..Parameter::new(name, t)
            };
        }
        Ok(())
    }

    /// Same backbone, freshly initialized classifier with `class_names.len()`
    /// outputs. Optimizer state is reset everywhere.
    pub fn with_new_head(&self, class_names: &[&str], seed: u64) -> Result<Self> {
        let classes = class_names.len();
        let mut config = self.config.clone();
        match &mut config {
            ModelConfig::Covid(c) => c.num_classes = classes,
            ModelConfig::Filter(_) if classes != 2 => {
                return Err(Error::Config("the filter net always has 2 classes".into()))
            }
            ModelConfig::Filter(_) => {}
        }
        let Some(&Layer::Linear { weight, bias }) = self.layers.last() else {
            unreachable!("graphs end in a linear layer")
        };
        let features = self.params[weight].value.shape()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / features as f64).sqrt()).expect("positive std");
        let mut params = self.params.clone();
        params.iter_mut().for_each(Parameter::reset_optimizer);
        params[weight] = Parameter::new(
            self.params[weight].name.clone(),
            Tensor::from_fn(&[classes, features], |_| normal.sample(&mut rng) as f32),
        );
        params[bias] = Parameter::new(self.params[bias].name.clone(), Tensor::zeros(&[classes]));
        Ok(Self {
            config,
            input_shape: self.input_shape,
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            layers: self.layers.clone(),
            params,
        })
    }
}

impl<T: Element> ModelGraph<T> {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Indices of the classifier's weight and bias parameters.
    pub fn head_indices(&self) -> (usize, usize) {
        match self.layers.last() {
            Some(&Layer::Linear { weight, bias }) => (weight, bias),
            _ => unreachable!("graphs end in a linear layer"),
        }
    }

    pub fn head_weights(&self) -> &Tensor<T> {
        &self.params[self.head_indices().0].value
    }

    /// Freezes every parameter outside the classifier head (or unfreezes all).
    pub fn freeze_backbone(&mut self, frozen: bool) {
        let (w, b) = self.head_indices();
        for (i, p) in self.params.iter_mut().enumerate() {
            p.frozen = frozen && i != w && i != b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn cast<U: Element>(&self) -> ModelGraph<U> {
        ModelGraph {
            config: self.config.clone(),
            input_shape: self.input_shape,
            class_names: self.class_names.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(Parameter::cast).collect(),
        }
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let [c, h, w] = self.input_shape;
        let (_, bc, bh, bw) = batch.dims4("forward")?;
        if (bc, bh, bw) != (c, h, w) {
            return Err(Error::dim(
                "forward",
                format!(
                    "expected input [N, {c}, {h}, {w}], got {:?}",
                    batch.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.run(batch, None, None)
    }

    pub fn forward_traced(&self, batch: &Tensor<T>) -> Result<(ForwardOutput<T>, Trace<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let out = self.run(batch, Some(&mut inputs), None)?;
        Ok((out, Trace { inputs }))
    }

    /// Forward pass plus a fingerprint of which ReLU inputs were positive.
    /// Equal fingerprints mean the network is on the same linear piece.
    pub(crate) fn forward_with_pattern(&self, batch: &Tensor<T>) -> Result<(ForwardOutput<T>, u64)> {
        let mut pattern = 0xcbf2_9ce4_8422_2325;
        let out = self.run(batch, None, Some(&mut pattern))?;
        Ok((out, pattern))
    }

    fn run(
        &self,
        batch: &Tensor<T>,
        mut trace: Option<&mut Vec<Tensor<T>>>,
        mut pattern: Option<&mut u64>,
    ) -> Result<ForwardOutput<T>> {
        let mut record = |x: &Tensor<T>| {
            if let Some(h) = pattern.as_deref_mut() {
                for v in x.data() {
                    *h = (*h ^ u64::from(*v > T::zero())).wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        self.check_input(batch)?;
        let p = |i: usize| &self.params[i].value;
        let mut x = batch.clone();
        let mut final_features = None;
        for layer in &self.layers {
            let y = match *layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => tensor::conv2d(&x, p(weight), p(bias), stride, padding)?,
                Layer::Depthwise {
                    weight,
                    bias,
                    stride,
                    padding,
                } => tensor::depthwise_conv2d(&x, p(weight), p(bias), stride, padding)?,
                Layer::Relu => {
                    record(&x);
                    tensor::relu(&x)
                }
                Layer::AvgPool { window, stride } => tensor::avg_pool2d(&x, window, stride)?,
                Layer::DenseUnit { weight, bias } => {
                    record(&x);
                    let new = tensor::conv2d(&tensor::relu(&x), p(weight), p(bias), 1, 1)?;
                    tensor::concat_channels(&x, &new)?
                }
                Layer::GlobalAvgPool => {
                    final_features = Some(x.clone());
                    tensor::global_avg_pool(&x)?
                }
                Layer::Linear { weight, bias } => tensor::linear(&x, p(weight), p(bias))?,
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push(x);
            }
            x = y;
        }
        Ok(ForwardOutput {
            probabilities: tensor::softmax(&x)?,
            logits: x,
            final_features: final_features.expect("graphs contain a global pool"),
        })
    }

    /// Backpropagates `dlogits` through the traced pass, adding into each
    /// non-frozen parameter's `grad`. Returns the gradient w.r.t. the input.
    pub fn backward(&mut self, trace: &Trace<T>, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::InvalidInput("trace does not belong to this graph".into()));
        }
        let mut g = dlogits.clone();
        let layers = self.layers.clone();
        for (layer, x) in layers.iter().zip(&trace.inputs).rev() {
            g = match *layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let grads = tensor::conv2d_backward(x, &self.params[weight].value, &g, stride, padding)?;
                    self.accumulate(weight, &grads.kernel)?;
                    self.accumulate(bias, &grads.bias)?;
                    grads.input
                }
                Layer::Depthwise {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let grads =
                        tensor::depthwise_conv2d_backward(x, &self.params[weight].value, &g, stride, padding)?;
                    self.accumulate(weight, &grads.kernel)?;
                    self.accumulate(bias, &grads.bias)?;
                    grads.input
                }
                Layer::Relu => tensor::relu_backward(x, &g),
                Layer::AvgPool { window, stride } => tensor::avg_pool2d_backward(x.shape(), &g, window, stride)?,
                Layer::DenseUnit { weight, bias } => {
                    let (mut gx, gnew) = tensor::split_channels(&g, x.shape()[1])?;
                    let activated = tensor::relu(x);
                    let grads = tensor::conv2d_backward(&activated, &self.params[weight].value, &gnew, 1, 1)?;
                    self.accumulate(weight, &grads.kernel)?;
                    self.accumulate(bias, &grads.bias)?;
                    tensor::add_assign(&mut gx, &tensor::relu_backward(x, &grads.input))?;
                    gx
                }
                Layer::GlobalAvgPool => tensor::global_avg_pool_backward(x.shape(), &g)?,
                Layer::Linear { weight, bias } => {
                    let grads = tensor::linear_backward(x, &self.params[weight].value, &g)?;
                    self.accumulate(weight, &grads.weight)?;
                    self.accumulate(bias, &grads.bias)?;
                    grads.input
                }
            };
        }
        Ok(g)
    }

    fn accumulate(&mut self, index: usize, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[index];
        if p.frozen {
            return Ok(());
        }
        tensor::add_assign(&mut p.grad, grad)
    }
}

#[cfg(test)]
mod tests;
