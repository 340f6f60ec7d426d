//! Group-equivariant layers: orientation lift, orientation-to-orientation
//! convolution, and orientation fusion, plus network assembly.
//!
//! An [`OrientedFeature`] carries four orientation blocks stacked along the
//! channel axis. Rotating the network input by a quarter turn `t` transforms
//! every intermediate oriented feature by the same rule: block `i` becomes
//! the rotation of old block `i - t`. The fusion layer collapses that
//! structure into a plain map that simply rotates with the input.
//!
//! The equalities are bit-exact, which takes two ordering rules on top of
//! the convolution module's kernel-walk contract. First, sums over the four
//! orientations are indexed by *relative* orientation wherever the absolute
//! block index shifts under rotation, so both runs add the same terms in the
//! same order. Second, where a four-way sum over absolute orientations is
//! unavoidable (the fusion layer), the terms are combined as
//! `(s0 + s2) + (s1 + s3)`, which IEEE addition keeps invariant under the
//! cyclic shifts a rotation induces.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{conv_core, conv_sigma, Kernel};
use crate::error::{Error, Result};
use crate::group::{rotate_kernel, GroupElement, ELEMENTS};
use crate::padding::{same_style_output, ConvSpec, Extent};
use crate::tensor::{Scalar, Shape, Tensor};

/// A feature map whose channel axis holds four orientation blocks of equal
/// width, orientation-major: block `i` occupies channels
/// `[i * block_channels, (i + 1) * block_channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedFeature<E: Scalar> {
    base: Tensor<E>,
    block_channels: usize,
}

impl<E: Scalar> OrientedFeature<E> {
    pub fn new(base: Tensor<E>, block_channels: usize) -> Result<Self> {
        if base.shape().channels != 4 * block_channels {
            return Err(Error::ShapeMismatch {
                context: "oriented feature channels",
                expected: (4 * block_channels).to_string(),
                got: base.shape().channels.to_string(),
            });
        }
        Ok(OrientedFeature {
            base,
            block_channels,
        })
    }

    /// Wraps a tensor whose channel count is divisible by four.
    pub fn from_tensor(base: Tensor<E>) -> Result<Self> {
        if base.shape().channels % 4 != 0 {
            return Err(Error::ShapeMismatch {
                context: "oriented feature channels",
                expected: "a multiple of 4".to_string(),
                got: base.shape().channels.to_string(),
            });
        }
        let block_channels = base.shape().channels / 4;
        Ok(OrientedFeature {
            base,
            block_channels,
        })
    }

    pub fn base(&self) -> &Tensor<E> {
        &self.base
    }

    pub fn into_base(self) -> Tensor<E> {
        self.base
    }

    pub fn block_channels(&self) -> usize {
        self.block_channels
    }

    /// Borrows orientation block `i` of batch element `b` as one contiguous
    /// slice (`block_channels * height * width` values, channel-major).
    pub fn block_slice(&self, b: usize, i: usize) -> &[E] {
        assert!(i < 4, "orientation index {i}");
        let s = self.base.shape();
        let start = s.index(b, i * self.block_channels, 0, 0);
        &self.base.data()[start..start + self.block_channels * s.plane()]
    }

    /// Copies orientation block `i` out as a standalone tensor.
    pub fn block(&self, i: usize) -> Tensor<E> {
        channel_slice(&self.base, i * self.block_channels, self.block_channels)
    }
}

/// Copies a contiguous channel range into a standalone tensor.
pub(crate) fn channel_slice<E: Scalar>(t: &Tensor<E>, start: usize, count: usize) -> Tensor<E> {
    let s = t.shape();
    assert!(start + count <= s.channels, "channel range");
    Tensor::from_fn(Shape::new(s.batch, count, s.height, s.width), |b, c, y, x| {
        t.get(b, start + c, y, x)
    })
}

/// Writes `src` into the channel range of `dst` starting at `start`.
pub(crate) fn write_channels<E: Scalar>(dst: &mut Tensor<E>, start: usize, src: &Tensor<E>) {
    let d = dst.shape();
    let s = src.shape();
    assert_eq!(d.batch, s.batch, "batch");
    assert_eq!((d.height, d.width), (s.height, s.width), "plane");
    assert!(start + s.channels <= d.channels, "channel range");
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    dst.set(b, start + c, y, x, src.get(b, c, y, x));
                }
            }
        }
    }
}

/// Adds four equally shaped tensors as `(p0 + p2) + (p1 + p3)` per cell.
///
/// That grouping is invariant under cyclic shifts of the operands, which is
/// what a quarter turn does to per-orientation partial results.
pub(crate) fn cycle_stable_sum4<E: Scalar>(parts: &[Tensor<E>; 4]) -> Result<Tensor<E>> {
    let s02 = parts[0].add(&parts[2])?;
    let s13 = parts[1].add(&parts[3])?;
    s02.add(&s13)
}

/// Scalar counterpart of [`cycle_stable_sum4`].
pub(crate) fn cycle_stable_scalar4<E: Scalar>(parts: [E; 4]) -> E {
    (parts[0] + parts[2]) + (parts[1] + parts[3])
}

fn require_square(layer: &'static str, spec: &ConvSpec) -> Result<()> {
    if !spec.input.is_square() {
        return Err(Error::InvalidConfig(format!(
            "{layer} needs a square input plane, got {}",
            spec.input
        )));
    }
    if !spec.output.is_square() {
        return Err(Error::NonSquareOutput {
            layer,
            got: spec.output,
        });
    }
    Ok(())
}

/// Orientation lift: convolves a plain map with the four rotated copies of
/// one kernel, one convolution mode per copy, and stacks the results as
/// orientation blocks. Rotating `x` by `t` cyclically shifts the blocks by
/// `t` and rotates each, bit for bit.
pub fn precm1_forward<E: Scalar>(
    x: &Tensor<E>,
    kernel: &Kernel<E>,
    spec: &ConvSpec,
) -> Result<OrientedFeature<E>> {
    require_square("lift layer", spec)?;
    let c = kernel.out_channels();
    let mut out = Tensor::zeros(Shape::new(
        x.shape().batch,
        4 * c,
        spec.output.h,
        spec.output.w,
    ));
    for (i, &t) in ELEMENTS.iter().enumerate() {
        let turned = rotate_kernel(t, kernel.weights());
        let mut block = Tensor::zeros(Shape::new(
            x.shape().batch,
            c,
            spec.output.h,
            spec.output.w,
        ));
        conv_core(x, &turned, Some(kernel.bias()), spec, t, &mut block, false)?;
        write_channels(&mut out, i * c, &block);
    }
    OrientedFeature::new(out, c)
}

/// Orientation-to-orientation convolution. Output block `j` sums, over
/// relative orientation `rel`, the mode-`j` convolution of input block
/// `(j + rel) mod 4` with the `j`-rotated copy of the `rel`-indexed kernel:
///
/// ```text
/// out_j = sum_rel conv_sigma(block_{j+rel}, rotate(j, w[rel]), spec, j)
/// ```
///
/// The sum runs in fixed `rel` order with the bias folded into the first
/// term, so a rotation of the input (which shifts absolute block indices but
/// leaves relative ones alone) reproduces every output cell's accumulation
/// sequence exactly.
pub fn precm2_forward<E: Scalar>(
    f: &OrientedFeature<E>,
    weights: &[Tensor<E>; 4],
    bias: &[E],
    spec: &ConvSpec,
) -> Result<OrientedFeature<E>> {
    require_square("group layer", spec)?;
    let c_out = weights[0].shape().batch;
    for w in weights.iter() {
        if w.shape() != weights[0].shape() {
            return Err(Error::ShapeMismatch {
                context: "group layer kernel family",
                expected: weights[0].shape().to_string(),
                got: w.shape().to_string(),
            });
        }
    }
    if weights[0].shape().channels != f.block_channels() {
        return Err(Error::ShapeMismatch {
            context: "group layer input block",
            expected: weights[0].shape().channels.to_string(),
            got: f.block_channels().to_string(),
        });
    }
    let batch = f.base().shape().batch;
    let mut out = Tensor::zeros(Shape::new(batch, 4 * c_out, spec.output.h, spec.output.w));
    for (j, &t) in ELEMENTS.iter().enumerate() {
        let mut block = Tensor::zeros(Shape::new(batch, c_out, spec.output.h, spec.output.w));
        for rel in 0..4 {
            let input = f.block((j + rel) % 4);
            let turned = rotate_kernel(t, &weights[rel]);
            let seed_bias = if rel == 0 { Some(bias) } else { None };
            conv_core(&input, &turned, seed_bias, spec, t, &mut block, rel != 0)?;
        }
        write_channels(&mut out, j * c_out, &block);
    }
    OrientedFeature::new(out, c_out)
}

/// Orientation fusion: convolves block `j` under mode `j` with the
/// `j`-rotated kernel and sums the four results as `(s0+s2)+(s1+s3)`, then
/// adds the bias once. The output is a plain map that rotates with the
/// network input, bit for bit.
pub fn precm3_forward<E: Scalar>(
    f: &OrientedFeature<E>,
    kernel: &Kernel<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    require_square("fusion layer", spec)?;
    if kernel.in_channels() != f.block_channels() {
        return Err(Error::ShapeMismatch {
            context: "fusion layer input block",
            expected: kernel.in_channels().to_string(),
            got: f.block_channels().to_string(),
        });
    }
    let batch = f.base().shape().batch;
    let c_out = kernel.out_channels();
    let mut parts = Vec::with_capacity(4);
    for (j, &t) in ELEMENTS.iter().enumerate() {
        let input = f.block(j);
        let turned = rotate_kernel(t, kernel.weights());
        let mut part = Tensor::zeros(Shape::new(batch, c_out, spec.output.h, spec.output.w));
        conv_core(&input, &turned, None, spec, t, &mut part, false)?;
        parts.push(part);
    }
    let parts: [Tensor<E>; 4] = parts.try_into().expect("four orientation parts");
    let fused = cycle_stable_sum4(&parts)?;
    add_bias(&fused, kernel.bias())
}

/// Elementwise max(v, 0).
pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

/// Elementwise logistic function 1 / (1 + exp(-v)).
pub fn sigmoid<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| E::one() / (E::one() + (-v).exp()))
}

/// Adds one bias value per channel.
pub fn add_bias<E: Scalar>(x: &Tensor<E>, bias: &[E]) -> Result<Tensor<E>> {
    let s = x.shape();
    if bias.len() != s.channels {
        return Err(Error::LengthMismatch {
            expected: s.channels,
            got: bias.len(),
        });
    }
    Ok(Tensor::from_fn(s, |b, c, y, x2| x.get(b, c, y, x2) + bias[c]))
}

/// Which realization a network config is built into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    /// Orientation-block layers; rotation-equivariant by construction.
    Precm,
    /// Every orientation layer replaced by a plain convolution of equal
    /// kernel-weight budget (channel width 2x the block width).
    Baseline,
}

fn default_one() -> usize {
    1
}

/// One layer of a network config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Precm1 {
        block_channels: usize,
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default = "default_one")]
        dilation: usize,
    },
    Precm2 {
        block_channels: usize,
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default = "default_one")]
        dilation: usize,
    },
    Precm3 {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default = "default_one")]
        dilation: usize,
    },
    Relu,
    Sigmoid,
    Bias,
}

impl LayerConfig {
    fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerConfig::Precm1 { .. } | LayerConfig::Precm2 { .. } | LayerConfig::Precm3 { .. }
        )
    }
}

/// Complete network description: flavor, input geometry, init seed, layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub flavor: Flavor,
    pub input_channels: usize,
    pub input_size: usize,
    pub seed: u64,
    pub layers: Vec<LayerConfig>,
}

/// One realized layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<E: Scalar> {
    Precm1 {
        weights: Tensor<E>,
        bias: Vec<E>,
        spec: ConvSpec,
    },
    Precm2 {
        weights: [Tensor<E>; 4],
        bias: Vec<E>,
        spec: ConvSpec,
    },
    Precm3 {
        weights: Tensor<E>,
        bias: Vec<E>,
        spec: ConvSpec,
    },
    Conv {
        weights: Tensor<E>,
        bias: Vec<E>,
        spec: ConvSpec,
    },
    Relu,
    Sigmoid,
    Bias {
        bias: Vec<E>,
    },
}

/// Read-only view of one parameter buffer.
pub enum ParamRef<'a, E: Scalar> {
    Tensor(&'a Tensor<E>),
    Vector(&'a [E]),
}

/// Mutable view of one parameter buffer.
pub enum ParamMut<'a, E: Scalar> {
    Tensor(&'a mut Tensor<E>),
    Vector(&'a mut [E]),
}

/// A realized network: an ordered list of layers plus input geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecmNet<E: Scalar> {
    pub flavor: Flavor,
    pub input_channels: usize,
    pub input_size: usize,
    pub layers: Vec<Layer<E>>,
}

/// Intermediate value flowing through a network.
enum Feature<E: Scalar> {
    Plain(Tensor<E>),
    Oriented(OrientedFeature<E>),
}

impl<E: Scalar> Feature<E> {
    fn map_base(self, f: impl Fn(&Tensor<E>) -> Tensor<E>) -> Result<Feature<E>> {
        Ok(match self {
            Feature::Plain(t) => Feature::Plain(f(&t)),
            Feature::Oriented(o) => {
                let c = o.block_channels();
                Feature::Oriented(OrientedFeature::new(f(o.base()), c)?)
            }
        })
    }
}

/// Validates the layer ordering: the first convolution lifts, the last one
/// fuses, and every convolution between them is a group layer.
fn validate_placement(layers: &[LayerConfig]) -> Result<()> {
    let conv_indices: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_conv())
        .map(|(i, _)| i)
        .collect();
    if conv_indices.len() < 2 {
        return Err(Error::InvalidConfig(
            "network needs at least a lift layer and a fusion layer".to_string(),
        ));
    }
    for (pos, &idx) in conv_indices.iter().enumerate() {
        let first = pos == 0;
        let last = pos == conv_indices.len() - 1;
        let ok = match &layers[idx] {
            LayerConfig::Precm1 { .. } => first,
            LayerConfig::Precm3 { .. } => last,
            LayerConfig::Precm2 { .. } => !first && !last,
            _ => unreachable!(),
        };
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "layer {idx}: convolution order must be precm1, then precm2 layers, then precm3"
            )));
        }
    }
    Ok(())
}

fn square_spec(size: usize, kernel: usize, stride: usize, dilation: usize) -> Result<ConvSpec> {
    let input = Extent::square(size);
    let k = Extent::square(kernel);
    let s = Extent::square(stride);
    let d = Extent::square(dilation);
    let output = same_style_output(input, k, s, d);
    let spec = ConvSpec {
        input,
        output,
        kernel: k,
        stride: s,
        dilation: d,
    };
    spec.validate()?;
    Ok(spec)
}

fn gaussian_tensor<E: Scalar>(rng: &mut ChaCha20Rng, shape: Shape, fan_in: usize) -> Tensor<E> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_, _, _, _| E::from_f64(normal.sample(rng)))
}

/// Builds a network from its config, drawing initial weights from a seeded
/// generator. Draw order is fixed (layers in order; the group layer's four
/// kernels in relative-orientation order), so equal configs build bitwise
/// equal networks.
///
/// The baseline flavor realizes each orientation layer as a plain unrotated
/// convolution with twice the block width, which matches the orientation
/// layers' kernel-weight count for interior layers.
pub fn build_net<E: Scalar>(config: &NetConfig) -> Result<PrecmNet<E>> {
    if config.input_channels == 0 || config.input_size == 0 {
        return Err(Error::InvalidConfig(
            "input_channels and input_size must be positive".to_string(),
        ));
    }
    validate_placement(&config.layers)?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut layers = Vec::with_capacity(config.layers.len());
    let mut size = config.input_size;
    // Width of the current feature: per-block channels inside the oriented
    // span for the precm flavor, plain channels otherwise.
    let mut channels = config.input_channels;
    let mut oriented = false;

    for (idx, lc) in config.layers.iter().enumerate() {
        match *lc {
            LayerConfig::Precm1 {
                block_channels,
                kernel,
                stride,
                dilation,
            } => {
                let spec = square_spec(size, kernel, stride, dilation)?;
                match config.flavor {
                    Flavor::Precm => {
                        let shape = Shape::new(block_channels, channels, kernel, kernel);
                        let weights = gaussian_tensor(&mut rng, shape, channels * kernel * kernel);
                        layers.push(Layer::Precm1 {
                            weights,
                            bias: vec![E::zero(); block_channels],
                            spec,
                        });
                        channels = block_channels;
                        oriented = true;
                    }
                    Flavor::Baseline => {
                        let out = 2 * block_channels;
                        let shape = Shape::new(out, channels, kernel, kernel);
                        let weights = gaussian_tensor(&mut rng, shape, channels * kernel * kernel);
                        layers.push(Layer::Conv {
                            weights,
                            bias: vec![E::zero(); out],
                            spec,
                        });
                        channels = out;
                    }
                }
                size = spec.output.w;
            }
            LayerConfig::Precm2 {
                block_channels,
                kernel,
                stride,
                dilation,
            } => {
                let spec = square_spec(size, kernel, stride, dilation)?;
                match config.flavor {
                    Flavor::Precm => {
                        let shape = Shape::new(block_channels, channels, kernel, kernel);
                        let fan_in = 4 * channels * kernel * kernel;
                        let weights = [
                            gaussian_tensor(&mut rng, shape, fan_in),
                            gaussian_tensor(&mut rng, shape, fan_in),
                            gaussian_tensor(&mut rng, shape, fan_in),
                            gaussian_tensor(&mut rng, shape, fan_in),
                        ];
                        layers.push(Layer::Precm2 {
                            weights,
                            bias: vec![E::zero(); block_channels],
                            spec,
                        });
                        channels = block_channels;
                    }
                    Flavor::Baseline => {
                        let out = 2 * block_channels;
                        let shape = Shape::new(out, channels, kernel, kernel);
                        let weights = gaussian_tensor(&mut rng, shape, channels * kernel * kernel);
                        layers.push(Layer::Conv {
                            weights,
                            bias: vec![E::zero(); out],
                            spec,
                        });
                        channels = out;
                    }
                }
                size = spec.output.w;
            }
            LayerConfig::Precm3 {
                out_channels,
                kernel,
                stride,
                dilation,
            } => {
                let spec = square_spec(size, kernel, stride, dilation)?;
                let shape = Shape::new(out_channels, channels, kernel, kernel);
                match config.flavor {
                    Flavor::Precm => {
                        let fan_in = 4 * channels * kernel * kernel;
                        let weights = gaussian_tensor(&mut rng, shape, fan_in);
                        layers.push(Layer::Precm3 {
                            weights,
                            bias: vec![E::zero(); out_channels],
                            spec,
                        });
                        oriented = false;
                    }
                    Flavor::Baseline => {
                        let weights =
                            gaussian_tensor(&mut rng, shape, channels * kernel * kernel);
                        layers.push(Layer::Conv {
                            weights,
                            bias: vec![E::zero(); out_channels],
                            spec,
                        });
                    }
                }
                channels = out_channels;
                size = spec.output.w;
            }
            LayerConfig::Relu => layers.push(Layer::Relu),
            LayerConfig::Sigmoid => layers.push(Layer::Sigmoid),
            LayerConfig::Bias => {
                if oriented && config.flavor == Flavor::Precm {
                    return Err(Error::InvalidConfig(format!(
                        "layer {idx}: standalone bias inside the oriented span would give \
                         each orientation block its own offset; fold it into a \
                         convolution layer instead"
                    )));
                }
                layers.push(Layer::Bias {
                    bias: vec![E::zero(); channels],
                });
            }
        }
    }

    Ok(PrecmNet {
        flavor: config.flavor,
        input_channels: config.input_channels,
        input_size: config.input_size,
        layers,
    })
}

impl<E: Scalar> PrecmNet<E> {
    /// Runs the network on a batch of plain inputs.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut feature = Feature::Plain(x.clone());
        for (idx, layer) in self.layers.iter().enumerate() {
            feature = match (layer, feature) {
                (Layer::Precm1 { weights, bias, spec }, Feature::Plain(t)) => {
                    let kernel = Kernel::new(weights.clone(), bias.clone())?;
                    Feature::Oriented(precm1_forward(&t, &kernel, spec)?)
                }
                (Layer::Precm2 { weights, bias, spec }, Feature::Oriented(f)) => {
                    Feature::Oriented(precm2_forward(&f, weights, bias, spec)?)
                }
                (Layer::Precm3 { weights, bias, spec }, Feature::Oriented(f)) => {
                    let kernel = Kernel::new(weights.clone(), bias.clone())?;
                    Feature::Plain(precm3_forward(&f, &kernel, spec)?)
                }
                (Layer::Conv { weights, bias, spec }, Feature::Plain(t)) => {
                    let kernel = Kernel::new(weights.clone(), bias.clone())?;
                    Feature::Plain(conv_sigma(&t, &kernel, spec, GroupElement::R0)?)
                }
                (Layer::Relu, f) => f.map_base(relu)?,
                (Layer::Sigmoid, f) => f.map_base(sigmoid)?,
                (Layer::Bias { bias }, Feature::Plain(t)) => {
                    Feature::Plain(add_bias(&t, bias)?)
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "layer {idx} cannot consume the feature produced by layer {}",
                        idx.wrapping_sub(1)
                    )))
                }
            };
        }
        match feature {
            Feature::Plain(t) => Ok(t),
            Feature::Oriented(_) => Err(Error::InvalidConfig(
                "network ends while the feature still carries orientation blocks".to_string(),
            )),
        }
    }

    /// Visits every parameter buffer in a fixed order with stable names.
    pub fn visit_params(&self, mut f: impl FnMut(String, ParamRef<'_, E>)) {
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Precm1 { weights, bias, .. }
                | Layer::Precm3 { weights, bias, .. }
                | Layer::Conv { weights, bias, .. } => {
                    f(format!("layer{idx}.weight"), ParamRef::Tensor(weights));
                    f(format!("layer{idx}.bias"), ParamRef::Vector(bias));
                }
                Layer::Precm2 { weights, bias, .. } => {
                    for (rel, w) in weights.iter().enumerate() {
                        f(format!("layer{idx}.weight{rel}"), ParamRef::Tensor(w));
                    }
                    f(format!("layer{idx}.bias"), ParamRef::Vector(bias));
                }
                Layer::Bias { bias } => {
                    f(format!("layer{idx}.bias"), ParamRef::Vector(bias));
                }
                Layer::Relu | Layer::Sigmoid => {}
            }
        }
    }

    /// Mutable counterpart of [`PrecmNet::visit_params`], same order and names.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(String, ParamMut<'_, E>)) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Precm1 { weights, bias, .. }
                | Layer::Precm3 { weights, bias, .. }
                | Layer::Conv { weights, bias, .. } => {
                    f(format!("layer{idx}.weight"), ParamMut::Tensor(weights));
                    f(format!("layer{idx}.bias"), ParamMut::Vector(bias));
                }
                Layer::Precm2 { weights, bias, .. } => {
                    for (rel, w) in weights.iter_mut().enumerate() {
                        f(format!("layer{idx}.weight{rel}"), ParamMut::Tensor(w));
                    }
                    f(format!("layer{idx}.bias"), ParamMut::Vector(bias));
                }
                Layer::Bias { bias } => {
                    f(format!("layer{idx}.bias"), ParamMut::Vector(bias));
                }
                Layer::Relu | Layer::Sigmoid => {}
            }
        }
    }

    /// Total number of kernel weight values (biases excluded).
    pub fn weight_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|name, p| {
            if let ParamRef::Tensor(t) = p {
                if name.contains("weight") {
                    n += t.shape().volume();
                }
            }
        });
        n
    }

    /// Total number of trainable values, biases included.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, p| {
            n += match p {
                ParamRef::Tensor(t) => t.shape().volume(),
                ParamRef::Vector(v) => v.len(),
            }
        });
        n
    }
}

#[derive(Serialize, Deserialize)]
struct NetManifest {
    dtype: String,
    config: NetConfig,
    tensors: Vec<String>,
}

/// Serializes a network into `dir`: one tensor file per parameter plus a
/// manifest. The manifest is written last, so its presence marks a complete
/// directory.
pub fn save_net<E: Scalar>(dir: &Path, config: &NetConfig, net: &PrecmNet<E>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    let mut failure = None;
    net.visit_params(|name, p| {
        if failure.is_some() {
            return;
        }
        let path = dir.join(format!("{name}.prt"));
        let result = match p {
            ParamRef::Tensor(t) => t.save(&path),
            ParamRef::Vector(v) => {
                match Tensor::from_vec(Shape::new(1, v.len(), 1, 1), v.to_vec()) {
                    Ok(t) => t.save(&path),
                    Err(e) => Err(e),
                }
            }
        };
        match result {
            Ok(()) => names.push(name),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let manifest = NetManifest {
        dtype: E::DTYPE.name().to_string(),
        config: config.clone(),
        tensors: names,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Loads a network saved by [`save_net`]. The element type must match the
/// stored dtype.
pub fn load_net<E: Scalar>(dir: &Path) -> Result<(NetConfig, PrecmNet<E>)> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: NetManifest = serde_json::from_str(&text)?;
    if manifest.dtype != E::DTYPE.name() {
        let found = match manifest.dtype.as_str() {
            "f32" => "f32",
            "f64" => "f64",
            other => return Err(Error::BadFileFormat(format!("unknown dtype {other:?}"))),
        };
        return Err(Error::DtypeMismatch {
            expected: E::DTYPE.name(),
            found,
        });
    }
    let mut net = build_net::<E>(&manifest.config)?;
    let mut failure = None;
    net.visit_params_mut(|name, p| {
        if failure.is_some() {
            return;
        }
        let path = dir.join(format!("{name}.prt"));
        match Tensor::<E>::load(&path) {
            Ok(loaded) => match p {
                ParamMut::Tensor(t) => {
                    if loaded.shape() == t.shape() {
                        *t = loaded;
                    } else {
                        failure = Some(Error::ShapeMismatch {
                            context: "stored parameter",
                            expected: t.shape().to_string(),
                            got: loaded.shape().to_string(),
                        });
                    }
                }
                ParamMut::Vector(v) => {
                    if loaded.shape().volume() == v.len() {
                        v.copy_from_slice(loaded.data());
                    } else {
                        failure = Some(Error::LengthMismatch {
                            expected: v.len(),
                            got: loaded.shape().volume(),
                        });
                    }
                }
            },
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok((manifest.config, net)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{rotate, R0, R180, R270, R90};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn same_size_spec(size: usize, kernel: usize) -> ConvSpec {
        ConvSpec {
            input: Extent::square(size),
            output: Extent::square(size),
            kernel: Extent::square(kernel),
            stride: Extent::square(1),
            dilation: Extent::square(1),
        }
    }

    /// Packs four blocks, cyclically shifted by `t` and each rotated, the way
    /// a `t`-rotation of the network input transforms an oriented feature.
    fn shift_and_rotate(f: &OrientedFeature<f64>, t: GroupElement) -> OrientedFeature<f64> {
        let c = f.block_channels();
        let s = f.base().shape();
        let mut out = Tensor::zeros(Shape::new(s.batch, 4 * c, s.height, s.width));
        for i in 0..4 {
            let source = (i + 4 - t.index()) % 4;
            let turned = rotate(t, &f.block(source));
            write_channels(&mut out, i * c, &turned);
        }
        OrientedFeature::new(out, c).unwrap()
    }

    #[test]
    fn lift_of_constant_input_with_pointwise_kernel_repeats_blocks() {
        let x = Tensor::<f64>::filled(Shape::new(1, 1, 4, 4), 0.7);
        let kernel = Kernel::new(
            Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![1.5, -0.5]).unwrap(),
            vec![0.1, 0.2],
        )
        .unwrap();
        let out = precm1_forward(&x, &kernel, &same_size_spec(4, 1)).unwrap();
        for i in 1..4 {
            assert!(out.block(i).bit_eq(&out.block(0)), "block {i}");
        }
    }

    #[test]
    fn lift_blocks_shift_and_rotate_with_the_input() {
        let mut rng = StdRng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, Shape::new(2, 2, 6, 6));
        let kernel = Kernel::new(
            rand_tensor(&mut rng, Shape::new(3, 2, 3, 3)),
            vec![0.1, -0.2, 0.3],
        )
        .unwrap();
        let spec = same_size_spec(6, 3);
        let base = precm1_forward(&x, &kernel, &spec).unwrap();
        for &t in &ELEMENTS {
            let lifted = precm1_forward(&rotate(t, &x), &kernel, &spec).unwrap();
            let expect = shift_and_rotate(&base, t);
            assert!(lifted.base().bit_eq(expect.base()), "t = {t:?}");
        }
    }

    #[test]
    fn lift_separates_edge_orientations() {
        // Vertical step image: left half 0, right half 1. A kernel that
        // differences rows responds only through its quarter-turned copies.
        let x = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, _, col| {
            if col < 2 {
                0.0
            } else {
                1.0
            }
        });
        let kernel = Kernel::from_weights(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![-1.0, -1.0, 1.0, 1.0]).unwrap(),
        );
        let spec = ConvSpec {
            input: Extent::square(4),
            output: Extent::square(3),
            kernel: Extent::square(2),
            stride: Extent::square(1),
            dilation: Extent::square(1),
        };
        let out = precm1_forward(&x, &kernel, &spec).unwrap();
        let energy = |i: usize| out.block(i).map(f64::abs).sum();
        assert_eq!(energy(0), 0.0);
        assert_eq!(energy(2), 0.0);
        assert_eq!(energy(1), 6.0);
        assert_eq!(energy(3), 6.0);
    }

    #[test]
    fn group_layer_identity_kernel_passes_blocks_through() {
        let mut rng = StdRng::seed_from_u64(22);
        let f = OrientedFeature::from_tensor(rand_tensor(&mut rng, Shape::new(1, 8, 5, 5)))
            .unwrap();
        let identity = Tensor::from_fn(Shape::new(2, 2, 1, 1), |o, i, _, _| {
            if o == i {
                1.0
            } else {
                0.0
            }
        });
        let zero = Tensor::zeros(Shape::new(2, 2, 1, 1));
        let weights = [identity, zero.clone(), zero.clone(), zero];
        let out = precm2_forward(&f, &weights, &[0.0, 0.0], &same_size_spec(5, 1)).unwrap();
        assert!(out.base().bit_eq(f.base()));
    }

    #[test]
    fn group_layer_commutes_with_shift_and_rotate() {
        let mut rng = StdRng::seed_from_u64(23);
        let f = OrientedFeature::from_tensor(rand_tensor(&mut rng, Shape::new(2, 8, 5, 5)))
            .unwrap();
        let weights = [
            rand_tensor(&mut rng, Shape::new(3, 2, 3, 3)),
            rand_tensor(&mut rng, Shape::new(3, 2, 3, 3)),
            rand_tensor(&mut rng, Shape::new(3, 2, 3, 3)),
            rand_tensor(&mut rng, Shape::new(3, 2, 3, 3)),
        ];
        let bias = vec![0.3, -0.1, 0.0];
        let spec = same_size_spec(5, 3);
        let base = precm2_forward(&f, &weights, &bias, &spec).unwrap();
        for &t in &ELEMENTS {
            let shifted = precm2_forward(&shift_and_rotate(&f, t), &weights, &bias, &spec)
                .unwrap();
            let expect = shift_and_rotate(&base, t);
            assert!(shifted.base().bit_eq(expect.base()), "t = {t:?}");
        }
    }

    #[test]
    fn stacked_group_layers_preserve_the_relation() {
        let mut rng = StdRng::seed_from_u64(24);
        let f = OrientedFeature::from_tensor(rand_tensor(&mut rng, Shape::new(1, 8, 5, 5)))
            .unwrap();
        let mk = |rng: &mut StdRng| {
            [
                rand_tensor(rng, Shape::new(2, 2, 3, 3)),
                rand_tensor(rng, Shape::new(2, 2, 3, 3)),
                rand_tensor(rng, Shape::new(2, 2, 3, 3)),
                rand_tensor(rng, Shape::new(2, 2, 3, 3)),
            ]
        };
        let w1 = mk(&mut rng);
        let w2 = mk(&mut rng);
        let bias = vec![0.0, 0.0];
        let spec = same_size_spec(5, 3);
        let two = |f: &OrientedFeature<f64>| {
            let mid = precm2_forward(f, &w1, &bias, &spec).unwrap();
            precm2_forward(&mid, &w2, &bias, &spec).unwrap()
        };
        let base = two(&f);
        for &t in &ELEMENTS {
            let shifted = two(&shift_and_rotate(&f, t));
            assert!(
                shifted.base().bit_eq(shift_and_rotate(&base, t).base()),
                "t = {t:?}"
            );
        }
    }

    #[test]
    fn fusion_of_equal_blocks_with_pointwise_kernel_is_four_times_one_mode() {
        let mut rng = StdRng::seed_from_u64(25);
        let block = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4));
        let mut packed = Tensor::zeros(Shape::new(1, 8, 4, 4));
        for i in 0..4 {
            write_channels(&mut packed, i * 2, &block);
        }
        let f = OrientedFeature::new(packed, 2).unwrap();
        let kernel = Kernel::from_weights(rand_tensor(&mut rng, Shape::new(1, 2, 1, 1)));
        let spec = same_size_spec(4, 1);
        let fused = precm3_forward(&f, &kernel, &spec).unwrap();
        let single = conv_sigma(&block, &kernel, &spec, R0).unwrap();
        assert!(fused.bit_eq(&single.scale(4.0)));
    }

    #[test]
    fn fusion_with_zero_kernel_is_zero() {
        let mut rng = StdRng::seed_from_u64(26);
        let f = OrientedFeature::from_tensor(rand_tensor(&mut rng, Shape::new(1, 4, 4, 4)))
            .unwrap();
        let kernel = Kernel::from_weights(Tensor::zeros(Shape::new(1, 1, 3, 3)));
        let fused = precm3_forward(&f, &kernel, &same_size_spec(4, 3)).unwrap();
        assert!(fused.bit_eq(&Tensor::zeros(Shape::new(1, 1, 4, 4))));
    }

    #[test]
    fn fusion_output_rotates_with_shift_and_rotate_input() {
        let mut rng = StdRng::seed_from_u64(27);
        let f = OrientedFeature::from_tensor(rand_tensor(&mut rng, Shape::new(1, 12, 6, 6)))
            .unwrap();
        let kernel = Kernel::new(
            rand_tensor(&mut rng, Shape::new(2, 3, 3, 3)),
            vec![0.2, -0.4],
        )
        .unwrap();
        let spec = same_size_spec(6, 3);
        let base = precm3_forward(&f, &kernel, &spec).unwrap();
        for &t in &ELEMENTS {
            let fused = precm3_forward(&shift_and_rotate(&f, t), &kernel, &spec).unwrap();
            assert!(fused.bit_eq(&rotate(t, &base)), "t = {t:?}");
        }
    }

    #[test]
    fn pointwise_ops_commute_with_rotation() {
        let mut rng = StdRng::seed_from_u64(28);
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 3, 5));
        for &t in &ELEMENTS {
            assert!(relu(&rotate(t, &x)).bit_eq(&rotate(t, &relu(&x))));
            assert!(sigmoid(&rotate(t, &x)).bit_eq(&rotate(t, &sigmoid(&x))));
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        assert_eq!(sigmoid(&x).data(), &[0.5]);
    }

    #[test]
    fn add_bias_matches_per_cell_loop() {
        let mut rng = StdRng::seed_from_u64(29);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 4, 4));
        let bias = vec![0.5, -1.0, 2.0];
        let out = add_bias(&x, &bias).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for y in 0..4 {
                    for xx in 0..4 {
                        assert_eq!(out.get(b, c, y, xx), x.get(b, c, y, xx) + bias[c]);
                    }
                }
            }
        }
        assert!(add_bias(&x, &[0.0]).is_err());
    }

    fn three_layer_config(flavor: Flavor, size: usize, seed: u64) -> NetConfig {
        NetConfig {
            flavor,
            input_channels: 1,
            input_size: size,
            seed,
            layers: vec![
                LayerConfig::Precm1 {
                    block_channels: 2,
                    kernel: 3,
                    stride: 1,
                    dilation: 1,
                },
                LayerConfig::Relu,
                LayerConfig::Precm2 {
                    block_channels: 2,
                    kernel: 3,
                    stride: 1,
                    dilation: 1,
                },
                LayerConfig::Relu,
                LayerConfig::Precm3 {
                    out_channels: 1,
                    kernel: 3,
                    stride: 1,
                    dilation: 1,
                },
                LayerConfig::Sigmoid,
            ],
        }
    }

    #[test]
    fn full_net_is_equivariant_bitwise_in_f64() {
        let config = three_layer_config(Flavor::Precm, 16, 31);
        let net = build_net::<f64>(&config).unwrap();
        let mut rng = StdRng::seed_from_u64(32);
        let x = rand_tensor(&mut rng, Shape::new(2, 1, 16, 16));
        let base = net.forward(&x).unwrap();
        for &t in &[R90, R180, R270] {
            let out = net.forward(&rotate(t, &x)).unwrap();
            assert!(out.bit_eq(&rotate(t, &base)), "t = {t:?}");
        }
    }

    #[test]
    fn baseline_net_is_not_equivariant() {
        let config = three_layer_config(Flavor::Baseline, 16, 33);
        let net = build_net::<f64>(&config).unwrap();
        let mut rng = StdRng::seed_from_u64(34);
        let x = rand_tensor(&mut rng, Shape::new(1, 1, 16, 16));
        let base = net.forward(&x).unwrap();
        let mut worst = 0.0f64;
        for &t in &[R90, R180, R270] {
            let out = net.forward(&rotate(t, &x)).unwrap();
            worst = worst.max(out.max_abs_diff(&rotate(t, &base)).unwrap());
        }
        assert!(worst > 1e-6, "plain convolutions should break the identity");
    }

    #[test]
    fn group_layer_weight_budget_matches_double_width_plain_conv() {
        let precm = build_net::<f64>(&three_layer_config(Flavor::Precm, 16, 35)).unwrap();
        let baseline = build_net::<f64>(&three_layer_config(Flavor::Baseline, 16, 35)).unwrap();
        let weight_of = |net: &PrecmNet<f64>, idx: usize| {
            let mut n = 0;
            net.visit_params(|name, p| {
                if let ParamRef::Tensor(t) = p {
                    if name.starts_with(&format!("layer{idx}.weight")) {
                        n += t.shape().volume();
                    }
                }
            });
            n
        };
        // Interior layer: four c x c kernels vs one 2c x 2c kernel.
        assert_eq!(weight_of(&precm, 2), weight_of(&baseline, 2));
        assert_eq!(weight_of(&precm, 2), 4 * 2 * 2 * 9);
    }

    #[test]
    fn placement_rule_is_enforced() {
        let mut config = three_layer_config(Flavor::Precm, 16, 36);
        config.layers[0] = LayerConfig::Precm2 {
            block_channels: 2,
            kernel: 3,
            stride: 1,
            dilation: 1,
        };
        assert!(matches!(
            build_net::<f64>(&config),
            Err(Error::InvalidConfig(_))
        ));

        let mut config = three_layer_config(Flavor::Precm, 16, 36);
        config.layers.push(LayerConfig::Precm2 {
            block_channels: 2,
            kernel: 3,
            stride: 1,
            dilation: 1,
        });
        assert!(build_net::<f64>(&config).is_err());

        let mut config = three_layer_config(Flavor::Precm, 16, 36);
        config.layers.remove(4);
        assert!(build_net::<f64>(&config).is_err());
    }

    #[test]
    fn build_is_deterministic_and_forward_reproducible() {
        let config = three_layer_config(Flavor::Precm, 16, 37);
        let a = build_net::<f32>(&config).unwrap();
        let b = build_net::<f32>(&config).unwrap();
        let mut pa = Vec::new();
        a.visit_params(|name, p| {
            if let ParamRef::Tensor(t) = p {
                pa.push((name, t.clone()));
            }
        });
        b.visit_params(|name, p| {
            if let ParamRef::Tensor(t) = p {
                let (n, expect) = &pa.remove(0);
                assert_eq!(&name, n);
                assert!(t.bit_eq(expect));
            }
        });
        let mut rng = StdRng::seed_from_u64(38);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 1, 16, 16), |_, _, _, _| {
            rng.random_range(0.0..1.0)
        });
        assert!(a.forward(&x).unwrap().bit_eq(&b.forward(&x).unwrap()));
    }

    #[test]
    fn save_and_load_round_trip_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let config = three_layer_config(Flavor::Precm, 16, 39);
        let net = build_net::<f32>(&config).unwrap();
        save_net(dir.path(), &config, &net).unwrap();
        let (loaded_config, loaded) = load_net::<f32>(dir.path()).unwrap();
        assert_eq!(loaded_config, config);
        let mut expect = Vec::new();
        net.visit_params(|name, p| {
            expect.push((
                name,
                match p {
                    ParamRef::Tensor(t) => t.data().to_vec(),
                    ParamRef::Vector(v) => v.to_vec(),
                },
            ));
        });
        loaded.visit_params(|name, p| {
            let (n, data) = expect.remove(0);
            assert_eq!(name, n);
            let got = match p {
                ParamRef::Tensor(t) => t.data().to_vec(),
                ParamRef::Vector(v) => v.to_vec(),
            };
            assert_eq!(
                got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        });
        assert!(expect.is_empty());
        assert!(load_net::<f64>(dir.path()).is_err());
    }

    #[test]
    fn oriented_feature_checks_channel_multiple() {
        let t = Tensor::<f64>::zeros(Shape::new(1, 6, 2, 2));
        assert!(OrientedFeature::from_tensor(t.clone()).is_err());
        assert!(OrientedFeature::new(t, 2).is_err());
    }

    #[test]
    fn block_slice_matches_block_copy() {
        let mut rng = StdRng::seed_from_u64(40);
        let f = OrientedFeature::from_tensor(rand_tensor(&mut rng, Shape::new(2, 8, 3, 3)))
            .unwrap();
        for b in 0..2 {
            for i in 0..4 {
                let copy = f.block(i);
                let plane = 2 * 9;
                let start = copy.shape().index(b, 0, 0, 0);
                assert_eq!(f.block_slice(b, i), &copy.data()[start..start + plane]);
            }
        }
    }

    #[test]
    fn bias_layer_is_rejected_inside_the_oriented_span() {
        let mut config = three_layer_config(Flavor::Precm, 16, 41);
        config.layers.insert(1, LayerConfig::Bias);
        assert!(build_net::<f64>(&config).is_err());
        let mut config = three_layer_config(Flavor::Precm, 16, 41);
        config.layers.push(LayerConfig::Bias);
        assert!(build_net::<f64>(&config).is_ok());
    }
}
