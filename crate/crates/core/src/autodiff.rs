//! Reverse-mode automatic differentiation for the layer operations.
//!
//! A [`Tape`] records operations eagerly: each recording method computes its
//! value by calling the same forward functions the layers use, so a taped
//! forward pass is bit-identical to an untaped one. [`Tape::backward`] then
//! walks the records in reverse.
//!
//! The backward pass keeps the forward pass's rotation behavior: training on
//! a rotated input (with a correspondingly rotated target) produces bitwise
//! the same parameter gradients as training on the original. Three rules
//! make that hold. Convolution adjoints replay the forward kernel walk and
//! scatter at exactly the addresses the forward pass read, in the same
//! order. Four-way merges over orientations use the cycle-stable grouping
//! `(s0 + s2) + (s1 + s3)`. Reductions over a spatial plane (bias
//! gradients) use [`rotation_stable_sum`] instead of a row-major fold.

use std::collections::HashMap;

use crate::conv as cv;
use crate::error::{Error, Result};
use crate::group::{inverse, rotate_kernel, rotated_position, rotation_stable_sum, ELEMENTS};
use crate::group::GroupElement;
use crate::layers::{
    add_bias as add_bias_eval, channel_slice, cycle_stable_scalar4, cycle_stable_sum4,
    precm1_forward, precm2_forward, precm3_forward, relu as relu_eval, sigmoid as sigmoid_eval,
    write_channels, Layer, OrientedFeature, ParamMut, PrecmNet,
};
use crate::padding::ConvSpec;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to one value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Node<E: Scalar> {
    Input,
    Relu {
        x: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    AddBias {
        x: VarId,
        bias: VarId,
    },
    ConvSigma {
        x: VarId,
        weights: VarId,
        bias: Option<VarId>,
        spec: ConvSpec,
        turn: GroupElement,
    },
    Precm1 {
        x: VarId,
        weights: VarId,
        bias: VarId,
        spec: ConvSpec,
    },
    Precm2 {
        x: VarId,
        weights: [VarId; 4],
        bias: VarId,
        spec: ConvSpec,
    },
    Precm3 {
        x: VarId,
        weights: VarId,
        bias: VarId,
        spec: ConvSpec,
    },
    Sum {
        x: VarId,
    },
    Mean {
        x: VarId,
    },
    BceLoss {
        p: VarId,
        target: Tensor<E>,
    },
}

/// Sigmoid outputs closer than this to 0 or 1 are clamped inside the
/// cross-entropy, and their gradient is cut to zero.
pub const BCE_CLAMP: f64 = 1e-7;

/// Records a computation as it runs and differentiates it in reverse.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    values: Vec<Tensor<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, node: Node<E>, value: Tensor<E>) -> VarId {
        self.nodes.push(node);
        self.values.push(value);
        VarId(self.nodes.len() - 1)
    }

    /// Records a leaf value (an input or a parameter snapshot).
    pub fn input(&mut self, value: Tensor<E>) -> VarId {
        self.push(Node::Input, value)
    }

    pub fn value(&self, id: VarId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = relu_eval(self.value(x));
        self.push(Node::Relu { x }, value)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let value = sigmoid_eval(self.value(x));
        self.push(Node::Sigmoid { x }, value)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Node::Add { a, b }, value))
    }

    /// Adds a per-channel bias held in a `(1, C, 1, 1)` leaf.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let value = add_bias_eval(self.value(x), self.value(bias).data())?;
        Ok(self.push(Node::AddBias { x, bias }, value))
    }

    /// Records a single mode-`turn` convolution. As in the forward API, both
    /// `x` and `weights` live in the rotated frame.
    pub fn conv_sigma(
        &mut self,
        x: VarId,
        weights: VarId,
        bias: Option<VarId>,
        spec: ConvSpec,
        turn: GroupElement,
    ) -> Result<VarId> {
        let kernel = match bias {
            Some(b) => cv::Kernel::new(self.value(weights).clone(), self.value(b).data().to_vec())?,
            None => cv::Kernel::from_weights(self.value(weights).clone()),
        };
        let value = cv::conv_sigma(self.value(x), &kernel, &spec, turn)?;
        Ok(self.push(
            Node::ConvSigma {
                x,
                weights,
                bias,
                spec,
                turn,
            },
            value,
        ))
    }

    /// Records an orientation lift. `weights` is the base-frame kernel.
    pub fn precm1(&mut self, x: VarId, weights: VarId, bias: VarId, spec: ConvSpec) -> Result<VarId> {
        let kernel = cv::Kernel::new(self.value(weights).clone(), self.value(bias).data().to_vec())?;
        let value = precm1_forward(self.value(x), &kernel, &spec)?.into_base();
        Ok(self.push(Node::Precm1 { x, weights, bias, spec }, value))
    }

    /// Records an orientation-to-orientation convolution. `x` must hold a
    /// packed oriented feature; `weights` are the four relative-orientation
    /// kernels in the base frame.
    pub fn precm2(
        &mut self,
        x: VarId,
        weights: [VarId; 4],
        bias: VarId,
        spec: ConvSpec,
    ) -> Result<VarId> {
        let f = OrientedFeature::from_tensor(self.value(x).clone())?;
        let w = [
            self.value(weights[0]).clone(),
            self.value(weights[1]).clone(),
            self.value(weights[2]).clone(),
            self.value(weights[3]).clone(),
        ];
        let value = precm2_forward(&f, &w, self.value(bias).data(), &spec)?.into_base();
        Ok(self.push(Node::Precm2 { x, weights, bias, spec }, value))
    }

    /// Records an orientation fusion back to a plain map.
    pub fn precm3(&mut self, x: VarId, weights: VarId, bias: VarId, spec: ConvSpec) -> Result<VarId> {
        let f = OrientedFeature::from_tensor(self.value(x).clone())?;
        let kernel = cv::Kernel::new(self.value(weights).clone(), self.value(bias).data().to_vec())?;
        let value = precm3_forward(&f, &kernel, &spec)?;
        Ok(self.push(Node::Precm3 { x, weights, bias, spec }, value))
    }

    /// Records the sum of every cell, as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let value = Tensor::filled(Shape::new(1, 1, 1, 1), self.value(x).sum());
        self.push(Node::Sum { x }, value)
    }

    /// Records the mean of every cell, as a `(1, 1, 1, 1)` scalar.
    pub fn mean(&mut self, x: VarId) -> VarId {
        let value = Tensor::filled(Shape::new(1, 1, 1, 1), self.value(x).mean());
        self.push(Node::Mean { x }, value)
    }

    /// Records the mean binary cross-entropy between predictions `p` (in
    /// `(0, 1)`) and a constant target of the same shape. Predictions are
    /// clamped away from 0 and 1 by [`BCE_CLAMP`].
    pub fn bce_loss(&mut self, p: VarId, target: &Tensor<E>) -> Result<VarId> {
        let value = bce_loss_value(self.value(p), target)?;
        let value = Tensor::filled(Shape::new(1, 1, 1, 1), value);
        Ok(self.push(
            Node::BceLoss {
                p,
                target: target.clone(),
            },
            value,
        ))
    }

    /// Differentiates the scalar `loss` with respect to every recorded
    /// variable that feeds it.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<E>> {
        if self.value(loss).shape().volume() != 1 {
            return Err(Error::InvalidConfig(format!(
                "backward needs a scalar loss, got shape {}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(Shape::new(1, 1, 1, 1), E::one()));

        for idx in (0..=loss.0).rev() {
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[idx] {
                Node::Input => {}
                Node::Relu { x } => {
                    let vx = self.value(*x);
                    let dx = g.zip_with(vx, |gv, xv| if xv > E::zero() { gv } else { E::zero() })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Node::Sigmoid { x } => {
                    let y = &self.values[idx];
                    let dx = g.zip_with(y, |gv, yv| gv * yv * (E::one() - yv))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Node::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Node::AddBias { x, bias } => {
                    let dbias = channel_plane_sums(&g);
                    accumulate(&mut grads, *x, g)?;
                    accumulate(&mut grads, *bias, dbias)?;
                }
                Node::ConvSigma {
                    x,
                    weights,
                    bias,
                    spec,
                    turn,
                } => {
                    let (dx, dw) =
                        conv_scatter(self.value(*x), self.value(*weights), spec, *turn, &g)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *weights, dw)?;
                    if let Some(b) = bias {
                        let dbias = channel_plane_sums(&g);
                        accumulate(&mut grads, *b, dbias)?;
                    }
                }
                Node::Precm1 { x, weights, bias, spec } => {
                    let vx = self.value(*x);
                    let vw = self.value(*weights);
                    let c = vw.shape().batch;
                    let mut dxs = Vec::with_capacity(4);
                    let mut dws = Vec::with_capacity(4);
                    let mut sums = Vec::with_capacity(4);
                    for (i, &t) in ELEMENTS.iter().enumerate() {
                        let gi = channel_slice(&g, i * c, c);
                        let turned = rotate_kernel(t, vw);
                        let (dx, dw_rot) = conv_scatter(vx, &turned, spec, t, &gi)?;
                        dxs.push(dx);
                        dws.push(rotate_kernel(inverse(t), &dw_rot));
                        sums.push(plane_sums_per_channel(&gi));
                    }
                    let dxs: [Tensor<E>; 4] = dxs.try_into().expect("four parts");
                    let dws: [Tensor<E>; 4] = dws.try_into().expect("four parts");
                    accumulate(&mut grads, *x, cycle_stable_sum4(&dxs)?)?;
                    accumulate(&mut grads, *weights, cycle_stable_sum4(&dws)?)?;
                    accumulate(&mut grads, *bias, merge_orientation_sums(&sums))?;
                }
                Node::Precm2 { x, weights, bias, spec } => {
                    let f = OrientedFeature::from_tensor(self.value(*x).clone())?;
                    let c_in = f.block_channels();
                    let c_out = self.value(weights[0]).shape().batch;
                    let in_shape = f.base().shape();
                    let g_blocks: Vec<Tensor<E>> =
                        (0..4).map(|j| channel_slice(&g, j * c_out, c_out)).collect();

                    let block_shape =
                        Shape::new(in_shape.batch, c_in, in_shape.height, in_shape.width);
                    let mut dblocks: Vec<Tensor<E>> =
                        (0..4).map(|_| Tensor::zeros(block_shape)).collect();
                    // Relative orientation is the outer loop: each input
                    // block then receives its four contributions in relative
                    // order, which a rotation of the input does not permute.
                    for rel in 0..4 {
                        let vw = self.value(weights[rel]);
                        let mut dws = Vec::with_capacity(4);
                        for (j, &t) in ELEMENTS.iter().enumerate() {
                            let src = (j + rel) % 4;
                            let turned = rotate_kernel(t, vw);
                            let (dx, dw_rot) =
                                conv_scatter(&f.block(src), &turned, spec, t, &g_blocks[j])?;
                            dblocks[src] = dblocks[src].add(&dx)?;
                            dws.push(rotate_kernel(inverse(t), &dw_rot));
                        }
                        let dws: [Tensor<E>; 4] = dws.try_into().expect("four parts");
                        accumulate(&mut grads, weights[rel], cycle_stable_sum4(&dws)?)?;
                    }
                    let mut dx = Tensor::zeros(in_shape);
                    for (i, db) in dblocks.iter().enumerate() {
                        write_channels(&mut dx, i * c_in, db);
                    }
                    accumulate(&mut grads, *x, dx)?;
                    let sums: Vec<Vec<E>> =
                        g_blocks.iter().map(plane_sums_per_channel).collect();
                    accumulate(&mut grads, *bias, merge_orientation_sums(&sums))?;
                }
                Node::Precm3 { x, weights, bias, spec } => {
                    let f = OrientedFeature::from_tensor(self.value(*x).clone())?;
                    let c_in = f.block_channels();
                    let vw = self.value(*weights);
                    let in_shape = f.base().shape();
                    let mut dx = Tensor::zeros(in_shape);
                    let mut dws = Vec::with_capacity(4);
                    for (j, &t) in ELEMENTS.iter().enumerate() {
                        let turned = rotate_kernel(t, vw);
                        let (dblock, dw_rot) = conv_scatter(&f.block(j), &turned, spec, t, &g)?;
                        write_channels(&mut dx, j * c_in, &dblock);
                        dws.push(rotate_kernel(inverse(t), &dw_rot));
                    }
                    let dws: [Tensor<E>; 4] = dws.try_into().expect("four parts");
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *weights, cycle_stable_sum4(&dws)?)?;
                    let dbias = channel_plane_sums(&g);
                    accumulate(&mut grads, *bias, dbias)?;
                }
                Node::Sum { x } => {
                    let g0 = g.data()[0];
                    let dx = Tensor::filled(self.value(*x).shape(), g0);
                    accumulate(&mut grads, *x, dx)?;
                }
                Node::Mean { x } => {
                    let vx = self.value(*x);
                    let n = E::from_f64(vx.shape().volume() as f64);
                    let g0 = g.data()[0];
                    let dx = Tensor::filled(vx.shape(), g0 / n);
                    accumulate(&mut grads, *x, dx)?;
                }
                Node::BceLoss { p, target } => {
                    let vp = self.value(*p);
                    let g0 = g.data()[0];
                    let n = E::from_f64(vp.shape().volume() as f64);
                    let lo = E::from_f64(BCE_CLAMP);
                    let hi = E::one() - lo;
                    let dp = vp.zip_with(target, |pv, yv| {
                        if pv < lo || pv > hi {
                            E::zero()
                        } else {
                            g0 * (pv - yv) / (pv * (E::one() - pv)) / n
                        }
                    })?;
                    accumulate(&mut grads, *p, dp)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    /// The gradient of the loss with respect to `id`, if `id` feeds the
    /// loss at all.
    pub fn wrt(&self, id: VarId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }
}

fn accumulate<E: Scalar>(
    grads: &mut [Option<Tensor<E>>],
    id: VarId,
    delta: Tensor<E>,
) -> Result<()> {
    grads[id.0] = Some(match grads[id.0].take() {
        Some(g) => g.add(&delta)?,
        None => delta,
    });
    Ok(())
}

/// Mean binary cross-entropy with clamped predictions, without recording.
pub fn bce_loss_value<E: Scalar>(p: &Tensor<E>, target: &Tensor<E>) -> Result<E> {
    if p.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "cross-entropy target",
            expected: p.shape().to_string(),
            got: target.shape().to_string(),
        });
    }
    let lo = E::from_f64(BCE_CLAMP);
    let hi = E::one() - lo;
    let mut acc = E::zero();
    for (&pv, &yv) in p.data().iter().zip(target.data()) {
        let pc = if pv < lo {
            lo
        } else if pv > hi {
            hi
        } else {
            pv
        };
        acc = acc - (yv * pc.ln() + (E::one() - yv) * (E::one() - pc).ln());
    }
    Ok(acc / E::from_f64(p.shape().volume() as f64))
}

/// Sums one spatial plane of a gradient in a rotation-stable order.
fn plane_grad_sum<E: Scalar>(g: &Tensor<E>, b: usize, c: usize) -> E {
    let s = g.shape();
    let start = s.index(b, c, 0, 0);
    let plane = &g.data()[start..start + s.plane()];
    if s.height == s.width {
        rotation_stable_sum(plane, s.width)
    } else {
        plane.iter().fold(E::zero(), |acc, &v| acc + v)
    }
}

fn plane_sums_per_channel<E: Scalar>(g: &Tensor<E>) -> Vec<E> {
    let s = g.shape();
    (0..s.channels)
        .map(|c| {
            let mut acc = E::zero();
            for b in 0..s.batch {
                acc = acc + plane_grad_sum(g, b, c);
            }
            acc
        })
        .collect()
}

/// Per-channel sums of `g` over batch and plane, as a `(1, C, 1, 1)` bias
/// gradient.
fn channel_plane_sums<E: Scalar>(g: &Tensor<E>) -> Tensor<E> {
    let sums = plane_sums_per_channel(g);
    let channels = sums.len();
    Tensor::from_vec(Shape::new(1, channels, 1, 1), sums).expect("channel count")
}

/// Merges per-orientation channel sums with the cycle-stable grouping into a
/// `(1, C, 1, 1)` bias gradient.
fn merge_orientation_sums<E: Scalar>(sums: &[Vec<E>]) -> Tensor<E> {
    let channels = sums[0].len();
    let mut out = Vec::with_capacity(channels);
    for c in 0..channels {
        out.push(cycle_stable_scalar4([
            sums[0][c], sums[1][c], sums[2][c], sums[3][c],
        ]));
    }
    Tensor::from_vec(Shape::new(1, channels, 1, 1), out).expect("channel count")
}

/// Adjoint of one mode convolution. Replays the forward walk and scatters
/// `upstream` into a padded-input gradient and a rotated-frame kernel
/// gradient at the addresses the forward pass read, in the same order; the
/// padded-input gradient is then cropped back to the input.
fn conv_scatter<E: Scalar>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    spec: &ConvSpec,
    t: GroupElement,
    upstream: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let geo = cv::mode_geometry(spec, t)?;
    cv::check_conv_args(input, weights, &geo)?;
    let s = input.shape();
    let out_shape = Shape::new(
        s.batch,
        weights.shape().batch,
        geo.plan.spec.output.h,
        geo.plan.spec.output.w,
    );
    if upstream.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            context: "conv adjoint upstream",
            expected: out_shape.to_string(),
            got: upstream.shape().to_string(),
        });
    }

    let padded = cv::pad(input, &geo.plan.padding, E::zero());
    let mut dpad = Tensor::zeros(padded.shape());
    let mut dw = Tensor::zeros(weights.shape());
    let in_ch = s.channels;
    let out_ch = weights.shape().batch;
    let (sh, sw) = (geo.plan.spec.stride.h, geo.plan.spec.stride.w);
    let (dh, dw_step) = (geo.plan.spec.dilation.h, geo.plan.spec.dilation.w);
    let pw = geo.padded.w;
    let (kth, ktw) = (geo.plan.spec.kernel.h, geo.plan.spec.kernel.w);

    let pdata = padded.data();
    let wdata = weights.data();
    let gdata = upstream.data();
    let dpad_data = dpad.data_mut();
    let dw_data = dw.data_mut();
    for b in 0..s.batch {
        for oc in 0..out_ch {
            for i in 0..geo.base_out.h {
                for j in 0..geo.base_out.w {
                    let (oi, oj) = rotated_position(t, i, j, geo.base_out.h, geo.base_out.w);
                    let gval = gdata[out_shape.index(b, oc, oi, oj)];
                    for ic in 0..in_ch {
                        let pbase = ((b * in_ch + ic) * geo.padded.h) * pw;
                        let wbase = ((oc * in_ch + ic) * kth) * ktw;
                        for &(rki, rkj) in &geo.cells {
                            let y = oi * sh + rki * dh;
                            let x = oj * sw + rkj * dw_step;
                            let widx = wbase + rki * ktw + rkj;
                            let pidx = pbase + y * pw + x;
                            dpad_data[pidx] = dpad_data[pidx] + wdata[widx] * gval;
                            dw_data[widx] = dw_data[widx] + pdata[pidx] * gval;
                        }
                    }
                }
            }
        }
    }
    let dx = cv::crop(&dpad, &geo.plan.padding)?;
    Ok((dx, dw))
}

/// A network recorded on a tape: the input leaf, the output variable, and
/// one named leaf per parameter, in [`PrecmNet::visit_params`] order.
pub struct TapedNet {
    pub input: VarId,
    pub output: VarId,
    pub params: Vec<(String, VarId)>,
}

fn bias_tensor<E: Scalar>(bias: &[E]) -> Tensor<E> {
    Tensor::from_vec(Shape::new(1, bias.len(), 1, 1), bias.to_vec()).expect("bias length")
}

/// Records a full forward pass of `net` on `x`, snapshotting every parameter
/// as a named leaf.
pub fn record_net<E: Scalar>(
    tape: &mut Tape<E>,
    net: &PrecmNet<E>,
    x: &Tensor<E>,
) -> Result<TapedNet> {
    let input = tape.input(x.clone());
    let mut cur = input;
    let mut params = Vec::new();
    for (idx, layer) in net.layers.iter().enumerate() {
        cur = match layer {
            Layer::Precm1 { weights, bias, spec } => {
                let w = tape.input(weights.clone());
                let b = tape.input(bias_tensor(bias));
                params.push((format!("layer{idx}.weight"), w));
                params.push((format!("layer{idx}.bias"), b));
                tape.precm1(cur, w, b, *spec)?
            }
            Layer::Precm2 { weights, bias, spec } => {
                let ws = [
                    tape.input(weights[0].clone()),
                    tape.input(weights[1].clone()),
                    tape.input(weights[2].clone()),
                    tape.input(weights[3].clone()),
                ];
                let b = tape.input(bias_tensor(bias));
                for (rel, w) in ws.iter().enumerate() {
                    params.push((format!("layer{idx}.weight{rel}"), *w));
                }
                params.push((format!("layer{idx}.bias"), b));
                tape.precm2(cur, ws, b, *spec)?
            }
            Layer::Precm3 { weights, bias, spec } => {
                let w = tape.input(weights.clone());
                let b = tape.input(bias_tensor(bias));
                params.push((format!("layer{idx}.weight"), w));
                params.push((format!("layer{idx}.bias"), b));
                tape.precm3(cur, w, b, *spec)?
            }
            Layer::Conv { weights, bias, spec } => {
                let w = tape.input(weights.clone());
                let b = tape.input(bias_tensor(bias));
                params.push((format!("layer{idx}.weight"), w));
                params.push((format!("layer{idx}.bias"), b));
                tape.conv_sigma(cur, w, Some(b), *spec, GroupElement::R0)?
            }
            Layer::Relu => tape.relu(cur),
            Layer::Sigmoid => tape.sigmoid(cur),
            Layer::Bias { bias } => {
                let b = tape.input(bias_tensor(bias));
                params.push((format!("layer{idx}.bias"), b));
                tape.add_bias(cur, b)?
            }
        };
    }
    Ok(TapedNet {
        input,
        output: cur,
        params,
    })
}

/// Collects the gradients of a recorded net's parameters as flat vectors
/// keyed by parameter name. Parameters the loss never touches get zeros.
pub fn gradient_map<E: Scalar>(
    tape: &Tape<E>,
    taped: &TapedNet,
    grads: &Gradients<E>,
) -> HashMap<String, Vec<E>> {
    let mut out = HashMap::new();
    for (name, var) in &taped.params {
        let flat = match grads.wrt(*var) {
            Some(g) => g.data().to_vec(),
            None => vec![E::zero(); tape.value(*var).shape().volume()],
        };
        out.insert(name.clone(), flat);
    }
    out
}

/// Stochastic gradient descent with classical momentum:
/// `v = momentum * v + g`, then `w = w - lr * v`.
pub struct MomentumSgd<E: Scalar> {
    lr: E,
    momentum: E,
    velocities: HashMap<String, Vec<E>>,
}

impl<E: Scalar> MomentumSgd<E> {
    pub fn new(lr: E, momentum: E) -> Self {
        MomentumSgd {
            lr,
            momentum,
            velocities: HashMap::new(),
        }
    }

    /// Applies one update to every parameter of `net`. `grads` must hold a
    /// gradient for each parameter name, as produced by [`gradient_map`].
    pub fn step(&mut self, net: &mut PrecmNet<E>, grads: &HashMap<String, Vec<E>>) -> Result<()> {
        let lr = self.lr;
        let momentum = self.momentum;
        let velocities = &mut self.velocities;
        let mut failure: Option<Error> = None;
        net.visit_params_mut(|name, p| {
            if failure.is_some() {
                return;
            }
            let data: &mut [E] = match p {
                ParamMut::Tensor(t) => t.data_mut(),
                ParamMut::Vector(v) => v,
            };
            let Some(g) = grads.get(&name) else {
                failure = Some(Error::InvalidConfig(format!("no gradient for {name}")));
                return;
            };
            if g.len() != data.len() {
                failure = Some(Error::LengthMismatch {
                    expected: data.len(),
                    got: g.len(),
                });
                return;
            }
            let v = velocities
                .entry(name)
                .or_insert_with(|| vec![E::zero(); data.len()]);
            for k in 0..data.len() {
                v[k] = momentum * v[k] + g[k];
                data[k] = data[k] - lr * v[k];
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{rotate, R180, R270, R90};
    use crate::layers::{build_net, Flavor, LayerConfig, NetConfig, ParamRef};
    use crate::padding::Extent;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn rand_mask(rng: &mut StdRng, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| {
            if rng.random_range(0.0..1.0) < 0.5 {
                0.0
            } else {
                1.0
            }
        })
    }

    fn small_config(flavor: Flavor, size: usize, seed: u64) -> NetConfig {
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

    fn net_loss(net: &crate::layers::PrecmNet<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        bce_loss_value(&net.forward(x).unwrap(), y).unwrap()
    }

    fn net_gradients(
        net: &crate::layers::PrecmNet<f64>,
        x: &Tensor<f64>,
        y: &Tensor<f64>,
    ) -> HashMap<String, Vec<f64>> {
        let mut tape = Tape::new();
        let taped = record_net(&mut tape, net, x).unwrap();
        let loss = tape.bce_loss(taped.output, y).unwrap();
        let grads = tape.backward(loss).unwrap();
        gradient_map(&tape, &taped, &grads)
    }

    #[test]
    fn taped_forward_matches_untaped_bitwise() {
        for flavor in [Flavor::Precm, Flavor::Baseline] {
            let net = build_net::<f64>(&small_config(flavor, 10, 51)).unwrap();
            let mut rng = StdRng::seed_from_u64(52);
            let x = rand_tensor(&mut rng, Shape::new(2, 1, 10, 10));
            let mut tape = Tape::new();
            let taped = record_net(&mut tape, &net, &x).unwrap();
            assert!(tape.value(taped.output).bit_eq(&net.forward(&x).unwrap()));
        }
    }

    #[test]
    fn bce_of_uniform_half_is_ln_two() {
        let p = Tensor::<f64>::filled(Shape::new(1, 1, 4, 4), 0.5);
        let y = Tensor::<f64>::filled(Shape::new(1, 1, 4, 4), 1.0);
        let loss = bce_loss_value(&p, &y).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_cross_entropy_gradient_is_prediction_minus_target_over_n() {
        let mut rng = StdRng::seed_from_u64(53);
        let logits = rand_tensor(&mut rng, Shape::new(1, 1, 3, 3));
        let y = rand_mask(&mut rng, Shape::new(1, 1, 3, 3));
        let mut tape = Tape::new();
        let z = tape.input(logits.clone());
        let p = tape.sigmoid(z);
        let loss = tape.bce_loss(p, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dz = grads.wrt(z).unwrap();
        let pv = tape.value(p);
        let n = 9.0;
        for i in 0..9 {
            let expect = (pv.data()[i] - y.data()[i]) / n;
            assert!((dz.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn clamped_predictions_get_zero_gradient() {
        let p = Tensor::<f64>::from_vec(
            Shape::new(1, 1, 1, 3),
            vec![0.0, 0.5, 1.0],
        )
        .unwrap();
        let y = Tensor::filled(Shape::new(1, 1, 1, 3), 1.0);
        let mut tape = Tape::new();
        let pv = tape.input(p);
        let loss = tape.bce_loss(pv, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dp = grads.wrt(pv).unwrap().data().to_vec();
        assert_eq!(dp[0], 0.0);
        assert!(dp[1] < 0.0);
        assert_eq!(dp[2], 0.0);
        assert!(tape.value(loss).data()[0].is_finite());
    }

    #[test]
    fn sum_gradient_is_all_ones_and_mean_gradient_is_uniform() {
        let mut rng = StdRng::seed_from_u64(54);
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3));
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let s = tape.sum(xv);
        let grads = tape.backward(s).unwrap();
        assert!(grads
            .wrt(xv)
            .unwrap()
            .bit_eq(&Tensor::filled(x.shape(), 1.0)));

        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let m = tape.mean(xv);
        let grads = tape.backward(m).unwrap();
        assert!(grads
            .wrt(xv)
            .unwrap()
            .bit_eq(&Tensor::filled(x.shape(), 1.0 / 18.0)));
    }

    #[test]
    fn relu_gradient_masks_nonpositive_cells() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let r = tape.relu(xv);
        let s = tape.sum(r);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(xv).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    fn central_difference(
        net: &crate::layers::PrecmNet<f64>,
        x: &Tensor<f64>,
        y: &Tensor<f64>,
        name: &str,
        k: usize,
        h: f64,
    ) -> f64 {
        let probe = |delta: f64| {
            let mut n = net.clone();
            n.visit_params_mut(|nm, p| {
                if nm == name {
                    let data = match p {
                        ParamMut::Tensor(t) => t.data_mut(),
                        ParamMut::Vector(v) => v,
                    };
                    data[k] += delta;
                }
            });
            net_loss(&n, x, y)
        };
        (probe(h) - probe(-h)) / (2.0 * h)
    }

    #[test]
    fn analytic_gradients_match_finite_differences_on_a_full_net() {
        for flavor in [Flavor::Precm, Flavor::Baseline] {
            let net = build_net::<f64>(&small_config(flavor, 8, 55)).unwrap();
            let mut rng = StdRng::seed_from_u64(56);
            let x = rand_tensor(&mut rng, Shape::new(1, 1, 8, 8));
            let y = rand_mask(&mut rng, Shape::new(1, 1, 8, 8));
            let grads = net_gradients(&net, &x, &y);
            let mut sizes = Vec::new();
            net.visit_params(|name, p| {
                let len = match p {
                    ParamRef::Tensor(t) => t.shape().volume(),
                    ParamRef::Vector(v) => v.len(),
                };
                sizes.push((name, len));
            });
            for (name, len) in sizes {
                let flat = &grads[&name];
                assert_eq!(flat.len(), len);
                for k in 0..len {
                    let numeric = central_difference(&net, &x, &y, &name, k, 1e-4);
                    let analytic = flat[k];
                    let rel = (analytic - numeric).abs()
                        / f64::max(1e-8, analytic.abs() + numeric.abs());
                    assert!(
                        rel < 1e-4,
                        "{flavor:?} {name}[{k}]: analytic {analytic} numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn mode_convolution_gradients_match_finite_differences() {
        let spec = ConvSpec {
            input: Extent::square(6),
            output: Extent::square(3),
            kernel: Extent::square(3),
            stride: Extent::square(2),
            dilation: Extent::square(1),
        };
        let mut rng = StdRng::seed_from_u64(57);
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 6, 6));
        let w = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3));
        let bias = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.1, -0.2]).unwrap();
        for &t in &ELEMENTS {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let wv = tape.input(w.clone());
            let bv = tape.input(bias.clone());
            let out = tape.conv_sigma(xv, wv, Some(bv), spec, t).unwrap();
            let loss = tape.sum(out);
            let grads = tape.backward(loss).unwrap();

            let eval = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let kernel = cv::Kernel::new(w.clone(), b.data().to_vec()).unwrap();
                cv::conv_sigma(x, &kernel, &spec, t).unwrap().sum()
            };
            let h = 1e-5;
            for (var, tensor) in [(xv, &x), (wv, &w), (bv, &bias)] {
                let analytic = grads.wrt(var).unwrap();
                for k in 0..tensor.shape().volume() {
                    let mut plus = (*tensor).clone();
                    plus.data_mut()[k] += h;
                    let mut minus = (*tensor).clone();
                    minus.data_mut()[k] -= h;
                    let (fp, fm) = match var {
                        v if v == xv => (eval(&plus, &w, &bias), eval(&minus, &w, &bias)),
                        v if v == wv => (eval(&x, &plus, &bias), eval(&x, &minus, &bias)),
                        _ => (eval(&x, &w, &plus), eval(&x, &w, &minus)),
                    };
                    let numeric = (fp - fm) / (2.0 * h);
                    let got = analytic.data()[k];
                    assert!(
                        (got - numeric).abs() / f64::max(1e-6, got.abs() + numeric.abs()) < 1e-5,
                        "t = {t:?}, k = {k}: {got} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn parameter_gradients_are_identical_for_rotated_training_pairs() {
        let net = build_net::<f64>(&small_config(Flavor::Precm, 8, 58)).unwrap();
        let mut rng = StdRng::seed_from_u64(59);
        let x = rand_tensor(&mut rng, Shape::new(2, 1, 8, 8));
        let y = rand_mask(&mut rng, Shape::new(2, 1, 8, 8));
        let base = net_gradients(&net, &x, &y);
        for &t in &[R90, R180, R270] {
            let turned = net_gradients(&net, &rotate(t, &x), &rotate(t, &y));
            for (name, flat) in &base {
                let other = &turned[name];
                let same = flat
                    .iter()
                    .zip(other)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "t = {t:?}, param {name}");
            }
        }
    }

    fn scalar_net() -> (NetConfig, crate::layers::PrecmNet<f64>) {
        let config = NetConfig {
            flavor: Flavor::Precm,
            input_channels: 1,
            input_size: 1,
            seed: 60,
            layers: vec![
                LayerConfig::Precm1 {
                    block_channels: 1,
                    kernel: 1,
                    stride: 1,
                    dilation: 1,
                },
                LayerConfig::Precm3 {
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    dilation: 1,
                },
            ],
        };
        let net = build_net::<f64>(&config).unwrap();
        (config, net)
    }

    fn zero_grads(net: &crate::layers::PrecmNet<f64>) -> HashMap<String, Vec<f64>> {
        let mut grads = HashMap::new();
        net.visit_params(|name, p| {
            let len = match p {
                ParamRef::Tensor(t) => t.shape().volume(),
                ParamRef::Vector(v) => v.len(),
            };
            grads.insert(name, vec![0.0; len]);
        });
        grads
    }

    #[test]
    fn momentum_descent_follows_the_frozen_two_step_example() {
        let (_, mut net) = scalar_net();
        net.visit_params_mut(|name, p| {
            if name == "layer0.weight" {
                if let ParamMut::Tensor(t) = p {
                    t.data_mut()[0] = 1.0;
                }
            }
        });
        let mut sgd = MomentumSgd::new(0.1, 0.9);

        // Gradient of w^2 at w = 1 is 2; the update gives v = 2, w = 0.8.
        let mut grads = zero_grads(&net);
        grads.insert("layer0.weight".to_string(), vec![2.0]);
        sgd.step(&mut net, &grads).unwrap();
        let mut w = 0.0;
        net.visit_params(|name, p| {
            if name == "layer0.weight" {
                if let ParamRef::Tensor(t) = p {
                    w = t.data()[0];
                }
            }
        });
        assert!((w - 0.8).abs() < 1e-12);

        // At w = 0.8 the gradient is 1.6; v = 0.9 * 2 + 1.6 = 3.4, w = 0.46.
        let mut grads = zero_grads(&net);
        grads.insert("layer0.weight".to_string(), vec![1.6]);
        sgd.step(&mut net, &grads).unwrap();
        net.visit_params(|name, p| {
            if name == "layer0.weight" {
                if let ParamRef::Tensor(t) = p {
                    w = t.data()[0];
                }
            }
        });
        assert!((w - 0.46).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let net = build_net::<f64>(&small_config(Flavor::Precm, 8, 61)).unwrap();
        let mut rng = StdRng::seed_from_u64(62);
        let x = rand_tensor(&mut rng, Shape::new(1, 1, 8, 8));
        let y = rand_mask(&mut rng, Shape::new(1, 1, 8, 8));
        let grads = net_gradients(&net, &x, &y);
        let mut stepped = net.clone();
        MomentumSgd::new(0.0, 0.9).step(&mut stepped, &grads).unwrap();
        let mut before = Vec::new();
        net.visit_params(|_, p| {
            if let ParamRef::Tensor(t) = p {
                before.push(t.clone());
            }
        });
        stepped.visit_params(|_, p| {
            if let ParamRef::Tensor(t) = p {
                assert!(t.bit_eq(&before.remove(0)));
            }
        });
    }

    #[test]
    fn missing_gradient_entry_is_an_error() {
        let (_, mut net) = scalar_net();
        let mut grads = zero_grads(&net);
        grads.remove("layer1.bias");
        assert!(MomentumSgd::new(0.1, 0.9).step(&mut net, &grads).is_err());
    }

    #[test]
    fn training_reduces_the_loss_for_both_flavors() {
        for flavor in [Flavor::Precm, Flavor::Baseline] {
            let mut net = build_net::<f64>(&small_config(flavor, 8, 63)).unwrap();
            let mut rng = StdRng::seed_from_u64(64);
            let x = rand_tensor(&mut rng, Shape::new(2, 1, 8, 8));
            let y = rand_mask(&mut rng, Shape::new(2, 1, 8, 8));
            let initial = net_loss(&net, &x, &y);
            let mut sgd = MomentumSgd::new(0.05, 0.9);
            for _ in 0..30 {
                let grads = net_gradients(&net, &x, &y);
                sgd.step(&mut net, &grads).unwrap();
            }
            let last = net_loss(&net, &x, &y);
            assert!(last < initial, "{flavor:?}: {initial} -> {last}");
        }
    }

    #[test]
    fn training_is_deterministic_bitwise() {
        let run = || {
            let mut net = build_net::<f64>(&small_config(Flavor::Precm, 8, 65)).unwrap();
            let mut rng = StdRng::seed_from_u64(66);
            let x = rand_tensor(&mut rng, Shape::new(1, 1, 8, 8));
            let y = rand_mask(&mut rng, Shape::new(1, 1, 8, 8));
            let mut sgd = MomentumSgd::new(0.05, 0.9);
            for _ in 0..5 {
                let grads = net_gradients(&net, &x, &y);
                sgd.step(&mut net, &grads).unwrap();
            }
            let mut flat = Vec::new();
            net.visit_params(|_, p| match p {
                ParamRef::Tensor(t) => flat.extend(t.data().iter().map(|v| v.to_bits())),
                ParamRef::Vector(v) => flat.extend(v.iter().map(|v| v.to_bits())),
            });
            flat
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_requires_a_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn add_and_bias_nodes_propagate_gradients() {
        let mut rng = StdRng::seed_from_u64(67);
        let a = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3));
        let b = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3));
        let bias = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.4, -0.6]).unwrap();
        let mut tape = Tape::new();
        let av = tape.input(a);
        let bv = tape.input(b);
        let biasv = tape.input(bias);
        let s = tape.add(av, bv).unwrap();
        let shifted = tape.add_bias(s, biasv).unwrap();
        let loss = tape.sum(shifted);
        let grads = tape.backward(loss).unwrap();
        let ones = Tensor::filled(Shape::new(1, 2, 3, 3), 1.0);
        assert!(grads.wrt(av).unwrap().bit_eq(&ones));
        assert!(grads.wrt(bv).unwrap().bit_eq(&ones));
        // Each channel's bias touches nine cells.
        assert_eq!(grads.wrt(biasv).unwrap().data(), &[9.0, 9.0]);
    }
}
