//! Padded convolution under rotation modes, plus its flattened matrix form.
//!
//! [`conv_sigma`] evaluates one convolution mode: the input is padded with
//! the mode's turned padding plan and cross-correlated with the given kernel
//! using the mode's (axis-swapped, when the turn is odd) stride and dilation.
//! With the kernel and input both rotated by the mode's element, the result
//! is exactly the rotation of the unrotated mode's result.
//!
//! That equality is bit-exact, not approximate, because of an accumulation
//! contract all routes here share: every output cell sums
//! `bias, (channel 0, kernel cells...), (channel 1, kernel cells...)` with
//! kernel cells visited in the row-major order of the *unrotated* kernel.
//! Under a rotation mode the visit path turns with the kernel, so both sides
//! of the equality perform literally the same float operations in the same
//! order. Reorderings (summing the rotated kernel row-major, say) would agree
//! only to roundoff.

use crate::error::{Error, Result};
use crate::group::{rotate_kernel, rotated_position, GroupElement};
use crate::padding::{plan_for_mode, ConvSpec, Extent, ModePlan, Padding};
use crate::tensor::{Scalar, Shape, Tensor};

/// Convolution weights with a per-output-channel bias.
///
/// Weights are laid out as a tensor of shape (out_channels, in_channels,
/// kernel_h, kernel_w), reusing the NCHW axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<E: Scalar> {
    weights: Tensor<E>,
    bias: Vec<E>,
}

impl<E: Scalar> Kernel<E> {
    pub fn new(weights: Tensor<E>, bias: Vec<E>) -> Result<Self> {
        if bias.len() != weights.shape().batch {
            return Err(Error::LengthMismatch {
                expected: weights.shape().batch,
                got: bias.len(),
            });
        }
        Ok(Kernel { weights, bias })
    }

    pub fn from_weights(weights: Tensor<E>) -> Self {
        let bias = vec![E::zero(); weights.shape().batch];
        Kernel { weights, bias }
    }

    pub fn weights(&self) -> &Tensor<E> {
        &self.weights
    }

    pub fn bias(&self) -> &[E] {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().batch
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().channels
    }

    /// Spatial extent, width first.
    pub fn extent(&self) -> Extent {
        Extent::new(self.weights.shape().width, self.weights.shape().height)
    }

    /// The kernel turned by `t`; the bias is per-channel and unaffected.
    pub fn rotated(&self, t: GroupElement) -> Self {
        Kernel {
            weights: rotate_kernel(t, &self.weights),
            bias: self.bias.clone(),
        }
    }
}

/// Zero-pads (or `fill`-pads) every spatial plane.
pub fn pad<E: Scalar>(input: &Tensor<E>, padding: &Padding, fill: E) -> Tensor<E> {
    let s = input.shape();
    let out_h = padding.above + s.height + padding.below;
    let out_w = padding.left + s.width + padding.right;
    let mut out = Tensor::filled(Shape::new(s.batch, s.channels, out_h, out_w), fill);
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    out.set(b, c, padding.above + y, padding.left + x, input.get(b, c, y, x));
                }
            }
        }
    }
    out
}

/// Removes padding again: the adjoint of [`pad`] used by gradient code.
pub fn crop<E: Scalar>(input: &Tensor<E>, padding: &Padding) -> Result<Tensor<E>> {
    let s = input.shape();
    let trim_h = padding.above + padding.below;
    let trim_w = padding.left + padding.right;
    if s.height < trim_h + 1 || s.width < trim_w + 1 {
        return Err(Error::ShapeMismatch {
            context: "crop",
            expected: format!("at least {}x{}", trim_h + 1, trim_w + 1),
            got: format!("{}x{}", s.height, s.width),
        });
    }
    let out_h = s.height - trim_h;
    let out_w = s.width - trim_w;
    Ok(Tensor::from_fn(
        Shape::new(s.batch, s.channels, out_h, out_w),
        |b, c, y, x| input.get(b, c, padding.above + y, padding.left + x),
    ))
}

/// Geometry shared by the forward and backward passes of one mode.
pub(crate) struct ModeGeometry {
    pub plan: ModePlan,
    /// Extent of the output in the unrotated frame (the walk order frame).
    pub base_out: Extent,
    /// Rotated kernel cell for each unrotated cell, in unrotated row-major
    /// order. This is the accumulation order contract.
    pub cells: Vec<(usize, usize)>,
    /// Extent of the padded rotated input.
    pub padded: Extent,
}

pub(crate) fn mode_geometry(spec: &ConvSpec, t: GroupElement) -> Result<ModeGeometry> {
    let plan = plan_for_mode(spec, t)?;
    let base_out = spec.output;
    let base_kernel = spec.kernel;
    let mut cells = Vec::with_capacity(base_kernel.area());
    for ki in 0..base_kernel.h {
        for kj in 0..base_kernel.w {
            cells.push(rotated_position(t, ki, kj, base_kernel.h, base_kernel.w));
        }
    }
    let padded = plan.padding.padded(plan.spec.input);
    Ok(ModeGeometry {
        plan,
        base_out,
        cells,
        padded,
    })
}

pub(crate) fn check_conv_args<E: Scalar>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    geo: &ModeGeometry,
) -> Result<()> {
    let s = input.shape();
    let expect = geo.plan.spec.input;
    if s.height != expect.h || s.width != expect.w {
        return Err(Error::ShapeMismatch {
            context: "conv input plane",
            expected: expect.to_string(),
            got: Extent::new(s.width, s.height).to_string(),
        });
    }
    let k = weights.shape();
    if k.channels != s.channels {
        return Err(Error::ShapeMismatch {
            context: "conv channels",
            expected: k.channels.to_string(),
            got: s.channels.to_string(),
        });
    }
    let ke = geo.plan.spec.kernel;
    if k.height != ke.h || k.width != ke.w {
        return Err(Error::ShapeMismatch {
            context: "conv kernel plane",
            expected: ke.to_string(),
            got: Extent::new(k.width, k.height).to_string(),
        });
    }
    Ok(())
}

/// Core loop shared by the public entry points. When `accumulate` is false
/// each output cell is seeded with the bias (zero if `bias` is `None`);
/// when true, products are added onto the cell's existing value and the bias
/// is not applied.
pub(crate) fn conv_core<E: Scalar>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    bias: Option<&[E]>,
    spec: &ConvSpec,
    t: GroupElement,
    out: &mut Tensor<E>,
    accumulate: bool,
) -> Result<()> {
    let geo = mode_geometry(spec, t)?;
    check_conv_args(input, weights, &geo)?;
    let s = input.shape();
    let out_shape = Shape::new(
        s.batch,
        weights.shape().batch,
        geo.plan.spec.output.h,
        geo.plan.spec.output.w,
    );
    if out.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            context: "conv output",
            expected: out_shape.to_string(),
            got: out.shape().to_string(),
        });
    }
    if let Some(b) = bias {
        if b.len() != weights.shape().batch {
            return Err(Error::LengthMismatch {
                expected: weights.shape().batch,
                got: b.len(),
            });
        }
    }

    let padded = pad(input, &geo.plan.padding, E::zero());
    let in_ch = s.channels;
    let out_ch = weights.shape().batch;
    let (sh, sw) = (geo.plan.spec.stride.h, geo.plan.spec.stride.w);
    let (dh, dw) = (geo.plan.spec.dilation.h, geo.plan.spec.dilation.w);
    let pw = geo.padded.w;
    let (kth, ktw) = (geo.plan.spec.kernel.h, geo.plan.spec.kernel.w);

    let pdata = padded.data();
    let wdata = weights.data();
    for b in 0..s.batch {
        for oc in 0..out_ch {
            for i in 0..geo.base_out.h {
                for j in 0..geo.base_out.w {
                    let (oi, oj) =
                        rotated_position(t, i, j, geo.base_out.h, geo.base_out.w);
                    let out_idx = out_shape.index(b, oc, oi, oj);
                    let mut acc = if accumulate {
                        out.data()[out_idx]
                    } else {
                        bias.map_or(E::zero(), |bv| bv[oc])
                    };
                    for ic in 0..in_ch {
                        let pbase = ((b * in_ch + ic) * geo.padded.h) * pw;
                        let wbase = ((oc * in_ch + ic) * kth) * ktw;
                        for &(rki, rkj) in &geo.cells {
                            let y = oi * sh + rki * dh;
                            let x = oj * sw + rkj * dw;
                            acc = acc
                                + wdata[wbase + rki * ktw + rkj] * pdata[pbase + y * pw + x];
                        }
                    }
                    out.data_mut()[out_idx] = acc;
                }
            }
        }
    }
    Ok(())
}

/// Convolution under rotation mode `t`.
///
/// `input` and `kernel` must already live in the rotated frame: for odd
/// turns their planes are the axis-swapped extents of `spec`. The result has
/// the mode's output extent.
pub fn conv_sigma<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Kernel<E>,
    spec: &ConvSpec,
    t: GroupElement,
) -> Result<Tensor<E>> {
    let geo = mode_geometry(spec, t)?;
    let mut out = Tensor::zeros(Shape::new(
        input.shape().batch,
        kernel.out_channels(),
        geo.plan.spec.output.h,
        geo.plan.spec.output.w,
    ));
    conv_core(
        input,
        kernel.weights(),
        Some(kernel.bias()),
        spec,
        t,
        &mut out,
        false,
    )?;
    Ok(out)
}

/// Plain strided, dilated cross-correlation with an explicit padding plan.
///
/// Unlike [`conv_sigma`] this performs no turning of any kind; the output
/// extent floors when the stride does not divide exactly. It exists so that
/// deliberately wrong plans (unrotated padding on rotated input) can be
/// evaluated by audits.
pub fn conv_direct<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Kernel<E>,
    padding: &Padding,
    stride: Extent,
    dilation: Extent,
) -> Result<Tensor<E>> {
    let s = input.shape();
    if kernel.in_channels() != s.channels {
        return Err(Error::ShapeMismatch {
            context: "conv channels",
            expected: kernel.in_channels().to_string(),
            got: s.channels.to_string(),
        });
    }
    let spec = ConvSpec {
        input: Extent::new(s.width, s.height),
        output: Extent::square(1),
        kernel: kernel.extent(),
        stride,
        dilation,
    };
    let (out_extent, _exact) = crate::padding::output_shape(&spec, padding)?;
    let padded = pad(input, padding, E::zero());
    let ke = kernel.extent();
    let mut out = Tensor::zeros(Shape::new(
        s.batch,
        kernel.out_channels(),
        out_extent.h,
        out_extent.w,
    ));
    for b in 0..s.batch {
        for oc in 0..kernel.out_channels() {
            for i in 0..out_extent.h {
                for j in 0..out_extent.w {
                    let mut acc = kernel.bias()[oc];
                    for ic in 0..s.channels {
                        for ki in 0..ke.h {
                            for kj in 0..ke.w {
                                let y = i * stride.h + ki * dilation.h;
                                let x = j * stride.w + kj * dilation.w;
                                acc = acc
                                    + kernel.weights().get(oc, ic, ki, kj)
                                        * padded.get(b, ic, y, x);
                            }
                        }
                    }
                    out.set(b, oc, i, j, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Row-major readout of one spatial plane as a flat vector.
pub fn flatten_feature<E: Scalar>(t: &Tensor<E>, b: usize, c: usize) -> Vec<E> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.plane());
    for y in 0..s.height {
        for x in 0..s.width {
            out.push(t.get(b, c, y, x));
        }
    }
    out
}

/// Inverse of [`flatten_feature`] for a single plane.
pub fn unflatten_feature<E: Scalar>(values: &[E], extent: Extent) -> Result<Tensor<E>> {
    Tensor::from_vec(Shape::new(1, 1, extent.h, extent.w), values.to_vec())
}

/// Dense row-major matrix holding the flattened form of one kernel plane.
/// Almost all entries are structural zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatMatrix<E: Scalar> {
    pub rows: usize,
    pub cols: usize,
    data: Vec<E>,
}

impl<E: Scalar> FlatMatrix<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FlatMatrix {
            rows,
            cols,
            data: vec![E::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> E {
        self.data[u * self.cols + v]
    }

    #[inline]
    fn set(&mut self, u: usize, v: usize, value: E) {
        self.data[u * self.cols + v] = value;
    }

    /// Count of nonzero entries in row `u`.
    pub fn row_nnz(&self, u: usize) -> usize {
        self.data[u * self.cols..(u + 1) * self.cols]
            .iter()
            .filter(|&&v| v != E::zero())
            .count()
    }

    /// Adds `M x` onto `out`, row by row, scanning each full row in ascending
    /// column order. Structural zeros are multiplied and added like any other
    /// entry; since `s + 0.0` leaves the accumulator's value unchanged, the
    /// per-cell float sequence matches the direct convolution's exactly.
    pub fn matvec_accumulate(&self, x: &[E], out: &mut [E]) {
        assert_eq!(x.len(), self.cols, "matvec operand length");
        assert_eq!(out.len(), self.rows, "matvec output length");
        for u in 0..self.rows {
            let row = &self.data[u * self.cols..(u + 1) * self.cols];
            let mut acc = out[u];
            for (m, xv) in row.iter().zip(x) {
                acc = acc + *m * *xv;
            }
            out[u] = acc;
        }
    }
}

/// Builds the flattened matrix of one (out-channel, in-channel) kernel plane
/// for the convolution geometry `spec` padded by `padding`.
///
/// Row `u` indexes output cells row-major; column `v` indexes padded input
/// cells row-major. Entry `(u, v)` is the kernel weight that multiplies
/// padded cell `v` when producing output cell `u`, or zero when no kernel
/// cell connects the pair.
pub fn sparse_kernel_matrix<E: Scalar>(
    weights: &Tensor<E>,
    oc: usize,
    ic: usize,
    spec: &ConvSpec,
    padding: &Padding,
) -> FlatMatrix<E> {
    let padded = padding.padded(spec.input);
    let mut m = FlatMatrix::zeros(spec.output.area(), padded.area());
    for i in 0..spec.output.h {
        for j in 0..spec.output.w {
            let u = i * spec.output.w + j;
            for ki in 0..spec.kernel.h {
                for kj in 0..spec.kernel.w {
                    let y = i * spec.stride.h + ki * spec.dilation.h;
                    let x = j * spec.stride.w + kj * spec.dilation.w;
                    m.set(u, y * padded.w + x, weights.get(oc, ic, ki, kj));
                }
            }
        }
    }
    m
}

/// Unrotated convolution evaluated through the flattened matrix form:
/// `out = bias + sum over in-channels of (Phi_ic * flatten(padded input_ic))`.
///
/// Agrees with `conv_sigma(..., R0)` bit for bit; see [`FlatMatrix::matvec_accumulate`].
pub fn conv_via_matrix<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Kernel<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    let geo = mode_geometry(spec, GroupElement::R0)?;
    check_conv_args(input, kernel.weights(), &geo)?;
    let s = input.shape();
    let padded = pad(input, &geo.plan.padding, E::zero());
    let mut out = Tensor::zeros(Shape::new(
        s.batch,
        kernel.out_channels(),
        spec.output.h,
        spec.output.w,
    ));
    for b in 0..s.batch {
        for oc in 0..kernel.out_channels() {
            let mut plane = vec![kernel.bias()[oc]; spec.output.area()];
            for ic in 0..s.channels {
                let phi =
                    sparse_kernel_matrix(kernel.weights(), oc, ic, spec, &geo.plan.padding);
                let fin = flatten_feature(&padded, b, ic);
                phi.matvec_accumulate(&fin, &mut plane);
            }
            for (idx, v) in plane.into_iter().enumerate() {
                out.set(b, oc, idx / spec.output.w, idx % spec.output.w, v);
            }
        }
    }
    Ok(out)
}

fn turn_coefficients(t: GroupElement) -> (i64, i64) {
    // (cos, sin) of the turn angle; exact because angles are right.
    match t {
        GroupElement::R0 => (1, 0),
        GroupElement::R90 => (0, 1),
        GroupElement::R180 => (-1, 0),
        GroupElement::R270 => (0, -1),
    }
}

/// Flat index into the unrotated plane of extent `base` holding the value
/// that lands at flat index `m` of the plane rotated by `t`.
///
/// This is the closed form of the row transform: center the rotated
/// coordinates, apply the turn's rotation matrix, re-center in the unrotated
/// plane. All arithmetic is integral (coordinates are doubled so the centers
/// `(n-1)/2` stay exact). The same function serves output planes and padded
/// input planes; only `base` changes.
pub fn row_transform_out(t: GroupElement, m: usize, base: Extent) -> usize {
    let (rh, rw) = crate::group::rotated_extent(t, base.h, base.w);
    assert!(m < rh * rw, "flat index {m} outside {rw}x{rh} plane");
    let i = (m / rw) as i64;
    let j = (m % rw) as i64;
    let yc2 = 2 * i - (rh as i64 - 1);
    let xc2 = 2 * j - (rw as i64 - 1);
    let (c, s) = turn_coefficients(t);
    let ry2 = c * yc2 + s * xc2;
    let rx2 = -s * yc2 + c * xc2;
    let y2 = ry2 + (base.h as i64 - 1);
    let x2 = rx2 + (base.w as i64 - 1);
    debug_assert!(y2 >= 0 && x2 >= 0 && y2 % 2 == 0 && x2 % 2 == 0);
    (y2 / 2) as usize * base.w + (x2 / 2) as usize
}

/// Unrotated kernel coordinates `(row, col)` connecting rotated-frame output
/// cell `m` to rotated-frame padded input cell `n` under mode `t`, or `None`
/// when the pair is a structural zero of the flattened matrix.
///
/// `None` covers both off-lattice pairs (the stride/dilation quotient is not
/// integral) and lattice points outside the kernel's support.
pub fn kernel_index_transform(
    t: GroupElement,
    m: usize,
    n: usize,
    spec: &ConvSpec,
) -> Result<Option<(usize, usize)>> {
    let plan = plan_for_mode(spec, t)?;
    let st = plan.spec;
    let padded = plan.padding.padded(st.input);
    assert!(m < st.output.area(), "flat output index {m} out of range");
    assert!(n < padded.area(), "flat input index {n} out of range");

    let i = (m / st.output.w) as i64;
    let j = (m % st.output.w) as i64;
    let yin = (n / padded.w) as i64;
    let xin = (n % padded.w) as i64;

    let num_y = yin - i * st.stride.h as i64;
    let num_x = xin - j * st.stride.w as i64;
    if num_y % st.dilation.h as i64 != 0 || num_x % st.dilation.w as i64 != 0 {
        return Ok(None);
    }
    let a = num_y / st.dilation.h as i64;
    let b = num_x / st.dilation.w as i64;

    let ya2 = 2 * a - (st.kernel.h as i64 - 1);
    let xb2 = 2 * b - (st.kernel.w as i64 - 1);
    let (c, s) = turn_coefficients(t);
    let ry2 = c * ya2 + s * xb2;
    let rx2 = -s * ya2 + c * xb2;
    let ky2 = ry2 + (spec.kernel.h as i64 - 1);
    let kx2 = rx2 + (spec.kernel.w as i64 - 1);
    debug_assert!(ky2 % 2 == 0 && kx2 % 2 == 0);
    let ky = ky2 / 2;
    let kx = kx2 / 2;
    if ky < 0 || kx < 0 || ky >= spec.kernel.h as i64 || kx >= spec.kernel.w as i64 {
        return Ok(None);
    }
    Ok(Some((ky as usize, kx as usize)))
}
