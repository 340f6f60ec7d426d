//! Padding plans that make strided convolution commute with quarter turns.
//!
//! A convolution is described by a [`ConvSpec`]; [`derive_base_padding`]
//! produces the four-sided padding that realizes the requested output extent
//! exactly, and [`rotate_padding`] turns that plan so the padded picture of a
//! rotated input is the rotation of the padded picture of the original. The
//! output-extent formula must divide exactly for that commutation to hold;
//! [`output_shape`] reports whether it does.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::GroupElement;

/// A spatial extent, width first to match the usual "WxH" notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub w: usize,
    pub h: usize,
}

impl Extent {
    pub fn new(w: usize, h: usize) -> Self {
        Extent { w, h }
    }

    pub fn square(n: usize) -> Self {
        Extent { w: n, h: n }
    }

    pub fn swapped(self) -> Self {
        Extent {
            w: self.h,
            h: self.w,
        }
    }

    pub fn is_square(self) -> bool {
        self.w == self.h
    }

    pub fn area(self) -> usize {
        self.w * self.h
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.w, self.h)
    }
}

impl FromStr for Extent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::InvalidConfig(format!("expected WxH, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad extent component {v:?}")))
        };
        Ok(Extent::new(parse(w)?, parse(h)?))
    }
}

/// Zero-fill amounts on the four sides of a plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub above: usize,
    pub below: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn zero() -> Self {
        Padding {
            above: 0,
            below: 0,
            left: 0,
            right: 0,
        }
    }

    pub fn total(self) -> usize {
        self.above + self.below + self.left + self.right
    }

    /// Extent of a plane of extent `e` after padding.
    pub fn padded(self, e: Extent) -> Extent {
        Extent::new(self.left + e.w + self.right, self.above + e.h + self.below)
    }
}

/// Everything that fixes the geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub input: Extent,
    pub output: Extent,
    pub kernel: Extent,
    pub stride: Extent,
    pub dilation: Extent,
}

impl ConvSpec {
    /// Spec with every extent's axes swapped, describing the same convolution
    /// seen through a quarter turn.
    pub fn swapped(self) -> Self {
        ConvSpec {
            input: self.input.swapped(),
            output: self.output.swapped(),
            kernel: self.kernel.swapped(),
            stride: self.stride.swapped(),
            dilation: self.dilation.swapped(),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for (name, e) in [
            ("input", self.input),
            ("output", self.output),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("dilation", self.dilation),
        ] {
            if e.w == 0 || e.h == 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} extent {e} has a zero component"
                )));
            }
        }
        Ok(())
    }
}

/// The convolution geometry under one rotation mode: the turned padding and
/// the `ConvSpec` with axes swapped when the turn is odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModePlan {
    pub element: GroupElement,
    pub padding: Padding,
    pub spec: ConvSpec,
}

/// Total padding one axis needs: `(out - 1) * stride + dilation * (kernel - 1)
/// + 1 - in`. Negative means the requested output is too small to reach.
fn axis_total(input: usize, output: usize, kernel: usize, stride: usize, dilation: usize) -> i64 {
    (output as i64 - 1) * stride as i64 + dilation as i64 * (kernel as i64 - 1) + 1 - input as i64
}

/// Derives the unrotated padding plan for `spec`.
///
/// The budget on each axis is split with the smaller half below (respectively
/// left), so any odd leftover goes above and right.
pub fn derive_base_padding(spec: &ConvSpec) -> Result<Padding> {
    spec.validate()?;
    let vertical = axis_total(
        spec.input.h,
        spec.output.h,
        spec.kernel.h,
        spec.stride.h,
        spec.dilation.h,
    );
    if vertical < 0 {
        return Err(Error::InfeasiblePadding {
            axis: "height",
            total: vertical,
        });
    }
    let horizontal = axis_total(
        spec.input.w,
        spec.output.w,
        spec.kernel.w,
        spec.stride.w,
        spec.dilation.w,
    );
    if horizontal < 0 {
        return Err(Error::InfeasiblePadding {
            axis: "width",
            total: horizontal,
        });
    }
    let below = (vertical / 2) as usize;
    let left = (horizontal / 2) as usize;
    Ok(Padding {
        above: vertical as usize - below,
        below,
        left,
        right: horizontal as usize - left,
    })
}

/// Turns a padding plan a quarter turn at a time: after one counterclockwise
/// turn the old right edge is on top, the old top edge is on the left, and so
/// on around.
pub fn rotate_padding(p: Padding, t: GroupElement) -> Padding {
    let mut q = p;
    for _ in 0..t.index() {
        q = Padding {
            above: q.right,
            left: q.above,
            below: q.left,
            right: q.below,
        };
    }
    q
}

/// Output extent implied by `spec` and `padding`, with an exactness flag.
///
/// The flag is false when the stride does not divide the span exactly; such
/// configurations still convolve (the extent floors) but they cannot commute
/// with rotations.
pub fn output_shape(spec: &ConvSpec, padding: &Padding) -> Result<(Extent, bool)> {
    spec.validate()?;
    let axis = |padded: usize, kernel: usize, stride: usize, dilation: usize, name| {
        let span = padded as i64 - dilation as i64 * (kernel as i64 - 1) - 1;
        if span < 0 {
            return Err(Error::EmptyOutput {
                axis: name,
                numerator: span,
            });
        }
        Ok((
            (span / stride as i64) as usize + 1,
            span % stride as i64 == 0,
        ))
    };
    let padded = padding.padded(spec.input);
    let (h, h_exact) = axis(padded.h, spec.kernel.h, spec.stride.h, spec.dilation.h, "height")?;
    let (w, w_exact) = axis(padded.w, spec.kernel.w, spec.stride.w, spec.dilation.w, "width")?;
    Ok((Extent::new(w, h), h_exact && w_exact))
}

/// Full plan for running `spec` under rotation mode `t`.
pub fn plan_for_mode(spec: &ConvSpec, t: GroupElement) -> Result<ModePlan> {
    let base = derive_base_padding(spec)?;
    let spec_t = if t.swaps_axes() {
        spec.swapped()
    } else {
        *spec
    };
    Ok(ModePlan {
        element: t,
        padding: rotate_padding(base, t),
        spec: spec_t,
    })
}

/// Smallest output extent with a non-negative padding budget on both axes.
pub fn min_feasible_output(input: Extent, kernel: Extent, stride: Extent, dilation: Extent) -> Extent {
    let axis = |input: usize, kernel: usize, stride: usize, dilation: usize| {
        let span = input as i64 - dilation as i64 * (kernel as i64 - 1) - 1;
        if span <= 0 {
            1
        } else {
            (span as usize).div_ceil(stride) + 1
        }
    };
    Extent::new(
        axis(input.w, kernel.w, stride.w, dilation.w),
        axis(input.h, kernel.h, stride.h, dilation.h),
    )
}

/// The usual "cover the input" output extent: ceil(input / stride), bumped up
/// to the feasible minimum when the kernel out-reaches it.
pub fn same_style_output(input: Extent, kernel: Extent, stride: Extent, dilation: Extent) -> Extent {
    let min = min_feasible_output(input, kernel, stride, dilation);
    Extent::new(
        input.w.div_ceil(stride.w).max(min.w),
        input.h.div_ceil(stride.h).max(min.h),
    )
}
