//! The cyclic group of quarter-turn rotations and its action on tensors.
//!
//! A group element rotates a plane counterclockwise by a multiple of 90
//! degrees. The action is a pure index permutation: no interpolation, no
//! arithmetic on element values, so rotating and rotating back is lossless
//! for every dtype.

use crate::tensor::{LabelMap, Scalar, Shape, Tensor};

/// A quarter-turn rotation, counterclockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupElement {
    R0,
    R90,
    R180,
    R270,
}

pub use GroupElement::{R0, R180, R270, R90};

/// All elements in composition order.
pub const ELEMENTS: [GroupElement; 4] = [R0, R90, R180, R270];

impl GroupElement {
    /// Number of quarter turns, 0..=3.
    pub fn index(self) -> usize {
        match self {
            R0 => 0,
            R90 => 1,
            R180 => 2,
            R270 => 3,
        }
    }

    /// Element for `index` quarter turns (taken mod 4).
    pub fn from_index(index: usize) -> Self {
        ELEMENTS[index % 4]
    }

    pub fn degrees(self) -> u32 {
        self.index() as u32 * 90
    }

    /// True when the rotation swaps the two spatial axes.
    pub fn swaps_axes(self) -> bool {
        self.index() % 2 == 1
    }
}

/// Group product: applying `b` first, then `a`, equals `compose(a, b)`.
/// The group is commutative, so the order of arguments does not matter.
pub fn compose(a: GroupElement, b: GroupElement) -> GroupElement {
    GroupElement::from_index(a.index() + b.index())
}

pub fn inverse(a: GroupElement) -> GroupElement {
    GroupElement::from_index((4 - a.index()) % 4)
}

/// Extent `(h, w)` of a plane after rotating one of extent `(h, w)`.
pub fn rotated_extent(t: GroupElement, h: usize, w: usize) -> (usize, usize) {
    if t.swaps_axes() {
        (w, h)
    } else {
        (h, w)
    }
}

/// Where cell `(y, x)` of an `h` by `w` plane lands after rotation by `t`.
#[inline]
pub fn rotated_position(t: GroupElement, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
    debug_assert!(y < h && x < w);
    match t {
        R0 => (y, x),
        R90 => (w - 1 - x, y),
        R180 => (h - 1 - y, w - 1 - x),
        R270 => (x, h - 1 - y),
    }
}

/// Rotates every spatial plane of `input` by `t`. Odd quarter turns swap the
/// height and width of the result.
pub fn rotate<E: Scalar>(t: GroupElement, input: &Tensor<E>) -> Tensor<E> {
    let s = input.shape();
    let (rh, rw) = rotated_extent(t, s.height, s.width);
    let mut out = Tensor::zeros(Shape::new(s.batch, s.channels, rh, rw));
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    let (ry, rx) = rotated_position(t, y, x, s.height, s.width);
                    out.set(b, c, ry, rx, input.get(b, c, y, x));
                }
            }
        }
    }
    out
}

/// Rotates a kernel stack laid out as (out_channels, in_channels, h, w).
///
/// The layout matches feature tensors, so this is the same permutation as
/// [`rotate`]; the separate name keeps call sites honest about what is being
/// turned.
pub fn rotate_kernel<E: Scalar>(t: GroupElement, kernel: &Tensor<E>) -> Tensor<E> {
    rotate(t, kernel)
}

/// Rotates an integer label image by `t`.
pub fn rotate_labels(t: GroupElement, labels: &LabelMap) -> LabelMap {
    let (rh, rw) = rotated_extent(t, labels.height, labels.width);
    let mut out = LabelMap::zeros(rh, rw);
    for y in 0..labels.height {
        for x in 0..labels.width {
            let (ry, rx) = rotated_position(t, y, x, labels.height, labels.width);
            out.set(ry, rx, labels.get(y, x));
        }
    }
    out
}

/// Sums a square plane in an order that quarter turns cannot change.
///
/// A row-major sum of a rotated plane adds the same floats in a different
/// order and so rounds differently. This reduction instead recurses on the
/// four quadrants (plus the center cross when the side is odd) and combines
/// each four-way cycle as `(q0 + q2) + (q1 + q3)`. A quarter turn cyclically
/// shifts every such tuple, and that combination is invariant under cyclic
/// shifts because IEEE addition commutes. Hence for every turn `t`,
/// `rotation_stable_sum(rotate(t, plane)) == rotation_stable_sum(plane)`
/// bit for bit. Gradient reductions rely on this to keep training updates
/// identical between a run and its rotated twin.
///
/// `plane` is a row-major `side * side` slice.
pub fn rotation_stable_sum<E: Scalar>(plane: &[E], side: usize) -> E {
    assert_eq!(plane.len(), side * side, "plane length");
    sum_square(plane, side, 0, 0, side)
}

fn sum_square<E: Scalar>(plane: &[E], pitch: usize, y0: usize, x0: usize, n: usize) -> E {
    match n {
        0 => E::zero(),
        1 => plane[y0 * pitch + x0],
        _ if n % 2 == 0 => {
            let m = n / 2;
            let nw = sum_square(plane, pitch, y0, x0, m);
            let sw = sum_square(plane, pitch, y0 + m, x0, m);
            let se = sum_square(plane, pitch, y0 + m, x0 + m, m);
            let ne = sum_square(plane, pitch, y0, x0 + m, m);
            (nw + se) + (sw + ne)
        }
        _ => {
            let m = n / 2;
            let nw = sum_square(plane, pitch, y0, x0, m);
            let sw = sum_square(plane, pitch, y0 + m + 1, x0, m);
            let se = sum_square(plane, pitch, y0 + m + 1, x0 + m + 1, m);
            let ne = sum_square(plane, pitch, y0, x0 + m + 1, m);
            let corners = (nw + se) + (sw + ne);

            // Arms of the center cross, each summed outward from the center
            // so a turn maps one arm's sequence onto the next unchanged.
            let cy = y0 + m;
            let cx = x0 + m;
            let mut top = E::zero();
            let mut left = E::zero();
            let mut bottom = E::zero();
            let mut right = E::zero();
            for k in 0..m {
                top = top + plane[(cy - 1 - k) * pitch + cx];
                left = left + plane[cy * pitch + (cx - 1 - k)];
                bottom = bottom + plane[(cy + 1 + k) * pitch + cx];
                right = right + plane[cy * pitch + (cx + 1 + k)];
            }
            let arms = (top + bottom) + (left + right);
            (corners + arms) + plane[cy * pitch + cx]
        }
    }
}
