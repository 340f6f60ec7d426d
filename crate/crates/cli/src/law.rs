//! Randomized audit of the rotation law.
//!
//! Each trial draws a convolution geometry and random contents, runs the
//! base convolution once, and checks every quarter turn: convolving the
//! turned input with the turned kernel under the turn's plan must equal the
//! turned base output. The naive mode swaps in the unrotated padding plan to
//! demonstrate that the law genuinely depends on turning the padding.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use precm_core::conv::{conv_direct, conv_sigma};
use precm_core::group::{rotate, ELEMENTS};
use precm_core::padding::{derive_base_padding, min_feasible_output};
use precm_core::{ConvSpec, Extent, Kernel, Result, Scalar, Shape, Tensor};

/// Upper bounds for the randomized geometry draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LawBounds {
    pub max_size: usize,
    pub max_kernel: usize,
    pub max_stride: usize,
    pub max_dilation: usize,
}

impl Default for LawBounds {
    fn default() -> Self {
        LawBounds {
            max_size: 16,
            max_kernel: 5,
            max_stride: 3,
            max_dilation: 3,
        }
    }
}

/// One audit request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LawAudit {
    pub trials: usize,
    pub seed: u64,
    pub bounds: LawBounds,
    /// Use the unrotated padding plan for every turn, which must break.
    pub naive: bool,
    /// Audit this one geometry instead of drawing random ones.
    pub fixed: Option<ConvSpec>,
    /// Largest tolerated absolute difference; `None` demands bit equality.
    pub tolerance: Option<f64>,
}

impl Default for LawAudit {
    fn default() -> Self {
        LawAudit {
            trials: 100,
            seed: 0,
            bounds: LawBounds::default(),
            naive: false,
            fixed: None,
            tolerance: None,
        }
    }
}

/// The first check that disagreed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LawFailure {
    pub trial: usize,
    pub degrees: u32,
    pub spec: ConvSpec,
    /// Largest absolute difference, infinite when the shapes disagree.
    pub max_abs_diff: f64,
}

/// Tally of an audit run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LawOutcome {
    pub trials: usize,
    pub checks: usize,
    pub failures: usize,
    pub first_failure: Option<LawFailure>,
}

impl LawOutcome {
    pub fn all_hold(&self) -> bool {
        self.failures == 0
    }
}

fn random_spec(rng: &mut ChaCha20Rng, bounds: &LawBounds) -> ConvSpec {
    let kernel = Extent::new(
        rng.random_range(1..=bounds.max_kernel),
        rng.random_range(1..=bounds.max_kernel),
    );
    let stride = Extent::new(
        rng.random_range(1..=bounds.max_stride),
        rng.random_range(1..=bounds.max_stride),
    );
    let dilation = Extent::new(
        rng.random_range(1..=bounds.max_dilation),
        rng.random_range(1..=bounds.max_dilation),
    );
    let span_w = dilation.w * (kernel.w - 1) + 1;
    let span_h = dilation.h * (kernel.h - 1) + 1;
    let input = Extent::new(
        rng.random_range(span_w..=span_w.max(bounds.max_size)),
        rng.random_range(span_h..=span_h.max(bounds.max_size)),
    );
    let min = min_feasible_output(input, kernel, stride, dilation);
    let output = Extent::new(
        min.w + rng.random_range(0..3),
        min.h + rng.random_range(0..3),
    );
    ConvSpec {
        input,
        output,
        kernel,
        stride,
        dilation,
    }
}

fn cast_tensor<E: Scalar>(t: &Tensor<f64>) -> Tensor<E> {
    Tensor::from_fn(t.shape(), |b, c, y, x| E::from_f64(t.get(b, c, y, x)))
}

/// Compares two tensors under the audit's tolerance. Returns the offending
/// difference when they disagree, `None` when they agree.
fn disagreement<E: Scalar>(got: &Tensor<E>, want: &Tensor<E>, tolerance: Option<f64>) -> Option<f64> {
    if got.shape() != want.shape() {
        return Some(f64::INFINITY);
    }
    let diff = got.max_abs_diff(want).expect("shapes match");
    match tolerance {
        None => {
            if got.bit_eq(want) {
                None
            } else {
                Some(diff)
            }
        }
        Some(tol) => {
            if diff <= tol {
                None
            } else {
                Some(diff)
            }
        }
    }
}

/// Runs the audit. Values are drawn in f64 and narrowed to `E`, so the same
/// seed exercises the same geometries and contents at every precision.
pub fn run_law_audit<E: Scalar>(audit: &LawAudit) -> Result<LawOutcome> {
    if let Some(spec) = &audit.fixed {
        derive_base_padding(spec)?;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(audit.seed);
    let mut checks = 0;
    let mut failures = 0;
    let mut first_failure = None;
    for trial in 0..audit.trials {
        let spec = match audit.fixed {
            Some(spec) => spec,
            None => random_spec(&mut rng, &audit.bounds),
        };
        let in_ch = rng.random_range(1..=2);
        let out_ch = rng.random_range(1..=2);
        let f64_input = Tensor::<f64>::from_fn(
            Shape::new(1, in_ch, spec.input.h, spec.input.w),
            |_, _, _, _| rng.random_range(-1.0..1.0),
        );
        let f64_weights = Tensor::<f64>::from_fn(
            Shape::new(out_ch, in_ch, spec.kernel.h, spec.kernel.w),
            |_, _, _, _| rng.random_range(-1.0..1.0),
        );
        let bias: Vec<E> = (0..out_ch)
            .map(|_| E::from_f64(rng.random_range(-0.5..0.5)))
            .collect();
        let input = cast_tensor::<E>(&f64_input);
        let kernel = Kernel::new(cast_tensor::<E>(&f64_weights), bias)?;

        let base_padding = derive_base_padding(&spec)?;
        let base = if audit.naive {
            conv_direct(&input, &kernel, &base_padding, spec.stride, spec.dilation)?
        } else {
            conv_sigma(&input, &kernel, &spec, ELEMENTS[0])?
        };

        for &t in &ELEMENTS {
            checks += 1;
            let turned_input = rotate(t, &input);
            let turned_kernel = kernel.rotated(t);
            let got = if audit.naive {
                let stride = if t.swaps_axes() {
                    spec.stride.swapped()
                } else {
                    spec.stride
                };
                let dilation = if t.swaps_axes() {
                    spec.dilation.swapped()
                } else {
                    spec.dilation
                };
                conv_direct(&turned_input, &turned_kernel, &base_padding, stride, dilation)
            } else {
                conv_sigma(&turned_input, &turned_kernel, &spec, t)
            };
            let want = rotate(t, &base);
            let diff = match got {
                Ok(out) => disagreement(&out, &want, audit.tolerance),
                Err(_) => Some(f64::INFINITY),
            };
            if let Some(max_abs_diff) = diff {
                failures += 1;
                if first_failure.is_none() {
                    first_failure = Some(LawFailure {
                        trial,
                        degrees: t.degrees(),
                        spec,
                        max_abs_diff,
                    });
                }
            }
        }
    }
    Ok(LawOutcome {
        trials: audit.trials,
        checks,
        failures,
        first_failure,
    })
}
