//! Padding plans for all four rotation modes of one convolution.

use serde::{Deserialize, Serialize};

use precm_core::group::ELEMENTS;
use precm_core::padding::{derive_base_padding, plan_for_mode, ModePlan};
use precm_core::{ConvSpec, Error, Padding, Result};

/// One padding plan with named sides, for JSON output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PadSides {
    pub above: usize,
    pub below: usize,
    pub left: usize,
    pub right: usize,
}

impl From<Padding> for PadSides {
    fn from(p: Padding) -> Self {
        PadSides {
            above: p.above,
            below: p.below,
            left: p.left,
            right: p.right,
        }
    }
}

/// The four mode plans keyed by rotation, in turn order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PadPlanReport {
    pub sigma0: PadSides,
    pub sigma1: PadSides,
    pub sigma2: PadSides,
    pub sigma3: PadSides,
}

/// Computes the four mode plans for `spec`.
///
/// Beyond the shared feasibility rules, a plan is rejected when any side's
/// padding reaches the dilated kernel span: the outermost output cells would
/// then cover no input pixel at all, so the requested output is larger than
/// the input can produce.
pub fn mode_plans(spec: &ConvSpec) -> Result<[ModePlan; 4]> {
    let base = derive_base_padding(spec)?;
    let span_h = spec.dilation.h * (spec.kernel.h - 1) + 1;
    let span_w = spec.dilation.w * (spec.kernel.w - 1) + 1;
    let vertical = base.above.max(base.below);
    if vertical >= span_h {
        return Err(Error::PaddingBeyondReach {
            axis: "height",
            padding: vertical,
            span: span_h,
        });
    }
    let horizontal = base.left.max(base.right);
    if horizontal >= span_w {
        return Err(Error::PaddingBeyondReach {
            axis: "width",
            padding: horizontal,
            span: span_w,
        });
    }
    let mut plans = Vec::with_capacity(4);
    for &t in &ELEMENTS {
        plans.push(plan_for_mode(spec, t)?);
    }
    Ok([plans[0], plans[1], plans[2], plans[3]])
}

/// Builds the JSON-facing report of all four plans.
pub fn plan_report(spec: &ConvSpec) -> Result<PadPlanReport> {
    let plans = mode_plans(spec)?;
    Ok(PadPlanReport {
        sigma0: plans[0].padding.into(),
        sigma1: plans[1].padding.into(),
        sigma2: plans[2].padding.into(),
        sigma3: plans[3].padding.into(),
    })
}
