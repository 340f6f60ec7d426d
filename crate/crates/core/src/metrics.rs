//! Segmentation metrics: confusion counts, overlap scores, and the
//! rotation-difference score that quantifies how far a model's output moves
//! when its input is rotated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{inverse, rotate_labels, GroupElement};
use crate::tensor::LabelMap;

/// Pixel counts of a one-vs-rest comparison between a predicted and a true
/// label map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn new(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        ConfusionCounts {
            true_pos,
            false_pos,
            false_neg,
            true_neg,
        }
    }

    /// Adds another tally into this one.
    pub fn merge(&mut self, other: ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    fn positive_support(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg
    }

    fn negative_support(&self) -> u64 {
        self.true_neg + self.false_pos + self.false_neg
    }

    /// Intersection over union of the positive class:
    /// `tp / (tp + fn + fp)`. When the class is absent from both maps the
    /// score is 1.
    pub fn iou(&self) -> f64 {
        ratio(self.true_pos, self.positive_support())
    }

    /// Mean of the positive and negative one-vs-rest overlap scores:
    /// `(tp / (tp + fn + fp) + tn / (tn + fn + fp)) / 2`.
    pub fn miou(&self) -> f64 {
        0.5 * (ratio(self.true_pos, self.positive_support())
            + ratio(self.true_neg, self.negative_support()))
    }

    /// Dice coefficient `2 tp / (2 tp + fp + fn)`, equal to
    /// `2 iou / (1 + iou)`. When the class is absent from both maps the
    /// score is 1.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.true_pos, 2 * self.true_pos + self.false_pos + self.false_neg)
    }

    /// Human-readable notes for every degenerate denominator the scores
    /// absorbed under the absent-class convention.
    pub fn flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        if self.positive_support() == 0 {
            flags.push(
                "positive class absent from prediction and truth; iou and dice default to 1"
                    .to_string(),
            );
        }
        if self.negative_support() == 0 {
            flags.push(
                "negative class absent from prediction and truth; its miou term defaults to 1"
                    .to_string(),
            );
        }
        flags
    }
}

/// A zero denominator means the class is absent from both maps, which counts
/// as perfect agreement.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn check_same_extent(pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::ShapeMismatch {
            context: "label maps",
            expected: format!("{}x{}", truth.width, truth.height),
            got: format!("{}x{}", pred.width, pred.height),
        });
    }
    Ok(())
}

/// Tallies a binary comparison. Every pixel of both maps must be 0 or 1;
/// label 1 is the positive class.
pub fn binary_confusion(pred: &LabelMap, truth: &LabelMap) -> Result<ConfusionCounts> {
    check_same_extent(pred, truth)?;
    for (name, map) in [("prediction", pred), ("truth", truth)] {
        if map.data().iter().any(|&v| v > 1) {
            return Err(Error::InvalidLabels(format!(
                "{name} contains labels outside {{0, 1}}"
            )));
        }
    }
    Ok(class_confusion(pred, truth, 1))
}

/// Tallies a one-vs-rest comparison for one class of a multi-class map.
pub fn class_confusion(pred: &LabelMap, truth: &LabelMap, class: u8) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == class, t == class) {
            (true, true) => counts.true_pos += 1,
            (true, false) => counts.false_pos += 1,
            (false, true) => counts.false_neg += 1,
            (false, false) => counts.true_neg += 1,
        }
    }
    counts
}

/// Mean one-vs-rest intersection over union across `classes` classes.
pub fn macro_iou(pred: &LabelMap, truth: &LabelMap, classes: u8) -> Result<f64> {
    check_same_extent(pred, truth)?;
    if classes == 0 {
        return Err(Error::InvalidLabels("class count must be positive".to_string()));
    }
    let mut acc = 0.0;
    for class in 0..classes {
        acc += class_confusion(pred, truth, class).iou();
    }
    Ok(acc / classes as f64)
}

/// Rotation difference at a quarter-turn angle: the fraction of pixels on
/// which `from_rotated`, rotated back by the inverse of `t`, disagrees with
/// `base`. `base` is a model's labeling of an input and `from_rotated` its
/// labeling of the `t`-rotated input; a rotation-equivariant model scores 0.
pub fn rotation_difference(
    base: &LabelMap,
    from_rotated: &LabelMap,
    t: GroupElement,
) -> Result<f64> {
    let restored = rotate_labels(inverse(t), from_rotated);
    check_same_extent(&restored, base)?;
    let total = base.data().len();
    if total == 0 {
        return Err(Error::InvalidLabels("empty label map".to_string()));
    }
    let mismatches = restored
        .data()
        .iter()
        .zip(base.data())
        .filter(|(a, b)| a != b)
        .count();
    Ok(mismatches as f64 / total as f64)
}

/// Rotation difference for an arbitrary angle, where the back-rotation has
/// already been applied and left a validity mask: pixels whose preimage fell
/// outside the frame are excluded from the comparison.
pub fn rotation_difference_masked(
    base: &LabelMap,
    restored: &LabelMap,
    valid: &[bool],
) -> Result<f64> {
    check_same_extent(restored, base)?;
    if valid.len() != base.data().len() {
        return Err(Error::LengthMismatch {
            expected: base.data().len(),
            got: valid.len(),
        });
    }
    let mut total = 0u64;
    let mut mismatches = 0u64;
    for ((&a, &b), &ok) in restored.data().iter().zip(base.data()).zip(valid) {
        if ok {
            total += 1;
            if a != b {
                mismatches += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidLabels(
            "validity mask excludes every pixel".to_string(),
        ));
    }
    Ok(mismatches as f64 / total as f64)
}

/// Rotation difference at one arbitrary angle, for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomRd {
    pub angle: f64,
    pub rd: f64,
}

/// Rotation-difference scores at the quarter-turn angles plus any sampled
/// arbitrary angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdReport {
    #[serde(rename = "90")]
    pub quarter: f64,
    #[serde(rename = "180")]
    pub half: f64,
    #[serde(rename = "270")]
    pub three_quarter: f64,
    pub random: Vec<RandomRd>,
}

/// Full evaluation report: overlap scores, rotation differences, and notes
/// about degenerate denominators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub miou: f64,
    pub dice: f64,
    pub rd: RdReport,
    pub flags: Vec<String>,
}
