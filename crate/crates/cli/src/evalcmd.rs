//! Scoring saved parameters against a stored dataset.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use precm_core::data::{load_dataset, rotate_arbitrary, rotate_labels_arbitrary, Fill, Interpolation};
use precm_core::group::{rotate, GroupElement, R180, R270, R90};
use precm_core::layers::load_net;
use precm_core::metrics::{
    binary_confusion, rotation_difference, rotation_difference_masked, ConfusionCounts, RandomRd,
    RdReport,
};
use precm_core::{Error, LabelMap, MetricReport, PrecmNet, Result, Sample};

use crate::{prediction_labels, RunConfig};

fn quarter_rd(
    net: &PrecmNet<f64>,
    sample: &Sample<f64>,
    base_labels: &LabelMap,
    t: GroupElement,
) -> Result<f64> {
    let turned = net.forward(&rotate(t, &sample.image))?;
    rotation_difference(base_labels, &prediction_labels(&turned, 0), t)
}

fn arbitrary_rd(
    net: &PrecmNet<f64>,
    sample: &Sample<f64>,
    base_labels: &LabelMap,
    degrees: f64,
) -> Result<f64> {
    let turned_input =
        rotate_arbitrary(&sample.image, degrees, Interpolation::Bilinear, Fill::Reflect);
    let turned = net.forward(&turned_input)?;
    let (restored, valid) = rotate_labels_arbitrary(&prediction_labels(&turned, 0), -degrees);
    rotation_difference_masked(base_labels, &restored, &valid)
}

/// Scores the saved network in `params_dir` on the dataset in `data_dir`.
///
/// Overlap scores aggregate one confusion count over every pixel of every
/// sample. The quarter-turn rotation differences are always reported; any
/// other finite angle in the run's evaluation list, plus the configured
/// number of seeded random angles, lands in the report's random section.
pub fn evaluate(params_dir: &Path, data_dir: &Path) -> Result<MetricReport> {
    let run = RunConfig::load(&params_dir.join("run_config.json"))?;
    let (net_config, net) = load_net::<f64>(params_dir)?;
    if net_config != run.net {
        return Err(Error::InvalidConfig(
            "saved parameters and run configuration describe different networks".to_string(),
        ));
    }
    let (manifest, samples) = load_dataset::<f64>(data_dir)?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig(
            "the dataset holds no samples to score".to_string(),
        ));
    }
    if manifest.size != net_config.input_size {
        return Err(Error::ShapeMismatch {
            context: "evaluation input",
            expected: format!("{0}x{0}", net_config.input_size),
            got: format!("{0}x{0}", manifest.size),
        });
    }
    if manifest.classes != 2 {
        return Err(Error::InvalidConfig(format!(
            "scoring is binary; the dataset names {} classes",
            manifest.classes
        )));
    }

    let mut counts = ConfusionCounts::default();
    let mut quarter_sums = [0.0f64; 3];
    let arbitrary_angles: Vec<f64> = run
        .eval
        .angles
        .iter()
        .copied()
        .filter(|a| a.rem_euclid(90.0) != 0.0)
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(run.train.seed);
    let random_angles: Vec<f64> = (0..run.eval.random_angle_count)
        .map(|_| rng.random_range(0.0..360.0))
        .collect();
    let mut arbitrary_sums = vec![0.0f64; arbitrary_angles.len() + random_angles.len()];

    for sample in &samples {
        let pred = net.forward(&sample.image)?;
        let base_labels = prediction_labels(&pred, 0);
        counts.merge(binary_confusion(&base_labels, &sample.mask)?);
        for (slot, t) in [R90, R180, R270].into_iter().enumerate() {
            quarter_sums[slot] += quarter_rd(&net, sample, &base_labels, t)?;
        }
        for (slot, &degrees) in arbitrary_angles.iter().chain(&random_angles).enumerate() {
            arbitrary_sums[slot] += arbitrary_rd(&net, sample, &base_labels, degrees)?;
        }
    }

    let n = samples.len() as f64;
    let random = arbitrary_angles
        .iter()
        .chain(&random_angles)
        .zip(&arbitrary_sums)
        .map(|(&angle, &sum)| RandomRd {
            angle,
            rd: sum / n,
        })
        .collect();
    Ok(MetricReport {
        iou: counts.iou(),
        miou: counts.miou(),
        dice: counts.dice(),
        rd: RdReport {
            quarter: quarter_sums[0] / n,
            half: quarter_sums[1] / n,
            three_quarter: quarter_sums[2] / n,
            random,
        },
        flags: counts.flags(),
    })
}
