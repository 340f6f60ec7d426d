//! Rotation-difference audit of a configured network.
//!
//! The network labels a batch of generated images, then labels rotated
//! copies of the same images; each angle's score is the mean fraction of
//! pixels whose label changes once the rotation is undone. Quarter turns
//! use the exact lattice rotation, every other angle is resampled and
//! scored only on pixels whose preimage stays inside the frame.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_chacha::rand_core::SeedableRng;

use precm_core::data::{gen_shapes, rotate_arbitrary, rotate_labels_arbitrary, Fill, Interpolation};
use precm_core::group::{rotate, GroupElement};
use precm_core::layers::{build_net, load_net};
use precm_core::metrics::{rotation_difference, rotation_difference_masked};
use precm_core::{Error, Flavor, PrecmNet, Result, Sample};

use crate::{prediction_labels, RunConfig};

/// Mean rotation difference at one angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleRd {
    pub degrees: f64,
    pub rd: f64,
}

/// All scored angles of one audit, in the order they were requested.
#[derive(Debug, Clone, PartialEq)]
pub struct NetAuditReport {
    pub flavor: Flavor,
    pub samples: usize,
    pub lines: Vec<AngleRd>,
}

impl NetAuditReport {
    /// True when every requested quarter-turn angle scored exactly zero.
    pub fn quarter_turns_clean(&self) -> bool {
        self.lines
            .iter()
            .filter(|line| line.degrees.rem_euclid(90.0) == 0.0)
            .all(|line| line.rd == 0.0)
    }
}

fn quarter_turn(degrees: f64) -> Option<GroupElement> {
    if degrees.rem_euclid(90.0) != 0.0 {
        return None;
    }
    let turns = (degrees / 90.0).rem_euclid(4.0) as usize;
    Some(GroupElement::from_index(turns))
}

fn mean_rd_at(net: &PrecmNet<f64>, samples: &[Sample<f64>], degrees: f64) -> Result<f64> {
    let mut total = 0.0;
    for sample in samples {
        let base = net.forward(&sample.image)?;
        let base_labels = prediction_labels(&base, 0);
        let rd = match quarter_turn(degrees) {
            Some(t) => {
                let turned = net.forward(&rotate(t, &sample.image))?;
                rotation_difference(&base_labels, &prediction_labels(&turned, 0), t)?
            }
            None => {
                let turned_input =
                    rotate_arbitrary(&sample.image, degrees, Interpolation::Bilinear, Fill::Reflect);
                let turned = net.forward(&turned_input)?;
                let (restored, valid) =
                    rotate_labels_arbitrary(&prediction_labels(&turned, 0), -degrees);
                rotation_difference_masked(&base_labels, &restored, &valid)?
            }
        };
        total += rd;
    }
    Ok(total / samples.len() as f64)
}

/// Scores `run`'s network at the given angles plus `random` seeded ones.
///
/// The network is loaded from `params` when given, otherwise freshly
/// initialized from the run configuration. Random angles are drawn from the
/// training seed so repeated audits agree.
pub fn run_net_audit(
    run: &RunConfig,
    params: Option<&Path>,
    angles: &[f64],
    random: usize,
) -> Result<NetAuditReport> {
    run.validate()?;
    let net = match params {
        Some(dir) => load_net::<f64>(dir)?.1,
        None => build_net::<f64>(&run.net)?,
    };
    let samples = gen_shapes::<f64>(run.data.seed, run.data.count, run.data.size, run.data.classes)?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig(
            "a rotation audit needs at least one sample".to_string(),
        ));
    }
    let mut lines = Vec::new();
    for &degrees in angles {
        lines.push(AngleRd {
            degrees,
            rd: mean_rd_at(&net, &samples, degrees)?,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(run.train.seed);
    for _ in 0..random {
        let degrees = rng.random_range(0.0..360.0);
        lines.push(AngleRd {
            degrees,
            rd: mean_rd_at(&net, &samples, degrees)?,
        });
    }
    Ok(NetAuditReport {
        flavor: run.net.flavor,
        samples: samples.len(),
        lines,
    })
}
