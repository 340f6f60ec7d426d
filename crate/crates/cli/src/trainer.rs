//! Dataset generation and the training loop.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use precm_core::autodiff::{gradient_map, record_net, MomentumSgd, Tape};
use precm_core::data::{gen_shapes, save_dataset, DatasetManifest};
use precm_core::layers::{build_net, save_net};
use precm_core::{Result, Sample, Shape, Tensor};

use crate::RunConfig;

/// Generates `count` samples and writes them as a dataset directory.
/// Rerunning with the same arguments writes byte-identical files.
pub fn generate_dataset(
    out: &Path,
    seed: u64,
    count: usize,
    size: usize,
    classes: u8,
) -> Result<DatasetManifest> {
    let samples = gen_shapes::<f32>(seed, count, size, classes)?;
    save_dataset(out, seed, size, classes, &samples)
}

/// Per-epoch mean training loss, in epoch order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epoch_losses: Vec<f64>,
}

fn batch_tensors(samples: &[Sample<f64>], picks: &[usize], size: usize) -> (Tensor<f64>, Tensor<f64>) {
    let shape = Shape::new(picks.len(), 1, size, size);
    let images = Tensor::from_fn(shape, |b, _, y, x| samples[picks[b]].image.get(0, 0, y, x));
    let targets = Tensor::from_fn(shape, |b, _, y, x| samples[picks[b]].mask.get(y, x) as f64);
    (images, targets)
}

/// Trains the configured network on generated data and writes the outcome
/// to `out`: the run configuration, a per-epoch loss log, and the final
/// parameters with their manifest written last.
///
/// Training is binary cross-entropy against the foreground mask, so the run
/// must use two classes and the network must end in one sigmoid channel.
pub fn train_model(run: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    run.validate()?;
    if run.data.classes != 2 {
        return Err(precm_core::Error::InvalidConfig(format!(
            "training is binary; the data configuration names {} classes",
            run.data.classes
        )));
    }
    let samples = gen_shapes::<f64>(run.data.seed, run.data.count, run.data.size, run.data.classes)?;
    let mut net = build_net::<f64>(&run.net)?;
    let mut sgd = MomentumSgd::new(run.train.lr, run.train.momentum);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(run.train.seed);
    let mut epoch_losses = Vec::with_capacity(run.train.epochs);
    for _ in 0..run.train.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for picks in order.chunks(run.train.batch) {
            let (images, targets) = batch_tensors(&samples, picks, run.data.size);
            let mut tape = Tape::new();
            let taped = record_net(&mut tape, &net, &images)?;
            let loss = tape.bce_loss(taped.output, &targets)?;
            let loss_value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            let by_name = gradient_map(&tape, &taped, &grads);
            sgd.step(&mut net, &by_name)?;
            weighted += loss_value * picks.len() as f64;
        }
        epoch_losses.push(weighted / samples.len() as f64);
    }

    fs::create_dir_all(out)?;
    let mut config_text = serde_json::to_string_pretty(run)?;
    config_text.push('\n');
    fs::write(out.join("run_config.json"), config_text)?;
    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", epoch + 1, loss));
    }
    fs::write(out.join("loss.csv"), csv)?;
    save_net(out, &run.net, &net)?;
    Ok(TrainOutcome { epoch_losses })
}
