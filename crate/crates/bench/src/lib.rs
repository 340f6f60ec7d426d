//! Shared fixtures for the criterion benches: deterministic inputs sized
//! like the nets and audits the binary runs.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use precm_core::{ConvSpec, Extent, Kernel, NetConfig, PrecmNet, Shape, Tensor};

/// A same-size 3x3 convolution over a square input with one channel each way.
pub fn conv_fixture(size: usize) -> (Tensor<f64>, Kernel<f64>, ConvSpec) {
    let mut rng = StdRng::seed_from_u64(size as u64);
    let input = Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, _, _| {
        rng.random_range(-1.0..1.0)
    });
    let weights = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, _, _| {
        rng.random_range(-1.0..1.0)
    });
    let kernel = Kernel::new(weights, vec![0.1]).unwrap();
    let spec = ConvSpec {
        input: Extent::new(size, size),
        output: Extent::new(size, size),
        kernel: Extent::new(3, 3),
        stride: Extent::new(1, 1),
        dilation: Extent::new(1, 1),
    };
    (input, kernel, spec)
}

/// A three-layer net of the given flavor with a matching random input.
pub fn net_fixture(flavor: &str, size: usize) -> (PrecmNet<f64>, Tensor<f64>) {
    let config: NetConfig = serde_json::from_str(&format!(
        r#"{{
            "flavor": "{flavor}",
            "input_channels": 1,
            "input_size": {size},
            "seed": 2,
            "layers": [
                {{"type": "precm1", "block_channels": 4, "kernel": 3}},
                {{"type": "relu"}},
                {{"type": "precm2", "block_channels": 4, "kernel": 3}},
                {{"type": "relu"}},
                {{"type": "precm3", "out_channels": 1, "kernel": 3}},
                {{"type": "sigmoid"}}
            ]
        }}"#
    ))
    .unwrap();
    let net = precm_core::layers::build_net(&config).unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    let x = Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, _, _| {
        rng.random_range(0.0..1.0)
    });
    (net, x)
}
