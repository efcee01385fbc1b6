//! Shared fixtures for the criterion benchmarks.

use ddnn_core::data::{Dataset, SyntheticSpec};
use ddnn_core::ddnn::{DdnnOptions, NetConfig, SubnetSpec};
use ddnn_core::trainer::{Experiment, Regime, TrainConfig};
use ddnn_core::Tensor;

/// Deterministic values in [-1, 1) without pulling in an RNG.
pub fn filled(shape: &[usize], salt: u32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n as u32)
        .map(|i| {
            let h = i.wrapping_mul(2_654_435_761).wrapping_add(salt.wrapping_mul(40_503)) >> 8;
            h as f32 / (1u32 << 23) as f32 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// ResNet-20 with a ResNet-16 sub-net on 8x8 synthetic images, as in the
/// shipped desk-scale config.
pub fn desk_experiment(regime: Regime) -> Experiment {
    let mut net = NetConfig::resnet_cifar(&[3, 3, 3], 4);
    net.stage_channels = vec![8, 16, 32];
    net.input_shape = [3, 8, 8];
    let mut train = TrainConfig::new(regime, 1);
    train.batch_size = 64;
    train.augment = false;
    Experiment {
        net,
        subnets: vec![SubnetSpec::new(&[3, 2, 2])],
        ddnn: DdnnOptions::default(),
        train,
    }
}

pub fn desk_data(per_class: usize) -> Dataset {
    let mut spec = SyntheticSpec::new(4, (8, 8), 1000);
    spec.noise = 0.4;
    spec.generate(per_class, 0).expect("valid synthetic spec")
}
