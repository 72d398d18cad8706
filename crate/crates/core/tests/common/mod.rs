#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsms::backbones::build_resnet_with;
use wsms::tensor::{Scalar, Tensor};
use wsms::wsms::{Integration, Sharing, WsmsSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1).
pub fn random_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| T::of(r.random::<f64>() * 2.0 - 1.0))
}

/// Two-compartment ResNet on 8x8 inputs, two stages.
pub fn tiny_resnet(integration: Integration, sharing: Sharing) -> WsmsSpec {
    let backbone = build_resnet_with(1, &[4, 8], 3, 8).unwrap();
    let mut spec = WsmsSpec::new(backbone, 2, integration, sharing).unwrap();
    spec.integration_channels = 6;
    spec
}

/// Three-compartment ResNet on 16x16 inputs, three stages.
pub fn tiny_resnet3(sharing: Sharing) -> WsmsSpec {
    let backbone = build_resnet_with(1, &[4, 6, 8], 3, 16).unwrap();
    let mut spec = WsmsSpec::new(backbone, 3, Integration::Conv1x1, sharing).unwrap();
    spec.integration_channels = 5;
    spec
}
