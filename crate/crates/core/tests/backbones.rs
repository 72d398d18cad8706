mod common;

use proptest::prelude::*;
use wsms::backbones::{
    build_densenet, build_densenet_with, build_resnet, build_resnet_with, dense_block, transition, BlockNet,
    BlockSpec, LayerFactory,
};
use wsms::cost::count_params;
use wsms::error::Error;
use wsms::nn::{Forward, Mode, ParamStore};
use wsms::tensor::{Graph, Tensor};
use wsms::wsms::{build_wsms, ForwardOptions, Integration, Sharing, WsmsSpec};

use common::{random_tensor, rng};

#[test]
fn zeroed_residual_path_is_relu_identity() {
    let spec = BlockSpec::ResidualCompartment {
        in_channels: 5,
        out_channels: 5,
        units: 2,
        downsample: false,
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(1);
    let block = BlockNet::build(&spec, "c", &mut LayerFactory::new(&mut store, &mut r, true));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.tensor_mut(id).unwrap().data_mut().fill(0.0);
    }
    let x = random_tensor::<f64>(&[2, 5, 6, 6], 2);
    let relu_x: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = {
            let mut ctx = Forward::new(&mut g, &store, mode);
            block.forward(&mut ctx, xv).unwrap()
        };
        assert_eq!(g.value(y).data(), &relu_x[..], "{mode:?}");
    }
}

#[test]
fn dropping_last_dense_layer_truncates_channels() {
    let spec = BlockSpec::DenseBlock {
        in_channels: 4,
        growth_rate: 3,
        layers: 3,
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(3);
    let BlockNet::Dense(layers) = BlockNet::build(&spec, "d", &mut LayerFactory::new(&mut store, &mut r, true)) else {
        panic!("dense block expected");
    };
    let x = random_tensor::<f64>(&[2, 4, 4, 4], 4);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (full, short) = {
        let mut ctx = Forward::new(&mut g, &store, Mode::Train);
        (
            dense_block(&mut ctx, &layers, xv).unwrap(),
            dense_block(&mut ctx, &layers[..2], xv).unwrap(),
        )
    };
    assert_eq!(g.shape(full), &[2, 13, 4, 4]);
    assert_eq!(g.shape(short), &[2, 10, 4, 4]);
    let plane = 16;
    for n in 0..2 {
        let f = &g.value(full).data()[n * 13 * plane..][..10 * plane];
        let s = &g.value(short).data()[n * 10 * plane..][..10 * plane];
        assert_eq!(f, s);
        assert_eq!(&f[..4 * plane], &x.data()[n * 4 * plane..][..4 * plane]);
    }
}

#[test]
fn transition_keeps_channels_and_halves_extent() {
    let spec = BlockSpec::Transition { channels: 784 };
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(5);
    let BlockNet::Transition { bn, conv } = BlockNet::build(&spec, "t", &mut LayerFactory::new(&mut store, &mut r, true))
    else {
        panic!("transition expected");
    };
    assert_eq!(store.scalar_count(), 784 * 784 + 2 * 784);
    let mut g = Graph::new();
    let xv = g.constant(random_tensor::<f32>(&[1, 784, 32, 32], 6));
    let odd = g.constant(Tensor::<f32>::zeros(&[1, 784, 5, 5]));
    let mut ctx = Forward::new(&mut g, &store, Mode::Train);
    let y = transition(&mut ctx, &bn, &conv, xv).unwrap();
    assert!(matches!(transition(&mut ctx, &bn, &conv, odd), Err(Error::InvalidArgument(_))));
    assert_eq!(g.shape(y), &[1, 784, 16, 16]);
}

#[test]
fn small_densenet_channel_chain() {
    let spec = build_densenet_with(1, 2, 3, 16, 10, 32).unwrap();
    let chain: Vec<usize> = (1..=3).map(|g| spec.channels_after(g)).collect();
    assert_eq!(chain, vec![18, 20, 22]);
}

fn concat_shape(spec: &WsmsSpec) -> Vec<usize> {
    let (net, store) = build_wsms::<f32>(spec, &mut rng(7)).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(random_tensor::<f32>(&[1, 3, 32, 32], 8));
    let mut ctx = Forward::new(&mut g, &store, Mode::Eval);
    let trace = net.forward_traced(&mut ctx, xv, &ForwardOptions::default()).unwrap();
    let (concat, features) = (trace.concat, trace.features);
    assert_eq!(g.shape(features), &[1, spec.feature_dim()]);
    g.shape(concat).to_vec()
}

#[test]
fn full_size_concat_shapes() {
    let resnet = WsmsSpec::new(build_resnet(18, 10).unwrap(), 3, Integration::None, Sharing::Shared).unwrap();
    assert_eq!(concat_shape(&resnet), vec![1, 112, 8, 8]);
    assert_eq!(resnet.feature_dim(), 112);
    let densenet = WsmsSpec::new(build_densenet(24, 10).unwrap(), 3, Integration::Conv1x1, Sharing::Shared).unwrap();
    let outs: Vec<usize> = densenet.plan().stages.iter().map(|s| s.out_channels).collect();
    assert_eq!(outs, vec![2320, 1552, 784]);
    assert_eq!(concat_shape(&densenet), vec![1, 4656, 8, 8]);
    assert_eq!(densenet.feature_dim(), 128);
}

fn resnet_spec() -> impl Strategy<Value = WsmsSpec> {
    (1usize..3, prop::collection::vec(2usize..6, 1..4), 2usize..5, prop::bool::ANY, 0usize..3, prop::bool::ANY, 0usize..3)
        .prop_flat_map(|(n, mut widths, classes, big, integ, shared, s)| {
            widths.sort();
            let size = if big { 16 } else { 8 };
            let backbone = build_resnet_with(n, &widths, classes, size).unwrap();
            let k = widths.len();
            Just(make_spec(backbone, 1 + s % k, integ, shared))
        })
}

fn densenet_spec() -> impl Strategy<Value = WsmsSpec> {
    (1usize..4, 1usize..3, 1usize..4, 2usize..5, 2usize..4, 0usize..3, prop::bool::ANY, 0usize..3).prop_map(
        |(k, layers, blocks, stem, classes, integ, shared, s)| {
            let backbone = build_densenet_with(k, layers, blocks, stem, classes, 16).unwrap();
            make_spec(backbone, 1 + s % blocks, integ, shared)
        },
    )
}

fn make_spec(backbone: wsms::backbones::BackboneSpec, stages: usize, integ: usize, shared: bool) -> WsmsSpec {
    let integration = [Integration::None, Integration::Conv1x1, Integration::Conv3x3][integ];
    let sharing = if shared { Sharing::Shared } else { Sharing::Unshared };
    let mut spec = WsmsSpec::new(backbone, stages, integration, sharing).unwrap();
    spec.integration_channels = 3;
    spec
}

/// Declared channels and extent of every recorded block output.
fn check_shapes(spec: &WsmsSpec) -> Result<(), TestCaseError> {
    let (net, store) = build_wsms::<f32>(spec, &mut rng(9)).unwrap();
    prop_assert_eq!(store.scalar_count() as u64, count_params(spec).unwrap().total_params);
    let size = spec.backbone.input_size;
    let mut g = Graph::new();
    let xv = g.constant(random_tensor::<f32>(&[2, 3, size, size], 10));
    let mut ctx = Forward::new(&mut g, &store, Mode::Train);
    let trace = net.forward_traced(&mut ctx, xv, &ForwardOptions::default()).unwrap();
    let groups = spec.backbone.conv_blocks();
    for info in spec.plan().stages {
        let outs = &trace.block_outputs[info.stage - 1];
        prop_assert_eq!(outs.len(), info.conv_blocks + 1);
        let mut extent = info.input_size;
        prop_assert_eq!(g.shape(outs[0]), &[2, spec.backbone.stem.out_channels(), extent, extent][..]);
        for (gi, range) in groups.iter().take(info.conv_blocks).enumerate() {
            for b in range.clone() {
                extent /= spec.backbone.blocks[b].downsample_factor();
            }
            let channels = spec.backbone.channels_after(gi + 1);
            prop_assert_eq!(g.shape(outs[gi + 1]), &[2, channels, extent, extent][..]);
        }
        let final_size = spec.final_size();
        prop_assert_eq!(
            g.shape(trace.stage_outputs[info.stage - 1]),
            &[2, info.out_channels, final_size, final_size][..]
        );
    }
    prop_assert_eq!(g.shape(trace.logits), &[2, spec.backbone.class_count][..]);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn resnet_shapes_and_counts(spec in resnet_spec()) {
        check_shapes(&spec)?;
    }

    #[test]
    fn densenet_shapes_and_counts(spec in densenet_spec()) {
        check_shapes(&spec)?;
    }
}
