use wsms::backbones::{build_densenet, build_densenet_with, build_resnet, build_resnet_with};
use wsms::cost::{analyze, count_params, stage_overhead, LayerKind};
use wsms::wsms::{Integration, Sharing, WsmsSpec};

fn wsms_resnet110(integration: Integration) -> WsmsSpec {
    WsmsSpec::new(build_resnet(18, 10).unwrap(), 3, integration, Sharing::Shared).unwrap()
}

#[test]
fn mults_scale_quadratically_with_input_edge() {
    let specs = [
        wsms_resnet110(Integration::Conv1x1),
        WsmsSpec::new(build_densenet_with(4, 3, 3, 8, 10, 32).unwrap(), 3, Integration::Conv3x3, Sharing::Shared).unwrap(),
        WsmsSpec::single_stage(build_resnet_with(2, &[4, 8], 10, 32).unwrap()),
    ];
    for spec in &specs {
        let m: Vec<u64> = [16, 32, 64]
            .into_iter()
            .map(|e| analyze(spec, (e, e)).unwrap().total_mults)
            .collect();
        assert_eq!(m[1], 4 * m[0], "{spec:?}");
        assert_eq!(m[2], 4 * m[1], "{spec:?}");
    }
}

#[test]
fn rectangular_input_scales_per_axis() {
    let spec = wsms_resnet110(Integration::None);
    let square = analyze(&spec, (32, 32)).unwrap().total_mults;
    let wide = analyze(&spec, (32, 64)).unwrap().total_mults;
    assert_eq!(wide, 2 * square);
}

#[test]
fn later_stages_are_cheap() {
    let ratios = stage_overhead(&wsms_resnet110(Integration::Conv1x1)).unwrap();
    assert_eq!(ratios.len(), 2);
    assert!(ratios[0] < 0.25, "{ratios:?}");
    assert!(ratios[1] < ratios[0]);

    let dense = WsmsSpec::new(build_densenet(24, 10).unwrap(), 3, Integration::Conv1x1, Sharing::Shared).unwrap();
    let report = count_params(&dense).unwrap();
    let base = build_densenet(24, 10).map(WsmsSpec::single_stage).unwrap();
    let base_mults = count_params(&base).unwrap().total_mults;
    assert_eq!(report.stage_mults(1), base_mults);
    let integration: u64 = report
        .rows
        .iter()
        .filter(|r| r.stage.is_none())
        .map(|r| r.mults)
        .sum();
    let combined: f64 = stage_overhead(&dense).unwrap().iter().sum();
    let expected = (report.total_mults - base_mults - integration) as f64 / base_mults as f64;
    assert!((combined - expected).abs() < 1e-12);
}

#[test]
fn both_totals_are_reported() {
    let report = count_params(&wsms_resnet110(Integration::Conv1x1)).unwrap();
    let bn: u64 = report
        .rows
        .iter()
        .filter(|r| r.kind == LayerKind::BatchNorm)
        .map(|r| r.params)
        .sum();
    assert!(bn > 0);
    assert_eq!(report.total_params_without_bn + bn, report.total_params);
}

#[test]
fn classifier_and_shortcuts_cost_no_mults() {
    let report = count_params(&wsms_resnet110(Integration::None)).unwrap();
    for row in &report.rows {
        if matches!(row.kind, LayerKind::Fc | LayerKind::Shortcut | LayerKind::BatchNorm) {
            assert_eq!(row.mults, 0, "{}", row.path);
        }
    }
    let fc = report.rows.iter().find(|r| r.kind == LayerKind::Fc).unwrap();
    assert_eq!(fc.params, 112 * 10 + 10);
}

#[test]
fn integration_deltas_for_densenet() {
    let count = |i| {
        count_params(&WsmsSpec::new(build_densenet(24, 10).unwrap(), 3, i, Sharing::Shared).unwrap())
            .unwrap()
            .total_params
    };
    let none = count(Integration::None);
    let fc_none = 4656 * 10 + 10;
    let fc_int = 128 * 10 + 10;
    assert_eq!(count(Integration::Conv1x1), none - fc_none + 4656 * 128 + 256 + fc_int);
    assert_eq!(count(Integration::Conv3x3), none - fc_none + 9 * 4656 * 128 + 256 + fc_int);
}
