//! Cost model against hand-computed tables and closed forms.

use sinefm::codec::{packed_len, size_report};
use sinefm::cost::{compare, conv_flops, model_cost, sinefm_flops, CostTable};
use sinefm::layer::SineFMConfig;
use sinefm::network::{convert_to_sinefm, tiny_resnet, tiny_vgg, ArchDescriptor, LayerSpec};
use sinefm::transforms::TransformFamily;

const SINE: TransformFamily = TransformFamily::Sinusoidal;

#[test]
fn tiny_vgg_matches_golden_sheets() {
    let std = tiny_vgg(4, 32);
    let report = model_cost(&std, None, &CostTable::V1).unwrap();
    assert_eq!(report.to_csv(), include_str!("golden/tiny_vgg_32.csv"));
    let conv = convert_to_sinefm(&std, 16, 5, SINE, 0);
    let report = model_cost(&conv, None, &CostTable::V1).unwrap();
    assert_eq!(report.to_csv(), include_str!("golden/tiny_vgg_32_sinefm.csv"));
}

#[test]
fn closed_form_examples() {
    assert_eq!(conv_flops(3, 3, 32, 32, 16), 442_368);
    assert_eq!(conv_flops(1, 1, 1, 1, 1), 1);
    let big = SineFMConfig::new(256, 256, 16, 3, 1, 1, 5, SINE, 0);
    assert_eq!(sinefm_flops(&big, 32, 32), 57_819_136);
    assert_eq!(conv_flops(256, 3, 32, 32, 256), 603_979_776);
    let small = SineFMConfig::new(3, 16, 1, 3, 1, 1, 5, SINE, 0);
    assert_eq!(sinefm_flops(&small, 32, 32), 130_048);
    let flat = SineFMConfig::new(8, 16, 16, 3, 1, 1, 5, SINE, 0);
    assert_eq!(sinefm_flops(&flat, 10, 10), conv_flops(8, 3, 10, 10, 16));
}

#[test]
fn conv_flops_is_multiplicative() {
    let base = conv_flops(3, 3, 5, 7, 11);
    assert_eq!(conv_flops(6, 3, 5, 7, 11), 2 * base);
    assert_eq!(conv_flops(3, 6, 5, 7, 11), 4 * base);
    assert_eq!(conv_flops(3, 3, 10, 7, 11), 2 * base);
    assert_eq!(conv_flops(3, 3, 5, 14, 11), 2 * base);
    assert_eq!(conv_flops(3, 3, 5, 7, 22), 2 * base);
}

/// With c_s=16, k=5 the per-pixel cost difference is
/// `c_in·K²·(c_out−16) − 80·(c_out−11)`, so SineFM is cheaper from 32 output
/// channels on once `c_in·K²` exceeds 105 (any 3×3 layer with 12+ inputs).
#[test]
fn sinefm_cheaper_from_32_channels() {
    for c_in in [1usize, 3, 12, 16, 64, 256] {
        for c_out in (32..=512).step_by(32) {
            for k in [1usize, 3, 5, 7] {
                let cfg = SineFMConfig::new(c_in, c_out, 16, k, 1, k / 2, 5, SINE, 0);
                let cheaper = sinefm_flops(&cfg, 8, 8) < conv_flops(c_in, k, 8, 8, c_out);
                let predicted = (c_in * k * k * (c_out - 16)) as i64 > 80 * (c_out as i64 - 11);
                assert_eq!(cheaper, predicted, "{c_in} {c_out} {k}");
                if c_in * k * k > 105 {
                    assert!(cheaper);
                }
            }
        }
    }
}

#[test]
fn doubling_resolution_scales_convs_by_four() {
    let d = convert_to_sinefm(&tiny_resnet(4, 32), 16, 5, SINE, 1);
    let a = model_cost(&d, Some((32, 32)), &CostTable::V1).unwrap();
    let b = model_cost(&d, Some((64, 64)), &CostTable::V1).unwrap();
    assert_eq!(a.total_params, b.total_params);
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        if matches!(la.kind, "conv" | "sinefm") {
            assert_eq!(lb.flops, 4 * la.flops, "layer {}", la.index);
        }
    }
}

#[test]
fn reduction_ratios_and_pack_sizes() {
    for std in [tiny_resnet(4, 32), tiny_vgg(4, 32)] {
        let conv = convert_to_sinefm(&std, 16, 5, SINE, 3);
        let a = model_cost(&conv, None, &CostTable::V1).unwrap();
        let b = model_cost(&std, None, &CostTable::V1).unwrap();
        let r = compare(&a, &b).unwrap();
        assert!(r.param_ratio >= 3.0 && r.flop_ratio >= 2.0, "{r:?}");
        assert_eq!(compare(&a, &a).unwrap().param_ratio, 1.0);
        assert_eq!(a.total_params as usize, conv.learnable_params());
        let s = size_report(&conv);
        assert!(s.ratio >= 3.0);
        assert_eq!(s.weight_bytes, 4 * a.total_params as usize);
    }
}

#[test]
fn single_layer_pack_counts() {
    let desc = |spec| ArchDescriptor::new((256, 32, 32), vec![spec]);
    let sfm = desc(LayerSpec::SineFM(SineFMConfig::new(256, 256, 16, 3, 1, 1, 5, SINE, 0)));
    assert_eq!(sfm.learnable_params(), 256 * 9 * 16 + 80 * 240);
    let std = sinefm::network::to_standard(&sfm);
    assert_eq!(std.learnable_params(), 589_824);
    let r = size_report(&sfm);
    assert!((r.ratio - 589_824.0 / 56_064.0).abs() < 0.05, "{r:?}");
    let plain = size_report(&std);
    assert_eq!(plain.ratio, 1.0);
    let text_growth = sfm.to_text().len() - std.to_text().len();
    assert_eq!(packed_len(&std) - packed_len(&sfm), 4 * (589_824 - 56_064) - 9 - text_growth);
}
