use std::path::PathBuf;

use lightnet::arch::{scale_channels, LayerOp};
use lightnet::cost::{ReportFormat, trace_shapes};
use lightnet::{
    analyze, build_model, compare_last_stages, mobilenetv3_large_spec, parse_arch_file, report_render,
    resnet50_cost_spec, ArchSpec, Convention, InputShape,
};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn serialized_spec_matches_reference_table() {
    let spec = mobilenetv3_large_spec(3, 1000, 1.0).unwrap();
    let reparsed = ArchSpec::from_json(&spec.to_json()).unwrap();
    let expected = std::fs::read_to_string(golden("mobilenetv3_large_table.txt")).unwrap();
    let expected: Vec<&str> = expected.lines().filter(|l| !l.starts_with('#')).collect();
    let got: Vec<String> = reparsed.table_rows().iter().map(|r| r.join(" | ")).collect();
    assert_eq!(got.len(), 20);
    assert_eq!(got, expected);
}

/// MAdds for MobileNetV3-style specs computed straight from the layer list:
/// `H_out·W_out·C_out·K²·C_in/groups` per convolution, `C·C/4` twice per SE.
fn oracle_madds(spec: &ArchSpec, res: usize) -> u64 {
    let mut c = spec.in_channels;
    let mut hw = res;
    let mut total = 0u64;
    let down = |hw: usize, s: usize| hw.div_ceil(s);
    for l in &spec.layers {
        match l.op {
            LayerOp::Conv2d => {
                let o = down(hw, l.stride);
                total += (o * o * l.out * l.kernel * l.kernel * c) as u64;
                hw = o;
            }
            LayerOp::Bneck => {
                let e = l.exp.unwrap();
                if e != c {
                    total += (hw * hw * c * e) as u64;
                }
                let o = down(hw, l.stride);
                total += (o * o * e * l.kernel * l.kernel) as u64;
                if l.se {
                    total += 2 * (e * e.div_ceil(4)) as u64;
                }
                total += (o * o * e * l.out) as u64;
                hw = o;
            }
            LayerOp::Pool => hw = 1,
            other => panic!("oracle does not model {other:?}"),
        }
        c = l.out;
    }
    total
}

#[test]
fn analyzer_agrees_with_layer_formula_oracle() {
    for (w, res, ch) in [(1.0, 224, 3), (0.5, 224, 3), (0.25, 64, 1), (0.75, 160, 1), (1.25, 96, 3)] {
        let spec = mobilenetv3_large_spec(ch, 10, w).unwrap();
        let report = analyze(&spec, InputShape::square(res, ch), Convention::Madds).unwrap();
        assert_eq!(report.total_madds, oracle_madds(&spec, res), "w={w} res={res}");
        assert_eq!(report.total_madds, report.rows.iter().map(|r| r.madds).sum::<u64>());
    }
}

#[test]
fn mobilenetv3_large_cost_band() {
    let spec = mobilenetv3_large_spec(3, 1000, 1.0).unwrap();
    let r = analyze(&spec, InputShape::square(224, 3), Convention::Madds).unwrap();
    println!("MobileNetV3-Large: {} MAdds, {} params", r.total_madds, r.total_params);
    assert!((150_000_000..=250_000_000).contains(&r.total_madds));
    assert!((4_000_000..=6_500_000).contains(&r.total_params));
}

#[test]
fn resnet50_cost_band() {
    let spec = resnet50_cost_spec();
    let r = analyze(&spec, InputShape::square(224, 3), Convention::Madds).unwrap();
    println!("ResNet-50: {} MAdds, {} params", r.total_madds, r.total_params);
    assert!((3_700_000_000..=4_500_000_000).contains(&r.total_madds));
}

#[test]
fn flops_are_twice_madds() {
    let spec = mobilenetv3_large_spec(3, 1000, 1.0).unwrap();
    let m = analyze(&spec, InputShape::square(224, 3), Convention::Madds).unwrap();
    let f = analyze(&spec, InputShape::square(224, 3), Convention::Flops).unwrap();
    assert_eq!(f.total_ops(), 2 * m.total_ops());
}

#[test]
fn cost_grows_with_width_and_resolution() {
    let madds = |w: f64, res: usize| {
        let spec = mobilenetv3_large_spec(3, 1000, w).unwrap();
        analyze(&spec, InputShape::square(res, 3), Convention::Madds).unwrap().total_madds
    };
    let widths = [0.25, 0.5, 0.75, 1.0, 1.25];
    for pair in widths.windows(2) {
        assert!(madds(pair[0], 224) < madds(pair[1], 224));
    }
    // doubling the side quadruples every spatial term; the classifier
    // after pooling does not scale, so the ratio lands just under 4
    let ratio = madds(1.0, 448) as f64 / madds(1.0, 224) as f64;
    assert!((3.6..4.0).contains(&ratio), "{ratio}");
}

#[test]
fn analyzer_shapes_match_executed_shapes() {
    for (w, res) in [(0.25, 64), (0.5, 96)] {
        let spec = mobilenetv3_large_spec(1, 10, w).unwrap();
        let mut model = build_model::<f32>(&spec, 0).unwrap();
        assert_eq!(model.trace(res, res).unwrap(), trace_shapes(&spec, (res, res)).unwrap());
    }
    let spec = mobilenetv3_large_spec(1, 10, 0.5).unwrap();
    let shapes = trace_shapes(&spec, (224, 224)).unwrap();
    assert_eq!(shapes[16], [scale_channels(960, 0.5), 7, 7]);
}

#[test]
fn last_stage_claims() {
    let c = compare_last_stages(1.0, 224).unwrap();
    println!("{c}");
    assert_eq!(c.relocated_conv_ratio, 49.0);
    assert!((25_000_000..=45_000_000).contains(&c.delta_madds));
    assert!(c.to_string().contains("ratio: 49"));
}

#[test]
fn default_report_matches_frozen_csv() {
    let spec = mobilenetv3_large_spec(3, 1000, 1.0).unwrap();
    let r = analyze(&spec, InputShape::square(224, 3), Convention::Madds).unwrap();
    let csv = report_render(&r, ReportFormat::Csv);
    let path = golden("mobilenetv3_large_224_madds.csv");
    if std::env::var_os("LIGHTNET_BLESS").is_some() {
        std::fs::write(&path, &csv).unwrap();
    }
    assert_eq!(csv, std::fs::read_to_string(&path).unwrap());
}

#[test]
fn user_supplied_arch_file() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../archs/a-convnets.json");
    let spec = parse_arch_file(&path).unwrap();
    let r = analyze(&spec, InputShape::of(&spec), Convention::Flops).unwrap();
    // informational: reported, not gated
    println!("a-convnets @88x88x1: {:.3} GFLOPs", r.total_ops() as f64 / 1e9);
    assert!(r.total_ops() > 0);
}

#[test]
fn missing_arch_file_is_io_error() {
    let err = parse_arch_file("/nonexistent/arch.json").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/arch.json"));
}
