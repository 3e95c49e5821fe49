//! Declarative network descriptions: the built-in MobileNetV3-Large and
//! ResNet-50 layouts and the JSON architecture file format.
//!
//! A layer's input channel count is implied by the previous layer's `out`
//! (or the network's `in_channels` for the first layer).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    /// Dense convolution, padding `(kernel - 1) / 2`.
    Conv2d,
    /// Depthwise convolution; `out` must equal the incoming channel count.
    Dwconv,
    /// Inverted-residual bottleneck with optional squeeze-and-excitation.
    Bneck,
    /// Global average pooling; `kernel` records the nominal window.
    Pool,
    /// Local max pooling with padding `(kernel - 1) / 2`.
    Maxpool,
    /// Fully connected layer over the flattened input.
    Dense,
    /// ResNet-style 1×1 → 3×3 → 1×1 residual block; `exp` is the inner width.
    Bottleneck,
}

impl LayerOp {
    pub fn name(self) -> &'static str {
        match self {
            LayerOp::Conv2d => "conv2d",
            LayerOp::Dwconv => "dwconv",
            LayerOp::Bneck => "bneck",
            LayerOp::Pool => "pool",
            LayerOp::Maxpool => "maxpool",
            LayerOp::Dense => "dense",
            LayerOp::Bottleneck => "bottleneck",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    HSwish,
    None,
}

impl Nonlinearity {
    pub fn activation(self) -> Option<Activation> {
        match self {
            Nonlinearity::Relu => Some(Activation::Relu),
            Nonlinearity::HSwish => Some(Activation::HSwish),
            Nonlinearity::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub op: LayerOp,
    pub kernel: usize,
    pub stride: usize,
    pub se: bool,
    pub nl: Nonlinearity,
    #[serde(default)]
    pub exp: Option<usize>,
    pub out: usize,
    pub bn: bool,
}

impl LayerSpec {
    pub fn conv(kernel: usize, stride: usize, out: usize, bn: bool, nl: Nonlinearity) -> Self {
        Self {
            op: LayerOp::Conv2d,
            kernel,
            stride,
            se: false,
            nl,
            exp: None,
            out,
            bn,
        }
    }

    pub fn bneck(kernel: usize, exp: usize, out: usize, se: bool, nl: Nonlinearity, stride: usize) -> Self {
        Self {
            op: LayerOp::Bneck,
            kernel,
            stride,
            se,
            nl,
            exp: Some(exp),
            out,
            bn: true,
        }
    }

    pub fn pool(kernel: usize, channels: usize) -> Self {
        Self {
            op: LayerOp::Pool,
            kernel,
            stride: 1,
            se: false,
            nl: Nonlinearity::None,
            exp: None,
            out: channels,
            bn: false,
        }
    }

    /// Operator label in the style of the MobileNetV3-Large table, e.g.
    /// `bneck, 5×5 dw` or `conv2d, 1×1, NBN`.
    pub fn operator_label(&self) -> String {
        match self.op {
            LayerOp::Conv2d => {
                let mut s = String::from("conv2d");
                if self.kernel == 1 {
                    s.push_str(", 1×1");
                }
                if !self.bn {
                    s.push_str(", NBN");
                }
                s
            }
            LayerOp::Bneck => format!("bneck, {0}×{0} dw", self.kernel),
            LayerOp::Pool => format!("pool, {0}×{0}", self.kernel),
            LayerOp::Dwconv => format!("dwconv, {0}×{0}", self.kernel),
            LayerOp::Maxpool => format!("maxpool, {0}×{0}", self.kernel),
            LayerOp::Dense => "dense".to_string(),
            LayerOp::Bottleneck => "bottleneck".to_string(),
        }
    }

    fn nonlinearity_label(&self) -> &'static str {
        match self.nl {
            Nonlinearity::Relu => "ReLU",
            Nonlinearity::HSwish => "h-swish",
            Nonlinearity::None => "-",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub in_channels: usize,
    pub input_resolution: usize,
    pub num_classes: usize,
    pub width_multiplier: f64,
    pub layers: Vec<LayerSpec>,
}

/// Channel count scaled by `multiplier`, rounded up to a multiple of 8
/// (minimum 8).
pub fn scale_channels(channels: usize, multiplier: f64) -> usize {
    let scaled = channels as f64 * multiplier / 8.0;
    // guard against representation noise such as 24 × 0.333… / 8 = 1.0000000001
    let units = (scaled - 1e-9).ceil().max(1.0) as usize;
    units * 8
}

/// Spatial size after the five stride-2 stages of the network (`⌈r / 32⌉`
/// under the convolution arithmetic used throughout).
pub fn final_feature_size(input_resolution: usize) -> usize {
    (0..5).fold(input_resolution, |r, _| r.div_ceil(2))
}

/// (kernel, expansion, output, SE, nonlinearity, stride) for the fifteen
/// bottleneck rows.
const MOBILENETV3_LARGE_BNECKS: [(usize, usize, usize, bool, Nonlinearity, usize); 15] = {
    use Nonlinearity::{HSwish as HS, Relu as RE};
    [
        (3, 16, 16, false, RE, 1),
        (3, 64, 24, false, RE, 2),
        (3, 72, 24, false, RE, 1),
        (5, 72, 40, true, RE, 2),
        (5, 120, 40, true, RE, 1),
        (5, 120, 40, true, RE, 1),
        (3, 240, 80, false, HS, 2),
        (3, 200, 80, false, HS, 1),
        (3, 184, 80, false, HS, 1),
        (3, 184, 80, false, HS, 1),
        (3, 480, 112, true, HS, 1),
        (3, 672, 112, true, HS, 1),
        (5, 672, 160, true, HS, 2),
        (5, 960, 160, true, HS, 1),
        (5, 960, 160, true, HS, 1),
    ]
};

pub const MOBILENETV3_STEM_WIDTH: usize = 16;
pub const MOBILENETV3_HEAD_WIDTH: usize = 960;
pub const MOBILENETV3_HIDDEN_WIDTH: usize = 1280;
pub const MOBILENETV3_LAST_BNECK_WIDTH: usize = 160;

pub fn mobilenetv3_large_spec(
    in_channels: usize,
    num_classes: usize,
    width_multiplier: f64,
) -> Result<ArchSpec> {
    if !(width_multiplier > 0.0 && width_multiplier.is_finite()) {
        return Err(Error::Config(format!(
            "width multiplier must be positive, got {width_multiplier}"
        )));
    }
    if !matches!(in_channels, 1 | 3) {
        return Err(Error::Config(format!("in_channels must be 1 or 3, got {in_channels}")));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!("num_classes must be ≥ 2, got {num_classes}")));
    }
    let w = |c| scale_channels(c, width_multiplier);
    let mut layers = vec![LayerSpec::conv(
        3,
        2,
        w(MOBILENETV3_STEM_WIDTH),
        true,
        Nonlinearity::HSwish,
    )];
    for (k, exp, out, se, nl, s) in MOBILENETV3_LARGE_BNECKS {
        layers.push(LayerSpec::bneck(k, w(exp), w(out), se, nl, s));
    }
    layers.extend(efficient_last_stage_layers(
        w(MOBILENETV3_HEAD_WIDTH),
        w(MOBILENETV3_HIDDEN_WIDTH),
        num_classes,
        final_feature_size(224),
    ));
    Ok(ArchSpec {
        name: "mobilenetv3-large".to_string(),
        in_channels,
        input_resolution: 224,
        num_classes,
        width_multiplier,
        layers,
    })
}

/// The streamlined classifier head: 1×1 conv → pool → 1×1 conv (NBN) →
/// 1×1 conv (NBN).
pub fn efficient_last_stage_layers(
    head: usize,
    hidden: usize,
    num_classes: usize,
    pool_kernel: usize,
) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(1, 1, head, true, Nonlinearity::HSwish),
        LayerSpec::pool(pool_kernel, head),
        LayerSpec::conv(1, 1, hidden, false, Nonlinearity::HSwish),
        LayerSpec::conv(1, 1, num_classes, false, Nonlinearity::None),
    ]
}

/// Cost-model layout of ResNet-50 (stride on the 3×3 convolution of each
/// downsampling block) at 224×224×3.
pub fn resnet50_cost_spec() -> ArchSpec {
    let mut layers = vec![
        LayerSpec::conv(7, 2, 64, true, Nonlinearity::Relu),
        LayerSpec {
            op: LayerOp::Maxpool,
            kernel: 3,
            stride: 2,
            se: false,
            nl: Nonlinearity::None,
            exp: None,
            out: 64,
            bn: false,
        },
    ];
    for (stage, (&blocks, &mid)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        for b in 0..blocks {
            layers.push(LayerSpec {
                op: LayerOp::Bottleneck,
                kernel: 3,
                stride: if b == 0 && stage > 0 { 2 } else { 1 },
                se: false,
                nl: Nonlinearity::Relu,
                exp: Some(mid),
                out: mid * 4,
                bn: true,
            });
        }
    }
    layers.push(LayerSpec::pool(7, 2048));
    layers.push(LayerSpec {
        op: LayerOp::Dense,
        kernel: 1,
        stride: 1,
        se: false,
        nl: Nonlinearity::None,
        exp: None,
        out: 1000,
        bn: false,
    });
    ArchSpec {
        name: "resnet50".to_string(),
        in_channels: 3,
        input_resolution: 224,
        num_classes: 1000,
        width_multiplier: 1.0,
        layers,
    }
}

fn arch_err(index: usize, layer: &LayerSpec, detail: impl Into<String>) -> Error {
    Error::Arch {
        location: format!("layers[{index}] ({})", layer.op.name()),
        detail: detail.into(),
    }
}

impl ArchSpec {
    pub fn with_resolution(mut self, input_resolution: usize) -> Self {
        self.input_resolution = input_resolution;
        self
    }

    /// Structural checks that do not depend on the input resolution.
    pub fn validate(&self) -> Result<()> {
        let top = |detail: String| Error::Arch {
            location: "top level".to_string(),
            detail,
        };
        if self.in_channels == 0 {
            return Err(top("in_channels must be positive".into()));
        }
        if self.input_resolution == 0 {
            return Err(top("input_resolution must be positive".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(top(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        let mut channels = self.in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride == 0 {
                return Err(arch_err(i, l, "stride must be ≥ 1"));
            }
            if l.kernel == 0 {
                return Err(arch_err(i, l, "kernel must be ≥ 1"));
            }
            if l.out == 0 {
                return Err(arch_err(i, l, "out must be ≥ 1"));
            }
            if l.se && l.op != LayerOp::Bneck {
                return Err(arch_err(i, l, "se is only valid on bneck layers"));
            }
            match l.op {
                LayerOp::Bneck => {
                    if !matches!(l.kernel, 3 | 5) {
                        return Err(arch_err(i, l, format!("bneck kernel must be 3 or 5, got {}", l.kernel)));
                    }
                    if !matches!(l.stride, 1 | 2) {
                        return Err(arch_err(i, l, format!("bneck stride must be 1 or 2, got {}", l.stride)));
                    }
                    if l.nl == Nonlinearity::None {
                        return Err(arch_err(i, l, "bneck needs a nonlinearity (relu or h_swish)"));
                    }
                    match l.exp {
                        Some(e) if e > 0 => {}
                        _ => return Err(arch_err(i, l, "bneck requires a positive exp width")),
                    }
                }
                LayerOp::Bottleneck => match l.exp {
                    Some(e) if e > 0 => {}
                    _ => return Err(arch_err(i, l, "bottleneck requires a positive exp width")),
                },
                LayerOp::Pool | LayerOp::Maxpool | LayerOp::Dwconv => {
                    if l.out != channels {
                        let prev = match i {
                            0 => "network input".to_string(),
                            _ => format!("layers[{}] ({})", i - 1, self.layers[i - 1].op.name()),
                        };
                        return Err(arch_err(
                            i,
                            l,
                            format!(
                                "out {} does not match the {channels} channels produced by {prev}",
                                l.out
                            ),
                        ));
                    }
                    if l.op != LayerOp::Dwconv && l.bn {
                        return Err(arch_err(i, l, "pooling layers take no batch norm"));
                    }
                }
                LayerOp::Dense => {
                    if l.bn {
                        return Err(arch_err(i, l, "dense layers take no batch norm"));
                    }
                }
                LayerOp::Conv2d => {}
            }
            channels = l.out;
        }
        if let Some(last) = self.layers.last() {
            if last.out != self.num_classes {
                return Err(arch_err(
                    self.layers.len() - 1,
                    last,
                    format!("final out {} != num_classes {}", last.out, self.num_classes),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_str(text).map_err(|e| Error::Arch {
            location: format!("line {} column {}", e.line(), e.column()),
            detail: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// `(operator, SE, nonlinearity, stride)` per layer, in the layout of
    /// the MobileNetV3-Large specification table.
    pub fn table_rows(&self) -> Vec<[String; 4]> {
        self.layers
            .iter()
            .map(|l| {
                [
                    l.operator_label(),
                    if l.se { "✓" } else { "-" }.to_string(),
                    l.nonlinearity_label().to_string(),
                    l.stride.to_string(),
                ]
            })
            .collect()
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Operator | SE | Nonlinearity | Stride")?;
        for row in self.table_rows() {
            writeln!(f, "{}", row.join(" | "))?;
        }
        Ok(())
    }
}

pub fn parse_arch_file(path: impl AsRef<Path>) -> Result<ArchSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ArchSpec::from_json(&text).map_err(|e| match e {
        Error::Arch { location, detail } => Error::Arch {
            location: format!("{}: {location}", path.display()),
            detail,
        },
        other => other,
    })
}

pub fn write_arch_file(spec: &ArchSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, spec.to_json() + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_rows_and_flags() {
        let spec = mobilenetv3_large_spec(3, 1000, 1.0).unwrap();
        assert_eq!(spec.layers.len(), 20);
        assert_eq!(spec.layers[0].out, 16);
        let se_rows: Vec<usize> = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.se)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(se_rows, vec![5, 6, 7, 12, 13, 14, 15, 16]);
        let strides: Vec<usize> = spec.layers.iter().map(|l| l.stride).collect();
        assert_eq!(strides, vec![2, 1, 2, 1, 2, 1, 1, 2, 1, 1, 1, 1, 1, 2, 1, 1, 1, 1, 1, 1]);
        let hs: Vec<usize> = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.nl == Nonlinearity::HSwish && l.op == LayerOp::Bneck)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(hs[0], 8);
        assert_eq!(spec.layers[0].nl, Nonlinearity::HSwish);
        let nbn = spec.layers.iter().filter(|l| l.op == LayerOp::Conv2d && !l.bn).count();
        assert_eq!(nbn, 2);
        spec.validate().unwrap();
    }

    #[test]
    fn half_width_rounds_up_to_eight() {
        let spec = mobilenetv3_large_spec(1, 10, 0.5).unwrap();
        let outs: Vec<usize> = spec.layers.iter().map(|l| l.out).collect();
        // 16/2=8, 24/2=12→16, 40/2=20→24, 80/2=40, 112/2=56, 160/2=80, 960/2=480, 1280/2=640
        assert_eq!(
            outs,
            vec![8, 8, 16, 16, 24, 24, 24, 40, 40, 40, 40, 56, 56, 80, 80, 80, 480, 480, 640, 10]
        );
        let exps: Vec<usize> = spec.layers.iter().filter_map(|l| l.exp).collect();
        // 16→8, 64→32, 72→36→40, 120→60→64, 240→120, 200→100→104, 184→92→96, 480→240, 672→336, 960→480
        assert_eq!(
            exps,
            vec![8, 32, 40, 40, 64, 64, 120, 104, 96, 96, 240, 336, 336, 480, 480]
        );
    }

    #[test]
    fn non_positive_multiplier_rejected() {
        assert!(mobilenetv3_large_spec(1, 10, 0.0).is_err());
        assert!(mobilenetv3_large_spec(1, 10, -1.0).is_err());
        assert!(mobilenetv3_large_spec(2, 10, 1.0).is_err());
        assert!(mobilenetv3_large_spec(1, 1, 1.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let spec = mobilenetv3_large_spec(1, 10, 0.75).unwrap();
        let parsed = ArchSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(parsed, spec);
        assert_eq!(ArchSpec::from_json(&parsed.to_json()).unwrap(), spec);
    }

    #[test]
    fn zero_stride_rejected() {
        let mut spec = mobilenetv3_large_spec(1, 10, 1.0).unwrap();
        spec.layers[3].stride = 0;
        let err = ArchSpec::from_json(&spec.to_json()).unwrap_err();
        assert!(err.to_string().contains("layers[3]"), "{err}");
    }

    #[test]
    fn unknown_op_and_field_rejected() {
        let spec = mobilenetv3_large_spec(1, 10, 1.0).unwrap();
        let bad_op = spec.to_json().replacen("\"bneck\"", "\"transformer\"", 1);
        let err = ArchSpec::from_json(&bad_op).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
        let bad_field = spec.to_json().replacen("\"se\"", "\"squeeze\"", 1);
        assert!(ArchSpec::from_json(&bad_field).is_err());
        let missing = spec.to_json().replacen("\"bn\": true", "\"bn_\": true", 1);
        assert!(ArchSpec::from_json(&missing).is_err());
    }

    #[test]
    fn pool_channel_mismatch_names_both_layers() {
        let mut spec = mobilenetv3_large_spec(1, 10, 1.0).unwrap();
        spec.layers[17].out = 100;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("layers[17]") && err.contains("layers[16]"), "{err}");
    }

    #[test]
    fn resnet50_layout() {
        let spec = resnet50_cost_spec();
        spec.validate().unwrap();
        assert_eq!(spec.layers.iter().filter(|l| l.op == LayerOp::Bottleneck).count(), 16);
    }

    #[test]
    fn feature_size() {
        assert_eq!(final_feature_size(224), 7);
        assert_eq!(final_feature_size(448), 14);
        assert_eq!(final_feature_size(64), 2);
    }
}
