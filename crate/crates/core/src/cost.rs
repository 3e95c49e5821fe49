//! Analytic parameter and multiply-accumulate accounting over an
//! [`ArchSpec`].
//!
//! Convolutions cost `Hout·Wout·Cout·(Kh·Kw·Cin/groups)` MAdds, dense layers
//! `D·K`, and the SE excitation `C·(C/4)·2`. Batch norm, activations,
//! pooling and bias additions are counted as zero. Parameters are weights,
//! biases and batch-norm gamma/beta.

use std::fmt::{self, Write as _};

use crate::arch::{ArchSpec, LayerOp, LayerSpec};
use crate::blocks::{efficient_last_stage_cost_graph, original_last_stage_cost_graph, SEConfig};
use crate::error::{Error, Result};
use crate::ops::{ConvParams, MaxPoolParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    Madds,
    /// Two floating point operations per multiply-accumulate.
    Flops,
}

impl Convention {
    pub fn factor(self) -> u64 {
        match self {
            Convention::Madds => 1,
            Convention::Flops => 2,
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            Convention::Madds => "madds",
            Convention::Flops => "flops",
        }
    }
}

impl std::str::FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "madds" => Ok(Convention::Madds),
            "flops" => Ok(Convention::Flops),
            other => Err(Error::Config(format!("unknown cost convention '{other}'"))),
        }
    }
}

/// Input geometry `H × W × C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn square(resolution: usize, channels: usize) -> Self {
        Self {
            height: resolution,
            width: resolution,
            channels,
        }
    }

    pub fn of(spec: &ArchSpec) -> Self {
        Self::square(spec.input_resolution, spec.in_channels)
    }
}

impl std::str::FromStr for InputShape {
    type Err = Error;

    /// Parses `HxWxC`, e.g. `224x224x3`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let nums: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
        match nums.as_deref() {
            Some(&[h, w, c]) if h > 0 && w > 0 && c > 0 => Ok(Self {
                height: h,
                width: w,
                channels: c,
            }),
            _ => Err(Error::Config(format!("input shape must be HxWxC, got '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    /// `[C, H, W]` of the layer output.
    pub out_shape: [usize; 3],
    pub params: u64,
    pub madds: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub name: String,
    pub input: InputShape,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_madds: u64,
    pub convention: Convention,
}

impl CostReport {
    /// Row cost in the report's convention.
    pub fn row_ops(&self, row: &CostRow) -> u64 {
        row.madds * self.convention.factor()
    }

    pub fn total_ops(&self) -> u64 {
        self.total_madds * self.convention.factor()
    }

    pub fn conv_dense_count(spec: &ArchSpec) -> usize {
        spec.layers
            .iter()
            .map(|l| match l.op {
                LayerOp::Conv2d | LayerOp::Dwconv | LayerOp::Dense => 1,
                LayerOp::Bottleneck => 3,
                _ => 0,
            })
            .sum::<usize>()
            + projection_count(spec)
    }
}

fn projection_count(spec: &ArchSpec) -> usize {
    let mut c = spec.in_channels;
    let mut n = 0;
    for l in &spec.layers {
        if l.op == LayerOp::Bottleneck && (l.stride != 1 || c != l.out) {
            n += 1;
        }
        c = l.out;
    }
    n
}

struct LayerCost {
    out: [usize; 3],
    params: u64,
    madds: u64,
}

fn shape_err(index: usize, l: &LayerSpec, detail: String) -> Error {
    Error::Arch {
        location: format!("layers[{index}] ({})", l.op.name()),
        detail,
    }
}

fn conv_out(index: usize, l: &LayerSpec, p: &ConvParams, h: usize, w: usize) -> Result<(usize, usize)> {
    p.output_hw(h, w).ok_or_else(|| {
        shape_err(
            index,
            l,
            format!("{h}x{w} input too small for {}x{} kernel", p.kernel_h, p.kernel_w),
        )
    })
}

fn layer_cost(index: usize, l: &LayerSpec, [c, h, w]: [usize; 3]) -> Result<LayerCost> {
    let u = |v: usize| v as u64;
    let bn_params = |ch: usize| if l.bn { 2 * u(ch) } else { u(ch) };
    Ok(match l.op {
        LayerOp::Conv2d => {
            let p = ConvParams::square(c, l.out, l.kernel, l.stride);
            let (ho, wo) = conv_out(index, l, &p, h, w)?;
            let taps = u(l.kernel * l.kernel * c);
            LayerCost {
                out: [l.out, ho, wo],
                params: taps * u(l.out) + bn_params(l.out),
                madds: u(ho * wo * l.out) * taps,
            }
        }
        LayerOp::Dwconv => {
            let p = ConvParams::depthwise(c, l.kernel, l.stride);
            let (ho, wo) = conv_out(index, l, &p, h, w)?;
            LayerCost {
                out: [c, ho, wo],
                params: u(c * l.kernel * l.kernel) + bn_params(c),
                madds: u(ho * wo * c * l.kernel * l.kernel),
            }
        }
        LayerOp::Bneck => {
            let exp = l.exp.expect("validated");
            let mut params = 0;
            let mut madds = 0;
            if exp != c {
                params += u(c * exp) + 2 * u(exp);
                madds += u(h * w * c * exp);
            }
            let p = ConvParams::depthwise(exp, l.kernel, l.stride);
            let (ho, wo) = conv_out(index, l, &p, h, w)?;
            params += u(exp * l.kernel * l.kernel) + 2 * u(exp);
            madds += u(ho * wo * exp * l.kernel * l.kernel);
            if l.se {
                let hid = SEConfig::new(exp).hidden();
                params += 2 * u(exp * hid) + u(hid) + u(exp);
                madds += 2 * u(exp * hid);
            }
            params += u(exp * l.out) + 2 * u(l.out);
            madds += u(ho * wo * exp * l.out);
            LayerCost {
                out: [l.out, ho, wo],
                params,
                madds,
            }
        }
        LayerOp::Pool => LayerCost {
            out: [c, 1, 1],
            params: 0,
            madds: 0,
        },
        LayerOp::Maxpool => {
            let p = MaxPoolParams {
                kernel: l.kernel,
                stride: l.stride,
            };
            let (ho, wo) = p.output_hw(h, w).ok_or_else(|| {
                shape_err(index, l, format!("{h}x{w} input too small for {0}x{0} window", l.kernel))
            })?;
            LayerCost {
                out: [c, ho, wo],
                params: 0,
                madds: 0,
            }
        }
        LayerOp::Dense => {
            let d = u(c * h * w);
            LayerCost {
                out: [l.out, 1, 1],
                params: d * u(l.out) + u(l.out),
                madds: d * u(l.out),
            }
        }
        LayerOp::Bottleneck => {
            let mid = l.exp.expect("validated");
            let p = ConvParams::square(mid, mid, 3, l.stride);
            let (ho, wo) = conv_out(index, l, &p, h, w)?;
            let mut params = u(c * mid) + 2 * u(mid) + u(9 * mid * mid) + 2 * u(mid) + u(mid * l.out) + 2 * u(l.out);
            let mut madds = u(h * w * c * mid) + u(ho * wo * 9 * mid * mid) + u(ho * wo * mid * l.out);
            if l.stride != 1 || c != l.out {
                params += u(c * l.out) + 2 * u(l.out);
                madds += u(ho * wo * c * l.out);
            }
            LayerCost {
                out: [l.out, ho, wo],
                params,
                madds,
            }
        }
    })
}

/// Output `[C, H, W]` of every layer for an `h × w` input.
pub fn trace_shapes(spec: &ArchSpec, (h, w): (usize, usize)) -> Result<Vec<[usize; 3]>> {
    let mut shape = [spec.in_channels, h, w];
    let mut out = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        shape = layer_cost(i, l, shape)?.out;
        out.push(shape);
    }
    Ok(out)
}

fn row_name(index: usize, l: &LayerSpec) -> String {
    let mut name = format!("{index:02}_{}", l.op.name());
    match l.op {
        LayerOp::Pool | LayerOp::Dense => {}
        _ => write!(name, "_k{}_s{}", l.kernel, l.stride).unwrap(),
    }
    if l.se {
        name.push_str("_se");
    }
    if l.op == LayerOp::Conv2d && !l.bn {
        name.push_str("_nbn");
    }
    name
}

pub fn analyze(spec: &ArchSpec, input: InputShape, convention: Convention) -> Result<CostReport> {
    spec.validate()?;
    if input.channels != spec.in_channels {
        return Err(Error::shape(
            "analyze",
            format!(
                "input has {} channels, architecture expects {}",
                input.channels, spec.in_channels
            ),
        ));
    }
    let mut shape = [input.channels, input.height, input.width];
    let mut rows = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let cost = layer_cost(i, l, shape)?;
        shape = cost.out;
        rows.push(CostRow {
            name: row_name(i, l),
            out_shape: cost.out,
            params: cost.params,
            madds: cost.madds,
        });
    }
    Ok(CostReport {
        name: spec.name.clone(),
        input,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_madds: rows.iter().map(|r| r.madds).sum(),
        rows,
        convention,
    })
}

#[derive(Clone, Debug)]
pub struct LastStageComparison {
    pub original: CostReport,
    pub efficient: CostReport,
    /// `original − efficient` MAdds.
    pub delta_madds: i64,
    /// Cost of the wide 1×1 convolution run before pooling divided by its
    /// cost after pooling.
    pub relocated_conv_ratio: f64,
}

pub fn compare_last_stages(width_multiplier: f64, input_resolution: usize) -> Result<LastStageComparison> {
    let classes = 1000;
    let original_spec = original_last_stage_cost_graph(width_multiplier, input_resolution, classes);
    let efficient_spec = efficient_last_stage_cost_graph(width_multiplier, input_resolution, classes);
    let original = analyze(&original_spec, InputShape::of(&original_spec), Convention::Madds)?;
    let efficient = analyze(&efficient_spec, InputShape::of(&efficient_spec), Convention::Madds)?;

    // same head with the wide convolution moved back in front of the pool
    let mut unrelocated = efficient_spec.clone();
    unrelocated.layers.swap(1, 2);
    unrelocated.layers[2].out = unrelocated.layers[1].out;
    let before = analyze(&unrelocated, InputShape::of(&unrelocated), Convention::Madds)?;
    let after_cost = efficient.rows[2].madds;
    let before_cost = before.rows[1].madds;

    Ok(LastStageComparison {
        delta_madds: original.total_madds as i64 - efficient.total_madds as i64,
        relocated_conv_ratio: before_cost as f64 / after_cost as f64,
        original,
        efficient,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format '{other}'"))),
        }
    }
}

fn shape_str([c, h, w]: [usize; 3]) -> String {
    format!("{c}x{h}x{w}")
}

pub fn report_render(report: &CostReport, format: ReportFormat) -> String {
    let mut s = String::new();
    let col = report.convention.column();
    match format {
        ReportFormat::Csv => {
            writeln!(s, "layer,out_shape,params,{col}").unwrap();
            for r in &report.rows {
                writeln!(s, "{},{},{},{}", r.name, shape_str(r.out_shape), r.params, report.row_ops(r)).unwrap();
            }
            if !report.rows.is_empty() {
                writeln!(s, "total,,{},{}", report.total_params, report.total_ops()).unwrap();
            }
        }
        ReportFormat::Table => {
            let i = report.input;
            writeln!(
                s,
                "# {} @ {}x{}x{}; convention: {} ({}); batch norm, activations, pooling and bias adds count as 0",
                report.name,
                i.height,
                i.width,
                i.channels,
                col,
                match report.convention {
                    Convention::Madds => "multiply-accumulates",
                    Convention::Flops => "2 x multiply-accumulates",
                }
            )
            .unwrap();
            writeln!(s, "{:<24} {:>14} {:>12} {:>16}", "layer", "out_shape", "params", col).unwrap();
            for r in &report.rows {
                writeln!(
                    s,
                    "{:<24} {:>14} {:>12} {:>16}",
                    r.name,
                    shape_str(r.out_shape),
                    r.params,
                    report.row_ops(r)
                )
                .unwrap();
            }
            if !report.rows.is_empty() {
                writeln!(
                    s,
                    "{:<24} {:>14} {:>12} {:>16}",
                    "total",
                    "",
                    report.total_params,
                    report.total_ops()
                )
                .unwrap();
                writeln!(
                    s,
                    "# total: {:.3}M params, {:.4}G {col}",
                    report.total_params as f64 / 1e6,
                    report.total_ops() as f64 / 1e9
                )
                .unwrap();
            }
        }
    }
    s
}

impl fmt::Display for LastStageComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# last stage comparison (madds)")?;
        writeln!(f, "original last stage: {}", self.original.total_madds)?;
        writeln!(f, "efficient last stage: {}", self.efficient.total_madds)?;
        writeln!(
            f,
            "saved: {} ({:.2}M)",
            self.delta_madds,
            self.delta_madds as f64 / 1e6
        )?;
        writeln!(f, "relocated 1x1 conv ratio: {}", self.relocated_conv_ratio)
    }
}
