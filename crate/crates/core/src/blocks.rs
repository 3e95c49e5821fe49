//! Composite layers: squeeze-and-excitation, the inverted-residual
//! bottleneck ("bneck"), the streamlined classifier head, and the ResNet
//! bottleneck used by the comparison graphs.

use rand::Rng;

use crate::arch::{
    efficient_last_stage_layers, final_feature_size, scale_channels, ArchSpec, LayerOp, LayerSpec,
    Nonlinearity, MOBILENETV3_HEAD_WIDTH, MOBILENETV3_HIDDEN_WIDTH, MOBILENETV3_LAST_BNECK_WIDTH,
};
use crate::error::{Error, Result};
use crate::nn::{join, Act, ConvUnit, Dense, GlobalAvgPool, Layer, ParamRef};
use crate::ops::{Activation, ConvParams, Mode};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SEConfig {
    pub channels: usize,
    pub reduction: usize,
}

impl SEConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            reduction: 4,
        }
    }

    pub fn hidden(&self) -> usize {
        self.channels.div_ceil(self.reduction).max(1)
    }
}

/// Global pool → dense(C→C/4) → ReLU → dense(C/4→C) → hard sigmoid → per
/// channel scale of the input.
pub struct SqueezeExcite<T> {
    pub cfg: SEConfig,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    pool: GlobalAvgPool,
    relu: Act<T>,
    gate_act: Act<T>,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> SqueezeExcite<T> {
    pub fn new<R: Rng>(cfg: SEConfig, rng: &mut R) -> Result<Self> {
        if cfg.channels == 0 || cfg.reduction == 0 {
            return Err(Error::Config(format!("invalid SE config {cfg:?}")));
        }
        Ok(Self {
            cfg,
            fc1: Dense::new(cfg.channels, cfg.hidden(), rng),
            fc2: Dense::new(cfg.hidden(), cfg.channels, rng),
            pool: GlobalAvgPool::default(),
            relu: Act::new(Activation::Relu),
            gate_act: Act::new(Activation::HardSigmoid),
            cache: None,
        })
    }

    /// Per-channel gates `[N, C, 1, 1]`, each in `[0, 1]`.
    pub fn gates(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [_, c, _, _] = x.dims4("se")?;
        if c != self.cfg.channels {
            return Err(Error::shape(
                "se",
                format!("input has {c} channels, SE configured for {}", self.cfg.channels),
            ));
        }
        let s = self.pool.forward(x, mode)?;
        let s = self.fc1.forward(&s, mode)?;
        let s = self.relu.forward(&s, mode)?;
        let s = self.fc2.forward(&s, mode)?;
        self.gate_act.forward(&s, mode)
    }
}

fn scale_channels_by<T: Scalar>(x: &Tensor<T>, gates: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.dims4("se")?;
    let area = h * w;
    let mut out = x.data().to_vec();
    for (plane, &g) in out.chunks_mut(area).zip(gates.data()) {
        plane.iter_mut().for_each(|v| *v = *v * g);
    }
    Tensor::new(x.dims(), out)
}

impl<T: Scalar> Layer<T> for SqueezeExcite<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let gates = self.gates(x, mode)?;
        let y = scale_channels_by(x, &gates)?;
        self.cache = (mode == Mode::Train).then(|| (x.clone(), gates));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, gates) = self.cache.take().ok_or(Error::NoForwardCache { op: "se" })?;
        let [n, c, h, w] = x.dims4("se")?;
        let area = h * w;
        let mut dx = scale_channels_by(grad_out, &gates)?;
        let dgate: Vec<T> = grad_out
            .data()
            .chunks(area)
            .zip(x.data().chunks(area))
            .map(|(g, xv)| g.iter().zip(xv).map(|(&a, &b)| a * b).sum())
            .collect();
        let dgate = Tensor::new(&[n, c, 1, 1], dgate)?;
        let g = self.gate_act.backward(&dgate)?;
        let g = self.fc2.backward(&g)?;
        let g = self.relu.backward(&g)?;
        let g = self.fc1.backward(&g)?;
        let g = self.pool.backward(&g)?;
        for (d, s) in dx.data_mut().iter_mut().zip(g.data()) {
            *d = *d + *s;
        }
        Ok(dx)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BneckSpec {
    pub in_channels: usize,
    pub exp_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub use_se: bool,
    pub nonlinearity: Activation,
}

impl BneckSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.kernel, 3 | 5) {
            return Err(Error::Config(format!("bneck kernel must be 3 or 5, got {}", self.kernel)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!("bneck stride must be 1 or 2, got {}", self.stride)));
        }
        if !matches!(self.nonlinearity, Activation::Relu | Activation::HSwish) {
            return Err(Error::Config(format!(
                "bneck nonlinearity must be relu or h_swish, got {}",
                self.nonlinearity
            )));
        }
        if self.in_channels == 0 || self.exp_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("bneck channels must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn has_expansion(&self) -> bool {
        self.exp_channels != self.in_channels
    }
}

/// Inverted residual: [1×1 expand + BN + NL] → k×k depthwise + BN + NL →
/// [SE] → 1×1 linear projection + BN → [+ input].
pub struct Bneck<T> {
    pub spec: BneckSpec,
    pub expand: Option<ConvUnit<T>>,
    pub depthwise: ConvUnit<T>,
    pub se: Option<SqueezeExcite<T>>,
    pub project: ConvUnit<T>,
}

impl<T: Scalar> Bneck<T> {
    pub fn new<R: Rng>(spec: BneckSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let nl = Some(spec.nonlinearity);
        let expand = if spec.has_expansion() {
            Some(ConvUnit::new(
                ConvParams::pointwise(spec.in_channels, spec.exp_channels),
                true,
                nl,
                rng,
            )?)
        } else {
            None
        };
        let depthwise = ConvUnit::new(
            ConvParams::depthwise(spec.exp_channels, spec.kernel, spec.stride),
            true,
            nl,
            rng,
        )?;
        let se = if spec.use_se {
            Some(SqueezeExcite::new(SEConfig::new(spec.exp_channels), rng)?)
        } else {
            None
        };
        let project = ConvUnit::new(
            ConvParams::pointwise(spec.exp_channels, spec.out_channels),
            true,
            None,
            rng,
        )?;
        debug_assert!(project.act.is_none(), "projection must stay linear");
        Ok(Self {
            spec,
            expand,
            depthwise,
            se,
            project,
        })
    }
}

impl<T: Scalar> Layer<T> for Bneck<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [_, c, _, _] = x.dims4("bneck")?;
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "bneck",
                format!("input has {c} channels, block expects {}", self.spec.in_channels),
            ));
        }
        let mut y = match self.expand.as_mut() {
            Some(e) => e.forward(x, mode)?,
            None => x.clone(),
        };
        y = self.depthwise.forward(&y, mode)?;
        if let Some(se) = self.se.as_mut() {
            y = se.forward(&y, mode)?;
        }
        y = self.project.forward(&y, mode)?;
        if self.spec.has_residual() {
            for (o, &i) in y.data_mut().iter_mut().zip(x.data()) {
                *o = *o + i;
            }
        }
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.project.backward(grad_out)?;
        if let Some(se) = self.se.as_mut() {
            g = se.backward(&g)?;
        }
        g = self.depthwise.backward(&g)?;
        if let Some(e) = self.expand.as_mut() {
            g = e.backward(&g)?;
        }
        if self.spec.has_residual() {
            for (o, &i) in g.data_mut().iter_mut().zip(grad_out.data()) {
                *o = *o + i;
            }
        }
        Ok(g)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        if let Some(e) = self.expand.as_mut() {
            e.collect_params(&join(prefix, "expand"), out);
        }
        self.depthwise.collect_params(&join(prefix, "dw"), out);
        if let Some(se) = self.se.as_mut() {
            se.collect_params(&join(prefix, "se"), out);
        }
        self.project.collect_params(&join(prefix, "project"), out);
    }
}

/// ResNet bottleneck: 1×1 → 3×3 (strided) → 1×1, projection shortcut when
/// the shape changes, ReLU after the sum.
pub struct ResBottleneck<T> {
    pub reduce: ConvUnit<T>,
    pub spatial: ConvUnit<T>,
    pub restore: ConvUnit<T>,
    pub shortcut: Option<ConvUnit<T>>,
    out_act: Act<T>,
    identity_in: bool,
}

impl<T: Scalar> ResBottleneck<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        mid: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let relu = Some(Activation::Relu);
        let needs_projection = stride != 1 || in_channels != out_channels;
        Ok(Self {
            reduce: ConvUnit::new(ConvParams::pointwise(in_channels, mid), true, relu, rng)?,
            spatial: ConvUnit::new(ConvParams::square(mid, mid, 3, stride), true, relu, rng)?,
            restore: ConvUnit::new(ConvParams::pointwise(mid, out_channels), true, None, rng)?,
            shortcut: if needs_projection {
                Some(ConvUnit::new(
                    ConvParams {
                        stride,
                        ..ConvParams::pointwise(in_channels, out_channels)
                    },
                    true,
                    None,
                    rng,
                )?)
            } else {
                None
            },
            out_act: Act::new(Activation::Relu),
            identity_in: !needs_projection,
        })
    }
}

impl<T: Scalar> Layer<T> for ResBottleneck<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.reduce.forward(x, mode)?;
        let y = self.spatial.forward(&y, mode)?;
        let mut y = self.restore.forward(&y, mode)?;
        let skip = match self.shortcut.as_mut() {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        if skip.dims() != y.dims() {
            return Err(Error::shape(
                "bottleneck",
                format!("branch {:?} vs shortcut {:?}", y.dims(), skip.dims()),
            ));
        }
        for (o, &s) in y.data_mut().iter_mut().zip(skip.data()) {
            *o = *o + s;
        }
        self.out_act.forward(&y, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.out_act.backward(grad_out)?;
        let b = self.restore.backward(&g)?;
        let b = self.spatial.backward(&b)?;
        let mut b = self.reduce.backward(&b)?;
        let s = match self.shortcut.as_mut() {
            Some(sc) => sc.backward(&g)?,
            None => {
                debug_assert!(self.identity_in);
                g
            }
        };
        for (o, &v) in b.data_mut().iter_mut().zip(s.data()) {
            *o = *o + v;
        }
        Ok(b)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.reduce.collect_params(&join(prefix, "reduce"), out);
        self.spatial.collect_params(&join(prefix, "spatial"), out);
        self.restore.collect_params(&join(prefix, "restore"), out);
        if let Some(s) = self.shortcut.as_mut() {
            s.collect_params(&join(prefix, "shortcut"), out);
        }
    }
}

/// The streamlined classifier head: the wide 1×1 convolution runs after
/// global pooling, on a 1×1 map, whatever the input resolution.
pub struct EfficientLastStage<T> {
    pub head: ConvUnit<T>,
    pool: GlobalAvgPool,
    pub hidden: ConvUnit<T>,
    pub classifier: ConvUnit<T>,
}

impl<T: Scalar> EfficientLastStage<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        head_channels: usize,
        hidden_channels: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hs = Some(Activation::HSwish);
        Ok(Self {
            head: ConvUnit::new(ConvParams::pointwise(in_channels, head_channels), true, hs, rng)?,
            pool: GlobalAvgPool::default(),
            hidden: ConvUnit::new(ConvParams::pointwise(head_channels, hidden_channels), false, hs, rng)?,
            classifier: ConvUnit::new(
                ConvParams::pointwise(hidden_channels, num_classes),
                false,
                None,
                rng,
            )?,
        })
    }

    /// Widths of the MobileNetV3-Large head at the given multiplier.
    pub fn mobilenetv3<R: Rng>(width_multiplier: f64, num_classes: usize, rng: &mut R) -> Result<Self> {
        let w = |c| scale_channels(c, width_multiplier);
        Self::new(
            w(MOBILENETV3_LAST_BNECK_WIDTH),
            w(MOBILENETV3_HEAD_WIDTH),
            w(MOBILENETV3_HIDDEN_WIDTH),
            num_classes,
            rng,
        )
    }

    /// Logits `[N, num_classes]`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, _, _] = x.dims4("efficient_last_stage")?;
        if c != self.head.conv.params.in_channels {
            return Err(Error::shape(
                "efficient_last_stage",
                format!(
                    "input has {c} channels, head expects {}",
                    self.head.conv.params.in_channels
                ),
            ));
        }
        let y = self.head.forward(x, mode)?;
        let y = Layer::forward(&mut self.pool, &y, mode)?;
        let y = self.hidden.forward(&y, mode)?;
        let y = self.classifier.forward(&y, mode)?;
        let k = y.dims()[1];
        y.reshape(&[n, k])
    }

    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, k] = grad_logits.dims2("efficient_last_stage")?;
        let g = grad_logits.clone().reshape(&[n, k, 1, 1])?;
        let g = self.classifier.backward(&g)?;
        let g = self.hidden.backward(&g)?;
        let g = Layer::<T>::backward(&mut self.pool, &g)?;
        self.head.backward(&g)
    }
}

/// Original (pre-streamlining) last stage as a cost-only fragment, fed by
/// the final bottleneck at `feature × feature`: 1×1 conv → 3×3 depthwise →
/// 1×1 projection → 1×1 conv → pool → classifier.
pub fn original_last_stage_cost_graph(
    width_multiplier: f64,
    input_resolution: usize,
    num_classes: usize,
) -> ArchSpec {
    let w = |c| scale_channels(c, width_multiplier);
    let feature = final_feature_size(input_resolution);
    let head = w(MOBILENETV3_HEAD_WIDTH);
    let layers = vec![
        LayerSpec::conv(1, 1, head, true, Nonlinearity::HSwish),
        LayerSpec {
            op: LayerOp::Dwconv,
            kernel: 3,
            stride: 1,
            se: false,
            nl: Nonlinearity::HSwish,
            exp: None,
            out: head,
            bn: true,
        },
        LayerSpec::conv(1, 1, w(320), true, Nonlinearity::None),
        LayerSpec::conv(1, 1, w(MOBILENETV3_HIDDEN_WIDTH), true, Nonlinearity::HSwish),
        LayerSpec::pool(feature, w(MOBILENETV3_HIDDEN_WIDTH)),
        LayerSpec::conv(1, 1, num_classes, false, Nonlinearity::None),
    ];
    ArchSpec {
        name: "original-last-stage".to_string(),
        in_channels: w(MOBILENETV3_LAST_BNECK_WIDTH),
        input_resolution: feature,
        num_classes,
        width_multiplier,
        layers,
    }
}

/// The streamlined last stage as a cost-only fragment, same interface as
/// [`original_last_stage_cost_graph`].
pub fn efficient_last_stage_cost_graph(
    width_multiplier: f64,
    input_resolution: usize,
    num_classes: usize,
) -> ArchSpec {
    let w = |c| scale_channels(c, width_multiplier);
    let feature = final_feature_size(input_resolution);
    ArchSpec {
        name: "efficient-last-stage".to_string(),
        in_channels: w(MOBILENETV3_LAST_BNECK_WIDTH),
        input_resolution: feature,
        num_classes,
        width_multiplier,
        layers: efficient_last_stage_layers(
            w(MOBILENETV3_HEAD_WIDTH),
            w(MOBILENETV3_HIDDEN_WIDTH),
            num_classes,
            feature,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_input(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| r.gen_range(-2.0..2.0))
    }

    #[test]
    fn se_hidden_width_rounds_up() {
        assert_eq!(SEConfig::new(16).hidden(), 4);
        assert_eq!(SEConfig::new(18).hidden(), 5);
        assert_eq!(SEConfig::new(1).hidden(), 1);
    }

    #[test]
    fn zero_weight_se_halves_input() {
        let mut se = SqueezeExcite::<f64>::new(SEConfig::new(6), &mut rng()).unwrap();
        se.fc1.weight.data_mut().fill(0.0);
        se.fc2.weight.data_mut().fill(0.0);
        let x = random_input(&[2, 6, 3, 3], 1);
        let y = se.forward(&x, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn symmetric_channels_share_gates() {
        let mut se = SqueezeExcite::<f64>::new(SEConfig::new(2), &mut rng()).unwrap();
        // fc1: [2,1], fc2: [1,2]; identical columns/rows make the map symmetric
        se.fc1.weight.data_mut().copy_from_slice(&[0.7, 0.7]);
        se.fc2.weight.data_mut().copy_from_slice(&[-1.3, -1.3]);
        let plane: Vec<f64> = (0..9).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = Tensor::new(&[1, 2, 3, 3], [plane.clone(), plane].concat()).unwrap();
        let g = se.gates(&x, Mode::Eval).unwrap();
        assert_eq!(g.data()[0], g.data()[1]);
    }

    #[test]
    fn se_gates_bounded_and_shrink() {
        for seed in 0..20 {
            let mut se = SqueezeExcite::<f64>::new(SEConfig::new(8), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let x = random_input(&[2, 8, 4, 4], seed + 100);
            let gates = se.gates(&x, Mode::Eval).unwrap();
            assert!(gates.data().iter().all(|&g| (0.0..=1.0).contains(&g)));
            let y = se.forward(&x, Mode::Eval).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!(a.abs() <= b.abs());
            }
        }
    }

    #[test]
    fn se_channel_mismatch() {
        let mut se = SqueezeExcite::<f32>::new(SEConfig::new(8), &mut rng()).unwrap();
        assert!(se.forward(&Tensor::zeros(&[1, 4, 2, 2]), Mode::Eval).is_err());
    }

    fn spec(i: usize, e: usize, o: usize, k: usize, s: usize, se: bool) -> BneckSpec {
        BneckSpec {
            in_channels: i,
            exp_channels: e,
            out_channels: o,
            kernel: k,
            stride: s,
            use_se: se,
            nonlinearity: Activation::HSwish,
        }
    }

    #[test]
    fn residual_rule() {
        assert!(spec(8, 16, 8, 3, 1, false).has_residual());
        assert!(!spec(8, 16, 8, 3, 2, false).has_residual());
        assert!(!spec(8, 16, 12, 3, 1, false).has_residual());
        let b = Bneck::<f32>::new(spec(8, 8, 8, 3, 1, false), &mut rng()).unwrap();
        assert!(b.expand.is_none());
        assert!(b.project.act.is_none());
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut b = Bneck::<f64>::new(spec(4, 8, 6, 5, 2, true), &mut rng()).unwrap();
        let y = b.forward(&random_input(&[1, 4, 9, 9], 3), Mode::Eval).unwrap();
        assert_eq!(y.dims(), &[1, 6, 5, 5]);
    }

    #[test]
    fn zero_branch_passes_input_through() {
        let mut b = Bneck::<f64>::new(spec(4, 8, 4, 3, 1, true), &mut rng()).unwrap();
        for unit in [b.expand.as_mut().unwrap(), &mut b.depthwise, &mut b.project] {
            unit.conv.weight.data_mut().fill(0.0);
            unit.bn.as_mut().unwrap().state.epsilon = 0.0;
        }
        let x = random_input(&[2, 4, 6, 6], 9);
        let y = b.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn invalid_bneck_specs() {
        assert!(spec(4, 8, 4, 4, 1, false).validate().is_err());
        assert!(spec(4, 8, 4, 3, 3, false).validate().is_err());
        let mut s = spec(4, 8, 4, 3, 1, false);
        s.nonlinearity = Activation::Sigmoid;
        assert!(s.validate().is_err());
    }

    #[test]
    fn efficient_last_stage_shapes() {
        let mut stage = EfficientLastStage::<f32>::new(16, 24, 32, 5, &mut rng()).unwrap();
        for hw in [1, 3, 7, 10] {
            let x = Tensor::full(&[2, 16, hw, hw], 0.1);
            let logits = stage.forward(&x, Mode::Train).unwrap();
            assert_eq!(logits.dims(), &[2, 5]);
            assert_eq!(stage.hidden.conv.last_input_dims().unwrap(), &[2, 24, 1, 1]);
        }
        assert!(stage.forward(&Tensor::zeros(&[1, 8, 2, 2]), Mode::Eval).is_err());
    }

    #[test]
    fn original_fragment_has_six_layers() {
        let spec = original_last_stage_cost_graph(1.0, 224, 1000);
        assert_eq!(spec.layers.len(), 6);
        assert_eq!(spec.input_resolution, 7);
        spec.validate().unwrap();
        efficient_last_stage_cost_graph(1.0, 224, 1000).validate().unwrap();
    }
}
