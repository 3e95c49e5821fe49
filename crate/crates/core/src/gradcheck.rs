//! Central finite-difference verification of every differentiable
//! primitive and block, in 64-bit precision.
//!
//! Each layer is wrapped in the scalar objective `L(x) = Σ f(x) ⊙ R` with a
//! fixed random `R`; analytic gradients from `backward(R)` are compared with
//! `(L(θ + h) − L(θ − h)) / 2h` for every input entry and every parameter.
//! Elementwise relative error is `|a − n| / max(|a|, |n|, floor)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Bneck, BneckSpec, EfficientLastStage, ResBottleneck, SEConfig, SqueezeExcite};
use crate::error::Result;
use crate::nn::{Act, BatchNorm2d, Conv2d, Dense, GlobalAvgPool, Layer, MaxPool};
use crate::ops::{softmax_cross_entropy, Activation, ConvParams, MaxPoolParams, Mode};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_THRESHOLD: f64 = 1e-4;
pub const BLOCK_THRESHOLD: f64 = 1e-3;
/// Denominator floor of the relative error; below it the comparison is
/// effectively absolute.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub family: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub entries_checked: usize,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

fn random_tensor(dims: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

/// Keep activation inputs at least `margin` away from the kinks of the
/// piecewise-linear nonlinearities.
fn avoid_kinks(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        for k in [-3.0, 0.0, 3.0, 6.0] {
            if (*v - k).abs() < margin {
                *v = k + margin.copysign(*v - k + f64::MIN_POSITIVE);
            }
        }
    }
}

fn objective<L: Layer<f64>>(layer: &mut L, x: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    let y = layer.forward(x, Mode::Train)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Compare analytic and numeric gradients of `layer` at input `x`.
pub fn check_layer<L: Layer<f64>>(
    layer: &mut L,
    x: &Tensor<f64>,
    seed: u64,
) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let y = layer.forward(x, Mode::Train)?;
    let r = random_tensor(y.dims(), &mut rng, -1.0, 1.0);

    for p in layer_params(layer) {
        p.zero_grad();
    }
    layer.forward(x, Mode::Train)?;
    let dx = layer.backward(&r)?;

    let mut worst = 0.0f64;
    let mut count = 0;

    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let plus = objective(layer, &xp, &r)?;
        xp.data_mut()[i] = orig - FD_STEP;
        let minus = objective(layer, &xp, &r)?;
        xp.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(dx.data()[i], numeric));
        count += 1;
    }

    let n_params = layer_params(layer).len();
    for pi in 0..n_params {
        let analytic: Vec<f64> = layer_params(layer)[pi]
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_default();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = layer_params(layer)[pi].data()[i];
            layer_params(layer)[pi].data_mut()[i] = orig + FD_STEP;
            let plus = objective(layer, x, &r)?;
            layer_params(layer)[pi].data_mut()[i] = orig - FD_STEP;
            let minus = objective(layer, x, &r)?;
            layer_params(layer)[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn layer_params<L: Layer<f64>>(layer: &mut L) -> Vec<&mut Tensor<f64>> {
    let mut refs = Vec::new();
    layer.collect_params("", &mut refs);
    refs.into_iter()
        .filter(|p| p.kind.trainable())
        .map(|p| p.tensor)
        .collect()
}

/// Softmax cross-entropy checked against its own returned gradient.
pub fn check_softmax_cross_entropy(seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random_tensor(&[4, 7], &mut rng, -3.0, 3.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
    let (_, grad) = softmax_cross_entropy(&logits, &labels)?;
    let mut worst = 0.0f64;
    let mut lp = logits.clone();
    for i in 0..logits.numel() {
        let orig = lp.data()[i];
        lp.data_mut()[i] = orig + FD_STEP;
        let (plus, _) = softmax_cross_entropy(&lp, &labels)?;
        lp.data_mut()[i] = orig - FD_STEP;
        let (minus, _) = softmax_cross_entropy(&lp, &labels)?;
        lp.data_mut()[i] = orig;
        worst = worst.max(relative_error(grad.data()[i], (plus - minus) / (2.0 * FD_STEP)));
    }
    Ok((worst, logits.numel()))
}

/// Every bneck configuration that occurs in MobileNetV3-Large:
/// kernel {3,5} × SE {no,yes} × nonlinearity {relu,h_swish} × stride {1,2}.
pub fn bneck_patterns() -> Vec<BneckSpec> {
    let mut out = Vec::new();
    for kernel in [3, 5] {
        for use_se in [false, true] {
            for nonlinearity in [Activation::Relu, Activation::HSwish] {
                for stride in [1, 2] {
                    out.push(BneckSpec {
                        in_channels: 4,
                        exp_channels: 8,
                        out_channels: 4,
                        kernel,
                        stride,
                        use_se,
                        nonlinearity,
                    });
                }
            }
        }
    }
    out
}

fn record(
    results: &mut Vec<GradCheckResult>,
    name: impl Into<String>,
    family: &'static str,
    threshold: f64,
    (err, n): (f64, usize),
) {
    results.push(GradCheckResult {
        name: name.into(),
        family,
        max_rel_error: err,
        threshold,
        entries_checked: n,
    });
}

/// Run the full suite. Deterministic for a given seed.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let p = PRIMITIVE_THRESHOLD;

    let convs = [
        ("conv2d 3x3 s2", ConvParams::square(4, 6, 3, 2), [2, 4, 7, 7]),
        ("conv2d 1x1", ConvParams::pointwise(4, 5), [2, 4, 5, 5]),
        (
            "conv2d grouped g2",
            ConvParams {
                groups: 2,
                ..ConvParams::square(4, 6, 3, 1)
            },
            [2, 4, 5, 5],
        ),
        ("conv2d depthwise 3x3 s2", ConvParams::depthwise(4, 3, 2), [2, 4, 7, 7]),
        ("conv2d depthwise 5x5", ConvParams::depthwise(3, 5, 1), [1, 3, 6, 6]),
    ];
    for (name, params, dims) in convs {
        let mut layer = Conv2d::<f64>::new(params, true, &mut rng)?;
        let x = random_tensor(&dims, &mut rng, -1.0, 1.0);
        record(&mut results, name, "conv2d", p, check_layer(&mut layer, &x, rng.gen())?);
    }

    {
        let mut bn = BatchNorm2d::<f64>::new(3);
        for v in bn.state.gamma.data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in bn.state.beta.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = random_tensor(&[3, 3, 4, 4], &mut rng, -2.0, 2.0);
        record(&mut results, "batch_norm (train)", "batch_norm", p, check_layer(&mut bn, &x, rng.gen())?);
    }

    for kind in Activation::ALL {
        let mut act = Act::<f64>::new(kind);
        let mut x = random_tensor(&[2, 3, 4, 4], &mut rng, -7.0, 7.0);
        avoid_kinks(&mut x, 1e-3);
        record(&mut results, kind.name(), "activation", p, check_layer(&mut act, &x, rng.gen())?);
    }

    {
        let mut pool = GlobalAvgPool::default();
        let x = random_tensor(&[2, 3, 5, 4], &mut rng, -1.0, 1.0);
        record(&mut results, "global_avg_pool", "pool", p, check_layer(&mut pool, &x, rng.gen())?);
        let mut mp = MaxPool::new(MaxPoolParams { kernel: 3, stride: 2 });
        let x = random_tensor(&[2, 2, 6, 6], &mut rng, -1.0, 1.0);
        record(&mut results, "max_pool 3x3 s2", "pool", p, check_layer(&mut mp, &x, rng.gen())?);
    }

    {
        let mut dense = Dense::<f64>::new(6, 4, &mut rng);
        let x = random_tensor(&[3, 6], &mut rng, -1.0, 1.0);
        record(&mut results, "dense", "dense", p, check_layer(&mut dense, &x, rng.gen())?);
    }

    record(
        &mut results,
        "softmax_cross_entropy",
        "loss",
        p,
        check_softmax_cross_entropy(rng.gen())?,
    );

    {
        let mut se = SqueezeExcite::<f64>::new(SEConfig::new(8), &mut rng)?;
        let x = random_tensor(&[2, 8, 4, 4], &mut rng, -1.0, 1.0);
        record(&mut results, "squeeze_excite", "se", BLOCK_THRESHOLD, check_layer(&mut se, &x, rng.gen())?);
    }

    for spec in bneck_patterns() {
        let mut block = Bneck::<f64>::new(spec, &mut rng)?;
        let x = random_tensor(&[1, 4, 8, 8], &mut rng, -1.0, 1.0);
        let name = format!(
            "bneck {k}x{k} {se} {nl} s{s}",
            k = spec.kernel,
            se = if spec.use_se { "se" } else { "nose" },
            nl = spec.nonlinearity,
            s = spec.stride
        );
        record(&mut results, name, "bneck", BLOCK_THRESHOLD, check_layer(&mut block, &x, rng.gen())?);
    }

    {
        let mut block = ResBottleneck::<f64>::new(4, 3, 6, 2, &mut rng)?;
        let x = random_tensor(&[2, 4, 6, 6], &mut rng, -1.0, 1.0);
        record(&mut results, "resnet bottleneck s2", "bottleneck", BLOCK_THRESHOLD, check_layer(&mut block, &x, rng.gen())?);
    }

    {
        let stage = EfficientLastStage::<f64>::new(4, 8, 6, 3, &mut rng)?;
        let mut wrapped = HeadAsLayer(stage);
        let x = random_tensor(&[2, 4, 3, 3], &mut rng, -1.0, 1.0);
        record(&mut results, "efficient last stage", "last_stage", BLOCK_THRESHOLD, check_layer(&mut wrapped, &x, rng.gen())?);
    }

    Ok(results)
}

struct HeadAsLayer(EfficientLastStage<f64>);

impl Layer<f64> for HeadAsLayer {
    fn forward(&mut self, x: &Tensor<f64>, mode: Mode) -> Result<Tensor<f64>> {
        self.0.forward(x, mode)
    }

    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.0.backward(g)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<crate::nn::ParamRef<'a, f64>>) {
        self.0.head.collect_params(prefix, out);
        self.0.hidden.collect_params(prefix, out);
        self.0.classifier.collect_params(prefix, out);
    }
}
