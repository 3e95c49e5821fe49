//! Stateful layers: parameters plus the forward cache their backward pass
//! consumes. Backward accumulates parameter gradients in place and returns
//! the gradient with respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, Activation, BatchNormCache, BatchNormState, ConvParams, MaxPoolParams, Mode};
use crate::tensor::{Scalar, Tensor};

/// How the optimizer and the checkpoint treat a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or dense weight; receives weight decay.
    Weight,
    Bias,
    /// Batch-norm gamma/beta.
    Affine,
    /// Batch-norm running statistics; never touched by the optimizer.
    RunningStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::RunningStat
    }
}

pub struct ParamRef<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor<T>,
}

pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gaussian with std `sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar, R: Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut t = Tensor::from_fn(dims, |_| T::lit(normal.sample(rng)));
    t.set_requires_grad(true);
    t
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

pub struct Conv2d<T> {
    pub params: ConvParams,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(params: ConvParams, with_bias: bool, rng: &mut R) -> Result<Self> {
        params.validate()?;
        let dims = params.weight_dims();
        let fan_in = dims[1] * dims[2] * dims[3];
        let bias = with_bias.then(|| {
            let mut b = Tensor::zeros(&[params.out_channels]);
            b.set_requires_grad(true);
            b
        });
        Ok(Self {
            params,
            weight: he_normal(&dims, fan_in, rng),
            bias,
            input: None,
        })
    }

    /// Spatial size of the most recent training-mode input.
    pub fn last_input_dims(&self) -> Option<&[usize]> {
        self.input.as_ref().map(|t| t.dims())
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::conv2d_forward(x, &self.weight, self.bias.as_ref(), &self.params)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self
            .input
            .take()
            .ok_or(Error::NoForwardCache { op: "conv2d" })?;
        let grads = ops::conv2d_backward(grad_out, &input, &self.weight, &self.params)?;
        add_into(self.weight.grad_mut(), grads.weight.data());
        if let Some(b) = self.bias.as_mut() {
            add_into(b.grad_mut(), grads.bias.data());
        }
        Ok(grads.input)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            kind: ParamKind::Weight,
            tensor: &mut self.weight,
        });
        if let Some(b) = self.bias.as_mut() {
            out.push(ParamRef {
                name: join(prefix, "bias"),
                kind: ParamKind::Bias,
                tensor: b,
            });
        }
    }
}

pub struct BatchNorm2d<T> {
    pub state: BatchNormState<T>,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            state: BatchNormState::new(channels),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, cache) = ops::batch_norm_forward(x, &mut self.state, mode)?;
        self.cache = (mode == Mode::Train).then_some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or(Error::NoForwardCache { op: "batch_norm" })?;
        ops::batch_norm_backward(grad_out, &cache, &mut self.state)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let s = &mut self.state;
        out.push(ParamRef {
            name: join(prefix, "gamma"),
            kind: ParamKind::Affine,
            tensor: &mut s.gamma,
        });
        out.push(ParamRef {
            name: join(prefix, "beta"),
            kind: ParamKind::Affine,
            tensor: &mut s.beta,
        });
        out.push(ParamRef {
            name: join(prefix, "running_mean"),
            kind: ParamKind::RunningStat,
            tensor: &mut s.running_mean,
        });
        out.push(ParamRef {
            name: join(prefix, "running_var"),
            kind: ParamKind::RunningStat,
            tensor: &mut s.running_var,
        });
    }
}

pub struct Act<T> {
    pub kind: Activation,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Act<T> {
    pub fn new(kind: Activation) -> Self {
        Self { kind, input: None }
    }
}

impl<T: Scalar> Layer<T> for Act<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::activation_forward(x, self.kind)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or(Error::NoForwardCache { op: self.kind.name() })?;
        ops::activation_backward(grad_out, &x, self.kind)
    }

    fn collect_params<'a>(&'a mut self, _: &str, _: &mut Vec<ParamRef<'a, T>>) {}
}

/// Fully connected layer on `[N, D]` inputs. Rank-4 inputs are flattened
/// to `[N, C·H·W]` and the output is returned as `[N, K, 1, 1]`.
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    input: Option<(Tensor<T>, Vec<usize>)>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let mut bias = Tensor::zeros(&[out_features]);
        bias.set_requires_grad(true);
        Self {
            weight: he_normal(&[in_features, out_features], in_features, rng),
            bias,
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[1]
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let orig = x.dims().to_vec();
        let n = orig[0];
        let flat = x.clone().reshape(&[n, x.numel() / n])?;
        let y = ops::dense_forward(&flat, &self.weight, &self.bias)?;
        self.input = (mode == Mode::Train).then(|| (flat, orig.clone()));
        if orig.len() == 4 {
            y.reshape(&[n, self.out_features(), 1, 1])
        } else {
            Ok(y)
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (flat, orig) = self
            .input
            .take()
            .ok_or(Error::NoForwardCache { op: "dense" })?;
        let n = orig[0];
        let g = grad_out.clone().reshape(&[n, grad_out.numel() / n])?;
        let grads = ops::dense_backward(&g, &flat, &self.weight)?;
        add_into(self.weight.grad_mut(), grads.weight.data());
        add_into(self.bias.grad_mut(), grads.bias.data());
        grads.input.reshape(&orig)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            kind: ParamKind::Weight,
            tensor: &mut self.weight,
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            kind: ParamKind::Bias,
            tensor: &mut self.bias,
        });
    }
}

#[derive(Default)]
pub struct GlobalAvgPool {
    input_dims: Option<[usize; 4]>,
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::global_avg_pool(x)?;
        self.input_dims = (mode == Mode::Train).then(|| x.dims4("global_avg_pool").unwrap());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self
            .input_dims
            .take()
            .ok_or(Error::NoForwardCache { op: "global_avg_pool" })?;
        ops::global_avg_pool_backward(grad_out, dims)
    }

    fn collect_params<'a>(&'a mut self, _: &str, _: &mut Vec<ParamRef<'a, T>>) {}
}

pub struct MaxPool {
    pub params: MaxPoolParams,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool {
    pub fn new(params: MaxPoolParams) -> Self {
        Self { params, cache: None }
    }
}

impl<T: Scalar> Layer<T> for MaxPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, arg) = ops::max_pool_forward(x, self.params)?;
        self.cache = (mode == Mode::Train).then(|| (arg, x.dims4("max_pool").unwrap()));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, dims) = self
            .cache
            .take()
            .ok_or(Error::NoForwardCache { op: "max_pool" })?;
        ops::max_pool_backward(grad_out, &arg, dims)
    }

    fn collect_params<'a>(&'a mut self, _: &str, _: &mut Vec<ParamRef<'a, T>>) {}
}

/// Convolution followed by optional batch norm and optional activation.
pub struct ConvUnit<T> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm2d<T>>,
    pub act: Option<Act<T>>,
}

impl<T: Scalar> ConvUnit<T> {
    /// Convolutions followed by batch norm carry no bias.
    pub fn new<R: Rng>(
        params: ConvParams,
        batch_norm: bool,
        act: Option<Activation>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(params, !batch_norm, rng)?,
            bn: batch_norm.then(|| BatchNorm2d::new(params.out_channels)),
            act: act.map(Act::new),
        })
    }
}

impl<T: Scalar> Layer<T> for ConvUnit<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.conv.forward(x, mode)?;
        if let Some(bn) = self.bn.as_mut() {
            y = bn.forward(&y, mode)?;
        }
        if let Some(act) = self.act.as_mut() {
            y = act.forward(&y, mode)?;
        }
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = match self.act.as_mut() {
            Some(act) => act.backward(grad_out)?,
            None => grad_out.clone(),
        };
        if let Some(bn) = self.bn.as_mut() {
            g = bn.backward(&g)?;
        }
        self.conv.backward(&g)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.collect_params(&join(prefix, "conv"), out);
        if let Some(bn) = self.bn.as_mut() {
            bn.collect_params(&join(prefix, "bn"), out);
        }
    }
}
