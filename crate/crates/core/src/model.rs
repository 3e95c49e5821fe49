//! Executable networks materialized from an [`ArchSpec`].

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchSpec, LayerOp};
use crate::blocks::{Bneck, BneckSpec, ResBottleneck};
use crate::error::{Error, Result};
use crate::nn::{Act, ConvUnit, Dense, GlobalAvgPool, Layer, MaxPool, ParamKind, ParamRef};
use crate::ops::{Activation, ConvParams, MaxPoolParams, Mode};
use crate::tensor::{Scalar, Tensor};

pub enum Node<T> {
    Conv(ConvUnit<T>),
    Bneck(Bneck<T>),
    Pool(GlobalAvgPool),
    MaxPool(MaxPool),
    Dense(Dense<T>, Option<Act<T>>),
    Bottleneck(ResBottleneck<T>),
}

impl<T: Scalar> Layer<T> for Node<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Node::Conv(l) => l.forward(x, mode),
            Node::Bneck(l) => l.forward(x, mode),
            Node::Pool(l) => l.forward(x, mode),
            Node::MaxPool(l) => l.forward(x, mode),
            Node::Dense(l, act) => {
                let y = l.forward(x, mode)?;
                match act {
                    Some(a) => a.forward(&y, mode),
                    None => Ok(y),
                }
            }
            Node::Bottleneck(l) => l.forward(x, mode),
        }
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Node::Conv(l) => l.backward(g),
            Node::Bneck(l) => l.backward(g),
            Node::Pool(l) => Layer::<T>::backward(l, g),
            Node::MaxPool(l) => Layer::<T>::backward(l, g),
            Node::Dense(l, act) => match act {
                Some(a) => {
                    let g = a.backward(g)?;
                    l.backward(&g)
                }
                None => l.backward(g),
            },
            Node::Bottleneck(l) => l.backward(g),
        }
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        match self {
            Node::Conv(l) => l.collect_params(prefix, out),
            Node::Bneck(l) => l.collect_params(prefix, out),
            Node::Pool(_) | Node::MaxPool(_) => {}
            Node::Dense(l, _) => l.collect_params(prefix, out),
            Node::Bottleneck(l) => l.collect_params(prefix, out),
        }
    }
}

pub struct Model<T> {
    spec: ArchSpec,
    nodes: Vec<Node<T>>,
}

/// Materialize `spec` with fan-in scaled Gaussian weights, zero biases and
/// identity batch norm. Deterministic for a given seed.
pub fn build_model<T: Scalar>(spec: &ArchSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    if spec.layers.is_empty() {
        return Err(Error::Arch {
            location: "layers".to_string(),
            detail: "cannot build a model with no layers".to_string(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = spec.in_channels;
    let mut nodes = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let act = l.nl.activation();
        let node = match l.op {
            LayerOp::Conv2d => Node::Conv(ConvUnit::new(
                ConvParams::square(channels, l.out, l.kernel, l.stride),
                l.bn,
                act,
                &mut rng,
            )?),
            LayerOp::Dwconv => Node::Conv(ConvUnit::new(
                ConvParams::depthwise(channels, l.kernel, l.stride),
                l.bn,
                act,
                &mut rng,
            )?),
            LayerOp::Bneck => Node::Bneck(Bneck::new(
                BneckSpec {
                    in_channels: channels,
                    exp_channels: l.exp.expect("validated"),
                    out_channels: l.out,
                    kernel: l.kernel,
                    stride: l.stride,
                    use_se: l.se,
                    nonlinearity: act.unwrap_or(Activation::Relu),
                },
                &mut rng,
            )?),
            LayerOp::Pool => Node::Pool(GlobalAvgPool::default()),
            LayerOp::Maxpool => Node::MaxPool(MaxPool::new(MaxPoolParams {
                kernel: l.kernel,
                stride: l.stride,
            })),
            // dense input width depends on the spatial extent; resolved at
            // the nominal input resolution
            LayerOp::Dense => {
                let features = dense_input_features(spec, nodes.len())?;
                Node::Dense(Dense::new(features, l.out, &mut rng), act.map(Act::new))
            }
            LayerOp::Bottleneck => Node::Bottleneck(ResBottleneck::new(
                channels,
                l.exp.expect("validated"),
                l.out,
                l.stride,
                &mut rng,
            )?),
        };
        nodes.push(node);
        channels = l.out;
    }
    Ok(Model {
        spec: spec.clone(),
        nodes,
    })
}

fn dense_input_features(spec: &ArchSpec, index: usize) -> Result<usize> {
    let shapes = crate::cost::trace_shapes(spec, (spec.input_resolution, spec.input_resolution))?;
    let [c, h, w] = if index == 0 {
        [spec.in_channels, spec.input_resolution, spec.input_resolution]
    } else {
        shapes[index - 1]
    };
    Ok(c * h * w)
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    /// Logits `[N, num_classes]` for an `N, C, H, W` batch.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, _, _] = x.dims4("model")?;
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "model",
                format!("input has {c} channels, network expects {}", self.spec.in_channels),
            ));
        }
        let mut y = self.nodes[0].forward(x, mode)?;
        for node in &mut self.nodes[1..] {
            y = node.forward(&y, mode)?;
        }
        if y.numel() != n * self.spec.num_classes {
            return Err(Error::shape(
                "model",
                format!(
                    "network output {:?} does not reduce to [{n}, {}]",
                    y.dims(),
                    self.spec.num_classes
                ),
            ));
        }
        y.reshape(&[n, self.spec.num_classes])
    }

    /// Output shape `[C, H, W]` of every layer for an input of `h × w`.
    pub fn trace(&mut self, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
        let mut y = Tensor::<T>::zeros(&[1, self.spec.in_channels, h, w]);
        let mut shapes = Vec::with_capacity(self.nodes.len());
        for node in &mut self.nodes {
            y = node.forward(&y, Mode::Eval)?;
            let d = y.dims();
            shapes.push(if d.len() == 4 { [d[1], d[2], d[3]] } else { [d[1], 1, 1] });
        }
        Ok(shapes)
    }

    /// Backpropagate `dL/dlogits`, accumulating parameter gradients.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, k] = grad_logits.dims2("model backward")?;
        let mut g = grad_logits.clone().reshape(&[n, k, 1, 1])?;
        for node in self.nodes.iter_mut().rev() {
            g = node.backward(&g)?;
        }
        Ok(g)
    }

    /// Every parameter and running statistic, in a stable order with
    /// stable names.
    pub fn params(&mut self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.collect_params(&format!("layer{i:02}"), &mut out);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params() {
            p.tensor.zero_grad();
        }
    }

    /// Trainable scalar count (weights, biases, batch-norm affine).
    pub fn parameter_count(&mut self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Hash over names, shapes and exact bit patterns of every stored
    /// tensor, running statistics included.
    pub fn state_hash(&mut self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params() {
            p.name.hash(&mut h);
            p.tensor.dims().hash(&mut h);
            for v in p.tensor.data() {
                v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn weight_kinds(&mut self) -> Vec<(String, ParamKind)> {
        self.params().into_iter().map(|p| (p.name, p.kind)).collect()
    }
}
