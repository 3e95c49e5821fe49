use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel affine parameters and running statistics of a batch
/// normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Tensor::full(&[channels], T::one());
        let mut beta = Tensor::zeros(&[channels]);
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
        Self {
            gamma,
            beta,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            epsilon: T::lit(BN_EPSILON),
            momentum: T::lit(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    mode: Mode,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    dims: [usize; 4],
}

pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = x.dims4("batch_norm")?;
    if c != state.channels() {
        return Err(Error::shape(
            "batch_norm",
            format!("input has {c} channels, state has {}", state.channels()),
        ));
    }
    x.ensure_finite("batch_norm")?;
    let area = h * w;
    let count = n * area;
    let mut inv_std = vec![T::zero(); c];
    let mut mean = vec![T::zero(); c];

    match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::shape(
                    "batch_norm",
                    format!("train mode needs N·H·W ≥ 2 per channel, got {count}"),
                ));
            }
            let m = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut sum = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * area;
                    sum = sum + x.data()[off..off + area].iter().copied().sum::<T>();
                }
                let mu = sum / m;
                let mut sq = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * area;
                    for &v in &x.data()[off..off + area] {
                        sq = sq + (v - mu) * (v - mu);
                    }
                }
                let var = sq / m;
                mean[ch] = mu;
                inv_std[ch] = T::one() / (var + state.epsilon).sqrt();
                let unbiased = sq / (m - T::one());
                let mom = state.momentum;
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mu;
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * unbiased;
            }
        }
        Mode::Eval => {
            for ch in 0..c {
                mean[ch] = state.running_mean.data()[ch];
                inv_std[ch] = T::one() / (state.running_var.data()[ch] + state.epsilon).sqrt();
            }
        }
    }

    let mut x_hat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    for (i, (xv, (xh, o))) in x
        .data()
        .chunks(area)
        .zip(x_hat.chunks_mut(area).zip(out.chunks_mut(area)))
        .enumerate()
    {
        let ch = i % c;
        let (mu, is) = (mean[ch], inv_std[ch]);
        let (g, bt) = (state.gamma.data()[ch], state.beta.data()[ch]);
        for ((&v, xh), o) in xv.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
            *xh = (v - mu) * is;
            *o = g * *xh + bt;
        }
    }
    let out = Tensor::new(x.dims(), out)?;
    out.ensure_finite("batch_norm")?;
    Ok((
        out,
        BatchNormCache {
            mode,
            x_hat,
            inv_std,
            dims: [n, c, h, w],
        },
    ))
}

/// Returns the input gradient and accumulates `gamma`/`beta` gradients
/// into `state`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    state: &mut BatchNormState<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = cache.dims;
    if grad_out.dims() != cache.dims {
        return Err(Error::shape(
            "batch_norm_backward",
            format!("grad_out {:?} vs forward {:?}", grad_out.dims(), cache.dims),
        ));
    }
    let area = h * w;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (g, xh)) in grad_out
        .data()
        .chunks(area)
        .zip(cache.x_hat.chunks(area))
        .enumerate()
    {
        let ch = i % c;
        for (&gv, &xv) in g.iter().zip(xh) {
            dgamma[ch] = dgamma[ch] + gv * xv;
            dbeta[ch] = dbeta[ch] + gv;
        }
    }

    let mut dx = vec![T::zero(); grad_out.numel()];
    let m = T::from_usize(n * area).unwrap();
    for (i, ((g, xh), d)) in grad_out
        .data()
        .chunks(area)
        .zip(cache.x_hat.chunks(area))
        .zip(dx.chunks_mut(area))
        .enumerate()
    {
        let ch = i % c;
        let scale = state.gamma.data()[ch] * cache.inv_std[ch];
        match cache.mode {
            Mode::Eval => {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv = gv * scale;
                }
            }
            Mode::Train => {
                // dx = γ·σ⁻¹/M · (M·g − Σg − x̂·Σ(g·x̂))
                let (sg, sgx) = (dbeta[ch], dgamma[ch]);
                for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xh) {
                    *dv = scale / m * (m * gv - sg - xv * sgx);
                }
            }
        }
    }

    for (acc, v) in state.gamma.grad_mut().iter_mut().zip(&dgamma) {
        *acc = *acc + *v;
    }
    for (acc, v) in state.beta.grad_mut().iter_mut().zip(&dbeta) {
        *acc = *acc + *v;
    }
    Tensor::new(&[n, c, h, w], dx)
}
