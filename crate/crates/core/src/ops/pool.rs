use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean over the spatial extent of every channel; any `H × W` is accepted.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("global_avg_pool")?;
    let area = T::from_usize(h * w).unwrap();
    let data = x
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / area)
        .collect();
    Tensor::new(&[n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_dims: [usize; 4],
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_dims;
    if grad_out.dims() != [n, c, 1, 1] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("grad_out {:?}, expected {:?}", grad_out.dims(), [n, c, 1, 1]),
        ));
    }
    let area = T::from_usize(h * w).unwrap();
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g / area, h * w));
    }
    Tensor::new(&input_dims, out)
}

/// Local max pooling with square window and padding `(k - 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPoolParams {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPoolParams {
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return None;
        }
        let p = self.padding();
        if h + 2 * p < self.kernel || w + 2 * p < self.kernel {
            return None;
        }
        Some((
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        ))
    }
}

/// Returns the pooled tensor and, per output element, the flat input index
/// that won the max.
pub fn max_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    params: MaxPoolParams,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims4("max_pool")?;
    let (ho, wo) = params.output_hw(h, w).ok_or_else(|| {
        Error::shape(
            "max_pool",
            format!("input {h}x{w} too small for window {}", params.kernel),
        )
    })?;
    x.ensure_finite("max_pool")?;
    let pad = params.padding() as isize;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let plane = &x.data()[base..base + h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..params.kernel {
                    let ih = (oh * params.stride) as isize - pad + ki as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..params.kernel {
                        let iw = (ow * params.stride) as isize - pad + kj as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = ih as usize * w + iw as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(base + best_idx);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub fn max_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_dims: [usize; 4],
) -> Result<Tensor<T>> {
    if grad_out.numel() != argmax.len() {
        return Err(Error::shape(
            "max_pool_backward",
            format!("grad_out has {} values, forward saved {}", grad_out.numel(), argmax.len()),
        ));
    }
    let mut gin = Tensor::zeros(&input_dims);
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        gin.data_mut()[idx] = gin.data_mut()[idx] + g;
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_pools_to_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 5, 6], 1.75);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn mean_of_one_to_49() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 7, 7], |i| (i + 1) as f64);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.data(), &[25.0]);
    }

    #[test]
    fn backward_broadcasts_mean_gradient() {
        let g = Tensor::<f64>::new(&[1, 2, 1, 1], vec![4.0, -8.0]).unwrap();
        let gin = global_avg_pool_backward(&g, [1, 2, 2, 2]).unwrap();
        assert_eq!(gin.data(), &[1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let (y, arg) = max_pool_forward(&x, MaxPoolParams { kernel: 2, stride: 2 }).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let g = max_pool_backward(&Tensor::full(&[1, 1, 2, 2], 1.0), &arg, [1, 1, 4, 4]).unwrap();
        assert_eq!(g.data().iter().sum::<f64>(), 4.0);
        assert_eq!(g.data()[15], 1.0);
    }
}
