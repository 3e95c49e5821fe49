use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

fn check<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<[usize; 3]> {
    let [n, d] = x.dims2("dense")?;
    let [wd, k] = weight.dims2("dense weight")?;
    if wd != d {
        return Err(Error::shape(
            "dense",
            format!("input feature dim is {d}, weight rows are {wd}"),
        ));
    }
    if bias.dims() != [k] {
        return Err(Error::shape(
            "dense",
            format!("bias dims {:?}, expected [{k}]", bias.dims()),
        ));
    }
    Ok([n, d, k])
}

/// `y = x·W + b` with `x: [N, D]`, `W: [D, K]`, `b: [K]`.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, d, k] = check(x, weight, bias)?;
    x.ensure_finite("dense")?;
    let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    matmul(n, d, k, x.data(), false, weight.data(), false, T::one(), &mut out);
    let out = Tensor::new(&[n, k], out)?;
    out.ensure_finite("dense")?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let [n, d] = x.dims2("dense_backward")?;
    let [_, k] = weight.dims2("dense_backward weight")?;
    if grad_out.dims() != [n, k] {
        return Err(Error::shape(
            "dense_backward",
            format!("grad_out {:?}, expected {:?}", grad_out.dims(), [n, k]),
        ));
    }
    let mut gx = vec![T::zero(); n * d];
    matmul(n, k, d, grad_out.data(), false, weight.data(), true, T::zero(), &mut gx);
    let mut gw = vec![T::zero(); d * k];
    matmul(d, n, k, x.data(), true, grad_out.data(), false, T::zero(), &mut gw);
    let mut gb = vec![T::zero(); k];
    for row in grad_out.data().chunks(k) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(&[n, d], gx)?,
        weight: Tensor::new(&[d, k], gw)?,
        bias: Tensor::new(&[k], gb)?,
    })
}
