//! Dense, grouped and depthwise 2-D convolution (cross-correlation, no kernel
//! flip). Dense and grouped convolutions lower to im2col + GEMM per group;
//! depthwise convolution uses a direct loop.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvParams {
    /// Square kernel with "same"-style padding `(k - 1) / 2`.
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding: (kernel - 1) / 2,
            groups: 1,
            in_channels,
            out_channels,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            groups: channels,
            ..Self::square(channels, channels, kernel, stride)
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::square(in_channels, out_channels, 1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self;
        if p.kernel_h == 0 || p.kernel_w == 0 || p.stride == 0 || p.groups == 0 {
            return Err(Error::Config(format!(
                "conv kernel, stride and groups must be positive: {p:?}"
            )));
        }
        if p.in_channels == 0 || p.out_channels == 0 {
            return Err(Error::Config(format!("conv channels must be positive: {p:?}")));
        }
        if !p.in_channels.is_multiple_of(p.groups) || !p.out_channels.is_multiple_of(p.groups) {
            return Err(Error::Config(format!(
                "conv groups {} must divide in_channels {} and out_channels {}",
                p.groups, p.in_channels, p.out_channels
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    /// Output spatial size for an `h × w` input, or `None` if the kernel does
    /// not fit in the padded input.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    fn patch_len(&self) -> usize {
        self.in_channels / self.groups * self.kernel_h * self.kernel_w
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn check_operands<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: &ConvParams,
) -> Result<Geometry> {
    p.validate()?;
    let [n, c, h, w] = input.dims4("conv2d")?;
    if c != p.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input channel dim is {c}, params expect in_channels {}", p.in_channels),
        ));
    }
    let expected = p.weight_dims();
    if weight.dims() != expected {
        let names = ["out_channels", "in_channels/groups", "kernel_h", "kernel_w"];
        let detail = match weight.dims4("conv2d weight") {
            Ok(d) => {
                let i = (0..4).find(|&i| d[i] != expected[i]).unwrap_or(0);
                format!(
                    "weight dim {i} ({}) is {}, expected {}",
                    names[i], d[i], expected[i]
                )
            }
            Err(_) => format!("weight dims {:?}, expected {expected:?}", weight.dims()),
        };
        return Err(Error::shape("conv2d", detail));
    }
    if let Some(b) = bias {
        if b.dims() != [p.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias dims {:?}, expected [{}]", b.dims(), p.out_channels),
            ));
        }
    }
    let (ho, wo) = p.output_hw(h, w).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!(
                "spatial input {h}x{w} (padding {}) smaller than kernel {}x{}",
                p.padding, p.kernel_h, p.kernel_w
            ),
        )
    })?;
    Ok(Geometry { n, h, w, ho, wo })
}

/// Unfold one group's input planes into a `[cin_g·kh·kw, ho·wo]` matrix.
fn im2col<T: Scalar>(src: &[T], cin: usize, g: &Geometry, p: &ConvParams, cols: &mut [T]) {
    let (kh, kw, s, pad) = (p.kernel_h, p.kernel_w, p.stride, p.padding as isize);
    let area = g.ho * g.wo;
    for ci in 0..cin {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * area;
                let dst = &mut cols[row..row + area];
                for oh in 0..g.ho {
                    let ih = (oh * s) as isize - pad + ki as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * s) as isize - pad + kj as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], cin: usize, g: &Geometry, p: &ConvParams, dst: &mut [T]) {
    let (kh, kw, s, pad) = (p.kernel_h, p.kernel_w, p.stride, p.padding as isize);
    let area = g.ho * g.wo;
    for ci in 0..cin {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * area;
                let src = &cols[row..row + area];
                for oh in 0..g.ho {
                    let ih = (oh * s) as isize - pad + ki as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * s) as isize - pad + kj as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst_row[iw as usize] = dst_row[iw as usize] + src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn is_plain_pointwise(p: &ConvParams) -> bool {
    p.kernel_h == 1 && p.kernel_w == 1 && p.stride == 1 && p.padding == 0
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: &ConvParams,
) -> Result<Tensor<T>> {
    let g = check_operands(input, weight, bias, params)?;
    input.ensure_finite("conv2d")?;
    let p = params;
    let cout = p.out_channels;
    let mut out = vec![T::zero(); g.n * cout * g.ho * g.wo];

    if p.is_depthwise() {
        depthwise_forward(input.data(), weight.data(), &g, p, &mut out);
    } else {
        let cin_g = p.in_channels / p.groups;
        let cout_g = cout / p.groups;
        let patch = p.patch_len();
        let area = g.ho * g.wo;
        let mut cols = vec![T::zero(); if is_plain_pointwise(p) { 0 } else { patch * area }];
        for b in 0..g.n {
            for grp in 0..p.groups {
                let in_off = (b * p.in_channels + grp * cin_g) * g.h * g.w;
                let src = &input.data()[in_off..in_off + cin_g * g.h * g.w];
                let lhs = &weight.data()[grp * cout_g * patch..(grp + 1) * cout_g * patch];
                let out_off = (b * cout + grp * cout_g) * area;
                let dst = &mut out[out_off..out_off + cout_g * area];
                if is_plain_pointwise(p) {
                    matmul(cout_g, patch, area, lhs, false, src, false, T::zero(), dst);
                } else {
                    im2col(src, cin_g, &g, p, &mut cols);
                    matmul(cout_g, patch, area, lhs, false, &cols, false, T::zero(), dst);
                }
            }
        }
    }

    if let Some(bias) = bias {
        let area = g.ho * g.wo;
        for (i, chunk) in out.chunks_mut(area).enumerate() {
            let bv = bias.data()[i % cout];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    let out = Tensor::new(&[g.n, cout, g.ho, g.wo], out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

fn depthwise_forward<T: Scalar>(x: &[T], wt: &[T], g: &Geometry, p: &ConvParams, out: &mut [T]) {
    let c = p.in_channels;
    let (kh, kw, s, pad) = (p.kernel_h, p.kernel_w, p.stride, p.padding as isize);
    for b in 0..g.n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * g.h * g.w..(b * c + ch + 1) * g.h * g.w];
            let k = &wt[ch * kh * kw..(ch + 1) * kh * kw];
            let dst = &mut out[(b * c + ch) * g.ho * g.wo..(b * c + ch + 1) * g.ho * g.wo];
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let mut acc = T::zero();
                    for ki in 0..kh {
                        let ih = (oh * s) as isize - pad + ki as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for kj in 0..kw {
                            let iw = (ow * s) as isize - pad + kj as isize;
                            if iw >= 0 && iw < g.w as isize {
                                acc = acc + row[iw as usize] * k[ki * kw + kj];
                            }
                        }
                    }
                    dst[oh * g.wo + ow] = acc;
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    g: &Geometry,
    p: &ConvParams,
    gin: &mut [T],
    gw: &mut [T],
) {
    let c = p.in_channels;
    let (kh, kw, s, pad) = (p.kernel_h, p.kernel_w, p.stride, p.padding as isize);
    for b in 0..g.n {
        for ch in 0..c {
            let base = (b * c + ch) * g.h * g.w;
            let plane = &x[base..base + g.h * g.w];
            let gplane = &mut gin[base..base + g.h * g.w];
            let k = &wt[ch * kh * kw..(ch + 1) * kh * kw];
            let gk = &mut gw[ch * kh * kw..(ch + 1) * kh * kw];
            let go = &gout[(b * c + ch) * g.ho * g.wo..(b * c + ch + 1) * g.ho * g.wo];
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let gv = go[oh * g.wo + ow];
                    if gv == T::zero() {
                        continue;
                    }
                    for ki in 0..kh {
                        let ih = (oh * s) as isize - pad + ki as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for kj in 0..kw {
                            let iw = (ow * s) as isize - pad + kj as isize;
                            if iw >= 0 && iw < g.w as isize {
                                let idx = ih * g.w + iw as usize;
                                gk[ki * kw + kj] = gk[ki * kw + kj] + gv * plane[idx];
                                gplane[idx] = gplane[idx] + gv * k[ki * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of a convolution with respect to its input, weight and bias,
/// given the operands saved from the forward pass.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    params: &ConvParams,
) -> Result<ConvGrads<T>> {
    let g = check_operands(input, weight, None, params)?;
    let p = params;
    let cout = p.out_channels;
    let area = g.ho * g.wo;
    if grad_out.dims() != [g.n, cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out dims {:?}, forward produced {:?}",
                grad_out.dims(),
                [g.n, cout, g.ho, g.wo]
            ),
        ));
    }
    grad_out.ensure_finite("conv2d_backward")?;
    let mut gin = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); weight.numel()];

    if p.is_depthwise() {
        depthwise_backward(
            input.data(),
            weight.data(),
            grad_out.data(),
            &g,
            p,
            &mut gin,
            &mut gw,
        );
    } else {
        let cin_g = p.in_channels / p.groups;
        let cout_g = cout / p.groups;
        let patch = p.patch_len();
        let pointwise = is_plain_pointwise(p);
        let mut cols = vec![T::zero(); if pointwise { 0 } else { patch * area }];
        let mut gcols = vec![T::zero(); if pointwise { 0 } else { patch * area }];
        for b in 0..g.n {
            for grp in 0..p.groups {
                let in_off = (b * p.in_channels + grp * cin_g) * g.h * g.w;
                let in_len = cin_g * g.h * g.w;
                let src = &input.data()[in_off..in_off + in_len];
                let w_rng = grp * cout_g * patch..(grp + 1) * cout_g * patch;
                let out_off = (b * cout + grp * cout_g) * area;
                let go = &grad_out.data()[out_off..out_off + cout_g * area];
                if pointwise {
                    matmul(cout_g, area, patch, go, false, src, true, T::one(), &mut gw[w_rng.clone()]);
                    let lhs = &weight.data()[w_rng];
                    matmul(patch, cout_g, area, lhs, true, go, false, T::one(), &mut gin[in_off..in_off + in_len]);
                } else {
                    im2col(src, cin_g, &g, p, &mut cols);
                    matmul(cout_g, area, patch, go, false, &cols, true, T::one(), &mut gw[w_rng.clone()]);
                    let lhs = &weight.data()[w_rng];
                    matmul(patch, cout_g, area, lhs, true, go, false, T::zero(), &mut gcols);
                    col2im(&gcols, cin_g, &g, p, &mut gin[in_off..in_off + in_len]);
                }
            }
        }
    }

    let mut gb = vec![T::zero(); cout];
    for (i, chunk) in grad_out.data().chunks(area).enumerate() {
        gb[i % cout] = gb[i % cout] + chunk.iter().copied().sum::<T>();
    }

    Ok(ConvGrads {
        input: Tensor::new(input.dims(), gin)?,
        weight: Tensor::new(weight.dims(), gw)?,
        bias: Tensor::new(&[cout], gb)?,
    })
}
