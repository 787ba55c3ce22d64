use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Output extent of a sliding window along one axis.
fn window_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new<T: Element>(
        op: &'static str,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4(op)?;
        let (cout, kcin, kh, kw) = match kernel.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::dim(
                    op,
                    format!("kernel must be rank-4, got {:?}", kernel.shape()),
                ))
            }
        };
        if depthwise {
            if kcin != 1 || cout != cin {
                return Err(Error::dim(
                    op,
                    format!(
                        "depthwise kernel must be [C={cin},1,kh,kw], got {:?}",
                        kernel.shape()
                    ),
                ));
            }
        } else if kcin != cin {
            return Err(Error::dim(
                op,
                format!("input channel axis (dim 1) is {cin} but kernel axis 1 is {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim(op, "stride must be at least 1"));
        }
        let ho = window_out(h, kh, stride, padding).ok_or_else(|| {
            Error::dim(
                op,
                format!("kernel height {kh} exceeds padded input height {}", h + 2 * padding),
            )
        })?;
        let wo = window_out(w, kw, stride, padding).ok_or_else(|| {
            Error::dim(
                op,
                format!("kernel width {kw} exceeds padded input width {}", w + 2 * padding),
            )
        })?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            padding,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Source coordinate for output position `o` and kernel tap `k`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Unfolds one sample `[Cin, H, W]` into `[Cin·kh·kw, Ho·Wo]`.
    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let p = self.out_plane();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let sy = Self::src(oy, ky, self.stride, self.padding, self.h);
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match (
                                sy,
                                Self::src(ox, kx, self.stride, self.padding, self.w),
                            ) {
                                (Some(y), Some(xx)) => plane[y * self.w + xx],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters-and-adds columns back onto `[Cin, H, W]`.
    fn col2im<T: Element>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.out_plane();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let Some(y) = Self::src(oy, ky, self.stride, self.padding, self.h) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(xx) = Self::src(ox, kx, self.stride, self.padding, self.w) {
                                plane[y * self.w + xx] = plane[y * self.w + xx] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Element>(op: &'static str, bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::dim(
            op,
            format!("bias shape {:?} does not match [{channels}]", bias.shape()),
        ));
    }
    Ok(())
}

/// 2-D cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]` plus a
/// per-output-channel bias. Zero padding on all four borders.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new("conv2d", input, kernel, stride, padding, false)?;
    check_bias("conv2d", bias, g.cout)?;
    let p = g.out_plane();
    let in_sample = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * p]
    };
    for n in 0..g.n {
        let x = &input.data()[n * in_sample..(n + 1) * in_sample];
        let y = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in y.chunks_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        let rhs = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        T::gemm(g.cout, g.patch_len(), p, kernel.data(), false, rhs, false, T::one(), y);
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out))
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
pub struct ConvGrads<T: Element = f32> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new("conv2d_backward", input, kernel, stride, padding, false)?;
    let p = g.out_plane();
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::dim(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} does not match output [{}, {}, {}, {}]",
                grad_out.shape(),
                g.n,
                g.cout,
                g.ho,
                g.wo
            ),
        ));
    }
    let in_sample = g.cin * g.h * g.w;
    let k = g.patch_len();
    let mut dx = vec![T::zero(); input.len()];
    let mut dw = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![T::zero(); k * p];
    for n in 0..g.n {
        let x = &input.data()[n * in_sample..(n + 1) * in_sample];
        let dy = &grad_out.data()[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in dy.chunks(p).enumerate() {
            db[co] = db[co] + row.iter().copied().sum::<T>();
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(g.cout, p, k, dy, false, cols_ref, true, T::one(), &mut dw);
        // dcols = Wᵀ · dY
        T::gemm(k, g.cout, p, kernel.data(), true, dy, false, T::zero(), &mut dcols);
        let dxn = &mut dx[n * in_sample..(n + 1) * in_sample];
        if g.is_pointwise() {
            dxn.copy_from_slice(&dcols);
        } else {
            g.col2im(&dcols, dxn);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dx),
        kernel: Tensor::from_parts(kernel.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![g.cout], db),
    })
}

/// Per-channel spatial convolution: kernel `[C,1,kh,kw]`, no cross-channel
/// mixing.
pub fn depthwise_conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new("depthwise_conv2d", input, kernel, stride, padding, true)?;
    check_bias("depthwise_conv2d", bias, g.cin)?;
    let (hw, p) = (g.h * g.w, g.out_plane());
    let taps = g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.cin * p];
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &input.data()[(n * g.cin + c) * hw..(n * g.cin + c + 1) * hw];
            let k = &kernel.data()[c * taps..(c + 1) * taps];
            let dst = &mut out[(n * g.cin + c) * p..(n * g.cin + c + 1) * p];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias.data()[c];
                    for ky in 0..g.kh {
                        let Some(y) = ConvGeom::src(oy, ky, g.stride, g.padding, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            if let Some(x) = ConvGeom::src(ox, kx, g.stride, g.padding, g.w) {
                                acc = acc + k[ky * g.kw + kx] * plane[y * g.w + x];
                            }
                        }
                    }
                    dst[oy * g.wo + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.cin, g.ho, g.wo], out))
}

pub fn depthwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new("depthwise_conv2d_backward", input, kernel, stride, padding, true)?;
    if grad_out.shape() != [g.n, g.cin, g.ho, g.wo] {
        return Err(Error::dim(
            "depthwise_conv2d_backward",
            format!("grad_out shape {:?} does not match the forward output", grad_out.shape()),
        ));
    }
    let (hw, p) = (g.h * g.w, g.out_plane());
    let taps = g.kh * g.kw;
    let mut dx = vec![T::zero(); input.len()];
    let mut dw = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); g.cin];
    for n in 0..g.n {
        for c in 0..g.cin {
            let off = (n * g.cin + c) * hw;
            let plane = &input.data()[off..off + hw];
            let dplane = &mut dx[off..off + hw];
            let k = &kernel.data()[c * taps..(c + 1) * taps];
            let dk = &mut dw[c * taps..(c + 1) * taps];
            let dy = &grad_out.data()[(n * g.cin + c) * p..(n * g.cin + c + 1) * p];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let gy = dy[oy * g.wo + ox];
                    db[c] = db[c] + gy;
                    for ky in 0..g.kh {
                        let Some(y) = ConvGeom::src(oy, ky, g.stride, g.padding, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            if let Some(x) = ConvGeom::src(ox, kx, g.stride, g.padding, g.w) {
                                let t = ky * g.kw + kx;
                                dk[t] = dk[t] + gy * plane[y * g.w + x];
                                dplane[y * g.w + x] = dplane[y * g.w + x] + gy * k[t];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dx),
        kernel: Tensor::from_parts(kernel.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![g.cin], db),
    })
}

/// Depthwise convolution followed by a 1×1 pointwise convolution, both
/// without bias.
pub fn depthwise_separable_conv<T: Element>(
    input: &Tensor<T>,
    depthwise_kernel: &Tensor<T>,
    pointwise_kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = input.dims4("depthwise_separable_conv")?;
    match pointwise_kernel.shape()[..] {
        [_, pc, 1, 1] if pc == c => {}
        _ => {
            return Err(Error::dim(
                "depthwise_separable_conv",
                format!(
                    "pointwise kernel {:?} must be [Cout,{c},1,1] to follow {c} depthwise channels",
                    pointwise_kernel.shape()
                ),
            ))
        }
    }
    let dw = depthwise_conv2d(input, depthwise_kernel, &Tensor::zeros(&[c]), stride, padding)?;
    let cout = pointwise_kernel.shape()[0];
    conv2d(&dw, pointwise_kernel, &Tensor::zeros(&[cout]), 1, 0)
}

/// Mean over each `window×window` patch, moved by `stride`, no padding.
pub fn avg_pool2d<T: Element>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("avg_pool2d")?;
    if window == 0 || window > h || window > w {
        return Err(Error::dim(
            "avg_pool2d",
            format!("window {window} exceeds spatial extent {h}x{w}"),
        ));
    }
    if stride == 0 {
        return Err(Error::dim("avg_pool2d", "stride must be at least 1"));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let scale = T::one() / T::of((window * window) as f64);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in input.data().chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for y in oy * stride..oy * stride + window {
                    for x in ox * stride..ox * stride + window {
                        acc = acc + plane[y * w + x];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub fn avg_pool2d_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::dim("avg_pool2d_backward", "input shape must be rank-4")),
    };
    let (gn, gc, ho, wo) = grad_out.dims4("avg_pool2d_backward")?;
    if (gn, gc) != (n, c) || window == 0 || stride == 0 || ho != (h - window) / stride + 1 || wo != (w - window) / stride + 1 {
        return Err(Error::dim(
            "avg_pool2d_backward",
            format!("grad_out {:?} inconsistent with input {input_shape:?}", grad_out.shape()),
        ));
    }
    let scale = T::one() / T::of((window * window) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, dy) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[oy * wo + ox] * scale;
                for y in oy * stride..oy * stride + window {
                    for x in ox * stride..ox * stride + window {
                        plane[y * w + x] = plane[y * w + x] + g;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// `[N,C,H,W] -> [N,C]`, mean over every spatial position.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let scale = T::of((h * w) as f64);
    let out = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / scale)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::dim("global_avg_pool_backward", "input shape must be rank-4")),
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::dim(
            "global_avg_pool_backward",
            format!("grad_out {:?} does not match [{n}, {c}]", grad_out.shape()),
        ));
    }
    let scale = T::one() / T::of((h * w) as f64);
    let mut dx = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g * scale, h * w));
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Row-wise softmax of `[N, C]` logits, max-subtracted.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2("softmax")?;
    if c < 2 {
        return Err(Error::dim("softmax", format!("need at least 2 classes, got {c}")));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// `[N, F] · [C, F]ᵀ + bias[C]`.
pub fn linear<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = input.dims2("linear")?;
    let (c, wf) = weight.dims2("linear")?;
    if wf != f {
        return Err(Error::dim(
            "linear",
            format!("input feature axis (dim 1) is {f} but weight axis 1 is {wf}"),
        ));
    }
    check_bias("linear", bias, c)?;
    let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(n, f, c, input.data(), false, weight.data(), true, T::one(), &mut out);
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub struct LinearGrads<T: Element = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, f) = input.dims2("linear_backward")?;
    let (c, _) = weight.dims2("linear_backward")?;
    if grad_out.shape() != [n, c] {
        return Err(Error::dim(
            "linear_backward",
            format!("grad_out {:?} does not match [{n}, {c}]", grad_out.shape()),
        ));
    }
    let mut dx = vec![T::zero(); n * f];
    T::gemm(n, c, f, grad_out.data(), false, weight.data(), false, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); c * f];
    T::gemm(c, n, f, grad_out.data(), true, input.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); c];
    for row in grad_out.data().chunks(c) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_parts(vec![n, f], dx),
        weight: Tensor::from_parts(vec![c, f], dw),
        bias: Tensor::from_parts(vec![c], db),
    })
}

/// Concatenates two `[N,·,H,W]` tensors along the channel axis.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::dim(
            "concat_channels",
            format!("cannot concatenate {:?} with {:?}", a.shape(), b.shape()),
        ));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Ok(Tensor::from_parts(vec![n, ca + cb, h, w], out))
}

/// Inverse of [`concat_channels`]: the first `split` channels and the rest.
pub fn split_channels<T: Element>(x: &Tensor<T>, split: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4("split_channels")?;
    if split == 0 || split >= c {
        return Err(Error::dim(
            "split_channels",
            format!("split point {split} must lie strictly inside 0..{c}"),
        ));
    }
    let hw = h * w;
    let mut a = Vec::with_capacity(n * split * hw);
    let mut b = Vec::with_capacity(n * (c - split) * hw);
    for sample in x.data().chunks(c * hw) {
        a.extend_from_slice(&sample[..split * hw]);
        b.extend_from_slice(&sample[split * hw..]);
    }
    Ok((
        Tensor::from_parts(vec![n, split, h, w], a),
        Tensor::from_parts(vec![n, c - split, h, w], b),
    ))
}

pub fn add_assign<T: Element>(acc: &mut Tensor<T>, other: &Tensor<T>) -> Result<()> {
    if acc.shape() != other.shape() {
        return Err(Error::dim(
            "add",
            format!("shapes {:?} and {:?} differ", acc.shape(), other.shape()),
        ));
    }
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a = *a + b;
    }
    Ok(())
}
