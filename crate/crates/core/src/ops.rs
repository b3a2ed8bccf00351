//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure. Backward functions take the forward inputs
//! plus the upstream gradient and return gradients in input order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Marker stored in label tensors for pixels without ground truth.
pub const UNLABELED_F64: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

impl ConvParams {
    pub fn dilated(dilation: usize) -> Self {
        ConvParams {
            stride: 1,
            dilation,
            padding: dilation,
        }
    }

    /// Output extent along one axis, or `None` when the dilated kernel does
    /// not fit inside the padded input.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if kernel == 0 || self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Range of output positions `o` with `o * stride + offset` inside `0..input`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = {
        let last = in_len as isize - 1 - offset;
        if last < 0 {
            0
        } else {
            (last / s + 1).min(out_len as isize)
        }
    };
    let lo = lo.min(out_len as isize) as usize;
    (lo, (hi.max(lo as isize)) as usize)
}

fn conv_geometry(
    input: &Tensor,
    weights: &Tensor,
    params: ConvParams,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let (k, wc, kh, kw) = weights.dims4()?;
    if params.stride == 0 || params.dilation == 0 {
        return Err(Error::invalid("conv2d stride and dilation must be >= 1"));
    }
    if wc != c {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels but weights {:?} expect {wc}",
            weights.shape()
        )));
    }
    let oh = params.output_extent(h, kh).ok_or_else(|| {
        Error::shape(format!(
            "conv2d: height {h} with padding {} is smaller than dilated kernel extent {}",
            params.padding,
            params.dilation * (kh - 1) + 1
        ))
    })?;
    let ow = params.output_extent(w, kw).ok_or_else(|| {
        Error::shape(format!(
            "conv2d: width {w} with padding {} is smaller than dilated kernel extent {}",
            params.padding,
            params.dilation * (kw - 1) + 1
        ))
    })?;
    Ok((n, c, h, w, k, kh, kw, oh, ow))
}

pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, params: ConvParams) -> Result<Tensor> {
    let (n, c, h, w, k, kh, kw, oh, ow) = conv_geometry(input, weights, params)?;
    if bias.len() != k {
        return Err(Error::shape(format!(
            "conv2d: bias has {} entries for {k} output channels",
            bias.len()
        )));
    }
    let (x, wt, b) = (input.data(), weights.data(), bias.data());
    let mut out = vec![0.0; n * k * oh * ow];
    let s = params.stride;
    for ni in 0..n {
        for ki in 0..k {
            let o_base = (ni * k + ki) * oh * ow;
            out[o_base..o_base + oh * ow].fill(b[ki]);
            for ci in 0..c {
                let x_base = (ni * c + ci) * h * w;
                for ky in 0..kh {
                    let off_y = (ky * params.dilation) as isize - params.padding as isize;
                    let (y0, y1) = valid_range(oh, h, s, off_y);
                    for kx in 0..kw {
                        let wv = wt[((ki * c + ci) * kh + ky) * kw + kx];
                        let off_x = (kx * params.dilation) as isize - params.padding as isize;
                        let (x0, x1) = valid_range(ow, w, s, off_x);
                        for oy in y0..y1 {
                            let iy = (oy * s) as isize + off_y;
                            let row = x_base + iy as usize * w;
                            let orow = o_base + oy * ow;
                            for ox in x0..x1 {
                                let ix = ((ox * s) as isize + off_x) as usize;
                                out[orow + ox] += wv * x[row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, k, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    params: ConvParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w, k, kh, kw, oh, ow) = conv_geometry(input, weights, params)?;
    if grad_out.shape() != [n, k, oh, ow] {
        return Err(Error::shape(format!(
            "conv2d backward: upstream gradient {:?} does not match output [{n}, {k}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let (x, wt, g) = (input.data(), weights.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; k];
    let s = params.stride;
    for ni in 0..n {
        for ki in 0..k {
            let o_base = (ni * k + ki) * oh * ow;
            gb[ki] += g[o_base..o_base + oh * ow].iter().sum::<f64>();
            for ci in 0..c {
                let x_base = (ni * c + ci) * h * w;
                for ky in 0..kh {
                    let off_y = (ky * params.dilation) as isize - params.padding as isize;
                    let (y0, y1) = valid_range(oh, h, s, off_y);
                    for kx in 0..kw {
                        let widx = ((ki * c + ci) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let off_x = (kx * params.dilation) as isize - params.padding as isize;
                        let (x0, x1) = valid_range(ow, w, s, off_x);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = (oy * s) as isize + off_y;
                            let row = x_base + iy as usize * w;
                            let orow = o_base + oy * ow;
                            for ox in x0..x1 {
                                let ix = ((ox * s) as isize + off_x) as usize;
                                let go = g[orow + ox];
                                acc += go * x[row + ix];
                                gx[row + ix] += wv * go;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weights.shape().to_vec(), gw)?,
        Tensor::new(vec![k], gb)?,
    ))
}

fn conv_t_geometry(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let (wc, k, kh, kw) = weights.dims4()?;
    if stride == 0 {
        return Err(Error::invalid("conv_transpose2d stride must be >= 1"));
    }
    if wc != c {
        return Err(Error::shape(format!(
            "conv_transpose2d: input has {c} channels but weights {:?} expect {wc}",
            weights.shape()
        )));
    }
    let _ = (h, w, n);
    Ok((n, c, k, kh, kw, h, w))
}

/// Strided transposed convolution without bias or padding.
///
/// Output extent is `(H - 1) * stride + kh`. With a shared weight tensor this
/// is the exact adjoint of `conv2d(.., stride, dilation 1, padding 0)`.
pub fn conv_transpose2d(input: &Tensor, weights: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, c, k, kh, kw, h, w) = conv_t_geometry(input, weights, stride)?;
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    let (x, wt) = (input.data(), weights.data());
    let mut out = vec![0.0; n * k * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let x_base = (ni * c + ci) * h * w;
            for ki in 0..k {
                let o_base = (ni * k + ki) * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((ci * k + ki) * kh + ky) * kw + kx];
                        for iy in 0..h {
                            let orow = o_base + (iy * stride + ky) * ow + kx;
                            let row = x_base + iy * w;
                            for ix in 0..w {
                                out[orow + ix * stride] += wv * x[row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, k, oh, ow], out)
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, c, k, kh, kw, h, w) = conv_t_geometry(input, weights, stride)?;
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    if grad_out.shape() != [n, k, oh, ow] {
        return Err(Error::shape(format!(
            "conv_transpose2d backward: upstream gradient {:?} does not match output [{n}, {k}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let (x, wt, g) = (input.data(), weights.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    for ni in 0..n {
        for ci in 0..c {
            let x_base = (ni * c + ci) * h * w;
            for ki in 0..k {
                let o_base = (ni * k + ki) * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((ci * k + ki) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let mut acc = 0.0;
                        for iy in 0..h {
                            let orow = o_base + (iy * stride + ky) * ow + kx;
                            let row = x_base + iy * w;
                            for ix in 0..w {
                                let go = g[orow + ix * stride];
                                acc += go * x[row + ix];
                                gx[row + ix] += wv * go;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weights.shape().to_vec(), gw)?,
    ))
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index that produced it. Ties resolve to
/// the first element in row-major order within the window.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 needs even spatial extents, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("maxpool2 backward: argmax/gradient length mismatch"));
    }
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        data[idx] += g;
    }
    Ok(gx)
}

/// Non-overlapping `factor`×`factor` mean pooling.
pub fn avgpool(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    check_divisible(h, w, factor, "avgpool")?;
    let (oh, ow) = (h / factor, w / factor);
    let x = input.data();
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        let obase = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = base + (oy * factor + dy) * w + ox * factor;
                    acc += x[row..row + factor].iter().sum::<f64>();
                }
                out[obase + oy * ow + ox] = acc * norm;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avgpool_backward(input_shape: &[usize], grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let up = upsample_nearest(grad_out, factor)?;
    if up.shape() != input_shape {
        return Err(Error::shape("avgpool backward: shape mismatch"));
    }
    Ok(up.scale(1.0 / (factor * factor) as f64))
}

/// Keeps the top-left sample of every `factor`×`factor` block.
pub fn subsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    check_divisible(h, w, factor, "subsample")?;
    let (oh, ow) = (h / factor, w / factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(x[plane * h * w + oy * factor * w + ox * factor]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn subsample_backward(input_shape: &[usize], grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("subsample backward expects a rank-4 shape")),
    };
    let (oh, ow) = (h / factor, w / factor);
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    let g = grad_out.data();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                data[plane * h * w + oy * factor * w + ox * factor] += g[plane * oh * ow + oy * ow + ox];
            }
        }
    }
    Ok(gx)
}

/// Replicates every element into a `factor`×`factor` block.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            let row = plane * h * w + (oy / factor) * w;
            for ox in 0..ow {
                out.push(x[row + ox / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Removes `border` pixels from each spatial edge.
pub fn crop(input: &Tensor, border: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::shape(format!("crop of {border} leaves nothing of {h}×{w}")));
    }
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            let row = plane * h * w + (oy + border) * w + border;
            out.extend_from_slice(&x[row..row + ow]);
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn crop_backward(input_shape: &[usize], grad_out: &Tensor, border: usize) -> Result<Tensor> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("crop backward expects a rank-4 shape")),
    };
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    let g = grad_out.data();
    for plane in 0..n * c {
        for oy in 0..oh {
            let row = plane * h * w + (oy + border) * w + border;
            data[row..row + ow].copy_from_slice(&g[(plane * oh + oy) * ow..(plane * oh + oy + 1) * ow]);
        }
    }
    Ok(gx)
}

fn check_divisible(h: usize, w: usize, factor: usize, op: &str) -> Result<()> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "{op}: extents {h}×{w} are not divisible by {factor}"
        )));
    }
    Ok(())
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels: batch/spatial mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (pa + pb));
    for ni in 0..n {
        out.extend_from_slice(&a.data()[ni * pa..(ni + 1) * pa]);
        out.extend_from_slice(&b.data()[ni * pb..(ni + 1) * pb]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

pub fn concat_channels_backward(
    a_shape: &[usize],
    b_shape: &[usize],
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let n = a_shape[0];
    let pa: usize = a_shape[1..].iter().product();
    let pb: usize = b_shape[1..].iter().product();
    let g = grad_out.data();
    let mut ga = Vec::with_capacity(n * pa);
    let mut gb = Vec::with_capacity(n * pb);
    for ni in 0..n {
        let base = ni * (pa + pb);
        ga.extend_from_slice(&g[base..base + pa]);
        gb.extend_from_slice(&g[base + pa..base + pa + pb]);
    }
    Ok((
        Tensor::new(a_shape.to_vec(), ga)?,
        Tensor::new(b_shape.to_vec(), gb)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Softmax over the channel axis at every pixel, stabilised by subtracting
/// the per-pixel maximum.
pub fn softmax_channel(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if c < 2 {
        return Err(Error::shape(format!("softmax_channel needs >= 2 channels, got {c}")));
    }
    let x = input.data();
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(x[base + ci * plane + p]);
            }
            let mut total = 0.0;
            for ci in 0..c {
                let e = (x[base + ci * plane + p] - max).exp();
                out[base + ci * plane + p] = e;
                total += e;
            }
            for ci in 0..c {
                out[base + ci * plane + p] /= total;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Backward through softmax given its output.
pub fn softmax_channel_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = output.dims4()?;
    output.expect_same_shape(grad_out)?;
    let (s, g) = (output.data(), grad_out.data());
    let plane = h * w;
    let mut gx = vec![0.0; s.len()];
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let mut inner = 0.0;
            for ci in 0..c {
                let i = base + ci * plane + p;
                inner += s[i] * g[i];
            }
            for ci in 0..c {
                let i = base + ci * plane + p;
                gx[i] = s[i] * (g[i] - inner);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), gx)
}

/// Mean cross-entropy of per-pixel softmax over labeled pixels.
///
/// `labels` is N×1×H×W holding class indices, or [`UNLABELED_F64`] where the
/// pixel carries no ground truth. Returns the loss and its gradient with
/// respect to `logits`; that gradient is exactly zero at unlabeled pixels.
pub fn masked_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = logits.dims4()?;
    if labels.shape() != [n, 1, h, w] {
        return Err(Error::shape(format!(
            "masked loss: labels {:?} do not match logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    let plane = h * w;
    let (x, y) = (logits.data(), labels.data());
    let count = y.iter().filter(|&&v| v >= 0.0).count();
    if count == 0 {
        return Err(Error::invalid("masked loss needs at least one labeled pixel"));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.len()];
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let label = y[ni * plane + p];
            if label < 0.0 {
                continue;
            }
            let label = label as usize;
            if label >= c {
                return Err(Error::invalid(format!(
                    "label {label} out of range for {c} classes"
                )));
            }
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(x[base + ci * plane + p]);
            }
            let mut total = 0.0;
            for ci in 0..c {
                total += (x[base + ci * plane + p] - max).exp();
            }
            let log_z = max + total.ln();
            loss += log_z - x[base + label * plane + p];
            for ci in 0..c {
                let i = base + ci * plane + p;
                let prob = (x[i] - log_z).exp();
                grad[i] = (prob - if ci == label { 1.0 } else { 0.0 }) * inv;
            }
        }
    }
    Ok((loss * inv, Tensor::new(logits.shape().to_vec(), grad)?))
}
