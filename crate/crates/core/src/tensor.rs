//! Dense 4-D tensors and the numeric kernels the rest of the crate builds on.
//!
//! Convolution uses the cross-correlation convention (no kernel flip);
//! `conv2d_transpose` is its exact adjoint. All reductions accumulate in f64.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("illegal geometry: {0}")]
    IllegalGeometry(String),
    #[error("data length {got} does not match shape product {want}")]
    BadLength { got: usize, want: usize },
}

/// Dense (batch, channel, height, width) array of f32, row-major contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(shape: (usize, usize, usize, usize), data: Vec<f32>) -> Result<Self, TensorError> {
        let (n, c, h, w) = shape;
        let want = n * c * h * w;
        if data.len() != want {
            return Err(TensorError::BadLength { got: data.len(), want });
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous spatial plane of one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let start = self.idx(n, c, 0, 0);
        &self.data[start..start + self.h * self.w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let start = self.idx(n, c, 0, 0);
        let len = self.h * self.w;
        &mut self.data[start..start + len]
    }

    /// Same data reinterpreted under a new shape with equal element count.
    pub fn reshaped(&self, n: usize, c: usize, h: usize, w: usize) -> Result<Tensor, TensorError> {
        Tensor::from_vec((n, c, h, w), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of a square convolution: kernel side M, stride S, symmetric
/// zero padding O, and the channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Output side B = (A + 2*O - M)/S + 1, or None when the division is not
/// exact or the kernel does not fit.
pub fn out_side(a: usize, m: usize, s: usize, o: usize) -> Option<usize> {
    let padded = a + 2 * o;
    if padded < m || s == 0 {
        return None;
    }
    let num = padded - m;
    if num % s != 0 {
        return None;
    }
    Some(num / s + 1)
}

fn conv_out_side(input: &Tensor, spec: &ConvSpec) -> Result<(usize, usize), TensorError> {
    let oh = out_side(input.height(), spec.kernel, spec.stride, spec.pad);
    let ow = out_side(input.width(), spec.kernel, spec.stride, spec.pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(TensorError::IllegalGeometry(format!(
            "input {}x{} incompatible with kernel {} stride {} pad {}",
            input.height(),
            input.width(),
            spec.kernel,
            spec.stride,
            spec.pad
        ))),
    }
}

/// Cross-correlation with zero padding. Weights are (out_ch, in_ch, M, M).
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &[f32], spec: &ConvSpec) -> Result<Tensor, TensorError> {
    if input.channels() != spec.in_channels {
        return Err(TensorError::ShapeMismatch(format!(
            "input channels {} != spec.in_channels {}",
            input.channels(),
            spec.in_channels
        )));
    }
    if weights.shape() != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel) {
        return Err(TensorError::ShapeMismatch(format!(
            "weight shape {:?} != ({}, {}, {}, {})",
            weights.shape(),
            spec.out_channels,
            spec.in_channels,
            spec.kernel,
            spec.kernel
        )));
    }
    if bias.len() != spec.out_channels {
        return Err(TensorError::ShapeMismatch(format!(
            "bias length {} != out_channels {}",
            bias.len(),
            spec.out_channels
        )));
    }
    let (oh, ow) = conv_out_side(input, spec)?;
    let (nb, _, ih, iw) = input.shape();
    let mut out = Tensor::zeros(nb, spec.out_channels, oh, ow);
    let m = spec.kernel;
    let s = spec.stride;
    let o = spec.pad as isize;
    for n in 0..nb {
        for oc in 0..spec.out_channels {
            let b = bias[oc];
            {
                let plane = out.plane_mut(n, oc);
                for v in plane.iter_mut() {
                    *v = b;
                }
            }
            for ic in 0..spec.in_channels {
                let wplane = weights.plane(oc, ic);
                let iplane = input.plane(n, ic);
                let start = ((n * out.channels() + oc) * oh) * ow;
                for oy in 0..oh {
                    for ky in 0..m {
                        let iy = (oy * s + ky) as isize - o;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let irow = &iplane[iy as usize * iw..iy as usize * iw + iw];
                        let wrow = &wplane[ky * m..ky * m + m];
                        let orow = &mut out.data[start + oy * ow..start + oy * ow + ow];
                        for ox in 0..ow {
                            let mut acc = 0.0f32;
                            for kx in 0..m {
                                let ix = (ox * s + kx) as isize - o;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                acc += wrow[kx] * irow[ix as usize];
                            }
                            orow[ox] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of `conv2d` (bias ignored): for all U, V of matching shapes,
/// <conv2d(U), V> == <U, conv2d_transpose(V)>.
pub fn conv2d_transpose(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor, TensorError> {
    if input.channels() != spec.out_channels {
        return Err(TensorError::ShapeMismatch(format!(
            "input channels {} != spec.out_channels {}",
            input.channels(),
            spec.out_channels
        )));
    }
    if weights.shape() != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel) {
        return Err(TensorError::ShapeMismatch(format!(
            "weight shape {:?} incompatible with spec",
            weights.shape()
        )));
    }
    let (nb, _, bh, bw) = input.shape();
    let ah = (spec.kernel + (bh - 1) * spec.stride).checked_sub(2 * spec.pad).ok_or_else(|| {
        TensorError::IllegalGeometry("transpose output height would be negative".into())
    })?;
    let aw = (spec.kernel + (bw - 1) * spec.stride).checked_sub(2 * spec.pad).ok_or_else(|| {
        TensorError::IllegalGeometry("transpose output width would be negative".into())
    })?;
    let mut out = Tensor::zeros(nb, spec.in_channels, ah, aw);
    let m = spec.kernel;
    let s = spec.stride;
    let o = spec.pad as isize;
    for n in 0..nb {
        for oc in 0..spec.out_channels {
            let iplane = input.plane(n, oc);
            for ic in 0..spec.in_channels {
                let wplane = weights.plane(oc, ic);
                let oplane = out.plane_mut(n, ic);
                for oy in 0..bh {
                    for ox in 0..bw {
                        let v = iplane[oy * bw + ox];
                        if v == 0.0 {
                            continue;
                        }
                        for ky in 0..m {
                            let iy = (oy * s + ky) as isize - o;
                            if iy < 0 || iy >= ah as isize {
                                continue;
                            }
                            for kx in 0..m {
                                let ix = (ox * s + kx) as isize - o;
                                if ix < 0 || ix >= aw as isize {
                                    continue;
                                }
                                oplane[iy as usize * aw + ix as usize] += wplane[ky * m + kx] * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of a conv2d output w.r.t. its weights and bias, given the
/// upstream signal `dout`. Used by SGD training.
pub fn conv2d_weight_grad(
    input: &Tensor,
    dout: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Vec<f32>), TensorError> {
    let (nb, _, ih, iw) = input.shape();
    let (dn, dc, oh, ow) = dout.shape();
    if dn != nb || dc != spec.out_channels {
        return Err(TensorError::ShapeMismatch("dout shape incompatible with spec".into()));
    }
    let m = spec.kernel;
    let s = spec.stride;
    let o = spec.pad as isize;
    let mut dw = Tensor::zeros(spec.out_channels, spec.in_channels, m, m);
    let mut db = vec![0.0f32; spec.out_channels];
    for n in 0..nb {
        for oc in 0..spec.out_channels {
            let dplane = dout.plane(n, oc);
            let mut bsum = 0.0f64;
            for v in dplane {
                bsum += *v as f64;
            }
            db[oc] += bsum as f32;
            for ic in 0..spec.in_channels {
                let iplane = input.plane(n, ic);
                let wplane = dw.plane_mut(oc, ic);
                for oy in 0..oh {
                    for ky in 0..m {
                        let iy = (oy * s + ky) as isize - o;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let irow = &iplane[iy as usize * iw..iy as usize * iw + iw];
                        let drow = &dplane[oy * ow..oy * ow + ow];
                        for kx in 0..m {
                            let mut acc = 0.0f32;
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - o;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                acc += drow[ox] * irow[ix as usize];
                            }
                            wplane[ky * m + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((dw, db))
}

/// Recorded argmax positions of max pooling, one flat spatial index per
/// output cell, reused by unpooling. Ties take the first cell in row-major
/// window order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Switches {
    pub n: usize,
    pub c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub index: Vec<usize>,
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Switches), TensorError> {
    if window > input.height() || window > input.width() {
        return Err(TensorError::IllegalGeometry(format!(
            "pool window {} larger than input {}x{}",
            window,
            input.height(),
            input.width()
        )));
    }
    let oh = out_side(input.height(), window, stride, 0).ok_or_else(|| {
        TensorError::IllegalGeometry(format!(
            "input height {} incompatible with pool window {} stride {}",
            input.height(),
            window,
            stride
        ))
    })?;
    let ow = out_side(input.width(), window, stride, 0).ok_or_else(|| {
        TensorError::IllegalGeometry(format!(
            "input width {} incompatible with pool window {} stride {}",
            input.width(),
            window,
            stride
        ))
    })?;
    let (nb, nc, ih, iw) = input.shape();
    let mut out = Tensor::zeros(nb, nc, oh, ow);
    let mut index = Vec::with_capacity(nb * nc * oh * ow);
    for n in 0..nb {
        for c in 0..nc {
            let plane = input.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let v = plane[iy * iw + ix];
                            if v > best {
                                best = v;
                                best_i = iy * iw + ix;
                            }
                        }
                    }
                    out.set(n, c, oy, ox, best);
                    index.push(best_i);
                }
            }
        }
    }
    let _ = ih;
    Ok((
        out,
        Switches { n: nb, c: nc, out_h: oh, out_w: ow, in_h: input.height(), in_w: input.width(), index },
    ))
}

/// Routes a pooled-resolution signal back to the recorded argmax positions.
pub fn maxunpool2d(signal: &Tensor, switches: &Switches) -> Result<Tensor, TensorError> {
    let (nb, nc, oh, ow) = signal.shape();
    if (nb, nc, oh, ow) != (switches.n, switches.c, switches.out_h, switches.out_w) {
        return Err(TensorError::ShapeMismatch(format!(
            "signal shape {:?} does not match switch record ({}, {}, {}, {})",
            signal.shape(),
            switches.n,
            switches.c,
            switches.out_h,
            switches.out_w
        )));
    }
    let mut out = Tensor::zeros(nb, nc, switches.in_h, switches.in_w);
    let mut k = 0usize;
    for n in 0..nb {
        for c in 0..nc {
            let oplane = out.plane_mut(n, c);
            let splane_start = ((n * nc + c) * oh) * ow;
            for i in 0..oh * ow {
                oplane[switches.index[k]] += signal.data()[splane_start + i];
                k += 1;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resize: destination (i, j) copies source
/// (floor(i*h/new_h), floor(j*w/new_w)), channel-wise independent.
pub fn nn_resize(input: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor, TensorError> {
    if new_h == 0 || new_w == 0 {
        return Err(TensorError::IllegalGeometry("resize target must be at least 1x1".into()));
    }
    let (nb, nc, ih, iw) = input.shape();
    let mut out = Tensor::zeros(nb, nc, new_h, new_w);
    for n in 0..nb {
        for c in 0..nc {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..new_h {
                let sy = i * ih / new_h;
                for j in 0..new_w {
                    let sx = j * iw / new_w;
                    dst[i * new_w + j] = src[sy * iw + sx];
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centers, clamped at borders.
pub fn bilinear_resize(input: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor, TensorError> {
    if new_h == 0 || new_w == 0 {
        return Err(TensorError::IllegalGeometry("resize target must be at least 1x1".into()));
    }
    let (nb, nc, ih, iw) = input.shape();
    let sy_scale = ih as f64 / new_h as f64;
    let sx_scale = iw as f64 / new_w as f64;
    let mut out = Tensor::zeros(nb, nc, new_h, new_w);
    for n in 0..nb {
        for c in 0..nc {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..new_h {
                let fy = ((i as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (ih - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(ih - 1);
                let wy = (fy - y0 as f64) as f32;
                for j in 0..new_w {
                    let fx = ((j as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (iw - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(iw - 1);
                    let wx = (fx - x0 as f64) as f32;
                    let a = src[y0 * iw + x0];
                    let b = src[y0 * iw + x1];
                    let c2 = src[y1 * iw + x0];
                    let d = src[y1 * iw + x1];
                    let top = a + (b - a) * wx;
                    let bot = c2 + (d - c2) * wx;
                    dst[i * new_w + j] = top + (bot - top) * wy;
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel L2 norm of a single-image tensor, accumulated in f64.
pub fn channel_l2(input: &Tensor) -> Result<Vec<f64>, TensorError> {
    if input.batch() != 1 {
        return Err(TensorError::ShapeMismatch(format!(
            "channel_l2 expects a single image, got batch {}",
            input.batch()
        )));
    }
    let mut norms = Vec::with_capacity(input.channels());
    for c in 0..input.channels() {
        let mut acc = 0.0f64;
        for v in input.plane(0, c) {
            acc += (*v as f64) * (*v as f64);
        }
        norms.push(acc.sqrt());
    }
    Ok(norms)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Numerically stable softmax; output sums to 1 within 1e-6.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_tensor(shape: (usize, usize, usize, usize), scale: f32) -> Tensor {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        let data = (0..len).map(|i| ((i * 2654435761 % 1000) as f32 / 500.0 - 1.0) * scale).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn out_side_matches_direct_evaluation() {
        assert_eq!(out_side(5, 3, 1, 0), Some(3));
        assert_eq!(out_side(9, 3, 2, 1), Some(5));
        assert_eq!(out_side(5, 3, 2, 0), Some(2));
        assert_eq!(out_side(6, 3, 2, 0), None); // not divisible
        assert_eq!(out_side(2, 3, 1, 0), None); // kernel does not fit
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let input = Tensor::from_vec((1, 1, 3, 3), vec![1.0; 9]).unwrap();
        let weights = Tensor::from_vec((1, 1, 3, 3), vec![1.0; 9]).unwrap();
        let spec = ConvSpec { kernel: 3, stride: 1, pad: 0, in_channels: 1, out_channels: 1 };
        let out = conv2d(&input, &weights, &[0.0], &spec).unwrap();
        assert_eq!(out.shape(), (1, 1, 1, 1));
        assert_eq!(out.at(0, 0, 0, 0), 9.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(1, 2, 5, 5);
        let weights = Tensor::zeros(1, 1, 3, 3);
        let spec = ConvSpec { kernel: 3, stride: 1, pad: 0, in_channels: 1, out_channels: 1 };
        let err = conv2d(&input, &weights, &[0.0], &spec).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    fn inner(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn transpose_is_exact_adjoint() {
        // <conv(U), V> == <U, conv^T(V)> over random shapes
        let cases = [
            (1usize, 2usize, 6usize, 3usize, 1usize, 1usize, 3usize),
            (2, 1, 9, 3, 2, 1, 4),
            (1, 3, 7, 5, 1, 2, 2),
            (1, 2, 9, 3, 2, 0, 4),
        ];
        for (seed, ic, a, m, s, o, oc) in cases {
            let spec = ConvSpec { kernel: m, stride: s, pad: o, in_channels: ic, out_channels: oc };
            let b = out_side(a, m, s, o).unwrap();
            let u = seq_tensor((1, ic, a, a), 1.0 + seed as f32);
            let w = seq_tensor((oc, ic, m, m), 0.7);
            let v = seq_tensor((1, oc, b, b), 0.9);
            let cu = conv2d(&u, &w, &vec![0.0; oc], &spec).unwrap();
            let tv = conv2d_transpose(&v, &w, &spec).unwrap();
            let lhs = inner(&cu, &v);
            let rhs = inner(&u, &tv);
            let denom = lhs.abs().max(1e-9);
            assert!(((lhs - rhs) / denom).abs() <= 1e-5, "adjoint identity violated: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn transpose_zero_input_gives_zero() {
        let spec = ConvSpec { kernel: 3, stride: 1, pad: 1, in_channels: 2, out_channels: 2 };
        let w = seq_tensor((2, 2, 3, 3), 1.0);
        let v = Tensor::zeros(1, 2, 6, 6);
        let out = conv2d_transpose(&v, &w, &spec).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transpose_of_scalar_kernel_scales() {
        let spec = ConvSpec { kernel: 1, stride: 1, pad: 0, in_channels: 1, out_channels: 1 };
        let w = Tensor::from_vec((1, 1, 1, 1), vec![2.0]).unwrap();
        let v = Tensor::from_vec((1, 1, 2, 2), vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let out = conv2d_transpose(&v, &w, &spec).unwrap();
        assert_eq!(out.data(), &[2.0, -4.0, 6.0, 8.0]);
    }

    #[test]
    fn maxpool_simple_and_tie_rule() {
        let input = Tensor::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, sw) = maxpool2d(&input, 2, 2).unwrap();
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(sw.index, vec![3]);

        let constant = Tensor::from_vec((1, 1, 4, 4), vec![5.0; 16]).unwrap();
        let (out, sw) = maxpool2d(&constant, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 5.0));
        // first cell of each window in row-major order
        assert_eq!(sw.index, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_matches_bruteforce_scan() {
        let input = seq_tensor((1, 1, 6, 6), 2.0);
        let (out, sw) = maxpool2d(&input, 2, 2).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..2 {
                    for kx in 0..2 {
                        best = best.max(input.at(0, 0, oy * 2 + ky, ox * 2 + kx));
                    }
                }
                assert_eq!(out.at(0, 0, oy, ox), best);
            }
        }
        let unpooled = maxunpool2d(&out, &sw).unwrap();
        assert_eq!(unpooled.shape(), (1, 1, 6, 6));
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let input = Tensor::zeros(1, 1, 2, 2);
        assert!(maxpool2d(&input, 3, 1).is_err());
    }

    #[test]
    fn nn_resize_identity_and_block_replication() {
        let input = Tensor::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let same = nn_resize(&input, 2, 2).unwrap();
        assert_eq!(same, input);
        let up = nn_resize(&input, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(up.at(0, 0, i, j), input.at(0, 0, i / 2, j / 2));
            }
        }
    }

    #[test]
    fn nn_resize_matches_index_formula() {
        let input = seq_tensor((1, 1, 3, 3), 1.0);
        let out = nn_resize(&input, 5, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(out.at(0, 0, i, j), input.at(0, 0, i * 3 / 5, j * 3 / 5));
            }
        }
    }

    #[test]
    fn channel_l2_cases() {
        let zeros = Tensor::zeros(1, 1, 3, 3);
        assert_eq!(channel_l2(&zeros).unwrap(), vec![0.0]);

        let neg = Tensor::from_vec((1, 1, 1, 1), vec![-3.0]).unwrap();
        assert_eq!(channel_l2(&neg).unwrap(), vec![3.0]);

        let t = seq_tensor((1, 4, 5, 5), 1.5);
        let norms = channel_l2(&t).unwrap();
        for c in 0..4 {
            let mut acc = 0.0f64;
            for y in 0..5 {
                for x in 0..5 {
                    let v = t.at(0, c, y, x) as f64;
                    acc += v * v;
                }
            }
            let want = acc.sqrt();
            assert!(((norms[c] - want) / want.max(1e-12)).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_probability_vector() {
        let p = softmax(&[1.0, 2.0, -0.5, 10.0]);
        assert!(p.iter().all(|&v| v >= 0.0));
        let sum: f64 = p.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}
