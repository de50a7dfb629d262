//! Real-valued CHW feature maps and the layer primitives the U-Nets are
//! built from, each with an explicit backward pass.

/// `channels x height x width` real tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Geometry of one convolution inside the flat parameter vector:
/// weights `[cout][cin][k][k]` then `cout` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub offset: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.weight_len()]
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset + self.weight_len()..self.offset + self.len()]
    }
}

/// `c = alpha * a * b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + k.saturating_sub(1) * csa + 1 || k == 0);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index the strides address (checked above
    // in debug builds, and by construction at every call site).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gathers `kernel x kernel` zero-padded neighborhoods into a
/// `(cin * k * k) x pixels` matrix.
fn im2col(input: &FeatureMap, kernel: usize) -> Vec<f64> {
    let (h, w) = (input.height, input.width);
    let p = h * w;
    let half = (kernel / 2) as isize;
    let mut col = vec![0.0; input.channels * kernel * kernel * p];
    for ci in 0..input.channels {
        let src = input.channel(ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let dy = ky as isize - half;
                let dx = kx as isize - half;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for x in x0..x1 {
                        drow[x] = srow[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(col: &[f64], channels: usize, h: usize, w: usize, kernel: usize) -> FeatureMap {
    let p = h * w;
    let half = (kernel / 2) as isize;
    let mut out = FeatureMap::zeros(channels, h, w);
    for ci in 0..channels {
        let dst = out.channel_mut(ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &col[row * p..(row + 1) * p];
                let dy = ky as isize - half;
                let dx = kx as isize - half;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for x in x0..x1 {
                        dst[sy as usize * w + (x as isize + dx) as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Same-padded stride-1 convolution plus bias.
pub fn conv_forward(shape: &ConvShape, params: &[f64], input: &FeatureMap) -> FeatureMap {
    assert_eq!(input.channels, shape.cin, "conv input channels");
    let p = input.pixels();
    let kk = shape.cin * shape.kernel * shape.kernel;
    let mut out = FeatureMap::zeros(shape.cout, input.height, input.width);
    for (co, b) in shape.bias(params).iter().enumerate() {
        out.channel_mut(co).iter_mut().for_each(|v| *v = *b);
    }
    let weights = shape.weights(params);
    if shape.kernel == 1 {
        gemm(shape.cout, kk, p, weights, (kk, 1), &input.data, (p, 1), 1.0, &mut out.data);
    } else {
        let col = im2col(input, shape.kernel);
        gemm(shape.cout, kk, p, weights, (kk, 1), &col, (p, 1), 1.0, &mut out.data);
    }
    out
}

/// Accumulates weight/bias gradients into `grads` and returns the input
/// gradient when requested.
pub fn conv_backward(
    shape: &ConvShape,
    params: &[f64],
    input: &FeatureMap,
    grad_out: &FeatureMap,
    grads: &mut [f64],
    want_input_grad: bool,
) -> Option<FeatureMap> {
    let p = input.pixels();
    let kk = shape.cin * shape.kernel * shape.kernel;
    let owned;
    let col: &[f64] = if shape.kernel == 1 {
        &input.data
    } else {
        owned = im2col(input, shape.kernel);
        &owned
    };
    {
        let (gw, gb) = grads[shape.offset..shape.offset + shape.len()].split_at_mut(shape.weight_len());
        // gW += gout (cout x P) * col^T (P x K)
        gemm(shape.cout, p, kk, &grad_out.data, (p, 1), col, (1, p), 1.0, gw);
        for (co, b) in gb.iter_mut().enumerate() {
            *b += grad_out.channel(co).iter().sum::<f64>();
        }
    }
    if !want_input_grad {
        return None;
    }
    // gcol = W^T (K x cout) * gout (cout x P)
    let mut gcol = vec![0.0; kk * p];
    gemm(kk, shape.cout, p, shape.weights(params), (1, kk), &grad_out.data, (p, 1), 0.0, &mut gcol);
    if shape.kernel == 1 {
        Some(FeatureMap {
            channels: shape.cin,
            height: input.height,
            width: input.width,
            data: gcol,
        })
    } else {
        Some(col2im(&gcol, shape.cin, input.height, input.width, shape.kernel))
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` by the positive entries of the activation output.
pub fn relu_backward(output: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 stride-2 average pooling.
pub fn avg_pool(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let i = 2 * y * x.width + 2 * xx;
                dst[y * w + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.width] + src[i + x.width + 1]);
            }
        }
    }
    out
}

pub fn avg_pool_backward(grad: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad.height * 2, grad.width * 2);
    let mut out = FeatureMap::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        let src = grad.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * src[(y / 2) * grad.width + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_backward(grad: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let mut out = FeatureMap::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        let src = grad.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..grad.height {
            for x in 0..grad.width {
                dst[(y / 2) * w + x / 2] += src[y * grad.width + x];
            }
        }
    }
    out
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

pub fn split(grad: FeatureMap, first: usize) -> (FeatureMap, FeatureMap) {
    let n = first * grad.pixels();
    let (h, w) = (grad.height, grad.width);
    let mut data = grad.data;
    let rest = data.split_off(n);
    (
        FeatureMap {
            channels: first,
            height: h,
            width: w,
            data,
        },
        FeatureMap {
            channels: rest.len() / (h * w),
            height: h,
            width: w,
            data: rest,
        },
    )
}
