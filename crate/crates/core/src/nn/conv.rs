use super::{join, Initializer, Mode, Module, Param, Slot};
use crate::tensor::{matmul, Op, Real, Shape, Tensor};

/// Geometry of a strided, zero-padded square-kernel correlation mapping an
/// `in_h x in_w` image onto an `out_h x out_w` grid of windows.
#[derive(Clone, Copy, Debug)]
struct Geom {
    channels: usize,
    batch: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn windows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "kernel {k} larger than padded input {len}+2*{pad}");
    (len + 2 * pad - k) / stride + 1
}

/// Window indices `o` for which `o * stride + offset - pad` lands inside `[0, in_len)`.
fn valid_range(offset: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > offset {
        ((in_len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let windows = g.windows();
    let plane = g.in_h * g.in_w;
    debug_assert_eq!(cols.len(), g.rows() * windows);
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * windows..(row + 1) * windows];
                let (lo, hi) = valid_range(kx, g.pad, g.stride, g.in_w, g.out_w);
                for n in 0..g.batch {
                    let src = &x[(c * g.batch + n) * plane..][..plane];
                    for oy in 0..g.out_h {
                        let dst = &mut dst_row[(n * g.out_h + oy) * g.out_w..][..g.out_w];
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize || lo >= hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..][..g.in_w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if g.stride == 1 {
                            let ix = lo + kx - g.pad;
                            dst[lo..hi].copy_from_slice(&src_row[ix..ix + hi - lo]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                                *d = src_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters window columns back onto the image, summing overlaps.
fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let windows = g.windows();
    let plane = g.in_h * g.in_w;
    x.fill(T::zero());
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &cols[row * windows..(row + 1) * windows];
                let (lo, hi) = valid_range(kx, g.pad, g.stride, g.in_w, g.out_w);
                if lo >= hi {
                    continue;
                }
                for n in 0..g.batch {
                    let dst = &mut x[(c * g.batch + n) * plane..][..plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src = &src_row[(n * g.out_h + oy) * g.out_w..][..g.out_w];
                        let dst_row = &mut dst[iy as usize * g.in_w..][..g.in_w];
                        for ox in lo..hi {
                            dst_row[ox * g.stride + kx - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut Tensor<T>, bias: &Param<T>) {
    let per = out.shape().per_channel();
    for (c, chunk) in out.data_mut().chunks_mut(per).enumerate() {
        let b = bias.value[c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>, bias: &mut Param<T>) {
    let per = dy.shape().per_channel();
    for (c, chunk) in dy.data().chunks(per).enumerate() {
        bias.grad[c] += chunk.iter().copied().sum::<T>();
    }
}

/// 2-D convolution (cross-correlation) with weights laid out `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: &mut Initializer,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = init.kaiming(fan_in, out_channels * fan_in);
        let bias = bias.then(|| vec![T::zero(); out_channels]);
        Self::from_weights(in_channels, out_channels, kernel, stride, padding, weight, bias)
    }

    pub fn from_weights(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Self {
        assert!(stride >= 1 && kernel >= 1);
        Self {
            weight: Param::new(weight, vec![out_channels, in_channels, kernel, kernel]),
            bias: bias.map(|b| Param::new(b, vec![out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Sets all weights (and bias) to zero, making the layer output constant zero.
    pub fn zero_(&mut self) {
        self.weight.value.fill(T::zero());
        if let Some(b) = &mut self.bias {
            b.value.fill(T::zero());
        }
    }

    fn geom(&self, s: Shape) -> Geom {
        assert_eq!(s.channels, self.in_channels, "conv input channels");
        Geom {
            channels: s.channels,
            batch: s.batch,
            in_h: s.height,
            in_w: s.width,
            out_h: conv_out(s.height, self.kernel, self.stride, self.padding),
            out_w: conv_out(s.width, self.kernel, self.stride, self.padding),
            k: self.kernel,
            stride: self.stride,
            pad: self.padding,
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let g = self.geom(x.shape());
        let windows = g.windows();
        let mut out = Tensor::zeros(Shape::new(self.out_channels, g.batch, g.out_h, g.out_w));
        if self.pointwise() {
            matmul(self.out_channels, g.rows(), windows, &self.weight.value, Op::N, x.data(), Op::N, T::zero(), out.data_mut());
        } else {
            let mut cols = vec![T::zero(); g.rows() * windows];
            im2col(x.data(), &g, &mut cols);
            matmul(self.out_channels, g.rows(), windows, &self.weight.value, Op::N, &cols, Op::N, T::zero(), out.data_mut());
        }
        if let Some(b) = &self.bias {
            add_bias(&mut out, b);
        }
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        out
    }

    fn backward_impl(&mut self, dy: &Tensor<T>, want_input: bool) -> Option<Tensor<T>> {
        let x = self
            .input
            .take()
            .expect("Conv2d::backward without a training-mode forward");
        let g = self.geom(x.shape());
        let windows = g.windows();
        assert_eq!(dy.shape(), Shape::new(self.out_channels, g.batch, g.out_h, g.out_w), "conv grad shape");
        if let Some(b) = &mut self.bias {
            bias_grad(dy, b);
        }
        let rows = g.rows();
        let pointwise = self.pointwise();
        let cols_owned;
        let cols: &[T] = if pointwise {
            x.data()
        } else {
            let mut c = vec![T::zero(); rows * windows];
            im2col(x.data(), &g, &mut c);
            cols_owned = c;
            &cols_owned
        };
        matmul(self.out_channels, windows, rows, dy.data(), Op::N, cols, Op::T, T::one(), &mut self.weight.grad);
        if !want_input {
            return None;
        }
        let mut dx = Tensor::zeros(x.shape());
        if pointwise {
            matmul(rows, self.out_channels, windows, &self.weight.value, Op::T, dy.data(), Op::N, T::zero(), dx.data_mut());
        } else {
            let mut dcols = vec![T::zero(); rows * windows];
            matmul(rows, self.out_channels, windows, &self.weight.value, Op::T, dy.data(), Op::N, T::zero(), &mut dcols);
            col2im(&dcols, &g, dx.data_mut());
        }
        Some(dx)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.backward_impl(dy, true).expect("input gradient")
    }

    /// Backward pass that only accumulates parameter gradients (first layer of a network).
    pub fn backward_params(&mut self, dy: &Tensor<T>) {
        self.backward_impl(dy, false);
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

/// Transposed convolution with weights laid out `[in, out, k, k]`; output size
/// is `(in - 1) * stride - 2 * padding + k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: &mut Initializer,
    ) -> Self {
        // Each output pixel receives about in*k*k/stride^2 contributions.
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        let weight = init.kaiming(fan_in, in_channels * out_channels * kernel * kernel);
        Self {
            weight: Param::new(weight, vec![in_channels, out_channels, kernel, kernel]),
            bias: bias.then(|| Param::zeros(vec![out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input: None,
        }
    }

    fn geom(&self, s: Shape) -> Geom {
        assert_eq!(s.channels, self.in_channels, "deconv input channels");
        let out_h = (s.height - 1) * self.stride + self.kernel - 2 * self.padding;
        let out_w = (s.width - 1) * self.stride + self.kernel - 2 * self.padding;
        // The adjoint correlation maps the (out_h, out_w) image onto the input grid.
        Geom {
            channels: self.out_channels,
            batch: s.batch,
            in_h: out_h,
            in_w: out_w,
            out_h: s.height,
            out_w: s.width,
            k: self.kernel,
            stride: self.stride,
            pad: self.padding,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let g = self.geom(x.shape());
        let windows = g.windows();
        let mut cols = vec![T::zero(); g.rows() * windows];
        matmul(g.rows(), self.in_channels, windows, &self.weight.value, Op::T, x.data(), Op::N, T::zero(), &mut cols);
        let mut out = Tensor::zeros(Shape::new(self.out_channels, g.batch, g.in_h, g.in_w));
        col2im(&cols, &g, out.data_mut());
        if let Some(b) = &self.bias {
            add_bias(&mut out, b);
        }
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self
            .input
            .take()
            .expect("ConvTranspose2d::backward without a training-mode forward");
        let g = self.geom(x.shape());
        let windows = g.windows();
        assert_eq!(dy.shape(), Shape::new(self.out_channels, g.batch, g.in_h, g.in_w), "deconv grad shape");
        if let Some(b) = &mut self.bias {
            bias_grad(dy, b);
        }
        let mut dcols = vec![T::zero(); g.rows() * windows];
        im2col(dy.data(), &g, &mut dcols);
        matmul(self.in_channels, windows, g.rows(), x.data(), Op::N, &dcols, Op::T, T::one(), &mut self.weight.grad);
        let mut dx = Tensor::zeros(x.shape());
        matmul(self.in_channels, g.rows(), windows, &self.weight.value, Op::N, &dcols, Op::N, T::zero(), dx.data_mut());
        dx
    }
}

impl<T: Real> Module<T> for ConvTranspose2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of the zero-padded strided correlation.
    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let s = x.shape();
        let (k, st, p) = (conv.kernel, conv.stride, conv.padding);
        let oh = (s.height + 2 * p - k) / st + 1;
        let ow = (s.width + 2 * p - k) / st + 1;
        let mut out = Tensor::zeros(Shape::new(conv.out_channels, s.batch, oh, ow));
        for o in 0..conv.out_channels {
            for n in 0..s.batch {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for c in 0..s.channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * st + ky) as isize - p as isize;
                                    let ix = (xo * st + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= s.height as isize || ix >= s.width as isize {
                                        continue;
                                    }
                                    let w = conv.weight.value[((o * s.channels + c) * k + ky) * k + kx];
                                    acc += w * x.get(c, n, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.plane_mut(o, n)[y * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: Shape) -> Tensor<f64> {
        let data = (0..shape.numel()).map(|i| ((i * 7919) % 97) as f64 / 50.0 - 1.0).collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut init = Initializer::new(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (7, 1, 3), (5, 2, 0)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, p, true, &mut init);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let x = ramp(Shape::new(3, 2, 9, 8));
            let got = conv.forward(&x, Mode::Eval);
            let want = naive_conv(&x, &conv);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn transposed_conv_doubles_resolution_and_is_adjoint() {
        let mut init = Initializer::new(5);
        let mut deconv = ConvTranspose2d::<f64>::new(3, 2, 4, 2, 1, false, &mut init);
        let x = ramp(Shape::new(3, 2, 5, 4));
        let y = deconv.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), Shape::new(2, 2, 10, 8));

        // <deconv(x), z> == <x, conv(z)> with the same weights viewed as a conv.
        let z = ramp(Shape::new(2, 2, 10, 8)).map(|v| v * 0.5 + 0.1);
        // The [in, out, k, k] deconv layout is the [out, in, k, k] layout of its adjoint conv.
        let mut conv = Conv2d::from_weights(2, 3, 4, 2, 1, deconv.weight.value.clone(), None);
        let cz = conv.forward(&z, Mode::Eval);
        let lhs: f64 = y.data().iter().zip(z.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(cz.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        let mut init = Initializer::new(9);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, false, &mut init);
        let x = ramp(Shape::new(2, 1, 7, 6));
        let y = conv.forward(&x, Mode::Train);
        let dy = ramp(y.shape()).map(|v| v + 0.3);
        let dx = conv.backward(&dy);
        // <conv(x), dy> == <x, conv^T(dy)> for a bias-free linear map.
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
        // Weight gradient of <conv(x), dy> is linear in w, so <grad, w> == lhs.
        let gw: f64 = conv.weight.grad.iter().zip(&conv.weight.value).map(|(a, b)| a * b).sum();
        assert!((gw - lhs).abs() < 1e-9);
    }
}
