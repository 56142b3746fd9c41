//! Dense 4-D tensors stored channel-major and the GEMM entry point every layer
//! goes through.
//!
//! Layout is `(channels, batch, height, width)`: a convolution over a whole
//! batch becomes a single `[out_c x in_c*k*k] * [in_c*k*k x batch*h*w]` product
//! whose result is already in this layout, and per-channel statistics read one
//! contiguous slice.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the network can run in. `f32` is used for training, `f64` for
/// gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: safetensors::Dtype;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing matrices of
    /// the given dimensions (see `matrixmultiply::sgemm`).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Whether a GEMM operand is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices, `op(a)` being
/// `m x k` and `op(b)` being `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: lengths were checked above and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
        }
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements belonging to one channel across the whole batch.
    pub const fn per_channel(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.per_channel()
    }

    pub const fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub const fn with_spatial(self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..self
        }
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{} (CxNxHxW)",
            self.channels, self.batch, self.height, self.width
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.numel(), "tensor data for {shape}");
        Self { shape, data }
    }

    /// Builds a tensor from batch-major `(N, C, H, W)` data.
    pub fn from_nchw(batch: usize, channels: usize, height: usize, width: usize, nchw: &[T]) -> Self {
        let shape = Shape::new(channels, batch, height, width);
        assert_eq!(nchw.len(), shape.numel(), "nchw data for {shape}");
        let plane = shape.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for c in 0..channels {
            for n in 0..batch {
                let start = (n * channels + c) * plane;
                data.extend_from_slice(&nchw[start..start + plane]);
            }
        }
        Self { shape, data }
    }

    /// Stacks single-sample `(C, H, W)` arrays into one batch.
    pub fn stack_chw(channels: usize, height: usize, width: usize, samples: &[&[T]]) -> Self {
        let shape = Shape::new(channels, samples.len(), height, width);
        let plane = shape.plane();
        let mut data = vec![T::zero(); shape.numel()];
        for (n, s) in samples.iter().enumerate() {
            assert_eq!(s.len(), channels * plane, "sample {n} length");
            for c in 0..channels {
                let dst = (c * shape.batch + n) * plane;
                data[dst..dst + plane].copy_from_slice(&s[c * plane..(c + 1) * plane]);
            }
        }
        Self { shape, data }
    }

    pub fn to_nchw(&self) -> Vec<T> {
        let s = self.shape;
        let mut out = Vec::with_capacity(s.numel());
        for n in 0..s.batch {
            for c in 0..s.channels {
                out.extend_from_slice(self.plane(c, n));
            }
        }
        out
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn plane_start(&self, channel: usize, sample: usize) -> usize {
        debug_assert!(channel < self.shape.channels && sample < self.shape.batch);
        (channel * self.shape.batch + sample) * self.shape.plane()
    }

    pub fn plane(&self, channel: usize, sample: usize) -> &[T] {
        let start = self.plane_start(channel, sample);
        &self.data[start..start + self.shape.plane()]
    }

    pub fn plane_mut(&mut self, channel: usize, sample: usize) -> &mut [T] {
        let start = self.plane_start(channel, sample);
        let len = self.shape.plane();
        &mut self.data[start..start + len]
    }

    pub fn channel(&self, channel: usize) -> &[T] {
        let len = self.shape.per_channel();
        &self.data[channel * len..(channel + 1) * len]
    }

    pub fn get(&self, channel: usize, sample: usize, y: usize, x: usize) -> T {
        self.plane(channel, sample)[y * self.shape.width + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Extracts one sample as its own batch of one.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let s = self.shape;
        let mut data = Vec::with_capacity(s.channels * s.plane());
        for c in 0..s.channels {
            data.extend_from_slice(self.plane(c, n));
        }
        Tensor::from_vec(Shape::new(s.channels, 1, s.height, s.width), data)
    }

    /// Concatenates along the channel axis; the layout makes this a plain append.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.shape.with_channels(0), b.shape.with_channels(0), "concat shapes");
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.shape.with_channels(a.shape.channels + b.shape.channels), data)
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Tensor<T>, Tensor<T>) {
        assert!(first <= self.shape.channels);
        let cut = first * self.shape.per_channel();
        (
            Tensor::from_vec(self.shape.with_channels(first), self.data[..cut].to_vec()),
            Tensor::from_vec(
                self.shape.with_channels(self.shape.channels - first),
                self.data[cut..].to_vec(),
            ),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Zero-pads (bottom/right) or crops each plane to the requested size.
    pub fn resize_spatial(&self, height: usize, width: usize) -> Tensor<T> {
        let s = self.shape;
        let mut out = Tensor::zeros(s.with_spatial(height, width));
        let (h, w) = (s.height.min(height), s.width.min(width));
        for c in 0..s.channels {
            for n in 0..s.batch {
                let src = self.plane(c, n);
                let dst = out.plane_mut(c, n);
                for y in 0..h {
                    dst[y * width..y * width + w].copy_from_slice(&src[y * s.width..y * s.width + w]);
                }
            }
        }
        out
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
