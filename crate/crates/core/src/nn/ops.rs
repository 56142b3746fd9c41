use super::Mode;
use crate::tensor::{Real, Shape, Tensor};

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    if super::kinks::active() {
        super::kinks::push(x.data().iter().map(|&v| v > T::zero()));
    }
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` where the rectified output `y` was zero.
pub fn relu_backward<T: Real>(dy: &mut Tensor<T>, y: &Tensor<T>) {
    assert_eq!(dy.shape(), y.shape(), "relu grad shape");
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn nearest_upsample<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.height * factor, s.width * factor);
    let mut out = Tensor::zeros(s.with_spatial(h, w));
    for c in 0..s.channels {
        for n in 0..s.batch {
            let src = x.plane(c, n);
            let dst = out.plane_mut(c, n);
            for y in 0..h {
                let row = &src[(y / factor) * s.width..][..s.width];
                for (xo, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                    *d = row[xo / factor];
                }
            }
        }
    }
    out
}

pub fn nearest_upsample_backward<T: Real>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = dy.shape();
    let (h, w) = (s.height / factor, s.width / factor);
    let mut out = Tensor::zeros(s.with_spatial(h, w));
    for c in 0..s.channels {
        for n in 0..s.batch {
            let src = dy.plane(c, n);
            let dst = out.plane_mut(c, n);
            for y in 0..s.height {
                for x in 0..s.width {
                    dst[(y / factor) * w + x / factor] += src[y * s.width + x];
                }
            }
        }
    }
    out
}

/// Source taps for half-pixel-centred bilinear resampling along one axis.
fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.height * factor, s.width * factor);
    let ty = bilinear_taps(s.height, factor);
    let tx = bilinear_taps(s.width, factor);
    let mut out = Tensor::zeros(s.with_spatial(h, w));
    for c in 0..s.channels {
        for n in 0..s.batch {
            let src = x.plane(c, n);
            let dst = out.plane_mut(c, n);
            for (yo, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::lit(ly);
                for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::lit(lx);
                    let top = src[y0 * s.width + x0] * (T::one() - lx) + src[y0 * s.width + x1] * lx;
                    let bot = src[y1 * s.width + x0] * (T::one() - lx) + src[y1 * s.width + x1] * lx;
                    dst[yo * w + xo] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
    }
    out
}

pub fn bilinear_upsample_backward<T: Real>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = dy.shape();
    let (h, w) = (s.height / factor, s.width / factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = Tensor::zeros(s.with_spatial(h, w));
    for c in 0..s.channels {
        for n in 0..s.batch {
            let src = dy.plane(c, n);
            let dst = out.plane_mut(c, n);
            for (yo, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::lit(ly);
                for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::lit(lx);
                    let g = src[yo * s.width + xo];
                    dst[y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                    dst[y0 * w + x1] += g * (T::one() - ly) * lx;
                    dst[y1 * w + x0] += g * ly * (T::one() - lx);
                    dst[y1 * w + x1] += g * ly * lx;
                }
            }
        }
    }
    out
}

/// 3x3 stride-2 max pooling with one pixel of implicit `-inf` padding.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    argmax: Option<(Shape, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let s = x.shape();
        let (oh, ow) = ((s.height - 1) / 2 + 1, (s.width - 1) / 2 + 1);
        let mut out = Tensor::zeros(s.with_spatial(oh, ow));
        let mut argmax = Vec::with_capacity(out.numel());
        for c in 0..s.channels {
            for n in 0..s.batch {
                let src = x.plane(c, n);
                let dst = out.plane_mut(c, n);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = usize::MAX;
                        for iy in (2 * oy).saturating_sub(1)..(2 * oy + 2).min(s.height) {
                            for ix in (2 * ox).saturating_sub(1)..(2 * ox + 2).min(s.width) {
                                let i = iy * s.width + ix;
                                if best == usize::MAX || src[i] > src[best] {
                                    best = i;
                                }
                            }
                        }
                        dst[oy * ow + ox] = src[best];
                        argmax.push(best);
                    }
                }
            }
        }
        super::kinks::push_indices(&argmax);
        if mode == Mode::Train {
            self.argmax = Some((s, argmax));
        }
        out
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (s, argmax) = self.argmax.take().expect("MaxPool2d::backward without forward");
        let mut dx = Tensor::zeros(s);
        let per = dy.shape().plane();
        for (p, (g, idx)) in dy.data().chunks(per).zip(argmax.chunks(per)).enumerate() {
            let dst = &mut dx.data_mut()[p * s.plane()..][..s.plane()];
            for (&gv, &i) in g.iter().zip(idx) {
                dst[i] += gv;
            }
        }
        dx
    }
}
