//! Forward and backward kernels for the convolution and normalization ops.

use crate::real::{matmul, MatRef, Real};

/// Geometry of a batched 2-D convolution with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// `floor((size + 2 pad - k) / stride) + 1`, or `None` when non-positive.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

// col[(c*k + ki)*k + kj][n*ho*wo + oh*wo + ow] = x[n, c, oh*s + ki - p, ow*s + kj - p]
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (hw, howo, l) = (g.h * g.w, g.ho * g.wo, g.cols());
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut col[row * l..(row + 1) * l];
                for n in 0..g.n {
                    let src = &x[(n * g.cin + c) * hw..(n * g.cin + c + 1) * hw];
                    for oh in 0..g.ho {
                        let dst = &mut dst_row[n * howo + oh * g.wo..n * howo + (oh + 1) * g.wo];
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            *d = if iw < 0 || iw >= g.w as isize {
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
}

fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (hw, howo, l) = (g.h * g.w, g.ho * g.wo, g.cols());
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &col[row * l..(row + 1) * l];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.cin + c) * hw..(n * g.cin + c + 1) * hw];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[n * howo + oh * g.wo..n * howo + (oh + 1) * g.wo];
                        let dst_row = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for (ow, &v) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst_row[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output in `N x Cout x Ho x Wo` layout.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (r, l, howo) = (g.rows(), g.cols(), g.ho * g.wo);
    let mut col = vec![T::zero(); r * l];
    im2col(x, g, &mut col);
    let mut ymat = vec![T::zero(); g.cout * l];
    matmul(MatRef::new(weight, g.cout, r), MatRef::new(&col, r, l), &mut ymat, T::one(), T::zero());
    let mut y = vec![T::zero(); g.n * g.cout * howo];
    for co in 0..g.cout {
        let b = bias.map_or(T::zero(), |b| b[co]);
        for n in 0..g.n {
            let src = &ymat[co * l + n * howo..co * l + (n + 1) * howo];
            let dst = &mut y[(n * g.cout + co) * howo..(n * g.cout + co + 1) * howo];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (r, l, howo) = (g.rows(), g.cols(), g.ho * g.wo);
    let mut dymat = vec![T::zero(); g.cout * l];
    for co in 0..g.cout {
        for n in 0..g.n {
            dymat[co * l + n * howo..co * l + (n + 1) * howo]
                .copy_from_slice(&dy[(n * g.cout + co) * howo..(n * g.cout + co + 1) * howo]);
        }
    }
    let db = need.2.then(|| {
        (0..g.cout)
            .map(|co| dymat[co * l..(co + 1) * l].iter().copied().sum())
            .collect()
    });
    let dw = need.1.then(|| {
        let mut col = vec![T::zero(); r * l];
        im2col(x, g, &mut col);
        let mut dw = vec![T::zero(); g.cout * r];
        matmul(MatRef::new(&dymat, g.cout, l), MatRef::new(&col, r, l).t(), &mut dw, T::one(), T::zero());
        dw
    });
    let dx = need.0.then(|| {
        let mut dcol = vec![T::zero(); r * l];
        matmul(MatRef::new(weight, g.cout, r).t(), MatRef::new(&dymat, g.cout, l), &mut dcol, T::one(), T::zero());
        let mut dx = vec![T::zero(); x.len()];
        col2im_add(&dcol, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Per-channel statistics over `N x C x S` data.
pub(crate) fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let m = T::of((n * s) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for i in 0..n {
            acc += x[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum::<T>();
        }
        let mu = acc / m;
        let mut sq = T::zero();
        for i in 0..n {
            for &v in &x[(i * c + ch) * s..(i * c + ch + 1) * s] {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    (mean, var)
}
