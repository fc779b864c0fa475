//! Raw forward/backward kernels on contiguous NCHW buffers.

use crate::linalg::{gemm, Mat};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for c in 0..g.cin {
        let xc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let drow = &mut xc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            drow[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding. `w` is `(cout, cin, kh, kw)`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (b, cin, h, wd) = x.d4();
    let (cout, wcin, kh, kw) = w.d4();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let g = ConvGeom {
        cin,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * plane]
    };
    let wm = Mat::new(w.data(), cout, g.col_rows());
    for bi in 0..b {
        let xb = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let ob = &mut out.data_mut()[bi * cout * plane..(bi + 1) * cout * plane];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(wm, Mat::new(xb, cin, plane), beta, ob);
        } else {
            im2col(xb, &g, &mut col);
            gemm(wm, Mat::new(&col, g.col_rows(), plane), beta, ob);
        }
    }
    out
}

/// Optional gradients for input, weight and bias.
pub type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (b, cin, h, wd) = x.d4();
    let (cout, _, kh, kw) = w.d4();
    let g = ConvGeom {
        cin,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let rows = g.col_rows();
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| Tensor::zeros(w.shape()));
    let db = need[2].then(|| {
        let mut db = Tensor::zeros(&[cout]);
        for bi in 0..b {
            for co in 0..cout {
                let s: T = grad.data()[(bi * cout + co) * plane..(bi * cout + co + 1) * plane]
                    .iter()
                    .copied()
                    .sum();
                db.data_mut()[co] += s;
            }
        }
        db
    });
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * plane }];
    let mut dcol = vec![T::zero(); if need[0] && !g.is_pointwise() { rows * plane } else { 0 }];
    let wm = Mat::new(w.data(), cout, rows);
    for bi in 0..b {
        let xb = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let gb = Mat::new(&grad.data()[bi * cout * plane..(bi + 1) * cout * plane], cout, plane);
        if let Some(dw) = dw.as_mut() {
            if g.is_pointwise() {
                gemm(gb, Mat::new(xb, cin, plane).t(), T::one(), dw.data_mut());
            } else {
                im2col(xb, &g, &mut col);
                gemm(gb, Mat::new(&col, rows, plane).t(), T::one(), dw.data_mut());
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if g.is_pointwise() {
                gemm(wm.t(), gb, T::zero(), dxb);
            } else {
                gemm(wm.t(), gb, T::zero(), &mut dcol);
                col2im(&dcol, &g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2; returns the pooled map and the flat
/// argmax index of every output element.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (b, c, h, w) = x.d4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut arg = vec![0usize; b * c * ho * wo];
    let xd = x.data();
    for bc in 0..b * c {
        for i in 0..ho {
            for j in 0..wo {
                let base = bc * h * w;
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = (bc * ho + i) * wo + j;
                out.data_mut()[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// Space-to-channel rearrangement. Output channel `c * f^2 + di * f + dj`
/// at `(i, j)` holds input channel `c` at `(i * f + di, j * f + dj)`, so
/// each `f x f` neighbourhood is unrolled row-major into a channel group.
pub fn squeeze<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (b, c, h, w) = x.d4();
    let (ho, wo) = (h / f, w / f);
    let mut out = Tensor::zeros(&[b, c * f * f, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let oc = ci * f * f + (i % f) * f + j % f;
                    let o = ((bi * c * f * f + oc) * ho + i / f) * wo + j / f;
                    dst[o] = src[((bi * c + ci) * h + i) * w + j];
                }
            }
        }
    }
    out
}

/// Exact inverse of [`squeeze`].
pub fn unsqueeze<T: Scalar>(y: &Tensor<T>, f: usize) -> Tensor<T> {
    let (b, cf, ho, wo) = y.d4();
    let c = cf / (f * f);
    let (h, w) = (ho * f, wo * f);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let src = y.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let oc = ci * f * f + (i % f) * f + j % f;
                    dst[((bi * c + ci) * h + i) * w + j] = src[((bi * cf + oc) * ho + i / f) * wo + j / f];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, cin, h, wd) = x.d4();
        let (cout, _, kh, kw) = w.d4();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Tensor::from_fn(&[b, cout, ho, wo], |idx| {
            let oj = idx % wo;
            let oi = (idx / wo) % ho;
            let co = (idx / (wo * ho)) % cout;
            let bi = idx / (wo * ho * cout);
            let mut s = 0.0;
            for ci in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                            s += x.at4(bi, ci, ii as usize, jj as usize) * w.at4(co, ci, ki, kj);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, k, k], 1.0, &mut rng);
            let got = conv2d_forward(&x, &w, None, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={stride} p={pad}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, conv^T(g)> and linear in w likewise.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = Tensor::<f64>::randn(&[2, 3, 6, 5], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, k, k], 1.0, &mut rng);
            let y = conv2d_forward(&x, &w, None, stride, pad);
            let g = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
            let (dx, dw, _) = conv2d_backward(&x, &w, &g, stride, pad, [true, true, false]);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rx: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
            let rw: f64 = w.data().iter().zip(dw.unwrap().data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rx).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - rw).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }
}
