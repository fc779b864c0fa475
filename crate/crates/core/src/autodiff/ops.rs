//! Differentiable operations on the tape.

use super::graph::{Graph, Var};
use super::kernels;
use crate::linalg::{gemm, inverse_and_det, Mat};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Elementwise binary operation between a feature map and a per-channel
/// vector of shape `[C]` or `[B, C]` broadcast over space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChanOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// `(outer, mid, inner)` sizes around axis 1.
fn axis1(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "axis-1 op on shape {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<'p, T: Scalar> Graph<'p, T> {
    fn unary(&self, a: &Var<T>, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
        let x = a.rc();
        let y = x.map(f);
        let y_rc = std::sync::Arc::new(y.clone());
        self.record(y, &[a], move |g, _| {
            let mut dx = Tensor::zeros(x.shape());
            for (((d, &gv), &xv), &yv) in dx
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(x.data())
                .zip(y_rc.data())
            {
                *d = gv * df(xv, yv);
            }
            vec![Some(dx)]
        })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let y = a.value().zip_map(b.value(), |x, y| x + y);
        self.record(y, &[a, b], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let y = a.value().zip_map(b.value(), |x, y| x - y);
        self.record(y, &[a, b], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))]
        })
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let (x, z) = (a.rc(), b.rc());
        let y = x.zip_map(&z, |p, q| p * q);
        self.record(y, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&z, |gv, q| gv * q)),
                need[1].then(|| g.zip_map(&x, |gv, p| gv * p)),
            ]
        })
    }

    pub fn scale(&self, a: &Var<T>, k: T) -> Var<T> {
        self.record(a.value().map(|v| v * k), &[a], move |g, _| {
            vec![Some(g.map(|v| v * k))]
        })
    }

    pub fn add_scalar(&self, a: &Var<T>, k: T) -> Var<T> {
        self.record(a.value().map(|v| v + k), &[a], |g, _| vec![Some(g.clone())])
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        self.unary(
            a,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self, a: &Var<T>) -> Var<T> {
        self.unary(
            a,
            |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self, a: &Var<T>) -> Var<T> {
        self.unary(a, |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&self, a: &Var<T>) -> Var<T> {
        self.unary(a, |v| v * v, |x, _| x + x)
    }

    /// `max(sqrt(v), eps)`; no gradient flows through the floor.
    pub fn sqrt_floor(&self, a: &Var<T>, eps: T) -> Var<T> {
        self.unary(
            a,
            move |v| v.max(T::zero()).sqrt().max(eps),
            move |_, y| {
                if y > eps {
                    T::lit(0.5) / y
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let shape = a.shape().to_vec();
        self.record(Tensor::scalar(a.value().sum()), &[a], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&self, a: &Var<T>) -> Var<T> {
        let n = T::from_usize_lossy(a.value().len().max(1));
        let s = self.sum(a);
        self.scale(&s, T::one() / n)
    }

    /// Euclidean norm of all elements; the gradient at the origin is zero.
    pub fn l2_norm(&self, a: &Var<T>) -> Var<T> {
        let x = a.rc();
        let norm = x.sq_norm().sqrt();
        self.record(Tensor::scalar(norm), &[a], move |g, _| {
            let k = if norm > T::zero() {
                g.data()[0] / norm
            } else {
                T::zero()
            };
            vec![Some(x.map(|v| v * k))]
        })
    }

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Var<T> {
        let old = a.shape().to_vec();
        let y = a.value().clone().reshape(shape).expect("reshape size");
        self.record(y, &[a], move |g, _| {
            vec![Some(g.clone().reshape(&old).unwrap())]
        })
    }

    /// `x (op) s` with `s` of shape `[C]` or `[B, C]` broadcast over space.
    #[allow(clippy::needless_range_loop)]
    pub fn channel(&self, x: &Var<T>, s: &Var<T>, op: ChanOp) -> Var<T> {
        let (b, c, hw) = axis1(x.shape());
        let per_batch = match s.shape() {
            [n] if *n == c => false,
            [nb, n] if *nb == b && *n == c => true,
            other => panic!("channel op: vector {other:?} does not match feature map {:?}", x.shape()),
        };
        let sidx = move |bi: usize, ci: usize| if per_batch { bi * c + ci } else { ci };
        let (xv, sv) = (x.rc(), s.rc());
        let mut y = Tensor::zeros(x.shape());
        {
            let yd = y.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let k = sv.data()[sidx(bi, ci)];
                    let base = (bi * c + ci) * hw;
                    for p in base..base + hw {
                        let v = xv.data()[p];
                        yd[p] = match op {
                            ChanOp::Add => v + k,
                            ChanOp::Sub => v - k,
                            ChanOp::Mul => v * k,
                            ChanOp::Div => v / k,
                        };
                    }
                }
            }
        }
        let s_shape = sv.shape().to_vec();
        self.record(y, &[x, s], move |g, need| {
            let mut dx = need[0].then(|| Tensor::zeros(xv.shape()));
            let mut ds = need[1].then(|| Tensor::zeros(&s_shape));
            for bi in 0..b {
                for ci in 0..c {
                    let si = sidx(bi, ci);
                    let k = sv.data()[si];
                    let base = (bi * c + ci) * hw;
                    let gs = &g.data()[base..base + hw];
                    if let Some(dx) = dx.as_mut() {
                        let d = &mut dx.data_mut()[base..base + hw];
                        match op {
                            ChanOp::Add | ChanOp::Sub => d.copy_from_slice(gs),
                            ChanOp::Mul => d.iter_mut().zip(gs).for_each(|(d, &gv)| *d = gv * k),
                            ChanOp::Div => d.iter_mut().zip(gs).for_each(|(d, &gv)| *d = gv / k),
                        }
                    }
                    if let Some(ds) = ds.as_mut() {
                        let xs = &xv.data()[base..base + hw];
                        let acc = match op {
                            ChanOp::Add => gs.iter().copied().sum(),
                            ChanOp::Sub => -gs.iter().copied().sum::<T>(),
                            ChanOp::Mul => gs.iter().zip(xs).map(|(&gv, &xv)| gv * xv).sum(),
                            ChanOp::Div => {
                                -gs.iter().zip(xs).map(|(&gv, &xv)| gv * xv).sum::<T>() / (k * k)
                            }
                        };
                        ds.data_mut()[si] += acc;
                    }
                }
            }
            vec![dx, ds]
        })
    }

    /// Per-(batch, channel) mean over all trailing axes, shape `[B, C]`.
    pub fn spatial_mean(&self, x: &Var<T>) -> Var<T> {
        let (b, c, hw) = axis1(x.shape());
        let shape = x.shape().to_vec();
        let n = T::from_usize_lossy(hw);
        let y = Tensor::from_fn(&[b, c], |i| {
            x.value().data()[i * hw..(i + 1) * hw].iter().copied().sum::<T>() / n
        });
        self.record(y, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            for (i, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                chunk.fill(g.data()[i] / n);
            }
            vec![Some(dx)]
        })
    }

    /// `x w^T + b` for `x: [B, F]`, `w: [O, F]`, `b: [O]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Var<T> {
        let (bs, f) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[0];
        assert_eq!(w.shape()[1], f, "linear: input width mismatch");
        let (xv, wv) = (x.rc(), w.rc());
        let mut y = Tensor::from_fn(&[bs, o], |i| b.value().data()[i % o]);
        gemm(
            Mat::new(xv.data(), bs, f),
            Mat::new(wv.data(), o, f).t(),
            T::one(),
            y.data_mut(),
        );
        self.record(y, &[x, w, b], move |g, need| {
            let gm = Mat::new(g.data(), bs, o);
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(&[bs, f]);
                gemm(gm, Mat::new(wv.data(), o, f), T::zero(), dx.data_mut());
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = Tensor::zeros(&[o, f]);
                gemm(gm.t(), Mat::new(xv.data(), bs, f), T::zero(), dw.data_mut());
                dw
            });
            let db = need[2].then(|| {
                Tensor::from_fn(&[o], |j| (0..bs).map(|i| g.data()[i * o + j]).sum())
            });
            vec![dx, dw, db]
        })
    }

    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Var<T> {
        let (xv, wv) = (x.rc(), w.rc());
        let y = kernels::conv2d_forward(&xv, &wv, b.map(|b| b.value()), stride, pad);
        let has_bias = b.is_some();
        let back = move |g: &Tensor<T>, need: &[bool]| {
            let (dx, dw, db) = kernels::conv2d_backward(
                &xv,
                &wv,
                g,
                stride,
                pad,
                [need[0], need[1], has_bias && need[2]],
            );
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(db);
            }
            out
        };
        match b {
            Some(b) => self.record(y, &[x, w, b], back),
            None => self.record(y, &[x, w], back),
        }
    }

    pub fn maxpool2(&self, x: &Var<T>) -> Var<T> {
        let (y, arg) = kernels::maxpool2_forward(x.value());
        let shape = x.shape().to_vec();
        self.record(y, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            for (o, &src) in arg.iter().enumerate() {
                dx.data_mut()[src] += g.data()[o];
            }
            vec![Some(dx)]
        })
    }

    /// Concatenation along axis 1. All parts share every other axis.
    pub fn concat1(&self, parts: &[&Var<T>]) -> Var<T> {
        let (b, _, inner) = axis1(parts[0].shape());
        let mids: Vec<usize> = parts.iter().map(|p| axis1(p.shape()).1).collect();
        let total: usize = mids.iter().sum();
        let mut shape = parts[0].shape().to_vec();
        shape[1] = total;
        let mut y = Tensor::zeros(&shape);
        {
            let yd = y.data_mut();
            for bi in 0..b {
                let mut off = 0;
                for (p, &m) in parts.iter().zip(&mids) {
                    let (pb, _, pinner) = axis1(p.shape());
                    assert!(pb == b && pinner == inner, "concat1 shape mismatch");
                    let src = &p.value().data()[bi * m * inner..(bi + 1) * m * inner];
                    let dst_start = (bi * total + off) * inner;
                    yd[dst_start..dst_start + m * inner].copy_from_slice(src);
                    off += m;
                }
            }
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        self.record(y, parts, move |g, need| {
            let mut off = 0;
            let mut out = Vec::with_capacity(shapes.len());
            for (k, shape) in shapes.iter().enumerate() {
                let m = shape[1];
                if need[k] {
                    let mut d = Tensor::zeros(shape);
                    for bi in 0..b {
                        let src = (bi * total + off) * inner;
                        d.data_mut()[bi * m * inner..(bi + 1) * m * inner]
                            .copy_from_slice(&g.data()[src..src + m * inner]);
                    }
                    out.push(Some(d));
                } else {
                    out.push(None);
                }
                off += m;
            }
            out
        })
    }

    /// Indices `start..end` of axis 1.
    pub fn slice1(&self, x: &Var<T>, start: usize, end: usize) -> Var<T> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather1(x, &idx)
    }

    /// Selects entries of axis 1 in the given order.
    pub fn gather1(&self, x: &Var<T>, idx: &[usize]) -> Var<T> {
        let (b, m, inner) = axis1(x.shape());
        let mut shape = x.shape().to_vec();
        shape[1] = idx.len();
        let n = idx.len();
        let mut y = Tensor::zeros(&shape);
        for bi in 0..b {
            for (k, &j) in idx.iter().enumerate() {
                assert!(j < m, "gather1 index {j} out of range {m}");
                let src = (bi * m + j) * inner;
                let dst = (bi * n + k) * inner;
                y.data_mut()[dst..dst + inner].copy_from_slice(&x.value().data()[src..src + inner]);
            }
        }
        let idx = idx.to_vec();
        let xshape = x.shape().to_vec();
        self.record(y, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&xshape);
            for bi in 0..b {
                for (k, &j) in idx.iter().enumerate() {
                    let src = (bi * n + k) * inner;
                    let dst = (bi * m + j) * inner;
                    for t in 0..inner {
                        dx.data_mut()[dst + t] += g.data()[src + t];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Euclidean norm over the batch axis of a `[B, C]` tensor, giving `[C]`.
    pub fn batch_l2(&self, x: &Var<T>) -> Var<T> {
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let xv = x.rc();
        let y = Tensor::from_fn(&[c], |j| {
            (0..b).map(|i| xv.data()[i * c + j].powi(2)).sum::<T>().sqrt()
        });
        let yv = y.clone();
        self.record(y, &[x], move |g, _| {
            let dx = Tensor::from_fn(&[b, c], |k| {
                let j = k % c;
                let n = yv.data()[j];
                if n > T::zero() {
                    g.data()[j] * xv.data()[k] / n
                } else {
                    T::zero()
                }
            });
            vec![Some(dx)]
        })
    }

    pub fn squeeze(&self, x: &Var<T>, f: usize) -> Var<T> {
        let y = kernels::squeeze(x.value(), f);
        self.record(y, &[x], move |g, _| vec![Some(kernels::unsqueeze(g, f))])
    }

    pub fn unsqueeze(&self, x: &Var<T>, f: usize) -> Var<T> {
        let y = kernels::unsqueeze(x.value(), f);
        self.record(y, &[x], move |g, _| vec![Some(kernels::squeeze(g, f))])
    }

    /// Applies the `C x C` matrix `w` across channels at every site.
    pub fn channel_mix(&self, x: &Var<T>, w: &Var<T>) -> Var<T> {
        let (b, c, hw) = axis1(x.shape());
        assert_eq!(w.shape(), &[c, c], "channel_mix weight shape");
        let (xv, wv) = (x.rc(), w.rc());
        let mut y = Tensor::zeros(x.shape());
        for bi in 0..b {
            let r = bi * c * hw..(bi + 1) * c * hw;
            gemm(
                Mat::new(wv.data(), c, c),
                Mat::new(&xv.data()[r.clone()], c, hw),
                T::zero(),
                &mut y.data_mut()[r],
            );
        }
        self.record(y, &[x, w], move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(xv.shape());
                for bi in 0..b {
                    let r = bi * c * hw..(bi + 1) * c * hw;
                    gemm(
                        Mat::new(wv.data(), c, c).t(),
                        Mat::new(&g.data()[r.clone()], c, hw),
                        T::zero(),
                        &mut dx.data_mut()[r],
                    );
                }
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = Tensor::zeros(&[c, c]);
                for bi in 0..b {
                    let r = bi * c * hw..(bi + 1) * c * hw;
                    gemm(
                        Mat::new(&g.data()[r.clone()], c, hw),
                        Mat::new(&xv.data()[r], c, hw).t(),
                        T::one(),
                        dw.data_mut(),
                    );
                }
                dw
            });
            vec![dx, dw]
        })
    }

    /// Matrix inverse; the caller guarantees the matrix is non-singular.
    pub fn inverse(&self, w: &Var<T>) -> Var<T> {
        let n = w.shape()[0];
        let (inv, _) = inverse_and_det(w.value());
        let inv_c = inv.clone();
        self.record(inv, &[w], move |g, _| {
            // d(W^-1) = -W^-1 dW W^-1, so dL/dW = -W^-T G W^-T.
            let mut tmp = vec![T::zero(); n * n];
            gemm(
                Mat::new(inv_c.data(), n, n).t(),
                Mat::new(g.data(), n, n),
                T::zero(),
                &mut tmp,
            );
            let mut dw = Tensor::zeros(&[n, n]);
            gemm(
                Mat::new(&tmp, n, n),
                Mat::new(inv_c.data(), n, n).t(),
                T::zero(),
                dw.data_mut(),
            );
            vec![Some(dw.map(|v| -v))]
        })
    }

    /// Horizontal forward differences `x[.., j+1] - x[.., j]`, width `W - 1`.
    pub fn diff_w(&self, x: &Var<T>) -> Var<T> {
        let (b, c, h, w) = x.value().d4();
        let xd = x.rc();
        let y = Tensor::from_fn(&[b, c, h, w - 1], |k| {
            let j = k % (w - 1);
            let row = k / (w - 1);
            xd.data()[row * w + j + 1] - xd.data()[row * w + j]
        });
        self.record(y, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            for (k, &gv) in g.data().iter().enumerate() {
                let j = k % (w - 1);
                let row = k / (w - 1);
                dx.data_mut()[row * w + j + 1] += gv;
                dx.data_mut()[row * w + j] -= gv;
            }
            vec![Some(dx)]
        })
    }

    /// Vertical forward differences `x[.., i+1, :] - x[.., i, :]`, height `H - 1`.
    pub fn diff_h(&self, x: &Var<T>) -> Var<T> {
        let (b, c, h, w) = x.value().d4();
        let xd = x.rc();
        let y = Tensor::from_fn(&[b, c, h - 1, w], |k| {
            let j = k % w;
            let i = (k / w) % (h - 1);
            let plane = k / (w * (h - 1));
            let base = plane * h * w;
            xd.data()[base + (i + 1) * w + j] - xd.data()[base + i * w + j]
        });
        self.record(y, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            for (k, &gv) in g.data().iter().enumerate() {
                let j = k % w;
                let i = (k / w) % (h - 1);
                let base = (k / (w * (h - 1))) * h * w;
                dx.data_mut()[base + (i + 1) * w + j] += gv;
                dx.data_mut()[base + i * w + j] -= gv;
            }
            vec![Some(dx)]
        })
    }

    /// Top-left `h x w` window of a 4-D tensor.
    pub fn crop(&self, x: &Var<T>, h: usize, w: usize) -> Var<T> {
        let (b, c, ih, iw) = x.value().d4();
        assert!(h <= ih && w <= iw, "crop {h}x{w} larger than {ih}x{iw}");
        let xd = x.rc();
        let y = Tensor::from_fn(&[b, c, h, w], |k| {
            let (plane, i, j) = (k / (h * w), (k / w) % h, k % w);
            xd.data()[(plane * ih + i) * iw + j]
        });
        self.record(y, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&[b, c, ih, iw]);
            for (k, &gv) in g.data().iter().enumerate() {
                let (plane, i, j) = (k / (h * w), (k / w) % h, k % w);
                dx.data_mut()[(plane * ih + i) * iw + j] = gv;
            }
            vec![Some(dx)]
        })
    }
}
