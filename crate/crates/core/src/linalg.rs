//! Small dense linear algebra: strided GEMM, LU inverse/determinant and
//! random orthogonal matrices.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    /// Rows and columns of the *stored* matrix.
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T: Scalar> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            trans: !self.trans,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out <- a b + beta * out`, with `out` row-major `m x n`.
pub(crate) fn gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n, "gemm output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: operand sizes are checked above and `out` is a distinct
    // mutable slice.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// LU factorization with partial pivoting of a square row-major matrix.
struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    sign: T,
}

fn lu<T: Scalar>(a: &[T], n: usize) -> Lu<T> {
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = T::one();
    for col in 0..n {
        let mut piv = col;
        let mut best = lu[col * n + col].abs();
        for r in col + 1..n {
            let v = lu[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if piv != col {
            for j in 0..n {
                lu.swap(col * n + j, piv * n + j);
            }
            perm.swap(col, piv);
            sign = -sign;
        }
        let d = lu[col * n + col];
        if d == T::zero() {
            continue;
        }
        for r in col + 1..n {
            let f = lu[r * n + col] / d;
            lu[r * n + col] = f;
            for j in col + 1..n {
                let u = lu[col * n + j];
                lu[r * n + j] -= f * u;
            }
        }
    }
    Lu { n, lu, perm, sign }
}

impl<T: Scalar> Lu<T> {
    fn det(&self) -> T {
        (0..self.n).fold(self.sign, |acc, i| acc * self.lu[i * self.n + i])
    }

    #[allow(clippy::needless_range_loop)]
    fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            for (i, c) in col.iter_mut().enumerate() {
                *c = if self.perm[i] == j { T::one() } else { T::zero() };
            }
            for i in 0..n {
                let mut s = col[i];
                for k in 0..i {
                    s -= self.lu[i * n + k] * col[k];
                }
                col[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in i + 1..n {
                    s -= self.lu[i * n + k] * col[k];
                }
                col[i] = s / self.lu[i * n + i];
            }
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}

/// Determinant of a square matrix.
pub fn det<T: Scalar>(m: &Tensor<T>) -> T {
    let n = m.shape()[0];
    lu(m.data(), n).det()
}

/// `(inverse, determinant)` of a square matrix. The inverse is meaningless
/// when the determinant vanishes; callers check it first.
pub fn inverse_and_det<T: Scalar>(m: &Tensor<T>) -> (Tensor<T>, T) {
    let n = m.shape()[0];
    let f = lu(m.data(), n);
    let d = f.det();
    (Tensor::from_vec(&[n, n], f.inverse()).unwrap(), d)
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor<T> {
    loop {
        let g = Tensor::<f64>::randn(&[n, n], 1.0, rng);
        let mut q = g.into_vec();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                for k in 0..n {
                    q[i * n + k] -= dot * q[j * n + k];
                }
            }
            let norm = (0..n).map(|k| q[i * n + k].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for k in 0..n {
                q[i * n + k] /= norm;
            }
        }
        if ok {
            return Tensor::from_vec(&[n, n], q).unwrap().cast();
        }
    }
}
