//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! Every model computation is written once against [`Graph`]. A graph from
//! [`Graph::inference`] records nothing, so the same code serves as the
//! plain forward path.

mod graph;
pub mod kernels;
mod ops;

pub use graph::{Gradients, Graph, Var};
pub use ops::ChanOp;

use crate::scalar::Scalar;
#[cfg(doc)]
use crate::tensor::Tensor;

/// Floor applied to per-channel standard deviations before dividing.
pub const STAT_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<'_, T> {
    /// Per-(batch, channel) mean and standard deviation over space, both
    /// `[B, C]`. The deviation is the population one, floored at
    /// [`STAT_EPS`].
    pub fn channel_stats(&self, x: &Var<T>) -> (Var<T>, Var<T>) {
        let mu = self.spatial_mean(x);
        let centered = self.channel(x, &mu, ChanOp::Sub);
        let var = self.spatial_mean(&self.square(&centered));
        let sigma = self.sqrt_floor(&var, T::lit(STAT_EPS));
        (mu, sigma)
    }

    /// Channel-wise normalization `(x - mu) / sigma`.
    pub fn normalize_channels(&self, x: &Var<T>) -> Var<T> {
        let mu = self.spatial_mean(x);
        let centered = self.channel(x, &mu, ChanOp::Sub);
        let var = self.spatial_mean(&self.square(&centered));
        let sigma = self.sqrt_floor(&var, T::lit(STAT_EPS));
        self.channel(&centered, &sigma, ChanOp::Div)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(w * f(x)))/dx in f64.
    fn check(f: impl Fn(&Graph<f64>, &Var<f64>) -> Var<f64>, x: Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probe = {
            let g = Graph::inference();
            let y = f(&g, &g.constant(x.clone()));
            Tensor::<f64>::randn(y.shape(), 1.0, &mut rng)
        };
        let objective = |t: &Tensor<f64>| {
            let g = Graph::inference();
            let y = f(&g, &g.constant(t.clone()));
            y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = f(&g, &xv);
        let w = g.constant(probe.clone());
        let loss = g.sum(&g.mul(&y, &w));
        let grads = g.backward(&loss);
        let analytic = grads.wrt_or_zeros(&xv);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "coordinate {i}: analytic {a}, numeric {fd}"
            );
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn elementwise_gradients() {
        check(|g, x| g.softplus(x), rand(&[2, 3], 1));
        check(|g, x| g.square(x), rand(&[2, 3], 2));
        check(|g, x| g.relu(x), rand(&[2, 3], 3));
        check(|g, x| g.abs(x), rand(&[2, 3], 4));
        check(|g, x| g.sqrt_floor(&g.square(x), 1e-5), rand(&[5], 5));
        check(|g, x| g.l2_norm(x), rand(&[2, 3], 6));
    }

    #[test]
    fn structural_gradients() {
        check(|g, x| g.squeeze(x, 2), rand(&[1, 2, 4, 4], 7));
        check(|g, x| g.unsqueeze(x, 2), rand(&[1, 8, 2, 2], 8));
        check(|g, x| g.diff_w(x), rand(&[1, 2, 3, 4], 9));
        check(|g, x| g.diff_h(x), rand(&[1, 2, 3, 4], 10));
        check(|g, x| g.crop(x, 2, 3), rand(&[1, 2, 3, 4], 12));
        check(|g, x| g.maxpool2(x), rand(&[1, 2, 4, 4], 11));
        check(|g, x| g.slice1(x, 1, 3), rand(&[2, 4, 2, 2], 12));
        check(|g, x| g.gather1(x, &[2, 0, 2]), rand(&[2, 4], 13));
        check(|g, x| g.batch_l2(x), rand(&[3, 4], 14));
        check(
            |g, x| {
                let a = g.slice1(x, 0, 1);
                g.concat1(&[x, &a])
            },
            rand(&[2, 3, 2], 15),
        );
    }

    #[test]
    fn channel_op_gradients() {
        for op in [ChanOp::Add, ChanOp::Sub, ChanOp::Mul, ChanOp::Div] {
            let s = rand(&[2, 3], 21).map(|v| v.abs() + 0.5);
            let s1 = s.clone();
            check(move |g, x| g.channel(x, &g.constant(s1.clone()), op), rand(&[2, 3, 2, 2], 20));
            let x = rand(&[2, 3, 2, 2], 22);
            check(move |g, sv| g.channel(&g.constant(x.clone()), sv, op), s.clone());
            let x = rand(&[2, 3, 2, 2], 23);
            let s3 = rand(&[3], 24).map(|v| v.abs() + 0.5);
            check(move |g, sv| g.channel(&g.constant(x.clone()), sv, op), s3);
        }
    }

    #[test]
    fn linear_conv_mix_inverse_gradients() {
        let w = rand(&[4, 3], 31);
        let b = rand(&[4], 32);
        check(
            move |g, x| g.linear(x, &g.constant(w.clone()), &g.constant(b.clone())),
            rand(&[2, 3], 33),
        );
        let x = rand(&[2, 3], 34);
        let b = rand(&[4], 35);
        check(
            move |g, w| g.linear(&g.constant(x.clone()), w, &g.constant(b.clone())),
            rand(&[4, 3], 36),
        );
        let w = rand(&[2, 3, 3, 3], 37);
        check(
            move |g, x| g.conv2d(x, &g.constant(w.clone()), None, 2, 1),
            rand(&[1, 3, 5, 4], 38),
        );
        let x = rand(&[1, 3, 4, 4], 39);
        check(
            move |g, w| g.conv2d(&g.constant(x.clone()), w, None, 1, 1),
            rand(&[2, 3, 3, 3], 40),
        );
        let w = rand(&[3, 3], 41);
        check(move |g, x| g.channel_mix(x, &g.constant(w.clone())), rand(&[2, 3, 2, 2], 42));
        let x = rand(&[2, 3, 2, 2], 43);
        check(move |g, w| g.channel_mix(&g.constant(x.clone()), w), rand(&[3, 3], 44));
        check(
            |g, w| g.inverse(w),
            rand(&[3, 3], 45).zip_map(&Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 3.0 } else { 0.0 }), |a, b| a + b),
        );
    }

    #[test]
    fn statistics_gradients() {
        check(|g, x| g.normalize_channels(x), rand(&[2, 3, 3, 3], 51));
        check(
            |g, x| {
                let (m, s) = g.channel_stats(x);
                g.concat1(&[&m, &s])
            },
            rand(&[2, 3, 3, 3], 52),
        );
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let w = Tensor::<f64>::from_vec(&[1], vec![3.0]).unwrap();
        let g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        let y = g.mul(&a, &b);
        let grads = g.backward(&g.sum(&y));
        assert_eq!(grads.wrt(&a).unwrap().data(), &[6.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let w = Tensor::<f64>::ones(&[2]);
        let g = Graph::inference();
        let v = g.param(&w);
        assert!(!v.requires_grad());
        assert!(!g.square(&v).requires_grad());
    }
}
