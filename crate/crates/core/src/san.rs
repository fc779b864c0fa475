//! Style-aware normalization.
//!
//! Content is the channel-wise normalized feature map and style is a vector
//! of channel statistics. [`SanModule::apply`] renormalizes the flow
//! features with content-guided affine (CGA) parameters predicted from the
//! source statistics and the target style. Because the output is
//! `content * sigma + mu` per channel, normalizing it again gives back
//! exactly the original content.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ChanOp, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default width of the CGA hidden layer.
pub const DEFAULT_CGA_HIDDEN: usize = 256;
/// Added to the softplus so that predicted scales are strictly positive.
pub const CGA_SIGMA_FLOOR: f64 = 1e-4;

/// How the CGA output layer maps to `(mu, sigma)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CgaMode {
    /// `mu` and `sigma` are predicted directly; at init they are 0 and 1.
    #[default]
    Direct,
    /// Predictions are relative to the source statistics:
    /// `mu = mu_x + sigma_x * m`, `sigma = sigma_x * s`. At init the module
    /// is the identity on every input.
    Residual,
}

/// Per-image style statistics `[B, S]`: the channel means of every encoder
/// level, followed by the channel standard deviations of every level.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector<T>(pub Tensor<T>);

impl<T: Scalar> StyleVector<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::dim(format!(
                "style vectors are [batch, dim], got {:?}",
                values.shape()
            )));
        }
        Ok(StyleVector(values))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Content-guided affine parameters, each `[B, C]`.
#[derive(Clone, Debug)]
pub struct CgaOutput<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

/// Fully connected layer `y = x W^T + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn he<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[out, inp], (2.0 / inp as f64).sqrt(), rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn apply<'p>(&'p self, g: &Graph<'p, T>, x: &Var<T>) -> Var<T> {
        g.linear(x, &g.param(&self.weight), &g.param(&self.bias))
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// The CGA network of one block: pooled mean and std of the source
/// features, concatenated with the style vector, through two fully
/// connected layers to `2C` raw values.
#[derive(Clone, Debug)]
pub struct SanModule<T> {
    channels: usize,
    style_dim: usize,
    mode: CgaMode,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Inverse softplus of `1 - CGA_SIGMA_FLOOR`, the raw value giving sigma 1.
fn unit_sigma_raw() -> f64 {
    let target: f64 = 1.0 - CGA_SIGMA_FLOOR;
    target.exp_m1().ln()
}

impl<T: Scalar> SanModule<T> {
    /// The output layer starts with zero weights and biases that give
    /// `m = 0`, `s = 1` before the mode is applied.
    pub fn new<R: Rng + ?Sized>(channels: usize, style_dim: usize, hidden: usize, mode: CgaMode, rng: &mut R) -> Self {
        let fc1 = Linear::he(hidden, 2 * channels + style_dim, rng);
        let mut fc2 = Linear {
            weight: Tensor::zeros(&[2 * channels, hidden]),
            bias: Tensor::zeros(&[2 * channels]),
        };
        let raw = T::lit(unit_sigma_raw());
        for v in &mut fc2.bias.data_mut()[channels..] {
            *v = raw;
        }
        SanModule {
            channels,
            style_dim,
            mode,
            fc1,
            fc2,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    pub fn mode(&self) -> CgaMode {
        self.mode
    }

    pub fn hidden(&self) -> usize {
        self.fc1.weight.shape()[0]
    }

    fn check(&self, fx: &[usize], fs: &[usize]) -> Result<()> {
        let [b, c, _, _] = fx else {
            return Err(Error::dim(format!("SAN expects 4-D features, got {fx:?}")));
        };
        if *c != self.channels {
            return Err(Error::dim(format!(
                "SAN sized for {} channels, features have {c}",
                self.channels
            )));
        }
        match fs {
            [sb, s] if *s == self.style_dim && (*sb == *b || *sb == 1) => Ok(()),
            _ => Err(Error::dim(format!(
                "style vector {fs:?} does not match batch {b} and style dim {}",
                self.style_dim
            ))),
        }
    }

    /// CGA parameters `(mu, sigma)`, each `[B, C]`.
    pub fn cga_var<'p>(&'p self, g: &Graph<'p, T>, fx: &Var<T>, fs: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        self.check(fx.shape(), fs.shape())?;
        let b = fx.shape()[0];
        let fs = if fs.shape()[0] == b {
            fs.clone()
        } else {
            broadcast_rows(g, fs, b)
        };
        let (mu_x, sigma_x) = g.channel_stats(fx);
        let input = g.concat1(&[&mu_x, &sigma_x, &fs]);
        let hidden = g.relu(&self.fc1.apply(g, &input));
        let raw = self.fc2.apply(g, &hidden);
        let c = self.channels;
        let mu = g.slice1(&raw, 0, c);
        let sigma = g.add_scalar(&g.softplus(&g.slice1(&raw, c, 2 * c)), T::lit(CGA_SIGMA_FLOOR));
        Ok(match self.mode {
            CgaMode::Direct => (mu, sigma),
            CgaMode::Residual => (g.add(&mu_x, &g.mul(&sigma_x, &mu)), g.mul(&sigma_x, &sigma)),
        })
    }

    /// `normalize(f_x) * sigma + mu` per channel.
    pub fn apply_var<'p>(&'p self, g: &Graph<'p, T>, fx: &Var<T>, fs: &Var<T>) -> Result<Var<T>> {
        let (mu, sigma) = self.cga_var(g, fx, fs)?;
        let content = g.normalize_channels(fx);
        let scaled = g.channel(&content, &sigma, ChanOp::Mul);
        Ok(g.channel(&scaled, &mu, ChanOp::Add))
    }

    pub fn cga(&self, fx: &Tensor<T>, fs: &StyleVector<T>) -> Result<CgaOutput<T>> {
        let g = Graph::inference();
        let (mu, sigma) = self.cga_var(&g, &g.constant(fx.clone()), &g.constant(fs.0.clone()))?;
        Ok(CgaOutput {
            mu: mu.into_tensor(),
            sigma: sigma.into_tensor(),
        })
    }

    pub fn apply(&self, fx: &Tensor<T>, fs: &StyleVector<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        Ok(self
            .apply_var(&g, &g.constant(fx.clone()), &g.constant(fs.0.clone()))?
            .into_tensor())
    }
}

/// Repeats a `[1, S]` row `b` times.
fn broadcast_rows<'p, T: Scalar>(g: &Graph<'p, T>, v: &Var<T>, b: usize) -> Var<T> {
    let rows: Vec<&Var<T>> = std::iter::repeat_n(v, b).collect();
    let s = v.shape()[1];
    let stacked = g.concat1(&rows);
    g.reshape(&stacked, &[b, s])
}

impl<T: Scalar> Parameters<T> for SanModule<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

/// Channel-wise normalized features, the content representation.
pub fn extract_content<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    f.dims4()?;
    let g = Graph::inference();
    Ok(g.normalize_channels(&g.constant(f.clone())).into_tensor())
}
