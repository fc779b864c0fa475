//! The invertible layers of a flow step.

use rand::Rng;

use crate::autodiff::{kernels, ChanOp, Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{det, random_orthogonal};
use crate::params::{join, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest admissible actnorm scale magnitude.
pub const MIN_ACTNORM_SCALE: f64 = 1e-6;
/// Smallest admissible `|det W|` of a 1x1 convolution.
pub const MIN_INVCONV_DET: f64 = 1e-8;

fn check_squeeze_dims(shape: &[usize], factor: usize) -> Result<()> {
    let [_, _, h, w] = shape else {
        return Err(Error::dim(format!("squeeze expects a 4-D tensor, got {shape:?}")));
    };
    if factor == 0 {
        return Err(Error::dim("squeeze factor must be positive"));
    }
    if h % factor != 0 {
        return Err(Error::dim(format!(
            "squeeze: height {h} is not divisible by factor {factor}"
        )));
    }
    if w % factor != 0 {
        return Err(Error::dim(format!(
            "squeeze: width {w} is not divisible by factor {factor}"
        )));
    }
    Ok(())
}

fn check_unsqueeze_dims(shape: &[usize], factor: usize) -> Result<()> {
    let [_, c, _, _] = shape else {
        return Err(Error::dim(format!("unsqueeze expects a 4-D tensor, got {shape:?}")));
    };
    if factor == 0 || c % (factor * factor) != 0 {
        return Err(Error::dim(format!(
            "unsqueeze: channel count {c} is not divisible by factor^2 = {}",
            factor * factor
        )));
    }
    Ok(())
}

/// Lossless space-to-channel reshaping: `(B, C, H, W)` becomes
/// `(B, C f^2, H/f, W/f)`. Output channel `c f^2 + di f + dj` holds input
/// channel `c` at offset `(di, dj)` of each `f x f` patch.
pub fn squeeze<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_squeeze_dims(x.shape(), factor)?;
    Ok(kernels::squeeze(x, factor))
}

/// Inverse of [`squeeze`].
pub fn unsqueeze<T: Scalar>(y: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_unsqueeze_dims(y.shape(), factor)?;
    Ok(kernels::unsqueeze(y, factor))
}

pub(crate) fn squeeze_var<'p, T: Scalar>(g: &Graph<'p, T>, x: &Var<T>, f: usize) -> Result<Var<T>> {
    check_squeeze_dims(x.shape(), f)?;
    Ok(g.squeeze(x, f))
}

pub(crate) fn unsqueeze_var<'p, T: Scalar>(
    g: &Graph<'p, T>,
    y: &Var<T>,
    f: usize,
) -> Result<Var<T>> {
    check_unsqueeze_dims(y.shape(), f)?;
    Ok(g.unsqueeze(y, f))
}

fn channels_of(shape: &[usize], what: &str) -> Result<usize> {
    match shape {
        [_, c, _, _] => Ok(*c),
        _ => Err(Error::dim(format!("{what} expects a 4-D tensor, got {shape:?}"))),
    }
}

/// Per-channel affine `y = s x + b` with data-dependent initialization.
#[derive(Clone, Debug)]
pub struct ActNorm<T> {
    pub scale: Tensor<T>,
    pub bias: Tensor<T>,
    pub initialized: bool,
}

impl<T: Scalar> ActNorm<T> {
    /// Unit scale and zero bias, awaiting [`ActNorm::initialize`].
    pub fn new(channels: usize) -> Self {
        ActNorm {
            scale: Tensor::ones(&[channels]),
            bias: Tensor::zeros(&[channels]),
            initialized: false,
        }
    }

    /// Explicit parameters, marked initialized.
    pub fn from_params(scale: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if scale.shape() != bias.shape() || scale.shape().len() != 1 {
            return Err(Error::dim(format!(
                "actnorm scale {:?} and bias {:?} must be equal-length vectors",
                scale.shape(),
                bias.shape()
            )));
        }
        let a = ActNorm {
            scale,
            bias,
            initialized: true,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Sets `s, b` so that `batch` comes out with zero mean and unit
    /// variance per channel. Constant channels keep `s = 1` and get
    /// `b = -mean`.
    pub fn initialize(&mut self, batch: &Tensor<T>) -> Result<()> {
        let (b, c, h, w) = batch.dims4()?;
        if c != self.channels() {
            return Err(Error::dim(format!(
                "actnorm has {} channels, batch has {c}",
                self.channels()
            )));
        }
        let n = b * h * w;
        if n == 0 {
            return Err(Error::dim("actnorm initialization needs a nonempty batch"));
        }
        for ci in 0..c {
            let vals = (0..b).flat_map(|bi| {
                let base = (bi * c + ci) * h * w;
                batch.data()[base..base + h * w].iter().map(|v| v.to_f64().unwrap())
            });
            let (mut sum, mut sq) = (0.0, 0.0);
            for v in vals.clone() {
                sum += v;
            }
            let mean = sum / n as f64;
            for v in vals {
                sq += (v - mean).powi(2);
            }
            let std = (sq / n as f64).sqrt();
            if std < MIN_ACTNORM_SCALE {
                log::warn!("actnorm init: channel {ci} has zero variance, keeping unit scale");
                self.scale.data_mut()[ci] = T::one();
                self.bias.data_mut()[ci] = T::lit(-mean);
            } else {
                self.scale.data_mut()[ci] = T::lit(1.0 / std);
                self.bias.data_mut()[ci] = T::lit(-mean / std);
            }
        }
        self.initialized = true;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.initialized {
            return Err(Error::State("actnorm used before initialization".into()));
        }
        for (ci, s) in self.scale.data().iter().enumerate() {
            let v = s.to_f64().unwrap();
            if v.is_nan() || v.abs() < MIN_ACTNORM_SCALE {
                return Err(Error::DegenerateScale { channel: ci, value: v });
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = channels_of(shape, "actnorm")?;
        if c != self.channels() {
            return Err(Error::dim(format!(
                "actnorm has {} channels, input has {c}",
                self.channels()
            )));
        }
        self.validate()
    }

    pub fn forward<'p>(&'p self, g: &Graph<'p, T>, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x.shape())?;
        let y = g.channel(x, &g.param(&self.scale), ChanOp::Mul);
        Ok(g.channel(&y, &g.param(&self.bias), ChanOp::Add))
    }

    pub fn inverse<'p>(&'p self, g: &Graph<'p, T>, y: &Var<T>) -> Result<Var<T>> {
        self.check_input(y.shape())?;
        let x = g.channel(y, &g.param(&self.bias), ChanOp::Sub);
        Ok(g.channel(&x, &g.param(&self.scale), ChanOp::Div))
    }
}

impl<T: Scalar> Parameters<T> for ActNorm<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "scale"), &self.scale);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "scale"), &mut self.scale);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Invertible 1x1 convolution: a learned `C x C` channel mixing matrix.
#[derive(Clone, Debug)]
pub struct InvConv<T> {
    pub weight: Tensor<T>,
}

impl<T: Scalar> InvConv<T> {
    /// Random orthogonal initialization.
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        InvConv {
            weight: random_orthogonal(channels, rng),
        }
    }

    pub fn from_weight(weight: Tensor<T>) -> Result<Self> {
        match weight.shape() {
            [a, b] if a == b => {}
            s => return Err(Error::dim(format!("1x1 conv weight must be square, got {s:?}"))),
        }
        let conv = InvConv { weight };
        conv.check_invertible()?;
        Ok(conv)
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn check_invertible(&self) -> Result<()> {
        let d = det(&self.weight).to_f64().unwrap();
        if d.is_nan() || d.abs() <= MIN_INVCONV_DET {
            return Err(Error::SingularMatrix { det: d });
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = channels_of(shape, "1x1 conv")?;
        if c != self.channels() {
            return Err(Error::dim(format!(
                "1x1 conv has {} channels, input has {c}",
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn forward<'p>(&'p self, g: &Graph<'p, T>, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x.shape())?;
        Ok(g.channel_mix(x, &g.param(&self.weight)))
    }

    pub fn inverse<'p>(&'p self, g: &Graph<'p, T>, y: &Var<T>) -> Result<Var<T>> {
        self.check_input(y.shape())?;
        self.check_invertible()?;
        let w_inv = g.inverse(&g.param(&self.weight));
        Ok(g.channel_mix(y, &w_inv))
    }
}

impl<T: Scalar> Parameters<T> for InvConv<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
    }
}

/// Convolution weight and bias.
#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn normal<R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, std: f64, rng: &mut R) -> Self {
        Conv {
            weight: Tensor::randn(&[cout, cin, k, k], std, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn zeros(cout: usize, cin: usize, k: usize) -> Self {
        Conv {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn apply<'p>(&'p self, g: &Graph<'p, T>, x: &Var<T>) -> Var<T> {
        let pad = self.kernel() / 2;
        g.conv2d(x, &g.param(&self.weight), Some(&g.param(&self.bias)), 1, pad)
    }
}

impl<T: Scalar> Parameters<T> for Conv<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Standard deviation of the random coupling-network weights.
const COUPLING_INIT_STD: f64 = 0.05;

/// Subtractive coupling `y_a = x_a`, `y_b = x_b - m(x_a)` where `x_a` is the
/// first half of the channels. `m` is conv3x3 - ReLU - conv1x1 - ReLU -
/// conv3x3 and need not be invertible.
#[derive(Clone, Debug)]
pub struct Coupling<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub conv3: Conv<T>,
}

impl<T: Scalar> Coupling<T> {
    /// The last convolution starts at zero, so a new coupling is the identity.
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if !channels.is_multiple_of(2) || channels == 0 {
            return Err(Error::dim(format!(
                "coupling needs an even, nonzero channel count, got {channels}"
            )));
        }
        let d = channels / 2;
        Ok(Coupling {
            conv1: Conv::normal(hidden, d, 3, COUPLING_INIT_STD, rng),
            conv2: Conv::normal(hidden, hidden, 1, COUPLING_INIT_STD, rng),
            conv3: Conv::zeros(channels - d, hidden, 3),
        })
    }

    pub fn channels(&self) -> usize {
        self.conv1.weight.shape()[1] + self.conv3.weight.shape()[0]
    }

    /// The coupling function `m` applied to the conditioning half.
    pub fn m<'p>(&'p self, g: &Graph<'p, T>, xa: &Var<T>) -> Var<T> {
        let h = g.relu(&self.conv1.apply(g, xa));
        let h = g.relu(&self.conv2.apply(g, &h));
        self.conv3.apply(g, &h)
    }

    fn split(&self, shape: &[usize]) -> Result<usize> {
        let c = channels_of(shape, "coupling")?;
        if c % 2 != 0 {
            return Err(Error::dim(format!("coupling needs an even channel count, got {c}")));
        }
        if c != self.channels() {
            return Err(Error::dim(format!(
                "coupling has {} channels, input has {c}",
                self.channels()
            )));
        }
        Ok(c / 2)
    }

    pub fn forward<'p>(&'p self, g: &Graph<'p, T>, x: &Var<T>) -> Result<Var<T>> {
        let d = self.split(x.shape())?;
        let c = 2 * d;
        let xa = g.slice1(x, 0, d);
        let xb = g.slice1(x, d, c);
        let yb = g.sub(&xb, &self.m(g, &xa));
        Ok(g.concat1(&[&xa, &yb]))
    }

    pub fn inverse<'p>(&'p self, g: &Graph<'p, T>, y: &Var<T>) -> Result<Var<T>> {
        let d = self.split(y.shape())?;
        let c = 2 * d;
        let ya = g.slice1(y, 0, d);
        let yb = g.slice1(y, d, c);
        let xb = g.add(&yb, &self.m(g, &ya));
        Ok(g.concat1(&[&ya, &xb]))
    }
}

impl<T: Scalar> Parameters<T> for Coupling<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.conv3.visit_params(&join(prefix, "conv3"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        self.conv3.visit_params_mut(&join(prefix, "conv3"), f);
    }
}

/// Actnorm, 1x1 convolution and coupling, in that order.
#[derive(Clone, Debug)]
pub struct FlowStep<T> {
    pub actnorm: ActNorm<T>,
    pub invconv: InvConv<T>,
    pub coupling: Coupling<T>,
}

impl<T: Scalar> FlowStep<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(FlowStep {
            actnorm: ActNorm::new(channels),
            invconv: InvConv::new(channels, rng),
            coupling: Coupling::new(channels, hidden, rng)?,
        })
    }

    pub fn forward<'p>(&'p self, g: &Graph<'p, T>, x: &Var<T>) -> Result<Var<T>> {
        let x = self.actnorm.forward(g, x)?;
        let x = self.invconv.forward(g, &x)?;
        self.coupling.forward(g, &x)
    }

    pub fn inverse<'p>(&'p self, g: &Graph<'p, T>, y: &Var<T>) -> Result<Var<T>> {
        let y = self.coupling.inverse(g, y)?;
        let y = self.invconv.inverse(g, &y)?;
        self.actnorm.inverse(g, &y)
    }
}

impl<T: Scalar> Parameters<T> for FlowStep<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.actnorm.visit_params(&join(prefix, "actnorm"), f);
        self.invconv.visit_params(&join(prefix, "invconv"), f);
        self.coupling.visit_params(&join(prefix, "coupling"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.actnorm.visit_params_mut(&join(prefix, "actnorm"), f);
        self.invconv.visit_params_mut(&join(prefix, "invconv"), f);
        self.coupling.visit_params_mut(&join(prefix, "coupling"), f);
    }
}
