//! The invertible backbone: `M` blocks, each a 2x squeeze followed by `N`
//! flow steps, with one style-aware normalization module per block.
//!
//! The forward pass maps an image to deep features. The inverse pass walks
//! the blocks in reverse; when a style vector is supplied each block first
//! restyles its incoming features with its SAN module, then undoes its flow
//! steps and its squeeze. Without a style vector the inverse is exact.

mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use layers::{
    squeeze, unsqueeze, ActNorm, Conv, Coupling, FlowStep, InvConv, MIN_ACTNORM_SCALE,
    MIN_INVCONV_DET,
};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::san::{CgaMode, SanModule, StyleVector, DEFAULT_CGA_HIDDEN};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SQUEEZE_FACTOR: usize = 2;

/// Architecture of a [`FlowNetwork`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Number of blocks `M`.
    pub blocks: usize,
    /// Flow steps per block `N`.
    pub flows: usize,
    /// Image channels.
    pub in_channels: usize,
    /// Hidden width of each coupling network.
    pub hidden: usize,
    /// Length of the style vector the SAN modules consume.
    pub style_dim: usize,
    /// Hidden width of each CGA network.
    pub cga_hidden: usize,
    #[serde(default)]
    pub cga_mode: CgaMode,
}

/// Default coupling width; see the parameter budget test.
pub const DEFAULT_COUPLING_HIDDEN: usize = 600;
/// Style vector length of the standard VGG-19 encoder.
pub const STANDARD_STYLE_DIM: usize = 2 * (64 + 128 + 256 + 512);

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            blocks: 2,
            flows: 15,
            in_channels: 3,
            hidden: DEFAULT_COUPLING_HIDDEN,
            style_dim: STANDARD_STYLE_DIM,
            cga_hidden: DEFAULT_CGA_HIDDEN,
            cga_mode: CgaMode::Direct,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.flows == 0 {
            return Err(Error::Parameter(format!(
                "need at least one block and one flow, got M={} N={}",
                self.blocks, self.flows
            )));
        }
        if self.in_channels == 0 || self.hidden == 0 || self.style_dim == 0 || self.cga_hidden == 0 {
            return Err(Error::Parameter("network widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn divisor(&self) -> usize {
        SQUEEZE_FACTOR.pow(self.blocks as u32)
    }

    /// Channel count inside block `i`.
    pub fn block_channels(&self, i: usize) -> usize {
        self.in_channels * (SQUEEZE_FACTOR * SQUEEZE_FACTOR).pow(i as u32 + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub flows: Vec<FlowStep<T>>,
    pub san: SanModule<T>,
}

impl<T: Scalar> Parameters<T> for Block<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (j, step) in self.flows.iter().enumerate() {
            step.visit_params(&join(prefix, &format!("flows.{j}")), f);
        }
        self.san.visit_params(&join(prefix, "san"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (j, step) in self.flows.iter_mut().enumerate() {
            step.visit_params_mut(&join(prefix, &format!("flows.{j}")), f);
        }
        self.san.visit_params_mut(&join(prefix, "san"), f);
    }
}

#[derive(Clone, Debug)]
pub struct FlowNetwork<T> {
    config: NetConfig,
    pub blocks: Vec<Block<T>>,
}

impl<T: Scalar> FlowNetwork<T> {
    /// Random initialization: orthogonal 1x1 convolutions, identity
    /// couplings, near-identity SAN and uninitialized actnorms.
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let c = config.block_channels(i);
            let flows = (0..config.flows)
                .map(|_| FlowStep::new(c, config.hidden, rng))
                .collect::<Result<Vec<_>>>()?;
            let san = SanModule::new(c, config.style_dim, config.cga_hidden, config.cga_mode, rng);
            blocks.push(Block { flows, san });
        }
        Ok(FlowNetwork { config, blocks })
    }

    /// Every flow layer at the identity: unit actnorm (marked initialized),
    /// identity 1x1 convolutions and zero couplings.
    pub fn identity<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::new(config, rng)?;
        for block in &mut net.blocks {
            for step in &mut block.flows {
                step.actnorm.initialized = true;
                let c = step.invconv.channels();
                step.invconv.weight =
                    Tensor::from_fn(&[c, c], |k| if k / c == k % c { T::one() } else { T::zero() });
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn actnorm_flags(&self) -> Vec<bool> {
        self.steps().map(|s| s.actnorm.initialized).collect()
    }

    pub fn set_actnorm_flags(&mut self, flags: &[bool]) -> Result<()> {
        let n = self.steps().count();
        if flags.len() != n {
            return Err(Error::State(format!(
                "expected {n} actnorm flags, got {}",
                flags.len()
            )));
        }
        for (step, &f) in self.blocks.iter_mut().flat_map(|b| b.flows.iter_mut()).zip(flags) {
            step.actnorm.initialized = f;
        }
        Ok(())
    }

    fn steps(&self) -> impl Iterator<Item = &FlowStep<T>> {
        self.blocks.iter().flat_map(|b| b.flows.iter())
    }

    pub fn is_initialized(&self) -> bool {
        self.steps().all(|s| s.actnorm.initialized)
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::dim(format!("expected a (B, C, H, W) image, got {shape:?}")));
        };
        if *c != self.config.in_channels {
            return Err(Error::dim(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::dim(format!(
                "image size {h}x{w} must be divisible by 2^M = {d} in both height and width"
            )));
        }
        Ok(())
    }

    /// Data-dependent initialization of every actnorm layer that has not
    /// been initialized yet, block by block on `batch`.
    pub fn initialize(&mut self, batch: &Tensor<T>) -> Result<()> {
        self.check_image(batch.shape())?;
        let mut h = batch.clone();
        for bi in 0..self.blocks.len() {
            h = squeeze(&h, SQUEEZE_FACTOR)?;
            for fi in 0..self.blocks[bi].flows.len() {
                if !self.blocks[bi].flows[fi].actnorm.initialized {
                    self.blocks[bi].flows[fi].actnorm.initialize(&h)?;
                }
                let step = &self.blocks[bi].flows[fi];
                let g = Graph::inference();
                h = step.forward(&g, &g.constant(h))?.into_tensor();
            }
        }
        Ok(())
    }

    /// Forward pass on the tape; returns the output of every block, the last
    /// being the deep feature map.
    pub fn forward_var<'p>(&'p self, g: &Graph<'p, T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        self.check_image(x.shape())?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            h = layers::squeeze_var(g, &h, SQUEEZE_FACTOR)?;
            for step in &block.flows {
                h = step.forward(g, &h)?;
            }
            outs.push(h.clone());
        }
        Ok(outs)
    }

    /// Shape of the deepest block output for an image of shape `image`.
    pub fn feature_shape(&self, image: &[usize]) -> Result<Vec<usize>> {
        self.check_image(image)?;
        let d = self.config.divisor();
        Ok(vec![
            image[0],
            self.config.block_channels(self.blocks.len() - 1),
            image[2] / d,
            image[3] / d,
        ])
    }

    /// Inverse pass on the tape, restyling each block when `style` is given.
    pub fn inverse_var<'p>(
        &'p self,
        g: &Graph<'p, T>,
        features: &Var<T>,
        style: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let [_, c, _, _] = features.shape() else {
            return Err(Error::dim(format!(
                "features must be 4-D, got {:?}",
                features.shape()
            )));
        };
        let deepest = self.config.block_channels(self.blocks.len() - 1);
        if *c != deepest {
            return Err(Error::dim(format!(
                "features have {c} channels, the deepest block produces {deepest}"
            )));
        }
        let mut h = features.clone();
        for block in self.blocks.iter().rev() {
            if let Some(fs) = style {
                h = block.san.apply_var(g, &h, fs)?;
            }
            for step in block.flows.iter().rev() {
                h = step.inverse(g, &h)?;
            }
            h = layers::unsqueeze_var(g, &h, SQUEEZE_FACTOR)?;
        }
        Ok(h)
    }

    /// Per-block features of an image batch.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let g = Graph::inference();
        Ok(self
            .forward_var(&g, &g.constant(x.clone()))?
            .into_iter()
            .map(Var::into_tensor)
            .collect())
    }

    /// Reconstructs an image from deep features, restyled when `style` is given.
    pub fn decode(&self, features: &Tensor<T>, style: Option<&StyleVector<T>>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let fs = style.map(|s| g.constant(s.0.clone()));
        Ok(self
            .inverse_var(&g, &g.constant(features.clone()), fs.as_ref())?
            .into_tensor())
    }
}

impl<T: Scalar> Parameters<T> for FlowNetwork<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}
