//! Inference: image-guided translation and translation with style vectors
//! sampled from a per-domain Gaussian prior.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{pad_to_multiple, Padding};
use crate::error::{Error, Result};
use crate::flow::FlowNetwork;
use crate::perceptual::PerceptualEncoder;
use crate::san::StyleVector;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pads `source`, maps it to deep features, restyles every block with
/// `style` on the way back and trims the padding. The result is unclamped.
pub fn stylize_var<'p, T: Scalar>(
    g: &Graph<'p, T>,
    net: &'p FlowNetwork<T>,
    source: &Tensor<T>,
    style: &Var<T>,
) -> Result<Var<T>> {
    let (_, _, h, w) = source.dims4()?;
    let (padded, pad) = pad_to_multiple(source, net.config().divisor())?;
    let feats = net.forward_var(g, &g.constant(padded))?;
    let deep = feats.last().expect("at least one block");
    let out = net.inverse_var(g, deep, Some(style))?;
    Ok(if pad == Padding::default() {
        out
    } else {
        g.crop(&out, h, w)
    })
}

/// Translation of `source` under a given style, before clamping.
pub fn translate_unclamped<T: Scalar>(
    source: &Tensor<T>,
    style: &StyleVector<T>,
    net: &FlowNetwork<T>,
) -> Result<Tensor<T>> {
    let g = Graph::inference();
    Ok(stylize_var(&g, net, source, &g.constant(style.0.clone()))?.into_tensor())
}

pub fn translate_with_style<T: Scalar>(
    source: &Tensor<T>,
    style: &StyleVector<T>,
    net: &FlowNetwork<T>,
) -> Result<Tensor<T>> {
    Ok(translate_unclamped(source, style, net)?.clamp(T::zero(), T::one()))
}

/// Translates `source` toward the style of `reference`; output in `[0, 1]`.
pub fn translate_guided<T: Scalar>(
    source: &Tensor<T>,
    reference: &Tensor<T>,
    net: &FlowNetwork<T>,
    enc: &PerceptualEncoder<T>,
) -> Result<Tensor<T>> {
    let style = enc.extract_style(reference)?;
    translate_with_style(source, &style, net)
}

/// Diagonal Gaussian over style vectors of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylePrior {
    pub mean: Vec<f64>,
    /// Population variance per component.
    pub var: Vec<f64>,
    pub domain_id: usize,
    pub n_samples: usize,
}

impl StylePrior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("prior serializes");
        crate::archive::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn mean_style<T: Scalar>(&self) -> StyleVector<T> {
        StyleVector(Tensor::from_fn(&[1, self.dim()], |i| T::lit(self.mean[i])))
    }

    /// Draws `mean + temperature * sqrt(var) * z` and floors the standard
    /// deviation half at zero.
    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, temperature: f64, rng: &mut R) -> Result<StyleVector<T>> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "temperature must be finite and >= 0, got {temperature}"
            )));
        }
        let half = self.dim() / 2;
        let values: Vec<T> = self
            .mean
            .iter()
            .zip(&self.var)
            .enumerate()
            .map(|(i, (&m, &v))| {
                let z: f64 = rng.sample(StandardNormal);
                let s = m + temperature * v.max(0.0).sqrt() * z;
                T::lit(if i >= half { s.max(0.0) } else { s })
            })
            .collect();
        StyleVector::new(Tensor::from_vec(&[1, self.dim()], values)?)
    }
}

/// Elementwise mean and population variance of the style vectors of `images`.
pub fn fit_style_prior<T: Scalar>(
    images: &[Tensor<T>],
    enc: &PerceptualEncoder<T>,
    domain_id: usize,
) -> Result<StylePrior> {
    if images.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "a style prior needs at least 2 images, got {}",
            images.len()
        )));
    }
    let dim = enc.style_dim();
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut n = 0usize;
    for img in images {
        let style = enc.extract_style(img)?;
        for row in style.0.data().chunks(dim) {
            n += 1;
            for (i, &v) in row.iter().enumerate() {
                let x = v.to_f64().unwrap_or(f64::NAN);
                let delta = x - mean[i];
                mean[i] += delta / n as f64;
                m2[i] += delta * (x - mean[i]);
            }
        }
    }
    let var = m2.iter().map(|s| (s / n as f64).max(0.0)).collect();
    Ok(StylePrior {
        mean,
        var,
        domain_id,
        n_samples: n,
    })
}

/// Translation with a style drawn from `prior`.
pub fn translate_sampled<T: Scalar, R: Rng + ?Sized>(
    source: &Tensor<T>,
    prior: &StylePrior,
    temperature: f64,
    rng: &mut R,
    net: &FlowNetwork<T>,
) -> Result<Tensor<T>> {
    let style = prior.sample(temperature, rng)?;
    translate_with_style(source, &style, net)
}

/// Sidecar record written next to each sampled output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub source: String,
    pub output: String,
    pub seed: u64,
    pub temperature: f64,
    pub domain: String,
    pub domain_id: usize,
    pub draw: usize,
}
