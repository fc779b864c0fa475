//! Training objective: content loss on normalized deep encoder features,
//! aligned-style loss over a selected subset of channels, and a
//! structure-aware smoothness term guided by the target image.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::perceptual::PerceptualEncoder;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pyramid levels used by the aligned-style loss (`relu1_1 .. relu3_1`).
pub const STYLE_LEVELS: usize = 3;
/// Pyramid level used by the content loss (`relu4_1`).
pub const CONTENT_LEVEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_style: f64,
    pub lambda_smooth: f64,
    /// Fraction of channels kept by the aligned-style loss, in `(0, 1]`.
    pub k: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_style: 0.1,
            lambda_smooth: 10.0,
            k: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k)?;
        for (name, v) in [("lambda_style", self.lambda_style), ("lambda_smooth", self.lambda_smooth)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss values of one evaluation, serialized as one training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub content: f64,
    pub aligned_style: f64,
    pub smooth: f64,
    pub total: f64,
    pub selected_channel_counts: Vec<usize>,
    pub k: f64,
}

impl LossReport {
    pub fn log_line(&self, step: u64) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v["step"] = step.into();
        v.to_string()
    }
}

fn check_k(k: f64) -> Result<()> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("k must lie in (0, 1], got {k}")))
    }
}

fn same_size(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a.len() != 4 || b.len() != 4 {
        return Err(Error::dim(format!("{what}: expected 4-D images, got {a:?} and {b:?}")));
    }
    if a != b {
        return Err(Error::dim(format!("{what}: image shapes differ, {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Indices of the `max(1, floor(k N))` smallest energies, ties to the lower
/// index, returned in ascending index order.
pub fn select_by_energy<T: Scalar>(energy: &[T], k: f64) -> Result<Vec<usize>> {
    check_k(k)?;
    let n = energy.len();
    let keep = ((k * n as f64).floor() as usize).clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the lower index first among equal energies.
    order.sort_by(|&a, &b| energy[a].partial_cmp(&energy[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut chosen: Vec<usize> = order.into_iter().take(keep.min(n)).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Per-channel energy `||mu_gen - mu_ref||` over the batch, from `[B, N]` means.
fn mean_energy<T: Scalar>(gen_mu: &Tensor<T>, ref_mu: &Tensor<T>) -> Vec<T> {
    let (b, n) = (gen_mu.shape()[0], gen_mu.shape()[1]);
    (0..n)
        .map(|c| {
            (0..b)
                .map(|i| (gen_mu.data()[i * n + c] - ref_mu.data()[i * n + c]).powi(2))
                .sum::<T>()
                .sqrt()
        })
        .collect()
}

/// Channels of one layer pair kept by the aligned-style loss.
pub fn select_channels<T: Scalar>(gen_layer: &Tensor<T>, ref_layer: &Tensor<T>, k: f64) -> Result<Vec<usize>> {
    let (gb, gc, _, _) = gen_layer.dims4()?;
    let (rb, rc, _, _) = ref_layer.dims4()?;
    if gc != rc || gb != rb {
        return Err(Error::dim(format!(
            "layer shapes {:?} and {:?} differ in batch or channels",
            gen_layer.shape(),
            ref_layer.shape()
        )));
    }
    let g = Graph::inference();
    let (gm, _) = g.channel_stats(&g.constant(gen_layer.clone()));
    let (rm, _) = g.channel_stats(&g.constant(ref_layer.clone()));
    select_by_energy(&mean_energy(gm.value(), rm.value()), k)
}

/// Tape values of the aligned-style loss.
pub struct StyleTerms<T> {
    pub mean_part: Var<T>,
    pub std_part: Var<T>,
    pub total: Var<T>,
    pub counts: Vec<usize>,
}

/// Aligned-style loss between two pyramids. `ref_layers` are constants.
pub fn aligned_style_var<T: Scalar>(
    g: &Graph<'_, T>,
    gen_layers: &[Var<T>],
    ref_layers: &[Var<T>],
    k: f64,
) -> Result<StyleTerms<T>> {
    check_k(k)?;
    let mut mean_terms = Vec::new();
    let mut std_terms = Vec::new();
    let mut counts = Vec::new();
    for (gl, rl) in gen_layers.iter().zip(ref_layers).take(STYLE_LEVELS) {
        if gl.shape()[..2] != rl.shape()[..2] {
            return Err(Error::dim(format!(
                "style layers {:?} and {:?} differ in batch or channels",
                gl.shape(),
                rl.shape()
            )));
        }
        let (gm, gs) = g.channel_stats(gl);
        let (rm, rs) = g.channel_stats(rl);
        let idx = select_by_energy(&mean_energy(gm.value(), rm.value()), k)?;
        counts.push(idx.len());
        let dm = g.gather1(&g.sub(&gm, &rm), &idx);
        let ds = g.gather1(&g.sub(&gs, &rs), &idx);
        mean_terms.push(g.sum(&g.batch_l2(&dm)));
        std_terms.push(g.sum(&g.batch_l2(&ds)));
    }
    let mean_part = add_all(g, &mean_terms);
    let std_part = add_all(g, &std_terms);
    let total = g.add(&mean_part, &std_part);
    Ok(StyleTerms {
        mean_part,
        std_part,
        total,
        counts,
    })
}

fn add_all<T: Scalar>(g: &Graph<'_, T>, terms: &[Var<T>]) -> Var<T> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = g.add(&acc, t);
    }
    acc
}

/// Euclidean distance between channel-normalized deep features.
pub fn content_var<T: Scalar>(g: &Graph<'_, T>, gen_deep: &Var<T>, src_deep: &Var<T>) -> Var<T> {
    let diff = g.sub(&g.normalize_channels(gen_deep), &g.normalize_channels(src_deep));
    g.l2_norm(&diff)
}

/// Structure-aware smoothness: forward differences of `gen` along each
/// axis, weighted by `exp(-lambda |diff(reference)|)`, averaged per axis
/// and summed over the two axes.
pub fn smooth_var<T: Scalar>(
    g: &Graph<'_, T>,
    gen: &Var<T>,
    reference: &Tensor<T>,
    lambda_smooth: f64,
) -> Result<Var<T>> {
    same_size(gen.shape(), reference.shape(), "smooth loss")?;
    let lam = T::lit(lambda_smooth);
    let r = g.constant(reference.clone());
    let mut parts = Vec::new();
    for axis in 0..2 {
        let (dg, dr) = if axis == 0 {
            (g.diff_w(gen), g.diff_w(&r))
        } else {
            (g.diff_h(gen), g.diff_h(&r))
        };
        if dg.value().is_empty() {
            continue;
        }
        let weight = g.constant(dr.value().map(|v| (-lam * v.abs()).exp()));
        parts.push(g.mean(&g.mul(&g.abs(&dg), &weight)));
    }
    Ok(if parts.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        add_all(g, &parts)
    })
}

/// Every term of the objective for a generated image on the tape.
pub struct Objective<T> {
    pub content: Var<T>,
    pub style: StyleTerms<T>,
    pub smooth: Var<T>,
    pub total: Var<T>,
}

impl<T: Scalar> Objective<T> {
    pub fn report(&self, w: &LossWeights) -> Result<LossReport> {
        let report = LossReport {
            content: self.content.item().to_f64().unwrap_or(f64::NAN),
            aligned_style: self.style.total.item().to_f64().unwrap_or(f64::NAN),
            smooth: self.smooth.item().to_f64().unwrap_or(f64::NAN),
            total: self.total.item().to_f64().unwrap_or(f64::NAN),
            selected_channel_counts: self.style.counts.clone(),
            k: w.k,
        };
        for (component, value) in [
            ("content", report.content),
            ("aligned_style", report.aligned_style),
            ("smooth", report.smooth),
            ("total", report.total),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFinite { component, value });
            }
        }
        Ok(report)
    }
}

/// `content + lambda_style * aligned_style + smooth` for `gen` on the tape.
/// `src` supplies content and `reference` supplies style and structure.
pub fn objective_var<T: Scalar>(
    g: &Graph<'_, T>,
    gen: &Var<T>,
    src: &Tensor<T>,
    reference: &Tensor<T>,
    enc: &PerceptualEncoder<T>,
    w: &LossWeights,
) -> Result<Objective<T>> {
    w.validate()?;
    same_size(gen.shape(), src.shape(), "content loss")?;
    let frozen = Graph::inference();
    let src_layers = enc.encode_var(&frozen, &frozen.constant(src.clone()))?;
    let ref_layers = enc.encode_var(&frozen, &frozen.constant(reference.clone()))?;
    let gen_layers = enc.encode_var(g, gen)?;
    let src_deep = g.constant(src_layers[CONTENT_LEVEL].value().clone());
    let ref_layers: Vec<Var<T>> = ref_layers
        .iter()
        .map(|l| g.constant(l.value().clone()))
        .collect();
    let content = content_var(g, &gen_layers[CONTENT_LEVEL], &src_deep);
    let style = aligned_style_var(g, &gen_layers, &ref_layers, w.k)?;
    let smooth = smooth_var(g, gen, reference, w.lambda_smooth)?;
    let weighted = g.scale(&style.total, T::lit(w.lambda_style));
    let total = g.add(&g.add(&content, &weighted), &smooth);
    Ok(Objective {
        content,
        style,
        smooth,
        total,
    })
}

pub fn content_loss<T: Scalar>(gen: &Tensor<T>, src: &Tensor<T>, enc: &PerceptualEncoder<T>) -> Result<T> {
    same_size(gen.shape(), src.shape(), "content loss")?;
    let g = Graph::inference();
    let a = enc.encode_var(&g, &g.constant(gen.clone()))?;
    let b = enc.encode_var(&g, &g.constant(src.clone()))?;
    Ok(content_var(&g, &a[CONTENT_LEVEL], &b[CONTENT_LEVEL]).item())
}

/// Mean and std parts of the aligned-style loss with the selected counts.
pub fn aligned_style_parts<T: Scalar>(
    gen: &Tensor<T>,
    reference: &Tensor<T>,
    enc: &PerceptualEncoder<T>,
    k: f64,
) -> Result<(T, T, Vec<usize>)> {
    let g = Graph::inference();
    let a = enc.encode_var(&g, &g.constant(gen.clone()))?;
    let b = enc.encode_var(&g, &g.constant(reference.clone()))?;
    let terms = aligned_style_var(&g, &a, &b, k)?;
    Ok((terms.mean_part.item(), terms.std_part.item(), terms.counts))
}

pub fn aligned_style_loss<T: Scalar>(
    gen: &Tensor<T>,
    reference: &Tensor<T>,
    enc: &PerceptualEncoder<T>,
    k: f64,
) -> Result<T> {
    let (m, s, _) = aligned_style_parts(gen, reference, enc, k)?;
    Ok(m + s)
}

pub fn smooth_loss<T: Scalar>(gen: &Tensor<T>, reference: &Tensor<T>, lambda_smooth: f64) -> Result<T> {
    let g = Graph::inference();
    Ok(smooth_var(&g, &g.constant(gen.clone()), reference, lambda_smooth)?.item())
}

pub fn total_loss<T: Scalar>(
    gen: &Tensor<T>,
    src: &Tensor<T>,
    reference: &Tensor<T>,
    enc: &PerceptualEncoder<T>,
    w: &LossWeights,
) -> Result<LossReport> {
    let g = Graph::inference();
    objective_var(&g, &g.constant(gen.clone()), src, reference, enc, w)?.report(w)
}
