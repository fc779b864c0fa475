//! Evaluation: SSIM against the source for content preservation and the
//! full style loss against the reference for stylization.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::data::{load_image, scan_dir};
use crate::error::{Error, Result};
use crate::losses::aligned_style_loss;
use crate::perceptual::PerceptualEncoder;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rec. 601 luma weights used to convert to grayscale.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn luma<T: Scalar>(img: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let (_, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(Error::dim(format!("SSIM expects RGB images, got {c} channels")));
    }
    let plane = h * w;
    let d = img.data();
    let gray = (0..plane)
        .map(|p| {
            (0..3)
                .map(|ch| LUMA[ch] * d[ch * plane + p].to_f64().unwrap_or(f64::NAN))
                .sum()
        })
        .collect();
    Ok((gray, h, w))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable Gaussian filter over the positions where the whole window fits.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, k)| k * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, k)| k * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma of the first image in each batch, with an 11x11
/// Gaussian window (sigma 1.5), population covariances and data range 1.
/// Only positions where the window lies fully inside the image count.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "SSIM needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (x, h, w) = luma(a)?;
    let (y, _, _) = luma(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let myy = filter_valid(&prod(&y, &y), h, w, &taps);
    let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
    let n = mx.len() as f64;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n)
}

/// Full (`k = 1`) aligned-style loss between a generated and a reference image.
pub fn style_distance<T: Scalar>(gen: &Tensor<T>, reference: &Tensor<T>, enc: &PerceptualEncoder<T>) -> Result<f64> {
    Ok(aligned_style_loss(gen, reference, enc, 1.0)?
        .to_f64()
        .unwrap_or(f64::NAN))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub ssim: f64,
    pub style_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_ssim: f64,
    pub mean_style_distance: f64,
    /// Outputs without a source or reference counterpart.
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<ImageRecord>,
    pub summary: EvalSummary,
}

impl EvalReport {
    /// One JSON record per image followed by a `{"summary": ...}` line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).unwrap();
        }
        let summary = serde_json::json!({ "summary": self.summary });
        writeln!(out, "{summary}").unwrap();
        out
    }

    /// Two whitespace-separated columns, `ssim style_distance`, per image.
    pub fn to_scatter(&self) -> String {
        let mut out = String::from("# ssim style_distance\n");
        for r in &self.records {
            writeln!(out, "{} {}", r.ssim, r.style_distance).unwrap();
        }
        out
    }

    /// Writes the report and the scatter file `<report>.scatter.txt`.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        write_atomic(path, self.to_jsonl().as_bytes())?;
        let mut scatter = path.as_os_str().to_os_string();
        scatter.push(".scatter.txt");
        let scatter = PathBuf::from(scatter);
        write_atomic(&scatter, self.to_scatter().as_bytes())?;
        Ok(scatter)
    }
}

fn counterpart(dir: &Path, name: &str) -> Option<PathBuf> {
    let p = dir.join(name);
    p.is_file().then_some(p)
}

/// Scores every image in `output_dir` against the source and reference
/// files of the same name. Counterparts are resized to the output size.
pub fn evaluate_run<T: Scalar>(
    output_dir: &Path,
    source_dir: &Path,
    reference_dir: &Path,
    enc: &PerceptualEncoder<T>,
) -> Result<EvalReport> {
    let outputs = scan_dir("outputs", output_dir)?;
    let mut records = Vec::new();
    let mut missing = Vec::new();
    for path in &outputs.files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (Some(src), Some(refp)) = (counterpart(source_dir, &name), counterpart(reference_dir, &name)) else {
            log::warn!("no source or reference counterpart for {name}");
            missing.push(name);
            continue;
        };
        let out = load_image::<T>(path, None, None)?;
        let (_, _, h, w) = out.dims4()?;
        let source = load_image::<T>(&src, None, Some([h, w]))?;
        let reference = load_image::<T>(&refp, None, Some([h, w]))?;
        records.push(ImageRecord {
            name,
            ssim: ssim(&out, &source)?,
            style_distance: style_distance(&out, &reference, enc)?,
        });
    }
    let n = records.len();
    let mean = |f: fn(&ImageRecord) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            records.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let summary = EvalSummary {
        count: n,
        mean_ssim: mean(|r| r.ssim),
        mean_style_distance: mean(|r| r.style_distance),
        missing,
    };
    Ok(EvalReport { records, summary })
}
