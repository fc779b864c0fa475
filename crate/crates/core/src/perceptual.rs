//! The frozen perceptual encoder: VGG-19 up to `relu4_1`, or a small
//! seeded stand-in with the same four-level contract for tests.
//!
//! Weights are held behind `Arc` and enter the tape as constants, so
//! gradients reach the input image and never the encoder.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::autodiff::{ChanOp, Graph, Var};
use crate::error::{Error, Result};
use crate::san::StyleVector;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel widths at `relu1_1 .. relu4_1` of VGG-19.
pub const STANDARD_WIDTHS: [usize; 4] = [64, 128, 256, 512];
/// Channel widths of the four stub levels.
pub const STUB_WIDTHS: [usize; 4] = [16, 32, 64, 128];
/// Per-channel normalization of the ImageNet-trained VGG weights.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// Environment variable naming a directory searched for weight files.
pub const CACHE_ENV: &str = "STYLEFLOW_CACHE";

const MANIFEST_FORMAT: &str = "styleflow-encoder/1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Standard,
    Stub { seed: u64 },
}

/// Input normalization applied to `[0, 1]` images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocess {
    /// No shift or scaling, which keeps a bias-free ReLU encoder positively
    /// homogeneous.
    pub fn identity() -> Self {
        Preprocess {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    variant: String,
    preprocess: Preprocess,
    tensors: BTreeMap<String, Vec<usize>>,
    checksum: String,
}

#[derive(Clone, Debug)]
struct ConvLayer<T> {
    name: String,
    weight: Arc<Tensor<T>>,
    bias: Arc<Tensor<T>>,
    stride: usize,
}

#[derive(Clone, Copy, Debug)]
enum Stage {
    /// Convolution followed by ReLU; `tap` marks a pyramid level.
    Conv { layer: usize, tap: bool },
    Pool,
}

/// Activations at the four pyramid levels, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub layers: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct PerceptualEncoder<T> {
    kind: EncoderKind,
    preprocess: Preprocess,
    convs: Vec<ConvLayer<T>>,
    plan: Vec<Stage>,
}

/// `(name, in, out, stride, tap)` for each convolution; `None` is a 2x2 max-pool.
type Layout = Vec<Option<(String, usize, usize, usize, bool)>>;

fn standard_layout() -> Layout {
    // torchvision `vgg19().features` indices, through relu4_1.
    let conv = |idx: usize, i, o, tap| Some((format!("features.{idx}"), i, o, 1, tap));
    vec![
        conv(0, 3, 64, true),
        conv(2, 64, 64, false),
        None,
        conv(5, 64, 128, true),
        conv(7, 128, 128, false),
        None,
        conv(10, 128, 256, true),
        conv(12, 256, 256, false),
        conv(14, 256, 256, false),
        conv(16, 256, 256, false),
        None,
        conv(19, 256, 512, true),
    ]
}

fn stub_layout() -> Layout {
    let mut prev = 3;
    STUB_WIDTHS
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let l = Some((format!("stub.{i}"), prev, w, if i == 0 { 1 } else { 2 }, true));
            prev = w;
            l
        })
        .collect()
}

fn expected_tensors(layout: &Layout) -> Vec<(String, Vec<usize>)> {
    layout
        .iter()
        .flatten()
        .flat_map(|(name, i, o, _, _)| {
            [
                (format!("{name}.weight"), vec![*o, *i, 3, 3]),
                (format!("{name}.bias"), vec![*o]),
            ]
        })
        .collect()
}

impl<T: Scalar> PerceptualEncoder<T> {
    fn assemble(
        kind: EncoderKind,
        preprocess: Preprocess,
        layout: &Layout,
        mut take: impl FnMut(&str) -> Tensor<T>,
    ) -> Self {
        let mut convs = Vec::new();
        let mut plan = Vec::new();
        for entry in layout {
            match entry {
                None => plan.push(Stage::Pool),
                Some((name, _, _, stride, tap)) => {
                    plan.push(Stage::Conv {
                        layer: convs.len(),
                        tap: *tap,
                    });
                    convs.push(ConvLayer {
                        name: name.clone(),
                        weight: Arc::new(take(&format!("{name}.weight"))),
                        bias: Arc::new(take(&format!("{name}.bias"))),
                        stride: *stride,
                    });
                }
            }
        }
        PerceptualEncoder {
            kind,
            preprocess,
            convs,
            plan,
        }
    }

    /// Seeded random-convolution pyramid, He-initialized, zero biases.
    pub fn stub(seed: u64) -> Self {
        let layout = stub_layout();
        let shapes: BTreeMap<_, _> = expected_tensors(&layout).into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in &shapes {
            let t = if name.ends_with(".weight") {
                let fan_in = shape[1] * 9;
                Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
            } else {
                Tensor::zeros(shape)
            };
            tensors.insert(name.clone(), t);
        }
        Self::assemble(EncoderKind::Stub { seed }, Preprocess::identity(), &layout, |n| {
            tensors.remove(n).unwrap()
        })
    }

    /// VGG-19 from explicit weights, checked against the expected layout.
    pub fn standard(mut tensors: BTreeMap<String, Tensor<T>>, preprocess: Preprocess) -> Result<Self> {
        let layout = standard_layout();
        let problems = manifest_diff(&expected_tensors(&layout), &tensors);
        if !problems.is_empty() {
            return Err(Error::Parameter(problems.join("; ")));
        }
        Ok(Self::assemble(EncoderKind::Standard, preprocess, &layout, |n| {
            tensors.remove(n).unwrap()
        }))
    }

    pub fn kind(&self) -> &EncoderKind {
        &self.kind
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    /// Channel counts of the four pyramid levels.
    pub fn widths(&self) -> [usize; 4] {
        match self.kind {
            EncoderKind::Standard => STANDARD_WIDTHS,
            EncoderKind::Stub { .. } => STUB_WIDTHS,
        }
    }

    /// Length of the style vector: a mean and a std per channel per level.
    pub fn style_dim(&self) -> usize {
        2 * self.widths().iter().sum::<usize>()
    }

    fn named_weights(&self) -> BTreeMap<String, &Tensor<T>> {
        self.convs
            .iter()
            .flat_map(|c| {
                [
                    (format!("{}.weight", c.name), &*c.weight),
                    (format!("{}.bias", c.name), &*c.bias),
                ]
            })
            .collect()
    }

    /// SHA-256 of every weight (names, shapes and `f32` values), hex encoded.
    pub fn weights_digest(&self) -> String {
        digest(&self.named_weights())
    }

    /// Writes the weights with an embedded manifest, loadable by [`load_encoder`].
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let named = self.named_weights();
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            variant: match self.kind {
                EncoderKind::Standard => "vgg19-relu4_1".into(),
                EncoderKind::Stub { seed } => format!("stub:{seed}"),
            },
            preprocess: self.preprocess.clone(),
            tensors: named.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
            checksum: digest(&named),
        };
        let owned: BTreeMap<String, Tensor<T>> =
            named.into_iter().map(|(n, t)| (n, t.clone())).collect();
        let meta = serde_json::to_value(&manifest).expect("manifest serializes");
        archive::save(path, &owned, &meta)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, 3, h, w] if *h > 0 && *w > 0 => Ok(()),
            [_, c, _, _] => Err(Error::dim(format!(
                "perceptual encoder expects 3 input channels, got {c}"
            ))),
            _ => Err(Error::dim(format!(
                "perceptual encoder expects a (B, 3, H, W) image, got {shape:?}"
            ))),
        }
    }

    /// The four pyramid activations of `x` on the tape.
    pub fn encode_var<'p>(&self, g: &Graph<'p, T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        self.check_input(x.shape())?;
        let mean = g.constant(Tensor::from_fn(&[3], |c| T::lit(self.preprocess.mean[c])));
        let std = g.constant(Tensor::from_fn(&[3], |c| T::lit(self.preprocess.std[c])));
        let mut h = g.channel(&g.channel(x, &mean, ChanOp::Sub), &std, ChanOp::Div);
        let mut taps = Vec::with_capacity(4);
        for stage in &self.plan {
            match *stage {
                Stage::Pool => h = g.maxpool2(&h),
                Stage::Conv { layer, tap } => {
                    let conv = &self.convs[layer];
                    let w = g.shared(Arc::clone(&conv.weight));
                    let b = g.shared(Arc::clone(&conv.bias));
                    h = g.relu(&g.conv2d(&h, &w, Some(&b), conv.stride, 1));
                    if tap {
                        taps.push(h.clone());
                    }
                }
            }
        }
        Ok(taps)
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let g = Graph::inference();
        let layers = self.encode_var(&g, &g.constant(x.clone()))?;
        Ok(FeaturePyramid {
            layers: layers.into_iter().map(Var::into_tensor).collect(),
        })
    }

    /// Style vector `[B, S]` of an image on the tape.
    pub fn style_var<'p>(&self, g: &Graph<'p, T>, x: &Var<T>) -> Result<Var<T>> {
        let layers = self.encode_var(g, x)?;
        Ok(style_from_layers(g, &layers))
    }

    pub fn extract_style(&self, x: &Tensor<T>) -> Result<StyleVector<T>> {
        let g = Graph::inference();
        StyleVector::new(self.style_var(&g, &g.constant(x.clone()))?.into_tensor())
    }
}

/// Channel means of every level followed by channel stds of every level.
pub fn style_from_layers<T: Scalar>(g: &Graph<'_, T>, layers: &[Var<T>]) -> Var<T> {
    let stats: Vec<(Var<T>, Var<T>)> = layers.iter().map(|l| g.channel_stats(l)).collect();
    let parts: Vec<&Var<T>> = stats
        .iter()
        .map(|(m, _)| m)
        .chain(stats.iter().map(|(_, s)| s))
        .collect();
    g.concat1(&parts)
}

fn digest<T: Scalar>(named: &BTreeMap<String, &Tensor<T>>) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Human-readable differences between the expected layout and `found`,
/// in layout order, so the first entry names the first missing tensor.
fn manifest_diff<T: Scalar>(
    expected: &[(String, Vec<usize>)],
    found: &BTreeMap<String, Tensor<T>>,
) -> Vec<String> {
    let mut problems = Vec::new();
    for (name, shape) in expected {
        match found.get(name) {
            None => problems.push(format!("missing tensor '{name}' (expected shape {shape:?})")),
            Some(t) if t.shape() != shape.as_slice() => problems.push(format!(
                "tensor '{name}' has shape {:?}, expected {shape:?}",
                t.shape()
            )),
            Some(_) => {}
        }
    }
    problems
}

/// Finds a weight file, falling back to the cache directory for bare names.
pub fn resolve_weights(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(CACHE_ENV) {
        Some(dir) => {
            let cached = Path::new(&dir).join(path);
            if cached.exists() {
                cached
            } else {
                path.to_path_buf()
            }
        }
        None => path.to_path_buf(),
    }
}

/// Loads an encoder from `"stub:<seed>"` or a weight file.
pub fn load_encoder<T: Scalar>(spec: &str) -> Result<PerceptualEncoder<T>> {
    if let Some(seed) = spec.strip_prefix("stub:") {
        let seed = seed
            .parse()
            .map_err(|_| Error::Parameter(format!("bad stub seed in encoder spec '{spec}'")))?;
        return Ok(PerceptualEncoder::stub(seed));
    }
    let path = resolve_weights(Path::new(spec));
    let fail = |reason: String| Error::Load {
        path: path.clone(),
        reason,
    };
    let archive = archive::load::<T>(&path)?;
    let manifest: Manifest = serde_json::from_value(archive.meta)
        .map_err(|e| fail(format!("weight manifest unreadable: {e}")))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(fail(format!(
            "unknown weight format '{}', expected '{MANIFEST_FORMAT}'",
            manifest.format
        )));
    }
    let (layout, kind) = if let Some(seed) = manifest.variant.strip_prefix("stub:") {
        let seed = seed.parse().map_err(|_| fail("bad stub variant".into()))?;
        (stub_layout(), EncoderKind::Stub { seed })
    } else if manifest.variant == "vgg19-relu4_1" {
        (standard_layout(), EncoderKind::Standard)
    } else {
        return Err(fail(format!("unknown encoder variant '{}'", manifest.variant)));
    };
    let expected = expected_tensors(&layout);
    let problems = manifest_diff(&expected, &archive.tensors);
    if !problems.is_empty() {
        return Err(fail(problems.join("; ")));
    }
    let mut tensors = archive.tensors;
    let enc = PerceptualEncoder::assemble(kind, manifest.preprocess, &layout, |n| {
        tensors.remove(n).unwrap()
    });
    let sum = enc.weights_digest();
    if sum != manifest.checksum {
        return Err(fail(format!(
            "checksum mismatch: manifest {}, weights {sum}",
            manifest.checksum
        )));
    }
    Ok(enc)
}

/// Fresh random VGG-19 weights; only for exercising the standard code path.
pub fn random_standard<T: Scalar>(seed: u64) -> PerceptualEncoder<T> {
    let layout = standard_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors: BTreeMap<String, Tensor<T>> = expected_tensors(&layout)
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".weight") {
                Tensor::randn(&shape, (2.0 / (shape[1] * 9) as f64).sqrt(), &mut rng)
            } else {
                Tensor::zeros(&shape)
            };
            (name, t)
        })
        .collect();
    PerceptualEncoder::assemble(EncoderKind::Standard, Preprocess::default(), &layout, |n| {
        tensors.remove(n).unwrap()
    })
}
