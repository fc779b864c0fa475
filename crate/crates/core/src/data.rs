//! Unpaired image domains: directory scanning, decoding, resizing, seeded
//! pair sampling and the reflect pad-and-trim used to meet the network's
//! divisibility requirement.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Style-transfer training size `(H, W)`.
pub const STYLE_TRAIN_SIZE: [usize; 2] = [300, 400];
/// Evaluation size.
pub const EVAL_SIZE: [usize; 2] = [256, 256];
/// Photo-realistic translation size.
pub const PHOTO_SIZE: [usize; 2] = [800, 1000];
/// Decode failures tolerated by one draw before giving up.
pub const MAX_DECODE_RETRIES: usize = 10;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub root: PathBuf,
    pub role: Role,
    /// Output size `(H, W)`.
    pub resize: [usize; 2],
    /// Optional centered crop `(H, W)` applied before resizing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<[usize; 2]>,
}

impl DomainSpec {
    pub fn new(name: &str, root: &Path, role: Role, resize: [usize; 2]) -> Self {
        DomainSpec {
            name: name.to_string(),
            root: root.to_path_buf(),
            role,
            resize,
            crop: None,
        }
    }

    pub fn source(name: &str, root: &Path, resize: [usize; 2]) -> Self {
        Self::new(name, root, Role::Source, resize)
    }

    pub fn target(name: &str, root: &Path, resize: [usize; 2]) -> Self {
        Self::new(name, root, Role::Target, resize)
    }
}

/// The image files of a domain in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainManifest {
    pub name: String,
    pub files: Vec<PathBuf>,
}

impl DomainManifest {
    pub fn count(&self) -> usize {
        self.files.len()
    }
}

fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn scan_domain(spec: &DomainSpec) -> Result<DomainManifest> {
    scan_dir(&spec.name, &spec.root)
}

/// Lists the PNG and JPEG files directly inside `root`, skipping others.
pub fn scan_dir(name: &str, root: &Path) -> Result<DomainManifest> {
    let entries = fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("cannot read domain '{name}' at {}: {e}", root.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_file() && is_supported(&path) {
            files.push(path);
        } else {
            log::warn!("domain '{name}': skipping unsupported entry {}", path.display());
        }
    }
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "domain '{name}' has no PNG or JPEG images in {}",
            root.display()
        )));
    }
    files.sort();
    Ok(DomainManifest {
        name: name.to_string(),
        files,
    })
}

/// `[1, 3, H, W]` tensor with values in `[0, 1]`.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let max = T::lit(255.0);
    Tensor::from_fn(&[1, 3, h, w], |k| {
        let c = k / (h * w);
        let p = k % (h * w);
        T::from_u8(raw[p * 3 + c]).unwrap() / max
    })
}

/// Converts the first image of a batch to 8-bit RGB, clamping to `[0, 1]`.
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::dim(format!("expected a 3-channel image, got {c} channels")));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = t.at4(0, ch, y as usize, x as usize).to_f64().unwrap_or(0.0);
            px.0[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(img)
}

/// Decodes an image file, optionally center-cropping and then resizing.
pub fn load_image<T: Scalar>(path: &Path, crop: Option<[usize; 2]>, resize: Option<[usize; 2]>) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rgb = img.to_rgb8();
    if let Some([ch, cw]) = crop {
        let (w, h) = rgb.dimensions();
        let (cw, ch) = ((cw as u32).min(w), (ch as u32).min(h));
        rgb = imageops::crop_imm(&rgb, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image();
    }
    if let Some([h, w]) = resize {
        if (rgb.height(), rgb.width()) != (h as u32, w as u32) {
            rgb = imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        }
    }
    Ok(image_to_tensor(&rgb))
}

pub fn save_png<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    tensor_to_image(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// A domain ready for sampling.
#[derive(Clone, Debug)]
pub struct Domain {
    pub spec: DomainSpec,
    pub manifest: DomainManifest,
}

impl Domain {
    pub fn open(spec: DomainSpec) -> Result<Self> {
        let manifest = scan_domain(&spec)?;
        Ok(Domain { spec, manifest })
    }

    /// Draws a uniformly random image, skipping undecodable files.
    pub fn draw<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Tensor<T>, PathBuf)> {
        for _ in 0..MAX_DECODE_RETRIES {
            let path = &self.manifest.files[rng.random_range(0..self.manifest.count())];
            match load_image(path, self.spec.crop, Some(self.spec.resize)) {
                Ok(t) => return Ok((t, path.clone())),
                Err(e) => log::warn!("skipping undecodable image: {e}"),
            }
        }
        Err(Error::Dataset(format!(
            "domain '{}': {MAX_DECODE_RETRIES} consecutive decode failures",
            self.spec.name
        )))
    }
}

#[derive(Clone, Debug)]
pub struct SamplePair<T> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub target_domain_id: usize,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
}

/// A uniformly random source image, a uniformly random target domain and a
/// uniformly random image of that domain, drawn independently.
pub fn sample_pair<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    source: &Domain,
    targets: &[Domain],
) -> Result<SamplePair<T>> {
    if targets.is_empty() {
        return Err(Error::Dataset("no target domains configured".into()));
    }
    let (source_img, source_path) = source.draw(rng)?;
    let target_domain_id = rng.random_range(0..targets.len());
    let (target_img, target_path) = targets[target_domain_id].draw(rng)?;
    Ok(SamplePair {
        source: source_img,
        target: target_img,
        target_domain_id,
        source_path,
        target_path,
    })
}

/// Independent sampling stream for a prefetch worker.
pub fn worker_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}

/// Bottom and right padding added by [`pad_to_multiple`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub bottom: usize,
    pub right: usize,
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right edges up to multiples of `divisor`.
pub fn pad_to_multiple<T: Scalar>(img: &Tensor<T>, divisor: usize) -> Result<(Tensor<T>, Padding)> {
    let (b, c, h, w) = img.dims4()?;
    if divisor == 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!("cannot pad {:?} to a multiple of {divisor}", img.shape())));
    }
    let ph = h.div_ceil(divisor) * divisor;
    let pw = w.div_ceil(divisor) * divisor;
    let out = Tensor::from_fn(&[b, c, ph, pw], |k| {
        let j = k % pw;
        let i = (k / pw) % ph;
        let plane = k / (pw * ph);
        img.data()[(plane * h + reflect(i, h)) * w + reflect(j, w)]
    });
    Ok((
        out,
        Padding {
            bottom: ph - h,
            right: pw - w,
        },
    ))
}

/// Removes padding added by [`pad_to_multiple`].
pub fn trim<T: Scalar>(img: &Tensor<T>, pad: Padding) -> Result<Tensor<T>> {
    let (b, c, ph, pw) = img.dims4()?;
    if pad.bottom >= ph || pad.right >= pw {
        return Err(Error::dim(format!("padding {pad:?} exceeds image {:?}", img.shape())));
    }
    let (h, w) = (ph - pad.bottom, pw - pad.right);
    Ok(Tensor::from_fn(&[b, c, h, w], |k| {
        let j = k % w;
        let i = (k / w) % h;
        let plane = k / (w * h);
        img.data()[(plane * ph + i) * pw + j]
    }))
}
