#![allow(dead_code)]

use rand::Rng;
use styleflow::params::Parameters;
use styleflow::scalar::Scalar;
use styleflow::tensor::Tensor;

/// Perturbs every parameter so that no layer sits at its identity
/// initialization. Actnorm scales are kept away from zero.
pub fn randomize<T: Scalar, P: Parameters<T>, R: Rng>(model: &mut P, rng: &mut R, std: f64) {
    model.visit_params_mut("", &mut |name, t| {
        if name.ends_with("actnorm.scale") {
            for v in t.data_mut() {
                *v = T::lit(rng.random_range(0.5..1.5));
            }
        } else if name.ends_with("invconv.weight") {
            // stays well conditioned: orthogonal plus a small perturbation
            for v in t.data_mut() {
                *v += T::lit(rng.random_range(-0.05..0.05));
            }
        } else {
            for v in t.data_mut() {
                *v += T::lit(rng.random_range(-std..std));
            }
        }
    });
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-30)
}

/// Central finite differences of `f` at the listed coordinates of `x`.
pub fn central_diff<T: Scalar>(
    x: &Tensor<T>,
    coords: &[usize],
    step: f64,
    f: impl Fn(&Tensor<T>) -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += T::lit(step);
            let mut xm = x.clone();
            xm.data_mut()[i] -= T::lit(step);
            let hp = xp.data()[i].to_f64().unwrap() - x.data()[i].to_f64().unwrap();
            let hm = x.data()[i].to_f64().unwrap() - xm.data()[i].to_f64().unwrap();
            (f(&xp) - f(&xm)) / (hp + hm)
        })
        .collect()
}

/// Up to `n` distinct coordinates spread across `len`.
pub fn sample_coords<R: Rng>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = rand::seq::index::sample(rng, len, n).into_vec();
    v.sort_unstable();
    v
}

pub fn to_f64<T: Scalar>(t: &[T]) -> Vec<f64> {
    t.iter().map(|v| v.to_f64().unwrap()).collect()
}

/// Rewires a CGA network so that it outputs the pooled statistics of its
/// input features: `mu = mean(f)` exactly and
/// `sigma = softplus(std(f)) + 1e-4`, which equals `std(f)` to within
/// `1e-4 + exp(-std(f))`. Needs a hidden width of at least `3C`.
pub fn passthrough_san<T: Scalar>(san: &mut styleflow::san::SanModule<T>) {
    let c = san.channels();
    let h = san.hidden();
    let inputs = san.fc1.weight.shape()[1];
    assert!(h >= 3 * c, "CGA hidden width {h} < 3C = {}", 3 * c);
    // hidden[r] = relu(mu_r), hidden[c + r] = relu(sigma_r), hidden[2c + r] = relu(-mu_r)
    san.fc1.weight = Tensor::from_fn(&[h, inputs], |k| {
        let (row, col) = (k / inputs, k % inputs);
        if row < 2 * c && col == row {
            T::one()
        } else if (2 * c..3 * c).contains(&row) && col == row - 2 * c {
            -T::one()
        } else {
            T::zero()
        }
    });
    san.fc1.bias = Tensor::zeros(&[h]);
    san.fc2.weight = Tensor::from_fn(&[2 * c, h], |k| {
        let (row, col) = (k / h, k % h);
        if row < c && col == row {
            T::one()
        } else if row < c && col == row + 2 * c {
            -T::one()
        } else if row >= c && col == row {
            T::one()
        } else {
            T::zero()
        }
    });
    san.fc2.bias = Tensor::zeros(&[2 * c]);
}

/// Per-(batch, channel) population mean and standard deviation of a
/// `[B, C, H, W]` tensor, computed directly in f64.
pub fn channel_moments<T: Scalar>(t: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (b, c, h, w) = t.dims4().unwrap();
    let plane = h * w;
    let mut means = Vec::with_capacity(b * c);
    let mut stds = Vec::with_capacity(b * c);
    for chunk in t.data().chunks(plane).take(b * c) {
        let v: Vec<f64> = chunk.iter().map(|x| x.to_f64().unwrap()).collect();
        let m = v.iter().sum::<f64>() / plane as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / plane as f64;
        means.push(m);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// The same encoder with its f32 weights widened exactly to f64.
pub fn widen_encoder(
    enc: &styleflow::perceptual::PerceptualEncoder<f32>,
) -> styleflow::perceptual::PerceptualEncoder<f64> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("encoder.safetensors");
    enc.save_weights(&path).unwrap();
    styleflow::perceptual::load_encoder(path.to_str().unwrap()).unwrap()
}

/// Writes `n` synthetic `size x size` PNGs: a random sinusoidal pattern in
/// a random colour, multiplied by `gain`.
pub fn toy_domain(dir: &std::path::Path, n: usize, size: usize, seed: u64, gain: f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.9));
        let (fx, fy) = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let s = size as f64;
        let img = Tensor::<f32>::from_fn(&[1, 3, size, size], |k| {
            let c = k / (size * size);
            let (y, x) = ((k / size) % size, k % size);
            let t = std::f64::consts::TAU * (fx * x as f64 / s + fy * y as f64 / s) + phase;
            (gain * colour[c] * (0.6 + 0.4 * t.sin())) as f32
        });
        styleflow::data::save_png(&img, &dir.join(format!("img{i:03}.png"))).unwrap();
    }
}
