//! Domain data generation: two independently augmented views per image from
//! small rotations, additive Gaussian noise and random pixel replacement.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::rng;
use crate::tensor::reflect_index;

/// Largest rotation accepted; beyond it the shadow would leave the region
/// above the target.
pub const MAX_ROTATION_DEG: f64 = 15.0;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("rotation of {0}° exceeds the ±{MAX_ROTATION_DEG}° guard")]
    RotationRange(f64),
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotationConfig {
    pub angle_low_deg: f64,
    pub angle_high_deg: f64,
    pub probability: f64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            angle_low_deg: -5.0,
            angle_high_deg: 5.0,
            probability: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub mean: f64,
    pub std: f64,
    pub amplitude_low: f64,
    pub amplitude_high: f64,
    pub probability: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mean: 0.1,
            std: 0.1,
            amplitude_low: 0.5,
            amplitude_high: 1.5,
            probability: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplaceConfig {
    pub max_fraction: f64,
    pub probability: f64,
}

impl Default for ReplaceConfig {
    fn default() -> Self {
        Self {
            max_fraction: 0.05,
            probability: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation: RotationConfig,
    pub noise: NoiseConfig,
    pub replace: ReplaceConfig,
}

fn unit(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl AugmentConfig {
    /// All transforms disabled.
    pub fn none() -> Self {
        let mut c = Self::default();
        c.rotation.probability = 0.0;
        c.noise.probability = 0.0;
        c.replace.probability = 0.0;
        c
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::Config(m.into()));
        let (r, n, p) = (&self.rotation, &self.noise, &self.replace);
        if !(unit(r.probability) && unit(n.probability) && unit(p.probability)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(r.angle_low_deg <= r.angle_high_deg) {
            return bad("rotation angle bounds must be ordered");
        }
        if r.angle_low_deg.abs() > MAX_ROTATION_DEG || r.angle_high_deg.abs() > MAX_ROTATION_DEG {
            return bad("rotation angles must stay within ±15°");
        }
        if !(n.std >= 0.0 && n.mean.is_finite() && n.amplitude_low <= n.amplitude_high && n.amplitude_low.is_finite()) {
            return bad("noise needs std >= 0 and ordered finite amplitude bounds");
        }
        if !unit(p.max_fraction) {
            return bad("replacement max_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One applied transform with its drawn parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Transform {
    Rotate { degrees: f64 },
    Noise { amplitude: f64, mean: f64, std: f64 },
    Replace { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub view1: Image,
    pub view2: Image,
    pub transforms1: Vec<Transform>,
    pub transforms2: Vec<Transform>,
}

/// Bilinear rotation about the image centre. Samples outside the frame use
/// mirror extension; the result is clamped to `[0, 1]`.
pub fn rotate_small(image: &Image, degrees: f64) -> Result<Image, AugmentError> {
    if !(degrees.abs() <= MAX_ROTATION_DEG) {
        return Err(AugmentError::RotationRange(degrees));
    }
    if degrees == 0.0 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height, image.width);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            // Inverse map: rotate the output coordinate back by −θ.
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let px = |xx: isize| reflect_index(xx, w);
            let py = |yy: isize| reflect_index(yy, h);
            let v00 = image.get(py(y0), px(x0)) as f64;
            let v01 = image.get(py(y0), px(x0 + 1)) as f64;
            let v10 = image.get(py(y0 + 1), px(x0)) as f64;
            let v11 = image.get(py(y0 + 1), px(x0 + 1)) as f64;
            let v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
            out.set(y, x, v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(out)
}

/// `x′ = clamp(x + A·g)`, `g ~ N(μ, σ)` i.i.d. per pixel, one `A` per call.
pub fn noise_perturb<R: Rng + ?Sized>(image: &Image, amplitude: f64, mean: f64, std: f64, rng: &mut R) -> Image {
    let mut out = image.clone();
    if amplitude == 0.0 {
        return out;
    }
    let dist = Normal::new(mean, std.max(0.0)).expect("finite noise parameters");
    for v in &mut out.data {
        let g = dist.sample(rng);
        *v = ((*v as f64) + amplitude * g).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Replaces exactly `round(p·N)` distinct pixels, chosen uniformly without
/// replacement, by independent `U(0, 1)` draws.
pub fn random_replace<R: Rng + ?Sized>(image: &Image, fraction: f64, rng: &mut R) -> Image {
    let mut out = image.clone();
    let n = out.len();
    let count = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    if count == 0 {
        return out;
    }
    for i in index::sample(rng, n, count) {
        out.data[i] = rng.random::<f32>();
    }
    out
}

/// One view: rotation, then noise, then replacement, each firing
/// independently with its configured probability.
pub fn sample_view<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> (Image, Vec<Transform>) {
    let mut img = image.clone();
    let mut applied = Vec::new();
    if rng.random::<f64>() < cfg.rotation.probability {
        let degrees = uniform(rng, cfg.rotation.angle_low_deg, cfg.rotation.angle_high_deg);
        img = rotate_small(&img, degrees).expect("validated rotation bounds");
        applied.push(Transform::Rotate { degrees });
    }
    if rng.random::<f64>() < cfg.noise.probability {
        let n = &cfg.noise;
        let amplitude = uniform(rng, n.amplitude_low, n.amplitude_high);
        img = noise_perturb(&img, amplitude, n.mean, n.std, rng);
        applied.push(Transform::Noise {
            amplitude,
            mean: n.mean,
            std: n.std,
        });
    }
    if rng.random::<f64>() < cfg.replace.probability {
        let fraction = uniform(rng, 0.0, cfg.replace.max_fraction);
        img = random_replace(&img, fraction, rng);
        applied.push(Transform::Replace { fraction });
    }
    (img, applied)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Two views of `image` from independent substreams of `seed`.
pub fn sample_domain_pair(image: &Image, cfg: &AugmentConfig, seed: u64) -> AugmentedPair {
    let (view1, transforms1) = sample_view(image, cfg, &mut rng::stream(seed, &[1]));
    let (view2, transforms2) = sample_view(image, cfg, &mut rng::stream(seed, &[2]));
    AugmentedPair {
        view1,
        view2,
        transforms1,
        transforms2,
    }
}
