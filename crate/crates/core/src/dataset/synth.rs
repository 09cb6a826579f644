//! SAR-like chip synthesis: polygonal class templates with bright
//! scatterers, a shadow cast upward, and gamma speckle over textured clutter.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::image::Image;

/// Clutter statistics of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    /// Mean clutter reflectivity (target reflectivity is 1).
    pub reflectivity: f64,
    /// Gaussian smoothing radius of the log-normal texture, pixels.
    pub correlation_length: f64,
    /// Standard deviation of the log texture.
    pub texture_strength: f64,
    /// Speckle looks L.
    pub looks: f64,
    /// Multiplier on clutter reflectivity inside the shadow.
    pub shadow_attenuation: f64,
}

impl SceneModel {
    /// Deterministic scene catalogue; distinct ids give distinct clutter
    /// statistics.
    pub fn catalogue(id: u32) -> Self {
        // Low-discrepancy walk over the parameter box so neighbouring ids
        // differ in every coordinate.
        let f = |k: u32, golden: f64| ((id as f64 + 1.0) * golden + k as f64 * 0.1).fract();
        Self {
            reflectivity: 0.02 + 0.04 * f(0, 0.618_033_988_7),
            correlation_length: 0.6 + 3.0 * f(1, 0.754_877_666_2),
            texture_strength: 0.2 + 0.6 * f(2, 0.569_840_290_9),
            looks: 1.0 + (3.0 * f(3, 0.671_043_606_1)).floor(),
            shadow_attenuation: 0.15,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.reflectivity > 0.0) || !(self.looks >= 1.0) {
            return Err("scene needs reflectivity > 0 and looks >= 1".into());
        }
        if !(self.correlation_length >= 0.0 && self.texture_strength >= 0.0 && self.shadow_attenuation >= 0.0) {
            return Err("scene texture and shadow parameters must be non-negative".into());
        }
        Ok(())
    }
}

/// Template coordinates are drawn large for readability and shrunk by this
/// factor, which keeps targets narrow enough for the CFAR training ring to
/// see mostly clutter.
pub const TARGET_SCALE: f64 = 0.6;

/// Outline vertices (x right, y down, pixels at 64×64) and scatterer
/// positions of one class, in target-local coordinates.
pub struct Template {
    pub outline: &'static [(f64, f64)],
    pub scatterers: &'static [(f64, f64)],
    /// Shadow length in pixels.
    pub height: f64,
}

pub const TEMPLATES: [Template; 10] = [
    Template {
        outline: &[(-13.0, -6.0), (13.0, -6.0), (13.0, 6.0), (-13.0, 6.0)],
        scatterers: &[(-9.0, -3.0), (9.0, 3.0), (0.0, 0.0)],
        height: 6.0,
    },
    Template {
        outline: &[(-7.0, -7.0), (7.0, -7.0), (7.0, 7.0), (-7.0, 7.0)],
        scatterers: &[(0.0, 0.0), (-4.0, 4.0)],
        height: 9.0,
    },
    Template {
        outline: &[(-15.0, -3.0), (15.0, -3.0), (15.0, 3.0), (-15.0, 3.0)],
        scatterers: &[(-12.0, 0.0), (12.0, 0.0)],
        height: 4.0,
    },
    Template {
        // T: wide bar with a stem.
        outline: &[
            (-12.0, -8.0),
            (12.0, -8.0),
            (12.0, -2.0),
            (3.0, -2.0),
            (3.0, 10.0),
            (-3.0, 10.0),
            (-3.0, -2.0),
            (-12.0, -2.0),
        ],
        scatterers: &[(-9.0, -5.0), (9.0, -5.0), (0.0, 7.0)],
        height: 7.0,
    },
    Template {
        // L.
        outline: &[(-10.0, -10.0), (-3.0, -10.0), (-3.0, 4.0), (11.0, 4.0), (11.0, 10.0), (-10.0, 10.0)],
        scatterers: &[(-7.0, -7.0), (8.0, 7.0)],
        height: 6.0,
    },
    Template {
        // Wedge.
        outline: &[(-12.0, -9.0), (13.0, 0.0), (-12.0, 9.0)],
        scatterers: &[(9.0, 0.0), (-9.0, -6.0), (-9.0, 6.0)],
        height: 5.0,
    },
    Template {
        // Plus.
        outline: &[
            (-3.0, -11.0),
            (3.0, -11.0),
            (3.0, -3.0),
            (11.0, -3.0),
            (11.0, 3.0),
            (3.0, 3.0),
            (3.0, 11.0),
            (-3.0, 11.0),
            (-3.0, 3.0),
            (-11.0, 3.0),
            (-11.0, -3.0),
            (-3.0, -3.0),
        ],
        scatterers: &[(0.0, -8.0), (8.0, 0.0), (0.0, 8.0), (-8.0, 0.0)],
        height: 8.0,
    },
    Template {
        // Trapezoid tapering to the right.
        outline: &[(-10.0, -12.0), (12.0, -2.0), (12.0, 2.0), (-10.0, 12.0)],
        scatterers: &[(-7.0, -7.0), (-7.0, 7.0), (9.0, 0.0)],
        height: 6.0,
    },
    Template {
        // Hexagon.
        outline: &[(-12.0, 0.0), (-6.0, -10.4), (6.0, -10.4), (12.0, 0.0), (6.0, 10.4), (-6.0, 10.4)],
        scatterers: &[(0.0, 0.0), (-8.0, 0.0)],
        height: 10.0,
    },
    Template {
        // U: block with a notch.
        outline: &[
            (-12.0, -8.0),
            (-4.0, -8.0),
            (-4.0, 1.0),
            (4.0, 1.0),
            (4.0, -8.0),
            (12.0, -8.0),
            (12.0, 8.0),
            (-12.0, 8.0),
        ],
        scatterers: &[(-8.0, -5.0), (8.0, -5.0), (0.0, 5.0)],
        height: 5.0,
    },
];

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Template geometry placed in an image: outline rotated by `azimuth_deg`
/// about the image centre plus `offset`, scaled by `TARGET_SCALE * size / 64`.
#[derive(Debug, Clone, Copy)]
pub struct Placement {
    pub size: usize,
    pub azimuth_deg: f64,
    pub offset: (f64, f64),
}

impl Placement {
    fn scale(&self) -> f64 {
        TARGET_SCALE * self.size as f64 / 64.0
    }

    fn to_image(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.azimuth_deg.to_radians().sin_cos();
        let k = self.scale();
        let (x, y) = (x * k, y * k);
        let centre = (self.size as f64 - 1.0) / 2.0;
        (c * x - s * y + centre + self.offset.0, s * x + c * y + centre + self.offset.1)
    }

    /// Rasterised footprint: pixel centres inside the rotated outline.
    pub fn footprint(&self, t: &Template) -> Image {
        let poly: Vec<(f64, f64)> = t.outline.iter().map(|&p| self.to_image(p)).collect();
        let n = self.size;
        let mut m = Image::filled(n, n, 0.0);
        for y in 0..n {
            for x in 0..n {
                if point_in_polygon(x as f64, y as f64, &poly) {
                    m.set(y, x, 1.0);
                }
            }
        }
        m
    }

    pub fn scatterers(&self, t: &Template) -> Vec<(f64, f64)> {
        t.scatterers.iter().map(|&p| self.to_image(p)).collect()
    }
}

/// Pixels within `length` rows above the footprint in each column,
/// excluding the footprint itself.
pub fn shadow_region(footprint: &Image, length: usize) -> Image {
    let (h, w) = (footprint.height, footprint.width);
    let mut s = Image::filled(h, w, 0.0);
    for x in 0..w {
        for y in 0..h {
            if footprint.get(y, x) > 0.5 {
                for d in 1..=length {
                    if d > y {
                        break;
                    }
                    if footprint.get(y - d, x) < 0.5 {
                        s.set(y - d, x, 1.0);
                    }
                }
            }
        }
    }
    s
}

/// Separable Gaussian blur with mirror boundaries.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = (img.height, img.width);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::filled(h, w, 0.0);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let d = k as isize - r;
                    let v = if horizontal {
                        src.get(y, crate::tensor::reflect_index(x as isize + d, w))
                    } else {
                        src.get(crate::tensor::reflect_index(y as isize + d, h), x)
                    };
                    acc += kv * v as f64;
                }
                out.set(y, x, (acc / norm) as f32);
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Unit-mean log-normal clutter texture.
fn texture<R: Rng + ?Sized>(n: usize, scene: &SceneModel, rng: &mut R) -> Image {
    let white: Vec<f32> = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    let field = gaussian_blur(&Image::new(n, n, white).unwrap(), scene.correlation_length);
    let mean = field.mean();
    let var = field.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / field.len() as f64;
    let sd = var.sqrt().max(1e-12);
    let s = scene.texture_strength;
    let data = field
        .data
        .iter()
        .map(|&v| ((v as f64 - mean) / sd * s - s * s / 2.0).exp() as f32)
        .collect();
    Image::new(n, n, data).unwrap()
}

/// Rendered chip before metadata is attached.
pub struct Rendered {
    pub amplitude: Image,
    pub footprint: Image,
    pub shadow: Image,
}

/// Renders one chip of class `class` at `azimuth_deg` under `scene`.
pub fn render<R: Rng + ?Sized>(class: usize, azimuth_deg: f64, size: usize, scene: &SceneModel, rng: &mut R) -> Rendered {
    let t = &TEMPLATES[class];
    let jitter = 2.0 * size as f64 / 64.0;
    let place = Placement {
        size,
        azimuth_deg,
        offset: (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter)),
    };
    let footprint = place.footprint(t);
    let shadow = shadow_region(&footprint, (t.height * size as f64 / 64.0).round() as usize);
    let tex = texture(size, scene, rng);

    let scat = place.scatterers(t);
    let spread = 1.2 * size as f64 / 64.0;
    let mut reflect = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            reflect[i] = if footprint.data[i] > 0.5 {
                let mut r = 1.0;
                for &(sx, sy) in &scat {
                    let d2 = (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2);
                    r += 6.0 * (-d2 / (2.0 * spread * spread)).exp();
                }
                r
            } else {
                let atten = if shadow.data[i] > 0.5 { scene.shadow_attenuation } else { 1.0 };
                scene.reflectivity * tex.data[i] as f64 * atten
            };
        }
    }

    let speckle = Gamma::new(scene.looks, 1.0 / scene.looks).expect("looks >= 1");
    let amp: Vec<f64> = reflect.iter().map(|&r| (r * speckle.sample(rng)).sqrt()).collect();
    // Normalise by a high quantile so isolated speckle peaks saturate.
    let mut sorted = amp.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = sorted[((sorted.len() as f64 * 0.995) as usize).min(sorted.len() - 1)].max(1e-12);
    let amplitude = Image::new(size, size, amp.iter().map(|&a| (a / q).min(1.0) as f32).collect()).unwrap();
    Rendered {
        amplitude,
        footprint,
        shadow,
    }
}
