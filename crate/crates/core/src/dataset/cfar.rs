//! Cell-averaging CFAR detection, binary morphology and the coarse soft
//! pseudo-labels that stand in for saliency-derived segmentation targets.

use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::tensor::reflect_index;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfarConfig {
    /// Guard cells on each side of the cell under test.
    pub guard: usize,
    /// Training cells beyond the guard band on each side.
    pub train: usize,
    pub factor: f64,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            guard: 2,
            train: 4,
            factor: 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    pub dilate_radius: usize,
    pub blur_size: usize,
    /// Rows above the target footprint that count as shadow edge.
    pub shadow_band: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            dilate_radius: 2,
            blur_size: 5,
            shadow_band: 2,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("cfar: {h}×{w} image is smaller than the {window}×{window} window")]
pub struct CfarWindowError {
    pub h: usize,
    pub w: usize,
    pub window: usize,
}

#[inline]
fn at(img: &Image, y: isize, x: isize) -> f32 {
    img.get(reflect_index(y, img.height), reflect_index(x, img.width))
}

/// Flags pixels brighter than `factor` times the mean of their training
/// ring (guard ring excluded), then applies one 3×3 closing.
pub fn cfar_mask(img: &Image, cfg: &CfarConfig) -> Result<Image, CfarWindowError> {
    let outer = (cfg.guard + cfg.train) as isize;
    let inner = cfg.guard as isize;
    let window = 2 * outer as usize + 1;
    if img.height < window || img.width < window {
        return Err(CfarWindowError {
            h: img.height,
            w: img.width,
            window,
        });
    }
    // Summed-area table over the mirror-padded image.
    let (h, w) = (img.height as isize, img.width as isize);
    let (ph, pw) = ((h + 2 * outer) as usize, (w + 2 * outer) as usize);
    let mut sat = vec![0.0f64; (ph + 1) * (pw + 1)];
    for y in 0..ph {
        let mut row = 0.0;
        for x in 0..pw {
            row += at(img, y as isize - outer, x as isize - outer) as f64;
            sat[(y + 1) * (pw + 1) + x + 1] = sat[y * (pw + 1) + x + 1] + row;
        }
    }
    // Sum over the square of half-width r centred on padded (cy, cx).
    let square = |cy: usize, cx: usize, r: usize| {
        let (y0, y1, x0, x1) = (cy - r, cy + r + 1, cx - r, cx + r + 1);
        sat[y1 * (pw + 1) + x1] - sat[y0 * (pw + 1) + x1] - sat[y1 * (pw + 1) + x0] + sat[y0 * (pw + 1) + x0]
    };
    let ring_cells = ((2 * outer + 1).pow(2) - (2 * inner + 1).pow(2)) as f64;
    let mut out = Image::filled(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let (cy, cx) = (y + outer as usize, x + outer as usize);
            let ring = square(cy, cx, outer as usize) - square(cy, cx, inner as usize);
            let v = img.get(y, x) as f64;
            if v * ring_cells > cfg.factor * ring {
                out.set(y, x, 1.0);
            }
        }
    }
    Ok(close3(&out))
}

fn morph(mask: &Image, offsets: &[(isize, isize)], dilate: bool) -> Image {
    let mut out = Image::filled(mask.height, mask.width, 0.0);
    for y in 0..mask.height as isize {
        for x in 0..mask.width as isize {
            let hit = |&(dy, dx): &(isize, isize)| at(mask, y + dy, x + dx) > 0.5;
            let on = if dilate { offsets.iter().any(hit) } else { offsets.iter().all(hit) };
            if on {
                out.set(y as usize, x as usize, 1.0);
            }
        }
    }
    out
}

fn square_offsets(r: isize) -> Vec<(isize, isize)> {
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
}

fn disk_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    square_offsets(r).into_iter().filter(|(dy, dx)| dy * dy + dx * dx <= r * r).collect()
}

/// 3×3 closing (dilation then erosion), mirror boundaries.
pub fn close3(mask: &Image) -> Image {
    let k = square_offsets(1);
    morph(&morph(mask, &k, true), &k, false)
}

/// Dilation by a disk of radius `r`.
pub fn dilate_disk(mask: &Image, r: usize) -> Image {
    morph(mask, &disk_offsets(r), true)
}

/// Mean over a `size × size` box (odd size), mirror boundaries.
pub fn box_blur(img: &Image, size: usize) -> Image {
    let r = (size / 2) as isize;
    let n = (size * size) as f64;
    let mut out = Image::filled(img.height, img.width, 0.0);
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let mut acc = 0.0f64;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += at(img, y + dy, x + dx) as f64;
                }
            }
            out.set(y as usize, x as usize, (acc / n) as f32);
        }
    }
    out
}

/// Adds `band` rows directly above every on-pixel.
pub fn add_band_above(mask: &Image, band: usize) -> Image {
    let mut out = mask.clone();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) > 0.5 {
                for d in 1..=band.min(y) {
                    out.set(y - d, x, 1.0);
                }
            }
        }
    }
    out
}

/// Soft segmentation target: dilate, add the shadow-edge band, box blur.
pub fn make_pseudo_label(mask: &Image, cfg: &PseudoLabelConfig) -> Image {
    let grown = dilate_disk(mask, cfg.dilate_radius);
    let banded = add_band_above(&grown, cfg.shadow_band);
    let mut soft = box_blur(&banded, cfg.blur_size);
    soft.clamp_unit();
    soft
}
