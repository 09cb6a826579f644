//! Operating-condition perturbations, accuracy sweeps, two-player Shapley
//! clutter attribution, input-gradient saliency and mask statistics.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment;
use crate::dataset::{self, scene_name, ImageChip, PseudoLabelConfig, SceneModel};
use crate::image::Image;
use crate::model::{ForwardOptions, HdaNet};
use crate::pipeline::{self, par_map, stack_images, PipelineError};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid setting: {0}")]
    Setting(String),
    #[error("{0} perturbs the training set; retrain instead of sweeping")]
    TrainSide(String),
    #[error("chip {0}: region mask is all target or all clutter")]
    DegenerateMask(String),
    #[error("clutter contribution ratio is undefined (no positive contributions)")]
    UndefinedRatio,
    #[error("empty chip set")]
    Empty,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
}

type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EocSetting {
    /// `snr_db = +∞` is the identity.
    GaussianNoise { snr_db: f64 },
    RandomReplace { fraction: f64 },
    Occlusion { size: usize },
    /// Re-renders each chip's class and azimuth under one of `scenes`.
    SceneSwap { scenes: Vec<u32> },
    AzimuthSubsample { keep_fraction: f64 },
}

impl EocSetting {
    pub fn name(&self) -> &'static str {
        match self {
            EocSetting::GaussianNoise { .. } => "gaussian",
            EocSetting::RandomReplace { .. } => "replace",
            EocSetting::Occlusion { .. } => "occlusion",
            EocSetting::SceneSwap { .. } => "scene",
            EocSetting::AzimuthSubsample { .. } => "azimuth",
        }
    }

    /// The swept parameter, for the CSV.
    pub fn param(&self) -> String {
        match self {
            EocSetting::GaussianNoise { snr_db } => snr_db.to_string(),
            EocSetting::RandomReplace { fraction } => fraction.to_string(),
            EocSetting::Occlusion { size } => size.to_string(),
            EocSetting::SceneSwap { scenes } => scenes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "),
            EocSetting::AzimuthSubsample { keep_fraction } => keep_fraction.to_string(),
        }
    }

    pub fn is_train_side(&self) -> bool {
        matches!(self, EocSetting::AzimuthSubsample { .. })
    }

    /// Builds a setting from a sweep name and parameter.
    pub fn parse(name: &str, param: &str) -> Result<Self> {
        let num = || param.trim().parse::<f64>().map_err(|e| EvalError::Setting(format!("{name} {param:?}: {e}")));
        let s = match name {
            "gaussian" => EocSetting::GaussianNoise { snr_db: num()? },
            "replace" => EocSetting::RandomReplace { fraction: num()? },
            "occlusion" => EocSetting::Occlusion {
                size: param
                    .trim()
                    .parse()
                    .map_err(|e| EvalError::Setting(format!("occlusion {param:?}: {e}")))?,
            },
            "scene" => EocSetting::SceneSwap {
                scenes: param
                    .split_whitespace()
                    .map(|s| s.parse().map_err(|e| EvalError::Setting(format!("scene {s:?}: {e}"))))
                    .collect::<Result<_>>()?,
            },
            "azimuth" => EocSetting::AzimuthSubsample { keep_fraction: num()? },
            other => return Err(EvalError::Setting(format!("unknown setting {other:?}"))),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EvalError::Setting(m));
        match *self {
            EocSetting::GaussianNoise { snr_db } => {
                if !((-10.0..=10.0).contains(&snr_db) || snr_db == f64::INFINITY) {
                    return bad(format!("snr_db {snr_db} outside [-10, 10]"));
                }
            }
            EocSetting::RandomReplace { fraction } => {
                if !(0.05..=0.25).contains(&fraction) {
                    return bad(format!("fraction {fraction} outside [0.05, 0.25]"));
                }
            }
            EocSetting::Occlusion { size } => {
                if ![5, 10, 15].contains(&size) {
                    return bad(format!("occlusion size {size} not in {{5, 10, 15}}"));
                }
            }
            EocSetting::SceneSwap { ref scenes } => {
                if scenes.is_empty() {
                    return bad("scene swap needs at least one scene".into());
                }
            }
            EocSetting::AzimuthSubsample { keep_fraction } => {
                if !(0.1..=0.9).contains(&keep_fraction) {
                    return bad(format!("keep_fraction {keep_fraction} outside [0.1, 0.9]"));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for EocSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), self.param())
    }
}

/// White Gaussian noise with variance `mean(x²) / 10^(snr/10)`, one value
/// per pixel, before any clamping.
pub fn snr_noise<R: Rng + ?Sized>(img: &Image, snr_db: f64, rng: &mut R) -> Vec<f64> {
    let power = img.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / img.len().max(1) as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    if sigma == 0.0 {
        return vec![0.0; img.len()];
    }
    let dist = Normal::new(0.0, sigma).expect("finite sigma");
    (0..img.len()).map(|_| dist.sample(rng)).collect()
}

/// Top-left corner of an occluding square, uniform within the centred
/// `H/2 × W/2` window.
fn occlusion_origin<R: Rng + ?Sized>(h: usize, w: usize, size: usize, rng: &mut R) -> (usize, usize) {
    let (wh, ww) = (h / 2, w / 2);
    let (y0, x0) = (h / 4, w / 4);
    (
        y0 + rng.random_range(0..=wh.saturating_sub(size)),
        x0 + rng.random_range(0..=ww.saturating_sub(size)),
    )
}

/// Keeps `round(keep·n)` chips per class at evenly spaced azimuth ranks,
/// so every azimuth sector stays represented.
fn azimuth_subsample<R: Rng + ?Sized>(chips: &[ImageChip], keep: f64, rng: &mut R) -> Vec<ImageChip> {
    let classes = chips.iter().map(|c| c.label).max().map_or(0, |m| m + 1);
    let mut keep_idx = vec![];
    for k in 0..classes {
        let mut idx: Vec<usize> = (0..chips.len()).filter(|&i| chips[i].label == k).collect();
        idx.sort_by(|&a, &b| chips[a].meta.azimuth_deg.total_cmp(&chips[b].meta.azimuth_deg));
        let n = idx.len();
        let m = ((keep * n as f64).round() as usize).clamp(usize::from(n > 0), n);
        let offset: f64 = rng.random();
        for j in 0..m {
            keep_idx.push(idx[((j as f64 + offset) * n as f64 / m as f64) as usize]);
        }
    }
    keep_idx.sort();
    keep_idx.into_iter().map(|i| chips[i].clone()).collect()
}

/// Applies one operating-condition change. Chip `i` draws from its own
/// substream of `seed`, so the result does not depend on chip order or
/// worker count.
pub fn apply_eoc(chips: &[ImageChip], setting: &EocSetting, pseudo: &PseudoLabelConfig, seed: u64) -> Result<Vec<ImageChip>> {
    setting.validate()?;
    let chip_rng = |i: usize| rng::stream(seed, &[rng::STREAM_EOC, i as u64]);
    let out = match setting {
        EocSetting::GaussianNoise { snr_db } => chips
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut c = c.clone();
                let noise = snr_noise(&c.amplitude, *snr_db, &mut chip_rng(i));
                for (v, n) in c.amplitude.data.iter_mut().zip(noise) {
                    *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
                }
                c
            })
            .collect(),
        EocSetting::RandomReplace { fraction } => chips
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut c = c.clone();
                c.amplitude = augment::random_replace(&c.amplitude, *fraction, &mut chip_rng(i));
                c
            })
            .collect(),
        EocSetting::Occlusion { size } => chips
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut c = c.clone();
                let (h, w) = (c.amplitude.height, c.amplitude.width);
                let (y0, x0) = occlusion_origin(h, w, *size, &mut chip_rng(i));
                for y in y0..(y0 + size).min(h) {
                    for x in x0..(x0 + size).min(w) {
                        c.amplitude.set(y, x, 0.0);
                        c.true_mask.set(y, x, 0.0);
                        c.pseudo_mask.set(y, x, 0.0);
                        if let Some(s) = c.shadow_mask.as_mut() {
                            s.set(y, x, 0.0);
                        }
                    }
                }
                c
            })
            .collect(),
        EocSetting::SceneSwap { scenes } => {
            let mut out = Vec::with_capacity(chips.len());
            for (i, c) in chips.iter().enumerate() {
                let mut r = chip_rng(i);
                let scene = scenes[r.random_range(0..scenes.len())];
                let mut fresh = dataset::generate_chip(
                    c.label,
                    dataset::TEMPLATES.len(),
                    c.meta.azimuth_deg,
                    scene,
                    &SceneModel::catalogue(scene),
                    c.size(),
                    pseudo,
                    &mut r,
                )?;
                fresh.id = c.id.clone();
                fresh.meta.depression_deg = c.meta.depression_deg;
                fresh.meta.scene_id = scene_name(scene);
                out.push(fresh);
            }
            out
        }
        EocSetting::AzimuthSubsample { keep_fraction } => {
            azimuth_subsample(chips, *keep_fraction, &mut rng::stream(seed, &[rng::STREAM_EOC]))
        }
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub setting: String,
    pub param: String,
    pub seed: u64,
    pub oa: f64,
}

pub const SWEEP_HEADER: &str = "setting,param,seed,oa";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.setting, self.param, self.seed, self.oa)
    }
}

/// OA of `model` on `chips` perturbed by each setting under each seed.
pub fn eoc_sweep(
    model: &HdaNet<f32>,
    chips: &[ImageChip],
    settings: &[EocSetting],
    seeds: &[u64],
    pseudo: &PseudoLabelConfig,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = vec![];
    for s in settings {
        if s.is_train_side() {
            return Err(EvalError::TrainSide(s.to_string()));
        }
        for &seed in seeds {
            let perturbed = apply_eoc(chips, s, pseudo, seed)?;
            rows.push(SweepRow {
                setting: s.name().into(),
                param: s.param(),
                seed,
                oa: pipeline::evaluate(model, &perturbed, workers)?,
            });
        }
    }
    Ok(rows)
}

/// `(setting, param) → (mean, std)` over seeds, in first-seen order.
pub fn summarize(rows: &[SweepRow]) -> Vec<(String, String, f64, f64)> {
    let mut keys: Vec<(String, String)> = vec![];
    for r in rows {
        let k = (r.setting.clone(), r.param.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(s, p)| {
            let v: Vec<f64> = rows.iter().filter(|r| r.setting == s && r.param == p).map(|r| r.oa).collect();
            let (mean, std) = mean_std(&v);
            (s, p, mean, std)
        })
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Scores of the four coalitions of the target and clutter players.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoalitionScores {
    pub none: f64,
    pub target: f64,
    pub clutter: f64,
    pub both: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyEntry {
    pub chip_id: String,
    pub sh_target: f64,
    pub sh_clutter: f64,
    pub scores: CoalitionScores,
}

pub const SHAPLEY_HEADER: &str = "chip_id,sh_target,sh_clutter";

impl ShapleyEntry {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.chip_id, self.sh_target, self.sh_clutter)
    }
}

/// Exact two-player Shapley values: each player's marginal contribution
/// averaged over both join orders.
pub fn shapley_values(f: &CoalitionScores) -> (f64, f64) {
    let t = 0.5 * (f.target - f.none) + 0.5 * (f.both - f.clutter);
    let c = 0.5 * (f.clutter - f.none) + 0.5 * (f.both - f.target);
    (t, c)
}

/// The four coalition images: a player absent from the coalition has its
/// pixels set to the zero baseline. Order: none, target, clutter, both.
pub fn coalition_images(image: &Image, region: &Image) -> [Image; 4] {
    let keep = |target: bool, clutter: bool| {
        let mut out = image.clone();
        for (v, &r) in out.data.iter_mut().zip(&region.data) {
            let is_target = r > 0.5;
            if (is_target && !target) || (!is_target && !clutter) {
                *v = 0.0;
            }
        }
        out
    };
    [keep(false, false), keep(true, false), keep(false, true), keep(true, true)]
}

fn check_region(chip_id: &str, region: &Image) -> Result<()> {
    let on = region.data.iter().filter(|&&v| v > 0.5).count();
    if on == 0 || on == region.len() {
        return Err(EvalError::DegenerateMask(chip_id.to_string()));
    }
    Ok(())
}

/// Shapley attribution for an arbitrary score over coalition images.
pub fn shapley_with(chip_id: &str, image: &Image, region: &Image, score: impl Fn(&[Image; 4]) -> [f64; 4]) -> Result<ShapleyEntry> {
    check_region(chip_id, region)?;
    let s = score(&coalition_images(image, region));
    let scores = CoalitionScores {
        none: s[0],
        target: s[1],
        clutter: s[2],
        both: s[3],
    };
    let (sh_target, sh_clutter) = shapley_values(&scores);
    Ok(ShapleyEntry {
        chip_id: chip_id.to_string(),
        sh_target,
        sh_clutter,
        scores,
    })
}

/// Target region used as the Shapley target player: the true mask, plus
/// the shadow when `shadow_is_target`.
pub fn region_mask(chip: &ImageChip, shadow_is_target: bool) -> Image {
    let mut m = chip.true_mask.clone();
    if shadow_is_target {
        if let Some(s) = &chip.shadow_mask {
            for (v, &sv) in m.data.iter_mut().zip(&s.data) {
                if sv > 0.5 {
                    *v = 1.0;
                }
            }
        }
    }
    m
}

/// Shapley entries for every chip with a usable region; chips whose mask
/// is degenerate are returned separately by id.
pub fn shapley_two_player(
    model: &HdaNet<f32>,
    chips: &[ImageChip],
    shadow_is_target: bool,
    workers: usize,
) -> Result<(Vec<ShapleyEntry>, Vec<String>)> {
    let results = par_map(chips, workers, |c| {
        shapley_with(&c.id, &c.amplitude, &region_mask(c, shadow_is_target), |imgs| {
            let refs: Vec<&Image> = imgs.iter().collect();
            let scores = model.class_scores(&stack_images(&refs)).expect("coalition forward");
            let k = model.config().num_classes;
            std::array::from_fn(|i| scores.data()[i * k + c.label] as f64)
        })
    });
    let mut entries = vec![];
    let mut skipped = vec![];
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(EvalError::DegenerateMask(id)) => skipped.push(id),
            Err(e) => return Err(e),
        }
    }
    Ok((entries, skipped))
}

/// `100 · mean(Sh_c⁺) / (mean(Sh_t⁺) + mean(Sh_c⁺))` with negative values
/// clamped to zero.
pub fn clutter_contribution_ratio(entries: &[ShapleyEntry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = entries.len() as f64;
    let t = entries.iter().map(|e| e.sh_target.max(0.0)).sum::<f64>() / n;
    let c = entries.iter().map(|e| e.sh_clutter.max(0.0)).sum::<f64>() / n;
    if t + c <= 0.0 {
        return Err(EvalError::UndefinedRatio);
    }
    Ok(100.0 * c / (t + c))
}

/// `|∂‖v_y‖/∂x|` per pixel, divided by its maximum (all zero if the
/// gradient vanishes). Batch-norm runs in eval mode, so chips in one call
/// do not interact.
pub fn gradient_saliency(model: &HdaNet<f32>, chips: &[&ImageChip]) -> Result<Vec<Image>> {
    let cfg = model.config();
    let k = cfg.num_classes;
    let mut tape = Tape::new();
    let params: Vec<_> = model.params.iter().map(|p| tape.constant(p.clone())).collect();
    let images: Vec<&Image> = chips.iter().map(|c| &c.amplitude).collect();
    let x = tape.leaf(stack_images(&images), true);
    let mut buffers = model.buffers.clone();
    let out = model.arch.forward(&mut tape, &params, &mut buffers, x, &ForwardOptions::eval())?;
    let norms = tape.norm_last(out.v)?;
    let mut pick = Tensor::zeros(&[chips.len(), k]);
    for (b, c) in chips.iter().enumerate() {
        pick.data_mut()[b * k + c.label] = 1.0;
    }
    let pick = tape.constant(pick);
    let chosen = tape.mul(norms, pick)?;
    let score = tape.sum(chosen)?;
    let grads = tape.backward(score)?;
    let g = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(x)));
    let (h, w) = (cfg.image_size, cfg.image_size);
    Ok(g.data()
        .chunks(h * w)
        .map(|px| {
            let max = px.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let data = px.iter().map(|v| if max > 0.0 { v.abs() / max } else { 0.0 }).collect();
            Image::new(h, w, data).expect("saliency size")
        })
        .collect())
}

/// Share of saliency mass on the target over the share expected from area:
/// `mean(saliency | target) / mean(saliency | clutter)`.
pub fn saliency_ratio(saliency: &Image, region: &Image) -> f64 {
    let (mut ti, mut tn, mut ci, mut cn) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&s, &r) in saliency.data.iter().zip(&region.data) {
        if r > 0.5 {
            ti += s as f64;
            tn += 1.0;
        } else {
            ci += s as f64;
            cn += 1.0;
        }
    }
    (ti / tn.max(1.0)) / (ci / cn.max(1.0)).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStats {
    /// Mean of z_m over all positions.
    pub mean: f64,
    /// Mean of z_m over mask cells whose input block is mostly target.
    pub inside: f64,
    pub outside: f64,
}

/// Mask statistics in eval mode. The true mask is reduced to the mask
/// resolution by majority over each input block.
pub fn mask_stats(model: &HdaNet<f32>, chips: &[ImageChip], workers: usize) -> Result<MaskStats> {
    if chips.is_empty() {
        return Err(EvalError::Empty);
    }
    let cfg = model.config();
    let (size, mid) = (cfg.image_size, cfg.mid_size());
    let f = size / mid;
    let batches: Vec<&[ImageChip]> = chips.chunks(pipeline::EVAL_BATCH).collect();
    let parts = par_map(&batches, workers, |batch| -> Result<[f64; 5]> {
        let mut tape = Tape::new();
        let params: Vec<_> = model.params.iter().map(|p| tape.constant(p.clone())).collect();
        let images: Vec<&Image> = batch.iter().map(|c| &c.amplitude).collect();
        let x = tape.constant(stack_images(&images));
        let mut buffers = model.buffers.clone();
        let out = model.arch.forward(&mut tape, &params, &mut buffers, x, &ForwardOptions::eval())?;
        let z = tape.value(out.z_m).data();
        let mut acc = [0.0; 5];
        for (b, c) in batch.iter().enumerate() {
            for i in 0..mid {
                for j in 0..mid {
                    let v = z[(b * mid + i) * mid + j] as f64;
                    let mut on = 0;
                    for y in i * f..(i + 1) * f {
                        for x in j * f..(j + 1) * f {
                            on += usize::from(c.true_mask.get(y, x) > 0.5);
                        }
                    }
                    acc[0] += v;
                    if 2 * on > f * f {
                        acc[1] += v;
                        acc[2] += 1.0;
                    } else {
                        acc[3] += v;
                        acc[4] += 1.0;
                    }
                }
            }
        }
        Ok(acc)
    });
    let mut acc = [0.0; 5];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p?) {
            *a += v;
        }
    }
    Ok(MaskStats {
        mean: acc[0] / (chips.len() * mid * mid) as f64,
        inside: acc[1] / acc[2].max(1.0),
        outside: acc[3] / acc[4].max(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetSpec};

    fn chips(per_class: usize) -> Vec<ImageChip> {
        let spec = DatasetSpec {
            train_per_class: per_class,
            test_per_class: 0,
            ..DatasetSpec::default()
        };
        generate_dataset(&spec, 1).unwrap().train
    }

    #[test]
    fn zero_db_noise_power_matches_signal() {
        let data = (0..1_000_000).map(|i| (i % 97) as f32 / 96.0).collect();
        let img = Image::new(1000, 1000, data).unwrap();
        let p = img.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / img.len() as f64;
        let noise = snr_noise(&img, 0.0, &mut rng::stream(1, &[]));
        let var = noise.iter().map(|n| n * n).sum::<f64>() / noise.len() as f64;
        assert!((var / p - 1.0).abs() < 0.01, "{var} vs {p}");
    }

    #[test]
    fn infinite_snr_is_identity() {
        let c = chips(1);
        let out = apply_eoc(&c, &EocSetting::GaussianNoise { snr_db: f64::INFINITY }, &Default::default(), 3).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn occlusion_zeroes_one_central_square() {
        let mut c = chips(1);
        for chip in &mut c {
            chip.amplitude = Image::filled(64, 64, 1.0);
        }
        let out = apply_eoc(&c, &EocSetting::Occlusion { size: 15 }, &Default::default(), 4).unwrap();
        for chip in &out {
            let zeros: Vec<(usize, usize)> = (0..64)
                .flat_map(|y| (0..64).map(move |x| (y, x)))
                .filter(|&(y, x)| chip.amplitude.get(y, x) == 0.0)
                .collect();
            assert_eq!(zeros.len(), 225);
            assert!(zeros.iter().all(|&(y, x)| (16..48).contains(&y) && (16..48).contains(&x)));
        }
    }

    #[test]
    fn perturbations_keep_labels() {
        let c = chips(1);
        for s in [
            EocSetting::GaussianNoise { snr_db: -5.0 },
            EocSetting::RandomReplace { fraction: 0.25 },
            EocSetting::Occlusion { size: 10 },
            EocSetting::SceneSwap { scenes: vec![11] },
        ] {
            let out = apply_eoc(&c, &s, &Default::default(), 1).unwrap();
            let labels: Vec<usize> = out.iter().map(|c| c.label).collect();
            assert_eq!(labels, c.iter().map(|c| c.label).collect::<Vec<_>>());
            if !matches!(s, EocSetting::Occlusion { .. } | EocSetting::SceneSwap { .. }) {
                assert!(out.iter().zip(&c).all(|(a, b)| a.true_mask == b.true_mask));
            }
        }
        let swapped = apply_eoc(&c, &EocSetting::SceneSwap { scenes: vec![11] }, &Default::default(), 1).unwrap();
        assert!(swapped.iter().all(|c| c.meta.scene_id == "scene11"));
    }

    #[test]
    fn azimuth_subsample_is_stratified() {
        let c = chips(100);
        let out = apply_eoc(&c, &EocSetting::AzimuthSubsample { keep_fraction: 0.1 }, &Default::default(), 2).unwrap();
        assert_eq!(out.len(), 100);
        for k in 0..10 {
            let mut deciles: Vec<usize> = out
                .iter()
                .filter(|c| c.label == k)
                .map(|c| (c.meta.azimuth_deg / 36.0) as usize)
                .collect();
            deciles.sort();
            assert_eq!(deciles, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn setting_ranges_are_enforced() {
        assert!(EocSetting::GaussianNoise { snr_db: 11.0 }.validate().is_err());
        assert!(EocSetting::RandomReplace { fraction: 0.3 }.validate().is_err());
        assert!(EocSetting::Occlusion { size: 7 }.validate().is_err());
        assert!(EocSetting::AzimuthSubsample { keep_fraction: 0.95 }.validate().is_err());
        assert_eq!(EocSetting::parse("gaussian", "-5").unwrap(), EocSetting::GaussianNoise { snr_db: -5.0 });
        assert!(EocSetting::parse("fog", "1").is_err());
    }

    #[test]
    fn additive_score_enumeration() {
        let img = Image::filled(2, 2, 1.0);
        let region = Image::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        // f(S) = 2·[t ∈ S] + [c ∈ S], read off which pixels survived.
        let e = shapley_with("a", &img, &region, |imgs| {
            std::array::from_fn(|i| 2.0 * imgs[i].data[0] as f64 + imgs[i].data[3] as f64)
        })
        .unwrap();
        assert_eq!((e.sh_target, e.sh_clutter), (2.0, 1.0));
        assert_eq!(e.sh_target + e.sh_clutter, e.scores.both - e.scores.none);
    }

    #[test]
    fn symmetric_players_share_equally() {
        let f = CoalitionScores {
            none: 0.1,
            target: 0.4,
            clutter: 0.4,
            both: 0.9,
        };
        let (t, c) = shapley_values(&f);
        assert_eq!(t, c);
    }

    #[test]
    fn degenerate_region_is_flagged() {
        let img = Image::filled(2, 2, 1.0);
        for v in [0.0, 1.0] {
            let r = shapley_with("x", &img, &Image::filled(2, 2, v), |_| [0.0; 4]);
            assert!(matches!(r, Err(EvalError::DegenerateMask(id)) if id == "x"));
        }
    }

    fn entry(t: f64, c: f64) -> ShapleyEntry {
        ShapleyEntry {
            chip_id: String::new(),
            sh_target: t,
            sh_clutter: c,
            scores: CoalitionScores {
                none: 0.0,
                target: 0.0,
                clutter: 0.0,
                both: 0.0,
            },
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(clutter_contribution_ratio(&[entry(1.0, 0.0)]).unwrap(), 0.0);
        assert_eq!(clutter_contribution_ratio(&[entry(0.5, 0.5), entry(2.0, 2.0)]).unwrap(), 50.0);
        let r = clutter_contribution_ratio(&[entry(3.0, 1.0), entry(1.0, 1.0)]).unwrap();
        assert!((r - 100.0 / 3.0).abs() < 1e-12);
        assert!(matches!(clutter_contribution_ratio(&[entry(-1.0, 0.0)]), Err(EvalError::UndefinedRatio)));
        assert!(matches!(clutter_contribution_ratio(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn sweep_rows_and_summary() {
        let rows = vec![
            SweepRow {
                setting: "gaussian".into(),
                param: "10".into(),
                seed: 1,
                oa: 0.5,
            },
            SweepRow {
                setting: "gaussian".into(),
                param: "10".into(),
                seed: 2,
                oa: 0.7,
            },
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert!((s[0].2 - 0.6).abs() < 1e-12 && (s[0].3 - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(rows[0].csv_row(), "gaussian,10,1,0.5");
    }
}
