//! Synthetic chip generation, on-disk loading, CFAR segmentation and
//! pseudo-labels.

pub mod cfar;
pub mod io;
pub mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cfar::{cfar_mask, make_pseudo_label, CfarConfig, PseudoLabelConfig};
pub use io::{load_chips, load_dataset, save_chips, save_dataset, ChipSet};
pub use synth::{SceneModel, TEMPLATES};

use crate::image::Image;
use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("class {0} out of range for {1} classes")]
    Class(usize, usize),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipMeta {
    pub azimuth_deg: f64,
    pub depression_deg: f64,
    pub scene_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageChip {
    pub id: String,
    pub amplitude: Image,
    pub label: usize,
    pub true_mask: Image,
    pub pseudo_mask: Image,
    /// Generator shadow region; unknown for loaded chips.
    pub shadow_mask: Option<Image>,
    pub meta: ChipMeta,
}

impl ImageChip {
    pub fn size(&self) -> usize {
        self.amplitude.height
    }
}

pub fn scene_name(id: u32) -> String {
    format!("scene{id:02}")
}

pub fn class_name(k: usize) -> String {
    format!("class{k:02}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Azimuths are stratified over `[0, azimuth_span_deg)`.
    pub azimuth_span_deg: f64,
    pub train_scenes: Vec<u32>,
    pub test_scenes: Vec<u32>,
    /// Probability that a training chip of class k uses scene
    /// `train_scenes[k % len]` instead of a uniformly drawn training scene.
    /// Nonzero values plant a class/clutter correlation.
    pub scene_class_bias: f64,
    pub train_depression_deg: f64,
    pub test_depression_deg: f64,
    /// Overrides the catalogue shadow attenuation when set.
    pub shadow_attenuation: Option<f64>,
    pub pseudo_label: PseudoLabelConfig,
    /// Set from the run seed, never from the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 100,
            test_per_class: 50,
            image_size: 64,
            azimuth_span_deg: 360.0,
            train_scenes: vec![0],
            test_scenes: vec![0],
            scene_class_bias: 0.0,
            train_depression_deg: 17.0,
            test_depression_deg: 15.0,
            shadow_attenuation: None,
            pseudo_label: PseudoLabelConfig::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Train scenes tied to classes, test scenes held out.
    pub fn eoc_scene() -> Self {
        Self {
            train_scenes: (0..10).collect(),
            test_scenes: vec![10, 11, 12],
            scene_class_bias: 0.8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Spec(m.into()));
        if self.num_classes < 2 || self.num_classes > TEMPLATES.len() {
            return bad(&format!("num_classes must be in 2..={}", TEMPLATES.len()));
        }
        if self.train_per_class == 0 && self.test_per_class == 0 {
            return bad("zero chips requested");
        }
        if self.image_size < 32 {
            return bad("image_size must be at least 32");
        }
        if !(self.azimuth_span_deg > 0.0 && self.azimuth_span_deg <= 360.0) {
            return bad("azimuth_span_deg must be in (0, 360]");
        }
        if self.train_scenes.is_empty() || self.test_scenes.is_empty() {
            return bad("each split needs at least one scene");
        }
        if !(0.0..=1.0).contains(&self.scene_class_bias) {
            return bad("scene_class_bias must be in [0, 1]");
        }
        if let Some(a) = self.shadow_attenuation {
            if !(a >= 0.0) {
                return bad("shadow_attenuation must be non-negative");
            }
        }
        Ok(())
    }

    pub fn scene(&self, id: u32) -> SceneModel {
        let mut s = SceneModel::catalogue(id);
        if let Some(a) = self.shadow_attenuation {
            s.shadow_attenuation = a;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Test = 1,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<ImageChip>,
    pub test: Vec<ImageChip>,
}

/// Renders one chip. The returned chip has an empty id and a zero
/// depression angle; callers fill those in.
pub fn generate_chip<R: Rng + ?Sized>(
    class: usize,
    num_classes: usize,
    azimuth_deg: f64,
    scene_id: u32,
    scene: &SceneModel,
    size: usize,
    pseudo: &PseudoLabelConfig,
    rng: &mut R,
) -> Result<ImageChip, DatasetError> {
    if class >= num_classes || class >= TEMPLATES.len() {
        return Err(DatasetError::Class(class, num_classes));
    }
    scene.validate().map_err(DatasetError::Spec)?;
    let r = synth::render(class, azimuth_deg, size, scene, rng);
    let pseudo_mask = make_pseudo_label(&r.footprint, pseudo);
    Ok(ImageChip {
        id: String::new(),
        amplitude: r.amplitude,
        label: class,
        true_mask: r.footprint,
        pseudo_mask,
        shadow_mask: Some(r.shadow),
        meta: ChipMeta {
            azimuth_deg,
            depression_deg: 0.0,
            scene_id: scene_name(scene_id),
        },
    })
}

fn split_chip(spec: &DatasetSpec, split: Split, class: usize, idx: usize, n: usize) -> Result<ImageChip, DatasetError> {
    let mut rng = rng::stream(spec.seed, &[rng::STREAM_DATA, split as u64, class as u64, idx as u64]);
    let bin = spec.azimuth_span_deg / n as f64;
    let azimuth = (idx as f64 + rng.random::<f64>()) * bin;
    let scenes = match split {
        Split::Train => &spec.train_scenes,
        Split::Test => &spec.test_scenes,
    };
    let tied = split == Split::Train && rng.random::<f64>() < spec.scene_class_bias;
    let scene_id = if tied {
        scenes[class % scenes.len()]
    } else {
        scenes[rng.random_range(0..scenes.len())]
    };
    let mut chip = generate_chip(
        class,
        spec.num_classes,
        azimuth,
        scene_id,
        &spec.scene(scene_id),
        spec.image_size,
        &spec.pseudo_label,
        &mut rng,
    )?;
    chip.id = format!("{}_{:02}_{:04}", split.name(), class, idx);
    chip.meta.depression_deg = match split {
        Split::Train => spec.train_depression_deg,
        Split::Test => spec.test_depression_deg,
    };
    Ok(chip)
}

fn generate_split(spec: &DatasetSpec, split: Split, workers: usize) -> Result<Vec<ImageChip>, DatasetError> {
    let per = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
    };
    let jobs: Vec<(usize, usize)> = (0..spec.num_classes).flat_map(|k| (0..per).map(move |i| (k, i))).collect();
    let workers = workers.max(1).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers).max(1);
    // Every chip owns its seed, so the chunking cannot change the output.
    let parts: Vec<Result<Vec<ImageChip>, DatasetError>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&(k, i)| split_chip(spec, split, k, i, per)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn generate_dataset(spec: &DatasetSpec, workers: usize) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    Ok(Dataset {
        class_names: (0..spec.num_classes).map(class_name).collect(),
        train: generate_split(spec, Split::Train, workers)?,
        test: generate_split(spec, Split::Test, workers)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn counts_are_balanced() {
        let spec = DatasetSpec {
            train_per_class: 5,
            test_per_class: 3,
            image_size: 32,
            ..DatasetSpec::default()
        };
        let d = generate_dataset(&spec, 1).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (50, 30));
        for k in 0..10 {
            assert_eq!(d.train.iter().filter(|c| c.label == k).count(), 5);
            assert_eq!(d.test.iter().filter(|c| c.label == k).count(), 3);
        }
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let a = generate_dataset(&small(), 1).unwrap();
        let b = generate_dataset(&small(), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scene_assignment_per_split() {
        let ids = |v: &[ImageChip]| v.iter().map(|c| c.meta.scene_id.clone()).collect::<BTreeSet<_>>();
        let soc = generate_dataset(&small(), 1).unwrap();
        assert_eq!(ids(&soc.train), ids(&soc.test));
        let eoc = generate_dataset(
            &DatasetSpec {
                num_classes: 3,
                train_per_class: 6,
                test_per_class: 6,
                ..DatasetSpec::eoc_scene()
            },
            1,
        )
        .unwrap();
        assert!(ids(&eoc.train).is_disjoint(&ids(&eoc.test)));
    }

    #[test]
    fn azimuths_are_stratified() {
        let spec = DatasetSpec {
            num_classes: 2,
            train_per_class: 8,
            test_per_class: 1,
            ..DatasetSpec::default()
        };
        let d = generate_dataset(&spec, 1).unwrap();
        for k in 0..2 {
            let mut bins: Vec<usize> = d
                .train
                .iter()
                .filter(|c| c.label == k)
                .map(|c| (c.meta.azimuth_deg / 45.0) as usize)
                .collect();
            bins.sort();
            assert_eq!(bins, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_chips_and_bad_class_are_rejected() {
        let spec = DatasetSpec {
            train_per_class: 0,
            test_per_class: 0,
            ..DatasetSpec::default()
        };
        assert!(matches!(generate_dataset(&spec, 1), Err(DatasetError::Spec(_))));
        let mut rng = rng::stream(0, &[]);
        let r = generate_chip(10, 10, 0.0, 0, &SceneModel::catalogue(0), 64, &PseudoLabelConfig::default(), &mut rng);
        assert!(matches!(r, Err(DatasetError::Class(10, 10))));
    }

    #[test]
    fn chip_invariants() {
        for c in generate_dataset(&small(), 1).unwrap().train {
            assert!(c.amplitude.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(c.true_mask.data.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(c.pseudo_mask.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(c.true_mask.len(), c.amplitude.len());
        }
    }

    fn hundred(shadow_attenuation: Option<f64>) -> Vec<ImageChip> {
        let spec = DatasetSpec {
            train_per_class: 10,
            test_per_class: 0,
            shadow_attenuation,
            ..DatasetSpec::default()
        };
        generate_dataset(&spec, 1).unwrap().train
    }

    fn region_mean(img: &Image, mask: impl Fn(usize) -> bool) -> f64 {
        let v: Vec<f64> = (0..img.len()).filter(|&i| mask(i)).map(|i| img.data[i] as f64).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    #[test]
    fn target_is_brighter_than_clutter() {
        let chips = hundred(None);
        let (mut inside, mut outside) = (0.0, 0.0);
        for c in &chips {
            inside += region_mean(&c.amplitude, |i| c.true_mask.data[i] > 0.5);
            outside += region_mean(&c.amplitude, |i| c.true_mask.data[i] < 0.5);
        }
        assert!(inside > 2.0 * outside, "{inside} vs {outside}");
    }

    #[test]
    fn unattenuated_shadow_matches_background() {
        let chips = hundred(Some(1.0));
        let (mut shadow, mut background) = (0.0, 0.0);
        for c in &chips {
            let s = c.shadow_mask.as_ref().unwrap();
            shadow += region_mean(&c.amplitude, |i| s.data[i] > 0.5);
            background += region_mean(&c.amplitude, |i| s.data[i] < 0.5 && c.true_mask.data[i] < 0.5);
        }
        let ratio = shadow / background;
        assert!((0.95..=1.05).contains(&ratio), "{ratio}");
    }

    #[test]
    fn cfar_recovers_the_target() {
        let chips = hundred(None);
        let mut total = 0.0;
        for c in &chips {
            let m = cfar_mask(&c.amplitude, &CfarConfig::default()).unwrap();
            let both = m.data.iter().zip(&c.true_mask.data);
            let inter = both.clone().filter(|(a, b)| **a > 0.5 && **b > 0.5).count();
            let union = both.filter(|(a, b)| **a > 0.5 || **b > 0.5).count();
            total += inter as f64 / union as f64;
        }
        let iou = total / chips.len() as f64;
        assert!(iou >= 0.4, "{iou}");
    }

    #[test]
    fn chip_generation_is_deterministic() {
        let scene = SceneModel::catalogue(3);
        let cfg = PseudoLabelConfig::default();
        let a = generate_chip(4, 10, 123.0, 3, &scene, 64, &cfg, &mut rng::stream(9, &[1])).unwrap();
        let b = generate_chip(4, 10, 123.0, 3, &scene, 64, &cfg, &mut rng::stream(9, &[1])).unwrap();
        assert_eq!(a, b);
    }
}
