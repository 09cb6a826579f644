//! Directory layout: `<root>/<split>/<class_name>/<chip_id>.png`, a
//! `<chip_id>.json` sidecar and an optional `<chip_id>_mask.png`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cfar::{cfar_mask, make_pseudo_label, CfarConfig, PseudoLabelConfig};
use super::{ChipMeta, Dataset, DatasetError, ImageChip};
use crate::image::Image;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    label: String,
    azimuth_deg: f64,
    depression_deg: f64,
    scene_id: String,
}

fn file_err(path: &Path, msg: impl ToString) -> DatasetError {
    DatasetError::File {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

/// Chips of one split together with the class names that index their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipSet {
    pub class_names: Vec<String>,
    pub chips: Vec<ImageChip>,
}

pub fn save_chips(dir: &Path, class_names: &[String], chips: &[ImageChip]) -> Result<Vec<PathBuf>, DatasetError> {
    let mut written = vec![];
    for name in class_names {
        let d = dir.join(name);
        fs::create_dir_all(&d).map_err(|e| file_err(&d, e))?;
    }
    for c in chips {
        let name = class_names.get(c.label).ok_or(DatasetError::Class(c.label, class_names.len()))?;
        let d = dir.join(name);
        let png = d.join(format!("{}.png", c.id));
        c.amplitude.write_png(&png)?;
        let mask = d.join(format!("{}_mask.png", c.id));
        c.true_mask.write_png(&mask)?;
        let json = d.join(format!("{}.json", c.id));
        let side = Sidecar {
            label: name.clone(),
            azimuth_deg: c.meta.azimuth_deg,
            depression_deg: c.meta.depression_deg,
            scene_id: c.meta.scene_id.clone(),
        };
        let text = serde_json::to_string_pretty(&side).map_err(|e| file_err(&json, e))?;
        fs::write(&json, text + "\n").map_err(|e| file_err(&json, e))?;
        written.extend([png, mask, json]);
    }
    Ok(written)
}

pub fn save_dataset(root: &Path, d: &Dataset) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = save_chips(&root.join("train"), &d.class_names, &d.train)?;
    out.extend(save_chips(&root.join("test"), &d.class_names, &d.test)?);
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| file_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| file_err(dir, e)))
        .collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

/// Loads one split directory. Class subdirectories are taken in sorted
/// order unless `class_names` pins the label order. Chips without a mask
/// get their target mask from CFAR.
pub fn load_chips(
    dir: &Path,
    class_names: Option<&[String]>,
    cfar: &CfarConfig,
    pseudo: &PseudoLabelConfig,
) -> Result<ChipSet, DatasetError> {
    let found: Vec<String> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let class_names: Vec<String> = match class_names {
        Some(names) => {
            if let Some(extra) = found.iter().find(|f| !names.contains(f)) {
                return Err(file_err(&dir.join(extra), "class directory not in the class list"));
            }
            names.to_vec()
        }
        None => found,
    };
    let mut chips = vec![];
    let mut size: Option<(usize, usize)> = None;
    for (label, name) in class_names.iter().enumerate() {
        let cdir = dir.join(name);
        if !cdir.is_dir() {
            continue;
        }
        for path in sorted_entries(&cdir)? {
            let fname = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let Some(id) = fname.strip_suffix(".png") else { continue };
            if id.ends_with("_mask") {
                continue;
            }
            let amplitude = Image::read_png(&path)?;
            let dims = (amplitude.height, amplitude.width);
            match size {
                None => size = Some(dims),
                Some(s) if s != dims => {
                    return Err(file_err(&path, format!("size {dims:?} differs from {s:?}")));
                }
                _ => {}
            }
            let json = cdir.join(format!("{id}.json"));
            let text = fs::read_to_string(&json).map_err(|e| file_err(&json, e))?;
            let side: Sidecar = serde_json::from_str(&text).map_err(|e| file_err(&json, e))?;
            if &side.label != name {
                return Err(file_err(&json, format!("label {:?} but directory {name:?}", side.label)));
            }
            let mask_path = cdir.join(format!("{id}_mask.png"));
            let true_mask = if mask_path.exists() {
                let mut m = Image::read_png(&mask_path)?;
                if (m.height, m.width) != dims {
                    return Err(file_err(&mask_path, "mask size differs from image"));
                }
                for v in &mut m.data {
                    *v = if *v > 0.5 { 1.0 } else { 0.0 };
                }
                m
            } else {
                cfar_mask(&amplitude, cfar).map_err(|e| file_err(&path, e))?
            };
            let pseudo_mask = make_pseudo_label(&true_mask, pseudo);
            chips.push(ImageChip {
                id: id.to_string(),
                amplitude,
                label,
                true_mask,
                pseudo_mask,
                shadow_mask: None,
                meta: ChipMeta {
                    azimuth_deg: side.azimuth_deg,
                    depression_deg: side.depression_deg,
                    scene_id: side.scene_id,
                },
            });
        }
    }
    Ok(ChipSet { class_names, chips })
}

/// Loads `<root>/train` and `<root>/test` with a shared class list.
pub fn load_dataset(root: &Path, cfar: &CfarConfig, pseudo: &PseudoLabelConfig) -> Result<Dataset, DatasetError> {
    let train = load_chips(&root.join("train"), None, cfar, pseudo)?;
    let test = load_chips(&root.join("test"), Some(&train.class_names), cfar, pseudo)?;
    Ok(Dataset {
        class_names: train.class_names,
        train: train.chips,
        test: test.chips,
    })
}
