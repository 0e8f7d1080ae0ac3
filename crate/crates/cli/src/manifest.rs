//! JSON-lines scene manifests.
//!
//! One object per line:
//! `{"image": "images/scene_0000.png", "boxes": [{"cx":..,"cy":..,"w":..,"h":..,"class":0}], "split": "train"}`.
//! Image paths are relative to the manifest's directory. `split` is
//! optional; without it every fifth scene is held out for validation.
//! Detector adapters answer with the same schema plus a per-box `score`.

use std::path::{Path, PathBuf};

use advart::detector::{Scene, Split};
use advart::imaging::{load_image, save_image};
use advart::patchops::BoundingBox;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub image: String,
    pub boxes: Vec<BoxRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl BoxRecord {
    pub fn from_box(b: &BoundingBox, score: Option<f64>) -> Self {
        Self {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            class: b.class_id,
            score,
        }
    }

    pub fn to_box(&self) -> BoundingBox {
        BoundingBox::new(self.cx, self.cy, self.w, self.h, self.class)
    }
}

/// Parses manifest text; `path` is only used in messages.
pub fn parse_records(text: &str, path: &Path) -> CliResult<Vec<SceneRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(line).map_err(|e| CliError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        for b in &rec.boxes {
            b.to_box().validate().map_err(|e| CliError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn records_to_text(records: &[SceneRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads every scene of a manifest with its image.
pub fn load_scenes(manifest: &Path) -> CliResult<Vec<Scene>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| CliError::io(manifest, e))?;
    let records = parse_records(&text, manifest)?;
    if records.is_empty() {
        return Err(CliError::Manifest {
            path: manifest.to_path_buf(),
            line: 0,
            message: "manifest lists no scenes".into(),
        });
    }
    let dir = base_dir(manifest);
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let split = match &r.split {
                None => Split::for_index(i),
                Some(s) => Split::parse(s).ok_or_else(|| CliError::Manifest {
                    path: manifest.to_path_buf(),
                    line: i + 1,
                    message: format!("unknown split {s:?} (expected train or val)"),
                })?,
            };
            Ok(Scene {
                image: load_image(dir.join(&r.image))?,
                boxes: r.boxes.iter().map(BoxRecord::to_box).collect(),
                split,
            })
        })
        .collect()
}

/// Writes scene PNGs under `dir/images` and `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> CliResult<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| CliError::io(&images, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("images/scene_{i:05}.png");
        save_image(&s.image, dir.join(&name))?;
        records.push(SceneRecord {
            image: name,
            boxes: s.boxes.iter().map(|b| BoxRecord::from_box(b, None)).collect(),
            split: Some(s.split.as_str().to_string()),
        });
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, records_to_text(&records)).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
