//! On-disk dataset layout: `<id>.json` annotations next to `<id>.png` (or
//! `.pgm`) images, and a separate directory of `<id>.json` detection sets.

use std::path::{Path, PathBuf};

use crate::density::DotAnnotation;
use crate::error::{DenetError, Result};
use crate::fusion::DetectionSet;
use crate::imageio;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Scene {
    pub annotation: DotAnnotation,
    pub image: Tensor,
}

/// Run manifests share output directories with scenes.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Sorted stems of the `.json` files in `dir`, manifest excluded.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| DenetError::io(dir, e))? {
        let path = entry.map_err(|e| DenetError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") && !path.ends_with(MANIFEST_FILE) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn image_path(dir: &Path, id: &str) -> Result<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| DenetError::Input(format!("no {id}.png or {id}.pgm in {}", dir.display())))
}

pub fn load_scene(dir: &Path, id: &str) -> Result<Scene> {
    let ann_path = dir.join(format!("{id}.json"));
    let annotation = DotAnnotation::load(&ann_path)?;
    if annotation.image_id != id {
        return Err(DenetError::format(&ann_path, format!("image_id `{}` does not match the file name", annotation.image_id)));
    }
    let img_path = image_path(dir, id)?;
    let image = imageio::load_rgb(&img_path)?;
    let (_, h, w) = image.chw()?;
    if (w, h) != (annotation.width, annotation.height) {
        return Err(DenetError::Input(format!(
            "{}: image is {w}x{h}, annotation says {}x{}",
            img_path.display(),
            annotation.width,
            annotation.height
        )));
    }
    Ok(Scene { annotation, image })
}

pub fn load_dir(dir: &Path) -> Result<Vec<Scene>> {
    let ids = list_ids(dir)?;
    if ids.is_empty() {
        return Err(DenetError::Input(format!("no annotations in {}", dir.display())));
    }
    ids.iter().map(|id| load_scene(dir, id)).collect()
}

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    let id = &scene.annotation.image_id;
    scene.annotation.save(&dir.join(format!("{id}.json")))?;
    imageio::save_rgb(&scene.image, &dir.join(format!("{id}.png")))
}

/// The detection set of `id`, if `dir/<id>.json` exists.
pub fn load_detections(dir: &Path, id: &str) -> Result<Option<DetectionSet>> {
    let path = dir.join(format!("{id}.json"));
    if !path.exists() {
        return Ok(None);
    }
    let ds = DetectionSet::load(&path)?;
    if ds.image_id != id {
        return Err(DenetError::format(&path, format!("image_id `{}` does not match the file name", ds.image_id)));
    }
    Ok(Some(ds))
}
