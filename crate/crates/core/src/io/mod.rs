//! On-disk formats and patch extraction.

pub mod container;
pub mod dataset;
pub mod labels;
pub mod patches;
pub mod ppm;

use std::path::Path;

use crate::context::{ContextSource, ContextValues};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use container::TensorContainer;
pub use labels::{read_label_map, write_label_map};
pub use patches::{extract_patches, Patch, PatchRule};

/// Stores a context source as a container with a single `context` entry
/// (1-D for scene-wide, C×H×W for per-pixel) and its category names.
pub fn write_context(source: &ContextSource, path: &Path) -> Result<()> {
    let tensor = match source.values() {
        ContextValues::SceneWide(p) => Tensor::new(vec![p.len()], p.clone())?,
        ContextValues::PerPixel(t) => t.clone(),
    };
    let mut c = TensorContainer::new();
    c.push("context", tensor);
    c.categories = Some(source.categories().to_vec());
    c.write(path)
}

pub fn read_context(path: &Path) -> Result<ContextSource> {
    let c = TensorContainer::read(path)?;
    let t = c
        .get("context")
        .ok_or_else(|| Error::invalid(format!("{}: no `context` entry", path.display())))?;
    let categories = c
        .categories
        .clone()
        .ok_or_else(|| Error::invalid(format!("{}: no category names", path.display())))?;
    match t.rank() {
        1 => ContextSource::scene_wide(categories, t.data().to_vec()),
        3 => ContextSource::per_pixel(categories, t.clone()),
        r => Err(Error::shape(format!("context tensor has rank {r}, expected 1 or 3"))),
    }
}
