//! Directory layout for generated scenes: a `manifest.json` plus one tensor
//! container and one label file per scene.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::{write_atomic, TensorContainer};
use crate::io::labels::{read_label_map, write_label_map};
use crate::io::ppm::{write_image_ppm, write_label_ppm};
use crate::synth::{Scene, Splits, WorldSpec};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "ctxmat-dataset-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub split: Split,
    pub place: usize,
    /// Container with `image`, `objects`, `noisy_place` and `noisy_objects`.
    pub scene: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub image_size: usize,
    pub world: WorldSpec,
    pub scenes: Vec<SceneRecord>,
}

fn scene_container(scene: &Scene) -> Result<TensorContainer> {
    let (h, w) = (scene.height(), scene.width());
    let mut c = TensorContainer::new();
    c.push("image", scene.image.clone());
    c.push(
        "objects",
        Tensor::new(vec![h, w], scene.objects.iter().map(|&o| o as f64).collect())?,
    );
    c.push("noisy_place", Tensor::new(vec![scene.noisy_place.len()], scene.noisy_place.clone())?);
    c.push("noisy_objects", scene.noisy_objects.clone());
    Ok(c)
}

fn scene_from_container(c: &TensorContainer, record: &SceneRecord, labels: crate::maps::LabelMap) -> Result<Scene> {
    let get = |name: &str| {
        c.get(name)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("{}: missing `{name}` entry", record.scene)))
    };
    let objects = get("objects")?
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u16::MAX as f64 {
                Ok(v as u16)
            } else {
                Err(Error::invalid(format!("{}: object id {v} is not an index", record.scene)))
            }
        })
        .collect::<Result<Vec<u16>>>()?;
    let image = get("image")?;
    let (_, h, w) = image.dims3()?;
    if (labels.height(), labels.width()) != (h, w) || objects.len() != h * w {
        return Err(Error::shape(format!("{}: scene parts disagree in extent", record.scene)));
    }
    Ok(Scene {
        index: record.index,
        image,
        labels,
        objects,
        place: record.place,
        noisy_place: get("noisy_place")?.into_data(),
        noisy_objects: get("noisy_objects")?,
    })
}

/// Writes every scene of the splits to `dir` along with PPM previews of the
/// image and label map.
pub fn write_dataset(dir: &Path, spec: &WorldSpec, splits: &Splits<Scene>, image_size: usize, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tagged: Vec<(Split, &Scene)> = [
        (Split::Train, &splits.train),
        (Split::Val, &splits.val),
        (Split::Test, &splits.test),
    ]
    .into_iter()
    .flat_map(|(tag, scenes)| scenes.iter().map(move |s| (tag, s)))
    .collect();
    let mut records: Vec<SceneRecord> = tagged
        .par_iter()
        .map(|&(split, scene)| {
            let stem = format!("scene_{:05}", scene.index);
            let record = SceneRecord {
                index: scene.index,
                split,
                place: scene.place,
                scene: format!("{stem}.ctxf"),
                labels: format!("{stem}.labels"),
            };
            scene_container(scene)?.write(&dir.join(&record.scene))?;
            write_label_map(&scene.labels, &dir.join(&record.labels))?;
            write_image_ppm(&scene.image, &dir.join(format!("{stem}.ppm")))?;
            write_label_ppm(&scene.labels, &spec.materials, &dir.join(format!("{stem}.labels.ppm")))?;
            Ok(record)
        })
        .collect::<Result<_>>()?;
    records.sort_by_key(|r| r.index);
    let manifest = Manifest {
        format: FORMAT.into(),
        seed,
        image_size,
        world: spec.clone(),
        scenes: records,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::invalid(format!("{}: unknown dataset format `{}`", path.display(), manifest.format)));
    }
    manifest.world.validate()?;
    Ok(manifest)
}

/// Loads a dataset written by [`write_dataset`], keeping scenes in index
/// order within each split.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Splits<Scene>)> {
    let manifest = read_manifest(dir)?;
    let scenes: Vec<(Split, Scene)> = manifest
        .scenes
        .par_iter()
        .map(|r| {
            let c = TensorContainer::read(&dir.join(&r.scene))?;
            let labels = read_label_map(&dir.join(&r.labels))?;
            Ok((r.split, scene_from_container(&c, r, labels)?))
        })
        .collect::<Result<_>>()?;
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (split, scene) in scenes {
        match split {
            Split::Train => splits.train.push(scene),
            Split::Val => splits.val.push(scene),
            Split::Test => splits.test.push(scene),
        }
    }
    Ok((manifest, splits))
}
