//! Binary PPM (P6) export of label and prediction maps with a fixed palette
//! and a JSON legend.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{LabelMap, PredictionMap};
use crate::tensor::Tensor;

use super::container::write_atomic;

/// Class colors, indexed by class id modulo the palette length.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Color for unlabeled pixels.
pub const UNLABELED_COLOR: [u8; 3] = [0, 0, 0];

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub index: usize,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Legend {
    pub classes: Vec<LegendEntry>,
    pub unlabeled: [u8; 3],
}

impl Legend {
    pub fn new(names: &[String]) -> Self {
        Legend {
            classes: names
                .iter()
                .enumerate()
                .map(|(index, name)| LegendEntry {
                    index,
                    name: name.clone(),
                    color: class_color(index),
                })
                .collect(),
            unlabeled: UNLABELED_COLOR,
        }
    }
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Parses a binary P6 file with maxval 255 and no comments.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("PPM header is incomplete"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::invalid("only binary P6 PPM with maxval 255 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid(format!("bad PPM extent `{s}`")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != w * h * 3 {
        return Err(Error::invalid(format!("PPM {w}×{h} needs {} bytes, got {}", w * h * 3, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

pub fn label_map_rgb(map: &LabelMap) -> Vec<u8> {
    map.raw()
        .iter()
        .flat_map(|&l| {
            if l == LabelMap::UNLABELED {
                UNLABELED_COLOR
            } else {
                class_color(l as usize)
            }
        })
        .collect()
}

pub fn prediction_rgb(map: &PredictionMap) -> Vec<u8> {
    map.argmax().iter().flat_map(|&c| class_color(c)).collect()
}

/// RGB image from a 3×H×W tensor, clamping values to [0, 1].
pub fn image_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("image has {c} channels, PPM needs 3")));
    }
    let plane = h * w;
    let d = image.data();
    Ok((0..plane)
        .flat_map(|px| (0..3).map(move |ch| (d[ch * plane + px].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect())
}

/// Path of the legend written next to a PPM: `x.ppm` → `x.legend.json`.
pub fn legend_path(ppm: &Path) -> PathBuf {
    ppm.with_extension("legend.json")
}

pub fn write_prediction_ppm(map: &PredictionMap, names: &[String], path: &Path) -> Result<()> {
    if names.len() != map.num_classes() {
        return Err(Error::invalid(format!(
            "{} class names for {} classes",
            names.len(),
            map.num_classes()
        )));
    }
    write_atomic(path, &encode_ppm(map.width(), map.height(), &prediction_rgb(map)))?;
    let legend = serde_json::to_vec_pretty(&Legend::new(names))?;
    write_atomic(&legend_path(path), &legend)
}

pub fn write_label_ppm(map: &LabelMap, names: &[String], path: &Path) -> Result<()> {
    write_atomic(path, &encode_ppm(map.width(), map.height(), &label_map_rgb(map)))?;
    let legend = serde_json::to_vec_pretty(&Legend::new(names))?;
    write_atomic(&legend_path(path), &legend)
}

pub fn write_image_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let (_, h, w) = image.dims3()?;
    write_atomic(path, &encode_ppm(w, h, &image_rgb(image)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 7).collect();
        let (w, h, back) = decode_ppm(&encode_ppm(3, 2, &rgb)).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, rgb);
    }

    #[test]
    fn colors_follow_palette() {
        let m = LabelMap::new(1, 3, vec![0, 17, LabelMap::UNLABELED]).unwrap();
        let rgb = label_map_rgb(&m);
        assert_eq!(&rgb[0..3], &PALETTE[0]);
        assert_eq!(&rgb[3..6], &PALETTE[1]);
        assert_eq!(&rgb[6..9], &UNLABELED_COLOR);
    }

    #[test]
    fn legend_path_extension() {
        assert_eq!(legend_path(Path::new("out/p.ppm")), PathBuf::from("out/p.legend.json"));
    }
}
