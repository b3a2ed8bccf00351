//! Local training patches cut from labeled scenes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// C×size×size.
    pub image: Tensor,
    /// Optional C'×size×size context crop.
    pub context: Option<Tensor>,
    pub labels: LabelMap,
    pub material: usize,
    pub scene: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchRule {
    pub size: usize,
    pub stride: usize,
    /// Require every pixel in the window to be labeled with the same
    /// material, instead of only the labeled ones.
    pub strict: bool,
    /// Also emit windows whose labeled pixels disagree with the center;
    /// those pixels are masked out of the patch labels.
    #[serde(default)]
    pub mixed: bool,
}

impl Default for PatchRule {
    fn default() -> Self {
        PatchRule {
            size: 48,
            stride: 8,
            strict: false,
            mixed: false,
        }
    }
}

/// Copies the `size`×`size` window at `(y, x)` of a C×H×W tensor.
pub fn crop_window(t: &Tensor, y: usize, x: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if y + size > h || x + size > w {
        return Err(Error::shape("window exceeds tensor bounds"));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for row in y..y + size {
            let start = (ch * h + row) * w + x;
            out.extend_from_slice(&d[start..start + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

/// Material of the window at `(y, x)` if it qualifies as a patch.
pub fn window_material(labels: &LabelMap, y: usize, x: usize, size: usize, strict: bool) -> Option<usize> {
    let material = labels.get(y + size / 2, x + size / 2)?;
    window_agrees(labels, y, x, size, strict, material).then_some(material)
}

fn window_agrees(labels: &LabelMap, y: usize, x: usize, size: usize, strict: bool, material: usize) -> bool {
    for row in y..y + size {
        for col in x..x + size {
            match labels.get(row, col) {
                Some(m) if m != material => return false,
                None if strict => return false,
                _ => {}
            }
        }
    }
    true
}

/// Scans windows in row-major order of their top-left corner.
pub fn extract_patches(
    image: &Tensor,
    context: Option<&Tensor>,
    labels: &LabelMap,
    rule: PatchRule,
    scene: usize,
) -> Result<Vec<Patch>> {
    let (_, h, w) = image.dims3()?;
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::shape(format!(
            "labels {}×{} do not match image {h}×{w}",
            labels.height(),
            labels.width()
        )));
    }
    if rule.stride == 0 {
        return Err(Error::invalid("patch stride must be >= 1"));
    }
    if rule.size == 0 || rule.size > h || rule.size > w {
        return Err(Error::invalid(format!("patch size {} does not fit {h}×{w}", rule.size)));
    }
    let mut out = Vec::new();
    for y in (0..=h - rule.size).step_by(rule.stride) {
        for x in (0..=w - rule.size).step_by(rule.stride) {
            let material = if rule.mixed {
                labels.get(y + rule.size / 2, x + rule.size / 2)
            } else {
                window_material(labels, y, x, rule.size, rule.strict)
            };
            let Some(material) = material else { continue };
            let mut patch_labels = labels.crop(y, x, rule.size, rule.size)?;
            for l in patch_labels.raw_mut() {
                if *l as usize != material {
                    *l = LabelMap::UNLABELED;
                }
            }
            out.push(Patch {
                image: crop_window(image, y, x, rule.size)?,
                context: context.map(|c| crop_window(c, y, x, rule.size)).transpose()?,
                labels: patch_labels,
                material,
                scene,
                x,
                y,
            });
        }
    }
    Ok(out)
}

/// Sorts patches by (scene, y, x) so the set does not depend on the order
/// scenes were visited in.
pub fn canonical_order(patches: &mut [Patch]) {
    patches.sort_by_key(|p| (p.scene, p.y, p.x));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_image_single_patch() {
        let img = Tensor::zeros(&[3, 48, 48]);
        let labels = LabelMap::filled(48, 48, 3);
        let rule = PatchRule { size: 48, stride: 48, strict: false, mixed: false };
        let p = extract_patches(&img, None, &labels, rule, 0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].material, 3);
    }

    #[test]
    fn no_labels_no_patches() {
        let img = Tensor::zeros(&[3, 16, 16]);
        let rule = PatchRule { size: 8, stride: 1, strict: false, mixed: false };
        assert!(extract_patches(&img, None, &LabelMap::unlabeled(16, 16), rule, 0).unwrap().is_empty());
    }

    #[test]
    fn lenient_masks_only_unlabeled() {
        let img = Tensor::zeros(&[3, 4, 4]);
        let mut labels = LabelMap::filled(4, 4, 1);
        labels.set(0, 0, None);
        let lenient = PatchRule { size: 4, stride: 4, strict: false, mixed: false };
        let p = extract_patches(&img, None, &labels, lenient, 0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].labels.labeled_count(), 15);
        let strict = PatchRule { strict: true, ..lenient };
        assert!(extract_patches(&img, None, &labels, strict, 0).unwrap().is_empty());
    }
}
