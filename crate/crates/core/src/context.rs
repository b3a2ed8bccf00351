//! Global context: scene-wide place probabilities, per-pixel object
//! probability maps, and the transforms applied to them before they reach
//! the network.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::PredictionMap;
use crate::ops;
use crate::tensor::Tensor;

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum ContextValues {
    /// One distribution for the whole image.
    SceneWide(Vec<f64>),
    /// C×H×W, a distribution at every pixel.
    PerPixel(Tensor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextKind {
    SceneWide,
    PerPixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSource {
    categories: Vec<String>,
    values: ContextValues,
    hierarchy: Option<String>,
}

impl ContextSource {
    pub fn scene_wide(categories: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if categories.len() != probs.len() {
            return Err(Error::shape(format!(
                "{} categories but {} probabilities",
                categories.len(),
                probs.len()
            )));
        }
        check_distribution(&probs, "scene-wide context")?;
        Ok(ContextSource {
            categories,
            values: ContextValues::SceneWide(probs),
            hierarchy: None,
        })
    }

    pub fn per_pixel(categories: Vec<String>, map: Tensor) -> Result<Self> {
        let (c, h, w) = map.dims3()?;
        if c != categories.len() {
            return Err(Error::shape(format!(
                "{} categories but map has {c} channels",
                categories.len()
            )));
        }
        let plane = h * w;
        for px in 0..plane {
            let pixel: Vec<f64> = (0..c).map(|ci| map.data()[ci * plane + px]).collect();
            check_distribution(&pixel, "per-pixel context")?;
        }
        Ok(ContextSource {
            categories,
            values: ContextValues::PerPixel(map),
            hierarchy: None,
        })
    }

    pub fn with_hierarchy(mut self, id: impl Into<String>) -> Self {
        self.hierarchy = Some(id.into());
        self
    }

    pub fn kind(&self) -> ContextKind {
        match self.values {
            ContextValues::SceneWide(_) => ContextKind::SceneWide,
            ContextValues::PerPixel(_) => ContextKind::PerPixel,
        }
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn values(&self) -> &ContextValues {
        &self.values
    }

    pub fn hierarchy(&self) -> Option<&str> {
        self.hierarchy.as_deref()
    }

    pub fn channels(&self) -> usize {
        self.categories.len()
    }

    /// C×H×W map of this source at the given extent: broadcast for
    /// scene-wide sources, the map itself for per-pixel ones.
    pub fn to_map(&self, height: usize, width: usize) -> Result<Tensor> {
        match &self.values {
            ContextValues::SceneWide(_) => broadcast(self, height, width),
            ContextValues::PerPixel(map) => {
                let (_, h, w) = map.dims3()?;
                if (h, w) != (height, width) {
                    return Err(Error::shape(format!(
                        "context map is {h}×{w} but the image is {height}×{width}"
                    )));
                }
                Ok(map.clone())
            }
        }
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid(format!("{what}: probability {v} is not a nonnegative number")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{what}: probabilities sum to {total}")));
    }
    Ok(())
}

/// Replicates a scene-wide vector to every pixel of an H×W map.
pub fn broadcast(source: &ContextSource, height: usize, width: usize) -> Result<Tensor> {
    let ContextValues::SceneWide(p) = &source.values else {
        return Err(Error::invalid("broadcast needs a scene-wide context source"));
    };
    if height == 0 || width == 0 {
        return Err(Error::shape("broadcast extents must be >= 1"));
    }
    let plane = height * width;
    let mut data = Vec::with_capacity(p.len() * plane);
    for &v in p {
        data.extend(std::iter::repeat(v).take(plane));
    }
    Tensor::new(vec![p.len(), height, width], data)
}

/// Stacks several sources into one C×H×W tensor in the given order.
pub fn assemble(sources: &[ContextSource], height: usize, width: usize) -> Result<Option<Tensor>> {
    let mut out: Option<Tensor> = None;
    for s in sources {
        let map = s.to_map(height, width)?.unsqueeze0();
        out = Some(match out {
            None => map,
            Some(acc) => ops::concat_channels(&acc, &map)?,
        });
    }
    out.map(|t| t.squeeze0()).transpose()
}

pub const RESOLUTION_FACTORS: [usize; 5] = [1, 2, 4, 8, 16];

/// Lowers the effective spatial resolution of a C×H×W map by `factor`:
/// block means over `factor`×`factor` cells, replicated back to full size.
pub fn degrade_resolution(map: &Tensor, factor: usize) -> Result<Tensor> {
    if !RESOLUTION_FACTORS.contains(&factor) {
        return Err(Error::invalid(format!(
            "resolution factor {factor} not in {RESOLUTION_FACTORS:?}"
        )));
    }
    let (_, h, w) = map.dims3()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "map extents {h}×{w} are not divisible by {factor}"
        )));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let batched = map.clone().unsqueeze0();
    let pooled = ops::avgpool(&batched, factor)?;
    ops::upsample_nearest(&pooled, factor)?.squeeze0()
}

#[derive(Debug, Serialize, Deserialize)]
struct HierarchyFile {
    levels: Vec<String>,
    nodes: Vec<HierarchyFileNode>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HierarchyFileNode {
    name: String,
    parents: BTreeMap<String, String>,
}

/// Category tree over leaf categories. Levels run coarse to fine and the
/// last level is the leaves themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    levels: Vec<String>,
    leaves: Vec<String>,
    /// `ancestors[leaf][level]` for every non-leaf level.
    ancestors: Vec<Vec<String>>,
}

impl Hierarchy {
    /// `ancestors[i]` lists leaf `i`'s ancestor at each non-leaf level, in
    /// level order.
    pub fn new(levels: Vec<String>, leaves: Vec<String>, ancestors: Vec<Vec<String>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("hierarchy needs at least the leaf level"));
        }
        if leaves.is_empty() || leaves.len() != ancestors.len() {
            return Err(Error::invalid("hierarchy needs one ancestor list per leaf"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for leaf in &leaves {
            if !seen.insert(leaf) {
                return Err(Error::invalid(format!("duplicate leaf `{leaf}`")));
            }
        }
        for (leaf, a) in leaves.iter().zip(&ancestors) {
            if a.len() != levels.len() - 1 {
                return Err(Error::invalid(format!(
                    "leaf `{leaf}` has {} ancestors, expected {}",
                    a.len(),
                    levels.len() - 1
                )));
            }
        }
        // nodes at a finer level must sit under exactly one node of each
        // coarser level
        for fine in 1..levels.len() - 1 {
            for coarse in 0..fine {
                let mut parent_of: BTreeMap<&str, &str> = BTreeMap::new();
                for a in &ancestors {
                    if let Some(prev) = parent_of.insert(&a[fine], &a[coarse]) {
                        if prev != a[coarse] {
                            return Err(Error::invalid(format!(
                                "`{}` at level `{}` has two `{}` ancestors: `{prev}` and `{}`",
                                a[fine], levels[fine], levels[coarse], a[coarse]
                            )));
                        }
                    }
                }
            }
        }
        Ok(Hierarchy {
            levels,
            leaves,
            ancestors,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: HierarchyFile = serde_json::from_str(text)?;
        let inner = &file.levels[..file.levels.len().saturating_sub(1)];
        let mut leaves = Vec::new();
        let mut ancestors = Vec::new();
        for node in file.nodes {
            let mut a = Vec::with_capacity(inner.len());
            for level in inner {
                let p = node.parents.get(level).ok_or_else(|| {
                    Error::invalid(format!("node `{}` has no parent at level `{level}`", node.name))
                })?;
                a.push(p.clone());
            }
            leaves.push(node.name);
            ancestors.push(a);
        }
        Hierarchy::new(file.levels, leaves, ancestors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let inner = &self.levels[..self.levels.len() - 1];
        let nodes = self
            .leaves
            .iter()
            .zip(&self.ancestors)
            .map(|(name, a)| HierarchyFileNode {
                name: name.clone(),
                parents: inner.iter().cloned().zip(a.iter().cloned()).collect(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&HierarchyFile {
            levels: self.levels.clone(),
            nodes,
        })?)
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn leaves(&self) -> &[String] {
        &self.leaves
    }

    pub fn level_index(&self, level: &str) -> Result<usize> {
        self.levels.iter().position(|l| l == level).ok_or_else(|| {
            Error::invalid(format!("unknown hierarchy level `{level}` (levels: {})", self.levels.join(", ")))
        })
    }

    /// Node names at a level, in order of first appearance over the leaves,
    /// and the index of each leaf's node.
    pub fn grouping(&self, level: &str) -> Result<(Vec<String>, Vec<usize>)> {
        let li = self.level_index(level)?;
        if li == self.levels.len() - 1 {
            return Ok((self.leaves.clone(), (0..self.leaves.len()).collect()));
        }
        let mut names: Vec<String> = Vec::new();
        let mut assign = Vec::with_capacity(self.leaves.len());
        for a in &self.ancestors {
            let name = &a[li];
            let idx = match names.iter().position(|n| n == name) {
                Some(i) => i,
                None => {
                    names.push(name.clone());
                    names.len() - 1
                }
            };
            assign.push(idx);
        }
        Ok((names, assign))
    }

    pub fn leaf_index(&self, name: &str) -> Option<usize> {
        self.leaves.iter().position(|l| l == name)
    }
}

/// Sums leaf probabilities into the hierarchy nodes at `level`.
pub fn rollup(source: &ContextSource, hierarchy: &Hierarchy, level: &str) -> Result<ContextSource> {
    let (names, assign) = hierarchy.grouping(level)?;
    let mut target = Vec::with_capacity(source.categories.len());
    for cat in &source.categories {
        let leaf = hierarchy
            .leaf_index(cat)
            .ok_or_else(|| Error::UnknownLabel(cat.clone()))?;
        target.push(assign[leaf]);
    }
    let values = match &source.values {
        ContextValues::SceneWide(p) => {
            let mut out = vec![0.0; names.len()];
            for (&t, &v) in target.iter().zip(p) {
                out[t] += v;
            }
            ContextValues::SceneWide(out)
        }
        ContextValues::PerPixel(map) => {
            let (_, h, w) = map.dims3()?;
            let plane = h * w;
            let mut out = vec![0.0; names.len() * plane];
            for (ci, &t) in target.iter().enumerate() {
                let src = &map.data()[ci * plane..(ci + 1) * plane];
                for (o, v) in out[t * plane..(t + 1) * plane].iter_mut().zip(src) {
                    *o += v;
                }
            }
            ContextValues::PerPixel(Tensor::new(vec![names.len(), h, w], out)?)
        }
    };
    Ok(ContextSource {
        categories: names,
        values,
        hierarchy: source.hierarchy.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct PriorProduct {
    pub map: PredictionMap,
    /// Pixels where every class had zero product mass and the input
    /// distribution was kept unchanged.
    pub fallback_pixels: usize,
}

/// Multiplies every pixel's distribution by `prior` and renormalizes.
pub fn multiply_prior(probs: &PredictionMap, prior: &[f64]) -> Result<PriorProduct> {
    let c = probs.num_classes();
    if prior.len() != c {
        return Err(Error::shape(format!("prior has {} entries for {c} classes", prior.len())));
    }
    validate_prior(prior)?;
    multiply_with(probs, |_| prior)
}

/// Like [`multiply_prior`] with a different prior at every pixel, given as a
/// C×H×W tensor.
pub fn multiply_prior_map(probs: &PredictionMap, prior: &Tensor) -> Result<PriorProduct> {
    let (c, h, w) = prior.dims3()?;
    if (c, h, w) != (probs.num_classes(), probs.height(), probs.width()) {
        return Err(Error::shape(format!(
            "prior map {:?} does not match predictions",
            prior.shape()
        )));
    }
    let plane = h * w;
    let pixels: Vec<Vec<f64>> = (0..plane)
        .map(|px| (0..c).map(|ci| prior.data()[ci * plane + px]).collect())
        .collect();
    for p in &pixels {
        validate_prior(p)?;
    }
    multiply_with(probs, |px| &pixels[px])
}

fn validate_prior(prior: &[f64]) -> Result<()> {
    if prior.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("prior entries must be finite and nonnegative"));
    }
    if prior.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid("prior sums to zero"));
    }
    Ok(())
}

fn multiply_with<'a>(probs: &PredictionMap, prior_at: impl Fn(usize) -> &'a [f64]) -> Result<PriorProduct> {
    let (c, h, w) = (probs.num_classes(), probs.height(), probs.width());
    let plane = h * w;
    let src = probs.probs().data();
    let mut out = vec![0.0; src.len()];
    let mut fallback = 0;
    for px in 0..plane {
        let prior = prior_at(px);
        let total: f64 = (0..c).map(|ci| src[ci * plane + px] * prior[ci]).sum();
        if total > 0.0 {
            for ci in 0..c {
                out[ci * plane + px] = src[ci * plane + px] * prior[ci] / total;
            }
        } else {
            fallback += 1;
            for ci in 0..c {
                out[ci * plane + px] = src[ci * plane + px];
            }
        }
    }
    Ok(PriorProduct {
        map: PredictionMap::from_probs(Tensor::new(vec![c, h, w], out)?)?,
        fallback_pixels: fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    fn two_level() -> Hierarchy {
        Hierarchy::new(
            names(&["top", "leaf"]),
            names(&["a", "b", "c"]),
            vec![names(&["x"]), names(&["x"]), names(&["y"])],
        )
        .unwrap()
    }

    #[test]
    fn broadcast_replicates() {
        let s = ContextSource::scene_wide(names(&["p", "q"]), vec![0.7, 0.3]).unwrap();
        let m = broadcast(&s, 4, 4).unwrap();
        assert_eq!(m.shape(), &[2, 4, 4]);
        for px in 0..16 {
            assert_eq!(m.data()[px], 0.7);
            assert_eq!(m.data()[16 + px], 0.3);
        }
    }

    #[test]
    fn broadcast_rejects_per_pixel() {
        let s = ContextSource::per_pixel(names(&["p", "q"]), Tensor::full(&[2, 2, 2], 0.5)).unwrap();
        assert!(broadcast(&s, 2, 2).is_err());
    }

    #[test]
    fn source_validates_simplex() {
        assert!(ContextSource::scene_wide(names(&["p", "q"]), vec![0.7, 0.4]).is_err());
        assert!(ContextSource::scene_wide(names(&["p", "q"]), vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn degrade_identity_and_constant() {
        let m = Tensor::from_fn(&[2, 4, 4], |i| (i % 7) as f64 * 0.1);
        assert!(degrade_resolution(&m, 1).unwrap().bit_eq(&m));
        let c = Tensor::full(&[3, 16, 16], 0.25);
        for d in RESOLUTION_FACTORS {
            assert_eq!(degrade_resolution(&c, d).unwrap(), c);
        }
    }

    #[test]
    fn degrade_block_mean() {
        let m = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let d = degrade_resolution(&m, 2).unwrap();
        // block (0,0) holds 0,1,4,5
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(d.data()[y * 4 + x], 2.5);
        }
        assert_eq!(d.data()[2 * 4 + 2], (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn degrade_rejects_bad_factor() {
        let m = Tensor::zeros(&[1, 6, 6]);
        assert!(degrade_resolution(&m, 3).is_err());
        assert!(degrade_resolution(&m, 4).is_err());
    }

    #[test]
    fn rollup_sums_leaves() {
        let h = two_level();
        let s = ContextSource::scene_wide(names(&["a", "b", "c"]), vec![0.2, 0.3, 0.5]).unwrap();
        let r = rollup(&s, &h, "top").unwrap();
        assert_eq!(r.categories(), &names(&["x", "y"])[..]);
        assert_eq!(r.values(), &ContextValues::SceneWide(vec![0.5, 0.5]));
        let same = rollup(&s, &h, "leaf").unwrap();
        assert_eq!(same, s);
    }

    #[test]
    fn rollup_unknown_leaf() {
        let h = two_level();
        let s = ContextSource::scene_wide(names(&["a", "zz"]), vec![0.5, 0.5]).unwrap();
        match rollup(&s, &h, "top") {
            Err(Error::UnknownLabel(l)) => assert_eq!(l, "zz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hierarchy_json_roundtrip() {
        let text = r#"{"levels":["high","mid","leaf"],"nodes":[
            {"name":"kitchen","parents":{"high":"indoor","mid":"home"}},
            {"name":"bar","parents":{"high":"indoor","mid":"commercial"}},
            {"name":"street","parents":{"high":"outdoor","mid":"urban"}}]}"#;
        let h = Hierarchy::from_json(text).unwrap();
        assert_eq!(h.grouping("high").unwrap(), (names(&["indoor", "outdoor"]), vec![0, 0, 1]));
        let again = Hierarchy::from_json(&h.to_json().unwrap()).unwrap();
        assert_eq!(again, h);
    }

    #[test]
    fn hierarchy_rejects_non_nested() {
        let err = Hierarchy::new(
            names(&["high", "mid", "leaf"]),
            names(&["a", "b"]),
            vec![names(&["x", "m"]), names(&["y", "m"])],
        );
        assert!(err.is_err());
    }

    #[test]
    fn multiply_prior_uniform_and_one_hot() {
        let t = Tensor::new(vec![3, 1, 2], vec![0.5, 0.1, 0.3, 0.2, 0.2, 0.7]).unwrap();
        let p = PredictionMap::from_probs(t).unwrap();
        let u = multiply_prior(&p, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(u.map.argmax(), p.argmax());
        let k = multiply_prior(&p, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(k.map.argmax(), &[1, 1]);
        assert_eq!(k.fallback_pixels, 0);
    }

    #[test]
    fn multiply_prior_zero_handling() {
        let t = Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
        let p = PredictionMap::from_probs(t).unwrap();
        let out = multiply_prior(&p, &[0.0, 1.0]).unwrap();
        assert_eq!(out.fallback_pixels, 1);
        assert_eq!(out.map.argmax(), &[0]);
        assert!(multiply_prior(&p, &[0.0, 0.0]).is_err());
    }
}
