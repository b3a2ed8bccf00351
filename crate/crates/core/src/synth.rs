//! Procedural scenes with known place, object and material distributions,
//! and the exact accuracy of the Bayes classifier on them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::ContextSource;
use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::tensor::Tensor;

const TABLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    pub noise: f64,
    #[serde(default)]
    pub stripe_frequency: f64,
    #[serde(default)]
    pub stripe_amplitude: f64,
}

impl Texture {
    fn bits(&self) -> [u64; 6] {
        [
            self.base[0].to_bits(),
            self.base[1].to_bits(),
            self.base[2].to_bits(),
            self.noise.to_bits(),
            self.stripe_frequency.to_bits(),
            self.stripe_amplitude.to_bits(),
        ]
    }
}

/// Which context variables a classifier may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    None,
    Place,
    Object,
    Both,
}

impl ContextMode {
    pub const ALL: [ContextMode; 4] = [ContextMode::None, ContextMode::Place, ContextMode::Object, ContextMode::Both];

    pub fn uses_place(self) -> bool {
        matches!(self, ContextMode::Place | ContextMode::Both)
    }

    pub fn uses_object(self) -> bool {
        matches!(self, ContextMode::Object | ContextMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            ContextMode::None => "none",
            ContextMode::Place => "place",
            ContextMode::Object => "object",
            ContextMode::Both => "both",
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ContextMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown context mode `{s}` (valid: none, place, object, both)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub places: Vec<String>,
    pub objects: Vec<String>,
    pub materials: Vec<String>,
    /// p(place).
    pub place_prior: Vec<f64>,
    /// p(object | place), one row per place.
    pub object_given_place: Vec<Vec<f64>>,
    /// p(material | object), one row per object. Used when
    /// `material_given_object_place` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material_given_object: Option<Vec<Vec<f64>>>,
    /// p(material | object, place), indexed `[place][object]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material_given_object_place: Option<Vec<Vec<Vec<f64>>>>,
    pub textures: Vec<Texture>,
    #[serde(default)]
    pub ambiguous_pairs: Vec<[usize; 2]>,
    #[serde(default = "default_ambiguity_rate")]
    pub ambiguity_rate: f64,
    /// Object regions are unions of cells of this size.
    #[serde(default = "default_object_cell")]
    pub object_cell: usize,
    /// Each part of this size inside an object draws its own material.
    #[serde(default = "default_part_cell")]
    pub part_cell: usize,
    /// Softening of the context one-hots: softmax((sharpness·onehot + noise) / T).
    #[serde(default = "default_temperature")]
    pub context_temperature: f64,
    #[serde(default = "default_sharpness")]
    pub context_sharpness: f64,
    #[serde(default = "default_context_noise")]
    pub context_noise: f64,
}

fn default_ambiguity_rate() -> f64 {
    0.4
}
fn default_object_cell() -> usize {
    16
}
fn default_part_cell() -> usize {
    8
}
fn default_temperature() -> f64 {
    2.0
}
fn default_sharpness() -> f64 {
    4.0
}
fn default_context_noise() -> f64 {
    0.5
}

fn names(prefix: &str, list: &[&str]) -> Vec<String> {
    list.iter().map(|s| format!("{prefix}{s}")).collect()
}

/// The shipped benchmark world: 4 places, 8 objects, 8 materials, two
/// ambiguous material pairs.
///
/// Pair (0, 1) is used by objects 0–3 and which of the two appears depends on
/// the place. Pair (2, 3) is dominated by material 2 except on the rare
/// object 7, so without object context material 3 is always misread.
pub fn default_world() -> WorldSpec {
    let places = names("", &["street", "kitchen", "garden", "office"]);
    let objects = names("", &["table", "chair", "cabinet", "shelf", "car", "bicycle", "fence", "lamp"]);
    let materials = names("", &["wood", "plastic", "metal", "ceramic", "fabric", "leather", "stone", "glass"]);
    let (alpha_a, pure) = (0.58, 0.98);
    let alpha_b = 0.15;
    let lamp_weight = 0.05;
    let lamp_ceramic = 0.75;
    let pattern = [[1, 1, 1, 0], [0, 1, 0, 0], [1, 1, 0, 1], [1, 0, 0, 0]];

    let mut weights = vec![1.0; 8];
    weights[7] = lamp_weight;
    let total: f64 = weights.iter().sum();
    let object_row: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let mut mop = vec![vec![vec![0.0; 8]; 8]; 4];
    for (p, table) in mop.iter_mut().enumerate() {
        for (o, row) in table.iter_mut().enumerate() {
            match o {
                0..=3 => {
                    row[0] = alpha_a * if pattern[o][p] == 1 { pure } else { 1.0 - pure };
                    row[1] = alpha_a - row[0];
                    row[if o < 2 { 4 } else { 5 }] = 1.0 - alpha_a;
                }
                4..=6 => {
                    row[2] = alpha_b;
                    row[if o < 6 { 6 } else { 7 }] = 1.0 - alpha_b;
                }
                _ => {
                    row[3] = lamp_ceramic;
                    row[2] = 1.0 - lamp_ceramic;
                }
            }
        }
    }

    let corners = [
        [0.2, 0.2, 0.2],
        [0.8, 0.2, 0.2],
        [0.2, 0.8, 0.2],
        [0.2, 0.2, 0.8],
        [0.8, 0.8, 0.2],
        [0.8, 0.2, 0.8],
    ];
    let texture_of = [0, 0, 1, 1, 2, 3, 4, 5];
    let textures = texture_of
        .iter()
        .map(|&t| Texture {
            base: corners[t],
            noise: 0.1,
            stripe_frequency: 0.125 * (t % 3) as f64,
            stripe_amplitude: 0.05,
        })
        .collect();

    WorldSpec {
        seed: 7,
        places,
        objects,
        materials,
        place_prior: vec![0.25; 4],
        object_given_place: vec![object_row; 4],
        material_given_object: None,
        material_given_object_place: Some(mop),
        textures,
        ambiguous_pairs: vec![[0, 1], [2, 3]],
        ambiguity_rate: default_ambiguity_rate(),
        object_cell: default_object_cell(),
        part_cell: default_part_cell(),
        context_temperature: default_temperature(),
        context_sharpness: default_sharpness(),
        context_noise: default_context_noise(),
    }
}

fn check_row(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::invalid(format!("{what} has {} entries, expected {len}", row.len())));
    }
    if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > TABLE_TOL {
        return Err(Error::invalid(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl WorldSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: WorldSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn num_places(&self) -> usize {
        self.places.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_materials(&self) -> usize {
        self.materials.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (np, no, nm) = (self.num_places(), self.num_objects(), self.num_materials());
        if np == 0 || no == 0 || nm == 0 {
            return Err(Error::invalid("world needs at least one place, object and material"));
        }
        if nm > LabelMap::UNLABELED as usize || no > u16::MAX as usize {
            return Err(Error::invalid("too many categories"));
        }
        check_row(&self.place_prior, np, "place_prior")?;
        if self.object_given_place.len() != np {
            return Err(Error::invalid(format!(
                "object_given_place has {} rows for {np} places",
                self.object_given_place.len()
            )));
        }
        for (p, row) in self.object_given_place.iter().enumerate() {
            check_row(row, no, &format!("object_given_place[{p}]"))?;
        }
        match (&self.material_given_object, &self.material_given_object_place) {
            (Some(_), Some(_)) => {
                return Err(Error::invalid(
                    "give either material_given_object or material_given_object_place, not both",
                ))
            }
            (None, None) => return Err(Error::invalid("missing material table")),
            (Some(t), None) => {
                if t.len() != no {
                    return Err(Error::invalid(format!("material_given_object has {} rows for {no} objects", t.len())));
                }
                for (o, row) in t.iter().enumerate() {
                    check_row(row, nm, &format!("material_given_object[{o}]"))?;
                }
            }
            (None, Some(t)) => {
                if t.len() != np || t.iter().any(|r| r.len() != no) {
                    return Err(Error::invalid(format!(
                        "material_given_object_place must be {np}×{no}×{nm}"
                    )));
                }
                for (p, rows) in t.iter().enumerate() {
                    for (o, row) in rows.iter().enumerate() {
                        check_row(row, nm, &format!("material_given_object_place[{p}][{o}]"))?;
                    }
                }
            }
        }
        if self.textures.len() != nm {
            return Err(Error::invalid(format!("{} textures for {nm} materials", self.textures.len())));
        }
        for t in &self.textures {
            if t.base.iter().chain([&t.noise, &t.stripe_frequency, &t.stripe_amplitude]).any(|v| !v.is_finite())
                || t.noise < 0.0
            {
                return Err(Error::invalid("texture parameters must be finite with noise >= 0"));
            }
        }
        for &[a, b] in &self.ambiguous_pairs {
            if a >= nm || b >= nm || a == b {
                return Err(Error::invalid(format!("ambiguous pair ({a}, {b}) is not a pair of materials")));
            }
            if self.textures[a].bits() != self.textures[b].bits() {
                return Err(Error::invalid(format!(
                    "ambiguous pair ({a}, {b}) must have bitwise-equal textures"
                )));
            }
        }
        if self.part_cell == 0 || self.object_cell == 0 || self.object_cell % self.part_cell != 0 {
            return Err(Error::invalid("object_cell must be a positive multiple of part_cell"));
        }
        if !(self.context_temperature > 0.0) || !(self.context_noise >= 0.0) || !self.context_sharpness.is_finite() {
            return Err(Error::invalid("context softening needs temperature > 0 and noise >= 0"));
        }
        Ok(())
    }

    /// p(material | object, place).
    pub fn material_prob(&self, place: usize, object: usize) -> &[f64] {
        match (&self.material_given_object_place, &self.material_given_object) {
            (Some(t), _) => &t[place][object],
            (None, Some(t)) => &t[object],
            (None, None) => panic!("world spec has no material table"),
        }
    }

    /// p(place, object, material) indexed `[p][o][m]`.
    pub fn joint(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.num_places())
            .map(|p| {
                (0..self.num_objects())
                    .map(|o| {
                        let po = self.place_prior[p] * self.object_given_place[p][o];
                        self.material_prob(p, o).iter().map(|pm| po * pm).collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// p(material | object), marginalizing the place.
    pub fn material_given_object_marginal(&self) -> Vec<Vec<f64>> {
        let joint = self.joint();
        (0..self.num_objects())
            .map(|o| {
                let mut row = vec![0.0; self.num_materials()];
                for pj in &joint {
                    for (m, v) in pj[o].iter().enumerate() {
                        row[m] += v;
                    }
                }
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v /= s);
                }
                row
            })
            .collect()
    }

    pub fn material_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_materials()];
        for pj in self.joint() {
            for row in pj {
                for (m, v) in row.iter().enumerate() {
                    out[m] += v;
                }
            }
        }
        out
    }

    /// Texture class of every material: materials with bitwise-identical
    /// texture parameters share a class. Classes are numbered in order of
    /// first appearance.
    pub fn texture_classes(&self) -> Vec<usize> {
        let mut seen: Vec<[u64; 6]> = Vec::new();
        self.textures
            .iter()
            .map(|t| {
                let b = t.bits();
                match seen.iter().position(|s| *s == b) {
                    Some(i) => i,
                    None => {
                        seen.push(b);
                        seen.len() - 1
                    }
                }
            })
            .collect()
    }

    /// Fraction of pixels whose material shares its texture with another
    /// material.
    pub fn measured_ambiguity_rate(&self) -> f64 {
        let classes = self.texture_classes();
        let marginal = self.material_marginal();
        (0..self.num_materials())
            .filter(|&m| classes.iter().filter(|&&c| c == classes[m]).count() > 1)
            .map(|m| marginal[m])
            .sum()
    }

    fn oracle_key(&self, mode: ContextMode, place: usize, object: usize, texture: usize) -> (usize, usize, usize) {
        (
            if mode.uses_place() { place } else { usize::MAX },
            if mode.uses_object() { object } else { usize::MAX },
            texture,
        )
    }

    /// Posterior mass table of the MAP classifier: for every observable
    /// (place?, object?, texture) key, the joint mass of each material.
    fn posterior_table(&self, mode: ContextMode) -> BTreeMap<(usize, usize, usize), Vec<f64>> {
        let classes = self.texture_classes();
        let mut table: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
        for (p, pj) in self.joint().iter().enumerate() {
            for (o, row) in pj.iter().enumerate() {
                for (m, &v) in row.iter().enumerate() {
                    let key = self.oracle_key(mode, p, o, classes[m]);
                    table.entry(key).or_insert_with(|| vec![0.0; self.num_materials()])[m] += v;
                }
            }
        }
        table
    }

    /// Decision rule of the Bayes classifier: first material of maximal
    /// posterior for each observable key.
    pub fn map_rule(&self, mode: ContextMode) -> BayesRule {
        let rule = self
            .posterior_table(mode)
            .into_iter()
            .map(|(k, masses)| (k, argmax_first(&masses)))
            .collect();
        BayesRule {
            mode,
            classes: self.texture_classes(),
            rule,
        }
    }

    /// Conditional material prior p(m | place, object) restricted to what
    /// the mode observes, ignoring texture.
    pub fn context_prior(&self, mode: ContextMode, place: usize, object: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_materials()];
        for (p, pj) in self.joint().iter().enumerate() {
            if mode.uses_place() && p != place {
                continue;
            }
            for (o, row) in pj.iter().enumerate() {
                if mode.uses_object() && o != object {
                    continue;
                }
                for (m, v) in row.iter().enumerate() {
                    out[m] += v;
                }
            }
        }
        let s: f64 = out.iter().sum();
        if s > 0.0 {
            out.iter_mut().for_each(|v| *v /= s);
        }
        out
    }
}

pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Expected per-pixel accuracy of the MAP classifier that knows each
/// pixel's texture class plus the context selected by `mode`, by exact
/// summation over (place, object, material).
pub fn bayes_oracle(spec: &WorldSpec, mode: ContextMode) -> f64 {
    spec.posterior_table(mode)
        .values()
        .map(|masses| masses.iter().cloned().fold(0.0, f64::max))
        .sum()
}

#[derive(Debug, Clone)]
pub struct BayesRule {
    mode: ContextMode,
    classes: Vec<usize>,
    rule: BTreeMap<(usize, usize, usize), usize>,
}

impl BayesRule {
    /// Decision for a pixel of the given place, object and true material.
    /// Only the texture class of `material` is consulted.
    pub fn decide(&self, place: usize, object: usize, material: usize) -> usize {
        let key = (
            if self.mode.uses_place() { place } else { usize::MAX },
            if self.mode.uses_object() { object } else { usize::MAX },
            self.classes[material],
        );
        self.rule.get(&key).copied().unwrap_or(material)
    }
}

/// Draws an index from a discrete distribution.
fn sample_index<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// Monte-Carlo estimate of the MAP accuracy from `samples` pixels drawn
/// from the generator tables: (mean, standard error).
pub fn monte_carlo_accuracy(spec: &WorldSpec, mode: ContextMode, samples: usize, seed: u64) -> (f64, f64) {
    let rule = spec.map_rule(mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let p = sample_index(&spec.place_prior, &mut rng);
        let o = sample_index(&spec.object_given_place[p], &mut rng);
        let m = sample_index(spec.material_prob(p, o), &mut rng);
        if rule.decide(p, o, m) == m {
            hits += 1;
        }
    }
    let mean = hits as f64 / samples as f64;
    (mean, (mean * (1.0 - mean) / samples as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: usize,
    /// 3×H×W.
    pub image: Tensor,
    pub labels: LabelMap,
    /// Object id per pixel, row-major.
    pub objects: Vec<u16>,
    pub place: usize,
    /// Softened place distribution.
    pub noisy_place: Vec<f64>,
    /// Softened per-pixel object distributions, O×H×W.
    pub noisy_objects: Tensor,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn true_place(&self, num_places: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_places];
        v[self.place] = 1.0;
        v
    }

    pub fn true_object_map(&self, num_objects: usize) -> Tensor {
        let plane = self.objects.len();
        let mut t = Tensor::zeros(&[num_objects, self.height(), self.width()]);
        for (px, &o) in self.objects.iter().enumerate() {
            t.data_mut()[o as usize * plane + px] = 1.0;
        }
        t
    }

    /// Context sources for a mode, place first: softened versions when
    /// `noisy`, exact one-hots otherwise.
    pub fn context(&self, spec: &WorldSpec, mode: ContextMode, noisy: bool) -> Result<Vec<ContextSource>> {
        let mut out = Vec::new();
        if mode.uses_place() {
            let p = if noisy { self.noisy_place.clone() } else { self.true_place(spec.num_places()) };
            out.push(ContextSource::scene_wide(spec.places.clone(), p)?.with_hierarchy("places"));
        }
        if mode.uses_object() {
            let o = if noisy {
                self.noisy_objects.clone()
            } else {
                self.true_object_map(spec.num_objects())
            };
            out.push(ContextSource::per_pixel(spec.objects.clone(), o)?);
        }
        Ok(out)
    }
}

fn soften<R: Rng>(spec: &WorldSpec, hot: usize, n: usize, rng: &mut R) -> Vec<f64> {
    let logits: Vec<f64> = (0..n)
        .map(|i| {
            let z: f64 = StandardNormal.sample(rng);
            let base = if i == hot { spec.context_sharpness } else { 0.0 };
            (base + spec.context_noise * z) / spec.context_temperature
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

/// Splits the rectangle (in cells) recursively; each leaf becomes one
/// object region.
fn guillotine<R: Rng>(rect: (usize, usize, usize, usize), rng: &mut R, out: &mut Vec<(usize, usize, usize, usize)>) {
    let (y, x, h, w) = rect;
    let can_h = h > 1;
    let can_w = w > 1;
    if (!can_h && !can_w) || rng.gen_bool(0.35) {
        out.push(rect);
        return;
    }
    let split_rows = if can_h && can_w { rng.gen_bool(0.5) } else { can_h };
    if split_rows {
        let cut = rng.gen_range(1..h);
        guillotine((y, x, cut, w), rng, out);
        guillotine((y + cut, x, h - cut, w), rng, out);
    } else {
        let cut = rng.gen_range(1..w);
        guillotine((y, x, h, cut), rng, out);
        guillotine((y, x + cut, h, w - cut), rng, out);
    }
}

fn generate_scene(spec: &WorldSpec, index: usize, size: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (np, no) = (spec.num_places(), spec.num_objects());
    let place = sample_index(&spec.place_prior, &mut rng);
    let cells = size / spec.object_cell;
    let mut rects = Vec::new();
    guillotine((0, 0, cells, cells), &mut rng, &mut rects);

    let plane = size * size;
    let mut objects = vec![0u16; plane];
    let mut labels = vec![0u16; plane];
    for &(cy, cx, ch, cw) in &rects {
        let object = sample_index(&spec.object_given_place[place], &mut rng);
        let materials = spec.material_prob(place, object);
        let (y0, x0) = (cy * spec.object_cell, cx * spec.object_cell);
        let (h, w) = (ch * spec.object_cell, cw * spec.object_cell);
        for py in (y0..y0 + h).step_by(spec.part_cell) {
            for px in (x0..x0 + w).step_by(spec.part_cell) {
                let m = sample_index(materials, &mut rng) as u16;
                for y in py..py + spec.part_cell {
                    for x in px..px + spec.part_cell {
                        objects[y * size + x] = object as u16;
                        labels[y * size + x] = m;
                    }
                }
            }
        }
    }

    let mut image = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let t = &spec.textures[labels[y * size + x] as usize];
            let stripe = t.stripe_amplitude * (std::f64::consts::TAU * t.stripe_frequency * x as f64).sin();
            for c in 0..3 {
                let z: f64 = StandardNormal.sample(&mut rng);
                image[c * plane + y * size + x] = t.base[c] + stripe + t.noise * z;
            }
        }
    }

    let noisy_place = soften(spec, place, np, &mut rng);
    let mut noisy_objects = vec![0.0; no * plane];
    for (px, &o) in objects.iter().enumerate() {
        for (c, v) in soften(spec, o as usize, no, &mut rng).into_iter().enumerate() {
            noisy_objects[c * plane + px] = v;
        }
    }

    Ok(Scene {
        index,
        image: Tensor::new(vec![3, size, size], image)?,
        labels: LabelMap::new(size, size, labels)?,
        objects,
        place,
        noisy_place,
        noisy_objects: Tensor::new(vec![no, size, size], noisy_objects)?,
    })
}

/// Generates scenes `0..count`. Scene `i` depends only on the spec seed and
/// `i`, so the result does not depend on thread scheduling.
pub fn generate(spec: &WorldSpec, count: usize, size: usize) -> Result<Vec<Scene>> {
    spec.validate()?;
    if size == 0 || size % 4 != 0 || size % spec.object_cell != 0 {
        return Err(Error::invalid(format!(
            "image size {size} must be a positive multiple of 4 and of object_cell {}",
            spec.object_cell
        )));
    }
    (0..count).into_par_iter().map(|i| generate_scene(spec, i, size)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles and splits: `train_fraction` of the items for training, the
/// rest halved between validation and test.
pub fn make_splits<T>(items: Vec<T>, train_fraction: f64, seed: u64) -> Result<Splits<T>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = items.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    let n_val = (n - n_train.min(n)) / 2;
    let n_test = n - n_train.min(n) - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::invalid(format!(
            "{n} items give an empty split ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<T> {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| slots[i].take().unwrap()).collect()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_world_is_valid() {
        let w = default_world();
        w.validate().unwrap();
        assert!((w.measured_ambiguity_rate() - w.ambiguity_rate).abs() < 1e-9);
        let back = WorldSpec::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn oracle_ordering_on_default() {
        let w = default_world();
        let [none, place, object, both] = ContextMode::ALL.map(|m| bayes_oracle(&w, m));
        assert!(both > object && object > none && both > place, "{none} {place} {object} {both}");
    }

    #[test]
    fn generation_is_deterministic() {
        let w = default_world();
        let a = generate(&w, 3, 32).unwrap();
        let b = generate(&w, 3, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_80_10_10() {
        let s = make_splits((0..100).collect::<Vec<_>>(), 0.8, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert!(make_splits(vec![1, 2], 0.8, 0).is_err());
    }

    #[test]
    fn bad_table_rejected() {
        let mut w = default_world();
        w.object_given_place.pop();
        assert!(w.validate().is_err());
        let mut w = default_world();
        w.textures[1].noise = 0.2;
        assert!(w.validate().is_err());
    }
}
