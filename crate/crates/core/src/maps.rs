//! Per-pixel label and prediction maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::UNLABELED_F64;
use crate::tensor::Tensor;

/// Sparse per-pixel material ground truth. Unlabeled pixels hold
/// [`LabelMap::UNLABELED`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub const UNLABELED: u16 = u16::MAX;

    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("label map extents must be >= 1"));
        }
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}×{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn unlabeled(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![Self::UNLABELED; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, label: u16) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn raw(&self) -> &[u16] {
        &self.labels
    }

    pub fn raw_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Option<usize> {
        match self.labels[y * self.width + x] {
            Self::UNLABELED => None,
            l => Some(l as usize),
        }
    }

    pub fn set(&mut self, y: usize, x: usize, label: Option<usize>) {
        self.labels[y * self.width + x] = label.map_or(Self::UNLABELED, |l| l as u16);
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != Self::UNLABELED).count()
    }

    /// Copies the window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<LabelMap> {
        if y + height > self.height || x + width > self.width {
            return Err(Error::shape("label crop exceeds map bounds"));
        }
        let mut labels = Vec::with_capacity(height * width);
        for row in y..y + height {
            labels.extend_from_slice(&self.labels[row * self.width + x..row * self.width + x + width]);
        }
        LabelMap::new(height, width, labels)
    }

    /// 1×1×H×W tensor of class indices, `-1` where unlabeled.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .labels
            .iter()
            .map(|&l| if l == Self::UNLABELED { UNLABELED_F64 } else { l as f64 })
            .collect();
        Tensor::new(vec![1, 1, self.height, self.width], data).expect("label map extents are >= 1")
    }
}

/// Dense class probabilities for one image plus their per-pixel argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    probs: Tensor,
    argmax: Vec<usize>,
}

impl PredictionMap {
    /// Wraps a C×H×W (or 1×C×H×W) probability tensor. Each pixel must be a
    /// distribution to within 1e-6.
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        let probs = if probs.rank() == 4 { probs.squeeze0()? } else { probs };
        let (c, h, w) = probs.dims3()?;
        let plane = h * w;
        let p = probs.data();
        let mut argmax = Vec::with_capacity(plane);
        for px in 0..plane {
            let mut best = 0;
            let mut total = 0.0;
            for ci in 0..c {
                let v = p[ci * plane + px];
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::invalid(format!("probability {v} at pixel {px} is not a valid mass")));
                }
                total += v;
                if v > p[best * plane + px] {
                    best = ci;
                }
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("probabilities at pixel {px} sum to {total}")));
            }
            argmax.push(best);
        }
        Ok(PredictionMap { probs, argmax })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    pub fn prob(&self, class: usize, y: usize, x: usize) -> f64 {
        let plane = self.height() * self.width();
        self.probs.data()[class * plane + y * self.width() + x]
    }

    /// Probability vector at flat pixel index `px`.
    pub fn pixel(&self, px: usize) -> Vec<f64> {
        let plane = self.height() * self.width();
        (0..self.num_classes()).map(|c| self.probs.data()[c * plane + px]).collect()
    }
}

/// Mean negative log-likelihood of the true class over labeled pixels.
pub fn masked_loss(probs: &PredictionMap, labels: &LabelMap) -> Result<f64> {
    if (probs.height(), probs.width()) != (labels.height(), labels.width()) {
        return Err(Error::shape(format!(
            "prediction {}×{} does not match labels {}×{}",
            probs.height(),
            probs.width(),
            labels.height(),
            labels.width()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (px, &l) in labels.raw().iter().enumerate() {
        if l == LabelMap::UNLABELED {
            continue;
        }
        let l = l as usize;
        if l >= probs.num_classes() {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        total -= probs.pixel(px)[l].ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("masked loss needs at least one labeled pixel"));
    }
    Ok(total / count as f64)
}
