//! The victim model: a single-scale, single-anchor grid detector.
//!
//! Four stride-2 convolutions with leaky-ReLU and a stride-1 head reduce an
//! `S × S` input to a `G × G` grid, `G = S / 16`. Kernel sizes come from
//! [`DetectorConfig::kernels`]. Each cell
//! predicts `[tx, ty, tw, th, objectness, class logits…]`.

mod checkpoint;
mod synth;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_detector, read_detector, save_detector, write_detector, DETECTOR_MAGIC};
pub use synth::{
    sample_layout, split_scenes, synth_dataset, Figure, FigureKind, Scene, SceneLayout, Split, CRATE, PERSON,
};
pub use train::{train_toy_detector, EpochStats, TrainConfig, TrainingCurve};

use crate::error::{Error, Result};
use crate::imaging::ImageRGB;
use crate::patchops::BoundingBox;
use crate::tensorgrad::{sigmoid, Graph, Tensor, Var};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
const BOX_TERMS: usize = 4;
const LOG_SCALE_LIMIT: f64 = 8.0;

/// One decoded prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
}

impl Detection {
    /// `objectness · P(class)` for the box's own class.
    pub fn score(&self) -> f64 {
        self.objectness * self.class_probs[self.bbox.class_id]
    }
}

/// Anything that turns images into detections.
pub trait Detector {
    fn detect(&self, images: &[ImageRGB]) -> Result<Vec<Vec<Detection>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub channels: Vec<usize>,
    /// Kernel side of each stride-2 layer, then of the head.
    pub kernels: Vec<usize>,
    pub num_classes: usize,
    /// Anchor width and height in normalized image units.
    pub anchor: (f64, f64),
    pub leaky_slope: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 160,
            channels: vec![16, 32, 64, 64],
            kernels: vec![3, 3, 3, 5, 3],
            num_classes: 2,
            anchor: (0.2, 0.45),
            leaky_slope: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> usize {
        self.input_size >> self.channels.len()
    }

    pub fn outputs_per_cell(&self) -> usize {
        BOX_TERMS + 1 + self.num_classes
    }

    fn validate(&self) -> Result<()> {
        let stride = 1usize << self.channels.len();
        if self.kernels.len() != self.channels.len() + 1 || self.kernels.iter().any(|&k| k % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "need {} odd kernel sizes, got {:?}",
                self.channels.len() + 1,
                self.kernels
            )));
        }
        if self.input_size == 0 || self.input_size % stride != 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {} must be a positive multiple of {stride} with at least one class",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridDetector {
    config: DetectorConfig,
    layers: Vec<ConvLayer>,
}

/// Detector weights registered as graph leaves.
#[derive(Debug, Clone)]
pub struct BoundDetector {
    pub params: Vec<(Var, Var)>,
}

impl GridDetector {
    /// He-initialised weights, zero biases.
    pub fn new_random(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut in_ch = 3;
        let hidden = config.channels.len();
        let specs: Vec<(usize, usize, usize, usize)> = config
            .channels
            .iter()
            .zip(&config.kernels)
            .map(|(&c, &k)| (c, k, 2, k / 2))
            .chain(std::iter::once((config.outputs_per_cell(), config.kernels[hidden], 1, config.kernels[hidden] / 2)))
            .collect();
        for (out_ch, k, stride, pad) in specs {
            let fan_in = (in_ch * k * k) as f64;
            let std = (2.0 / fan_in).sqrt();
            let weight = Tensor::from_fn([out_ch, in_ch, k, k], |_| {
                // Sum of uniforms approximates a normal draw.
                let u: f64 = (0..4).map(|_| rng.gen::<f64>() - 0.5).sum();
                u * std * (3.0f64).sqrt()
            });
            layers.push(ConvLayer {
                weight,
                bias: Tensor::zeros([out_ch]),
                stride,
                pad,
            });
            in_ch = out_ch;
        }
        Ok(Self { config, layers })
    }

    pub fn zeros(config: DetectorConfig) -> Result<Self> {
        let mut m = Self::new_random(config, 0)?;
        for l in &mut m.layers {
            l.weight = Tensor::zeros(l.weight.shape().to_vec());
            l.bias = Tensor::zeros(l.bias.shape().to_vec());
        }
        Ok(m)
    }

    pub(crate) fn from_parts(config: DetectorConfig, layers: Vec<ConvLayer>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.channels.len() + 1 {
            return Err(Error::Checkpoint(format!(
                "{} layers for {} hidden channels",
                layers.len(),
                config.channels.len()
            )));
        }
        let hidden = config.channels.len();
        for (idx, l) in layers.iter().enumerate() {
            let stride = if idx < hidden { 2 } else { 1 };
            if l.stride != stride || l.pad != config.kernels[idx] / 2 {
                return Err(Error::Checkpoint(format!(
                    "layer {idx} has stride {} and padding {}",
                    l.stride, l.pad
                )));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    /// Registers the weights on `g`. Crafting binds with `trainable = false`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDetector {
        let params = self
            .layers
            .iter()
            .map(|l| {
                (
                    g.leaf(l.weight.clone(), trainable),
                    g.leaf(l.bias.clone(), trainable),
                )
            })
            .collect();
        BoundDetector { params }
    }

    /// Raw grid predictions `N × G × G × (5 + C)` for an `N × 3 × S × S` batch.
    pub fn forward(&self, g: &mut Graph, bound: &BoundDetector, batch: Var) -> Result<Var> {
        let s = g.shape(batch);
        let size = self.config.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::InvalidArgument(format!(
                "detector expects N×3×{size}×{size} input, got {s:?}"
            )));
        }
        let mut x = batch;
        let last = self.layers.len() - 1;
        for (i, (layer, &(w, b))) in self.layers.iter().zip(&bound.params).enumerate() {
            x = g.conv2d(x, w, layer.stride, layer.pad)?;
            x = g.channel_bias(x, b)?;
            if i < last {
                x = g.leaky_relu(x, self.config.leaky_slope)?;
            }
        }
        Ok(g.permute(x, &[0, 2, 3, 1])?)
    }

    /// Forward pass outside of any caller graph.
    pub fn predict(&self, images: &[ImageRGB]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let batch = images_to_batch(&mut g, images, self.config.input_size)?;
        let raw = self.forward(&mut g, &bound, batch)?;
        Ok(g.value(raw).clone())
    }

    pub fn decode(&self, raw: &Tensor, conf_threshold: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
        decode(raw, self.config.anchor, conf_threshold, nms_iou)
    }
}

impl Detector for GridDetector {
    fn detect(&self, images: &[ImageRGB]) -> Result<Vec<Vec<Detection>>> {
        let mut out = Vec::with_capacity(images.len());
        // Small chunks keep the graph's saved activations bounded.
        for chunk in images.chunks(16) {
            let raw = self.predict(chunk)?;
            out.extend(self.decode(&raw, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU)?);
        }
        Ok(out)
    }
}

/// Stacks images (resized to `size × size` if needed) into an `N × 3 × S × S`
/// constant.
pub fn images_to_batch(g: &mut Graph, images: &[ImageRGB], size: usize) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let parts: Vec<Var> = images
        .iter()
        .map(|img| g.constant(img.resize(size, size).to_chw()))
        .collect();
    Ok(g.stack(&parts)?)
}

/// Per image, the largest `sigmoid(obj) · softmax(cls)[target]` over all cells.
pub fn extract_attack_scores(g: &mut Graph, raw: Var, target_class: usize) -> Result<Var> {
    let s = g.shape(raw).to_vec();
    if s.len() != 4 || s[3] <= BOX_TERMS + 1 {
        return Err(Error::InvalidArgument(format!("raw predictions of shape {s:?}")));
    }
    let classes = s[3] - BOX_TERMS - 1;
    if target_class >= classes {
        return Err(Error::InvalidArgument(format!(
            "target class {target_class} but the model has {classes} classes"
        )));
    }
    let obj = g.slice_last(raw, BOX_TERMS, 1)?;
    let obj = g.sigmoid(obj)?;
    let logits = g.slice_last(raw, BOX_TERMS + 1, classes)?;
    let probs = g.softmax_last(logits)?;
    let target = g.slice_last(probs, target_class, 1)?;
    let prod = g.mul(obj, target)?;
    let flat = g.reshape(prod, &[s[0], s[1] * s[2]])?;
    Ok(g.max(flat, &[1])?)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Every cell's decoded box with its objectness and class distribution,
/// before thresholding and suppression. The box class is the arg-max class.
pub fn decode_candidates(raw: &Tensor, anchor: (f64, f64)) -> Result<Vec<Vec<Detection>>> {
    let s = raw.shape();
    if s.len() != 4 || s[1] != s[2] || s[3] <= BOX_TERMS + 1 {
        return Err(Error::InvalidArgument(format!("raw predictions of shape {s:?}")));
    }
    let (n, grid, per) = (s[0], s[1], s[3]);
    let mut out = Vec::with_capacity(n);
    for img in raw.data().chunks(grid * grid * per) {
        let mut dets = Vec::with_capacity(grid * grid);
        for (cell, v) in img.chunks(per).enumerate() {
            let (gy, gx) = (cell / grid, cell % grid);
            let cx = (gx as f64 + sigmoid(v[0])) / grid as f64;
            let cy = (gy as f64 + sigmoid(v[1])) / grid as f64;
            let w = anchor.0 * v[2].clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp();
            let h = anchor.1 * v[3].clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp();
            let class_probs = softmax(&v[BOX_TERMS + 1..]);
            let class_id = class_probs
                .iter()
                .enumerate()
                .fold(0, |best, (i, p)| if *p > class_probs[best] { i } else { best });
            dets.push(Detection {
                bbox: BoundingBox::new(cx, cy, w.min(1.0), h.min(1.0), class_id),
                objectness: sigmoid(v[BOX_TERMS]),
                class_probs,
            });
        }
        out.push(dets);
    }
    debug_assert_eq!(out.len(), n);
    Ok(out)
}

/// Thresholds candidates on `objectness · P(class)` and runs greedy
/// per-class non-maximum suppression in order of descending score.
pub fn decode(raw: &Tensor, anchor: (f64, f64), conf_threshold: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    for (name, v) in [("confidence threshold", conf_threshold), ("NMS IoU", nms_iou)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::InvalidArgument(format!("{name} {v} must lie in (0, 1)")));
        }
    }
    Ok(decode_candidates(raw, anchor)?
        .into_iter()
        .map(|cands| {
            let kept: Vec<Detection> = cands.into_iter().filter(|d| d.score() >= conf_threshold).collect();
            nms(kept, nms_iou)
        })
        .collect())
}

/// Greedy non-maximum suppression within each class. Equal scores keep
/// their original order.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score().total_cmp(&a.score()));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.bbox.class_id == d.bbox.class_id && crate::eval::iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
