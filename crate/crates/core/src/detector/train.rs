//! Supervised training of the grid detector on annotated scenes.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{images_to_batch, split_scenes, BoundDetector, Detector, DetectorConfig, GridDetector, Scene, Split, PERSON};
use crate::error::{Error, Result};
use crate::eval::{average_precision, Scored, MATCH_IOU};
use crate::imaging::ImageRGB;
use crate::optimize::AdamState;
use crate::patchops::BoundingBox;
use crate::tensorgrad::{sigmoid, Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub detector: DetectorConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation mAP (percent) the best epoch must reach.
    pub required_map: f64,
    /// Random horizontal flips and shifts.
    pub augment: bool,
    /// Channel permutations and inversions on top of flips and shifts.
    pub photometric: bool,
    /// Largest shift, as a fraction of the image side.
    pub max_shift: f64,
    pub positive_weight: f64,
    pub negative_weight: f64,
    pub box_weight: f64,
    pub class_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            epochs: 60,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
            required_map: 90.0,
            augment: true,
            photometric: false,
            max_shift: 0.15,
            positive_weight: 5.0,
            negative_weight: 1.0,
            box_weight: 5.0,
            class_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_map: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochStats>,
}

impl TrainingCurve {
    pub fn best(&self) -> Option<&EpochStats> {
        self.epochs.iter().fold(None, |best, e| match best {
            Some(b) if b.val_map >= e.val_map => Some(b),
            _ => Some(e),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_map\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_map);
        }
        s
    }
}

/// Per-cell regression targets of one image.
struct CellTarget {
    cell: usize,
    tx: f64,
    ty: f64,
    tw: f64,
    th: f64,
    class_id: usize,
}

fn targets(boxes: &[BoundingBox], grid: usize, anchor: (f64, f64)) -> Vec<CellTarget> {
    let mut out: Vec<CellTarget> = Vec::new();
    for b in boxes {
        let gx = ((b.cx * grid as f64).floor() as usize).min(grid - 1);
        let gy = ((b.cy * grid as f64).floor() as usize).min(grid - 1);
        let t = CellTarget {
            cell: gy * grid + gx,
            tx: b.cx * grid as f64 - gx as f64,
            ty: b.cy * grid as f64 - gy as f64,
            tw: (b.w / anchor.0).ln(),
            th: (b.h / anchor.1).ln(),
            class_id: b.class_id,
        };
        // A later box claiming the same cell replaces the earlier one.
        out.retain(|o| o.cell != t.cell);
        out.push(t);
    }
    out
}

/// Loss of raw predictions `N × G × G × (5 + C)` and its gradient, both
/// averaged over the batch.
fn loss_and_grad(raw: &Tensor, boxes: &[Vec<BoundingBox>], cfg: &TrainConfig) -> (f64, Tensor) {
    let s = raw.shape();
    let (n, grid, per) = (s[0], s[1], s[3]);
    let classes = per - 5;
    let mut grad = vec![0.0; raw.numel()];
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (img, bs) in boxes.iter().enumerate() {
        let base = img * grid * grid * per;
        let ts = targets(bs, grid, cfg.detector.anchor);
        for cell in 0..grid * grid {
            let o = base + cell * per;
            let p = sigmoid(raw.data()[o + 4]);
            let positive = ts.iter().any(|t| t.cell == cell);
            let (t, w) = if positive {
                (1.0, cfg.positive_weight)
            } else {
                (0.0, cfg.negative_weight)
            };
            let pc = p.clamp(1e-12, 1.0 - 1e-12);
            loss += -w * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln()) * inv_n;
            grad[o + 4] += w * (p - t) * inv_n;
        }
        for t in &ts {
            let o = base + t.cell * per;
            let v = &raw.data()[o..o + per];
            let bw = cfg.box_weight;
            for (k, target) in [(0, t.tx), (1, t.ty)] {
                let sv = sigmoid(v[k]);
                loss += bw * (sv - target).powi(2) * inv_n;
                grad[o + k] += bw * 2.0 * (sv - target) * sv * (1.0 - sv) * inv_n;
            }
            for (k, target) in [(2, t.tw), (3, t.th)] {
                loss += bw * (v[k] - target).powi(2) * inv_n;
                grad[o + k] += bw * 2.0 * (v[k] - target) * inv_n;
            }
            let logits = &v[5..];
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..classes {
                let q = (logits[c] - m).exp() / z;
                let y = if c == t.class_id { 1.0 } else { 0.0 };
                if y == 1.0 {
                    loss += -cfg.class_weight * q.max(1e-300).ln() * inv_n;
                }
                grad[o + 5 + c] += cfg.class_weight * (q - y) * inv_n;
            }
        }
    }
    (loss, Tensor::new(s.to_vec(), grad).expect("gradient matches raw shape"))
}

/// One random label-preserving variant of a scene.
fn augment<R: Rng>(rng: &mut R, img: &ImageRGB, boxes: &[BoundingBox], max_shift: f64, photometric: bool) -> (ImageRGB, Vec<BoundingBox>) {
    let (h, w) = (img.height(), img.width());
    let flip = rng.gen_bool(0.5);
    let invert = rng.gen_bool(0.5) && photometric;
    let mut perm = [0usize, 1, 2];
    perm.shuffle(rng);
    if !photometric {
        perm = [0, 1, 2];
    }
    let max_dx = (max_shift * w as f64).round() as i64;
    let max_dy = (max_shift * h as f64).round() as i64;
    let dx = rng.gen_range(-max_dx..=max_dx);
    let dy = rng.gen_range(-max_dy..=max_dy);
    let out = ImageRGB::from_fn(h, w, |y, x| {
        // Edge-replicated shift, then optional mirror.
        let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
        let sx = if flip { w - 1 - sx } else { sx };
        let p = img.pixel(sy, sx);
        let c = [p[perm[0]], p[perm[1]], p[perm[2]]];
        if invert {
            c.map(|v| 1.0 - v)
        } else {
            c
        }
    });
    let (fx, fy) = (dx as f64 / w as f64, dy as f64 / h as f64);
    let moved = boxes
        .iter()
        .filter_map(|b| {
            let cx = if flip { 1.0 - b.cx } else { b.cx } + fx;
            let (x0, y0) = ((cx - b.w / 2.0).max(0.0), (b.cy + fy - b.h / 2.0).max(0.0));
            let (x1, y1) = ((cx + b.w / 2.0).min(1.0), (b.cy + fy + b.h / 2.0).min(1.0));
            let visible = (x1 - x0).max(0.0) * (y1 - y0).max(0.0);
            (visible >= 0.6 * b.area())
                .then(|| BoundingBox::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0, b.class_id))
        })
        .collect();
    (out, moved)
}

/// Person-class AP (percent) of `model` against annotated boxes.
pub(crate) fn annotated_map(model: &GridDetector, scenes: &[&Scene]) -> Result<f64> {
    let images: Vec<ImageRGB> = scenes.iter().map(|s| s.image.clone()).collect();
    let dets = model.detect(&images)?;
    let truths: Vec<Vec<BoundingBox>> = scenes
        .iter()
        .map(|s| s.target_boxes(PERSON).copied().collect())
        .collect();
    let cands: Vec<Scored> = dets
        .iter()
        .map(|d| {
            d.iter()
                .filter(|x| x.bbox.class_id == PERSON)
                .map(|x| (x.bbox, x.score()))
                .collect()
        })
        .collect();
    Ok(average_precision(&truths, &cands, MATCH_IOU)?.ap)
}

fn apply_step(model: &mut GridDetector, bound: &BoundDetector, grads: &crate::tensorgrad::Gradients, adam: &mut [(AdamState, AdamState)]) -> Result<()> {
    for ((layer, &(wv, bv)), (aw, ab)) in model.layers_mut().iter_mut().zip(&bound.params).zip(adam.iter_mut()) {
        let gw = grads.get(wv).expect("weights are gradient leaves");
        let gb = grads.get(bv).expect("biases are gradient leaves");
        aw.update(layer.weight.data_mut(), gw.data())?;
        ab.update(layer.bias.data_mut(), gb.data())?;
    }
    Ok(())
}

/// Trains on the train split and keeps the weights of the epoch with the
/// best validation mAP. Fails if that mAP is below `required_map`.
pub fn train_toy_detector(dataset: &[Scene], cfg: &TrainConfig) -> Result<(GridDetector, TrainingCurve)> {
    let train = split_scenes(dataset, Split::Train);
    let val = split_scenes(dataset, Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training needs both splits, got {} train and {} val scenes",
            train.len(),
            val.len()
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("epochs, batch size and lr must be positive".into()));
    }
    let size = cfg.detector.input_size;
    let mut model = GridDetector::new_random(cfg.detector.clone(), cfg.seed)?;
    let mut adam: Vec<(AdamState, AdamState)> = model
        .layers()
        .iter()
        .map(|l| (AdamState::new(l.weight.numel(), cfg.lr), AdamState::new(l.bias.numel(), cfg.lr)))
        .collect();
    let images: Vec<ImageRGB> = train.iter().map(|s| s.image.resize(size, size)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut curve = TrainingCurve::default();
    let mut best: Option<(f64, GridDetector)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        // Cosine decay to a tenth of the base rate.
        let progress = epoch as f64 / cfg.epochs as f64;
        let lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        for (aw, ab) in &mut adam {
            aw.lr = lr;
            ab.lr = lr;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_imgs = Vec::with_capacity(chunk.len());
            let mut batch_boxes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if cfg.augment {
                    let (img, bs) = augment(&mut rng, &images[i], &train[i].boxes, cfg.max_shift, cfg.photometric);
                    batch_imgs.push(img);
                    batch_boxes.push(bs);
                } else {
                    batch_imgs.push(images[i].clone());
                    batch_boxes.push(train[i].boxes.clone());
                }
            }
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = images_to_batch(&mut g, &batch_imgs, size)?;
            let raw = model.forward(&mut g, &bound, x)?;
            let (loss, draw) = loss_and_grad(g.value(raw), &batch_boxes, cfg);
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient { iteration: epoch });
            }
            // d(sum(raw ⊙ G))/dθ routes the analytic gradient G through the net.
            let gconst = g.constant(draw);
            let prod = g.mul(raw, gconst)?;
            let surrogate = g.sum_all(prod)?;
            let grads = g.backward(surrogate)?;
            apply_step(&mut model, &bound, &grads, &mut adam)?;
            epoch_loss += loss;
            batches += 1;
        }
        let val_map = annotated_map(&model, &val)?;
        curve.epochs.push(EpochStats {
            epoch,
            lr,
            train_loss: epoch_loss / batches as f64,
            val_map,
        });
        if best.as_ref().map_or(true, |(m, _)| val_map > *m) {
            best = Some((val_map, model.clone()));
        }
    }
    let (best_map, best_model) = best.expect("at least one epoch ran");
    if best_map < cfg.required_map {
        return Err(Error::TrainingFailed {
            best_map,
            required: cfg.required_map,
            curve,
        });
    }
    Ok((best_model, curve))
}
