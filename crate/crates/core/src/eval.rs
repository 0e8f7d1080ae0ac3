//! IoU, average precision against clean detections, attack success rate and
//! ablation sweeps.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{Detection, Detector, GridDetector, Scene, Split, PERSON};
use crate::error::{Error, Result};
use crate::imaging::{ssim, ImageRGB};
use crate::losses::SimMetric;
use crate::optimize::{craft_patch, CraftConfig};
use crate::patchops::{composite, sample_transform, BoundingBox, EotConfig, InitMode, PatchCanvas, TransformParams};

pub const MATCH_IOU: f64 = 0.5;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // Areas from the same corners as the intersection, so identical boxes give exactly 1.
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// Percent.
    pub ap: f64,
    pub points: Vec<PrPoint>,
}

/// Scored candidate boxes for one image.
pub type Scored = Vec<(BoundingBox, f64)>;

/// All-point interpolated average precision, in percent.
///
/// Candidates from every image are visited in order of descending score
/// (ties keep image order, then list order). Each one takes the truth in its
/// image with the highest IoU; it is a true positive if that IoU is at least
/// `iou_threshold` and the truth is still unclaimed. With no truths the
/// result is 100 when there are also no candidates and 0 otherwise.
pub fn average_precision(truths: &[Vec<BoundingBox>], candidates: &[Scored], iou_threshold: f64) -> Result<ApResult> {
    if truths.len() != candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} truth lists for {} candidate lists",
            truths.len(),
            candidates.len()
        )));
    }
    let n_truth: usize = truths.iter().map(Vec::len).sum();
    let mut order: Vec<(usize, usize)> = candidates
        .iter()
        .enumerate()
        .flat_map(|(i, c)| (0..c.len()).map(move |j| (i, j)))
        .collect();
    if n_truth == 0 {
        let ap = if order.is_empty() { 100.0 } else { 0.0 };
        return Ok(ApResult { ap, points: Vec::new() });
    }
    order.sort_by(|a, b| candidates[b.0][b.1].1.total_cmp(&candidates[a.0][a.1].1));

    let mut claimed: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(order.len());
    for (i, j) in order {
        let cand = &candidates[i][j].0;
        let best = truths[i]
            .iter()
            .enumerate()
            .map(|(k, t)| (k, iou(cand, t)))
            .fold(None, |acc: Option<(usize, f64)>, (k, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((k, v)),
            });
        match best {
            Some((k, v)) if v >= iou_threshold && !claimed[i][k] => {
                claimed[i][k] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        points.push(PrPoint {
            recall: tp as f64 / n_truth as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(ApResult {
        ap: 100.0 * interpolated_area(&points),
        points,
    })
}

/// Area under the monotone precision envelope.
fn interpolated_area(points: &[PrPoint]) -> f64 {
    let mut rec = vec![0.0];
    let mut pre = vec![0.0];
    for p in points {
        rec.push(p.recall);
        pre.push(p.precision);
    }
    rec.push(1.0);
    pre.push(0.0);
    for i in (0..pre.len() - 1).rev() {
        pre[i] = pre[i].max(pre[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * pre[i])
        .sum()
}

/// Percentage of truths not overlapped (IoU ≥ 0.5) by any candidate.
pub fn attack_success_rate(truths: &[Vec<BoundingBox>], candidates: &[Vec<BoundingBox>]) -> f64 {
    let total: usize = truths.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let found: usize = truths
        .iter()
        .zip(candidates)
        .map(|(ts, cs)| ts.iter().filter(|t| cs.iter().any(|c| iou(t, c) >= MATCH_IOU)).count())
        .sum();
    100.0 * (1.0 - found as f64 / total as f64)
}

/// How the patch is put onto evaluation scenes.
#[derive(Debug, Clone)]
pub struct PatchSpec<'a> {
    pub patch: &'a PatchCanvas,
    pub ratio: f64,
    /// Optional eval-time transformations and their seed. `None` places the
    /// patch with identity parameters.
    pub eot: Option<(EotConfig, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Percent in `[0, 100]`.
    pub map: f64,
    pub pr_points: Vec<PrPoint>,
    pub asr: f64,
    pub truths_per_scene: Vec<usize>,
    pub detections_per_scene: Vec<usize>,
    pub ssim: Option<f64>,
}

fn class_boxes(dets: &[Detection], class_id: usize) -> Vec<BoundingBox> {
    dets.iter().filter(|d| d.bbox.class_id == class_id).map(|d| d.bbox).collect()
}

fn class_scored(dets: &[Detection], class_id: usize) -> Scored {
    dets.iter()
        .filter(|d| d.bbox.class_id == class_id)
        .map(|d| (d.bbox, d.score()))
        .collect()
}

/// Draws the eval-time transforms for one scene.
fn scene_transforms(eot: Option<&(EotConfig, u64)>, scene_index: usize, n: usize) -> Vec<TransformParams> {
    match eot {
        None => vec![TransformParams::IDENTITY; n],
        Some((cfg, seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(scene_index as u64);
            (0..n).map(|_| sample_transform(&mut rng, cfg)).collect()
        }
    }
}

/// Composites the patch onto every scene at the given boxes.
pub fn patched_images(images: &[ImageRGB], boxes: &[Vec<BoundingBox>], spec: &PatchSpec) -> Result<Vec<ImageRGB>> {
    images
        .iter()
        .zip(boxes)
        .enumerate()
        .map(|(i, (img, bs))| {
            let transforms = scene_transforms(spec.eot.as_ref(), i, bs.len());
            composite(img, spec.patch.pixels(), bs, &transforms, spec.ratio)
        })
        .collect()
}

/// mAP of the person class with the detector's own clean detections as
/// ground truth. The patch (if any) is placed on those ground-truth boxes.
pub fn map_eval(detector: &dyn Detector, scenes: &[Scene], patch: Option<&PatchSpec>) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one scene".into()));
    }
    let clean_images: Vec<ImageRGB> = scenes.iter().map(|s| s.image.clone()).collect();
    let clean = detector.detect(&clean_images)?;
    let truths: Vec<Vec<BoundingBox>> = clean.iter().map(|d| class_boxes(d, PERSON)).collect();
    if truths.iter().all(Vec::is_empty) {
        return Err(Error::Consistency(
            "the detector finds no person in any clean scene, so clean mAP is not 100".into(),
        ));
    }
    let self_ap = average_precision(&truths, &clean.iter().map(|d| class_scored(d, PERSON)).collect::<Vec<_>>(), MATCH_IOU)?;
    if self_ap.ap != 100.0 {
        return Err(Error::Consistency(format!(
            "clean detections score {:.4}% mAP against themselves",
            self_ap.ap
        )));
    }
    let (candidates, ssim_value) = match patch {
        None => (clean, None),
        Some(spec) => {
            let imgs = patched_images(&clean_images, &truths, spec)?;
            let s = match spec.patch.target_image() {
                Some(t) => Some(ssim(&spec.patch.to_image(), &t)?),
                None => None,
            };
            (detector.detect(&imgs)?, s)
        }
    };
    let scored: Vec<Scored> = candidates.iter().map(|d| class_scored(d, PERSON)).collect();
    let ap = average_precision(&truths, &scored, MATCH_IOU)?;
    let cand_boxes: Vec<Vec<BoundingBox>> = candidates.iter().map(|d| class_boxes(d, PERSON)).collect();
    Ok(EvalReport {
        map: ap.ap,
        pr_points: ap.points,
        asr: attack_success_rate(&truths, &cand_boxes),
        truths_per_scene: truths.iter().map(Vec::len).collect(),
        detections_per_scene: cand_boxes.iter().map(Vec::len).collect(),
        ssim: ssim_value,
    })
}

/// ASR under the same protocol as [`map_eval`].
pub fn asr(detector: &dyn Detector, scenes: &[Scene], patch: &PatchSpec) -> Result<f64> {
    Ok(map_eval(detector, scenes, Some(patch))?.asr)
}

impl EvalReport {
    /// Versioned `key=value` lines.
    pub fn summary(&self) -> String {
        let mut s = String::from("advart-eval-summary v1\n");
        let _ = writeln!(s, "map={:.6}", self.map);
        let _ = writeln!(s, "asr={:.6}", self.asr);
        let _ = writeln!(s, "scenes={}", self.truths_per_scene.len());
        let _ = writeln!(s, "truths={}", self.truths_per_scene.iter().sum::<usize>());
        let _ = writeln!(s, "detections={}", self.detections_per_scene.iter().sum::<usize>());
        match self.ssim {
            Some(v) => {
                let _ = writeln!(s, "ssim={v:.6}");
            }
            None => s.push_str("ssim=\n"),
        }
        s
    }
}

/// Axes of an ablation grid. The cells are the Cartesian product, so any
/// empty axis gives an empty table.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub ratios: Vec<f64>,
    pub metrics: Vec<SimMetric>,
    pub betas: Vec<f64>,
    pub eots: Vec<EotConfig>,
    /// Named target artworks.
    pub artworks: Vec<(String, ImageRGB)>,
    /// Eval-time transformations and their seed, applied to every cell.
    pub eval_eot: Option<(EotConfig, u64)>,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub ratio: f64,
    pub metric: SimMetric,
    pub beta: f64,
    pub eot: EotConfig,
    pub artwork: String,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub report: EvalReport,
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<(SweepCell, &ImageRGB)> {
        let mut out = Vec::new();
        for &ratio in &self.ratios {
            for &metric in &self.metrics {
                for &beta in &self.betas {
                    for eot in &self.eots {
                        for (name, art) in &self.artworks {
                            let cell = SweepCell {
                                ratio,
                                metric,
                                beta,
                                eot: *eot,
                                artwork: name.clone(),
                            };
                            out.push((cell, art));
                        }
                    }
                }
            }
        }
        out
    }
}

/// One seeded crafting run and evaluation per grid cell. `base` supplies
/// everything the grid does not vary. Evaluation uses the val split, or
/// every scene when there is none.
pub fn sweep(
    model: &GridDetector,
    dataset: &[Scene],
    base: &CraftConfig,
    patch_size: usize,
    init: InitMode,
    grid: &SweepGrid,
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    let mut eval_scenes: Vec<Scene> = dataset.iter().filter(|s| s.split == Split::Val).cloned().collect();
    if eval_scenes.is_empty() {
        eval_scenes = dataset.to_vec();
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, art) in cells {
        let mut cfg = base.clone();
        cfg.ratio = cell.ratio;
        cfg.weights.sim_metric = cell.metric;
        cfg.weights.beta = cell.beta;
        cfg.eot = cell.eot;
        let canvas = PatchCanvas::init(Some(art), patch_size, init)?;
        let run = craft_patch(model, dataset, canvas, &cfg)?;
        let spec = PatchSpec {
            patch: &run.patch,
            ratio: cell.ratio,
            eot: grid.eval_eot,
        };
        let report = map_eval(model, &eval_scenes, Some(&spec))?;
        rows.push(SweepRow { cell, report });
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "ratio,metric,beta,eot,artwork,eval_eot,map,asr,ssim";

/// One CSV row per cell: the varied settings, then map, asr and ssim.
pub fn sweep_csv(rows: &[SweepRow], eval_eot: Option<&EotConfig>) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    let eval_name = eval_eot.map_or_else(|| "none".to_string(), EotConfig::subset_name);
    for r in rows {
        let c = &r.cell;
        let ssim = r.report.ssim.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.ratio,
            c.metric,
            c.beta,
            c.eot.subset_name(),
            c.artwork,
            eval_name,
            r.report.map,
            r.report.asr,
            ssim
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h, 0)
    }

    #[test]
    fn iou_examples() {
        let a = b(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(0.1, 0.1, 0.1, 0.1)), 0.0);
        let u = b(0.5, 0.5, 0.25, 0.25);
        let v = b(0.625, 0.5, 0.25, 0.25);
        assert!((iou(&u, &v) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn halved_scores_keep_full_ap() {
        let truths = vec![vec![b(0.3, 0.3, 0.2, 0.4), b(0.7, 0.5, 0.2, 0.4)], vec![b(0.5, 0.5, 0.3, 0.3)]];
        let cands: Vec<Scored> = truths
            .iter()
            .enumerate()
            .map(|(i, ts)| ts.iter().enumerate().map(|(j, t)| (*t, 0.5 * (0.9 - 0.1 * (i + j) as f64))).collect())
            .collect();
        let r = average_precision(&truths, &cands, 0.5).unwrap();
        assert_eq!(r.ap, 100.0);
    }

    #[test]
    fn silence_means_zero_ap_and_full_asr() {
        let truths = vec![vec![b(0.5, 0.5, 0.2, 0.4)]];
        let r = average_precision(&truths, &[vec![]], 0.5).unwrap();
        assert_eq!(r.ap, 0.0);
        assert_eq!(attack_success_rate(&truths, &[vec![]]), 100.0);
    }

    #[test]
    fn seven_of_twenty_five() {
        let truths: Vec<Vec<BoundingBox>> = (0..25).map(|i| vec![b(0.5, 0.5, 0.1 + 0.01 * i as f64, 0.3)]).collect();
        let cands: Vec<Vec<BoundingBox>> = truths
            .iter()
            .enumerate()
            .map(|(i, t)| if i < 7 { t.clone() } else { vec![] })
            .collect();
        assert!((attack_success_rate(&truths, &cands) - 72.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let t = b(0.5, 0.5, 0.2, 0.4);
        let r = average_precision(&[vec![t]], &[vec![(t, 0.9), (t, 0.8)]], 0.5).unwrap();
        assert_eq!(r.points[1], PrPoint { recall: 1.0, precision: 0.5 });
        assert_eq!(r.ap, 100.0);
    }

    #[test]
    fn summary_is_versioned() {
        let r = EvalReport {
            map: 100.0,
            pr_points: vec![],
            asr: 0.0,
            truths_per_scene: vec![1, 2],
            detections_per_scene: vec![1, 2],
            ssim: None,
        };
        let s = r.summary();
        assert!(s.starts_with("advart-eval-summary v1\n"));
        assert!(s.contains("truths=3\n"));
    }

    #[test]
    fn empty_grid_gives_empty_table() {
        let grid = SweepGrid {
            ratios: vec![],
            metrics: vec![SimMetric::Cosine],
            betas: vec![8.0],
            eots: vec![EotConfig::full()],
            artworks: vec![("flat".into(), ImageRGB::filled(16, 16, [0.5; 3]))],
            eval_eot: None,
        };
        assert!(grid.cells().is_empty());
        let model = GridDetector::new_random(Default::default(), 0).unwrap();
        let rows = sweep(&model, &[], &CraftConfig::default(), 16, InitMode::FromTarget, &grid).unwrap();
        assert!(rows.is_empty());
        assert_eq!(sweep_csv(&rows, None), format!("{SWEEP_HEADER}\n"));
    }
}
