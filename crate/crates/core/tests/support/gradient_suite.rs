//! Seeded finite-difference checks of every differentiable op and of the
//! whole crafting objective. Shared by the core tests and the acceptance run.

use advart::detector::{extract_attack_scores, DetectorConfig, GridDetector};
use advart::losses::{detection_loss, similarity, total_loss, tv_loss, LossWeights, SimMetric};
use advart::patchops::{apply_patch, color_jitter, patch_scene, place_patch, BoundingBox, TransformParams};
use advart::tensorgrad::{Affine2, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Components below this magnitude are compared against it instead of
/// themselves, so exact zeros do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> advart::Result<Var>>;

pub struct Instance {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values in `[lo, hi]` kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(gap..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A `c × h × w` patch whose horizontal and vertical neighbours differ by
/// at least 0.01. Central differences with h = 1e-4 cannot resolve TV's
/// ε-smoothed kink when a neighbour difference is itself near h.
fn separated(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let at = (ch * h + i) * w + j;
                loop {
                    let v = rng.gen_range(lo..hi);
                    let up = i > 0 && (v - data[at - w]).abs() < 0.01;
                    let left = j > 0 && (v - data[at - 1]).abs() < 0.01;
                    if !(up || left) {
                        data[at] = v;
                        break;
                    }
                }
            }
        }
    }
    Tensor::new([c, h, w], data).expect("sized above")
}

/// Reduces any output to a scalar through fixed random weights.
fn weighted(g: &mut Graph, out: Var, seed: u64) -> advart::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = uniform(&mut rng, g.shape(out), -1.0, 1.0);
    let wv = g.constant(w);
    let p = g.mul(out, wv)?;
    Ok(g.sum_all(p)?)
}

fn inst(name: impl Into<String>, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> advart::Result<Var> + 'static) -> Instance {
    Instance {
        name: name.into(),
        inputs,
        build: Box::new(build),
    }
}

fn eval(inst: &Instance, inputs: &[Tensor]) -> advart::Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = (inst.build)(&mut g, &vars)?;
    let value = g.value(root).item().expect("instances build scalars");
    let grads = g.backward(root)?;
    let gs = vars
        .iter()
        .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec())))
        .collect();
    Ok((value, gs))
}

fn value_at(inst: &Instance, inputs: &[Tensor]) -> advart::Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let root = (inst.build)(&mut g, &vars)?;
    Ok(g.value(root).item().expect("instances build scalars"))
}

/// Central differences against the analytic gradient of every input element.
pub fn check(inst: &Instance) -> advart::Result<Outcome> {
    let (_, analytic) = eval(inst, &inst.inputs)?;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inst.inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inst.inputs.clone();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inst.inputs.clone();
            minus[k].data_mut()[i] -= FD_STEP;
            let fd = (value_at(inst, &plus)? - value_at(inst, &minus)?) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(Outcome {
        name: inst.name.clone(),
        max_rel,
        checked,
    })
}

fn small_detector(seed: u64) -> GridDetector {
    let cfg = DetectorConfig {
        input_size: 32,
        channels: vec![4, 6],
        kernels: vec![3, 3, 3],
        ..DetectorConfig::default()
    };
    GridDetector::new_random(cfg, seed).expect("valid config")
}

/// The objective of one crafting iteration with respect to a 6×6 patch:
/// placement, jitter and compositing on two scenes, the detector, attack
/// scores, detection, similarity and TV losses and their weighted sum.
fn pipeline(seed: u64, metric: SimMetric) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = separated(&mut rng, 3, 6, 6, 0.2, 0.8);
    let target = uniform(&mut rng, &[3, 6, 6], 0.1, 0.9);
    let scenes: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[3, 32, 32], 0.0, 1.0)).collect();
    let boxes = [
        vec![BoundingBox::new(0.35, 0.5, 0.3, 0.6, 0), BoundingBox::new(0.75, 0.4, 0.3, 0.5, 0)],
        vec![BoundingBox::new(0.5, 0.55, 0.35, 0.7, 0)],
    ];
    let transforms: Vec<Vec<TransformParams>> = boxes
        .iter()
        .map(|bs| {
            bs.iter()
                .map(|_| TransformParams {
                    scale_jitter: rng.gen_range(0.8..1.2),
                    angle_deg: rng.gen_range(-20.0..20.0),
                    noise_seed: rng.gen(),
                    noise_amplitude: 0.05,
                    contrast: rng.gen_range(0.9..1.1),
                    brightness: rng.gen_range(-0.05..0.05),
                    anchor_offset: (0.0, 0.0),
                })
                .collect()
        })
        .collect();
    let model = small_detector(seed);
    inst(format!("crafting objective ({metric}, seed {seed})"), vec![patch], move |g, v| {
        let bound = model.bind(g, false);
        let mut imgs = Vec::new();
        for ((scene, bs), ts) in scenes.iter().zip(&boxes).zip(&transforms) {
            let img = g.constant(scene.clone());
            imgs.push(patch_scene(g, img, v[0], bs, ts, 0.5, 0)?);
        }
        let batch = g.stack(&imgs)?;
        let raw = model.forward(g, &bound, batch)?;
        let scores = extract_attack_scores(g, raw, 0)?;
        let det = detection_loss(g, scores)?;
        let n = g.constant(target.clone());
        let sim = similarity(g, metric, v[0], n)?;
        let tv = tv_loss(g, v[0])?;
        let weights = LossWeights {
            sim_metric: metric,
            ..LossWeights::default()
        };
        Ok(total_loss(g, det, Some(sim), tv, &weights)?.0)
    })
}

/// Every instance of the suite; at least two per op.
pub fn instances() -> Vec<Instance> {
    let mut out = Vec::new();
    for seed in 0..2u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = seed;
        let a = uniform(&mut rng, &[3, 4], -2.0, 2.0);
        let b = uniform(&mut rng, &[3, 4], -2.0, 2.0);
        let pos = uniform(&mut rng, &[3, 4], 0.2, 2.0);
        let nz = away_from_zero(&mut rng, &[3, 4], 0.05);

        out.push(inst(format!("scale/{s}"), vec![a.clone()], move |g, v| {
            let y = g.scale(v[0], -1.7)?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("offset/{s}"), vec![a.clone()], move |g, v| {
            let y = g.offset(v[0], 0.3)?;
            let y = g.square(y)?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("sqrt/{s}"), vec![pos.clone()], move |g, v| {
            let y = g.sqrt(v[0])?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("square/{s}"), vec![a.clone()], move |g, v| {
            let y = g.square(v[0])?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("sigmoid/{s}"), vec![a.clone()], move |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("leaky_relu/{s}"), vec![nz.clone()], move |g, v| {
            let y = g.leaky_relu(v[0], 0.1)?;
            weighted(g, y, s)
        }));
        let inside = uniform(&mut rng, &[3, 4], 0.1, 0.9);
        let outside = Tensor::from_fn([3, 4], |i| if i % 2 == 0 { -0.5 - 0.1 * i as f64 } else { 1.5 + 0.1 * i as f64 });
        out.push(inst(format!("clamp/{s}"), vec![inside, outside], move |g, v| {
            let y = g.clamp(v[0], 0.0, 1.0)?;
            let z = g.clamp(v[1], 0.0, 1.0)?;
            let t = g.add(y, z)?;
            weighted(g, t, s)
        }));
        for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
            let rhs = if op == 3 { nz.clone() } else { b.clone() };
            out.push(inst(format!("{name}/{s}"), vec![a.clone(), rhs], move |g, v| {
                let y = match op {
                    0 => g.add(v[0], v[1])?,
                    1 => g.sub(v[0], v[1])?,
                    2 => g.mul(v[0], v[1])?,
                    _ => g.div(v[0], v[1])?,
                };
                weighted(g, y, s)
            }));
        }
        let scalar = Tensor::scalar(rng.gen_range(0.5..1.5));
        out.push(inst(format!("scalar broadcast/{s}"), vec![a.clone(), scalar], move |g, v| {
            let y = g.mul(v[0], v[1])?;
            let z = g.div(y, v[1])?;
            let w = g.mul(z, v[1])?;
            weighted(g, w, s)
        }));
        let cube = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
        out.push(inst(format!("sum/{s}"), vec![cube.clone()], move |g, v| {
            let y = g.sum(v[0], &[1])?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("mean/{s}"), vec![cube.clone()], move |g, v| {
            let y = g.mean(v[0], &[0, 2])?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("sum_all and mean_all/{s}"), vec![cube.clone()], move |g, v| {
            let y = g.square(v[0])?;
            let a = g.sum_all(y)?;
            let b = g.mean_all(v[0])?;
            Ok(g.add(a, b)?)
        }));
        // Distinct values a clear margin apart keep the argmax stable.
        let spread = Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.37 + seed as f64 * 0.11).sin() * 2.0 + i as f64 * 0.01);
        out.push(inst(format!("max/{s}"), vec![spread], move |g, v| {
            let y = g.max(v[0], &[2])?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("reshape/{s}"), vec![cube.clone()], move |g, v| {
            let y = g.reshape(v[0], &[4, 6])?;
            let y = g.square(y)?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("permute/{s}"), vec![cube.clone()], move |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("stack/{s}"), vec![a.clone(), b.clone()], move |g, v| {
            let y = g.stack(&[v[0], v[1], v[0]])?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("slice_last/{s}"), vec![cube.clone()], move |g, v| {
            let y = g.slice_last(v[0], 1, 2)?;
            weighted(g, y, s)
        }));
        out.push(inst(format!("softmax_last/{s}"), vec![cube.clone()], move |g, v| {
            let y = g.softmax_last(v[0])?;
            weighted(g, y, s)
        }));
        let img = uniform(&mut rng, &[2, 5, 6], 0.0, 1.0);
        out.push(inst(format!("spatial_diff/{s}"), vec![img.clone()], move |g, v| {
            let r = g.spatial_diff(v[0], 0)?;
            let c = g.spatial_diff(v[0], 1)?;
            let y = g.mul(r, c)?;
            weighted(g, y, s)
        }));
        let x = uniform(&mut rng, &[2, 2, 7, 7], -1.0, 1.0);
        let k = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let bias = uniform(&mut rng, &[3], -1.0, 1.0);
        let stride = 1 + seed as usize;
        out.push(inst(format!("conv2d stride {stride}/{s}"), vec![x, k, bias], move |g, v| {
            let y = g.conv2d(v[0], v[1], stride, 1)?;
            let y = g.channel_bias(y, v[2])?;
            weighted(g, y, s)
        }));
        let src = uniform(&mut rng, &[3, 6, 6], 0.0, 1.0);
        let angle = rng.gen_range(-20.0..20.0);
        out.push(inst(format!("bilinear_warp/{s}"), vec![src], move |g, v| {
            let aff = Affine2::translation(-3.0, -3.0)
                .then_after(&Affine2::rotation_deg(angle))
                .then_after(&Affine2::scaling(1.4))
                .then_after(&Affine2::translation(7.3, 6.6));
            let y = g.bilinear_warp(v[0], &aff, (14, 15))?;
            weighted(g, y, s)
        }));

        // Loss terms and compositing.
        let scores = uniform(&mut rng, &[4], 0.0, 1.0);
        out.push(inst(format!("detection_loss/{s}"), vec![scores], |g, v| Ok(detection_loss(g, v[0])?)));
        let p = separated(&mut rng, 3, 6, 6, 0.05, 0.95);
        let n = uniform(&mut rng, &[3, 6, 6], 0.05, 0.95);
        for metric in [SimMetric::Mse, SimMetric::Cosine] {
            let nn = n.clone();
            out.push(inst(format!("similarity {metric}/{s}"), vec![p.clone()], move |g, v| {
                let t = g.constant(nn.clone());
                Ok(similarity(g, metric, v[0], t)?)
            }));
        }
        out.push(inst(format!("tv_loss/{s}"), vec![p.clone()], |g, v| Ok(tv_loss(g, v[0])?)));
        let bbox = BoundingBox::new(0.45, 0.5, 0.4, 0.7, 0);
        let params = TransformParams {
            scale_jitter: rng.gen_range(0.8..1.2),
            angle_deg: rng.gen_range(-20.0..20.0),
            noise_seed: rng.gen(),
            noise_amplitude: 0.05,
            contrast: rng.gen_range(0.9..1.1),
            brightness: rng.gen_range(-0.05..0.05),
            anchor_offset: (0.0, 0.0),
        };
        let scene = uniform(&mut rng, &[3, 20, 20], 0.0, 1.0);
        out.push(inst(format!("place, jitter and apply/{s}"), vec![p.clone(), scene], move |g, v| {
            let placed = place_patch(g, v[0], &params, &bbox, (20, 20), 0.5)?;
            let jittered = color_jitter(g, placed.warped, &placed.mask, &params)?;
            let adv = apply_patch(g, v[1], jittered, &placed.mask)?;
            weighted(g, adv, s)
        }));
    }
    for (seed, metric) in [(1u64, SimMetric::Cosine), (2, SimMetric::Mse), (3, SimMetric::Cosine)] {
        out.push(pipeline(seed, metric));
    }
    out
}

pub fn run() -> advart::Result<Vec<Outcome>> {
    instances().iter().map(check).collect()
}
