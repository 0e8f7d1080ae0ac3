//! Adam and the patch crafting loop.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{extract_attack_scores, GridDetector, Scene, Split, PERSON};
use crate::error::{Error, Result};
use crate::eval::{map_eval, PatchSpec};
use crate::losses::{detection_loss, similarity, total_loss, tv_loss, LossBreakdown, LossWeights};
use crate::patchops::{patch_scene, sample_transform, EotConfig, PatchCanvas, TransformParams};
use crate::tensorgrad::{Graph, Tensor};

pub const PATCH_MAGIC: &[u8] = b"ADVART-PATCH v1\n";
pub const PROBE_SCENES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "Adam state holds {} moments but got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Adam update of the patch followed by clamping into `[0, 1]`.
pub fn adam_step(state: &mut AdamState, patch: &mut PatchCanvas, grad: &Tensor, iteration: usize) -> Result<()> {
    if grad.shape() != patch.pixels().shape() {
        return Err(Error::InvalidArgument(format!(
            "gradient shape {:?} differs from patch shape {:?}",
            grad.shape(),
            patch.pixels().shape()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::NonFiniteGradient { iteration });
    }
    let mut px = patch.pixels().data().to_vec();
    state.update(&mut px, grad.data())?;
    patch.set_pixels(px)
}

/// Halves the learning rate when a window's mean loss fails to beat the
/// best earlier window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub window: usize,
    pub best_mean: f64,
    pub sum: f64,
    pub len: usize,
}

impl Plateau {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            best_mean: f64::INFINITY,
            sum: 0.0,
            len: 0,
        }
    }

    /// Records a loss; returns true when the learning rate should halve.
    pub fn observe(&mut self, loss: f64) -> bool {
        if self.window == 0 {
            return false;
        }
        self.sum += loss;
        self.len += 1;
        if self.len < self.window {
            return false;
        }
        let mean = self.sum / self.len as f64;
        self.sum = 0.0;
        self.len = 0;
        if mean < self.best_mean {
            self.best_mean = mean;
            false
        } else {
            true
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CraftConfig {
    pub weights: LossWeights,
    pub eot: EotConfig,
    pub ratio: f64,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub plateau_window: usize,
    pub seed: u64,
    pub probe_every: usize,
    pub target_class: usize,
}

impl Default for CraftConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            eot: EotConfig::full(),
            ratio: 0.2,
            iterations: 1000,
            batch: 8,
            lr: 0.03,
            plateau_window: 50,
            seed: 0,
            probe_every: 100,
            target_class: PERSON,
        }
    }
}

impl CraftConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.eot.ranges.validate()?;
        if !(self.ratio > 0.0 && self.ratio.is_finite()) {
            return Err(Error::InvalidArgument(format!("patch ratio {} must be positive", self.ratio)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CraftState {
    pub iteration: usize,
    pub pixels: Tensor,
    pub adam: AdamState,
    pub plateau: Plateau,
}

impl CraftState {
    pub fn start(canvas: &PatchCanvas, config: &CraftConfig) -> Self {
        Self {
            iteration: 0,
            pixels: canvas.pixels().clone(),
            adam: AdamState::new(canvas.pixels().numel(), config.lr),
            plateau: Plateau::new(config.plateau_window),
        }
    }

    pub fn patch_size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub map_probe: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CraftRun {
    pub config: CraftConfig,
    pub history: Vec<IterationRecord>,
    pub patch: PatchCanvas,
    pub state: CraftState,
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Crafts a patch from `canvas` for `config.iterations` iterations.
pub fn craft_patch(model: &GridDetector, dataset: &[Scene], canvas: PatchCanvas, config: &CraftConfig) -> Result<CraftRun> {
    let state = CraftState::start(&canvas, config);
    craft_from(model, dataset, canvas, state, config, &mut |_, _| Ok(()))
}

/// Continues from `state` until `config.iterations` iterations are done in
/// total. `on_iteration` sees the state and record after every step.
pub fn craft_from(
    model: &GridDetector,
    dataset: &[Scene],
    mut canvas: PatchCanvas,
    mut state: CraftState,
    config: &CraftConfig,
    on_iteration: &mut dyn FnMut(&CraftState, &IterationRecord) -> Result<()>,
) -> Result<CraftRun> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("crafting needs at least one scene".into()));
    }
    if config.weights.beta != 0.0 && canvas.target().is_none() {
        return Err(Error::InvalidArgument("beta > 0 needs a target artwork".into()));
    }
    if state.pixels.shape() != canvas.pixels().shape() {
        return Err(Error::InvalidArgument("snapshot and canvas patch sizes differ".into()));
    }
    canvas.set_pixels(state.pixels.data().to_vec())?;

    let size = model.config().input_size;
    let prepare = |s: &Scene| Scene {
        image: s.image.resize(size, size),
        boxes: s.boxes.clone(),
        split: s.split,
    };
    let mut train: Vec<Scene> = dataset
        .iter()
        .filter(|s| s.split == Split::Train && s.target_boxes(config.target_class).next().is_some())
        .map(prepare)
        .collect();
    if train.is_empty() {
        train = dataset
            .iter()
            .filter(|s| s.target_boxes(config.target_class).next().is_some())
            .map(prepare)
            .collect();
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("no scene contains the target class".into()));
    }
    let mut probe: Vec<Scene> = dataset.iter().filter(|s| s.split == Split::Val).take(PROBE_SCENES).cloned().collect();
    if probe.is_empty() {
        probe = dataset.iter().take(PROBE_SCENES).cloned().collect();
    }
    let chw: Vec<Tensor> = train.iter().map(|s| s.image.to_chw()).collect();

    let mut history = Vec::new();
    while state.iteration < config.iterations {
        let it = state.iteration;
        let mut rng = iteration_rng(config.seed, it);
        let batch = config.batch.min(train.len());
        let picks = sample(&mut rng, train.len(), batch).into_vec();

        let mut g = Graph::new();
        let patch = g.leaf(canvas.pixels().clone(), true);
        let bound = model.bind(&mut g, false);
        let mut scenes = Vec::with_capacity(batch);
        for &k in &picks {
            let scene = &train[k];
            let transforms: Vec<TransformParams> =
                scene.boxes.iter().map(|_| sample_transform(&mut rng, &config.eot)).collect();
            let img = g.constant(chw[k].clone());
            scenes.push(patch_scene(
                &mut g,
                img,
                patch,
                &scene.boxes,
                &transforms,
                config.ratio,
                config.target_class,
            )?);
        }
        let stacked = g.stack(&scenes)?;
        let raw = model.forward(&mut g, &bound, stacked)?;
        let scores = extract_attack_scores(&mut g, raw, config.target_class)?;
        let det = detection_loss(&mut g, scores)?;
        let sim = match canvas.target() {
            Some(t) => {
                let n = g.constant(t.clone());
                Some(similarity(&mut g, config.weights.sim_metric, patch, n)?)
            }
            None => None,
        };
        let tv = tv_loss(&mut g, patch)?;
        let (total, breakdown) = total_loss(&mut g, det, sim, tv, &config.weights)?;
        let grads = g.backward(total)?;
        let grad = grads.get(patch).expect("patch is a gradient leaf");
        adam_step(&mut state.adam, &mut canvas, grad, it)?;
        if state.plateau.observe(breakdown.total) {
            state.adam.lr *= 0.5;
        }
        state.pixels = canvas.pixels().clone();
        state.iteration += 1;

        let probe_due = config.probe_every > 0
            && (state.iteration % config.probe_every == 0 || state.iteration == config.iterations);
        let map_probe = if probe_due {
            let spec = PatchSpec {
                patch: &canvas,
                ratio: config.ratio,
                eot: None,
            };
            Some(map_eval(model, &probe, Some(&spec))?.map)
        } else {
            None
        };
        let record = IterationRecord {
            iteration: it,
            loss: breakdown,
            map_probe,
        };
        on_iteration(&state, &record)?;
        history.push(record);
    }
    Ok(CraftRun {
        config: config.clone(),
        history,
        patch: canvas,
        state,
    })
}

pub const HISTORY_HEADER: &str = "iteration,det,sim_raw,sim_effective,tv,total,map_probe";

pub fn history_row(r: &IterationRecord) -> String {
    let probe = r.map_probe.map(|m| m.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{}",
        r.iteration, r.loss.det, r.loss.sim_raw, r.loss.sim_effective, r.loss.tv, r.loss.total, probe
    )
}

pub fn history_csv(records: &[IterationRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", history_row(r));
    }
    s
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(w: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a crafting state as an "ADVART-PATCH v1" container.
pub fn encode_snapshot(state: &CraftState) -> Vec<u8> {
    let n = state.pixels.numel();
    let mut out = Vec::with_capacity(PATCH_MAGIC.len() + 8 * (3 * n + 12));
    out.extend_from_slice(PATCH_MAGIC);
    put_u64(&mut out, state.patch_size() as u64);
    put_u64(&mut out, state.iteration as u64);
    put_u64(&mut out, state.adam.step);
    put_f64s(&mut out, &[state.adam.lr, state.adam.beta1, state.adam.beta2, state.adam.eps]);
    put_u64(&mut out, state.plateau.window as u64);
    put_f64s(&mut out, &[state.plateau.best_mean, state.plateau.sum]);
    put_u64(&mut out, state.plateau.len as u64);
    put_f64s(&mut out, state.pixels.data());
    put_f64s(&mut out, &state.adam.m);
    put_f64s(&mut out, &state.adam.v);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Checkpoint("patch snapshot is truncated".into())),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<CraftState> {
    if !bytes.starts_with(PATCH_MAGIC) {
        return Err(Error::Checkpoint("missing ADVART-PATCH v1 header".into()));
    }
    let mut c = Cursor {
        bytes,
        pos: PATCH_MAGIC.len(),
    };
    let size = c.u64()? as usize;
    if !(crate::patchops::MIN_PATCH_SIZE..=4096).contains(&size) {
        return Err(Error::Checkpoint(format!("implausible patch side {size}")));
    }
    let iteration = c.u64()? as usize;
    let step = c.u64()?;
    let (lr, beta1, beta2, eps) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?);
    let window = c.u64()? as usize;
    let (best_mean, sum) = (c.f64()?, c.f64()?);
    let len = c.u64()? as usize;
    let n = 3 * size * size;
    let pixels = Tensor::new([3, size, size], c.f64s(n)?)?;
    let m = c.f64s(n)?;
    let v = c.f64s(n)?;
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(CraftState {
        iteration,
        pixels,
        adam: AdamState {
            m,
            v,
            step,
            lr,
            beta1,
            beta2,
            eps,
        },
        plateau: Plateau {
            window,
            best_mean,
            sum,
            len,
        },
    })
}

pub fn write_snapshot(state: &CraftState, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(&encode_snapshot(state))
}

pub fn read_snapshot(r: &mut impl Read) -> Result<CraftState> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("reading snapshot: {e}")))?;
    decode_snapshot(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchops::InitMode;

    #[test]
    fn zero_gradient_leaves_patch_unchanged() {
        let mut c = PatchCanvas::init(None, 16, InitMode::UniformRandom { seed: 1 }).unwrap();
        let before = c.pixels().clone();
        let mut s = AdamState::new(before.numel(), 0.03);
        adam_step(&mut s, &mut c, &Tensor::zeros([3, 16, 16]), 0).unwrap();
        assert_eq!(c.pixels(), &before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut params = vec![0.5, 0.5];
        let mut s = AdamState::new(2, 0.03);
        s.update(&mut params, &[2.5, -0.7]).unwrap();
        assert!((params[0] - (0.5 - 0.03)).abs() < 1e-9);
        assert!((params[1] - (0.5 + 0.03)).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_iteration() {
        let mut c = PatchCanvas::init(None, 16, InitMode::UniformRandom { seed: 1 }).unwrap();
        let mut s = AdamState::new(768, 0.03);
        let mut g = Tensor::zeros([3, 16, 16]);
        g.data_mut()[5] = f64::NAN;
        match adam_step(&mut s, &mut c, &g, 17) {
            Err(Error::NonFiniteGradient { iteration }) => assert_eq!(iteration, 17),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plateau_halves_after_a_flat_window() {
        let mut p = Plateau::new(2);
        assert!(!p.observe(3.0));
        assert!(!p.observe(3.0));
        assert!(!p.observe(2.0));
        assert!(!p.observe(2.0));
        assert!(!p.observe(2.5));
        assert!(p.observe(2.5));
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let c = PatchCanvas::init(None, 16, InitMode::UniformRandom { seed: 9 }).unwrap();
        let mut st = CraftState::start(&c, &CraftConfig::default());
        st.iteration = 42;
        st.adam.step = 42;
        st.adam.m[3] = 0.1 + 0.2;
        st.adam.v[7] = 1e-300;
        st.plateau.sum = 1.0 / 3.0;
        st.plateau.len = 7;
        let back = decode_snapshot(&encode_snapshot(&st)).unwrap();
        assert_eq!(back, st);
        let mut bytes = encode_snapshot(&st);
        bytes.pop();
        assert!(decode_snapshot(&bytes).is_err());
        assert!(decode_snapshot(b"ADVART-DET v1\n").is_err());
    }
}
