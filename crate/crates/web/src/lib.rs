//! WebAssembly bindings behind `www/index.html`.
//!
//! Images cross the boundary as RGBA bytes, row-major, ready for `ImageData`.

use advart::detector::{synth_dataset, PERSON};
use advart::imaging::{artwork, ssim, ImageRGB};
use advart::losses::{self, total_loss, LossWeights, SimMetric};
use advart::optimize::AdamState;
use advart::patchops::{composite, InitMode, PatchCanvas, TransformParams};
use advart::tensorgrad::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const SCENE_SIZE: usize = 160;
pub const PATCH_SIZE: usize = 32;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &ImageRGB) -> Vec<u8> {
    img.to_bytes()
        .chunks(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

fn target(name: &str) -> Result<ImageRGB, JsError> {
    artwork::builtin(name, PATCH_SIZE).map_err(js)
}

fn patch_of(img: &ImageRGB) -> Tensor {
    img.to_chw()
}

/// The artwork with uniform noise of amplitude `noise`, clamped to `[0, 1]`.
fn perturbed(name: &str, noise: f64, seed: u32) -> Result<(ImageRGB, ImageRGB), JsError> {
    let art = target(name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let data = art
        .data()
        .iter()
        .map(|&v| {
            let d = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
            (v + d).clamp(0.0, 1.0)
        })
        .collect();
    let noisy = ImageRGB::new(PATCH_SIZE, PATCH_SIZE, data).map_err(js)?;
    Ok((art, noisy))
}

#[wasm_bindgen]
pub fn scene_size() -> usize {
    SCENE_SIZE
}

#[wasm_bindgen]
pub fn patch_size() -> usize {
    PATCH_SIZE
}

/// Synthetic scene `seed` with the artwork pasted on every person.
#[wasm_bindgen]
pub fn preview_scene(
    seed: u32,
    art: &str,
    ratio: f64,
    angle_deg: f64,
    scale: f64,
    brightness: f64,
) -> Result<Vec<u8>, JsError> {
    let scene = synth_dataset(u64::from(seed), 1, (SCENE_SIZE, SCENE_SIZE))
        .map_err(js)?
        .remove(0);
    let boxes: Vec<_> = scene.target_boxes(PERSON).copied().collect();
    let params = TransformParams {
        scale_jitter: scale,
        angle_deg,
        brightness,
        ..TransformParams::IDENTITY
    };
    let out = composite(&scene.image, &patch_of(&target(art)?), &boxes, &vec![params; boxes.len()], ratio)
        .map_err(js)?;
    Ok(rgba(&out))
}

#[wasm_bindgen]
pub fn noisy_patch(art: &str, noise: f64, seed: u32) -> Result<Vec<u8>, JsError> {
    Ok(rgba(&perturbed(art, noise, seed)?.1))
}

/// `[cosine, mse, tv, ssim]` of the noisy artwork against the clean one.
#[wasm_bindgen]
pub fn loss_breakdown(art: &str, noise: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    let (clean, noisy) = perturbed(art, noise, seed)?;
    let (p, n) = (patch_of(&noisy), patch_of(&clean));
    Ok(vec![
        losses::eval::similarity(SimMetric::Cosine, &p, &n).map_err(js)?,
        losses::eval::similarity(SimMetric::Mse, &p, &n).map_err(js)?,
        losses::eval::tv(&p).map_err(js)?,
        ssim(&noisy, &clean).map_err(js)?,
    ])
}

/// Adam on the similarity and smoothness terms alone, from a random patch
/// towards the artwork.
#[wasm_bindgen]
pub struct Descent {
    target: ImageRGB,
    pixels: Vec<f64>,
    adam: AdamState,
    weights: LossWeights,
    last_loss: f64,
}

#[wasm_bindgen]
impl Descent {
    #[wasm_bindgen(constructor)]
    pub fn new(art: &str, metric: &str, beta: f64, gamma: f64, lr: f64, seed: u32) -> Result<Descent, JsError> {
        let target = target(art)?;
        let canvas = PatchCanvas::init(None, PATCH_SIZE, InitMode::UniformRandom { seed: u64::from(seed) })
            .map_err(js)?;
        let pixels = canvas.pixels().data().to_vec();
        let weights = LossWeights {
            alpha: 0.0,
            beta,
            gamma,
            sim_metric: metric.parse().map_err(js)?,
        };
        Ok(Descent {
            adam: AdamState::new(pixels.len(), lr),
            target,
            pixels,
            weights,
            last_loss: f64::NAN,
        })
    }

    /// Runs `n` steps and returns the loss before the last one.
    pub fn step(&mut self, n: usize) -> Result<f64, JsError> {
        let shape = vec![3, PATCH_SIZE, PATCH_SIZE];
        for _ in 0..n {
            let mut g = Graph::new();
            let p = g.leaf(Tensor::new(shape.clone(), self.pixels.clone()).map_err(js)?, true);
            let t = g.constant(self.target.to_chw());
            let det = g.constant(Tensor::scalar(0.0));
            let sim = losses::similarity(&mut g, self.weights.sim_metric, p, t).map_err(js)?;
            let tv = losses::tv_loss(&mut g, p).map_err(js)?;
            let (total, breakdown) = total_loss(&mut g, det, Some(sim), tv, &self.weights).map_err(js)?;
            let grads = g.backward(total).map_err(js)?;
            let grad = grads.get(p).ok_or_else(|| js("patch received no gradient"))?;
            self.adam.update(&mut self.pixels, grad.data()).map_err(js)?;
            for v in &mut self.pixels {
                *v = v.clamp(0.0, 1.0);
            }
            self.last_loss = breakdown.total;
        }
        Ok(self.last_loss)
    }

    pub fn steps(&self) -> u64 {
        self.adam.step
    }

    fn image(&self) -> Result<ImageRGB, JsError> {
        let t = Tensor::new(vec![3, PATCH_SIZE, PATCH_SIZE], self.pixels.clone()).map_err(js)?;
        ImageRGB::from_chw(&t).map_err(js)
    }

    pub fn rgba(&self) -> Result<Vec<u8>, JsError> {
        Ok(rgba(&self.image()?))
    }

    pub fn ssim(&self) -> Result<f64, JsError> {
        ssim(&self.image()?, &self.target).map_err(js)
    }
}
