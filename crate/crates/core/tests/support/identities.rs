//! Exact loss and compositing identities. Shared by the core tests and the
//! acceptance run.

use advart::losses::{self, SimMetric};
use advart::patchops::apply_patch;
use advart::tensorgrad::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative slack on the constant-patch TV bound.
pub const TV_ROUNDING: f64 = 1e-12;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.0..1.0))
}

/// Runs every identity over `seeds` random patches of a few shapes.
pub fn run(seeds: u64) -> advart::Result<Vec<Check>> {
    let shapes = [[3usize, 6, 6], [3, 16, 16], [3, 9, 13], [1, 2, 2]];
    let mut mse_worst = 0.0f64;
    let mut cos_worst = 0.0f64;
    let mut tv_excess = f64::NEG_INFINITY;
    let mut keep_worst = 0.0f64;
    let mut replace_worst = 0.0f64;
    for seed in 0..seeds {
        for (k, shape) in shapes.iter().enumerate() {
            let p = random(seed * 31 + k as u64, shape);
            mse_worst = mse_worst.max(losses::eval::similarity(SimMetric::Mse, &p, &p)?.abs());
            cos_worst = cos_worst.max((losses::eval::similarity(SimMetric::Cosine, &p, &p)? + 1.0).abs());

            let level = p.data()[0];
            let flat = Tensor::full(shape.to_vec(), level);
            // With the smoothing term the value sits on the bound itself, so
            // summation rounding is allowed for.
            let bound = (shape.iter().product::<usize>()) as f64 * 1e-4;
            tv_excess = tv_excess.max(losses::eval::tv(&flat)? - bound * (1.0 + TV_ROUNDING));

            let image = random(seed * 31 + k as u64 + 1000, shape);
            let mut g = Graph::new();
            let iv = g.constant(image.clone());
            let pv = g.constant(p.clone());
            let kept = apply_patch(&mut g, iv, pv, &Tensor::zeros(shape.to_vec()))?;
            let replaced = apply_patch(&mut g, iv, pv, &Tensor::ones(shape.to_vec()))?;
            keep_worst = keep_worst.max(g.value(kept).max_abs_diff(&image));
            replace_worst = replace_worst.max(g.value(replaced).max_abs_diff(&p));
        }
    }
    Ok(vec![
        check("mse(P, P) = 0", mse_worst == 0.0, format!("max |value| {mse_worst:e}")),
        check("cosine(P, P) = -1", cos_worst <= 1e-12, format!("max deviation {cos_worst:e}")),
        check("tv(constant) <= HWC * 1e-4", tv_excess <= 0.0, format!("max excess over bound {tv_excess:e}")),
        check("mask 0 keeps the image", keep_worst == 0.0, format!("max deviation {keep_worst:e}")),
        check("mask 1 pastes the patch", replace_worst == 0.0, format!("max deviation {replace_worst:e}")),
    ])
}
