#[path = "support/identities.rs"]
mod identities;

use advart::losses::{self, SimMetric};
use advart::patchops::apply_patch;
use advart::tensorgrad::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn exact_identities_hold() {
    let failed: Vec<String> = identities::run(25)
        .unwrap()
        .into_iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

fn random(seed: u64, shape: [usize; 3]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

#[test]
fn mse_matches_direct_sum() {
    for seed in 0..10 {
        let (p, n) = (random(seed, [3, 7, 5]), random(seed + 50, [3, 7, 5]));
        let mut acc = 0.0;
        for i in 0..p.numel() {
            let d = p.data()[i] - n.data()[i];
            acc += d * d;
        }
        let direct = acc / p.numel() as f64;
        assert!((losses::eval::similarity(SimMetric::Mse, &p, &n).unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn tv_matches_direct_sum() {
    let (c, h, w) = (3, 6, 9);
    for seed in 0..10 {
        let p = random(seed, [c, h, w]);
        let at = |ch: usize, y: usize, x: usize| p.data()[(ch * h + y) * w + x];
        let mut acc = 0.0;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let dv = if y + 1 < h { at(ch, y + 1, x) - at(ch, y, x) } else { 0.0 };
                    let dh = if x + 1 < w { at(ch, y, x + 1) - at(ch, y, x) } else { 0.0 };
                    acc += (dv * dv + dh * dh + losses::TV_EPS).sqrt();
                }
            }
        }
        assert!((losses::eval::tv(&p).unwrap() - acc).abs() < 1e-9);
    }
}

#[test]
fn half_mask_blends_black_and_white() {
    let mut g = Graph::new();
    let image = g.constant(Tensor::zeros([3, 4, 4]));
    let patch = g.constant(Tensor::ones([3, 4, 4]));
    let out = apply_patch(&mut g, image, patch, &Tensor::full([3, 4, 4], 0.5)).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.5));
}
