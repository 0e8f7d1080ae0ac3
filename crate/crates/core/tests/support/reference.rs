//! Independent reference computations for average precision, SSIM and
//! Adam. Shared by the oracle tests and the acceptance run.

use advart::eval::Scored;
use advart::imaging::ImageRGB;
use advart::patchops::BoundingBox;

/// Exact fraction with `u128` parts, enough for the handcrafted cases.
#[derive(Debug, Clone, Copy)]
pub struct Frac(u128, u128);

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Frac {
    fn new(n: u128, d: u128) -> Self {
        let g = gcd(n, d).max(1);
        Frac(n / g, d / g)
    }
    fn add(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn sub(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 - o.0 * self.1, self.1 * o.1)
    }
    fn mul(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.0, self.1 * o.1)
    }
    fn gt(self, o: Frac) -> bool {
        self.0 * o.1 > o.0 * self.1
    }
    fn to_f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

pub fn corner_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ax1, ay0, ay1) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0, a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bx0, bx1, by0, by1) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0, b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)
}

/// True positives among the top `k` candidates, matched from scratch.
fn tp_in_prefix(truths: &[Vec<BoundingBox>], ranked: &[(usize, BoundingBox)], k: usize) -> u128 {
    let mut claimed: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let mut tp = 0;
    for (img, cand) in &ranked[..k] {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truths[*img].iter().enumerate() {
            let v = corner_iou(cand, t);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= 0.5 && !claimed[*img][j] {
                claimed[*img][j] = true;
                tp += 1;
            }
        }
    }
    tp
}

/// All-point interpolated AP in percent: every prefix of the ranking is a
/// PR point; the precision at each recall level is the best precision of
/// any point with at least that recall.
pub fn brute_force_ap(truths: &[Vec<BoundingBox>], candidates: &[Scored]) -> f64 {
    let n_truth: u128 = truths.iter().map(|t| t.len() as u128).sum();
    let mut ranked: Vec<(usize, BoundingBox, f64)> = candidates
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.iter().map(move |(b, s)| (i, *b, *s)))
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
    let ranked: Vec<(usize, BoundingBox)> = ranked.into_iter().map(|(i, b, _)| (i, b)).collect();
    let points: Vec<(Frac, Frac)> = (1..=ranked.len())
        .map(|k| {
            let tp = tp_in_prefix(truths, &ranked, k);
            (Frac::new(tp, n_truth), Frac::new(tp, k as u128))
        })
        .collect();
    let mut area = Frac(0, 1);
    let mut prev = Frac(0, 1);
    for &(r, _) in &points {
        if !r.gt(prev) {
            continue;
        }
        let best = points
            .iter()
            .filter(|(r2, _)| !r.gt(*r2))
            .map(|(_, p)| *p)
            .fold(Frac(0, 1), |m, p| if p.gt(m) { p } else { m });
        area = area.add(r.sub(prev).mul(best));
        prev = r;
    }
    100.0 * area.to_f64()
}

pub fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(cx, cy, w, h, 0)
}

pub fn ap_cases() -> Vec<(&'static str, Vec<Vec<BoundingBox>>, Vec<Scored>)> {
    let t1 = bx(0.25, 0.5, 0.2, 0.4);
    let t2 = bx(0.75, 0.5, 0.2, 0.4);
    let t3 = bx(0.5, 0.2, 0.1, 0.2);
    let near = |b: BoundingBox, d: f64| bx(b.cx + d, b.cy, b.w, b.h);
    vec![
        ("perfect ranking", vec![vec![t1, t2]], vec![vec![(t1, 0.9), (t2, 0.8)]]),
        (
            "five detections, three truths",
            vec![vec![t1, t2, t3]],
            vec![vec![
                (t1, 0.95),
                (bx(0.1, 0.9, 0.1, 0.1), 0.9),
                (near(t2, 0.02), 0.8),
                (near(t1, 0.01), 0.7),
                (t3, 0.6),
            ]],
        ),
        ("false positive first", vec![vec![t1]], vec![vec![(t2, 0.9), (t1, 0.5)]]),
        ("missed truth", vec![vec![t1, t2]], vec![vec![(t1, 0.9)]]),
        ("low overlap only", vec![vec![t1]], vec![vec![(near(t1, 0.12), 0.9)]]),
        (
            "two images interleaved",
            vec![vec![t1], vec![t2, t3]],
            vec![vec![(t1, 0.6), (t3, 0.9)], vec![(t2, 0.8), (t1, 0.7), (t3, 0.5)]],
        ),
        ("image without truths", vec![vec![], vec![t1]], vec![vec![(t1, 0.99)], vec![(t1, 0.3)]]),
        (
            "duplicates of one truth",
            vec![vec![t1, t2]],
            vec![vec![(t1, 0.9), (near(t1, 0.01), 0.85), (t2, 0.4)]],
        ),
        (
            "precision dip then recovery",
            vec![vec![t1, t2, t3]],
            vec![vec![(t1, 0.9), (bx(0.9, 0.9, 0.05, 0.05), 0.8), (bx(0.1, 0.1, 0.05, 0.05), 0.7), (t2, 0.6), (t3, 0.5)]],
        ),
        (
            "best-overlap truth already claimed",
            vec![vec![t1, near(t1, 0.1)]],
            vec![vec![(t1, 0.9), (near(t1, 0.02), 0.8), (near(t1, 0.1), 0.7)]],
        ),
    ]
}

pub fn pattern(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> ImageRGB {
    ImageRGB::from_fn(h, w, |y, x| [f(y, x, 0), f(y, x, 1), f(y, x, 2)])
}

pub fn pa(y: usize, x: usize, c: usize) -> f64 {
    ((y * 7 + x * 3 + c * 5) % 13) as f64 / 12.0
}

pub fn pb(y: usize, x: usize, c: usize) -> f64 {
    ((y * y + 2 * x + 3 * c) % 17) as f64 / 16.0
}

pub fn checker(y: usize, x: usize, _: usize) -> f64 {
    ((y + x) % 2) as f64
}

/// Frozen from scikit-image `structural_similarity(gaussian_weights=True,
/// sigma=1.5, use_sample_covariance=False, data_range=1, channel_axis=2)`.
pub fn ssim_cases() -> Vec<(&'static str, ImageRGB, ImageRGB, f64)> {
    vec![
        ("modular patterns", pattern(24, 24, pa), pattern(24, 24, pb), -0.04337891004531849),
        ("affine contrast", pattern(20, 20, pa), pattern(20, 20, |y, x, c| 0.25 + 0.5 * pa(y, x, c)), 0.8013278369192817),
        ("ramp vs pattern", pattern(16, 32, |y, x, c| (x + y + c) as f64 / 60.0), pattern(16, 32, pb), 0.016371553871522317),
        ("flat vs pattern", pattern(12, 12, |_, _, _| 0.4), pattern(12, 12, pa), 0.008987654991230552),
        ("inverse", pattern(15, 17, pb), pattern(15, 17, |y, x, c| 1.0 - pb(y, x, c)), -0.9509275889099021),
        // Binary checkerboard against its inverse. Local means are not
        // exactly 0.5 under the Gaussian window, so the value is not -1.
        ("checkerboard vs inverse", pattern(16, 16, checker), pattern(16, 16, |y, x, c| 1.0 - checker(y, x, c)), -0.9964064683569568),
    ]
}

pub const ADAM_LR: f64 = 0.05;
pub const ADAM_START: [f64; 2] = [0.3, -1.2];
pub const ADAM_GRADS: [[f64; 2]; 3] = [[0.5, -2.0], [-0.25, -1.0], [1.5, 0.125]];

/// Three Adam steps written out by hand with beta1 = 0.9, beta2 = 0.999,
/// eps = 1e-8.
pub fn adam_by_hand() -> [f64; 2] {
    let lr = ADAM_LR;
    // Parameter 0.
    let m1 = 0.1 * 0.5;
    let v1 = 0.001 * 0.25;
    let p1 = 0.3 - lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
    let m2 = 0.9 * m1 + 0.1 * -0.25;
    let v2 = 0.999 * v1 + 0.001 * 0.0625;
    let p2 = p1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.998001f64)).sqrt() + 1e-8);
    let m3 = 0.9 * m2 + 0.1 * 1.5;
    let v3 = 0.999 * v2 + 0.001 * 2.25;
    let p3 = p2 - lr * (m3 / (1.0 - 0.729)) / ((v3 / (1.0 - 0.997002999f64)).sqrt() + 1e-8);
    // Parameter 1.
    let m1 = 0.1 * -2.0;
    let v1 = 0.001 * 4.0;
    let q1 = -1.2 - lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
    let m2 = 0.9 * m1 + 0.1 * -1.0;
    let v2 = 0.999 * v1 + 0.001 * 1.0;
    let q2 = q1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.998001f64)).sqrt() + 1e-8);
    let m3 = 0.9 * m2 + 0.1 * 0.125;
    let v3 = 0.999 * v2 + 0.001 * 0.015625;
    let q3 = q2 - lr * (m3 / (1.0 - 0.729)) / ((v3 / (1.0 - 0.997002999f64)).sqrt() + 1e-8);
    [p3, q3]
}
