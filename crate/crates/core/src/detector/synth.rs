//! Procedural street-like scenes with exactly annotated figures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::ImageRGB;
use crate::patchops::BoundingBox;

pub const PERSON: usize = 0;
pub const CRATE: usize = 1;

/// Minimum per-channel colour distance a figure part keeps from the
/// background base colour (in at least one channel).
pub const MIN_SEPARATION: f64 = 0.3;
const TEXTURE_AMPLITUDE: f64 = 0.04;
const SUPERSAMPLE: usize = 2;
const PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// Every fifth scene is held out.
    pub fn for_index(i: usize) -> Split {
        if i % 5 == 4 {
            Split::Val
        } else {
            Split::Train
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageRGB,
    pub boxes: Vec<BoundingBox>,
    pub split: Split,
}

impl Scene {
    pub fn target_boxes(&self, class_id: usize) -> impl Iterator<Item = &BoundingBox> {
        self.boxes.iter().filter(move |b| b.class_id == class_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FigureKind {
    /// Torso, two legs and a head disc; colours are torso, legs, head.
    Person { colors: [[f64; 3]; 3] },
    /// Filled square with darker planks.
    Crate { color: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub kind: FigureKind,
    pub bbox: BoundingBox,
}

/// Everything needed to render one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    /// (frequency u, frequency v, phase, channel weights) per texture wave.
    pub waves: Vec<(f64, f64, f64, [f64; 3])>,
    pub figures: Vec<Figure>,
}

fn separated(c: [f64; 3], bg: [f64; 3]) -> bool {
    c.iter().zip(bg).any(|(a, b)| (a - b).abs() >= MIN_SEPARATION)
}

fn separated_color<R: Rng>(rng: &mut R, bg: [f64; 3], lo: f64, hi: f64) -> [f64; 3] {
    loop {
        let c = [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        if separated(c, bg) {
            return c;
        }
    }
}

fn disjoint(a: &BoundingBox, b: &BoundingBox, margin: f64) -> bool {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    ax1 + margin <= bx0 || bx1 + margin <= ax0 || ay1 + margin <= by0 || by1 + margin <= ay0
}

/// Draws a layout: one to three persons and at most one crate, pairwise
/// disjoint and fully inside the frame.
pub fn sample_layout<R: Rng>(rng: &mut R, height: usize, width: usize) -> SceneLayout {
    let background = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let waves = (0..3)
        .map(|_| {
            (
                rng.gen_range(1.0..9.0),
                rng.gen_range(1.0..9.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            )
        })
        .collect();
    let aspect = height as f64 / width as f64;
    let persons = rng.gen_range(1..=3);
    let crates = usize::from(rng.gen_bool(0.5));
    let mut figures: Vec<Figure> = Vec::new();
    for n in 0..persons + crates {
        let is_person = n < persons;
        for _ in 0..PLACEMENT_TRIES {
            let (w, h) = if is_person {
                let h = rng.gen_range(0.35..0.6);
                (h * rng.gen_range(0.32..0.45) * aspect, h)
            } else {
                let h = rng.gen_range(0.15..0.3);
                (h * rng.gen_range(0.8..1.25) * aspect, h)
            };
            let cx = rng.gen_range(w / 2.0 + 0.01..1.0 - w / 2.0 - 0.01);
            let cy = rng.gen_range(h / 2.0 + 0.01..1.0 - h / 2.0 - 0.01);
            let bbox = BoundingBox::new(cx, cy, w, h, if is_person { PERSON } else { CRATE });
            if figures.iter().all(|f| disjoint(&f.bbox, &bbox, 0.01)) {
                let kind = if is_person {
                    FigureKind::Person {
                        colors: [
                            separated_color(rng, background, 0.0, 1.0),
                            separated_color(rng, background, 0.0, 0.7),
                            separated_color(rng, background, 0.3, 1.0),
                        ],
                    }
                } else {
                    FigureKind::Crate {
                        color: separated_color(rng, background, 0.2, 0.9),
                    }
                };
                figures.push(Figure { kind, bbox });
                break;
            }
        }
    }
    SceneLayout {
        height,
        width,
        background,
        waves,
        figures,
    }
}

/// Signed-distance test for a rectangle with rounded corners.
fn in_rounded_rect(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64, r: f64) -> bool {
    if px < x0 || px > x1 || py < y0 || py > y1 {
        return false;
    }
    let qx = (x0 + r - px).max(px - (x1 - r)).max(0.0);
    let qy = (y0 + r - py).max(py - (y1 - r)).max(0.0);
    qx * qx + qy * qy <= r * r
}

impl Figure {
    /// Colour at pixel-space point `(px, py)`, if the figure covers it.
    fn shade(&self, px: f64, py: f64, height: usize, width: usize) -> Option<[f64; 3]> {
        let (x0, y0, x1, y1) = self.bbox.corners();
        let (x0, x1) = (x0 * width as f64, x1 * width as f64);
        let (y0, y1) = (y0 * height as f64, y1 * height as f64);
        let (w, h) = (x1 - x0, y1 - y0);
        match self.kind {
            FigureKind::Person { colors } => {
                let r = (0.125 * h).min(0.5 * w);
                let hx = 0.5 * (x0 + x1);
                if (px - hx).powi(2) + (py - (y0 + r)).powi(2) <= r * r {
                    return Some(colors[2]);
                }
                let neck = y0 + 1.8 * r;
                let hip = y0 + 0.6 * h;
                if in_rounded_rect(px, py, x0, neck, x1, hip, 0.25 * w) {
                    return Some(colors[0]);
                }
                let leg = 0.4 * w;
                if py >= hip - 1.0
                    && py <= y1
                    && ((px >= x0 + 0.05 * w && px <= x0 + 0.05 * w + leg)
                        || (px <= x1 - 0.05 * w && px >= x1 - 0.05 * w - leg))
                {
                    return Some(colors[1]);
                }
                None
            }
            FigureKind::Crate { color } => {
                if px < x0 || px > x1 || py < y0 || py > y1 {
                    return None;
                }
                let t = ((py - y0) / h * 4.0).fract();
                if t < 0.12 {
                    Some(color.map(|c| c * 0.55))
                } else {
                    Some(color)
                }
            }
        }
    }
}

impl SceneLayout {
    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.figures.iter().map(|f| f.bbox).collect()
    }

    fn background_at(&self, u: f64, v: f64) -> [f64; 3] {
        let mut c = self.background;
        for &(fu, fv, phase, weights) in &self.waves {
            let s = (fu * u * std::f64::consts::TAU + fv * v * std::f64::consts::TAU + phase).sin();
            for k in 0..3 {
                c[k] += TEXTURE_AMPLITUDE / 3.0 * s * weights[k];
            }
        }
        c
    }

    /// Renders with 2×2 supersampling followed by area averaging.
    pub fn render(&self) -> ImageRGB {
        let (hh, ww) = (self.height * SUPERSAMPLE, self.width * SUPERSAMPLE);
        let big = ImageRGB::from_fn(hh, ww, |y, x| {
            let px = (x as f64 + 0.5) / SUPERSAMPLE as f64;
            let py = (y as f64 + 0.5) / SUPERSAMPLE as f64;
            let mut c = self.background_at(px / self.width as f64, py / self.height as f64);
            for f in &self.figures {
                if let Some(fc) = f.shade(px, py, self.height, self.width) {
                    c = fc;
                }
            }
            c
        });
        big.resize(self.height, self.width)
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// `count` scenes of `dims = (height, width)`. Scene `i` depends only on
/// `(seed, i)`, and every fifth scene goes to the validation split.
pub fn synth_dataset(seed: u64, count: usize, dims: (usize, usize)) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::InvalidArgument("scene count must be at least 1".into()));
    }
    if dims.0 < 32 || dims.1 < 32 {
        return Err(Error::InvalidArgument(format!(
            "scene size {}x{} is below 32x32",
            dims.0, dims.1
        )));
    }
    Ok((0..count)
        .map(|i| {
            let layout = sample_layout(&mut scene_rng(seed, i), dims.0, dims.1);
            Scene {
                image: layout.render(),
                boxes: layout.boxes(),
                split: Split::for_index(i),
            }
        })
        .collect())
}

pub fn split_scenes(scenes: &[Scene], split: Split) -> Vec<&Scene> {
    scenes.iter().filter(|s| s.split == split).collect()
}
