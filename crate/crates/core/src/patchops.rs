//! Patch state, transformation sampling, placement and compositing.
//!
//! Every step from patch pixels to the adversarial scene is recorded on a
//! [`Graph`], so detector gradients flow back to the patch:
//!
//! 1. [`place_patch`] scales and rotates the patch about the centre of a box
//!    and returns the warped patch with its fractional support mask;
//! 2. [`color_jitter`] applies contrast, brightness and per-pixel noise inside
//!    that support;
//! 3. [`apply_patch`] blends it into the image, `(1 − M) ⊙ I + M ⊙ P`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::ImageRGB;
use crate::tensorgrad::{Affine2, Graph, Tensor, Var, WarpPlan};

pub const MIN_PATCH_SIZE: usize = 16;

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            class_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        let sized = self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0;
        let inside = self.cx + self.w / 2.0 > 0.0
            && self.cx - self.w / 2.0 < 1.0
            && self.cy + self.h / 2.0 > 0.0
            && self.cy - self.h / 2.0 < 1.0;
        if finite && sized && inside {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid box {self}")))
        }
    }

    /// `(x0, y0, x1, y1)` in normalized coordinates.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl std::fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[class {} at ({:.4}, {:.4}) size {:.4}x{:.4}]",
            self.class_id, self.cx, self.cy, self.w, self.h
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    FromTarget,
    UniformRandom { seed: u64 },
}

/// The learnable `3 × S × S` patch and the artwork it should resemble.
#[derive(Debug, Clone)]
pub struct PatchCanvas {
    pixels: Tensor,
    target: Option<Tensor>,
}

impl PatchCanvas {
    /// Starts a patch of side `size` either as the resampled target or as
    /// i.i.d. uniform noise.
    pub fn init(target: Option<&ImageRGB>, size: usize, mode: InitMode) -> Result<Self> {
        if size < MIN_PATCH_SIZE {
            return Err(Error::InvalidArgument(format!(
                "patch side {size} is below the minimum of {MIN_PATCH_SIZE}"
            )));
        }
        let target = target.map(|t| t.resize(size, size).to_chw());
        let pixels = match mode {
            InitMode::FromTarget => target.clone().ok_or_else(|| {
                Error::InvalidArgument("from-target initialisation needs a target artwork".into())
            })?,
            InitMode::UniformRandom { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::from_fn([3, size, size], |_| rng.gen::<f64>())
            }
        };
        Ok(Self { pixels, target })
    }

    /// Restores a canvas from raw `3 × S × S` pixels.
    pub fn from_pixels(pixels: Tensor, target: Option<&ImageRGB>) -> Result<Self> {
        let s = pixels.shape().to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] || s[1] < MIN_PATCH_SIZE {
            return Err(Error::InvalidArgument(format!(
                "patch pixels must be 3×S×S with S ≥ {MIN_PATCH_SIZE}, got {s:?}"
            )));
        }
        let target = target.map(|t| t.resize(s[1], s[1]).to_chw());
        let pixels = pixels.map(|v| v.clamp(0.0, 1.0));
        Ok(Self { pixels, target })
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn target(&self) -> Option<&Tensor> {
        self.target.as_ref()
    }

    pub fn to_image(&self) -> ImageRGB {
        ImageRGB::from_chw(&self.pixels).expect("canvas is 3×S×S")
    }

    pub fn target_image(&self) -> Option<ImageRGB> {
        self.target.as_ref().map(|t| ImageRGB::from_chw(t).expect("target is 3×S×S"))
    }

    /// Replaces the pixels, clamping into `[0, 1]`.
    pub fn set_pixels(&mut self, data: Vec<f64>) -> Result<()> {
        let shape = self.pixels.shape().to_vec();
        self.pixels = Tensor::new(shape, data)?.map(|v| v.clamp(0.0, 1.0));
        Ok(())
    }
}

/// Sampling ranges for each transformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EotRanges {
    pub scale: (f64, f64),
    pub max_angle_deg: f64,
    pub noise: f64,
    pub contrast: (f64, f64),
    pub brightness: f64,
}

impl Default for EotRanges {
    fn default() -> Self {
        Self {
            scale: (0.8, 1.2),
            max_angle_deg: 20.0,
            noise: 0.1,
            contrast: (0.8, 1.2),
            brightness: 0.1,
        }
    }
}

impl EotRanges {
    pub fn validate(&self) -> Result<()> {
        let d = EotRanges::default();
        let within = |r: (f64, f64), lim: (f64, f64)| r.0 <= r.1 && r.0 >= lim.0 && r.1 <= lim.1;
        let ok = within(self.scale, d.scale)
            && (0.0..=d.max_angle_deg).contains(&self.max_angle_deg)
            && (0.0..=d.noise).contains(&self.noise)
            && within(self.contrast, d.contrast)
            && (0.0..=d.brightness).contains(&self.brightness);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "transformation ranges {self:?} exceed the supported ranges {d:?}"
            )))
        }
    }
}

/// Which transformations are sampled; disabled ones take identity values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EotConfig {
    pub scale: bool,
    pub rotation: bool,
    pub noise: bool,
    pub contrast: bool,
    pub brightness: bool,
    pub ranges: EotRanges,
}

impl EotConfig {
    pub fn full() -> Self {
        Self {
            scale: true,
            rotation: true,
            noise: true,
            contrast: true,
            brightness: true,
            ranges: EotRanges::default(),
        }
    }

    pub fn none() -> Self {
        Self {
            scale: false,
            rotation: false,
            noise: false,
            contrast: false,
            brightness: false,
            ranges: EotRanges::default(),
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.scale || self.rotation || self.noise || self.contrast || self.brightness)
    }

    /// Parses a comma-separated subset such as `"scale,rotation"`; `"all"`
    /// and `"none"` are accepted.
    pub fn from_subset(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.eq_ignore_ascii_case("all") || spec.eq_ignore_ascii_case("full") {
            return Ok(Self::full());
        }
        let mut cfg = Self::none();
        if spec.is_empty() || spec.eq_ignore_ascii_case("none") {
            return Ok(cfg);
        }
        for part in spec.split(['+', ',']) {
            match part.trim() {
                "scale" => cfg.scale = true,
                "rotation" => cfg.rotation = true,
                "noise" => cfg.noise = true,
                "contrast" => cfg.contrast = true,
                "brightness" => cfg.brightness = true,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown transformation {other:?}"
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn subset_name(&self) -> String {
        if self.is_identity() {
            return "none".into();
        }
        let names = [
            (self.scale, "scale"),
            (self.rotation, "rotation"),
            (self.noise, "noise"),
            (self.contrast, "contrast"),
            (self.brightness, "brightness"),
        ];
        names
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl Default for EotConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// One draw of the transformation distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub scale_jitter: f64,
    pub angle_deg: f64,
    pub noise_seed: u64,
    pub noise_amplitude: f64,
    pub contrast: f64,
    pub brightness: f64,
    /// Offset of the placement anchor from the box centre, in pixels.
    pub anchor_offset: (f64, f64),
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        scale_jitter: 1.0,
        angle_deg: 0.0,
        noise_seed: 0,
        noise_amplitude: 0.0,
        contrast: 1.0,
        brightness: 0.0,
        anchor_offset: (0.0, 0.0),
    };
}

impl Default for TransformParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Draws every parameter (so RNG streams line up across subsets), then
/// resets the disabled ones to identity.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, cfg: &EotConfig) -> TransformParams {
    let r = &cfg.ranges;
    let scale = rng.gen_range(r.scale.0..=r.scale.1);
    let angle = rng.gen_range(-r.max_angle_deg..=r.max_angle_deg);
    let contrast = rng.gen_range(r.contrast.0..=r.contrast.1);
    let brightness = rng.gen_range(-r.brightness..=r.brightness);
    let noise_seed = rng.gen::<u64>();
    TransformParams {
        scale_jitter: if cfg.scale { scale } else { 1.0 },
        angle_deg: if cfg.rotation { angle } else { 0.0 },
        noise_seed,
        noise_amplitude: if cfg.noise { r.noise } else { 0.0 },
        contrast: if cfg.contrast { contrast } else { 1.0 },
        brightness: if cfg.brightness { brightness } else { 0.0 },
        anchor_offset: (0.0, 0.0),
    }
}

/// A patch warped onto the full image together with its support mask.
#[derive(Debug, Clone)]
pub struct Placement {
    pub warped: Var,
    /// `3 × H × W` fractional coverage of the warped patch.
    pub mask: Tensor,
}

/// Side length in pixels of the placed patch before scale jitter.
pub fn placed_side(bbox: &BoundingBox, image_hw: (usize, usize), ratio: f64) -> f64 {
    let (h, w) = image_hw;
    ratio * (bbox.w * w as f64 * bbox.h * h as f64).sqrt()
}

/// The source-to-image map used by [`place_patch`].
pub fn placement_affine(
    patch_size: usize,
    params: &TransformParams,
    bbox: &BoundingBox,
    image_hw: (usize, usize),
    ratio: f64,
) -> Affine2 {
    let (h, w) = image_hw;
    let side = placed_side(bbox, image_hw, ratio) * params.scale_jitter;
    let half = patch_size as f64 / 2.0;
    let centre = (
        bbox.cx * w as f64 + params.anchor_offset.0,
        bbox.cy * h as f64 + params.anchor_offset.1,
    );
    Affine2::translation(centre.0, centre.1)
        .then_after(&Affine2::rotation_deg(params.angle_deg))
        .then_after(&Affine2::scaling(side / patch_size as f64))
        .then_after(&Affine2::translation(-half, -half))
}

/// Scales the `3 × S × S` patch to `ratio · sqrt(box area)` pixels (times
/// the scale jitter), rotates it about the box centre and centres it there.
pub fn place_patch(
    g: &mut Graph,
    patch: Var,
    params: &TransformParams,
    bbox: &BoundingBox,
    image_hw: (usize, usize),
    ratio: f64,
) -> Result<Placement> {
    bbox.validate()?;
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!("patch ratio {ratio} must be positive")));
    }
    let s = g.shape(patch).to_vec();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(Error::InvalidArgument(format!("patch must be 3×S×S, got {s:?}")));
    }
    let affine = placement_affine(s[1], params, bbox, image_hw, ratio);
    let (plan, coverage) = WarpPlan::placement(&affine, (s[1], s[2]), image_hw)?;
    if coverage.iter().all(|&c| c == 0.0) {
        return Err(Error::PatchOffImage {
            bbox: bbox.to_string(),
        });
    }
    let mask = Tensor::new(
        vec![3, image_hw.0, image_hw.1],
        coverage.iter().cycle().take(3 * coverage.len()).copied().collect(),
    )?;
    let warped = g.warp_with_plan(patch, std::sync::Arc::new(plan))?;
    Ok(Placement { warped, mask })
}

/// `clamp(x · contrast + brightness + noise, 0, 1)`; brightness and noise
/// are only added where `mask > 0`.
pub fn color_jitter(g: &mut Graph, warped: Var, mask: &Tensor, params: &TransformParams) -> Result<Var> {
    if g.shape(warped) != mask.shape() {
        return Err(crate::tensorgrad::TensorError::ShapeMismatch {
            op: "color_jitter",
            left: g.shape(warped).to_vec(),
            right: mask.shape().to_vec(),
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
    let amp = params.noise_amplitude;
    let offset: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| {
            if m > 0.0 {
                let n = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
                params.brightness + n
            } else {
                0.0
            }
        })
        .collect();
    let scaled = g.scale(warped, params.contrast)?;
    let off = g.constant(Tensor::new(mask.shape().to_vec(), offset)?);
    let shifted = g.add(scaled, off)?;
    Ok(g.clamp(shifted, 0.0, 1.0)?)
}

/// `(1 − M) ⊙ I + M ⊙ P`.
pub fn apply_patch(g: &mut Graph, image: Var, warped: Var, mask: &Tensor) -> Result<Var> {
    let inv = g.constant(mask.map(|m| 1.0 - m));
    let m = g.constant(mask.clone());
    let kept = g.mul(inv, image)?;
    let pasted = g.mul(m, warped)?;
    Ok(g.add(kept, pasted)?)
}

/// Places, jitters and pastes the patch onto every box of `target_class`,
/// one box after another. `transforms[i]` belongs to `boxes[i]`.
pub fn patch_scene(
    g: &mut Graph,
    image: Var,
    patch: Var,
    boxes: &[BoundingBox],
    transforms: &[TransformParams],
    ratio: f64,
    target_class: usize,
) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("scene must be 3×H×W, got {s:?}")));
    }
    let hw = (s[1], s[2]);
    let mut current = image;
    for (bbox, params) in boxes.iter().zip(transforms) {
        if bbox.class_id != target_class {
            continue;
        }
        let placed = place_patch(g, patch, params, bbox, hw, ratio)?;
        let jittered = color_jitter(g, placed.warped, &placed.mask, params)?;
        current = apply_patch(g, current, jittered, &placed.mask)?;
    }
    Ok(current)
}

/// Non-differentiable [`patch_scene`] over every given box.
pub fn composite(
    image: &ImageRGB,
    patch: &Tensor,
    boxes: &[BoundingBox],
    transforms: &[TransformParams],
    ratio: f64,
) -> Result<ImageRGB> {
    if boxes.len() != transforms.len() {
        return Err(Error::InvalidArgument(format!(
            "{} boxes but {} transforms",
            boxes.len(),
            transforms.len()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(patch.clone());
    let mut current = g.constant(image.to_chw());
    let hw = (image.height(), image.width());
    for (bbox, params) in boxes.iter().zip(transforms) {
        let placed = place_patch(&mut g, p, params, bbox, hw, ratio)?;
        let jittered = color_jitter(&mut g, placed.warped, &placed.mask, params)?;
        current = apply_patch(&mut g, current, jittered, &placed.mask)?;
    }
    ImageRGB::from_chw(g.value(current))
}
