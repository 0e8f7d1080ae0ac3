//! Bilinear resampling through an affine map.
//!
//! Coordinates are continuous with pixel `(x, y)` centred at `(x + 0.5, y + 0.5)`.
//! An [`Affine2`] maps source coordinates to destination coordinates; the warp
//! samples every destination pixel through the inverse map. Source reads that
//! fall outside the image contribute zero.

use super::tensor::{Result, TensorError};

/// A 2×3 affine map `[x', y'] = A [x, y, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    pub fn scaling(s: f64) -> Self {
        Self {
            m: [[s, 0.0, 0.0], [0.0, s, 0.0]],
        }
    }

    /// Rotation about the origin. Multiples of 90° use exact sines and cosines.
    pub fn rotation_deg(angle: f64) -> Self {
        let quarter = angle / 90.0;
        let (s, c) = if quarter.fract() == 0.0 {
            match (quarter as i64).rem_euclid(4) {
                0 => (0.0, 1.0),
                1 => (1.0, 0.0),
                2 => (0.0, -1.0),
                _ => (-1.0, 0.0),
            }
        } else {
            angle.to_radians().sin_cos()
        };
        Self {
            m: [[c, -s, 0.0], [s, c, 0.0]],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Affine2) -> Affine2 {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            row[0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            row[1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            row[2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine2 { m }
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Result<Affine2> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(TensorError::SingularAffine(det));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Affine2 {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }
}

/// One destination pixel and the source pixels it blends.
#[derive(Debug, Clone)]
pub(crate) struct WarpTap {
    pub dst: usize,
    pub len: u8,
    pub src: [usize; 4],
    pub weight: [f64; 4],
}

/// Precomputed sampling pattern of a warp, shared by every channel.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    pub(crate) src_hw: (usize, usize),
    pub(crate) dst_hw: (usize, usize),
    pub(crate) taps: Vec<WarpTap>,
}

impl WarpPlan {
    /// Builds the plan for warping a `src_hw` image into a `dst_hw` canvas.
    /// Samples outside the source read as zero.
    pub fn new(affine: &Affine2, src_hw: (usize, usize), dst_hw: (usize, usize)) -> Result<Self> {
        let inv = affine.inverse()?;
        let (sh, sw) = src_hw;
        let (dh, dw) = dst_hw;

        // Only destination pixels near the image of the source rectangle can
        // receive a non-zero sample.
        let corners = [
            (-1.0, -1.0),
            (sw as f64 + 1.0, -1.0),
            (-1.0, sh as f64 + 1.0),
            (sw as f64 + 1.0, sh as f64 + 1.0),
        ]
        .map(|(x, y)| affine.apply(x, y));
        let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let x0 = min_x.floor().max(0.0) as usize;
        let y0 = min_y.floor().max(0.0) as usize;
        let x1 = (max_x.ceil().max(0.0) as usize).min(dw);
        let y1 = (max_y.ceil().max(0.0) as usize).min(dh);

        let mut taps = Vec::new();
        for oy in y0..y1 {
            for ox in x0..x1 {
                let (sx, sy) = inv.apply(ox as f64 + 0.5, oy as f64 + 0.5);
                let (px, py) = (sx - 0.5, sy - 0.5);
                let fx0 = px.floor();
                let fy0 = py.floor();
                let (ax, ay) = (px - fx0, py - fy0);
                let mut tap = WarpTap {
                    dst: oy * dw + ox,
                    len: 0,
                    src: [0; 4],
                    weight: [0.0; 4],
                };
                for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
                    for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
                        let w = wx * wy;
                        let (ix, iy) = (fx0 + dx, fy0 + dy);
                        if w > 0.0 && ix >= 0.0 && iy >= 0.0 && ix < sw as f64 && iy < sh as f64 {
                            let k = tap.len as usize;
                            tap.src[k] = iy as usize * sw + ix as usize;
                            tap.weight[k] = w;
                            tap.len += 1;
                        }
                    }
                }
                if tap.len > 0 {
                    taps.push(tap);
                }
            }
        }
        Ok(Self {
            src_hw,
            dst_hw,
            taps,
        })
    }

    /// Plan for pasting a source image: only destination pixels touched by
    /// the mapped source rectangle get taps, and their samples clamp to the
    /// source border instead of fading to zero. Returns the plan with the
    /// exact fraction of each destination pixel covered by the rectangle.
    pub fn placement(affine: &Affine2, src_hw: (usize, usize), dst_hw: (usize, usize)) -> Result<(Self, Vec<f64>)> {
        let inv = affine.inverse()?;
        let coverage = exact_coverage(affine, src_hw, dst_hw);
        let (sh, sw) = src_hw;
        let dw = dst_hw.1;
        let mut taps = Vec::new();
        for (dst, _) in coverage.iter().enumerate().filter(|(_, &c)| c > 0.0) {
            let (ox, oy) = (dst % dw, dst / dw);
            let (sx, sy) = inv.apply(ox as f64 + 0.5, oy as f64 + 0.5);
            let px = (sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let py = (sy - 0.5).clamp(0.0, (sh - 1) as f64);
            let (fx0, fy0) = (px.floor(), py.floor());
            let (ax, ay) = (px - fx0, py - fy0);
            let mut tap = WarpTap {
                dst,
                len: 0,
                src: [0; 4],
                weight: [0.0; 4],
            };
            for (dy, wy) in [(0usize, 1.0 - ay), (1, ay)] {
                for (dx, wx) in [(0usize, 1.0 - ax), (1, ax)] {
                    let w = wx * wy;
                    if w > 0.0 {
                        let k = tap.len as usize;
                        tap.src[k] = (fy0 as usize + dy) * sw + fx0 as usize + dx;
                        tap.weight[k] = w;
                        tap.len += 1;
                    }
                }
            }
            taps.push(tap);
        }
        Ok((Self { src_hw, dst_hw, taps }, coverage))
    }

    pub fn src_hw(&self) -> (usize, usize) {
        self.src_hw
    }

    pub fn dst_hw(&self) -> (usize, usize) {
        self.dst_hw
    }

    /// Warps a `channels × src_h × src_w` buffer.
    pub fn apply(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let src_plane = self.src_hw.0 * self.src_hw.1;
        let dst_plane = self.dst_hw.0 * self.dst_hw.1;
        let mut out = vec![0.0; channels * dst_plane];
        for c in 0..channels {
            let s = &src[c * src_plane..(c + 1) * src_plane];
            let o = &mut out[c * dst_plane..(c + 1) * dst_plane];
            for tap in &self.taps {
                let mut acc = 0.0;
                for k in 0..tap.len as usize {
                    acc += tap.weight[k] * s[tap.src[k]];
                }
                o[tap.dst] = acc;
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): scatters destination gradients back.
    pub fn apply_transpose(&self, grad: &[f64], channels: usize, out: &mut [f64]) {
        let src_plane = self.src_hw.0 * self.src_hw.1;
        let dst_plane = self.dst_hw.0 * self.dst_hw.1;
        for c in 0..channels {
            let g = &grad[c * dst_plane..(c + 1) * dst_plane];
            let o = &mut out[c * src_plane..(c + 1) * src_plane];
            for tap in &self.taps {
                let gv = g[tap.dst];
                for k in 0..tap.len as usize {
                    o[tap.src[k]] += tap.weight[k] * gv;
                }
            }
        }
    }

    /// Warp of an all-ones source: the fractional support of the warped image.
    pub fn coverage(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dst_hw.0 * self.dst_hw.1];
        for tap in &self.taps {
            out[tap.dst] = tap.weight[..tap.len as usize].iter().sum();
        }
        out
    }
}

/// Fraction of every destination pixel covered by the image of the source
/// rectangle `[0, w] × [0, h]` under `affine`.
pub fn exact_coverage(affine: &Affine2, src_hw: (usize, usize), dst_hw: (usize, usize)) -> Vec<f64> {
    let (sh, sw) = (src_hw.0 as f64, src_hw.1 as f64);
    let (dh, dw) = dst_hw;
    let mut quad = [(0.0, 0.0), (sw, 0.0), (sw, sh), (0.0, sh)].map(|(x, y)| affine.apply(x, y));
    if signed_area(&quad) < 0.0 {
        quad.reverse();
    }
    let mut out = vec![0.0; dh * dw];
    let min_x = quad.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let max_x = quad.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = quad.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_y = quad.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let x0 = min_x.floor().max(0.0) as usize;
    let y0 = min_y.floor().max(0.0) as usize;
    let x1 = (max_x.ceil().max(0.0) as usize).min(dw);
    let y1 = (max_y.ceil().max(0.0) as usize).min(dh);
    for oy in y0..y1 {
        for ox in x0..x1 {
            let (fx, fy) = (ox as f64, oy as f64);
            let mut poly = vec![(fx, fy), (fx + 1.0, fy), (fx + 1.0, fy + 1.0), (fx, fy + 1.0)];
            for i in 0..4 {
                poly = clip_half_plane(&poly, quad[i], quad[(i + 1) % 4]);
                if poly.is_empty() {
                    break;
                }
            }
            out[oy * dw + ox] = signed_area(&poly).clamp(0.0, 1.0);
        }
    }
    out
}

fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

/// Keeps the part of `poly` left of the directed edge `a → b`.
fn clip_half_plane(poly: &[(f64, f64)], a: (f64, f64), b: (f64, f64)) -> Vec<(f64, f64)> {
    let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        let (sp, sq) = (side(p), side(q));
        if sp >= 0.0 {
            out.push(p);
        }
        if (sp >= 0.0) != (sq >= 0.0) {
            let t = sp / (sp - sq);
            out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        }
    }
    out
}
