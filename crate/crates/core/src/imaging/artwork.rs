//! Procedural stand-ins for target artworks.
//!
//! Each artwork is a function of normalized coordinates, rendered with 3×3
//! supersampling so it can be produced at any resolution.

use super::ImageRGB;
use crate::error::{Error, Result};

pub const BUILTIN_NAMES: [&str; 4] = ["sunset", "waves", "starry", "mondrian"];

/// Renders the named built-in artwork at `size × size`.
pub fn builtin(name: &str, size: usize) -> Result<ImageRGB> {
    let f: fn(f64, f64) -> [f64; 3] = match name {
        "sunset" => sunset,
        "waves" => waves,
        "starry" => starry,
        "mondrian" => mondrian,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown built-in artwork {other:?} (known: {})",
                BUILTIN_NAMES.join(", ")
            )))
        }
    };
    Ok(render(size, f))
}

fn render(size: usize, f: fn(f64, f64) -> [f64; 3]) -> ImageRGB {
    const SS: usize = 3;
    ImageRGB::from_fn(size, size, |y, x| {
        let mut acc = [0.0; 3];
        for sy in 0..SS {
            for sx in 0..SS {
                let u = (x as f64 + (sx as f64 + 0.5) / SS as f64) / size as f64;
                let v = (y as f64 + (sy as f64 + 0.5) / SS as f64) / size as f64;
                let c = f(u, v);
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
        }
        acc.map(|a| a / (SS * SS) as f64)
    })
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Warm sky gradient, a low sun and a dark rolling horizon.
fn sunset(u: f64, v: f64) -> [f64; 3] {
    let sky = if v < 0.5 {
        mix([0.35, 0.2, 0.5], [0.95, 0.45, 0.3], v / 0.5)
    } else {
        mix([0.95, 0.45, 0.3], [1.0, 0.8, 0.45], (v - 0.5) / 0.25)
    };
    let d = ((u - 0.62).powi(2) + (v - 0.58).powi(2)).sqrt();
    let sun = 1.0 - smoothstep(0.13, 0.15, d);
    let col = mix(sky, [1.0, 0.93, 0.6], sun);
    let horizon = 0.7 + 0.06 * (u * 9.0).sin() + 0.03 * (u * 23.0 + 1.0).sin();
    let hill = smoothstep(horizon - 0.005, horizon + 0.005, v);
    mix(col, [0.18, 0.12, 0.22], hill)
}

/// Layered blue swells with pale crests.
fn waves(u: f64, v: f64) -> [f64; 3] {
    let phase = v * 6.0 + 0.35 * (u * 7.0).sin();
    let band = phase.fract();
    let depth = (phase.floor() / 6.0).clamp(0.0, 1.0);
    let base = mix([0.55, 0.75, 0.9], [0.05, 0.2, 0.45], depth);
    let crest = smoothstep(0.75, 0.9, band) * (1.0 - smoothstep(0.95, 1.0, band));
    mix(base, [0.95, 0.97, 1.0], crest * 0.9)
}

/// Swirling night sky with a bright moon.
fn starry(u: f64, v: f64) -> [f64; 3] {
    let (dx, dy) = (u - 0.4, v - 0.45);
    let r = (dx * dx + dy * dy).sqrt();
    let theta = dy.atan2(dx);
    let swirl = (r * 22.0 - theta * 2.0).sin() * 0.5 + 0.5;
    let base = mix([0.05, 0.1, 0.35], [0.2, 0.35, 0.7], swirl * (1.0 - smoothstep(0.2, 0.6, r)));
    let glow = 1.0 - smoothstep(0.08, 0.1, ((u - 0.78).powi(2) + (v - 0.2).powi(2)).sqrt());
    let ground = smoothstep(0.8, 0.82, v + 0.04 * (u * 12.0).sin());
    let col = mix(base, [0.98, 0.85, 0.3], glow);
    mix(col, [0.08, 0.12, 0.1], ground)
}

/// Primary-colour blocks separated by dark lines.
fn mondrian(u: f64, v: f64) -> [f64; 3] {
    let line = |p: f64, at: f64| (p - at).abs() < 0.02;
    if line(u, 0.3) || line(v, 0.62) || (u > 0.3 && line(u, 0.78)) || (u < 0.3 && line(v, 0.35)) {
        return [0.08, 0.08, 0.1];
    }
    match (u < 0.3, v < 0.62, u < 0.78, v < 0.35) {
        (true, _, _, true) => [0.85, 0.15, 0.12],
        (true, true, _, false) => [0.95, 0.93, 0.88],
        (true, false, _, _) => [0.1, 0.25, 0.65],
        (false, true, true, _) => [0.95, 0.93, 0.88],
        (false, true, false, _) => [0.97, 0.8, 0.1],
        (false, false, true, _) => [0.95, 0.93, 0.88],
        (false, false, false, _) => [0.85, 0.15, 0.12],
    }
}
