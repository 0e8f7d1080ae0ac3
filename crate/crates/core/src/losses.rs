//! The crafting objective: detection, similarity and total-variation terms.
//!
//! ```text
//! total = alpha · det + beta · sign(sim) · sim² + gamma · tv
//! ```
//!
//! The similarity term is squared with its sign kept, so a negative cosine
//! loss still rewards resemblance to the artwork.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensorgrad::{Graph, Tensor, Var};

/// Smoothing inside the total-variation square root.
pub const TV_EPS: f64 = 1e-8;
/// Smallest norm accepted by the cosine similarity.
pub const COSINE_MIN_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimMetric {
    Mse,
    #[default]
    Cosine,
}

impl fmt::Display for SimMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimMetric::Mse => "mse",
            SimMetric::Cosine => "cosine",
        })
    }
}

impl FromStr for SimMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mse" => Ok(SimMetric::Mse),
            "cosine" | "cos" => Ok(SimMetric::Cosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown similarity metric {other:?} (expected mse or cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sim_metric: SimMetric,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 8.0,
            gamma: 0.5,
            sim_metric: SimMetric::Cosine,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Values of the individual terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub det: f64,
    pub sim_raw: f64,
    pub sim_effective: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(det: f64, sim_raw: f64, tv: f64, weights: &LossWeights) -> Self {
        let sim_effective = sim_raw * sim_raw.abs();
        Self {
            det,
            sim_raw,
            sim_effective,
            tv,
            total: weights.alpha * det + weights.beta * sim_effective + weights.gamma * tv,
        }
    }
}

/// Mean over the batch of the per-image attack scores.
pub fn detection_loss(g: &mut Graph, attack_scores: Var) -> Result<Var> {
    let s = g.shape(attack_scores);
    if s.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "attack scores must be a vector, got {s:?}"
        )));
    }
    if s[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(g.mean_all(attack_scores)?)
}

fn same_shape(g: &Graph, p: Var, n: Var, op: &'static str) -> Result<()> {
    if g.shape(p) != g.shape(n) {
        return Err(crate::tensorgrad::TensorError::ShapeMismatch {
            op,
            left: g.shape(p).to_vec(),
            right: g.shape(n).to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `(1/n) Σ (P − N)²`.
pub fn similarity_mse(g: &mut Graph, p: Var, n: Var) -> Result<Var> {
    same_shape(g, p, n, "similarity_mse")?;
    let d = g.sub(p, n)?;
    let sq = g.square(d)?;
    Ok(g.mean_all(sq)?)
}

/// `−(Σ P·N) / (‖P‖ ‖N‖)` over all elements.
pub fn similarity_cosine(g: &mut Graph, p: Var, n: Var) -> Result<Var> {
    same_shape(g, p, n, "similarity_cosine")?;
    for v in [p, n] {
        let norm = g.value(v).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= COSINE_MIN_NORM {
            return Err(Error::ZeroNorm(norm));
        }
    }
    let prod = g.mul(p, n)?;
    let dot = g.sum_all(prod)?;
    let p2 = g.square(p)?;
    let p2 = g.sum_all(p2)?;
    let pn = g.sqrt(p2)?;
    let n2 = g.square(n)?;
    let n2 = g.sum_all(n2)?;
    let nn = g.sqrt(n2)?;
    let denom = g.mul(pn, nn)?;
    let cos = g.div(dot, denom)?;
    Ok(g.scale(cos, -1.0)?)
}

pub fn similarity(g: &mut Graph, metric: SimMetric, p: Var, n: Var) -> Result<Var> {
    match metric {
        SimMetric::Mse => similarity_mse(g, p, n),
        SimMetric::Cosine => similarity_cosine(g, p, n),
    }
}

/// `Σ sqrt((P[i+1,j] − P[i,j])² + (P[i,j+1] − P[i,j])² + ε)` over all pixels
/// and channels of a `C × H × W` patch; a missing neighbour contributes a
/// zero difference.
pub fn tv_loss(g: &mut Graph, p: Var) -> Result<Var> {
    let s = g.shape(p);
    if s.len() < 2 || s[s.len() - 1] < 2 || s[s.len() - 2] < 2 {
        return Err(Error::InvalidArgument(format!(
            "total variation needs at least 2×2 spatial extent, got {s:?}"
        )));
    }
    let dv = g.spatial_diff(p, 0)?;
    let dh = g.spatial_diff(p, 1)?;
    let dv2 = g.square(dv)?;
    let dh2 = g.square(dh)?;
    let sum = g.add(dv2, dh2)?;
    let smoothed = g.offset(sum, TV_EPS)?;
    let mag = g.sqrt(smoothed)?;
    Ok(g.sum_all(mag)?)
}

/// Composes the three terms on the graph and reports their values.
pub fn total_loss(
    g: &mut Graph,
    det: Var,
    sim_raw: Option<Var>,
    tv: Var,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let det_v = g.value(det).item().ok_or_else(|| Error::InvalidArgument("det must be scalar".into()))?;
    let tv_v = g.value(tv).item().ok_or_else(|| Error::InvalidArgument("tv must be scalar".into()))?;
    let sim_v = match sim_raw {
        Some(s) => g.value(s).item().ok_or_else(|| Error::InvalidArgument("sim must be scalar".into()))?,
        None => 0.0,
    };
    let breakdown = LossBreakdown::compose(det_v, sim_v, tv_v, weights);

    let a = g.scale(det, weights.alpha)?;
    let c = g.scale(tv, weights.gamma)?;
    let mut total = g.add(a, c)?;
    if let Some(s) = sim_raw {
        // sign(s)·s², with the sign held constant.
        let sq = g.square(s)?;
        let sign = if sim_v < 0.0 { -1.0 } else { 1.0 };
        let b = g.scale(sq, weights.beta * sign)?;
        total = g.add(total, b)?;
    }
    Ok((total, breakdown))
}

/// Value-only helpers for callers without a graph.
pub mod eval {
    use super::*;

    pub fn similarity(metric: SimMetric, p: &Tensor, n: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let (pv, nv) = (g.constant(p.clone()), g.constant(n.clone()));
        let s = super::similarity(&mut g, metric, pv, nv)?;
        Ok(g.value(s).item().unwrap())
    }

    pub fn tv(p: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let t = tv_loss(&mut g, pv)?;
        Ok(g.value(t).item().unwrap())
    }
}
