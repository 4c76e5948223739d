//! Gaussian heatmap targets and the combined training loss.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::selection::GazeLoss;

use super::blocks::{ModelOutputs, HEATMAP_SIZE};
use super::NnError;

pub const DEFAULT_TARGET_SIGMA: f64 = 3.0;

/// Unnormalized Gaussian on the 64×64 grid, peak 1 at the cell containing
/// `target` (given in grid pixels, `[0, 64)²`).
pub fn gaussian_target_heatmap<T: Real>(target: [T; 2], sigma_px: T) -> Result<Vec<T>, NnError> {
    let size = T::from_usize_lossy(HEATMAP_SIZE);
    let inside = |v: T| v >= T::zero() && v < size;
    if !(inside(target[0]) && inside(target[1])) {
        return Err(NnError::OutOfBounds(target[0].as_f64(), target[1].as_f64()));
    }
    if !(sigma_px > T::zero()) {
        return Err(NnError::ShapeMismatch(format!("sigma must be positive, got {sigma_px}")));
    }
    let (cx, cy) = (target[0].floor(), target[1].floor());
    let denom = T::lit(2.0) * sigma_px * sigma_px;
    Ok((0..HEATMAP_SIZE * HEATMAP_SIZE)
        .map(|i| {
            let dx = T::from_usize_lossy(i % HEATMAP_SIZE) - cx;
            let dy = T::from_usize_lossy(i / HEATMAP_SIZE) - cy;
            (-(dx * dx + dy * dy) / denom).exp()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 0.3, lambda: 0.1 }
    }
}

/// Supervision for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTarget<T> {
    /// Gaussian target; `None` when the target is out of frame, which
    /// masks the heatmap term.
    pub heatmap: Option<Vec<T>>,
    /// In/out label; occluded targets count as inside.
    pub inside: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub heatmap: T,
    pub inout: T,
    pub gaze: T,
    /// `∂L/∂H` per view.
    pub d_heatmap: Vec<Vec<T>>,
    /// `∂L/∂logit` per view.
    pub d_logit: Vec<T>,
    /// Multiplier for each view's gaze-loss gradients.
    pub gaze_scale: T,
}

fn bce<T: Real>(p: T, inside: bool) -> T {
    let tiny = T::min_positive_value();
    if inside {
        -p.max(tiny).ln()
    } else {
        -(T::one() - p).max(tiny).ln()
    }
}

/// `L = α·L_hm + β·L_io + λ·L_gaze`, each term averaged over the views.
/// `L_hm` is the mean squared error over the 64×64 map, `L_io` the binary
/// cross-entropy of `p_in`, and `L_gaze` the uncertainty-weighted gaze loss
/// (views without gaze supervision contribute zero).
pub fn total_loss<T: Real>(
    outputs: &[ModelOutputs<T>],
    targets: &[ViewTarget<T>],
    gaze: &[Option<GazeLoss<T>>],
    w: &LossWeights,
) -> Result<LossBreakdown<T>, NnError> {
    if outputs.is_empty() || outputs.len() != targets.len() || outputs.len() != gaze.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} outputs, {} targets, {} gaze terms",
            outputs.len(),
            targets.len(),
            gaze.len()
        )));
    }
    let cells = HEATMAP_SIZE * HEATMAP_SIZE;
    let inv_views = T::one() / T::from_usize_lossy(outputs.len());
    let inv_cells = T::one() / T::from_usize_lossy(cells);
    let (alpha, beta, lambda) = (T::lit(w.alpha), T::lit(w.beta), T::lit(w.lambda));
    let (mut hm, mut io, mut gz) = (T::zero(), T::zero(), T::zero());
    let mut d_heatmap = Vec::with_capacity(outputs.len());
    let mut d_logit = Vec::with_capacity(outputs.len());
    for ((o, t), g) in outputs.iter().zip(targets).zip(gaze) {
        if o.heatmap.len() != cells {
            return Err(NnError::ShapeMismatch(format!("heatmap has {} cells", o.heatmap.len())));
        }
        match &t.heatmap {
            Some(target) => {
                let mut mse = T::zero();
                let mut dh = Vec::with_capacity(cells);
                for (&h, &y) in o.heatmap.iter().zip(target) {
                    let r = h - y;
                    mse += r * r;
                    dh.push(alpha * inv_views * T::lit(2.0) * r * inv_cells);
                }
                hm += mse * inv_cells;
                d_heatmap.push(dh);
            }
            None => d_heatmap.push(vec![T::zero(); cells]),
        }
        io += bce(o.p_in, t.inside);
        let y = if t.inside { T::one() } else { T::zero() };
        d_logit.push(beta * inv_views * (o.p_in - y));
        if let Some(g) = g {
            gz += g.value;
        }
    }
    let (hm, io, gz) = (hm * inv_views, io * inv_views, gz * inv_views);
    Ok(LossBreakdown {
        total: alpha * hm + beta * io + lambda * gz,
        heatmap: hm,
        inout: io,
        gaze: gz,
        d_heatmap,
        d_logit,
        gaze_scale: lambda * inv_views,
    })
}
