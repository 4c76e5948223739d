//! Uncertainty-weighted gaze loss and cross-view gaze selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{relative_rotation, Extrinsics};
use crate::gaze::GazeVector;
use crate::linalg::Vec3;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("zero-length gaze vector")]
    ZeroVector,
    #[error("uncertainty must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("no pairs to aggregate")]
    EmptyInput,
    #[error("pairs disagree on the primary view: {0} vs {1}")]
    MixedPrimary(String, String),
}

/// A view's gaze estimate with its aleatoric uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazePrediction<T> {
    pub view_id: String,
    pub g: GazeVector<T>,
    pub sigma: T,
}

impl<T: Real> GazePrediction<T> {
    pub fn new(view_id: impl Into<String>, g: GazeVector<T>, sigma: T) -> Result<Self, SelectionError> {
        if !(sigma > T::zero() && sigma.is_finite()) {
            return Err(SelectionError::NonPositiveSigma(sigma.as_f64()));
        }
        Ok(Self { view_id: view_id.into(), g, sigma })
    }

    /// From the unconstrained `log σ` parameterisation.
    pub fn from_log_sigma(view_id: impl Into<String>, g: GazeVector<T>, log_sigma: T) -> Result<Self, SelectionError> {
        Self::new(view_id, g, log_sigma.exp())
    }
}

/// Loss value with analytic partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazeLoss<T> {
    pub value: T,
    pub grad_g: Vec3<T>,
    pub grad_sigma: T,
    /// Derivative with respect to `log σ`, i.e. `σ·∂L/∂σ`.
    pub grad_log_sigma: T,
    pub cosine: T,
}

/// `L = (1 − cos(g, ĝ)) / (2σ²) + ½·log σ²`.
pub fn gaze_loss<T: Real>(g: GazeVector<T>, sigma: T, gt: GazeVector<T>) -> Result<GazeLoss<T>, SelectionError> {
    let (ng, nt) = (g.norm(), gt.norm());
    if !(ng > T::zero() && nt > T::zero()) {
        return Err(SelectionError::ZeroVector);
    }
    if !(sigma > T::zero()) {
        return Err(SelectionError::NonPositiveSigma(sigma.as_f64()));
    }
    let half = T::lit(0.5);
    let cos = g.dot(gt) / (ng * nt);
    let inv_s2 = T::one() / (sigma * sigma);
    let value = half * inv_s2 * (T::one() - cos) + sigma.ln();
    // ∂cos/∂g = ĝ/(|g||ĝ|) − cos·g/|g|²
    let dcos = gt * (T::one() / (ng * nt)) - g * (cos / (ng * ng));
    let grad_g = dcos * (-half * inv_s2);
    let grad_sigma = -(T::one() - cos) * inv_s2 / sigma + T::one() / sigma;
    Ok(GazeLoss { value, grad_g, grad_sigma, grad_log_sigma: grad_sigma * sigma, cosine: cos })
}

/// Loss of a prediction against a ground-truth direction.
pub fn prediction_loss<T: Real>(pred: &GazePrediction<T>, gt: GazeVector<T>) -> Result<GazeLoss<T>, SelectionError> {
    gaze_loss(pred.g, pred.sigma, gt)
}

/// Which view supplied the gaze used by both views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult<T> {
    /// Final gaze vector for view 1, in camera-1 coordinates.
    pub g1: GazeVector<T>,
    /// Final gaze vector for view 2, in camera-2 coordinates.
    pub g2: GazeVector<T>,
    pub chosen_view: String,
    pub chosen_sigma: T,
    /// `false` on a σ tie, where each view keeps its own prediction.
    pub transferred: bool,
}

/// Keeps the lower-σ view's gaze and rotates it into the other camera:
/// `g_j' = R_j·R_i⁻¹·g_i`. On an exact σ tie both views keep their own
/// vectors and view 1 is reported as chosen.
pub fn select_and_transfer<T: Real>(
    p1: &GazePrediction<T>,
    p2: &GazePrediction<T>,
    cam1: &Extrinsics<T>,
    cam2: &Extrinsics<T>,
) -> SelectionResult<T> {
    if p1.sigma < p2.sigma {
        SelectionResult {
            g1: p1.g,
            g2: relative_rotation(cam2, cam1) * p1.g,
            chosen_view: p1.view_id.clone(),
            chosen_sigma: p1.sigma,
            transferred: true,
        }
    } else if p2.sigma < p1.sigma {
        SelectionResult {
            g1: relative_rotation(cam1, cam2) * p2.g,
            g2: p2.g,
            chosen_view: p2.view_id.clone(),
            chosen_sigma: p2.sigma,
            transferred: true,
        }
    } else {
        SelectionResult {
            g1: p1.g,
            g2: p2.g,
            chosen_view: p1.view_id.clone(),
            chosen_sigma: p1.sigma,
            transferred: false,
        }
    }
}

/// One view pair's selection together with whatever it produced downstream.
#[derive(Clone, Debug)]
pub struct PairOutcome<T, O> {
    pub primary_view: String,
    pub reference_view: String,
    pub selection: SelectionResult<T>,
    pub output: O,
}

/// Picks the pair whose selected σ is smallest; ties go to the
/// lexicographically lowest reference-camera id.
pub fn aggregate_pairs<T: Real, O>(pairs: &[PairOutcome<T, O>]) -> Result<&PairOutcome<T, O>, SelectionError> {
    let first = pairs.first().ok_or(SelectionError::EmptyInput)?;
    if let Some(other) = pairs.iter().find(|p| p.primary_view != first.primary_view) {
        return Err(SelectionError::MixedPrimary(first.primary_view.clone(), other.primary_view.clone()));
    }
    let mut best = first;
    for p in &pairs[1..] {
        let s = p.selection.chosen_sigma;
        let b = best.selection.chosen_sigma;
        if s < b || (s == b && p.reference_view < best.reference_view) {
            best = p;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat3;

    #[test]
    fn loss_examples() {
        let g = Vec3::new(0.2f64, -0.4, 1.0);
        assert!(gaze_loss(g, 1.0, g * 3.0).unwrap().value.abs() < 1e-15);
        let l = gaze_loss(Vec3::new(1.0f64, 0.0, 0.0), 1.0, Vec3::new(0.0, 2.0, 0.0)).unwrap();
        assert!((l.value - 0.5).abs() < 1e-15);
        assert_eq!(gaze_loss(Vec3::zeros(), 1.0, g), Err(SelectionError::ZeroVector));
        assert_eq!(gaze_loss(g, 0.0, g), Err(SelectionError::NonPositiveSigma(0.0)));
    }

    #[test]
    fn optimal_sigma_for_orthogonal_vectors_is_one() {
        let (a, b) = (Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        let grid: Vec<f64> = (1..=4000).map(|i| i as f64 * 1e-3).collect();
        let best = grid
            .iter()
            .copied()
            .min_by(|x, y| {
                let lx = gaze_loss(a, *x, b).unwrap().value;
                let ly = gaze_loss(a, *y, b).unwrap().value;
                lx.partial_cmp(&ly).unwrap()
            })
            .unwrap();
        assert!((best - 1.0).abs() <= 1e-3);
    }

    fn ext(r: Mat3<f64>) -> Extrinsics<f64> {
        Extrinsics::new(r, Vec3::zeros()).unwrap()
    }

    #[test]
    fn transfer_examples() {
        let p1 = GazePrediction::new("a", Vec3::new(0.1, 0.2, 0.9), 0.1).unwrap();
        let p2 = GazePrediction::new("b", Vec3::new(-0.5, 0.0, 0.3), 0.4).unwrap();
        let id = ext(Mat3::identity());
        let r = select_and_transfer(&p1, &p2, &id, &id);
        assert_eq!(r.g2, p1.g);
        assert_eq!(r.chosen_view, "a");
        assert_eq!(r.chosen_sigma, 0.1);

        // R_j·R_i⁻¹ = Rz(90°) with view 1 chosen and view 2 receiving.
        let rz = ext(Mat3::rot_z(std::f64::consts::FRAC_PI_2));
        let p1 = GazePrediction::new("a", Vec3::new(1.0, 0.0, 0.0), 0.1).unwrap();
        let r = select_and_transfer(&p1, &p2, &id, &rz);
        assert!((r.g2 - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);

        // View 2 wins.
        let p2 = GazePrediction::new("b", Vec3::new(1.0, 0.0, 0.0), 0.05).unwrap();
        let r = select_and_transfer(&p1, &p2, &rz, &id);
        assert!((r.g1 - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        assert_eq!(r.chosen_view, "b");
    }

    #[test]
    fn tie_keeps_both() {
        let p1 = GazePrediction::new("a", Vec3::new(1.0, 0.0, 0.0), 0.2).unwrap();
        let p2 = GazePrediction::new("b", Vec3::new(0.0, 1.0, 0.0), 0.2).unwrap();
        let r = select_and_transfer(&p1, &p2, &ext(Mat3::rot_x(0.3)), &ext(Mat3::rot_y(1.0)));
        assert_eq!((r.g1, r.g2), (p1.g, p2.g));
        assert!(!r.transferred);
    }

    fn outcome(reference: &str, sigma: f64, out: usize) -> PairOutcome<f64, usize> {
        PairOutcome {
            primary_view: "cam1".into(),
            reference_view: reference.into(),
            selection: SelectionResult {
                g1: Vec3::new(0.0, 0.0, 1.0),
                g2: Vec3::new(0.0, 0.0, 1.0),
                chosen_view: "cam1".into(),
                chosen_sigma: sigma,
                transferred: true,
            },
            output: out,
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_pairs::<f64, usize>(&[]).unwrap_err(), SelectionError::EmptyInput);
        assert_eq!(aggregate_pairs(&[outcome("cam2", 0.7, 9)]).unwrap().output, 9);
        let planted = [0.3, 0.1, 0.2, 0.4, 0.5];
        let pairs: Vec<_> = planted
            .iter()
            .enumerate()
            .map(|(i, &s)| outcome(&format!("cam{}", i + 2), s, i + 1))
            .collect();
        assert_eq!(aggregate_pairs(&pairs).unwrap().output, 2);

        let tie = [outcome("cam5", 0.2, 1), outcome("cam3", 0.2, 2), outcome("cam4", 0.2, 3)];
        assert_eq!(aggregate_pairs(&tie).unwrap().output, 2);

        let mut mixed = vec![outcome("cam2", 0.2, 1), outcome("cam3", 0.1, 2)];
        mixed[1].primary_view = "cam9".into();
        assert!(matches!(aggregate_pairs(&mixed), Err(SelectionError::MixedPrimary(..))));
    }
}
