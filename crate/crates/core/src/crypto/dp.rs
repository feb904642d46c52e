//! Differential-privacy perturbation of real vectors: L2 clipping followed by
//! per-coordinate Laplace or Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CryptoError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpMechanism {
    Laplace,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub mechanism: DpMechanism,
    pub epsilon: f64,
    #[serde(default)]
    pub delta: f64,
    pub clip_norm: f64,
    /// Explicit noise scale replacing the calibrated one; `Some(0.0)` turns
    /// the mechanism into pure clipping for tests.
    #[serde(default)]
    pub scale_override: Option<f64>,
}

impl DpParams {
    pub fn gaussian(epsilon: f64, delta: f64, clip_norm: f64) -> Self {
        Self { mechanism: DpMechanism::Gaussian, epsilon, delta, clip_norm, scale_override: None }
    }

    pub fn laplace(epsilon: f64, clip_norm: f64) -> Self {
        Self { mechanism: DpMechanism::Laplace, epsilon, delta: 0.0, clip_norm, scale_override: None }
    }

    pub fn validate(&self) -> Result<(), CryptoError> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(CryptoError::InvalidParameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(CryptoError::InvalidParameter(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        if self.mechanism == DpMechanism::Gaussian && self.delta == 0.0 && self.scale_override.is_none() {
            return Err(CryptoError::InvalidParameter("the Gaussian mechanism needs delta > 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(CryptoError::InvalidParameter(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if let Some(s) = self.scale_override {
            if !(s >= 0.0) {
                return Err(CryptoError::InvalidParameter("noise scale override must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Per-coordinate noise scale for an L2 sensitivity equal to the clip norm:
    /// Laplace `b = C / ε`, Gaussian `σ = C · sqrt(2 ln(1.25/δ)) / ε`.
    pub fn noise_scale(&self) -> f64 {
        self.noise_scale_for(self.clip_norm)
    }

    pub fn noise_scale_for(&self, sensitivity: f64) -> f64 {
        if let Some(s) = self.scale_override {
            return s;
        }
        match self.mechanism {
            DpMechanism::Laplace => sensitivity / self.epsilon,
            DpMechanism::Gaussian => sensitivity * (2.0 * (1.25 / self.delta).ln()).sqrt() / self.epsilon,
        }
    }
}

/// Rescales `v` so its L2 norm is at most `clip_norm`.
pub fn clip_l2(v: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= clip_norm || norm == 0.0 {
        return v.to_vec();
    }
    let factor = clip_norm / norm;
    let mut out: Vec<f64> = v.iter().map(|x| x * factor).collect();
    // floating-point rounding can leave the norm a hair above the bound
    let mut out_norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    while out_norm > clip_norm {
        for x in out.iter_mut() {
            *x *= 1.0 - f64::EPSILON;
        }
        out_norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    out
}

fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    // inverse CDF on u ∈ (-1/2, 1/2)
    let u: f64 = rng.gen::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Clip to `params.clip_norm`, then add per-coordinate noise.
pub fn dp_perturb<R: Rng + ?Sized>(v: &[f64], params: &DpParams, rng: &mut R) -> Result<Vec<f64>, CryptoError> {
    params.validate()?;
    let mut out = clip_l2(v, params.clip_norm);
    let scale = params.noise_scale();
    if scale == 0.0 {
        return Ok(out);
    }
    match params.mechanism {
        DpMechanism::Laplace => {
            for x in out.iter_mut() {
                *x += sample_laplace(scale, rng);
            }
        }
        DpMechanism::Gaussian => {
            let normal = Normal::new(0.0, scale).map_err(|e| CryptoError::InvalidParameter(e.to_string()))?;
            for x in out.iter_mut() {
                *x += normal.sample(rng);
            }
        }
    }
    Ok(out)
}
