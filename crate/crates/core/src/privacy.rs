//! Clipping and the Gaussian mechanism for released updates.
//!
//! A client update is first clipped to L2 norm `C`, then every coordinate
//! receives independent `N(0, sigma^2)` noise with
//!
//! ```text
//! sigma = C * sqrt(2 * ln(1.25 / delta)) / epsilon
//! ```
//!
//! This is the classical (epsilon, delta) calibration with L2 sensitivity taken
//! as `C`: one client's clipped update is replaced by another. Under
//! add/remove-one semantics the sensitivity would be `2C`; callers wanting that
//! convention can double `clip_norm` in the budget. The calibration is only
//! proven for `epsilon <= 1`; larger budgets are accepted with a warning.
//!
//! Budgets are per release. Nothing here composes budgets across rounds.
//! A Laplace mechanism for pure epsilon-DP is not provided.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Params};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("clip norm must be positive and finite, got {0}")]
    InvalidClipNorm(f64),
    #[error("noise scale must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("update is not finite")]
    NonFinite,
}

impl From<ModelError> for PrivacyError {
    fn from(_: ModelError) -> Self {
        PrivacyError::NonFinite
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub enabled: bool,
}

impl PrivacyBudget {
    pub fn disabled() -> Self {
        Self {
            epsilon: 1.0,
            delta: 1e-5,
            clip_norm: 1.0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(PrivacyError::InvalidEpsilon(self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(PrivacyError::InvalidDelta(self.delta));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(PrivacyError::InvalidClipNorm(self.clip_norm));
        }
        if self.enabled && self.epsilon > 1.0 {
            log::warn!(
                "epsilon = {} > 1: the Gaussian calibration is outside its proven range",
                self.epsilon
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Gaussian,
    None,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Gaussian => "gaussian",
            Mechanism::None => "none",
        }
    }
}

/// What was done to an update before release.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseReceipt {
    pub sigma: f64,
    pub clip_applied: bool,
    pub pre_clip_norm: f64,
    pub mechanism: Mechanism,
}

impl NoiseReceipt {
    pub fn none(pre_clip_norm: f64) -> Self {
        Self {
            sigma: 0.0,
            clip_applied: false,
            pre_clip_norm,
            mechanism: Mechanism::None,
        }
    }
}

/// L2 norm with rescaling so that huge coordinates do not overflow.
fn stable_norm<T: Scalar>(v: &[T]) -> T {
    let plain = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if plain.is_finite() && plain > T::zero() {
        return plain;
    }
    let max = v.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    if max == T::zero() {
        return T::zero();
    }
    max * v.iter().map(|&x| (x / max) * (x / max)).sum::<T>().sqrt()
}

/// Project `v` onto the L2 ball of radius `clip_norm`.
pub fn clip<T: Scalar>(
    v: &Params<T>,
    clip_norm: f64,
) -> Result<(Params<T>, NoiseReceipt), PrivacyError> {
    if !(clip_norm > 0.0 && clip_norm.is_finite()) {
        return Err(PrivacyError::InvalidClipNorm(clip_norm));
    }
    let norm = stable_norm(v.as_slice());
    if !norm.is_finite() {
        return Err(PrivacyError::NonFinite);
    }
    let mut receipt = NoiseReceipt::none(norm.widen());
    let c = T::of(clip_norm);
    if norm <= c {
        return Ok((v.clone(), receipt));
    }
    receipt.clip_applied = true;
    let scale = c / norm;
    let clipped = Params::new(v.iter().map(|&x| x * scale).collect())?;
    Ok((clipped, receipt))
}

/// Gaussian-mechanism noise scale for `budget`.
pub fn calibrate_sigma(budget: &PrivacyBudget) -> Result<f64, PrivacyError> {
    budget.validate()?;
    Ok(budget.clip_norm * (2.0 * (1.25 / budget.delta).ln()).sqrt() / budget.epsilon)
}

/// Add i.i.d. `N(0, sigma^2)` noise to every coordinate. `sigma = 0` is the identity.
pub fn add_noise<T: Scalar>(
    v: &Params<T>,
    sigma: f64,
    seed: u64,
) -> Result<(Params<T>, NoiseReceipt), PrivacyError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(PrivacyError::InvalidSigma(sigma));
    }
    let pre = stable_norm(v.as_slice()).widen();
    if sigma == 0.0 {
        return Ok((v.clone(), NoiseReceipt::none(pre)));
    }
    let mut rng = rng::rng_from(seed);
    let noisy = v
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            x + T::of(sigma * z)
        })
        .collect();
    let receipt = NoiseReceipt {
        sigma,
        clip_applied: false,
        pre_clip_norm: pre,
        mechanism: Mechanism::Gaussian,
    };
    Ok((Params::new(noisy)?, receipt))
}

/// Clip, calibrate and add noise; the identity when the budget is disabled.
pub fn privatize<T: Scalar>(
    update: &Params<T>,
    budget: &PrivacyBudget,
    seed: u64,
) -> Result<(Params<T>, NoiseReceipt), PrivacyError> {
    budget.validate()?;
    if !budget.enabled {
        let pre = stable_norm(update.as_slice()).widen();
        return Ok((update.clone(), NoiseReceipt::none(pre)));
    }
    let (clipped, clip_receipt) = clip(update, budget.clip_norm)?;
    let sigma = calibrate_sigma(budget)?;
    let (noisy, noise_receipt) = add_noise(&clipped, sigma, seed)?;
    Ok((
        noisy,
        NoiseReceipt {
            sigma: noise_receipt.sigma,
            clip_applied: clip_receipt.clip_applied,
            pre_clip_norm: clip_receipt.pre_clip_norm,
            mechanism: noise_receipt.mechanism,
        },
    ))
}

/// Noise seed of `client` in `round`.
pub fn noise_seed(experiment_seed: u64, client_id: u32, round: u32) -> u64 {
    rng::derive_seed(experiment_seed, Stream::Noise, &[client_id as u64, round as u64])
}
