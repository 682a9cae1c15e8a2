//! Reference implementations of the training objectives.
//!
//! These work on explicit log-probabilities, so they can check a trainer's
//! numbers without depending on any framework. Sequence log-probabilities
//! for DPO are plain sums over tokens, not length-normalized.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("log-probability at position {0} is positive or not finite")]
    InvalidLogProb(usize),
    #[error("beta must be positive and finite")]
    InvalidBeta,
    #[error("non-finite sequence log-probability")]
    NonFinite,
    #[error("sft weight must be non-negative")]
    NegativeWeight,
}

/// Per-token natural-log probabilities of a target sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    values: Vec<f64>,
}

impl TokenLogProbs {
    pub fn new(values: Vec<f64>) -> Result<Self, LossError> {
        if values.is_empty() {
            return Err(LossError::EmptySequence);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v > 0.0) {
            return Err(LossError::InvalidLogProb(i));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Summed sequence log-probabilities of the chosen (`w`) and rejected (`l`)
/// responses under the policy and the frozen reference model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoItem {
    pub lp_w_policy: f64,
    pub lp_w_ref: f64,
    pub lp_l_policy: f64,
    pub lp_l_ref: f64,
    pub beta: f64,
}

/// Gradient of the DPO loss with respect to each input log-probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoGradient {
    pub lp_w_policy: f64,
    pub lp_w_ref: f64,
    pub lp_l_policy: f64,
    pub lp_l_ref: f64,
}

impl DpoItem {
    pub fn new(lp_w_policy: f64, lp_w_ref: f64, lp_l_policy: f64, lp_l_ref: f64, beta: f64) -> Result<Self, LossError> {
        let item = Self { lp_w_policy, lp_w_ref, lp_l_policy, lp_l_ref, beta };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(LossError::InvalidBeta);
        }
        if [self.lp_w_policy, self.lp_w_ref, self.lp_l_policy, self.lp_l_ref].iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite);
        }
        Ok(())
    }

    /// The scaled implicit reward margin
    /// `beta * ((w_policy - w_ref) - (l_policy - l_ref))`.
    pub fn margin(&self) -> f64 {
        self.beta * ((self.lp_w_policy - self.lp_w_ref) - (self.lp_l_policy - self.lp_l_ref))
    }

    /// The item with chosen and rejected exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            lp_w_policy: self.lp_l_policy,
            lp_w_ref: self.lp_l_ref,
            lp_l_policy: self.lp_w_policy,
            lp_l_ref: self.lp_w_ref,
            beta: self.beta,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean negative log-likelihood of the target tokens.
pub fn sft_loss(tlp: &TokenLogProbs) -> f64 {
    -tlp.sum() / tlp.len() as f64
}

/// `-log sigmoid(margin)`, evaluated as `softplus(-margin)`.
pub fn dpo_loss(item: &DpoItem) -> Result<f64, LossError> {
    item.validate()?;
    Ok(softplus(-item.margin()))
}

pub fn dpo_gradient(item: &DpoItem) -> Result<DpoGradient, LossError> {
    item.validate()?;
    let g = item.beta * sigmoid(-item.margin());
    Ok(DpoGradient { lp_w_policy: -g, lp_w_ref: g, lp_l_policy: g, lp_l_ref: -g })
}

/// DPO loss plus `weight` times the SFT loss on the chosen response.
pub fn dpo_with_sft(item: &DpoItem, chosen: &TokenLogProbs, weight: f64) -> Result<f64, LossError> {
    if !(weight >= 0.0) {
        return Err(LossError::NegativeWeight);
    }
    let dpo = dpo_loss(item)?;
    if weight == 0.0 {
        return Ok(dpo);
    }
    Ok(dpo + weight * sft_loss(chosen))
}
