use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tape::{bce_from_logits, dice_from_probs, log_sum_exp};
use crate::error::{bail, Result};
use crate::vip::ImportanceMap;
use crate::vocab::TokenId;

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_lang: f64,
    pub w_dice: f64,
    pub w_bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_lang: 1.0,
            w_dice: 1.0,
            w_bce: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_lang, self.w_dice, self.w_bce].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            bail!(Config, "loss weights must be finite and nonnegative: {:?}", self);
        }
        Ok(())
    }
}

/// Unweighted parts and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lang: f64,
    pub dice: f64,
    pub bce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(lang: f64, dice: f64, bce: f64, w: &LossWeights) -> Self {
        Self {
            lang,
            dice,
            bce,
            total: w.w_lang * lang + w.w_dice * dice + w.w_bce * bce,
        }
    }
}

fn check_len(p: usize, mask: usize) -> Result<()> {
    if p != mask {
        bail!(Shape, "importance map has {} entries, mask {}", p, mask);
    }
    Ok(())
}

/// `1 − (2·Σ P·m + eps) / (Σ P + Σ m + eps)`.
pub fn dice_loss(p: &ImportanceMap, mask: &[f64], eps: f64) -> Result<f64> {
    check_len(p.len(), mask.len())?;
    Ok(dice_from_probs(&p.probs, mask, eps))
}

/// Mean binary cross-entropy, evaluated on the pre-sigmoid logits.
pub fn bce_loss(p: &ImportanceMap, mask: &[f64]) -> Result<f64> {
    check_len(p.len(), mask.len())?;
    Ok(bce_from_logits(&p.logits, mask))
}

/// Mean cross-entropy of one logit row per answer token.
pub fn lang_loss(logits: &[Vec<f64>], answer_ids: &[TokenId]) -> Result<f64> {
    if answer_ids.is_empty() {
        bail!(Config, "language loss needs at least one answer token");
    }
    if logits.len() != answer_ids.len() {
        bail!(Shape, "{} logit rows for {} answer tokens", logits.len(), answer_ids.len());
    }
    let mut total = 0.0;
    for (z, &t) in logits.iter().zip(answer_ids) {
        let Some(&zt) = z.get(t as usize) else {
            bail!(Index, "answer token {} outside {} logits", t, z.len());
        };
        total += log_sum_exp(z) - zt;
    }
    Ok(total / answer_ids.len() as f64)
}
