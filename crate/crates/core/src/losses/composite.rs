use crate::error::{Error, Result};

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mask: f64,
    pub ce: f64,
    pub grounding: f64,
    pub kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask: 5.0,
            ce: 2.0,
            grounding: 2.0,
            kd: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("mask", self.mask),
            ("ce", self.ce),
            ("grounding", self.grounding),
            ("kd", self.kd),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms. `mask` is bce + dice.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub mask: f64,
    pub ce: f64,
    pub grounding: f64,
    pub kd: f64,
}

/// Weighted total plus the unweighted terms that produced it.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: LossTerms,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.terms.mask.is_finite()
            && self.terms.ce.is_finite()
            && self.terms.grounding.is_finite()
            && self.terms.kd.is_finite()
    }
}

pub fn total_loss(terms: LossTerms, weights: &LossWeights) -> LossBreakdown {
    let total = weights.mask * terms.mask
        + weights.ce * terms.ce
        + weights.grounding * terms.grounding
        + weights.kd * terms.kd;
    LossBreakdown { total, terms }
}
