//! Training: the reconstruction loss, Adam with L2 weight decay, and the
//! IMP / EXP / EXP-FT / Expert regimes.

mod adam;
mod run;

pub use adam::{adam_step, OptimizerState};
pub use run::{train, train_expert, Corpus, LogRecord, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskSet;
use crate::schema::{AttributeKind, Document, Schema};
use crate::util::logsumexp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// In-domain pre-training with random masking.
    Imp,
    /// Explicit multi-task training: each example draws a task.
    Exp,
    /// As `Exp`, initialized from an IMP checkpoint.
    ExpFt,
    /// A single fixed task.
    Expert,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Imp => "imp",
            Regime::Exp => "exp",
            Regime::ExpFt => "exp-ft",
            Regime::Expert => "expert",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Regime> {
        match s.to_ascii_lowercase().as_str() {
            "imp" => Ok(Regime::Imp),
            "exp" => Ok(Regime::Exp),
            "exp-ft" | "exp_ft" | "expft" => Ok(Regime::ExpFt),
            "expert" => Ok(Regime::Expert),
            other => Err(Error::InvalidArgument(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub weight_decay: f64,
    /// Field-masking probability for IMP pre-training.
    pub mask_prob_imp: f64,
    pub seed: u64,
    /// Run validation every this many epochs (0 disables validation; the
    /// final parameters are then kept instead of the best-validation ones).
    pub val_interval: usize,
    /// Task used by the Expert regime.
    pub expert_task: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            regime: Regime::Exp,
            batch_size: 256,
            epochs: 500,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps_adam: 1e-8,
            weight_decay: 1e-2,
            mask_prob_imp: 0.15,
            seed: 0,
            val_interval: 1,
            expert_task: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("train config: batch_size and epochs must be positive".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps_adam", self.eps_adam),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("train config: {name} must be positive")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::InvalidArgument("train config: betas must be < 1".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::InvalidArgument("train config: weight_decay must be non-negative".into()));
        }
        if !(self.mask_prob_imp > 0.0 && self.mask_prob_imp < 1.0) {
            return Err(Error::InvalidArgument("train config: mask_prob_imp must be in (0, 1)".into()));
        }
        if self.regime == Regime::Expert && self.expert_task.is_none() {
            return Err(Error::InvalidArgument("train config: expert regime requires expert_task".into()));
        }
        Ok(())
    }
}

/// Decoded head output for one masked field.
#[derive(Debug, Clone)]
pub enum PredValue {
    /// Unnormalized logits over the real categories.
    Logits(Vec<f64>),
    Vector(Vec<f64>),
}

/// Raw per-field predictions keyed by (element, attribute).
#[derive(Debug, Clone, Default)]
pub struct FieldPredictions {
    pub entries: Vec<(usize, usize, PredValue)>,
}

impl FieldPredictions {
    fn get(&self, element: usize, attr: usize) -> Option<&PredValue> {
        self.entries
            .iter()
            .find(|(i, k, _)| *i == element && *k == attr)
            .map(|(_, _, v)| v)
    }
}

/// The reconstruction loss over one document: softmax cross-entropy for
/// categorical fields and mean squared error over vector components for
/// numerical fields, summed over the masked fields only.
pub fn loss(
    predictions: &FieldPredictions,
    target: &Document,
    mask: &MaskSet,
    schema: &Schema,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Train("loss over an empty mask".into()));
    }
    let mut total = 0.0;
    for (i, k) in mask.iter() {
        let spec = schema.attr(k);
        let pred = predictions.get(i, k).ok_or_else(|| {
            Error::Train(format!("missing prediction for masked field ({i}, {})", spec.name))
        })?;
        let target_value = target.elements[i].field(k);
        match (pred, &spec.kind) {
            (PredValue::Logits(logits), AttributeKind::Categorical { cardinality }) => {
                if logits.len() != *cardinality {
                    return Err(Error::Train(format!(
                        "logits length {} does not match cardinality {cardinality}",
                        logits.len()
                    )));
                }
                let t = target_value.as_categorical().ok_or_else(|| {
                    Error::Train(format!("target at ({i}, {}) is not categorical", spec.name))
                })?;
                total += logsumexp(logits) - logits[t];
            }
            (PredValue::Vector(v), AttributeKind::Numerical { dim }) => {
                let t = target_value.as_numerical().ok_or_else(|| {
                    Error::Train(format!("target at ({i}, {}) is not numerical", spec.name))
                })?;
                if v.len() != *dim {
                    return Err(Error::Train(format!(
                        "vector length {} does not match dim {dim}",
                        v.len()
                    )));
                }
                total += v.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / *dim as f64;
            }
            _ => {
                return Err(Error::Train(format!(
                    "prediction kind does not match attribute `{}`",
                    spec.name
                )))
            }
        }
    }
    Ok(total)
}
