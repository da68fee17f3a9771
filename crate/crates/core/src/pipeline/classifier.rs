use segda_grad::{Bound, Graph, ParamStore, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::etf::EtfClassifier;
use crate::networks::LinearHead;

/// The per-pixel classifier on top of the pixel module.
#[derive(Clone, Debug, PartialEq)]
pub enum Classifier {
    Etf(EtfClassifier),
    Linear(LinearHead),
}

impl Classifier {
    pub fn num_classes(&self) -> usize {
        match self {
            Classifier::Etf(e) => e.num_classes(),
            Classifier::Linear(h) => h.num_classes(),
        }
    }

    /// Unit-norm class prototypes `d × C`, the targets of the segment and
    /// memory terms.
    pub fn prototypes(&self) -> Tensor {
        match self {
            Classifier::Etf(e) => e.weights().clone(),
            Classifier::Linear(h) => h.unit_prototypes(),
        }
    }

    pub fn etf(&self) -> Option<&EtfClassifier> {
        match self {
            Classifier::Etf(e) => Some(e),
            Classifier::Linear(_) => None,
        }
    }

    /// Trainable parameters (none for the ETF).
    pub fn params(&self) -> Option<&ParamStore> {
        match self {
            Classifier::Etf(_) => None,
            Classifier::Linear(h) => Some(h.params()),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamStore> {
        match self {
            Classifier::Etf(_) => None,
            Classifier::Linear(h) => Some(h.params_mut()),
        }
    }

    /// Logits `C × n` for `d × n` features. ETF scores are multiplied by
    /// `logit_scale`; `head` binds the linear head's parameters.
    pub fn logits(&self, g: &mut Graph, head: Option<&Bound>, features: Var, logit_scale: f64) -> Result<Var> {
        match self {
            Classifier::Etf(e) => {
                let wt = g.constant(e.weights().transpose()?.scale(logit_scale));
                Ok(g.matmul(wt, features)?)
            }
            Classifier::Linear(h) => {
                let b = head.ok_or_else(|| CoreError::Contract("linear head parameters not bound".into()))?;
                h.logits(g, b, features)
            }
        }
    }

    /// Gradient-free logits.
    pub fn logits_value(&self, features: &Tensor, logit_scale: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let bound = self.params().map(|p| p.bind_frozen(&mut g));
        let z = self.logits(&mut g, bound.as_ref(), f, logit_scale)?;
        Ok(g.value(z).clone())
    }
}
