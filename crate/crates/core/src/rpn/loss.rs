use serde::{Deserialize, Serialize};

use super::labels::LabelTargets;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the cross-entropy branch inside the classification loss.
    pub lambda: f64,
    /// Weight of the classification loss against regression.
    pub lambda1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            lambda1: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda1 >= 0.0) || !self.lambda.is_finite() || !self.lambda1.is_finite() {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// `(L_cls1, L_cls2)`: softmax CE over non-ignored anchors and BCE against
/// the binary centre-distance labels.
pub fn classification_losses(g: &mut Graph, cls1: Var, cls2: Var, t: &LabelTargets) -> Result<(Var, Var)> {
    let l1 = g.softmax_ce(cls1, &t.cls1)?;
    let mask = vec![true; t.cls2.len()];
    let l2 = g.bce_with_logits(cls2, &t.cls2, &mask)?;
    Ok((l1, l2))
}

/// Smooth-L1 summed over the offsets of positive anchors, divided by their
/// count. Returns `(loss, empty)`; with no positives the loss is a constant 0.
pub fn regression_loss(g: &mut Graph, reg: Var, t: &LabelTargets) -> Result<(Var, bool)> {
    if t.num_pos == 0 {
        if g.value(reg).len() != t.reg.len() {
            return Err(Error::dim(
                "regression_loss",
                format!("{} predictions vs {} targets", g.value(reg).len(), t.reg.len()),
            ));
        }
        return Ok((g.constant(Tensor::scalar(0.0)), true));
    }
    let l = g.smooth_l1(reg, &t.reg, &t.reg_mask, t.num_pos as f64)?;
    Ok((l, false))
}

/// `λ1 · (λ · L_cls1 + L_cls2) + L_reg`.
pub fn total_loss_value(l_cls1: f64, l_cls2: f64, l_reg: f64, w: &LossWeights) -> Result<f64> {
    if ![l_cls1, l_cls2, l_reg, w.lambda, w.lambda1].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "total_loss inputs ({l_cls1}, {l_cls2}, {l_reg}) with {w:?}"
        )));
    }
    Ok(w.lambda1 * (w.lambda * l_cls1 + l_cls2) + l_reg)
}

/// Graph version of [`total_loss_value`].
pub fn total_loss(g: &mut Graph, l_cls1: Var, l_cls2: Var, l_reg: Var, w: &LossWeights) -> Result<Var> {
    total_loss_value(g.value(l_cls1).item()?, g.value(l_cls2).item()?, g.value(l_reg).item()?, w)?;
    let a = g.scale(l_cls1, w.lambda);
    let cls = g.add(a, l_cls2)?;
    let cls = g.scale(cls, w.lambda1);
    g.add(cls, l_reg)
}
