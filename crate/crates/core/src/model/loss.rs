//! Binary cross-entropy plus soft IoU and Dice on mask logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Smoothing constant of the IoU and Dice terms.
pub const SMOOTH: f64 = 1.0;

/// Loss terms as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ce: Var,
    pub iou: Var,
    pub dice: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_iou: f64,
    pub l_dice: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBreakdown {
            l_ce: v(self.ce),
            l_iou: v(self.iou),
            l_dice: v(self.dice),
            total: v(self.total),
        }
    }
}

/// `gt` must be a binary tensor of the same shape as `logits`; sums run over all elements.
pub fn compute_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, gt: Var) -> Result<LossVars> {
    if g.shape(logits) != g.shape(gt) {
        return Err(Error::shape("compute_loss", g.shape(logits), g.shape(gt)));
    }
    if g.value(gt).data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid("compute_loss", "ground truth must be binary"));
    }
    // mean(softplus(x) - x·g) is BCE-with-logits without log(0)
    let sp = g.softplus(logits)?;
    let xg = g.mul(logits, gt)?;
    let bce = g.sub(sp, xg)?;
    let ce = g.mean(bce)?;

    let p = g.sigmoid(logits)?;
    let pg = g.mul(p, gt)?;
    let inter = g.sum(pg)?;
    let sp = g.sum(p)?;
    let sg = g.sum(gt)?;
    let total_mass = g.add(sp, sg)?;
    let eps = T::of(SMOOTH);

    let union = g.sub(total_mass, inter)?;
    let num = g.affine(inter, T::one(), eps)?;
    let den = g.affine(union, T::one(), eps)?;
    let ratio = g.div(num, den)?;
    let iou = g.affine(ratio, -T::one(), T::one())?;

    let num = g.affine(inter, T::of(2.0), eps)?;
    let den = g.affine(total_mass, T::one(), eps)?;
    let ratio = g.div(num, den)?;
    let dice = g.affine(ratio, -T::one(), T::one())?;

    let t = g.add(ce, iou)?;
    let total = g.add(t, dice)?;
    Ok(LossVars { ce, iou, dice, total })
}
