//! Per-branch objective: class-weighted binary cross-entropy plus a
//! lambda-weighted soft dice term, averaged over the batch and summed over
//! the active branches.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Bounds applied to the per-image positive-class weight during training.
pub const ALPHA_BOUNDS: (f64, f64) = (0.05, 0.95);

/// Fraction of background pixels, used as the weight of the lesion pixels.
pub fn class_weight(mask: &[f64]) -> f64 {
    if mask.is_empty() {
        return 0.5;
    }
    let negatives = mask.iter().filter(|&&y| y < 0.5).count();
    negatives as f64 / mask.len() as f64
}

/// Per-image weighted BCE, `(n, 1, 1, 1)`. `alpha_bounds = None` uses the raw
/// class ratio.
pub fn wbce_loss(tape: &mut Tape, p: Var, target: &Tensor, alpha_bounds: Option<(f64, f64)>) -> Result<Var> {
    let s = target.shape();
    let alpha: Vec<f64> = target
        .data()
        .chunks(s.plane().max(1))
        .map(|m| {
            let a = class_weight(m);
            alpha_bounds.map_or(a, |(lo, hi)| a.clamp(lo, hi))
        })
        .collect();
    tape.weighted_bce(p, target, &alpha, (PROB_CLAMP, 1.0 - PROB_CLAMP))
}

pub fn dice_loss(tape: &mut Tape, p: Var, target: &Tensor, eps: f64) -> Result<Var> {
    tape.dice_loss(p, target, eps)
}

/// Batch means of each term; absent branches report 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub wbce_main: f64,
    pub dice_main: f64,
    pub wbce_aux: f64,
    pub dice_aux: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn main(&self, lambda: f64) -> f64 {
        self.wbce_main + lambda * self.dice_main
    }

    pub fn is_finite(&self) -> bool {
        [self.wbce_main, self.dice_main, self.wbce_aux, self.dice_aux, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `(mean wbce, mean dice, mean wbce + lambda * mean dice)` for one branch.
fn branch(tape: &mut Tape, p: Var, target: &Tensor, lambda: f64, eps: f64) -> Result<(Var, Var, Var)> {
    let ps = tape.shape(p);
    if ps != target.shape() {
        return Err(Error::shape("branch loss", ps, target.shape()));
    }
    let c = wbce_loss(tape, p, target, Some(ALPHA_BOUNDS))?;
    let d = dice_loss(tape, p, target, eps)?;
    let c = tape.mean(c);
    let d = tape.mean(d);
    let wd = tape.scale(d, lambda);
    let total = tape.add(c, wd)?;
    Ok((c, d, total))
}

pub fn joint_loss(
    tape: &mut Tape,
    main: Var,
    aux: Option<Var>,
    target: &Tensor,
    lambda: f64,
    eps: f64,
) -> Result<(Var, LossTerms)> {
    let (c, d, mut total) = branch(tape, main, target, lambda, eps)?;
    let mut terms = LossTerms {
        wbce_main: tape.value(c).item(),
        dice_main: tape.value(d).item(),
        ..LossTerms::default()
    };
    if let Some(a) = aux {
        let (ca, da, ta) = branch(tape, a, target, lambda, eps)?;
        terms.wbce_aux = tape.value(ca).item();
        terms.dice_aux = tape.value(da).item();
        total = tape.add(total, ta)?;
    }
    terms.total = tape.value(total).item();
    Ok((total, terms))
}
