//! Mask-classification training losses with bipartite matching.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::sedam::info_nce_loss;
use crate::tensor::Tensor;

use super::matching::hungarian;

/// Class index used for "no object".
pub const NO_OBJECT: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub info_nce: f64,
    /// Class-loss weight of queries matched to nothing.
    pub no_object: f64,
    /// Dice smoothing term.
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 5.0, dice: 5.0, cls: 2.0, info_nce: 1.0, no_object: 0.1, dice_smooth: 1.0 }
    }
}

/// One ground-truth segment: class index and a flattened binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub class: usize,
    pub mask: Rc<Vec<f64>>,
}

fn check_binary(gt: &[f64]) -> Result<()> {
    if gt.iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(Error::Input("ground-truth mask must be binary".into()));
    }
    Ok(())
}

/// Mean BCE on logits and the smoothed dice loss of one mask.
pub fn bce_dice_loss(t: &mut Tape, logits: Var, gt: Rc<Vec<f64>>, smooth: f64) -> Result<(Var, Var)> {
    check_binary(&gt)?;
    if t.value(logits).len() != gt.len() {
        return Err(Error::Shape(format!("mask has {} pixels, target {}", t.value(logits).len(), gt.len())));
    }
    let bce = t.bce_with_logits(logits, gt.clone());
    let dice = t.dice_loss(logits, gt, smooth);
    Ok((bce, dice))
}

/// Matching costs `[N_Q, targets]`: `-w_cls * p(class) + w_bce * BCE + w_dice * Dice`.
pub fn matching_cost(mask_logits: &Tensor, class_logits: &Tensor, targets: &[Target], w: &LossWeights) -> Tensor {
    let nq = mask_logits.rows();
    let mut cost = Tensor::zeros(&[nq, targets.len()]);
    for q in 0..nq {
        let mut probs = class_logits.row(q).to_vec();
        math::softmax_in_place(&mut probs);
        let x = mask_logits.row(q);
        let sig: Vec<f64> = x.iter().map(|&v| math::sigmoid(v)).collect();
        let soft: Vec<f64> = x.iter().map(|&v| math::softplus(v)).collect();
        let psum: f64 = sig.iter().sum();
        for (j, tg) in targets.iter().enumerate() {
            let n = x.len() as f64;
            let (mut bce, mut inter, mut tsum) = (0.0, 0.0, 0.0);
            for p in 0..x.len() {
                let g = tg.mask[p];
                bce += soft[p] - x[p] * g;
                inter += sig[p] * g;
                tsum += g;
            }
            let dice = 1.0 - (2.0 * inter + w.dice_smooth) / (psum + tsum + w.dice_smooth);
            let c = -w.cls * probs[tg.class] + w.bce * bce / n + w.dice * dice;
            cost.row_mut(q)[j] = c;
        }
    }
    cost
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub mask: f64,
    pub cls: f64,
    pub info_nce: f64,
    pub total: f64,
}

pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub assignment: Vec<(usize, usize)>,
}

/// `L_mask + w_cls * L_cls + w_nce * L_infoNCE`, where `L_mask` averages the
/// weighted BCE and dice terms over matched pairs and `L_cls` is a weighted
/// cross-entropy over all queries (unmatched ones target no-object).
pub fn total_loss(
    t: &mut Tape,
    mask_logits: Var,
    class_logits: Var,
    targets: &[Target],
    bank: Option<Var>,
    w: &LossWeights,
    nce_eps: f64,
) -> Result<LossOutput> {
    let nq = t.value(mask_logits).rows();
    if targets.len() > nq {
        return Err(Error::Input(format!("{} targets exceed {nq} queries", targets.len())));
    }
    for tg in targets {
        check_binary(&tg.mask)?;
        if tg.mask.len() != t.value(mask_logits).cols() {
            return Err(Error::Shape("target mask size differs from prediction".into()));
        }
    }
    let cost = matching_cost(t.value(mask_logits), t.value(class_logits), targets, w);
    let assignment = hungarian(&cost);

    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut bd = LossBreakdown::default();
    if !assignment.is_empty() {
        let inv = 1.0 / assignment.len() as f64;
        for &(q, j) in &assignment {
            let row = t.gather_rows(mask_logits, Rc::new(vec![q]));
            let (b, d) = bce_dice_loss(t, row, targets[j].mask.clone(), w.dice_smooth)?;
            bd.bce += t.value(b).item() * inv;
            bd.dice += t.value(d).item() * inv;
            terms.push((b, w.bce * inv));
            terms.push((d, w.dice * inv));
        }
    }
    bd.mask = w.bce * bd.bce + w.dice * bd.dice;

    let mut classes = vec![NO_OBJECT; nq];
    let mut weights = vec![w.no_object; nq];
    for &(q, j) in &assignment {
        classes[q] = targets[j].class;
        weights[q] = 1.0;
    }
    let ce = t.cross_entropy(class_logits, classes, weights);
    bd.cls = t.value(ce).item();
    terms.push((ce, w.cls));

    if let Some(b) = bank {
        let nce = info_nce_loss(t, b, nce_eps);
        bd.info_nce = t.value(nce).item();
        terms.push((nce, w.info_nce));
    }
    let total = t.lin_comb(&terms);
    bd.total = t.value(total).item();
    if !bd.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", bd.total)));
    }
    Ok(LossOutput { total, breakdown: bd, assignment })
}
