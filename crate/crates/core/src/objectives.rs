//! Training objectives.
//!
//! Token sets are pooled by mean-then-L2-normalize wherever a single vector is
//! needed. The total is
//! `cls + λ1·(cls_low + cls_high) + λ2·reg_text + λ3·(kl_visual + local)`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::ops::{kl_unchecked, softmax_unchecked};
use crate::numerics::{cross_entropy, dot, l2_normalize, mean_pool, Matrix, Tape, Var};
use crate::representative::{Representatives, TierVars};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.02, lambda2: 20.0, lambda3: 0.1, tau: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} = {v} must be a finite value ≥ 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub cls_low: f64,
    pub cls_high: f64,
    pub reg_text: f64,
    pub kl_visual: f64,
    pub local: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        use crate::numerics::compensated_sum;
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| compensated_sum(items.iter().map(f)) / n;
        LossBreakdown {
            cls: avg(|b| b.cls),
            cls_low: avg(|b| b.cls_low),
            cls_high: avg(|b| b.cls_high),
            reg_text: avg(|b| b.reg_text),
            kl_visual: avg(|b| b.kl_visual),
            local: avg(|b| b.local),
            total: avg(|b| b.total),
        }
    }
}

/// Per-class pooled text vectors: class `c` pools row `c` of every tier.
pub fn pooled_class_text(text_tiers: &[&Matrix]) -> Result<Matrix> {
    let Some(first) = text_tiers.first() else {
        return Err(Error::EmptySelection);
    };
    let (c, d) = first.shape();
    let mut rows = Vec::with_capacity(c);
    for class in 0..c {
        let mut acc = vec![0.0; d];
        for t in text_tiers {
            if t.shape() != (c, d) {
                return Err(dim_mismatch("text tiers differ in shape"));
            }
            acc.iter_mut().zip(t.row(class)).for_each(|(a, v)| *a += v);
        }
        rows.push(l2_normalize(&acc)?);
    }
    Ok(Matrix::from_rows(&rows))
}

/// `cos(pool(visual), pool_c(text)) / tau` for every class.
pub fn class_logits(visual: &Matrix, text_tiers: &[&Matrix], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let v = mean_pool(visual)?;
    let t = pooled_class_text(text_tiers)?;
    if t.cols() != v.len() {
        return Err(dim_mismatch(format!("visual width {} vs text {}", v.len(), t.cols())));
    }
    Ok(t.row_iter().map(|r| dot(&v, r) / tau).collect())
}

pub fn contrastive_cls_loss(visual: &Matrix, text_tiers: &[&Matrix], label: usize, tau: f64) -> Result<f64> {
    let logits = class_logits(visual, text_tiers, tau)?;
    cross_entropy(&logits, label)
}

/// `(cls_high, cls_low)`: the contrastive loss on tier-1 and on tier-2
/// representatives alone. A missing tier contributes zero.
pub fn graded_loss(reps: &Representatives, label: usize, tau: f64) -> Result<(f64, f64)> {
    let mut high = 0.0;
    let mut low = 0.0;
    for ((tier, v), (_, t)) in reps.visual.iter().zip(&reps.text) {
        let l = contrastive_cls_loss(v, &[t], label, tau)?;
        if *tier == 0 {
            high = l;
        } else {
            low = l;
        }
    }
    Ok((high, low))
}

/// Mean absolute elementwise difference.
pub fn text_reg_loss(original: &Matrix, rep: &Matrix) -> Result<f64> {
    if original.shape() != rep.shape() {
        return Err(dim_mismatch(format!("text reg {:?} vs {:?}", original.shape(), rep.shape())));
    }
    if original.is_empty() {
        return Ok(0.0);
    }
    Ok(original.data().iter().zip(rep.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / original.len() as f64)
}

/// KL(softmax(pool(rep)) ‖ softmax(pool(ori))), temperature 1.
pub fn visual_kl_loss(rep: &Matrix, original: &Matrix) -> Result<f64> {
    if rep.cols() != original.cols() {
        return Err(dim_mismatch(format!("visual KL widths {} vs {}", rep.cols(), original.cols())));
    }
    let p = softmax_unchecked(&mean_pool(rep)?, 1.0);
    let q = softmax_unchecked(&mean_pool(original)?, 1.0);
    Ok(kl_unchecked(&p, &q))
}

/// Component losses before weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents {
    pub cls: f64,
    pub cls_low: f64,
    pub cls_high: f64,
    pub reg_text: f64,
    pub kl_visual: f64,
    pub local: f64,
}

pub fn total_loss(c: LossComponents, w: &LossWeights) -> Result<LossBreakdown> {
    let parts = [c.cls, c.cls_low, c.cls_high, c.reg_text, c.kl_visual, c.local];
    if let Some(bad) = parts.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss(format!("component loss {bad}")));
    }
    let total = c.cls
        + w.lambda1 * (c.cls_low + c.cls_high)
        + w.lambda2 * c.reg_text
        + w.lambda3 * (c.kl_visual + c.local);
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss(format!("total {total}")));
    }
    Ok(LossBreakdown {
        cls: c.cls,
        cls_low: c.cls_low,
        cls_high: c.cls_high,
        reg_text: c.reg_text,
        kl_visual: c.kl_visual,
        local: c.local,
        total,
    })
}

/// All losses for one item from plain (non-tape) representatives.
/// `text` is the `C×d` original text, `original_tokens` the item's full token
/// grid, and `local` the memory-bank loss computed beforehand.
pub fn item_losses(
    reps: &Representatives,
    text: &Matrix,
    original_tokens: &Matrix,
    local: f64,
    label: usize,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let visual = reps.visual_concat();
    let text_tiers: Vec<&Matrix> = reps.text.iter().map(|(_, m)| m).collect();
    let cls = contrastive_cls_loss(&visual, &text_tiers, label, w.tau)?;
    let (cls_high, cls_low) = graded_loss(reps, label, w.tau)?;
    let originals: Vec<&Matrix> = vec![text; reps.tiers()];
    let reg_text = text_reg_loss(&Matrix::concat_rows(&originals), &reps.text_concat())?;
    let kl_visual = visual_kl_loss(&visual, original_tokens)?;
    total_loss(LossComponents { cls, cls_low, cls_high, reg_text, kl_visual, local }, w)
}

/// Tape version of [`contrastive_cls_loss`] over the given tiers.
fn cls_on_tape(tape: &mut Tape, tiers: &[&TierVars], label: usize, tau: f64) -> Var {
    let visual: Vec<Var> = tiers.iter().map(|t| t.visual).collect();
    let v = tape.concat_rows(&visual);
    let v = tape.mean_rows(v);
    let v = tape.normalize_rows(v);
    let mut text = tiers[0].text;
    for t in &tiers[1..] {
        text = tape.add(text, t.text);
    }
    let text = tape.normalize_rows(text);
    let logits = tape.matmul_t(v, text);
    let logits = tape.scale(logits, 1.0 / tau);
    tape.cross_entropy(logits, label)
}

/// Builds the weighted total on the tape. Returns the scalar loss node and
/// the breakdown of its forward values.
pub fn item_losses_on_tape(
    tape: &mut Tape,
    tiers: &[TierVars],
    text: &Matrix,
    original_tokens: &Matrix,
    local: f64,
    label: usize,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if tiers.is_empty() {
        return Err(Error::EmptySelection);
    }
    if label >= text.rows() {
        return Err(Error::LabelOutOfRange { label, classes: text.rows() });
    }
    let all: Vec<&TierVars> = tiers.iter().collect();
    let cls = cls_on_tape(tape, &all, label, w.tau);
    let mut high = None;
    let mut low = None;
    for t in tiers {
        let l = cls_on_tape(tape, &[t], label, w.tau);
        if t.tier == 0 {
            high = Some(l);
        } else {
            low = Some(l);
        }
    }
    let text_reps: Vec<Var> = tiers.iter().map(|t| t.text).collect();
    let text_cat = tape.concat_rows(&text_reps);
    let originals: Vec<&Matrix> = vec![text; tiers.len()];
    let reg = tape.abs_mean_diff(text_cat, &Matrix::concat_rows(&originals));

    let visual: Vec<Var> = tiers.iter().map(|t| t.visual).collect();
    let v = tape.concat_rows(&visual);
    let v = tape.mean_rows(v);
    let v = tape.normalize_rows(v);
    let p = tape.softmax_rows(v);
    let q = softmax_unchecked(&mean_pool(original_tokens)?, 1.0);
    let kl = tape.kl_to_const(p, &q);

    let local_v = tape.constant(Matrix::filled(1, 1, local));
    let mut terms = vec![(cls, 1.0), (reg, w.lambda2), (kl, w.lambda3), (local_v, w.lambda3)];
    terms.extend(high.map(|h| (h, w.lambda1)));
    terms.extend(low.map(|l| (l, w.lambda1)));
    let total = tape.weighted_sum(&terms);

    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let breakdown = total_loss(
        LossComponents {
            cls: tape.scalar(cls),
            cls_low: val(low),
            cls_high: val(high),
            reg_text: tape.scalar(reg),
            kl_visual: tape.scalar(kl),
            local,
        },
        w,
    )?;
    Ok((total, breakdown))
}
