//! Masked cross-entropy losses and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridding::GridConfig;
use crate::masking::{masked_patch_indices, MaskMode, MaskPlan};
use crate::model::Real;
use crate::quantizer::TargetSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub spectral: f64,
    pub temporal: f64,
    pub total: f64,
    pub n_masked_segments: usize,
    pub lambda: f64,
}

/// Stable cross-entropy of one logit row against `target`.
pub fn cross_entropy<T: Real>(row: &[T], target: usize) -> T {
    let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
    max + sum.ln() - row[target]
}

/// Cross-entropy plus `scale * (softmax - onehot)` accumulated into `grad`.
pub(crate) fn cross_entropy_grad<T: Real>(row: &[T], target: usize, scale: T, grad: &mut [T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
    for (g, &v) in grad.iter_mut().zip(row) {
        *g = *g + scale * (v - max).exp() / sum;
    }
    grad[target] = grad[target] - scale;
    max + sum.ln() - row[target]
}

fn check_targets(targets: &TargetSet, grid: &GridConfig) -> Result<()> {
    if targets.r_s != grid.r_s() || targets.r_t != grid.r_t() {
        return Err(Error::Geometry("targets do not match grid".into()));
    }
    Ok(())
}

/// Mean cross-entropy over masked spectral patches.
/// `logits` is `(n_segments * r_s) × k_s`.
pub fn spectral_loss<T: Real>(
    logits: &[T],
    k_s: usize,
    targets: &TargetSet,
    plan: &MaskPlan,
    grid: &GridConfig,
) -> Result<T> {
    check_targets(targets, grid)?;
    let idx = masked_patch_indices(plan, grid);
    if idx.is_empty() {
        return Err(Error::EmptyMask("spectral loss over an empty mask".into()));
    }
    if logits.len() != targets.spectral.len() * k_s {
        return Err(Error::Geometry(
            "spectral logits do not match targets".into(),
        ));
    }
    let mut acc = T::zero();
    for &g in &idx {
        let t = targets.spectral[g] as usize;
        if t >= k_s {
            return Err(Error::Geometry(format!("spectral label {t} >= {k_s}")));
        }
        acc = acc + cross_entropy(&logits[g * k_s..(g + 1) * k_s], t);
    }
    Ok(acc / T::from_usize(idx.len()).unwrap())
}

/// Mean cross-entropy over every temporal frame of every masked segment.
/// `logits` is `n_segments × r_t × k_t`.
pub fn temporal_loss<T: Real>(
    logits: &[T],
    k_t: usize,
    targets: &TargetSet,
    plan: &MaskPlan,
    grid: &GridConfig,
) -> Result<T> {
    check_targets(targets, grid)?;
    if plan.mode != MaskMode::Segment {
        return Err(Error::Config(
            "temporal loss needs a segment-mode mask".into(),
        ));
    }
    if plan.is_empty() {
        return Err(Error::EmptyMask("temporal loss over an empty mask".into()));
    }
    if logits.len() != targets.temporal.len() * k_t {
        return Err(Error::Geometry(
            "temporal logits do not match targets".into(),
        ));
    }
    let r_t = grid.r_t();
    let mut acc = T::zero();
    for &n in &plan.masked {
        for j in 0..r_t {
            let row = n * r_t + j;
            let t = targets.temporal[row] as usize;
            if t >= k_t {
                return Err(Error::Geometry(format!("temporal label {t} >= {k_t}")));
            }
            acc = acc + cross_entropy(&logits[row * k_t..(row + 1) * k_t], t);
        }
    }
    Ok(acc / T::from_usize(plan.len() * r_t).unwrap())
}

pub fn total_loss(spectral: f64, temporal: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * temporal + (1.0 - lambda) * spectral)
}
