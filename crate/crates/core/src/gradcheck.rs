//! Central finite-difference verification of the analytic gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gridding::GridConfig;
use crate::masking::{masked_patch_indices, MaskPlan};
use crate::model::{self, Example, ModelConfig, Params};
use crate::objective;
use crate::quantizer::TargetSet;
use crate::rng;

/// Denominator floor so parameters with vanishing gradients are judged absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        mlp_ratio: 4,
        k_s: 5,
        k_t: 5,
        r_s: 2,
        r_t: 2,
        n_max: 2,
        patch_dim: 4,
        dropout_rate: 0.0,
        // larger than training init so every path carries signal
        init_std: 0.5,
        input_mean: 0.25,
        input_std: 1.5,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub per_tensor: Vec<(String, f64)>,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Random clip for a config: patches, labels and a segment mask.
pub fn random_problem(cfg: &ModelConfig, n_segments: usize, seed: u64) -> (Example<f64>, MaskPlan) {
    let mut r: ChaCha8Rng = rng::stream(seed, &[rng::purpose::EVAL]);
    let n = n_segments * cfg.r_s;
    let patches = (0..n * cfg.patch_dim)
        .map(|_| r.gen_range(-1.0..1.0))
        .collect();
    let targets = TargetSet {
        n_segments,
        r_s: cfg.r_s,
        r_t: cfg.r_t,
        spectral: (0..n).map(|_| r.gen_range(0..cfg.k_s as u32)).collect(),
        temporal: (0..n_segments * cfg.r_t)
            .map(|_| r.gen_range(0..cfg.k_t as u32))
            .collect(),
    };
    // leave at least one segment visible when there is more than one
    let last = n_segments.saturating_sub(1).max(1);
    let masked: Vec<usize> = (0..last).collect();
    let plan = MaskPlan::segments(n_segments, masked).expect("non-empty");
    (
        Example {
            patches,
            n_segments,
            targets,
        },
        plan,
    )
}

/// Loss evaluated through the full-logit forward route, independent of the
/// backward pass bookkeeping.
pub fn reference_loss(
    params: &Params<f64>,
    ex: &Example<f64>,
    plan: &MaskPlan,
    lambda: f64,
) -> Result<f64> {
    let cfg = params.config();
    let grid = GridConfig {
        patch: cfg.r_t,
        frame_width: 1,
        n_mels: cfg.r_s * cfg.r_t,
    };
    let masked = masked_patch_indices(plan, &grid);
    let tokens = model::embed(params, &ex.patches, &masked)?;
    let out = model::encode(params, tokens)?;
    let ls = objective::spectral_loss(
        &model::spectral_logits(&out, params),
        cfg.k_s,
        &ex.targets,
        plan,
        &grid,
    )?;
    let lt = objective::temporal_loss(
        &model::temporal_logits(&out, params),
        cfg.k_t,
        &ex.targets,
        plan,
        &grid,
    )?;
    objective::total_loss(ls, lt, lambda)
}

pub fn check_gradients(
    cfg: &ModelConfig,
    n_segments: usize,
    lambda: f64,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut params = Params::<f64>::init(cfg, seed)?;
    let (ex, plan) = random_problem(cfg, n_segments, seed);
    let (_, grads) =
        model::loss_and_gradients::<f64, ChaCha8Rng>(&params, &ex, &plan, lambda, None)?;
    let layout = params.layout.clone();
    let mut worst = (0.0f64, String::new(), 0usize);
    let mut per_tensor = Vec::new();
    let mut max_abs = 0.0f64;
    for t in &layout.tensors {
        let mut tensor_max = 0.0f64;
        for i in t.range() {
            let orig = params.data[i];
            params.data[i] = orig + step;
            let up = reference_loss(&params, &ex, &plan, lambda)?;
            params.data[i] = orig - step;
            let down = reference_loss(&params, &ex, &plan, lambda)?;
            params.data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.data[i];
            let rel =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            tensor_max = tensor_max.max(rel);
            max_abs = max_abs.max((analytic - numeric).abs());
            if rel > worst.0 {
                worst = (rel, t.name.clone(), i - t.offset);
            }
        }
        per_tensor.push((t.name.clone(), tensor_max));
    }
    Ok(GradCheckReport {
        n_params: layout.total,
        max_rel_error: worst.0,
        max_abs_error: max_abs,
        worst_tensor: worst.1,
        worst_index: worst.2,
        per_tensor,
        step,
    })
}
