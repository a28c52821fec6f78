//! Mask sampling for both pretraining phases.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridding::GridConfig;

pub const MAX_MASK_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Whole segments with chained propagation.
    Segment,
    /// Fixed ratio of individual spectral patches.
    Patch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub mode: MaskMode,
    pub p: f64,
    pub p_prime: f64,
    pub patch_ratio: f64,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mode: MaskMode::Segment,
            p: 0.6,
            p_prime: 0.2,
            patch_ratio: 0.6,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p", self.p),
            ("p_prime", self.p_prime),
            ("patch_ratio", self.patch_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name}={v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub mode: MaskMode,
    /// Segment indices in segment mode, global patch indices in patch mode.
    pub masked: BTreeSet<usize>,
    pub n_total: usize,
}

impl MaskPlan {
    pub fn segments(n_total: usize, masked: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::build(MaskMode::Segment, n_total, masked)
    }

    pub fn patches(n_total: usize, masked: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::build(MaskMode::Patch, n_total, masked)
    }

    fn build(
        mode: MaskMode,
        n_total: usize,
        masked: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let masked: BTreeSet<usize> = masked.into_iter().collect();
        if masked.is_empty() {
            return Err(Error::EmptyMask("plan has no masked positions".into()));
        }
        if masked.iter().any(|&i| i >= n_total) {
            return Err(Error::Geometry(format!(
                "mask index out of range 0..{n_total}"
            )));
        }
        Ok(Self {
            mode,
            masked,
            n_total,
        })
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// One left-to-right pass: a segment is masked when Bernoulli(p) fires, or
/// when its predecessor is masked (for any reason) and Bernoulli(p') fires.
fn segment_pass<R: Rng + ?Sized>(n: usize, p: f64, p_prime: f64, rng: &mut R) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut prev = false;
    for i in 0..n {
        let seeded = rng.gen::<f64>() < p;
        let carried = rng.gen::<f64>() < p_prime;
        let masked = seeded || (prev && carried);
        if masked {
            out.insert(i);
        }
        prev = masked;
    }
    out
}

pub fn sample_segment_mask<R: Rng + ?Sized>(
    n: usize,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    if cfg.mode != MaskMode::Segment {
        return Err(Error::Config(
            "segment sampler called with patch-mode config".into(),
        ));
    }
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Geometry("cannot mask zero segments".into()));
    }
    for _ in 0..MAX_MASK_RETRIES {
        let masked = segment_pass(n, cfg.p, cfg.p_prime, rng);
        if !masked.is_empty() {
            return Ok(MaskPlan {
                mode: MaskMode::Segment,
                masked,
                n_total: n,
            });
        }
    }
    Err(Error::EmptyMask(format!(
        "{MAX_MASK_RETRIES} segment-mask draws were all empty (p={}, p'={})",
        cfg.p, cfg.p_prime
    )))
}

pub fn sample_patch_mask<R: Rng + ?Sized>(
    n_patches: usize,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    if cfg.mode != MaskMode::Patch {
        return Err(Error::Config(
            "patch sampler called with segment-mode config".into(),
        ));
    }
    cfg.validate()?;
    let count = (cfg.patch_ratio * n_patches as f64).round() as usize;
    if n_patches == 0 || count == 0 {
        return Err(Error::EmptyMask(format!(
            "ratio {} of {n_patches} patches rounds to zero",
            cfg.patch_ratio
        )));
    }
    let masked = rand::seq::index::sample(rng, n_patches, count)
        .into_iter()
        .collect();
    Ok(MaskPlan {
        mode: MaskMode::Patch,
        masked,
        n_total: n_patches,
    })
}

pub fn sample_mask<R: Rng + ?Sized>(
    cfg: &MaskConfig,
    grid: &GridConfig,
    n_segments: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    match cfg.mode {
        MaskMode::Segment => sample_segment_mask(n_segments, cfg, rng),
        MaskMode::Patch => sample_patch_mask(n_segments * grid.r_s(), cfg, rng),
    }
}

/// Global spectral-patch indices covered by a plan.
pub fn masked_patch_indices(plan: &MaskPlan, grid: &GridConfig) -> BTreeSet<usize> {
    match plan.mode {
        MaskMode::Patch => plan.masked.clone(),
        MaskMode::Segment => plan
            .masked
            .iter()
            .flat_map(|&n| (0..grid.r_s()).map(move |k| grid.patch_index(n, k)))
            .collect(),
    }
}

/// Exact per-position marginals of one segment pass:
/// q_0 = p, q_n = p + (1 - p) q_{n-1} p'.
pub fn segment_mask_marginals(n: usize, p: f64, p_prime: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut q = 0.0;
    for i in 0..n {
        q = if i == 0 {
            p
        } else {
            p + (1.0 - p) * q * p_prime
        };
        out.push(q);
    }
    out
}

pub fn segment_mask_fixed_point(p: f64, p_prime: f64) -> f64 {
    p / (1.0 - (1.0 - p) * p_prime)
}

/// Empirical versus analytic per-position coverage of segment masks.
#[derive(Debug, Clone, Serialize)]
pub struct MaskStats {
    pub draws: usize,
    pub analytic: Vec<f64>,
    pub empirical: Vec<f64>,
    /// Binomial standard deviation of each empirical marginal.
    pub sigma: Vec<f64>,
    pub empirical_fraction: f64,
    pub fixed_point: f64,
}

impl MaskStats {
    /// Largest |empirical - analytic| in units of sigma.
    pub fn max_z(&self) -> f64 {
        self.empirical
            .iter()
            .zip(&self.analytic)
            .zip(&self.sigma)
            .map(|((e, a), s)| (e - a).abs() / s.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// Monte-Carlo segment-mask coverage from the raw chained pass (without the
/// empty-mask redraw, whose trigger has probability below (1-p)^n).
pub fn mask_statistics(n: usize, cfg: &MaskConfig, draws: usize, seed: u64) -> Result<MaskStats> {
    let cfg = MaskConfig {
        mode: MaskMode::Segment,
        ..cfg.clone()
    };
    cfg.validate()?;
    if n == 0 || draws == 0 {
        return Err(Error::Config(
            "maskstats needs positive segment and draw counts".into(),
        ));
    }
    let mut r = crate::rng::stream(seed, &[crate::rng::purpose::MASK, u64::MAX]);
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        for i in segment_pass(n, cfg.p, cfg.p_prime, &mut r) {
            counts[i] += 1;
        }
    }
    let analytic = segment_mask_marginals(n, cfg.p, cfg.p_prime);
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let sigma = analytic
        .iter()
        .map(|q| (q * (1.0 - q) / draws as f64).sqrt())
        .collect();
    let empirical_fraction = empirical.iter().sum::<f64>() / n as f64;
    Ok(MaskStats {
        draws,
        analytic,
        empirical,
        sigma,
        empirical_fraction,
        fixed_point: segment_mask_fixed_point(cfg.p, cfg.p_prime),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn seg_cfg(p: f64, p_prime: f64) -> MaskConfig {
        MaskConfig {
            p,
            p_prime,
            ..Default::default()
        }
    }

    #[test]
    fn p_one_masks_everything() {
        let mut r = rng::stream(1, &[]);
        let plan = sample_segment_mask(50, &seg_cfg(1.0, 0.2), &mut r).unwrap();
        assert_eq!(plan.len(), 50);
    }

    #[test]
    fn p_zero_exhausts_retries() {
        let mut r = rng::stream(1, &[]);
        let err = sample_segment_mask(50, &seg_cfg(0.0, 0.9), &mut r).unwrap_err();
        assert!(matches!(err, Error::EmptyMask(_)));
    }

    #[test]
    fn zero_segments_error() {
        let mut r = rng::stream(1, &[]);
        assert!(sample_segment_mask(0, &seg_cfg(0.6, 0.2), &mut r).is_err());
    }

    #[test]
    fn patch_mask_exact_count() {
        let cfg = MaskConfig {
            mode: MaskMode::Patch,
            ..Default::default()
        };
        let mut r = rng::stream(3, &[]);
        let plan = sample_patch_mask(400, &cfg, &mut r).unwrap();
        assert_eq!(plan.len(), 240);
        let all = MaskConfig {
            patch_ratio: 1.0,
            ..cfg.clone()
        };
        assert_eq!(sample_patch_mask(400, &all, &mut r).unwrap().len(), 400);
        let none = MaskConfig {
            patch_ratio: 0.001,
            ..cfg
        };
        assert!(sample_patch_mask(400, &none, &mut r).is_err());
    }

    #[test]
    fn segment_expansion() {
        let g = GridConfig::default();
        let plan = MaskPlan::segments(50, [3]).unwrap();
        let idx = masked_patch_indices(&plan, &g);
        assert_eq!(idx, (24..32).collect());
        let pplan = MaskPlan::patches(400, [1, 7, 399]).unwrap();
        assert_eq!(masked_patch_indices(&pplan, &g), pplan.masked);
    }

    #[test]
    fn same_seed_same_plan() {
        let cfg = seg_cfg(0.6, 0.2);
        let a = sample_segment_mask(50, &cfg, &mut rng::stream(9, &[4])).unwrap();
        let b = sample_segment_mask(50, &cfg, &mut rng::stream(9, &[4])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn marginals_approach_fixed_point() {
        let q = segment_mask_marginals(50, 0.6, 0.2);
        assert_eq!(q[0], 0.6);
        assert!((q[49] - segment_mask_fixed_point(0.6, 0.2)).abs() < 1e-12);
        assert!((segment_mask_fixed_point(0.6, 0.2) - 0.652_173_913).abs() < 1e-8);
    }

    #[test]
    fn out_of_range_config() {
        assert!(seg_cfg(1.5, 0.2).validate().is_err());
        assert!(seg_cfg(0.5, -0.1).validate().is_err());
    }
}
