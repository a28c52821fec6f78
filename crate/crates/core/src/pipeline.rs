//! Glue between stages: featurize a manifest, fit codebooks, build examples.

use rayon::prelude::*;

use crate::config::CodebookConfig;
use crate::data::{CorpusManifest, SpectrogramCache};
use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig, MelSpectrogram};
use crate::gridding::{self, GridConfig};
use crate::model::Example;
use crate::quantizer::{self, Codebook, CodebookSource, KMeansParams, TemporalSource};
use crate::trainer::prepare_example;

pub fn featurize_manifest(
    manifest: &CorpusManifest,
    cfg: &FrontendConfig,
    cache: Option<&SpectrogramCache>,
) -> Result<Vec<MelSpectrogram>> {
    cfg.validate()?;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            match cache {
                Some(c) => c.get_or_compute(&path, cfg),
                None => frontend::compute_logmel(&frontend::load_clip(&path, cfg)?, cfg),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CodebookPair {
    pub spectral: Codebook,
    pub temporal: Codebook,
}

/// Fits the spectral and temporal codebooks on every patch and frame of the
/// given spectrograms.
pub fn fit_codebooks(
    specs: &[MelSpectrogram],
    grid: &GridConfig,
    k_s: usize,
    k_t: usize,
    settings: &CodebookConfig,
    binding: &str,
) -> Result<CodebookPair> {
    grid.validate()?;
    if specs.is_empty() {
        return Err(Error::Insufficient(
            "no spectrograms to fit codebooks on".into(),
        ));
    }
    let mut patches = Vec::new();
    let mut frames = Vec::new();
    for s in specs {
        patches.extend(gridding::patch_vectors(s, grid)?);
        frames.extend(gridding::frame_vectors(s, grid)?);
    }
    let params = |k, salt: u64| KMeansParams {
        k,
        seed: settings.seed.wrapping_add(salt),
        max_iters: settings.max_iters,
        tol: settings.tol,
        n_init: settings.n_init,
    };
    let spectral = quantizer::fit_codebook(
        &patches,
        CodebookSource::SpectralPatch,
        &params(k_s, 0),
        binding,
    )?;
    let temporal = quantizer::fit_codebook(
        &frames,
        CodebookSource::TemporalFrame,
        &params(k_t, 1),
        binding,
    )?;
    Ok(CodebookPair { spectral, temporal })
}

pub fn build_corpus(
    specs: &[MelSpectrogram],
    grid: &GridConfig,
    books: &CodebookPair,
) -> Result<Vec<Example<f32>>> {
    specs
        .par_iter()
        .map(|s| {
            prepare_example(
                s,
                grid,
                &books.spectral,
                TemporalSource::Codebook(&books.temporal),
            )
        })
        .collect()
}

/// Mean and standard deviation over every value of the spectrograms, used
/// as the model's fixed input standardization.
pub fn input_stats(specs: &[MelSpectrogram]) -> Result<(f64, f64)> {
    let n: usize = specs.iter().map(|s| s.values.len()).sum();
    if n == 0 {
        return Err(Error::Insufficient("no spectrogram values".into()));
    }
    let mean = specs
        .iter()
        .flat_map(|s| &s.values)
        .map(|&v| v as f64)
        .sum::<f64>()
        / n as f64;
    let var = specs
        .iter()
        .flat_map(|s| &s.values)
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok((mean, var.sqrt().max(1e-6)))
}
