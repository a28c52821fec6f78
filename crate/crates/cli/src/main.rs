use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ultras::config::{Profile, RunConfig};
use ultras::data::{self, CorpusManifest, SpectrogramCache};
use ultras::error::{Error, Result};
use ultras::frontend::MelSpectrogram;
use ultras::gradcheck;
use ultras::gridding;
use ultras::io::{hash_json, sha256_hex, write_atomic};
use ultras::masking;
use ultras::pipeline::{self, CodebookPair};
use ultras::probe;
use ultras::quantizer::{
    self, Codebook, CodebookSource, ExternalPayload, KMeansParams, TemporalSource,
};
use ultras::trainer::{self, RunOptions};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_NUMERIC: u8 = 5;
const EXIT_MISMATCH: u8 = 6;
const EXIT_GRADCHECK: u8 = 7;
const EXIT_FROZEN: u8 = 8;

#[derive(Parser)]
#[command(
    name = "ultras",
    version,
    about = "Masked spectro-temporal pretraining and probing"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used for anything the config file leaves out
    #[arg(long, global = true, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Upper bound on worker threads
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output file or directory of the command
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Total pretraining steps, split between the phases in the preset's ratio
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Segment mask probability
    #[arg(long, global = true)]
    p: Option<f64>,
    /// Chained propagation probability
    #[arg(long = "pprime", global = true)]
    p_prime: Option<f64>,
    #[arg(long, global = true)]
    ks: Option<usize>,
    #[arg(long, global = true)]
    kt: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the resolved configuration as TOML
    Config,
    /// Write the synthetic four-class corpus
    Synth {
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Compute and cache log-mel spectrograms for a manifest
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Fit the spectral and temporal codebooks
    FitCodebooks {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// External temporal frame file (embeddings are quantized, labels used as is)
        #[arg(long)]
        external: Option<PathBuf>,
    },
    /// Run two-phase pretraining
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codebooks: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        external: Option<PathBuf>,
        /// Continue from the latest checkpoint in the output directory
        #[arg(long)]
        resume: bool,
        /// Disable gradient clipping
        #[arg(long)]
        no_clip: bool,
        /// Record wall time in the log (makes logs differ between runs)
        #[arg(long)]
        wall_time: bool,
    },
    /// Probe a frozen encoder with k-fold evaluation
    Probe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Finite-difference check of the tiny model in f64
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::REL_ERROR_FLOOR)]
        tol: f64,
    },
    /// Compare empirical segment-mask coverage with the analytic recursion
    Maskstats {
        #[arg(long, default_value_t = 50)]
        segments: usize,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::NotFound(_) => EXIT_IO,
        Error::Format(_) | Error::Audio(_) => EXIT_FORMAT,
        Error::NonFinite(_) | Error::EmptyMask(_) | Error::Insufficient(_) => EXIT_NUMERIC,
        Error::Mismatch(_) | Error::Geometry(_) => EXIT_MISMATCH,
        Error::FrozenViolation => EXIT_FROZEN,
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            match c.profile {
                Some(p) if !text.lines().any(|l| l.trim_start().starts_with("profile")) => {
                    RunConfig::from_toml_str(&format!("profile = \"{}\"\n{text}", profile_name(p)))?
                }
                _ => RunConfig::from_toml_str(&text)?,
            }
        }
        None => RunConfig::preset(c.profile.unwrap_or(Profile::DeskScale)),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(steps) = c.steps {
        cfg.set_total_steps(steps)?;
    }
    if let Some(l) = c.lambda {
        cfg.plan.lambda = l;
    }
    if let Some(p) = c.p {
        cfg.mask.p = p;
    }
    if let Some(p) = c.p_prime {
        cfg.mask.p_prime = p;
    }
    if let Some(k) = c.ks {
        cfg.model.k_s = k;
    }
    if let Some(k) = c.kt {
        cfg.model.k_t = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn profile_name(p: Profile) -> &'static str {
    match p {
        Profile::PaperScale => "paper-scale",
        Profile::DeskScale => "desk-scale",
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| io_err(path, e))?))
}

fn featurize(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    cache: Option<&Path>,
) -> Result<Vec<MelSpectrogram>> {
    let cache = cache.map(SpectrogramCache::new).transpose()?;
    pipeline::featurize_manifest(manifest, &cfg.frontend, cache.as_ref())
}

fn external_records(path: &Path) -> Result<Vec<quantizer::ExternalRecord>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    quantizer::decode_external_frames(&bytes)
}

fn cmd_synth(cfg: &RunConfig, out: &Path, per_class: Option<usize>) -> Result<()> {
    let mut spec = cfg.synth.clone();
    if let Some(n) = per_class {
        spec.per_class = n;
    }
    let m = data::generate_synthetic(&spec, out)?;
    write_atomic(
        &out.join("run_config.toml"),
        cfg.to_toml_string()?.as_bytes(),
    )?;
    println!(
        "wrote {} clips and {}",
        m.len(),
        out.join("manifest.tsv").display()
    );
    Ok(())
}

fn cmd_featurize(cfg: &RunConfig, out: &Path, manifest: &Path) -> Result<()> {
    let m = CorpusManifest::read(manifest)?;
    let specs = featurize(cfg, &m, Some(out))?;
    println!("cached {} spectrograms in {}", specs.len(), out.display());
    Ok(())
}

const SPECTRAL_FILE: &str = "spectral.ulcb";
const TEMPORAL_FILE: &str = "temporal.ulcb";
const CODEBOOK_INFO: &str = "codebooks.json";

fn cmd_fit_codebooks(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    cache: Option<&Path>,
    external: Option<&Path>,
) -> Result<()> {
    let m = CorpusManifest::read(manifest)?;
    let specs = featurize(cfg, &m, cache)?;
    let binding = cfg.feature_hash();
    mkdir(out)?;
    let temporal_kind;
    match external {
        None => {
            let books = pipeline::fit_codebooks(
                &specs,
                &cfg.grid,
                cfg.model.k_s,
                cfg.model.k_t,
                &cfg.codebooks,
                &binding,
            )?;
            quantizer::save_codebook(&books.spectral, &out.join(SPECTRAL_FILE))?;
            quantizer::save_codebook(&books.temporal, &out.join(TEMPORAL_FILE))?;
            temporal_kind = "frames";
        }
        Some(path) => {
            let patches: Vec<Vec<f32>> = specs
                .iter()
                .map(|s| gridding::patch_vectors(s, &cfg.grid))
                .collect::<Result<Vec<_>>>()?
                .concat();
            let params = |k, salt: u64| KMeansParams {
                k,
                seed: cfg.codebooks.seed.wrapping_add(salt),
                max_iters: cfg.codebooks.max_iters,
                tol: cfg.codebooks.tol,
                n_init: cfg.codebooks.n_init,
            };
            let spectral = quantizer::fit_codebook(
                &patches,
                CodebookSource::SpectralPatch,
                &params(cfg.model.k_s, 0),
                &binding,
            )?;
            quantizer::save_codebook(&spectral, &out.join(SPECTRAL_FILE))?;
            let records = external_records(path)?;
            let mut vectors = Vec::new();
            for r in &records {
                if let ExternalPayload::Embeddings { dim, values } = &r.payload {
                    vectors.extend(values.chunks_exact(*dim).map(<[f32]>::to_vec));
                }
            }
            if vectors.is_empty() {
                temporal_kind = "external-labels";
            } else {
                let cb = quantizer::fit_codebook(
                    &vectors,
                    CodebookSource::ExternalEmbedding,
                    &params(cfg.model.k_t, 1),
                    &binding,
                )?;
                quantizer::save_codebook(&cb, &out.join(TEMPORAL_FILE))?;
                temporal_kind = "external-embeddings";
            }
        }
    }
    let info = json!({
        "config_hash": cfg.hash(),
        "feature_hash": binding,
        "manifest_sha256": file_sha(manifest)?,
        "k_s": cfg.model.k_s,
        "k_t": cfg.model.k_t,
        "temporal": temporal_kind,
    });
    write_json(&out.join(CODEBOOK_INFO), &info)?;
    println!(
        "codebooks written to {} (temporal targets: {temporal_kind})",
        out.display()
    );
    Ok(())
}

struct LoadedBooks {
    spectral: Codebook,
    temporal: Option<Codebook>,
    binding: String,
}

fn load_books(cfg: &RunConfig, dir: &Path) -> Result<LoadedBooks> {
    let info = read_json(&dir.join(CODEBOOK_INFO))?;
    if info["feature_hash"].as_str() != Some(cfg.feature_hash().as_str()) {
        return Err(Error::Mismatch(format!(
            "codebooks in {} were fitted with different frontend/grid settings",
            dir.display()
        )));
    }
    let spectral = quantizer::load_codebook(&dir.join(SPECTRAL_FILE))?;
    let tp = dir.join(TEMPORAL_FILE);
    let temporal = if tp.exists() {
        Some(quantizer::load_codebook(&tp)?)
    } else {
        None
    };
    if spectral.k != cfg.model.k_s || temporal.as_ref().is_some_and(|t| t.k != cfg.model.k_t) {
        return Err(Error::Mismatch(format!(
            "codebook sizes do not match model K_s={} K_t={}",
            cfg.model.k_s, cfg.model.k_t
        )));
    }
    let mut h = BTreeMap::new();
    h.insert("feature_hash", cfg.feature_hash());
    h.insert("spectral", file_sha(&dir.join(SPECTRAL_FILE))?);
    if tp.exists() {
        h.insert("temporal", file_sha(&tp)?);
    }
    Ok(LoadedBooks {
        spectral,
        temporal,
        binding: hash_json(&h),
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_pretrain(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    codebooks: &Path,
    cache: Option<&Path>,
    external: Option<&Path>,
    resume: bool,
    no_clip: bool,
    wall_time: bool,
) -> Result<()> {
    let m = CorpusManifest::read(manifest)?;
    let specs = featurize(cfg, &m, cache)?;
    let books = load_books(cfg, codebooks)?;
    let corpus = match external {
        None => {
            let temporal = books
                .temporal
                .clone()
                .ok_or_else(|| Error::NotFound("temporal codebook (or pass --external)".into()))?;
            if temporal.source != CodebookSource::TemporalFrame {
                return Err(Error::Mismatch(
                    "temporal codebook was fitted on external frames; pass --external".into(),
                ));
            }
            pipeline::build_corpus(
                &specs,
                &cfg.grid,
                &CodebookPair {
                    spectral: books.spectral.clone(),
                    temporal,
                },
            )?
        }
        Some(path) => {
            let labels = quantizer::labels_from_records(
                &external_records(path)?,
                cfg.codebooks.external_rate_hz,
                cfg.frontend.clip_seconds,
                books.temporal.as_ref(),
            )?;
            m.entries
                .iter()
                .zip(&specs)
                .map(|(e, s)| {
                    let l = labels.get(&e.id).ok_or_else(|| {
                        Error::NotFound(format!("external frames for clip {}", e.id))
                    })?;
                    trainer::prepare_example(
                        s,
                        &cfg.grid,
                        &books.spectral,
                        TemporalSource::External(l),
                    )
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let mut pc = cfg.pretrain();
    let (mean, std) = pipeline::input_stats(&specs)?;
    pc.model.input_mean = mean;
    pc.model.input_std = std;
    if no_clip {
        pc.plan.grad_clip = 0.0;
    }
    let binding = hash_json(&(&books.binding, file_sha(manifest)?));
    mkdir(out)?;
    let resume_from = if resume {
        trainer::latest_checkpoint(out)
            .map(|p| trainer::load_checkpoint(&p))
            .transpose()?
    } else {
        None
    };
    if let Some(ck) = &resume_from {
        println!("resuming from step {}", ck.step);
    }
    let binding_doc =
        serde_json::to_string(&json!({ "feature_hash": cfg.feature_hash(), "run": binding }))
            .map_err(|e| Error::Format(e.to_string()))?;
    let outcome = trainer::run_pretraining(
        &pc,
        &corpus,
        &binding_doc,
        RunOptions {
            out_dir: Some(out.to_path_buf()),
            resume: resume_from,
            record_wall_time: wall_time,
            ..Default::default()
        },
    )?;
    let last = outcome.log.last();
    let summary = json!({
        "config_hash": cfg.hash(),
        "pretrain_hash": pc.hash(),
        "steps": outcome.step,
        "final_total_loss": last.map(|r| r.total),
        "checkpoints": outcome.checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    write_json(&out.join("pretrain.json"), &summary)?;
    if let Some(r) = last {
        println!(
            "step {} spectral {:.4} temporal {:.4} total {:.4}",
            r.step, r.spectral, r.temporal, r.total
        );
    }
    Ok(())
}

fn cmd_probe(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    checkpoint: &Path,
    cache: Option<&Path>,
) -> Result<()> {
    let ck = trainer::load_checkpoint(checkpoint)?;
    let bound: serde_json::Value = serde_json::from_str(&ck.binding)
        .map_err(|_| Error::Format("checkpoint binding is not JSON".into()))?;
    if bound["feature_hash"].as_str() != Some(cfg.feature_hash().as_str()) {
        return Err(Error::Mismatch(
            "checkpoint was trained with different frontend/grid settings".into(),
        ));
    }
    let m = CorpusManifest::read(manifest)?;
    let labels = m.labels()?;
    let specs = featurize(cfg, &m, cache)?;
    let clips: Vec<Vec<f32>> = specs
        .iter()
        .map(|s| gridding::patch_vectors(s, &cfg.grid).map(|p| p.concat()))
        .collect::<Result<_>>()?;
    let folds: Vec<usize> = if m.entries.iter().all(|e| e.fold.is_some()) {
        m.entries.iter().map(|e| e.fold.unwrap() as usize).collect()
    } else {
        probe::stratified_folds(&labels, cfg.probe.folds, cfg.probe.seed)?
    };
    let (model, report) = probe::train_probe(&ck.params, &clips, &labels, &folds, &cfg.probe)?;
    let means: Vec<Vec<f64>> = specs.iter().map(MelSpectrogram::mean_column).collect();
    let baseline = probe::kfold_with(&means, &labels, &folds, |tx, ty, sx, _| {
        probe::nearest_centroid(tx, ty, sx)
    })?;
    let report = probe::ProbeReport {
        probe: report,
        baseline: Some(baseline),
        layer_weights: model.weights.effective(),
        config_hash: cfg.probe.hash(),
        checkpoint_hash: trainer::carried_hash(&ck.params),
    };
    let value = serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?;
    write_json(out, &value)?;
    println!(
        "probe mean accuracy {:.4} over {} folds (mel-centroid baseline {:.4})",
        report.probe.mean_accuracy,
        report.probe.fold_accuracies.len(),
        report
            .baseline
            .as_ref()
            .map_or(f64::NAN, |b| b.mean_accuracy)
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>, tol: f64) -> Result<bool> {
    let tiny = gradcheck::tiny_config();
    let r = gradcheck::check_gradients(&tiny, 2, cfg.plan.lambda, 1e-5, cfg.plan.seed)?;
    let pass = r.passed(tol);
    println!(
        "{} parameters, max relative error {:.3e} (max abs {:.3e}) at {}[{}]: {}",
        r.n_params,
        r.max_rel_error,
        r.max_abs_error,
        r.worst_tensor,
        r.worst_index,
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(path) = out {
        write_json(
            path,
            &serde_json::to_value(&r).map_err(|e| Error::Format(e.to_string()))?,
        )?;
    }
    Ok(pass)
}

fn cmd_maskstats(cfg: &RunConfig, out: Option<&Path>, segments: usize, draws: usize) -> Result<()> {
    let s = masking::mask_statistics(segments, &cfg.mask, draws, cfg.mask.seed)?;
    println!(
        "{:>4} {:>10} {:>10} {:>8}",
        "n", "analytic", "empirical", "z"
    );
    for (i, ((a, e), sd)) in s
        .analytic
        .iter()
        .zip(&s.empirical)
        .zip(&s.sigma)
        .enumerate()
    {
        println!(
            "{:>4} {:>10.6} {:>10.6} {:>8.3}",
            i + 1,
            a,
            e,
            (e - a) / sd.max(f64::MIN_POSITIVE)
        );
    }
    println!(
        "fixed point {:.6}  empirical fraction {:.6}  max |z| {:.3}",
        s.fixed_point,
        s.empirical_fraction,
        s.max_z()
    );
    if let Some(path) = out {
        write_json(
            path,
            &serde_json::to_value(&s).map_err(|e| Error::Format(e.to_string()))?,
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = resolve_config(&cli.common)?;
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let out = cli.common.out.as_deref();
    let or = |default: &str| {
        out.map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(default))
    };
    match cli.cmd {
        Cmd::Config => print!("{}", cfg.to_toml_string()?),
        Cmd::Synth { per_class } => cmd_synth(&cfg, &or("synth"), per_class)?,
        Cmd::Featurize { manifest } => cmd_featurize(&cfg, &or("cache"), &manifest)?,
        Cmd::FitCodebooks {
            manifest,
            cache,
            external,
        } => cmd_fit_codebooks(
            &cfg,
            &or("codebooks"),
            &manifest,
            cache.as_deref(),
            external.as_deref(),
        )?,
        Cmd::Pretrain {
            manifest,
            codebooks,
            cache,
            external,
            resume,
            no_clip,
            wall_time,
        } => cmd_pretrain(
            &cfg,
            &or("run"),
            &manifest,
            &codebooks,
            cache.as_deref(),
            external.as_deref(),
            resume,
            no_clip,
            wall_time,
        )?,
        Cmd::Probe {
            manifest,
            checkpoint,
            cache,
        } => cmd_probe(
            &cfg,
            &or("probe_report.json"),
            &manifest,
            &checkpoint,
            cache.as_deref(),
        )?,
        Cmd::Gradcheck { tol } => {
            if !cmd_gradcheck(&cfg, out, tol)? {
                return Ok(EXIT_GRADCHECK);
            }
        }
        Cmd::Maskstats { segments, draws } => cmd_maskstats(&cfg, out, segments, draws)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match exit_code(&e) {
                0 => EXIT_FAILURE,
                c => c,
            })
        }
    }
}
