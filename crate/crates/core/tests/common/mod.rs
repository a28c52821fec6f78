#![allow(dead_code)]

use ultras::config::RunConfig;
use ultras::data::{SynthClass, SynthSpec};
use ultras::frontend::{self, FrontendConfig, MelSpectrogram};
use ultras::model::Example;
use ultras::pipeline::{self, CodebookPair};
use ultras::trainer::PretrainConfig;

pub const CLASSES: [SynthClass; 4] = [
    SynthClass::Tone,
    SynthClass::Chirp,
    SynthClass::Noise,
    SynthClass::AmTone,
];

pub fn mel_of(
    spec: &SynthSpec,
    class: SynthClass,
    index: usize,
    fc: &FrontendConfig,
) -> MelSpectrogram {
    let pcm = spec.render(class, index).unwrap();
    let clip = frontend::clip_from_pcm(&pcm, fc).unwrap();
    frontend::compute_logmel(&clip, fc).unwrap()
}

/// `per_class` clips of every class, interleaved by class, with labels.
pub fn synth_mels(
    spec: &SynthSpec,
    per_class: usize,
    fc: &FrontendConfig,
) -> (Vec<MelSpectrogram>, Vec<u32>) {
    let mut mels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class {
        for c in CLASSES {
            mels.push(mel_of(spec, c, i, fc));
            labels.push(c.label());
        }
    }
    (mels, labels)
}

pub struct DeskCorpus {
    pub cfg: PretrainConfig,
    pub corpus: Vec<Example<f32>>,
    pub books: CodebookPair,
    pub mels: Vec<MelSpectrogram>,
}

/// Codebooks and examples from `per_class` synthetic clips of each class,
/// with the model config's input statistics filled in.
pub fn desk_corpus(run: &RunConfig, per_class: usize) -> DeskCorpus {
    let (mels, _) = synth_mels(&run.synth, per_class, &run.frontend);
    let books = pipeline::fit_codebooks(
        &mels,
        &run.grid,
        run.model.k_s,
        run.model.k_t,
        &run.codebooks,
        "test",
    )
    .unwrap();
    let corpus = pipeline::build_corpus(&mels, &run.grid, &books).unwrap();
    let mut cfg = run.pretrain();
    let (m, s) = pipeline::input_stats(&mels).unwrap();
    cfg.model.input_mean = m;
    cfg.model.input_std = s;
    DeskCorpus {
        cfg,
        corpus,
        books,
        mels,
    }
}

/// Short clips (`segments` segments each) for fast training tests.
pub fn short_run(segments: usize) -> RunConfig {
    let mut run = RunConfig::desk_scale();
    run.frontend.clip_seconds = segments as f64 * 0.16;
    run.synth.clip_seconds = run.frontend.clip_seconds;
    run.model.n_max = segments.max(1);
    run.model.d_model = 16;
    run.model.n_heads = 2;
    run.model.n_layers = 1;
    run.model.k_s = 8;
    run.model.k_t = 8;
    run.plan.batch_size = 2;
    run
}
