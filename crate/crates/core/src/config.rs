//! Run configuration: one TOML document covering every stage, with
//! `paper-scale` and `desk-scale` presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::gridding::GridConfig;
use crate::io::hash_json;
use crate::masking::MaskConfig;
use crate::model::ModelConfig;
use crate::probe::ProbeConfig;
use crate::trainer::{OptimizerConfig, PretrainConfig, ScheduleConfig, TrainPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    PaperScale,
    DeskScale,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-scale" => Ok(Profile::PaperScale),
            "desk-scale" => Ok(Profile::DeskScale),
            _ => Err(Error::Config(format!(
                "unknown profile {s:?} (paper-scale, desk-scale)"
            ))),
        }
    }
}

/// K-means settings; the codebook sizes live in the model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub n_init: usize,
    pub seed: u64,
    /// Rate of imported temporal frames when targets come from an external
    /// frame file (one frame per 20 ms at defaults).
    pub external_rate_hz: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            n_init: 3,
            seed: 0,
            external_rate_hz: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub profile: Profile,
    pub frontend: FrontendConfig,
    pub grid: GridConfig,
    pub mask: MaskConfig,
    pub codebooks: CodebookConfig,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub probe: ProbeConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl RunConfig {
    pub fn paper_scale() -> Self {
        Self {
            profile: Profile::PaperScale,
            frontend: FrontendConfig::default(),
            grid: GridConfig::default(),
            mask: MaskConfig::default(),
            codebooks: CodebookConfig::default(),
            model: ModelConfig::paper_scale(),
            plan: TrainPlan::paper_scale(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            probe: ProbeConfig {
                epochs: 300,
                ..ProbeConfig::default()
            },
            synth: SynthSpec::default(),
        }
    }

    /// Small model, short schedule and small codebooks for a laptop CPU.
    pub fn desk_scale() -> Self {
        Self {
            profile: Profile::DeskScale,
            model: ModelConfig::desk_scale(),
            plan: TrainPlan::desk_scale(),
            schedule: ScheduleConfig::desk_scale(),
            probe: ProbeConfig::default(),
            ..Self::paper_scale()
        }
    }

    pub fn preset(p: Profile) -> Self {
        match p {
            Profile::PaperScale => Self::paper_scale(),
            Profile::DeskScale => Self::desk_scale(),
        }
    }

    /// Parses TOML. Missing sections take the defaults of the profile named
    /// in the document (desk-scale when absent).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let profile = match doc.get("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("profile must be a string".into())),
            None => Profile::DeskScale,
        };
        let mut base = toml::Table::try_from(Self::preset(profile))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, doc);
        let cfg: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Sets every stage's seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.mask.seed = seed;
        self.codebooks.seed = seed;
        self.plan.seed = seed;
        self.probe.seed = seed;
        self.synth.seed = seed;
        self
    }

    /// Checks each section and every cross-section constraint.
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.grid.validate()?;
        self.mask.validate()?;
        self.model.validate()?;
        self.plan.validate()?;
        self.schedule.with_total(1).validate()?;
        self.optimizer.validate()?;
        self.probe.validate()?;
        self.synth.validate()?;
        let g = &self.grid;
        let m = &self.model;
        if g.n_mels != self.frontend.n_mels {
            return Err(Error::Config(format!(
                "grid.n_mels {} differs from frontend.n_mels {}",
                g.n_mels, self.frontend.n_mels
            )));
        }
        if m.patch_dim != g.patch_dim() {
            return Err(Error::Config(format!(
                "model.patch_dim {} must equal grid patch size squared {}",
                m.patch_dim,
                g.patch_dim()
            )));
        }
        if m.r_s != g.r_s() || m.r_t != g.r_t() {
            return Err(Error::Config(format!(
                "model r_s/r_t {}/{} must equal grid D/P = {} and P/P' = {}",
                m.r_s,
                m.r_t,
                g.r_s(),
                g.r_t()
            )));
        }
        let n_seg = g.n_segments(self.frontend.n_frames());
        if n_seg == 0 || n_seg > m.n_max {
            return Err(Error::Config(format!(
                "clip yields {n_seg} segments; model.n_max is {}",
                m.n_max
            )));
        }
        if self.synth.sample_rate != crate::frontend::SAMPLE_RATE {
            return Err(Error::Config(
                "synth.sample_rate must match the frontend rate".into(),
            ));
        }
        if !(self.codebooks.external_rate_hz > 0.0) || self.codebooks.n_init == 0 {
            return Err(Error::Config(
                "codebook external_rate_hz and n_init must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of the settings that shape spectrograms and patches.
    pub fn feature_hash(&self) -> String {
        hash_json(&(&self.frontend, &self.grid))
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            model: self.model.clone(),
            plan: self.plan.clone(),
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.clone(),
            mask: self.mask.clone(),
        }
    }

    /// Splits `total` steps between the phases in the preset's proportion.
    pub fn set_total_steps(&mut self, total: u64) -> Result<()> {
        if total < 2 {
            return Err(Error::Config(
                "need at least 2 steps (one per phase)".into(),
            ));
        }
        let before = self.plan.total_steps().max(1);
        let a = ((total as u128 * self.plan.phase_a_steps as u128 + before as u128 / 2)
            / before as u128) as u64;
        self.plan.phase_a_steps = a.clamp(1, total - 1);
        self.plan.joint_steps = total - self.plan.phase_a_steps;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::paper_scale().validate().unwrap();
        RunConfig::desk_scale().validate().unwrap();
        let p = RunConfig::paper_scale();
        assert_eq!(
            (p.model.d_model, p.model.n_layers, p.model.k_s, p.model.k_t),
            (768, 12, 100, 500)
        );
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let c = RunConfig::desk_scale();
        let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        let o =
            RunConfig::from_toml_str("profile = \"paper-scale\"\n[plan]\nlambda = 0.5\n").unwrap();
        assert_eq!(o.plan.lambda, 0.5);
        assert_eq!(o.model, ModelConfig::paper_scale());
    }

    #[test]
    fn cross_field_violations_are_named() {
        let err = RunConfig::from_toml_str("[grid]\npatch = 12\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("divisible") || err.contains("patch"), "{err}");
        let err = RunConfig::from_toml_str("[model]\nn_max = 10\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("n_max"), "{err}");
        assert!(RunConfig::from_toml_str("profile = \"huge\"").is_err());
        assert!(RunConfig::from_toml_str("[plan]\nlambda = 2.0\n").is_err());
    }

    #[test]
    fn step_split_keeps_proportion() {
        let mut c = RunConfig::desk_scale();
        c.set_total_steps(50).unwrap();
        assert_eq!((c.plan.phase_a_steps, c.plan.joint_steps), (20, 30));
        assert!(c.set_total_steps(1).is_err());
    }
}
