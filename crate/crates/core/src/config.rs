//! Run configuration: a single versioned JSON document.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::bestrq::{MaskSpec, SynthSpec};
use crate::dp::{ClipSpec, NoiseSpec};
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::optim::AdamConfig;
use crate::planner::PlanBase;
use crate::probe::ProbeSpec;

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides [`RunConfig::out_dir`] when set.
pub const OUT_ENV: &str = "DPPT_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FreezeSpec {
    pub enabled: bool,
    /// Fraction of trainable parameters selected by score.
    pub p: f64,
    /// Freeze the selected layers; otherwise freeze their complement.
    pub freeze_top: bool,
    /// Restart Adam moments when DP training begins.
    #[serde(default = "yes")]
    pub reset_moments: bool,
}

fn yes() -> bool {
    true
}

impl Default for FreezeSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            p: 0.01,
            freeze_top: true,
            reset_moments: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CodebookSpec {
    pub seed: u64,
    /// Width of the random projection.
    pub code_dim: usize,
}

impl Default for CodebookSpec {
    fn default() -> Self {
        Self { seed: 7, code_dim: 8 }
    }
}

/// Step counts for the two pre-training stages. Fine-tuning runs for
/// `probe.steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub warm_start_steps: usize,
    pub dp_steps: usize,
    pub warm_start_batch: usize,
    pub dp_batch: usize,
    /// Held-out evaluation period in steps; 0 evaluates only after the
    /// last step.
    #[serde(default)]
    pub eval_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warm_start_steps: 2_000,
            dp_steps: 10_000,
            warm_start_batch: 8,
            dp_batch: 8,
            eval_every: 500,
        }
    }
}

/// Stage abort rule: loss above `factor` times the first loss for
/// `patience` consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DivergenceSpec {
    pub factor: f64,
    pub patience: usize,
}

impl Default for DivergenceSpec {
    fn default() -> Self {
        Self {
            factor: 10.0,
            patience: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seeds initialisation, partitioning, minibatch sampling and masking.
    pub seed: u64,
    pub model: EncoderConfig,
    pub data: SynthSpec,
    /// Held-out examples used for the evaluation loss.
    pub eval_examples: usize,
    pub mask: MaskSpec,
    pub codebook: CodebookSpec,
    pub clip: ClipSpec,
    pub noise: NoiseSpec,
    pub freeze: FreezeSpec,
    pub accounting: PlanBase,
    pub schedule: Schedule,
    /// Share of examples released for the non-private warm start.
    pub public_fraction: f64,
    pub warm_start_optim: AdamConfig,
    pub dp_optim: AdamConfig,
    pub probe: ProbeSpec,
    #[serde(default)]
    pub divergence: DivergenceSpec,
    pub out_dir: PathBuf,
    /// Write elapsed seconds into metrics; off keeps outputs reproducible.
    #[serde(default)]
    pub record_wallclock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = EncoderConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: SynthSpec {
                d_feat: model.d_feat,
                ..Default::default()
            },
            model,
            eval_examples: 64,
            mask: MaskSpec::default(),
            codebook: CodebookSpec::default(),
            clip: ClipSpec::default(),
            noise: NoiseSpec {
                multiplier: 0.0,
                seed: 0,
            },
            freeze: FreezeSpec::default(),
            accounting: PlanBase::default(),
            schedule: Schedule::default(),
            public_fraction: 0.01,
            warm_start_optim: AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            dp_optim: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            probe: ProbeSpec::default(),
            divergence: DivergenceSpec::default(),
            out_dir: PathBuf::from("runs/default"),
            record_wallclock: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.data.validate()?;
        self.mask.validate()?;
        self.clip.validate()?;
        self.noise.validate()?;
        self.accounting.validate()?;
        self.warm_start_optim.validate()?;
        self.dp_optim.validate()?;
        self.probe.validate()?;
        if self.data.d_feat != self.model.d_feat {
            return Err(Error::Config(format!(
                "data.d_feat {} differs from model.d_feat {}",
                self.data.d_feat, self.model.d_feat
            )));
        }
        if self.mask.span_len >= self.data.frames {
            return Err(Error::Config("mask span must be shorter than an example".into()));
        }
        if self.codebook.code_dim == 0 {
            return Err(Error::Config("codebook.code_dim must be positive".into()));
        }
        if !(self.public_fraction > 0.0 && self.public_fraction < 1.0) {
            return Err(Error::Config(format!(
                "public_fraction must be in (0, 1), got {}",
                self.public_fraction
            )));
        }
        if self.public_count() == 0 {
            return Err(Error::Config("public partition is empty".into()));
        }
        let s = &self.schedule;
        if s.warm_start_steps == 0 || s.dp_steps == 0 {
            return Err(Error::Config("every stage needs a positive step count".into()));
        }
        if s.warm_start_batch == 0 || s.dp_batch == 0 || s.dp_batch > self.data.num_examples {
            return Err(Error::Config("batch sizes must be in 1..=num_examples".into()));
        }
        if self.eval_examples == 0 {
            return Err(Error::Config("eval_examples must be positive".into()));
        }
        if !(self.freeze.p > 0.0 && self.freeze.p <= 1.0) {
            return Err(Error::Config(format!(
                "freeze.p must be in (0, 1], got {}",
                self.freeze.p
            )));
        }
        if !(self.divergence.factor > 1.0) || self.divergence.patience == 0 {
            return Err(Error::Config(
                "divergence needs factor > 1 and positive patience".into(),
            ));
        }
        Ok(())
    }

    /// Number of examples in the public partition.
    pub fn public_count(&self) -> usize {
        (self.public_fraction * self.data.num_examples as f64).round() as usize
    }

    /// Replaces the run seed and the noise seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.noise.seed = seed;
        self
    }

    /// Applies `DPPT_OUT` if it is set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// JSON Schema of [`RunConfig`].
pub fn schema_json() -> String {
    let schema = schemars::schema_for!(RunConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.noise.multiplier = 1e-3;
        c.freeze.enabled = true;
        c.freeze.p = 0.00015;
        c.dp_optim.lr = 0.1 + 0.2;
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), c.to_json().unwrap());
    }

    #[test]
    fn unknown_field_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json().unwrap()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn bad_values_rejected() {
        let cases: Vec<fn(&mut RunConfig)> = vec![
            |c| c.public_fraction = 0.0,
            |c| c.public_fraction = 1.0,
            |c| c.schedule.dp_steps = 0,
            |c| c.schedule.warm_start_steps = 0,
            |c| c.schema_version = 2,
            |c| c.data.d_feat = 3,
            |c| c.freeze.p = 1.5,
            |c| c.freeze.p = 0.0,
            |c| c.public_fraction = 1e-6,
        ];
        for f in cases {
            let mut c = RunConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn seed_override_reaches_noise() {
        let c = RunConfig::default().with_seed(42);
        assert_eq!((c.seed, c.noise.seed), (42, 42));
    }

    #[test]
    fn published_schema_is_current() {
        assert_eq!(include_str!("../schema/run_config.schema.json"), schema_json());
    }

    #[test]
    fn schema_lists_top_level_fields() {
        let v: serde_json::Value = serde_json::from_str(&schema_json()).unwrap();
        let props = v["properties"].as_object().unwrap();
        for key in [
            "schema_version",
            "model",
            "clip",
            "noise",
            "freeze",
            "public_fraction",
            "out_dir",
        ] {
            assert!(props.contains_key(key), "{key}");
        }
    }
}
