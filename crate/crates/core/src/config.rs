//! Run configuration: one JSON document covering every stage. Unknown keys
//! are rejected and missing keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DiversityHyper;
use crate::distill::DistillHyper;
use crate::embedding::DEFAULT_DIM;
use crate::env::{Encoder, EnvParams, ViewSpec};
use crate::error::{Error, Result};
use crate::goalgen::GoalOptions;
use crate::rl::PpoHyper;

/// Environment variable naming the run configuration file.
pub const CONFIG_ENV_VAR: &str = "GOALPIPE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub views: Vec<ViewSpec>,
    pub dim: usize,
    pub osc_amplitude: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            views: ViewSpec::default_set(0),
            dim: DEFAULT_DIM,
            osc_amplitude: 0.05,
        }
    }
}

impl EncoderConfig {
    pub fn build(&self) -> Result<Encoder> {
        Encoder::new(&self.views, self.dim, self.osc_amplitude)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub size: usize,
    /// Seed of the diversity build.
    pub seed: u64,
    /// Seed of the random-policy comparison dataset.
    pub random_seed: u64,
    pub diversity: DiversityHyper,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            size: 50_000,
            seed: 0,
            random_seed: 1,
            diversity: DiversityHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub gcrl: PpoHyper,
    pub mtrl: PpoHyper,
    /// Budget per concept.
    pub strl: PpoHyper,
    pub seed: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            gcrl: PpoHyper::with_steps(2_000_000),
            mtrl: PpoHyper::with_steps(800_000),
            strl: PpoHyper::with_steps(100_000),
            seed: 0,
            eval_episodes: 10,
            eval_seed: 10_000,
        }
    }
}

/// Artifact locations. Everything lives under `dir` with fixed names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("artifacts"),
        }
    }
}

impl Paths {
    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn configs(&self) -> PathBuf {
        self.file("diversity.gcfg")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.file("diversity.gemb")
    }

    pub fn random_configs(&self) -> PathBuf {
        self.file("random-policy.gcfg")
    }

    pub fn random_embeddings(&self) -> PathBuf {
        self.file("random-policy.gemb")
    }

    pub fn model(&self) -> PathBuf {
        self.file("distilled.gpol")
    }

    pub fn concepts(&self) -> PathBuf {
        self.file("concepts.json")
    }

    pub fn gcrl(&self) -> PathBuf {
        self.file("gcrl.gpol")
    }

    pub fn mtrl(&self) -> PathBuf {
        self.file("mtrl.gpol")
    }

    pub fn mtrl_raw(&self) -> PathBuf {
        self.file("mtrl-raw.gpol")
    }

    pub fn strl(&self, concept: &str) -> PathBuf {
        let safe: String = concept
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        self.file(&format!("strl-{safe}.gpol"))
    }

    pub fn report(&self) -> PathBuf {
        self.file("eval.json")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvParams,
    pub encoder: EncoderConfig,
    pub dataset: DatasetConfig,
    pub distill: DistillHyper,
    pub goal: GoalOptions,
    pub rl: RlConfig,
    pub concepts_seed: u64,
    pub paths: Paths,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if !(self.env.dt.is_finite() && self.env.dt > 0.0) || self.env.horizon == 0 {
            return bad("env: dt and horizon must be positive");
        }
        if self.encoder.views.is_empty() || self.encoder.dim == 0 {
            return bad("encoder: needs at least one view and a positive dim");
        }
        if !(self.encoder.osc_amplitude.is_finite() && self.encoder.osc_amplitude >= 0.0) {
            return bad("encoder: osc_amplitude must be non-negative");
        }
        if self.dataset.size == 0 {
            return bad("dataset: size must be positive");
        }
        self.dataset.diversity.validate()?;
        self.distill.validate()?;
        if self.goal.k == 0 || !(self.goal.lr.is_finite() && self.goal.lr > 0.0) {
            return bad("goal: k and lr must be positive");
        }
        for h in [&self.rl.gcrl, &self.rl.mtrl, &self.rl.strl] {
            h.validate()?;
        }
        if self.rl.eval_episodes == 0 {
            return bad("rl: eval_episodes must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads the file named by [`CONFIG_ENV_VAR`], or the defaults when
    /// the variable is unset.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CONFIG_ENV_VAR) {
            Some(p) => Self::load(Path::new(&p)),
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn encoder(&self) -> Result<Encoder> {
        self.encoder.build()
    }
}
