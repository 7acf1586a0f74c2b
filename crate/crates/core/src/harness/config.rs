use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvironmentKind, EnvironmentSpec};
use crate::{Error, Result};

/// Which data the target's transition model is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetType {
    /// Target samples only.
    Single,
    /// All fleet samples pooled, member identity ignored.
    Joint,
    /// All fleet samples under the coregionalized fleet kernel.
    Fleet,
}

impl TargetType {
    pub const ALL: [TargetType; 3] = [TargetType::Single, TargetType::Joint, TargetType::Fleet];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetType::Single => "single",
            TargetType::Joint => "joint",
            TargetType::Fleet => "fleet",
        }
    }
}

impl fmt::Display for TargetType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TargetType::Single),
            "joint" => Ok(TargetType::Joint),
            "fleet" => Ok(TargetType::Fleet),
            other => Err(Error::Config(format!("unknown target type '{other}'"))),
        }
    }
}

/// Physics and sample budget of every fleet member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub params: Vec<f64>,
    pub samples: Vec<usize>,
    #[serde(default)]
    pub names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GprlConfig {
    pub gamma: f64,
    pub supports: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub value_restarts: usize,
    pub fit_value_variance: bool,
    pub search_starts: usize,
}

impl Default for GprlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            supports: 200,
            tol: 1e-3,
            max_iters: 50,
            value_restarts: 5,
            fit_value_variance: false,
            search_starts: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub noise_variance: f64,
    pub restarts: usize,
    /// Regress state increments rather than next states.
    pub increments: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            noise_variance: 1e-8,
            restarts: 5,
            increments: false,
        }
    }
}

/// Optional overrides of the environment preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentOverrides {
    pub start: Option<Vec<f64>>,
    pub goal: Option<Vec<f64>>,
    pub reward_width: Option<f64>,
    pub horizon: Option<usize>,
}

/// One experiment, as read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub environment: EnvironmentKind,
    #[serde(default)]
    pub target: usize,
    #[serde(default = "all_types")]
    pub target_types: Vec<TargetType>,
    #[serde(default = "one")]
    pub runs: usize,
    /// Seed of run 0; run `i` uses `seed + i` for every target type, so the
    /// target types are compared on identical data.
    #[serde(default)]
    pub seed: u64,
    /// Explicit per-run seeds; overrides `seed` when present.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    pub fleet: FleetConfig,
    #[serde(default)]
    pub gprl: GprlConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub overrides: EnvironmentOverrides,
}

fn all_types() -> Vec<TargetType> {
    TargetType::ALL.to_vec()
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.fleet.params.len();
        let fail = |msg: String| Err(Error::Config(msg));
        if m == 0 || self.fleet.samples.len() != m {
            return fail(format!("fleet needs one sample count per member ({m} params, {} counts)", self.fleet.samples.len()));
        }
        if !self.fleet.names.is_empty() && self.fleet.names.len() != m {
            return fail("fleet names must be empty or one per member".into());
        }
        if self.target >= m {
            return fail(format!("target {} outside fleet of {m}", self.target));
        }
        if self.fleet.samples[self.target] == 0 {
            return fail("the target member needs at least one sample".into());
        }
        if self.runs == 0 {
            return fail("runs must be >= 1".into());
        }
        if let Some(seeds) = &self.seeds {
            if seeds.len() != self.runs {
                return fail(format!("{} seeds given for {} runs", seeds.len(), self.runs));
            }
        }
        if self.target_types.is_empty() {
            return fail("at least one target type is required".into());
        }
        if !(0.0..1.0).contains(&self.gprl.gamma) {
            return fail("gamma must lie in [0, 1)".into());
        }
        if self.gprl.supports == 0 || self.gprl.max_iters == 0 || self.gprl.search_starts == 0 {
            return fail("supports, max_iters and search_starts must be positive".into());
        }
        if self.model.restarts == 0 || !(self.model.noise_variance >= 0.0) {
            return fail("model restarts must be >= 1 and noise variance >= 0".into());
        }
        if self.workers == Some(0) {
            return fail("workers must be >= 1".into());
        }
        self.environment_spec()?;
        Ok(())
    }

    /// Seed of run `run`.
    pub fn run_seed(&self, run: usize) -> u64 {
        match &self.seeds {
            Some(s) => s[run],
            None => self.seed.wrapping_add(run as u64),
        }
    }

    pub fn member_name(&self, m: usize) -> String {
        self.fleet.names.get(m).cloned().unwrap_or_else(|| format!("member_{m}"))
    }

    /// The environment preset with fleet parameters and overrides applied.
    pub fn environment_spec(&self) -> Result<EnvironmentSpec> {
        let params = self.fleet.params.clone();
        let mut env = match self.environment {
            EnvironmentKind::MountainCar => EnvironmentSpec::mountain_car(params),
            EnvironmentKind::CartPole => EnvironmentSpec::cart_pole(params),
            EnvironmentKind::WindFarm => {
                let mut env = EnvironmentSpec::wind_farm(params);
                // start aligned, with the target's own power output
                if let Some(&eff) = env.member_params.get(self.target) {
                    env.start[2] = env.wake.power(0.0, 0.0, eff);
                }
                env
            }
        };
        let o = &self.overrides;
        if let Some(s) = &o.start {
            env.start = s.clone();
        }
        if let Some(g) = &o.goal {
            env.goal = g.clone();
        }
        if let Some(w) = o.reward_width {
            env.reward_width = w;
        }
        if let Some(h) = o.horizon {
            env.horizon = h;
        }
        env.validate()?;
        Ok(env)
    }
}
