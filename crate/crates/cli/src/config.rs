use std::fs;
use std::path::Path;

use dgm_core::gmamba::CascadeKind;
use dgm_core::scene::SCENE_SIZE;
use dgm_core::LossConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// File name of the configuration written into every output directory.
pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub channels: usize,
    pub state_size: usize,
    /// Side length of synthetic scenes.
    pub size: usize,
    pub kind: CascadeKind,
    pub loss: LossConfig,
    /// Schedule position for single loss evaluations.
    pub t: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 8,
            state_size: 4,
            size: SCENE_SIZE,
            kind: CascadeKind::Cascade,
            loss: LossConfig::default(),
            t: 0.0,
            steps: 200,
            learning_rate: 0.01,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Usage(format!("invalid run configuration: {m}")));
        if self.channels == 0 || self.channels > u16::MAX as usize {
            return bad(format!("channels must be in 1..=65535, got {}", self.channels));
        }
        if self.state_size == 0 {
            return bad("state_size must be at least 1".into());
        }
        if self.size < 4 {
            return bad(format!("size must be at least 4, got {}", self.size));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return bad(format!("t must be in [0, 1], got {}", self.t));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        self.loss.validate().map_err(|e| CliError::Usage(format!("invalid run configuration: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes the configuration into `dir`, creating it if needed.
    pub fn save_into(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, self.to_json()).map_err(|e| CliError::io(path, e))
    }
}
