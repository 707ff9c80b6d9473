//! Defaults, then the `--config` file, then flags.

use std::fs;
use std::path::Path;

use elmo_core::bilm::BiLmConfig;
use elmo_core::charcnn::CharCnnConfig;
use elmo_core::config::{Configurable, KeyValues};
use elmo_core::error::{Error, Result};
use elmo_core::probes::ProbeConfig;
use elmo_core::task::TaskConfig;
use elmo_core::trainer::TrainConfig;

/// Every tunable the commands read. Config keys are prefixed `charcnn.`,
/// `bilm.`, `train.`, `probe.` and `task.`; unknown keys are rejected.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    pub charcnn: CharCnnConfig,
    pub bilm: BiLmConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub task: TaskConfig,
}

impl Settings {
    pub fn load(config: Option<&Path>, seed: Option<u64>) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = config {
            let text = fs::read_to_string(path)?;
            let kv = KeyValues::parse(&text).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
            s.charcnn.apply("charcnn", &kv)?;
            s.bilm.apply("bilm", &kv)?;
            s.train.apply("train", &kv)?;
            s.probe.apply("probe", &kv)?;
            s.task.apply("task", &kv)?;
            kv.reject_unused()?;
        }
        if let Some(seed) = seed {
            s.train.seed = seed;
            s.probe.seed = seed;
            s.task.seed = seed;
        }
        Ok(s)
    }
}
