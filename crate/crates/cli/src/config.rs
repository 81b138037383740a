//! Run configuration, read from a TOML file.
//!
//! Every section is optional and falls back to the library defaults. The
//! top-level `seed` is the only source of randomness: it replaces the
//! synthetic-data seed, the model initialisation seed, the phase-1 sampling
//! seed and the temporal-unit seed.

use std::path::{Path, PathBuf};

use fsvos::data::SynthConfig;
use fsvos::relearn::{LossWeights, RelearnConfig};
use fsvos::segmenter::Phase1Config;
use fsvos::{ArchConfig, Error};
use log::warn;
use serde::{Deserialize, Serialize};

/// Overrides `paths.output_root` when set.
pub const OUTPUT_ROOT_ENV: &str = "FSVOS_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training images per base class.
    pub images_per_class: usize,
    /// Video clips per novel class.
    pub clips_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            images_per_class: 200,
            clips_per_class: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub output_root: PathBuf,
    /// Sub-directories of `output_root`.
    pub dataset: PathBuf,
    pub phase1: PathBuf,
    pub relearn: PathBuf,
    pub eval: PathBuf,
    pub ablate: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            output_root: "runs".into(),
            dataset: "data".into(),
            phase1: "phase1".into(),
            relearn: "relearn".into(),
            eval: "eval".into(),
            ablate: "ablate".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataSection,
    pub model: ArchConfig,
    pub phase1: Phase1Config,
    pub relearn: RelearnConfig,
    pub lambda: LossWeights,
    /// Frames per inference window for relearned models; defaults to the
    /// relearn batch size.
    pub window: Option<usize>,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> fsvos::Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        if cfg.synth.seed != 0 && cfg.synth.seed != cfg.seed {
            warn!("synth.seed is ignored; the top-level seed drives data generation");
        }
        cfg.synth.seed = cfg.seed;
        cfg.relearn.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> fsvos::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> fsvos::Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.phase1.validate()?;
        self.relearn.validate()?;
        self.lambda.validate()?;
        self.model
            .check_input(self.synth.image_size.0, self.synth.image_size.1)?;
        if self.model.backbone.in_channels != self.synth.channels {
            return Err(Error::config(format!(
                "model expects {} channels but data has {}",
                self.model.backbone.in_channels, self.synth.channels
            )));
        }
        if self.data.images_per_class < 2 {
            return Err(Error::config("images_per_class must be at least 2"));
        }
        if self.window == Some(0) {
            return Err(Error::config("window must be at least 1"));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.window.unwrap_or(self.relearn.batch_size)
    }

    /// `paths.output_root`, unless the environment overrides it.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.paths.output_root.clone())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_root().join(&self.paths.dataset)
    }

    pub fn phase1_dir(&self) -> PathBuf {
        self.output_root().join(&self.paths.phase1)
    }

    pub fn relearn_dir(&self) -> PathBuf {
        self.output_root().join(&self.paths.relearn)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_root().join(&self.paths.eval)
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.output_root().join(&self.paths.ablate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.phase1.batch_size, 8);
        assert_eq!(cfg.relearn.batch_size, 4);
        assert_eq!(cfg.relearn.lr, 1e-5);
        assert_eq!(cfg.window(), 4);
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig::from_toml("seed = 11\n[synth]\nseed = 3\n").unwrap();
        assert_eq!((cfg.synth.seed, cfg.relearn.seed), (11, 11));
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "bogus = 1",
            "[phase1]\nadam_lr = -1.0",
            "[lambda]\nprediction = -0.5",
            "[synth]\nbase_classes = [\"ellipse\"]\nnovel_classes = [\"ellipse\"]",
            "window = 0",
        ] {
            assert!(
                matches!(RunConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
