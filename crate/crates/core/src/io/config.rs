//! Run configuration: one TOML file with optional sections, overridable from
//! the command line.
//!
//! ```toml
//! seed = 7                 # sets both the simulator and the training seed
//!
//! [simulator]
//! max_elastic_gamma = 500.0
//!
//! [train]
//! mode = "mtl"             # reg | mtl | feat
//! steps = 200
//!
//! [paths]
//! dataset = "data/train"
//! output = "runs/a"
//!
//! [segment]
//! method = "multi-atlas"   # atlas | multi-atlas | mtl | feat
//! selection_fraction = 0.1
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;
use crate::simulator::SimulatorConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of `*_image.nii` / `*_labels.nii` samples.
    pub dataset: Option<PathBuf>,
    /// Directory of atlas samples, same layout as `dataset`.
    pub atlases: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentMethod {
    Atlas,
    #[default]
    MultiAtlas,
    Mtl,
    Feat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSettings {
    pub method: SegmentMethod,
    pub selection_fraction: f64,
    pub nlcc_window: usize,
}

impl Default for SegmentSettings {
    fn default() -> Self {
        Self { method: SegmentMethod::MultiAtlas, selection_fraction: 0.1, nlcc_window: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub simulator: SimulatorConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub segment: SegmentSettings,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path` and checks that every referenced input exists.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        cfg.check_inputs()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.simulator.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        let s = &self.segment;
        if !(s.selection_fraction > 0.0 && s.selection_fraction <= 1.0) {
            return Err(Error::Config(format!("selection_fraction {} not in (0, 1]", s.selection_fraction)));
        }
        if s.nlcc_window < 3 || s.nlcc_window.is_multiple_of(2) {
            return Err(Error::Config(format!("segment nlcc_window {} must be odd and at least 3", s.nlcc_window)));
        }
        Ok(())
    }

    /// Input paths must exist; the output directory may be created later.
    pub fn check_inputs(&self) -> Result<()> {
        for p in [&self.paths.dataset, &self.paths.atlases].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::MissingInput(p.clone()));
            }
        }
        Ok(())
    }
}
