//! Training, inference and atlas-based segmentation built on the network,
//! simulator and resampler.

mod evaluate;
mod segment;
mod synth;
mod train;

use crate::error::{check_dims, Error, Result};
use crate::grid::{LabelMap, Volume};

pub use evaluate::{evaluate_simulated, EvaluationPair, FIELDS_PER_IMAGE, MI_BINS};
pub use segment::{
    atlas_segment, backproject_prediction, fuse_votes, multi_atlas_segment, register, segment_mtl, segment_probabilities, select_top,
    Backprojection, MultiAtlasResult, SegmentMode, INVERSION_MAX_ITERS, INVERSION_TOL,
};
pub use synth::{make_synthetic_dataset, SYNTH_CLASSES};
pub use train::{train, train_from, LossRecord, Mode, TrainConfig, TrainResult};

/// One training image with optional labels and an optional real fixed
/// image for dual registration.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub moving: Volume,
    pub moving_labels: Option<LabelMap>,
    pub fixed_real: Option<Volume>,
    pub fixed_real_labels: Option<LabelMap>,
}

impl TrainSample {
    pub fn new(moving: Volume, moving_labels: Option<LabelMap>) -> Result<Self> {
        if let Some(l) = &moving_labels {
            check_dims(moving.dims(), l.dims())?;
        }
        Ok(Self { moving, moving_labels, fixed_real: None, fixed_real_labels: None })
    }
}

/// Candidate atlases and the fraction of them kept after ranking.
#[derive(Clone, Debug)]
pub struct AtlasSet {
    pub entries: Vec<(Volume, LabelMap)>,
    pub selection_fraction: f64,
    /// Window of the NLCC used for ranking.
    pub nlcc_window: usize,
}

impl AtlasSet {
    pub fn new(entries: Vec<(Volume, LabelMap)>, selection_fraction: f64) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::InvalidArgument("empty atlas set".into()))?;
        let (dims, classes) = (first.0.dims(), first.1.num_classes());
        for (v, l) in &entries {
            check_dims(dims, v.dims())?;
            check_dims(dims, l.dims())?;
            if l.num_classes() != classes {
                return Err(Error::InvalidArgument("atlases disagree on the number of classes".into()));
            }
        }
        if !(selection_fraction > 0.0 && selection_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("selection fraction {selection_fraction} not in (0, 1]")));
        }
        Ok(Self { entries, selection_fraction, nlcc_window: 5 })
    }

    /// `⌈fraction · N⌉`, at least one.
    pub fn keep_count(&self) -> usize {
        let raw = self.selection_fraction * self.entries.len() as f64;
        ((raw - 1e-9).ceil() as usize).clamp(1, self.entries.len())
    }
}
