//! Inference-time registration and the segmentation methods built on it.

use super::AtlasSet;
use crate::autodiff::network::{forward_graph, input_tensor, residual_seg_head};
use crate::autodiff::{forward_network, Graph, NetworkParameters, Tensor};
use crate::error::{check_dims, Error, Result};
use crate::grid::{one_hot, DisplacementField, LabelMap, ProbabilityMap, Volume};
use crate::metrics::{majority_vote, nlcc, uncertainty_map};
use crate::resample::{invert_field, warp_linear, warp_nearest, warp_probmap, Inversion};

/// Predicted field from `moving` to `fixed` and the warped moving image.
pub fn register(params: &NetworkParameters, moving: &Volume, fixed: &Volume) -> Result<(DisplacementField, Volume)> {
    check_dims(moving.dims(), fixed.dims())?;
    let field = forward_network(params, moving, fixed)?.field;
    let recon = warp_linear(moving, &field)?;
    Ok((field, recon))
}

/// Registers the atlas to `target` and carries its labels over with
/// nearest-neighbour resampling.
pub fn atlas_segment(params: &NetworkParameters, atlas: (&Volume, &LabelMap), target: &Volume) -> Result<LabelMap> {
    check_dims(atlas.0.dims(), atlas.1.dims())?;
    let (field, _) = register(params, atlas.0, target)?;
    warp_nearest(atlas.1, &field)
}

#[derive(Clone, Debug)]
pub struct MultiAtlasResult {
    pub consensus: LabelMap,
    /// Fraction of selected atlases disagreeing with the consensus.
    pub uncertainty: Volume,
    /// Indices of the kept atlases, best first.
    pub selected: Vec<usize>,
    /// NLCC of every atlas reconstruction against the target, by atlas index.
    pub scores: Vec<f64>,
}

/// Indices of the `keep` highest scores, best first; equal scores keep
/// index order.
pub fn select_top(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order
}

/// Majority vote over labels warped from `votes`, plus the disagreement map.
pub fn fuse_votes(votes: &[LabelMap]) -> Result<(LabelMap, Volume)> {
    let consensus = majority_vote(votes)?;
    let uncertainty = uncertainty_map(votes, &consensus)?;
    Ok((consensus, uncertainty))
}

/// Registers every atlas to the target, keeps the best-reconstructing
/// fraction by NLCC and fuses their warped labels.
pub fn multi_atlas_segment(params: &NetworkParameters, atlases: &AtlasSet, target: &Volume) -> Result<MultiAtlasResult> {
    let mut scores = Vec::with_capacity(atlases.entries.len());
    let mut warped = Vec::with_capacity(atlases.entries.len());
    for (image, labels) in &atlases.entries {
        let (field, recon) = register(params, image, target)?;
        scores.push(nlcc(&recon, target, atlases.nlcc_window)?);
        warped.push(warp_nearest(labels, &field)?);
    }
    let selected = select_top(&scores, atlases.keep_count());
    let votes: Vec<LabelMap> = selected.iter().map(|&i| warped[i].clone()).collect();
    let (consensus, uncertainty) = fuse_votes(&votes)?;
    Ok(MultiAtlasResult { consensus, uncertainty, selected, scores })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentMode {
    /// Argmax of the linearly warped one-hot atlas labels.
    Mtl,
    /// Argmax of the residual segmentation head.
    Feat,
}

/// Class probabilities for `target` from a labelled moving image.
pub fn segment_probabilities(
    params: &NetworkParameters,
    moving: (&Volume, &LabelMap),
    target: &Volume,
    mode: SegmentMode,
) -> Result<ProbabilityMap> {
    let (image, labels) = moving;
    check_dims(image.dims(), labels.dims())?;
    check_dims(image.dims(), target.dims())?;
    match mode {
        SegmentMode::Mtl => {
            let field = forward_network(params, image, target)?.field;
            warp_probmap(&one_hot(labels), &field)
        }
        SegmentMode::Feat => {
            if params.seg_classes() != Some(labels.num_classes()) {
                return Err(Error::InvalidArgument("segmentation head parameters absent or sized for other classes".into()));
            }
            let dims = image.dims();
            let mut g = Graph::new();
            let bound = params.bind(&mut g, false);
            let (input, _) = input_tensor(image, target)?;
            let x = g.constant(input);
            let out = forward_graph(&mut g, &bound, x)?;
            let field = g.crop(out.field, dims);
            let features = g.crop(out.features, dims);
            let c = labels.num_classes();
            let onehot = g.constant(Tensor::new(vec![c, dims[0], dims[1], dims[2]], one_hot(labels).values().to_vec()));
            let warped = g.warp(onehot, field);
            let probs = residual_seg_head(&mut g, &bound, features, warped)?;
            let values = g.value(probs).data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            ProbabilityMap::new(dims, c, values)
        }
    }
}

/// Segmentation of `target` by argmax over [`segment_probabilities`].
pub fn segment_mtl(params: &NetworkParameters, moving: (&Volume, &LabelMap), target: &Volume, mode: SegmentMode) -> Result<LabelMap> {
    Ok(segment_probabilities(params, moving, target, mode)?.argmax())
}

#[derive(Clone, Debug)]
pub struct Backprojection {
    /// Prediction carried into moving-image space.
    pub labels: LabelMap,
    pub inversion: Inversion,
}

pub const INVERSION_MAX_ITERS: usize = 50;
pub const INVERSION_TOL: f64 = 1e-3;

/// Maps a target-space prediction into moving-image space through the
/// approximate inverse of `field`.
pub fn backproject_prediction(field: &DisplacementField, prediction: &LabelMap) -> Result<Backprojection> {
    check_dims(field.dims(), prediction.dims())?;
    let inversion = invert_field(field, INVERSION_MAX_ITERS, INVERSION_TOL);
    let labels = warp_nearest(prediction, &inversion.field)?;
    Ok(Backprojection { labels, inversion })
}
