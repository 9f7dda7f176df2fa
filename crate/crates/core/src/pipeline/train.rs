//! Training loop: one moving image per step, with a freshly simulated fixed
//! image and ground-truth field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainSample;
use crate::autodiff::loss::{loss_hybrid, loss_mtl, loss_segmentation, Branch};
use crate::autodiff::network::{forward_graph, input_tensor, residual_seg_head, BoundParameters};
use crate::autodiff::{Adam, AdamConfig, Graph, NetworkParameters, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{one_hot, Dims, LabelMap, Volume};
use crate::simulator::{generate_pair, SimulatorConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Field supervision plus similarity.
    #[default]
    Reg,
    /// Dual registration with warped-label segmentation terms.
    Mtl,
    /// As `Mtl`, plus the residual segmentation head on network features.
    Feat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    /// Weight of the similarity terms.
    pub lambda: f64,
    /// Weight of the segmentation terms.
    pub beta: f64,
    pub nlcc_window: usize,
    pub adam: AdamConfig,
    /// Seeds the parameter initialization; simulation draws from the
    /// simulator seed.
    pub seed: u64,
    /// FEAT only: keep the warped-label Dice term of the simulated branch
    /// next to the feature-head term.
    pub feat_keep_warped_term: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Reg,
            steps: 500,
            lambda: 10.0,
            beta: 10.0,
            nlcc_window: 5,
            adam: AdamConfig::default(),
            seed: 0,
            feat_keep_warped_term: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and non-negative", self.lambda));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be finite and non-negative", self.beta));
        }
        if self.nlcc_window < 3 || self.nlcc_window.is_multiple_of(2) {
            return bad(format!("nlcc_window {} must be odd and at least 3", self.nlcc_window));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("adam settings out of range".into());
        }
        Ok(())
    }
}

/// Loss components of one step. Terms absent in the current mode are 0;
/// `seg` is the unweighted sum of every Dice term used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub field: f64,
    pub sim0: f64,
    pub sim1: f64,
    pub seg: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: NetworkParameters,
    pub history: Vec<LossRecord>,
    pub optimizer: Adam,
}

/// Trains from a fresh initialization.
pub fn train(dataset: &[TrainSample], sim: &SimulatorConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    let classes = check_dataset(dataset, cfg.mode)?;
    let head = (cfg.mode == Mode::Feat).then_some(classes).flatten();
    let params = NetworkParameters::init(cfg.seed, head);
    let optimizer = Adam::for_parameters(cfg.adam, &params);
    train_from(params, optimizer, dataset, sim, cfg)
}

/// Continues training `params` with an existing optimizer state.
pub fn train_from(
    mut params: NetworkParameters,
    mut optimizer: Adam,
    dataset: &[TrainSample],
    sim: &SimulatorConfig,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    sim.validate()?;
    let classes = check_dataset(dataset, cfg.mode)?;
    if cfg.mode == Mode::Feat && params.seg_classes() != classes {
        return Err(Error::InvalidArgument("FEAT training needs a segmentation head matching the label classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        let step = optimizer.step;
        let index = s % dataset.len();
        let (record, grads) = train_step(&params, dataset, index, sim, cfg, &mut rng)?;
        if !record.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss(step));
        }
        optimizer.step_parameters(&mut params, &grads);
        history.push(LossRecord { step, ..record });
    }
    Ok(TrainResult { params, history, optimizer })
}

/// Number of label classes, checking that MTL and FEAT have labels.
fn check_dataset(dataset: &[TrainSample], mode: Mode) -> Result<Option<usize>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if mode == Mode::Reg {
        return Ok(None);
    }
    let mut classes = None;
    for s in dataset {
        let l =
            s.moving_labels.as_ref().ok_or_else(|| Error::InvalidArgument(format!("{mode:?} training needs labels on every sample")))?;
        if *classes.get_or_insert(l.num_classes()) != l.num_classes() {
            return Err(Error::InvalidArgument("samples disagree on the number of classes".into()));
        }
    }
    if dataset.len() < 2 && dataset[0].fixed_real.is_none() {
        return Err(Error::InvalidArgument("dual registration needs at least two samples".into()));
    }
    Ok(classes)
}

fn volume_tensor(v: &Volume) -> Tensor {
    let d = v.dims();
    Tensor::new(vec![1, d[0], d[1], d[2]], v.data().to_vec())
}

fn one_hot_tensor(s: &LabelMap) -> Tensor {
    let d = s.dims();
    Tensor::new(vec![s.num_classes(), d[0], d[1], d[2]], one_hot(s).values().to_vec())
}

/// Network on (moving, fixed); returns the field cropped to `dims` and the
/// cropped features.
fn predict(g: &mut Graph, bound: &BoundParameters, moving: &Volume, fixed: &Volume) -> Result<(Var, Var)> {
    let dims: Dims = moving.dims();
    let (input, _) = input_tensor(moving, fixed)?;
    let x = g.constant(input);
    let out = forward_graph(g, bound, x)?;
    Ok((g.crop(out.field, dims), g.crop(out.features, dims)))
}

/// Real fixed image for dual registration: the sample's own when given,
/// otherwise another dataset sample drawn uniformly.
fn real_fixed<'a>(dataset: &'a [TrainSample], index: usize, rng: &mut impl Rng) -> Result<(&'a Volume, &'a LabelMap)> {
    let s = &dataset[index];
    if let (Some(v), Some(l)) = (&s.fixed_real, &s.fixed_real_labels) {
        return Ok((v, l));
    }
    let mut j = rng.random_range(0..dataset.len() - 1);
    if j >= index {
        j += 1;
    }
    let other = &dataset[j];
    let labels = other.moving_labels.as_ref().ok_or_else(|| Error::InvalidArgument("real fixed image without labels".into()))?;
    Ok((&other.moving, labels))
}

fn train_step(
    params: &NetworkParameters,
    dataset: &[TrainSample],
    index: usize,
    sim: &SimulatorConfig,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(LossRecord, Vec<Vec<f64>>)> {
    let sample = &dataset[index];
    let moving = &sample.moving;
    let pair = generate_pair(moving, sample.moving_labels.as_ref(), sim, rng)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let m = g.constant(volume_tensor(moving));
    let (field0, features0) = predict(&mut g, &bound, moving, &pair.fixed)?;
    let recon0 = g.warp(m, field0);

    let (record, root) = match cfg.mode {
        Mode::Reg => {
            let t = loss_hybrid(&mut g, field0, pair.field.data(), pair.fixed.data(), recon0, cfg.lambda, cfg.nlcc_window)?;
            let record = LossRecord {
                step: 0,
                field: g.scalar(t.field),
                sim0: g.scalar(t.similarity),
                sim1: 0.0,
                seg: 0.0,
                total: g.scalar(t.total),
            };
            (record, t.total)
        }
        Mode::Mtl | Mode::Feat => {
            let labels = sample.moving_labels.as_ref().expect("checked by check_dataset");
            let sim_labels = pair.fixed_labels.as_ref().expect("labels were passed to the simulator");
            let (fixed1, labels1) = real_fixed(dataset, index, rng)?;
            let onehot = g.constant(one_hot_tensor(labels));
            let truth0 = one_hot(sim_labels);
            let truth1 = one_hot(labels1);
            let seg0 = g.warp(onehot, field0);

            let (field1, _) = predict(&mut g, &bound, moving, fixed1)?;
            let recon1 = g.warp(m, field1);
            let seg1 = g.warp(onehot, field1);

            let b0 = Branch { fixed: pair.fixed.data(), recon: recon0, seg_pred: seg0, seg_truth: truth0.values() };
            let b1 = Branch { fixed: fixed1.data(), recon: recon1, seg_pred: seg1, seg_truth: truth1.values() };
            let t = loss_mtl(&mut g, field0, pair.field.data(), &b0, &b1, cfg.lambda, cfg.beta, cfg.nlcc_window)?;
            let mut seg = g.scalar(t.seg0) + g.scalar(t.seg1);
            let mut total = t.total;
            if cfg.mode == Mode::Feat {
                let refined = residual_seg_head(&mut g, &bound, features0, seg0)?;
                let feat = loss_segmentation(&mut g, refined, truth0.values());
                let weighted = g.scale(feat, cfg.beta);
                total = g.add(total, weighted);
                seg += g.scalar(feat);
                if !cfg.feat_keep_warped_term {
                    let dropped = g.scale(t.seg0, -cfg.beta);
                    total = g.add(total, dropped);
                    seg -= g.scalar(t.seg0);
                }
            }
            let record = LossRecord {
                step: 0,
                field: g.scalar(t.field),
                sim0: g.scalar(t.sim0),
                sim1: g.scalar(t.sim1),
                seg,
                total: g.scalar(total),
            };
            (record, total)
        }
    };
    let grads = g.backward(root);
    let flat = bound.vars.iter().zip(&params.tensors).map(|(&v, t)| grads.get_or_zeros(v, t.tensor.len())).collect();
    Ok((record, flat))
}
