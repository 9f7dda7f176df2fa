//! Differentiable losses: field endpoint error, windowed squared correlation,
//! overlap (Dice-style) loss, and their weighted combinations.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{voxel_count, Dims};
use crate::metrics::{box_sums_adjoint, check_window, WindowStats};

/// Smoothing constant added to the numerator and denominator of each class
/// term of the overlap loss.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug)]
pub(crate) enum LossBackward {
    Epe { target: Vec<f64> },
    Nlcc { fixed: Vec<f64>, dims: Dims, window: usize },
    Dice { target: Vec<f64>, classes: usize },
}

impl LossBackward {
    /// Gradients for each input given the upstream scalar gradient.
    pub fn gradients(&self, inputs: &[&Tensor], upstream: f64) -> Vec<Option<Vec<f64>>> {
        match self {
            LossBackward::Epe { target } => {
                let f = &inputs[0].data;
                let n = f.len() / 3;
                let mut g = vec![0.0; f.len()];
                for i in 0..n {
                    let d: [f64; 3] = std::array::from_fn(|a| f[a * n + i] - target[a * n + i]);
                    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    if norm > 0.0 {
                        for a in 0..3 {
                            g[a * n + i] = upstream * d[a] / (n as f64 * norm);
                        }
                    }
                }
                vec![Some(g)]
            }
            LossBackward::Nlcc { fixed, dims, window } => {
                let recon = &inputs[0].data;
                vec![Some(nlcc_grad(fixed, recon, *dims, *window, upstream))]
            }
            LossBackward::Dice { target, classes } => {
                let p = &inputs[0].data;
                let n = p.len() / classes;
                let mut g = vec![0.0; p.len()];
                for c in 0..*classes {
                    let (num, den) = dice_terms(&p[c * n..(c + 1) * n], &target[c * n..(c + 1) * n]);
                    let scale = -upstream / *classes as f64;
                    for i in 0..n {
                        g[c * n + i] = scale * (2.0 * target[c * n + i] / den - num / (den * den));
                    }
                }
                vec![Some(g)]
            }
        }
    }
}

fn dice_terms(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    let inter: f64 = pred.iter().zip(truth).map(|(p, t)| p * t).sum();
    let total: f64 = pred.iter().zip(truth).map(|(p, t)| p + t).sum();
    (2.0 * inter + DICE_SMOOTH, total + DICE_SMOOTH)
}

/// Mean per-voxel Euclidean distance between a predicted `[3, D, H, W]`
/// field and a fixed target of the same layout. The subgradient at zero
/// distance is zero.
pub fn loss_field(g: &mut Graph, field: Var, target: &[f64]) -> Var {
    let f = &g.value(field).data;
    assert_eq!(f.len(), target.len(), "field/target length mismatch");
    let n = f.len() / 3;
    let total: f64 = (0..n).map(|i| (0..3).map(|a| (f[a * n + i] - target[a * n + i]).powi(2)).sum::<f64>().sqrt()).sum();
    g.push_loss(total / n as f64, vec![field], LossBackward::Epe { target: target.to_vec() })
}

/// Negative mean squared local correlation between a fixed image and a
/// reconstruction (single channel), over fully in-bounds windows.
pub fn loss_similarity(g: &mut Graph, fixed: &[f64], recon: Var, window: usize) -> Result<Var> {
    let r = g.value(recon);
    let dims = r.spatial();
    if r.channels() != 1 || fixed.len() != r.len() {
        return Err(Error::InvalidArgument("similarity loss expects matching single-channel images".into()));
    }
    check_window(dims, window)?;
    let value = -WindowStats::new(fixed, &r.data, dims, window).mean_cc();
    Ok(g.push_loss(value, vec![recon], LossBackward::Nlcc { fixed: fixed.to_vec(), dims, window }))
}

fn nlcc_grad(fixed: &[f64], recon: &[f64], dims: Dims, window: usize, upstream: f64) -> Vec<f64> {
    let stats = WindowStats::new(fixed, recon, dims, window);
    let count = stats.si.len();
    let n = stats.n;
    let eps = crate::metrics::NLCC_EPS;
    // The loss is -mean(cc); fold that into the per-window weights.
    let w = -upstream / count as f64;
    let mut g_sj = vec![0.0; count];
    let mut g_sjj = vec![0.0; count];
    let mut g_sij = vec![0.0; count];
    for k in 0..count {
        let (cross, va, vb) = stats.moments(k);
        let den = va * vb + eps;
        let d_cross = 2.0 * cross / den;
        let d_vb = -cross * cross * va / (den * den);
        g_sij[k] = w * d_cross;
        g_sjj[k] = w * d_vb;
        g_sj[k] = w * (d_cross * (-stats.si[k] / n) + d_vb * (-2.0 * stats.sj[k] / n));
    }
    let a_sj = box_sums_adjoint(&g_sj, stats.valid_dims, window);
    let a_sjj = box_sums_adjoint(&g_sjj, stats.valid_dims, window);
    let a_sij = box_sums_adjoint(&g_sij, stats.valid_dims, window);
    (0..voxel_count(dims)).map(|q| a_sj[q] + 2.0 * recon[q] * a_sjj[q] + fixed[q] * a_sij[q]).collect()
}

/// `-(1/C) Σ_c (2 Σ P·G + s) / (Σ (P + G) + s)` over all classes including
/// background. `pred` is `[C, D, H, W]`; `truth` is the one-hot target in the
/// same layout.
pub fn loss_segmentation(g: &mut Graph, pred: Var, truth: &[f64]) -> Var {
    let p = g.value(pred);
    let classes = p.channels();
    assert_eq!(p.len(), truth.len(), "prediction/truth length mismatch");
    let n = p.len() / classes;
    let value = -(0..classes)
        .map(|c| {
            let (num, den) = dice_terms(&p.data[c * n..(c + 1) * n], &truth[c * n..(c + 1) * n]);
            num / den
        })
        .sum::<f64>()
        / classes as f64;
    g.push_loss(value, vec![pred], LossBackward::Dice { target: truth.to_vec(), classes })
}

/// Field supervision plus λ-weighted similarity.
pub fn loss_hybrid(
    g: &mut Graph,
    field: Var,
    target: &[f64],
    fixed: &[f64],
    recon: Var,
    lambda: f64,
    window: usize,
) -> Result<HybridTerms> {
    let field_term = loss_field(g, field, target);
    let sim = loss_similarity(g, fixed, recon, window)?;
    let weighted = g.scale(sim, lambda);
    let total = g.add(field_term, weighted);
    Ok(HybridTerms { field: field_term, similarity: sim, total })
}

#[derive(Clone, Copy, Debug)]
pub struct HybridTerms {
    pub field: Var,
    pub similarity: Var,
    pub total: Var,
}

/// Inputs of one branch of the dual-registration loss.
pub struct Branch<'a> {
    pub fixed: &'a [f64],
    pub recon: Var,
    pub seg_pred: Var,
    pub seg_truth: &'a [f64],
}

#[derive(Clone, Copy, Debug)]
pub struct MtlTerms {
    pub field: Var,
    pub sim0: Var,
    pub sim1: Var,
    pub seg0: Var,
    pub seg1: Var,
    pub total: Var,
}

/// `L_F + λ(L_sim⁰ + L_sim¹) + β(D⁰ + D¹)`, where branch 0 is the simulated
/// pair (with field supervision) and branch 1 the real pair.
#[allow(clippy::too_many_arguments)]
pub fn loss_mtl(
    g: &mut Graph,
    field0: Var,
    target0: &[f64],
    b0: &Branch,
    b1: &Branch,
    lambda: f64,
    beta: f64,
    window: usize,
) -> Result<MtlTerms> {
    let field = loss_field(g, field0, target0);
    let sim0 = loss_similarity(g, b0.fixed, b0.recon, window)?;
    let sim1 = loss_similarity(g, b1.fixed, b1.recon, window)?;
    let seg0 = loss_segmentation(g, b0.seg_pred, b0.seg_truth);
    let seg1 = loss_segmentation(g, b1.seg_pred, b1.seg_truth);
    let sims = g.add(sim0, sim1);
    let sims = g.scale(sims, lambda);
    let segs = g.add(seg0, seg1);
    let segs = g.scale(segs, beta);
    let total = g.sum(&[field, sims, segs]);
    Ok(MtlTerms { field, sim0, sim1, seg0, seg1, total })
}
