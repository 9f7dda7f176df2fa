//! Registration and segmentation metrics evaluated outside the autodiff
//! graph.

use serde::Serialize;

use crate::error::{check_dims, Error, Result};
use crate::grid::{voxel_count, Dims, DisplacementField, LabelMap, Volume};

/// Stabilizer added to the NLCC denominator.
pub const NLCC_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub epe_mm: f64,
    pub mse: f64,
    pub nlcc: f64,
    pub mi: f64,
    pub dice_per_class: Vec<f64>,
    pub wall_time_s: f64,
}

/// Endpoint error in millimetres: mean per-voxel length of `f − f_g`, with
/// each component scaled by the voxel spacing along its axis.
pub fn epe(f: &DisplacementField, f_g: &DisplacementField, spacing: [f64; 3]) -> Result<f64> {
    check_dims(f.dims(), f_g.dims())?;
    let n = voxel_count(f.dims());
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (f.vector(i), f_g.vector(i));
            (0..3).map(|c| ((a[c] - b[c]) * spacing[c]).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub(crate) fn check_window(dims: Dims, window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("window must be odd and >= 3, got {window}")));
    }
    if dims.iter().any(|&d| d < window) {
        return Err(Error::InvalidArgument(format!("window {window} larger than dims {dims:?}")));
    }
    Ok(())
}

/// Sliding-window sums over every fully in-bounds `w³` window. The result is
/// indexed by the window's low corner on a grid of `dims − w + 1`.
pub(crate) fn box_sums_valid(data: &[f64], dims: Dims, w: usize) -> (Dims, Vec<f64>) {
    let mut cur_dims = dims;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut out_dims = cur_dims;
        out_dims[axis] = cur_dims[axis] + 1 - w;
        let stride_in: usize = cur_dims[axis + 1..].iter().product();
        let outer: usize = cur_dims[..axis].iter().product();
        let mut out = vec![0.0; voxel_count(out_dims)];
        for o in 0..outer {
            for inner in 0..stride_in {
                let src = |i: usize| cur[(o * cur_dims[axis] + i) * stride_in + inner];
                let mut acc: f64 = (0..w).map(src).sum();
                for i in 0..out_dims[axis] {
                    if i > 0 {
                        acc += src(i + w - 1) - src(i - 1);
                    }
                    out[(o * out_dims[axis] + i) * stride_in + inner] = acc;
                }
            }
        }
        cur = out;
        cur_dims = out_dims;
    }
    (cur_dims, cur)
}

/// Adjoint of [`box_sums_valid`]: spreads each window value back onto every
/// voxel of its window.
pub(crate) fn box_sums_adjoint(values: &[f64], valid_dims: Dims, w: usize) -> Vec<f64> {
    let mut cur_dims = valid_dims;
    let mut cur = values.to_vec();
    for axis in 0..3 {
        let mut out_dims = cur_dims;
        out_dims[axis] = cur_dims[axis] + w - 1;
        let stride: usize = cur_dims[axis + 1..].iter().product();
        let outer: usize = cur_dims[..axis].iter().product();
        let mut out = vec![0.0; voxel_count(out_dims)];
        let n_in = cur_dims[axis];
        for o in 0..outer {
            for inner in 0..stride {
                let src = |i: usize| cur[(o * n_in + i) * stride + inner];
                // out[j] = sum of src[i] for i in (j + 1 - w)..=j, clipped.
                let mut acc = 0.0;
                for j in 0..out_dims[axis] {
                    if j < n_in {
                        acc += src(j);
                    }
                    if j >= w {
                        acc -= src(j - w);
                    }
                    out[(o * out_dims[axis] + j) * stride + inner] = acc;
                }
            }
        }
        cur = out;
        cur_dims = out_dims;
    }
    cur
}

/// Window statistics shared by the metric and the differentiable loss.
pub(crate) struct WindowStats {
    pub valid_dims: Dims,
    pub n: f64,
    pub si: Vec<f64>,
    pub sj: Vec<f64>,
    pub sii: Vec<f64>,
    pub sjj: Vec<f64>,
    pub sij: Vec<f64>,
}

impl WindowStats {
    pub fn new(a: &[f64], b: &[f64], dims: Dims, window: usize) -> Self {
        let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<_>>();
        let (valid_dims, si) = box_sums_valid(a, dims, window);
        let sj = box_sums_valid(b, dims, window).1;
        let sii = box_sums_valid(&prod(&|i| a[i] * a[i]), dims, window).1;
        let sjj = box_sums_valid(&prod(&|i| b[i] * b[i]), dims, window).1;
        let sij = box_sums_valid(&prod(&|i| a[i] * b[i]), dims, window).1;
        Self { valid_dims, n: (window * window * window) as f64, si, sj, sii, sjj, sij }
    }

    /// `(cross, var_a, var_b)` at one window.
    #[inline]
    pub fn moments(&self, k: usize) -> (f64, f64, f64) {
        let n = self.n;
        let cross = self.sij[k] - self.si[k] * self.sj[k] / n;
        let va = self.sii[k] - self.si[k] * self.si[k] / n;
        let vb = self.sjj[k] - self.sj[k] * self.sj[k] / n;
        (cross, va, vb)
    }

    pub fn mean_cc(&self) -> f64 {
        let count = self.si.len();
        (0..count)
            .map(|k| {
                let (cross, va, vb) = self.moments(k);
                cross * cross / (va * vb + NLCC_EPS)
            })
            .sum::<f64>()
            / count as f64
    }
}

/// Mean squared local correlation over all voxels whose `window³`
/// neighbourhood lies fully inside the grid.
pub fn nlcc(a: &Volume, b: &Volume, window: usize) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    check_window(a.dims(), window)?;
    Ok(WindowStats::new(a.data(), b.data(), a.dims(), window).mean_cc())
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

fn check_unit_range(v: &Volume) -> Result<()> {
    if v.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidArgument("mutual information requires values in [0, 1]".into()));
    }
    Ok(())
}

/// Mutual information in nats from an equal-width `bins × bins` joint
/// histogram over `[0, 1]²`.
pub fn mutual_information(a: &Volume, b: &Volume, bins: usize) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    if bins < 2 {
        return Err(Error::InvalidArgument("need at least 2 bins".into()));
    }
    check_unit_range(a)?;
    check_unit_range(b)?;
    let mut joint = vec![0usize; bins * bins];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        joint[bin_of(x, bins) * bins + bin_of(y, bins)] += 1;
    }
    let n = a.data().len() as f64;
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] as f64 / n;
            pa[i] += p;
            pb[j] += p;
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Entropy in nats of the same equal-width histogram used by
/// [`mutual_information`].
pub fn histogram_entropy(a: &Volume, bins: usize) -> Result<f64> {
    check_unit_range(a)?;
    let mut counts = vec![0usize; bins];
    for &x in a.data() {
        counts[bin_of(x, bins)] += 1;
    }
    let n = a.data().len() as f64;
    Ok(-counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n * (c as f64 / n).ln()).sum::<f64>())
}

/// `2TP / (2TP + FN + FP)` for one class; 1.0 when the class appears in
/// neither map.
pub fn dice(pred: &LabelMap, truth: &LabelMap, class_id: u32) -> Result<f64> {
    check_dims(pred.dims(), truth.dims())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (p == class_id, t == class_id) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Mean Dice over classes `1..C` (background excluded).
pub fn mean_foreground_dice(pred: &LabelMap, truth: &LabelMap) -> Result<f64> {
    let classes = truth.num_classes().max(pred.num_classes());
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least one foreground class".into()));
    }
    let mut total = 0.0;
    for c in 1..classes {
        total += dice(pred, truth, c as u32)?;
    }
    Ok(total / (classes - 1) as f64)
}

/// Per-voxel majority vote; ties go to the smallest class index.
pub fn majority_vote(votes: &[LabelMap]) -> Result<LabelMap> {
    let first = votes.first().ok_or_else(|| Error::InvalidArgument("no votes".into()))?;
    let classes = votes.iter().map(LabelMap::num_classes).max().unwrap_or(1);
    for v in votes {
        check_dims(first.dims(), v.dims())?;
    }
    let mut counts = vec![0usize; classes];
    let labels = (0..first.labels().len())
        .map(|i| {
            counts.iter_mut().for_each(|c| *c = 0);
            for v in votes {
                counts[v.labels()[i] as usize] += 1;
            }
            let mut best = 0;
            for c in 1..classes {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    LabelMap::new(first.dims(), classes, labels)
}

/// `U(p) = 1 − #{i : S_i(p) = S(p)} / N`, computed as a count ratio so
/// `k/N` values are exact.
pub fn uncertainty_map(votes: &[LabelMap], consensus: &LabelMap) -> Result<Volume> {
    if votes.is_empty() {
        return Err(Error::InvalidArgument("uncertainty needs at least one vote".into()));
    }
    for v in votes {
        check_dims(consensus.dims(), v.dims())?;
    }
    let n = votes.len() as f64;
    let data = (0..consensus.labels().len())
        .map(|i| {
            let agree = votes.iter().filter(|v| v.labels()[i] == consensus.labels()[i]).count();
            (votes.len() - agree) as f64 / n
        })
        .collect();
    Volume::from_data(consensus.dims(), data)
}
