//! Random affine + elastic deformations with ground-truth fields.
//!
//! A simulated pair is produced by summing an affine displacement (rotation
//! `Rz·Ry·Rx` and scaling about the grid center, plus a translation given as
//! a fraction of each axis length) and a smoothed Gaussian noise field, then
//! backward-warping the moving image and labels with the result.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::grid::{voxel_count, voxels, Dims, DisplacementField, LabelMap, Volume};
use crate::resample::{warp_linear, warp_nearest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    /// Maximum rotation angle per axis, radians.
    pub max_angle: [f64; 3],
    pub scale_min: [f64; 3],
    pub scale_max: [f64; 3],
    /// Maximum absolute translation as a fraction of the axis length.
    pub max_translation: [f64; 3],
    /// Upper bound on the standard deviation of the raw elastic noise.
    pub max_elastic_gamma: f64,
    /// Bounds on the Gaussian smoothing sigma, voxels.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Boundary handling of the elastic smoothing filter.
    pub elastic_boundary: Boundary,
    pub seed: u64,
}

/// How a filter reads samples beyond the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Repeat the edge sample.
    Replicate,
    /// Mirror about the edge sample's outer face (`… b a | a b …`).
    #[default]
    Reflect,
    /// Treat outside samples as zero.
    Zero,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            max_angle: [PI / 6.0; 3],
            scale_min: [0.75; 3],
            scale_max: [1.25; 3],
            max_translation: [0.02; 3],
            max_elastic_gamma: 1000.0,
            sigma_min: 10.0,
            sigma_max: 13.0,
            elastic_boundary: Boundary::default(),
            seed: 0,
        }
    }
}

impl SimulatorConfig {
    /// A configuration that always yields the identity transform.
    pub fn identity() -> Self {
        Self {
            max_angle: [0.0; 3],
            scale_min: [1.0; 3],
            scale_max: [1.0; 3],
            max_translation: [0.0; 3],
            max_elastic_gamma: 0.0,
            sigma_min: 10.0,
            sigma_max: 10.0,
            elastic_boundary: Boundary::default(),
            seed: 0,
        }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("simulator: {msg}")));
        for a in 0..3 {
            if !(self.scale_min[a] > 0.0 && self.scale_min[a] <= self.scale_max[a]) {
                return bad("require 0 < scale_min <= scale_max");
            }
            if !(self.max_angle[a] >= 0.0 && self.max_translation[a] >= 0.0) {
                return bad("angles and translations must be non-negative");
            }
        }
        if !(self.max_elastic_gamma >= 0.0) {
            return bad("max_elastic_gamma must be non-negative");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return bad("require 0 < sigma_min <= sigma_max");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledTransform {
    pub angles: [f64; 3],
    pub scales: [f64; 3],
    pub translation: [f64; 3],
    pub elastic_gamma: f64,
    pub smoothing_sigma: f64,
}

impl SampledTransform {
    pub fn identity() -> Self {
        Self { angles: [0.0; 3], scales: [1.0; 3], translation: [0.0; 3], elastic_gamma: 0.0, smoothing_sigma: 1.0 }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws angles, scales, translation, gamma and sigma in that order. Every
/// draw consumes randomness even when its range is empty, so the stream
/// position never depends on the configuration.
pub fn sample_transform(cfg: &SimulatorConfig, rng: &mut impl Rng) -> SampledTransform {
    let angles = std::array::from_fn(|a| uniform(rng, 0.0, cfg.max_angle[a]));
    let scales = std::array::from_fn(|a| uniform(rng, cfg.scale_min[a], cfg.scale_max[a]));
    let translation = std::array::from_fn(|a| uniform(rng, -cfg.max_translation[a], cfg.max_translation[a]));
    let elastic_gamma = uniform(rng, 0.0, cfg.max_elastic_gamma);
    let smoothing_sigma = uniform(rng, cfg.sigma_min, cfg.sigma_max);
    SampledTransform { angles, scales, translation, elastic_gamma, smoothing_sigma }
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// `Rz·Ry·Rx`, where `Rx` rotates about axis 0, `Ry` about axis 1 and `Rz`
/// about axis 2.
pub fn rotation_matrix(angles: [f64; 3]) -> Mat3 {
    let (s0, c0) = angles[0].sin_cos();
    let (s1, c1) = angles[1].sin_cos();
    let (s2, c2) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, c0, -s0], [0.0, s0, c0]];
    let ry = [[c1, 0.0, s1], [0.0, 1.0, 0.0], [-s1, 0.0, c1]];
    let rz = [[c2, -s2, 0.0], [s2, c2, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

/// `F(p) = R·S·(p − ctr) + ctr + l∘dims − p` with `ctr = (dims − 1) / 2`.
pub fn build_affine_field(t: &SampledTransform, dims: Dims) -> DisplacementField {
    let r = rotation_matrix(t.angles);
    let rs: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] * t.scales[j]));
    let ctr: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let shift: [f64; 3] = std::array::from_fn(|a| t.translation[a] * dims[a] as f64);
    DisplacementField::from_fn(dims, |p| {
        let q: [f64; 3] = std::array::from_fn(|a| p[a] as f64 - ctr[a]);
        std::array::from_fn(|i| {
            let mapped = rs[i][0] * q[0] + rs[i][1] * q[1] + rs[i][2] * q[2];
            mapped + ctr[i] + shift[i] - p[i] as f64
        })
    })
}

/// Unit-sum Gaussian weights on offsets `-radius..=radius`, radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut w: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable Gaussian smoothing with edge-replicate boundary.
pub fn gaussian_smooth(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    gaussian_smooth_with(data, dims, sigma, Boundary::Replicate)
}

/// Index of an out-of-range sample position under `boundary`, or `None`
/// for a zero sample.
fn boundary_index(i: i64, len: i64, boundary: Boundary) -> Option<usize> {
    if (0..len).contains(&i) {
        return Some(i as usize);
    }
    match boundary {
        Boundary::Replicate => Some(i.clamp(0, len - 1) as usize),
        Boundary::Zero => None,
        Boundary::Reflect => {
            let period = 2 * len;
            let m = i.rem_euclid(period);
            Some(if m < len { m } else { period - 1 - m } as usize)
        }
    }
}

/// Separable Gaussian smoothing with the given boundary handling.
pub fn gaussian_smooth_with(data: &[f64], dims: Dims, sigma: f64, boundary: Boundary) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut cur = data.to_vec();
    let mut next = vec![0.0; data.len()];
    for axis in 0..3 {
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let len = dims[axis] as i64;
        for (idx, p) in voxels(dims) {
            let base = idx - p[axis] * stride;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                if let Some(src) = boundary_index(p[axis] as i64 + k as i64 - radius, len, boundary) {
                    acc += w * cur[base + src * stride];
                }
            }
            next[idx] = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// I.i.d. `N(0, γ²)` offsets per voxel and axis, each component smoothed
/// with a Gaussian of standard deviation `σ`.
pub fn build_elastic_field(t: &SampledTransform, dims: Dims, boundary: Boundary, rng: &mut impl Rng) -> DisplacementField {
    let n = voxel_count(dims);
    if t.elastic_gamma == 0.0 {
        // Still consume the stream so downstream draws stay aligned.
        for _ in 0..3 * n {
            let _: f64 = rng.sample(rand_distr::StandardNormal);
        }
        return DisplacementField::zeros(dims);
    }
    let normal = Normal::new(0.0, t.elastic_gamma).expect("finite positive gamma");
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let raw: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        data.extend(gaussian_smooth_with(&raw, dims, t.smoothing_sigma, boundary));
    }
    DisplacementField::new(dims, data).expect("finite smoothed noise")
}

/// Ground-truth field, warped image and (optionally) warped labels.
#[derive(Clone, Debug)]
pub struct SimulatedPair {
    pub field: DisplacementField,
    pub fixed: Volume,
    pub fixed_labels: Option<LabelMap>,
    pub transform: SampledTransform,
}

pub fn generate_pair(
    moving: &Volume,
    moving_labels: Option<&LabelMap>,
    cfg: &SimulatorConfig,
    rng: &mut impl Rng,
) -> Result<SimulatedPair> {
    if let Some(s) = moving_labels {
        check_dims(moving.dims(), s.dims())?;
    }
    let dims = moving.dims();
    let transform = sample_transform(cfg, rng);
    let field = build_affine_field(&transform, dims).add(&build_elastic_field(&transform, dims, cfg.elastic_boundary, rng))?;
    let fixed = warp_linear(moving, &field)?;
    let fixed_labels = moving_labels.map(|s| warp_nearest(s, &field)).transpose()?;
    Ok(SimulatedPair { field, fixed, fixed_labels, transform })
}
