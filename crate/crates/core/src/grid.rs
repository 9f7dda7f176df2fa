//! Dense volumetric data model.
//!
//! Every grid is stored in row-major order with axis 0 slowest-varying:
//! the voxel at `(i, j, k)` lives at `(i * dims[1] + j) * dims[2] + k`.
//! Voxel centers sit at integer coordinates `0..dim`, and multi-channel
//! grids (fields, probability maps) are stored channel-major, one full
//! plane after another.

use crate::error::{check_dims, Error, Result};
use crate::resample::sample_trilinear;

pub type Dims = [usize; 3];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn flat_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

/// Iterates `(flat, [i, j, k])` over a grid in storage order.
pub fn voxels(dims: Dims) -> impl Iterator<Item = (usize, [usize; 3])> {
    let [_, d1, d2] = dims;
    (0..voxel_count(dims)).map(move |n| (n, [n / (d1 * d2), (n / d2) % d1, n % d2]))
}

fn validate_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("dims must be positive, got {dims:?}")));
    }
    Ok(())
}

fn check_len(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::InvalidArgument(format!("{what}: expected {expected} values, found {found}")));
    }
    Ok(())
}

/// A scalar image with physical voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        validate_dims(dims)?;
        check_len("volume", voxel_count(dims), data.len())?;
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        Ok(Self { dims, spacing, data })
    }

    /// Isotropic 1 mm volume.
    pub fn from_data(dims: Dims, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, [1.0; 3], data)
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, spacing: [1.0; 3], data: vec![0.0; voxel_count(dims)] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let data = voxels(dims).map(|(_, p)| f(p)).collect();
        Self { dims, spacing: [1.0; 3], data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[flat_index(self.dims, i, j, k)]
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Per-voxel displacement in voxel units; component `a` moves along axis `a`.
///
/// Stored as three planes: all axis-0 components, then axis-1, then axis-2.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        validate_dims(dims)?;
        check_len("displacement field", 3 * voxel_count(dims), data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("displacement field has non-finite components".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0.0; 3 * voxel_count(dims)] }
    }

    pub fn constant(dims: Dims, v: [f64; 3]) -> Self {
        let n = voxel_count(dims);
        let mut data = Vec::with_capacity(3 * n);
        for c in v {
            data.extend(std::iter::repeat_n(c, n));
        }
        Self { dims, data }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let n = voxel_count(dims);
        let mut data = vec![0.0; 3 * n];
        for (idx, p) in voxels(dims) {
            let v = f(p);
            for a in 0..3 {
                data[a * n + idx] = v[a];
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        let n = voxel_count(self.dims);
        &self.data[axis * n..(axis + 1) * n]
    }

    pub fn vector(&self, idx: usize) -> [f64; 3] {
        let n = voxel_count(self.dims);
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    /// Componentwise sum of two fields on the same grid.
    pub fn add(&self, other: &DisplacementField) -> Result<DisplacementField> {
        check_dims(self.dims, other.dims)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(DisplacementField { dims: self.dims, data })
    }

    /// Mean Euclidean length of the per-voxel vectors.
    pub fn mean_magnitude(&self) -> f64 {
        let n = voxel_count(self.dims);
        let total: f64 = (0..n)
            .map(|i| {
                let v = self.vector(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .sum();
        total / n as f64
    }
}

/// Integer class label per voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    num_classes: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(dims: Dims, num_classes: usize, labels: Vec<u32>) -> Result<Self> {
        validate_dims(dims)?;
        check_len("label map", voxel_count(dims), labels.len())?;
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { dims, num_classes, labels })
    }

    pub fn from_fn(dims: Dims, num_classes: usize, mut f: impl FnMut([usize; 3]) -> u32) -> Result<Self> {
        let labels = voxels(dims).map(|(_, p)| f(p)).collect();
        Self::new(dims, num_classes, labels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self, class_id: u32) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }
}

/// Per-class continuous maps, stored class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    dims: Dims,
    num_classes: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(dims: Dims, num_classes: usize, values: Vec<f64>) -> Result<Self> {
        validate_dims(dims)?;
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        check_len("probability map", num_classes * voxel_count(dims), values.len())?;
        // Small overshoot from floating-point interpolation is tolerated.
        if values.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::InvalidArgument("probability values must lie in [0, 1]".into()));
        }
        Ok(Self { dims, num_classes, values })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn plane(&self, class_id: usize) -> &[f64] {
        let n = voxel_count(self.dims);
        &self.values[class_id * n..(class_id + 1) * n]
    }

    /// Per-voxel argmax; ties go to the smallest class index.
    pub fn argmax(&self) -> LabelMap {
        let n = voxel_count(self.dims);
        let labels = (0..n)
            .map(|idx| {
                let mut best = 0;
                for c in 1..self.num_classes {
                    if self.values[c * n + idx] > self.values[best * n + idx] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        LabelMap { dims: self.dims, num_classes: self.num_classes, labels }
    }
}

/// Clips to six population standard deviations around the mean, then maps
/// the clipped range affinely onto `[0, 1]`.
pub fn normalize(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    if lo == hi {
        return Err(Error::DegenerateIntensity);
    }
    let n = v.data.len() as f64;
    let mean = v.data.iter().sum::<f64>() / n;
    let var = v.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    let (clip_lo, clip_hi) = (mean - 6.0 * sd, mean + 6.0 * sd);
    let clipped: Vec<f64> = v.data.iter().map(|x| x.clamp(clip_lo, clip_hi)).collect();
    let lo = clipped.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = clipped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::DegenerateIntensity);
    }
    let scale = 1.0 / (hi - lo);
    let data = clipped.into_iter().map(|x| ((x - lo) * scale).clamp(0.0, 1.0)).collect();
    Ok(Volume { dims: v.dims, spacing: v.spacing, data })
}

/// Resamples onto a grid with the requested spacing, keeping voxel 0 fixed in
/// physical space.
pub fn resample_to_spacing(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("target spacing must be strictly positive, got {target_spacing:?}")));
    }
    let mut out_dims = [0usize; 3];
    let mut ratio = [0.0; 3];
    for a in 0..3 {
        out_dims[a] = (v.dims[a] as f64 * v.spacing[a] / target_spacing[a]).round() as usize;
        ratio[a] = target_spacing[a] / v.spacing[a];
    }
    if out_dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("resampling to {target_spacing:?} produces an empty grid {out_dims:?}")));
    }
    let data = voxels(out_dims)
        .map(|(_, q)| {
            let x = [q[0] as f64 * ratio[0], q[1] as f64 * ratio[1], q[2] as f64 * ratio[2]];
            sample_trilinear(&v.data, v.dims, x)
        })
        .collect();
    Volume::new(out_dims, target_spacing, data)
}

pub fn one_hot(s: &LabelMap) -> ProbabilityMap {
    let n = voxel_count(s.dims);
    let mut values = vec![0.0; s.num_classes * n];
    for (idx, &l) in s.labels.iter().enumerate() {
        values[l as usize * n + idx] = 1.0;
    }
    ProbabilityMap { dims: s.dims, num_classes: s.num_classes, values }
}
