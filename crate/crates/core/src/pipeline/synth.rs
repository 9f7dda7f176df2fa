//! Desk-scale stand-in for real scans: two labelled ellipsoids inside a
//! larger body, each with its own intensity, plus smooth texture. Blob
//! placement and size jitter from sample to sample around a shared layout,
//! so different samples are related by moderate deformations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::TrainSample;
use crate::error::Result;
use crate::grid::{normalize, voxel_count, Dims, LabelMap, Volume};
use crate::simulator::gaussian_smooth;

/// Background plus two blob classes.
pub const SYNTH_CLASSES: usize = 3;

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius; `< 1` inside.
    fn level(&self, p: [usize; 3]) -> f64 {
        (0..3).map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2)).sum()
    }
}

fn jittered(rng: &mut impl Rng, dims: Dims, center: [f64; 3], radii: [f64; 3], shift: f64) -> Ellipsoid {
    let scale = rng.random_range(0.9..1.1);
    Ellipsoid {
        center: std::array::from_fn(|a| (center[a] + rng.random_range(-shift..shift)) * dims[a] as f64),
        radii: std::array::from_fn(|a| radii[a] * scale * dims[a] as f64),
    }
}

/// Soft inside indicator with a roughly one-voxel transition.
fn soft_inside(e: &Ellipsoid, p: [usize; 3]) -> f64 {
    let r = e.level(p).sqrt();
    let mean_radius = (e.radii[0] + e.radii[1] + e.radii[2]) / 3.0;
    1.0 / (1.0 + ((r - 1.0) * mean_radius * 2.0).exp())
}

fn make_sample(dims: Dims, rng: &mut impl Rng) -> Result<TrainSample> {
    let body = jittered(rng, dims, [0.5, 0.5, 0.5], [0.42, 0.4, 0.4], 0.02);
    let blob1 = jittered(rng, dims, [0.36, 0.4, 0.5], [0.22, 0.18, 0.2], 0.04);
    let blob2 = jittered(rng, dims, [0.66, 0.62, 0.5], [0.17, 0.2, 0.16], 0.04);
    let levels = [rng.random_range(0.25..0.35), rng.random_range(0.75..0.9), rng.random_range(0.5..0.6)];

    let n = voxel_count(dims);
    let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let texture = gaussian_smooth(&noise, dims, 1.5);
    let tex_scale = 0.6 / texture.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);

    let mut idx = 0;
    let mut labels = Vec::with_capacity(n);
    let raw = Volume::from_fn(dims, |p| {
        let (b, s1, s2) = (soft_inside(&body, p), soft_inside(&blob1, p), soft_inside(&blob2, p));
        let base = b * levels[0];
        let v = base * (1.0 - s1 - s2).max(0.0) + s1 * levels[1] + s2 * levels[2];
        let label = if blob2.level(p) < 1.0 {
            2
        } else if blob1.level(p) < 1.0 {
            1
        } else {
            0
        };
        labels.push(label);
        let t = texture[idx] * tex_scale * 0.15 * (0.3 + b);
        idx += 1;
        v + t
    });
    let moving = normalize(&raw)?;
    let labels = LabelMap::new(dims, SYNTH_CLASSES, labels)?;
    TrainSample::new(moving, Some(labels))
}

/// `n` samples on a `dims` grid, deterministic in `seed`.
pub fn make_synthetic_dataset(n: usize, dims: Dims, seed: u64) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| make_sample(dims, &mut rng)).collect()
}
