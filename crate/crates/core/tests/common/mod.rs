//! Helpers shared by the integration suites: a central finite-difference
//! gradient checker and scalar-loop reference implementations.

#![allow(dead_code)]

pub mod criteria;
pub mod suites;

use deformreg::autodiff::{Graph, Tensor, Var};
use deformreg::grid::{voxel_count, Dims, DisplacementField, LabelMap, Volume};
use rand::Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
/// Differences below this are treated as agreement regardless of scale.
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    pub worst_rel: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.worst_rel = self.worst_rel.max(other.worst_rel);
    }
}

/// Builds a scalar from the given tensors and returns it with the graph
/// leaves holding those tensors, in order.
pub type Builder<'a> = &'a dyn Fn(&mut Graph, &[Tensor]) -> (Var, Vec<Var>);

/// Leaves every tensor as a trainable parameter.
pub fn leaves(g: &mut Graph, tensors: &[Tensor]) -> Vec<Var> {
    tensors.iter().map(|t| g.parameter(t.clone())).collect()
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences, for up to `per_input` coordinates of every input.
/// `skip(input, coord, tensors)` excludes coordinates where the function is
/// known to be non-smooth within one step.
pub fn check_gradients(
    inputs: &[Tensor],
    build: Builder,
    per_input: usize,
    rng: &mut impl Rng,
    skip: &dyn Fn(usize, usize, &[Tensor]) -> bool,
) -> GradCheck {
    check_gradients_with_steps(inputs, build, per_input, rng, skip, &[FD_STEP])
}

/// As [`check_gradients`], but a coordinate agrees if the central difference
/// at any of `steps` does. Large steps can straddle a ReLU kink and small ones
/// lose digits to rounding, so a deep stack needs more than one.
pub fn check_gradients_with_steps(
    inputs: &[Tensor],
    build: Builder,
    per_input: usize,
    rng: &mut impl Rng,
    skip: &dyn Fn(usize, usize, &[Tensor]) -> bool,
    steps: &[f64],
) -> GradCheck {
    let eval = |tensors: &[Tensor]| {
        let mut g = Graph::new();
        let (out, _) = build(&mut g, tensors);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let (out, vars) = build(&mut g, inputs);
    let grads = g.backward(out);

    let mut report = GradCheck::default();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], t.len());
        let coords: Vec<usize> =
            if t.len() <= per_input { (0..t.len()).collect() } else { (0..per_input).map(|_| rng.random_range(0..t.len())).collect() };
        for c in coords {
            if skip(k, c, inputs) {
                continue;
            }
            let a = analytic[c];
            let mut best: Option<(f64, f64)> = None;
            for &step in steps {
                let mut plus = inputs.to_vec();
                plus[k].data[c] += step;
                let mut minus = inputs.to_vec();
                minus[k].data[c] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let diff = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                if best.is_none_or(|(d, _)| diff < d) {
                    best = Some((diff, scale));
                }
            }
            let (diff, scale) = best.expect("at least one step");
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            report.checked += 1;
            if diff > FD_REL_TOL * scale && diff > FD_ABS_FLOOR {
                report.failures += 1;
            }
            report.worst_rel = report.worst_rel.max(rel);
        }
    }
    report
}

/// Never skips.
pub fn no_skip(_: usize, _: usize, _: &[Tensor]) -> bool {
    false
}

/// True when a warp sample coordinate lies within two steps of a trilinear
/// cell boundary (or the clamp boundary), where the warp is not smooth.
pub fn near_warp_kink(field: &Tensor, coord: usize) -> bool {
    let dims = field.spatial();
    let n = voxel_count(dims);
    let (axis, idx) = (coord / n, coord % n);
    let p = [idx / (dims[1] * dims[2]), (idx / dims[2]) % dims[1], idx % dims[2]];
    let x = p[axis] as f64 + field.data[coord];
    let frac = x - x.floor();
    let max = (dims[axis] - 1) as f64;
    frac.min(1.0 - frac) < 2.0 * FD_STEP || (x - max).abs() < 2.0 * FD_STEP || x.abs() < 2.0 * FD_STEP
}

/// Trilinear value at `x` as a sum of tent weights over every grid point,
/// after clamping `x` to the grid.
pub fn tent_sample(data: &[f64], dims: Dims, x: [f64; 3]) -> f64 {
    let x: [f64; 3] = std::array::from_fn(|a| x[a].clamp(0.0, (dims[a] - 1) as f64));
    let mut total = 0.0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let q = [i as f64, j as f64, k as f64];
                let w: f64 = (0..3).map(|a| (1.0 - (x[a] - q[a]).abs()).max(0.0)).product();
                total += w * data[(i * dims[1] + j) * dims[2] + k];
            }
        }
    }
    total
}

pub fn oracle_warp(v: &Volume, f: &DisplacementField) -> Vec<f64> {
    let dims = v.dims();
    let mut out = Vec::with_capacity(voxel_count(dims));
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let d = f.vector((i * dims[1] + j) * dims[2] + k);
                out.push(tent_sample(v.data(), dims, [i as f64 + d[0], j as f64 + d[1], k as f64 + d[2]]));
            }
        }
    }
    out
}

pub fn oracle_epe(a: &DisplacementField, b: &DisplacementField) -> f64 {
    let n = voxel_count(a.dims());
    let mut total = 0.0;
    for i in 0..n {
        let (u, v) = (a.vector(i), b.vector(i));
        let mut sq = 0.0;
        for c in 0..3 {
            sq += (u[c] - v[c]) * (u[c] - v[c]);
        }
        total += sq.sqrt();
    }
    total / n as f64
}

pub fn oracle_mse(a: &Volume, b: &Volume) -> f64 {
    let mut total = 0.0;
    for i in 0..a.data().len() {
        total += (a.data()[i] - b.data()[i]).powi(2);
    }
    total / a.data().len() as f64
}

/// Windowed squared correlation with explicit per-window means.
pub fn oracle_nlcc(a: &Volume, b: &Volume, w: usize) -> f64 {
    let d = a.dims();
    let r = w / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in r..d[0] - r {
        for j in r..d[1] - r {
            for k in r..d[2] - r {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for di in 0..w {
                    for dj in 0..w {
                        for dk in 0..w {
                            let (p, q, s) = (i + di - r, j + dj - r, k + dk - r);
                            xs.push(a.get(p, q, s));
                            ys.push(b.get(p, q, s));
                        }
                    }
                }
                let mx = xs.iter().sum::<f64>() / xs.len() as f64;
                let my = ys.iter().sum::<f64>() / ys.len() as f64;
                let mut cross = 0.0;
                let mut vx = 0.0;
                let mut vy = 0.0;
                for t in 0..xs.len() {
                    cross += (xs[t] - mx) * (ys[t] - my);
                    vx += (xs[t] - mx).powi(2);
                    vy += (ys[t] - my).powi(2);
                }
                total += cross * cross / (vx * vy + 1e-5);
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Mutual information from a joint histogram of `floor(v · bins)` indices.
pub fn oracle_mi(a: &Volume, b: &Volume, bins: usize) -> f64 {
    let n = a.data().len() as f64;
    let bin = |v: f64| ((v * bins as f64).floor() as usize).min(bins - 1);
    let mut joint = vec![vec![0.0; bins]; bins];
    for t in 0..a.data().len() {
        joint[bin(a.data()[t])][bin(b.data()[t])] += 1.0 / n;
    }
    let mut mi = 0.0;
    for x in 0..bins {
        for y in 0..bins {
            let pxy = joint[x][y];
            if pxy == 0.0 {
                continue;
            }
            let px: f64 = joint[x].iter().sum();
            let py: f64 = (0..bins).map(|u| joint[u][y]).sum();
            mi += pxy * (pxy / (px * py)).ln();
        }
    }
    mi
}

pub fn oracle_dice(pred: &LabelMap, truth: &LabelMap, class: u32) -> f64 {
    let mut inter = 0.0;
    let mut sizes = 0.0;
    for t in 0..pred.labels().len() {
        let (p, q) = (pred.labels()[t] == class, truth.labels()[t] == class);
        if p && q {
            inter += 1.0;
        }
        sizes += f64::from(u8::from(p)) + f64::from(u8::from(q));
    }
    if sizes == 0.0 {
        1.0
    } else {
        2.0 * inter / sizes
    }
}
