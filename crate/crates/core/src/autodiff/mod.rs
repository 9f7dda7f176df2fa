//! A small tape-based reverse-mode autodiff engine over dense `f64` tensors.
//!
//! Spatial tensors have shape `[C, D, H, W]` (channel-major, same voxel order
//! as [`crate::grid`]); scalars have shape `[]`. Nodes are appended in
//! evaluation order, so a reverse sweep over the tape is a valid topological
//! order for the backward pass.

pub mod adam;
pub mod checkpoint;
mod conv;
pub mod loss;
pub mod network;

use crate::grid::{voxel_count, Dims};
use crate::resample::{displaced, Stencil};

pub use adam::{Adam, AdamConfig};
pub use network::{forward_network, NetworkOutput, NetworkParameters};

/// A dense tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match data");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Spatial dims of a `[C, D, H, W]` tensor.
    pub fn spatial(&self) -> Dims {
        spatial(&self.shape)
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }
}

fn spatial(shape: &[usize]) -> Dims {
    assert_eq!(shape.len(), 4, "expected a [C, D, H, W] tensor, got {shape:?}");
    [shape[1], shape[2], shape[3]]
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d { input: Var, weight: Var, bias: Var, stride: usize },
    LeakyRelu { input: Var, slope: f64 },
    Upsample2 { input: Var },
    Concat { inputs: Vec<Var> },
    Crop { input: Var },
    Warp { image: Var, field: Var },
    Softmax { input: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Dot { input: Var, weights: Vec<f64> },
    Loss { inputs: Vec<Var>, backward: loss::LossBackward },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a tracked leaf, or zeros of the given length when it did
    /// not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar");
        t.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 3³ convolution, zero padding 1. Weight shape `[Cout, Cin, 3, 3, 3]`,
    /// bias `[Cout]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Var {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (cin, dims) = (x.channels(), x.spatial());
        let cout = w.shape[0];
        assert_eq!(w.shape, vec![cout, cin, 3, 3, 3], "conv weight shape");
        assert_eq!(b.shape, vec![cout], "conv bias shape");
        let out = conv::conv3d_forward(&x.data, cin, dims, &w.data, &b.data, cout, stride);
        let od = conv::output_dims(dims, stride);
        let rg = self.tracked(&[input, weight, bias]);
        self.push(Tensor::new(vec![cout, od[0], od[1], od[2]], out), Op::Conv3d { input, weight, bias, stride }, rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let t = Tensor::new(x.shape.clone(), data);
        let rg = self.tracked(&[input]);
        self.push(t, Op::LeakyRelu { input, slope }, rg)
    }

    /// Trilinear ×2 upsampling with half-voxel alignment and edge clamping.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let mut shape = x.shape.clone();
        let mut data = x.data.clone();
        for axis in 0..3 {
            data = upsample_axis(&data, &shape, axis);
            shape[axis + 1] *= 2;
        }
        let rg = self.tracked(&[input]);
        self.push(Tensor::new(shape, data), Op::Upsample2 { input }, rg)
    }

    /// Channel concatenation of tensors sharing spatial dims.
    pub fn concat(&mut self, inputs: &[Var]) -> Var {
        let dims = self.value(inputs[0]).spatial();
        let mut data = Vec::new();
        let mut channels = 0;
        for &v in inputs {
            let t = self.value(v);
            assert_eq!(t.spatial(), dims, "concat spatial mismatch");
            channels += t.channels();
            data.extend_from_slice(&t.data);
        }
        let rg = self.tracked(inputs);
        self.push(Tensor::new(vec![channels, dims[0], dims[1], dims[2]], data), Op::Concat { inputs: inputs.to_vec() }, rg)
    }

    /// Keeps the low corner `dims` of every channel.
    pub fn crop(&mut self, input: Var, dims: Dims) -> Var {
        let x = self.value(input);
        let src = x.spatial();
        assert!((0..3).all(|a| dims[a] <= src[a]), "crop larger than input");
        let c = x.channels();
        let mut data = Vec::with_capacity(c * voxel_count(dims));
        for ch in 0..c {
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    let start = ch * voxel_count(src) + (i * src[1] + j) * src[2];
                    data.extend_from_slice(&x.data[start..start + dims[2]]);
                }
            }
        }
        let rg = self.tracked(&[input]);
        self.push(Tensor::new(vec![c, dims[0], dims[1], dims[2]], data), Op::Crop { input }, rg)
    }

    /// Backward warp of every channel of `image` by a `[3, D, H, W]` field:
    /// `out(c, p) = image(c, p + field(p))`, trilinear with edge clamp.
    pub fn warp(&mut self, image: Var, field: Var) -> Var {
        let (img, f) = (self.value(image), self.value(field));
        let dims = img.spatial();
        assert_eq!(f.shape, vec![3, dims[0], dims[1], dims[2]], "warp field shape");
        let n = voxel_count(dims);
        let c = img.channels();
        let mut out = vec![0.0; c * n];
        for (idx, p) in crate::grid::voxels(dims) {
            let st = Stencil::new(displaced(p, [f.data[idx], f.data[n + idx], f.data[2 * n + idx]]), dims);
            for ch in 0..c {
                out[ch * n + idx] = st.sample(&img.data[ch * n..(ch + 1) * n], dims);
            }
        }
        let shape = img.shape.clone();
        let rg = self.tracked(&[image, field]);
        self.push(Tensor::new(shape, out), Op::Warp { image, field }, rg)
    }

    /// Softmax across the channel axis at every voxel.
    pub fn softmax(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let c = x.channels();
        let n = voxel_count(x.spatial());
        let mut out = vec![0.0; c * n];
        for i in 0..n {
            let max = (0..c).map(|ch| x.data[ch * n + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (x.data[ch * n + i] - max).exp();
                out[ch * n + i] = e;
                total += e;
            }
            for ch in 0..c {
                out[ch * n + i] /= total;
            }
        }
        let shape = x.shape.clone();
        let rg = self.tracked(&[input]);
        self.push(Tensor::new(shape, out), Op::Softmax { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape.clone(), data);
        let rg = self.tracked(&[a, b]);
        self.push(t, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let t = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v * factor).collect());
        let rg = self.tracked(&[input]);
        self.push(t, Op::Scale { input, factor }, rg)
    }

    /// Sum of several same-shaped nodes.
    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Scalar `Σ weights[i] · input[i]`.
    pub fn dot(&mut self, input: Var, weights: Vec<f64>) -> Var {
        let x = self.value(input);
        assert_eq!(x.len(), weights.len(), "dot length mismatch");
        let value = x.data.iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.tracked(&[input]);
        self.push(Tensor::new(vec![], vec![value]), Op::Dot { input, weights }, rg)
    }

    pub(crate) fn push_loss(&mut self, value: f64, inputs: Vec<Var>, backward: loss::LossBackward) -> Var {
        let rg = self.tracked(&inputs);
        self.push(Tensor::new(vec![], vec![value]), Op::Loss { inputs, backward }, rg)
    }

    /// Reverse sweep from a scalar node. Intermediate gradients are released
    /// as soon as they have been propagated; only leaves are retained.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut accumulate = |v: Var, contribution: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { input, weight, bias, stride } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let cg = conv::conv3d_backward(&x.data, x.channels(), x.spatial(), &w.data, w.shape[0], *stride, g, self.wants(*input));
                if let Some(gi) = cg.input {
                    accumulate(*input, gi);
                }
                if self.wants(*weight) {
                    accumulate(*weight, cg.weight);
                }
                if self.wants(*bias) {
                    accumulate(*bias, cg.bias);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = &self.value(*input).data;
                let gi = x.iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { slope * d }).collect();
                accumulate(*input, gi);
            }
            Op::Upsample2 { input } => {
                let mut shape = node.value.shape.clone();
                let mut data = g.to_vec();
                for axis in (0..3).rev() {
                    data = upsample_axis_adjoint(&data, &shape, axis);
                    shape[axis + 1] /= 2;
                }
                accumulate(*input, data);
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).len();
                    if self.wants(v) {
                        accumulate(v, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Crop { input } => {
                let x = self.value(*input);
                let src = x.spatial();
                let dims = node.value.spatial();
                let mut gi = vec![0.0; x.len()];
                let mut o = 0;
                for ch in 0..x.channels() {
                    for i in 0..dims[0] {
                        for j in 0..dims[1] {
                            let start = ch * voxel_count(src) + (i * src[1] + j) * src[2];
                            gi[start..start + dims[2]].copy_from_slice(&g[o..o + dims[2]]);
                            o += dims[2];
                        }
                    }
                }
                accumulate(*input, gi);
            }
            Op::Warp { image, field } => {
                let (img, f) = (self.value(*image), self.value(*field));
                let dims = img.spatial();
                let n = voxel_count(dims);
                let c = img.channels();
                let want_img = self.wants(*image);
                let want_field = self.wants(*field);
                let mut gi = want_img.then(|| vec![0.0; img.len()]);
                let mut gf = want_field.then(|| vec![0.0; f.len()]);
                for (idx, p) in crate::grid::voxels(dims) {
                    let st = Stencil::new(displaced(p, [f.data[idx], f.data[n + idx], f.data[2 * n + idx]]), dims);
                    for ch in 0..c {
                        let d = g[ch * n + idx];
                        if d == 0.0 {
                            continue;
                        }
                        if let Some(gi) = gi.as_mut() {
                            let plane = &mut gi[ch * n..(ch + 1) * n];
                            st.for_each(dims, |q, w| plane[q] += w * d);
                        }
                        if let Some(gf) = gf.as_mut() {
                            let (_, dx) = st.sample_with_grad(&img.data[ch * n..(ch + 1) * n], dims);
                            for a in 0..3 {
                                gf[a * n + idx] += d * dx[a];
                            }
                        }
                    }
                }
                if let Some(gi) = gi {
                    accumulate(*image, gi);
                }
                if let Some(gf) = gf {
                    accumulate(*field, gf);
                }
            }
            Op::Softmax { input } => {
                let y = &node.value;
                let c = y.channels();
                let n = voxel_count(y.spatial());
                let mut gi = vec![0.0; y.len()];
                for i in 0..n {
                    let dot: f64 = (0..c).map(|ch| y.data[ch * n + i] * g[ch * n + i]).sum();
                    for ch in 0..c {
                        gi[ch * n + i] = y.data[ch * n + i] * (g[ch * n + i] - dot);
                    }
                }
                accumulate(*input, gi);
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(*a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(*b, g.to_vec());
                }
            }
            Op::Scale { input, factor } => {
                accumulate(*input, g.iter().map(|d| d * factor).collect());
            }
            Op::Dot { input, weights } => {
                accumulate(*input, weights.iter().map(|w| w * g[0]).collect());
            }
            Op::Loss { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                for (k, gi) in backward.gradients(&values, g[0]).into_iter().enumerate() {
                    if self.wants(inputs[k]) {
                        if let Some(gi) = gi {
                            accumulate(inputs[k], gi);
                        }
                    }
                }
            }
        }
    }
}

/// Source index pair and weight for output position `o` of a ×2 upsampling
/// along an axis of length `n`.
#[inline]
fn upsample_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let x = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = (x.floor() as usize).min(n.saturating_sub(2));
    if n == 1 {
        return (0, 0, 0.0);
    }
    (lo, lo + 1, x - lo as f64)
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    // (outer, len, inner) treating channels as part of the outer extent.
    let outer: usize = shape[..axis + 1].iter().product();
    let len = shape[axis + 1];
    let inner: usize = shape[axis + 2..].iter().product();
    (outer, len, inner)
}

fn upsample_axis(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_layout(shape, axis);
    let mut out = vec![0.0; outer * 2 * n * inner];
    for o in 0..outer {
        for j in 0..2 * n {
            let (lo, hi, t) = upsample_taps(j, n);
            let dst = (o * 2 * n + j) * inner;
            let a = (o * n + lo) * inner;
            let b = (o * n + hi) * inner;
            for k in 0..inner {
                out[dst + k] = (1.0 - t) * data[a + k] + t * data[b + k];
            }
        }
    }
    out
}

/// `shape` is the upsampled shape along `axis`.
fn upsample_axis_adjoint(grad: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n2, inner) = axis_layout(shape, axis);
    let n = n2 / 2;
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for j in 0..n2 {
            let (lo, hi, t) = upsample_taps(j, n);
            let src = (o * n2 + j) * inner;
            let a = (o * n + lo) * inner;
            let b = (o * n + hi) * inner;
            for k in 0..inner {
                out[a + k] += (1.0 - t) * grad[src + k];
                out[b + k] += t * grad[src + k];
            }
        }
    }
    out
}
