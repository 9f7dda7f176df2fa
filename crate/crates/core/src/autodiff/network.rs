//! Encoder–decoder displacement estimator.
//!
//! Four stride-2 encoder convolutions (16, 32, 32, 32 channels), two 32-channel
//! bottleneck convolutions, four decoder blocks (trilinear ×2 upsampling,
//! skip concatenation, convolution with 32, 32, 32, 16 channels), a 16-channel
//! penultimate convolution whose activation is exposed as the feature map, and
//! a zero-initialized 3-channel field head. Every hidden convolution is 3³ and
//! followed by LeakyReLU(0.2). An optional segmentation head refines a warped
//! label map from the features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{voxels, Dims, DisplacementField, Volume};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Each spatial dim must be a multiple of this (four stride-2 levels).
pub const SIZE_MULTIPLE: usize = 16;
pub const FEATURE_CHANNELS: usize = 16;

/// Weight given to the warped-label channel on the segmentation head's
/// center tap at initialization.
const SEG_HEAD_IDENTITY: f64 = 4.0;

struct LayerSpec {
    name: &'static str,
    cin: usize,
    cout: usize,
}

const fn layer(name: &'static str, cin: usize, cout: usize) -> LayerSpec {
    LayerSpec { name, cin, cout }
}

const LAYERS: [LayerSpec; 12] = [
    layer("enc1", 2, 16),
    layer("enc2", 16, 32),
    layer("enc3", 32, 32),
    layer("enc4", 32, 32),
    layer("bottleneck1", 32, 32),
    layer("bottleneck2", 32, 32),
    layer("dec1", 32 + 32, 32),
    layer("dec2", 32 + 32, 32),
    layer("dec3", 32 + 16, 32),
    layer("dec4", 32 + 2, 16),
    layer("penultimate", 16, FEATURE_CHANNELS),
    layer("field_head", FEATURE_CHANNELS, 3),
];

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// All learnable tensors, in a fixed order: `<layer>.weight`, `<layer>.bias`
/// for each layer, then the segmentation head when present.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParameters {
    pub tensors: Vec<NamedTensor>,
}

fn kaiming_uniform(rng: &mut impl Rng, cout: usize, cin: usize) -> Vec<f64> {
    let fan_in = (cin * 27) as f64;
    let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
    (0..cout * cin * 27).map(|_| rng.random_range(-bound..bound)).collect()
}

impl NetworkParameters {
    /// Fan-in scaled uniform initialization from `seed`; the field head starts
    /// at zero so the initial prediction is the identity transform.
    pub fn init(seed: u64, seg_classes: Option<usize>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for spec in &LAYERS {
            let weight = if spec.name == "field_head" {
                vec![0.0; spec.cout * spec.cin * 27]
            } else {
                kaiming_uniform(&mut rng, spec.cout, spec.cin)
            };
            tensors.push(NamedTensor {
                name: format!("{}.weight", spec.name),
                tensor: Tensor::new(vec![spec.cout, spec.cin, 3, 3, 3], weight),
            });
            tensors.push(NamedTensor { name: format!("{}.bias", spec.name), tensor: Tensor::zeros(vec![spec.cout]) });
        }
        let mut params = Self { tensors };
        if let Some(c) = seg_classes {
            params.add_seg_head(c, &mut rng);
        }
        params
    }

    /// Adds a segmentation head for `classes` labels. Feature taps start
    /// small and the warped-label input passes through the center tap, so the
    /// initial head reproduces the argmax of its label input.
    pub fn add_seg_head(&mut self, classes: usize, rng: &mut impl Rng) {
        let cin = FEATURE_CHANNELS + classes;
        let mut w = kaiming_uniform(rng, classes, cin);
        for co in 0..classes {
            for ci in 0..cin {
                for t in 0..27 {
                    let idx = (co * cin + ci) * 27 + t;
                    if ci < FEATURE_CHANNELS {
                        w[idx] *= 0.1;
                    } else {
                        w[idx] = if ci - FEATURE_CHANNELS == co && t == 13 { SEG_HEAD_IDENTITY } else { 0.0 };
                    }
                }
            }
        }
        self.tensors.retain(|t| !t.name.starts_with("seg_head."));
        self.tensors.push(NamedTensor { name: "seg_head.weight".into(), tensor: Tensor::new(vec![classes, cin, 3, 3, 3], w) });
        self.tensors.push(NamedTensor { name: "seg_head.bias".into(), tensor: Tensor::zeros(vec![classes]) });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.tensor)
    }

    pub fn seg_classes(&self) -> Option<usize> {
        self.get("seg_head.bias").map(|b| b.len())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    /// Places every tensor on the graph, as trainable parameters or as
    /// constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParameters {
        let vars =
            self.tensors.iter().map(|t| if trainable { g.parameter(t.tensor.clone()) } else { g.constant(t.tensor.clone()) }).collect();
        BoundParameters { vars, seg_head: self.seg_classes().is_some() }
    }
}

/// Graph handles for a [`NetworkParameters`], in the same order.
#[derive(Clone, Debug)]
pub struct BoundParameters {
    pub vars: Vec<Var>,
    seg_head: bool,
}

impl BoundParameters {
    fn layer(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    fn seg_head(&self) -> Option<(Var, Var)> {
        self.seg_head.then(|| self.layer(LAYERS.len()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NetworkOutput {
    /// `[3, D, H, W]` displacement in voxels.
    pub field: Var,
    /// `[16, D, H, W]` penultimate activation.
    pub features: Var,
}

fn check_multiple(dims: Dims) -> Result<()> {
    if dims.iter().any(|d| d % SIZE_MULTIPLE != 0) {
        return Err(Error::InvalidArgument(format!("network input dims {dims:?} must be multiples of {SIZE_MULTIPLE}")));
    }
    Ok(())
}

/// Runs the estimator on a `[2, D, H, W]` input (moving, fixed).
pub fn forward_graph(g: &mut Graph, p: &BoundParameters, input: Var) -> Result<NetworkOutput> {
    check_multiple(g.value(input).spatial())?;
    let conv = |g: &mut Graph, i: usize, x: Var, stride: usize, act: bool| {
        let (w, b) = p.layer(i);
        let y = g.conv3d(x, w, b, stride);
        if act {
            g.leaky_relu(y, LEAKY_SLOPE)
        } else {
            y
        }
    };
    let e1 = conv(g, 0, input, 2, true);
    let e2 = conv(g, 1, e1, 2, true);
    let e3 = conv(g, 2, e2, 2, true);
    let e4 = conv(g, 3, e3, 2, true);
    let b1 = conv(g, 4, e4, 1, true);
    let b2 = conv(g, 5, b1, 1, true);
    let mut x = b2;
    for (i, skip) in [(6, e3), (7, e2), (8, e1), (9, input)] {
        let up = g.upsample2(x);
        let cat = g.concat(&[up, skip]);
        x = conv(g, i, cat, 1, true);
    }
    let features = conv(g, 10, x, 1, true);
    let field = conv(g, 11, features, 1, false);
    Ok(NetworkOutput { field, features })
}

/// Softmax over a convolution of `[features, warped labels]`.
pub fn residual_seg_head(g: &mut Graph, p: &BoundParameters, features: Var, labels: Var) -> Result<Var> {
    let (w, b) = p.seg_head().ok_or_else(|| Error::InvalidArgument("segmentation head parameters absent".into()))?;
    let (fd, ld) = (g.value(features).spatial(), g.value(labels).spatial());
    if fd != ld {
        return Err(Error::DimsMismatch { left: fd, right: ld });
    }
    let cat = g.concat(&[features, labels]);
    let logits = g.conv3d(cat, w, b, 1);
    Ok(g.softmax(logits))
}

/// Smallest multiple of [`SIZE_MULTIPLE`] covering each dim.
pub fn padded_dims(dims: Dims) -> Dims {
    dims.map(|d| d.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE)
}

/// Edge-replicate padding on the high side of each axis, so voxel
/// coordinates are unchanged.
pub fn pad_replicate(data: &[f64], dims: Dims, to: Dims) -> Vec<f64> {
    if dims == to {
        return data.to_vec();
    }
    voxels(to)
        .map(|(_, p)| {
            let q: [usize; 3] = std::array::from_fn(|a| p[a].min(dims[a] - 1));
            data[(q[0] * dims[1] + q[1]) * dims[2] + q[2]]
        })
        .collect()
}

/// Stacks moving and fixed into a padded `[2, D, H, W]` constant.
pub fn input_tensor(moving: &Volume, fixed: &Volume) -> Result<(Tensor, Dims)> {
    crate::error::check_dims(moving.dims(), fixed.dims())?;
    let dims = moving.dims();
    let pd = padded_dims(dims);
    let mut data = pad_replicate(moving.data(), dims, pd);
    data.extend(pad_replicate(fixed.data(), dims, pd));
    Ok((Tensor::new(vec![2, pd[0], pd[1], pd[2]], data), pd))
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub field: DisplacementField,
    /// Penultimate features on the (padded) network grid.
    pub features: Tensor,
}

/// Inference: predicted field (cropped to the input grid) and features.
/// Inputs are padded to a multiple of 16 when needed.
pub fn forward_network(params: &NetworkParameters, moving: &Volume, fixed: &Volume) -> Result<Prediction> {
    let (input, _) = input_tensor(moving, fixed)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(input);
    let out = forward_graph(&mut g, &bound, x)?;
    let field = g.crop(out.field, moving.dims());
    Ok(Prediction { field: DisplacementField::new(moving.dims(), g.value(field).data.clone())?, features: g.value(out.features).clone() })
}

/// Strict variant that rejects grids that are not already multiples of 16.
pub fn forward_network_unpadded(params: &NetworkParameters, moving: &Volume, fixed: &Volume) -> Result<Prediction> {
    check_multiple(moving.dims())?;
    forward_network(params, moving, fixed)
}
