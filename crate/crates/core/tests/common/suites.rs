//! Finite-difference checks of every differentiable operation.

use deformreg::autodiff::loss::{loss_field, loss_segmentation, loss_similarity};
use deformreg::autodiff::network::{forward_graph, residual_seg_head, NamedTensor, LEAKY_SLOPE};
use deformreg::autodiff::{Graph, NetworkParameters, Tensor, Var};
use rand::Rng;

use super::{check_gradients, check_gradients_with_steps, leaves, near_warp_kink, no_skip, random_tensor, GradCheck, FD_STEP};

fn projection(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Builds `Σ r_i · op(inputs)_i` for a fixed random `r` sized on first use.
fn projected<F>(inputs: &[Tensor], op: F, rng: &mut impl Rng, per_input: usize) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars = leaves(&mut g, inputs);
    let out = op(&mut g, &vars);
    let r = projection(rng, g.value(out).len());
    let build = |g: &mut Graph, t: &[Tensor]| {
        let vars = leaves(g, t);
        let out = op(g, &vars);
        (g.dot(out, r.clone()), vars)
    };
    check_gradients(inputs, &build, per_input, rng, &no_skip)
}

fn one_hot_truth(rng: &mut impl Rng, classes: usize, n: usize) -> Vec<f64> {
    let mut truth = vec![0.0; classes * n];
    for i in 0..n {
        truth[rng.random_range(0..classes) * n + i] = 1.0;
    }
    truth
}

/// Runs every check; each entry is `(operation, result)`.
pub fn gradient_suite(rng: &mut impl Rng) -> Vec<(&'static str, GradCheck)> {
    let mut results = Vec::new();

    for (name, stride, shape) in [("conv3d stride 1", 1, [2usize, 5, 6, 4]), ("conv3d stride 2", 2, [3, 7, 6, 5])] {
        let cout = 3;
        let inputs = vec![
            random_tensor(shape.to_vec(), rng, -1.0, 1.0),
            random_tensor(vec![cout, shape[0], 3, 3, 3], rng, -0.5, 0.5),
            random_tensor(vec![cout], rng, -0.5, 0.5),
        ];
        results.push((name, projected(&inputs, |g, v| g.conv3d(v[0], v[1], v[2], stride), rng, 40)));
    }

    let mut x = random_tensor(vec![2, 4, 4, 4], rng, -1.0, 1.0);
    x.data.iter_mut().for_each(|v| {
        if v.abs() < 10.0 * FD_STEP {
            *v += 0.1;
        }
    });
    results.push(("leaky relu", projected(&[x], |g, v| g.leaky_relu(v[0], LEAKY_SLOPE), rng, 128)));

    let x = random_tensor(vec![2, 3, 4, 2], rng, -1.0, 1.0);
    results.push(("upsample x2", projected(&[x], |g, v| g.upsample2(v[0]), rng, 48)));

    let inputs = [random_tensor(vec![2, 4, 5, 3], rng, -1.0, 1.0), random_tensor(vec![1, 4, 5, 3], rng, -1.0, 1.0)];
    results.push((
        "concat + crop",
        projected(
            &inputs,
            |g, v| {
                let c = g.concat(&[v[0], v[1]]);
                g.crop(c, [3, 4, 2])
            },
            rng,
            60,
        ),
    ));

    let x = random_tensor(vec![3, 4, 4, 4], rng, -2.0, 2.0);
    results.push(("softmax", projected(&[x], |g, v| g.softmax(v[0]), rng, 64)));

    let inputs = [random_tensor(vec![2, 3, 3, 3], rng, -1.0, 1.0), random_tensor(vec![2, 3, 3, 3], rng, -1.0, 1.0)];
    results.push((
        "add + scale",
        projected(
            &inputs,
            |g, v| {
                let s = g.scale(v[1], -1.7);
                g.add(v[0], s)
            },
            rng,
            54,
        ),
    ));

    // Warp: gradient with respect to both the image and the field.
    let inputs = vec![random_tensor(vec![2, 6, 6, 6], rng, 0.0, 1.0), random_tensor(vec![3, 6, 6, 6], rng, -1.5, 1.5)];
    let r = projection(rng, 2 * 216);
    let build = |g: &mut Graph, t: &[Tensor]| {
        let v = leaves(g, t);
        let w = g.warp(v[0], v[1]);
        (g.dot(w, r.clone()), v)
    };
    let skip = |k: usize, c: usize, t: &[Tensor]| k == 1 && near_warp_kink(&t[1], c);
    results.push(("warp (image, field)", check_gradients(&inputs, &build, 200, rng, &skip)));

    // Field loss, away from zero distance.
    let target: Vec<f64> = projection(rng, 3 * 64);
    let field = random_tensor(vec![3, 4, 4, 4], rng, -2.0, 2.0);
    let build = |g: &mut Graph, t: &[Tensor]| {
        let v = leaves(g, t);
        (loss_field(g, v[0], &target), v)
    };
    results.push(("field loss", check_gradients(&[field], &build, 96, rng, &no_skip)));

    // Similarity loss, window 3 on 7³.
    let fixed: Vec<f64> = (0..343).map(|_| rng.random::<f64>()).collect();
    let recon = random_tensor(vec![1, 7, 7, 7], rng, 0.0, 1.0);
    let build = |g: &mut Graph, t: &[Tensor]| {
        let v = leaves(g, t);
        (loss_similarity(g, &fixed, v[0], 3).expect("valid window"), v)
    };
    results.push(("similarity loss", check_gradients(&[recon], &build, 120, rng, &no_skip)));

    // Dice loss on softmax probabilities.
    let truth = one_hot_truth(rng, 3, 125);
    let logits = random_tensor(vec![3, 5, 5, 5], rng, -2.0, 2.0);
    let build = |g: &mut Graph, t: &[Tensor]| {
        let v = leaves(g, t);
        let p = g.softmax(v[0]);
        (loss_segmentation(g, p, &truth), v)
    };
    results.push(("segmentation loss", check_gradients(&[logits], &build, 120, rng, &no_skip)));

    // Residual segmentation head: features, warped labels and head weights.
    let head = NetworkParameters::init(rng.random(), Some(3));
    let mut head_tensors: Vec<NamedTensor> = head.tensors.iter().filter(|t| t.name.starts_with("seg_head.")).cloned().collect();
    head_tensors[1].tensor = random_tensor(vec![3], rng, -0.2, 0.2);
    let body: Vec<NamedTensor> = head.tensors.iter().filter(|t| !t.name.starts_with("seg_head.")).cloned().collect();
    let truth = one_hot_truth(rng, 3, 216);
    let inputs = vec![
        random_tensor(vec![16, 6, 6, 6], rng, 0.0, 1.0),
        random_tensor(vec![3, 6, 6, 6], rng, 0.0, 1.0),
        head_tensors[0].tensor.clone(),
        head_tensors[1].tensor.clone(),
    ];
    let build = |g: &mut Graph, t: &[Tensor]| {
        let mut tensors = body.clone();
        tensors.push(NamedTensor { name: "seg_head.weight".into(), tensor: t[2].clone() });
        tensors.push(NamedTensor { name: "seg_head.bias".into(), tensor: t[3].clone() });
        let bound = NetworkParameters { tensors }.bind(g, true);
        let feats = g.parameter(t[0].clone());
        let labels = g.parameter(t[1].clone());
        let probs = residual_seg_head(g, &bound, feats, labels).expect("head present");
        let n = bound.vars.len();
        (loss_segmentation(g, probs, &truth), vec![feats, labels, bound.vars[n - 2], bound.vars[n - 1]])
    };
    results.push(("residual segmentation head", check_gradients(&inputs, &build, 60, rng, &no_skip)));
    results
}

/// Difference steps for the whole estimator. At 1e-4 a parameter nudge can
/// move one of the ~10⁵ leaky-ReLU pre-activations across zero, while at 1e-6
/// rounding in the 65k-term projection dominates small gradients.
pub const NETWORK_FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// The full estimator on a 16³ input with a randomized field head, checked
/// through both the field and the feature outputs.
pub fn network_check(rng: &mut impl Rng) -> GradCheck {
    let mut params = NetworkParameters::init(rng.random(), None);
    for t in &mut params.tensors {
        if t.name.ends_with(".bias") || t.name.starts_with("field_head") {
            t.tensor.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let names: Vec<String> = params.tensors.iter().map(|t| t.name.clone()).collect();
    let mut inputs: Vec<Tensor> = params.tensors.iter().map(|t| t.tensor.clone()).collect();
    inputs.push(random_tensor(vec![2, 16, 16, 16], rng, 0.0, 1.0));
    let r_field = projection(rng, 3 * 4096);
    let r_feat = projection(rng, 16 * 4096);
    let build = |g: &mut Graph, t: &[Tensor]| {
        let m = names.len();
        let tensors = names.iter().zip(&t[..m]).map(|(n, x)| NamedTensor { name: n.clone(), tensor: x.clone() }).collect();
        let bound = NetworkParameters { tensors }.bind(g, true);
        let x = g.parameter(t[m].clone());
        let out = forward_graph(g, &bound, x).expect("16³ input");
        let a = g.dot(out.field, r_field.clone());
        let b = g.dot(out.features, r_feat.clone());
        let mut vars = bound.vars.clone();
        vars.push(x);
        (g.add(a, b), vars)
    };
    check_gradients_with_steps(&inputs, &build, 3, rng, &no_skip, &NETWORK_FD_STEPS)
}
