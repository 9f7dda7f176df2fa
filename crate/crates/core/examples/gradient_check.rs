//! Builds a small convolution + warp + similarity graph, runs reverse-mode
//! differentiation and compares a few gradient entries with central
//! differences.
//!
//! `cargo run --release --example gradient_check`

use deformreg::autodiff::loss::loss_similarity;
use deformreg::autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;

fn build(g: &mut Graph, image: &Tensor, weight: &Tensor, fixed: &[f64]) -> (deformreg::autodiff::Var, deformreg::autodiff::Var) {
    let x = g.constant(image.clone());
    let w = g.parameter(weight.clone());
    let b = g.constant(Tensor::new(vec![3], vec![0.0; 3]));
    let field = g.conv3d(x, w, b, 1);
    let moving = g.constant(Tensor::new(vec![1, 8, 8, 8], image.data[..512].to_vec()));
    let recon = g.warp(moving, field);
    (loss_similarity(g, fixed, recon, 3).expect("window fits"), w)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::new(vec![2, 8, 8, 8], (0..1024).map(|_| rng.random::<f64>()).collect());
    let weight = Tensor::new(vec![3, 2, 3, 3, 3], (0..162).map(|_| rng.random_range(-0.05..0.05)).collect());
    let fixed: Vec<f64> = image.data[512..].to_vec();

    let mut g = Graph::new();
    let (loss, w) = build(&mut g, &image, &weight, &fixed);
    println!("loss {:.6}", g.scalar(loss));
    let grads = g.backward(loss);
    let analytic = grads.get_or_zeros(w, weight.len());

    let eval = |wt: &Tensor| {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, &image, wt, &fixed);
        g.scalar(loss)
    };
    for i in (0..weight.len()).step_by(23) {
        let (mut plus, mut minus) = (weight.clone(), weight.clone());
        plus.data[i] += STEP;
        minus.data[i] -= STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        println!("w[{i:3}]  analytic {:+.6e}  numeric {numeric:+.6e}", analytic[i]);
    }
}
