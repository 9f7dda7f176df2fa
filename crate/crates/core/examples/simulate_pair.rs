//! Draws a random affine + elastic deformation, warps a synthetic volume with
//! it and writes the moving image, the deformed image and the ground-truth
//! field as NIfTI files.
//!
//! `cargo run --release --example simulate_pair -- [out_dir] [seed]`

use std::path::PathBuf;

use deformreg::io::nifti::{write_field, write_labels, write_volume};
use deformreg::pipeline::make_synthetic_dataset;
use deformreg::simulator::{generate_pair, SimulatorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> deformreg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "simulated".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let sample = make_synthetic_dataset(1, [32; 3], seed)?.remove(0);
    let cfg = SimulatorConfig { seed, ..SimulatorConfig::default() };
    let pair = generate_pair(&sample.moving, sample.moving_labels.as_ref(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;

    let t = &pair.transform;
    println!("angles (rad)  {:?}", t.angles.map(|a| (a * 1e3).round() / 1e3));
    println!("scales        {:?}", t.scales.map(|a| (a * 1e3).round() / 1e3));
    println!("translation   {:?}", t.translation.map(|a| (a * 1e3).round() / 1e3));
    println!("gamma {:.1}  sigma {:.2}", t.elastic_gamma, t.smoothing_sigma);
    println!("mean |F| {:.3} voxels", pair.field.mean_magnitude());

    std::fs::create_dir_all(&out)?;
    write_volume(&sample.moving, &out.join("moving.nii"))?;
    write_volume(&pair.fixed, &out.join("fixed.nii"))?;
    write_field(&pair.field, &out.join("field"))?;
    if let Some(labels) = &pair.fixed_labels {
        write_labels(labels, &out.join("fixed_labels.nii"))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
