//! Segments a synthetic target by registering a pool of atlases to it,
//! keeping the best-matching tenth and fusing their labels by majority vote.
//! Reports the per-voxel disagreement and the Dice against the target's own
//! labels.
//!
//! `cargo run --release --example multi_atlas_segmentation -- [atlases] [checkpoint]`

use deformreg::autodiff::checkpoint;
use deformreg::autodiff::NetworkParameters;
use deformreg::metrics::mean_foreground_dice;
use deformreg::pipeline::{make_synthetic_dataset, multi_atlas_segment, AtlasSet};

fn main() -> deformreg::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(30, |s| s.parse().expect("atlas count"));
    let params = match args.next() {
        Some(path) => checkpoint::load(std::path::Path::new(&path))?.params,
        None => NetworkParameters::init(0, None),
    };

    let mut data = make_synthetic_dataset(n + 1, [32; 3], 5)?;
    let target = data.pop().expect("n + 1 samples");
    let entries = data.into_iter().map(|s| (s.moving, s.moving_labels.expect("synthetic labels"))).collect();
    let atlases = AtlasSet::new(entries, 0.1)?;

    let result = multi_atlas_segment(&params, &atlases, &target.moving)?;
    println!("kept atlases {:?} of {n}", result.selected);
    for &i in &result.selected {
        println!("  atlas {i:2}  NLCC {:.4}", result.scores[i]);
    }
    let disagreeing = result.uncertainty.data().iter().filter(|&&u| u > 0.0).count();
    println!("voxels with any disagreement: {disagreeing} of {}", result.uncertainty.data().len());
    let truth = target.moving_labels.as_ref().expect("synthetic labels");
    println!("foreground Dice {:.4}", mean_foreground_dice(&result.consensus, truth)?);
    Ok(())
}
