//! Trains the dual-registration (MTL) and feature-head (FEAT) variants on
//! labelled synthetic volumes and reports held-out atlas-based Dice against
//! copying the atlas labels unchanged.
//!
//! `cargo run --release --example train_segmentation -- [steps] [size]`

use std::time::Instant;

use deformreg::metrics::mean_foreground_dice as dice;
use deformreg::pipeline::{make_synthetic_dataset, segment_mtl, train, Mode, SegmentMode, TrainConfig, TrainSample};
use deformreg::simulator::SimulatorConfig;

fn held_out_dice(
    params: &deformreg::autodiff::NetworkParameters,
    atlas: &TrainSample,
    targets: &[TrainSample],
    mode: Option<SegmentMode>,
) -> deformreg::Result<f64> {
    let atlas_labels = atlas.moving_labels.as_ref().expect("labelled atlas");
    let mut total = 0.0;
    for t in targets {
        let truth = t.moving_labels.as_ref().expect("labelled target");
        let pred = match mode {
            Some(m) => segment_mtl(params, (&atlas.moving, atlas_labels), &t.moving, m)?,
            None => atlas_labels.clone(),
        };
        total += dice(&pred, truth)?;
    }
    Ok(total / targets.len() as f64)
}

fn main() -> deformreg::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(100, |s| s.parse().expect("steps"));
    let size: usize = args.next().map_or(32, |s| s.parse().expect("size"));

    let data = make_synthetic_dataset(24, [size; 3], 0)?;
    let (train_set, held_out) = data.split_at(20);
    let sim = SimulatorConfig { seed: 1, ..SimulatorConfig::default() };
    let atlas = &train_set[0];

    let baseline = held_out_dice(&deformreg::autodiff::NetworkParameters::init(0, None), atlas, held_out, None)?;
    println!("atlas copy Dice {baseline:.4}");
    for (mode, seg) in [(Mode::Mtl, SegmentMode::Mtl), (Mode::Feat, SegmentMode::Feat)] {
        let cfg = TrainConfig { mode, steps, ..TrainConfig::default() };
        let start = Instant::now();
        let result = train(train_set, &sim, &cfg)?;
        let d = held_out_dice(&result.params, atlas, held_out, Some(seg))?;
        println!("{mode:?}: {steps} steps in {:.1} s, held-out Dice {d:.4}", start.elapsed().as_secs_f64());
    }
    Ok(())
}
