//! Trains the registration network on synthetic volumes and compares its
//! held-out endpoint error with the zero-field baseline.
//!
//! `cargo run --release --example train_registration -- [steps] [size]`

use std::time::Instant;

use deformreg::pipeline::{evaluate_simulated, make_synthetic_dataset, train, Mode, TrainConfig};
use deformreg::simulator::SimulatorConfig;

fn main() -> deformreg::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(100, |s| s.parse().expect("steps"));
    let size: usize = args.next().map_or(32, |s| s.parse().expect("size"));

    let data = make_synthetic_dataset(24, [size; 3], 0)?;
    let (train_set, held_out) = data.split_at(20);
    let sim = SimulatorConfig { seed: 1, ..SimulatorConfig::default() };
    let cfg = TrainConfig { mode: Mode::Reg, steps, ..TrainConfig::default() };

    let start = Instant::now();
    let result = train(train_set, &sim, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    for r in result.history.iter().step_by((steps / 20).max(1)) {
        println!("step {:4}  L_F {:.4}  L_sim {:.4}  total {:.4}", r.step, r.field, r.sim0, r.total);
    }
    println!("{steps} steps in {elapsed:.1} s ({:.2} s/step)", elapsed / steps.max(1) as f64);

    let images: Vec<_> = held_out.iter().enumerate().map(|(i, s)| (format!("test{i}"), s.moving.clone())).collect();
    let eval_sim = SimulatorConfig { seed: 99, ..SimulatorConfig::default() };
    let pairs = evaluate_simulated(&result.params, &images, &eval_sim, cfg.nlcc_window)?;
    let epe: f64 = pairs.iter().filter_map(|p| p.row.epe_mm).sum::<f64>() / pairs.len() as f64;
    let base: f64 = pairs.iter().map(|p| p.baseline_epe_mm).sum::<f64>() / pairs.len() as f64;
    println!("held-out EPE {epe:.3} mm vs zero-field {base:.3} mm (ratio {:.3})", epe / base);
    Ok(())
}
