mod common;

use common::criteria::{inversion_residuals, translation_inverse_residual, INVERSION_MEAN_RESIDUAL};
use deformreg::grid::DisplacementField;
use deformreg::pipeline::{INVERSION_MAX_ITERS, INVERSION_TOL};
use deformreg::resample::{compose_fields, invert_field};
use proptest::prelude::*;

#[test]
fn default_simulator_fields_invert_to_small_residual() {
    let r = inversion_residuals();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    assert!(mean < INVERSION_MEAN_RESIDUAL, "mean residual {mean}, per field {r:?}");
}

#[test]
fn translations_invert_exactly() {
    assert_eq!(translation_inverse_residual(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quarter_voxel_translations_invert_exactly(q in prop::array::uniform3(-12i32..=12)) {
        let shift = q.map(|x| f64::from(x) * 0.25);
        let f = DisplacementField::constant([6, 7, 5], shift);
        let inv = invert_field(&f, INVERSION_MAX_ITERS, INVERSION_TOL);
        let residual = compose_fields(&f, &inv.field).unwrap();
        prop_assert!(residual.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn small_smooth_fields_invert_accurately(a in -0.2f64..0.2, b in -0.2f64..0.2, phase in 0.0f64..6.0) {
        let f = DisplacementField::from_fn([10, 10, 10], |p| {
            let t = p.map(|x| x as f64 * 0.4 + phase);
            [a * t[1].sin(), b * t[2].cos(), a * b * t[0].sin()]
        });
        let inv = invert_field(&f, INVERSION_MAX_ITERS, INVERSION_TOL);
        prop_assert!(inv.mean_residual < 1e-3, "{}", inv.mean_residual);
    }
}
