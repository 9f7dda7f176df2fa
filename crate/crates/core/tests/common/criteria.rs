//! One check per acceptance criterion. Each returns whether it held and a
//! one-line summary of what was measured.

use std::path::Path;
use std::time::Instant;

use deformreg::autodiff::loss::{loss_segmentation, loss_similarity};
use deformreg::autodiff::{Graph, NetworkParameters, Tensor};
use deformreg::grid::{one_hot, voxel_count, DisplacementField, LabelMap, Volume};
use deformreg::metrics::{
    dice, epe, histogram_entropy, majority_vote, mean_foreground_dice, mse, mutual_information, nlcc, uncertainty_map,
};
use deformreg::pipeline::{
    evaluate_simulated, fuse_votes, make_synthetic_dataset, segment_mtl, select_top, train, AtlasSet, Mode, SegmentMode, TrainConfig,
    TrainSample, INVERSION_MAX_ITERS, INVERSION_TOL,
};
use deformreg::resample::{invert_field, warp_linear};
use deformreg::simulator::{generate_pair, sample_transform, SimulatorConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{oracle_dice, oracle_epe, oracle_mi, oracle_mse, oracle_nlcc, oracle_warp};

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

pub const GRADIENT_SUITE_SECONDS: f64 = 60.0;
pub const METRIC_ORACLE_TOL: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-4;
pub const ENTROPY_TOL: f64 = 1e-9;
pub const SIMULATOR_SAMPLES: usize = 10_000;
pub const STANDARD_ERRORS: f64 = 3.0;
pub const INVERSION_FIELDS: u64 = 20;
pub const INVERSION_MEAN_RESIDUAL: f64 = 0.1;
pub const TRAIN_VOLUMES: usize = 20;
pub const HELD_OUT_VOLUMES: usize = 4;
pub const TRAIN_SIZE: usize = 32;
pub const REG_STEPS: usize = 500;
pub const EPE_RATIO: f64 = 0.5;
pub const LOSS_WINDOW: usize = 10;
pub const SEG_STEPS: usize = 300;
pub const MTL_DICE_GAIN: f64 = 0.10;
pub const FEAT_DICE_SLACK: f64 = 0.05;
pub const F32_REL: f64 = 1.0 / (1u32 << 23) as f64;

/// Per-operation finite-difference checks, timed.
pub fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let results = super::suites::gradient_suite(&mut rng);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| *n).collect();
    let checked: usize = results.iter().map(|(_, r)| r.checked).sum();
    let worst = results.iter().map(|(_, r)| r.worst_rel).fold(0.0, f64::max);
    Outcome::new(
        failed.is_empty() && secs < GRADIENT_SUITE_SECONDS,
        format!(
            "{} operations, {checked} coordinates, worst relative error {worst:.1e}, {secs:.1} s (limit {GRADIENT_SUITE_SECONDS} s){}",
            results.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    )
}

/// Quarter-voxel displacements in [-3.5, 3.5]: with data on a 1/64 grid both
/// implementations are exact in floating point, so equality is bitwise.
fn quarter_offsets() -> Vec<f64> {
    (-14..=14).map(|q| f64::from(q) * 0.25).collect()
}

pub fn warp_oracle_cases(rng: &mut impl Rng) -> (usize, usize) {
    let dims = [3, 3, 3];
    let v = Volume::from_data(dims, (0..27).map(|_| f64::from(rng.random_range(-64i32..=64)) / 64.0).collect()).expect("3³ volume");
    let offsets = quarter_offsets();
    let (mut cases, mut mismatches) = (0, 0);
    let mut check = |f: &DisplacementField| {
        let got = warp_linear(&v, f).expect("same grid");
        cases += 1;
        if got.data() != oracle_warp(&v, f).as_slice() {
            mismatches += 1;
        }
    };
    for &a in &offsets {
        for &b in &offsets {
            for &c in &offsets {
                check(&DisplacementField::constant(dims, [a, b, c]));
            }
        }
    }
    for _ in 0..2000 {
        let data = (0..81).map(|_| offsets[rng.random_range(0..offsets.len())]).collect();
        check(&DisplacementField::new(dims, data).expect("3³ field"));
    }
    (cases, mismatches)
}

pub struct MetricDiffs {
    pub epe: f64,
    pub mse: f64,
    pub nlcc: f64,
    pub mi: f64,
    pub dice: f64,
}

impl MetricDiffs {
    pub fn worst(&self) -> f64 {
        [self.epe, self.mse, self.nlcc, self.mi, self.dice].into_iter().fold(0.0, f64::max)
    }
}

/// Largest difference from the scalar oracles over `trials` random 7³ inputs.
pub fn metric_oracle_diffs(rng: &mut impl Rng, trials: usize) -> MetricDiffs {
    let dims = [7, 7, 7];
    let n = voxel_count(dims);
    let mut d = MetricDiffs { epe: 0.0, mse: 0.0, nlcc: 0.0, mi: 0.0, dice: 0.0 };
    for _ in 0..trials {
        let mut vol = || Volume::from_data(dims, (0..n).map(|_| rng.random::<f64>()).collect()).expect("7³");
        let (a, b) = (vol(), vol());
        let mut field = || DisplacementField::new(dims, (0..3 * n).map(|_| rng.random_range(-3.0..3.0)).collect()).expect("7³");
        let (f, g) = (field(), field());
        let mut labels = || LabelMap::new(dims, 3, (0..n).map(|_| rng.random_range(0..3)).collect()).expect("7³");
        let (p, t) = (labels(), labels());
        d.epe = d.epe.max((epe(&f, &g, [1.0; 3]).expect("epe") - oracle_epe(&f, &g)).abs());
        d.mse = d.mse.max((mse(&a, &b).expect("mse") - oracle_mse(&a, &b)).abs());
        d.nlcc = d.nlcc.max((nlcc(&a, &b, 3).expect("nlcc") - oracle_nlcc(&a, &b, 3)).abs());
        d.mi = d.mi.max((mutual_information(&a, &b, 10).expect("mi") - oracle_mi(&a, &b, 10)).abs());
        for c in 0..3 {
            d.dice = d.dice.max((dice(&p, &t, c).expect("dice") - oracle_dice(&p, &t, c)).abs());
        }
    }
    d
}

pub fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (cases, mismatches) = warp_oracle_cases(&mut rng);
    let d = metric_oracle_diffs(&mut rng, 20);
    Outcome::new(
        mismatches == 0 && d.worst() <= METRIC_ORACLE_TOL,
        format!(
            "warp: {mismatches}/{cases} 3³ cases differ bitwise; metric max |diff| EPE {:.1e} MSE {:.1e} NLCC {:.1e} MI {:.1e} Dice {:.1e} (tol {METRIC_ORACLE_TOL:.0e})",
            d.epe, d.mse, d.nlcc, d.mi, d.dice
        ),
    )
}

/// A smooth random texture in [0, 1] with no flat windows.
pub fn textured_volume(rng: &mut impl Rng, dims: [usize; 3]) -> Volume {
    let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.9));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..6.0));
    Volume::from_fn(dims, |p| {
        let s: f64 = (0..3).map(|a| (freq[a] * p[a] as f64 + phase[a]).sin()).sum();
        0.45 + 0.15 * s + 0.1 * rng.random::<f64>()
    })
}

pub struct Identities {
    pub sim_self: f64,
    pub epe_self: f64,
    pub dice_perfect: f64,
    pub mi_minus_entropy: f64,
}

pub fn identity_values(rng: &mut impl Rng) -> Identities {
    let dims = [12, 12, 12];
    let v = textured_volume(rng, dims);
    let mut g = Graph::new();
    let recon = g.constant(Tensor::new(vec![1, 12, 12, 12], v.data().to_vec()));
    let sim = loss_similarity(&mut g, v.data(), recon, 5).expect("window fits");
    let sim_self = g.scalar(sim);

    let f = DisplacementField::new(dims, (0..3 * 1728).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("field");
    let epe_self = epe(&f, &f, [1.0; 3]).expect("epe");

    let labels = LabelMap::new(dims, 3, (0..1728).map(|_| rng.random_range(0..3)).collect()).expect("labels");
    let oh = one_hot(&labels);
    let mut g = Graph::new();
    let pred = g.constant(Tensor::new(vec![3, 12, 12, 12], oh.values().to_vec()));
    let seg = loss_segmentation(&mut g, pred, oh.values());
    let dice_perfect = g.scalar(seg);

    let mi_minus_entropy = mutual_information(&v, &v, 32).expect("mi") - histogram_entropy(&v, 32).expect("entropy");
    Identities { sim_self, epe_self, dice_perfect, mi_minus_entropy }
}

pub fn identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let id = identity_values(&mut rng);
    let passed = (id.sim_self + 1.0).abs() <= IDENTITY_TOL
        && id.epe_self == 0.0
        && (id.dice_perfect + 1.0).abs() <= IDENTITY_TOL
        && id.mi_minus_entropy.abs() <= ENTROPY_TOL;
    Outcome::new(
        passed,
        format!(
            "L_sim(I,I) {:.6}; EPE(F,F) {}; Dice loss (perfect) {:.6}; MI(a,a) - H(a) {:.1e}",
            id.sim_self, id.epe_self, id.dice_perfect, id.mi_minus_entropy
        ),
    )
}

/// Sample mean of each transform parameter over `n` draws against the mean of
/// its uniform range, in standard errors. Order: angles, scales,
/// translations, gamma, sigma.
pub fn parameter_mean_errors(cfg: &SimulatorConfig, n: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = [0.0; 11];
    for _ in 0..n {
        let t = sample_transform(cfg, &mut rng);
        let values = [t.angles, t.scales, t.translation].concat();
        for (s, v) in sums.iter_mut().zip(values.iter().chain([t.elastic_gamma, t.smoothing_sigma].iter())) {
            *s += v;
        }
    }
    let mut ranges = Vec::new();
    for a in 0..3 {
        ranges.push((format!("angle{a}"), 0.0, cfg.max_angle[a]));
    }
    for a in 0..3 {
        ranges.push((format!("scale{a}"), cfg.scale_min[a], cfg.scale_max[a]));
    }
    for a in 0..3 {
        ranges.push((format!("translation{a}"), -cfg.max_translation[a], cfg.max_translation[a]));
    }
    ranges.push(("gamma".into(), 0.0, cfg.max_elastic_gamma));
    ranges.push(("sigma".into(), cfg.sigma_min, cfg.sigma_max));
    ranges
        .into_iter()
        .zip(sums)
        .map(|((name, lo, hi), sum)| {
            let se = (hi - lo) / (12.0 * n as f64).sqrt();
            (name, (sum / n as f64 - (lo + hi) / 2.0).abs() / se)
        })
        .collect()
}

pub fn simulator() -> Outcome {
    let dims = [16, 16, 16];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let moving = textured_volume(&mut rng, dims);
    let cfg = SimulatorConfig::default();
    let run = |seed| generate_pair(&moving, None, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).expect("pair");
    let (a, b) = (run(9), run(9));
    let bitwise = a.field.data().iter().zip(b.field.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.fixed.data().iter().zip(b.fixed.data()).all(|(x, y)| x.to_bits() == y.to_bits());

    let id = generate_pair(&moving, None, &SimulatorConfig::identity(), &mut rng).expect("pair");
    let field_zero = id.field.data().iter().all(|&x| x == 0.0);
    let image_err = id.fixed.data().iter().zip(moving.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    let errors = parameter_mean_errors(&cfg, SIMULATOR_SAMPLES, 5);
    let (worst_name, worst) = errors.iter().cloned().fold((String::new(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc });
    Outcome::new(
        bitwise && field_zero && image_err <= 1e-6 && worst < STANDARD_ERRORS,
        format!(
            "same seed bitwise equal: {bitwise}; identity config: field zero {field_zero}, max |I0 - M| {image_err:.1e}; \
             {SIMULATOR_SAMPLES} draws, worst mean offset {worst:.2} SE ({worst_name})"
        ),
    )
}

/// Mean residual of each default simulator field on 32³, by seed.
pub fn inversion_residuals() -> Vec<f64> {
    let moving = Volume::zeros([32; 3]);
    (0..INVERSION_FIELDS)
        .map(|seed| {
            let pair = generate_pair(&moving, None, &SimulatorConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).expect("pair");
            invert_field(&pair.field, INVERSION_MAX_ITERS, INVERSION_TOL).mean_residual
        })
        .collect()
}

pub fn translation_inverse_residual() -> f64 {
    let shift = DisplacementField::constant([12, 10, 8], [1.5, -2.25, 0.75]);
    invert_field(&shift, INVERSION_MAX_ITERS, INVERSION_TOL).max_residual
}

pub fn inversion() -> Outcome {
    let residuals = inversion_residuals();
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let worst = residuals.iter().copied().fold(0.0, f64::max);
    let shift = translation_inverse_residual();
    Outcome::new(
        mean < INVERSION_MEAN_RESIDUAL && shift == 0.0,
        format!(
            "{INVERSION_FIELDS} fields on 32³: mean residual {mean:.4} voxels (limit {INVERSION_MEAN_RESIDUAL}), worst field {worst:.4}; \
             translation max residual {shift:.1e}"
        ),
    )
}

/// Synthetic training volumes and held-out volumes, as used by the training
/// criteria.
pub fn training_split() -> (Vec<TrainSample>, Vec<TrainSample>) {
    let mut data = make_synthetic_dataset(TRAIN_VOLUMES + HELD_OUT_VOLUMES, [TRAIN_SIZE; 3], 0).expect("synthetic data");
    let held = data.split_off(TRAIN_VOLUMES);
    (data, held)
}

pub fn registration_training() -> Outcome {
    let (train_set, held) = training_split();
    let sim = SimulatorConfig { seed: 1, ..SimulatorConfig::default() };
    let cfg = TrainConfig { mode: Mode::Reg, steps: REG_STEPS, ..TrainConfig::default() };
    let start = Instant::now();
    let result = train(&train_set, &sim, &cfg).expect("training");
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let images: Vec<_> = held.iter().enumerate().map(|(i, s)| (format!("held{i}"), s.moving.clone())).collect();
    let eval_sim = SimulatorConfig { seed: 99, ..SimulatorConfig::default() };
    let pairs = evaluate_simulated(&result.params, &images, &eval_sim, cfg.nlcc_window).expect("evaluation");
    let model = pairs.iter().filter_map(|p| p.row.epe_mm).sum::<f64>() / pairs.len() as f64;
    let baseline = pairs.iter().map(|p| p.baseline_epe_mm).sum::<f64>() / pairs.len() as f64;

    let mean = |r: &[deformreg::pipeline::LossRecord]| r.iter().map(|x| x.field).sum::<f64>() / r.len() as f64;
    let h = &result.history;
    let (first, last) = (mean(&h[..LOSS_WINDOW]), mean(&h[h.len() - LOSS_WINDOW..]));
    let ratio = model / baseline;
    Outcome::new(
        ratio < EPE_RATIO && last < first,
        format!(
            "(a) held-out EPE {model:.3} vs zero field {baseline:.3}, ratio {ratio:.3} (needs < {EPE_RATIO}); \
             (b) L_F first {LOSS_WINDOW} mean {first:.3}, last {LOSS_WINDOW} mean {last:.3}; {REG_STEPS} steps in {minutes:.1} min"
        ),
    )
}

/// Mean foreground Dice of segmenting each held-out volume from one atlas;
/// `None` copies the atlas labels unchanged.
pub fn held_out_dice(params: &NetworkParameters, atlas: &TrainSample, targets: &[TrainSample], mode: Option<SegmentMode>) -> f64 {
    let atlas_labels = atlas.moving_labels.as_ref().expect("labelled atlas");
    let total: f64 = targets
        .iter()
        .map(|t| {
            let truth = t.moving_labels.as_ref().expect("labelled target");
            let pred = match mode {
                Some(m) => segment_mtl(params, (&atlas.moving, atlas_labels), &t.moving, m).expect("segmentation"),
                None => atlas_labels.clone(),
            };
            mean_foreground_dice(&pred, truth).expect("dice")
        })
        .sum();
    total / targets.len() as f64
}

pub fn segmentation_training() -> Outcome {
    let (train_set, held) = training_split();
    let sim = SimulatorConfig { seed: 1, ..SimulatorConfig::default() };
    let atlas = &train_set[0];
    let start = Instant::now();
    let copy = held_out_dice(&NetworkParameters::init(0, None), atlas, &held, None);
    let mut dice = Vec::new();
    for (mode, seg) in [(Mode::Mtl, SegmentMode::Mtl), (Mode::Feat, SegmentMode::Feat)] {
        let cfg = TrainConfig { mode, steps: SEG_STEPS, ..TrainConfig::default() };
        let result = train(&train_set, &sim, &cfg).expect("training");
        dice.push(held_out_dice(&result.params, atlas, &held, Some(seg)));
    }
    let (mtl, feat) = (dice[0], dice[1]);
    Outcome::new(
        mtl >= copy + MTL_DICE_GAIN && feat >= mtl - FEAT_DICE_SLACK,
        format!(
            "atlas copy Dice {copy:.4}; MTL {mtl:.4} (needs >= {:.4}); FEAT {feat:.4} (needs >= {:.4}); {SEG_STEPS} steps each, {:.1} min",
            copy + MTL_DICE_GAIN,
            mtl - FEAT_DICE_SLACK,
            start.elapsed().as_secs_f64() / 60.0
        ),
    )
}

/// Three 1×1×4 atlas votes per voxel: unanimous, two-to-one, a three-way
/// split and one-to-two.
pub fn disagreement_votes() -> Vec<LabelMap> {
    let dims = [1, 1, 4];
    [[1, 2, 2, 0], [1, 2, 0, 1], [1, 0, 1, 1]].iter().map(|l| LabelMap::new(dims, 3, l.to_vec()).expect("votes")).collect()
}

pub fn fusion() -> Outcome {
    let votes = disagreement_votes();
    let (consensus, u) = fuse_votes(&votes).expect("fusion");
    let expected_labels = [1u32, 2, 0, 1];
    let expected_u = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
    let pair = [LabelMap::new([1, 1, 2], 3, vec![2, 1]).expect("votes"), LabelMap::new([1, 1, 2], 3, vec![1, 2]).expect("votes")];
    let labels_ok = consensus.labels() == expected_labels
        && majority_vote(&votes).expect("vote").labels() == expected_labels
        && majority_vote(&pair).expect("vote").labels() == [1, 1];
    let u_ok = u.data() == expected_u && uncertainty_map(&votes, &consensus).expect("u").data() == expected_u;

    let mut selection_ok = true;
    for n in [1usize, 5, 9, 10, 11, 25, 31] {
        let entries = (0..n).map(|_| (Volume::zeros([2; 3]), LabelMap::new([2; 3], 2, vec![0; 8]).expect("labels"))).collect();
        let keep = AtlasSet::new(entries, 0.1).expect("atlas set").keep_count();
        let scores: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let kept = select_top(&scores, keep);
        selection_ok &= keep == (0.1 * n as f64).ceil() as usize && kept.len() == keep;
    }
    Outcome::new(
        labels_ok && u_ok && selection_ok,
        format!(
            "consensus {:?} (ties to smallest class), U {:?}; ceil(0.1 N) kept for N in 1..31: {selection_ok}",
            consensus.labels(),
            u.data()
        ),
    )
}

/// Converts a little-endian single-file NIfTI with a 4-byte datatype into an
/// equivalent big-endian one.
pub fn byte_swap_nifti(bytes: &[u8]) -> Vec<u8> {
    let mut out = bytes.to_vec();
    let swap = |b: &mut [u8], o: usize, w: usize| b[o..o + w].reverse();
    swap(&mut out, 0, 4);
    for i in 0..8 {
        swap(&mut out, 40 + 2 * i, 2);
    }
    swap(&mut out, 70, 2);
    swap(&mut out, 72, 2);
    for i in 0..8 {
        swap(&mut out, 76 + 4 * i, 4);
    }
    for o in [108, 112, 116] {
        swap(&mut out, o, 4);
    }
    for o in (352..out.len()).step_by(4) {
        swap(&mut out, o, 4);
    }
    out
}

pub fn count_csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).expect("csv").records().count()
}

pub fn io() -> Outcome {
    use deformreg::io::nifti::{decode, encode_volume, read_volume, write_volume};
    let dir = tempfile::tempdir().expect("temp dir");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = Volume::new([5, 6, 7], [0.8, 1.25, 2.5], (0..210).map(|_| rng.random_range(-1e3..1e3)).collect()).expect("volume");
    let path = dir.path().join("v.nii");
    write_volume(&v, &path).expect("write");
    let back = read_volume(&path).expect("read");
    let voxel_err = v.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs() / a.abs().max(1.0)).fold(0.0, f64::max);
    let spacing_ok = back.spacing().iter().zip(v.spacing()).all(|(a, b)| (a - b).abs() <= b * F32_REL);
    let round_trip = back.dims() == v.dims() && voxel_err <= F32_REL && spacing_ok;

    let le = encode_volume(&v);
    let be = decode(&byte_swap_nifti(&le)).and_then(|img| img.to_volume());
    let swapped = matches!(&be, Ok(b) if b.data() == back.data() && b.spacing() == back.spacing());

    let data = dir.path().join("data");
    let csv = dir.path().join("metrics.csv");
    let synth = deformreg::cli::run(["deformreg", "synth", "--n", "5", "--size", "16", "--out", data.to_str().unwrap()]);
    let eval = deformreg::cli::run(["deformreg", "evaluate", "--dataset", data.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    let rows = if synth == 0 && eval == 0 { count_csv_rows(&csv) } else { 0 };
    Outcome::new(
        round_trip && swapped && rows == 10,
        format!(
            "round trip max relative voxel error {voxel_err:.1e}, spacing preserved {spacing_ok}; byte-swapped header parses {swapped}; \
             evaluate on 5 images: {rows} rows (exit codes synth {synth}, evaluate {eval})"
        ),
    )
}
