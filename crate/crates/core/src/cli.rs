//! The `deformreg` command line.
//!
//! Every command computes all of its outputs in memory before writing any of
//! them, and each file is written atomically. Exit codes: 0 success, 2 usage
//! or configuration error or missing input, 1 any other failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{self, Checkpoint};
use crate::autodiff::NetworkParameters;
use crate::error::{Error, Result};
use crate::grid::{normalize, DisplacementField, LabelMap, Volume};
use crate::io::config::{RunConfig, SegmentMethod};
use crate::io::{self, nifti, MetricRow};
use crate::metrics::{epe, mse, mutual_information, nlcc};
use crate::pipeline::{self, AtlasSet, Mode, SegmentMode, MI_BINS};
use crate::resample::invert_field;
use crate::simulator::generate_pair;

#[derive(Debug, Parser)]
#[command(name = "deformreg", version, about = "Deformable registration of 3-D volumes")]
pub struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw (simulator and initialization).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Deform an image with a random simulated field.
    Simulate(SimulateArgs),
    /// Train the network on a dataset directory.
    Train(TrainArgs),
    /// Register one moving image to one fixed image.
    Register(RegisterArgs),
    /// Segment a target image from labelled atlases.
    Segment(SegmentArgs),
    /// Approximately invert a displacement field.
    Invert(InvertArgs),
    /// Score a network on simulated pairs, two per image.
    Evaluate(EvaluateArgs),
    /// Write a synthetic labelled dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Moving image; a synthetic image is generated when omitted.
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Grid size of the generated image when `--moving` is omitted.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Reg,
    Mtl,
    Feat,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Trained parameters; an untrained (identity) network when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    /// Ground-truth field base path, for the EPE column.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Atlas,
    MultiAtlas,
    Mtl,
    Feat,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub target: PathBuf,
    /// Atlas directory (`*_image.nii` with `*_labels.nii`).
    #[arg(long)]
    pub atlases: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub selection_fraction: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    /// Field base path: reads `<base>.x.nii`, `<base>.y.nii`, `<base>.z.nii`.
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long, default_value_t = pipeline::INVERSION_MAX_ITERS)]
    pub iterations: usize,
    #[arg(long, default_value_t = pipeline::INVERSION_TOL)]
    pub tol: f64,
    /// Output base path of the inverse field.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::MissingInput(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

/// Files to write once every computation has succeeded.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    fn volume(&mut self, path: PathBuf, v: &Volume) {
        self.add(path, nifti::encode_volume(v));
    }

    fn labels(&mut self, path: PathBuf, s: &LabelMap) -> Result<()> {
        self.add(path, nifti::encode_labels(s)?);
        Ok(())
    }

    fn field(&mut self, base: &Path, f: &DisplacementField) -> Result<()> {
        for (axis, path) in nifti::field_component_paths(base).into_iter().enumerate() {
            let component = Volume::from_data(f.dims(), f.component(axis).to_vec())?;
            self.volume(path, &component);
        }
        Ok(())
    }

    fn csv<T: serde::Serialize>(&mut self, path: PathBuf, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        self.add(path, w.into_inner().map_err(|e| Error::Io(e.into_error()))?);
        Ok(())
    }

    fn commit(self) -> Result<()> {
        for (path, bytes) in &self.files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            io::atomic_write(path, bytes)?;
        }
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn require_input(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn require_field(base: &Path) -> Result<()> {
    nifti::field_component_paths(base).iter().try_for_each(|p| require_input(p))
}

fn load_params(path: Option<&Path>, seed: u64) -> Result<NetworkParameters> {
    match path {
        Some(p) => Ok(checkpoint::load(p)?.params),
        None => Ok(NetworkParameters::init(seed, None)),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Register(a) => register(&cfg, a),
        Command::Segment(a) => segment(cfg, a),
        Command::Invert(a) => invert(a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Synth(a) => synth(&cfg, a),
    }
}

fn simulate(cfg: &RunConfig, a: &SimulateArgs) -> Result<()> {
    let (moving, labels) = match &a.moving {
        Some(path) => {
            require_input(path)?;
            let labels = a.labels.as_deref().map(|p| require_input(p).and_then(|_| nifti::read_labels(p, None))).transpose()?;
            (nifti::read_volume(path)?, labels)
        }
        None => {
            let mut s = pipeline::make_synthetic_dataset(1, [a.size; 3], cfg.simulator.seed)?.remove(0);
            (s.moving, s.moving_labels.take())
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.simulator.seed);
    let pair = generate_pair(&moving, labels.as_ref(), &cfg.simulator, &mut rng)?;
    let mut out = Outputs::default();
    out.volume(a.out.join("moving.nii"), &moving);
    out.volume(a.out.join("fixed.nii"), &pair.fixed);
    out.field(&a.out.join("field.nii"), &pair.field)?;
    if let Some(l) = &labels {
        out.labels(a.out.join("moving_labels.nii"), l)?;
    }
    if let Some(l) = &pair.fixed_labels {
        out.labels(a.out.join("fixed_labels.nii"), l)?;
    }
    out.add(a.out.join("transform.json"), serde_json::to_vec_pretty(&pair.transform)?);
    out.commit()
}

fn train(mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(m) = a.mode {
        cfg.train.mode = match m {
            ModeArg::Reg => Mode::Reg,
            ModeArg::Mtl => Mode::Mtl,
            ModeArg::Feat => Mode::Feat,
        };
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let dataset = a.dataset.clone().or(cfg.paths.dataset.clone()).ok_or_else(|| Error::Config("no dataset given".into()))?;
    let out_dir = a.out.clone().or(cfg.paths.output.clone()).ok_or_else(|| Error::Config("no output directory given".into()))?;
    let resume = a.checkpoint.clone().or(cfg.paths.checkpoint.clone());
    if let Some(p) = &resume {
        require_input(p)?;
    }
    let samples: Vec<_> = io::read_dataset(&dataset, None)?.into_iter().map(|(_, s)| s).collect();
    let result = match resume {
        Some(p) => {
            let ckpt = checkpoint::load(&p)?;
            let mut optimizer = crate::autodiff::Adam::for_parameters(cfg.train.adam, &ckpt.params);
            optimizer.step = ckpt.step;
            pipeline::train_from(ckpt.params, optimizer, &samples, &cfg.simulator, &cfg.train)?
        }
        None => pipeline::train(&samples, &cfg.simulator, &cfg.train)?,
    };
    let hyper = BTreeMap::from([
        ("lambda".to_string(), cfg.train.lambda),
        ("beta".to_string(), cfg.train.beta),
        ("learning_rate".to_string(), cfg.train.adam.learning_rate),
        ("nlcc_window".to_string(), cfg.train.nlcc_window as f64),
    ]);
    let ckpt = Checkpoint { params: result.params, step: result.optimizer.step, hyperparameters: hyper };
    let mut out = Outputs::default();
    out.add(out_dir.join("checkpoint.ckpt"), checkpoint::encode(&ckpt)?);
    out.add(out_dir.join("loss_history.csv"), io::loss_history_csv(&result.history)?);
    out.commit()
}

fn register(cfg: &RunConfig, a: &RegisterArgs) -> Result<()> {
    require_input(&a.moving)?;
    require_input(&a.fixed)?;
    if let Some(p) = &a.checkpoint {
        require_input(p)?;
    }
    if let Some(t) = &a.truth {
        require_field(t)?;
    }
    let params = load_params(a.checkpoint.as_deref(), cfg.train.seed)?;
    let moving = nifti::read_volume(&a.moving)?;
    let fixed = nifti::read_volume(&a.fixed)?;
    let start = Instant::now();
    let (field, recon) = pipeline::register(&params, &moving, &fixed)?;
    let time_s = start.elapsed().as_secs_f64();
    let epe_mm = a.truth.as_deref().map(|t| epe(&field, &nifti::read_field(t)?, moving.spacing())).transpose()?;
    let row = MetricRow {
        pair_id: pair_id(&a.moving, &a.fixed),
        time_s,
        epe_mm,
        mse: mse(&recon, &fixed)?,
        nlcc: nlcc(&recon, &fixed, a.window)?,
        mi: mutual_information(&unit_range(&recon)?, &unit_range(&fixed)?, MI_BINS)?,
    };
    let mut out = Outputs::default();
    out.field(&a.out.join("field.nii"), &field)?;
    out.volume(a.out.join("reconstruction.nii"), &recon);
    out.csv(a.out.join("metrics.csv"), &[row])?;
    out.commit()
}

/// Histogram metrics need values in [0, 1]; other images are normalized.
fn unit_range(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    if lo >= 0.0 && hi <= 1.0 {
        Ok(v.clone())
    } else {
        normalize(v)
    }
}

fn pair_id(moving: &Path, fixed: &Path) -> String {
    let stem = |p: &Path| p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    format!("{}_to_{}", stem(moving), stem(fixed))
}

fn segment(mut cfg: RunConfig, a: &SegmentArgs) -> Result<()> {
    if let Some(m) = a.method {
        cfg.segment.method = match m {
            MethodArg::Atlas => SegmentMethod::Atlas,
            MethodArg::MultiAtlas => SegmentMethod::MultiAtlas,
            MethodArg::Mtl => SegmentMethod::Mtl,
            MethodArg::Feat => SegmentMethod::Feat,
        };
    }
    if let Some(f) = a.selection_fraction {
        cfg.segment.selection_fraction = f;
        cfg.validate()?;
    }
    require_input(&a.target)?;
    if let Some(p) = &a.checkpoint {
        require_input(p)?;
    }
    let atlas_dir = a.atlases.clone().or(cfg.paths.atlases.clone()).ok_or_else(|| Error::Config("no atlas directory given".into()))?;
    let out_dir = a.out.clone().or(cfg.paths.output.clone()).ok_or_else(|| Error::Config("no output directory given".into()))?;
    let params = load_params(a.checkpoint.as_deref(), cfg.train.seed)?;
    let target = nifti::read_volume(&a.target)?;
    let entries: Vec<(Volume, LabelMap)> =
        io::read_dataset(&atlas_dir, None)?.into_iter().filter_map(|(_, s)| s.moving_labels.map(|l| (s.moving, l))).collect();
    let mut set = AtlasSet::new(entries, cfg.segment.selection_fraction)?;
    set.nlcc_window = cfg.segment.nlcc_window;

    let mut out = Outputs::default();
    let (image, labels) = (&set.entries[0].0, &set.entries[0].1);
    match cfg.segment.method {
        SegmentMethod::MultiAtlas => {
            let r = pipeline::multi_atlas_segment(&params, &set, &target)?;
            out.labels(out_dir.join("labels.nii"), &r.consensus)?;
            out.volume(out_dir.join("uncertainty.nii"), &r.uncertainty);
            let selection = serde_json::json!({ "selected": r.selected, "scores": r.scores });
            out.add(out_dir.join("selection.json"), serde_json::to_vec_pretty(&selection)?);
        }
        SegmentMethod::Atlas => {
            let (field, _) = pipeline::register(&params, image, &target)?;
            let prediction = crate::resample::warp_nearest(labels, &field)?;
            let back = pipeline::backproject_prediction(&field, &prediction)?;
            out.labels(out_dir.join("labels.nii"), &prediction)?;
            out.labels(out_dir.join("backprojected.nii"), &back.labels)?;
            out.volume(out_dir.join("uncertainty.nii"), &Volume::zeros(target.dims()));
        }
        SegmentMethod::Mtl | SegmentMethod::Feat => {
            let mode = if cfg.segment.method == SegmentMethod::Mtl { SegmentMode::Mtl } else { SegmentMode::Feat };
            let prediction = pipeline::segment_mtl(&params, (image, labels), &target, mode)?;
            out.labels(out_dir.join("labels.nii"), &prediction)?;
        }
    }
    out.commit()
}

fn invert(a: &InvertArgs) -> Result<()> {
    require_field(&a.field)?;
    let field = nifti::read_field(&a.field)?;
    let inv = invert_field(&field, a.iterations, a.tol);
    let report = serde_json::json!({
        "iterations": inv.iterations,
        "mean_residual": inv.mean_residual,
        "max_residual": inv.max_residual,
    });
    let mut out = Outputs::default();
    out.field(&a.out, &inv.field)?;
    out.commit()?;
    println!("{report}");
    Ok(())
}

fn evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> Result<()> {
    if let Some(p) = &a.checkpoint {
        require_input(p)?;
    }
    let dataset = a.dataset.clone().or(cfg.paths.dataset.clone()).ok_or_else(|| Error::Config("no dataset given".into()))?;
    let params = load_params(a.checkpoint.as_deref(), cfg.train.seed)?;
    let images: Vec<(String, Volume)> = io::read_dataset(&dataset, None)?.into_iter().map(|(n, s)| (n, s.moving)).collect();
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!("no images in {}", dataset.display())));
    }
    let rows: Vec<MetricRow> =
        pipeline::evaluate_simulated(&params, &images, &cfg.simulator, a.window)?.into_iter().map(|p| p.row).collect();
    let mut out = Outputs::default();
    out.csv(a.out.clone(), &rows)?;
    out.commit()
}

fn synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    if a.n == 0 || a.size == 0 {
        return Err(Error::InvalidArgument("synth needs n ≥ 1 and size ≥ 1".into()));
    }
    let samples = pipeline::make_synthetic_dataset(a.n, [a.size; 3], cfg.simulator.seed)?;
    let mut out = Outputs::default();
    for (i, s) in samples.iter().enumerate() {
        let (img, lab) = io::sample_paths(&a.out, i);
        out.volume(img, &s.moving);
        if let Some(l) = &s.moving_labels {
            out.labels(lab, l)?;
        }
    }
    out.commit()
}
