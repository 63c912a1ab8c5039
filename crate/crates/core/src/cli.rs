//! Command-line front end for the `cvq` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_from_video, save_view, TrainManifest, TrainingSet};
use crate::distortion::{write_variants, CompressionBackend, ExternalEncoder};
use crate::error::{Error, Result};
use crate::eval::{
    build_records, cross_dataset, default_lambda_grid, load_eval_manifest, run_protocol, validate_ratios, video_embedding,
    ManifestRow, ProtocolConfig, QualityRecord,
};
use crate::features::{load_features, FeatureSequence, MscnConfig, MscnEncoder, Scale};
use crate::loss::Label;
use crate::model::{load_checkpoint, SequenceModel};
use crate::trainer::{train, TrainConfig};
use crate::video::load_bundle;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub backend: CompressionBackend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub temporal_transforms: bool,
    pub mscn: MscnConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { temporal_transforms: true, mscn: MscnConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub n_splits: usize,
    pub ratios: [f64; 3],
    /// Clip length T used to partition videos at evaluation time.
    pub clip_len: usize,
    pub lambda_grid: Vec<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { n_splits: 100, ratios: [0.7, 0.1, 0.2], clip_len: 16, lambda_grid: default_lambda_grid() }
    }
}

/// Full run configuration. Loaded from JSON with unknown keys rejected;
/// command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: u64,
    pub log_level: String,
    pub workers: usize,
    pub generation: GenerationConfig,
    pub features: FeatureConfig,
    pub training: TrainConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            log_level: "info".into(),
            workers: 1,
            generation: GenerationConfig::default(),
            features: FeatureConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from_open(e, path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.log_level.parse::<log::LevelFilter>().is_err() {
            return bad("log_level must be one of off, error, warn, info, debug, trace");
        }
        let m = &self.features.mscn;
        if m.window < 3 || m.window % 2 == 0 || !(m.sigma > 0.0) || !(m.relative_stabilizer > 0.0) || !(1..=4).contains(&m.scales) {
            return bad("mscn: window must be odd and >= 3, sigma and stabilizer positive, scales in 1..=4");
        }
        self.training.validate()?;
        let e = &self.evaluation;
        validate_ratios(&e.ratios)?;
        if e.n_splits == 0 || e.clip_len == 0 {
            return bad("evaluation: n_splits and clip_len must be positive");
        }
        if e.lambda_grid.is_empty() || e.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("evaluation: lambda_grid must be non-empty with finite non-negative entries");
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cvq", version, about = "Contrastive video quality toolkit")]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write every admissible distortion variant of a source bundle.
    GenDistortions(GenArgs),
    /// Compute per-frame features for both scales of a bundle.
    PrecomputeFeatures(FeatureArgs),
    /// Contrastive training from a training manifest.
    Train(TrainArgs),
    /// Frozen video embeddings for a feature directory or an evaluation manifest.
    Extract(ExtractArgs),
    /// Repeated content-aware split evaluation.
    Evaluate(EvaluateArgs),
    /// Train the regressor on one dataset and test on another.
    CrossEvaluate(CrossArgs),
    /// Run the built-in invariant checks.
    SelfTest,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prefix for output files; defaults to the input file stem.
    #[arg(long)]
    pub id: Option<String>,
    /// External encoder command with {input}, {output}, {crf} and {lossless}
    /// placeholders; overrides the configured backend.
    #[arg(long)]
    pub encoder_cmd: Option<String>,
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub transforms: Option<Toggle>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest JSON.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory with `full_raw.cvqf` and `half_raw.cvqf`.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clip_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Frozen model; without it, per-video features are mean-pooled over frames.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub splits: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub clip_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CrossArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub clip_len: Option<usize>,
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on a domain error and 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(l) = &cli.log_level {
        cfg.log_level = l.clone();
    }
    cfg.training.seed = cfg.seed;
    cfg.training.workers = cfg.workers;
    match &cli.command {
        Command::PrecomputeFeatures(a) => {
            if let Some(t) = a.transforms {
                cfg.features.temporal_transforms = t == Toggle::On;
            }
        }
        Command::GenDistortions(a) => {
            if let Some(cmd) = &a.encoder_cmd {
                cfg.generation.backend = CompressionBackend::External(ExternalEncoder { command_template: cmd.clone(), work_dir: None });
            }
        }
        Command::Evaluate(a) => {
            if let Some(n) = a.splits {
                cfg.evaluation.n_splits = n;
            }
            if let Some(r) = &a.ratios {
                let r: [f64; 3] = r
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::InvalidConfig(format!("--ratios needs train,val,test; got {r:?}")))?;
                cfg.evaluation.ratios = r;
            }
            if let Some(t) = a.clip_len {
                cfg.evaluation.clip_len = t;
            }
        }
        Command::Extract(ExtractArgs { clip_len: Some(t), .. }) | Command::CrossEvaluate(CrossArgs { clip_len: Some(t), .. }) => {
            cfg.evaluation.clip_len = *t;
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let level = cfg.log_level.parse().unwrap_or(log::LevelFilter::Info);
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| execute(&cli.command, &cfg))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::from_write(e, dir))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::from_write(e, path))
}

/// Mean of each feature over frames, full then half scale.
fn pooled_features(full: &FeatureSequence, half: &FeatureSequence) -> Vec<f64> {
    let mean = |s: &FeatureSequence| -> Vec<f64> {
        (0..s.dim()).map(|j| (0..s.frames()).map(|t| s.row(t)[j] as f64).sum::<f64>() / s.frames() as f64).collect()
    };
    let mut v = mean(full);
    v.extend(mean(half));
    v
}

fn records(manifest: &Path, ckpt: Option<&Path>, clip_len: usize) -> Result<Vec<QualityRecord>> {
    let rows = load_eval_manifest(manifest)?;
    match ckpt {
        Some(p) => build_records(&rows, &load_checkpoint(p)?, clip_len),
        None => rows.iter().map(pooled_record).collect(),
    }
}

fn pooled_record(r: &ManifestRow) -> Result<QualityRecord> {
    let full = load_features(&r.feature_path_full, Scale::Full)?;
    let half = load_features(&r.feature_path_half, Scale::Half)?;
    Ok(QualityRecord {
        video_id: r.video_id.clone(),
        content_id: r.content_id.clone(),
        mos: r.mos,
        embedding: pooled_features(&full, &half),
    })
}

#[derive(Serialize)]
struct CrossReport<'a> {
    train_manifest: &'a Path,
    test_manifest: &'a Path,
    #[serde(flatten)]
    result: crate::eval::CrossResult,
}

fn execute(command: &Command, cfg: &AppConfig) -> Result<()> {
    match command {
        Command::GenDistortions(a) => {
            let source = load_bundle(&a.input)?;
            let id = a
                .id
                .clone()
                .or_else(|| a.input.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "source".into());
            let manifest = write_variants(&source, &id, &cfg.generation.backend, &a.out)?;
            manifest.save(a.out.join(format!("{id}_manifest.json")))?;
            println!("wrote {} variants to {}", manifest.entries.len(), a.out.display());
        }
        Command::PrecomputeFeatures(a) => {
            let video = load_bundle(&a.input)?;
            let encoder = MscnEncoder::new(cfg.features.mscn.clone());
            let id = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let sample = sample_from_video(id, Label::Ugc(0), &video, &encoder, cfg.features.temporal_transforms)?;
            save_view(&sample.full, Scale::Full, &a.out)?;
            save_view(&sample.half, Scale::Half, &a.out)?;
            println!("wrote features for {} frames to {}", video.num_frames(), a.out.display());
        }
        Command::Train(a) => {
            let tc = &cfg.training;
            let samples = TrainManifest::load(&a.data)?.load_samples()?;
            let set = TrainingSet::new(samples, tc.crop_len, tc.temporal_transform)?;
            let out = train(&set, tc, Some(&a.out))?;
            let last = out.trajectory.last().map(|s| s.loss).unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {last:.6}, checkpoint {}", out.trajectory.len(), a.out.join("model.cvqm").display());
        }
        Command::Extract(a) => {
            let model: SequenceModel = load_checkpoint(&a.ckpt)?;
            let t = cfg.evaluation.clip_len;
            if let Some(dir) = &a.features {
                let full = load_features(dir.join("full_raw.cvqf"), Scale::Full)?;
                let half = load_features(dir.join("half_raw.cvqf"), Scale::Half)?;
                write_json(&video_embedding(&model, &full, &half, t)?, &a.out)?;
            } else if let Some(m) = &a.manifest {
                write_json(&build_records(&load_eval_manifest(m)?, &model, t)?, &a.out)?;
            }
            println!("wrote {}", a.out.display());
        }
        Command::Evaluate(a) => {
            let recs = records(&a.manifest, a.ckpt.as_deref(), cfg.evaluation.clip_len)?;
            let pc = ProtocolConfig {
                n_splits: cfg.evaluation.n_splits,
                ratios: cfg.evaluation.ratios,
                seed: cfg.seed,
                lambda_grid: cfg.evaluation.lambda_grid.clone(),
            };
            let report = run_protocol(&recs, &pc)?;
            report.save(&a.report)?;
            println!(
                "{} splits: median SROCC {:.4}, median PLCC {:.4}",
                report.splits.len(),
                report.median_srocc,
                report.median_plcc
            );
        }
        Command::CrossEvaluate(a) => {
            let t = cfg.evaluation.clip_len;
            let train_recs = records(&a.train, a.ckpt.as_deref(), t)?;
            let test_recs = records(&a.test, a.ckpt.as_deref(), t)?;
            let result = cross_dataset(&train_recs, &test_recs, &cfg.evaluation.lambda_grid, cfg.seed)?;
            println!("cross-dataset SROCC {:.4}, PLCC {:.4} (lambda {})", result.srocc, result.plcc, result.lambda);
            if let Some(p) = &a.report {
                write_json(&CrossReport { train_manifest: &a.train, test_manifest: &a.test, result }, p)?;
            }
        }
        Command::SelfTest => {
            let checks = crate::selftest::run_all();
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::InvalidConfig(format!("{failed} self-test check(s) failed")));
            }
        }
    }
    Ok(())
}
