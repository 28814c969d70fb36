//! Command-line front end: `synth`, `train`, `segment`, `evaluate`, `plots`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::{dab_concentration, threshold_dab, StainMatrix};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{generate_synthetic, split_manifest, DatasetManifest, Image, Split, SyntheticConfig};
use crate::error::CaclError;
use crate::evaluate::{default_thresholds, evaluate_cacl, evaluate_color_deconv, EvalSet};
use crate::io::atomic_write;
use crate::metrics::MetricsReport;
use crate::plot::save_bar_chart;
use crate::segmentation::{dilate, segment_images, SegmentationMask};
use crate::training::{train, LoadedData};

pub const DATA_DIR_ENV: &str = "CACL_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "cacl", version, about = "Dual-codebook VQ autoencoder for weakly supervised stain segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic diffuse-stain dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Write masks for images or a manifest split.
    Segment(SegmentArgs),
    /// Score a checkpoint or the colour-deconvolution baseline on a split.
    Evaluate(EvaluateArgs),
    /// Render bar charts from JSON reports.
    Plots(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Cacl,
    Colordeconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory [default: $CACL_DATA_DIR]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub n_pos: usize,
    #[arg(long, default_value_t = 300)]
    pub n_neg: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train/val/test fractions, comma separated.
    #[arg(long, default_value = "0.6666666666666666,0.16666666666666666,0.16666666666666669")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Key-value config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest [default: $CACL_DATA_DIR/manifest.tsv]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for checkpoints and the log.
    #[arg(long, default_value = "runs/cacl")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Override any config key, e.g. `--set w_map=0.25` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long, value_enum, default_value_t = Method::Cacl)]
    pub method: Method,
    /// Trained checkpoint (method cacl).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// DAB concentration threshold (method colordeconv).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Images to segment; alternatively use --manifest.
    #[arg(long = "input", num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Dilation radius applied to the masks.
    #[arg(long, default_value_t = 0)]
    pub dilate: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write mask-over-image overlays.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum, default_value_t = Method::Cacl)]
    pub method: Method,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest [default: $CACL_DATA_DIR/manifest.tsv]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Dilation radius; nonzero reports as `cacl+morph`.
    #[arg(long, default_value_t = 0)]
    pub dilate: usize,
    /// Fixed DAB threshold; without it the baseline sweeps thresholds.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Score BCE of the baseline on sigmoid probabilities with this scale.
    #[arg(long)]
    pub soft_bce_scale: Option<f64>,
    /// Output directory for `<method>_report.tsv` and `.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// JSON reports written by `evaluate`.
    #[arg(long = "report", required = true, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(CaclError),
}

impl From<CaclError> for Failure {
    fn from(e: CaclError) -> Self {
        match e {
            CaclError::Config(_) | CaclError::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

fn manifest_path(explicit: Option<PathBuf>) -> CliResult<PathBuf> {
    match explicit.or_else(|| data_dir().map(|d| d.join("manifest.tsv"))) {
        Some(p) => Ok(p),
        None => usage(format!("--manifest is required when {DATA_DIR_ENV} is unset")),
    }
}

/// Parses and runs `argv` (including the program name); returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Segment(a) => segment(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Plots(a) => plots(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn parse_fractions(s: &str) -> CliResult<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("--split: cannot parse `{s}`")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => usage("--split takes three comma-separated fractions"),
    }
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let out = match a.out.or_else(data_dir) {
        Some(o) => o,
        None => return usage(format!("--out is required when {DATA_DIR_ENV} is unset")),
    };
    let fractions = parse_fractions(&a.split)?;
    let config = SyntheticConfig { image_size: a.size, n_positive: a.n_pos, n_negative: a.n_neg, seed: a.seed, ..Default::default() };
    // Validate fractions before writing any image.
    split_manifest(&DatasetManifest { root: out.clone(), records: Vec::new() }, fractions, a.seed)?;
    let manifest = generate_synthetic(&config, &out)?;
    let manifest = split_manifest(&manifest, fractions, a.seed)?;
    manifest.save(&out.join("manifest.tsv"))?;
    for split in [Split::Train, Split::Val, Split::Test] {
        eprintln!("{split}: {} records", manifest.split(split).count());
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let flags = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("steps", a.steps.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("checkpoint_interval", a.checkpoint_interval.map(|v| v.to_string())),
        ("eval_interval", a.eval_interval.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for o in &a.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return usage(format!("--set expects KEY=VALUE, got `{o}`"));
        };
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let cfg = train_config(&a)?;
    let manifest = DatasetManifest::load(&manifest_path(a.manifest.clone())?)?;
    let data = LoadedData::from_manifest(&manifest)?;
    let interval = cfg.eval_interval.max(1);
    let quiet = a.quiet;
    let outcome = train(&cfg, &data, &a.out, a.resume.as_deref(), |r| {
        if !quiet && r.step % interval == 0 {
            eprintln!(
                "step {} recon {:.5} commit {:.5} map {:.4} cls {:.4} class-use pos {:.3} neg {:.3}",
                r.step, r.reconstruction, r.commitment, r.mapping, r.classifier, r.class_usage_pos, r.class_usage_neg
            );
        }
    })?;
    atomic_write(&a.out.join("config.txt"), outcome.trainer.config.to_text().as_bytes())?;
    if let Some(last) = outcome.checkpoints.last() {
        eprintln!("final checkpoint: {}", last.display());
    }
    for (step, d) in &outcome.validation {
        eprintln!("val dice @ {step}: {d:.4}");
    }
    Ok(())
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn segment(a: SegmentArgs) -> CliResult<()> {
    let inputs: Vec<PathBuf> = if !a.inputs.is_empty() {
        a.inputs.clone()
    } else if let Some(m) = a.manifest.clone().or_else(|| data_dir().map(|d| d.join("manifest.tsv"))) {
        let manifest = DatasetManifest::load(&m)?;
        manifest.split(a.split.into()).map(|r| manifest.resolve(&r.path)).collect()
    } else {
        return usage("give --input images or a --manifest");
    };
    let masks: Vec<SegmentationMask> = match a.method {
        Method::Cacl => {
            let Some(ck) = &a.checkpoint else { return usage("--method cacl needs --checkpoint") };
            let trainer = Checkpoint::load(ck)?.restore()?;
            let mut out = Vec::new();
            for chunk in inputs.chunks(32) {
                let images = chunk.iter().map(|p| Image::load(p)).collect::<crate::Result<Vec<_>>>()?;
                let refs: Vec<&Image> = images.iter().collect();
                out.extend(segment_images(&trainer.autoencoder, &trainer.codebook, &refs, a.dilate)?);
            }
            out
        }
        Method::Colordeconv => {
            let Some(t) = a.threshold else { return usage("--method colordeconv needs --threshold") };
            let stains = StainMatrix::h_dab();
            inputs
                .iter()
                .map(|p| {
                    let img = Image::load(p)?;
                    let m = threshold_dab(&dab_concentration(&img, &stains), img.height, img.width, t)?;
                    Ok(dilate(&m, a.dilate))
                })
                .collect::<crate::Result<_>>()?
        }
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(CaclError::Io { path: a.out.clone(), source: e }))?;
    for (p, m) in inputs.iter().zip(&masks) {
        let stem = stem_of(p);
        m.save(&a.out.join(format!("{stem}_mask.png")))?;
        if a.overlay {
            m.overlay(&Image::load(p)?, 0.5)?.save(&a.out.join(format!("{stem}_overlay.png")))?;
        }
    }
    eprintln!("wrote {} masks to {}", masks.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let manifest = DatasetManifest::load(&manifest_path(a.manifest.clone())?)?;
    let set = EvalSet::load(&manifest, a.split.into())?;
    let report = match a.method {
        Method::Cacl => {
            let Some(ck) = &a.checkpoint else { return usage("--method cacl needs --checkpoint") };
            let trainer = Checkpoint::load(ck)?.restore()?;
            let mut config = trainer.config.pairs();
            config.push(("checkpoint".into(), ck.display().to_string()));
            evaluate_cacl(&trainer.autoencoder, &trainer.codebook, &set, a.dilate, config)?
        }
        Method::Colordeconv => {
            let thresholds = match a.threshold {
                Some(t) => vec![t],
                None => default_thresholds(),
            };
            evaluate_color_deconv(&set, &StainMatrix::h_dab(), &thresholds, a.soft_bce_scale)?.0
        }
    };
    if !report.errors.is_empty() {
        eprintln!("warning: {} records skipped", report.errors.len());
    }
    write_report(&report, &a.out)?;
    let g = &report.aggregate;
    println!(
        "{}\tdice {:.4}\tprecision {:.4}\trecall {:.4}\tbce {:.4}\tn {}",
        report.method, g.dice, g.precision, g.recall, g.bce, g.count
    );
    Ok(())
}

pub fn write_report(report: &MetricsReport, out: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(out).map_err(crate::error::io_err(out))?;
    atomic_write(&out.join(format!("{}_report.tsv", report.method)), report.to_text().as_bytes())?;
    let json = serde_json::to_vec_pretty(report).map_err(|e| CaclError::Format { what: "report", detail: e.to_string() })?;
    atomic_write(&out.join(format!("{}_report.json", report.method)), &json)
}

fn plots(a: PlotArgs) -> CliResult<()> {
    let mut reports = Vec::new();
    for p in &a.reports {
        let bytes = std::fs::read(p).map_err(|e| Failure::Runtime(CaclError::Io { path: p.clone(), source: e }))?;
        let r: MetricsReport = serde_json::from_slice(&bytes)
            .map_err(|e| Failure::Runtime(CaclError::Format { what: "report", detail: format!("{}: {e}", p.display()) }))?;
        reports.push(r);
    }
    save_bar_chart(&reports, &a.out)?;
    for (i, r) in reports.iter().enumerate() {
        eprintln!("bar {i}: {}", r.method);
    }
    Ok(())
}
