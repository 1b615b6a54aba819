//! srfb: train a small super-resolution CNN whose loss watches residual
//! structure through a designed discriminator filter bank, design such banks
//! standalone, score models, and render banks as images.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or runtime
//! error. All diagnostics go to standard error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use srfb::design::DesignedBank;
use srfb::gram::accumulate_gram;
use srfb::metrics::evaluate_pair;
use srfb::raster::Residual;
use srfb::seed::{derive_seed, streams};
use srfb::train::{design_round, load_image_dir, run_training, sample_design_set, super_resolve};
use srfb::{FilterBank, Image, ModelParams, TrainingConfig};

#[derive(Parser)]
#[command(
    name = "srfb",
    version,
    about = "Super-resolution CNN training with a discriminative filter-bank loss"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes a manifest, history CSV, checkpoints, and banks
    Train(TrainArgs),
    /// Design a filter bank from model residuals or precomputed residual images
    DesignFilters(DesignArgs),
    /// Score a model (or the ground truth itself) over a directory of images
    Evaluate(EvalArgs),
    /// Render a bank's filters as one PNG grid per channel
    ExportFilters(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file; explicit flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of high-resolution training PNGs
    #[arg(long)]
    hr_dir: Option<PathBuf>,
    /// Directory for run artifacts
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Downscaling factor (2, 3, or 4)
    #[arg(long)]
    scale: Option<usize>,
    /// Weight of the filter-bank loss term
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Mutual-coherence bound for designed filters
    #[arg(long)]
    epsilon: Option<f64>,
    /// Side length of the designed filters
    #[arg(long)]
    k: Option<usize>,
    /// Filters designed per channel
    #[arg(long)]
    filters: Option<usize>,
    /// Images sampled for each design round
    #[arg(long)]
    design_samples: Option<usize>,
    /// Epochs trained between bank designs
    #[arg(long)]
    design_interval: Option<usize>,
    /// Design images larger than this are cropped to it
    #[arg(long)]
    design_cap: Option<usize>,
    /// Total epochs (early stopping may end the run sooner)
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// Side length of the random training crops
    #[arg(long)]
    crop: Option<usize>,
    /// Channels of the first hidden layer
    #[arg(long)]
    width1: Option<usize>,
    /// Channels of the second hidden layer
    #[arg(long)]
    width2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs without >0.01 dB validation PSNR improvement before stopping
    #[arg(long)]
    patience: Option<usize>,
    /// Zero the seconds column so outputs are byte-reproducible
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct DesignArgs {
    /// Model checkpoint whose residuals drive the design (with --hr-dir)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory of high-resolution PNGs (with --model)
    #[arg(long)]
    hr_dir: Option<PathBuf>,
    /// Downscaling factor used to form residuals
    #[arg(long, default_value_t = 2)]
    scale: usize,
    /// Directory of residual PNGs, offset-encoded: mid-gray (0.5) = zero residual
    #[arg(long)]
    residual_dir: Option<PathBuf>,
    /// Side length of the designed filters
    #[arg(long, default_value_t = 7)]
    k: usize,
    /// Filters designed per channel
    #[arg(long, default_value_t = 32)]
    filters: usize,
    /// Mutual-coherence bound
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images sampled from the input directory
    #[arg(long, default_value_t = 300)]
    design_samples: usize,
    /// Images larger than this are cropped to it
    #[arg(long, default_value_t = 256)]
    design_cap: usize,
    /// Output bank file
    #[arg(long, default_value = "bank.dfbk")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint to score
    #[arg(long)]
    model: Option<PathBuf>,
    /// Score the unmodified ground truth against itself instead of a model
    #[arg(long)]
    identity: bool,
    /// Directory of reference PNGs; images are cropped to a scale multiple
    #[arg(long)]
    hr_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    /// Output CSV path (standard output when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Bank file to render
    #[arg(long)]
    bank: PathBuf,
    /// Directory for filters_channel_<c>.png files
    #[arg(long)]
    out_dir: PathBuf,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(e: srfb::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

const CONFIG_KEYS: &[&str] = &[
    "scale",
    "alpha",
    "epsilon",
    "k",
    "filters",
    "design_samples",
    "design_interval",
    "design_cap",
    "epochs",
    "batch_size",
    "lr",
    "crop",
    "width1",
    "width2",
    "seed",
    "patience",
    "deterministic",
];

/// Surface a config validation error as a message naming the offending flag.
fn usage_from_validation(e: srfb::Error) -> CliError {
    use srfb::Error;
    let msg = match &e {
        Error::BadScale(s) => format!("--scale must be 2, 3, or 4 (got {s})"),
        Error::NegativeAlpha(a) => format!("--alpha must be non-negative (got {a})"),
        Error::TooManyFilters { requested, max } => {
            format!("--filters asks for {requested}, but at most {max} fit (k*k - 1)")
        }
        Error::Format(m) => {
            let head = m.split_whitespace().next().unwrap_or("");
            if CONFIG_KEYS.contains(&head) {
                format!("--{}{}", head.replace('_', "-"), &m[head.len()..])
            } else {
                m.clone()
            }
        }
        other => other.to_string(),
    };
    CliError::Usage(msg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 2u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::DesignFilters(a) => cmd_design_filters(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::ExportFilters(a) => cmd_export_filters(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = TrainingConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read --config {}: {e}", path.display())))?;
        cfg.apply_config_text(&text).map_err(usage_from_validation)?;
    }
    if let Some(v) = a.hr_dir {
        cfg.hr_dir = v;
    }
    if let Some(v) = a.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = a.scale {
        cfg.scale = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.filters {
        cfg.filters = v;
    }
    if let Some(v) = a.design_samples {
        cfg.design_samples = v;
    }
    if let Some(v) = a.design_interval {
        cfg.design_interval = v;
    }
    if let Some(v) = a.design_cap {
        cfg.design_cap = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.crop {
        cfg.crop = v;
    }
    if let Some(v) = a.width1 {
        cfg.width1 = v;
    }
    if let Some(v) = a.width2 {
        cfg.width2 = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if a.deterministic {
        cfg.deterministic = true;
    }
    if cfg.hr_dir.as_os_str().is_empty() {
        return Err(usage("--hr-dir is required"));
    }
    if cfg.out_dir.as_os_str().is_empty() {
        return Err(usage("--out-dir is required"));
    }
    cfg.validate().map_err(usage_from_validation)?;
    run_training(&cfg).map_err(runtime)?;
    Ok(())
}

fn print_designed(designed: &DesignedBank) {
    for (c, objectives) in designed.objectives.iter().enumerate() {
        for (m, obj) in objectives.iter().enumerate() {
            println!("{c} {m} {obj:.9e}");
        }
    }
    if designed.fallback_filters > 0 {
        eprintln!(
            "warning: {} filter(s) used the seeded feasible fallback (residuals carried no usable energy)",
            designed.fallback_filters
        );
    }
}

fn cmd_design_filters(a: DesignArgs) -> Result<(), CliError> {
    let from_model = a.model.is_some() || a.hr_dir.is_some();
    let from_residuals = a.residual_dir.is_some();
    if from_model == from_residuals {
        return Err(usage(
            "pass either --model with --hr-dir, or --residual-dir, but not both",
        ));
    }

    let cfg = TrainingConfig {
        scale: a.scale,
        epsilon: a.epsilon,
        k: a.k,
        filters: a.filters,
        design_samples: a.design_samples,
        design_cap: a.design_cap,
        seed: a.seed,
        ..TrainingConfig::default()
    };
    cfg.validate().map_err(usage_from_validation)?;

    let designed = if from_model {
        let (model, hr_dir) = match (&a.model, &a.hr_dir) {
            (Some(m), Some(h)) => (m, h),
            _ => return Err(usage("--model and --hr-dir must be passed together")),
        };
        let params = ModelParams::load(model).map_err(runtime)?;
        let named = load_image_dir(hr_dir).map_err(runtime)?;
        if named.is_empty() {
            return Err(CliError::Runtime(format!(
                "{} holds no readable PNG images",
                hr_dir.display()
            )));
        }
        let images: Vec<Image> = named.into_iter().map(|(_, img)| img).collect();
        let count = cfg.design_samples.min(images.len());
        let set = sample_design_set(
            &images,
            count,
            derive_seed(cfg.seed, streams::DESIGN_SET, 0),
        )
        .map_err(runtime)?;
        design_round(&params, &set, &cfg, 0).map_err(runtime)?
    } else {
        let dir = a.residual_dir.as_ref().expect("checked above");
        let named = load_image_dir(dir).map_err(runtime)?;
        if named.is_empty() {
            return Err(CliError::Runtime(format!(
                "{} holds no readable PNG images",
                dir.display()
            )));
        }
        let images: Vec<Image> = named.into_iter().map(|(_, img)| img).collect();
        let count = cfg.design_samples.min(images.len());
        let set = sample_design_set(
            &images,
            count,
            derive_seed(cfg.seed, streams::DESIGN_SET, 0),
        )
        .map_err(runtime)?;
        let mut residuals = Vec::with_capacity(set.len());
        for img in &set {
            let th = img.height().min(cfg.design_cap);
            let tw = img.width().min(cfg.design_cap);
            let img = img.crop(0, 0, th, tw).map_err(runtime)?;
            // Mid-gray (pixel 128, the 8-bit rounding of 0.5) decodes to an
            // exactly zero residual.
            let zero = 128.0f32 / 255.0;
            let data: Vec<f32> = img.data().iter().map(|v| v - zero).collect();
            residuals.push(
                Residual::new(img.height(), img.width(), img.channels(), data)
                    .map_err(runtime)?,
            );
        }
        let grams = accumulate_gram(&residuals, cfg.k).map_err(runtime)?;
        srfb::design::design_filter_bank(
            &grams,
            cfg.filters,
            cfg.epsilon,
            derive_seed(cfg.seed, streams::BANK, 0),
        )
        .map_err(runtime)?
    };

    designed.bank.save(&a.out).map_err(runtime)?;
    print_designed(&designed);
    Ok(())
}

fn format_metric(v: f64) -> String {
    format!("{v:.6}")
}

fn mean_of_finite(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

fn cmd_evaluate(a: EvalArgs) -> Result<(), CliError> {
    if a.identity == a.model.is_some() {
        return Err(usage("pass exactly one of --model or --identity"));
    }
    if !(2..=4).contains(&a.scale) {
        return Err(usage(format!("--scale must be 2, 3, or 4 (got {})", a.scale)));
    }
    let params = match &a.model {
        Some(path) => Some(ModelParams::load(path).map_err(runtime)?),
        None => None,
    };
    let named = load_image_dir(&a.hr_dir).map_err(runtime)?;
    if named.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} holds no readable PNG images",
            a.hr_dir.display()
        )));
    }

    let mut csv = String::from("name,psnr,ssim,hf_psnr\n");
    let mut cols: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (name, img) in &named {
        let report = match &params {
            None => evaluate_pair(img, img).map_err(runtime)?,
            Some(p) => {
                let th = img.height() - img.height() % a.scale;
                let tw = img.width() - img.width() % a.scale;
                let reference = img.crop(0, 0, th, tw).map_err(runtime)?;
                let restored = super_resolve(p, &reference, a.scale).map_err(runtime)?;
                evaluate_pair(&reference, &restored).map_err(runtime)?
            }
        };
        cols[0].push(report.psnr);
        cols[1].push(report.ssim);
        cols[2].push(report.hf_psnr);
        csv.push_str(&format!(
            "{name},{},{},{}\n",
            format_metric(report.psnr),
            format_metric(report.ssim),
            format_metric(report.hf_psnr)
        ));
    }
    csv.push_str(&format!(
        "MEAN,{},{},{}\n",
        format_metric(mean_of_finite(&cols[0])),
        format_metric(mean_of_finite(&cols[1])),
        format_metric(mean_of_finite(&cols[2]))
    ));

    match &a.out {
        Some(path) => fs::write(path, csv)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

const EXPORT_SCALE: usize = 16;

/// Tile one channel's filters into a grid image: row-major filter order,
/// each coefficient a 16x16 block, 1-pixel black separators and border,
/// each filter min-max normalized independently (constant filters show as
/// mid-gray).
fn render_channel_grid(bank: &FilterBank, channel: usize) -> Image {
    let m = bank.filters_per_channel();
    let k = bank.k();
    let cols = (m as f64).sqrt().ceil() as usize;
    let rows = m.div_ceil(cols);
    let tile = k * EXPORT_SCALE;
    let width = cols * tile + cols + 1;
    let height = rows * tile + rows + 1;
    let mut out = Image::zeros(height, width, 1);
    for idx in 0..m {
        let (gy, gx) = (idx / cols, idx % cols);
        let f = bank.filter(channel, idx);
        let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let y0 = 1 + gy * (tile + 1);
        let x0 = 1 + gx * (tile + 1);
        for fy in 0..k {
            for fx in 0..k {
                let v = if hi > lo {
                    ((f[fy * k + fx] - lo) / (hi - lo)) as f32
                } else {
                    0.5
                };
                for py in 0..EXPORT_SCALE {
                    for px in 0..EXPORT_SCALE {
                        out.set(
                            y0 + fy * EXPORT_SCALE + py,
                            x0 + fx * EXPORT_SCALE + px,
                            0,
                            v,
                        );
                    }
                }
            }
        }
    }
    out
}

fn cmd_export_filters(a: ExportArgs) -> Result<(), CliError> {
    let bank = FilterBank::load(&a.bank).map_err(runtime)?;
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", a.out_dir.display())))?;
    for c in 0..bank.channels() {
        let grid = render_channel_grid(&bank, c);
        let path: &Path = &a.out_dir.join(format!("filters_channel_{c}.png"));
        grid.write_png(path).map_err(runtime)?;
    }
    Ok(())
}
