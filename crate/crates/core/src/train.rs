//! Training orchestration: dataset splitting, the alternating
//! design-then-train schedule, early stopping, and run artifacts (manifest,
//! history CSV, bank snapshots, checkpoints).
//!
//! One run proceeds in rounds. At the start of round r (epoch r*e + 1) a
//! fresh filter bank is designed from the current model's residuals on a
//! random sample of training images; the next e epochs train under
//! pixel + alpha * filter loss against that bank. Validation metrics are
//! computed every epoch on held-out images, and early stopping watches the
//! validation PSNR.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::design::{design_filter_bank, DesignedBank};
use crate::error::{Error, Result};
use crate::filterbank::{check_feasibility, FilterBank};
use crate::gram::accumulate_gram;
use crate::metrics::evaluate_pair;
use crate::net::{adam_step, forward, loss_and_grads, AdamState, ModelParams};
use crate::raster::{residual, Image};
use crate::resample::{downsample, upsample};
use crate::seed::{derive_seed, streams};

pub const HISTORY_HEADER: &str =
    "epoch,round,loss_pixel,loss_filter,alpha,val_psnr,val_ssim,val_hf_psnr,seconds";

const MIN_DELTA_DB: f64 = 0.01;

/// Fully resolved settings of one training run. Serializes to and from a flat
/// key=value manifest, so a finished run's `manifest.txt` can be replayed as a
/// config file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub hr_dir: PathBuf,
    pub out_dir: PathBuf,
    pub scale: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub k: usize,
    pub filters: usize,
    pub design_samples: usize,
    pub design_interval: usize,
    pub design_cap: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub crop: usize,
    pub width1: usize,
    pub width2: usize,
    pub seed: u64,
    pub patience: usize,
    pub deterministic: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hr_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            scale: 2,
            alpha: 1.0,
            epsilon: 0.05,
            k: 7,
            filters: 32,
            design_samples: 300,
            design_interval: 5,
            design_cap: 256,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            crop: 48,
            width1: 64,
            width2: 32,
            seed: 0,
            patience: 10,
            deterministic: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::BadScale(self.scale));
        }
        if self.alpha < 0.0 {
            return Err(Error::NegativeAlpha(self.alpha));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Format("epsilon must lie in (0, 1)".to_string()));
        }
        if self.k < 2 {
            return Err(Error::Format("k must be at least 2".to_string()));
        }
        if self.filters == 0 {
            return Err(Error::Format("filters must be at least 1".to_string()));
        }
        let max_filters = self.k * self.k - 1;
        if self.filters > max_filters {
            return Err(Error::TooManyFilters {
                requested: self.filters,
                max: max_filters,
            });
        }
        if self.design_samples == 0 {
            return Err(Error::Format("design_samples must be at least 1".to_string()));
        }
        if self.design_interval == 0 {
            return Err(Error::Format("design_interval must be at least 1".to_string()));
        }
        if self.design_cap < self.scale {
            return Err(Error::Format(
                "design_cap must be at least the scale factor".to_string(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Format("batch_size must be at least 1".to_string()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Format("lr must be positive".to_string()));
        }
        if self.crop < self.scale {
            return Err(Error::Format(
                "crop must be at least the scale factor".to_string(),
            ));
        }
        if self.width1 == 0 || self.width2 == 0 {
            return Err(Error::Format("layer widths must be at least 1".to_string()));
        }
        if self.patience == 0 {
            return Err(Error::Format("patience must be at least 1".to_string()));
        }
        Ok(())
    }

    /// The manifest text: one key=value line per field, fixed order.
    pub fn manifest_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "hr_dir={}", self.hr_dir.display());
        let _ = writeln!(s, "out_dir={}", self.out_dir.display());
        let _ = writeln!(s, "scale={}", self.scale);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "epsilon={}", self.epsilon);
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "filters={}", self.filters);
        let _ = writeln!(s, "design_samples={}", self.design_samples);
        let _ = writeln!(s, "design_interval={}", self.design_interval);
        let _ = writeln!(s, "design_cap={}", self.design_cap);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "crop={}", self.crop);
        let _ = writeln!(s, "width1={}", self.width1);
        let _ = writeln!(s, "width2={}", self.width2);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "deterministic={}", self.deterministic);
        s
    }

    /// Apply one key=value override. Unknown keys are hard errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Format(format!("config key '{key}' has unparseable value '{value}'"))
            })
        }
        match key {
            "hr_dir" => self.hr_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "scale" => self.scale = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "filters" => self.filters = parse(key, value)?,
            "design_samples" => self.design_samples = parse(key, value)?,
            "design_interval" => self.design_interval = parse(key, value)?,
            "design_cap" => self.design_cap = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "width1" => self.width1 = parse(key, value)?,
            "width2" => self.width2 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            _ => return Err(Error::Format(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Apply a whole config file (key=value lines, # comments, blank lines).
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("config line {} is not key=value", lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// One history row: training losses of the epoch and validation metrics after
/// it. `round` is the bank-design round the epoch trained under.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub round: usize,
    pub loss_pixel: f64,
    pub loss_filter: f64,
    pub alpha: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub val_hf_psnr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:.9e},{:.9e},{},{:.6},{:.6},{:.6},{:.3}",
                r.epoch,
                r.round,
                r.loss_pixel,
                r.loss_filter,
                r.alpha,
                r.val_psnr,
                r.val_ssim,
                r.val_hf_psnr,
                r.seconds
            );
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn fnv1a64(s: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Deterministic 90/10 split by hashed name order: indices into `names`,
/// (train, val). The val set holds max(1, n/10) images; the partition depends
/// only on the name set, not on input order.
pub fn split_dataset(names: &[String]) -> Result<(Vec<usize>, Vec<usize>)> {
    if names.len() < 2 {
        return Err(Error::EmptyDataset(
            "need at least 2 images to form a train/val split".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| {
        (fnv1a64(&names[a]), &names[a]).cmp(&(fnv1a64(&names[b]), &names[b]))
    });
    let val_count = (names.len() / 10).max(1);
    let val = order[..val_count].to_vec();
    let train = order[val_count..].to_vec();
    Ok((train, val))
}

/// Uniform sample of `count` items without replacement, deterministic per seed.
pub fn sample_design_set<T: Clone>(items: &[T], count: usize, seed: u64) -> Result<Vec<T>> {
    if count > items.len() {
        return Err(Error::SampleTooLarge {
            requested: count,
            available: items.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..items.len()).collect();
    for i in 0..count {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    Ok(idx[..count].iter().map(|&i| items[i].clone()).collect())
}

/// Crop an image from the top-left so both sides are at most `cap` and
/// divisible by `scale`.
fn cap_image(img: &Image, cap: usize, scale: usize) -> Result<Image> {
    let th = img.height().min(cap);
    let tw = img.width().min(cap);
    let th = th - th % scale;
    let tw = tw - tw % scale;
    if th == 0 || tw == 0 {
        return Err(Error::ImageTooSmall {
            height: img.height(),
            width: img.width(),
            min: scale,
        });
    }
    if th == img.height() && tw == img.width() {
        return Ok(img.clone());
    }
    img.crop(0, 0, th, tw)
}

/// Degrade and restore one image: downsample by the scale factor, bicubically
/// upsample back, run the network, and clamp to the unit range.
pub fn super_resolve(params: &ModelParams, hr: &Image, scale: usize) -> Result<Image> {
    let x = upsample(&downsample(hr, scale)?, scale)?;
    let mut out = forward(params, &x)?;
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Design a bank from the current model's residuals on the given images.
/// Images are capped to `design_cap`; predictions are NOT clamped, so the
/// residuals are exactly what the training loss sees. `round` isolates the
/// solver seeding of successive rounds.
pub fn design_round(
    params: &ModelParams,
    design_set: &[Image],
    cfg: &TrainingConfig,
    round: usize,
) -> Result<DesignedBank> {
    let mut residuals = Vec::with_capacity(design_set.len());
    for img in design_set {
        let capped = cap_image(img, cfg.design_cap, cfg.scale)?;
        let x = upsample(&downsample(&capped, cfg.scale)?, cfg.scale)?;
        let yhat = forward(params, &x)?;
        residuals.push(residual(&capped, &yhat)?);
    }
    let grams = accumulate_gram(&residuals, cfg.k)?;
    design_filter_bank(
        &grams,
        cfg.filters,
        cfg.epsilon,
        derive_seed(cfg.seed, streams::BANK, round as u64),
    )
}

/// True when the validation PSNR trace has gone `patience` consecutive epochs
/// without improving on its best value by more than 0.01 dB.
pub fn should_stop(val_psnr: &[f64], patience: usize) -> bool {
    let mut best = f64::NEG_INFINITY;
    let mut since_improvement = 0usize;
    for &v in val_psnr {
        if v > best + MIN_DELTA_DB {
            best = v;
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
    }
    patience > 0 && since_improvement >= patience
}

/// Everything a finished run hands back in memory; the on-disk artifacts
/// (manifest, history CSV, banks, checkpoints) are written as the run goes.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub history: RunHistory,
    pub params: ModelParams,
    pub rounds: usize,
    pub stopped_early: bool,
}

/// Load every .png in a directory, sorted by file name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let is_png = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        if path.is_file() && is_png {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            paths.push((name, path));
        }
    }
    paths.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = Vec::with_capacity(paths.len());
    for (name, path) in paths {
        out.push((name, Image::read_png(&path)?));
    }
    Ok(out)
}

struct EpochStats {
    pixel: f64,
    filter: f64,
}

fn train_one_epoch(
    params: &mut ModelParams,
    adam: &mut AdamState,
    train_images: &[Image],
    bank: &FilterBank,
    cfg: &TrainingConfig,
    epoch: usize,
) -> Result<EpochStats> {
    // One random crop per training image, then a shuffled pass in batches.
    let mut crop_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::CROP, epoch as u64));
    let mut pairs: Vec<(Image, Image)> = Vec::with_capacity(train_images.len());
    for img in train_images {
        let side = cfg.crop.min(img.height()).min(img.width());
        let side = side - side % cfg.scale;
        let y0 = crop_rng.gen_range(0..=img.height() - side);
        let x0 = crop_rng.gen_range(0..=img.width() - side);
        let hr = img.crop(y0, x0, side, side)?;
        let x = upsample(&downsample(&hr, cfg.scale)?, cfg.scale)?;
        pairs.push((x, hr));
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::SHUFFLE, epoch as u64));
    for i in (1..order.len()).rev() {
        let j = shuffle_rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let n = pairs.len() as f64;
    let mut stats = EpochStats {
        pixel: 0.0,
        filter: 0.0,
    };
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<(Image, Image)> = chunk.iter().map(|&i| pairs[i].clone()).collect();
        let (parts, grads) = loss_and_grads(params, &batch, Some(bank), cfg.alpha)?;
        adam_step(params, &grads, adam, cfg.lr)?;
        stats.pixel += parts.pixel * batch.len() as f64;
        stats.filter += parts.filter * batch.len() as f64;
    }
    stats.pixel /= n;
    stats.filter /= n;
    Ok(stats)
}

/// Run a full training job: split the dataset, alternate bank design and
/// training epochs, track validation metrics, and persist all artifacts into
/// the output directory.
pub fn run_training(cfg: &TrainingConfig) -> Result<RunOutput> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("manifest.txt"), cfg.manifest_string())?;

    let named = load_image_dir(&cfg.hr_dir)?;
    if named.len() < 2 {
        return Err(Error::EmptyDataset(format!(
            "{} holds {} readable images, need at least 2",
            cfg.hr_dir.display(),
            named.len()
        )));
    }
    let channels = named[0].1.channels();
    for (name, img) in &named {
        if img.channels() != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                got: img.channels(),
            });
        }
        if img.height() < cfg.scale || img.width() < cfg.scale {
            return Err(Error::ImageTooSmall {
                height: img.height(),
                width: img.width(),
                min: cfg.scale,
            });
        }
        let _ = name;
    }

    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let (train_idx, val_idx) = split_dataset(&names)?;
    let train_images: Vec<Image> = train_idx.iter().map(|&i| named[i].1.clone()).collect();
    let val_images: Vec<Image> = val_idx.iter().map(|&i| named[i].1.clone()).collect();

    let mut params = ModelParams::new(channels, cfg.width1, cfg.width2, cfg.seed);
    params.save(&cfg.out_dir.join("model_epoch_0.srnw"))?;
    let mut adam = AdamState::new(&params);
    let mut history = RunHistory::default();
    let mut psnr_trace: Vec<f64> = Vec::new();
    let mut bank: Option<FilterBank> = None;
    let mut rounds = 0usize;
    let mut stopped_early = false;
    let mut last_saved_epoch = 0usize;

    for epoch in 1..=cfg.epochs {
        let round = (epoch - 1) / cfg.design_interval;
        if (epoch - 1) % cfg.design_interval == 0 {
            let sample_count = cfg.design_samples.min(train_images.len());
            let set = sample_design_set(
                &train_images,
                sample_count,
                derive_seed(cfg.seed, streams::DESIGN_SET, round as u64),
            )?;
            let designed = design_round(&params, &set, cfg, round)?;
            let report = check_feasibility(&designed.bank);
            if !report.is_feasible() {
                return Err(Error::Format(format!(
                    "designed bank for round {round} violates its own constraints"
                )));
            }
            designed
                .bank
                .save(&cfg.out_dir.join(format!("bank_round_{round}.dfbk")))?;
            bank = Some(designed.bank);
            rounds += 1;
        }

        let start = Instant::now();
        let current_bank = bank.as_ref().expect("a bank is designed before epoch 1");
        let stats = train_one_epoch(&mut params, &mut adam, &train_images, current_bank, cfg, epoch)?;

        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        let mut hf_sum = 0.0;
        for img in &val_images {
            let restored = super_resolve(&params, img, cfg.scale)?;
            let report = evaluate_pair(img, &restored)?;
            psnr_sum += report.psnr;
            ssim_sum += report.ssim;
            hf_sum += report.hf_psnr;
        }
        let nv = val_images.len() as f64;
        let seconds = if cfg.deterministic {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        history.records.push(EpochRecord {
            epoch,
            round,
            loss_pixel: stats.pixel,
            loss_filter: stats.filter,
            alpha: cfg.alpha,
            val_psnr: psnr_sum / nv,
            val_ssim: ssim_sum / nv,
            val_hf_psnr: hf_sum / nv,
            seconds,
        });
        psnr_trace.push(psnr_sum / nv);

        if epoch % cfg.design_interval == 0 || epoch == cfg.epochs {
            params.save(&cfg.out_dir.join(format!("model_epoch_{epoch}.srnw")))?;
            last_saved_epoch = epoch;
        }
        if should_stop(&psnr_trace, cfg.patience) {
            stopped_early = true;
            if last_saved_epoch != epoch {
                params.save(&cfg.out_dir.join(format!("model_epoch_{epoch}.srnw")))?;
            }
            break;
        }
    }

    history.save_csv(&cfg.out_dir.join("history.csv"))?;
    Ok(RunOutput {
        history,
        params,
        rounds,
        stopped_early,
    })
}
