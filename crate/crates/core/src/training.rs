//! Alternating generator / classifier optimization.
//!
//! Each [`Trainer::train_step`] runs one generator update (reconstruction,
//! commitment, codebook divergence and mapping terms, followed by the EMA
//! codebook update) and then one classifier update on real patches and pooled
//! reconstructions.
//!
//! Batch order and flips are pure functions of `(seed, step)`, so a run
//! resumed from a checkpoint replays the same batches as an uninterrupted one.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{classifier_loss, mapping_loss, Classifier, ImagePool};
use crate::autoencoder::{codebook_divergence_loss_tensor, reconstruction_loss_tensor, Autoencoder, DualForward};
use crate::checkpoint::Checkpoint;
use crate::codebook::{commitment_loss_tensor, CodebookPartitioned, FeatureGrid, QuantizationResult, ReinitPools};
use crate::config::TrainConfig;
use crate::data::{images_to_tensor, DatasetManifest, Image, Label, LabeledPatch, Split};
use crate::error::{io_err, CaclError, Result};
use crate::io::atomic_write;
use crate::metrics::dice;
use crate::nn::Adam;
use crate::segmentation::{segment_images, MaskSource, SegmentationMask};

/// Per-term loss values of one step. Terms with zero weight are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub step: u64,
    pub reconstruction: f64,
    pub commitment: f64,
    pub codebook: f64,
    pub mapping: f64,
    pub classifier: f64,
    /// Weighted generator objective.
    pub generator_total: f64,
    /// Share of feature cells that chose a class code, on positive / negative patches.
    pub class_usage_pos: f64,
    pub class_usage_neg: f64,
}

/// Output of [`Trainer::generator_loss`].
#[derive(Debug)]
pub struct GeneratorLoss {
    pub total: Tensor,
    pub report: LossReport,
    pub forward: DualForward,
    /// Positive-path reconstructions of the positive items.
    pub recon_pos_of_pos: Option<Tensor>,
}

/// splitmix64 finalizer, used to derive independent sub-seeds.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_AUTOENCODER: u64 = 1;
const TAG_CLASSIFIER: u64 = 2;
const TAG_CODEBOOK: u64 = 3;
const TAG_POOL_POS: u64 = 4;
const TAG_POOL_NEG: u64 = 5;
const TAG_EPOCH: u64 = 0x1000;
const TAG_FLIP: u64 = 0x2000_0000;
const TAG_REINIT: u64 = 0x4000_0000;

/// Indices into a dataset of `n` items for a 1-based `step`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let start = (step - 1) as usize * batch_size;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + batch_size)
        .map(|pos| {
            let epoch = pos / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EPOCH + epoch as u64)));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("just filled").1[pos % n]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub autoencoder: Autoencoder,
    pub classifier: Classifier,
    pub codebook: CodebookPartitioned,
    pub(crate) opt_generator: Adam,
    pub(crate) opt_classifier: Adam,
    pub(crate) pool_pos: ImagePool,
    pub(crate) pool_neg: ImagePool,
    pub(crate) step: u64,
    /// Uses since the last dead-code check: shared codes on negative patches,
    /// class codes on positive patches, class codes on negative patches.
    pub(crate) usage_shared: Vec<u64>,
    pub(crate) usage_class_pos: Vec<u64>,
    pub(crate) usage_class_neg: Vec<u64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn finite(term: &'static str, value: f64, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CaclError::NonFinite { term, step })
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype();
        let device = Device::Cpu;
        let seed = config.seed;
        let autoencoder = Autoencoder::new(config.autoencoder(), dtype, device.clone(), derive_seed(seed, TAG_AUTOENCODER))?;
        let classifier = Classifier::new(config.classifier, dtype, device, derive_seed(seed, TAG_CLASSIFIER))?;
        let codebook = CodebookPartitioned::new(config.num_shared, config.num_class, config.dim, derive_seed(seed, TAG_CODEBOOK))?
            .with_decay(config.ema_decay)?;
        let opt_generator = Adam::new(autoencoder.params(), config.lr_generator, config.adam_beta1, config.adam_beta2)?;
        let opt_classifier = Adam::new(classifier.params(), config.lr_classifier, config.adam_beta1, config.adam_beta2)?;
        let pool_pos = ImagePool::new(config.pool_capacity, derive_seed(seed, TAG_POOL_POS))?;
        let pool_neg = ImagePool::new(config.pool_capacity, derive_seed(seed, TAG_POOL_NEG))?;
        let k = codebook.num_codes();
        Ok(Self {
            config,
            autoencoder,
            classifier,
            codebook,
            opt_generator,
            opt_classifier,
            pool_pos,
            pool_neg,
            step: 0,
            usage_shared: vec![0; k],
            usage_class_pos: vec![0; k],
            usage_class_neg: vec![0; k],
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        Checkpoint::capture(self)?.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Checkpoint::load(path)?.restore()
    }

    /// The batch for 1-based `step`, with flips applied when enabled.
    pub fn batch_for_step(&self, patches: &[LabeledPatch], step: u64) -> Vec<LabeledPatch> {
        let idx = batch_indices(self.config.seed, step, patches.len(), self.config.batch_size);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, TAG_FLIP + step));
        idx.into_iter()
            .map(|i| {
                let p = &patches[i];
                if self.config.flips {
                    let (h, v) = (rng.random_bool(0.5), rng.random_bool(0.5));
                    LabeledPatch { pixels: p.pixels.flipped(h, v), label: p.label }
                } else {
                    p.clone()
                }
            })
            .collect()
    }

    pub fn train_step(&mut self, batch: &[LabeledPatch]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(CaclError::InvalidArgument("empty training batch".into()));
        }
        let step = self.step + 1;
        let cfg = self.config.clone();
        let dtype = self.autoencoder.dtype();
        let device = self.autoencoder.device().clone();
        let labels: Vec<Label> = batch.iter().map(|p| p.label).collect();
        let images: Vec<&Image> = batch.iter().map(|p| &p.pixels).collect();
        let x = images_to_tensor(&images, dtype, &device)?;
        let pos_idx: Vec<u32> = (0..batch.len() as u32).filter(|&i| labels[i as usize] == Label::Positive).collect();
        let neg_idx: Vec<u32> = (0..batch.len() as u32).filter(|&i| labels[i as usize] == Label::Negative).collect();
        let select = |t: &Tensor, idx: &[u32]| -> Result<Option<Tensor>> {
            if idx.is_empty() {
                return Ok(None);
            }
            let ids = Tensor::from_slice(idx, idx.len(), &device)?;
            Ok(Some(t.index_select(&ids, 0)?))
        };

        // Generator update.
        let GeneratorLoss { total, mut report, forward: fwd, recon_pos_of_pos } = self.generator_loss(&x, &labels, step)?;
        let grads = total.backward()?;
        self.opt_generator.step(self.autoencoder.params(), &grads)?;

        self.update_codebook(&fwd.grid, &fwd.e_pos, &fwd.e_neg, &labels, &mut report)?;

        // Classifier update on detached reals and pooled fakes.
        if cfg.w_cls > 0.0 {
            let fake_pos = match &recon_pos_of_pos {
                Some(t) => Some(self.pool_pos.query_batch(&t.detach())?),
                None => None,
            };
            let fake_neg = self.pool_neg.query_batch(&fwd.recon_neg.detach())?;
            let real_pos = select(&x, &pos_idx)?;
            let real_neg = select(&x, &neg_idx)?;
            let l = classifier_loss(&self.classifier, real_pos.as_ref(), real_neg.as_ref(), fake_pos.as_ref(), Some(&fake_neg))?;
            report.classifier = finite("classifier", scalar(&l)?, step)?;
            let grads = (l * cfg.w_cls)?.backward()?;
            self.opt_classifier.step(self.classifier.params(), &grads)?;
        }

        self.step = step;
        // Re-seed at the start of each window so evaluations and checkpoints,
        // which land on multiples of the interval, see adapted codes.
        if cfg.dead_code_interval > 0 && step % cfg.dead_code_interval == 1 % cfg.dead_code_interval {
            self.reinit_dead_codes(&fwd.grid, &fwd.e_neg, &labels)?;
        }
        Ok(report)
    }

    /// The weighted generator objective on `x` and its per-term values.
    /// Terms whose weight is zero are left out of the graph.
    pub fn generator_loss(&self, x: &Tensor, labels: &[Label], step: u64) -> Result<GeneratorLoss> {
        let cfg = &self.config;
        let dtype = self.autoencoder.dtype();
        let device = self.autoencoder.device().clone();
        if x.dim(0)? != labels.len() {
            return Err(CaclError::Shape("one label per batch item required".into()));
        }
        let pos_idx: Vec<u32> = (0..labels.len() as u32).filter(|&i| labels[i as usize] == Label::Positive).collect();
        let fwd = self.autoencoder.forward_dual(x, &self.codebook)?;
        let mut report = LossReport { step, ..Default::default() };
        let mut total = Tensor::zeros((), dtype, &device)?;

        if cfg.w_recon > 0.0 {
            let l = reconstruction_loss_tensor(x, &fwd.recon_pos, &fwd.recon_neg, labels)?;
            report.reconstruction = finite("reconstruction", scalar(&l)?, step)?;
            total = (total + (l * cfg.w_recon)?)?;
        }
        if cfg.w_commit > 0.0 {
            let selected = selected_quantization(&fwd.e_pos, &fwd.e_neg, labels)?;
            let q = selected.to_tensor(dtype, &device)?;
            let l = commitment_loss_tensor(&fwd.features, &q, cfg.beta)?;
            report.commitment = finite("commitment", scalar(&l)?, step)?;
            total = (total + (l * cfg.w_commit)?)?;
        }
        if cfg.w_codebook > 0.0 {
            let l = codebook_divergence_loss_tensor(&fwd.quantized_neg, &fwd.quantized_pos, &fwd.e_pos, labels, cfg.margin, cfg.divergence)?;
            report.codebook = finite("codebook", scalar(&l)?, step)?;
            total = (total + (l * cfg.w_codebook)?)?;
        }
        let recon_pos_of_pos = if pos_idx.is_empty() {
            None
        } else {
            let ids = Tensor::from_slice(&pos_idx, pos_idx.len(), &device)?;
            Some(fwd.recon_pos.index_select(&ids, 0)?)
        };
        if cfg.w_map > 0.0 {
            let l = mapping_loss(&self.classifier, recon_pos_of_pos.as_ref(), Some(&fwd.recon_neg))?;
            report.mapping = finite("mapping", scalar(&l)?, step)?;
            total = (total + (l * cfg.w_map)?)?;
        }
        report.generator_total = finite("generator_total", scalar(&total)?, step)?;
        Ok(GeneratorLoss { total, report, forward: fwd, recon_pos_of_pos })
    }

    /// EMA update: shared codes follow negative patches (quantized over `S`),
    /// class codes follow the class-coded cells of positive patches.
    fn update_codebook(
        &mut self,
        grid: &FeatureGrid,
        e_pos: &QuantizationResult,
        e_neg: &QuantizationResult,
        labels: &[Label],
        report: &mut LossReport,
    ) -> Result<()> {
        let per = grid.cells_per_item();
        let cell_label = |i: usize| labels[i / per];
        let neg_cells: Vec<bool> = (0..grid.num_cells()).map(|i| cell_label(i) == Label::Negative).collect();
        let novel = self.novel_cells(grid, e_neg, labels);
        let mut class_assign = e_pos.clone();
        for (i, k) in novel.iter().enumerate() {
            if let Some(k) = k {
                class_assign.indices[i] = *k;
            }
        }
        let novel_mask: Vec<bool> = novel.iter().map(Option::is_some).collect();
        self.codebook
            .ema_update_masked(&[(grid, e_neg, Some(&neg_cells)), (grid, &class_assign, Some(&novel_mask))])?;

        let (mut pos_total, mut pos_class, mut neg_total, mut neg_class) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..grid.num_cells() {
            let class = e_pos.from_class_partition[i];
            match cell_label(i) {
                Label::Negative => {
                    self.usage_shared[e_neg.indices[i]] += 1;
                    neg_total += 1;
                    if class {
                        self.usage_class_neg[e_pos.indices[i]] += 1;
                        neg_class += 1;
                    }
                }
                Label::Positive => {
                    pos_total += 1;
                    if class {
                        self.usage_class_pos[e_pos.indices[i]] += 1;
                        pos_class += 1;
                    }
                }
            }
        }
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        report.class_usage_pos = frac(pos_class, pos_total);
        report.class_usage_neg = frac(neg_class, neg_total);
        Ok(())
    }

    /// For each cell, the nearest class code if the cell belongs to a positive
    /// patch and the shared codes explain it worse than the `novelty_quantile`
    /// of the batch's negative cells.
    fn novel_cells(&self, grid: &FeatureGrid, e_neg: &QuantizationResult, labels: &[Label]) -> Vec<Option<usize>> {
        let per = grid.cells_per_item();
        let residual = |i: usize| -> f64 { grid.cell(i).iter().zip(e_neg.quantized_cell(i)).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut neg: Vec<f64> = (0..grid.num_cells()).filter(|&i| labels[i / per] == Label::Negative).map(residual).collect();
        if neg.is_empty() {
            return vec![None; grid.num_cells()];
        }
        neg.sort_by(f64::total_cmp);
        let tau = neg[((neg.len() - 1) as f64 * self.config.novelty_quantile).round() as usize];
        let ns = self.codebook.num_shared();
        (0..grid.num_cells())
            .map(|i| {
                if labels[i / per] != Label::Positive || residual(i) <= tau {
                    return None;
                }
                let v = grid.cell(i);
                let mut best = (ns, f64::INFINITY);
                for k in ns..self.codebook.num_codes() {
                    let d: f64 = self.codebook.code(k).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                Some(best.0)
            })
            .collect()
    }

    /// Re-seeds unused shared codes from the negative-patch features worst
    /// explained by the shared partition, and class
    /// codes that are unused or used too often on negatives from novel
    /// positive-patch features.
    fn reinit_dead_codes(&mut self, grid: &FeatureGrid, e_neg: &QuantizationResult, labels: &[Label]) -> Result<()> {
        let per = grid.cells_per_item();
        let novel = self.novel_cells(grid, e_neg, labels);
        let mut pools = ReinitPools::default();
        let mut residuals: Vec<(f64, usize)> = Vec::new();
        for i in 0..grid.num_cells() {
            if labels[i / per] == Label::Negative {
                let d: f64 = grid.cell(i).iter().zip(e_neg.quantized_cell(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                residuals.push((d, i));
            } else if novel[i].is_some() {
                pools.class.push(grid.cell(i).to_vec());
            }
        }
        residuals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let keep = residuals.len().div_ceil(10);
        pools.shared = residuals[..keep].iter().map(|&(_, i)| grid.cell(i).to_vec()).collect();

        let ns = self.codebook.num_shared();
        let usage: Vec<u64> = (0..self.codebook.num_codes())
            .map(|k| {
                if k < ns {
                    self.usage_shared[k]
                } else {
                    self.usage_class_pos[k].saturating_sub(self.config.class_leak_penalty * self.usage_class_neg[k])
                }
            })
            .collect();
        self.codebook.dead_code_reinit(
            &usage,
            self.config.dead_code_threshold,
            &pools,
            derive_seed(self.config.seed, TAG_REINIT + self.step),
        )?;
        self.usage_shared.iter_mut().for_each(|u| *u = 0);
        self.usage_class_pos.iter_mut().for_each(|u| *u = 0);
        self.usage_class_neg.iter_mut().for_each(|u| *u = 0);
        Ok(())
    }

    pub fn segment(&self, images: &[&Image], dilation_radius: usize) -> Result<Vec<SegmentationMask>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            out.extend(segment_images(&self.autoencoder, &self.codebook, chunk, dilation_radius)?);
        }
        Ok(out)
    }
}

/// Per item, the quantization its label trains: `S ∪ C` for positives, `S` for negatives.
fn selected_quantization(e_pos: &QuantizationResult, e_neg: &QuantizationResult, labels: &[Label]) -> Result<FeatureGrid> {
    let per = e_pos.cells_per_item() * e_pos.dim;
    let mut data = Vec::with_capacity(e_pos.quantized.len());
    for (b, label) in labels.iter().enumerate() {
        let src = if *label == Label::Positive { e_pos } else { e_neg };
        data.extend_from_slice(&src.quantized[b * per..(b + 1) * per]);
    }
    FeatureGrid::new(e_pos.batch, e_pos.height, e_pos.width, e_pos.dim, data)
}

/// In-memory view of the splits a run needs.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Vec<LabeledPatch>,
    pub val: Vec<(Image, SegmentationMask)>,
    pub train_paths: Vec<PathBuf>,
    pub val_paths: Vec<PathBuf>,
}

impl LoadedData {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let mut data = LoadedData { train: Vec::new(), val: Vec::new(), train_paths: Vec::new(), val_paths: Vec::new() };
        for r in manifest.split(Split::Train) {
            let path = manifest.resolve(&r.path);
            data.train.push(LabeledPatch::new(Image::load(&path)?, r.label)?);
            data.train_paths.push(path);
        }
        for r in manifest.split(Split::Val) {
            let Some(mask) = &r.mask_path else { continue };
            let path = manifest.resolve(&r.path);
            let image = Image::load(&path)?;
            let gt = SegmentationMask::load(&manifest.resolve(mask), MaskSource::GroundTruth)?;
            data.val.push((image, gt));
            data.val_paths.push(path);
        }
        Ok(data)
    }
}

pub fn validation_dice(trainer: &Trainer, val: &[(Image, SegmentationMask)]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let images: Vec<&Image> = val.iter().map(|(i, _)| i).collect();
    let masks = trainer.segment(&images, 0)?;
    let mut total = 0.0;
    for (m, (_, gt)) in masks.iter().zip(val) {
        total += dice(m, gt)?;
    }
    Ok(Some(total / val.len() as f64))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
    pub validation: Vec<(u64, f64)>,
    /// Step and validation Dice of `best.bin`, the best-scoring evaluation so far.
    pub best: Option<(u64, f64)>,
    pub trainer: Trainer,
}

pub const LOG_HEADER: &str =
    "step\treconstruction\tcommitment\tcodebook\tmapping\tclassifier\tgenerator_total\tclass_usage_pos\tclass_usage_neg\tval_dice";

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.bin")
}

pub const BEST_CHECKPOINT: &str = "best.bin";
const BEST_RECORD: &str = "best.tsv";

fn read_best(out_dir: &Path) -> Result<Option<(u64, f64)>> {
    let path = out_dir.join(BEST_RECORD);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = || CaclError::Format { what: "best-checkpoint record", detail: format!("{}: expected `step<TAB>dice`", path.display()) };
    let (step, dice) = text.trim().split_once('\t').ok_or_else(bad)?;
    Ok(Some((step.parse().map_err(|_| bad())?, dice.parse().map_err(|_| bad())?)))
}

/// Runs (or resumes) training up to `config.steps`, writing checkpoints and a
/// tab-separated log into `out_dir`.
pub fn train(
    config: &TrainConfig,
    data: &LoadedData,
    out_dir: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(CaclError::Config("the manifest has no training records".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::load_checkpoint(path)?;
            // Schedule settings come from the caller; model settings from the checkpoint.
            t.config.steps = config.steps;
            t.config.checkpoint_interval = config.checkpoint_interval;
            t.config.eval_interval = config.eval_interval;
            t
        }
        None => Trainer::new(config.clone())?,
    };
    let log_path = out_dir.join("train_log.tsv");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    if resume.is_none() {
        writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;
    }

    let total_steps = trainer.config.steps;
    let mut outcome_reports = Vec::new();
    let mut checkpoints = Vec::new();
    let mut validation = Vec::new();
    let mut best = if resume.is_some() { read_best(out_dir)? } else { None };
    while trainer.step < total_steps {
        let step = trainer.step + 1;
        let batch = trainer.batch_for_step(&data.train, step);
        let report = trainer.train_step(&batch)?;
        progress(&report);
        outcome_reports.push(report);

        let ci = trainer.config.checkpoint_interval;
        if (ci > 0 && step % ci == 0) || step == total_steps {
            let path = out_dir.join(checkpoint_name(step));
            trainer.save_checkpoint(&path)?;
            checkpoints.push(path);
        }
        let ei = trainer.config.eval_interval;
        if (ei > 0 && step % ei == 0) || step == total_steps {
            let val = validation_dice(&trainer, &data.val)?;
            if let Some(v) = val {
                validation.push((step, v));
                if best.is_none_or(|(_, b)| v > b) {
                    trainer.save_checkpoint(&out_dir.join(BEST_CHECKPOINT))?;
                    let record = out_dir.join(BEST_RECORD);
                    atomic_write(&record, format!("{step}\t{v}\n").as_bytes())?;
                    best = Some((step, v));
                }
            }
            let r = &report;
            writeln!(
                log,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{}",
                step,
                r.reconstruction,
                r.commitment,
                r.codebook,
                r.mapping,
                r.classifier,
                r.generator_total,
                r.class_usage_pos,
                r.class_usage_neg,
                val.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
            )
            .map_err(io_err(&log_path))?;
        }
    }
    Ok(TrainOutcome { reports: outcome_reports, checkpoints, validation, best, trainer })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (1..=5).flat_map(|s| batch_indices(7, s, n, 2)).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_indices(7, 3, n, 4), batch_indices(7, 3, n, 4));
        assert_ne!(batch_indices(7, 1, n, 10), batch_indices(8, 1, n, 10));
    }

    #[test]
    fn derived_seeds_differ() {
        let a: Vec<u64> = (0..8).map(|t| derive_seed(0, t)).collect();
        let mut b = a.clone();
        b.dedup();
        assert_eq!(a.len(), b.len());
    }
}
