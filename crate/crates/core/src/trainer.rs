//! Contrastive pretraining of the GRU and projector on precomputed features.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingSet;
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Scale};
use crate::loss::{batch_loss, BatchItem, Label, LossConfig, LossMode};
use crate::model::{save_checkpoint, ForwardPass, Gradients, InputNorm, ModelDims, SequenceModel};
use crate::wavelet::{sample_band, WaveletBand};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Source videos per batch; each contributes two views.
    pub batch_size: usize,
    pub crop_len: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub temperature: f64,
    pub loss_mode: LossMode,
    pub temporal_transform: bool,
    pub share_band_across_scales: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub hidden_dim: usize,
    /// Projector hidden width; defaults to `hidden_dim`.
    pub projector_hidden: Option<usize>,
    pub output_dim: usize,
    pub seed: u64,
    /// Threads for the per-item forward/backward passes. Results do not
    /// depend on this value.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            crop_len: 16,
            epochs: 10,
            base_lr: 1.2,
            warmup_epochs: 2,
            temperature: 0.1,
            loss_mode: LossMode::Combined,
            temporal_transform: true,
            share_band_across_scales: false,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: None,
            hidden_dim: 128,
            projector_hidden: None,
            output_dim: 32,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Full-size setup: GRU width 1024, K = 128, N = 1024.
    pub fn full_scale() -> Self {
        Self { batch_size: 1024, hidden_dim: 1024, output_dim: 128, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size {} must be a positive even number", self.batch_size));
        }
        if self.crop_len == 0 {
            return bad("crop_len must be at least 1".into());
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay must be non-negative".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("grad_clip must be positive and finite".into());
        }
        if self.hidden_dim == 0 || self.output_dim == 0 || self.projector_hidden == Some(0) || self.workers == 0 {
            return bad("layer sizes and workers must be positive".into());
        }
        LossConfig { temperature: self.temperature, mode: self.loss_mode }.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { temperature: self.temperature, mode: self.loss_mode }
    }

    pub fn model_dims(&self, input_dim: usize) -> ModelDims {
        ModelDims {
            input_dim,
            hidden_dim: self.hidden_dim,
            projector_hidden: self.projector_hidden.unwrap_or(self.hidden_dim),
            output_dim: self.output_dim,
        }
    }

    /// Sources drawn per batch from the synthetic and UGC populations.
    pub fn population_split(&self) -> (usize, usize) {
        match self.loss_mode {
            LossMode::Combined => (self.batch_size / 2, self.batch_size / 2),
            LossMode::SyntheticOnly => (self.batch_size, 0),
            LossMode::UgcOnly => (0, self.batch_size),
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay without restarts.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One view of one source, cropped and ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    pub sample: usize,
    pub scale: Scale,
    pub band: Option<WaveletBand>,
    pub offset: usize,
    pub features: FeatureSequence,
    pub label: Label,
    pub view_id: usize,
}

/// Both views of each listed sample, with random transform choice and crop.
pub fn assemble_batch<R: Rng + ?Sized>(
    set: &TrainingSet,
    sample_indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<BatchInput>> {
    let mut out = Vec::with_capacity(2 * sample_indices.len());
    for &idx in sample_indices {
        let sample = &set.samples()[idx];
        let shared = (cfg.temporal_transform && cfg.share_band_across_scales).then(|| sample_band(rng));
        for (view_id, scale) in [Scale::Full, Scale::Half].into_iter().enumerate() {
            let band = if cfg.temporal_transform { Some(shared.unwrap_or_else(|| sample_band(rng))) } else { None };
            let seq = sample
                .view(scale)
                .get(band)
                .ok_or_else(|| Error::InvalidConfig(format!("sample {} lacks features for {band:?}", sample.id)))?;
            if seq.frames() < cfg.crop_len {
                return Err(Error::TooFewFrames { needed: cfg.crop_len, available: seq.frames() });
            }
            let offset = rng.random_range(0..=seq.frames() - cfg.crop_len);
            out.push(BatchInput {
                sample: idx,
                scale,
                band,
                offset,
                features: seq.window(offset, cfg.crop_len)?,
                label: sample.label,
                view_id,
            });
        }
    }
    Ok(out)
}

/// Draws one batch: sources from each population without replacement.
pub fn compose_batch<R: Rng + ?Sized>(set: &TrainingSet, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<BatchInput>> {
    let (n_syn, n_ugc) = cfg.population_split();
    check_population(set, n_syn, n_ugc)?;
    let mut chosen: Vec<usize> = set.synthetic_indices().choose_multiple(rng, n_syn).copied().collect();
    chosen.extend(set.ugc_indices().choose_multiple(rng, n_ugc).copied());
    assemble_batch(set, &chosen, cfg, rng)
}

fn check_population(set: &TrainingSet, n_syn: usize, n_ugc: usize) -> Result<()> {
    if set.synthetic_indices().len() < n_syn {
        return Err(Error::InsufficientPopulation {
            population: "synthetic",
            needed: n_syn,
            available: set.synthetic_indices().len(),
        });
    }
    if set.ugc_indices().len() < n_ugc {
        return Err(Error::InsufficientPopulation { population: "UGC", needed: n_ugc, available: set.ugc_indices().len() });
    }
    Ok(())
}

/// Per-epoch without-replacement batch stream over both populations.
pub struct EpochSampler {
    syn_order: Vec<usize>,
    ugc_order: Vec<usize>,
    n_syn: usize,
    n_ugc: usize,
    steps_per_epoch: usize,
    step_in_epoch: usize,
}

impl EpochSampler {
    pub fn new(set: &TrainingSet, cfg: &TrainConfig) -> Result<Self> {
        let (n_syn, n_ugc) = cfg.population_split();
        check_population(set, n_syn, n_ugc)?;
        let per = |avail: usize, n: usize| if n == 0 { usize::MAX } else { avail / n };
        let steps_per_epoch = per(set.synthetic_indices().len(), n_syn).min(per(set.ugc_indices().len(), n_ugc));
        Ok(Self {
            syn_order: set.synthetic_indices().to_vec(),
            ugc_order: set.ugc_indices().to_vec(),
            n_syn,
            n_ugc,
            steps_per_epoch,
            step_in_epoch: steps_per_epoch,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// Source indices of the next batch, reshuffling at epoch boundaries.
    pub fn next_sources<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.step_in_epoch == self.steps_per_epoch {
            self.syn_order.shuffle(rng);
            self.ugc_order.shuffle(rng);
            self.step_in_epoch = 0;
        }
        let k = self.step_in_epoch;
        self.step_in_epoch += 1;
        let mut out = self.syn_order[k * self.n_syn..(k + 1) * self.n_syn].to_vec();
        out.extend_from_slice(&self.ugc_order[k * self.n_ugc..(k + 1) * self.n_ugc]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SequenceModel,
    pub trajectory: Vec<StepLog>,
    pub steps_per_epoch: usize,
}

/// Loss and summed parameter gradients for a batch. Per-item passes may run
/// in parallel; gradients are summed in batch order.
pub fn batch_gradients(model: &SequenceModel, inputs: &[BatchInput], loss_cfg: &LossConfig) -> Result<(f64, Gradients)> {
    let passes = inputs
        .par_iter()
        .map(|inp| {
            let mut pass = ForwardPass::new(model);
            let emb = pass.forward(&inp.features)?;
            Ok((pass, emb))
        })
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<BatchItem> = passes
        .iter()
        .zip(inputs)
        .map(|((_, emb), inp)| BatchItem { z: emb.z.clone(), label: inp.label, view_id: inp.view_id })
        .collect();
    let out = batch_loss(&items, loss_cfg)?;
    let per_item = passes
        .par_iter()
        .zip(out.grad_z.par_iter())
        .map(|((pass, _), gz)| pass.backward(Some(gz), None))
        .collect::<Result<Vec<_>>>()?;
    let mut total = model.zeros_like();
    for g in &per_item {
        total.axpy(1.0, g);
    }
    Ok((out.loss, total))
}

fn write_trajectory(path: &Path, trajectory: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::from_write(io, path),
        other => Error::InvalidConfig(format!("{other:?}")),
    })?;
    w.write_record(["step", "lr", "loss"])?;
    for s in trajectory {
        w.write_record([s.step.to_string(), format!("{:e}", s.lr), format!("{:e}", s.loss)])?;
    }
    w.flush().map_err(|e| Error::from_write(e, path))
}

/// Scales `grads` down so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradient(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.tensors().iter().flat_map(|(_, t)| t.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, t) in grads.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// SGD with momentum on the GRU and projector. When `out_dir` is given, a
/// checkpoint is written after every epoch, plus `model.cvqm` and
/// `trajectory.csv` at the end.
pub fn train(set: &TrainingSet, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| train_inner(set, cfg, out_dir))
}

fn train_inner(set: &TrainingSet, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);
    let mut model = SequenceModel::init(cfg.model_dims(set.dim()), &mut init_rng);
    model.input_norm = InputNorm::fit(set.training_sequences(), set.dim())?;
    let mut velocity = model.zeros_like();
    let mut sampler = EpochSampler::new(set, cfg)?;
    let steps_per_epoch = sampler.steps_per_epoch();
    if steps_per_epoch == 0 {
        return Err(Error::InvalidConfig("dataset too small for one batch".into()));
    }
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let loss_cfg = cfg.loss_config();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::from_write(e, dir))?;
    }

    let mut trajectory = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let sources = sampler.next_sources(&mut data_rng);
        let inputs = assemble_batch(set, &sources, cfg, &mut data_rng)?;
        let (loss, mut grads) = batch_gradients(&model, &inputs, &loss_cfg)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NanLoss(step));
        }
        let lr = lr_schedule(step, total_steps, warmup_steps, cfg.base_lr);
        if let Some(clip) = cfg.grad_clip {
            clip_gradient(&mut grads, clip);
        }
        if cfg.weight_decay > 0.0 {
            grads.axpy(cfg.weight_decay, &model);
        }
        for ((_, v), (_, g)) in velocity.tensors_mut().into_iter().zip(grads.tensors()) {
            for (vi, gi) in v.data.iter_mut().zip(&g.data) {
                *vi = cfg.momentum * *vi + gi;
            }
        }
        model.axpy(-lr, &velocity);
        log::debug!("step {step} lr {lr:.6} loss {loss:.6}");
        trajectory.push(StepLog { step, lr, loss });
        if let Some(dir) = out_dir {
            if (step + 1) % steps_per_epoch == 0 {
                let epoch = (step + 1) / steps_per_epoch;
                save_checkpoint(&model, dir.join(format!("epoch_{epoch:03}.cvqm")))?;
                log::info!("epoch {epoch} done, last loss {loss:.6}");
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&model, dir.join("model.cvqm"))?;
        write_trajectory(&dir.join("trajectory.csv"), &trajectory)?;
        let cfg_path = dir.join("train_config.json");
        let mut f = fs::File::create(&cfg_path).map_err(|e| Error::from_write(e, &cfg_path))?;
        f.write_all(serde_json::to_string_pretty(cfg)?.as_bytes()).map_err(|e| Error::from_write(e, &cfg_path))?;
    }
    Ok(TrainOutcome { model, trajectory, steps_per_epoch })
}
