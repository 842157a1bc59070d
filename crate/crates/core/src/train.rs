//! Training runs: momentum SGD with a step schedule over one dataset variant.
//!
//! All randomness is derived from the run seed and the iteration number
//! (data order per epoch, crop offsets and flips per sample, dropout masks
//! per iteration), so a run resumed from a checkpoint continues exactly as
//! the uninterrupted run would have.

use std::io::Write;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetKind, DatasetVariant};
use crate::error::{Error, Result};
use crate::eval::{pre_crop_size, topk_accuracy};
use crate::imaging;
use crate::nn::{ArchSpec, Checkpoint, Network, OptimConstants, OptimState, TensorBuf};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: DatasetKind,
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: OptimConstants,
    /// Dropout drop probability for every dropout layer.
    pub drop_prob: f64,
    pub seed: u64,
    /// Write a resumable checkpoint every this many iterations (0: never).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_kind(DatasetKind::Orig)
    }
}

impl TrainConfig {
    /// Desk-scale recipe. FG and BG runs see fewer images for the same
    /// budget and get the heavier dropout.
    pub fn for_kind(kind: DatasetKind) -> Self {
        Self {
            kind,
            iterations: 8_000,
            batch_size: 64,
            optimizer: OptimConstants {
                decay_every: 3_000,
                ..OptimConstants::default()
            },
            drop_prob: match kind {
                DatasetKind::Fg | DatasetKind::Bg => 0.7,
                DatasetKind::Orig | DatasetKind::Hybrid => 0.5,
            },
            seed: 0,
            checkpoint_every: 0,
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size and log_every must be positive".into(),
            ));
        }
        if !(self.drop_prob > 0.0 && self.drop_prob < 1.0) {
            return Err(Error::Config(format!(
                "drop probability {} outside (0, 1)",
                self.drop_prob
            )));
        }
        self.optimizer.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Passes over the training split: `iterations * batch_size / train_size`.
pub fn epoch_count(config: &TrainConfig, train_size: usize) -> f64 {
    config.iterations as f64 * config.batch_size as f64 / train_size as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub train_top1: f64,
}

/// Training images pre-resized to the pre-crop size, with labels.
pub struct TrainData {
    images: Vec<RgbImage>,
    labels: Vec<u32>,
    crop: u32,
}

impl TrainData {
    pub fn from_variant(variant: &DatasetVariant, arch: &ArchSpec) -> Result<Self> {
        if variant.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let [c, h, w] = arch.input;
        if c != 3 || h != w {
            return Err(Error::ShapeMismatch {
                layer: 0,
                kind: "input",
                expected: vec![3, h, h],
                got: arch.input.to_vec(),
            });
        }
        let size = pre_crop_size(h);
        let images = {
            use rayon::prelude::*;
            variant
                .items
                .par_iter()
                .map(|i| imaging::resize(&i.image, size, size))
                .collect()
        };
        if let Some(bad) = variant
            .items
            .iter()
            .find(|i| i.record.label as usize >= arch.categories)
        {
            return Err(Error::LabelOutOfRange {
                label: bad.record.label,
                categories: arch.categories,
            });
        }
        Ok(Self {
            images,
            labels: variant.labels(),
            crop: h as u32,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A training run in progress.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a TrainData,
    net: Network<f32>,
    optim: OptimState<f32>,
    iteration: u64,
    order_cache: Option<(u64, Vec<usize>)>,
    log: Vec<LogRecord>,
    window: (f64, usize, usize, u64),
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, arch: ArchSpec, data: &'a TrainData) -> Result<Self> {
        config.validate()?;
        let arch = arch.with_drop_prob(config.drop_prob);
        let net = Network::init(arch, &mut seed::rng(seed::derive(config.seed, "init")))?;
        let optim = OptimState::new(config.optimizer, net.params())?;
        Ok(Self::assemble(config, data, net, optim, 0))
    }

    /// Continues from a resumable checkpoint.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint<f32>, data: &'a TrainData) -> Result<Self> {
        config.validate()?;
        let optim = ckpt
            .optim
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(Self::assemble(
            config,
            data,
            ckpt.net,
            optim,
            ckpt.header.iteration,
        ))
    }

    fn assemble(
        config: TrainConfig,
        data: &'a TrainData,
        net: Network<f32>,
        optim: OptimState<f32>,
        iteration: u64,
    ) -> Self {
        Self {
            config,
            data,
            net,
            optim,
            iteration,
            order_cache: None,
            log: Vec::new(),
            window: (0.0, 0, 0, 0),
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn net(&self) -> &Network<f32> {
        &self.net
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint::new(
            self.net.clone(),
            Some(self.optim.clone()),
            self.config.optimizer,
            self.iteration,
            self.config.seed,
        )
    }

    fn sample_index(&mut self, position: u64) -> usize {
        let n = self.data.len() as u64;
        let epoch = position / n;
        if self.order_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            let s = seed::mix(seed::derive(self.config.seed, "order"), epoch, 0);
            order.shuffle(&mut seed::rng(s));
            self.order_cache = Some((epoch, order));
        }
        self.order_cache.as_ref().expect("filled").1[(position % n) as usize]
    }

    /// Assembles the batch for the current iteration.
    fn batch(&mut self) -> Result<(TensorBuf<f32>, Vec<u32>)> {
        let b = self.config.batch_size;
        let crop = self.data.crop;
        let slack = self.data.images[0].width() - crop;
        let aug_seed = seed::derive(self.config.seed, "augment");
        let mut buf = Vec::with_capacity(b * 3 * (crop * crop) as usize);
        let mut labels = Vec::with_capacity(b);
        for j in 0..b {
            let idx = self.sample_index(self.iteration * b as u64 + j as u64);
            let mut rng = seed::rng(seed::mix(aug_seed, self.iteration, j as u64));
            let (x, y) = (rng.gen_range(0..=slack), rng.gen_range(0..=slack));
            let flip = rng.gen_bool(0.5);
            imaging::window_chw(&self.data.images[idx], x, y, crop, flip, &mut buf);
            labels.push(self.data.labels[idx]);
        }
        Ok((
            TensorBuf::from_vec(&[b, 3, crop as usize, crop as usize], buf)?,
            labels,
        ))
    }

    /// One SGD step.
    pub fn step(&mut self) -> Result<LogRecord> {
        let (x, labels) = self.batch()?;
        let mut rng = seed::rng(seed::mix(
            seed::derive(self.config.seed, "dropout"),
            self.iteration,
            0,
        ));
        let cache = self.net.forward_train(&x, &mut rng)?;
        let (grads, loss) = self.net.backward(Some(&cache), &labels)?;
        let lr = self.optim.lr(self.iteration);
        self.optim
            .step(self.net.params_mut(), &grads, self.iteration)?;
        let scores: Vec<Vec<f32>> = (0..labels.len())
            .map(|i| cache.scores().row(i).to_vec())
            .collect();
        let top1 = topk_accuracy(&scores, &labels, 1)?.value();
        self.iteration += 1;
        Ok(LogRecord {
            iter: self.iteration,
            lr,
            loss: loss as f64,
            train_top1: top1,
        })
    }

    /// Steps until `target` iterations are done, logging every `log_every`
    /// and calling `on_checkpoint` at the configured cadence.
    pub fn run_until(
        &mut self,
        target: u64,
        mut on_checkpoint: impl FnMut(&Checkpoint<f32>) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < target {
            let rec = self.step()?;
            let w = &mut self.window;
            w.0 += rec.loss;
            w.1 += (rec.train_top1 * self.config.batch_size as f64).round() as usize;
            w.2 += self.config.batch_size;
            w.3 += 1;
            if rec.iter % self.config.log_every == 0 || rec.iter == target {
                self.log.push(LogRecord {
                    iter: rec.iter,
                    lr: rec.lr,
                    loss: w.0 / w.3 as f64,
                    train_top1: w.1 as f64 / w.2 as f64,
                });
                self.window = (0.0, 0, 0, 0);
            }
            if self.config.checkpoint_every > 0 && rec.iter % self.config.checkpoint_every == 0 {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(())
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint<f32>,
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    pub fn net(&self) -> &Network<f32> {
        &self.checkpoint.net
    }
}

/// Trains a fresh network on the training split of `variant`.
pub fn train(
    config: &TrainConfig,
    arch: &ArchSpec,
    variant: &DatasetVariant,
) -> Result<TrainOutcome> {
    if variant.kind != config.kind {
        return Err(Error::Config(format!(
            "config is for {} data but the variant is {}",
            config.kind, variant.kind
        )));
    }
    let data = TrainData::from_variant(variant, arch)?;
    let mut trainer = Trainer::new(config.clone(), arch.clone(), &data)?;
    trainer.run_until(config.iterations, |_| Ok(()))?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        log: trainer.log,
    })
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Exponentially smoothed loss at the start and end of a log.
pub fn smoothed_loss_ends(log: &[LogRecord], alpha: f64) -> Option<(f64, f64)> {
    let first = log.first()?.loss;
    let mut s = first;
    for r in log {
        s = alpha * r.loss + (1.0 - alpha) * s;
    }
    Some((first, s))
}
