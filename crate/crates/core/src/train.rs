//! Training loop: SGD with momentum over augmented, resized batches.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_pipeline, mosaic, RngStream};
use crate::backbone::image_batch;
use crate::config::TrainConfig;
use crate::detector::loss_and_grads;
use crate::error::{Error, Result};
use crate::heads::{assign_targets, TargetMap};
use crate::manifest::{load_manifest, manifest_base, Split};
use crate::model::{save_checkpoint, Mode, ModelParams, ParamKind, STRIDES};
use crate::raster::PairedSample;
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Running-statistics momentum of normalization layers.
pub const NORM_MOMENTUM: f32 = 0.1;
pub const LOG_NAME: &str = "train_log.jsonl";

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(rename = "L_main")]
    pub l_main: f64,
    #[serde(rename = "L_pre_rgb")]
    pub l_pre_rgb: f64,
    #[serde(rename = "L_pre_tir")]
    pub l_pre_tir: f64,
    #[serde(rename = "L_post")]
    pub l_post: f64,
    pub total: f64,
}

pub struct Trainer {
    cfg: TrainConfig,
    params: ModelParams<f32>,
    velocity: Vec<Option<Tensor<f32>>>,
    samples: Vec<PairedSample>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, samples: Vec<PairedSample>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let nc = cfg.model.num_classes;
        if let Some(b) = samples.iter().flat_map(|s| &s.boxes).find(|b| b.class_id >= nc) {
            return Err(Error::InvalidArgument(format!("class_id {} outside [0, {nc})", b.class_id)));
        }
        let params = ModelParams::init(&cfg.model, cfg.seed)?;
        let velocity = vec![None; params.entries().len()];
        Ok(Trainer { cfg, params, velocity, samples, step: 0 })
    }

    /// Loads the training split of the configured manifest.
    pub fn from_manifest(cfg: TrainConfig) -> Result<Self> {
        let m = load_manifest(&cfg.manifest)?;
        let base = manifest_base(&cfg.manifest);
        let samples = (0..m.records.len())
            .filter(|&i| m.records[i].split == Split::Train)
            .map(|i| m.load_sample(i, &base))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no training records", cfg.manifest.display())));
        }
        let mut cfg = cfg;
        if m.num_classes != cfg.model.num_classes {
            log::info!("model.num_classes {} overridden by manifest ({})", cfg.model.num_classes, m.num_classes);
            cfg.model.num_classes = m.num_classes;
        }
        Self::new(cfg, samples)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn samples(&self) -> &[PairedSample] {
        &self.samples
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Sample indices of every batch of `epoch`; the last batch may be short.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng_from(&[self.cfg.seed, epoch as u64, 0x5ba7c4]));
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Sample `index` as seen in `epoch`: optional mosaic with three random
    /// partners (decided by the stream's first draw), resize, then the
    /// photometric/geometric pipeline — all from one stream per (epoch, index).
    pub fn prepared_sample(&self, epoch: usize, index: usize) -> Result<PairedSample> {
        let aug = &self.cfg.aug;
        let size = self.cfg.input_size;
        let mut rng = RngStream::new(aug.global_seed, epoch as u64, index as u64);
        let base = if rng.random::<f64>() < aug.p_mosaic {
            let mut group = vec![self.samples[index].clone()];
            for _ in 0..3 {
                group.push(self.samples[rng.random_range(0..self.samples.len())].clone());
            }
            mosaic(&group, size, &mut rng, aug.min_area_frac)?
        } else {
            self.samples[index].resize(size, size)
        };
        apply_pipeline(&base, aug, &mut rng)
    }

    /// One optimizer step on already prepared samples.
    pub fn train_step(&mut self, batch: &[PairedSample]) -> Result<StepLog> {
        let rgb = image_batch::<f32>(&batch.iter().map(|s| &s.rgb).collect::<Vec<_>>())?;
        let tir = image_batch::<f32>(&batch.iter().map(|s| &s.tir).collect::<Vec<_>>())?;
        let (_, _, h, w) = rgb.dims4();
        let grids = STRIDES.map(|s| (h / s, w / s));
        let targets: Vec<TargetMap> = batch.iter().map(|s| assign_targets(&s.boxes, grids, STRIDES)).collect();
        let out = loss_and_grads(&self.params, &rgb, &tir, &targets, Mode::Train, true, false)?;
        let l = &out.losses;
        let log = StepLog {
            step: self.step,
            l_main: l.main.total as f64,
            l_pre_rgb: l.aux.pre_rgb as f64,
            l_pre_tir: l.aux.pre_tir as f64,
            l_post: l.aux.post as f64,
            total: l.total as f64,
        };
        if !log.total.is_finite() || out.grads.iter().any(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        self.apply_grads(out.grads);
        for (name, stats) in &out.norm_stats {
            for (suffix, batch_vals) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let running = self.params.get_mut(&format!("{name}.{suffix}"))?;
                for (r, b) in running.data_mut().iter_mut().zip(batch_vals) {
                    *r += NORM_MOMENTUM * (b - *r);
                }
            }
        }
        self.step += 1;
        Ok(log)
    }

    fn apply_grads(&mut self, mut grads: Vec<(usize, Tensor<f32>)>) {
        let clip = self.cfg.grad_clip;
        if clip > 0.0 {
            let norm = grads.iter().map(|(_, g)| g.sq_norm() as f64).sum::<f64>().sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                for (_, g) in grads.iter_mut() {
                    *g = g.map(|v| v * s);
                }
            }
        }
        let (lr, mu, wd) = (self.cfg.learning_rate as f32, self.cfg.momentum as f32, self.cfg.weight_decay as f32);
        for (idx, g) in grads {
            let entry = &mut self.params.entries_mut()[idx];
            let decay = matches!(entry.kind, ParamKind::Weight { .. });
            let v = self.velocity[idx].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vv, gg), w) in v.data_mut().iter_mut().zip(g.data()).zip(entry.value.data()) {
                let d = if decay { gg + wd * w } else { *gg };
                *vv = mu * *vv + d;
            }
            entry.value.axpy(-lr, v);
        }
    }

    /// Runs whole epochs (or until `max_steps`), calling `on_step` after every
    /// step and `on_epoch` after every finished epoch. Returns the last epoch
    /// index reached.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
        mut on_epoch: impl FnMut(usize, &ModelParams<f32>) -> Result<()>,
    ) -> Result<usize> {
        let limit = self.cfg.max_steps.unwrap_or(usize::MAX);
        for epoch in 0..self.cfg.epochs {
            for batch in self.epoch_batches(epoch) {
                if self.step >= limit {
                    on_epoch(epoch, &self.params)?;
                    return Ok(epoch);
                }
                let samples = batch.iter().map(|&i| self.prepared_sample(epoch, i)).collect::<Result<Vec<_>>>()?;
                let log = self.train_step(&samples)?;
                on_step(&log)?;
            }
            on_epoch(epoch, &self.params)?;
        }
        Ok(self.cfg.epochs - 1)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The final checkpoint (`last.ckpt`).
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

/// Trains from `cfg.manifest`, writing `epoch_NNN.ckpt` after each epoch,
/// `last.ckpt`, and the per-step log into `run_dir`.
pub fn train(cfg: &TrainConfig, run_dir: &Path) -> Result<TrainOutcome> {
    let mut trainer = Trainer::from_manifest(cfg.clone())?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let log_path = run_dir.join(LOG_NAME);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut final_loss = None;
    let last = run_dir.join("last.ckpt");
    let result = trainer.run(
        |s| {
            final_loss = Some(s.total);
            if s.step % 25 == 0 {
                log::info!("step {} loss {:.4} (main {:.4})", s.step, s.total, s.l_main);
            }
            let line = serde_json::to_string(s).expect("log serializes");
            writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))
        },
        |epoch, params| {
            save_checkpoint(params, &run_dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            save_checkpoint(params, &last)
        },
    );
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    result?;
    Ok(TrainOutcome { checkpoint: last, log: log_path, steps: trainer.steps(), final_loss })
}
