//! Patch sampling, Adam with step decay, the training loop and
//! checkpointing.

pub mod ablation;
pub mod adam;
pub mod checkpoint;
pub mod sampler;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState, Moments};
pub use checkpoint::{Checkpoint, RngState};
pub use sampler::{draw_patch, extract_pair, sample_batch, Pair, PairDataset, PatchDraw};

use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_psnr, EvalProtocol};
use crate::model::RdnModel;
use crate::tensor::Tape;
use crate::upscale::Upscaler;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best-val.ckpt";
pub const TELEMETRY_FILE: &str = "telemetry.log";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    /// LR patch side; the HR patch side is `patch * scale`.
    pub patch: usize,
    pub lr: f64,
    pub halve_every: u64,
    pub iters_per_epoch: u64,
    pub epochs: u64,
    pub seed: u64,
    pub augment: bool,
    /// Iterations per loss telemetry record; 0 disables them.
    pub log_every: u64,
    pub degradation: DegradationSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 16,
            patch: 32,
            lr: 1e-4,
            halve_every: 200,
            iters_per_epoch: 1000,
            epochs: 200,
            seed: 0,
            augment: true,
            log_every: 100,
            degradation: DegradationSpec::bi(2),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch == 0 {
            p.push("train.batch must be at least 1".to_string());
        }
        if self.patch == 0 {
            p.push("train.patch must be at least 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            p.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.halve_every == 0 {
            p.push("train.halve_every must be at least 1".to_string());
        }
        if self.iters_per_epoch == 0 {
            p.push("train.iters_per_epoch must be at least 1".to_string());
        }
        p.extend(self.degradation.problems());
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    pub fn total_iterations(&self) -> u64 {
        self.epochs * self.iters_per_epoch
    }
}

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn lr_schedule(epoch: u64, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.halve_every.max(1)).min(i32::MAX as u64) as i32;
    cfg.lr * 0.5f64.powi(halvings)
}

/// One `epoch iter loss lr [val_psnr]` line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Telemetry {
    pub epoch: u64,
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

impl fmt::Display for Telemetry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:.6} {:e}", self.epoch, self.iteration, self.loss, self.lr)?;
        if let Some(v) = self.val_psnr {
            write!(f, " {v:.4}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<Telemetry>,
    pub final_val_psnr: Option<f64>,
    pub best_val_psnr: Option<f64>,
}

/// Model, optimizer and sampling state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: RdnModel,
    cfg: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    iteration: u64,
    running_loss: f64,
    best_val_psnr: Option<f64>,
}

impl Trainer {
    pub fn new(mut model: RdnModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.degradation.scale != model.config().scale {
            return Err(Error::InvalidConfig(vec![format!(
                "degradation scale x{} differs from model scale x{}",
                cfg.degradation.scale,
                model.config().scale
            )]));
        }
        model.set_requires_grad(true);
        let adam = AdamState::new(model.named_params().into_iter().map(|(_, t)| t));
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            model,
            cfg,
            adam,
            rng,
            iteration: 0,
            running_loss: 0.0,
            best_val_psnr: None,
        })
    }

    /// Resumes a run; the checkpoint must carry training state.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let missing = |what: &str| Error::Checkpoint(format!("checkpoint has no {what}; it cannot resume training"));
        let cfg = ckpt.train_config.clone().ok_or_else(|| missing("training config"))?;
        let adam = ckpt.adam.clone().ok_or_else(|| missing("optimizer state"))?;
        let rng = ckpt.rng.ok_or_else(|| missing("RNG state"))?.restore();
        let mut trainer = Trainer::new(ckpt.to_model()?, cfg)?;
        if adam.moments.len() != trainer.adam.moments.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        trainer.adam = adam;
        trainer.rng = rng;
        trainer.iteration = ckpt.iteration;
        trainer.running_loss = ckpt.running_loss;
        trainer.best_val_psnr = ckpt.best_val_psnr;
        Ok(trainer)
    }

    pub fn model(&self) -> &RdnModel {
        &self.model
    }

    pub fn into_model(self) -> RdnModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Completed optimizer iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Epoch of the next iteration.
    pub fn epoch(&self) -> u64 {
        self.iteration / self.cfg.iters_per_epoch
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.epoch(), &self.cfg)
    }

    /// One iteration: sample, forward, L1 loss, backward, Adam update.
    /// Returns the batch loss. A non-finite loss leaves the model untouched.
    pub fn step(&mut self, data: &PairDataset) -> Result<f64> {
        let (lr_batch, hr_batch) = sample_batch(data, self.cfg.batch, self.cfg.patch, self.cfg.augment, &mut self.rng)?;
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let x = tape.constant(lr_batch);
        let y = tape.constant(hr_batch);
        let loss = bound.forward(&x)?.l1_loss(&y)?;
        let value = loss.item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
            });
        }
        tape.backward(&loss)?;
        self.model.zero_grad();
        self.model.accumulate_grads(&tape, &bound)?;
        drop(bound);
        drop(tape);
        let lr = self.current_lr();
        adam_step(&mut self.model.named_params_mut(), &mut self.adam, lr)?;
        self.iteration += 1;
        self.running_loss = value;
        Ok(value)
    }

    /// Mean Y-channel PSNR over `val`, shaving `scale` pixels.
    pub fn validate(&self, val: &PairDataset) -> Result<f64> {
        validation_psnr(&self.model, val)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model);
        ckpt.train_config = Some(self.cfg.clone());
        ckpt.adam = Some(self.adam.clone());
        ckpt.epoch = self.epoch();
        ckpt.iteration = self.iteration;
        ckpt.rng = Some(RngState::capture(&self.rng));
        ckpt.running_loss = self.running_loss;
        ckpt.best_val_psnr = self.best_val_psnr;
        ckpt
    }

    /// Trains until `until` iterations have completed (the configured
    /// total by default).
    ///
    /// Every `log_every` iterations a loss record is emitted; at each epoch
    /// end the validation PSNR is recorded and, with a run directory,
    /// `last.ckpt` (and `best-val.ckpt` on improvement) are written and
    /// records are appended to `telemetry.log`. On a non-finite loss the
    /// run aborts and files on disk keep the last good state.
    pub fn run(
        &mut self,
        data: &PairDataset,
        val: Option<&PairDataset>,
        run_dir: Option<&Path>,
        until: Option<u64>,
        sink: &mut dyn FnMut(&Telemetry),
    ) -> Result<TrainReport> {
        data.check_patch_size(self.cfg.patch)?;
        let until = until.unwrap_or(self.cfg.total_iterations());
        let mut log = match run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join(TELEMETRY_FILE))?)
            }
            None => None,
        };
        let mut report = TrainReport {
            best_val_psnr: self.best_val_psnr,
            ..TrainReport::default()
        };
        let mut emit = |rec: Telemetry, report: &mut TrainReport| -> Result<()> {
            if let Some(f) = &mut log {
                writeln!(f, "{rec}")?;
            }
            sink(&rec);
            report.records.push(rec);
            Ok(())
        };
        let (mut window_sum, mut window_len) = (0.0f64, 0u64);
        while self.iteration < until {
            let lr = self.current_lr();
            let epoch = self.epoch();
            let loss = self.step(data)?;
            window_sum += loss;
            window_len += 1;
            let at_log = self.cfg.log_every > 0 && self.iteration % self.cfg.log_every == 0;
            let at_epoch_end = self.iteration % self.cfg.iters_per_epoch == 0;
            if !(at_log || at_epoch_end) {
                continue;
            }
            let mut rec = Telemetry {
                epoch,
                iteration: self.iteration,
                loss: window_sum / window_len as f64,
                lr,
                val_psnr: None,
            };
            (window_sum, window_len) = (0.0, 0);
            if at_epoch_end {
                let mut improved = false;
                if let Some(val) = val {
                    let psnr = self.validate(val)?;
                    rec.val_psnr = Some(psnr);
                    report.final_val_psnr = Some(psnr);
                    improved = self.best_val_psnr.map_or(true, |b| psnr > b);
                    if improved {
                        self.best_val_psnr = Some(psnr);
                        report.best_val_psnr = Some(psnr);
                    }
                }
                if let Some(dir) = run_dir {
                    let ckpt = self.checkpoint();
                    ckpt.save(dir.join(LAST_CHECKPOINT))?;
                    if improved {
                        ckpt.save(dir.join(BEST_CHECKPOINT))?;
                    }
                }
            }
            emit(rec, &mut report)?;
        }
        Ok(report)
    }
}

/// Mean Y-channel PSNR of `model` over `val` with the scale-wide shave.
pub fn validation_psnr(model: &RdnModel, val: &PairDataset) -> Result<f64> {
    let protocol = EvalProtocol::for_scale(val.scale);
    let mut total = 0.0;
    for pair in &val.pairs {
        let sr = model.upscale(&pair.lr)?;
        total += evaluate_psnr(&sr, &pair.hr, &protocol)?;
    }
    Ok(total / val.len() as f64)
}

/// Trains `model` for the configured budget, writing artifacts into
/// `run_dir` when given.
pub fn train(
    model: RdnModel,
    data: &PairDataset,
    val: Option<&PairDataset>,
    cfg: TrainConfig,
    run_dir: Option<PathBuf>,
    sink: &mut dyn FnMut(&Telemetry),
) -> Result<(RdnModel, TrainReport)> {
    let mut trainer = Trainer::new(model, cfg)?;
    let report = trainer.run(data, val, run_dir.as_deref(), None, sink)?;
    Ok((trainer.into_model(), report))
}
