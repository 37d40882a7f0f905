use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};

use crate::data::{augment, iterate_epoch, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::{init_params, model_forward, predict, Mode, ModelConfig, ParameterSet};
use crate::rng::TrainRng;
use crate::tensor::Tape;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{lr_at, TrainConfig};
use super::optim::{adamw_step, clip_grad_norm, AdamW, OptimizerState};

pub const LOG_HEADER: &str = "epoch,step,train_loss,eval_top1,seconds";
pub const LOG_FILE: &str = "train_log.csv";

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Optimizer updates completed at the end of the epoch.
    pub step: u64,
    pub train_loss: f64,
    pub eval_top1: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.step, self.train_loss, self.eval_top1, self.seconds
        )
    }

    /// The row without wall time, which is the only non-reproducible field.
    pub fn deterministic_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.step, self.train_loss, self.eval_top1
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.records {
            s.push_str(&r.to_csv_row());
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Config(format!(
                "training log must start with {LOG_HEADER:?}"
            )));
        }
        let records = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let bad = || Error::Config(format!("malformed training log row {line:?}"));
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(EpochRecord {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    step: f[1].parse().map_err(|_| bad())?,
                    train_loss: f[2].parse().map_err(|_| bad())?,
                    eval_top1: f[3].parse().map_err(|_| bad())?,
                    seconds: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn final_top1(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval_top1)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode top-1 accuracy over the whole dataset.
pub fn evaluate_top1(
    params: &ParameterSet<f32>,
    config: &ModelConfig,
    dataset: &Dataset,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = dataset.gather(chunk);
        let logits = predict(params, config, &batch.images)?;
        let classes = logits.shape()[1];
        correct += logits
            .data()
            .chunks_exact(classes)
            .zip(&batch.labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ffvt"))
}

/// Owns all mutable training state. Everything random during training is
/// drawn from `rng`, so a checkpoint captures the full trajectory.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: ParameterSet<f32>,
    pub optimizer: OptimizerState<f32>,
    pub rng: TrainRng,
    pub epoch: u64,
    pub best_top1: f64,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let params = init_params::<f32>(&model, config.seed)?;
        let optimizer = OptimizerState::new(&params);
        let rng = TrainRng::seed_from_u64(config.seed ^ 0x7261_696e_5f72_6e67);
        Ok(Self {
            model,
            config,
            params,
            optimizer,
            rng,
            epoch: 0,
            best_top1: 0.0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.params.check_against(&ckpt.model)?;
        Ok(Self {
            model: ckpt.model,
            config: ckpt.train,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            rng: TrainRng::from_state(ckpt.rng_state),
            epoch: ckpt.epoch,
            best_top1: ckpt.best_top1,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            rng_state: self.rng.state(),
            epoch: self.epoch,
            best_top1: self.best_top1,
        }
    }

    fn check_dataset(&self, data: &Dataset, role: &str) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config(format!("{role} dataset is empty")));
        }
        if data.image_size() != self.model.image_size {
            return Err(Error::Config(format!(
                "{role} images are {}px but the model expects {}px",
                data.image_size(),
                self.model.image_size
            )));
        }
        if data.class_count > self.model.num_classes {
            return Err(Error::Config(format!(
                "{role} dataset has {} classes but the model has {}",
                data.class_count, self.model.num_classes
            )));
        }
        Ok(())
    }

    /// One pass over `train`; returns the mean per-batch loss.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<f64> {
        let steps_per_epoch = self.config.steps_per_epoch(train.len());
        let total_steps = steps_per_epoch * self.config.epochs;
        let hp = |lr| AdamW {
            lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.eps,
            weight_decay: self.config.weight_decay,
        };
        let aug = AugmentConfig {
            flip: self.config.augment_flip,
            crop_pad: self.config.augment_crop_pad,
        };
        let shuffle_seed = self.rng.next_u64();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in iterate_epoch(train, self.config.batch_size, shuffle_seed)? {
            let batch = if aug.flip || aug.crop_pad > 0 {
                augment(&batch, aug, self.rng.next_u64())?
            } else {
                batch
            };
            let tape = Tape::<f32>::new();
            let bound = self.params.bind(&tape);
            let x = tape.constant(&batch.images);
            let logits = model_forward(&x, &bound, &self.model, &mut Mode::Train(&mut self.rng))?;
            let loss = logits.cross_entropy_logits(&batch.labels)?;
            let value = f64::from(loss.value().item());
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.optimizer.step,
                    value,
                });
            }
            let grads = loss.backward()?;
            self.params.zero_grad();
            self.params.accumulate_grads(&bound, &grads)?;
            drop(tape);
            if let Some(max) = self.config.grad_clip_norm {
                clip_grad_norm(&mut self.params, max);
            }
            let lr = lr_at(self.optimizer.step, total_steps, &self.config);
            adamw_step(&mut self.params, &mut self.optimizer, &hp(lr))?;
            loss_sum += value;
            batches += 1;
        }
        self.params.zero_grad();
        self.epoch += 1;
        Ok(loss_sum / batches as f64)
    }

    /// Trains until `self.epoch == until_epoch`, evaluating after each epoch.
    /// With `out_dir`, each epoch writes a checkpoint and appends a log row.
    pub fn run(
        &mut self,
        train: &Dataset,
        eval: &Dataset,
        until_epoch: u64,
        out_dir: Option<&Path>,
    ) -> Result<TrainLog> {
        self.check_dataset(train, "training")?;
        self.check_dataset(eval, "evaluation")?;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut log = TrainLog::default();
        while self.epoch < until_epoch {
            let start = Instant::now();
            let train_loss = self.train_epoch(train)?;
            let eval_top1 = evaluate_top1(&self.params, &self.model, eval)?;
            self.best_top1 = self.best_top1.max(eval_top1);
            let record = EpochRecord {
                epoch: self.epoch,
                step: self.optimizer.step,
                train_loss,
                eval_top1,
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(dir) = out_dir {
                save_checkpoint(&self.checkpoint(), checkpoint_path(dir, self.epoch))?;
                append_log_row(&dir.join(LOG_FILE), &record)?;
            }
            log.records.push(record);
        }
        Ok(log)
    }
}

fn append_log_row(path: &Path, record: &EpochRecord) -> Result<()> {
    let io = |e| Error::io(path, e);
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)?;
    if fresh {
        writeln!(f, "{LOG_HEADER}").map_err(io)?;
    }
    writeln!(f, "{}", record.to_csv_row()).map_err(io)
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(TrainLog, ParameterSet<f32>)> {
    let mut trainer = Trainer::new(model.clone(), config.clone())?;
    let log = trainer.run(train_set, eval_set, config.epochs, out_dir)?;
    Ok((log, trainer.params))
}
