//! Two-phase training loop with per-epoch evaluation and checkpoints.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::capsule::DropoutMode;
use crate::checkpoint::{Checkpoint, TrainState};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, Phase};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::eval::evaluate;
use super::metrics::{export_metrics, write_csv, MetricsFormat, MetricsRecord};
use super::with_threads;

/// Loss and timing of a single optimisation step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub routing_time: Duration,
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    /// Sample-weighted mean loss.
    pub loss: f64,
    pub time: Duration,
    pub routing_time: Duration,
    pub steps: usize,
}

/// A model paired with its optimizer.
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: Adam<f32>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model<f32>, adam: AdamConfig) -> Result<Self> {
        let opt = Adam::new(adam, &model.params)?;
        Ok(Self::with_optimizer(model, opt))
    }

    pub fn with_optimizer(model: Model<f32>, opt: Adam<f32>) -> Self {
        Self {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Reseed the dropout stream.
    pub fn reseed(&mut self, seed: u64, stream: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_D809);
        self.rng.set_stream(stream);
    }

    /// Forward, backward and one Adam update on a batch.
    pub fn step(&mut self, images: &Tensor<f32>, labels: &[usize], phase: Phase) -> Result<StepStats> {
        let (loss, routing_time, grads) = {
            let mut g = Graph::new();
            let x = g.constant(images.clone());
            let opts = ForwardOptions {
                mode: DropoutMode::Train,
                labels: Some(labels),
                decode: true,
            };
            let fwd = self.model.forward(&mut g, x, opts, &mut self.rng)?;
            let loss = self.model.total_loss(&mut g, &fwd, x, labels, phase)?;
            g.check_finite(loss, "loss")?;
            let value = g.value(loss)[0] as f64;
            (value, fwd.routing_time, g.backward(loss)?.into_param_grads())
        };
        self.model.params.zero_grad();
        self.model.params.accumulate(grads)?;
        self.opt.step(&mut self.model.params)?;
        Ok(StepStats { loss, routing_time })
    }

    /// One pass over `ds` in the order fixed by `(seed, epoch)`.
    pub fn run_epoch(&mut self, ds: &Dataset, batch_size: usize, seed: u64, epoch: u64, phase: Phase) -> Result<EpochStats> {
        self.reseed(seed, epoch);
        let start = Instant::now();
        let mut routing = Duration::ZERO;
        let mut total = 0.0;
        let mut steps = 0;
        for idx in batch_iter(ds.len(), batch_size, true, seed, epoch) {
            let (x, y) = ds.batch::<f32>(&idx)?;
            let s = self.step(&x, &y, phase)?;
            total += s.loss * idx.len() as f64;
            routing += s.routing_time;
            steps += 1;
            log::debug!("epoch {epoch} step {steps} loss {:.5}", s.loss);
        }
        Ok(EpochStats {
            loss: total / ds.len().max(1) as f64,
            time: start.elapsed(),
            routing_time: routing,
            steps,
        })
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub records: Vec<MetricsRecord>,
    pub best_accuracy: f64,
}

/// Train from scratch. With `out_dir`, writes `metrics.csv`,
/// `metrics.json`, `last.ckpt` and `best.ckpt` after every epoch.
pub fn train(cfg: &TrainConfig, train: &Dataset, test: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_from(cfg, train, test, out_dir, None)
}

/// Train, optionally continuing from a checkpoint written by a previous run.
pub fn train_from(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for ds in [train, test] {
        if ds.shape != cfg.model.image {
            return Err(Error::Config(format!(
                "{} images are {:?}, model expects {:?}",
                ds.name, ds.shape, cfg.model.image
            )));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    with_threads(cfg.deterministic, || run(cfg, train, test, out_dir, resume))?
}

fn run(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let (mut trainer, mut records, mut best, start_epoch) = match resume {
        Some(ck) => {
            let model: Model<f32> = ck.to_model()?;
            let state = ck
                .state
                .as_ref()
                .ok_or_else(|| Error::Config("checkpoint has no training state".into()))?;
            let opt = ck
                .to_optimizer(&model)?
                .ok_or_else(|| Error::Config("checkpoint has no optimizer moments".into()))?;
            (
                Trainer::with_optimizer(model, opt),
                state.records.clone(),
                state.best_accuracy,
                state.epoch,
            )
        }
        None => (
            Trainer::new(Model::new(cfg.model.clone(), cfg.seed)?, cfg.adam)?,
            Vec::new(),
            f64::NEG_INFINITY,
            0,
        ),
    };

    for epoch in start_epoch..cfg.total_epochs() {
        let phase = if epoch < cfg.epochs_normal { Phase::Normal } else { Phase::Hard };
        if epoch == cfg.epochs_normal && epoch > 0 && cfg.reset_lr_on_hard {
            trainer.opt.lr = cfg.adam.lr;
        }
        let stats = trainer.run_epoch(train, cfg.batch_size, cfg.seed, epoch as u64, phase)?;
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite {
                layer: "epoch loss".into(),
                stats: format!("mean loss {} at epoch {}", stats.loss, epoch + 1),
            });
        }
        trainer.opt.decay();
        let acc = evaluate(&trainer.model, test, cfg.eval_batch_size)?.accuracy;
        let record = MetricsRecord {
            epoch: epoch + 1,
            phase,
            train_loss: stats.loss,
            test_accuracy: acc,
            epoch_time_s: stats.time.as_secs_f64(),
            routing_time_s: stats.routing_time.as_secs_f64(),
            timestamp: (!cfg.deterministic).then(now),
        };
        log::info!(
            "epoch {} [{}] loss {:.5} test accuracy {:.4} ({:.1}s, routing {:.1}s)",
            record.epoch,
            phase.as_str(),
            record.train_loss,
            acc,
            record.epoch_time_s,
            record.routing_time_s
        );
        records.push(record);
        let improved = acc > best;
        best = best.max(acc);

        if let Some(dir) = out_dir {
            let state = TrainState {
                epoch: epoch + 1,
                step: trainer.opt.step,
                lr: trainer.opt.lr,
                adam: cfg.adam,
                best_accuracy: best,
                records: records.clone(),
            };
            let ck = Checkpoint::from_model(&trainer.model, Some(&trainer.opt), Some(state));
            ck.save(dir.join("last.ckpt"))?;
            if improved {
                ck.save(dir.join("best.ckpt"))?;
            }
            write_metrics(dir, &records, cfg.deterministic)?;
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        records,
        best_accuracy: best.max(0.0),
    })
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// `metrics.csv` / `metrics.json`. In deterministic mode the wall-clock
/// columns are zeroed there and the measured values go to `timings.csv`.
pub fn write_metrics(dir: &Path, records: &[MetricsRecord], deterministic: bool) -> Result<()> {
    let csv_path: PathBuf = dir.join("metrics.csv");
    if deterministic {
        let clean: Vec<MetricsRecord> = records.iter().map(MetricsRecord::without_timings).collect();
        export_metrics(&clean, &csv_path, MetricsFormat::Csv)?;
        export_metrics(&clean, dir.join("metrics.json"), MetricsFormat::Json)?;
        write_csv(records, std::fs::File::create(dir.join("timings.csv"))?)?;
    } else {
        export_metrics(records, &csv_path, MetricsFormat::Csv)?;
        export_metrics(records, dir.join("metrics.json"), MetricsFormat::Json)?;
    }
    Ok(())
}
