//! Epoch loop: shuffle, batch, forward, loss, backward, Adam, held-out
//! evaluation, plateau schedule, per-epoch checkpoint and CSV log.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, AnyCheckpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{
    batch_iter, load_manifest, stratified_split, BatchOptions, DatasetManifest, MemorySource,
};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::optim::{adam_step, maybe_reduce_lr, AdamState, LrSchedule};
use crate::tensor::{DType, Scalar};
use crate::vit::Ctx;

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,val_acc,lr";
pub const LOG_FILE: &str = "train_log.csv";

/// One row of the training log. `lr` is the rate used during the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub fn render_log(history: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in history {
        out += &format!(
            "{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_acc, e.lr
        );
    }
    out
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Held-out report for the final model.
    pub report: EvalReport,
}

/// Training and held-out records, decoded once.
pub struct Datasets<T> {
    pub train_manifest: DatasetManifest,
    pub val_manifest: DatasetManifest,
    pub train: MemorySource<T>,
    pub val: MemorySource<T>,
}

pub fn prepare_data<T: Scalar>(config: &RunConfig) -> Result<Datasets<T>> {
    config.check_inputs()?;
    let all = load_manifest(&config.data.manifest)?;
    let (train_manifest, val_manifest) = match &config.data.val_manifest {
        Some(p) => (all, load_manifest(p)?),
        None => stratified_split(&all, config.train.split_fraction, config.train.seed)?,
    };
    for (what, m) in [("training", &train_manifest), ("validation", &val_manifest)] {
        if m.is_empty() {
            return Err(Error::Config(format!("{what} set has no records")));
        }
    }
    let size = config.vit_config()?.image_size;
    let norm = config.data.normalization;
    Ok(Datasets {
        train: MemorySource::load(&train_manifest, size, norm)?,
        val: MemorySource::load(&val_manifest, size, norm)?,
        train_manifest,
        val_manifest,
    })
}

fn fresh_state<T: Scalar>(config: &RunConfig) -> Result<Checkpoint<T>> {
    let spec = config.model_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let model = Model::<T>::new(spec.clone(), &mut rng)?;
    let adam = AdamState::new(config.adam(), &model.params);
    Ok(Checkpoint {
        config: config.clone(),
        spec,
        epoch: 0,
        rng,
        schedule: LrSchedule::new(config.plateau(), config.train.lr),
        history: Vec::new(),
        params: model.params,
        adam,
    })
}

fn check_resumable<T: Scalar>(config: &RunConfig, ck: &Checkpoint<T>) -> Result<()> {
    if ck.spec != config.model_spec()? {
        return Err(Error::Config("checkpoint model does not match the run config".into()));
    }
    let strip = |c: &RunConfig| {
        let mut t = c.train.clone();
        t.epochs = 0;
        (t, c.data.normalization)
    };
    if strip(&ck.config) != strip(config) {
        return Err(Error::Config(
            "checkpoint training settings differ from the run config".into(),
        ));
    }
    if ck.epoch > config.train.epochs {
        return Err(Error::Config(format!(
            "checkpoint is at epoch {} but the config asks for {} epochs",
            ck.epoch, config.train.epochs
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs epochs `state.epoch + 1 ..= config.train.epochs`.
pub fn train<T: Scalar>(
    config: &RunConfig,
    data: &Datasets<T>,
    resume: Option<Checkpoint<T>>,
) -> Result<TrainOutcome> {
    let mut state = match resume {
        Some(ck) => {
            check_resumable(config, &ck)?;
            Checkpoint {
                config: config.clone(),
                ..ck
            }
        }
        None => fresh_state(config)?,
    };
    let out_dir = &config.output.checkpoint_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut model = Model::from_params(state.spec.clone(), std::mem::take(&mut state.params))?;
    let mode = config.train.loss_mode;
    let bs = config.train.batch_size;

    if state.epoch == 0 {
        state.params = model.params.clone();
        state.save(&out_dir.join(checkpoint_name(0)))?;
    }
    write_text(&log_path, &render_log(&state.history))?;
    let mut final_checkpoint = out_dir.join(checkpoint_name(state.epoch));

    while state.epoch < config.train.epochs {
        let epoch = state.epoch + 1;
        let lr = state.schedule.lr;
        state.adam.set_lr(lr);
        let opts = BatchOptions {
            batch_size: bs,
            shuffle: true,
            augment: config.train.augment,
            seed: config.train.seed,
            epoch: epoch as u64,
        };
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, batch) in batch_iter(&data.train, opts)?.enumerate() {
            let batch = batch?;
            let mut ctx = Ctx {
                training: true,
                rng: &mut state.rng,
            };
            let (loss, grads) = model.loss_and_grads(&batch.images, &batch.labels, mode, &mut ctx)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b + 1 });
            }
            adam_step(&mut model.params, &grads, &mut state.adam)?;
            loss_sum += loss.total * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val = evaluate(&model, &data.val, bs, mode)?;
        if !val.loss.is_finite() {
            return Err(Error::NonFinite { epoch, batch: 0 });
        }
        let val_acc = crate::metrics::accuracy(&val.confusion)?;
        maybe_reduce_lr(&mut state.schedule, val.loss)?;
        let row = EpochLog {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_acc,
            lr,
        };
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6} val_loss {:.6} val_acc {val_acc:.4} lr {lr:e}",
            val.loss
        );
        state.history.push(row);
        state.epoch = epoch;
        state.params = model.params.clone();
        final_checkpoint = out_dir.join(checkpoint_name(epoch));
        state.save(&final_checkpoint)?;
        write_text(&log_path, &render_log(&state.history))?;
    }

    let val = evaluate(&model, &data.val, bs, mode)?;
    let report = EvalReport::from_matrix(&config.model.preset, &state.spec.head, &val.confusion)?;
    if let Some(p) = &config.output.report_path {
        write_text(p, &crate::metrics::render_report(&report, "json")?)?;
    }
    Ok(TrainOutcome {
        history: state.history,
        final_checkpoint,
        log_path,
        report,
    })
}

fn train_typed<T: Scalar>(config: &RunConfig, resume: Option<Checkpoint<T>>) -> Result<TrainOutcome> {
    let data = prepare_data::<T>(config)?;
    train(config, &data, resume)
}

/// Validates inputs, then trains at the configured precision, optionally
/// continuing from a checkpoint.
pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_inputs()?;
    let resume = resume.map(load_checkpoint).transpose()?;
    match (config.train.precision, resume) {
        (DType::F32, None) => train_typed::<f32>(config, None),
        (DType::F64, None) => train_typed::<f64>(config, None),
        (DType::F32, Some(AnyCheckpoint::F32(ck))) => train_typed(config, Some(ck)),
        (DType::F64, Some(AnyCheckpoint::F64(ck))) => train_typed(config, Some(ck)),
        (want, Some(ck)) => Err(Error::Config(format!(
            "checkpoint holds {} parameters but the config trains in {want}",
            ck.dtype()
        ))),
    }
}
