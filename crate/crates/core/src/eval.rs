//! Inference-mode evaluation and the `eval` and `predict` commands.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, AnyCheckpoint, Checkpoint};
use crate::data::{batch_iter, load_image, load_manifest, BatchOptions, ManifestSource, SampleSource, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::heads::LossMode;
use crate::metrics::{confusion_matrix, ConfusionMatrix, EvalReport};
use crate::model::{argmax, Model};
use crate::tensor::{Scalar, Tensor};
use crate::vit::Ctx;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Sample-weighted mean loss.
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

/// Inference-mode pass over `source` in order.
pub fn evaluate<T: Scalar, S: SampleSource<T> + ?Sized>(
    model: &Model<T>,
    source: &S,
    batch_size: usize,
    mode: LossMode,
) -> Result<Evaluation> {
    if source.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss_sum, mut predictions, mut truth) = (0.0, Vec::new(), Vec::new());
    for batch in batch_iter(source, BatchOptions::eval(batch_size))? {
        let batch = batch?;
        let mut ctx = Ctx {
            training: false,
            rng: &mut rng,
        };
        let (loss, probs) = model.evaluate_loss(&batch.images, &batch.labels, mode, &mut ctx)?;
        loss_sum += loss.total * batch.len() as f64;
        let k = probs.shape()[1];
        predictions.extend(probs.to_f64_vec().chunks(k).map(argmax));
        truth.extend(batch.class_labels());
    }
    let k = model.spec().vit.num_classes;
    Ok(Evaluation {
        loss: loss_sum / truth.len() as f64,
        confusion: confusion_matrix(&truth, &predictions, k)?,
        predictions,
    })
}

fn eval_typed<T: Scalar>(ck: Checkpoint<T>, manifest_path: &Path) -> Result<EvalReport> {
    let manifest = load_manifest(manifest_path)?;
    if manifest.is_empty() {
        return Err(Error::Config(format!(
            "{}: manifest has no records to evaluate",
            manifest_path.display()
        )));
    }
    let model = Model::from_params(ck.spec, ck.params)?;
    let source = ManifestSource {
        manifest: &manifest,
        image_size: model.spec().vit.image_size,
        normalization: ck.config.data.normalization,
    };
    let ev = evaluate(&model, &source, ck.config.train.batch_size, ck.config.train.loss_mode)?;
    EvalReport::from_matrix(&ck.config.model.preset, &model.spec().head, &ev.confusion)
}

/// Evaluates a checkpoint on every record of a manifest, in order.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path) -> Result<EvalReport> {
    match load_checkpoint(checkpoint)? {
        AnyCheckpoint::F32(ck) => eval_typed(ck, manifest),
        AnyCheckpoint::F64(ck) => eval_typed(ck, manifest),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOutput {
    pub class: usize,
    pub name: String,
    pub probs: Vec<f64>,
}

fn predict_typed<T: Scalar>(ck: Checkpoint<T>, image: &Path) -> Result<PredictOutput> {
    let model = Model::from_params(ck.spec, ck.params)?;
    let img: Tensor<T> = load_image(image, model.spec().vit.image_size, ck.config.data.normalization)?;
    let batch = Tensor::stack(&[img])?;
    let pred = model.predict(&batch)?.remove(0);
    let name = CLASS_NAMES
        .get(pred.class)
        .map_or_else(|| format!("class{}", pred.class), |s| s.to_string());
    Ok(PredictOutput {
        class: pred.class,
        name,
        probs: pred.probs,
    })
}

pub fn cmd_predict(checkpoint: &Path, image: &Path) -> Result<PredictOutput> {
    match load_checkpoint(checkpoint)? {
        AnyCheckpoint::F32(ck) => predict_typed(ck, image),
        AnyCheckpoint::F64(ck) => predict_typed(ck, image),
    }
}
