use rand::RngCore;

use super::{ClassifierHead, HeadOutput, HeadSettings, LossMode, LossVars};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::loss;
use crate::params::{fan_in_uniform, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::vit::Ctx;

pub(super) const KIND: &str = "dense-softmax";

pub const WEIGHT: &str = "head.dense.weight";
pub const BIAS: &str = "head.dense.bias";

/// Dropout, one dense layer, softmax; trained with cross-entropy.
pub struct DenseSoftmaxHead {
    settings: HeadSettings,
}

impl DenseSoftmaxHead {
    pub fn new(settings: HeadSettings) -> Self {
        DenseSoftmaxHead { settings }
    }
}

impl<T: Scalar> ClassifierHead<T> for DenseSoftmaxHead {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn settings(&self) -> &HeadSettings {
        &self.settings
    }

    fn init_params(&self, store: &mut ParamStore<T>, rng: &mut dyn RngCore) -> Result<()> {
        let s = &self.settings;
        store.insert(WEIGHT, fan_in_uniform(s.input_dim, s.num_classes, rng))?;
        store.insert(BIAS, Tensor::zeros(vec![s.num_classes]))
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        ctx: &mut Ctx<'_>,
    ) -> Result<HeadOutput> {
        let x = g.dropout(features, self.settings.dropout, ctx.training, ctx.rng)?;
        let w = g.param(store, WEIGHT)?;
        let b = g.param(store, BIAS)?;
        let logits = g.dense(x, w, b)?;
        let probs = g.softmax_last(logits)?;
        Ok(HeadOutput { logits, probs })
    }

    fn loss(
        &self,
        g: &mut Graph<T>,
        _store: &ParamStore<T>,
        out: &HeadOutput,
        targets: Var,
        mode: LossMode,
    ) -> Result<LossVars> {
        let data = match mode {
            LossMode::Probability => loss::cross_entropy_probs(g, out.probs, targets)?,
            LossMode::Margin => loss::cross_entropy_logits(g, out.logits, targets)?,
        };
        Ok(LossVars {
            data,
            reg: None,
            total: data,
        })
    }
}
