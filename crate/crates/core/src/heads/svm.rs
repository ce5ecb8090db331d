use rand::RngCore;

use super::{ClassifierHead, HeadOutput, HeadSettings, LossMode, LossVars};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::loss;
use crate::params::{fan_in_uniform, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::vit::Ctx;

pub(super) const KIND: &str = "svm-hinge";

pub const HIDDEN_WEIGHT: &str = "head.svm1.weight";
pub const HIDDEN_BIAS: &str = "head.svm1.bias";
pub const OUT_WEIGHT: &str = "head.svm2.weight";
pub const OUT_BIAS: &str = "head.svm2.bias";

/// Two stacked dense layers (no activation between them) and a softmax,
/// trained with squared hinge plus L2 on both weight matrices.
pub struct SvmHingeHead {
    settings: HeadSettings,
}

impl SvmHingeHead {
    pub fn new(settings: HeadSettings) -> Self {
        SvmHingeHead { settings }
    }
}

impl<T: Scalar> ClassifierHead<T> for SvmHingeHead {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn settings(&self) -> &HeadSettings {
        &self.settings
    }

    fn init_params(&self, store: &mut ParamStore<T>, rng: &mut dyn RngCore) -> Result<()> {
        let s = &self.settings;
        store.insert(HIDDEN_WEIGHT, fan_in_uniform(s.input_dim, s.svm_hidden, rng))?;
        store.insert(HIDDEN_BIAS, Tensor::zeros(vec![s.svm_hidden]))?;
        store.insert(OUT_WEIGHT, fan_in_uniform(s.svm_hidden, s.num_classes, rng))?;
        store.insert(OUT_BIAS, Tensor::zeros(vec![s.num_classes]))
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        ctx: &mut Ctx<'_>,
    ) -> Result<HeadOutput> {
        let mut x = features;
        if self.settings.softmax_features {
            x = g.softmax_last(x)?;
        }
        x = g.dropout(x, self.settings.dropout, ctx.training, ctx.rng)?;
        let w1 = g.param(store, HIDDEN_WEIGHT)?;
        let b1 = g.param(store, HIDDEN_BIAS)?;
        let hidden = g.dense(x, w1, b1)?;
        let w2 = g.param(store, OUT_WEIGHT)?;
        let b2 = g.param(store, OUT_BIAS)?;
        let logits = g.dense(hidden, w2, b2)?;
        let probs = g.softmax_last(logits)?;
        Ok(HeadOutput { logits, probs })
    }

    fn loss(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        out: &HeadOutput,
        targets: Var,
        mode: LossMode,
    ) -> Result<LossVars> {
        let scores = match mode {
            LossMode::Probability => out.probs,
            LossMode::Margin => out.logits,
        };
        let data = loss::squared_hinge(g, scores, targets)?;
        let w1 = g.param(store, HIDDEN_WEIGHT)?;
        let w2 = g.param(store, OUT_WEIGHT)?;
        let reg = loss::l2(g, &[w1, w2], self.settings.l2)?;
        let total = g.add(data, reg)?;
        Ok(LossVars {
            data,
            reg: Some(reg),
            total,
        })
    }
}
