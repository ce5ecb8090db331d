//! Backbone plus a registered head, sharing one parameter store.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::heads::{create_head, ClassifierHead, HeadOutput, HeadSettings, LossMode, LossVars};
use crate::loss::LossValue;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::vit::{self, Ctx, VitConfig};

/// Everything needed to rebuild a model's architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vit: VitConfig,
    pub head: String,
    pub head_settings: HeadSettings,
}

impl ModelSpec {
    pub fn new(vit: VitConfig, head: &str) -> Self {
        let head_settings = HeadSettings::new(vit.hidden_dim, vit.num_classes);
        ModelSpec {
            vit,
            head: head.to_string(),
            head_settings,
        }
    }
}

pub struct Model<T: Scalar> {
    spec: ModelSpec,
    head: Box<dyn ClassifierHead<T>>,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub features: Var,
    pub head: HeadOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Model<T> {
    fn build_head(spec: &ModelSpec) -> Result<Box<dyn ClassifierHead<T>>> {
        spec.vit.validate()?;
        if spec.head_settings.input_dim != spec.vit.hidden_dim
            || spec.head_settings.num_classes != spec.vit.num_classes
        {
            return Err(Error::Config(
                "head settings do not match the backbone's hidden_dim/num_classes".into(),
            ));
        }
        create_head(&spec.head, spec.head_settings.clone())
    }

    /// Fresh model with randomly initialized parameters.
    pub fn new(spec: ModelSpec, rng: &mut dyn RngCore) -> Result<Self> {
        let head = Self::build_head(&spec)?;
        let mut params = ParamStore::new();
        vit::init_params(&spec.vit, &mut params, rng)?;
        head.init_params(&mut params, rng)?;
        Ok(Model { spec, head, params })
    }

    /// Wraps existing parameters, checking names and shapes against the spec.
    pub fn from_params(spec: ModelSpec, params: ParamStore<T>) -> Result<Self> {
        let template = Model::<T>::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(&String, &[usize])> =
            template.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&String, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            let first = expected
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), got.len()));
            return Err(Error::shape("model parameters", first));
        }
        Ok(Model {
            spec: template.spec,
            head: template.head,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn head(&self) -> &dyn ClassifierHead<T> {
        self.head.as_ref()
    }

    pub fn forward(&self, g: &mut Graph<T>, images: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<ModelOutput> {
        let features = vit::vit_forward(g, &self.spec.vit, &self.params, images, ctx)?;
        let head = self.head.forward(g, &self.params, features, ctx)?;
        Ok(ModelOutput { features, head })
    }

    pub fn loss(&self, g: &mut Graph<T>, out: &ModelOutput, targets: Var, mode: LossMode) -> Result<LossVars> {
        self.head.loss(g, &self.params, &out.head, targets, mode)
    }

    /// One forward/backward pass over a batch.
    pub fn loss_and_grads(
        &self,
        images: &Tensor<T>,
        one_hot: &Tensor<T>,
        mode: LossMode,
        ctx: &mut Ctx<'_>,
    ) -> Result<(LossValue, Gradients<T>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, ctx)?;
        let y = g.input(one_hot.clone());
        let l = self.loss(&mut g, &out, y, mode)?;
        let value = loss_value(&g, &l);
        let grads = g.backward(l.total, &self.params)?;
        Ok((value, grads))
    }

    /// Loss without building gradients.
    pub fn evaluate_loss(
        &self,
        images: &Tensor<T>,
        one_hot: &Tensor<T>,
        mode: LossMode,
        ctx: &mut Ctx<'_>,
    ) -> Result<(LossValue, Tensor<T>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, ctx)?;
        let y = g.input(one_hot.clone());
        let l = self.loss(&mut g, &out, y, mode)?;
        Ok((loss_value(&g, &l), g.value(out.head.probs).clone()))
    }

    /// Inference-mode class probabilities, `B×K`.
    pub fn probabilities(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx {
            training: false,
            rng: &mut rng,
        };
        let out = self.forward(&mut g, images, &mut ctx)?;
        Ok(g.value(out.head.probs).clone())
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Prediction>> {
        let probs = self.probabilities(images)?;
        let k = self.spec.vit.num_classes;
        Ok(probs
            .to_f64_vec()
            .chunks(k)
            .map(|row| Prediction {
                class: argmax(row),
                probs: row.to_vec(),
            })
            .collect())
    }
}

pub(crate) fn loss_value<T: Scalar>(g: &Graph<T>, l: &LossVars) -> LossValue {
    LossValue {
        total: g.value(l.total).item().as_f64(),
        data_term: g.value(l.data).item().as_f64(),
        reg_term: l.reg.map_or(0.0, |r| g.value(r).item().as_f64()),
    }
}
