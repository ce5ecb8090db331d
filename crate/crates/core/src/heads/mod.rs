//! Classification heads that sit on the backbone's class-token features.
//!
//! Each head is a [`ClassifierHead`] registered by name in a
//! [`HeadRegistry`]; the run config picks one at runtime.

pub mod dense;
pub mod svm;

use indexmap::IndexMap;
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use dense::DenseSoftmaxHead;
pub use svm::SvmHingeHead;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::vit::Ctx;

/// Which head output the data loss reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// The softmax probabilities.
    #[default]
    Probability,
    /// The pre-softmax scores.
    Margin,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Probability => "probability",
            LossMode::Margin => "margin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSettings {
    pub input_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub svm_hidden: usize,
    pub l2: f64,
    /// Softmax the backbone features before the SVM dense stack.
    pub softmax_features: bool,
}

impl HeadSettings {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        HeadSettings {
            input_dim,
            num_classes,
            dropout: 0.5,
            svm_hidden: 64,
            l2: 0.01,
            softmax_features: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// Pre-softmax scores, `B×K`.
    pub logits: Var,
    /// Softmax of `logits`, `B×K`.
    pub probs: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub data: Var,
    pub reg: Option<Var>,
    pub total: Var,
}

pub trait ClassifierHead<T: Scalar>: Send + Sync {
    fn kind(&self) -> &'static str;

    fn settings(&self) -> &HeadSettings;

    fn init_params(&self, store: &mut ParamStore<T>, rng: &mut dyn RngCore) -> Result<()>;

    fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        ctx: &mut Ctx<'_>,
    ) -> Result<HeadOutput>;

    fn loss(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        out: &HeadOutput,
        targets: Var,
        mode: LossMode,
    ) -> Result<LossVars>;
}

pub type HeadFactory<T> = fn(HeadSettings) -> Box<dyn ClassifierHead<T>>;

pub struct HeadRegistry<T> {
    factories: IndexMap<&'static str, HeadFactory<T>>,
}

impl<T: Scalar> Default for HeadRegistry<T> {
    fn default() -> Self {
        let mut r = HeadRegistry::empty();
        r.register(dense::KIND, |s| Box::new(DenseSoftmaxHead::new(s)))
            .expect("fresh registry");
        r.register(svm::KIND, |s| Box::new(SvmHingeHead::new(s)))
            .expect("fresh registry");
        r
    }
}

impl<T: Scalar> HeadRegistry<T> {
    pub fn empty() -> Self {
        HeadRegistry {
            factories: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: HeadFactory<T>) -> Result<()> {
        if self.factories.contains_key(name) {
            return Err(Error::Config(format!("head `{name}` is already registered")));
        }
        self.factories.insert(name, factory);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, name: &str, settings: HeadSettings) -> Result<Box<dyn ClassifierHead<T>>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.names().collect();
            Error::Config(format!(
                "unknown head `{name}` (known: {})",
                known.join(", ")
            ))
        })?;
        Ok(factory(settings))
    }
}

/// Builds a head from the built-in registry.
pub fn create_head<T: Scalar>(name: &str, settings: HeadSettings) -> Result<Box<dyn ClassifierHead<T>>> {
    HeadRegistry::default().create(name, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_heads_are_registered() {
        let r = HeadRegistry::<f32>::default();
        assert_eq!(r.names().collect::<Vec<_>>(), ["dense-softmax", "svm-hinge"]);
        let h = r.create("svm-hinge", HeadSettings::new(8, 4)).unwrap();
        assert_eq!(h.kind(), "svm-hinge");
        assert!(matches!(r.create("kernel-svm", HeadSettings::new(8, 4)), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut r = HeadRegistry::<f64>::default();
        assert!(r
            .register("svm-hinge", |s| Box::new(SvmHingeHead::new(s)))
            .is_err());
    }
}
