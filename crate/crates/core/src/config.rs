//! JSON run configuration. Every field has a default, so `{}` plus a
//! manifest path is a complete config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::heads::{HeadRegistry, LossMode};
use crate::model::ModelSpec;
use crate::optim::{AdamConfig, PlateauConfig};
use crate::tensor::DType;
use crate::vit::VitConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `vit-b32` or `tiny`; the fields below override single values.
    pub preset: String,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub mlp_dim: Option<usize>,
    pub dropout_rate: Option<f64>,
    /// Registered head name: `dense-softmax` or `svm-hinge`.
    pub head: String,
    pub head_dropout: f64,
    pub svm_hidden: usize,
    pub l2: f64,
    pub softmax_features: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "vit-b32".into(),
            image_size: None,
            patch_size: None,
            hidden_dim: None,
            num_layers: None,
            num_heads: None,
            mlp_dim: None,
            dropout_rate: None,
            head: "svm-hinge".into(),
            head_dropout: 0.5,
            svm_hidden: 64,
            l2: 0.01,
            softmax_features: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_min_delta: f64,
    pub min_lr: f64,
    pub seed: u64,
    /// Share of each class used for training when no validation manifest
    /// is given.
    pub split_fraction: f64,
    pub loss_mode: LossMode,
    /// Random horizontal and vertical flips.
    pub augment: bool,
    pub precision: DType,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let plateau = PlateauConfig::default();
        TrainSection {
            epochs: 50,
            batch_size: 8,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            lr_factor: plateau.factor,
            lr_patience: plateau.patience,
            lr_min_delta: plateau.min_delta,
            min_lr: plateau.min_lr,
            seed: 42,
            split_fraction: 0.8,
            loss_mode: LossMode::Probability,
            augment: true,
            precision: DType::F32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
    /// Held-out manifest; when absent the training manifest is split.
    pub val_manifest: Option<PathBuf>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub checkpoint_dir: PathBuf,
    /// Where the final held-out report is written, if anywhere.
    pub report_path: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            checkpoint_dir: "checkpoints".into(),
            report_path: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.manifest);
        if let Some(p) = self.data.val_manifest.as_mut() {
            fix(p);
        }
        fix(&mut self.output.checkpoint_dir);
        if let Some(p) = self.output.report_path.as_mut() {
            fix(p);
        }
    }

    pub fn vit_config(&self) -> Result<VitConfig> {
        let m = &self.model;
        let mut v = VitConfig::preset(&m.preset)?;
        let set = |slot: &mut usize, o: Option<usize>| {
            if let Some(x) = o {
                *slot = x;
            }
        };
        set(&mut v.image_size, m.image_size);
        set(&mut v.patch_size, m.patch_size);
        set(&mut v.hidden_dim, m.hidden_dim);
        set(&mut v.num_layers, m.num_layers);
        set(&mut v.num_heads, m.num_heads);
        set(&mut v.mlp_dim, m.mlp_dim);
        if let Some(r) = m.dropout_rate {
            v.dropout_rate = r;
        }
        v.validate()?;
        Ok(v)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(self.vit_config()?, &self.model.head);
        spec.head_settings.dropout = self.model.head_dropout;
        spec.head_settings.svm_hidden = self.model.svm_hidden;
        spec.head_settings.l2 = self.model.l2;
        spec.head_settings.softmax_features = self.model.softmax_features;
        Ok(spec)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.train.lr_factor,
            patience: self.train.lr_patience,
            min_delta: self.train.lr_min_delta,
            min_lr: self.train.min_lr,
        }
    }

    /// Range checks on every numeric setting; runs before any work.
    pub fn validate(&self) -> Result<()> {
        self.vit_config()?;
        let known: Vec<&str> = HeadRegistry::<f32>::default().names().collect();
        if !known.contains(&self.model.head.as_str()) {
            return Err(Error::Config(format!(
                "unknown head `{}` (known: {})",
                self.model.head,
                known.join(", ")
            )));
        }
        let m = &self.model;
        if !(0.0..1.0).contains(&m.head_dropout) {
            return Err(Error::Config(format!("head_dropout {} outside [0, 1)", m.head_dropout)));
        }
        if m.svm_hidden == 0 {
            return Err(Error::Config("svm_hidden must be >= 1".into()));
        }
        if !(m.l2 >= 0.0 && m.l2.is_finite()) {
            return Err(Error::Config(format!("l2 {} must be >= 0", m.l2)));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(t.split_fraction > 0.0 && t.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction {} outside (0, 1)",
                t.split_fraction
            )));
        }
        self.adam().validate()?;
        self.plateau().validate()?;
        if self.data.manifest.as_os_str().is_empty() {
            return Err(Error::Config("data.manifest is required".into()));
        }
        Ok(())
    }

    /// Fails unless every input file exists.
    pub fn check_inputs(&self) -> Result<()> {
        let inputs = std::iter::once(&self.data.manifest).chain(self.data.val_manifest.as_ref());
        for p in inputs {
            if !p.is_file() {
                return Err(Error::Config(format!("{}: manifest not found", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_training_constants() {
        let c = RunConfig::from_json(r#"{"data": {"manifest": "m.csv"}}"#).unwrap();
        c.validate().unwrap();
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.model.head_dropout, 0.5);
        assert_eq!(c.model.l2, 0.01);
        let v = c.vit_config().unwrap();
        assert_eq!((v.image_size, v.patch_size), (256, 32));
        assert_eq!(c.data.normalization, Normalization::MinusOneOne);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_json(
            r#"{"model": {"preset": "tiny", "hidden_dim": 8, "head": "dense-softmax"},
                "train": {"loss_mode": "margin", "precision": "f64"},
                "data": {"manifest": "m.csv", "normalization": "zero-one"}}"#,
        )
        .unwrap();
        let spec = c.model_spec().unwrap();
        assert_eq!(spec.vit.hidden_dim, 8);
        assert_eq!(spec.head_settings.input_dim, 8);
        assert_eq!(c.train.loss_mode, LossMode::Margin);
        assert_eq!(c.train.precision, DType::F64);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for body in [
            r#"{"data": {"manifest": "m.csv"}, "train": {"lr": 0}}"#,
            r#"{"data": {"manifest": "m.csv"}, "train": {"batch_size": 0}}"#,
            r#"{"data": {"manifest": "m.csv"}, "train": {"split_fraction": 1.0}}"#,
            r#"{"data": {"manifest": "m.csv"}, "model": {"head": "rbf"}}"#,
            r#"{"data": {"manifest": "m.csv"}, "model": {"preset": "vit-h14"}}"#,
            r#"{"data": {"manifest": "m.csv"}, "model": {"preset": "tiny", "num_heads": 3}}"#,
            r#"{"train": {}}"#,
        ] {
            let err = RunConfig::from_json(body).unwrap().validate().unwrap_err();
            assert!(err.is_usage(), "{body}: {err}");
        }
        let err = RunConfig::from_json(r#"{"trian": {}}"#).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"data": {"manifest": "data/m.csv"}, "output": {"checkpoint_dir": "/abs/ck"}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.data.manifest, dir.path().join("data/m.csv"));
        assert_eq!(c.output.checkpoint_dir, PathBuf::from("/abs/ck"));
        assert!(c.check_inputs().is_err());
    }
}
