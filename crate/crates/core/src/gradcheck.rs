//! Analytic versus finite-difference gradients for every parameter entry
//! of a small model in 64-bit precision.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::{HeadRegistry, LossMode};
use crate::loss::one_hot;
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;
use crate::vit::{Ctx, VitConfig};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Step of the five-point central difference.
pub const STEP: f64 = 1e-3;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Parameters are grouped by embedding, encoder layer, final norm and head.
pub fn param_group(name: &str) -> String {
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("encoder"), Some(layer)) => format!("encoder.{layer}"),
        (Some(first), _) => first.to_string(),
        (None, _) => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel: f64,
    pub worst_param: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub head: String,
    pub mode: LossMode,
    pub entries: usize,
    pub groups: Vec<GroupError>,
    pub max_rel: f64,
    pub worst_param: String,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub batch: usize,
    /// Test hook: perturbs the analytic gradient of this parameter.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 7,
            batch: 2,
            corrupt: None,
        }
    }
}

/// Checks every entry of every parameter for one head and loss mode. Runs
/// in training mode; each evaluation reseeds the dropout RNG so that all
/// evaluations share one mask.
pub fn gradcheck_case(vit: &VitConfig, head: &str, mode: LossMode, opts: &GradcheckOptions) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = Model::<f64>::new(ModelSpec::new(vit.clone(), head), &mut rng)?;
    let numel = opts.batch * vit.image_size * vit.image_size * vit.channels;
    let pixels: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    let images = Tensor::new(vec![opts.batch, vit.image_size, vit.image_size, vit.channels], pixels)?;
    let labels: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..vit.num_classes)).collect();
    let targets = one_hot::<f64>(&labels, vit.num_classes)?;
    let dropout_seed = rng.random::<u64>();

    let eval = |m: &Model<f64>| -> Result<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut ctx = Ctx { training: true, rng: &mut r };
        Ok(m.evaluate_loss(&images, &targets, mode, &mut ctx)?.0.total)
    };
    let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut ctx = Ctx { training: true, rng: &mut r };
    let (_, mut grads) = model.loss_and_grads(&images, &targets, mode, &mut ctx)?;
    if let Some(name) = &opts.corrupt {
        let g = grads
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("no parameter `{name}` to corrupt")))?;
        *g = g.map(|v| v * 1.5 + 1e-3);
    }

    let names: Vec<String> = model.params.names().map(String::from).collect();
    let mut groups: IndexMap<String, GroupError> = IndexMap::new();
    let mut entries = 0;
    for name in names {
        let original = model.params.get(&name).expect("listed").clone();
        let analytic = grads[&name].to_vec();
        let mut worst = 0.0f64;
        for i in 0..original.len() {
            let at = |delta: f64, m: &mut Model<f64>| -> Result<f64> {
                let mut data = original.to_vec();
                data[i] += delta;
                m.params.set(&name, Tensor::new(original.shape().to_vec(), data)?)?;
                eval(m)
            };
            let f2 = at(2.0 * STEP, &mut model)?;
            let f1 = at(STEP, &mut model)?;
            let b1 = at(-STEP, &mut model)?;
            let b2 = at(-2.0 * STEP, &mut model)?;
            let numeric = (-f2 + 8.0 * f1 - 8.0 * b1 + b2) / (12.0 * STEP);
            worst = worst.max(relative_error(analytic[i], numeric));
            entries += 1;
        }
        model.params.set(&name, original)?;
        let group = param_group(&name);
        let slot = groups.entry(group.clone()).or_insert(GroupError {
            group,
            max_rel: 0.0,
            worst_param: name.clone(),
        });
        if worst > slot.max_rel {
            slot.max_rel = worst;
            slot.worst_param = name.clone();
        }
    }
    let overall = groups
        .values()
        .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
        .cloned()
        .ok_or_else(|| Error::Contract("model has no parameters".into()))?;
    Ok(CaseReport {
        head: head.to_string(),
        mode,
        entries,
        groups: groups.into_values().collect(),
        max_rel: overall.max_rel,
        worst_param: overall.worst_param,
    })
}

/// Every registered head under both loss modes.
pub fn gradcheck_all(vit: &VitConfig, opts: &GradcheckOptions) -> Result<Vec<CaseReport>> {
    let heads: Vec<&str> = HeadRegistry::<f64>::default().names().collect();
    let mut out = Vec::new();
    for head in heads {
        for mode in [LossMode::Probability, LossMode::Margin] {
            out.push(gradcheck_case(vit, head, mode, opts)?);
        }
    }
    Ok(out)
}

/// Fails naming the worst parameter of the first failing case.
pub fn require_pass(reports: &[CaseReport]) -> Result<()> {
    match reports.iter().find(|r| !r.passed()) {
        Some(r) => Err(Error::GradCheck(format!(
            "`{}` ({} head, {} loss): relative error {:.3e} >= {TOLERANCE:e}",
            r.worst_param,
            r.head,
            r.mode.name(),
            r.max_rel
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> VitConfig {
        VitConfig {
            image_size: 4,
            patch_size: 2,
            hidden_dim: 4,
            num_layers: 1,
            num_heads: 2,
            mlp_dim: 8,
            ..VitConfig::tiny()
        }
    }

    #[test]
    fn groups() {
        assert_eq!(param_group("encoder.1.attn.q.weight"), "encoder.1");
        assert_eq!(param_group("embed.pos"), "embed");
        assert_eq!(param_group("head.svm2.bias"), "head");
    }

    #[test]
    fn micro_model_passes_every_case() {
        let reports = gradcheck_all(&micro(), &GradcheckOptions::default()).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert!(r.passed(), "{r:?}");
        }
        require_pass(&reports).unwrap();
    }

    #[test]
    fn corrupted_gradient_fails_naming_parameter() {
        let opts = GradcheckOptions {
            corrupt: Some("encoder.0.mlp.fc1.weight".into()),
            ..Default::default()
        };
        let r = gradcheck_case(&micro(), "svm-hinge", LossMode::Probability, &opts).unwrap();
        assert!(!r.passed());
        let err = require_pass(&[r]).unwrap_err();
        assert!(err.to_string().contains("encoder.0.mlp.fc1.weight"), "{err}");
    }
}
