//! Classification losses, recorded on the tape so they differentiate with
//! the rest of the model.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Added inside the log of cross-entropy on probabilities.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub data_term: f64,
    pub reg_term: f64,
}

/// Checks that every row of a `B×K` target matrix is exactly one-hot.
pub fn validate_one_hot<T: Scalar>(one_hot: &Tensor<T>) -> Result<()> {
    let (_, k) = one_hot.dims2("one_hot")?;
    for (b, row) in one_hot.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Contract(format!("target row {b} is not one-hot")));
        }
    }
    Ok(())
}

pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Contract(format!(
                "label {l} at index {i} outside 0..{num_classes}"
            )));
        }
        data[i * num_classes + l] = T::one();
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

fn check_pair<T: Scalar>(g: &Graph<T>, scores: Var, targets: Var) -> Result<usize> {
    let (s, t) = (g.value(scores), g.value(targets));
    if s.shape() != t.shape() {
        return Err(Error::shape(
            "loss",
            format!("scores {:?} vs targets {:?}", s.shape(), t.shape()),
        ));
    }
    Ok(s.dims2("loss")?.0)
}

/// `−(1/B)·Σ y·log(p + clip)`.
pub fn cross_entropy_probs<T: Scalar>(g: &mut Graph<T>, probs: Var, targets: Var) -> Result<Var> {
    let batch = check_pair(g, probs, targets)?;
    let p = g.add_scalar(probs, T::of(PROB_CLIP));
    let logp = g.log(p);
    let picked = g.mul(targets, logp)?;
    let total = g.sum(picked);
    Ok(g.scale(total, T::of(-1.0 / batch as f64)))
}

/// Cross-entropy read from pre-softmax scores via log-softmax.
pub fn cross_entropy_logits<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: Var,
) -> Result<Var> {
    let batch = check_pair(g, logits, targets)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(targets, logp)?;
    let total = g.sum(picked);
    Ok(g.scale(total, T::of(-1.0 / batch as f64)))
}

/// `(1/B)·Σ_b (1/K)·Σ_k max(0, 1 − t·s)²` with targets mapped to `t = 2y − 1`.
pub fn squared_hinge<T: Scalar>(g: &mut Graph<T>, scores: Var, targets: Var) -> Result<Var> {
    check_pair(g, scores, targets)?;
    let signs = g.value(targets).map(|y| T::of(2.0) * y - T::one());
    let signs = g.input(signs);
    let ts = g.mul(signs, scores)?;
    let neg = g.scale(ts, -T::one());
    let margin = g.add_scalar(neg, T::one());
    let hinge = g.relu(margin);
    let sq = g.mul(hinge, hinge)?;
    Ok(g.mean(sq))
}

/// `lambda · Σ w²` over the given weight nodes.
pub fn l2<T: Scalar>(g: &mut Graph<T>, weights: &[Var], lambda: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(weights.len());
    for &w in weights {
        let sq = g.mul(w, w)?;
        terms.push(g.sum(sq));
    }
    let mut acc = *terms
        .first()
        .ok_or_else(|| Error::Contract("l2 over no weights".into()))?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, T::of(lambda)))
}

fn eval_pair<T: Scalar>(
    probs: &Tensor<T>,
    one_hot: &Tensor<T>,
    f: impl Fn(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    validate_one_hot(one_hot)?;
    let mut g = Graph::new();
    let p = g.input(probs.clone());
    let y = g.input(one_hot.clone());
    let l = f(&mut g, p, y)?;
    Ok(g.value(l).item().as_f64())
}

pub fn categorical_cross_entropy<T: Scalar>(probs: &Tensor<T>, one_hot: &Tensor<T>) -> Result<f64> {
    eval_pair(probs, one_hot, cross_entropy_probs)
}

pub fn squared_hinge_loss<T: Scalar>(probs: &Tensor<T>, one_hot: &Tensor<T>) -> Result<f64> {
    eval_pair(probs, one_hot, squared_hinge)
}

/// `lambda` times the sum of squared entries of `weights`.
pub fn l2_penalty<T: Scalar>(weights: &[&Tensor<T>], lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Param(format!("l2 factor {lambda} is negative")));
    }
    let total: f64 = weights
        .iter()
        .flat_map(|w| w.data().iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum();
    Ok(lambda * total)
}
