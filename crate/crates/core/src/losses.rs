//! Noise-resistant training objective: a repulsion-only contrastive term over
//! original samples plus cross-entropy over originals and their pseudo samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ablation switches for the classifier objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    /// Pseudo samples contribute to the cross-entropy term.
    pub use_da: bool,
    /// Contrastive term enabled.
    pub use_nrt: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self {
            use_da: true,
            use_nrt: true,
        }
    }
}

/// Representations and logits for one batch of `k` originals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchRepresentations {
    pub representations: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub original_logits: Vec<Vec<f64>>,
    /// `pseudo_logits[i]` holds the logits of the pseudo samples of original `i`.
    pub pseudo_logits: Vec<Vec<Vec<f64>>>,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Returns `(-log softmax(logits)[target], d loss / d logits)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    (-logp[target], grad)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1/k) log sum_i sum_{j: l_j != l_i} exp(cos(h_i, h_j) / tau)`.
///
/// A batch without any differently-labeled pair contributes 0.
pub fn contrastive_loss(reps: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<f64> {
    contrastive_loss_with_grad(reps, labels, tau).map(|(l, _)| l)
}

/// Contrastive loss and its gradient w.r.t. each representation.
pub fn contrastive_loss_with_grad(
    reps: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if reps.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: reps.len(),
            actual: labels.len(),
        });
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let k = reps.len();
    let dim = reps.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; dim]; k];
    let norms: Vec<f64> = reps.iter().map(|r| norm(r)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNorm(i));
    }
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if labels[i] != labels[j] {
                let sim = dot(&reps[i], &reps[j]) / (norms[i] * norms[j]);
                pairs.push((i, j, sim / tau));
            }
        }
    }
    if pairs.is_empty() {
        return Ok((0.0, grads));
    }
    let max = pairs.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = pairs.iter().map(|p| (p.2 - max).exp()).sum();
    let loss = (max + z.ln()) / k as f64;
    for &(i, j, logit) in &pairs {
        // d loss / d sim_ij
        let c = (logit - max).exp() / z / tau / k as f64;
        let sim = logit * tau;
        let inv = 1.0 / (norms[i] * norms[j]);
        let (ri, rj) = (&reps[i], &reps[j]);
        let ni2 = norms[i] * norms[i];
        let nj2 = norms[j] * norms[j];
        for t in 0..dim {
            grads[i][t] += c * (rj[t] * inv - sim * ri[t] / ni2);
            grads[j][t] += c * (ri[t] * inv - sim * rj[t] / nj2);
        }
    }
    Ok((loss, grads))
}

/// Mean cross-entropy over the `k` originals and their `B` pseudo samples each,
/// all supervised with the original's label.
pub fn classification_loss(reps: &BatchRepresentations, aug_per_sample: usize) -> Result<f64> {
    let k = reps.labels.len();
    if reps.original_logits.len() != k {
        return Err(Error::Shape("original logits per label".into()));
    }
    if aug_per_sample > 0 {
        if reps.pseudo_logits.len() != k {
            return Err(Error::Shape("pseudo logits per original".into()));
        }
        if let Some(bad) = reps.pseudo_logits.iter().find(|p| p.len() != aug_per_sample) {
            return Err(Error::Shape(format!(
                "expected {aug_per_sample} pseudo samples, found {}",
                bad.len()
            )));
        }
    }
    if k == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = 0.0;
    for i in 0..k {
        let label = reps.labels[i];
        total += softmax_cross_entropy(&reps.original_logits[i], label).0;
        for b in 0..aug_per_sample {
            total += softmax_cross_entropy(&reps.pseudo_logits[i][b], label).0;
        }
    }
    Ok(total / (k * (aug_per_sample + 1)) as f64)
}

/// `L_c + L_e` with the ablation switches applied: without N.R.T. only `L_e`
/// remains, without D.A. `L_e` covers originals only.
pub fn total_loss(
    reps: &BatchRepresentations,
    tau: f64,
    aug_per_sample: usize,
    flags: LossFlags,
) -> Result<f64> {
    let b = if flags.use_da { aug_per_sample } else { 0 };
    let le = classification_loss(reps, b)?;
    let lc = if flags.use_nrt {
        contrastive_loss(&reps.representations, &reps.labels, tau)?
    } else {
        0.0
    };
    Ok(lc + le)
}
