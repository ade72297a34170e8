//! Static augmentation policies, data splits and evaluation metrics.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedSample;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::generator::{attention_weights, generate_replica, GeneratorModel, PseudoSample};
use crate::rng;
use crate::schedule::{StepGroups, TokenWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Generate for minority classes until every class matches the majority.
    BalanceDistribution,
    /// Generate exactly `n` pseudo samples per original.
    NSamplesEach(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub variant: PolicyVariant,
    pub groups: StepGroups,
    pub group_index: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.variant == PolicyVariant::NSamplesEach(0) {
            return Err(Error::Config("n must be >= 1 for n-samples-each".into()));
        }
        self.groups.group(self.group_index).map(|_| ())
    }
}

fn proxy_weights(proxy: &EncoderModel, dataset: &[TokenizedSample]) -> Result<Vec<TokenWeights>> {
    dataset.iter().map(|s| attention_weights(proxy, s)).collect()
}

/// Pseudo samples that lift every class to the majority count. Sources are
/// drawn with replacement per class; a source drawn `r` times before uses
/// replica `r`, so repeated draws still yield distinct trajectories.
pub fn augment_balance(
    dataset: &[TokenizedSample],
    num_classes: usize,
    gen: &GeneratorModel,
    proxy: &EncoderModel,
    policy: &AugPolicy,
) -> Result<Vec<PseudoSample>> {
    policy.groups.group(policy.group_index)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, s) in dataset.iter().enumerate() {
        members
            .get_mut(s.label)
            .ok_or_else(|| Error::Invalid(format!("label {} out of range", s.label)))?
            .push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(c.to_string()));
    }
    let target = members.iter().map(Vec::len).max().unwrap_or(0);
    let mut weights: Vec<Option<TokenWeights>> = vec![None; dataset.len()];
    let mut draws = vec![0usize; dataset.len()];
    let mut out = Vec::new();
    for (c, m) in members.iter().enumerate() {
        let mut rng = rng::stream(policy.seed, "balance", &[c as u64]);
        for _ in m.len()..target {
            let i = m[rng.gen_range(0..m.len())];
            if weights[i].is_none() {
                weights[i] = Some(attention_weights(proxy, &dataset[i])?);
            }
            out.push(generate_replica(
                gen,
                &dataset[i],
                weights[i].as_ref().unwrap(),
                policy.groups,
                policy.group_index,
                policy.seed,
                i,
                draws[i],
                policy.temperature,
            )?);
            draws[i] += 1;
        }
    }
    Ok(out)
}

/// Exactly `n` pseudo samples per original, in dataset order.
pub fn augment_n_each(
    dataset: &[TokenizedSample],
    gen: &GeneratorModel,
    proxy: &EncoderModel,
    policy: &AugPolicy,
    n: usize,
) -> Result<Vec<PseudoSample>> {
    policy.groups.group(policy.group_index)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let weights = proxy_weights(proxy, dataset)?;
    let mut out = Vec::with_capacity(n * dataset.len());
    for (i, (s, w)) in dataset.iter().zip(&weights).enumerate() {
        for r in 0..n {
            out.push(generate_replica(
                gen,
                s,
                w,
                policy.groups,
                policy.group_index,
                policy.seed,
                i,
                r,
                policy.temperature,
            )?);
        }
    }
    Ok(out)
}

/// Applies `policy` and returns only the generated samples.
pub fn augment(
    dataset: &[TokenizedSample],
    num_classes: usize,
    gen: &GeneratorModel,
    proxy: &EncoderModel,
    policy: &AugPolicy,
) -> Result<Vec<PseudoSample>> {
    policy.validate()?;
    match policy.variant {
        PolicyVariant::BalanceDistribution => augment_balance(dataset, num_classes, gen, proxy, policy),
        PolicyVariant::NSamplesEach(n) => augment_n_each(dataset, gen, proxy, policy, n),
    }
}

/// Originals followed by pseudo samples.
pub fn merge(dataset: &[TokenizedSample], pseudo: &[PseudoSample]) -> Vec<TokenizedSample> {
    let mut all = dataset.to_vec();
    all.extend(pseudo.iter().map(PseudoSample::tokenized));
    all
}

fn by_class(dataset: &[TokenizedSample]) -> Vec<Vec<usize>> {
    let m = dataset.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut members = vec![Vec::new(); m];
    for (i, s) in dataset.iter().enumerate() {
        members[s.label].push(i);
    }
    members
}

fn select(dataset: &[TokenizedSample], mut keep: Vec<usize>) -> Vec<TokenizedSample> {
    keep.sort_unstable();
    keep.into_iter().map(|i| dataset[i].clone()).collect()
}

/// Class-stratified subsample keeping `round(count * fraction)` per class, in
/// original order.
pub fn partial_split(
    dataset: &[TokenizedSample],
    fraction: f64,
    seed: u64,
) -> Result<Vec<TokenizedSample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Split(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut keep = Vec::new();
    for (c, members) in by_class(dataset).into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let k = (members.len() as f64 * fraction).round() as usize;
        if k == 0 {
            return Err(Error::Split(format!(
                "fraction {fraction} leaves class {c} with no samples"
            )));
        }
        let mut rng = rng::stream(seed, "partial-split", &[c as u64]);
        keep.extend(index::sample(&mut rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    Ok(select(dataset, keep))
}

/// Exactly `shots` samples per class.
pub fn few_shot_split(
    dataset: &[TokenizedSample],
    shots: usize,
    seed: u64,
) -> Result<Vec<TokenizedSample>> {
    let mut keep = Vec::new();
    for (c, mut members) in by_class(dataset).into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < shots {
            return Err(Error::Split(format!(
                "class {c} has {} samples, fewer than {shots} shots",
                members.len()
            )));
        }
        let mut rng = rng::stream(seed, "few-shot", &[c as u64]);
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..shots]);
    }
    Ok(select(dataset, keep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let m = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..m).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..m)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let (fp, fne) = (predicted - tp, support - tp);
                ClassMetrics {
                    precision: ratio(tp, predicted),
                    recall: ratio(tp, support),
                    f1: ratio(2 * tp, 2 * tp + fp + fne),
                    support,
                }
            })
            .collect();
        let macro_f1 = if m == 0 {
            0.0
        } else {
            per_class.iter().map(|c| c.f1).sum::<f64>() / m as f64
        };
        Self {
            macro_f1,
            accuracy: ratio(trace, total),
            per_class,
            confusion,
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Self {
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

/// Argmax predictions of `model` on `test`.
pub fn evaluate(model: &EncoderModel, test: &[TokenizedSample]) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let predicted: Vec<usize> = test
        .iter()
        .map(|s| model.predict(&s.ids))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    Ok(Metrics::from_predictions(&truth, &predicted, model.config.num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(counts: &[usize]) -> Vec<TokenizedSample> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |i| TokenizedSample::from_content(&[10 + i as u32], c)))
            .collect()
    }

    fn counts(d: &[TokenizedSample], m: usize) -> Vec<usize> {
        crate::corpus::class_counts(d, m)
    }

    #[test]
    fn confusion_example() {
        let m = Metrics::from_confusion(vec![vec![8, 2], vec![4, 6]]);
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.per_class[0].f1 - 8.0 / 11.0).abs() < 1e-12);
        assert!((m.per_class[1].f1 - 6.0 / 9.0).abs() < 1e-12);
        assert!((m.macro_f1 - (8.0 / 11.0 + 6.0 / 9.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_scores_zero() {
        let m = Metrics::from_predictions(&[0, 0, 1], &[0, 0, 1], 3);
        assert_eq!(m.per_class[2].f1, 0.0);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn partial_split_counts() {
        let d = dataset(&[300, 60, 30]);
        assert_eq!(partial_split(&d, 1.0, 1).unwrap(), d);
        assert_eq!(counts(&partial_split(&d, 0.5, 1).unwrap(), 3), vec![150, 30, 15]);
        assert_eq!(partial_split(&d, 0.2, 3).unwrap(), partial_split(&d, 0.2, 3).unwrap());
        assert!(partial_split(&dataset(&[40, 5]), 0.05, 1).is_err());
        assert!(partial_split(&d, 0.0, 1).is_err());
    }

    #[test]
    fn few_shot_counts() {
        let d = dataset(&[12, 9]);
        assert_eq!(counts(&few_shot_split(&d, 5, 2).unwrap(), 2), vec![5, 5]);
        assert!(matches!(few_shot_split(&dataset(&[12, 8]), 10, 2), Err(Error::Split(_))));
    }
}
