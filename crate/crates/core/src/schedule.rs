//! Label-aware absorbing noise schedule.
//!
//! A token's survival probability (chance of still being unmasked at step `t`)
//! is `1 - t/T - lambda * sin(t*pi/T) * w`, where `w` is the token's
//! normalized [CLS]-attention weight. Tokens the classifier attends to are
//! therefore masked earlier and, in the reverse process, restored later.
//! The raw curve is not monotone for large `lambda * w`; masking uses its
//! running minimum so that mask sets are nested.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedSample, Vocab};
use crate::encoder::ForwardTrace;
use crate::error::{Error, Result};

/// Per-position label-relatedness weights for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    /// Head-averaged last-layer attention from the [CLS] query to each position.
    pub raw: Vec<f64>,
    /// `raw` max-normalized over maskable positions; zero elsewhere.
    pub normalized: Vec<f64>,
}

impl TokenWeights {
    /// Weights from already-computed raw values.
    pub fn from_raw(raw: Vec<f64>, maskable: &[bool]) -> Result<Self> {
        if raw.len() != maskable.len() {
            return Err(Error::LengthMismatch {
                expected: maskable.len(),
                actual: raw.len(),
            });
        }
        let max = raw
            .iter()
            .zip(maskable)
            .filter(|(_, &m)| m)
            .map(|(&w, _)| w)
            .fold(0.0f64, f64::max);
        let normalized = raw
            .iter()
            .zip(maskable)
            .map(|(&w, &m)| if m && max > 0.0 { w / max } else { 0.0 })
            .collect();
        Ok(Self { raw, normalized })
    }

    /// All-zero weights: reduces the schedule to the plain linear one.
    pub fn uniform(len: usize) -> Self {
        Self {
            raw: vec![0.0; len],
            normalized: vec![0.0; len],
        }
    }
}

/// Mean over heads of the last-layer attention row of the [CLS] position.
pub fn token_weights(trace: &ForwardTrace, sample: &TokenizedSample) -> Result<TokenWeights> {
    let heads = trace.last_attention();
    let len = heads.first().map_or(0, |h| h.ncols());
    if len != sample.len() {
        return Err(Error::LengthMismatch {
            expected: sample.len(),
            actual: len,
        });
    }
    let mut raw = vec![0.0; len];
    for head in heads {
        for (i, w) in raw.iter_mut().enumerate() {
            *w += head[[0, i]];
        }
    }
    let h = heads.len() as f64;
    raw.iter_mut().for_each(|w| *w /= h);
    TokenWeights::from_raw(raw, &sample.maskable)
}

/// `sin(t*pi/T)`.
pub fn sinus_modulation(t: usize, steps: usize) -> Result<f64> {
    if t > steps || steps == 0 {
        return Err(Error::StepOutOfRange { t, steps });
    }
    Ok(modulation(t, steps))
}

// The endpoints are pinned to 0 so that survival is exactly 0 at t = T
// regardless of how pi rounds.
fn modulation(t: usize, steps: usize) -> f64 {
    if t == 0 || t == steps {
        0.0
    } else {
        (t as f64 * PI / steps as f64).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub lambda: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            steps: 32,
            lambda: 0.5,
        }
    }
}

impl NoiseSchedule {
    pub fn new(steps: usize, lambda: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { steps, lambda })
    }

    fn check(&self, t: usize, weight: f64) -> Result<()> {
        if t > self.steps {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps,
            });
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::Invalid(format!("weight {weight} outside [0, 1]")));
        }
        Ok(())
    }

    fn raw_survival(&self, t: usize, weight: f64) -> f64 {
        let steps = self.steps as f64;
        let s = modulation(t, self.steps);
        (1.0 - t as f64 / steps - self.lambda * s * weight).clamp(0.0, 1.0)
    }

    /// Probability of a token with normalized weight `weight` remaining unmasked at step `t`.
    pub fn survival_prob(&self, t: usize, weight: f64) -> Result<f64> {
        self.check(t, weight)?;
        Ok(self.raw_survival(t, weight))
    }

    /// Running minimum of [`survival_prob`](Self::survival_prob) over `0..=t`.
    pub fn effective_survival(&self, t: usize, weight: f64) -> Result<f64> {
        self.check(t, weight)?;
        Ok((0..=t)
            .map(|tp| self.raw_survival(tp, weight))
            .fold(1.0, f64::min))
    }

    /// `effective_survival(t)` for every `t` in `0..=T`.
    pub fn effective_curve(&self, weight: f64) -> Result<Vec<f64>> {
        self.check(0, weight)?;
        let mut out = Vec::with_capacity(self.steps + 1);
        let mut running = 1.0f64;
        for t in 0..=self.steps {
            running = running.min(self.raw_survival(t, weight));
            out.push(running);
        }
        Ok(out)
    }

    /// First step at which a token with coupling draw `u` is masked.
    pub fn mask_time(&self, u: f64, weight: f64) -> Result<usize> {
        let curve = self.effective_curve(weight)?;
        Ok(first_masked_step(&curve, u))
    }
}

fn first_masked_step(curve: &[f64], u: f64) -> usize {
    // curve[T] == 0 <= u, so the search always succeeds
    (1..curve.len())
        .find(|&t| u >= curve[t])
        .unwrap_or(curve.len() - 1)
}

/// One nested forward-masking path for a sequence. Token `i` is masked from
/// step `mask_time[i]` onwards; `None` marks positions that are never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTrajectory {
    pub source: TokenizedSample,
    pub draws: Vec<f64>,
    pub mask_time: Vec<Option<usize>>,
    pub schedule: NoiseSchedule,
}

impl MaskTrajectory {
    /// Builds a trajectory from explicit coupling draws (one per position).
    pub fn from_draws(
        sample: &TokenizedSample,
        weights: &TokenWeights,
        schedule: NoiseSchedule,
        draws: Vec<f64>,
    ) -> Result<Self> {
        if weights.normalized.len() != sample.len() {
            return Err(Error::LengthMismatch {
                expected: sample.len(),
                actual: weights.normalized.len(),
            });
        }
        if draws.len() != sample.len() {
            return Err(Error::LengthMismatch {
                expected: sample.len(),
                actual: draws.len(),
            });
        }
        let mut mask_time = Vec::with_capacity(sample.len());
        for i in 0..sample.len() {
            if sample.maskable[i] {
                let curve = schedule.effective_curve(weights.normalized[i])?;
                mask_time.push(Some(first_masked_step(&curve, draws[i])));
            } else {
                mask_time.push(None);
            }
        }
        Ok(Self {
            source: sample.clone(),
            draws,
            mask_time,
            schedule,
        })
    }

    pub fn is_masked(&self, pos: usize, t: usize) -> bool {
        matches!(self.mask_time[pos], Some(m) if m <= t)
    }

    /// Positions masked at step `t`.
    pub fn masked_set(&self, t: usize) -> Vec<usize> {
        (0..self.mask_time.len())
            .filter(|&i| self.is_masked(i, t))
            .collect()
    }

    /// Positions that become masked exactly at step `t`.
    pub fn newly_masked(&self, t: usize) -> Vec<usize> {
        (0..self.mask_time.len())
            .filter(|&i| self.mask_time[i] == Some(t))
            .collect()
    }
}

/// Draws one coupling value per position (uniform in `[0, 1)`), reused across steps.
pub fn sample_trajectory<R: Rng + ?Sized>(
    sample: &TokenizedSample,
    weights: &TokenWeights,
    schedule: NoiseSchedule,
    rng: &mut R,
) -> Result<MaskTrajectory> {
    let draws = (0..sample.len()).map(|_| rng.gen::<f64>()).collect();
    MaskTrajectory::from_draws(sample, weights, schedule, draws)
}

/// Source ids with every position masked by step `t` replaced by MASK.
pub fn corrupt_at_step(traj: &MaskTrajectory, t: usize) -> Result<Vec<u32>> {
    if t > traj.schedule.steps {
        return Err(Error::StepOutOfRange {
            t,
            steps: traj.schedule.steps,
        });
    }
    Ok(traj
        .source
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| if traj.is_masked(i, t) { Vocab::MASK_ID } else { id })
        .collect())
}

/// Partition of steps `1..=T` into equal contiguous groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGroups {
    pub steps: usize,
    pub groups: usize,
}

impl StepGroups {
    pub fn group_size(&self) -> usize {
        self.steps / self.groups
    }

    /// Steps of 1-based group `index`.
    pub fn group(&self, index: usize) -> Result<RangeInclusive<usize>> {
        if index == 0 || index > self.groups {
            return Err(Error::GroupOutOfRange {
                index,
                groups: self.groups,
            });
        }
        let size = self.group_size();
        Ok((index - 1) * size + 1..=index * size)
    }

    pub fn group_of(&self, step: usize) -> Option<usize> {
        (1..=self.steps)
            .contains(&step)
            .then(|| (step - 1) / self.group_size() + 1)
    }
}

pub fn step_groups(steps: usize, groups: usize) -> Result<StepGroups> {
    if steps == 0 || groups == 0 || !steps.is_multiple_of(groups) {
        return Err(Error::NonDivisibleGroups { steps, groups });
    }
    Ok(StepGroups { steps, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(32, 0.5).unwrap()
    }

    #[test]
    fn sinus_values() {
        assert_eq!(sinus_modulation(0, 32).unwrap(), 0.0);
        assert!((sinus_modulation(16, 32).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(sinus_modulation(32, 32).unwrap(), 0.0);
        assert!(sinus_modulation(33, 32).is_err());
    }

    #[test]
    fn survival_values() {
        let s = sched();
        for w in [0.0, 0.3, 1.0] {
            assert_eq!(s.survival_prob(0, w).unwrap(), 1.0);
            assert_eq!(s.survival_prob(32, w).unwrap(), 0.0);
        }
        assert!(s.survival_prob(16, 1.0).unwrap().abs() < 1e-12);
        let expected = 1.0 - 0.25 - 0.5 * (PI / 4.0).sin() * 0.5;
        assert!((s.survival_prob(8, 0.5).unwrap() - expected).abs() < 1e-12);
        assert!((s.survival_prob(8, 0.5).unwrap() - 0.5732).abs() < 1e-4);
        assert!(s.survival_prob(33, 0.5).is_err());
        assert!(s.survival_prob(3, 1.5).is_err());
    }

    #[test]
    fn effective_survival_cases() {
        let s = sched();
        for t in 16..=32 {
            assert_eq!(s.effective_survival(t, 1.0).unwrap(), 0.0);
        }
        for t in 0..=32 {
            assert_eq!(s.effective_survival(t, 0.0).unwrap(), 1.0 - t as f64 / 32.0);
        }
        // already monotone for small weights
        for t in 0..=32 {
            assert_eq!(
                s.effective_survival(t, 0.1).unwrap(),
                s.survival_prob(t, 0.1).unwrap()
            );
        }
    }

    fn sample(n: usize) -> TokenizedSample {
        TokenizedSample::from_content(&vec![10; n], 0)
    }

    #[test]
    fn mask_time_examples() {
        let s = sched();
        let smp = sample(3);
        let w = TokenWeights::uniform(smp.len());
        let traj = MaskTrajectory::from_draws(&smp, &w, s, vec![0.0; 5]).unwrap();
        assert_eq!(traj.mask_time, vec![None, Some(32), Some(32), Some(32), None]);
        assert_eq!(s.mask_time(0.999, 0.0).unwrap(), 1);
        assert!(s.mask_time(0.6, 1.0).unwrap() <= s.mask_time(0.6, 0.2).unwrap());
    }

    #[test]
    fn corruption_bounds() {
        let s = sched();
        let smp = sample(4);
        let w = TokenWeights::from_raw(vec![0.4, 0.1, 0.3, 0.2, 0.05, 0.0], &smp.maskable).unwrap();
        let mut rng = crate::rng::from_seed(9);
        let traj = sample_trajectory(&smp, &w, s, &mut rng).unwrap();
        assert_eq!(corrupt_at_step(&traj, 0).unwrap(), smp.ids);
        let full = corrupt_at_step(&traj, 32).unwrap();
        assert_eq!(full[0], Vocab::CLS_ID);
        assert_eq!(*full.last().unwrap(), Vocab::SEP_ID);
        assert!(full[1..5].iter().all(|&i| i == Vocab::MASK_ID));
        assert!(corrupt_at_step(&traj, 33).is_err());
    }

    #[test]
    fn weights_from_attention() {
        let smp = sample(2);
        let uniform = Array2::from_elem((4, 4), 0.25);
        let trace = ForwardTrace {
            hidden: Array2::zeros((4, 2)),
            class_logits: vec![],
            lm_logits: None,
            layer_attention: vec![vec![uniform.clone(), uniform.clone(), uniform]],
            pooled: vec![],
        };
        let w = token_weights(&trace, &smp).unwrap();
        assert_eq!(w.raw, vec![0.25; 4]);
        assert_eq!(w.normalized, vec![0.0, 1.0, 1.0, 0.0]);
        assert!(token_weights(&trace, &sample(3)).is_err());
    }

    #[test]
    fn normalization_examples() {
        let maskable = [false, true, true, true, false];
        let w = TokenWeights::from_raw(vec![0.5, 0.1, 0.4, 0.2, 0.3], &maskable).unwrap();
        let expected = [0.0, 0.25, 1.0, 0.5, 0.0];
        for (a, b) in w.normalized.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = TokenWeights::from_raw(vec![0.0; 5], &maskable).unwrap();
        assert!(z.normalized.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn groups() {
        let g = step_groups(32, 8).unwrap();
        assert_eq!(g.group(4).unwrap(), 13..=16);
        assert!(g.group(1).unwrap().contains(&1));
        assert!(g.group(8).unwrap().contains(&32));
        assert!(g.group(0).is_err() && g.group(9).is_err());
        assert_eq!(g.group_of(13), Some(4));
        assert!(matches!(step_groups(32, 5), Err(Error::NonDivisibleGroups { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn effective_is_monotone(lambda in 0.0f64..2.0, w in 0.0f64..=1.0, steps in 1usize..64) {
                let s = NoiseSchedule::new(steps, lambda).unwrap();
                let c = s.effective_curve(w).unwrap();
                prop_assert_eq!(c[0], 1.0);
                prop_assert_eq!(c[steps], 0.0);
                for t in 0..steps {
                    prop_assert!(c[t + 1] <= c[t]);
                }
            }

            #[test]
            fn mask_time_non_increasing_in_weight(u in 0.0f64..1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                let s = NoiseSchedule::default();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(s.mask_time(u, hi).unwrap() <= s.mask_time(u, lo).unwrap());
            }
        }
    }
}
