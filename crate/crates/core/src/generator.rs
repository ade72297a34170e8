//! Masked diffusion sample generator.
//!
//! Training corrupts each sequence along a label-aware trajectory at a uniform
//! random step and asks the encoder's LM head to restore the original tokens
//! (no timestep input). Generation walks the trajectory backwards from `t*`,
//! revealing at each step the tokens that were masked at that step, so
//! low-weight context comes back first and label-bearing tokens last.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{detokenize, TokenizedSample, Vocab};
use crate::encoder::{
    Batch, EncoderConfig, EncoderModel, HeadMode, MaskedLmExample, OptimizerState,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{
    corrupt_at_step, sample_trajectory, token_weights, MaskTrajectory, NoiseSchedule,
    StepGroups, TokenWeights,
};

/// Positions occupied by `[CLS] <label> [SEP]`.
pub const PROMPT_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub model: EncoderModel,
    pub vocab: Vocab,
    pub schedule: NoiseSchedule,
    /// When false the label slot holds PAD during training and generation.
    pub use_label_prompt: bool,
}

/// `[CLS] <label> [SEP] content... [SEP]` with the masked content positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptedSequence {
    pub ids: Vec<u32>,
    pub content_offset: usize,
    /// Masked positions, in prompted coordinates.
    pub masked: Vec<usize>,
}

impl PromptedSequence {
    /// Prompted position of sample position `pos`.
    pub fn from_sample_pos(pos: usize) -> usize {
        pos + PROMPT_LEN - 1
    }
}

/// Prepends the label prompt to a (partially masked) framed sequence.
pub fn label_prompt(
    sample: &TokenizedSample,
    masked_ids: &[u32],
    vocab: &Vocab,
    use_label_prompt: bool,
    max_len: usize,
) -> Result<PromptedSequence> {
    if masked_ids.len() != sample.len() {
        return Err(Error::LengthMismatch {
            expected: sample.len(),
            actual: masked_ids.len(),
        });
    }
    let slot = if use_label_prompt {
        vocab.label_token(sample.label)
    } else {
        Vocab::PAD_ID
    };
    let mut ids = Vec::with_capacity(masked_ids.len() + PROMPT_LEN - 1);
    ids.extend_from_slice(&[Vocab::CLS_ID, slot, Vocab::SEP_ID]);
    ids.extend_from_slice(&masked_ids[1..]);
    if ids.len() > max_len {
        return Err(Error::Truncation {
            len: ids.len(),
            max_len,
        });
    }
    let masked = (0..masked_ids.len())
        .filter(|&i| sample.maskable[i] && masked_ids[i] == Vocab::MASK_ID)
        .map(PromptedSequence::from_sample_pos)
        .collect();
    Ok(PromptedSequence {
        ids,
        content_offset: PROMPT_LEN,
        masked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub use_label_prompt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

/// Eval-mode token weights from a classifier's last-layer [CLS] attention.
pub fn attention_weights(model: &EncoderModel, sample: &TokenizedSample) -> Result<TokenWeights> {
    let trace = model.forward_eval(&sample.ids, HeadMode::Classify)?;
    token_weights(&trace, sample)
}

/// One denoising training example: corrupt along a fresh trajectory at a
/// uniform step and supervise the masked positions.
#[allow(clippy::too_many_arguments)]
pub fn denoising_example<R: Rng + ?Sized>(
    sample: &TokenizedSample,
    weights: &TokenWeights,
    schedule: NoiseSchedule,
    t: usize,
    vocab: &Vocab,
    use_label_prompt: bool,
    max_len: usize,
    rng: &mut R,
) -> Result<MaskedLmExample> {
    let traj = sample_trajectory(sample, weights, schedule, rng)?;
    let corrupted = corrupt_at_step(&traj, t)?;
    let prompted = label_prompt(sample, &corrupted, vocab, use_label_prompt, max_len)?;
    let targets = prompted
        .masked
        .iter()
        .map(|&p| (p, sample.ids[p + 1 - PROMPT_LEN]))
        .collect();
    Ok(MaskedLmExample {
        ids: prompted.ids,
        targets,
    })
}

/// Trains the denoiser under the label-aware schedule. Token weights come
/// from `proxy`. Returns the model and the mean loss of every epoch.
pub fn train_generator(
    dataset: &[TokenizedSample],
    proxy: &EncoderModel,
    vocab: &Vocab,
    schedule: NoiseSchedule,
    model_config: EncoderConfig,
    config: &GeneratorTrainConfig,
) -> Result<(GeneratorModel, Vec<EpochLoss>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if model_config.vocab_size != vocab.len() {
        return Err(Error::Config("generator vocab_size differs from vocab".into()));
    }
    let mut model = EncoderModel::init(model_config)?;
    let weights: Vec<TokenWeights> = dataset
        .iter()
        .map(|s| attention_weights(proxy, s))
        .collect::<Result<_>>()?;
    let mut opt = OptimizerState::new(&model.config, config.learning_rate, config.weight_decay);
    let mut rng = rng::stream(config.seed, "generator-train", &[]);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t = rng.gen_range(1..=schedule.steps);
                batch.push(denoising_example(
                    &dataset[i],
                    &weights[i],
                    schedule,
                    t,
                    vocab,
                    config.use_label_prompt,
                    model.config.max_len,
                    &mut rng,
                )?);
            }
            if batch.iter().all(|e| e.targets.is_empty()) {
                continue;
            }
            let out = model.loss_and_grads(&Batch::MaskedLm(&batch), Some(&mut rng))?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence("generator loss".into()));
            }
            opt.apply(&mut model, &out.grads)?;
            total += out.loss;
            batches += 1;
        }
        log.push(EpochLoss {
            epoch: epoch + 1,
            loss: if batches > 0 { total / batches as f64 } else { 0.0 },
        });
    }
    Ok((
        GeneratorModel {
            model,
            vocab: vocab.clone(),
            schedule,
            use_label_prompt: config.use_label_prompt,
        },
        log,
    ))
}

/// Where a pseudo sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: usize,
    pub t_star: usize,
    pub group: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub text: String,
    pub label: usize,
    /// Framed ids `[CLS] content [SEP]`.
    pub ids: Vec<u32>,
    pub provenance: Provenance,
}

impl PseudoSample {
    pub fn tokenized(&self) -> TokenizedSample {
        TokenizedSample::from_content(&self.ids[1..self.ids.len() - 1], self.label)
    }
}

fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    candidates: std::ops::Range<u32>,
    temperature: f64,
    rng: &mut R,
) -> u32 {
    let cand = &logits[candidates.start as usize..candidates.end as usize];
    if temperature <= 0.0 {
        return candidates.start + crate::losses::argmax(cand) as u32;
    }
    let max = cand.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = cand.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        x -= p;
        if x < 0.0 {
            return candidates.start + i as u32;
        }
    }
    candidates.end - 1
}

/// Reverse process from `t_star` down to 1. Unmasked source tokens are kept;
/// each step reveals the positions whose mask time equals that step, sampled
/// from one forward pass over content tokens only.
pub fn reverse_generate<R: Rng + ?Sized>(
    gen: &GeneratorModel,
    traj: &MaskTrajectory,
    t_star: usize,
    rng: &mut R,
    temperature: f64,
    provenance: Provenance,
) -> Result<PseudoSample> {
    let source = &traj.source;
    let corrupted = corrupt_at_step(traj, t_star)?;
    let mut prompted = label_prompt(
        source,
        &corrupted,
        &gen.vocab,
        gen.use_label_prompt,
        gen.model.config.max_len,
    )?;
    let candidates = gen.vocab.content_ids();
    if !prompted.masked.is_empty() && candidates.is_empty() {
        return Err(Error::Invalid("vocabulary has no content tokens".into()));
    }
    for t in (1..=t_star).rev() {
        let reveal = traj.newly_masked(t);
        if reveal.is_empty() {
            continue;
        }
        let cache = gen.model.forward_cached::<R>(&prompted.ids, None)?;
        for pos in reveal {
            let p = PromptedSequence::from_sample_pos(pos);
            let logits = gen.model.lm_logits_at(&cache.hidden, p);
            prompted.ids[p] =
                sample_token(logits.as_slice().unwrap(), candidates.clone(), temperature, rng);
        }
    }
    let mut ids = Vec::with_capacity(source.len());
    ids.push(Vocab::CLS_ID);
    ids.extend_from_slice(&prompted.ids[PROMPT_LEN..]);
    let text = detokenize(&gen.vocab, &ids)?;
    Ok(PseudoSample {
        text,
        label: source.label,
        ids,
        provenance: Provenance { t_star, ..provenance },
    })
}

/// `count` pseudo samples for one original: each draws its own trajectory and a
/// `t*` uniformly from the chosen group. Replica `r` uses the RNG stream
/// derived from `(seed, source_id, r)`.
#[allow(clippy::too_many_arguments)]
pub fn generate_for_sample(
    gen: &GeneratorModel,
    sample: &TokenizedSample,
    weights: &TokenWeights,
    groups: StepGroups,
    group_index: usize,
    count: usize,
    seed: u64,
    source_id: usize,
    temperature: f64,
) -> Result<Vec<PseudoSample>> {
    (0..count)
        .map(|r| {
            generate_replica(
                gen,
                sample,
                weights,
                groups,
                group_index,
                seed,
                source_id,
                r,
                temperature,
            )
        })
        .collect()
}

/// Replica `r` of [`generate_for_sample`].
#[allow(clippy::too_many_arguments)]
pub fn generate_replica(
    gen: &GeneratorModel,
    sample: &TokenizedSample,
    weights: &TokenWeights,
    groups: StepGroups,
    group_index: usize,
    seed: u64,
    source_id: usize,
    replica: usize,
    temperature: f64,
) -> Result<PseudoSample> {
    let steps = groups.group(group_index)?;
    let replica_seed = rng::derive_seed(seed, "generate", &[source_id as u64, replica as u64]);
    let mut rng = rng::from_seed(replica_seed);
    let traj = sample_trajectory(sample, weights, gen.schedule, &mut rng)?;
    let t_star = rng.gen_range(steps);
    reverse_generate(
        gen,
        &traj,
        t_star,
        &mut rng,
        temperature,
        Provenance {
            source_id,
            t_star,
            group: group_index,
            seed: replica_seed,
        },
    )
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    role: String,
    schedule: NoiseSchedule,
    use_label_prompt: bool,
}

impl GeneratorModel {
    pub fn save(&self, base: &std::path::Path) -> Result<()> {
        let meta = GeneratorMeta {
            role: "generator".into(),
            schedule: self.schedule,
            use_label_prompt: self.use_label_prompt,
        };
        checkpoint::save(base, &self.model, serde_json::to_value(meta)?)
    }

    pub fn load(base: &std::path::Path, vocab: &Vocab) -> Result<Self> {
        let (model, meta) = checkpoint::load(base)?;
        let meta: GeneratorMeta = serde_json::from_value(meta)?;
        if model.config.vocab_size != vocab.len() {
            return Err(Error::Checkpoint("generator vocab size differs from vocab".into()));
        }
        Ok(Self {
            model,
            vocab: vocab.clone(),
            schedule: meta.schedule,
            use_label_prompt: meta.use_label_prompt,
        })
    }
}
