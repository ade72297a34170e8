//! Proxy training, reflective augmentation and noise-resistant training of the
//! classifier.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedSample;
use crate::encoder::{
    Batch, ClassifyExample, EncoderConfig, EncoderModel, NoiseResistantGroup, OptimizerState,
};
use crate::error::{Error, Result};
use crate::generator::{attention_weights, generate_for_sample, GeneratorModel, PseudoSample};
use crate::losses::LossFlags;
use crate::rng;
use crate::schedule::StepGroups;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPolicy {
    /// Regenerate pseudo samples once at the start of every epoch.
    PerEpoch,
    /// Regenerate for each batch right before its update.
    PerBatch,
}

/// Module switches mirrored by the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_da: bool,
    pub use_lap: bool,
    pub use_nrt: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_da: true,
            use_lap: true,
            use_nrt: true,
        }
    }
}

impl AblationFlags {
    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            use_da: self.use_da,
            use_nrt: self.use_nrt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    /// Pseudo samples per original (B).
    pub aug_per_sample: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub refresh: RefreshPolicy,
    pub flags: AblationFlags,
    pub groups: StepGroups,
    pub group_index: usize,
    pub temperature: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.flags.use_nrt && self.batch_size < 2 {
            return Err(Error::Config("contrastive loss needs batch_size >= 2".into()));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        self.groups.group(self.group_index)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_c")]
    pub contrastive: f64,
    #[serde(rename = "L_e")]
    pub classification: f64,
    #[serde(rename = "L")]
    pub total: f64,
    pub train_acc: f64,
}

/// Shuffles and splits into batches so that every batch holds at least two
/// classes whenever the labels do. Classes are spread evenly through the epoch
/// and a trailing singleton batch is merged into its predecessor.
pub fn stratified_batches<R: Rng + ?Sized>(
    labels: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(labels.len());
    for members in by_class.iter_mut() {
        members.shuffle(rng);
        let n = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            keyed.push(((rank as f64 + rng.gen::<f64>()) / n, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    let bs = batch_size.max(1);
    let distinct = by_class.iter().filter(|c| !c.is_empty()).count();
    if distinct >= 2 && bs >= 2 {
        repair_single_class_batches(&mut order, labels, bs);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(bs).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

fn repair_single_class_batches(order: &mut [usize], labels: &[usize], bs: usize) {
    let n = order.len();
    let nb = n.div_ceil(bs);
    let batch_classes = |order: &[usize], b: usize| -> Vec<usize> {
        let mut c: Vec<usize> = order[b * bs..((b + 1) * bs).min(n)]
            .iter()
            .map(|&i| labels[i])
            .collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    for b in 0..nb {
        let start = b * bs;
        let end = ((b + 1) * bs).min(n);
        if end - start < 2 || batch_classes(order, b).len() >= 2 {
            continue;
        }
        let class = labels[order[start]];
        // take a different-class element from a batch that can spare it
        'search: for ob in (0..nb).filter(|&x| x != b) {
            let os = ob * bs;
            let oe = ((ob + 1) * bs).min(n);
            for j in os..oe {
                if labels[order[j]] == class {
                    continue;
                }
                order.swap(end - 1, j);
                let ok_other = oe - os < 2 || batch_classes(order, ob).len() >= 2;
                if ok_other {
                    break 'search;
                }
                order.swap(end - 1, j);
            }
        }
    }
}

fn classify_example(s: &TokenizedSample) -> ClassifyExample {
    ClassifyExample {
        ids: s.ids.clone(),
        label: s.label,
    }
}

/// Pseudo samples for a batch of originals, with token weights taken from
/// the current classifier rather than the proxy.
#[allow(clippy::too_many_arguments)]
pub fn reflective_augment(
    tc_model: &EncoderModel,
    gen: &GeneratorModel,
    batch: &[(usize, &TokenizedSample)],
    groups: StepGroups,
    group_index: usize,
    count: usize,
    seed: u64,
    temperature: f64,
) -> Result<Vec<Vec<PseudoSample>>> {
    batch
        .iter()
        .map(|&(id, sample)| {
            let weights = attention_weights(tc_model, sample)?;
            generate_for_sample(gen, sample, &weights, groups, group_index, count, seed, id, temperature)
        })
        .collect()
}

fn num_classes(dataset: &[TokenizedSample]) -> usize {
    let mut seen: Vec<usize> = dataset.iter().map(|s| s.label).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Plain cross-entropy training on originals only.
pub fn train_proxy(
    dataset: &[TokenizedSample],
    model_config: EncoderConfig,
    config: &TrainConfig,
) -> Result<(EncoderModel, Vec<EpochMetrics>)> {
    let classes = num_classes(dataset);
    if !dataset.is_empty() && classes < 2 {
        return Err(Error::SingleClass(classes));
    }
    let mut cfg = config.clone();
    cfg.flags.use_da = false;
    cfg.flags.use_nrt = false;
    train_with_noise_resistance(dataset, None, model_config, &cfg)
}

/// Mini-batch training on `L_c + L_e`. Pseudo samples are regenerated by
/// [`reflective_augment`] per epoch or per batch; with both D.A. and N.R.T.
/// disabled this is plain cross-entropy fine-tuning.
pub fn train_with_noise_resistance(
    dataset: &[TokenizedSample],
    gen: Option<&GeneratorModel>,
    model_config: EncoderConfig,
    config: &TrainConfig,
) -> Result<(EncoderModel, Vec<EpochMetrics>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    config.validate()?;
    let gen = match (config.flags.use_da && config.aug_per_sample > 0, gen) {
        (true, None) => return Err(Error::Invalid("augmentation enabled without a generator".into())),
        (true, Some(g)) => Some(g),
        (false, _) => None,
    };
    let mut model = EncoderModel::init(model_config)?;
    let mut opt = OptimizerState::new(&model.config, config.learning_rate, config.weight_decay);
    let mut rng = rng::stream(config.seed, "classifier-train", &[]);
    let labels: Vec<usize> = dataset.iter().map(|s| s.label).collect();
    let use_plain = !config.flags.use_da && !config.flags.use_nrt;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let batches = stratified_batches(&labels, config.batch_size, &mut rng);
        let mut epoch_pseudo: Option<Vec<Vec<PseudoSample>>> = None;
        if let (Some(g), RefreshPolicy::PerEpoch) = (gen, config.refresh) {
            let all: Vec<(usize, &TokenizedSample)> = dataset.iter().enumerate().collect();
            let seed = rng::derive_seed(config.seed, "reflective", &[epoch as u64]);
            epoch_pseudo = Some(reflective_augment(
                &model,
                g,
                &all,
                config.groups,
                config.group_index,
                config.aug_per_sample,
                seed,
                config.temperature,
            )?);
        }
        let (mut lc, mut le, mut lt) = (0.0, 0.0, 0.0);
        let (mut correct, mut counted) = (0usize, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let out = if use_plain {
                let examples: Vec<ClassifyExample> =
                    batch.iter().map(|&i| classify_example(&dataset[i])).collect();
                model.loss_and_grads(&Batch::Classify(&examples), Some(&mut rng))?
            } else {
                let pseudo: Vec<Vec<PseudoSample>> = match (gen, &epoch_pseudo) {
                    (None, _) => vec![Vec::new(); batch.len()],
                    (Some(_), Some(all)) => batch.iter().map(|&i| all[i].clone()).collect(),
                    (Some(g), None) => {
                        let members: Vec<(usize, &TokenizedSample)> =
                            batch.iter().map(|&i| (i, &dataset[i])).collect();
                        let seed =
                            rng::derive_seed(config.seed, "reflective", &[epoch as u64, bi as u64]);
                        reflective_augment(
                            &model,
                            g,
                            &members,
                            config.groups,
                            config.group_index,
                            config.aug_per_sample,
                            seed,
                            config.temperature,
                        )?
                    }
                };
                let groups: Vec<NoiseResistantGroup> = batch
                    .iter()
                    .zip(pseudo)
                    .map(|(&i, ps)| NoiseResistantGroup {
                        original: classify_example(&dataset[i]),
                        pseudo: ps
                            .iter()
                            .map(|p| ClassifyExample {
                                ids: p.ids.clone(),
                                label: dataset[i].label,
                            })
                            .collect(),
                    })
                    .collect();
                model.loss_and_grads(
                    &Batch::NoiseResistant {
                        groups: &groups,
                        tau: config.tau,
                        flags: config.flags.loss_flags(),
                    },
                    Some(&mut rng),
                )?
            };
            if !out.loss.is_finite() {
                return Err(Error::Divergence("classifier loss".into()));
            }
            opt.apply(&mut model, &out.grads)?;
            lc += out.contrastive;
            le += out.cross_entropy;
            lt += out.loss;
            correct += out.correct;
            counted += out.counted;
        }
        let nb = batches.len().max(1) as f64;
        log.push(EpochMetrics {
            epoch: epoch + 1,
            contrastive: lc / nb,
            classification: le / nb,
            total: lt / nb,
            train_acc: if counted > 0 {
                correct as f64 / counted as f64
            } else {
                0.0
            },
        });
    }
    Ok((model, log))
}
