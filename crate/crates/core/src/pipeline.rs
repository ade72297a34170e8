//! Stage runners shared by the CLI subcommands and the experiment sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::corpus::{build_vocab, load_jsonl, tokenize_all, TokenizedSample, Vocab};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::generator::{train_generator, EpochLoss, GeneratorModel, PROMPT_LEN};
use crate::policies::{evaluate, few_shot_split, partial_split, Metrics};
use crate::rng::{content_hash, derive_seed};
use crate::training::{train_proxy, train_with_noise_resistance, AblationFlags, EpochMetrics};

/// Tokenized train/test splits with the vocabulary built from train.
#[derive(Debug, Clone)]
pub struct Data {
    pub vocab: Vocab,
    pub train: Vec<TokenizedSample>,
    pub test: Vec<TokenizedSample>,
    /// Hash of the raw train and test files.
    pub input_hash: String,
}

/// Longest content that still fits the prompted generator input.
pub fn max_content(cfg: &PipelineConfig) -> usize {
    cfg.max_len.saturating_sub(PROMPT_LEN + 1)
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_data(cfg: &PipelineConfig) -> Result<Data> {
    let (train_path, test_path) = (cfg.train_file(), cfg.test_file());
    let train_raw = load_jsonl(&train_path)?;
    let test_raw = load_jsonl(&test_path)?;
    let vocab = build_vocab(&train_raw, cfg.min_count)?;
    let cap = max_content(cfg);
    let train = tokenize_all(&vocab, &train_raw)?
        .into_iter()
        .map(|s| s.truncated(cap))
        .collect();
    let test = tokenize_all(&vocab, &test_raw)?
        .into_iter()
        .map(|s| s.truncated(cap))
        .collect();
    let input_hash = content_hash(&[&read_file(&train_path)?, &read_file(&test_path)?]);
    Ok(Data {
        vocab,
        train,
        test,
        input_hash,
    })
}

/// Applies the configured few-shot or partial-data split.
pub fn training_split(cfg: &PipelineConfig, train: &[TokenizedSample], fraction: f64, seed: u64) -> Result<Vec<TokenizedSample>> {
    if cfg.shots > 0 {
        few_shot_split(train, cfg.shots, derive_seed(seed, "split", &[]))
    } else if fraction < 1.0 {
        partial_split(train, fraction, derive_seed(seed, "split", &[]))
    } else {
        Ok(train.to_vec())
    }
}

pub fn proxy_stage(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    train: &[TokenizedSample],
    seed: u64,
) -> Result<(EncoderModel, Vec<EpochMetrics>)> {
    let mc = cfg.encoder(vocab.len(), vocab.num_classes(), derive_seed(seed, "proxy-init", &[]));
    let tc = cfg.classifier_train(
        derive_seed(seed, "proxy-train", &[]),
        cfg.proxy_epochs,
        AblationFlags::default(),
        cfg.group_index,
    )?;
    train_proxy(train, mc, &tc)
}

pub fn generator_stage(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    train: &[TokenizedSample],
    proxy: &EncoderModel,
    seed: u64,
    use_label_prompt: bool,
) -> Result<(GeneratorModel, Vec<EpochLoss>)> {
    let mc = cfg.encoder(vocab.len(), vocab.num_classes(), derive_seed(seed, "generator-init", &[]));
    let gc = cfg.generator_train(derive_seed(seed, "generator-train", &[]), use_label_prompt);
    train_generator(train, proxy, vocab, cfg.schedule()?, mc, &gc)
}

pub fn classifier_stage(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    train: &[TokenizedSample],
    gen: Option<&GeneratorModel>,
    seed: u64,
    flags: AblationFlags,
    group_index: usize,
) -> Result<(EncoderModel, Vec<EpochMetrics>)> {
    let mc = cfg.encoder(vocab.len(), vocab.num_classes(), derive_seed(seed, "classifier-init", &[]));
    let tc = cfg.classifier_train(
        derive_seed(seed, "classifier-train", &[]),
        cfg.classifier_epochs,
        flags,
        group_index,
    )?;
    train_with_noise_resistance(train, if flags.use_da { gen } else { None }, mc, &tc)
}

/// Proxy and generator models trained for one seed, reused across the runs
/// of a sweep that share them.
#[derive(Default)]
pub struct StageCache {
    proxies: BTreeMap<u64, EncoderModel>,
    generators: BTreeMap<(u64, bool), GeneratorModel>,
}

impl StageCache {
    pub fn proxy(&mut self, cfg: &PipelineConfig, vocab: &Vocab, train: &[TokenizedSample], seed: u64) -> Result<&EncoderModel> {
        if !self.proxies.contains_key(&seed) {
            let (m, _) = proxy_stage(cfg, vocab, train, seed)?;
            self.proxies.insert(seed, m);
        }
        Ok(&self.proxies[&seed])
    }

    pub fn generator(
        &mut self,
        cfg: &PipelineConfig,
        vocab: &Vocab,
        train: &[TokenizedSample],
        seed: u64,
        use_label_prompt: bool,
    ) -> Result<&GeneratorModel> {
        let key = (seed, use_label_prompt);
        if !self.generators.contains_key(&key) {
            self.proxy(cfg, vocab, train, seed)?;
            let proxy = &self.proxies[&seed];
            let (g, _) = generator_stage(cfg, vocab, train, proxy, seed, use_label_prompt)?;
            self.generators.insert(key, g);
        }
        Ok(&self.generators[&key])
    }
}

/// Trains the full chain for one seed and evaluates on the test split.
#[allow(clippy::too_many_arguments)]
pub fn run_seed(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    train: &[TokenizedSample],
    test: &[TokenizedSample],
    seed: u64,
    flags: AblationFlags,
    group_index: usize,
    cache: &mut StageCache,
) -> Result<Metrics> {
    let gen = if flags.use_da {
        Some(cache.generator(cfg, vocab, train, seed, flags.use_lap)?.clone())
    } else {
        None
    };
    let (model, _) = classifier_stage(cfg, vocab, train, gen.as_ref(), seed, flags, group_index)?;
    evaluate(&model, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub runs: Vec<SeedResult>,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RunSummary {
    pub fn new(name: impl Into<String>, runs: Vec<SeedResult>) -> Self {
        let f1: Vec<f64> = runs.iter().map(|r| r.metrics.macro_f1).collect();
        let acc: Vec<f64> = runs.iter().map(|r| r.metrics.accuracy).collect();
        let (mean_macro_f1, std_macro_f1) = mean_std(&f1);
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        Self {
            name: name.into(),
            runs,
            mean_macro_f1,
            std_macro_f1,
            mean_accuracy,
            std_accuracy,
        }
    }
}

/// Runs one method configuration over every seed of `cfg.seeds`. Seed `s`
/// uses the master seed `derive_seed(cfg.seed, "run", [s])`.
pub fn run_seeds(
    cfg: &PipelineConfig,
    data: &Data,
    name: &str,
    flags: AblationFlags,
    group_index: usize,
    fraction: f64,
    caches: &mut BTreeMap<u64, StageCache>,
) -> Result<RunSummary> {
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let seed = derive_seed(cfg.seed, "run", &[s]);
        let train = training_split(cfg, &data.train, fraction, seed)?;
        let cache = caches.entry(s).or_default();
        let metrics = run_seed(cfg, &data.vocab, &train, &data.test, seed, flags, group_index, cache)?;
        runs.push(SeedResult { seed: s, metrics });
    }
    Ok(RunSummary::new(name, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[]), (0.0, 0.0));
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
    }
}
