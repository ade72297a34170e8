//! Flat `section.key=value` pipeline configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorTrainConfig;
use crate::policies::{AugPolicy, PolicyVariant};
use crate::schedule::{step_groups, NoiseSchedule, StepGroups};
use crate::training::{AblationFlags, RefreshPolicy, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projector {
    Pca,
    Tsne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/train.jsonl`.
    pub train_path: Option<PathBuf>,
    /// Defaults to `<out_dir>/test.jsonl`.
    pub test_path: Option<PathBuf>,
    pub synth_classes: Vec<(String, usize)>,
    pub synth_test_per_class: usize,
    pub min_count: usize,

    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,

    pub steps: usize,
    pub lambda: f64,
    pub num_groups: usize,
    pub group_index: usize,

    pub proxy_epochs: usize,
    pub generator_epochs: usize,
    pub classifier_epochs: usize,
    pub batch_size: usize,
    pub generator_batch_size: usize,
    pub learning_rate: f64,
    pub generator_learning_rate: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub aug_per_sample: usize,
    pub refresh: RefreshPolicy,
    pub temperature: f64,

    pub flags: AblationFlags,

    pub policy: PolicyVariant,
    pub fraction: f64,
    pub shots: usize,
    pub partial_fractions: Vec<f64>,

    pub seed: u64,
    pub seeds: Vec<u64>,

    pub projector: Projector,
    pub project_max_sources: usize,
    pub project_per_source: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            train_path: None,
            test_path: None,
            synth_classes: vec![
                ("joy".into(), 300),
                ("sadness".into(), 60),
                ("anger".into(), 30),
            ],
            synth_test_per_class: 100,
            min_count: 1,
            model_dim: 64,
            num_heads: 4,
            num_layers: 2,
            ffn_dim: 128,
            max_len: 64,
            dropout: 0.1,
            steps: 32,
            lambda: 0.5,
            num_groups: 8,
            group_index: 4,
            proxy_epochs: 15,
            generator_epochs: 60,
            classifier_epochs: 15,
            batch_size: 16,
            generator_batch_size: 16,
            learning_rate: 3e-4,
            generator_learning_rate: 1e-3,
            weight_decay: 0.01,
            tau: 1.0,
            aug_per_sample: 4,
            refresh: RefreshPolicy::PerEpoch,
            temperature: 1.0,
            flags: AblationFlags::default(),
            policy: PolicyVariant::NSamplesEach(4),
            fraction: 1.0,
            shots: 0,
            partial_fractions: vec![0.05, 0.2, 0.35, 0.5, 1.0],
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            projector: Projector::Pca,
            project_max_sources: 50,
            project_per_source: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{value}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Reads a config file, then applies `overrides` and `env_seed` in that order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        if let Some(seed) = env_seed {
            cfg.set("run.seed", seed)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            "data.train" => self.train_path = Some(PathBuf::from(value)),
            "data.test" => self.test_path = Some(PathBuf::from(value)),
            "data.synth_classes" => {
                self.synth_classes = value
                    .split(',')
                    .map(|pair| {
                        let (name, n) = pair.trim().split_once(':').ok_or_else(|| {
                            Error::Config(format!("{key}: expected name:count, got '{pair}'"))
                        })?;
                        Ok((name.trim().to_string(), parse(key, n.trim())?))
                    })
                    .collect::<Result<_>>()?
            }
            "data.synth_test_per_class" => self.synth_test_per_class = parse(key, value)?,
            "data.min_count" => self.min_count = parse(key, value)?,
            "model.dim" => self.model_dim = parse(key, value)?,
            "model.heads" => self.num_heads = parse(key, value)?,
            "model.layers" => self.num_layers = parse(key, value)?,
            "model.ffn" => self.ffn_dim = parse(key, value)?,
            "model.max_len" => self.max_len = parse(key, value)?,
            "model.dropout" => self.dropout = parse(key, value)?,
            "schedule.T" => self.steps = parse(key, value)?,
            "schedule.lambda" => self.lambda = parse(key, value)?,
            "schedule.groups" => self.num_groups = parse(key, value)?,
            "schedule.group_index" => self.group_index = parse(key, value)?,
            "train.proxy_epochs" => self.proxy_epochs = parse(key, value)?,
            "train.generator_epochs" => self.generator_epochs = parse(key, value)?,
            "train.classifier_epochs" => self.classifier_epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.generator_batch_size" => self.generator_batch_size = parse(key, value)?,
            "train.lr" => self.learning_rate = parse(key, value)?,
            "train.generator_lr" => self.generator_learning_rate = parse(key, value)?,
            "train.weight_decay" => self.weight_decay = parse(key, value)?,
            "train.tau" => self.tau = parse(key, value)?,
            "train.aug_per_sample" => self.aug_per_sample = parse(key, value)?,
            "train.refresh" => {
                self.refresh = match value {
                    "per_epoch" => RefreshPolicy::PerEpoch,
                    "per_batch" => RefreshPolicy::PerBatch,
                    _ => return Err(Error::Config(format!("{key}: expected per_epoch or per_batch"))),
                }
            }
            "train.temperature" => self.temperature = parse(key, value)?,
            "ablation.use_da" => self.flags.use_da = parse_bool(key, value)?,
            "ablation.use_lap" => self.flags.use_lap = parse_bool(key, value)?,
            "ablation.use_nrt" => self.flags.use_nrt = parse_bool(key, value)?,
            "policy.kind" => {
                let n = match self.policy {
                    PolicyVariant::NSamplesEach(n) => n,
                    PolicyVariant::BalanceDistribution => 4,
                };
                self.policy = match value {
                    "balance" => PolicyVariant::BalanceDistribution,
                    "n_each" => PolicyVariant::NSamplesEach(n),
                    _ => return Err(Error::Config(format!("{key}: expected balance or n_each"))),
                }
            }
            "policy.n" => {
                let n = parse(key, value)?;
                if let PolicyVariant::NSamplesEach(_) = self.policy {
                    self.policy = PolicyVariant::NSamplesEach(n);
                } else if n == 0 {
                    return Err(Error::Config("policy.n must be >= 1".into()));
                }
            }
            "split.fraction" => self.fraction = parse(key, value)?,
            "split.shots" => self.shots = parse(key, value)?,
            "split.fractions" => self.partial_fractions = parse_list(key, value)?,
            "run.seed" => self.seed = parse(key, value)?,
            "run.seeds" => self.seeds = parse_list(key, value)?,
            "project.method" => {
                self.projector = match value {
                    "pca" => Projector::Pca,
                    "tsne" => Projector::Tsne,
                    _ => return Err(Error::Config(format!("{key}: expected pca or tsne"))),
                }
            }
            "project.max_sources" => self.project_max_sources = parse(key, value)?,
            "project.per_source" => self.project_per_source = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.seeds.is_empty() {
            return fail("run.seeds must be non-empty");
        }
        if self.synth_classes.len() < 2 {
            return fail("data.synth_classes needs at least two classes");
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return fail("split.fraction must lie in (0, 1]");
        }
        if self.partial_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return fail("split.fractions must lie in (0, 1]");
        }
        if self.batch_size < 2 || self.generator_batch_size == 0 {
            return fail("batch sizes too small (train.batch_size >= 2)");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return fail("train.tau must be > 0");
        }
        if self.policy == PolicyVariant::NSamplesEach(0) {
            return fail("policy.n must be >= 1");
        }
        let schedule = self
            .schedule()
            .and_then(|_| self.groups())
            .and_then(|g| g.group(self.group_index).map(|_| ()));
        schedule.map_err(|e| Error::Config(e.to_string()))
    }

    /// Every setting as `key -> value`, defaults included.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let entries: Vec<(&str, String)> = vec![
            ("run.out_dir", self.out_dir.display().to_string()),
            ("data.train", path(&self.train_path)),
            ("data.test", path(&self.test_path)),
            (
                "data.synth_classes",
                self.synth_classes
                    .iter()
                    .map(|(n, c)| format!("{n}:{c}"))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("data.synth_test_per_class", self.synth_test_per_class.to_string()),
            ("data.min_count", self.min_count.to_string()),
            ("model.dim", self.model_dim.to_string()),
            ("model.heads", self.num_heads.to_string()),
            ("model.layers", self.num_layers.to_string()),
            ("model.ffn", self.ffn_dim.to_string()),
            ("model.max_len", self.max_len.to_string()),
            ("model.dropout", self.dropout.to_string()),
            ("schedule.T", self.steps.to_string()),
            ("schedule.lambda", self.lambda.to_string()),
            ("schedule.groups", self.num_groups.to_string()),
            ("schedule.group_index", self.group_index.to_string()),
            ("train.proxy_epochs", self.proxy_epochs.to_string()),
            ("train.generator_epochs", self.generator_epochs.to_string()),
            ("train.classifier_epochs", self.classifier_epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.generator_batch_size", self.generator_batch_size.to_string()),
            ("train.lr", self.learning_rate.to_string()),
            ("train.generator_lr", self.generator_learning_rate.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.tau", self.tau.to_string()),
            ("train.aug_per_sample", self.aug_per_sample.to_string()),
            (
                "train.refresh",
                match self.refresh {
                    RefreshPolicy::PerEpoch => "per_epoch",
                    RefreshPolicy::PerBatch => "per_batch",
                }
                .into(),
            ),
            ("train.temperature", self.temperature.to_string()),
            ("ablation.use_da", self.flags.use_da.to_string()),
            ("ablation.use_lap", self.flags.use_lap.to_string()),
            ("ablation.use_nrt", self.flags.use_nrt.to_string()),
            (
                "policy.kind",
                match self.policy {
                    PolicyVariant::BalanceDistribution => "balance",
                    PolicyVariant::NSamplesEach(_) => "n_each",
                }
                .into(),
            ),
            (
                "policy.n",
                match self.policy {
                    PolicyVariant::NSamplesEach(n) => n.to_string(),
                    PolicyVariant::BalanceDistribution => String::new(),
                },
            ),
            ("split.fraction", self.fraction.to_string()),
            ("split.shots", self.shots.to_string()),
            ("split.fractions", join(&self.partial_fractions)),
            ("run.seed", self.seed.to_string()),
            ("run.seeds", join(&self.seeds)),
            (
                "project.method",
                match self.projector {
                    Projector::Pca => "pca",
                    Projector::Tsne => "tsne",
                }
                .into(),
            ),
            ("project.max_sources", self.project_max_sources.to_string()),
            ("project.per_source", self.project_per_source.to_string()),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn train_file(&self) -> PathBuf {
        self.train_path.clone().unwrap_or_else(|| self.out_dir.join("train.jsonl"))
    }

    pub fn test_file(&self) -> PathBuf {
        self.test_path.clone().unwrap_or_else(|| self.out_dir.join("test.jsonl"))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.lambda)
    }

    pub fn groups(&self) -> Result<StepGroups> {
        step_groups(self.steps, self.num_groups)
    }

    pub fn encoder(&self, vocab_size: usize, num_classes: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.max_len,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            ffn_dim: self.ffn_dim,
            num_classes,
            dropout: self.dropout,
            seed,
        }
    }

    pub fn classifier_train(&self, seed: u64, epochs: usize, flags: AblationFlags, group_index: usize) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs,
            batch_size: self.batch_size,
            tau: self.tau,
            aug_per_sample: self.aug_per_sample,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed,
            refresh: self.refresh,
            flags,
            groups: self.groups()?,
            group_index,
            temperature: self.temperature,
        })
    }

    pub fn generator_train(&self, seed: u64, use_label_prompt: bool) -> GeneratorTrainConfig {
        GeneratorTrainConfig {
            epochs: self.generator_epochs,
            batch_size: self.generator_batch_size,
            learning_rate: self.generator_learning_rate,
            weight_decay: self.weight_decay,
            seed,
            use_label_prompt,
        }
    }

    pub fn aug_policy(&self, seed: u64) -> Result<AugPolicy> {
        Ok(AugPolicy {
            variant: self.policy,
            groups: self.groups()?,
            group_index: self.group_index,
            seed,
            temperature: self.temperature,
        })
    }
}
