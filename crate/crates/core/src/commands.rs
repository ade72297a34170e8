//! CLI subcommands. Each writes its artifacts under `run.out_dir`, a
//! deterministic `<command>_metrics.json` and a `<command>_report.json` that
//! additionally records wall-clock time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{self, write_atomic};
use crate::config::{PipelineConfig, Projector};
use crate::corpus::{
    class_counts, synth_corpus, synth_disjoint, to_jsonl, LabeledSample, SynthSpec, TokenizedSample,
    Vocab,
};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::generator::{attention_weights, generate_for_sample, GeneratorModel, PseudoSample};
use crate::pipeline::{
    classifier_stage, generator_stage, load_data, proxy_stage, read_file, run_seeds,
    training_split, Data, RunSummary,
};
use crate::policies::{augment, evaluate, Metrics};
use crate::projection::{pca_2d, tsne_2d};
use crate::rng::{content_hash, derive_seed};
use crate::training::AblationFlags;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SynthData,
    TrainProxy,
    TrainGenerator,
    Augment,
    TrainClassifier,
    Evaluate,
    SweepGroups,
    Ablation,
    PartialData,
    Project,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::SynthData,
        Command::TrainProxy,
        Command::TrainGenerator,
        Command::Augment,
        Command::TrainClassifier,
        Command::Evaluate,
        Command::SweepGroups,
        Command::Ablation,
        Command::PartialData,
        Command::Project,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::TrainProxy => "train-proxy",
            Command::TrainGenerator => "train-generator",
            Command::Augment => "augment",
            Command::TrainClassifier => "train-classifier",
            Command::Evaluate => "evaluate",
            Command::SweepGroups => "sweep-groups",
            Command::Ablation => "ablation",
            Command::PartialData => "partial-data",
            Command::Project => "project",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    fn file_stem(self) -> String {
        self.name().replace('-', "_")
    }
}

pub fn metrics_path(cfg: &PipelineConfig, cmd: Command) -> PathBuf {
    cfg.out_dir.join(format!("{}_metrics.json", cmd.file_stem()))
}

pub fn report_path(cfg: &PipelineConfig, cmd: Command) -> PathBuf {
    cfg.out_dir.join(format!("{}_report.json", cmd.file_stem()))
}

fn stage_base(cfg: &PipelineConfig, stage: &str) -> PathBuf {
    cfg.out_dir.join(stage)
}

fn require_stage(cfg: &PipelineConfig, stage: &'static str) -> Result<PathBuf> {
    let base = stage_base(cfg, stage);
    if checkpoint::exists(&base) {
        Ok(base)
    } else {
        Err(Error::MissingStage {
            stage,
            path: checkpoint::manifest_path(&base),
        })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

fn model_hash(model: &EncoderModel) -> String {
    let bytes: Vec<u8> = crate::encoder::flatten(&model.params)
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    content_hash(&[&bytes])
}

fn named_counts(vocab: &Vocab, samples: &[TokenizedSample]) -> BTreeMap<String, usize> {
    class_counts(samples, vocab.num_classes())
        .into_iter()
        .enumerate()
        .map(|(c, n)| (vocab.class_name(c).to_string(), n))
        .collect()
}

/// Runs `cmd`, writes its metrics and report files, and returns the metrics
/// document.
pub fn execute(cmd: Command, cfg: &PipelineConfig) -> Result<Value> {
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let (results, input_hash) = match cmd {
        Command::SynthData => synth_data(cfg)?,
        Command::TrainProxy => train_proxy_cmd(cfg)?,
        Command::TrainGenerator => train_generator_cmd(cfg)?,
        Command::Augment => augment_cmd(cfg)?,
        Command::TrainClassifier => train_classifier_cmd(cfg)?,
        Command::Evaluate => evaluate_cmd(cfg)?,
        Command::SweepGroups => sweep_groups(cfg)?,
        Command::Ablation => ablation(cfg)?,
        Command::PartialData => partial_data(cfg)?,
        Command::Project => project(cfg)?,
    };
    let metrics = json!({
        "command": cmd.name(),
        "config": cfg.snapshot(),
        "input_hash": input_hash,
        "results": results,
    });
    write_json(&metrics_path(cfg, cmd), &metrics)?;
    let mut report = metrics.clone();
    report["wall_clock_secs"] = json!(started.elapsed().as_secs_f64());
    write_json(&report_path(cfg, cmd), &report)?;
    Ok(metrics)
}

fn synth_data(cfg: &PipelineConfig) -> Result<(Value, String)> {
    let spec = SynthSpec {
        classes: cfg.synth_classes.clone(),
        seed: cfg.seed,
    };
    let train = synth_corpus(&spec)?;
    let test_spec = SynthSpec {
        classes: cfg
            .synth_classes
            .iter()
            .map(|(name, _)| (name.clone(), cfg.synth_test_per_class))
            .collect(),
        seed: cfg.seed,
    };
    let test = synth_disjoint(&test_spec, &train)?;
    let (train_text, test_text) = (to_jsonl(&train)?, to_jsonl(&test)?);
    write_atomic(&cfg.train_file(), train_text.as_bytes())?;
    write_atomic(&cfg.test_file(), test_text.as_bytes())?;
    let counts = |s: &[LabeledSample]| {
        let mut m: BTreeMap<&str, usize> = BTreeMap::new();
        for x in s {
            *m.entry(x.label.as_str()).or_default() += 1;
        }
        json!(m)
    };
    let train_hash = content_hash(&[train_text.as_bytes()]);
    let test_hash = content_hash(&[test_text.as_bytes()]);
    let results = json!({
        "train_lines": train.len(),
        "test_lines": test.len(),
        "train_counts": counts(&train),
        "test_counts": counts(&test),
        "train_hash": train_hash,
        "test_hash": test_hash,
    });
    Ok((results, content_hash(&[train_text.as_bytes(), test_text.as_bytes()])))
}

fn prepared(cfg: &PipelineConfig) -> Result<(Data, Vec<TokenizedSample>)> {
    let data = load_data(cfg)?;
    write_atomic(&cfg.out_dir.join("vocab.json"), data.vocab.to_json()?.as_bytes())?;
    let train = training_split(cfg, &data.train, cfg.fraction, cfg.seed)?;
    Ok((data, train))
}

fn train_proxy_cmd(cfg: &PipelineConfig) -> Result<(Value, String)> {
    let (data, train) = prepared(cfg)?;
    let (proxy, log) = proxy_stage(cfg, &data.vocab, &train, cfg.seed)?;
    checkpoint::save(&stage_base(cfg, "proxy"), &proxy, json!({"role": "proxy"}))?;
    write_json_lines(&cfg.out_dir.join("proxy_log.jsonl"), &log)?;
    let test = evaluate(&proxy, &data.test)?;
    let results = json!({
        "train_size": train.len(),
        "epochs": log,
        "test": test,
        "parameter_hash": model_hash(&proxy),
    });
    Ok((results, data.input_hash))
}

fn load_proxy(cfg: &PipelineConfig) -> Result<EncoderModel> {
    Ok(checkpoint::load(&require_stage(cfg, "proxy")?)?.0)
}

fn load_generator(cfg: &PipelineConfig, vocab: &Vocab) -> Result<GeneratorModel> {
    GeneratorModel::load(&require_stage(cfg, "generator")?, vocab)
}

fn train_generator_cmd(cfg: &PipelineConfig) -> Result<(Value, String)> {
    let proxy = load_proxy(cfg)?;
    let (data, train) = prepared(cfg)?;
    let (gen, log) = generator_stage(cfg, &data.vocab, &train, &proxy, cfg.seed, cfg.flags.use_lap)?;
    gen.save(&stage_base(cfg, "generator"))?;
    write_json_lines(&cfg.out_dir.join("generator_log.jsonl"), &log)?;
    let results = json!({
        "train_size": train.len(),
        "use_label_prompt": cfg.flags.use_lap,
        "epochs": log,
        "parameter_hash": model_hash(&gen.model),
    });
    Ok((results, data.input_hash))
}

#[derive(Serialize)]
struct PseudoLine<'a> {
    text: &'a str,
    label: &'a str,
    source_id: usize,
    t_star: usize,
    group: usize,
    seed: u64,
}

fn pseudo_jsonl(vocab: &Vocab, pseudo: &[PseudoSample]) -> Result<String> {
    let mut text = String::new();
    for p in pseudo {
        let line = PseudoLine {
            text: &p.text,
            label: vocab.class_name(p.label),
            source_id: p.provenance.source_id,
            t_star: p.provenance.t_star,
            group: p.provenance.group,
            seed: p.provenance.seed,
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    Ok(text)
}

fn augment_cmd(cfg: &PipelineConfig) -> Result<(Value, String)> {
    let proxy = load_proxy(cfg)?;
    let (data, train) = prepared(cfg)?;
    let gen = load_generator(cfg, &data.vocab)?;
    let policy = cfg.aug_policy(derive_seed(cfg.seed, "augment", &[]))?;
    let pseudo = augment(&train, data.vocab.num_classes(), &gen, &proxy, &policy)?;
    let text = pseudo_jsonl(&data.vocab, &pseudo)?;
    write_atomic(&cfg.out_dir.join("pseudo.jsonl"), text.as_bytes())?;
    let generated: Vec<TokenizedSample> = pseudo.iter().map(PseudoSample::tokenized).collect();
    let mut all = train.clone();
    all.extend(generated.iter().cloned());
    let results = json!({
        "originals": train.len(),
        "pseudo_lines": pseudo.len(),
        "original_counts": named_counts(&data.vocab, &train),
        "pseudo_counts": named_counts(&data.vocab, &generated),
        "augmented_counts": named_counts(&data.vocab, &all),
        "pseudo_hash": content_hash(&[text.as_bytes()]),
    });
    Ok((results, data.input_hash))
}

fn train_classifier_cmd(cfg: &PipelineConfig) -> Result<(Value, String)> {
    let gen_base = if cfg.flags.use_da {
        Some(require_stage(cfg, "generator")?)
    } else {
        None
    };
    let (data, train) = prepared(cfg)?;
    let gen = gen_base
        .map(|b| GeneratorModel::load(&b, &data.vocab))
        .transpose()?;
    let (model, log) = classifier_stage(
        cfg,
        &data.vocab,
        &train,
        gen.as_ref(),
        cfg.seed,
        cfg.flags,
        cfg.group_index,
    )?;
    checkpoint::save(
        &stage_base(cfg, "classifier"),
        &model,
        json!({"role": "classifier", "flags": cfg.flags}),
    )?;
    write_json_lines(&cfg.out_dir.join("classifier_log.jsonl"), &log)?;
    let results = json!({
        "train_size": train.len(),
        "epochs": log,
        "parameter_hash": model_hash(&model),
    });
    Ok((results, data.input_hash))
}

fn evaluate_cmd(cfg: &PipelineConfig) -> Result<(Value, String)> {
    let base = require_stage(cfg, "classifier")?;
    let data = load_data(cfg)?;
    let (model, _) = checkpoint::load(&base)?;
    let metrics: Metrics = evaluate(&model, &data.test)?;
    let results = json!({
        "classes": data.vocab.classes(),
        "test_size": data.test.len(),
        "metrics": metrics,
    });
    Ok((results, data.input_hash))
}

fn summary_row(s: &RunSummary) -> Vec<String> {
    vec![
        s.name.clone(),
        format!("{:.6}", s.mean_macro_f1),
        format!("{:.6}", s.std_macro_f1),
    ]
}

fn sweep_groups(cfg: &PipelineConfig) -> Result<(Value, String)> {
    let data = load_data(cfg)?;
    let flags = AblationFlags {
        use_da: true,
        ..cfg.flags
    };
    let mut caches = BTreeMap::new();
    let mut rows = Vec::with_capacity(cfg.num_groups);
    for g in 1..=cfg.num_groups {
        rows.push(run_seeds(cfg, &data, &g.to_string(), flags, g, cfg.fraction, &mut caches)?);
    }
    write_csv(
        &cfg.out_dir.join("sweep_groups.csv"),
        &["group", "mean_macro_f1", "std_macro_f1"],
        &rows.iter().map(summary_row).collect::<Vec<_>>(),
    )?;
    let means: Vec<f64> = rows.iter().map(|r| r.mean_macro_f1).collect();
    let peak = means
        .iter()
        .enumerate()
        .fold(0, |best, (i, &m)| if m > means[best] { i } else { best });
    let unimodal = means[..=peak].windows(2).all(|w| w[0] <= w[1])
        && means[peak..].windows(2).all(|w| w[0] >= w[1]);
    let results = json!({
        "groups": rows,
        "peak_group": peak + 1,
        "unimodal": unimodal,
    });
    Ok((results, data.input_hash))
}

/// The five ablation configurations in report order.
pub fn ablation_grid() -> [(&'static str, AblationFlags); 5] {
    let full = AblationFlags::default();
    [
        ("full", full),
        ("without_da", AblationFlags { use_da: false, ..full }),
        ("without_lap", AblationFlags { use_lap: false, ..full }),
        ("without_nrt", AblationFlags { use_nrt: false, ..full }),
        (
            "raw",
            AblationFlags {
                use_da: false,
                use_nrt: false,
                ..full
            },
        ),
    ]
}

/// Band by which an ablation may beat the full method before the ordering
/// check fails.
pub const DOMINANCE_BAND: f64 = 0.02;

fn ablation(cfg: &PipelineConfig) -> Result<(Value, String)> {
    let data = load_data(cfg)?;
    let mut caches = BTreeMap::new();
    let mut rows = Vec::new();
    for (name, flags) in ablation_grid() {
        rows.push((flags, run_seeds(cfg, &data, name, flags, cfg.group_index, cfg.fraction, &mut caches)?));
    }
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|(f, s)| {
            let mut r = summary_row(s);
            r.insert(1, f.use_da.to_string());
            r.insert(2, f.use_lap.to_string());
            r.insert(3, f.use_nrt.to_string());
            r.push(format!("{:.6}", s.mean_accuracy));
            r
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("ablation.csv"),
        &["config", "use_da", "use_lap", "use_nrt", "mean_macro_f1", "std_macro_f1", "mean_accuracy"],
        &csv_rows,
    )?;
    let full = rows[0].1.mean_macro_f1;
    let violations: Vec<&str> = rows[1..]
        .iter()
        .filter(|(_, s)| full < s.mean_macro_f1 - DOMINANCE_BAND)
        .map(|(_, s)| s.name.as_str())
        .collect();
    let results = json!({
        "rows": rows.iter().map(|(f, s)| json!({"flags": f, "summary": s})).collect::<Vec<_>>(),
        "dominance_check": {
            "band": DOMINANCE_BAND,
            "passed": violations.is_empty(),
            "violations": violations,
        },
    });
    Ok((results, data.input_hash))
}

fn partial_data(cfg: &PipelineConfig) -> Result<(Value, String)> {
    let data = load_data(cfg)?;
    let grid = ablation_grid();
    let methods = [grid[4], grid[0]];
    let mut rows = Vec::new();
    let mut csv_rows = Vec::new();
    for &fraction in &cfg.partial_fractions {
        // proxy and generator depend on the subset, so nothing is shared
        // across fractions
        let mut caches = BTreeMap::new();
        for (name, flags) in methods {
            let s = run_seeds(cfg, &data, name, flags, cfg.group_index, fraction, &mut caches)?;
            let mut r = summary_row(&s);
            r.insert(0, fraction.to_string());
            csv_rows.push(r);
            rows.push(json!({"fraction": fraction, "summary": s}));
        }
    }
    write_csv(
        &cfg.out_dir.join("partial_data.csv"),
        &["fraction", "method", "mean_macro_f1", "std_macro_f1"],
        &csv_rows,
    )?;
    Ok((json!({ "rows": rows }), data.input_hash))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn project(cfg: &PipelineConfig) -> Result<(Value, String)> {
    let base = require_stage(cfg, "classifier")?;
    let (data, train) = prepared(cfg)?;
    let gen = load_generator(cfg, &data.vocab)?;
    let (model, _) = checkpoint::load(&base)?;
    let groups = cfg.groups()?;
    let mut rng = crate::rng::stream(cfg.seed, "project-sources", &[]);
    let k = cfg.project_max_sources.min(train.len());
    let mut sources = rand::seq::index::sample(&mut rng, train.len(), k).into_vec();
    sources.sort_unstable();

    // (source, is_pseudo, group, label, ids)
    let mut points: Vec<(usize, bool, usize, usize, Vec<u32>)> = Vec::new();
    for &i in &sources {
        points.push((i, false, 0, train[i].label, train[i].ids.clone()));
    }
    for &i in &sources {
        let weights = attention_weights(&model, &train[i])?;
        for g in 1..=groups.groups {
            let seed = derive_seed(cfg.seed, "project", &[g as u64]);
            for p in generate_for_sample(&gen, &train[i], &weights, groups, g, cfg.project_per_source, seed, i, cfg.temperature)? {
                points.push((i, true, g, p.label, p.ids));
            }
        }
    }
    let reps: Vec<Vec<f64>> = points
        .iter()
        .map(|p| model.represent(&p.4).map(|r| r.0))
        .collect::<Result<_>>()?;
    let xy = match cfg.projector {
        Projector::Pca => pca_2d(&reps)?,
        Projector::Tsne => tsne_2d(&reps, 30.0, 500, derive_seed(cfg.seed, "tsne", &[]))?,
    };
    let mut csv_rows = Vec::with_capacity(points.len());
    for (p, c) in points.iter().zip(&xy) {
        csv_rows.push(vec![
            p.0.to_string(),
            u8::from(p.1).to_string(),
            p.2.to_string(),
            data.vocab.class_name(p.3).to_string(),
            format!("{:.6}", c[0]),
            format!("{:.6}", c[1]),
        ]);
    }
    write_csv(
        &cfg.out_dir.join("projection.csv"),
        &["id", "is_pseudo", "group", "label", "x", "y"],
        &csv_rows,
    )?;
    let origin: BTreeMap<usize, usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.1)
        .map(|(k, p)| (p.0, k))
        .collect();
    let mut per_group = Vec::new();
    for g in 1..=groups.groups {
        let (mut proj, mut rep, mut n) = (0.0, 0.0, 0usize);
        for (k, p) in points.iter().enumerate().filter(|(_, p)| p.1 && p.2 == g) {
            let o = origin[&p.0];
            proj += euclid(&xy[k], &xy[o]);
            rep += euclid(&reps[k], &reps[o]);
            n += 1;
        }
        let n_f = n.max(1) as f64;
        per_group.push(json!({
            "group": g,
            "pairs": n,
            "mean_projected_distance": proj / n_f,
            "mean_representation_distance": rep / n_f,
        }));
    }
    let mut hash_input = String::new();
    for r in &csv_rows {
        let _ = writeln!(hash_input, "{}", r.join(","));
    }
    let results = json!({
        "points": points.len(),
        "sources": sources.len(),
        "per_group": per_group,
        "projection_hash": content_hash(&[hash_input.as_bytes()]),
    });
    Ok((results, content_hash(&[data.input_hash.as_bytes(), &read_file(&checkpoint::blob_path(&base))?])))
}
