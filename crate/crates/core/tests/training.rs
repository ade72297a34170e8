use dcls::commands::{self, Command};
use dcls::config::PipelineConfig;
use dcls::generator::{attention_weights, generate_for_sample, GeneratorModel};
use dcls::pipeline::{classifier_stage, generator_stage, load_data, proxy_stage, Data};
use dcls::training::{train_proxy, train_with_noise_resistance, AblationFlags, RefreshPolicy};

fn small(dir: &std::path::Path) -> (PipelineConfig, Data) {
    let mut cfg = PipelineConfig::default();
    cfg.out_dir = dir.to_path_buf();
    cfg.synth_classes = vec![("joy".into(), 24), ("sadness".into(), 8), ("anger".into(), 6)];
    cfg.synth_test_per_class = 4;
    cfg.model_dim = 16;
    cfg.num_heads = 2;
    cfg.ffn_dim = 32;
    cfg.proxy_epochs = 2;
    cfg.generator_epochs = 3;
    cfg.classifier_epochs = 4;
    cfg.aug_per_sample = 2;
    cfg.validate().unwrap();
    commands::execute(Command::SynthData, &cfg).unwrap();
    let data = load_data(&cfg).unwrap();
    (cfg, data)
}

#[test]
fn flags_off_matches_plain_fine_tuning() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small(dir.path());
    let off = AblationFlags { use_da: false, use_lap: true, use_nrt: false };
    let mc = cfg.encoder(data.vocab.len(), data.vocab.num_classes(), 5);
    let tc = cfg.classifier_train(9, 3, off, cfg.group_index).unwrap();
    let (a, log_a) = train_with_noise_resistance(&data.train, None, mc.clone(), &tc).unwrap();
    let (b, log_b) = train_proxy(&data.train, mc, &tc).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(log_a, log_b);
    assert!(log_a.iter().all(|m| m.contrastive == 0.0));
}

#[test]
fn noise_resistant_training_lowers_loss_under_both_refresh_policies() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = small(dir.path());
    let (proxy, _) = proxy_stage(&cfg, &data.vocab, &data.train, 1).unwrap();
    let (gen, _) = generator_stage(&cfg, &data.vocab, &data.train, &proxy, 1, true).unwrap();
    let flags = AblationFlags::default();
    for refresh in [RefreshPolicy::PerEpoch, RefreshPolicy::PerBatch] {
        cfg.refresh = refresh;
        let (model, log) =
            classifier_stage(&cfg, &data.vocab, &data.train, Some(&gen), 1, flags, cfg.group_index).unwrap();
        assert!(model.params.all_finite());
        assert_eq!(log.len(), 4);
        for m in &log {
            assert!((m.total - m.contrastive - m.classification).abs() < 1e-9);
        }
        assert!(log[3].total < log[0].total, "{refresh:?}: {log:?}");
    }
}

#[test]
fn augmentation_without_generator_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small(dir.path());
    let mc = cfg.encoder(data.vocab.len(), data.vocab.num_classes(), 0);
    let tc = cfg.classifier_train(0, 1, AblationFlags::default(), cfg.group_index).unwrap();
    assert!(train_with_noise_resistance(&data.train, None, mc, &tc).is_err());
}

#[test]
fn generator_round_trip_reproduces_pseudo_samples() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small(dir.path());
    let (proxy, _) = proxy_stage(&cfg, &data.vocab, &data.train, 2).unwrap();
    for lap in [true, false] {
        let (gen, _) = generator_stage(&cfg, &data.vocab, &data.train, &proxy, 2, lap).unwrap();
        let base = dir.path().join(format!("gen_{lap}"));
        gen.save(&base).unwrap();
        let loaded = GeneratorModel::load(&base, &data.vocab).unwrap();
        assert_eq!(loaded.use_label_prompt, lap);

        let groups = cfg.groups().unwrap();
        let sample = &data.train[3];
        let w = attention_weights(&proxy, sample).unwrap();
        let run = |g: &GeneratorModel| generate_for_sample(g, sample, &w, groups, 4, 3, 17, 3, 1.0).unwrap();
        let first = run(&gen);
        assert_eq!(first, run(&loaded));
        for p in &first {
            assert_eq!(p.label, sample.label);
            assert_eq!(p.provenance.source_id, 3);
            assert!((13..=16).contains(&p.provenance.t_star));
            let content = p.tokenized();
            assert!(content.content().iter().all(|&id| !data.vocab.is_special(id) && !data.vocab.is_label_token(id)));
        }
    }
}
