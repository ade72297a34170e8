//! Analytic gradients vs central finite differences for every objective.

use dcls::encoder::{
    Batch, ClassifyExample, EncoderConfig, EncoderModel, MaskedLmExample, NoiseResistantGroup,
};
use dcls::losses::LossFlags;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn model(seed: u64) -> EncoderModel {
    let cfg = EncoderConfig {
        vocab_size: 14,
        max_len: 12,
        model_dim: 8,
        num_heads: 2,
        num_layers: 2,
        ffn_dim: 16,
        num_classes: 3,
        dropout: 0.0,
        seed,
    };
    EncoderModel::init(cfg).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error over `samples` randomly chosen parameter entries.
fn check(model: &EncoderModel, batch: &Batch, samples: usize, seed: u64) -> f64 {
    let analytic = model
        .loss_and_grads::<ChaCha8Rng>(batch, None)
        .unwrap()
        .grads;
    let grad_slices: Vec<Vec<f64>> = analytic.slices().iter().map(|s| s.to_vec()).collect();
    let sizes: Vec<usize> = grad_slices.iter().map(Vec::len).collect();
    let mut rng = dcls::rng::from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let t = rng.gen_range(0..sizes.len());
        let i = rng.gen_range(0..sizes[t]);
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params.slices_mut()[t][i] += delta;
            m.loss::<ChaCha8Rng>(batch, None).unwrap()
        };
        let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        worst = worst.max(rel_err(grad_slices[t][i], numeric));
    }
    worst
}

#[test]
fn classify_gradients() {
    let m = model(11);
    let batch = [
        ClassifyExample { ids: vec![2, 6, 7, 8, 3], label: 0 },
        ClassifyExample { ids: vec![2, 9, 10, 3], label: 2 },
    ];
    let err = check(&m, &Batch::Classify(&batch), 60, 1);
    eprintln!("max rel err {err:e}");
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn masked_lm_gradients() {
    let m = model(12);
    let batch = [
        MaskedLmExample { ids: vec![2, 5, 3, 1, 8, 1, 3], targets: vec![(3, 9), (5, 12)] },
        MaskedLmExample { ids: vec![2, 6, 3, 1, 3], targets: vec![(3, 13)] },
    ];
    let err = check(&m, &Batch::MaskedLm(&batch), 60, 2);
    eprintln!("max rel err {err:e}");
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn noise_resistant_gradients() {
    let m = model(13);
    let g = |ids: Vec<u32>, label, pseudo: Vec<Vec<u32>>| NoiseResistantGroup {
        original: ClassifyExample { ids, label },
        pseudo: pseudo.into_iter().map(|ids| ClassifyExample { ids, label }).collect(),
    };
    let groups = [
        g(vec![2, 6, 7, 3], 0, vec![vec![2, 6, 9, 3]]),
        g(vec![2, 10, 11, 12, 3], 1, vec![vec![2, 10, 13, 3]]),
        g(vec![2, 8, 3], 0, vec![vec![2, 7, 3]]),
    ];
    let batch = Batch::NoiseResistant {
        groups: &groups,
        tau: 0.5,
        flags: LossFlags::default(),
    };
    let err = check(&m, &batch, 60, 3);
    eprintln!("max rel err {err:e}");
    assert!(err < 1e-4, "max rel err {err}");
}
