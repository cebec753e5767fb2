use ecg_contrast::contrastive::pretrain::{prepare, pretrain, PreparedSet, PretrainConfig};
use ecg_contrast::contrastive::BatchMode;
use ecg_contrast::experiment::{ExperimentConfig, ExperimentKind};
use ecg_contrast::nn::EncoderConfig;
use ecg_contrast::signal::{AugmentConfig, PreprocessConfig};
use ecg_contrast::syncohort::{generate_cohort, paperlike3};

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        widths: vec![4, 8],
        stem_stride: 2,
        embedding_dim: 16,
        projection_dims: vec![16, 8],
        ..Default::default()
    }
}

fn aug() -> AugmentConfig {
    AugmentConfig {
        crop_len: 800,
        ..Default::default()
    }
}

fn prepared(n_patients: usize, seed: u64, cohorts: usize) -> PreparedSet {
    let dir = tempfile::tempdir().unwrap();
    let pre = PreprocessConfig::default();
    PreparedSet::merge(paperlike3(n_patients, seed).into_iter().take(cohorts).map(|spec| {
        let store = generate_cohort(&spec, dir.path().join(format!("{}.ecgc", spec.cohort_id))).unwrap();
        let mut p = pre.clone();
        p.mains = spec.device.mains_hz;
        prepare(&store, &p, |_| true).unwrap()
    }))
}

fn config(mode: BatchMode, epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        batch_pairs: 8,
        epochs,
        mode,
        seed,
        ..Default::default()
    }
}

#[test]
fn loss_falls_over_five_epochs() {
    let enc = EncoderConfig {
        widths: vec![8, 16, 16, 32],
        stem_stride: 2,
        ..Default::default()
    };
    let aug = AugmentConfig {
        crop_len: 1200,
        ..Default::default()
    };
    let tiny_eta0 = ExperimentConfig::tiny(ExperimentKind::Ood).pretrain.eta0;
    for seed in 1..=5u64 {
        let data = prepared(60, seed, 3);
        for mode in [BatchMode::Random, BatchMode::Idb] {
            let mut cfg = config(mode, 5, seed);
            cfg.batch_pairs = 16;
            cfg.eta0 = tiny_eta0;
            let out = pretrain(&data, &cfg, &enc, &aug).unwrap();
            let l = &out.epoch_losses;
            assert_eq!(l.len(), 5);
            assert!(l[4] < l[0], "seed {seed} {mode:?}: {l:?}");
        }
    }
}

#[test]
fn pretraining_is_deterministic() {
    let data = prepared(16, 7, 3);
    for mode in [BatchMode::Random, BatchMode::Idb] {
        let a = pretrain(&data, &config(mode, 2, 3), &small_encoder(), &aug()).unwrap();
        let b = pretrain(&data, &config(mode, 2, 3), &small_encoder(), &aug()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.steps, b.steps);
    }
}

#[test]
fn batching_modes_coincide_on_a_single_cohort() {
    let data = prepared(20, 9, 1);
    let r = pretrain(&data, &config(BatchMode::Random, 2, 4), &small_encoder(), &aug()).unwrap();
    let i = pretrain(&data, &config(BatchMode::Idb, 2, 4), &small_encoder(), &aug()).unwrap();
    assert_eq!(r.params, i.params);
    assert_eq!(r.epoch_losses, i.epoch_losses);
}

#[test]
fn idb_rejects_a_cohort_smaller_than_a_batch() {
    let data = prepared(3, 2, 2);
    let mut cfg = config(BatchMode::Idb, 1, 1);
    cfg.batch_pairs = 5;
    assert!(pretrain(&data, &cfg, &small_encoder(), &aug()).is_err());
}
