use std::path::Path;

use ecg_contrast::experiment::{
    render_report, run_matrix, run_ood, CohortBundle, ExperimentConfig, ExperimentKind,
    RunManifest, REPORT_MD,
};
use ecg_contrast::syncohort::paperlike3;
use ecg_contrast::Error;

fn micro(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::tiny(kind);
    cfg.cohorts = CohortBundle::Preset {
        preset: "paperlike3".into(),
        n_patients: 30,
        seed: 4,
    };
    cfg.encoder.widths = vec![4, 8];
    cfg.encoder.embedding_dim = 16;
    cfg.encoder.projection_dims = vec![16, 8];
    cfg.augment.crop_len = 800;
    cfg.pretrain.batch_pairs = 8;
    cfg.pretrain.epochs = 2;
    for h in [&mut cfg.heads.age, &mut cfg.heads.sex] {
        h.hidden = (32, 32);
        h.max_epochs = 5;
        h.batch_size = 32;
    }
    cfg.runs = Some(2);
    cfg.scale = 0.002;
    cfg
}

fn artifact(dir: &Path, name: &str) -> Vec<u8> {
    let m = RunManifest::load(dir).unwrap();
    std::fs::read(m.artifact_path(dir, name).unwrap()).unwrap()
}

#[test]
fn ood_pipeline_shapes_resume_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = micro(ExperimentKind::Ood);
    let res = run_ood(&cfg, &a, false).unwrap();

    assert_eq!(res.encoders, vec!["random".to_string(), "idb".to_string()]);
    assert_eq!(res.cohorts.len(), 3);
    assert_eq!(res.runs, 2);
    assert_eq!(res.subset_size, cfg.ood_subset());
    for table in [&res.mae, &res.auroc] {
        assert_eq!(table.len(), 2);
        assert!(table.iter().all(|row| row.len() == 3 && row.iter().all(|m| m.runs.len() == 2)));
    }
    assert_eq!(res.wilcoxon_mae.len(), 3);
    assert_eq!(res.delong_auroc.len(), 3);
    assert_eq!(res.probe.len(), 2);
    assert!(res.probe.iter().all(|p| (0.0..=1.0).contains(&p.score)));
    for s in &res.summary {
        assert!((s.degradation - (s.ood_mae - s.id_mae)).abs() < 1e-12);
    }
    RunManifest::load(&a).unwrap().verify(&a).unwrap();

    // resuming reuses every artifact and reproduces the results
    let before = RunManifest::load(&a).unwrap();
    let again = run_ood(&cfg, &a, true).unwrap();
    assert_eq!(
        serde_json::to_string(&again).unwrap(),
        serde_json::to_string(&res).unwrap()
    );
    assert_eq!(RunManifest::load(&a).unwrap().artifacts, before.artifacts);

    // an independent run is byte-identical
    run_ood(&cfg, &b, false).unwrap();
    for name in ["checkpoint/random", "checkpoint/idb", "embeddings/random", "embeddings/idb", "results"] {
        assert_eq!(artifact(&a, name), artifact(&b, name), "{name}");
    }
    let (ra, rb) = (render_report(&[a.clone()]).unwrap(), render_report(&[b.clone()]).unwrap());
    assert_eq!(ra, rb);
    let names: Vec<&str> = ra.iter().map(|(n, _)| n.as_str()).collect();
    for n in [REPORT_MD, "ood_metrics.csv", "ood_tests.csv", "probe.csv", "bins.csv", "pca_random.csv", "pca_idb.csv"] {
        assert!(names.contains(&n), "{n} missing from {names:?}");
    }
    let md = String::from_utf8(ra[0].1.clone()).unwrap();
    assert!(md.contains("| random |") && md.contains("| idb |"));

    // two directories get positional prefixes
    let both = render_report(&[a.clone(), b.clone()]).unwrap();
    assert!(both.iter().any(|(n, _)| n == "0-probe.csv"));
    assert!(both.iter().any(|(n, _)| n == "1-probe.csv"));

    // a tampered artifact is refused
    let ckpt = RunManifest::load(&b).unwrap().artifact_path(&b, "checkpoint/idb").unwrap();
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    assert!(matches!(render_report(&[b.clone()]), Err(Error::DigestMismatch { .. })));
}

#[test]
fn matrix_pipeline_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = micro(ExperimentKind::Matrix);
    // splits of 60/12/12 records per cohort
    cfg.cohorts = CohortBundle::Preset {
        preset: "paperlike3".into(),
        n_patients: 40,
        seed: 4,
    };
    cfg.scale = 0.006;
    let res = run_matrix(&cfg, tmp.path(), false).unwrap();
    assert_eq!(
        res.encoders,
        vec!["single-hospital", "single-primary-care", "single-screening", "union"]
    );
    assert_eq!(res.runs, 2);
    for table in [&res.mae, &res.auroc] {
        assert_eq!(table.len(), 4);
        assert!(table.iter().all(|row| row.len() == 3));
    }
    for (e, row) in res.mae.iter().enumerate() {
        let mean = row.iter().map(|m| m.value).sum::<f64>() / 3.0;
        assert!((res.row_mean_mae[e] - mean).abs() < 1e-12);
    }
    assert_eq!(res.kruskal.len(), 6);
    assert!(res.kruskal.iter().all(|k| (0.0..=1.0).contains(&k.p)));

    let bundle = render_report(&[tmp.path().to_path_buf()]).unwrap();
    let names: Vec<&str> = bundle.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, vec![REPORT_MD, "matrix_metrics.csv", "kruskal.csv"]);
}

#[test]
fn configs_are_validated() {
    let mut cfg = micro(ExperimentKind::Ood);
    cfg.cohorts = CohortBundle::Explicit(paperlike3(10, 1).into_iter().take(1).collect());
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    let mut cfg = micro(ExperimentKind::Ood);
    cfg.runs = Some(1);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    let mut cfg = micro(ExperimentKind::Ood);
    cfg.head_cohort = 9;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    let text = micro(ExperimentKind::Matrix).to_json().replacen('{', "{\"bogus\": 1,", 1);
    assert!(ExperimentConfig::from_json(&text).is_err());
    let cfg = micro(ExperimentKind::Matrix);
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn report_needs_a_directory() {
    assert!(render_report(&[]).is_err());
    let tmp = tempfile::tempdir().unwrap();
    assert!(render_report(&[tmp.path().to_path_buf()]).is_err());
}
