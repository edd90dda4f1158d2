use std::collections::BTreeSet;

use fsbbt::config::DistillConfig;
use fsbbt::data::{DatasetSplit, ImageSet, LabeledSet, SourceTag};
use fsbbt::experiment::{
    all_combos, combo_images, parse_combo, run_ablation_with, run_pipeline_with, sweep_alpha_with, SeedContext, Teacher,
};
use fsbbt::nn::{Architecture, Classifier};
use fsbbt::teacher::content_key;
use fsbbt::Error;
use ndarray::Array4;

fn labeled(n: usize, offset: usize) -> LabeledSet {
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + offset) % 10).collect();
    let data = Array4::from_shape_fn((n, 28, 28, 1), |(i, y, x, _)| {
        let c = labels[i];
        let on = (y / 7 == c % 4) || (x / 7 == c / 4);
        let noise = ((((i + offset) * 784 + y * 28 + x) as u64 * 2_654_435_761) % 97) as f32 / 970.0;
        (if on { 0.8 } else { 0.05 }) + noise
    });
    LabeledSet::new(ImageSet::new(data, SourceTag::Original).unwrap(), labels).unwrap()
}

fn split() -> DatasetSplit {
    DatasetSplit { train: labeled(120, 0), test: labeled(30, 3), num_classes: 10 }
}

fn config(dir: &std::path::Path, m: usize) -> DistillConfig {
    DistillConfig::from_toml_str(&format!(
        r#"
n_original = 20
m_synthetic = {m}
cvae_hidden = 16
cvae_epochs = 1
cvae_batch_size = 16
student_epochs = 1
student_batch_size = 16
seeds = [4]
output_dir = "{}"
"#,
        dir.display()
    ))
    .unwrap()
}

fn teacher() -> Teacher {
    Teacher::Local(Classifier::new(Architecture::Lenet5Half, (28, 28, 1), 10, 1).unwrap())
}

#[test]
fn pipeline_accounting_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let split = split();
    let cfg = config(dir.path(), 30);
    let report = run_pipeline_with(&cfg, &split, &teacher()).unwrap();
    let rec = &report.seeds[0];
    assert_eq!(rec.m1 + rec.m2, 30);
    assert_eq!(rec.bundle_size, 50);
    assert!(rec.ledger.total_images_sent <= 50);
    for regime in ["fs_bbt", "standard_kd", "student_alone"] {
        let acc = report.regime(regime).unwrap().mean;
        assert!((0.0..=1.0).contains(&acc), "{regime} {acc}");
    }
    for file in ["report.json", "summary.csv", "metrics.jsonl", "seed-4/label_plan.json", "seed-4/mixup_plan.json", "seed-4/cvae.safetensors", "seed-4/grid-cvae-prior-mean.png"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }

    // the ledger counts each distinct image once
    let ctx = SeedContext::prepare(&cfg, &split, &teacher(), 4).unwrap();
    let parts = combo_images(&ctx, &cfg, &parse_combo("mixup+cvae_wd+cvae_ood").unwrap()).unwrap();
    let bundle = ctx.bundle(&parts.iter().collect::<Vec<_>>()).unwrap();
    let distinct: BTreeSet<_> = (0..bundle.len()).map(|i| content_key(bundle.images.pixels(i))).collect();
    assert_eq!(rec.ledger.total_images_sent as usize, distinct.len());

    let again_dir = tempfile::tempdir().unwrap();
    let mut again = config(again_dir.path(), 30);
    again.reuse_artifacts = false;
    let second = run_pipeline_with(&again, &split, &teacher()).unwrap();
    assert_eq!((second.seeds[0].m1, second.seeds[0].m2), (rec.m1, rec.m2));
    assert_eq!(
        std::fs::read(dir.path().join("seed-4/label_plan.json")).unwrap(),
        std::fs::read(again_dir.path().join("seed-4/label_plan.json")).unwrap()
    );
    let d = (second.regime("fs_bbt").unwrap().mean - report.regime("fs_bbt").unwrap().mean).abs();
    assert!(d <= 0.003, "accuracy moved by {d}");
}

#[test]
fn zero_synthetic_budget_trains_on_originals_only() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline_with(&config(dir.path(), 0), &split(), &teacher()).unwrap();
    let rec = &report.seeds[0];
    assert_eq!((rec.m1, rec.m2, rec.bundle_size), (0, 0, 20));
    assert_eq!(rec.ledger.total_images_sent, 20);
}

#[test]
fn ablation_rows_share_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (split, teacher) = (split(), teacher());
    let cfg = config(dir.path(), 30);
    let table = run_ablation_with(&cfg, &all_combos(), &split, &teacher).unwrap();
    assert_eq!(table.rows.len() + 1, 8);
    for row in &table.rows {
        assert_eq!(row.counts[0].values().sum::<usize>(), 30, "{}", row.combo);
    }
    assert_eq!(table.row("mixup").unwrap().counts[0]["mixup"], 30);
    assert_eq!(table.row("cvae_ood").unwrap().counts[0]["cvae_ood"], 30);
    let full = table.row("mixup+cvae_wd+cvae_ood").unwrap();
    let pipeline = run_pipeline_with(&cfg, &split, &teacher).unwrap();
    assert_eq!(full.accuracies[0], pipeline.regime("fs_bbt").unwrap().mean);
    assert_eq!(table.reference.accuracies[0], pipeline.regime("standard_kd").unwrap().mean);
    assert!(matches!(run_ablation_with(&cfg, &[], &split, &teacher), Err(Error::Argument(_))));
}

#[test]
fn alpha_sweep_emits_points_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 30);
    let res = sweep_alpha_with(&cfg, &[0.05, 0.2], &split(), &teacher()).unwrap();
    assert_eq!(res.points.len(), 2);
    assert!(res.points[0].m1[0] >= res.points[1].m1[0]);
    assert!(res.plot.exists());
    assert!(matches!(sweep_alpha_with(&cfg, &[0.7], &split(), &teacher()), Err(Error::Argument(_))));
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let wrong = Teacher::Local(Classifier::new(Architecture::Lenet5Half, (32, 32, 3), 10, 1).unwrap());
    match run_pipeline_with(&config(dir.path(), 10), &split(), &wrong) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "query-originals"),
        other => panic!("expected a stage error, got {:?}", other.map(|_| ())),
    }
}
