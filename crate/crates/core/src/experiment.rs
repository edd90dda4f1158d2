//! End-to-end runs: teacher training, the distillation pipeline, the synthetic
//! source ablation and the alpha sweep.
//!
//! Everything a seed needs upstream of student training (the few-shot sample,
//! its soft labels, the CVAE and the sampling streams) is built once per seed
//! in a [`SeedContext`] and written under `<output_dir>/seed-<s>/`. Ablation rows
//! and sweep points differ only in which synthetic images enter the bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DistillConfig;
use crate::cvae::{
    generate_cvae_images, plan_balanced_labels, sample_latents, sample_normal_latents, sample_uniform_latents,
    train_cvae, CvaeConfig, CvaeEpoch, CvaeModel, LabelPlan, LatentBatch,
};
use crate::data::{few_shot_indices, DatasetSplit, ImageSet, LabeledSet, SourceTag};
use crate::distill::{train_student, DistillBundle, EpochMetrics, Regime, TrainData, TrainOutcome, TrainRegimeConfig};
use crate::error::{Error, Result, StageContext};
use crate::mixup::{generate_mixup, sample_mixup_plan, sample_until_retained, MixupPlan};
use crate::nn::{AdamConfig, Architecture, Checkpoint, Classifier};
use crate::report::{self, mean_std, RegimeSummary, RunReport, SeedRecord};
use crate::teacher::{content_key, derive_hard_labels, EndpointKind, SoftLabelSet, TeacherGateway};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self { architecture: Architecture::Lenet5, epochs: 20, batch_size: 64, seed: 0, adam: AdamConfig::default() }
    }
}

impl TeacherTrainConfig {
    pub fn from_distill(cfg: &DistillConfig) -> Self {
        Self {
            epochs: cfg.teacher_epochs,
            batch_size: cfg.teacher_batch_size,
            adam: AdamConfig { lr: cfg.teacher_lr, ..AdamConfig::default() },
            ..Self::default()
        }
    }
}

/// Trains a teacher on the full labeled training split.
pub fn train_teacher(split: &DatasetSplit, cfg: &TeacherTrainConfig) -> Result<TrainOutcome> {
    let regime = TrainRegimeConfig {
        regime: Regime::StudentAlone,
        architecture: cfg.architecture.clone(),
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        adam: cfg.adam,
    };
    let mut out = train_student(&regime, TrainData::Labeled(&split.train), &split.test, split.num_classes)?;
    for m in &mut out.metrics {
        m.regime = "teacher".into();
    }
    log::info!("teacher test accuracy {:.4}", out.test_acc);
    Ok(out)
}

/// The black box the pipeline distills from.
#[derive(Debug, Clone)]
pub enum Teacher {
    Local(Classifier),
    Remote(String),
}

impl Teacher {
    /// Loads (or, when allowed, trains and saves) the configured teacher.
    pub fn from_config(cfg: &DistillConfig, split: &DatasetSplit) -> Result<Self> {
        match cfg.teacher_kind {
            EndpointKind::Remote => Ok(Teacher::Remote(cfg.teacher_address.clone())),
            EndpointKind::InProcess => {
                let path = Path::new(&cfg.teacher_address);
                if path.exists() {
                    return Ok(Teacher::Local(Classifier::load(path)?));
                }
                if !cfg.train_teacher_if_missing {
                    return Err(Error::Startup(format!("teacher checkpoint {} not found", path.display())));
                }
                let tcfg = TeacherTrainConfig::from_distill(cfg);
                let out = train_teacher(split, &tcfg)?;
                let echo = serde_json::json!({ "teacher": tcfg, "test_acc": out.test_acc, "dataset": cfg.dataset });
                out.model.save(path, Some(&echo))?;
                Ok(Teacher::Local(out.model))
            }
        }
    }

    /// A fresh gateway with its own cache and ledger.
    pub fn gateway(&self, cfg: &DistillConfig) -> Result<TeacherGateway> {
        let gw = match self {
            Teacher::Local(m) => TeacherGateway::in_process(m.clone(), cfg.teacher_batch_limit),
            Teacher::Remote(url) => {
                let gw = TeacherGateway::remote(url)?;
                let limit = gw.info().batch_limit.min(cfg.teacher_batch_limit);
                gw.with_batch_limit(limit)
            }
        };
        Ok(gw.with_cache(true).with_degrade_to_top1(cfg.degrade_to_top1))
    }
}

/// Upstream artifacts shared by every student trained for one seed.
pub struct SeedContext {
    pub seed: u64,
    pub dir: PathBuf,
    pub x: ImageSet,
    pub soft_x: SoftLabelSet,
    pub d_set: LabeledSet,
    pub cvae: CvaeModel,
    pub cvae_curve: Vec<CvaeEpoch>,
    pub gateway: TeacherGateway,
    num_classes: usize,
    fingerprint: serde_json::Value,
}

fn seed_dir(cfg: &DistillConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed-{seed}"))
}

fn digest(value: &serde_json::Value) -> String {
    let h = Sha256::digest(value.to_string().as_bytes());
    h.iter().take(12).map(|b| format!("{b:02x}")).collect()
}

impl SeedContext {
    /// Samples X, queries its soft labels, derives hard labels and trains (or
    /// reloads) the CVAE.
    pub fn prepare(cfg: &DistillConfig, split: &DatasetSplit, teacher: &Teacher, seed: u64) -> Result<Self> {
        let dir = seed_dir(cfg, seed);
        let gateway = teacher.gateway(cfg).stage("teacher-connect")?;
        let idx = few_shot_indices(split.train.len(), cfg.n_original, seed).stage("sample-originals")?;
        let x = split.train.images.select(&idx)?;
        let soft_x = gateway.predict_soft(&x).stage("query-originals")?;
        let hard = derive_hard_labels(&soft_x);
        let d_set = LabeledSet::new(x.clone(), hard)?;

        let mut ck = Checkpoint::new("soft_labels");
        ck.set_meta("few_shot_indices", serde_json::to_string(&idx).expect("indices"));
        ck.insert("probs".into(), vec![soft_x.len(), soft_x.num_classes()], soft_x.probs().iter().copied().collect());
        ck.save(dir.join("soft_x.safetensors"))?;

        let cvae_cfg = CvaeConfig {
            latent_dim: cfg.latent_dim,
            hidden: cfg.cvae_hidden,
            epochs: cfg.cvae_epochs,
            batch_size: cfg.cvae_batch_size,
            seed,
            adam: AdamConfig { lr: cfg.cvae_lr, ..AdamConfig::default() },
        };
        let fingerprint = serde_json::json!({
            "dataset": cfg.dataset,
            "n_original": cfg.n_original,
            "teacher": cfg.teacher_address,
            "degrade_to_top1": cfg.degrade_to_top1,
            "cvae": cvae_cfg,
            "labels": digest(&serde_json::to_value(&d_set.labels).expect("labels")),
        });
        let (cvae, cvae_curve) = load_or_train_cvae(&dir, cfg.reuse_artifacts, &fingerprint, &d_set, split.num_classes, &cvae_cfg)
            .stage("train-cvae")?;
        Ok(Self { seed, dir, x, soft_x, d_set, cvae, cvae_curve, gateway, num_classes: split.num_classes, fingerprint })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The main mixup plan: `M` slots under the configured alpha.
    pub fn mixup_plan(&self, cfg: &DistillConfig) -> Result<Option<MixupPlan>> {
        if cfg.m_synthetic == 0 {
            return Ok(None);
        }
        sample_mixup_plan(cfg.n_original, cfg.m_synthetic, cfg.alpha, (cfg.beta_a, cfg.beta_b), self.seed).map(Some)
    }

    /// CVAE images for `latents`, with class-balanced labels for the same count.
    pub fn decode(&self, latents: &LatentBatch) -> Result<(ImageSet, LabelPlan)> {
        let labels = plan_balanced_labels(latents.len(), self.num_classes, self.seed)?;
        let images = generate_cvae_images(&self.cvae, latents, &labels)?;
        Ok((images, labels))
    }

    /// X plus `synthetic`, every synthetic image soft-labeled by the teacher.
    pub fn bundle(&self, synthetic: &[&ImageSet]) -> Result<DistillBundle> {
        let mut images = vec![&self.x];
        let mut labels = vec![self.soft_x.clone()];
        for s in synthetic {
            labels.push(self.gateway.predict_soft(s).stage("query-synthetic")?);
            images.push(s);
        }
        let label_refs: Vec<&SoftLabelSet> = labels.iter().collect();
        DistillBundle::new(ImageSet::concat(&images)?, SoftLabelSet::concat(&label_refs)?)
    }

    /// Trains one student, reusing a stored result for an identical request.
    pub fn train(&self, cfg: &DistillConfig, regime: Regime, data: TrainData<'_>, test: &LabeledSet, what: &serde_json::Value) -> Result<TrainedStudent> {
        let scfg = cfg.student_config(regime, self.seed);
        let key = serde_json::json!({ "upstream": self.fingerprint, "student": scfg, "data": what });
        let path = self.dir.join("results").join(format!("{}-{}.json", regime.id(), digest(&key)));
        if cfg.reuse_artifacts && path.exists() {
            if let Ok(stored) = report::read_json::<TrainedStudent>(&path) {
                if stored.key == key {
                    log::info!("reusing {}", path.display());
                    return Ok(stored);
                }
            }
        }
        let out = train_student(&scfg, data, test, self.num_classes).stage("train-student")?;
        let student_path = path.with_extension("safetensors");
        out.model.save(&student_path, Some(&key))?;
        let stored = TrainedStudent { key, test_acc: out.test_acc, metrics: out.metrics, checkpoint: student_path };
        report::write_json(&path, &stored)?;
        Ok(stored)
    }

    pub fn standard_kd(&self, cfg: &DistillConfig, test: &LabeledSet) -> Result<TrainedStudent> {
        let regime = Regime::StandardKd { omega: cfg.omega };
        self.train(cfg, regime, TrainData::LabeledWithTeacher(&self.d_set, &self.soft_x), test, &serde_json::json!("originals"))
    }

    pub fn student_alone(&self, cfg: &DistillConfig, test: &LabeledSet) -> Result<TrainedStudent> {
        self.train(cfg, Regime::StudentAlone, TrainData::Labeled(&self.d_set), test, &serde_json::json!("originals"))
    }
}

fn load_or_train_cvae(
    dir: &Path,
    reuse: bool,
    fingerprint: &serde_json::Value,
    d_set: &LabeledSet,
    k: usize,
    cfg: &CvaeConfig,
) -> Result<(CvaeModel, Vec<CvaeEpoch>)> {
    let path = dir.join("cvae.safetensors");
    let curve_path = dir.join("cvae_curve.json");
    if reuse && path.exists() && curve_path.exists() {
        let ck = Checkpoint::load(&path)?;
        if ck.metadata().get("config").map(String::as_str) == Some(fingerprint.to_string().as_str()) {
            log::info!("reusing {}", path.display());
            return Ok((CvaeModel::from_checkpoint(&ck)?, report::read_json(&curve_path)?));
        }
    }
    let (model, curve) = train_cvae(d_set, k, cfg)?;
    model.save(&path, Some(fingerprint))?;
    report::write_json(&curve_path, &curve)?;
    Ok((model, curve))
}

/// A finished student run as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedStudent {
    pub key: serde_json::Value,
    pub test_acc: f64,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

/// Number of distinct images in a set, by pixel content.
pub fn distinct_images(images: &ImageSet) -> usize {
    (0..images.len()).map(|i| content_key(images.pixels(i))).collect::<BTreeSet<_>>().len()
}

/// Runs `f` over `items` with at most `parallelism` in flight, keeping order.
fn run_parallel<T: Sync, R: Send>(items: &[T], parallelism: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(parallelism.max(1)) {
        let results: Vec<Result<R>> = if chunk.len() == 1 {
            vec![f(&chunk[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|item| s.spawn(|| f(item))).collect();
                handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
            })
        };
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

pub fn load_dataset(cfg: &DistillConfig) -> Result<DatasetSplit> {
    cfg.dataset.load(cfg.data_dir()).stage("load-dataset")
}

fn save_grids(ctx: &SeedContext, parts: &[&ImageSet]) -> Result<BTreeMap<String, PathBuf>> {
    let mut paths = BTreeMap::new();
    for tag in [SourceTag::Mixup, SourceTag::CvaeWd, SourceTag::CvaeOod] {
        let found = parts.iter().find_map(|p| {
            let rows: Vec<usize> = (0..p.len()).filter(|&i| p.tags()[i] == tag).take(64).collect();
            (!rows.is_empty()).then_some((p, rows))
        });
        let Some((part, rows)) = found else { continue };
        let path = ctx.dir.join(format!("grid-{}.png", tag.as_str()));
        report::write_image_grid(&part.select(&rows)?, 8, 8, &path)?;
        paths.insert(format!("grid_{}", tag.as_str()), path);
    }
    let k = ctx.num_classes;
    let zero = LatentBatch {
        z: ndarray::Array2::zeros((k, ctx.cvae.latent_dim())),
        origin: vec![crate::cvae::LatentOrigin::PriorNormal; k],
    };
    let per_class = generate_cvae_images(&ctx.cvae, &zero, &LabelPlan { y_cvae: (0..k).collect() })?;
    let path = ctx.dir.join("grid-cvae-prior-mean.png");
    report::write_image_grid(&per_class, k, 1, &path)?;
    paths.insert("grid_cvae_prior_mean".into(), path);
    Ok(paths)
}

fn run_seed(cfg: &DistillConfig, split: &DatasetSplit, teacher: &Teacher, seed: u64) -> Result<SeedRecord> {
    let ctx = SeedContext::prepare(cfg, split, teacher, seed)?;
    let plan = ctx.mixup_plan(cfg).stage("mixup-plan")?;
    let x_mu = match &plan {
        Some(p) => {
            report::write_json(&ctx.dir.join("mixup_plan.json"), p)?;
            generate_mixup(&ctx.x, p).stage("mixup")?
        }
        None => ImageSet::empty(ctx.x.image_shape()),
    };
    let m1 = x_mu.len();
    let m2 = cfg.m_synthetic - m1;
    let latents = sample_latents(m2, cfg.latent_dim, seed);
    let (x_cvae, labels) = ctx.decode(&latents).stage("cvae-generate")?;
    report::write_json(&ctx.dir.join("label_plan.json"), &labels)?;
    let bundle = ctx.bundle(&[&x_mu, &x_cvae])?;
    if bundle.len() != cfg.n_original + cfg.m_synthetic {
        return Err(Error::consistency(format!("bundle holds {} images, expected N + M", bundle.len())));
    }
    let ledger = ctx.gateway.ledger();
    let mut artifacts = save_grids(&ctx, &[&x_mu, &x_cvae])?;
    artifacts.insert("cvae".into(), ctx.dir.join("cvae.safetensors"));

    let what = serde_json::json!({ "alpha": cfg.alpha, "beta": [cfg.beta_a, cfg.beta_b], "m": cfg.m_synthetic, "sources": "mixup+cvae_wd+cvae_ood" });
    let fs = ctx.train(cfg, Regime::FsBbt, TrainData::Bundle(&bundle), &split.test, &what)?;
    artifacts.insert("student_fs_bbt".into(), fs.checkpoint.clone());
    let mut accuracies = BTreeMap::from([("fs_bbt".to_string(), fs.test_acc)]);
    let mut curves = fs.metrics;
    if cfg.baselines {
        for (name, r) in [("standard_kd", ctx.standard_kd(cfg, &split.test)?), ("student_alone", ctx.student_alone(cfg, &split.test)?)] {
            accuracies.insert(name.into(), r.test_acc);
            artifacts.insert(format!("student_{name}"), r.checkpoint);
            curves.extend(r.metrics);
        }
    }
    log::info!("seed {seed}: M1 {m1} M2 {m2} accuracies {accuracies:?}");
    Ok(SeedRecord { seed, m1, m2, bundle_size: bundle.len(), ledger, accuracies, curves, cvae_curve: ctx.cvae_curve.clone(), artifacts })
}

/// Runs the distillation pipeline for every configured seed and writes the report.
pub fn run_pipeline(cfg: &DistillConfig) -> Result<RunReport> {
    cfg.validate()?;
    let split = load_dataset(cfg)?;
    let teacher = Teacher::from_config(cfg, &split).stage("teacher")?;
    run_pipeline_with(cfg, &split, &teacher)
}

pub fn run_pipeline_with(cfg: &DistillConfig, split: &DatasetSplit, teacher: &Teacher) -> Result<RunReport> {
    cfg.validate()?;
    let records = run_parallel(&cfg.seeds, cfg.parallelism, |&s| run_seed(cfg, split, teacher, s))?;
    let report = RunReport::new(cfg.to_json(), records);
    report.write(&cfg.output_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticSource {
    Mixup,
    CvaeWd,
    CvaeOod,
}

impl SyntheticSource {
    pub const ALL: [SyntheticSource; 3] = [SyntheticSource::Mixup, SyntheticSource::CvaeWd, SyntheticSource::CvaeOod];

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticSource::Mixup => "mixup",
            SyntheticSource::CvaeWd => "cvae_wd",
            SyntheticSource::CvaeOod => "cvae_ood",
        }
    }
}

/// A non-empty set of synthetic sources, written `mixup+cvae_wd`.
pub type Combo = BTreeSet<SyntheticSource>;

pub fn combo_name(c: &Combo) -> String {
    c.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("+")
}

pub fn parse_combo(s: &str) -> Result<Combo> {
    let mut combo = Combo::new();
    for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
        let src = SyntheticSource::ALL
            .into_iter()
            .find(|x| x.as_str() == part)
            .ok_or_else(|| Error::argument(format!("unknown synthetic source `{part}`")))?;
        combo.insert(src);
    }
    if combo.is_empty() {
        return Err(Error::argument(format!("combo `{s}` names no source")));
    }
    Ok(combo)
}

/// All seven non-empty combos.
pub fn all_combos() -> Vec<Combo> {
    (1u8..8)
        .map(|mask| SyntheticSource::ALL.into_iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, s)| s).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub combo: String,
    /// Synthetic images per source, per seed.
    pub counts: Vec<BTreeMap<String, usize>>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: serde_json::Value,
    pub rows: Vec<AblationRow>,
    /// Standard-KD under the same seeds.
    pub reference: AblationRow,
}

impl AblationTable {
    pub fn row(&self, combo: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.combo == combo)
    }
}

/// Synthetic images for one combo, `M` in total. A combo with mixup and any
/// CVAE source uses the main plan's retained slots and fills the rest from the
/// CVAE; a mixup-only combo extends the slot stream to `M` retained images;
/// CVAE sources share their count with the extra image going to `cvae_wd`.
pub fn combo_images(ctx: &SeedContext, cfg: &DistillConfig, combo: &Combo) -> Result<Vec<ImageSet>> {
    let m = cfg.m_synthetic;
    let shape = ctx.x.image_shape();
    let has_mixup = combo.contains(&SyntheticSource::Mixup);
    let wd = combo.contains(&SyntheticSource::CvaeWd);
    let ood = combo.contains(&SyntheticSource::CvaeOod);
    let mut parts = Vec::new();
    let mut cvae_count = m;
    if has_mixup && m > 0 {
        let plan = if !wd && !ood {
            sample_until_retained(cfg.n_original, m, cfg.alpha, (cfg.beta_a, cfg.beta_b), ctx.seed)?
        } else {
            ctx.mixup_plan(cfg)?.expect("m > 0")
        };
        let x_mu = generate_mixup(&ctx.x, &plan)?;
        cvae_count = m - x_mu.len();
        parts.push(x_mu);
    }
    if cvae_count > 0 && (wd || ood) {
        let latents = match (wd, ood) {
            (true, true) => sample_latents(cvae_count, cfg.latent_dim, ctx.seed),
            (true, false) => sample_normal_latents(cvae_count, cfg.latent_dim, ctx.seed),
            _ => sample_uniform_latents(cvae_count, cfg.latent_dim, ctx.seed),
        };
        parts.push(ctx.decode(&latents)?.0);
    }
    if parts.is_empty() {
        parts.push(ImageSet::empty(shape));
    }
    Ok(parts)
}

fn source_counts(parts: &[ImageSet]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for tag in [SourceTag::Mixup, SourceTag::CvaeWd, SourceTag::CvaeOod] {
        counts.insert(tag.as_str().to_string(), parts.iter().map(|p| p.count_tag(tag)).sum());
    }
    counts
}

fn summarize_row(combo: String, counts: Vec<BTreeMap<String, usize>>, accuracies: Vec<f64>) -> AblationRow {
    let (mean, std) = mean_std(&accuracies);
    AblationRow { combo, counts, accuracies, mean, std }
}

/// One FS-BBT student per combo and seed, plus the Standard-KD reference row.
pub fn run_ablation(cfg: &DistillConfig, combos: &[Combo]) -> Result<AblationTable> {
    if combos.is_empty() {
        return Err(Error::argument("ablation needs at least one combo"));
    }
    cfg.validate()?;
    let split = load_dataset(cfg)?;
    let teacher = Teacher::from_config(cfg, &split).stage("teacher")?;
    run_ablation_with(cfg, combos, &split, &teacher)
}

pub fn run_ablation_with(cfg: &DistillConfig, combos: &[Combo], split: &DatasetSplit, teacher: &Teacher) -> Result<AblationTable> {
    if combos.is_empty() {
        return Err(Error::argument("ablation needs at least one combo"));
    }
    struct SeedRows {
        per_combo: Vec<(BTreeMap<String, usize>, f64)>,
        kd: f64,
    }
    let per_seed = run_parallel(&cfg.seeds, cfg.parallelism, |&seed| {
        let ctx = SeedContext::prepare(cfg, split, teacher, seed)?;
        let mut per_combo = Vec::new();
        for combo in combos {
            let parts = combo_images(&ctx, cfg, combo).stage("ablation-synthesis")?;
            let refs: Vec<&ImageSet> = parts.iter().collect();
            let bundle = ctx.bundle(&refs)?;
            let what = if combo.len() == 3 {
                serde_json::json!({ "alpha": cfg.alpha, "beta": [cfg.beta_a, cfg.beta_b], "m": cfg.m_synthetic, "sources": "mixup+cvae_wd+cvae_ood" })
            } else {
                serde_json::json!({ "alpha": cfg.alpha, "beta": [cfg.beta_a, cfg.beta_b], "m": cfg.m_synthetic, "sources": combo_name(combo), "ablation": true })
            };
            let r = ctx.train(cfg, Regime::FsBbt, TrainData::Bundle(&bundle), &split.test, &what)?;
            log::info!("seed {seed} combo {}: {:.4}", combo_name(combo), r.test_acc);
            per_combo.push((source_counts(&parts), r.test_acc));
        }
        let kd = ctx.standard_kd(cfg, &split.test)?.test_acc;
        Ok(SeedRows { per_combo, kd })
    })?;
    let rows = combos
        .iter()
        .enumerate()
        .map(|(i, c)| {
            summarize_row(
                combo_name(c),
                per_seed.iter().map(|s| s.per_combo[i].0.clone()).collect(),
                per_seed.iter().map(|s| s.per_combo[i].1).collect(),
            )
        })
        .collect();
    let reference = summarize_row("standard_kd".into(), Vec::new(), per_seed.iter().map(|s| s.kd).collect());
    let table = AblationTable { config: cfg.to_json(), rows, reference };
    let dir = cfg.output_dir.join("ablation");
    report::write_json(&dir.join("ablation.json"), &table)?;
    let mut summary: Vec<RegimeSummary> =
        table.rows.iter().map(|r| RegimeSummary::from_values(r.combo.clone(), r.accuracies.clone())).collect();
    summary.push(RegimeSummary::from_values("standard_kd", table.reference.accuracies.clone()));
    report::write_summary_csv(&dir.join("ablation.csv"), &summary)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub m1: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: serde_json::Value,
    pub points: Vec<SweepPoint>,
    pub standard_kd: RegimeSummary,
    pub plot: PathBuf,
}

pub fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::argument("alpha list is empty"));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=0.5).contains(*a)) {
        return Err(Error::argument(format!("alpha {a} outside [0, 0.5]")));
    }
    Ok(())
}

/// FS-BBT at each alpha. The same lambda stream is refiltered per alpha, so
/// points differ only in which slots survive.
pub fn sweep_alpha(cfg: &DistillConfig, alphas: &[f64]) -> Result<SweepResult> {
    check_alphas(alphas)?;
    cfg.validate()?;
    let split = load_dataset(cfg)?;
    let teacher = Teacher::from_config(cfg, &split).stage("teacher")?;
    sweep_alpha_with(cfg, alphas, &split, &teacher)
}

pub fn sweep_alpha_with(cfg: &DistillConfig, alphas: &[f64], split: &DatasetSplit, teacher: &Teacher) -> Result<SweepResult> {
    check_alphas(alphas)?;
    if cfg.m_synthetic == 0 {
        return Err(Error::argument("an alpha sweep needs M > 0"));
    }
    let per_seed = run_parallel(&cfg.seeds, cfg.parallelism, |&seed| {
        let ctx = SeedContext::prepare(cfg, split, teacher, seed)?;
        let base = ctx.mixup_plan(cfg)?.expect("m > 0");
        let mut points = Vec::new();
        for &alpha in alphas {
            let plan = base.refilter(alpha)?;
            let x_mu = generate_mixup(&ctx.x, &plan)?;
            let m2 = cfg.m_synthetic - x_mu.len();
            let (x_cvae, _) = ctx.decode(&sample_latents(m2, cfg.latent_dim, seed))?;
            let bundle = ctx.bundle(&[&x_mu, &x_cvae])?;
            let what = serde_json::json!({ "alpha": alpha, "beta": [cfg.beta_a, cfg.beta_b], "m": cfg.m_synthetic, "sources": "mixup+cvae_wd+cvae_ood" });
            let r = ctx.train(cfg, Regime::FsBbt, TrainData::Bundle(&bundle), &split.test, &what)?;
            log::info!("seed {seed} alpha {alpha}: {:.4}", r.test_acc);
            points.push((x_mu.len(), r.test_acc));
        }
        let kd = ctx.standard_kd(cfg, &split.test)?.test_acc;
        Ok((points, kd))
    })?;
    let points: Vec<SweepPoint> = alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let accuracies: Vec<f64> = per_seed.iter().map(|s| s.0[i].1).collect();
            let (mean, std) = mean_std(&accuracies);
            SweepPoint { alpha, m1: per_seed.iter().map(|s| s.0[i].0).collect(), accuracies, mean, std }
        })
        .collect();
    let standard_kd = RegimeSummary::from_values("standard_kd", per_seed.iter().map(|s| s.1).collect());
    let dir = cfg.output_dir.join("sweep");
    let plot = dir.join("alpha_curve.svg");
    let curve: Vec<(f64, f64)> = points.iter().map(|p| (p.alpha, p.mean)).collect();
    report::plot_alpha_curve(&curve, Some(("standard_kd", standard_kd.mean)), &plot)?;
    let result = SweepResult { config: cfg.to_json(), points, standard_kd, plot };
    report::write_json(&dir.join("sweep.json"), &result)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combos_parse_and_enumerate() {
        let all = all_combos();
        assert_eq!(all.len(), 7);
        assert_eq!(all.iter().collect::<BTreeSet<_>>().len(), 7);
        assert_eq!(combo_name(&parse_combo("cvae_ood+mixup").unwrap()), "mixup+cvae_ood");
        assert!(parse_combo("").is_err());
        assert!(parse_combo("gan").is_err());
    }

    // Cached results are matched on their key after a JSON round trip, and
    // widened f32 settings must survive it bit for bit.
    #[test]
    fn result_keys_survive_json() {
        let scfg = DistillConfig::default().student_config(Regime::StandardKd { omega: 0.9 }, 3);
        let key = serde_json::json!({ "student": scfg, "eps": 1e-8f32 });
        let back: serde_json::Value = serde_json::from_str(&key.to_string()).unwrap();
        assert_eq!(back, key);
    }

    #[test]
    fn alpha_lists_are_checked() {
        assert!(check_alphas(&[0.01, 0.05, 0.1, 0.2]).is_ok());
        assert!(matches!(check_alphas(&[0.6]), Err(Error::Argument(_))));
        assert!(check_alphas(&[]).is_err());
    }

    #[test]
    fn parallel_runner_keeps_order() {
        let out = run_parallel(&[3, 1, 2, 5], 3, |&v| Ok(v * 10)).unwrap();
        assert_eq!(out, vec![30, 10, 20, 50]);
        assert!(run_parallel(&[1, 2], 2, |&v| if v == 2 { Err(Error::argument("x")) } else { Ok(v) }).is_err());
    }
}
