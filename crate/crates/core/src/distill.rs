//! Student training: soft-target distillation, the KD baseline and
//! hard-label training from scratch.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, LabeledSet};
use crate::error::{Error, Result};
use crate::nn::{softmax_backward, softmax_rows, Adam, AdamConfig, Architecture, Classifier, Gradients, Sequential};
use crate::seed;
use crate::teacher::{argmax, SoftLabelSet};

/// Added inside every logarithm; teacher probabilities can be exactly zero.
pub const LOG_EPS: f64 = 1e-12;

fn check_pair(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::argument(format!("probability vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// `-sum_k teacher_k ln(student_k + eps)`.
pub fn soft_cross_entropy(student: &[f32], teacher: &[f32]) -> Result<f64> {
    check_pair(student, teacher)?;
    Ok(-student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| f64::from(t) * (f64::from(s) + LOG_EPS).ln())
        .sum::<f64>())
}

/// `KL(teacher || student)` with the same smoothing as the cross-entropy.
pub fn kl_divergence(teacher: &[f32], student: &[f32]) -> Result<f64> {
    check_pair(student, teacher)?;
    Ok(teacher
        .iter()
        .zip(student)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &s)| {
            let t = f64::from(t);
            t * ((t + LOG_EPS).ln() - (f64::from(s) + LOG_EPS).ln())
        })
        .sum())
}

/// `(1 - omega) * CE(student, onehot(hard)) + omega * KL(teacher || student)`, no temperature.
pub fn standard_kd_loss(student: &[f32], hard_label: usize, teacher: &[f32], omega: f64) -> Result<f64> {
    check_omega(omega)?;
    check_pair(student, teacher)?;
    let s_y = student
        .get(hard_label)
        .ok_or_else(|| Error::argument(format!("hard label {hard_label} out of range")))?;
    let ce = -(f64::from(*s_y) + LOG_EPS).ln();
    Ok((1.0 - omega) * ce + omega * kl_divergence(teacher, student)?)
}

fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::argument(format!("omega {omega} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    FsBbt,
    StandardKd { omega: f64 },
    StudentAlone,
}

impl Regime {
    pub fn id(&self) -> &'static str {
        match self {
            Regime::FsBbt => "fs_bbt",
            Regime::StandardKd { .. } => "standard_kd",
            Regime::StudentAlone => "student_alone",
        }
    }

    pub fn omega(&self) -> Option<f64> {
        match self {
            Regime::StandardKd { omega } => Some(*omega),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRegimeConfig {
    #[serde(flatten)]
    pub regime: Regime,
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainRegimeConfig {
    pub fn new(regime: Regime, seed: u64) -> Self {
        Self { regime, architecture: Architecture::Lenet5Half, epochs: 50, batch_size: 64, seed, adam: AdamConfig::default() }
    }
}

/// Originals and synthetics with the teacher's soft labels, row-aligned.
#[derive(Debug, Clone)]
pub struct DistillBundle {
    pub images: ImageSet,
    pub soft_labels: SoftLabelSet,
}

impl DistillBundle {
    pub fn new(images: ImageSet, soft_labels: SoftLabelSet) -> Result<Self> {
        if images.len() != soft_labels.len() {
            return Err(Error::consistency(format!(
                "{} images but {} soft labels",
                images.len(),
                soft_labels.len()
            )));
        }
        Ok(Self { images, soft_labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Training input; which variant is allowed depends on the regime.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Bundle(&'a DistillBundle),
    /// Hard labels plus the teacher's probabilities for the same images.
    LabeledWithTeacher(&'a LabeledSet, &'a SoftLabelSet),
    Labeled(&'a LabeledSet),
}

/// Per-row target distribution `q` and constant `c` so that the regime loss of
/// a row is `-sum_k q_k ln(s_k + eps) + c`.
#[derive(Debug, Clone)]
pub struct Targets {
    pub q: Array2<f32>,
    pub offset: Vec<f64>,
}

impl Targets {
    fn select(&self, idx: &[usize]) -> Self {
        Self { q: self.q.select(Axis(0), idx), offset: idx.iter().map(|&i| self.offset[i]).collect() }
    }
}

fn one_hot_rows(labels: &[usize], k: usize) -> Result<Array2<f32>> {
    let mut q = Array2::zeros((labels.len(), k));
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::argument(format!("label {y} out of range for {k} classes")));
        }
        q[[i, y]] = 1.0;
    }
    Ok(q)
}

/// Resolves regime and data into flat training rows and targets.
pub fn regime_targets<'a>(regime: &Regime, data: TrainData<'a>, k: usize) -> Result<(&'a ImageSet, Targets)> {
    match (regime, data) {
        (Regime::FsBbt, TrainData::Bundle(b)) => {
            if b.soft_labels.num_classes() != k {
                return Err(Error::consistency("soft labels do not match the class count"));
            }
            Ok((&b.images, Targets { q: b.soft_labels.probs().clone(), offset: vec![0.0; b.len()] }))
        }
        (Regime::StandardKd { omega }, TrainData::LabeledWithTeacher(set, soft)) => {
            check_omega(*omega)?;
            if soft.len() != set.len() || soft.num_classes() != k {
                return Err(Error::consistency("teacher probabilities do not align with the labeled set"));
            }
            let w = *omega as f32;
            let q = one_hot_rows(&set.labels, k)? * (1.0 - w) + soft.probs() * w;
            let offset = soft
                .probs()
                .rows()
                .into_iter()
                .map(|t| omega * t.iter().map(|&t| f64::from(t) * (f64::from(t) + LOG_EPS).ln()).sum::<f64>())
                .collect();
            Ok((&set.images, Targets { q, offset }))
        }
        (Regime::StudentAlone, TrainData::Labeled(set)) => {
            Ok((&set.images, Targets { q: one_hot_rows(&set.labels, k)?, offset: vec![0.0; set.len()] }))
        }
        (r, _) => Err(Error::argument(format!("training data does not match regime {}", r.id()))),
    }
}

/// Mean regime loss over a batch and its parameter gradients.
pub fn batch_loss_and_grads(net: &Sequential, x: ArrayView2<'_, f32>, targets: &Targets) -> (f64, Gradients) {
    let b = x.nrows() as f64;
    let (logits, tape) = net.forward_train(x);
    let probs = softmax_rows(&logits);
    let mut loss = 0.0;
    let mut g = Array2::<f32>::zeros(probs.raw_dim());
    for (((s, q), mut g), c) in probs.rows().into_iter().zip(targets.q.rows()).zip(g.rows_mut()).zip(&targets.offset) {
        for ((&s, &q), g) in s.iter().zip(q.iter()).zip(g.iter_mut()) {
            let s = f64::from(s) + LOG_EPS;
            loss -= f64::from(q) * s.ln();
            *g = (-f64::from(q) / s / b) as f32;
        }
        loss += c;
    }
    let g_logits = softmax_backward(&probs, &g);
    let (_, grads) = net.backward(tape, g_logits, false);
    (loss / b, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub regime: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Classifier,
    pub metrics: Vec<EpochMetrics>,
    pub test_acc: f64,
}

/// Mini-batch Adam on the regime loss. Batch order is a seeded shuffle per
/// epoch; test accuracy is recorded after every epoch.
pub fn train_student(config: &TrainRegimeConfig, data: TrainData<'_>, test: &LabeledSet, num_classes: usize) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return Err(Error::argument("batch_size must be positive"));
    }
    let (images, targets) = regime_targets(&config.regime, data, num_classes)?;
    if images.is_empty() {
        return Err(Error::argument("training set is empty"));
    }
    let mut model = Classifier::new(config.architecture.clone(), images.image_shape(), num_classes, config.seed)?;
    let mut opt = Adam::new(config.adam, model.net());
    let mut rng = seed::rng_for(config.seed, "student-shuffle");
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = images.rows().select(Axis(0), chunk);
            let (loss, grads) = batch_loss_and_grads(model.net(), x.view(), &targets.select(chunk));
            if !loss.is_finite() {
                return Err(Error::Training { epoch, step, msg: format!("{} loss is {loss}", config.regime.id()) });
            }
            opt.step(model.net_mut(), &grads);
            total += loss * chunk.len() as f64;
            step += 1;
        }
        let test_acc = evaluate(&model, test)?;
        let train_loss = total / images.len() as f64;
        log::info!("{} seed {} epoch {epoch}: loss {train_loss:.4} test acc {test_acc:.4}", config.regime.id(), config.seed);
        metrics.push(EpochMetrics { regime: config.regime.id().into(), seed: config.seed, epoch, train_loss, test_acc });
    }
    let test_acc = match metrics.last() {
        Some(m) => m.test_acc,
        None => evaluate(&model, test)?,
    };
    Ok(TrainOutcome { model, metrics, test_acc })
}

/// Top-1 accuracy with lowest-index tie-break.
pub fn evaluate(model: &Classifier, test: &LabeledSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::argument("test set is empty"));
    }
    let probs = model.predict_proba(&test.images)?;
    Ok(accuracy(probs.view(), &test.labels))
}

pub fn accuracy(probs: ArrayView2<'_, f32>, labels: &[usize]) -> f64 {
    let hits = probs.rows().into_iter().zip(labels).filter(|(p, &y)| argmax(p.view()) == y).count();
    hits as f64 / labels.len().max(1) as f64
}
