//! Toy teacher-student training loops on 2-D synthetic data.
//!
//! Two tasks share one driver, [`run_training`]:
//!
//! * **FixMatch-lite**: supervised cross-entropy on a handful of labeled
//!   points, plus cross-entropy on strongly augmented unlabeled points against
//!   hard pseudo-labels taken from confident weak-view predictions.
//! * **BYOL-lite**: an online encoder with a predictor head regresses the
//!   teacher (target) encoder's normalized embedding of a second view.
//!
//! After every student update the teacher is moved by
//! [`smooth_step`](crate::smoothing::smooth_step) and nothing else.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, EpochSnapshot};
use crate::error::{Error, Result};
use crate::param_store::ParamStore;
use crate::rng::{self, Domain};
use crate::smoothing::{self, MaskSample, Method, SmoothingConfig, StepIndex};
use crate::tinynn::{self, sgd_step, Batch, Loss, Matrix, MlpModel, OptState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    GaussianBlobs,
}

/// Points with class labels, split into train and held-out evaluation
/// indices. `labeled_indices` is a subset of `train_indices`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub points: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
    pub labeled_indices: Vec<usize>,
    pub seed: u64,
    pub kind: DatasetKind,
}

/// Fraction of every class held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.2;

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per class: shuffle, hold out `EVAL_FRACTION`, then pick the labeled
    /// points from what remains.
    fn split(
        points: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        labeled_per_class: usize,
        seed: u64,
        kind: DatasetKind,
    ) -> Result<Self> {
        let mut rng = rng::stream(seed, Domain::Dataset, 1);
        let mut train = Vec::new();
        let mut eval = Vec::new();
        let mut labeled = Vec::new();
        for class in 0..num_classes {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            members.shuffle(&mut rng);
            let n_eval = (members.len() as f64 * EVAL_FRACTION).round() as usize;
            let (held, rest) = members.split_at(n_eval);
            if labeled_per_class > rest.len() {
                return Err(Error::config(
                    "dataset.labeled_per_class",
                    format!(
                        "{labeled_per_class} labels requested but class {class} has only {} training points",
                        rest.len()
                    ),
                ));
            }
            eval.extend_from_slice(held);
            labeled.extend_from_slice(&rest[..labeled_per_class]);
            train.extend_from_slice(rest);
        }
        train.sort_unstable();
        eval.sort_unstable();
        labeled.sort_unstable();
        Ok(Self {
            points,
            labels,
            num_classes,
            train_indices: train,
            eval_indices: eval,
            labeled_indices: labeled,
            seed,
            kind,
        })
    }
}

/// Two interleaved half circles of radius 1: class 0 centred at the origin
/// (upper arc), class 1 centred at `(1, 0.5)` (lower arc), plus isotropic
/// Gaussian noise.
pub fn make_two_moons(
    n: usize,
    noise_sigma: f64,
    labeled_per_class: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::config("dataset.n", format!("{n} must be positive and even")));
    }
    if labeled_per_class * 2 > n {
        return Err(Error::config(
            "dataset.labeled_per_class",
            format!("{labeled_per_class} per class exceeds {n} points"),
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config("dataset.noise", format!("{noise_sigma} is not a valid sigma")));
    }
    let half = n / 2;
    let mut rng = rng::stream(seed, Domain::Dataset, 0);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        for k in 0..half {
            let t = if half > 1 {
                std::f64::consts::PI * k as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            data.push(x + noise_sigma * nx);
            data.push(y + noise_sigma * ny);
            labels.push(class);
        }
    }
    let points = Matrix::from_vec(n, 2, data)?;
    SyntheticDataset::split(points, labels, 2, labeled_per_class, seed, DatasetKind::TwoMoons)
}

/// Isotropic Gaussian blobs, `n_per_class` points around each centre.
pub fn make_gaussian_blobs(
    n_per_class: usize,
    centers: &[[f64; 2]],
    sigma: f64,
    labeled_per_class: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if centers.is_empty() || n_per_class == 0 {
        return Err(Error::config("dataset", "blobs need at least one centre and one point"));
    }
    let mut rng = rng::stream(seed, Domain::Dataset, 0);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (class, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            data.push(c[0] + sigma * nx);
            data.push(c[1] + sigma * ny);
            labels.push(class);
        }
    }
    let points = Matrix::from_vec(labels.len(), 2, data)?;
    SyntheticDataset::split(
        points,
        labels,
        centers.len(),
        labeled_per_class,
        seed,
        DatasetKind::GaussianBlobs,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// Gaussian jitter, plus coordinate dropout for the strong policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub jitter_sigma: f64,
    #[serde(default)]
    pub drop_prob: f64,
}

impl AugmentPolicy {
    pub fn weak(jitter_sigma: f64) -> Self {
        Self {
            kind: AugmentKind::Weak,
            jitter_sigma,
            drop_prob: 0.0,
        }
    }

    pub fn strong(jitter_sigma: f64, drop_prob: f64) -> Self {
        Self {
            kind: AugmentKind::Strong,
            jitter_sigma,
            drop_prob,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::config(
                format!("{field}.jitter_sigma"),
                format!("{} is not a valid sigma", self.jitter_sigma),
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::config(
                format!("{field}.drop_prob"),
                format!("{} is outside [0, 1]", self.drop_prob),
            ));
        }
        if self.kind == AugmentKind::Weak && self.drop_prob != 0.0 {
            return Err(Error::config(
                format!("{field}.drop_prob"),
                "weak augmentation cannot drop coordinates",
            ));
        }
        Ok(())
    }
}

/// `x + N(0, sigma^2)` per coordinate; the strong policy then zeroes each
/// coordinate with probability `drop_prob`. Deterministic per
/// `(seed, draw_index)`.
pub fn augment(points: &Matrix, policy: &AugmentPolicy, seed: u64, draw_index: u64) -> Matrix {
    let mut out = points.clone();
    if policy.jitter_sigma == 0.0 && (policy.kind == AugmentKind::Weak || policy.drop_prob == 0.0) {
        return out;
    }
    let mut rng = rng::stream(seed, Domain::Augment, draw_index);
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += policy.jitter_sigma * z;
        if policy.kind == AugmentKind::Strong && rng.random::<f64>() < policy.drop_prob {
            *v = 0.0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FixmatchLite,
    ByolLite,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::FixmatchLite => "fixmatch_lite",
            Task::ByolLite => "byol_lite",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixmatch_lite" => Ok(Task::FixmatchLite),
            "byol_lite" => Ok(Task::ByolLite),
            other => Err(Error::config("task", format!("unknown task `{other}`"))),
        }
    }
}

/// Which model produces FixMatch pseudo-labels during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabelSource {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub noise: f64,
    pub labeled_per_class: usize,
}

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub task: Task,
    /// `smoothing.seed` is replaced by `seed` when the run starts.
    pub smoothing: SmoothingConfig,
    pub epochs: usize,
    pub batch_labeled: usize,
    /// Unlabeled-to-labeled batch ratio.
    pub ratio: usize,
    pub confidence_threshold: f64,
    pub unlabeled_weight: f64,
    pub pseudo_labels_from: PseudoLabelSource,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub probe_size: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub dataset: DatasetConfig,
    pub weak: AugmentPolicy,
    pub strong: AugmentPolicy,
    pub seed: u64,
}

impl TrainRunConfig {
    /// Reference settings for FixMatch-lite on two moons.
    pub fn fixmatch_default() -> Self {
        Self {
            task: Task::FixmatchLite,
            smoothing: SmoothingConfig::sts(0.5, 0.99),
            epochs: 200,
            batch_labeled: 8,
            ratio: 7,
            confidence_threshold: 0.95,
            unlabeled_weight: 1.0,
            pseudo_labels_from: PseudoLabelSource::Teacher,
            base_lr: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 0,
            warmup_factor: 0.001,
            probe_size: 256,
            hidden: vec![32, 32],
            embedding_dim: 8,
            dataset: DatasetConfig {
                n: 1000,
                noise: 0.1,
                labeled_per_class: 4,
            },
            weak: AugmentPolicy::weak(0.05),
            strong: AugmentPolicy::strong(0.3, 0.0),
            seed: 0,
        }
    }

    /// Reference settings for BYOL-lite on two moons.
    pub fn byol_default() -> Self {
        Self {
            task: Task::ByolLite,
            smoothing: SmoothingConfig::sts(0.7, 0.99),
            epochs: 20,
            batch_labeled: 1,
            ratio: 4,
            base_lr: 0.1,
            weight_decay: 1e-4,
            warmup_epochs: 2,
            ..Self::fixmatch_default()
        }
    }

    pub fn default_for(task: Task) -> Self {
        match task {
            Task::FixmatchLite => Self::fixmatch_default(),
            Task::ByolLite => Self::byol_default(),
        }
    }

    pub fn batch_unlabeled(&self) -> usize {
        self.ratio * self.batch_labeled
    }

    pub fn validate(&self) -> Result<()> {
        self.smoothing.validate()?;
        if self.ratio < 1 {
            return Err(Error::config("ratio", "must be at least 1"));
        }
        if self.batch_labeled < 1 {
            return Err(Error::config("batch_labeled", "must be at least 1"));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::config(
                "confidence_threshold",
                format!("{} is outside (0, 1]", self.confidence_threshold),
            ));
        }
        if !(self.unlabeled_weight >= 0.0 && self.unlabeled_weight.is_finite()) {
            return Err(Error::config("unlabeled_weight", "must be non-negative"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::config("sgd_momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_factor) {
            return Err(Error::config("warmup_factor", "must be in [0, 1]"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup_epochs", "must be smaller than epochs"));
        }
        if self.probe_size == 0 {
            return Err(Error::config("probe_size", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim", "must be positive"));
        }
        self.weak.validate("weak")?;
        self.strong.validate("strong")?;
        if self.weak.kind != AugmentKind::Weak {
            return Err(Error::config("weak.kind", "must be `weak`"));
        }
        if self.strong.kind != AugmentKind::Strong {
            return Err(Error::config("strong.kind", "must be `strong`"));
        }
        if self.strong.jitter_sigma < self.weak.jitter_sigma {
            return Err(Error::config(
                "strong.jitter_sigma",
                "must be at least the weak jitter",
            ));
        }
        Ok(())
    }

    fn classifier_dims(&self, classes: usize) -> Vec<usize> {
        let mut dims = vec![2];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![2];
        dims.extend(&self.hidden);
        dims.push(self.embedding_dim);
        dims
    }
}

/// Losses and bookkeeping from one FixMatch-lite update.
#[derive(Debug, Clone, PartialEq)]
pub struct FixMatchStepOutput {
    pub loss_total: f64,
    pub loss_supervised: f64,
    pub loss_unsupervised: f64,
    pub pseudo_label_rate: f64,
    pub mask: Option<MaskSample>,
}

/// Hard pseudo-labels and 0/1 confidence weights from `logits`.
pub fn pseudo_labels(logits: &Matrix, threshold: f64) -> (Vec<usize>, Vec<f64>) {
    let probs = tinynn::softmax(logits);
    let labels = probs.argmax_rows();
    let weights = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| if probs.get(r, l) >= threshold { 1.0 } else { 0.0 })
        .collect();
    (labels, weights)
}

fn check_finite(loss: f64, step: StepIndex) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step: step.0 })
    }
}

/// One FixMatch-lite update of `student`, followed by one teacher smoothing
/// step. `opt.lr` must already hold this step's learning rate.
///
/// Augmentation draws are keyed by `(cfg.seed, step)`.
pub fn fixmatch_step(
    student: &mut MlpModel,
    teacher: &mut MlpModel,
    opt: &mut OptState,
    labeled: &Batch,
    unlabeled: &Matrix,
    cfg: &TrainRunConfig,
    step: StepIndex,
) -> Result<FixMatchStepOutput> {
    teacher.params.check_congruent(&student.params)?;
    let base = 3 * step.0;
    let x_l = augment(&labeled.inputs, &cfg.weak, cfg.seed, base);
    let sup_batch = Batch {
        inputs: x_l,
        labels: labeled.labels.clone(),
        weights: labeled.weights.clone(),
    };
    let (loss_sup, mut grads) = tinynn::loss_and_grad(student, &sup_batch, Loss::CrossEntropy)?;

    let weak_u = augment(unlabeled, &cfg.weak, cfg.seed, base + 1);
    let source = match cfg.pseudo_labels_from {
        PseudoLabelSource::Teacher => &*teacher,
        PseudoLabelSource::Student => &*student,
    };
    let (labels, weights) = pseudo_labels(&source.predict(&weak_u)?, cfg.confidence_threshold);
    let confident = weights.iter().sum::<f64>();
    let pseudo_label_rate = if weights.is_empty() {
        0.0
    } else {
        confident / weights.len() as f64
    };

    let mut loss_unsup = 0.0;
    if cfg.unlabeled_weight > 0.0 && confident > 0.0 {
        let strong_u = augment(unlabeled, &cfg.strong, cfg.seed, base + 2);
        let unsup_batch = Batch::labeled(strong_u, labels).with_weights(weights);
        let (l, g) = tinynn::loss_and_grad(student, &unsup_batch, Loss::CrossEntropy)?;
        loss_unsup = l;
        grads.add_scaled(&g, cfg.unlabeled_weight)?;
    }
    let loss_total = loss_sup + cfg.unlabeled_weight * loss_unsup;
    check_finite(loss_total, step)?;

    sgd_step(&mut student.params, &grads, opt)?;
    let smoothing = cfg.smoothing.with_seed(cfg.seed);
    let mask = smoothing::smooth_step(&smoothing, &mut teacher.params, &student.params, step)?;
    Ok(FixMatchStepOutput {
        loss_total,
        loss_supervised: loss_sup,
        loss_unsupervised: loss_unsup,
        pseudo_label_rate,
        mask,
    })
}

/// BYOL online network: encoder plus predictor head. Only the encoder has a
/// counterpart in the target network.
#[derive(Debug, Clone, PartialEq)]
pub struct ByolOnline {
    pub encoder: MlpModel,
    pub predictor: MlpModel,
    pub encoder_opt: OptState,
    pub predictor_opt: OptState,
}

impl ByolOnline {
    pub fn new(encoder: MlpModel, predictor: MlpModel, cfg: &TrainRunConfig) -> Result<Self> {
        if predictor.input_dim() != encoder.output_dim() || predictor.output_dim() != encoder.output_dim() {
            return Err(Error::Shape(format!(
                "predictor {:?} does not fit encoder output {}",
                predictor.layer_dims(),
                encoder.output_dim()
            )));
        }
        let encoder_opt = OptState::new(&encoder.params, cfg.base_lr, cfg.sgd_momentum, cfg.weight_decay);
        let predictor_opt = OptState::new(&predictor.params, cfg.base_lr, cfg.sgd_momentum, cfg.weight_decay);
        Ok(Self {
            encoder,
            predictor,
            encoder_opt,
            predictor_opt,
        })
    }

    fn set_lr(&mut self, lr: f64) {
        self.encoder_opt.lr = lr;
        self.predictor_opt.lr = lr;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ByolStepOutput {
    pub loss: f64,
    pub mask: Option<MaskSample>,
}

/// Symmetric BYOL loss for two views, plus gradients for the online encoder
/// and predictor. The target only runs forward.
pub fn byol_loss_and_grads(
    online: &ByolOnline,
    target: &MlpModel,
    view1: &Matrix,
    view2: &Matrix,
) -> Result<(f64, ParamStore, ParamStore)> {
    let mut enc_grads = online.encoder.params.zeros_like();
    let mut pred_grads = online.predictor.params.zeros_like();
    let mut loss = 0.0;
    for (online_view, target_view) in [(view1, view2), (view2, view1)] {
        let (h, enc_cache) = online.encoder.forward(online_view)?;
        let (q, pred_cache) = online.predictor.forward(&h)?;
        let z = target.predict(target_view)?;
        let (l, mut d_q) = tinynn::normalized_mse(&q, &z, None)?;
        loss += 0.5 * l;
        d_q.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        let (g_pred, d_h) = online.predictor.backward(&pred_cache, &d_q)?;
        let (g_enc, _) = online.encoder.backward(&enc_cache, &d_h)?;
        pred_grads.add_scaled(&g_pred, 1.0)?;
        enc_grads.add_scaled(&g_enc, 1.0)?;
    }
    Ok((loss, enc_grads, pred_grads))
}

/// One BYOL-lite update of the online network followed by smoothing of the
/// target from the online encoder. View 1 uses the weak policy and view 2
/// the strong one.
pub fn byol_step(
    online: &mut ByolOnline,
    target: &mut MlpModel,
    batch: &Matrix,
    cfg: &TrainRunConfig,
    step: StepIndex,
) -> Result<ByolStepOutput> {
    target.params.check_congruent(&online.encoder.params)?;
    let v1 = augment(batch, &cfg.weak, cfg.seed, 3 * step.0);
    let v2 = augment(batch, &cfg.strong, cfg.seed, 3 * step.0 + 1);
    let (loss, enc_grads, pred_grads) = byol_loss_and_grads(online, target, &v1, &v2)?;
    check_finite(loss, step)?;
    sgd_step(&mut online.encoder.params, &enc_grads, &mut online.encoder_opt)?;
    sgd_step(&mut online.predictor.params, &pred_grads, &mut online.predictor_opt)?;
    let smoothing = cfg.smoothing.with_seed(cfg.seed);
    let mask = smoothing::smooth_step(&smoothing, &mut target.params, &online.encoder.params, step)?;
    Ok(ByolStepOutput { loss, mask })
}

const PROBE_ITERS: usize = 300;
const PROBE_LR: f64 = 0.5;

/// Fits a linear classifier on frozen encoder features of the training split
/// and returns its accuracy on the evaluation split.
///
/// Features are standardized with training-split statistics; the classifier
/// is trained by full-batch SGD with momentum.
pub fn linear_probe(encoder: &MlpModel, dataset: &SyntheticDataset, seed: u64) -> Result<f64> {
    if dataset.train_indices.is_empty() {
        return Err(Error::config("dataset", "linear probe needs a non-empty training split"));
    }
    if dataset.eval_indices.is_empty() {
        return Err(Error::config("dataset", "linear probe needs a non-empty evaluation split"));
    }
    let mut train_x = encoder.predict(&dataset.points.select_rows(&dataset.train_indices))?;
    let mut eval_x = encoder.predict(&dataset.points.select_rows(&dataset.eval_indices))?;
    let d = train_x.cols();
    let n = train_x.rows() as f64;
    for j in 0..d {
        let mean = (0..train_x.rows()).map(|r| train_x.get(r, j)).sum::<f64>() / n;
        let var = (0..train_x.rows())
            .map(|r| (train_x.get(r, j) - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        for m in [&mut train_x, &mut eval_x] {
            for r in 0..m.rows() {
                let v = &mut m.row_mut(r)[j];
                *v = (*v - mean) / std;
            }
        }
    }
    let train_labels: Vec<usize> = dataset.train_indices.iter().map(|&i| dataset.labels[i]).collect();
    let eval_labels: Vec<usize> = dataset.eval_indices.iter().map(|&i| dataset.labels[i]).collect();
    let mut probe = MlpModel::init(&[d, dataset.num_classes], seed)?;
    let mut opt = OptState::new(&probe.params, PROBE_LR, 0.9, 0.0);
    let batch = Batch::labeled(train_x, train_labels);
    for _ in 0..PROBE_ITERS {
        let (_, grads) = tinynn::loss_and_grad(&probe, &batch, Loss::CrossEntropy)?;
        sgd_step(&mut probe.params, &grads, &mut opt)?;
    }
    Ok(accuracy(&probe.predict(&eval_x)?, &eval_labels))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / labels.len() as f64
}

/// One row of training telemetry. Epoch-level fields are only filled on the
/// last step of an epoch (and on the initial row for accuracies).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: Option<f64>,
    pub loss_supervised: Option<f64>,
    pub loss_unsupervised: Option<f64>,
    pub pseudo_label_rate: Option<f64>,
    pub teacher_param_mse: Option<f64>,
    pub teacher_signal_mse: Option<f64>,
    pub preserved_fraction: Option<f64>,
    pub eval_accuracy_student: Option<f64>,
    pub eval_accuracy_teacher: Option<f64>,
}

impl MetricsRow {
    fn new(step: u64, epoch: usize, lr: f64) -> Self {
        Self {
            step,
            epoch,
            lr,
            loss_total: None,
            loss_supervised: None,
            loss_unsupervised: None,
            pseudo_label_rate: None,
            teacher_param_mse: None,
            teacher_signal_mse: None,
            preserved_fraction: None,
            eval_accuracy_student: None,
            eval_accuracy_teacher: None,
        }
    }
}

/// Column order of the metrics CSV.
pub const METRICS_COLUMNS: [&str; 12] = [
    "step",
    "epoch",
    "lr",
    "loss_total",
    "loss_supervised",
    "loss_unsupervised",
    "pseudo_label_rate",
    "teacher_param_mse",
    "teacher_signal_mse",
    "preserved_fraction",
    "eval_accuracy_student",
    "eval_accuracy_teacher",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn final_teacher_accuracy(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_accuracy_teacher)
    }

    pub fn final_student_accuracy(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_accuracy_student)
    }

    /// `(epoch, value)` for every row where `field` is present.
    pub fn epoch_series(&self, field: impl Fn(&MetricsRow) -> Option<f64>) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| field(r).map(|v| (r.epoch, v)))
            .collect()
    }

    pub fn param_mse_series(&self) -> Vec<(usize, f64)> {
        self.epoch_series(|r| r.teacher_param_mse)
    }

    pub fn signal_mse_series(&self) -> Vec<(usize, f64)> {
        self.epoch_series(|r| r.teacher_signal_mse)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(METRICS_COLUMNS)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?;
        if headers.iter().ne(METRICS_COLUMNS) {
            return Err(Error::Format(format!("unexpected metrics header {headers:?}")));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRow>, _>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { rows })
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub teacher: ParamStore,
    pub student: ParamStore,
}

/// Fixed, unaugmented probe inputs for adjacent-epoch signal diagnostics.
pub fn probe_points(dataset: &SyntheticDataset, size: usize, seed: u64) -> Matrix {
    let mut pool = dataset.train_indices.clone();
    pool.shuffle(&mut rng::stream(seed, Domain::Probe, 0));
    pool.truncate(size.min(pool.len()));
    dataset.points.select_rows(&pool)
}

/// Teacher output on the probe set: class probabilities for FixMatch-lite,
/// unit-normalized embeddings for BYOL-lite.
fn teacher_signal(task: Task, teacher: &MlpModel, probe: &Matrix) -> Result<Matrix> {
    let out = teacher.predict(probe)?;
    Ok(match task {
        Task::FixmatchLite => tinynn::softmax(&out),
        Task::ByolLite => {
            let mut out = out;
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
            out
        }
    })
}

enum Models {
    FixMatch {
        student: MlpModel,
        teacher: MlpModel,
        opt: OptState,
    },
    Byol {
        online: Box<ByolOnline>,
        target: MlpModel,
    },
}

impl Models {
    fn teacher(&self) -> &MlpModel {
        match self {
            Models::FixMatch { teacher, .. } => teacher,
            Models::Byol { target, .. } => target,
        }
    }

    fn student(&self) -> &MlpModel {
        match self {
            Models::FixMatch { student, .. } => student,
            Models::Byol { online, .. } => &online.encoder,
        }
    }

    /// `(student, teacher)` evaluation accuracies.
    fn evaluate(&self, dataset: &SyntheticDataset, seed: u64) -> Result<(f64, f64)> {
        match self {
            Models::FixMatch { student, teacher, .. } => {
                let x = dataset.points.select_rows(&dataset.eval_indices);
                let y: Vec<usize> = dataset.eval_indices.iter().map(|&i| dataset.labels[i]).collect();
                Ok((
                    accuracy(&student.predict(&x)?, &y),
                    accuracy(&teacher.predict(&x)?, &y),
                ))
            }
            Models::Byol { online, target } => Ok((
                linear_probe(&online.encoder, dataset, seed)?,
                linear_probe(target, dataset, seed)?,
            )),
        }
    }
}

fn preserved_fraction(method: Method, mask: Option<&MaskSample>) -> f64 {
    match (method, mask) {
        (_, Some(mask)) => mask.preserved_fraction(),
        (Method::None, None) => 1.0,
        (_, None) => 0.0,
    }
}

/// Runs a full training loop and returns its metrics and final models.
///
/// The teacher starts as a clone of the student. Diagnostics and evaluation
/// run at every epoch boundary; row 0 holds the initial evaluation.
pub fn run_training(cfg: &TrainRunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.seed;
    let dataset = make_two_moons(cfg.dataset.n, cfg.dataset.noise, cfg.dataset.labeled_per_class, seed)?;
    let probe = probe_points(&dataset, cfg.probe_size, seed);

    let mut models = match cfg.task {
        Task::FixmatchLite => {
            let student = MlpModel::init(&cfg.classifier_dims(dataset.num_classes), seed)?;
            let opt = OptState::new(&student.params, cfg.base_lr, cfg.sgd_momentum, cfg.weight_decay);
            Models::FixMatch {
                teacher: student.clone(),
                student,
                opt,
            }
        }
        Task::ByolLite => {
            let encoder = MlpModel::init(&cfg.encoder_dims(), seed)?;
            let e = cfg.embedding_dim;
            let predictor = MlpModel::init(&[e, e, e], seed.wrapping_add(1))?;
            let target = encoder.clone();
            Models::Byol {
                online: Box::new(ByolOnline::new(encoder, predictor, cfg)?),
                target,
            }
        }
    };

    let pool = &dataset.train_indices;
    let batch_size = cfg.batch_unlabeled().min(pool.len());
    let steps_per_epoch = (pool.len() / batch_size).max(1) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs as u64;
    let lr_at = |t: u64| -> Result<f64> {
        if total_steps == 0 {
            Ok(cfg.base_lr)
        } else {
            tinynn::cosine_lr(cfg.base_lr, t, total_steps, warmup_steps, cfg.warmup_factor)
        }
    };

    let mut log = MetricsLog::default();
    let mut snapshots = vec![EpochSnapshot {
        epoch: 0,
        teacher_params: models.teacher().params.clone(),
        probe_outputs: teacher_signal(cfg.task, models.teacher(), &probe)?,
    }];
    let (acc_s, acc_t) = models.evaluate(&dataset, seed)?;
    let mut initial = MetricsRow::new(0, 0, lr_at(0)?);
    initial.eval_accuracy_student = Some(acc_s);
    initial.eval_accuracy_teacher = Some(acc_t);
    log.rows.push(initial);

    let labeled_labels = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| dataset.labels[i]).collect() };
    let mut step = StepIndex(0);
    for epoch in 1..=cfg.epochs {
        let mut order = pool.clone();
        order.shuffle(&mut rng::stream(seed, Domain::Shuffle, epoch as u64));
        let mut labeled_order = dataset.labeled_indices.clone();
        labeled_order.shuffle(&mut rng::stream(seed, Domain::Shuffle, (1 << 32) | epoch as u64));

        for k in 0..steps_per_epoch as usize {
            let lr = lr_at(step.0)?;
            let idx = &order[k * batch_size..(k + 1) * batch_size];
            let x_u = dataset.points.select_rows(idx);
            let mut row = MetricsRow::new(step.0 + 1, epoch, lr);
            let mask = match &mut models {
                Models::FixMatch { student, teacher, opt } => {
                    let l_idx: Vec<usize> = (0..cfg.batch_labeled)
                        .map(|j| labeled_order[(k * cfg.batch_labeled + j) % labeled_order.len()])
                        .collect();
                    let batch_l = Batch::labeled(dataset.points.select_rows(&l_idx), labeled_labels(&l_idx));
                    opt.lr = lr;
                    let out = fixmatch_step(student, teacher, opt, &batch_l, &x_u, cfg, step)?;
                    row.loss_total = Some(out.loss_total);
                    row.loss_supervised = Some(out.loss_supervised);
                    row.loss_unsupervised = Some(out.loss_unsupervised);
                    row.pseudo_label_rate = Some(out.pseudo_label_rate);
                    out.mask
                }
                Models::Byol { online, target } => {
                    online.set_lr(lr);
                    let out = byol_step(online, target, &x_u, cfg, step)?;
                    row.loss_total = Some(out.loss);
                    row.loss_unsupervised = Some(out.loss);
                    out.mask
                }
            };
            row.preserved_fraction = Some(preserved_fraction(cfg.smoothing.method, mask.as_ref()));
            log.rows.push(row);
            step = step.next();
        }

        snapshots.push(EpochSnapshot {
            epoch,
            teacher_params: models.teacher().params.clone(),
            probe_outputs: teacher_signal(cfg.task, models.teacher(), &probe)?,
        });
        let pair = &snapshots[snapshots.len() - 2..];
        let param_mse = diagnostics::param_mse_series(pair)?[0].1;
        let signal_mse = diagnostics::signal_mse_series(pair)?[0].1;
        let (acc_s, acc_t) = models.evaluate(&dataset, seed)?;
        let last = log.rows.last_mut().expect("epoch has at least one step");
        last.teacher_param_mse = Some(param_mse);
        last.teacher_signal_mse = Some(signal_mse);
        last.eval_accuracy_student = Some(acc_s);
        last.eval_accuracy_teacher = Some(acc_t);
        // Only the latest snapshot is needed for the next adjacent pair.
        snapshots.remove(0);
    }

    Ok(TrainOutcome {
        log,
        teacher: models.teacher().params.clone(),
        student: models.student().params.clone(),
    })
}
