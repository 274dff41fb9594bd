//! Few-shot training and evaluation.
//!
//! Training alternates the two stages per minibatch: transport plans are
//! solved with the current prompts (inside the head), then one SGD step
//! updates the context vectors with the plans held fixed. The schedule is a
//! constant warmup epoch followed by cosine annealing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoders::{ContextInit, Dataset, FeatureSet, PromptBank, TextEncoder};
use crate::error::{Error, Result};
use crate::head::{self, HeadConfig, Method, MethodKind};
use crate::numerics::{derive_seed, Rng};
use crate::{Mat, Vec64};

/// Training hyperparameters. Defaults: SGD at 0.002 with cosine annealing,
/// one constant warmup epoch at 1e-5, batches of 32, 50 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant learning rate used for epoch 0.
    pub warmup_lr: f64,
    pub seed: u64,
    pub method: Method,
    pub head: HeadConfig,
    pub shuffle: bool,
    /// Learnable context vectors per prompt.
    pub ctx_len: usize,
    /// Token embedding width; defaults to the dataset's feature dimension.
    pub embed_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            epochs: 50,
            batch_size: 32,
            warmup_lr: 1e-5,
            seed: 0,
            method: Method::new(MethodKind::Plot),
            head: HeadConfig::default(),
            shuffle: true,
            ctx_len: 16,
            embed_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidParam(format!("lr {} must be > 0", self.lr)));
        }
        if !(self.warmup_lr > 0.0) {
            return Err(Error::InvalidParam(format!(
                "warmup lr {} must be > 0",
                self.warmup_lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParam("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be >= 1".into()));
        }
        if self.ctx_len == 0 {
            return Err(Error::InvalidParam("ctx_len must be >= 1".into()));
        }
        if self.embed_dim == Some(0) {
            return Err(Error::InvalidParam("embed_dim must be >= 1".into()));
        }
        self.method.validate()?;
        self.head.validate()
    }

    /// Prompts per class actually trained: single-prompt methods ignore the
    /// configured count.
    pub fn effective_n_prompts(&self) -> usize {
        if self.method.kind.single_prompt() {
            1
        } else {
            self.head.n_prompts
        }
    }
}

/// Loss and learning rate of one completed epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub lr: f64,
}

/// Trained (or freshly initialized) model: learnable context plus every
/// frozen component and the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub bank: PromptBank,
    pub encoder: TextEncoder,
    pub head: HeadConfig,
    pub method: Method,
    /// Run seed the model was initialized (and trained) with.
    pub seed: u64,
    pub train_log: Vec<EpochStats>,
}

/// Learning rate for an epoch: constant warmup at epoch 0, then cosine
/// annealing from the initial rate over the remaining epochs.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::IndexOutOfRange {
            what: "epoch",
            index: epoch,
            len: config.epochs,
        });
    }
    if epoch == 0 {
        return Ok(config.warmup_lr);
    }
    let span = config.epochs.saturating_sub(1).max(1) as f64;
    let phase = (epoch - 1) as f64 / span;
    Ok(0.5 * config.lr * (1.0 + (std::f64::consts::PI * phase).cos()))
}

/// Plain SGD: `params -= lr * grads`, no momentum or weight decay.
pub fn sgd_step(params: &mut [Mat], grads: &[Mat], lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidParam(format!("lr {lr} must be > 0")));
    }
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "sgd: {} parameter tensors vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.add_scaled(g, -lr)?;
    }
    Ok(())
}

/// Fresh model for a dataset: seeded frozen encoder and class tokens, context
/// initialized per the method (presets for the preset-ensemble variant,
/// otherwise random).
pub fn init_model(n_classes: usize, feat_dim: usize, config: &TrainConfig) -> Result<ModelState> {
    config.validate()?;
    let embed_dim = config.embed_dim.unwrap_or(feat_dim);
    let n_prompts = config.effective_n_prompts();
    let strategy = if config.method.kind == MethodKind::GlobalPreset {
        ContextInit::PresetEnsemble
    } else {
        ContextInit::Random
    };
    let mut rng = Rng::with_seed(config.seed);
    let encoder = TextEncoder::seeded(embed_dim, feat_dim, derive_seed(config.seed, "text-encoder"));
    let bank = PromptBank::init(n_classes, n_prompts, config.ctx_len, embed_dim, strategy, &mut rng)?;
    let head = HeadConfig {
        n_prompts,
        ..config.head.clone()
    };
    Ok(ModelState {
        bank,
        encoder,
        head,
        method: config.method,
        seed: config.seed,
        train_log: Vec::new(),
    })
}

/// Train on the dataset's training split. Deterministic per
/// (seed, config, dataset); errors carry the epoch's batch index.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<ModelState> {
    config.validate()?;
    let train_images = dataset.train_split();
    if train_images.is_empty() {
        return Err(Error::InvalidParam("dataset has no training images".into()));
    }
    let mut model = init_model(dataset.n_classes, dataset.feat_dim(), config)?;
    let mut shuffle_rng = Rng::with_seed(derive_seed(config.seed, "batch-shuffle"));
    let mut order: Vec<usize> = (0..train_images.len()).collect();

    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch)?;
        if config.shuffle {
            shuffle_rng.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&FeatureSet> = chunk.iter().map(|&i| &train_images[i]).collect();
            let (loss, grad) =
                head::loss_and_grad(&batch, &model.bank, &model.encoder, model.method, &model.head)
                    .map_err(|e| e.in_batch(batch_idx))?;
            sgd_step(&mut model.bank.ctx, &grad, lr)?;
            epoch_loss += loss * batch.len() as f64;
        }
        model.train_log.push(EpochStats {
            loss: epoch_loss / train_images.len() as f64,
            lr,
        });
    }
    Ok(model)
}

/// Per-class and overall accuracy on the test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n_test: usize,
    pub n_correct: usize,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_counts: Vec<usize>,
    /// Mean inner-loop iterations per transport solve (0 when the method
    /// never runs the solver).
    pub mean_inner_iterations: f64,
    pub wall_clock_seconds: f64,
    pub wall_clock_per_image: f64,
}

/// Argmax-probability classification over the test split. Side-effect free:
/// repeated calls yield identical classifications.
pub fn evaluate(dataset: &Dataset, model: &ModelState) -> Result<EvalReport> {
    if model.encoder.feat_dim() != dataset.feat_dim() {
        return Err(Error::Shape(format!(
            "model expects feature dim {}, dataset has {}",
            model.encoder.feat_dim(),
            dataset.feat_dim()
        )));
    }
    if model.bank.n_classes() != dataset.n_classes {
        return Err(Error::Shape(format!(
            "model has {} classes, dataset {}",
            model.bank.n_classes(),
            dataset.n_classes
        )));
    }
    let test = dataset.test_split();
    if test.is_empty() {
        return Err(Error::InvalidParam("dataset has no test images".into()));
    }

    let start = Instant::now();
    let prompt_stack = crate::encoders::encode_prompts(&model.bank, &model.encoder)?;
    let k = dataset.n_classes;
    let mut correct = vec![0usize; k];
    let mut counts = vec![0usize; k];
    let mut solver_iterations = 0usize;
    let mut solver_calls = 0usize;
    for img in test {
        if img.label >= k {
            return Err(Error::LabelOutOfRange {
                label: img.label,
                classes: k,
            });
        }
        let scores = head::method_distances(img, &prompt_stack, model.method, &model.head)?;
        if let Some(iters) = &scores.inner_iterations {
            solver_iterations += iters.iter().sum::<usize>();
            solver_calls += iters.len();
        }
        let predicted = argmax(&scores.probabilities);
        counts[img.label] += 1;
        if predicted == img.label {
            correct[img.label] += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let n_correct: usize = correct.iter().sum();
    Ok(EvalReport {
        accuracy: n_correct as f64 / test.len() as f64,
        n_test: test.len(),
        n_correct,
        per_class_accuracy: correct
            .iter()
            .zip(&counts)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect(),
        per_class_counts: counts,
        mean_inner_iterations: if solver_calls == 0 {
            0.0
        } else {
            solver_iterations as f64 / solver_calls as f64
        },
        wall_clock_seconds: elapsed,
        wall_clock_per_image: elapsed / test.len() as f64,
    })
}

fn argmax(v: &Vec64) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v.at(i) > v.at(best) {
            best = i;
        }
    }
    best
}

/// Gradient-audit summary. Relative errors are taken over coordinates where
/// either side is meaningfully nonzero; saturated (zero/zero) coordinates are
/// counted separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
    pub checked: usize,
    pub skipped_zero: usize,
    pub eps: f64,
}

/// Coordinates with both analytic and numeric gradient below this are
/// saturated and excluded from relative-error statistics.
const GRAD_ZERO_FLOOR: f64 = 1e-10;

/// Central finite differences of the frozen-plan surrogate loss against the
/// analytic context gradient, over up to `max_coords` randomly sampled
/// context coordinates.
pub fn grad_check(
    model: &ModelState,
    batch: &[&FeatureSet],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidParam(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    if max_coords == 0 {
        return Err(Error::InvalidParam("need at least one coordinate".into()));
    }
    let (loss0, analytic) =
        head::loss_and_grad(batch, &model.bank, &model.encoder, model.method, &model.head)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite("base loss".into()));
    }
    let plans = if model.method.kind == MethodKind::Plot {
        Some(head::solve_plans(batch, &model.bank, &model.encoder, &model.head)?)
    } else {
        None
    };

    let n_prompts = model.bank.n_prompts();
    let ctx_len = model.bank.ctx_len();
    let embed_dim = model.bank.embed_dim();
    let mut coords: Vec<(usize, usize, usize)> = (0..n_prompts)
        .flat_map(|n| (0..ctx_len).flat_map(move |l| (0..embed_dim).map(move |d| (n, l, d))))
        .collect();
    if coords.len() > max_coords {
        Rng::with_seed(derive_seed(seed, "grad-check-coords")).shuffle(&mut coords);
        coords.truncate(max_coords);
    }

    let mut max_rel = 0.0_f64;
    let mut sum_rel = 0.0_f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (n, l, d) in coords {
        let mut up = model.bank.clone();
        *up.ctx[n].at_mut(l, d) += eps;
        let mut down = model.bank.clone();
        *down.ctx[n].at_mut(l, d) -= eps;
        let f_up = head::loss_with_plans(
            batch,
            &up,
            &model.encoder,
            model.method,
            &model.head,
            plans.as_deref(),
        )?;
        let f_down = head::loss_with_plans(
            batch,
            &down,
            &model.encoder,
            model.method,
            &model.head,
            plans.as_deref(),
        )?;
        let numeric = (f_up - f_down) / (2.0 * eps);
        let a = analytic[n].at(l, d);
        let denom = a.abs().max(numeric.abs());
        if denom < GRAD_ZERO_FLOOR {
            skipped += 1;
            continue;
        }
        let rel = ((a - numeric) / denom).abs();
        max_rel = max_rel.max(rel);
        sum_rel += rel;
        checked += 1;
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        mean_relative_error: if checked == 0 { 0.0 } else { sum_rel / checked as f64 },
        checked,
        skipped_zero: skipped,
        eps,
    })
}
