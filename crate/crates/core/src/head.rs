//! Classification heads: the transport-based multi-prompt head, the
//! single-prompt cosine baseline, and the ablation variants, with exact
//! context gradients under the two-stage scheme (transport plans are solved
//! in the forward pass and held fixed while the loss gradient flows through
//! the cost matrices only).

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_prompts, encode_prompts_backward, FeatureSet, PromptBank, TextEncoder};
use crate::error::{Error, Result};
use crate::numerics::softmax_temp;
use crate::ot;
use crate::{CostMat, Mat, SinkhornConfig, TransportPlan, Vec64};

/// Probability clamp applied before the cross-entropy logarithm.
const PROB_CLAMP: f64 = 1e-12;

/// Unit-norm tolerance on feature rows entering cosine costs; wide enough to
/// absorb 32-bit storage of generated features.
const UNIT_NORM_TOL: f64 = 1e-6;

/// Default weight of the prompt-variance regularizer.
pub const DEFAULT_VAR_WEIGHT: f64 = 0.1;

/// Ablation-table method family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// Feature map vs. multiple prompts through optimal transport.
    Plot,
    /// Single prompt vs. global feature (cosine).
    Coop,
    /// Prompt ensemble (renormalized mean) vs. global feature.
    Global,
    /// `Global` plus the prompt-variance regularizer.
    GlobalVar,
    /// `Global` with preset ensemble initialization instead of random.
    GlobalPreset,
    /// Feature map vs. prompts by the mean pairwise distance.
    MapMean,
    /// `MapMean` plus the prompt-variance regularizer.
    MapMeanVar,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Plot,
        MethodKind::Coop,
        MethodKind::Global,
        MethodKind::GlobalVar,
        MethodKind::GlobalPreset,
        MethodKind::MapMean,
        MethodKind::MapMeanVar,
    ];

    /// Short tag used in files, the CLI, and report tables.
    pub fn tag(self) -> &'static str {
        match self {
            MethodKind::Plot => "plot",
            MethodKind::Coop => "coop",
            MethodKind::Global => "g",
            MethodKind::GlobalVar => "g+v",
            MethodKind::GlobalPreset => "g+e",
            MethodKind::MapMean => "m",
            MethodKind::MapMeanVar => "m+v",
        }
    }

    /// Table label matching the ablation naming.
    pub fn label(self) -> &'static str {
        match self {
            MethodKind::Plot => "PLOT",
            MethodKind::Coop => "CoOp",
            MethodKind::Global => "G",
            MethodKind::GlobalVar => "G+V",
            MethodKind::GlobalPreset => "G+E",
            MethodKind::MapMean => "M",
            MethodKind::MapMeanVar => "M+V",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::InvalidParam(format!("unknown method tag {tag:?}")))
    }

    /// Whether the head consumes the local feature map (vs. the global
    /// feature only).
    pub fn uses_feature_map(self) -> bool {
        matches!(self, MethodKind::Plot | MethodKind::MapMean | MethodKind::MapMeanVar)
    }

    pub fn uses_variance_regularizer(self) -> bool {
        matches!(self, MethodKind::GlobalVar | MethodKind::MapMeanVar)
    }

    /// Methods that learn a single prompt per class.
    pub fn single_prompt(self) -> bool {
        matches!(self, MethodKind::Coop)
    }
}

/// Method selection plus the variance-regularizer weight (zero unless the
/// variant uses it).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub kind: MethodKind,
    pub var_weight: f64,
}

impl Method {
    pub fn new(kind: MethodKind) -> Self {
        let var_weight = if kind.uses_variance_regularizer() {
            DEFAULT_VAR_WEIGHT
        } else {
            0.0
        };
        Self { kind, var_weight }
    }

    pub fn with_var_weight(kind: MethodKind, var_weight: f64) -> Result<Self> {
        if !kind.uses_variance_regularizer() && var_weight != 0.0 {
            return Err(Error::InvalidParam(format!(
                "method {} does not take a variance weight",
                kind.tag()
            )));
        }
        if var_weight < 0.0 || !var_weight.is_finite() {
            return Err(Error::InvalidParam(format!(
                "variance weight {var_weight} must be finite and >= 0"
            )));
        }
        Ok(Self { kind, var_weight })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kind.uses_variance_regularizer() && self.var_weight != 0.0 {
            return Err(Error::InvalidParam(format!(
                "method {} must have var_weight 0, got {}",
                self.kind.tag(),
                self.var_weight
            )));
        }
        if self.var_weight < 0.0 || !self.var_weight.is_finite() {
            return Err(Error::InvalidParam(format!(
                "variance weight {} must be finite and >= 0",
                self.var_weight
            )));
        }
        Ok(())
    }
}

/// Head parameters: softmax temperature, inner-solver config, prompt count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub tau: f64,
    pub sinkhorn: SinkhornConfig,
    pub n_prompts: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            sinkhorn: SinkhornConfig::default(),
            n_prompts: 4,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParam(format!("tau {} must be > 0", self.tau)));
        }
        if self.n_prompts == 0 {
            return Err(Error::InvalidParam("n_prompts must be >= 1".into()));
        }
        self.sinkhorn.validate()
    }
}

/// Per-image classification scores. Plans and solver iteration counts are
/// present exactly when the transport head produced them.
#[derive(Debug, Clone)]
pub struct ClassScores {
    pub distances: Vec64,
    pub probabilities: Vec64,
    pub plans: Option<Vec<TransportPlan>>,
    pub inner_iterations: Option<Vec<usize>>,
}

fn check_unit_rows(m: &Mat, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        let norm: f64 = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidParam(format!(
                "{what} row {r} has norm {norm}, expected 1 within {UNIT_NORM_TOL}"
            )));
        }
    }
    Ok(())
}

fn check_unit_vec(v: &Vec64, what: &str) -> Result<()> {
    let norm = v.l2_norm();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::InvalidParam(format!(
            "{what} has norm {norm}, expected 1 within {UNIT_NORM_TOL}"
        )));
    }
    Ok(())
}

/// Cosine cost matrix `C[m][n] = 1 - f_m . g_n`; both inputs must have unit
/// rows, so entries land in [0, 2].
pub fn cost_matrix(locals: &Mat, prompts: &Mat) -> Result<CostMat> {
    if locals.cols() != prompts.cols() {
        return Err(Error::Shape(format!(
            "features have dim {}, prompts {}",
            locals.cols(),
            prompts.cols()
        )));
    }
    check_unit_rows(locals, "visual feature")?;
    check_unit_rows(prompts, "prompt feature")?;
    let sim = locals.matmul(&prompts.transpose())?;
    CostMat::new(sim.map(|s| 1.0 - s))
}

/// Softmax over `(1 - d_k) / tau`.
pub fn class_probabilities(distances: &Vec64, tau: f64) -> Result<Vec64> {
    let scores = Vec64::new(distances.as_slice().iter().map(|&d| 1.0 - d).collect());
    softmax_temp(&scores, tau)
}

/// Transport distances of one image against every class's prompt set, with
/// the converged plans. Classes are independent solves; failures carry the
/// class index.
pub fn plot_distances(image: &FeatureSet, prompt_stack: &[Mat], cfg: &HeadConfig) -> Result<ClassScores> {
    cfg.validate()?;
    let m = image.locals.rows();
    let row_marginal = ot::DiscreteMeasure::uniform(m)?;
    let mut distances = Vec::with_capacity(prompt_stack.len());
    let mut plans = Vec::with_capacity(prompt_stack.len());
    let mut iterations = Vec::with_capacity(prompt_stack.len());
    for (k, prompts) in prompt_stack.iter().enumerate() {
        let res = (|| {
            let cost = cost_matrix(&image.locals, prompts)?;
            let col_marginal = ot::DiscreteMeasure::uniform(prompts.rows())?;
            ot::solve(&cost, &row_marginal, &col_marginal, &cfg.sinkhorn)
        })()
        .map_err(|e| e.in_class(k))?;
        distances.push(res.cost);
        plans.push(res.plan);
        iterations.push(res.iterations);
    }
    let distances = Vec64::new(distances);
    let probabilities = class_probabilities(&distances, cfg.tau)?;
    Ok(ClassScores {
        distances,
        probabilities,
        plans: Some(plans),
        inner_iterations: Some(iterations),
    })
}

/// Cosine-similarity baseline: one prompt feature per class (rows of
/// `class_prompts`), scores `cos/tau`, distances reported as `1 - cos`.
pub fn coop_logits(f_global: &Vec64, class_prompts: &Mat, tau: f64) -> Result<ClassScores> {
    check_unit_vec(f_global, "global feature")?;
    check_unit_rows(class_prompts, "prompt feature")?;
    if f_global.len() != class_prompts.cols() {
        return Err(Error::Shape(format!(
            "global feature has dim {}, prompts {}",
            f_global.len(),
            class_prompts.cols()
        )));
    }
    let distances = Vec64::new(
        (0..class_prompts.rows())
            .map(|k| {
                let cos: f64 = class_prompts
                    .row(k)
                    .iter()
                    .zip(f_global.as_slice())
                    .map(|(&g, &f)| g * f)
                    .sum();
                1.0 - cos
            })
            .collect(),
    );
    let probabilities = class_probabilities(&distances, tau)?;
    Ok(ClassScores {
        distances,
        probabilities,
        plans: None,
        inner_iterations: None,
    })
}

/// `1 - cos(f, normalize(mean of prompt rows))`: the prompt-ensemble match
/// against the global feature. Errors if the prompt mean has zero norm.
pub fn ensemble_distance(f_global: &Vec64, prompts: &Mat) -> Result<f64> {
    check_unit_vec(f_global, "global feature")?;
    check_unit_rows(prompts, "prompt feature")?;
    let (mean, norm) = prompt_mean(prompts)?;
    let cos: f64 = mean
        .iter()
        .zip(f_global.as_slice())
        .map(|(&h, &f)| h * f)
        .sum::<f64>()
        / norm;
    Ok(1.0 - cos)
}

/// Mean of the prompt rows and its norm; errors on zero norm.
fn prompt_mean(prompts: &Mat) -> Result<(Vec<f64>, f64)> {
    let n = prompts.rows();
    let mut mean = vec![0.0; prompts.cols()];
    for r in 0..n {
        for (d, &x) in prompts.row(r).iter().enumerate() {
            mean[d] += x;
        }
    }
    let inv = 1.0 / n as f64;
    for x in &mut mean {
        *x *= inv;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return Err(Error::ZeroNorm("mean of prompt features".into()));
    }
    Ok((mean, norm))
}

/// Mean pairwise cosine distance between all (local, prompt) pairs; equals
/// the transport cost under the uniform (independent) plan.
pub fn mean_pair_distance(locals: &Mat, prompts: &Mat) -> Result<f64> {
    let cost = cost_matrix(locals, prompts)?;
    let total: f64 = cost.inner().data().iter().sum();
    Ok(total / (locals.rows() * prompts.rows()) as f64)
}

/// Mean pairwise cosine similarity over prompt pairs; zero for a single
/// prompt. Added to the loss (with a positive weight) it pushes prompts
/// apart.
pub fn variance_regularizer(prompts: &Mat) -> f64 {
    let n = prompts.rows();
    if n < 2 {
        return 0.0;
    }
    let norms: Vec<f64> = (0..n)
        .map(|r| prompts.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = prompts
                .row(i)
                .iter()
                .zip(prompts.row(j))
                .map(|(&a, &b)| a * b)
                .sum();
            total += dot / (norms[i] * norms[j]);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Mean over the batch of `-ln p(true class)` with the probability clamped
/// at 1e-12 before the logarithm.
pub fn cross_entropy_loss(probs: &[Vec64], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability vectors vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let mut total = 0.0;
    for (p, &label) in probs.iter().zip(labels) {
        let sum = p.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParam(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        if label >= p.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: p.len(),
            });
        }
        total -= p.at(label).max(PROB_CLAMP).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Per-image forward for a method: distances, plus plans/iterations when the
/// transport head ran.
pub fn method_distances(
    image: &FeatureSet,
    prompt_stack: &[Mat],
    method: Method,
    cfg: &HeadConfig,
) -> Result<ClassScores> {
    match method.kind {
        MethodKind::Plot => plot_distances(image, prompt_stack, cfg),
        MethodKind::Coop => {
            let single = single_prompt_matrix(prompt_stack)?;
            coop_logits(&image.global, &single, cfg.tau)
        }
        MethodKind::Global | MethodKind::GlobalVar | MethodKind::GlobalPreset => {
            let distances = Vec64::new(
                prompt_stack
                    .iter()
                    .enumerate()
                    .map(|(k, g)| ensemble_distance(&image.global, g).map_err(|e| e.in_class(k)))
                    .collect::<Result<Vec<_>>>()?,
            );
            let probabilities = class_probabilities(&distances, cfg.tau)?;
            Ok(ClassScores {
                distances,
                probabilities,
                plans: None,
                inner_iterations: None,
            })
        }
        MethodKind::MapMean | MethodKind::MapMeanVar => {
            let distances = Vec64::new(
                prompt_stack
                    .iter()
                    .enumerate()
                    .map(|(k, g)| mean_pair_distance(&image.locals, g).map_err(|e| e.in_class(k)))
                    .collect::<Result<Vec<_>>>()?,
            );
            let probabilities = class_probabilities(&distances, cfg.tau)?;
            Ok(ClassScores {
                distances,
                probabilities,
                plans: None,
                inner_iterations: None,
            })
        }
    }
}

/// Stack the single prompt row of every class into one `K x C` matrix.
pub fn single_prompt_matrix(prompt_stack: &[Mat]) -> Result<Mat> {
    let feat_dim = prompt_stack
        .first()
        .ok_or_else(|| Error::InvalidParam("empty prompt stack".into()))?
        .cols();
    let mut out = Mat::zeros(prompt_stack.len(), feat_dim);
    for (k, g) in prompt_stack.iter().enumerate() {
        if g.rows() != 1 {
            return Err(Error::Shape(format!(
                "single-prompt head needs 1 prompt per class, class {k} has {}",
                g.rows()
            )));
        }
        out.row_mut(k).copy_from_slice(g.row(0));
    }
    Ok(out)
}

/// Solve and collect the transport plans of every (image, class) pair; the
/// frozen-plan surrogate of the gradient audit starts from these.
pub fn solve_plans(
    batch: &[&FeatureSet],
    bank: &PromptBank,
    enc: &TextEncoder,
    cfg: &HeadConfig,
) -> Result<Vec<Vec<TransportPlan>>> {
    let prompt_stack = encode_prompts(bank, enc)?;
    batch
        .iter()
        .enumerate()
        .map(|(bi, img)| {
            let scores = plot_distances(img, &prompt_stack, cfg).map_err(|e| e.in_batch(bi))?;
            Ok(scores.plans.expect("transport head returns plans"))
        })
        .collect()
}

/// Batch loss with externally fixed transport plans (the frozen-plan
/// surrogate). For non-transport methods `plans` is ignored and this is the
/// ordinary loss.
pub fn loss_with_plans(
    batch: &[&FeatureSet],
    bank: &PromptBank,
    enc: &TextEncoder,
    method: Method,
    cfg: &HeadConfig,
    plans: Option<&[Vec<TransportPlan>]>,
) -> Result<f64> {
    method.validate()?;
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let prompt_stack = encode_prompts(bank, enc)?;
    let mut total = 0.0;
    for (bi, img) in batch.iter().enumerate() {
        let distances = if method.kind == MethodKind::Plot {
            let image_plans = plans
                .and_then(|p| p.get(bi))
                .ok_or_else(|| Error::MissingPlans(format!("no frozen plans for batch item {bi}")))?;
            frozen_plan_distances(img, &prompt_stack, image_plans).map_err(|e| e.in_batch(bi))?
        } else {
            method_distances(img, &prompt_stack, method, cfg)
                .map_err(|e| e.in_batch(bi))?
                .distances
        };
        let (ce, _) = ce_from_distances(&distances, img.label, cfg.tau)?;
        total += ce;
    }
    let mut loss = total / batch.len() as f64;
    if method.var_weight > 0.0 {
        let reg: f64 = prompt_stack.iter().map(variance_regularizer).sum::<f64>()
            / prompt_stack.len() as f64;
        loss += method.var_weight * reg;
    }
    if loss.is_nan() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(loss)
}

/// Cross-entropy of one image straight from distances via log-softmax: the
/// value never materializes probabilities, so saturated-wrong examples keep
/// their full gradient `p - y` exactly like a standard logits-based CE.
fn ce_from_distances(distances: &Vec64, label: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    let k = distances.len();
    if label >= k {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let scores: Vec<f64> = distances.as_slice().iter().map(|&d| (1.0 - d) / tau).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    let loss = lse - scores[label];
    let probs: Vec<f64> = scores.iter().map(|&s| (s - lse).exp()).collect();
    Ok((loss, probs))
}

fn frozen_plan_distances(
    image: &FeatureSet,
    prompt_stack: &[Mat],
    plans: &[TransportPlan],
) -> Result<Vec64> {
    if plans.len() != prompt_stack.len() {
        return Err(Error::Shape(format!(
            "{} plans for {} classes",
            plans.len(),
            prompt_stack.len()
        )));
    }
    let mut distances = Vec::with_capacity(prompt_stack.len());
    for (k, (prompts, plan)) in prompt_stack.iter().zip(plans).enumerate() {
        let cost = cost_matrix(&image.locals, prompts).map_err(|e| e.in_class(k))?;
        distances.push(ot::transport_cost(plan, &cost).map_err(|e| e.in_class(k))?);
    }
    Ok(Vec64::new(distances))
}

/// Batch forward plus the exact context gradient.
///
/// Transport plans are solved per (image, class) and then held fixed: the
/// distance gradient flows through the cost matrix only, i.e. for prompt `n`
/// `d d/d g_n = -sum_m T[m][n] f_m`, before the encoder chain rule. Variance
/// variants add their regularizer gradient. Returns the total loss and the
/// gradient with respect to the context tensors.
pub fn loss_and_grad(
    batch: &[&FeatureSet],
    bank: &PromptBank,
    enc: &TextEncoder,
    method: Method,
    cfg: &HeadConfig,
) -> Result<(f64, Vec<Mat>)> {
    method.validate()?;
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let prompt_stack = encode_prompts(bank, enc)?;
    let k_classes = prompt_stack.len();
    let n_prompts = bank.n_prompts();
    let feat_dim = enc.feat_dim();
    let inv_batch = 1.0 / batch.len() as f64;

    let mut grad_g = vec![Mat::zeros(n_prompts, feat_dim); k_classes];
    let mut total_loss = 0.0;

    for (bi, img) in batch.iter().enumerate() {
        let scores = method_distances(img, &prompt_stack, method, cfg).map_err(|e| e.in_batch(bi))?;
        if img.label >= k_classes {
            return Err(Error::LabelOutOfRange {
                label: img.label,
                classes: k_classes,
            });
        }
        let (ce, p) = ce_from_distances(&scores.distances, img.label, cfg.tau)?;
        total_loss += ce;

        // d loss / d distance_k for this image.
        let mut dloss_dd = vec![0.0; k_classes];
        for k in 0..k_classes {
            let indicator = if k == img.label { 1.0 } else { 0.0 };
            dloss_dd[k] = (indicator - p[k]) / cfg.tau;
        }

        for k in 0..k_classes {
            let w = dloss_dd[k] * inv_batch;
            if w == 0.0 {
                continue;
            }
            accumulate_distance_gradient(
                &mut grad_g[k],
                img,
                &prompt_stack[k],
                scores.plans.as_ref().map(|p| &p[k]),
                method.kind,
                w,
            )?;
        }
    }

    let mut loss = total_loss * inv_batch;
    if method.var_weight > 0.0 {
        let inv_k = 1.0 / k_classes as f64;
        let mut reg = 0.0;
        for (k, prompts) in prompt_stack.iter().enumerate() {
            reg += variance_regularizer(prompts);
            add_variance_gradient(&mut grad_g[k], prompts, method.var_weight * inv_k);
        }
        loss += method.var_weight * reg * inv_k;
    }
    if loss.is_nan() {
        return Err(Error::NonFinite("loss".into()));
    }

    let ctx_grad = encode_prompts_backward(&grad_g, bank, enc)?;
    Ok((loss, ctx_grad))
}

/// Add `weight * d distance / d prompt rows` for one (image, class) pair.
fn accumulate_distance_gradient(
    grad: &mut Mat,
    img: &FeatureSet,
    prompts: &Mat,
    plan: Option<&TransportPlan>,
    kind: MethodKind,
    weight: f64,
) -> Result<()> {
    let n = prompts.rows();
    match kind {
        MethodKind::Plot => {
            let plan = plan.ok_or_else(|| Error::MissingPlans("transport gradient".into()))?;
            // d d / d g_n = -sum_m T[m][n] f_m, plan held fixed.
            let pulled = plan.inner().transpose().matmul(&img.locals)?;
            grad.add_scaled(&pulled, -weight)?;
        }
        MethodKind::Coop => {
            if n != 1 {
                return Err(Error::Shape(format!(
                    "single-prompt gradient with {n} prompts"
                )));
            }
            for (d, &f) in img.global.as_slice().iter().enumerate() {
                *grad.at_mut(0, d) -= weight * f;
            }
        }
        MethodKind::Global | MethodKind::GlobalVar | MethodKind::GlobalPreset => {
            // d = 1 - f . h/|h| with h the prompt mean: tangential gradient
            // through the renormalization, split evenly over the rows.
            let (mean, norm) = prompt_mean(prompts)?;
            let unit: Vec<f64> = mean.iter().map(|&x| x / norm).collect();
            let f = img.global.as_slice();
            let radial: f64 = f.iter().zip(&unit).map(|(&a, &b)| a * b).sum();
            let row_factor = -weight / (n as f64 * norm);
            for r in 0..n {
                let row = grad.row_mut(r);
                for d in 0..row.len() {
                    row[d] += row_factor * (f[d] - radial * unit[d]);
                }
            }
        }
        MethodKind::MapMean | MethodKind::MapMeanVar => {
            let m = img.locals.rows();
            let scale = -weight / (m * n) as f64;
            let mut colsum = vec![0.0; img.locals.cols()];
            for r in 0..m {
                for (d, &x) in img.locals.row(r).iter().enumerate() {
                    colsum[d] += x;
                }
            }
            for r in 0..n {
                let row = grad.row_mut(r);
                for d in 0..row.len() {
                    row[d] += scale * colsum[d];
                }
            }
        }
    }
    Ok(())
}

/// Gradient of the mean pairwise cosine similarity, scaled by `weight`.
fn add_variance_gradient(grad: &mut Mat, prompts: &Mat, weight: f64) {
    let n = prompts.rows();
    if n < 2 {
        return;
    }
    let pair_scale = weight / (n * (n - 1) / 2) as f64;
    let norms: Vec<f64> = (0..n)
        .map(|r| prompts.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = prompts
                .row(i)
                .iter()
                .zip(prompts.row(j))
                .map(|(&a, &b)| a * b)
                .sum();
            let inv = 1.0 / (norms[i] * norms[j]);
            let cos = dot * inv;
            for d in 0..prompts.cols() {
                let gi = prompts.at(i, d);
                let gj = prompts.at(j, d);
                *grad.at_mut(i, d) += pair_scale * (gj * inv - cos * gi / (norms[i] * norms[i]));
                *grad.at_mut(j, d) += pair_scale * (gi * inv - cos * gj / (norms[j] * norms[j]));
            }
        }
    }
}
