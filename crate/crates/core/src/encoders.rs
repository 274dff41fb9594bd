//! Prompt parameterization, the frozen toy text encoder, and the synthetic
//! feature generator.
//!
//! A prompt for class `k` is `ctx_len` learnable context vectors followed by
//! that class's frozen token. The toy encoder mean-pools the tokens, applies
//! a frozen linear map, and L2-normalizes — which keeps the differentiable
//! path from context vectors to prompt features with a closed-form backward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng};
use crate::{Mat, Vec64};

/// Fixed base for preset sub-seeds so ensemble initializations are identical
/// across runs regardless of the run seed.
const PRESET_SEED_BASE: u64 = 0x70_72_65_73_65_74;

/// Named ensemble initializations; the toy encoder has no vocabulary, so each
/// name only selects a deterministic sub-seed.
pub const PRESET_NAMES: [&str; 4] = [
    "a photo of a",
    "this is a photo",
    "this is a",
    "one picture of a",
];

/// Scale of random context initialization.
const CTX_INIT_STD: f64 = 0.02;

/// Scale of the frozen class tokens: word-embedding scale, matching the
/// context initialization so the learnable tokens keep real leverage over
/// the pooled representation.
const CLASS_TOKEN_STD: f64 = 0.02;

/// Probability that a local slot is filled from the shared background pool.
const BACKGROUND_PROBABILITY: f64 = 0.3;

/// Context initialization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextInit {
    Random,
    PresetEnsemble,
}

/// Learnable context vectors plus frozen class tokens.
///
/// `ctx[n]` is the `ctx_len x embed_dim` matrix of prompt `n`'s context
/// vectors, shared across classes; `class_tokens` row `k` is class `k`'s
/// frozen token. Only `ctx` ever receives gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub ctx: Vec<Mat>,
    pub class_tokens: Mat,
}

impl PromptBank {
    /// Frozen class tokens from the rng, then context per the strategy.
    pub fn init(
        n_classes: usize,
        n_prompts: usize,
        ctx_len: usize,
        embed_dim: usize,
        strategy: ContextInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_classes == 0 || n_prompts == 0 || ctx_len == 0 || embed_dim == 0 {
            return Err(Error::InvalidParam(
                "prompt bank dimensions must all be >= 1".into(),
            ));
        }
        let class_tokens = gaussian_matrix(rng, n_classes, embed_dim, CLASS_TOKEN_STD);
        let ctx = init_context(strategy, n_prompts, ctx_len, embed_dim, rng)?;
        Ok(Self { ctx, class_tokens })
    }

    pub fn n_prompts(&self) -> usize {
        self.ctx.len()
    }

    pub fn ctx_len(&self) -> usize {
        self.ctx[0].rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.ctx[0].cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_tokens.rows()
    }
}

/// Context tensors per the strategy: random Gaussian(0, 0.02), or one fixed
/// seeded tensor per named preset (at most four).
pub fn init_context(
    strategy: ContextInit,
    n_prompts: usize,
    ctx_len: usize,
    embed_dim: usize,
    rng: &mut Rng,
) -> Result<Vec<Mat>> {
    match strategy {
        ContextInit::Random => Ok((0..n_prompts)
            .map(|_| gaussian_matrix(rng, ctx_len, embed_dim, CTX_INIT_STD))
            .collect()),
        ContextInit::PresetEnsemble => {
            if n_prompts > PRESET_NAMES.len() {
                return Err(Error::InvalidParam(format!(
                    "preset ensemble provides {} initializations, requested {n_prompts}",
                    PRESET_NAMES.len()
                )));
            }
            Ok(PRESET_NAMES[..n_prompts]
                .iter()
                .map(|name| {
                    let mut sub = Rng::with_seed(derive_seed(PRESET_SEED_BASE, name));
                    gaussian_matrix(&mut sub, ctx_len, embed_dim, CTX_INIT_STD)
                })
                .collect())
        }
    }
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.standard_normal() * std).collect();
    Mat::new(rows, cols, data).expect("length matches by construction")
}

/// Frozen linear text head: `embed_dim x feat_dim`, Gaussian entries scaled
/// by `1/sqrt(embed_dim)`, fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    proj: Mat,
}

impl TextEncoder {
    pub fn seeded(embed_dim: usize, feat_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::with_seed(seed);
        let scale = 1.0 / (embed_dim as f64).sqrt();
        Self {
            proj: gaussian_matrix(&mut rng, embed_dim, feat_dim, scale),
        }
    }

    /// Wrap an explicit projection (model loading, tests).
    pub fn from_projection(proj: Mat) -> Self {
        Self { proj }
    }

    pub fn projection(&self) -> &Mat {
        &self.proj
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.proj.cols()
    }
}

/// Encode every (class, prompt) pair: mean-pool the `ctx_len + 1` token
/// vectors, project, L2-normalize. Entry `k` of the output holds class `k`'s
/// `n_prompts x feat_dim` prompt features with unit rows.
pub fn encode_prompts(bank: &PromptBank, enc: &TextEncoder) -> Result<Vec<Mat>> {
    if bank.embed_dim() != enc.embed_dim() {
        return Err(Error::Shape(format!(
            "bank embeds in {} dims but encoder expects {}",
            bank.embed_dim(),
            enc.embed_dim()
        )));
    }
    let (k_classes, n_prompts) = (bank.n_classes(), bank.n_prompts());
    let feat_dim = enc.feat_dim();
    let mut out = Vec::with_capacity(k_classes);
    for k in 0..k_classes {
        let mut g_k = Mat::zeros(n_prompts, feat_dim);
        for n in 0..n_prompts {
            let pooled = pool_tokens(bank, k, n);
            let projected = project(&pooled, enc);
            let norm = projected.l2_norm();
            if norm <= 0.0 {
                return Err(Error::ZeroNorm(format!(
                    "projected prompt feature for class {k}, prompt {n}"
                )));
            }
            for (c, &x) in projected.as_slice().iter().enumerate() {
                *g_k.at_mut(n, c) = x / norm;
            }
        }
        out.push(g_k);
    }
    Ok(out)
}

/// Exact reverse-mode gradient of [`encode_prompts`] with respect to the
/// context vectors, given `dL/dG` for every class. Class tokens and the
/// projection are frozen and receive nothing.
///
/// Per (class, prompt): the normalization Jacobian `(I - g g^T)/|x|`, the
/// transposed projection, then the `1/(ctx_len+1)` mean-pooling factor spread
/// over every context row.
pub fn encode_prompts_backward(
    grad_g: &[Mat],
    bank: &PromptBank,
    enc: &TextEncoder,
) -> Result<Vec<Mat>> {
    let (k_classes, n_prompts) = (bank.n_classes(), bank.n_prompts());
    let (ctx_len, embed_dim) = (bank.ctx_len(), bank.embed_dim());
    let feat_dim = enc.feat_dim();
    if grad_g.len() != k_classes {
        return Err(Error::Shape(format!(
            "gradient stack has {} classes, bank has {k_classes}",
            grad_g.len()
        )));
    }
    for (k, g) in grad_g.iter().enumerate() {
        if g.rows() != n_prompts || g.cols() != feat_dim {
            return Err(Error::Shape(format!(
                "gradient for class {k} is {}x{}, expected {n_prompts}x{feat_dim}",
                g.rows(),
                g.cols()
            )));
        }
    }

    let pool_factor = 1.0 / (ctx_len as f64 + 1.0);
    // All ctx rows of prompt n share one pooled-gradient vector; accumulate
    // it over classes, then broadcast to the rows.
    let mut pooled_grads = vec![vec![0.0; embed_dim]; n_prompts];
    for k in 0..k_classes {
        for n in 0..n_prompts {
            let pooled = pool_tokens(bank, k, n);
            let projected = project(&pooled, enc);
            let norm = projected.l2_norm();
            if norm <= 0.0 {
                return Err(Error::ZeroNorm(format!(
                    "projected prompt feature for class {k}, prompt {n}"
                )));
            }
            let unit: Vec<f64> = projected.as_slice().iter().map(|&x| x / norm).collect();
            let g_row = grad_g[k].row(n);
            let radial: f64 = g_row.iter().zip(&unit).map(|(&a, &b)| a * b).sum();
            // (I - g g^T) grad / |x|
            let grad_x: Vec<f64> = g_row
                .iter()
                .zip(&unit)
                .map(|(&a, &u)| (a - radial * u) / norm)
                .collect();
            let acc = &mut pooled_grads[n];
            for d in 0..embed_dim {
                let row = enc.proj.row(d);
                let mut s = 0.0;
                for (c, &gx) in grad_x.iter().enumerate() {
                    s += row[c] * gx;
                }
                acc[d] += s * pool_factor;
            }
        }
    }

    let mut ctx_grad = Vec::with_capacity(n_prompts);
    for pg in &pooled_grads {
        let mut m = Mat::zeros(ctx_len, embed_dim);
        for l in 0..ctx_len {
            m.row_mut(l).copy_from_slice(pg);
        }
        ctx_grad.push(m);
    }
    Ok(ctx_grad)
}

fn pool_tokens(bank: &PromptBank, class: usize, prompt: usize) -> Vec64 {
    let (ctx_len, embed_dim) = (bank.ctx_len(), bank.embed_dim());
    let mut pooled = vec![0.0; embed_dim];
    for l in 0..ctx_len {
        for (d, &x) in bank.ctx[prompt].row(l).iter().enumerate() {
            pooled[d] += x;
        }
    }
    for (d, &x) in bank.class_tokens.row(class).iter().enumerate() {
        pooled[d] += x;
    }
    let factor = 1.0 / (ctx_len as f64 + 1.0);
    Vec64::new(pooled.into_iter().map(|x| x * factor).collect())
}

fn project(pooled: &Vec64, enc: &TextEncoder) -> Vec64 {
    let feat_dim = enc.feat_dim();
    let mut out = vec![0.0; feat_dim];
    for (d, &p) in pooled.as_slice().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (c, &w) in enc.proj.row(d).iter().enumerate() {
            out[c] += p * w;
        }
    }
    Vec64::new(out)
}

/// Synthetic generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    /// Attribute prototypes per class.
    pub n_attributes: usize,
    /// Training images per class.
    pub shots: usize,
    pub test_per_class: usize,
    /// Local features per image.
    pub m_locals: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    /// Prototypes shared across classes; 0 disables background slots.
    pub background_prototypes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_attributes: 4,
            shots: 16,
            test_per_class: 20,
            m_locals: 49,
            feat_dim: 64,
            noise_sigma: 0.1,
            background_prototypes: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("classes", self.n_classes),
            ("attributes", self.n_attributes),
            ("shots", self.shots),
            ("test images per class", self.test_per_class),
            ("local features", self.m_locals),
            ("feature dimension", self.feat_dim),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::InvalidParam(format!("{name} must be >= 1")));
            }
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidParam(format!(
                "noise sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.n_classes * self.shots
    }

    pub fn n_test(&self) -> usize {
        self.n_classes * self.test_per_class
    }
}

/// One image: `m_locals x feat_dim` unit-row local features, a unit global
/// feature, and the class label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub locals: Mat,
    pub global: Vec64,
    pub label: usize,
}

/// Generator provenance stored alongside every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub config: SynthConfig,
}

/// Immutable feature dataset: training images first (class-major), then test
/// images, as recorded by the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<FeatureSet>,
    pub n_classes: usize,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn train_split(&self) -> &[FeatureSet] {
        &self.images[..self.manifest.config.n_train()]
    }

    pub fn test_split(&self) -> &[FeatureSet] {
        &self.images[self.manifest.config.n_train()..]
    }

    pub fn feat_dim(&self) -> usize {
        self.manifest.config.feat_dim
    }

    pub fn m_locals(&self) -> usize {
        self.manifest.config.m_locals
    }
}

/// Generate a dataset: per class, unit-norm attribute prototypes; per image,
/// each local slot copies one of the class's attributes or (with probability
/// 0.3) one of the shared background prototypes, plus Gaussian noise, then is
/// unit-normalized. The global feature is the unit-normalized mean of the
/// locals. Deterministic per seed.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::with_seed(cfg.seed);
    let k_classes = cfg.n_classes;

    // Draw order is fixed: class attributes, backgrounds, train images
    // class-major, then test images class-major.
    let mut attributes: Vec<Vec<Vec64>> = Vec::with_capacity(k_classes);
    for _ in 0..k_classes {
        let protos = (0..cfg.n_attributes)
            .map(|_| rng.gaussian_vec(cfg.feat_dim).normalized())
            .collect::<Result<Vec<_>>>()?;
        attributes.push(protos);
    }
    let backgrounds: Vec<Vec64> = (0..cfg.background_prototypes)
        .map(|_| rng.gaussian_vec(cfg.feat_dim).normalized())
        .collect::<Result<Vec<_>>>()?;

    let mut images = Vec::with_capacity(cfg.n_train() + cfg.n_test());
    for split_count in [cfg.shots, cfg.test_per_class] {
        for class in 0..k_classes {
            for _ in 0..split_count {
                images.push(synth_image(cfg, class, &attributes[class], &backgrounds, &mut rng)?);
            }
        }
    }

    let manifest = DatasetManifest {
        version: 1,
        class_names: (0..k_classes).map(|k| format!("class_{k}")).collect(),
        config: cfg.clone(),
    };
    Ok(Dataset {
        images,
        n_classes: k_classes,
        manifest,
    })
}

fn synth_image(
    cfg: &SynthConfig,
    label: usize,
    attributes: &[Vec64],
    backgrounds: &[Vec64],
    rng: &mut Rng,
) -> Result<FeatureSet> {
    let mut locals = Mat::zeros(cfg.m_locals, cfg.feat_dim);
    for m in 0..cfg.m_locals {
        let proto = if !backgrounds.is_empty() && rng.uniform01() < BACKGROUND_PROBABILITY {
            &backgrounds[rng.index(backgrounds.len())]
        } else {
            &attributes[rng.index(attributes.len())]
        };
        let row = locals.row_mut(m);
        for (d, &p) in proto.as_slice().iter().enumerate() {
            row[d] = p + cfg.noise_sigma * rng.standard_normal();
        }
    }
    let locals = locals.l2_normalize_rows()?;

    let mut mean = vec![0.0; cfg.feat_dim];
    for m in 0..cfg.m_locals {
        for (d, &x) in locals.row(m).iter().enumerate() {
            mean[d] += x;
        }
    }
    let inv = 1.0 / cfg.m_locals as f64;
    let global = Vec64::new(mean.into_iter().map(|x| x * inv).collect()).normalized()?;
    Ok(FeatureSet {
        locals,
        global,
        label,
    })
}
