//! Episodic bilevel training, the supervised baseline, and evaluation.
//!
//! One meta step:
//!
//! 1. forward the meta-train batch with (ψ, θ, φ) and build `L_meta-train`;
//! 2. take one plain gradient step on (ψ, θ) only, giving (ψ′, θ′); with
//!    `second_order` the step keeps its dependence on (ψ, θ);
//! 3. forward the meta-test batch with (ψ′, θ′, φ) and build `L_meta-test`;
//! 4. differentiate the sum with respect to (ψ, θ, φ) and apply one Adam
//!    update to every group.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{Batch, Dataset, EpisodeSampler, EpisodeSplit, ImageSize};
use crate::error::{Error, Result};
use crate::losses::{meta_test_loss, meta_train_loss, supervised_loss, Loss, LossBreakdown, LossWeights};
use crate::metrics::{distance_correlation, pool_features, segmentation_metrics, DcResult, HausdorffVariant, MetricsReport};
use crate::networks::{argmax_masks, Model, ModelConfig, ModelOutputs, ParamSets, ParamValues};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Learning rate and iteration count of the full-scale configuration.
pub const FULL_SCALE_LR: f64 = 2e-5;
pub const FULL_SCALE_ITERATIONS: usize = 50_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Adam learning rate of the outer update.
    pub outer_lr: f64,
    /// Step size α of the inner gradient-descent update.
    pub inner_lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub second_order: bool,
    pub weights: LossWeights,
    pub seed: u64,
    /// Evaluate on the target domain every this many steps (0 = never).
    pub eval_every: usize,
    pub dataset: Option<PathBuf>,
    /// Held-out domain, excluded from training.
    pub target_domain: Option<usize>,
    /// Tiny i.i.d. perturbation of the rank-loss matrix during training.
    pub rank_jitter: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_lr: FULL_SCALE_LR,
            inner_lr: FULL_SCALE_LR,
            iterations: 2_000,
            batch_size: 4,
            second_order: true,
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 0,
            dataset: None,
            target_domain: None,
            rank_jitter: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The full-length schedule (50K iterations).
    pub fn full_scale() -> Self {
        Self { iterations: FULL_SCALE_ITERATIONS, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("outer_lr must be positive, got {}", self.outer_lr)));
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("inner_lr must be positive, got {}", self.inner_lr)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        self.weights.validate()
    }
}

/// Mixes a stream id into a run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random streams consumed by a training step.
pub struct StepRngs {
    pub noise: ChaCha8Rng,
    pub jitter: Option<ChaCha8Rng>,
}

impl StepRngs {
    pub fn new(seed: u64, jitter: bool) -> Self {
        Self {
            noise: ChaCha8Rng::seed_from_u64(sub_seed(seed, 2)),
            jitter: jitter.then(|| ChaCha8Rng::seed_from_u64(sub_seed(seed, 3))),
        }
    }

    fn jitter(&mut self) -> Option<&mut dyn rand::RngCore> {
        self.jitter.as_mut().map(|r| r as &mut dyn rand::RngCore)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub split: Option<EpisodeSplit>,
    pub meta_train: LossBreakdown,
    pub meta_test: Option<LossBreakdown>,
    pub skipped: bool,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub skipped_steps: usize,
}

impl TrainHistory {
    /// Loss totals in logging order (meta-train then meta-test per step);
    /// excludes wall-clock so identical runs compare equal.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.steps
            .iter()
            .flat_map(|s| std::iter::once(s.meta_train.total).chain(s.meta_test.as_ref().map(|b| b.total)))
            .collect()
    }

    /// Values of one named term from the first (meta-train / train) split.
    pub fn term_trace(&self, name: &str) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.meta_train.term(name)).collect()
    }

    /// One JSON object per logged step and split:
    /// `{"step", "split", <term>: value, ..., "total"}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |step: usize, split: &str, b: &LossBreakdown| {
            let mut obj = serde_json::Map::new();
            obj.insert("step".into(), step.into());
            obj.insert("split".into(), split.into());
            for (k, v) in &b.terms {
                obj.insert(k.clone(), (*v).into());
            }
            obj.insert("total".into(), b.total.into());
            out.push_str(&serde_json::Value::Object(obj).to_string());
            out.push('\n');
        };
        for s in &self.steps {
            match &s.meta_test {
                Some(te) => {
                    line(s.step, "meta_train", &s.meta_train);
                    line(s.step, "meta_test", te);
                }
                None => line(s.step, "train", &s.meta_train),
            }
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

// ---- bilevel mechanics ---------------------------------------------------------

/// One plain gradient-descent step `p - alpha * ∇loss`. With `create_graph`
/// the result stays differentiable with respect to `params` through the
/// gradient itself; otherwise the gradient enters as a constant.
pub fn sgd_step(params: &[Var], loss: &Var, alpha: f64, create_graph: bool) -> Result<Vec<Var>> {
    let grads = grad(loss, params, create_graph);
    if let Some(i) = grads.iter().position(|g| !g.value().all_finite()) {
        return Err(Error::NonFinite(format!("inner-loop gradient of parameter #{i}")));
    }
    Ok(params.iter().zip(&grads).map(|(p, g)| p.sub(&g.scale(alpha))).collect())
}

/// `L_train(w) + L_test(w - α ∇L_train(w))` for arbitrary differentiable
/// objectives over a shared parameter list.
pub fn bilevel_objective(
    params: &[Var],
    train_loss: impl Fn(&[Var]) -> Var,
    test_loss: impl Fn(&[Var]) -> Var,
    alpha: f64,
    second_order: bool,
) -> Result<Var> {
    let tr = train_loss(params);
    let adapted = sgd_step(params, &tr, alpha, second_order)?;
    Ok(tr.add(&test_loss(&adapted)))
}

/// Result of the inner-loop update.
pub struct InnerUpdate {
    pub psi_prime: Vec<Var>,
    pub theta_prime: Vec<Var>,
    pub loss: Loss,
    pub outputs: ModelOutputs,
}

fn first_non_finite(b: &LossBreakdown) -> String {
    b.terms.iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k.clone()).unwrap_or_else(|| "total".into())
}

/// Gradient step on `L_meta-train` over (ψ, θ) only; φ is read, not cloned.
pub fn inner_update(
    model: &Model,
    params: &ParamSets,
    batch: &Batch,
    alpha: f64,
    weights: &LossWeights,
    second_order: bool,
    rngs: &mut StepRngs,
) -> Result<InnerUpdate> {
    let images = Var::constant(batch.images.clone());
    let outputs = model.forward(params, &images, Some(&mut rngs.noise))?;
    let loss = meta_train_loss(&outputs, batch, weights, model.config.num_classes, rngs.jitter())?;
    if !loss.breakdown.is_finite() {
        return Err(Error::NonFinite(format!("meta-train loss term `{}`", first_non_finite(&loss.breakdown))));
    }
    let n_psi = params.psi.len();
    let inner: Vec<Var> = params.psi.iter().chain(&params.theta).cloned().collect();
    let mut adapted = sgd_step(&inner, &loss.total, alpha, second_order)?;
    let theta_prime = adapted.split_off(n_psi);
    Ok(InnerUpdate { psi_prime: adapted, theta_prime, loss, outputs })
}

/// The summed bilevel objective on one episode.
pub struct MetaObjective {
    pub total: Var,
    pub meta_train: LossBreakdown,
    pub meta_test: LossBreakdown,
}

pub fn meta_objective(
    model: &Model,
    params: &ParamSets,
    train: &Batch,
    test: &Batch,
    config: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<MetaObjective> {
    let inner = inner_update(model, params, train, config.inner_lr, &config.weights, config.second_order, rngs)?;
    let images = Var::constant(test.images.clone());
    let out = model.forward_with(&inner.psi_prime, &inner.theta_prime, params, &images, Some(&mut rngs.noise))?;
    let te = meta_test_loss(&out, test, &config.weights)?;
    if !te.breakdown.is_finite() {
        return Err(Error::NonFinite(format!("meta-test loss term `{}`", first_non_finite(&te.breakdown))));
    }
    Ok(MetaObjective {
        total: inner.loss.total.add(&te.total),
        meta_train: inner.loss.breakdown,
        meta_test: te.breakdown,
    })
}

#[derive(Clone, Debug)]
pub struct MetaStepOutcome {
    pub meta_train: LossBreakdown,
    pub meta_test: LossBreakdown,
    pub skipped: bool,
    pub reason: Option<String>,
}

/// One full meta step with an Adam update of every parameter group. A
/// non-finite loss or gradient skips the update and leaves `values` as is.
pub fn meta_step(
    model: &Model,
    values: &mut ParamValues,
    adam: &mut Adam,
    train: &Batch,
    test: &Batch,
    config: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<MetaStepOutcome> {
    let vars = values.to_vars();
    let skipped = |reason: String| MetaStepOutcome {
        meta_train: LossBreakdown::default(),
        meta_test: LossBreakdown::default(),
        skipped: true,
        reason: Some(reason),
    };
    let obj = match meta_objective(model, &vars, train, test, config, rngs) {
        Ok(o) => o,
        Err(Error::NonFinite(what)) => return Ok(skipped(what)),
        Err(e) => return Err(e),
    };
    let flat: Vec<Var> = vars.iter().cloned().collect();
    let grads: Vec<Tensor> = grad(&obj.total, &flat, false).into_iter().map(|g| g.value().clone()).collect();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        let mut out = skipped(format!("outer gradient of parameter #{i}"));
        out.meta_train = obj.meta_train;
        out.meta_test = obj.meta_test;
        return Ok(out);
    }
    adam.step(values.iter_mut(), &grads);
    Ok(MetaStepOutcome { meta_train: obj.meta_train, meta_test: obj.meta_test, skipped: false, reason: None })
}

// ---- drivers -------------------------------------------------------------------

fn source_domains(dataset: &Dataset, target: Option<usize>) -> Result<Vec<usize>> {
    let ids = dataset.domain_ids();
    if let Some(t) = target {
        if !ids.contains(&t) {
            return Err(Error::InvalidConfig(format!("target domain {t} is not in the dataset (domains {ids:?})")));
        }
    }
    let sources: Vec<usize> = ids.into_iter().filter(|&d| Some(d) != target).collect();
    for &d in &sources {
        if dataset.indices_of(d).is_empty() {
            return Err(Error::Episode(format!("source domain {d} has no samples")));
        }
    }
    Ok(sources)
}

fn build_model(config: &TrainConfig, dataset: &Dataset, sources: &[usize]) -> Result<Model> {
    let model_cfg =
        ModelConfig { num_classes: dataset.num_classes, num_domains: sources.len(), ..config.model.clone() };
    dataset.check_size(model_cfg.image_size)?;
    Model::new(model_cfg)
}

pub const METHOD_META: &str = "meta";
pub const METHOD_ERM: &str = "erm";

/// Episodic meta-training on every domain except `config.target_domain`.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    let sources = source_domains(dataset, config.target_domain)?;
    if sources.len() < 3 {
        return Err(Error::Episode(format!("meta-training needs >= 3 source domains, got {}", sources.len())));
    }
    let model = build_model(config, dataset, &sources)?;
    let mut values = model.init_params(config.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(config.outer_lr), values.iter());
    let mut sampler = EpisodeSampler::new(dataset, &sources, sub_seed(config.seed, 1))?;
    let mut rngs = StepRngs::new(config.seed, config.rank_jitter);
    let mut history = TrainHistory::default();

    for step in 0..config.iterations {
        let start = Instant::now();
        let split = sampler.split()?;
        let (tr, te) = sampler.sample_batches(&split, dataset, config.batch_size)?;
        let outcome = meta_step(&model, &mut values, &mut adam, &tr, &te, config, &mut rngs)?;
        history.skipped_steps += outcome.skipped as usize;
        history.steps.push(StepRecord {
            step,
            split: Some(split),
            meta_train: outcome.meta_train,
            meta_test: Some(outcome.meta_test),
            skipped: outcome.skipped,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        maybe_eval(config, dataset, &model, &values, &sources, METHOD_META, step, &mut history)?;
    }
    Ok(TrainOutput { checkpoint: Checkpoint::from_params(&model, &values, config, METHOD_META, &sources), history })
}

#[allow(clippy::too_many_arguments)]
fn maybe_eval(
    config: &TrainConfig,
    dataset: &Dataset,
    model: &Model,
    values: &ParamValues,
    sources: &[usize],
    method: &str,
    step: usize,
    history: &mut TrainHistory,
) -> Result<()> {
    if let Some(target) = config.target_domain {
        if config.eval_every > 0 && (step + 1).is_multiple_of(config.eval_every) {
            let ckpt = Checkpoint::from_params(model, values, config, method, sources);
            history.evals.push(EvalRecord { step, report: evaluate(&ckpt, dataset, target)? });
        }
    }
    Ok(())
}

/// Supervised baseline: F_ψ and T_θ trained with the Dice loss on pooled
/// labeled source samples, same number of steps and batch size.
pub fn train_erm_baseline(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    let sources = source_domains(dataset, config.target_domain)?;
    if sources.is_empty() {
        return Err(Error::Episode("no source domains".into()));
    }
    let model = build_model(config, dataset, &sources)?;
    let mut values = model.init_params(config.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(config.outer_lr), values.psi.iter().chain(&values.theta));
    let mut sampler = EpisodeSampler::new(dataset, &sources, sub_seed(config.seed, 1))?;
    let mut history = TrainHistory::default();

    for step in 0..config.iterations {
        let start = Instant::now();
        let batch = sampler.sample_labeled(dataset, config.batch_size)?;
        let psi: Vec<Var> = values.psi.iter().map(|t| Var::param(t.clone())).collect();
        let theta: Vec<Var> = values.theta.iter().map(|t| Var::param(t.clone())).collect();
        let y_hat = model.segment(&psi, &theta, &Var::constant(batch.images.clone()))?;
        let loss = supervised_loss(&y_hat, &batch, &config.weights)?;
        let flat: Vec<Var> = psi.into_iter().chain(theta).collect();
        let grads: Vec<Tensor> = grad(&loss.total, &flat, false).into_iter().map(|g| g.value().clone()).collect();
        let skipped = !loss.breakdown.is_finite() || grads.iter().any(|g| !g.all_finite());
        if !skipped {
            adam.step(values.psi.iter_mut().chain(values.theta.iter_mut()), &grads);
        }
        history.skipped_steps += skipped as usize;
        history.steps.push(StepRecord {
            step,
            split: None,
            meta_train: loss.breakdown,
            meta_test: None,
            skipped,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        maybe_eval(config, dataset, &model, &values, &sources, METHOD_ERM, step, &mut history)?;
    }
    Ok(TrainOutput { checkpoint: Checkpoint::from_params(&model, &values, config, METHOD_ERM, &sources), history })
}

// ---- evaluation ----------------------------------------------------------------

/// Eval-mode outputs for a stack of images `[B,1,H,W]`.
pub struct EvalOutputs {
    pub y_hat: Tensor,
    pub x_hat: Tensor,
    pub z: Tensor,
    pub s: Tensor,
    pub d: Tensor,
}

pub fn eval_outputs(model: &Model, params: &ParamValues, images: &Tensor) -> Result<EvalOutputs> {
    no_grad(|| {
        let p = params.to_constants();
        let out = model.forward(&p, &Var::constant(images.clone()), None)?;
        Ok(EvalOutputs {
            y_hat: out.y_hat.value().clone(),
            x_hat: out.x_hat.value().clone(),
            z: out.latents.z.value().clone(),
            s: out.latents.s.value().clone(),
            d: out.latents.d.value().clone(),
        })
    })
}

fn stack_images(dataset: &Dataset, indices: &[usize], size: ImageSize) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * size.pixels());
    for &i in indices {
        data.extend(dataset.samples[i].image.iter().map(|&p| p as f64));
    }
    Tensor::new(vec![indices.len(), 1, size.height, size.width], data)
}

const EVAL_CHUNK: usize = 16;

/// Eval-mode segmentation metrics and latent distance correlation on every
/// sample of `domain_id`.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, domain_id: usize) -> Result<MetricsReport> {
    evaluate_with(checkpoint, dataset, domain_id, HausdorffVariant::Modified)
}

pub fn evaluate_with(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    domain_id: usize,
    variant: HausdorffVariant,
) -> Result<MetricsReport> {
    let model = checkpoint.build_model()?;
    dataset.check_size(model.config.image_size)?;
    let params = checkpoint.params(&model)?;
    let indices = dataset.indices_of(domain_id);
    if indices.is_empty() {
        return Err(Error::InvalidConfig(format!("domain {domain_id} has no samples to evaluate")));
    }
    let mut preds = Vec::with_capacity(indices.len());
    let mut gts = Vec::with_capacity(indices.len());
    let mut pooled = Vec::new();
    let mut codes = Vec::new();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let out = eval_outputs(&model, &params, &stack_images(dataset, chunk, dataset.size))?;
        preds.extend(argmax_masks(&out.y_hat));
        pooled.push(pool_features(&out.z)?);
        codes.push(Tensor::concat(&[&out.s, &out.d], 1));
        for &i in chunk {
            let gt = dataset.samples[i]
                .mask
                .clone()
                .ok_or_else(|| Error::InvalidConfig(format!("sample {i} of domain {domain_id} has no ground truth")))?;
            gts.push(gt);
        }
    }
    let segmentation = segmentation_metrics(&preds, &gts, dataset.size, model.config.num_classes, variant)?;
    let dc = if indices.len() >= 4 {
        let z = Tensor::concat(&pooled.iter().collect::<Vec<_>>(), 0);
        let c = Tensor::concat(&codes.iter().collect::<Vec<_>>(), 0);
        distance_correlation(&z, &c)?
    } else {
        DcResult { value: 0.0, degenerate: true }
    };
    Ok(MetricsReport {
        domain_id,
        sample_count: indices.len(),
        segmentation,
        dc: dc.value,
        dc_degenerate: dc.degenerate,
    })
}
