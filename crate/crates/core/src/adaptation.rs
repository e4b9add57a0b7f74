//! Segmenter adaptation on source/transferred pairs: per-image cross-entropy
//! on the shared annotation plus a cosine-similarity loss tying the pooled
//! features of the two images together.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{poly_lr, shuffled_indices, SgdMomentum};
use crate::rng::{rng_from_seed, Rng};
use crate::scene::{Domain, ReadAudit, SceneSample};
use crate::segmentation::{ClassMap, SegModel};
use crate::tensor::Tensor3;
use crate::transfer::TransferredPair;

/// Components of the combined objective; `total = lambda · sim + task`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub sim: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn combine(task: f64, sim: f64, lambda: f64) -> Self {
        Self {
            task,
            sim,
            total: lambda * sim + task,
            lambda,
        }
    }
}

fn norms(f1: &[f64], f2: &[f64]) -> Result<(f64, f64, f64)> {
    if f1.len() != f2.len() {
        return Err(invalid!(
            "feature vectors differ in length ({} vs {})",
            f1.len(),
            f2.len()
        ));
    }
    let n1 = f1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = f2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero feature vector".into(),
        ));
    }
    let dot = f1.iter().zip(f2).map(|(a, b)| a * b).sum::<f64>();
    Ok((dot, n1, n2))
}

/// `1 − cos(f1, f2)`, in `[0, 2]`.
pub fn sim_loss(f1: &[f64], f2: &[f64]) -> Result<f64> {
    let (dot, n1, n2) = norms(f1, f2)?;
    Ok((1.0 - dot / (n1 * n2)).clamp(0.0, 2.0))
}

/// [`sim_loss`] with its gradients w.r.t. both inputs.
pub fn sim_loss_grad(f1: &[f64], f2: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (dot, n1, n2) = norms(f1, f2)?;
    let cos = dot / (n1 * n2);
    let g1 = f1
        .iter()
        .zip(f2)
        .map(|(&a, &b)| -(b / (n1 * n2) - cos * a / (n1 * n1)))
        .collect();
    let g2 = f1
        .iter()
        .zip(f2)
        .map(|(&a, &b)| -(a / (n1 * n2) - cos * b / (n2 * n2)))
        .collect();
    Ok((1.0 - cos, g1, g2))
}

/// Pixel-averaged categorical cross-entropy and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &Tensor3, target: &ClassMap) -> Result<(f64, Tensor3)> {
    let (c, h, w) = logits.shape();
    if target.shape() != (h, w) {
        return Err(invalid!(
            "label shape {:?} does not match logits ({h}, {w})",
            target.shape()
        ));
    }
    target.check_classes(c)?;
    let n = h * w;
    let d = logits.data();
    let mut grad = Tensor3::zeros(c, h, w);
    let mut loss = 0.0;
    let mut probs = vec![0.0; c];
    for (i, &y) in target.data().iter().enumerate() {
        let max = (0..c).map(|k| d[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (k, p) in probs.iter_mut().enumerate() {
            *p = (d[k * n + i] - max).exp();
            z += *p;
        }
        loss += z.ln() + max - d[y as usize * n + i];
        let g = grad.data_mut();
        for (k, p) in probs.iter().enumerate() {
            g[k * n + i] = (p / z - if k == y as usize { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

fn check_pair(m: &SegModel, image: &Tensor3, generated: &Tensor3, y: &ClassMap) -> Result<()> {
    image.ensure_same_shape(generated, "generated image")?;
    y.check_classes(m.num_classes())
}

/// Cross-entropy of both images against the original annotation.
pub fn task_loss(m: &SegModel, image: &Tensor3, generated: &Tensor3, y: &ClassMap) -> Result<f64> {
    check_pair(m, image, generated, y)?;
    let (a, _) = cross_entropy(&m.logits(image)?, y)?;
    let (b, _) = cross_entropy(&m.logits(generated)?, y)?;
    Ok(a + b)
}

pub fn zodi_loss(
    m: &SegModel,
    image: &Tensor3,
    generated: &Tensor3,
    y: &ClassMap,
    lambda: f64,
) -> Result<LossBreakdown> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(invalid!("lambda must be a non-negative number, got {lambda}"));
    }
    let task = task_loss(m, image, generated, y)?;
    let sim = sim_loss(&m.extract_features(image)?, &m.extract_features(generated)?)?;
    Ok(LossBreakdown::combine(task, sim, lambda))
}

/// Combined loss and its parameter gradient, accumulated into `grads` with
/// weight `weight`.
pub fn zodi_loss_and_grad(
    m: &SegModel,
    image: &Tensor3,
    generated: &Tensor3,
    y: &ClassMap,
    lambda: f64,
    weight: f64,
    grads: &mut [f64],
) -> Result<LossBreakdown> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(invalid!("lambda must be a non-negative number, got {lambda}"));
    }
    check_pair(m, image, generated, y)?;
    let fa = m.forward_train(image)?;
    let fb = m.forward_train(generated)?;
    let (ce_a, mut g_a) = cross_entropy(&fa.logits, y)?;
    let (ce_b, mut g_b) = cross_entropy(&fb.logits, y)?;
    let (sim, gp_a, gp_b) = match sim_loss_grad(&fa.pooled, &fb.pooled) {
        Ok(v) => v,
        // The similarity term does not enter the objective when λ = 0.
        Err(Error::Degenerate(_)) if lambda == 0.0 => (0.0, Vec::new(), Vec::new()),
        Err(e) => return Err(e),
    };
    for g in [&mut g_a, &mut g_b] {
        for v in g.data_mut() {
            *v *= weight;
        }
    }
    let scale = |g: Vec<f64>| -> Vec<f64> { g.into_iter().map(|v| v * lambda * weight).collect() };
    let (gp_a, gp_b) = (scale(gp_a), scale(gp_b));
    let use_sim = lambda != 0.0;
    m.backward(&fa.tape, Some(&g_a), use_sim.then_some(gp_a.as_slice()), grads);
    m.backward(&fb.tape, Some(&g_b), use_sim.then_some(gp_b.as_slice()), grads);
    Ok(LossBreakdown::combine(ce_a + ce_b, sim.clamp(0.0, 2.0), lambda))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub hflip: bool,
    /// Max relative contrast change and absolute brightness shift.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            lr: 1e-2,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 0.1,
            hflip: true,
            color_jitter: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(invalid!("lambda must be non-negative"));
        }
        if self.color_jitter < 0.0 || self.color_jitter >= 1.0 {
            return Err(invalid!("color jitter must be in [0, 1)"));
        }
        Ok(())
    }
}

/// What the training loop actually fed the model for one pair.
pub struct AugmentEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub item: usize,
    pub flipped: bool,
    pub source: &'a Tensor3,
    pub generated: &'a Tensor3,
    pub layout: &'a ClassMap,
}

/// Optional instrumentation for a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Counts every source image the loop reads, by domain.
    pub audit: Option<&'a ReadAudit>,
    pub on_augment: Option<&'a mut dyn FnMut(&AugmentEvent<'_>)>,
}

struct TrainItem<'a> {
    source: &'a Tensor3,
    generated: &'a Tensor3,
    layout: &'a ClassMap,
    domain: Domain,
}

fn color_jitter(image: &Tensor3, amount: f64, rng: &mut Rng) -> Tensor3 {
    let contrast = 1.0 + rng.random_range(-1.0..=1.0) * amount;
    let shift = rng.random_range(-1.0..=1.0) * amount;
    if amount == 0.0 {
        return image.clone();
    }
    let mean = image.mean();
    image.map(|v| (contrast * (v - mean) + mean + shift).clamp(-1.0, 1.0))
}

fn run_training(
    mut model: SegModel,
    items: &[TrainItem<'_>],
    cfg: &TrainConfig,
    lambda: f64,
    hooks: &mut TrainHooks<'_>,
) -> Result<(SegModel, Vec<LossBreakdown>)> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(invalid!("no training data"));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let per_epoch = items.len().div_ceil(cfg.batch_size);
    let total_iters = cfg.epochs * per_epoch;
    let mut opt = SgdMomentum::new(model.num_params(), cfg.momentum, cfg.weight_decay);
    let mut grads = vec![0.0; model.num_params()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(items.len(), &mut rng);
        let (mut task, mut sim, mut total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let it = &items[i];
                if let Some(a) = hooks.audit {
                    a.record(it.domain);
                }
                let flipped = cfg.hflip && rng.random::<bool>();
                let (src, gen, y) = if flipped {
                    (
                        it.source.flip_horizontal(),
                        it.generated.flip_horizontal(),
                        it.layout.flip_horizontal(),
                    )
                } else {
                    (it.source.clone(), it.generated.clone(), it.layout.clone())
                };
                // Photometric jitter is drawn independently per image.
                let src = color_jitter(&src, cfg.color_jitter, &mut rng);
                let gen = color_jitter(&gen, cfg.color_jitter, &mut rng);
                if let Some(f) = hooks.on_augment.as_mut() {
                    f(&AugmentEvent {
                        epoch,
                        step,
                        item: i,
                        flipped,
                        source: &src,
                        generated: &gen,
                        layout: &y,
                    });
                }
                let lb = zodi_loss_and_grad(&model, &src, &gen, &y, lambda, weight, &mut grads)?;
                task += lb.task;
                sim += lb.sim;
                total += lb.total;
            }
            let lr = poly_lr(cfg.lr, step, total_iters, cfg.poly_power);
            opt.step(model.params_mut(), &grads, lr);
            step += 1;
        }
        let n = items.len() as f64;
        history.push(LossBreakdown {
            task: task / n,
            sim: sim / n,
            total: total / n,
            lambda,
        });
    }
    Ok((model, history))
}

/// Train on source/transferred pairs with `cfg.lambda · L_sim + L_task`.
pub fn train_zodi(
    model: SegModel,
    pairs: &[TransferredPair],
    cfg: &TrainConfig,
) -> Result<(SegModel, Vec<LossBreakdown>)> {
    train_zodi_with_hooks(model, pairs, cfg, &mut TrainHooks::default())
}

pub fn train_zodi_with_hooks(
    model: SegModel,
    pairs: &[TransferredPair],
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<(SegModel, Vec<LossBreakdown>)> {
    if pairs.is_empty() {
        return Err(invalid!("no transferred pairs to train on"));
    }
    let items: Vec<TrainItem> = pairs
        .iter()
        .map(|p| TrainItem {
            source: &p.source.image,
            generated: &p.generated,
            layout: &p.layout,
            domain: p.source.domain,
        })
        .collect();
    run_training(model, &items, cfg, cfg.lambda, hooks)
}

/// Baseline: the same loop with each source image standing in for its own
/// transfer and `λ = 0`, i.e. cross-entropy on source images only.
pub fn train_source_only(
    model: SegModel,
    samples: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<(SegModel, Vec<LossBreakdown>)> {
    train_source_only_with_hooks(model, samples, cfg, &mut TrainHooks::default())
}

pub fn train_source_only_with_hooks(
    model: SegModel,
    samples: &[SceneSample],
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<(SegModel, Vec<LossBreakdown>)> {
    if samples.is_empty() {
        return Err(invalid!("no source samples to train on"));
    }
    let items: Vec<TrainItem> = samples
        .iter()
        .map(|s| TrainItem {
            source: &s.image,
            generated: &s.image,
            layout: &s.layout,
            domain: s.domain,
        })
        .collect();
    run_training(model, &items, cfg, 0.0, hooks)
}
