//! SGD training: the step-fraction learning-rate schedule, momentum updates
//! with decay on conv weights only, and the desk-scale training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::augment_sample;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{LayerGraph, ParamKind};
use crate::ops::softmax_cross_entropy;
use crate::tensor::{Elem, LabelMap, Tensor};

/// Optimizer, schedule, augmentation and batch-norm hyperparameters.
///
/// Milestones are fractions of `total_steps`, so the published 80K-step
/// schedule (base 0.1, divided by 10 at 35K and 60K) scales down to desk
/// runs unchanged.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub crop: (usize, usize),
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub scales: Vec<f64>,
    pub mirror_prob: f64,
    pub ignore_index: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            lr_milestones: vec![0.4375, 0.75],
            lr_decay: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            total_steps: 80_000,
            batch_size: 16,
            crop: (1024, 1024),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            scales: vec![0.75, 1.0, 1.25, 1.5, 2.0],
            mirror_prob: 0.5,
            ignore_index: 255,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Spec("total_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Spec("batch_size must be >= 1".into()));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Spec(format!("crop dimensions must be >= 1, got {:?}", self.crop)));
        }
        let mut prev = 0.0;
        for &m in &self.lr_milestones {
            if m <= prev || m >= 1.0 {
                return Err(Error::Spec(format!(
                    "lr milestones must be strictly increasing within (0, 1), got {:?}",
                    self.lr_milestones
                )));
            }
            prev = m;
        }
        if self.lr_decay <= 0.0 || self.base_lr <= 0.0 && self.base_lr != 0.0 {
            return Err(Error::Spec("lr_decay must be positive".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::Spec(format!("scales must be positive, got {:?}", self.scales)));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::Spec("mirror_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Milestones resolved to absolute steps.
    pub fn milestone_steps(&self) -> Vec<u64> {
        self.lr_milestones
            .iter()
            .map(|f| (f * self.total_steps as f64).round() as u64)
            .collect()
    }
}

/// Piecewise-constant schedule: base rate before the first milestone,
/// divided by `lr_decay` at each one.
pub fn lr_at_step(cfg: &TrainConfig, step: u64) -> f64 {
    assert!(step < cfg.total_steps, "step {step} out of range");
    let crossed = cfg
        .milestone_steps()
        .iter()
        .filter(|&&m| step >= m)
        .count() as i32;
    cfg.base_lr / cfg.lr_decay.powi(crossed)
}

/// Momentum buffers, one per learnable parameter in graph order.
#[derive(Debug)]
pub struct SgdState<T: Elem = f32> {
    velocity: Vec<Vec<T>>,
}

impl<T: Elem> SgdState<T> {
    pub fn new(graph: &mut LayerGraph<T>) -> Self {
        let mut velocity = Vec::new();
        graph.visit_params_mut(&mut |_, _, value, _| velocity.push(vec![T::zero(); value.len()]));
        Self { velocity }
    }

    pub fn buffers(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.velocity
    }
}

/// One momentum update on plain slices:
/// `g' = g + decay*w; v = momentum*v + g'; w = w - lr*v`.
pub fn sgd_update_slice<T: Elem>(
    value: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) {
    for ((w, &g), v) in value.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        *w = *w - lr * *v;
    }
}

/// Applies one SGD step to every parameter at the scheduled rate. Weight
/// decay touches conv weights only, never batch-norm affine parameters.
/// A non-finite gradient anywhere rejects the whole step.
pub fn sgd_momentum_step<T: Elem>(
    graph: &mut LayerGraph<T>,
    state: &mut SgdState<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<()> {
    let mut bad: Option<String> = None;
    graph.visit_params_mut(&mut |name, _, _, grad| {
        if bad.is_none() && grad.iter().any(|g| !g.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::Numeric(format!(
            "non-finite gradient in {name} at step {step}; step rejected"
        )));
    }

    let lr = T::from_f64(lr_at_step(cfg, step));
    let momentum = T::from_f64(cfg.momentum);
    let decay = T::from_f64(cfg.weight_decay);
    let mut idx = 0;
    graph.visit_params_mut(&mut |_, kind, value, grad| {
        let wd = if kind == ParamKind::ConvWeight {
            decay
        } else {
            T::zero()
        };
        sgd_update_slice(value, grad, &mut state.velocity[idx], lr, momentum, wd);
        idx += 1;
    });
    Ok(())
}

fn stack_batch(items: &[(Tensor<f32>, LabelMap)]) -> Result<(Tensor<f32>, LabelMap)> {
    let [_, c, h, w] = items[0].0.shape();
    let n = items.len();
    let mut image = Tensor::zeros([n, c, h, w]);
    let mut label = LabelMap::filled([n, h, w], 0);
    let plane = c * h * w;
    for (i, (img, lab)) in items.iter().enumerate() {
        if img.shape() != [1, c, h, w] {
            return Err(Error::Shape(format!(
                "batch items disagree in shape: {:?} vs {:?}",
                img.shape(),
                [1, c, h, w]
            )));
        }
        image.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(img.data());
        label.data_mut()[i * h * w..(i + 1) * h * w].copy_from_slice(lab.data());
    }
    Ok((image, label))
}

/// Runs `cfg.total_steps` iterations of sample, augment, forward, loss,
/// backward and SGD. Deterministic given the seed; per-step losses are
/// appended to `trace` (also on abort, so the trace survives). Returns the
/// final optimizer state for checkpointing.
pub fn train(
    graph: &mut LayerGraph<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    trace: &mut Vec<f64>,
) -> Result<SgdState<f32>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    graph.visit_convs_mut(&mut |layer| {
        if let Some(bn) = layer.bn.as_mut() {
            bn.eps = cfg.bn_eps as f32;
            bn.momentum = cfg.bn_momentum as f32;
        }
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = SgdState::new(graph);

    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rand::Rng::random_range(&mut rng, 0..samples.len());
            let sample = &samples[idx];
            batch.push(augment_sample(&sample.image, &sample.label, cfg, &mut rng)?);
        }
        let (image, label) = stack_batch(&batch)?;

        graph.zero_grads();
        let (logits, cache) = graph.forward_with_cache(&image)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &label, cfg.ignore_index)?;
        let loss = loss as f64;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became non-finite at step {step}; aborting (trace has {} entries)",
                trace.len()
            )));
        }
        graph.backward(cache, &grad)?;
        sgd_momentum_step(graph, &mut sgd, cfg, step)?;
    }
    Ok(())
}
