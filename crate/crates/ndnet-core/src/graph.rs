//! Executable layer graphs: an ordered unit list with residual shortcut
//! edges, parameter storage, forward/backward passes and He initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::builder::NetworkSpec;
use crate::error::{Error, Result};
use crate::ops::{
    batchnorm, batchnorm_backward, batchnorm_train_cached, bilinear_upsample,
    bilinear_upsample_backward, conv2d, conv2d_backward_input, conv2d_backward_weights,
    maxpool2d_backward, maxpool2d_with_indices, relu, relu_backward, BatchNormState, BnCache,
    ConvSpec, Grouping, Mode, PoolSpec,
};
use crate::tensor::{Elem, Tensor};

/// Which parameter bucket a convolution belongs to when reconstructing the
/// published totals: stem and residual-block weights plus projection entries
/// form the headline count; head weights are reported separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamClass {
    Stem,
    Block,
    Projection,
    Head,
}

/// A convolution with its optional trailing batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvLayer<T: Elem> {
    pub name: String,
    pub class: ParamClass,
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bn: Option<BatchNormState<T>>,
    pub relu: bool,
}

impl<T: Elem> ConvLayer<T> {
    pub fn new(name: impl Into<String>, class: ParamClass, spec: ConvSpec) -> Self {
        let bn_channels = spec.out_channels;
        Self {
            name: name.into(),
            class,
            spec,
            weight: Tensor::zeros(spec.weight_shape()),
            bn: Some(
                BatchNormState::new(bn_channels, T::from_f64(1e-5), T::from_f64(0.1))
                    .expect("valid default bn state"),
            ),
            relu: true,
        }
    }

    pub fn without_bn(mut self) -> Self {
        self.bn = None;
        self
    }

    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }
}

/// One node of the graph. Residual units nest their body and an optional
/// projection shortcut; `shortcut: None` means identity.
#[derive(Clone, Debug)]
pub enum Unit<T: Elem> {
    Conv(ConvLayer<T>),
    MaxPool { name: String, spec: PoolSpec },
    Residual {
        name: String,
        body: Vec<Unit<T>>,
        shortcut: Option<Box<Unit<T>>>,
    },
    Upsample { name: String, factor: usize },
}

impl<T: Elem> Unit<T> {
    pub fn name(&self) -> &str {
        match self {
            Unit::Conv(c) => &c.name,
            Unit::MaxPool { name, .. } => name,
            Unit::Residual { name, .. } => name,
            Unit::Upsample { name, .. } => name,
        }
    }

    /// Declared output shape for a given input shape, without running data.
    pub fn out_shape(&self, in_shape: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = in_shape;
        match self {
            Unit::Conv(layer) => {
                if c != layer.spec.in_channels {
                    return Err(Error::Shape(format!(
                        "{}: input channel count {} does not match spec.in_channels {}",
                        layer.name, c, layer.spec.in_channels
                    )));
                }
                let (oh, ow) = layer.spec.out_spatial(h, w)?;
                Ok([n, layer.spec.out_channels, oh, ow])
            }
            Unit::MaxPool { spec, .. } => {
                let (oh, ow) = spec.out_spatial(h, w)?;
                Ok([n, c, oh, ow])
            }
            Unit::Residual { body, shortcut, .. } => {
                let mut shape = in_shape;
                for unit in body {
                    shape = unit.out_shape(shape)?;
                }
                let short_shape = match shortcut {
                    Some(unit) => unit.out_shape(in_shape)?,
                    None => in_shape,
                };
                if shape != short_shape {
                    return Err(Error::Shape(format!(
                        "residual branches disagree: body {shape:?} vs shortcut {short_shape:?}"
                    )));
                }
                Ok(shape)
            }
            Unit::Upsample { factor, .. } => Ok([n, c, h * factor, w * factor]),
        }
    }
}

/// Input requirements of a full network graph (fragments carry none).
#[derive(Clone, Copy, Debug)]
pub struct InputContract {
    pub channels: usize,
    pub spatial_divisor: usize,
}

/// Ordered layers with typed parameters and residual shortcut edges.
#[derive(Clone, Debug)]
pub struct LayerGraph<T: Elem = f32> {
    pub(crate) units: Vec<Unit<T>>,
    pub nominal_depth: Option<usize>,
    pub input_contract: Option<InputContract>,
    pub network_spec: Option<NetworkSpec>,
}

/// Per-unit forward cache consumed by the backward pass.
pub enum UnitCache<T: Elem> {
    Conv {
        input: Tensor<T>,
        bn: Option<BnCache<T>>,
        /// Post-activation output, kept only when the layer has a ReLU.
        post: Option<Tensor<T>>,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_shape: [usize; 4],
    },
    Residual {
        body: Vec<UnitCache<T>>,
        shortcut: Option<Box<UnitCache<T>>>,
        /// Post-addition, post-ReLU output (the backward mask).
        post: Tensor<T>,
    },
    Upsample { in_shape: [usize; 4] },
}

pub struct GraphCache<T: Elem> {
    units: Vec<UnitCache<T>>,
}

impl<T: Elem> LayerGraph<T> {
    pub fn from_units(units: Vec<Unit<T>>) -> Self {
        Self {
            units,
            nominal_depth: None,
            input_contract: None,
            network_spec: None,
        }
    }

    pub fn units(&self) -> &[Unit<T>] {
        &self.units
    }

    /// Declared output shape on a probe input, obtained without running data.
    pub fn out_shape(&self, mut shape: [usize; 4]) -> Result<[usize; 4]> {
        for unit in &self.units {
            shape = unit.out_shape(shape)?;
        }
        Ok(shape)
    }

    fn check_input_contract(&self, input: &Tensor<T>) -> Result<()> {
        if let Some(contract) = self.input_contract {
            if input.channels() != contract.channels {
                return Err(Error::Shape(format!(
                    "network expects {} input channels, got {}",
                    contract.channels,
                    input.channels()
                )));
            }
            let d = contract.spatial_divisor;
            let (h, w) = (input.height(), input.width());
            if h % d != 0 || w % d != 0 {
                return Err(Error::Shape(format!(
                    "input {h}x{w} must be divisible by {d}; pad to {}x{}",
                    h.div_ceil(d) * d,
                    w.div_ceil(d) * d
                )));
            }
        }
        Ok(())
    }

    /// Runs the graph. Train mode uses batch statistics and updates every
    /// batch-norm running state exactly once; eval mode is read-only on
    /// running statistics and deterministic.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => self.forward_eval(input),
            Mode::Train => {
                self.check_input_contract(input)?;
                let mut x = input.clone();
                for unit in &mut self.units {
                    x = unit_forward_train(unit, &x, false)?.0;
                }
                Ok(x)
            }
        }
    }

    /// Eval-mode forward through shared (non-mutated) state, safe for
    /// concurrent callers.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input_contract(input)?;
        let mut x = input.clone();
        for unit in &self.units {
            x = unit_forward_eval(unit, &x)?;
        }
        Ok(x)
    }

    /// Train-mode forward that retains the activation caches needed by
    /// [`LayerGraph::backward`].
    pub fn forward_with_cache(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, GraphCache<T>)> {
        self.check_input_contract(input)?;
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.units.len());
        for unit in &mut self.units {
            let (y, cache) = unit_forward_train(unit, &x, true)?;
            caches.push(cache.expect("cache requested"));
            x = y;
        }
        Ok((x, GraphCache { units: caches }))
    }

    /// Backpropagates `grad_out`, accumulating parameter gradients in place,
    /// and returns the gradient with respect to the graph input.
    pub fn backward(&mut self, cache: GraphCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut grad = grad_out.clone();
        for (unit, ucache) in self.units.iter_mut().zip(cache.units).rev() {
            grad = unit_backward(unit, ucache, &grad)?;
        }
        Ok(grad)
    }

    /// He-normal initialization of every conv weight (std `sqrt(2/fan_out)`),
    /// gamma 1 / beta 0 / zeroed running statistics for every batch norm.
    /// Fully determined by `seed`.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        visit_convs_mut(&mut self.units, &mut |layer| {
            let [oc, _, kh, kw] = layer.weight.shape();
            let groups = match layer.spec.grouping {
                Grouping::Full => 1,
                Grouping::PerChannel => layer.spec.in_channels,
            };
            let fan_out = (oc * kh * kw / groups).max(1);
            let std = (2.0 / fan_out as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            for v in layer.weight.data_mut() {
                *v = T::from_f64(normal.sample(&mut rng));
            }
            layer.weight.zero_grad();
            if let Some(bn) = layer.bn.as_mut() {
                let c = bn.channels();
                *bn = BatchNormState::new(c, bn.eps, bn.momentum).expect("valid bn");
            }
        });
    }

    pub fn set_mode(&mut self, mode: Mode) {
        visit_convs_mut(&mut self.units, &mut |layer| {
            if let Some(bn) = layer.bn.as_mut() {
                bn.mode = mode;
            }
        });
    }

    /// Fills any batch norm that has never seen a batch with identity running
    /// statistics (mean 0, variance 1), so an untrained graph can run in eval
    /// mode for shape probing and benchmarking.
    pub fn ensure_eval_ready(&mut self) {
        visit_convs_mut(&mut self.units, &mut |layer| {
            if let Some(bn) = layer.bn.as_mut() {
                if !bn.initialized {
                    let c = bn.channels();
                    bn.set_running(&vec![T::zero(); c], &vec![T::one(); c])
                        .expect("matching channel count");
                }
            }
        });
    }

    pub fn zero_grads(&mut self) {
        visit_convs_mut(&mut self.units, &mut |layer| {
            layer.weight.zero_grad();
            // make sure later accumulation finds an allocated buffer
            layer.weight.grad_mut();
            if let Some(bn) = layer.bn.as_mut() {
                bn.zero_grad();
            }
        });
    }

    /// Visits every conv layer immutably, in graph order.
    pub fn visit_convs(&self, f: &mut impl FnMut(&ConvLayer<T>)) {
        visit_convs_ref(&self.units, f);
    }

    /// Visits every conv layer mutably, in graph order.
    pub fn visit_convs_mut(&mut self, f: &mut impl FnMut(&mut ConvLayer<T>)) {
        visit_convs_mut(&mut self.units, f);
    }

    /// Flat list of learnable parameter names in graph order: each conv
    /// weight, then gamma and beta of its batch norm.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_convs(&mut |layer| {
            names.push(format!("{}.weight", layer.name));
            if layer.bn.is_some() {
                names.push(format!("{}.bn.gamma", layer.name));
                names.push(format!("{}.bn.beta", layer.name));
            }
        });
        names
    }

    /// Visits every learnable parameter as (name, kind, value, grad), in the
    /// same order as [`LayerGraph::parameter_names`].
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, ParamKind, &mut [T], &mut [T])) {
        visit_convs_mut(&mut self.units, &mut |layer| {
            let name = layer.name.clone();
            let (data, grad) = layer.weight.data_and_grad_mut();
            f(&format!("{name}.weight"), ParamKind::ConvWeight, data, grad);
            if let Some(bn) = layer.bn.as_mut() {
                f(
                    &format!("{name}.bn.gamma"),
                    ParamKind::BnGamma,
                    &mut bn.gamma,
                    &mut bn.grad_gamma,
                );
                f(
                    &format!("{name}.bn.beta"),
                    ParamKind::BnBeta,
                    &mut bn.beta,
                    &mut bn.grad_beta,
                );
            }
        });
    }
}

/// Parameter category, used to scope weight decay to conv weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
}

fn visit_convs_ref<'a, T: Elem>(units: &'a [Unit<T>], f: &mut impl FnMut(&'a ConvLayer<T>)) {
    for unit in units {
        match unit {
            Unit::Conv(layer) => f(layer),
            Unit::Residual { body, shortcut, .. } => {
                visit_convs_ref(body, f);
                if let Some(s) = shortcut {
                    visit_convs_ref(std::slice::from_ref(&**s), f);
                }
            }
            _ => {}
        }
    }
}

fn visit_convs_mut<T: Elem>(units: &mut [Unit<T>], f: &mut impl FnMut(&mut ConvLayer<T>)) {
    for unit in units {
        match unit {
            Unit::Conv(layer) => f(layer),
            Unit::Residual { body, shortcut, .. } => {
                visit_convs_mut(body, f);
                if let Some(s) = shortcut {
                    visit_convs_mut(std::slice::from_mut(&mut **s), f);
                }
            }
            _ => {}
        }
    }
}

fn conv_layer_forward_eval<T: Elem>(layer: &ConvLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = conv2d(x, &layer.weight, &layer.spec)?;
    if let Some(bn) = layer.bn.as_ref() {
        let mut state = bn.clone();
        state.mode = Mode::Eval;
        y = batchnorm(&y, &mut state)?;
    }
    if layer.relu {
        y = relu(&y);
    }
    Ok(y)
}

fn unit_forward_eval<T: Elem>(unit: &Unit<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match unit {
        Unit::Conv(layer) => conv_layer_forward_eval(layer, x),
        Unit::MaxPool { spec, .. } => maxpool2d_with_indices(x, spec).map(|(y, _)| y),
        Unit::Residual { body, shortcut, .. } => {
            let mut y = x.clone();
            for unit in body {
                y = unit_forward_eval(unit, &y)?;
            }
            let s = match shortcut {
                Some(unit) => unit_forward_eval(unit, x)?,
                None => x.clone(),
            };
            add_and_relu(&mut y, &s)?;
            Ok(y)
        }
        Unit::Upsample { factor, .. } => bilinear_upsample(x, *factor),
    }
}

fn unit_forward_train<T: Elem>(
    unit: &mut Unit<T>,
    x: &Tensor<T>,
    want_cache: bool,
) -> Result<(Tensor<T>, Option<UnitCache<T>>)> {
    match unit {
        Unit::Conv(layer) => {
            let mut y = conv2d(x, &layer.weight, &layer.spec)?;
            let mut bn_cache = None;
            if let Some(bn) = layer.bn.as_mut() {
                bn.mode = Mode::Train;
                let (normed, cache) = batchnorm_train_cached(&y, bn)?;
                y = normed;
                bn_cache = Some(cache);
            }
            if layer.relu {
                y = relu(&y);
            }
            let cache = want_cache.then(|| UnitCache::Conv {
                input: x.clone(),
                bn: bn_cache,
                post: layer.relu.then(|| y.clone()),
            });
            Ok((y, cache))
        }
        Unit::MaxPool { spec, .. } => {
            let (y, argmax) = maxpool2d_with_indices(x, spec)?;
            let cache = want_cache.then(|| UnitCache::MaxPool {
                argmax,
                in_shape: x.shape(),
            });
            Ok((y, cache))
        }
        Unit::Residual { body, shortcut, .. } => {
            let mut y = x.clone();
            let mut body_caches = Vec::with_capacity(body.len());
            for unit in body.iter_mut() {
                let (next, cache) = unit_forward_train(unit, &y, want_cache)?;
                if let Some(c) = cache {
                    body_caches.push(c);
                }
                y = next;
            }
            let mut short_cache = None;
            let s = match shortcut.as_mut() {
                Some(unit) => {
                    let (s, cache) = unit_forward_train(unit, x, want_cache)?;
                    short_cache = cache.map(Box::new);
                    s
                }
                None => x.clone(),
            };
            add_and_relu(&mut y, &s)?;
            let cache = want_cache.then(|| UnitCache::Residual {
                body: body_caches,
                shortcut: short_cache,
                post: y.clone(),
            });
            Ok((y, cache))
        }
        Unit::Upsample { factor, .. } => {
            let y = bilinear_upsample(x, *factor)?;
            let cache = want_cache.then(|| UnitCache::Upsample { in_shape: x.shape() });
            Ok((y, cache))
        }
    }
}

fn add_and_relu<T: Elem>(acc: &mut Tensor<T>, other: &Tensor<T>) -> Result<()> {
    if acc.shape() != other.shape() {
        return Err(Error::Shape(format!(
            "residual addition shapes differ: {:?} vs {:?}",
            acc.shape(),
            other.shape()
        )));
    }
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        let v = *a + b;
        *a = if v > T::zero() { v } else { T::zero() };
    }
    Ok(())
}

fn unit_backward<T: Elem>(
    unit: &mut Unit<T>,
    cache: UnitCache<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    match (unit, cache) {
        (Unit::Conv(layer), UnitCache::Conv { input, bn, post }) => {
            let mut grad = grad_out.clone();
            if let Some(post) = post.as_ref() {
                grad = relu_backward(&grad, post);
            }
            if let (Some(state), Some(cache)) = (layer.bn.as_mut(), bn.as_ref()) {
                grad = batchnorm_backward(&grad, state, cache)?;
            }
            let grad_w = conv2d_backward_weights(&grad, &input, &layer.spec)?;
            layer.weight.accumulate_grad(grad_w.data());
            conv2d_backward_input(&grad, &layer.weight, &layer.spec, input.shape())
        }
        (Unit::MaxPool { .. }, UnitCache::MaxPool { argmax, in_shape }) => {
            maxpool2d_backward(grad_out, &argmax, in_shape)
        }
        (
            Unit::Residual { body, shortcut, .. },
            UnitCache::Residual {
                body: body_caches,
                shortcut: short_cache,
                post,
            },
        ) => {
            let dz = relu_backward(grad_out, &post);
            let mut grad_body = dz.clone();
            for (unit, ucache) in body.iter_mut().zip(body_caches).rev() {
                grad_body = unit_backward(unit, ucache, &grad_body)?;
            }
            let grad_short = match (shortcut.as_mut(), short_cache) {
                (Some(unit), Some(cache)) => unit_backward(unit, *cache, &dz)?,
                (None, None) => dz,
                _ => {
                    return Err(Error::Shape(
                        "residual cache does not match graph structure".into(),
                    ))
                }
            };
            let mut grad_in = grad_body;
            if grad_in.shape() != grad_short.shape() {
                return Err(Error::Shape(
                    "residual branch gradients disagree in shape".into(),
                ));
            }
            for (a, &b) in grad_in.data_mut().iter_mut().zip(grad_short.data()) {
                *a += b;
            }
            Ok(grad_in)
        }
        (Unit::Upsample { factor, .. }, UnitCache::Upsample { in_shape }) => {
            bilinear_upsample_backward(grad_out, *factor, in_shape)
        }
        _ => Err(Error::Shape(
            "graph cache does not match graph structure".into(),
        )),
    }
}
