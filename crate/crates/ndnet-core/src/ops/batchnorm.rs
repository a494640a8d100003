use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Elem, Tensor};

/// Per-channel batch-normalization parameters and running statistics.
///
/// `y = (x - mean) / sqrt(var + eps) * gamma + beta`, with batch statistics in
/// train mode and running statistics in eval mode. Running statistics blend as
/// `new = (1 - momentum) * old + momentum * batch`.
#[derive(Clone, Debug)]
pub struct BatchNormState<T: Elem = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: Mode,
    /// Running statistics are usable in eval mode only after at least one
    /// train-mode batch (or a checkpoint load) has populated them.
    pub initialized: bool,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
}

impl<T: Elem> BatchNormState<T> {
    pub fn new(channels: usize, eps: T, momentum: T) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Spec("batch norm needs at least one channel".into()));
        }
        if eps <= T::zero() {
            return Err(Error::Spec("batch norm eps must be > 0".into()));
        }
        if momentum < T::zero() || momentum > T::one() {
            return Err(Error::Spec("batch norm momentum must lie in [0, 1]".into()));
        }
        Ok(Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::zero(); channels],
            eps,
            momentum,
            mode: Mode::Train,
            initialized: false,
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Overwrites running statistics and marks them usable for eval mode.
    pub fn set_running(&mut self, mean: &[T], var: &[T]) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::Shape(format!(
                "running stats length ({}, {}) does not match channel count {}",
                mean.len(),
                var.len(),
                self.channels()
            )));
        }
        if var.iter().any(|v| *v < T::zero()) {
            return Err(Error::Numeric("running variance must be >= 0".into()));
        }
        self.running_mean.copy_from_slice(mean);
        self.running_var.copy_from_slice(var);
        self.initialized = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(T::zero());
        self.grad_beta.fill(T::zero());
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "input channel count {} does not match batch norm state ({} channels)",
                input.channels(),
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Cache of the train-mode forward pass needed by the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T: Elem> {
    /// Normalized activations before the affine transform.
    pub x_hat: Vec<T>,
    /// Per-channel 1/sqrt(var + eps).
    pub inv_std: Vec<T>,
    pub shape: [usize; 4],
}

/// Batch normalization dispatched on `state.mode`. Train mode normalizes with
/// batch statistics and updates the running statistics exactly once; eval mode
/// normalizes with running statistics.
pub fn batchnorm<T: Elem>(input: &Tensor<T>, state: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    match state.mode {
        Mode::Train => batchnorm_train_cached(input, state).map(|(y, _)| y),
        Mode::Eval => batchnorm_eval(input, state),
    }
}

fn batchnorm_eval<T: Elem>(input: &Tensor<T>, state: &BatchNormState<T>) -> Result<Tensor<T>> {
    state.check_input(input)?;
    if !state.initialized {
        return Err(Error::Numeric(
            "eval-mode batch norm with uninitialized running statistics".into(),
        ));
    }
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros(input.shape());
    let plane = h * w;
    for ch in 0..c {
        let inv_std = T::one() / (state.running_var[ch] + state.eps).sqrt();
        let mean = state.running_mean[ch];
        let (g, b) = (state.gamma[ch], state.beta[ch]);
        for bn in 0..n {
            let off = (bn * c + ch) * plane;
            let src = &input.data()[off..off + plane];
            let dst = &mut out.data_mut()[off..off + plane];
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = (x - mean) * inv_std * g + b;
            }
        }
    }
    Ok(out)
}

/// Train-mode forward that also returns the cache consumed by
/// [`batchnorm_backward`]. Updates running statistics.
pub fn batchnorm_train_cached<T: Elem>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    state.check_input(input)?;
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let m = T::from_f64((n * plane) as f64);

    let mut out = Tensor::zeros(input.shape());
    let mut x_hat = vec![T::zero(); input.len()];
    let mut inv_stds = vec![T::zero(); c];

    for ch in 0..c {
        let mut sum = T::zero();
        let mut sq_sum = T::zero();
        for bn in 0..n {
            let off = (bn * c + ch) * plane;
            for &x in &input.data()[off..off + plane] {
                sum += x;
                sq_sum += x * x;
            }
        }
        let mean = sum / m;
        let var = (sq_sum / m - mean * mean).max(T::zero());
        let inv_std = T::one() / (var + state.eps).sqrt();
        inv_stds[ch] = inv_std;

        let (g, b) = (state.gamma[ch], state.beta[ch]);
        for bn in 0..n {
            let off = (bn * c + ch) * plane;
            let src = &input.data()[off..off + plane];
            let dst = &mut out.data_mut()[off..off + plane];
            let xh = &mut x_hat[off..off + plane];
            for ((d, xh), &x) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
                *xh = (x - mean) * inv_std;
                *d = *xh * g + b;
            }
        }

        let keep = T::one() - state.momentum;
        state.running_mean[ch] = keep * state.running_mean[ch] + state.momentum * mean;
        state.running_var[ch] = keep * state.running_var[ch] + state.momentum * var;
    }
    state.initialized = true;

    Ok((
        out,
        BnCache {
            x_hat,
            inv_std: inv_stds,
            shape: input.shape(),
        },
    ))
}

/// Full train-mode chain rule through the batch statistics. Accumulates
/// gamma/beta gradients into `state` and returns the input gradient.
pub fn batchnorm_backward<T: Elem>(
    grad_out: &Tensor<T>,
    state: &mut BatchNormState<T>,
    cache: &BnCache<T>,
) -> Result<Tensor<T>> {
    if grad_out.shape() != cache.shape {
        return Err(Error::Shape(format!(
            "grad shape {:?} does not match cached forward shape {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let [n, c, h, w] = cache.shape;
    let plane = h * w;
    let m = T::from_f64((n * plane) as f64);

    let mut grad_in = Tensor::zeros(cache.shape);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bn in 0..n {
            let off = (bn * c + ch) * plane;
            let dy = &grad_out.data()[off..off + plane];
            let xh = &cache.x_hat[off..off + plane];
            for (&d, &x) in dy.iter().zip(xh) {
                sum_dy += d;
                sum_dy_xhat += d * x;
            }
        }
        state.grad_beta[ch] += sum_dy;
        state.grad_gamma[ch] += sum_dy_xhat;

        // dx = gamma * inv_std * (dy - mean(dy) - x_hat * mean(dy * x_hat))
        let scale = state.gamma[ch] * cache.inv_std[ch];
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for bn in 0..n {
            let off = (bn * c + ch) * plane;
            let dy = &grad_out.data()[off..off + plane];
            let xh = &cache.x_hat[off..off + plane];
            let dst = &mut grad_in.data_mut()[off..off + plane];
            for ((d, &g), &x) in dst.iter_mut().zip(dy).zip(xh) {
                *d = scale * (g - mean_dy - x * mean_dy_xhat);
            }
        }
    }
    Ok(grad_in)
}
