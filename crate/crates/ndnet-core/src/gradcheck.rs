//! Central finite-difference verification of analytic gradients, run at
//! double precision.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a gradient check: the maximum relative error observed for each
/// input, plus any non-finite values encountered (reported with location).
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err_per_input: Vec<f64>,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.max_rel_err_per_input
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_err() < self.tolerance
    }
}

/// Relative error with a unit floor so near-zero gradient pairs compare on an
/// absolute scale.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Deterministic cotangent in [-1, 1], so the check projects the full
/// Jacobian onto one fixed direction.
fn cotangent_for(shape: [usize; 4]) -> Tensor<f64> {
    let mut state = 0x9e3779b97f4a7c15u64;
    Tensor::from_fn(shape, |_, _, _, _| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Compares the analytic gradients of `backward` against central finite
/// differences of `forward` at the given probe point.
///
/// `forward` maps the inputs to an output tensor; `backward` maps the inputs
/// and an output cotangent to one gradient per input. The op must be
/// deterministic and differentiable at the probe point.
pub fn gradcheck<F, B>(
    forward: F,
    backward: B,
    inputs: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    let base_out = forward(inputs)?;
    let cotangent = cotangent_for(base_out.shape());
    let mut failures = Vec::new();

    for (i, v) in base_out.iter().enumerate() {
        if !v.is_finite() {
            failures.push(format!("non-finite forward output at flat index {i}: {v}"));
        }
    }

    let analytic = backward(inputs, &cotangent)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Shape(format!(
            "backward returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }

    let objective = |probe: &[Tensor<f64>]| -> Result<f64> {
        let out = forward(probe)?;
        Ok(out
            .iter()
            .zip(cotangent.iter())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut max_rel = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (input_idx, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[input_idx].shape() {
            return Err(Error::Shape(format!(
                "gradient {input_idx} has shape {:?}, input has {:?}",
                grad.shape(),
                inputs[input_idx].shape()
            )));
        }
        let mut worst = 0.0f64;
        for e in 0..inputs[input_idx].len() {
            let x = inputs[input_idx].data()[e];
            let h = 6e-6 * x.abs().max(1.0);

            probe[input_idx].data_mut()[e] = x + h;
            let plus = objective(&probe)?;
            probe[input_idx].data_mut()[e] = x - h;
            let minus = objective(&probe)?;
            probe[input_idx].data_mut()[e] = x;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            if !a.is_finite() || !numeric.is_finite() {
                failures.push(format!(
                    "non-finite gradient for input {input_idx} element {e}: analytic {a}, numeric {numeric}"
                ));
                continue;
            }
            worst = worst.max(rel_err(a, numeric));
        }
        max_rel.push(worst);
    }

    Ok(GradCheckReport {
        max_rel_err_per_input: max_rel,
        tolerance,
        failures,
    })
}
