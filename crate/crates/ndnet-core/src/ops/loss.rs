use crate::error::{Error, Result};
use crate::tensor::{Elem, LabelMap, Tensor};

/// Mean per-pixel cross entropy over non-ignored pixels, with the gradient
/// with respect to the logits.
///
/// Logits are `(n, K, h, w)`, labels `(n, h, w)` with values in `[0, K-1]` or
/// `ignore_index`. Softmax is stabilized by per-pixel max subtraction. The
/// gradient is `(softmax - onehot) / count` at non-ignored pixels and zero at
/// ignored pixels.
pub fn softmax_cross_entropy<T: Elem>(
    logits: &Tensor<T>,
    labels: &LabelMap,
    ignore_index: u32,
) -> Result<(T, Tensor<T>)> {
    let [n, k, h, w] = logits.shape();
    if labels.shape() != [n, h, w] {
        return Err(Error::Shape(format!(
            "label shape {:?} does not match logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }

    let plane = h * w;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = T::zero();
    let mut count: usize = 0;

    // First pass: count contributing pixels (the gradient is scaled by 1/count).
    for &lab in labels.data() {
        if lab == ignore_index {
            continue;
        }
        if lab as usize >= k {
            return Err(Error::Shape(format!(
                "label value {lab} is outside [0, {}) and is not the ignore index {ignore_index}",
                k
            )));
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Numeric(
            "all pixels are ignored; mean cross entropy is undefined".into(),
        ));
    }
    let inv_count = T::one() / T::from_f64(count as f64);

    let data = logits.data();
    let gdata = grad.data_mut();
    let mut probs = vec![T::zero(); k];
    for bn in 0..n {
        for row in 0..h {
            for col in 0..w {
                let lab = labels.at(bn, row, col);
                if lab == ignore_index {
                    continue;
                }
                let base = bn * k * plane + row * w + col;
                let mut max = T::neg_infinity();
                for cls in 0..k {
                    max = max.max(data[base + cls * plane]);
                }
                let mut denom = T::zero();
                for cls in 0..k {
                    let e = (data[base + cls * plane] - max).exp();
                    probs[cls] = e;
                    denom += e;
                }
                let log_denom = denom.ln();
                let target = lab as usize;
                loss += log_denom - (data[base + target * plane] - max);
                for cls in 0..k {
                    let p = probs[cls] / denom;
                    let onehot = if cls == target { T::one() } else { T::zero() };
                    gdata[base + cls * plane] = (p - onehot) * inv_count;
                }
            }
        }
    }
    Ok((loss * inv_count, grad))
}

/// Per-pixel argmax over the class axis, breaking ties toward the lower class
/// index.
pub fn argmax_channels<T: Elem>(logits: &Tensor<T>) -> LabelMap {
    let [n, k, h, w] = logits.shape();
    let plane = h * w;
    let mut out = LabelMap::filled([n, h, w], 0);
    let data = logits.data();
    for bn in 0..n {
        for row in 0..h {
            for col in 0..w {
                let base = bn * k * plane + row * w + col;
                let mut best = data[base];
                let mut best_cls = 0u32;
                for cls in 1..k {
                    let v = data[base + cls * plane];
                    if v > best {
                        best = v;
                        best_cls = cls as u32;
                    }
                }
                *out.at_mut(bn, row, col) = best_cls;
            }
        }
    }
    out
}
