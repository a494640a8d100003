//! Independent reference implementations used as oracles. These stay
//! deliberately naive (direct nested loops, set arithmetic) and share no
//! code path with the library internals they check.

use ndnet_core::{Elem, LabelMap, Tensor};

/// Direct sextuple-loop standard convolution with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d_full<T: Elem>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Tensor<T> {
    let [n, c_in, h, w] = input.shape();
    let [c_out, wc_in, kh, kw] = weights.shape();
    assert_eq!(c_in, wc_in);
    let out_h = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let out_w = (w + 2 * padding.1 - kw) / stride.1 + 1;
    Tensor::from_fn([n, c_out, out_h, out_w], |bn, oc, oh, ow| {
        let mut acc = T::zero();
        for ic in 0..c_in {
            for ki in 0..kh {
                for kj in 0..kw {
                    let ih = (oh * stride.0 + ki) as isize - padding.0 as isize;
                    let iw = (ow * stride.1 + kj) as isize - padding.1 as isize;
                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                        continue;
                    }
                    acc += input.at(bn, ic, ih as usize, iw as usize)
                        * weights.at(oc, ic, ki, kj);
                }
            }
        }
        acc
    })
}

/// Per-channel loop oracle for depthwise convolution.
pub fn naive_conv2d_depthwise<T: Elem>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let [wc, one, kh, kw] = weights.shape();
    assert_eq!(c, wc);
    assert_eq!(one, 1);
    let out_h = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let out_w = (w + 2 * padding.1 - kw) / stride.1 + 1;
    Tensor::from_fn([n, c, out_h, out_w], |bn, ch, oh, ow| {
        let mut acc = T::zero();
        for ki in 0..kh {
            for kj in 0..kw {
                let ih = (oh * stride.0 + ki) as isize - padding.0 as isize;
                let iw = (ow * stride.1 + kj) as isize - padding.1 as isize;
                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                    continue;
                }
                acc += input.at(bn, ch, ih as usize, iw as usize) * weights.at(ch, 0, ki, kj);
            }
        }
        acc
    })
}

/// Closed-form bilinear sample at one output pixel under the half-pixel
/// convention with coordinate clamping.
pub fn bilinear_sample_closed_form<T: Elem>(
    input: &Tensor<T>,
    bn: usize,
    ch: usize,
    oy: usize,
    ox: usize,
    out_h: usize,
    out_w: usize,
) -> f64 {
    let [_, _, h, w] = input.shape();
    let fy = (((oy as f64 + 0.5) * h as f64 / out_h as f64) - 0.5).clamp(0.0, h as f64 - 1.0);
    let fx = (((ox as f64 + 0.5) * w as f64 / out_w as f64) - 0.5).clamp(0.0, w as f64 - 1.0);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
    let v = |y: usize, x: usize| input.at(bn, ch, y, x).as_f64();
    (1.0 - dy) * ((1.0 - dx) * v(y0, x0) + dx * v(y0, x1))
        + dy * ((1.0 - dx) * v(y1, x0) + dx * v(y1, x1))
}

/// Brute-force mean cross entropy over non-ignored pixels, summed in f64
/// with an explicit per-pixel softmax.
pub fn naive_softmax_ce(logits: &Tensor<f64>, labels: &LabelMap, ignore: u32) -> f64 {
    let [n, k, h, w] = logits.shape();
    let mut total = 0.0;
    let mut count = 0usize;
    for bn in 0..n {
        for y in 0..h {
            for x in 0..w {
                let lab = labels.at(bn, y, x);
                if lab == ignore {
                    continue;
                }
                let mut denom = 0.0;
                for cls in 0..k {
                    denom += logits.at(bn, cls, y, x).exp();
                }
                total += denom.ln() - logits.at(bn, lab as usize, y, x);
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Set-based IoU: per class, |pred ∩ gt| / |pred ∪ gt| over non-ignored
/// pixels; classes with an empty union are excluded from the mean.
pub fn set_based_miou(preds: &[LabelMap], gts: &[LabelMap], k: usize, ignore: u32) -> (Vec<Option<f64>>, f64) {
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for cls in 0..k as u32 {
        let mut inter = 0u64;
        let mut union = 0u64;
        for (p, g) in preds.iter().zip(gts) {
            for (&pv, &gv) in p.data().iter().zip(g.data()) {
                if gv == ignore {
                    continue;
                }
                let in_p = pv == cls;
                let in_g = gv == cls;
                if in_p && in_g {
                    inter += 1;
                }
                if in_p || in_g {
                    union += 1;
                }
            }
        }
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = inter as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
    }
    (per_class, sum / counted as f64)
}
