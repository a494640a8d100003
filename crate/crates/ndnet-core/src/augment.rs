//! Training-time augmentation: random horizontal mirror, random scale from a
//! discrete set, and random crop with mean/ignore padding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::resize_bilinear;
use crate::tensor::{LabelMap, Tensor};
use crate::train::TrainConfig;

/// Nearest-neighbor resize under the same half-pixel convention as the
/// bilinear resize, so labels stay aligned with the image. The output value
/// set is a subset of the input's.
pub fn resize_nearest(label: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target dimensions must be >= 1".into()));
    }
    let [n, h, w] = label.shape();
    let mut out = LabelMap::filled([n, out_h, out_w], 0);
    let src_row: Vec<usize> = (0..out_h)
        .map(|i| (((i as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1))
        .collect();
    let src_col: Vec<usize> = (0..out_w)
        .map(|j| (((j as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1))
        .collect();
    for bn in 0..n {
        for (oi, &si) in src_row.iter().enumerate() {
            for (oj, &sj) in src_col.iter().enumerate() {
                *out.at_mut(bn, oi, oj) = label.at(bn, si, sj);
            }
        }
    }
    Ok(out)
}

fn mirror_image(image: &Tensor<f32>) -> Tensor<f32> {
    let [n, c, h, w] = image.shape();
    Tensor::from_fn([n, c, h, w], |bn, ch, row, col| image.at(bn, ch, row, w - 1 - col))
}

fn mirror_label(label: &LabelMap) -> LabelMap {
    let [n, h, w] = label.shape();
    let mut out = LabelMap::filled([n, h, w], 0);
    for bn in 0..n {
        for row in 0..h {
            for col in 0..w {
                *out.at_mut(bn, row, col) = label.at(bn, row, w - 1 - col);
            }
        }
    }
    out
}

/// Applies mirror / scale / crop to an aligned (image, label) pair. The
/// image is padded with 0 (the standardized mean) and the label with the
/// ignore index when the scaled sample is shorter than the crop.
///
/// Draw order from `rng` is fixed: mirror, scale index, crop row, crop col.
pub fn augment_sample(
    image: &Tensor<f32>,
    label: &LabelMap,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, LabelMap)> {
    let [_, c, h, w] = image.shape();
    if label.shape() != [1, h, w] || image.batch() != 1 {
        return Err(Error::Shape(format!(
            "augment expects an aligned (1,C,H,W)/(1,H,W) pair, got {:?} and {:?}",
            image.shape(),
            label.shape()
        )));
    }
    let (crop_h, crop_w) = cfg.crop;
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::Spec(format!("crop dimensions must be >= 1, got {:?}", cfg.crop)));
    }

    let (mut img, mut lab) = if rng.random::<f64>() < cfg.mirror_prob {
        (mirror_image(image), mirror_label(label))
    } else {
        (image.clone(), label.clone())
    };

    let scale = cfg.scales[rng.random_range(0..cfg.scales.len())];
    if (scale - 1.0).abs() > f64::EPSILON {
        let sh = ((h as f64 * scale).round() as usize).max(1);
        let sw = ((w as f64 * scale).round() as usize).max(1);
        img = resize_bilinear(&img, sh, sw)?;
        lab = resize_nearest(&lab, sh, sw)?;
    }

    let [_, _, sh, sw] = img.shape();
    let (pad_h, pad_w) = (sh.max(crop_h), sw.max(crop_w));
    if pad_h < crop_h || pad_w < crop_w {
        return Err(Error::Spec(format!(
            "crop {crop_h}x{crop_w} exceeds the padded sample {pad_h}x{pad_w}"
        )));
    }
    if (pad_h, pad_w) != (sh, sw) {
        let mut padded = Tensor::zeros([1, c, pad_h, pad_w]);
        for ch in 0..c {
            for row in 0..sh {
                for col in 0..sw {
                    *padded.at_mut(0, ch, row, col) = img.at(0, ch, row, col);
                }
            }
        }
        let mut padded_lab = LabelMap::filled([1, pad_h, pad_w], cfg.ignore_index);
        for row in 0..sh {
            for col in 0..sw {
                *padded_lab.at_mut(0, row, col) = lab.at(0, row, col);
            }
        }
        img = padded;
        lab = padded_lab;
    }

    let oy = rng.random_range(0..=pad_h - crop_h);
    let ox = rng.random_range(0..=pad_w - crop_w);
    let cropped = Tensor::from_fn([1, c, crop_h, crop_w], |_, ch, row, col| {
        img.at(0, ch, oy + row, ox + col)
    });
    let mut cropped_lab = LabelMap::filled([1, crop_h, crop_w], 0);
    for row in 0..crop_h {
        for col in 0..crop_w {
            *cropped_lab.at_mut(0, row, col) = lab.at(0, oy + row, ox + col);
        }
    }
    Ok((cropped, cropped_lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_pair(h: usize, w: usize) -> (Tensor<f32>, LabelMap) {
        let image = Tensor::from_fn([1, 3, h, w], |_, c, row, col| {
            (c * h * w + row * w + col) as f32 * 0.01
        });
        let label = LabelMap::new(
            [1, h, w],
            (0..h * w).map(|i| (i % 3) as u32).collect(),
        )
        .unwrap();
        (image, label)
    }

    fn identity_cfg(h: usize, w: usize) -> TrainConfig {
        TrainConfig {
            crop: (h, w),
            scales: vec![1.0],
            mirror_prob: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn no_mirror_unit_scale_full_crop_is_identity() {
        let (image, label) = sample_pair(8, 10);
        let cfg = identity_cfg(8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (img, lab) = augment_sample(&image, &label, &cfg, &mut rng).unwrap();
        assert_eq!(img.data(), image.data());
        assert_eq!(lab.data(), label.data());
    }

    #[test]
    fn mirror_twice_restores_original() {
        let (image, label) = sample_pair(6, 7);
        let img2 = mirror_image(&mirror_image(&image));
        let lab2 = mirror_label(&mirror_label(&label));
        assert_eq!(img2.data(), image.data());
        assert_eq!(lab2.data(), label.data());
    }

    #[test]
    fn scaled_labels_stay_within_original_value_set() {
        let (image, label) = sample_pair(9, 9);
        let mut cfg = identity_cfg(9, 9);
        cfg.scales = vec![0.75, 1.0, 1.25, 1.5, 2.0];
        cfg.mirror_prob = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (_, lab) = augment_sample(&image, &label, &cfg, &mut rng).unwrap();
            assert!(lab
                .data()
                .iter()
                .all(|&v| v < 3 || v == cfg.ignore_index));
        }
    }

    #[test]
    fn short_samples_are_padded_with_ignore() {
        let (image, label) = sample_pair(4, 4);
        let mut cfg = identity_cfg(8, 8);
        cfg.scales = vec![1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, lab) = augment_sample(&image, &label, &cfg, &mut rng).unwrap();
        assert_eq!(img.shape(), [1, 3, 8, 8]);
        let ignored = lab.data().iter().filter(|&&v| v == cfg.ignore_index).count();
        assert_eq!(ignored, 64 - 16);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let (image, label) = sample_pair(12, 12);
        let mut cfg = identity_cfg(8, 8);
        cfg.scales = vec![0.75, 1.0, 2.0];
        cfg.mirror_prob = 0.5;
        let a = augment_sample(&image, &label, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment_sample(&image, &label, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn zero_crop_is_rejected() {
        let (image, label) = sample_pair(4, 4);
        let mut cfg = identity_cfg(4, 4);
        cfg.crop = (0, 4);
        assert!(augment_sample(&image, &label, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
