use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::{DatasetManifest, DatasetMeta, Normalization, DEFAULT_IGNORE_INDEX};
use crate::data::load_dataset_dir;
use crate::error::{Error, Result};

fn class_color(class: u32, num_classes: usize) -> [f64; 3] {
    // evenly spaced hues, saturated and bright so classes are separable
    let hue = (class - 1) as f64 / (num_classes - 1).max(1) as f64 * 300.0;
    let (s, v) = (0.8, 0.9);
    let c = v * s;
    let t = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, t, 0.0),
        1 => (t, c, 0.0),
        2 => (0.0, c, t),
        3 => (0.0, t, c),
        4 => (t, 0.0, c),
        _ => (c, 0.0, t),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Rect {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

/// Large anchored rectangles. The output resolution of the segmentation
/// networks is 1/32 of the input, so desk-scale images only carry coarse
/// structure: full frames, edge bands and corner quadrants, never small
/// free-floating shapes.
fn random_blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Rect {
    let frac = |rng: &mut ChaCha8Rng, lo: f64, hi: f64, extent: usize| -> usize {
        ((rng.random_range(lo..hi) * extent as f64) as usize).clamp(1, extent)
    };
    match rng.random_range(0..8u32) {
        // full frame
        0 => Rect { y0: 0, x0: 0, y1: h, x1: w },
        // edge bands
        1 => Rect { y0: 0, x0: 0, y1: frac(rng, 0.35, 0.6, h), x1: w },
        2 => Rect { y0: h - frac(rng, 0.35, 0.6, h), x0: 0, y1: h, x1: w },
        3 => Rect { y0: 0, x0: 0, y1: h, x1: frac(rng, 0.35, 0.6, w) },
        4 => Rect { y0: 0, x0: w - frac(rng, 0.35, 0.6, w), y1: h, x1: w },
        // corner quadrants
        _ => {
            let bh = frac(rng, 0.45, 0.75, h);
            let bw = frac(rng, 0.45, 0.75, w);
            match rng.random_range(0..4u32) {
                0 => Rect { y0: 0, x0: 0, y1: bh, x1: bw },
                1 => Rect { y0: 0, x0: w - bw, y1: bh, x1: w },
                2 => Rect { y0: h - bh, x0: 0, y1: h, x1: bw },
                _ => Rect { y0: h - bh, x0: w - bw, y1: h, x1: bw },
            }
        }
    }
}

/// Writes a deterministic synthetic segmentation dataset: large colored
/// geometric blobs on a textured gray background, in the on-disk layout real
/// datasets use (`images/*.png`, `labels/*.png`, `dataset.json`). Background
/// is class 0; blob classes cycle so every class appears within a few
/// samples. No ignore pixels are emitted.
pub fn generate_synthetic_dataset(
    out_dir: &Path,
    n_samples: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if num_classes < 2 {
        return Err(Error::Spec(format!(
            "synthetic dataset needs at least 2 classes, got {num_classes}"
        )));
    }
    if n_samples == 0 || h == 0 || w == 0 {
        return Err(Error::Spec(
            "synthetic dataset needs n_samples, h, w all >= 1".into(),
        ));
    }
    let images_dir = out_dir.join("images");
    let labels_dir = out_dir.join("labels");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;

    let blob_classes = num_classes as u32 - 1;
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37).wrapping_add(i as u64));

        let mut image = vec![0.0f64; 3 * h * w];
        let mut label = vec![0u8; h * w];

        // textured background
        for y in 0..h {
            for x in 0..w {
                let wave = 0.04 * ((x as f64 * 0.6).sin() + (y as f64 * 0.4).cos());
                let noise = rng.random_range(-0.03..0.03);
                let base = 0.30 + wave + noise;
                for c in 0..3 {
                    image[c * h * w + y * w + x] = base;
                }
            }
        }

        // two blobs per sample; classes cycle deterministically so every
        // class shows up within ceil((K-1)/2) samples
        let blobs = 2;
        for j in 0..blobs {
            let class = 1 + ((i * blobs + j) as u32 % blob_classes);
            let color = class_color(class, num_classes);
            let blob = random_blob(&mut rng, h, w);
            for y in 0..h {
                for x in 0..w {
                    if blob.contains(y, x) {
                        label[y * w + x] = class as u8;
                        for c in 0..3 {
                            let noise = rng.random_range(-0.02..0.02);
                            image[c * h * w + y * w + x] = (color[c] + noise).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }

        let name = format!("{i:05}.png");
        let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let px = |c: usize| (image[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        rgb.save(images_dir.join(&name))?;
        let gray = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([label[y as usize * w + x as usize]])
        });
        gray.save(labels_dir.join(&name))?;
    }

    let meta = DatasetMeta {
        version: 1,
        num_classes,
        ignore_index: DEFAULT_IGNORE_INDEX,
        normalization: Normalization::default(),
    };
    let meta_path = out_dir.join("dataset.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;

    load_dataset_dir(out_dir, None)
}
