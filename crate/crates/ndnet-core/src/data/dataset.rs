use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// Per-channel standardization constants applied after scaling pixels to
/// [0, 1]: `x = (raw - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        }
    }
}

/// Sidecar metadata (`dataset.json`) written next to the images/labels trees.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub num_classes: usize,
    pub ignore_index: u32,
    pub normalization: Normalization,
}

/// Total mapping from raw label ids to train ids. Ids encountered in data but
/// absent from the table are an error, so silently wrong labels cannot pass.
#[derive(Clone, Debug, Default)]
pub struct RemapTable {
    map: BTreeMap<u32, u32>,
}

impl RemapTable {
    pub fn new(entries: impl IntoIterator<Item = (u32, u32)>) -> Self {
        Self {
            map: entries.into_iter().collect(),
        }
    }

    /// Parses a two-column CSV of `raw_id,train_id` rows. A header line of
    /// non-numeric fields is tolerated.
    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let (raw, train) = match (fields.next(), fields.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::Dataset(format!(
                        "{}:{}: expected two comma-separated columns",
                        path.display(),
                        lineno + 1
                    )))
                }
            };
            match (raw.parse::<u32>(), train.parse::<u32>()) {
                (Ok(r), Ok(t)) => {
                    map.insert(r, t);
                }
                _ if lineno == 0 => continue, // header
                _ => {
                    return Err(Error::Dataset(format!(
                        "{}:{}: cannot parse '{line}' as raw_id,train_id",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        if map.is_empty() {
            return Err(Error::Dataset(format!(
                "remap table {} holds no entries",
                path.display()
            )));
        }
        Ok(Self { map })
    }

    pub fn apply(&self, raw: u32) -> Result<u32> {
        self.map.get(&raw).copied().ok_or_else(|| {
            Error::Dataset(format!("label id {raw} has no entry in the remap table"))
        })
    }

    /// Largest mapped train id that is not the ignore index.
    pub fn max_train_id(&self, ignore_index: u32) -> Option<u32> {
        self.map.values().copied().filter(|&t| t != ignore_index).max()
    }
}

/// An ingested dataset: matched (image, label) file pairs plus class count,
/// ignore id, normalization constants and an optional remap.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub num_classes: usize,
    pub ignore_index: u32,
    pub normalization: Normalization,
    pub remap: Option<RemapTable>,
}

fn collect_pngs(dir: &Path) -> Result<BTreeMap<PathBuf, PathBuf>> {
    let mut found = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "png") {
                let rel = path
                    .strip_prefix(dir)
                    .expect("path under scanned dir")
                    .to_path_buf();
                found.insert(rel, path);
            }
        }
    }
    Ok(found)
}

/// Ingests `root/images/**.png` and `root/labels/**.png`, pairing files by
/// relative name. Reads `dataset.json` for class count and normalization when
/// present; otherwise derives the class count from the remap table or by
/// scanning label files. Never silently drops a sample: any unmatched or
/// undecodable file is a named error.
pub fn load_dataset_dir(root: &Path, remap: Option<RemapTable>) -> Result<DatasetManifest> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    if !images_dir.is_dir() || !labels_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{} must contain images/ and labels/ subdirectories",
            root.display()
        )));
    }
    let images = collect_pngs(&images_dir)?;
    let mut labels = collect_pngs(&labels_dir)?;
    if images.is_empty() {
        return Err(Error::Dataset(format!("{} holds no .png images", images_dir.display())));
    }

    let mut pairs = Vec::with_capacity(images.len());
    for (rel, img_path) in images {
        match labels.remove(&rel) {
            Some(lab_path) => pairs.push((img_path, lab_path)),
            None => {
                return Err(Error::Dataset(format!(
                    "image {} has no matching label file",
                    rel.display()
                )))
            }
        }
    }
    if let Some((rel, _)) = labels.into_iter().next() {
        return Err(Error::Dataset(format!(
            "label {} has no matching image file",
            rel.display()
        )));
    }

    // header-only decode check so ingestion fails fast on corrupt files
    for (img, lab) in &pairs {
        image::image_dimensions(img)
            .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", img.display())))?;
        image::image_dimensions(lab)
            .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", lab.display())))?;
    }

    let meta_path = root.join("dataset.json");
    let (num_classes, ignore_index, normalization) = if meta_path.is_file() {
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        (meta.num_classes, meta.ignore_index, meta.normalization)
    } else {
        let ignore = DEFAULT_IGNORE_INDEX;
        let k = match remap.as_ref().and_then(|r| r.max_train_id(ignore)) {
            Some(max_id) => max_id as usize + 1,
            None => scan_num_classes(&pairs, ignore)?,
        };
        (k, ignore, Normalization::default())
    };
    if num_classes == 0 {
        return Err(Error::Dataset("dataset declares zero classes".into()));
    }

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        pairs,
        num_classes,
        ignore_index,
        normalization,
        remap,
    })
}

fn scan_num_classes(pairs: &[(PathBuf, PathBuf)], ignore: u32) -> Result<usize> {
    let mut max_id = 0u32;
    let mut any = false;
    for (_, lab) in pairs {
        let img = image::open(lab)
            .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", lab.display())))?
            .into_luma8();
        for p in img.pixels() {
            let v = p.0[0] as u32;
            if v != ignore {
                max_id = max_id.max(v);
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::Dataset(
            "every label pixel is the ignore index; class count cannot be derived".into(),
        ));
    }
    Ok(max_id as usize + 1)
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Decodes and standardizes sample `index`.
    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let (img_path, lab_path) = self.pairs.get(index).ok_or_else(|| {
            Error::Dataset(format!(
                "sample index {index} out of range ({} samples)",
                self.pairs.len()
            ))
        })?;
        let rgb = image::open(img_path)
            .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", img_path.display())))?
            .into_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);

        let norm = self.normalization;
        let mut image = Tensor::zeros([1, 3, h, w]);
        for (y, x, pixel) in rgb.enumerate_pixels().map(|(x, y, p)| (y as usize, x as usize, p)) {
            for c in 0..3 {
                let v = pixel.0[c] as f64 / 255.0;
                *image.at_mut(0, c, y, x) = ((v - norm.mean[c]) / norm.std[c]) as f32;
            }
        }

        let gray = image::open(lab_path)
            .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", lab_path.display())))?
            .into_luma8();
        if gray.dimensions() != (w as u32, h as u32) {
            return Err(Error::Dataset(format!(
                "label {} is {}x{} but image is {w}x{h}",
                lab_path.display(),
                gray.dimensions().0,
                gray.dimensions().1
            )));
        }
        let mut label = LabelMap::filled([1, h, w], 0);
        for (x, y, p) in gray.enumerate_pixels() {
            let raw = p.0[0] as u32;
            let id = match self.remap.as_ref() {
                Some(table) => table.apply(raw)?,
                None => raw,
            };
            if id != self.ignore_index && id as usize >= self.num_classes {
                return Err(Error::Dataset(format!(
                    "label {} holds id {id}, outside [0, {}) and not ignore ({})",
                    lab_path.display(),
                    self.num_classes,
                    self.ignore_index
                )));
            }
            *label.at_mut(0, y as usize, x as usize) = id;
        }
        Ok(Sample { image, label })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}
