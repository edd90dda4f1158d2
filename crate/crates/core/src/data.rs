//! Image containers, IDX ingestion and few-shot subsampling.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Where an image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Original,
    Mixup,
    CvaeWd,
    CvaeOod,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Original => "original",
            SourceTag::Mixup => "mixup",
            SourceTag::CvaeWd => "cvae_wd",
            SourceTag::CvaeOod => "cvae_ood",
        }
    }
}

/// A batch of images stored `[count, height, width, channels]` with values in `[0, 1]`,
/// each image carrying its [`SourceTag`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    data: Array4<f32>,
    tags: Vec<SourceTag>,
}

impl ImageSet {
    /// Wraps pixel data, tagging every image with `tag`. Rejects values outside `[0, 1]`.
    pub fn new(data: Array4<f32>, tag: SourceTag) -> Result<Self> {
        let n = data.len_of(Axis(0));
        Self::with_tags(data, vec![tag; n])
    }

    pub fn with_tags(data: Array4<f32>, tags: Vec<SourceTag>) -> Result<Self> {
        if tags.len() != data.len_of(Axis(0)) {
            return Err(Error::consistency(format!(
                "{} tags for {} images",
                tags.len(),
                data.len_of(Axis(0))
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::argument(format!("pixel value {v} outside [0, 1]")));
        }
        let data = if data.is_standard_layout() { data } else { data.as_standard_layout().into_owned() };
        Ok(Self { data, tags })
    }

    /// Builds an image set from flat rows of `h * w * c` pixels.
    pub fn from_rows(rows: Array2<f32>, shape: (usize, usize, usize), tags: Vec<SourceTag>) -> Result<Self> {
        let (h, w, c) = shape;
        let n = rows.nrows();
        if rows.ncols() != h * w * c {
            return Err(Error::consistency(format!(
                "row width {} does not match image shape {h}x{w}x{c}",
                rows.ncols()
            )));
        }
        let rows = rows.as_standard_layout().into_owned();
        let data = rows
            .into_shape_with_order((n, h, w, c))
            .map_err(|e| Error::consistency(e.to_string()))?;
        Self::with_tags(data, tags)
    }

    pub fn empty(shape: (usize, usize, usize)) -> Self {
        let (h, w, c) = shape;
        Self { data: Array4::zeros((0, h, w, c)), tags: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width, channels)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let d = self.data.dim();
        (d.1, d.2, d.3)
    }

    pub fn pixels_per_image(&self) -> usize {
        let (h, w, c) = self.image_shape();
        h * w * c
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn tags(&self) -> &[SourceTag] {
        &self.tags
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }

    /// Flat pixels of image `i`, row-major HWC.
    pub fn pixels(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.data.as_slice().expect("standard layout")[i * p..(i + 1) * p]
    }

    /// All images as a `[count, h * w * c]` matrix.
    pub fn rows(&self) -> ArrayView2<'_, f32> {
        let n = self.len();
        let p = self.pixels_per_image();
        ArrayView2::from_shape((n, p), self.data.as_slice().expect("standard layout")).expect("shape")
    }

    /// Rows `start..end` as a matrix.
    pub fn rows_range(&self, start: usize, end: usize) -> ArrayView2<'_, f32> {
        self.rows().slice_move(s![start..end, ..])
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::consistency(format!("index {bad} out of range for {} images", self.len())));
        }
        Ok(Self {
            data: self.data.select(Axis(0), indices),
            tags: indices.iter().map(|&i| self.tags[i]).collect(),
        })
    }

    /// Stacks image sets with identical image shapes.
    pub fn concat(parts: &[&ImageSet]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::argument("cannot concatenate zero image sets"));
        };
        let shape = first.image_shape();
        if let Some(p) = parts.iter().find(|p| p.image_shape() != shape) {
            return Err(Error::consistency(format!(
                "image shape {:?} does not match {:?}",
                p.image_shape(),
                shape
            )));
        }
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::consistency(e.to_string()))?;
        let tags = parts.iter().flat_map(|p| p.tags.iter().copied()).collect();
        Ok(Self { data, tags })
    }

    pub fn count_tag(&self, tag: SourceTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }
}

/// Images with integer class ids in `[0, K)`.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub images: ImageSet,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: ImageSet, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::consistency(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// First `n` examples, or all of them when `n` exceeds the size.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx).expect("in range")
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub num_classes: usize,
}

/// Known datasets and the directory layout the loaders expect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Mnist,
    FashionMnist,
}

impl DatasetId {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "fashion-mnist" | "fmnist" => Ok(DatasetId::FashionMnist),
            other => Err(Error::argument(format!("unknown dataset `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
        }
    }

    pub fn num_classes(self) -> usize {
        10
    }

    /// Loads `train-*` and `t10k-*` IDX files from `dir`.
    pub fn load(self, dir: impl AsRef<Path>) -> Result<DatasetSplit> {
        load_split(dir, self.num_classes())
    }
}

/// Loads the canonical four-file IDX layout from a directory.
pub fn load_split(dir: impl AsRef<Path>, num_classes: usize) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let train = load_idx_dataset(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx_dataset(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    for (name, set) in [("train", &train), ("test", &test)] {
        if let Some(&bad) = set.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::consistency(format!("{name} label {bad} >= {num_classes} classes")));
        }
    }
    Ok(DatasetSplit { train, test, num_classes })
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::consistency(format!("{}: truncated header", path.display())))
}

/// Reads an IDX image file and its label file, scaling pixel bytes by 1/255.
pub fn load_idx_dataset(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledSet> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_error(images_path, format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let body = &img_bytes[16..];
    if body.len() != count * rows * cols {
        return Err(Error::consistency(format!(
            "{}: header declares {count} images of {rows}x{cols} but body holds {} bytes",
            images_path.display(),
            body.len()
        )));
    }

    let magic = read_u32_be(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_error(labels_path, format!("bad label magic {magic:#010x}")));
    }
    let label_count = read_u32_be(&lbl_bytes, 4, labels_path)? as usize;
    let labels = &lbl_bytes[8..];
    if labels.len() != label_count {
        return Err(Error::consistency(format!(
            "{}: header declares {label_count} labels but body holds {}",
            labels_path.display(),
            labels.len()
        )));
    }
    if label_count != count {
        return Err(Error::consistency(format!("{count} images but {label_count} labels")));
    }

    let pixels: Vec<f32> = body.iter().map(|&b| f32::from(b) / 255.0).collect();
    let data = Array4::from_shape_vec((count, rows, cols, 1), pixels).expect("sized above");
    let images = ImageSet { data, tags: vec![SourceTag::Original; count] };
    LabeledSet::new(images, labels.iter().map(|&l| usize::from(l)).collect())
}

fn format_error(path: &Path, msg: String) -> Error {
    Error::Format { path: PathBuf::from(path), msg }
}

/// Indices of a uniform without-replacement sample of `n` out of `pool`.
pub fn few_shot_indices(pool: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > pool {
        return Err(Error::argument(format!("few-shot size {n} must be in 1..={pool}")));
    }
    let mut rng = seed::rng_for(seed, "few-shot");
    let mut idx = index::sample(&mut rng, pool, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Draws the unlabeled few-shot pool. Labels are discarded.
pub fn sample_few_shot(split: &DatasetSplit, n: usize, seed: u64) -> Result<ImageSet> {
    let idx = few_shot_indices(split.train.len(), n, seed)?;
    split.train.images.select(&idx)
}
