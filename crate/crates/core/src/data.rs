//! Datasets: a deterministic template-plus-noise image generator, and
//! reading/writing the IDX binary layout used by MNIST.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// Images in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    /// Checks that `images` is `[N, C, H, W]` in `[0, 1]`, that labels are in
    /// range and that every class occurs at least once.
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "images {s:?} do not match {} labels",
                labels.len()
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config("pixel values must lie in [0, 1]".into()));
        }
        let mut seen = vec![false; num_classes];
        for &l in &labels {
            *seen.get_mut(l).ok_or_else(|| {
                Error::Index(format!("label {l} out of range for {num_classes} classes"))
            })? = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!("class {missing} has no samples in the {split:?} split")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Gathers the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_outer(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// Consecutive batches in storage order; the last may be short.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + '_ {
        let n = self.len();
        let size = batch_size.max(1);
        (0..n).step_by(size).map(move |start| {
            let end = (start + size).min(n);
            Ok((self.images.slice_outer(start, end)?, self.labels[start..end].to_vec()))
        })
    }
}

/// Parameters of the synthetic task: each class has a fixed random
/// template, and every sample is `clamp(template + N(0, σ²), 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// `(C, H, W)`.
    pub image_shape: [usize; 3],
    pub template_seed: u64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            train_per_class: 64,
            eval_per_class: 20,
            image_shape: [1, 16, 16],
            template_seed: 0,
            noise_sigma: 0.25,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic task needs at least two classes".into()));
        }
        if self.train_per_class == 0 || self.eval_per_class == 0 {
            return Err(Error::Config("samples_per_class must be at least 1".into()));
        }
        if self.image_shape.contains(&0) {
            return Err(Error::Config(format!("invalid image shape {:?}", self.image_shape)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    /// Per-class templates, uniform in `[0, 1)` per pixel.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let pixels: usize = self.image_shape.iter().product();
        let mut rng = stream(self.template_seed, 0);
        (0..self.num_classes)
            .map(|_| (0..pixels).map(|_| rng.gen::<f64>()).collect())
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates `(train, eval)`. Samples are interleaved by class
/// (`label = i mod num_classes`) and the two splits draw noise from
/// disjoint random streams.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let templates = spec.templates();
    let make = |per_class: usize, split: Split, stream_id: u64| -> Result<Dataset> {
        let mut rng = stream(spec.template_seed, stream_id);
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let n = per_class * spec.num_classes;
        let pixels: usize = spec.image_shape.iter().product();
        let mut data = Vec::with_capacity(n * pixels);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.num_classes;
            labels.push(class);
            for &t in &templates[class] {
                let v = if spec.noise_sigma > 0.0 { t + noise.sample(&mut rng) } else { t };
                data.push(v.clamp(0.0, 1.0));
            }
        }
        let [c, h, w] = spec.image_shape;
        let images = Tensor::new(vec![n, c, h, w], data)?;
        Dataset::new(images, labels, spec.num_classes, split)
    };
    Ok((make(spec.train_per_class, Split::Train, 1)?, make(spec.eval_per_class, Split::Eval, 2)?))
}

const IDX_U8: u8 = 0x08;

/// Writes images as an IDX `u8` tensor (`[N, H, W]` for one channel,
/// `[N, C, H, W]` otherwise) and labels as an IDX `u8` vector. Pixels are
/// stored as `round(255·v)`.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if dataset.num_classes() > 256 {
        return Err(Error::Config("IDX u8 labels support at most 256 classes".into()));
    }
    let s = dataset.images().shape();
    let dims: Vec<usize> = if s[1] == 1 { vec![s[0], s[2], s[3]] } else { s.to_vec() };
    let mut img = idx_header(&dims);
    img.extend(dataset.images().data().iter().map(|&v| (v * 255.0).round() as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;

    let mut lab = idx_header(&[dataset.len()]);
    lab.extend(dataset.labels().iter().map(|&l| l as u8));
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

fn idx_header(dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_U8, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Parses an IDX `u8` file into `(dims, payload)`.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    let fmt_err = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 {
        return Err(fmt_err(bytes.len(), "truncated IDX magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt_err(0, format!("bad IDX magic {:02x?}", &bytes[..4])));
    }
    if bytes[2] != IDX_U8 {
        return Err(fmt_err(2, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(fmt_err(3, "IDX rank must be positive".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fmt_err(bytes.len(), format!("truncated IDX header (need {header} bytes)")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(fmt_err(4 + 4 * i, "IDX dimension of size 0".into()));
    }
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(fmt_err(
            bytes.len(),
            format!("truncated IDX payload: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(fmt_err(header + expected, format!("{} trailing bytes", payload.len() - expected)));
    }
    Ok((dims, payload))
}

/// Loads an IDX image/label pair; pixels become `value / 255`. When
/// `num_classes` is `None` it is inferred as `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path, num_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (dims, pixels) = parse_idx(&img_bytes)?;
    let (ldims, labels) = parse_idx(&lab_bytes)?;
    let shape = match dims.len() {
        3 => vec![dims[0], 1, dims[1], dims[2]],
        4 => dims.clone(),
        r => {
            return Err(Error::Format {
                offset: 3,
                message: format!("image file must have rank 3 or 4, has {r}"),
            })
        }
    };
    if ldims.len() != 1 {
        return Err(Error::Format {
            offset: 3,
            message: format!("label file must have rank 1, has {}", ldims.len()),
        });
    }
    if ldims[0] != shape[0] {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", shape[0], ldims[0]),
        });
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let images = Tensor::new(shape, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    Dataset::new(images, labels, k, split)
}
