//! Labeled datasets: synthetic generators, IDX and CIFAR binary loaders.

mod formats;

pub use formats::{load_cifar_binary, load_idx, parse_cifar_binary, parse_idx};

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{config, Error, Result};

/// Inputs `[N, ...example_shape]` with one class index per example.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return config(format!("{} labels for {} inputs", labels.len(), inputs.shape()[0]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self { inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn example_len(&self) -> usize {
        self.example_shape().iter().product()
    }

    /// Stacks the selected examples into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * n..(i + 1) * n]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        Tensor::new(shape, data)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| counts[y] += 1);
        counts
    }

    /// Keeps the listed classes and renumbers them in ascending order.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Self> {
        let mut keep: Vec<usize> = classes.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() {
            return config("class filter is empty");
        }
        if let Some(&bad) = keep.iter().find(|&&c| c >= self.num_classes) {
            return config(format!("class {bad} not in a {}-class dataset", self.num_classes));
        }
        let remap: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let idx: Vec<usize> = (0..self.len()).filter(|&i| remap.contains_key(&self.labels[i])).collect();
        if idx.is_empty() {
            return Err(Error::Input(format!("no examples of classes {keep:?}")));
        }
        let labels = idx.iter().map(|&i| remap[&self.labels[i]]).collect();
        Self::new(self.batch(&idx)?, labels, keep.len())
    }

    pub fn checksum(&self) -> u64 {
        let labels: u64 = self
            .labels
            .iter()
            .fold(0xcbf2_9ce4_8422_2325, |h, &y| (h ^ y as u64).wrapping_mul(0x0000_0100_0000_01b3));
        self.inputs.checksum() ^ labels.rotate_left(17)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    GaussianBlobs,
    SyntheticImages,
    IdxFiles,
    CifarBinary,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::GaussianBlobs => "blobs",
            DatasetKind::SyntheticImages => "images",
            DatasetKind::IdxFiles => "idx",
            DatasetKind::CifarBinary => "cifar",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" | "gaussian_blobs" => Ok(DatasetKind::GaussianBlobs),
            "images" | "synthetic_images" => Ok(DatasetKind::SyntheticImages),
            "idx" | "idx_files" => Ok(DatasetKind::IdxFiles),
            "cifar" | "cifar_binary" => Ok(DatasetKind::CifarBinary),
            other => config(format!("unknown dataset kind '{other}'")),
        }
    }
}

/// Dataset description, written as `kind:key=value,...`.
///
/// Lists inside a value are separated by `+`, e.g.
/// `blobs:classes=4,per_class=200,dim=2,sep=3,seed=1,subset=0+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub num_classes: usize,
    pub per_class: Vec<usize>,
    /// Example shape for generated kinds: `[dim]` or `[1, size, size]`.
    pub input_shape: Vec<usize>,
    pub seed: u64,
    /// Distance between blob centres, in units of the noise deviation.
    pub separation: f64,
    /// Pixel noise deviation for synthetic images.
    pub noise: f64,
    pub paths: Vec<PathBuf>,
    /// Optional class filter applied after loading.
    pub subset: Option<Vec<usize>>,
}

impl DatasetSpec {
    pub fn blobs(num_classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Self {
        Self {
            kind: DatasetKind::GaussianBlobs,
            num_classes,
            per_class: vec![per_class; num_classes],
            input_shape: vec![dim],
            seed,
            separation,
            noise: 0.0,
            paths: Vec::new(),
            subset: None,
        }
    }

    pub fn images(num_classes: usize, per_class: usize, size: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: DatasetKind::SyntheticImages,
            num_classes,
            per_class: vec![per_class; num_classes],
            input_shape: vec![1, size, size],
            seed,
            separation: 0.0,
            noise,
            paths: Vec::new(),
            subset: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_subset(mut self, classes: Vec<usize>) -> Self {
        self.subset = Some(classes);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::GaussianBlobs | DatasetKind::SyntheticImages => {
                if self.num_classes < 2 {
                    return config("a dataset needs at least 2 classes");
                }
                if self.per_class.len() != self.num_classes {
                    return config(format!(
                        "{} per-class counts for {} classes",
                        self.per_class.len(),
                        self.num_classes
                    ));
                }
                if self.per_class.contains(&0) {
                    return config("per-class counts must be at least 1");
                }
                if self.input_shape.contains(&0) {
                    return config("input shape has a zero extent");
                }
                if self.kind == DatasetKind::SyntheticImages && self.input_shape.len() != 3 {
                    return config("synthetic images need a [1, size, size] shape");
                }
                if !self.separation.is_finite() || !self.noise.is_finite() || self.noise < 0.0 {
                    return config("separation and noise must be finite, noise non-negative");
                }
            }
            DatasetKind::IdxFiles => {
                if self.paths.len() != 2 {
                    return config("idx datasets need images=PATH and labels=PATH");
                }
            }
            DatasetKind::CifarBinary => {
                if self.paths.is_empty() {
                    return config("cifar datasets need files=PATH[+PATH...]");
                }
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<LabeledDataset> {
        self.validate()?;
        let ds = match self.kind {
            DatasetKind::GaussianBlobs => generate_blobs(self)?,
            DatasetKind::SyntheticImages => generate_images(self)?,
            DatasetKind::IdxFiles => load_idx(&self.paths[0], &self.paths[1])?,
            DatasetKind::CifarBinary => load_cifar_binary(&self.paths)?,
        };
        match &self.subset {
            Some(classes) => ds.filter_classes(classes),
            None => Ok(ds),
        }
    }

    /// Class count seen by a model trained on this spec.
    pub fn effective_classes(&self) -> Option<usize> {
        if let Some(s) = &self.subset {
            let mut s = s.clone();
            s.sort_unstable();
            s.dedup();
            return Some(s.len());
        }
        match self.kind {
            DatasetKind::GaussianBlobs | DatasetKind::SyntheticImages => Some(self.num_classes),
            DatasetKind::CifarBinary => Some(10),
            DatasetKind::IdxFiles => None,
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join("+")
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.kind.as_str())?;
        let mut parts = Vec::new();
        match self.kind {
            DatasetKind::GaussianBlobs | DatasetKind::SyntheticImages => {
                parts.push(format!("classes={}", self.num_classes));
                if self.per_class.iter().all(|&n| n == self.per_class[0]) {
                    parts.push(format!("per_class={}", self.per_class[0]));
                } else {
                    parts.push(format!("counts={}", join(&self.per_class)));
                }
                if self.kind == DatasetKind::GaussianBlobs {
                    parts.push(format!("dim={}", self.input_shape[0]));
                    parts.push(format!("sep={}", self.separation));
                } else {
                    parts.push(format!("size={}", self.input_shape[1]));
                    parts.push(format!("noise={}", self.noise));
                }
                parts.push(format!("seed={}", self.seed));
            }
            DatasetKind::IdxFiles => {
                parts.push(format!("images={}", self.paths[0].display()));
                parts.push(format!("labels={}", self.paths[1].display()));
            }
            DatasetKind::CifarBinary => {
                let files: Vec<String> = self.paths.iter().map(|p| p.display().to_string()).collect();
                parts.push(format!("files={}", files.join("+")));
            }
        }
        if let Some(s) = &self.subset {
            parts.push(format!("subset={}", join(s)));
        }
        f.write_str(&parts.join(","))
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("dataset option {key}: cannot parse '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split('+').map(|s| parse_num(key, s)).collect()
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let kind: DatasetKind = kind.trim().parse()?;
        let mut spec = match kind {
            DatasetKind::GaussianBlobs => Self::blobs(2, 100, 2, 4.0, 0),
            DatasetKind::SyntheticImages => Self::images(2, 100, 16, 0.1, 0),
            _ => Self {
                kind,
                num_classes: 0,
                per_class: Vec::new(),
                input_shape: Vec::new(),
                seed: 0,
                separation: 0.0,
                noise: 0.0,
                paths: Vec::new(),
                subset: None,
            },
        };
        let mut per_class = None;
        let mut counts = None;
        let (mut images, mut labels) = (None, None);
        for item in rest.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (key, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("dataset option '{item}' is not key=value")))?;
            match (kind, key) {
                (_, "seed") => spec.seed = parse_num(key, v)?,
                (_, "subset") => spec.subset = Some(parse_list(key, v)?),
                (DatasetKind::GaussianBlobs | DatasetKind::SyntheticImages, "classes") => {
                    spec.num_classes = parse_num(key, v)?
                }
                (DatasetKind::GaussianBlobs | DatasetKind::SyntheticImages, "per_class") => {
                    per_class = Some(parse_num::<usize>(key, v)?)
                }
                (DatasetKind::GaussianBlobs | DatasetKind::SyntheticImages, "counts") => {
                    counts = Some(parse_list(key, v)?)
                }
                (DatasetKind::GaussianBlobs, "dim") => spec.input_shape = vec![parse_num(key, v)?],
                (DatasetKind::GaussianBlobs, "sep") => spec.separation = parse_num(key, v)?,
                (DatasetKind::SyntheticImages, "size") => {
                    let size = parse_num(key, v)?;
                    spec.input_shape = vec![1, size, size];
                }
                (DatasetKind::SyntheticImages, "noise") => spec.noise = parse_num(key, v)?,
                (DatasetKind::IdxFiles, "images") => images = Some(PathBuf::from(v)),
                (DatasetKind::IdxFiles, "labels") => labels = Some(PathBuf::from(v)),
                (DatasetKind::CifarBinary, "files") => spec.paths = v.split('+').map(PathBuf::from).collect(),
                _ => return config(format!("unknown option '{key}' for {} datasets", kind.as_str())),
            }
        }
        if matches!(kind, DatasetKind::GaussianBlobs | DatasetKind::SyntheticImages) {
            spec.per_class = match (counts, per_class) {
                (Some(c), _) => c,
                (None, Some(n)) => vec![n; spec.num_classes],
                (None, None) => vec![spec.per_class[0]; spec.num_classes],
            };
        }
        if kind == DatasetKind::IdxFiles {
            spec.paths = images.into_iter().chain(labels).collect();
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Isotropic unit-variance Gaussian clusters whose centres are `separation`
/// apart.
///
/// With `dim >= classes` the centres sit on scaled axes; otherwise they are
/// spread on a circle in the first two coordinates (or a line for `dim = 1`).
pub fn generate_blobs(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    if spec.kind != DatasetKind::GaussianBlobs {
        return config("generate_blobs needs a blobs spec");
    }
    let (nc, dim) = (spec.num_classes, spec.input_shape[0]);
    let sep = spec.separation;
    let centres: Vec<Vec<f64>> = (0..nc)
        .map(|c| {
            let mut v = vec![0.0; dim];
            if dim >= nc {
                v[c] = sep / std::f64::consts::SQRT_2;
            } else if dim == 1 {
                v[0] = sep * c as f64;
            } else {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / nc as f64;
                let radius = sep / (2.0 * (std::f64::consts::PI / nc as f64).sin());
                v[0] = radius * angle.cos();
                v[1] = radius * angle.sin();
            }
            v
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = spec.per_class.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in spec.per_class.iter().enumerate() {
        for _ in 0..n {
            for &mu in &centres[c] {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![total, dim], data)?, labels, nc)
}

/// Oriented bars: class `c` draws a soft line at angle `pi * c / classes`
/// through a randomly shifted centre, plus pixel noise, clamped to `[0, 1]`.
pub fn generate_images(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    if spec.kind != DatasetKind::SyntheticImages {
        return config("generate_images needs a synthetic images spec");
    }
    let (ch, h, w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = spec.per_class.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(total * ch * plane);
    let mut labels = Vec::with_capacity(total);
    let width = 1.0;
    for (c, &n) in spec.per_class.iter().enumerate() {
        let base = std::f64::consts::PI * c as f64 / spec.num_classes as f64;
        for _ in 0..n {
            let angle = base + rng.random_range(-0.1..0.1);
            let (dx, dy) = (angle.cos(), angle.sin());
            let shift = rng.random_range(-(h.min(w) as f64) / 6.0..=(h.min(w) as f64) / 6.0);
            let cx = (w as f64 - 1.0) / 2.0 - dy * shift;
            let cy = (h as f64 - 1.0) / 2.0 + dx * shift;
            let brightness = rng.random_range(0.7..1.0);
            let mut img = Vec::with_capacity(plane);
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 - cx, y as f64 - cy);
                    let dist = px * dy - py * dx;
                    let z: f64 = rng.sample(StandardNormal);
                    let v = brightness * (-dist * dist / (2.0 * width * width)).exp() + spec.noise * z;
                    img.push(v.clamp(0.0, 1.0));
                }
            }
            for _ in 0..ch {
                data.extend_from_slice(&img);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![total, ch, h, w], data)?, labels, spec.num_classes)
}
