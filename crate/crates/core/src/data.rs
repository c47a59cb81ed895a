//! Datasets: IDX ingestion, synthetic generators and stratified subsets.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::range::ValueRange;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled images `[N,C,H,W]` whose pixels lie in `value_range`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub value_range: ValueRange,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        value_range: ValueRange,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(invalid(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.batch_len() != labels.len() {
            return Err(invalid(format!(
                "{} images but {} labels",
                images.batch_len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(invalid(format!("label {y} out of range for {classes} classes")));
        }
        if let Some(v) = images.data().iter().find(|&&v| !value_range.contains(v)) {
            return Err(invalid(format!(
                "pixel {v} outside [{}, {}]",
                value_range.lo(),
                value_range.hi()
            )));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            classes,
            value_range,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C,H,W]` of one image.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            name: self.name.clone(),
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            value_range: self.value_range,
        })
    }

    /// First `n` examples.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(invalid(format!("head({n}) of a dataset with {} examples", self.len())));
        }
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Consecutive batches of at most `size` examples.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = (Tensor, &[usize])> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let end = (start + size).min(self.len());
            (
                self.images.slice_batch(start, end).expect("in range"),
                &self.labels[start..end],
            )
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

struct Idx {
    dims: Vec<usize>,
    bytes: Vec<u8>,
}

fn parse_idx(path: &Path, expected_magic: u32) -> Result<Idx> {
    let raw = fs::read(path)?;
    let fmt_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if raw.len() < 4 {
        return Err(fmt_err("truncated file: missing magic".into()));
    }
    let magic = u32::from_be_bytes(raw[0..4].try_into().expect("4 bytes"));
    if magic != expected_magic {
        return Err(fmt_err(format!(
            "wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if raw.len() < header {
        return Err(fmt_err("truncated file: incomplete dimension records".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(raw[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if raw.len() - header < count {
        return Err(fmt_err(format!(
            "truncated file: expected {count} data bytes, found {}",
            raw.len() - header
        )));
    }
    if raw.len() - header > count {
        return Err(fmt_err(format!("{} trailing bytes", raw.len() - header - count)));
    }
    Ok(Idx {
        dims,
        bytes: raw[header..].to_vec(),
    })
}

/// Reads an IDX image/label pair, mapping bytes `0..=255` onto `range`
/// linearly. `ValueRange::UNIT` divides by 255.
pub fn load_idx_with_range(images_path: &Path, labels_path: &Path, range: ValueRange) -> Result<Dataset> {
    let images = parse_idx(images_path, IDX_IMAGES_MAGIC)?;
    let labels = parse_idx(labels_path, IDX_LABELS_MAGIC)?;
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(invalid(format!("{n} images but {} labels", labels.dims[0])));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(invalid("empty IDX file"));
    }
    let span = range.hi() - range.lo();
    let pixels = images
        .bytes
        .iter()
        .map(|&b| range.lo() + f64::from(b) / 255.0 * span)
        .collect();
    let labels: Vec<usize> = labels.bytes.iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, Tensor::new(vec![n, 1, h, w], pixels)?, labels, classes, range)
}

/// MNIST-convention load: pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_with_range(images_path.as_ref(), labels_path.as_ref(), ValueRange::UNIT)
}

/// Loads `{prefix}-images-idx3-ubyte` and `{prefix}-labels-idx1-ubyte` from `dir`.
pub fn load_mnist_split(dir: impl AsRef<Path>, prefix: &str) -> Result<Dataset> {
    let dir = dir.as_ref();
    load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Writes a single-channel dataset as an IDX pair, quantizing pixels back to bytes.
pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = dataset.sample_shape();
    if c != 1 {
        return Err(invalid("IDX export supports single-channel images only"));
    }
    if dataset.classes > 256 {
        return Err(invalid("IDX labels are single bytes"));
    }
    let range = dataset.value_range;
    let span = range.hi() - range.lo();
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [dataset.len(), h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|&v| ((v - range.lo()) / span * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&y| y as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Unit-variance Gaussian clusters centred at `c · separation · 1/√dims`
/// for class `c`, stored as `[N, 1, 1, dims]`. The value range is the
/// integer hull of the drawn samples.
pub fn synth_blobs(classes: usize, n_per_class: usize, dims: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if !(separation > 0.0) {
        return Err(invalid(format!("separation must be positive, got {separation}")));
    }
    if classes < 2 || n_per_class == 0 || dims == 0 {
        return Err(invalid("need at least two classes, one sample per class and one dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = 1.0 / (dims as f64).sqrt();
    let mut data = Vec::with_capacity(classes * n_per_class * dims);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for i in 0..classes * n_per_class {
        let c = i % classes;
        let offset = c as f64 * separation * unit;
        for _ in 0..dims {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(offset + noise);
        }
        labels.push(c);
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
    let n = labels.len();
    Dataset::new(
        "blobs",
        Tensor::new(vec![n, 1, 1, dims], data)?,
        labels,
        classes,
        ValueRange::new(lo, hi.max(lo + 1.0))?,
    )
}

/// Images whose class is encoded by a low-frequency cosine pattern plus
/// pixel noise, clipped to `range`. A cheap stand-in for natural images
/// when exercising convolutional models.
pub fn synth_patterns(
    classes: usize,
    n_per_class: usize,
    shape: [usize; 3],
    range: ValueRange,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || n_per_class == 0 {
        return Err(invalid("need at least two classes and one sample per class"));
    }
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = range.hi() - range.lo();
    let mid = range.lo() + span / 2.0;
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let (fy, fx) = (1 + class % 3, 1 + class / 3);
        let phase: f64 = rng.random_range(-0.3..0.3);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let wave = (std::f64::consts::PI * (fy as f64 * y as f64 / h as f64 + fx as f64 * x as f64 / w as f64 + ch as f64 * 0.1) + phase).cos();
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(range.clamp(mid + span * (0.3 * wave + 0.08 * noise)));
                }
            }
        }
        labels.push(class);
    }
    Dataset::new("patterns", Tensor::new(vec![n, c, h, w], data)?, labels, classes, range)
}

/// Stratified sample of `n` examples; per-class counts follow the class
/// proportions (largest remainder, ties to the lower class). Selected
/// examples keep their original order.
pub fn subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let total = dataset.len();
    if n > total {
        return Err(invalid(format!("subset of {n} from a dataset with {total} examples")));
    }
    if n == 0 {
        return Err(invalid("subset size must be positive"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut quota: Vec<usize> = by_class.iter().map(|v| v.len() * n / total).collect();
    let mut remainders: Vec<(usize, usize)> = by_class
        .iter()
        .enumerate()
        .map(|(c, v)| ((v.len() * n) % total, c))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = n - quota.iter().sum::<usize>();
    for &(_, c) in remainders.iter().take(missing) {
        quota[c] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (members, q) in by_class.iter_mut().zip(quota) {
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..q]);
    }
    chosen.sort_unstable();
    let mut out = dataset.select(&chosen)?;
    out.name = format!("{}[{n}]", dataset.name);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("img");
        let lab = dir.join("lab");
        let mut bytes = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [2u32, 1, 2] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(&[0, 255, 255, 0]);
        fs::write(&img, bytes).unwrap();
        let mut l = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        l.extend_from_slice(&2u32.to_be_bytes());
        l.extend_from_slice(&[3, 7]);
        fs::write(&lab, l).unwrap();
        (img, lab)
    }

    #[test]
    fn loads_byte_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_fixture(dir.path());
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 1, 2]);
        assert_eq!(ds.images.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ds.labels, vec![3, 7]);
    }

    #[test]
    fn wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = write_fixture(dir.path());
        let err = load_idx(&img, &img).unwrap_err();
        assert!(err.to_string().contains("wrong magic"), "{err}");
    }

    #[test]
    fn truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_fixture(dir.path());
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_idx(&img, &lab).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_fixture(dir.path());
        let mut l = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        l.extend_from_slice(&1u32.to_be_bytes());
        l.push(1);
        fs::write(&lab, l).unwrap();
        assert!(load_idx(&img, &lab).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_fixture(dir.path());
        let ds = load_idx(&img, &lab).unwrap();
        let (img2, lab2) = (dir.path().join("img2"), dir.path().join("lab2"));
        write_idx(&ds, &img2, &lab2).unwrap();
        assert_eq!(fs::read(&img).unwrap(), fs::read(&img2).unwrap());
        let back = load_idx(&img2, &lab2).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn blobs_are_separable_and_deterministic() {
        let ds = synth_blobs(3, 50, 2, 100.0, 4).unwrap();
        assert_eq!(ds, synth_blobs(3, 50, 2, 100.0, 4).unwrap());
        // nearest centroid
        let unit = 1.0 / 2f64.sqrt();
        let correct = ds
            .images
            .data()
            .chunks(2)
            .zip(&ds.labels)
            .filter(|(x, &y)| {
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let d = |c: usize| x.iter().map(|v| (v - c as f64 * 100.0 * unit).powi(2)).sum::<f64>();
                        d(a).partial_cmp(&d(b)).unwrap()
                    })
                    .unwrap();
                best == y
            })
            .count();
        assert_eq!(correct, ds.len());
        assert!(synth_blobs(2, 5, 2, 0.0, 1).is_err());
    }

    #[test]
    fn subset_stratifies() {
        let ds = synth_blobs(10, 7, 2, 5.0, 1).unwrap();
        let s = subset(&ds, 10, 3).unwrap();
        assert_eq!(s.class_counts(), vec![1; 10]);
        assert_eq!(s, subset(&ds, 10, 3).unwrap());
        let all = subset(&ds, ds.len(), 8).unwrap();
        assert_eq!(all.images, ds.images);
        assert!(subset(&ds, ds.len() + 1, 0).is_err());
    }

    #[test]
    fn subset_respects_proportions() {
        let ds = synth_blobs(3, 20, 1, 5.0, 2).unwrap();
        let imbalanced = ds.select(&(0..45).collect::<Vec<_>>()).unwrap();
        let counts = imbalanced.class_counts();
        let s = subset(&imbalanced, 17, 5).unwrap();
        let got = s.class_counts();
        for (g, c) in got.iter().zip(&counts) {
            let exact = *c as f64 * 17.0 / 45.0;
            assert!((*g as f64 - exact).abs() <= 1.0);
        }
        assert_eq!(got.iter().sum::<usize>(), 17);
    }
}
