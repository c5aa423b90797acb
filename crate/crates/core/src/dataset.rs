//! Labeled image datasets: the synthetic Gaussian-blob generator and the
//! on-disk format (one rank-4 blob of inputs plus a little-endian u32 label
//! file per split, described by `dataset.json`).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(inputs: Vec<Tensor<T>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} inputs but {} labels", inputs.len(), labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(
                "dataset",
                format!("label {l} out of range for {num_classes} classes"),
            ));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.shape() != first.shape()) {
                return Err(Error::invalid("dataset", "inputs differ in shape"));
            }
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            inputs: self.inputs[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Blob amplitude range; low amplitudes are the hard samples.
    pub amplitude: (f64, f64),
    /// Per-pixel Gaussian noise standard deviation range.
    pub noise: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            channels: 3,
            height: 32,
            width: 32,
            train: 2000,
            validation: 500,
            test: 500,
            amplitude: (0.35, 1.6),
            noise: (0.25, 0.6),
        }
    }
}

/// Unit-norm color direction for class `c`, spread evenly around a circle in
/// the plane orthogonal to gray.
fn prototype(c: usize, num_classes: usize, channels: usize) -> Vec<f64> {
    let angle = std::f64::consts::TAU * c as f64 / num_classes as f64;
    let u: Vec<f64> = (0..channels)
        .map(|ch| (std::f64::consts::TAU * ch as f64 / channels as f64).cos())
        .collect();
    let v: Vec<f64> = (0..channels)
        .map(|ch| (std::f64::consts::TAU * ch as f64 / channels as f64).sin())
        .collect();
    let p: Vec<f64> = u
        .iter()
        .zip(&v)
        .map(|(a, b)| angle.cos() * a + angle.sin() * b)
        .collect();
    let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    p.into_iter().map(|x| x / norm).collect()
}

/// One image: a Gaussian blob tinted with the class color, plus pixel noise.
fn synth_image<R: Rng, T: Scalar>(rng: &mut R, spec: &SyntheticSpec, label: usize) -> Result<Tensor<T>> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let proto = prototype(label, spec.num_classes, c);
    let amp = rng.random_range(spec.amplitude.0..=spec.amplitude.1);
    let noise_sd = rng.random_range(spec.noise.0..=spec.noise.1);
    let cy = rng.random_range(0.25..0.75) * h as f64;
    let cx = rng.random_range(0.25..0.75) * w as f64;
    let radius = rng.random_range(0.15..0.3) * h.min(w) as f64;
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::invalid("synth", e.to_string()))?;
    let mut data = Vec::with_capacity(c * h * w);
    for p in &proto {
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = (-d2 / (2.0 * radius * radius)).exp();
                data.push(T::narrow(amp * p * blob + noise.sample(rng)));
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Generates the three splits. Labels cycle through the classes and are then
/// shuffled, so every split is balanced to within one sample per class.
pub fn generate<T: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<Vec<(Split, LabeledDataset<T>)>> {
    if spec.num_classes < 2 || spec.channels < 2 {
        return Err(Error::invalid("synth", "need at least two classes and two channels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [
        (Split::Train, spec.train),
        (Split::Validation, spec.validation),
        (Split::Test, spec.test),
    ];
    let mut out = Vec::with_capacity(3);
    for (split, n) in sizes {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
        for i in (1..n).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let inputs = labels
            .iter()
            .map(|&l| synth_image(&mut rng, spec, l))
            .collect::<Result<Vec<_>>>()?;
        out.push((split, LabeledDataset::new(inputs, labels, spec.num_classes)?));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: Split,
    pub count: usize,
    pub inputs: String,
    pub inputs_sha256: String,
    pub labels: String,
    pub labels_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub splits: Vec<SplitEntry>,
}

pub const MANIFEST_FILE: &str = "dataset.json";

fn encode_labels(labels: &[usize]) -> Vec<u8> {
    labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect()
}

/// Writes every split under `dir` and returns the manifest.
pub fn save_dataset<T: Scalar>(
    dir: &Path,
    splits: &[(Split, LabeledDataset<T>)],
    seed: Option<u64>,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = splits
        .iter()
        .find(|(_, d)| !d.is_empty())
        .ok_or_else(|| Error::invalid("save_dataset", "all splits are empty"))?;
    let input_shape = first.1.inputs[0].shape().to_vec();
    let num_classes = first.1.num_classes;
    let mut entries = Vec::with_capacity(splits.len());
    for (split, data) in splits {
        if data.is_empty() {
            continue;
        }
        let mut flat = Vec::with_capacity(data.len() * data.inputs[0].len());
        for x in &data.inputs {
            if x.shape() != input_shape.as_slice() {
                return Err(Error::invalid("save_dataset", "splits differ in input shape"));
            }
            flat.extend_from_slice(x.data());
        }
        let mut shape = vec![data.len()];
        shape.extend(&input_shape);
        let batch = Tensor::new(shape, flat)?;
        let inputs = format!("{}_inputs.exwt", split.name());
        let labels = format!("{}_labels.u32", split.name());
        let inputs_sha256 = blob::write(&dir.join(&inputs), &batch)?;
        let label_bytes = encode_labels(&data.labels);
        std::fs::write(dir.join(&labels), &label_bytes).map_err(|e| Error::io(dir.join(&labels), e))?;
        entries.push(SplitEntry {
            split: *split,
            count: data.len(),
            inputs,
            inputs_sha256,
            labels,
            labels_sha256: blob::sha256_hex(&label_bytes),
        });
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        num_classes,
        input_shape,
        seed,
        splits: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format("dataset manifest", e.to_string()))?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            "dataset manifest",
            format!("unsupported version {}", m.format_version),
        ));
    }
    Ok(m)
}

/// Loads one split, verifying both checksums.
pub fn load_split<T: Scalar>(dir: &Path, split: Split) -> Result<LabeledDataset<T>> {
    let m = load_manifest(dir)?;
    let entry = m
        .splits
        .iter()
        .find(|e| e.split == split)
        .ok_or_else(|| Error::format("dataset manifest", format!("no {} split", split.name())))?;
    let read = |file: &str| -> Result<Vec<u8>> {
        let path = dir.join(file);
        std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingBlob {
                name: file.to_string(),
                path: path.clone(),
            },
            _ => Error::io(&path, e),
        })
    };
    let check = |file: &str, bytes: &[u8], expected: &str| -> Result<()> {
        let actual = blob::sha256_hex(bytes);
        if actual != expected {
            return Err(Error::Checksum {
                name: file.to_string(),
                expected: expected.to_string(),
                actual,
            });
        }
        Ok(())
    };
    let input_bytes = read(&entry.inputs)?;
    check(&entry.inputs, &input_bytes, &entry.inputs_sha256)?;
    let label_bytes = read(&entry.labels)?;
    check(&entry.labels, &label_bytes, &entry.labels_sha256)?;
    let batch: Tensor<T> = blob::decode(&input_bytes)?;
    let mut expected_shape = vec![entry.count];
    expected_shape.extend(&m.input_shape);
    if batch.shape() != expected_shape.as_slice() {
        return Err(Error::shape(
            "load_split",
            "input batch",
            format!("{expected_shape:?}"),
            format!("{:?}", batch.shape()),
        ));
    }
    if label_bytes.len() != 4 * entry.count {
        return Err(Error::format(
            "label file",
            format!("{} bytes for {} labels", label_bytes.len(), entry.count),
        ));
    }
    let labels = label_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let per: usize = m.input_shape.iter().product();
    let inputs = batch
        .data()
        .chunks_exact(per)
        .map(|chunk| Tensor::new(m.input_shape.clone(), chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(inputs, labels, m.num_classes)
}
