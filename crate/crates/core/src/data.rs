//! Dataset ingestion: CIFAR-10 binary directories and seeded synthetic
//! image sets. Every split is validated (pixels in [0,1], labels in range)
//! and carries index provenance so the calibration/test disjointness is
//! checkable.

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Calibration,
    Test,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit<F> {
    /// `[N, C, H, W]`, pixel values in [0, 1].
    pub images: Tensor<F>,
    pub labels: Vec<u32>,
    pub split_name: SplitName,
    pub num_classes: usize,
    /// Provenance: index of each sample in the source pool.
    pub source_indices: Vec<u32>,
}

impl<F: Real> DatasetSplit<F> {
    pub fn n(&self) -> usize {
        self.images.len()
    }

    /// (C, H, W) of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> &[F] {
        self.images.item(i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.n() {
            return Err(Error::Validation(format!(
                "{} labels for {} images",
                self.labels.len(),
                self.n()
            )));
        }
        if self.source_indices.len() != self.n() {
            return Err(Error::Validation("provenance length mismatch".into()));
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l as usize >= self.num_classes {
                return Err(Error::Validation(format!(
                    "label {l} at index {i} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        let zero = F::zero();
        let one = F::one();
        for &p in self.images.data() {
            if !(p >= zero && p <= one) {
                return Err(Error::Validation(format!(
                    "pixel value {p} outside [0,1]"
                )));
            }
        }
        Ok(())
    }

    /// First `n` samples (splits are already shuffled at load time).
    pub fn take(&self, n: usize) -> DatasetSplit<F> {
        let n = n.min(self.n());
        let idx: Vec<usize> = (0..n).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> DatasetSplit<F> {
        DatasetSplit {
            images: self.images.gather(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split_name: self.split_name,
            num_classes: self.num_classes,
            source_indices: idx.iter().map(|&i| self.source_indices[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset<F> {
    pub train: DatasetSplit<F>,
    pub calibration: DatasetSplit<F>,
    pub test: DatasetSplit<F>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub seed: u64,
    pub num_classes: usize,
    pub image_shape: (usize, usize, usize),
    pub n_train: usize,
    pub n_calibration: usize,
    pub n_test: usize,
}

impl<F: Real> LoadedDataset<F> {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.calibration.validate()?;
        self.test.validate()?;
        // Calibration and test must not share source samples.
        let calib: std::collections::BTreeSet<u32> =
            self.calibration.source_indices.iter().copied().collect();
        for t in &self.test.source_indices {
            if calib.contains(t) {
                return Err(Error::Validation(format!(
                    "calibration and test splits share source index {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Synthetic image-set specification. Each class has a fixed low-frequency
/// template; images are `clamp(0.5 + amp * template + noise * N(0,1))`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    /// Total sample count, split across train / calibration / test.
    pub n: usize,
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_template_amp")]
    pub template_amp: f64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    /// Optional explicit split sizes; defaults to 50/30/20 of `n`.
    #[serde(default)]
    pub split: Option<(usize, usize, usize)>,
}

fn default_channels() -> usize {
    3
}
fn default_template_amp() -> f64 {
    0.32
}
fn default_noise_sd() -> f64 {
    0.2
}

impl SyntheticSpec {
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        match self.split {
            Some(s) => s,
            None => {
                let tr = self.n / 2;
                let ca = (self.n * 3) / 10;
                (tr, ca, self.n - tr - ca)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Cifar10 {
        dir: PathBuf,
        n_train: usize,
        n_calibration: usize,
        n_test: usize,
        seed: u64,
    },
}

/// Load and partition a dataset. Ordering is deterministic given the seed;
/// the calibration and test splits never share source samples.
pub fn load_dataset<F: Real>(source: &DatasetSource) -> Result<LoadedDataset<F>> {
    let ds = match source {
        DatasetSource::Synthetic(spec) => synthetic(spec)?,
        DatasetSource::Cifar10 {
            dir,
            n_train,
            n_calibration,
            n_test,
            seed,
        } => cifar10(dir, *n_train, *n_calibration, *n_test, *seed)?,
    };
    ds.validate()?;
    Ok(ds)
}

fn synthetic<F: Real>(spec: &SyntheticSpec) -> Result<LoadedDataset<F>> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic spec needs >= 2 classes".into()));
    }
    let (n_train, n_calib, n_test) = spec.split_sizes();
    let n = n_train + n_calib + n_test;
    if n == 0 || n > spec.n.max(n) {
        return Err(Error::Config("empty synthetic split".into()));
    }
    let (c, h, w) = (spec.channels, spec.h, spec.w);
    let pix = c * h * w;

    let mut tpl_rng = SeedStream::new(spec.seed, "synthetic-templates");
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| class_template(c, h, w, &mut tpl_rng))
        .collect();

    let mut lab_rng = SeedStream::new(spec.seed, "synthetic-labels");
    let order = lab_rng.shuffled_indices(n);
    let labels: Vec<u32> = order.iter().map(|&i| (i % spec.classes) as u32).collect();

    let mut img_rng = SeedStream::new(spec.seed, "synthetic-pixels");
    let amp = spec.template_amp;
    let sd = spec.noise_sd;
    let mut data = Vec::with_capacity(n * pix);
    for &lab in &labels {
        let t = &templates[lab as usize];
        for p in t.iter().take(pix) {
            let v = 0.5 + amp * p + sd * img_rng.normal_f64();
            data.push(F::of(v.clamp(0.0, 1.0)));
        }
    }

    let images = Tensor::from_vec(&[n, c, h, w], data);
    let make = |range: std::ops::Range<usize>, name: SplitName| DatasetSplit {
        images: images.gather(&range.clone().collect::<Vec<_>>()),
        labels: labels[range.clone()].to_vec(),
        split_name: name,
        num_classes: spec.classes,
        source_indices: range.map(|i| i as u32).collect(),
    };

    let train = make(0..n_train, SplitName::Train);
    let calibration = make(n_train..n_train + n_calib, SplitName::Calibration);
    let test = make(n_train + n_calib..n, SplitName::Test);

    Ok(LoadedDataset {
        train,
        calibration,
        test,
        meta: DatasetMeta {
            source: "synthetic".into(),
            seed: spec.seed,
            num_classes: spec.classes,
            image_shape: (c, h, w),
            n_train,
            n_calibration: n_calib,
            n_test,
        },
    })
}

/// Smooth per-class pattern: a few random cosine waves per channel,
/// normalized to zero mean and unit RMS over the image.
fn class_template(c: usize, h: usize, w: usize, rng: &mut SeedStream) -> Vec<f64> {
    let mut t = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for _ in 0..3 {
            let fy = rng.below(3) as f64 + 1.0;
            let fx = rng.below(3) as f64 + 1.0;
            let phase = rng.uniform_f64() * std::f64::consts::TAU;
            let a = 0.5 + 0.5 * rng.uniform_f64();
            for y in 0..h {
                for x in 0..w {
                    let arg = std::f64::consts::TAU
                        * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                        + phase;
                    t[ch * h * w + y * w + x] += a * arg.cos();
                }
            }
        }
    }
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let mut rms = 0.0;
    for v in t.iter_mut() {
        *v -= mean;
        rms += *v * *v;
    }
    let rms = (rms / t.len() as f64).sqrt().max(1e-9);
    for v in t.iter_mut() {
        *v /= rms;
    }
    t
}

const CIFAR_RECORD: usize = 3073;
#[cfg(test)]
const CIFAR_PIXELS: usize = 3072;

fn cifar10<F: Real>(
    dir: &Path,
    n_train: usize,
    n_calibration: usize,
    n_test: usize,
    seed: u64,
) -> Result<LoadedDataset<F>> {
    let dir = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    let mut train_files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::Load {
            path: dir.clone(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("data_batch") && n.ends_with(".bin"))
                .unwrap_or(false)
        })
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(Error::Load {
            path: dir.clone(),
            reason: "no data_batch*.bin files found".into(),
        });
    }
    let test_file = dir.join("test_batch.bin");
    if !test_file.is_file() {
        return Err(Error::Load {
            path: test_file,
            reason: "missing test_batch.bin".into(),
        });
    }

    let (train_images, train_labels) = read_cifar_records::<F>(&train_files)?;
    let pool = train_labels.len();
    if n_train + n_calibration > pool {
        return Err(Error::Config(format!(
            "requested {} train + {} calibration samples from a pool of {pool}",
            n_train, n_calibration
        )));
    }
    let (test_images, test_labels) = read_cifar_records::<F>(&[test_file])?;
    if n_test > test_labels.len() {
        return Err(Error::Config(format!(
            "requested {n_test} test samples from a pool of {}",
            test_labels.len()
        )));
    }

    let mut rng = SeedStream::new(seed, "cifar-split");
    let order = rng.shuffled_indices(pool);
    let train_idx = &order[..n_train];
    let calib_idx = &order[n_train..n_train + n_calibration];
    let test_order = rng.shuffled_indices(test_labels.len());
    let test_idx = &test_order[..n_test];

    let pick = |idx: &[usize],
                images: &Tensor<F>,
                labels: &[u32],
                name: SplitName,
                offset: u32| DatasetSplit {
        images: images.gather(idx),
        labels: idx.iter().map(|&i| labels[i]).collect(),
        split_name: name,
        num_classes: 10,
        source_indices: idx.iter().map(|&i| i as u32 + offset).collect(),
    };

    let train = pick(train_idx, &train_images, &train_labels, SplitName::Train, 0);
    let calibration = pick(
        calib_idx,
        &train_images,
        &train_labels,
        SplitName::Calibration,
        0,
    );
    // Test indices are offset past the train pool so provenance sets stay
    // disjoint.
    let test = pick(
        test_idx,
        &test_images,
        &test_labels,
        SplitName::Test,
        pool as u32,
    );

    Ok(LoadedDataset {
        train,
        calibration,
        test,
        meta: DatasetMeta {
            source: format!("cifar10:{}", dir.display()),
            seed,
            num_classes: 10,
            image_shape: (3, 32, 32),
            n_train,
            n_calibration,
            n_test,
        },
    })
}

fn read_cifar_records<F: Real>(files: &[PathBuf]) -> Result<(Tensor<F>, Vec<u32>)> {
    let mut labels = Vec::new();
    let mut data: Vec<F> = Vec::new();
    let inv = F::of(1.0 / 255.0);
    for path in files {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Load {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Load {
                path: path.clone(),
                reason: format!(
                    "file size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                    bytes.len()
                ),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as u32;
            if label >= 10 {
                return Err(Error::Validation(format!(
                    "label value {label} in a 10-class dataset ({})",
                    path.display()
                )));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| F::of_usize(b as usize) * inv));
        }
    }
    let n = labels.len();
    Ok((Tensor::from_vec(&[n, 3, 32, 32], data), labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n: 40,
            classes: 2,
            h: 8,
            w: 8,
            seed,
            channels: 3,
            template_amp: 0.32,
            noise_sd: 0.2,
            split: None,
        }
    }

    #[test]
    fn synthetic_deterministic_bitwise() {
        let a: LoadedDataset<f32> =
            load_dataset(&DatasetSource::Synthetic(tiny_spec(0))).unwrap();
        let b: LoadedDataset<f32> =
            load_dataset(&DatasetSource::Synthetic(tiny_spec(0))).unwrap();
        assert_eq!(a.train.images.data(), b.train.images.data());
        assert_eq!(a.test.images.data(), b.test.images.data());
        assert_eq!(a.train.labels, b.train.labels);

        let c: LoadedDataset<f32> =
            load_dataset(&DatasetSource::Synthetic(tiny_spec(1))).unwrap();
        assert_ne!(a.train.images.data(), c.train.images.data());
    }

    #[test]
    fn synthetic_splits_disjoint_and_sized() {
        let ds: LoadedDataset<f32> =
            load_dataset(&DatasetSource::Synthetic(tiny_spec(7))).unwrap();
        assert_eq!(ds.train.n(), 20);
        assert_eq!(ds.calibration.n(), 12);
        assert_eq!(ds.test.n(), 8);
        ds.validate().unwrap();
    }

    fn write_cifar_file(path: &Path, labels: &[u8]) {
        let mut bytes = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            bytes.push(l);
            bytes.extend((0..CIFAR_PIXELS).map(|p| ((p + i) % 256) as u8));
        }
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn cifar_binary_layout_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar_file(&dir.path().join("data_batch_1.bin"), &[0, 1, 2, 3, 4, 5]);
        write_cifar_file(&dir.path().join("test_batch.bin"), &[9, 8, 7, 6]);
        let ds: LoadedDataset<f32> = load_dataset(&DatasetSource::Cifar10 {
            dir: dir.path().to_path_buf(),
            n_train: 3,
            n_calibration: 2,
            n_test: 2,
            seed: 0,
        })
        .unwrap();
        assert_eq!(ds.train.n(), 3);
        assert_eq!(ds.calibration.n(), 2);
        assert_eq!(ds.test.n(), 2);
        assert_eq!(ds.train.image_shape(), (3, 32, 32));
        ds.validate().unwrap();
        // Pixels are bytes / 255.
        assert!(ds.train.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn cifar_label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar_file(&dir.path().join("data_batch_1.bin"), &[0, 10, 2]);
        write_cifar_file(&dir.path().join("test_batch.bin"), &[1]);
        let err = load_dataset::<f32>(&DatasetSource::Cifar10 {
            dir: dir.path().to_path_buf(),
            n_train: 2,
            n_calibration: 1,
            n_test: 1,
            seed: 0,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn cifar_missing_dir_is_load_error() {
        let err = load_dataset::<f32>(&DatasetSource::Cifar10 {
            dir: PathBuf::from("/nonexistent/cifar"),
            n_train: 1,
            n_calibration: 1,
            n_test: 1,
            seed: 0,
        })
        .unwrap_err();
        match err {
            Error::Load { path, .. } => {
                assert!(path.to_string_lossy().contains("nonexistent"))
            }
            other => panic!("expected load error, got {other}"),
        }
    }

    #[test]
    fn cifar_truncated_file_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 100]).unwrap();
        write_cifar_file(&dir.path().join("test_batch.bin"), &[1]);
        let err = load_dataset::<f32>(&DatasetSource::Cifar10 {
            dir: dir.path().to_path_buf(),
            n_train: 1,
            n_calibration: 0,
            n_test: 1,
            seed: 0,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Load { .. }), "{err}");
    }
}
