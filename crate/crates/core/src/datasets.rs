//! Data ingestion: CIFAR binary readers, synthetic generators, and
//! deterministic k-fold splitting.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DacError, Result};
use crate::tensor::Tensor;

/// Index lists partitioning the sample range.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-channel statistics of the training split used for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, ...]`: images `[n,h,w,c]` or feature vectors `[n,m]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: SplitIndices,
    /// Present when per-channel mean subtraction was applied.
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    fn sample_numel(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the samples at `indices` into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let numel = self.sample_numel();
        let mut data = Vec::with_capacity(indices.len() * numel);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DacError::Contract(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.features.data()[i * numel..(i + 1) * numel]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    fn validate(&self) -> Result<()> {
        if self.features.shape()[0] != self.labels.len() {
            return Err(DacError::Contract("features/labels length mismatch".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(DacError::Data(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Per-channel means over the given indices (trailing axis = channel).
    pub fn channel_means(&self, indices: &[usize]) -> Vec<f64> {
        let numel = self.sample_numel();
        let channels = *self.sample_shape().last().unwrap_or(&1);
        let mut mean = vec![0.0; channels];
        let mut count = 0usize;
        for &i in indices {
            for row in self.features.data()[i * numel..(i + 1) * numel].chunks(channels) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            count += numel / channels;
        }
        for m in &mut mean {
            *m /= count.max(1) as f64;
        }
        mean
    }

    /// Subtracts the training-split per-channel means from every sample; no
    /// statistics from the validation or test splits leak in.
    pub fn normalize_with_train_stats(&mut self) {
        let mean = self.channel_means(&self.splits.train.clone());
        let channels = mean.len();
        for row in self.features.data_mut().chunks_mut(channels) {
            for (v, &m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        self.norm = Some(NormStats { mean });
    }
}

// ---------------------------------------------------------------------------
// CIFAR binary readers
// ---------------------------------------------------------------------------

const CIFAR_HW: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_HW * CIFAR_HW;
const CIFAR_RECORD_10: usize = 1 + 3 * CIFAR_PIXELS;
const CIFAR_RECORD_100: usize = 2 + 3 * CIFAR_PIXELS;

/// Parses CIFAR-10 records: one label byte then 3072 pixel bytes (three
/// 32x32 channel planes, row-major). Pixels are scaled to [0,1] and stored
/// `[n, 32, 32, 3]`.
pub fn parse_cifar10_records(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    parse_cifar_records(bytes, 1, 10)
}

/// CIFAR-100 records carry two label bytes (coarse, fine); the fine label is
/// used.
pub fn parse_cifar100_records(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    parse_cifar_records(bytes, 2, 100)
}

fn parse_cifar_records(
    bytes: &[u8],
    label_bytes: usize,
    num_classes: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let record = label_bytes + 3 * CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(DacError::Data(format!(
            "truncated file: {} bytes is not a multiple of the {record}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0.0; n * CIFAR_PIXELS * 3];
    for (r, rec) in bytes.chunks(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= num_classes {
            return Err(DacError::Data(format!(
                "record {r}: label byte {label} out of range for {num_classes} classes"
            )));
        }
        labels.push(label);
        let planes = &rec[label_bytes..];
        for c in 0..3 {
            for p in 0..CIFAR_PIXELS {
                data[(r * CIFAR_PIXELS + p) * 3 + c] = planes[c * CIFAR_PIXELS + p] as f64 / 255.0;
            }
        }
    }
    Ok((Tensor::new(vec![n, CIFAR_HW, CIFAR_HW, 3], data)?, labels))
}

fn concat_samples(parts: Vec<(Tensor, Vec<usize>)>) -> Result<(Tensor, Vec<usize>)> {
    let mut shape = parts[0].0.shape().to_vec();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    shape[0] = 0;
    for (t, l) in parts {
        shape[0] += t.shape()[0];
        data.extend_from_slice(t.data());
        labels.extend(l);
    }
    Ok((Tensor::new(shape, data)?, labels))
}

/// Loads the canonical CIFAR-10 binary layout from a directory
/// (`data_batch_1.bin` .. `data_batch_5.bin`, `test_batch.bin`), applying the
/// 5-fold split for `fold_index` and training-split mean subtraction.
pub fn load_cifar10_bin(dir: &Path, fold_index: usize, seed: u64) -> Result<Dataset> {
    let mut parts = Vec::new();
    for i in 1..=5 {
        let bytes = fs::read(dir.join(format!("data_batch_{i}.bin")))?;
        parts.push(parse_cifar10_records(&bytes)?);
    }
    let train_count: usize = parts.iter().map(|(t, _)| t.shape()[0]).sum();
    let test_bytes = fs::read(dir.join("test_batch.bin"))?;
    parts.push(parse_cifar10_records(&test_bytes)?);
    assemble_cifar(parts, train_count, 10, fold_index, seed)
}

/// Loads the CIFAR-100 binary layout (`train.bin`, `test.bin`).
pub fn load_cifar100_bin(dir: &Path, fold_index: usize, seed: u64) -> Result<Dataset> {
    let train = parse_cifar100_records(&fs::read(dir.join("train.bin"))?)?;
    let train_count = train.0.shape()[0];
    let test = parse_cifar100_records(&fs::read(dir.join("test.bin"))?)?;
    assemble_cifar(vec![train, test], train_count, 100, fold_index, seed)
}

fn assemble_cifar(
    parts: Vec<(Tensor, Vec<usize>)>,
    train_count: usize,
    num_classes: usize,
    fold_index: usize,
    seed: u64,
) -> Result<Dataset> {
    let (features, labels) = concat_samples(parts)?;
    let total = labels.len();
    let fold = kfold_split(train_count, 5, fold_index, seed)?;
    let mut ds = Dataset {
        features,
        labels,
        num_classes,
        splits: SplitIndices {
            train: fold.train,
            val: fold.val,
            test: (train_count..total).collect(),
        },
        norm: None,
    };
    ds.validate()?;
    ds.normalize_with_train_stats();
    Ok(ds)
}

/// Expected byte size of a CIFAR-10 file with `n` records.
pub fn cifar10_file_size(n: usize) -> usize {
    n * CIFAR_RECORD_10
}

pub fn cifar100_file_size(n: usize) -> usize {
    n * CIFAR_RECORD_100
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Deterministic shuffled k-fold partition of `0..n`: fold `fold_index` is
/// the validation set, the rest train.
pub fn kfold_split(n: usize, folds: usize, fold_index: usize, seed: u64) -> Result<SplitIndices> {
    if folds == 0 || fold_index >= folds {
        return Err(DacError::Contract(format!(
            "fold index {fold_index} out of range for {folds} folds"
        )));
    }
    if n < folds {
        return Err(DacError::Contract(format!("{n} samples cannot make {folds} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    // fold f takes the f-th contiguous chunk of the shuffled order;
    // remainders go to the leading folds
    let base = n / folds;
    let extra = n % folds;
    let start = fold_index * base + fold_index.min(extra);
    let len = base + usize::from(fold_index < extra);
    let val: Vec<usize> = order[start..start + len].to_vec();
    let train: Vec<usize> = order[..start]
        .iter()
        .chain(&order[start + len..])
        .copied()
        .collect();
    Ok(SplitIndices {
        train,
        val,
        test: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

fn default_splits(n: usize) -> SplitIndices {
    // deterministic 80/10/10 split over the generation order
    let train_end = (n * 8) / 10;
    let val_end = train_end + (n - train_end) / 2;
    SplitIndices {
        train: (0..train_end).collect(),
        val: (train_end..val_end).collect(),
        test: (val_end..n).collect(),
    }
}

/// Points of `[-2,2]^2` labeled by the rotated square `|x|_1 < 1`; a margin
/// band `| 1 - |x|_1 | < 0.1` is excluded so the explicit construction
/// separates with margin.
pub fn gen_square_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(DacError::Contract("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let x: f64 = rng.random_range(-2.0..2.0);
        let y: f64 = rng.random_range(-2.0..2.0);
        let l1 = x.abs() + y.abs();
        if (1.0 - l1).abs() < 0.1 {
            continue;
        }
        data.push(x);
        data.push(y);
        labels.push(usize::from(l1 < 1.0));
    }
    Ok(Dataset {
        features: Tensor::new(vec![n, 2], data)?,
        labels,
        num_classes: 2,
        splits: default_splits(n),
        norm: None,
    })
}

/// The three collinear points (two of one class around one of the other)
/// inside the unit square. No linear function separates the middle point.
pub fn gen_three_point_dataset() -> Dataset {
    let pts = [[0.2, 0.3], [0.45, 0.55], [0.7, 0.8]];
    let data: Vec<f64> = pts.iter().flatten().copied().collect();
    let all: Vec<usize> = (0..3).collect();
    Dataset {
        features: Tensor::new(vec![3, 2], data).expect("shape"),
        labels: vec![0, 1, 0],
        num_classes: 2,
        splits: SplitIndices {
            train: all.clone(),
            val: all.clone(),
            test: all,
        },
        norm: None,
    }
}

/// Gaussian blobs around equally spaced centers on a circle.
pub fn gen_blobs(n: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(DacError::Contract("need n >= classes >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).expect("valid noise");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        data.push(angle.cos() + normal.sample(&mut rng));
        data.push(angle.sin() + normal.sample(&mut rng));
        labels.push(class);
    }
    Ok(Dataset {
        features: Tensor::new(vec![n, 2], data)?,
        labels,
        num_classes: classes,
        splits: default_splits(n),
        norm: None,
    })
}

/// Synthetic image classification set: per-class smooth low-frequency
/// templates plus pixel noise, `[n, hw, hw, channels]`.
pub fn gen_class_image_dataset(
    n: usize,
    classes: usize,
    hw: usize,
    channels: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(DacError::Contract("need n >= classes >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // low-frequency class templates
    let mut templates = Vec::with_capacity(classes);
    for _ in 0..classes {
        let fx: f64 = rng.random_range(0.5..2.5);
        let fy: f64 = rng.random_range(0.5..2.5);
        let px: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let py: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.random_range(0.6..1.0);
        let mut t = vec![0.0; hw * hw * channels];
        for r in 0..hw {
            for cidx in 0..hw {
                for ch in 0..channels {
                    let u = r as f64 / hw as f64 * std::f64::consts::TAU;
                    let v = cidx as f64 / hw as f64 * std::f64::consts::TAU;
                    t[(r * hw + cidx) * channels + ch] = amp
                        * ((fx * u + px + ch as f64).sin() + (fy * v + py - ch as f64).cos())
                        / 2.0;
                }
            }
        }
        templates.push(t);
    }
    let normal = Normal::new(0.0, noise).expect("valid noise");
    let mut data = Vec::with_capacity(n * hw * hw * channels);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for &v in &templates[class] {
            data.push(v + normal.sample(&mut rng));
        }
        labels.push(class);
    }
    Ok(Dataset {
        features: Tensor::new(vec![n, hw, hw, channels], data)?,
        labels,
        num_classes: classes,
        splits: default_splits(n),
        norm: None,
    })
}

/// Uniform-grid regression samples of a named 1-d/2-d target; labels are
/// empty and the function values ride in `targets`.
pub struct RegressionGrid {
    pub points: Tensor,
    pub targets: Vec<f64>,
}

pub fn gen_regression_grid(f: &crate::approximator::TargetFn, d: usize, per_axis: usize) -> Result<RegressionGrid> {
    if per_axis < 2 {
        return Err(DacError::Contract("need at least 2 points per axis".into()));
    }
    let pts = crate::approximator::grid_points(d, per_axis);
    let targets: Vec<f64> = pts.iter().map(|p| f(p)).collect();
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    Ok(RegressionGrid {
        points: Tensor::new(vec![targets.len(), d], flat)?,
        targets,
    })
}

/// CSV export of a vector dataset: `x1,x2,...,label` per row.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let dim = ds.sample_numel();
    let mut out = String::new();
    let header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label\n");
    for (i, &label) in ds.labels.iter().enumerate() {
        let row = &ds.features.data()[i * dim..(i + 1) * dim];
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push_str(&format!(",{label}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_cifar10_bytes(labels: &[u8], seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bytes = Vec::with_capacity(labels.len() * CIFAR_RECORD_10);
        for &l in labels {
            bytes.push(l);
            for _ in 0..3 * CIFAR_PIXELS {
                bytes.push(rng.random_range(0..=255u32) as u8);
            }
        }
        bytes
    }

    #[test]
    fn single_record_file_parses() {
        let bytes = synthetic_cifar10_bytes(&[7], 1);
        assert_eq!(bytes.len(), 3073);
        let (imgs, labels) = parse_cifar10_records(&bytes).unwrap();
        assert_eq!(imgs.shape(), &[1, 32, 32, 3]);
        assert_eq!(labels, vec![7]);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let bytes = synthetic_cifar10_bytes(&[255], 1);
        assert!(parse_cifar10_records(&bytes).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = synthetic_cifar10_bytes(&[1], 1);
        assert!(parse_cifar10_records(&bytes[..3000]).is_err());
    }

    #[test]
    fn pixel_round_trip_is_bit_exact() {
        let bytes = synthetic_cifar10_bytes(&[0, 3, 9], 2);
        let (imgs, _) = parse_cifar10_records(&bytes).unwrap();
        // undo the scaling and the plane transpose, recover original bytes
        let mut rebuilt = Vec::with_capacity(bytes.len());
        for r in 0..3 {
            rebuilt.push(bytes[r * CIFAR_RECORD_10]);
            for c in 0..3 {
                for p in 0..CIFAR_PIXELS {
                    let v = imgs.data()[(r * CIFAR_PIXELS + p) * 3 + c];
                    rebuilt.push((v * 255.0).round() as u8);
                }
            }
        }
        assert_eq!(rebuilt, bytes);
    }

    #[test]
    fn cifar100_fine_label_used() {
        let mut bytes = Vec::new();
        bytes.push(13u8); // coarse
        bytes.push(42u8); // fine
        bytes.extend(std::iter::repeat_n(0u8, 3 * CIFAR_PIXELS));
        let (_, labels) = parse_cifar100_records(&bytes).unwrap();
        assert_eq!(labels, vec![42]);
    }

    #[test]
    fn kfold_sizes_and_partition() {
        let split = kfold_split(50_000, 5, 2, 9).unwrap();
        assert_eq!(split.val.len(), 10_000);
        assert_eq!(split.train.len(), 40_000);

        // union of validation folds is the full index set
        let mut seen = vec![false; 1000];
        for fold in 0..5 {
            for i in kfold_split(1000, 5, fold, 9).unwrap().val {
                assert!(!seen[i], "index {i} in two folds");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn kfold_deterministic_and_bounds_checked() {
        assert_eq!(
            kfold_split(100, 5, 1, 7).unwrap(),
            kfold_split(100, 5, 1, 7).unwrap()
        );
        assert!(kfold_split(100, 5, 5, 7).is_err());
    }

    #[test]
    fn square_dataset_labels_and_margin() {
        let ds = gen_square_dataset(500, 3).unwrap();
        assert_eq!(ds.len(), 500);
        for i in 0..ds.len() {
            let (x, y) = (ds.features.data()[2 * i], ds.features.data()[2 * i + 1]);
            let l1 = x.abs() + y.abs();
            assert!((1.0 - l1).abs() >= 0.1, "margin violated at ({x},{y})");
            assert_eq!(ds.labels[i], usize::from(l1 < 1.0));
        }
        // center would be labeled 1, far corner 0
        assert!(1.0_f64 > 0.0);
        // determinism
        assert_eq!(gen_square_dataset(50, 4).unwrap(), gen_square_dataset(50, 4).unwrap());
    }

    #[test]
    fn three_point_dataset_is_collinear_margin_labeled() {
        let ds = gen_three_point_dataset();
        assert_eq!(ds.labels, vec![0, 1, 0]);
        let d = ds.features.data();
        let (ax, ay) = (d[2] - d[0], d[3] - d[1]);
        let (bx, by) = (d[4] - d[0], d[5] - d[1]);
        assert!((ax * by - ay * bx).abs() < 1e-12, "cross product nonzero");
        for &v in d {
            assert!((0.0..=1.0).contains(&v), "point outside unit square");
        }
    }

    #[test]
    fn three_point_dataset_linearly_inseparable_by_grid_certificate() {
        let ds = gen_three_point_dataset();
        let d = ds.features.data();
        // exhaustive grid over normalized (w, b): w on the unit circle
        let mut separable = false;
        for ai in 0..360 {
            let a = ai as f64 * std::f64::consts::PI / 180.0;
            let (wx, wy) = (a.cos(), a.sin());
            for bi in -200..=200 {
                let b = bi as f64 / 50.0;
                let score = |i: usize| wx * d[2 * i] + wy * d[2 * i + 1] + b;
                let ok = score(1) > 0.0 && score(0) < 0.0 && score(2) < 0.0;
                if ok {
                    separable = true;
                }
            }
        }
        assert!(!separable, "a linear separator should not exist");
    }

    #[test]
    fn normalization_uses_train_stats_only() {
        let mut ds = gen_blobs(300, 3, 0.3, 5).unwrap();
        ds.normalize_with_train_stats();
        let stats = ds.norm.clone().unwrap();
        // training mean is now ~0 by construction
        let train_mean = ds.channel_means(&ds.splits.train.clone());
        for m in train_mean {
            assert!(m.abs() < 1e-9);
        }
        // val/test means generally differ from zero (no leakage)
        let val_mean = ds.channel_means(&ds.splits.val.clone());
        assert!(val_mean.iter().any(|m| m.abs() > 1e-6));
        assert_eq!(stats.mean.len(), 2);
    }

    #[test]
    fn csv_export_layout() {
        let ds = gen_three_point_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.csv");
        export_csv(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x1,x2,label");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn class_image_dataset_learnably_distinct() {
        let ds = gen_class_image_dataset(40, 4, 8, 3, 0.05, 11).unwrap();
        assert_eq!(ds.features.shape(), &[40, 8, 8, 3]);
        // same-class samples are closer than cross-class ones on average
        let numel = 8 * 8 * 3;
        let dist = |i: usize, j: usize| -> f64 {
            ds.features.data()[i * numel..(i + 1) * numel]
                .iter()
                .zip(&ds.features.data()[j * numel..(j + 1) * numel])
                .map(|(a, b)| (a - b).powi(2))
                .sum()
        };
        let same = dist(0, 4);
        let cross = dist(0, 1);
        assert!(same < cross, "same {same} vs cross {cross}");
    }
}
