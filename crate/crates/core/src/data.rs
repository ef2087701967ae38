//! Datasets: the built-in synthetic image generator, deterministic splits,
//! IDX file loading for standard image datasets, and binary snapshots.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::stream;
use crate::tensor::Tensor;

/// Labeled image collection; every image is `(C, H, W)` with entries in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize], name_suffix: &str) -> Self {
        Self {
            name: format!("{}{name_suffix}", self.name),
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn indices_of_class(&self, y: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == y).collect()
    }

    /// SHA-256 over labels and pixel values (widened to f64, little-endian),
    /// used to verify that splits reproduce across runs.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for &label in &self.labels {
            hasher.update((label as u64).to_le_bytes());
        }
        for img in &self.images {
            for v in img.iter() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let [c, h, w] = self.image_shape;
        for (i, img) in self.images.iter().enumerate() {
            if img.shape() != [c, h, w] {
                return Err(Error::Shape(format!(
                    "image {i} has shape {:?}, dataset declares {:?}",
                    img.shape(),
                    self.image_shape
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "dataset",
            "format_version": 1,
            "name": self.name,
            "image_shape": self.image_shape,
            "num_classes": self.num_classes,
            "labels": self.labels,
        });
        let mut blob = Vec::with_capacity(self.len() * self.image_shape.iter().product::<usize>());
        for img in &self.images {
            blob.extend(img.iter().map(|v| v.as_f64()));
        }
        checkpoint::save_container(path, DATASET_MAGIC, &meta, &blob)
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let (meta, blob) = checkpoint::load_container(path, DATASET_MAGIC)?;
        let fail = |reason: String| Error::FileFormat {
            path: path.display().to_string(),
            reason,
        };
        let name = checkpoint::meta_field(&meta, "name", path)?
            .as_str()
            .ok_or_else(|| fail("name is not a string".into()))?
            .to_string();
        let shape_v: Vec<usize> = checkpoint::meta_field(&meta, "image_shape", path)?
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
            .unwrap_or_default();
        let image_shape: [usize; 3] = shape_v
            .try_into()
            .map_err(|_| fail("image_shape must be [channels, height, width]".into()))?;
        let num_classes = checkpoint::meta_field(&meta, "num_classes", path)?
            .as_u64()
            .ok_or_else(|| fail("num_classes is not an integer".into()))?
            as usize;
        let labels: Vec<usize> =
            serde_json::from_value(checkpoint::meta_field(&meta, "labels", path)?.clone())
                .map_err(|e| fail(format!("labels: {e}")))?;
        let pixels: usize = image_shape.iter().product();
        if blob.len() != labels.len() * pixels {
            return Err(fail(format!(
                "pixel blob holds {} values, {} images of {} pixels need {}",
                blob.len(),
                labels.len(),
                pixels,
                labels.len() * pixels
            )));
        }
        let images = blob
            .chunks(pixels)
            .map(|chunk| {
                Tensor::from_vec(&image_shape, chunk.iter().map(|&v| T::cast(v)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            name,
            image_shape,
            num_classes,
            images,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }
}

const DATASET_MAGIC: [u8; 4] = *b"BDDS";

/// Round to the nearest integer, ties to even — the rounding rule used for
/// every fractional count in the pipeline (backdoor samples per batch,
/// poison counts, split sizes) so that counts are unbiased across batches.
pub fn round_count(x: f64) -> usize {
    x.round_ties_even().max(0.0) as usize
}

/// Parameters of the built-in synthetic image dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub image_shape: [usize; 3],
    pub train_per_class: usize,
    /// Size of the raw evaluation pool per class, before the test/reserved
    /// split carves it up.
    pub test_per_class: usize,
    /// Per-pixel Gaussian noise added to each class prototype.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            image_shape: [3, 16, 16],
            train_per_class: 600,
            test_per_class: 100,
            pixel_noise: 0.05,
            seed: 7,
        }
    }
}

/// Render the class prototype: a soft background plus two Gaussian bumps
/// with seeded centers, radii, and per-channel amplitudes. Distinct classes
/// get visibly different layouts, so a small classifier separates them while
/// per-sample noise keeps the task non-trivial.
fn class_prototype(spec: &SyntheticSpec, class: usize) -> Tensor<f64> {
    let [c, h, w] = spec.image_shape;
    let mut rng = stream(spec.seed, &format!("data:proto:{class}"));
    let mut proto = Tensor::filled(&[c, h, w], 0.1f64);
    for _bump in 0..2 {
        let cx = rng.random_range(0.2..0.8) * w as f64;
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let radius = rng.random_range(0.12..0.3) * h.min(w) as f64;
        let amps: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..0.9)).collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let v = amps[ch] * (-d2 / (2.0 * radius * radius)).exp();
                    proto.data_mut()[(ch * h + y) * w + x] += v;
                }
            }
        }
    }
    proto.clamp01()
}

fn sample_image<T: Scalar>(
    proto: &Tensor<f64>,
    noise: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let data = proto
        .iter()
        .map(|&p| {
            let v = p + noise * f64::sample_normal(rng);
            T::cast(v.clamp(0.0, 1.0))
        })
        .collect();
    Tensor::from_vec(proto.shape(), data).expect("prototype shape is consistent")
}

/// Generate the seeded synthetic dataset: a training set and a raw
/// evaluation pool (to be divided into test/reserved by [`make_splits`]).
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    if spec.classes == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Config(format!(
            "synthetic spec needs positive classes and per-class counts: {spec:?}"
        )));
    }
    let protos: Vec<Tensor<f64>> = (0..spec.classes)
        .map(|cl| class_prototype(spec, cl))
        .collect();
    let build = |tag: &str, per_class: usize| -> Dataset<T> {
        let mut images = Vec::with_capacity(spec.classes * per_class);
        let mut labels = Vec::with_capacity(spec.classes * per_class);
        for (cl, proto) in protos.iter().enumerate() {
            let mut rng = stream(spec.seed, &format!("data:sample:{tag}:{cl}"));
            for _ in 0..per_class {
                images.push(sample_image(proto, spec.pixel_noise, &mut rng));
                labels.push(cl);
            }
        }
        Dataset {
            name: format!("synthetic{}-{tag}", spec.classes),
            image_shape: spec.image_shape,
            num_classes: spec.classes,
            images,
            labels,
        }
    };
    let train = build("train", spec.train_per_class);
    let pool = build("eval", spec.test_per_class);
    Ok((train, pool))
}

/// How to derive the working splits from (train, evaluation-pool) data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of the evaluation pool reserved for defenses; the rest is
    /// the actual test set.
    pub reserved_fraction: f64,
    /// Merge train + pool and re-split 80/20 first (the protocol used for
    /// datasets that ship without a labeled test half).
    pub resplit_80_20: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            reserved_fraction: 0.10,
            resplit_80_20: false,
            seed: 7,
        }
    }
}

/// The working splits: training data for the attack, test data for metrics,
/// and a clean reserved split that only defenses may consume.
#[derive(Debug, Clone)]
pub struct DataSplits<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub reserved: Dataset<T>,
}

/// Carve deterministic splits. The evaluation pool is shuffled (seeded) and
/// divided so that `round(reserved_fraction * N)` samples are reserved and
/// the remainder is the test set.
pub fn make_splits<T: Scalar>(
    train: Dataset<T>,
    pool: Dataset<T>,
    spec: &SplitSpec,
) -> Result<DataSplits<T>> {
    if !(0.0..1.0).contains(&spec.reserved_fraction) {
        return Err(Error::Config(format!(
            "reserved_fraction must be in [0, 1), got {}",
            spec.reserved_fraction
        )));
    }
    train.validate()?;
    pool.validate()?;
    if train.is_empty() || pool.is_empty() {
        return Err(Error::Config("cannot split empty datasets".into()));
    }

    let (train, pool) = if spec.resplit_80_20 {
        // Pool everything and re-split 80/20 train/test.
        let mut merged_images = train.images.clone();
        let mut merged_labels = train.labels.clone();
        merged_images.extend(pool.images.iter().cloned());
        merged_labels.extend(pool.labels.iter().cloned());
        let n = merged_images.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(spec.seed, "split:resplit-80-20"));
        let train_count = round_count(0.8 * n as f64);
        let merged = Dataset {
            name: train.name.replace("-train", ""),
            image_shape: train.image_shape,
            num_classes: train.num_classes,
            images: merged_images,
            labels: merged_labels,
        };
        (
            merged.subset(&order[..train_count], "-train80"),
            merged.subset(&order[train_count..], "-test20"),
        )
    } else {
        (train, pool)
    };

    let n = pool.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(spec.seed, "split:test-reserved"));
    let reserved_count = round_count(spec.reserved_fraction * n as f64);
    let reserved = pool.subset(&order[..reserved_count], "-reserved");
    let test = pool.subset(&order[reserved_count..], "-test");
    Ok(DataSplits {
        train,
        test,
        reserved,
    })
}

/// Load an IDX image/label file pair (the format standard MNIST-family
/// datasets ship in). Pixels are scaled from `u8` to `[0, 1]`.
pub fn load_idx_pair<T: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    name: &str,
    num_classes: usize,
) -> Result<Dataset<T>> {
    let fail = |path: &Path, reason: String| Error::FileFormat {
        path: path.display().to_string(),
        reason,
    };
    let img_bytes = std::fs::read(images_path)?;
    if img_bytes.len() < 16 {
        return Err(fail(images_path, "file too short for an IDX image header".into()));
    }
    let magic = u32::from_be_bytes(img_bytes[0..4].try_into().unwrap());
    if magic != 0x0000_0803 {
        return Err(fail(
            images_path,
            format!("IDX image magic 0x{magic:08x}, expected 0x00000803"),
        ));
    }
    let count = u32::from_be_bytes(img_bytes[4..8].try_into().unwrap()) as usize;
    let rows = u32::from_be_bytes(img_bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_be_bytes(img_bytes[12..16].try_into().unwrap()) as usize;
    if img_bytes.len() != 16 + count * rows * cols {
        return Err(fail(
            images_path,
            format!("expected {} pixel bytes, found {}", count * rows * cols, img_bytes.len() - 16),
        ));
    }

    let lbl_bytes = std::fs::read(labels_path)?;
    if lbl_bytes.len() < 8 {
        return Err(fail(labels_path, "file too short for an IDX label header".into()));
    }
    let lmagic = u32::from_be_bytes(lbl_bytes[0..4].try_into().unwrap());
    if lmagic != 0x0000_0801 {
        return Err(fail(
            labels_path,
            format!("IDX label magic 0x{lmagic:08x}, expected 0x00000801"),
        ));
    }
    let lcount = u32::from_be_bytes(lbl_bytes[4..8].try_into().unwrap()) as usize;
    if lcount != count {
        return Err(fail(
            labels_path,
            format!("{lcount} labels for {count} images"),
        ));
    }

    let scale = 1.0 / 255.0;
    let images = (0..count)
        .map(|i| {
            let start = 16 + i * rows * cols;
            let data = img_bytes[start..start + rows * cols]
                .iter()
                .map(|&b| T::cast(b as f64 * scale))
                .collect();
            Tensor::from_vec(&[1, rows, cols], data)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();

    let ds = Dataset {
        name: name.to_string(),
        image_shape: [1, rows, cols],
        num_classes,
        images,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}

/// Load the Fashion-MNIST IDX files from a directory. Nothing is downloaded:
/// when files are missing the error spells out what to fetch and from where.
pub fn load_fashion_mnist<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    const FILES: [(&str, &str); 4] = [
        ("train-images-idx3-ubyte", "training images"),
        ("train-labels-idx1-ubyte", "training labels"),
        ("t10k-images-idx3-ubyte", "test images"),
        ("t10k-labels-idx1-ubyte", "test labels"),
    ];
    let missing: Vec<&str> = FILES
        .iter()
        .filter(|(f, _)| !dir.join(f).exists())
        .map(|(f, _)| *f)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "Fashion-MNIST files missing from {}: {}. Download the gzipped IDX files from \
             https://github.com/zalandoresearch/fashion-mnist (or a mirror), run `gunzip`, and \
             place them in that directory; nothing is downloaded automatically.",
            dir.display(),
            missing.join(", ")
        )));
    }
    let train = load_idx_pair(
        &dir.join(FILES[0].0),
        &dir.join(FILES[1].0),
        "fashion-mnist-train",
        10,
    )?;
    let test = load_idx_pair(
        &dir.join(FILES[2].0),
        &dir.join(FILES[3].0),
        "fashion-mnist-test",
        10,
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            image_shape: [2, 8, 8],
            train_per_class: 6,
            test_per_class: 5,
            pixel_noise: 0.1,
            seed: 3,
        }
    }

    #[test]
    fn rounding_is_half_to_even() {
        assert_eq!(round_count(51.2), 51);
        assert_eq!(round_count(0.5), 0);
        assert_eq!(round_count(1.5), 2);
        assert_eq!(round_count(2.5), 2);
        assert_eq!(round_count(2.6), 3);
        assert_eq!(round_count(-0.4), 0);
    }

    #[test]
    fn synthetic_generation_is_deterministic_and_in_range() {
        let spec = tiny_spec();
        let (train_a, pool_a) = generate_synthetic::<f32>(&spec).unwrap();
        let (train_b, pool_b) = generate_synthetic::<f32>(&spec).unwrap();
        assert_eq!(train_a.content_hash(), train_b.content_hash());
        assert_eq!(pool_a.content_hash(), pool_b.content_hash());
        assert_eq!(train_a.len(), 24);
        assert_eq!(pool_a.len(), 20);
        for img in &train_a.images {
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn different_seeds_give_different_data() {
        let mut spec = tiny_spec();
        let (a, _) = generate_synthetic::<f32>(&spec).unwrap();
        spec.seed = 4;
        let (b, _) = generate_synthetic::<f32>(&spec).unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn split_sizes_follow_the_reserve_rule() {
        // A 1000-sample pool must yield 900 test / 100 reserved.
        let spec = SyntheticSpec {
            classes: 2,
            image_shape: [1, 4, 4],
            train_per_class: 5,
            test_per_class: 500,
            pixel_noise: 0.05,
            seed: 1,
        };
        let (train, pool) = generate_synthetic::<f32>(&spec).unwrap();
        let splits = make_splits(train, pool, &SplitSpec::default()).unwrap();
        assert_eq!(splits.reserved.len(), 100);
        assert_eq!(splits.test.len(), 900);
    }

    #[test]
    fn splits_reproduce_their_hashes() {
        let spec = tiny_spec();
        let make = || {
            let (train, pool) = generate_synthetic::<f32>(&spec).unwrap();
            make_splits(train, pool, &SplitSpec::default()).unwrap()
        };
        let a = make();
        let b = make();
        assert_eq!(a.train.content_hash(), b.train.content_hash());
        assert_eq!(a.test.content_hash(), b.test.content_hash());
        assert_eq!(a.reserved.content_hash(), b.reserved.content_hash());
    }

    #[test]
    fn resplit_80_20_redistributes_all_samples() {
        let spec = tiny_spec();
        let (train, pool) = generate_synthetic::<f32>(&spec).unwrap();
        let total = train.len() + pool.len(); // 44
        let splits = make_splits(
            train,
            pool,
            &SplitSpec {
                resplit_80_20: true,
                ..SplitSpec::default()
            },
        )
        .unwrap();
        assert_eq!(splits.train.len(), round_count(0.8 * total as f64));
        assert_eq!(
            splits.train.len() + splits.test.len() + splits.reserved.len(),
            total
        );
    }

    #[test]
    fn snapshot_round_trips() {
        let spec = tiny_spec();
        let (train, _) = generate_synthetic::<f32>(&spec).unwrap();
        let dir = std::env::temp_dir().join("bdlab-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("train.bdds");
        train.save_snapshot(&path).unwrap();
        let loaded = Dataset::<f32>::load_snapshot(&path).unwrap();
        assert_eq!(loaded, train);
        assert_eq!(loaded.content_hash(), train.content_hash());
    }

    #[test]
    fn idx_loader_reads_a_synthesized_file() {
        let dir = std::env::temp_dir().join("bdlab-idx-test");
        std::fs::create_dir_all(&dir).unwrap();
        let img_path = dir.join("imgs-idx3-ubyte");
        let lbl_path = dir.join("lbls-idx1-ubyte");
        // Two 2x2 images with pixel values 0..8.
        let mut img_bytes = Vec::new();
        img_bytes.extend(0x0000_0803u32.to_be_bytes());
        img_bytes.extend(2u32.to_be_bytes());
        img_bytes.extend(2u32.to_be_bytes());
        img_bytes.extend(2u32.to_be_bytes());
        img_bytes.extend([0u8, 51, 102, 153, 204, 255, 10, 20]);
        std::fs::write(&img_path, &img_bytes).unwrap();
        let mut lbl_bytes = Vec::new();
        lbl_bytes.extend(0x0000_0801u32.to_be_bytes());
        lbl_bytes.extend(2u32.to_be_bytes());
        lbl_bytes.extend([1u8, 0]);
        std::fs::write(&lbl_path, &lbl_bytes).unwrap();

        let ds = load_idx_pair::<f64>(&img_path, &lbl_path, "probe", 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.image_shape, [1, 2, 2]);
        assert!((ds.images[0].data()[1] - 0.2).abs() < 1e-12);
        assert_eq!(ds.images[1].data()[1], 1.0);

        // Corrupt magic is rejected.
        img_bytes[3] = 0x99;
        std::fs::write(&img_path, &img_bytes).unwrap();
        assert!(load_idx_pair::<f64>(&img_path, &lbl_path, "probe", 2).is_err());
    }

    #[test]
    fn missing_fashion_mnist_errors_with_fetch_instructions() {
        let dir = std::env::temp_dir().join("bdlab-empty-fmnist");
        std::fs::create_dir_all(&dir).unwrap();
        match load_fashion_mnist::<f32>(&dir) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("Download"));
                assert!(msg.contains("train-images-idx3-ubyte"));
            }
            other => panic!("expected config error with instructions, got {other:?}"),
        }
    }
}
