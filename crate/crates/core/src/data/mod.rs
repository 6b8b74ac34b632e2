//! Labeled datasets, IDX ingestion, and the bundled MNIST presets.

mod idx;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxPart};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Samples as rows of `x` with integer labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::shape("dataset", format!("expected [n, d] inputs, got {:?}", x.shape())));
        }
        if x.rows() != y.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} inputs but {} labels", x.rows(), y.len()),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.row_len()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples and the remainder, in stored order.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Keeps samples whose label is listed and relabels them by list position.
    pub fn filter_classes(&self, keep: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.y[i])).collect();
        let mut out = self.subset(&idx);
        for l in &mut out.y {
            *l = keep.iter().position(|k| k == l).expect("filtered label");
        }
        out.classes = keep.len();
        out
    }

    pub fn class_indices(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] == k).collect()
    }

    pub fn take(&self, n: usize) -> Dataset {
        self.split_at(n).0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train50k,
    Val10k,
    Test,
}

/// One split of MNIST with pixels scaled to [0, 1].
#[derive(Clone, Debug)]
pub struct MnistSet {
    pub data: Dataset,
    pub split: SplitTag,
}

/// Splits the original 60K training order into the first 50K (train) and the
/// last 10K (validation).
pub fn split_mnist_train(full: Dataset) -> Result<(MnistSet, MnistSet)> {
    if full.len() != 60_000 {
        return Err(Error::invalid(format!(
            "expected the 60000-sample MNIST training set, got {}",
            full.len()
        )));
    }
    let (train, val) = full.split_at(50_000);
    Ok((
        MnistSet {
            data: train,
            split: SplitTag::Train50k,
        },
        MnistSet {
            data: val,
            split: SplitTag::Val10k,
        },
    ))
}

/// Reads an image/label IDX pair into a 10-class dataset.
pub fn load_mnist_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    if x.rows() != y.len() {
        return Err(Error::format(
            labels,
            format!("{} labels for {} images", y.len(), x.rows()),
        ));
    }
    Dataset::new(x, y, 10)
}

/// Directory holding the bundled 10,000-digit MNIST sample.
pub fn bundled_data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub const BUNDLED_IMAGES: &str = "mnist10k-images-idx3-ubyte.gz";
pub const BUNDLED_LABELS: &str = "mnist10k-labels-idx1-ubyte.gz";

/// The bundled 10,000-digit sample, all ten classes, in file order.
pub fn load_bundled(dir: &Path) -> Result<Dataset> {
    load_mnist_pair(&dir.join(BUNDLED_IMAGES), &dir.join(BUNDLED_LABELS))
}

/// Train/validation/test splits used by desk-scale runs.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Sizes and class selection of a desk-scale preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSpec {
    pub name: String,
    /// Original digit labels kept, relabeled `0..classes.len()`.
    pub classes: Vec<usize>,
    pub train: usize,
    pub val: usize,
    /// `None` takes every remaining sample.
    pub test: Option<usize>,
}

impl PresetSpec {
    /// Digits 0 and 1 from the bundled sample (2128 samples in total).
    pub fn mnist_mini() -> Self {
        Self {
            name: "mnist-mini".into(),
            classes: vec![0, 1],
            train: 1400,
            val: 300,
            test: None,
        }
    }

    /// All ten digits from the bundled sample.
    pub fn mnist_10k() -> Self {
        Self {
            name: "mnist-10k".into(),
            classes: (0..10).collect(),
            train: 7000,
            val: 1000,
            test: None,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mnist-mini" => Ok(Self::mnist_mini()),
            "mnist-10k" => Ok(Self::mnist_10k()),
            other => Err(Error::invalid(format!("unknown dataset preset `{other}`"))),
        }
    }

    pub fn load(&self, dir: &Path) -> Result<Splits> {
        let all = load_bundled(dir)?.filter_classes(&self.classes);
        if self.train + self.val >= all.len() {
            return Err(Error::invalid(format!(
                "preset {} asks for {} train + {} val of {} samples",
                self.name,
                self.train,
                self.val,
                all.len()
            )));
        }
        let (train, rest) = all.split_at(self.train);
        let (val, rest) = rest.split_at(self.val);
        let test = match self.test {
            Some(n) => rest.take(n),
            None => rest,
        };
        Ok(Splits { train, val, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_and_relabel() {
        let x = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let d = Dataset::new(x, vec![3, 7, 3, 1], 10).unwrap();
        let f = d.filter_classes(&[7, 3]);
        assert_eq!(f.y, vec![1, 0, 1]);
        assert_eq!(f.x.data(), &[0.0, 1.0, 2.0]);
        assert_eq!(f.classes, 2);
    }

    #[test]
    fn label_range_is_checked() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(Dataset::new(x, vec![0, 2], 2).is_err());
    }

    #[test]
    fn mnist_train_split_is_first_50k_then_last_10k() {
        let n = 60_000;
        let x = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let d = Dataset::new(x, vec![0; n], 10).unwrap();
        let (train, val) = split_mnist_train(d).unwrap();
        assert_eq!(train.data.len(), 50_000);
        assert_eq!(val.data.len(), 10_000);
        assert_eq!(train.data.x.data()[49_999], 49_999.0);
        assert_eq!(val.data.x.data()[0], 50_000.0);
        assert_eq!(val.split, SplitTag::Val10k);
    }

    #[test]
    fn bundled_mini_preset() {
        let s = PresetSpec::mnist_mini().load(&bundled_data_dir()).unwrap();
        assert_eq!(s.train.len(), 1400);
        assert_eq!(s.val.len(), 300);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 2128);
        assert_eq!(s.train.dim(), 784);
        assert!(s.train.y.iter().any(|&l| l == 0) && s.train.y.iter().any(|&l| l == 1));
    }
}
