//! Datasets: binary loaders, the synthetic shape generator and the geometric
//! transform protocol.

mod cifar;
mod idx;
mod synth;
mod transform;

pub use cifar::{load_cifar_bin, write_cifar_bin, CifarLabels};
pub use idx::{load_idx, read_idx, write_idx, IdxArray};
pub use synth::gen_synthetic;
pub use transform::{
    apply_transform, make_test_suite_level, make_test_suites, sample_transform, transform_image, Interpolation,
    TestSuiteSpec, TransformParams, TransformSpec,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where training and test images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synth {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        size: usize,
        /// The test set uses `seed + 1`.
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        labels: CifarLabels,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            classes: 4,
            train_per_class: 500,
            test_per_class: 100,
            size: 16,
            seed: 0,
        }
    }
}

impl DataSource {
    /// `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synth {
                classes,
                train_per_class,
                test_per_class,
                size,
                seed,
            } => Ok((
                gen_synthetic(*classes, *train_per_class, *size, *seed)?,
                gen_synthetic(*classes, *test_per_class, *size, seed.wrapping_add(1))?,
            )),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                let classes = train.classes.max(test.classes);
                Ok((train.with_classes(classes)?, test.with_classes(classes)?))
            }
            DataSource::Cifar { train, test, labels } => {
                let load = |paths: &[PathBuf]| -> Result<Dataset> {
                    let mut it = paths.iter();
                    let first = it.next().ok_or_else(|| Error::Config("no CIFAR files given".into()))?;
                    it.try_fold(load_cifar_bin(first, *labels)?, |acc, p| {
                        acc.concat(&load_cifar_bin(p, *labels)?)
                    })
                };
                Ok((load(train)?, load(test)?))
            }
        }
    }
}

/// Images `(samples, channels, row, col)` with values in `[0, 1]` and one
/// label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    name: String,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: impl Into<String>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("images {s:?} for {} labels", labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
            classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, row, col)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.index_axis0(i)
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let row = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(vec![indices.len(), c, h, w], data), labels)
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            name: name.into(),
            classes: self.classes,
        }
    }

    /// Same labels with every image replaced by `f(index, image)`.
    pub fn map_images(&self, name: impl Into<String>, mut f: impl FnMut(usize, &Tensor) -> Tensor) -> Result<Dataset> {
        let images: Vec<Tensor> = (0..self.len()).map(|i| f(i, &self.image(i))).collect();
        Dataset::new(Tensor::stack(&images)?, self.labels.clone(), name, self.classes)
    }

    /// Appends `other`, which must share image shape and class count.
    pub fn concat(mut self, other: &Dataset) -> Result<Dataset> {
        if self.image_shape() != other.image_shape() || self.classes != other.classes {
            return Err(Error::shape(
                "dataset concat",
                format!("{:?} vs {:?}", self.image_shape(), other.image_shape()),
            ));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.len();
        let mut data = self.images.into_data();
        data.extend_from_slice(other.images.data());
        self.images = Tensor::from_parts(shape, data);
        self.labels.extend_from_slice(&other.labels);
        Ok(self)
    }

    /// Same data with a larger class count.
    pub fn with_classes(self, classes: usize) -> Result<Dataset> {
        Dataset::new(self.images, self.labels, self.name, classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}
