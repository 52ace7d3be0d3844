//! Python bindings. Tensors cross the boundary as a flat list plus a shape.

use std::path::PathBuf;

use icrcaps::capsule::{self, ICRConfig, PredictionField};
use icrcaps::data::{self, CifarLabels};
use icrcaps::equivariant::{self, GConvParams};
use icrcaps::group::{self, Boundary, GroupFeatureMap};
use icrcaps::network::{self, AdamW, ModelConfig, TrainConfig};
use icrcaps::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn boundary(circular: bool) -> Boundary {
    if circular {
        Boundary::Circular
    } else {
        Boundary::ZeroPad
    }
}

/// Dense row-major f64 array.
#[pyclass(module = "icrcaps_py", from_py_object)]
#[derive(Clone)]
struct Tensor {
    inner: icrcaps::tensor::Tensor,
}

impl From<icrcaps::tensor::Tensor> for Tensor {
    fn from(inner: icrcaps::tensor::Tensor) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(icrcaps::tensor::Tensor::new(shape, data).map_err(err)?.into())
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        icrcaps::tensor::Tensor::zeros(&shape).into()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, index: Vec<usize>) -> f64 {
        self.inner.get(&index)
    }

    fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __eq__(&self, other: &Tensor) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Rotation by `r` quarter turns followed by translation `t`.
#[pyclass(module = "icrcaps_py", eq, hash, frozen, from_py_object)]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct P4Element {
    inner: group::P4Element,
}

#[pymethods]
impl P4Element {
    #[new]
    #[pyo3(signature = (r=0, t=(0, 0)))]
    fn new(r: u8, t: (i64, i64)) -> PyResult<Self> {
        if r > 3 {
            return Err(PyValueError::new_err(format!("rotation {r} not in 0..4")));
        }
        Ok(Self {
            inner: group::P4Element::new(r, t),
        })
    }

    #[getter]
    fn r(&self) -> u8 {
        self.inner.r
    }

    #[getter]
    fn t(&self) -> (i64, i64) {
        self.inner.t
    }

    fn compose(&self, other: &P4Element) -> Self {
        Self {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Self {
        Self {
            inner: self.inner.inverse(),
        }
    }

    fn apply(&self, x: (i64, i64)) -> (i64, i64) {
        self.inner.apply(x)
    }

    fn __repr__(&self) -> String {
        format!("P4Element(r={}, t={:?})", self.inner.r, self.inner.t)
    }
}

/// Acts on a `(C, 4, H, W)` group feature map.
#[pyfunction]
#[pyo3(signature = (g, f, circular=false))]
fn act(g: &P4Element, f: &Tensor, circular: bool) -> PyResult<Tensor> {
    let map = GroupFeatureMap::new(f.inner.clone(), boundary(circular)).map_err(err)?;
    Ok(group::act(&g.inner, &map).map_err(err)?.into_values().into())
}

/// Acts on a `(C, H, W)` planar image.
#[pyfunction]
#[pyo3(signature = (g, f, circular=false))]
fn act_planar(g: &P4Element, f: &Tensor, circular: bool) -> PyResult<Tensor> {
    Ok(group::act_planar(&g.inner, &f.inner, boundary(circular))
        .map_err(err)?
        .into())
}

#[pyfunction]
fn rotate_filter(filter: &Tensor, r: u8) -> PyResult<Tensor> {
    Ok(group::rotate_filter(&filter.inner, r).map_err(err)?.into())
}

fn gconv(weights: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> GConvParams {
    let cout = weights.inner.shape().first().copied().unwrap_or(0);
    GConvParams {
        weights: weights.inner.clone(),
        bias: bias.map_or_else(|| icrcaps::tensor::Tensor::zeros(&[cout]), |b| b.inner.clone()),
        stride,
        padding,
    }
}

/// `(C, H, W)` image against `(C', C, k, k)` weights, giving `(C', 4, H', W')`.
#[pyfunction]
#[pyo3(signature = (f, weights, bias=None, stride=1, padding=0, circular=false))]
fn lift_correlate(
    f: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    circular: bool,
) -> PyResult<Tensor> {
    let p = gconv(weights, bias, stride, padding);
    Ok(equivariant::lift_correlate(&f.inner, &p, boundary(circular))
        .map_err(err)?
        .into_values()
        .into())
}

/// `(C, 4, H, W)` map against `(C', C, 4, k, k)` weights.
#[pyfunction]
#[pyo3(signature = (f, weights, bias=None, stride=1, padding=0, circular=false))]
fn group_correlate(
    f: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    circular: bool,
) -> PyResult<Tensor> {
    let map = GroupFeatureMap::new(f.inner.clone(), boundary(circular)).map_err(err)?;
    let p = gconv(weights, bias, stride, padding);
    Ok(equivariant::group_correlate(&map, &p)
        .map_err(err)?
        .into_values()
        .into())
}

#[pyfunction]
fn squash(v: Vec<f64>) -> Vec<f64> {
    capsule::squash(&v)
}

fn icr_config(k: usize, num_iter: usize, epsilon: f64) -> ICRConfig {
    ICRConfig {
        k,
        num_iter,
        epsilon,
        use_pred_layernorm: false,
    }
}

/// Routing state of a `(i, j, dim, 4, H, W)` prediction field as a dict with
/// tensors `a`, `dcen`, `c` and the neighbour ids `kn` shaped `kn_shape`.
#[pyfunction]
#[pyo3(signature = (pred, k, num_iter, epsilon=capsule::COSINE_EPS))]
fn icr_weights<'py>(
    py: Python<'py>,
    pred: &Tensor,
    k: usize,
    num_iter: usize,
    epsilon: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let field = PredictionField::new(pred.inner.clone()).map_err(err)?;
    let s = capsule::icr_weights(&field, &icr_config(k, num_iter, epsilon)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("a", Tensor::from(s.a))?;
    d.set_item("dcen", Tensor::from(s.dcen))?;
    d.set_item("c", Tensor::from(s.c))?;
    d.set_item("kn", s.kn)?;
    d.set_item("kn_shape", s.kn_shape)?;
    Ok(d)
}

/// Routes predictions to `(j, dim, 4, H, W)` squashed capsules.
#[pyfunction]
#[pyo3(signature = (pred, k, num_iter, epsilon=capsule::COSINE_EPS))]
fn route(pred: &Tensor, k: usize, num_iter: usize, epsilon: f64) -> PyResult<Tensor> {
    let field = PredictionField::new(pred.inner.clone()).map_err(err)?;
    let s = capsule::icr_weights(&field, &icr_config(k, num_iter, epsilon)).map_err(err)?;
    Ok(capsule::route(&field, &s).map_err(err)?.values().clone().into())
}

fn dataset(d: data::Dataset) -> (Tensor, Vec<usize>) {
    let labels = d.labels().to_vec();
    (d.images().clone().into(), labels)
}

/// Procedural shapes: `(images (N, 1, size, size), labels)`.
#[pyfunction]
#[pyo3(signature = (classes=4, per_class=100, size=16, seed=0))]
fn gen_synthetic(classes: usize, per_class: usize, size: usize, seed: u64) -> PyResult<(Tensor, Vec<usize>)> {
    Ok(dataset(
        data::gen_synthetic(classes, per_class, size, seed).map_err(err)?,
    ))
}

#[pyfunction]
fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<(Tensor, Vec<usize>)> {
    Ok(dataset(data::load_idx(&images, &labels).map_err(err)?))
}

/// `labels` is one of `cifar10`, `coarse`, `fine`.
#[pyfunction]
#[pyo3(signature = (path, labels="cifar10"))]
fn load_cifar(path: PathBuf, labels: &str) -> PyResult<(Tensor, Vec<usize>)> {
    let which = match labels {
        "cifar10" => CifarLabels::Cifar10,
        "coarse" => CifarLabels::Coarse,
        "fine" => CifarLabels::Fine,
        other => return Err(PyValueError::new_err(format!("unknown label set {other:?}"))),
    };
    Ok(dataset(data::load_cifar_bin(&path, which).map_err(err)?))
}

/// A capsule network with its own AdamW state.
#[pyclass(module = "icrcaps_py")]
struct Model {
    inner: network::Model,
    opt: Option<AdamW>,
    train: TrainConfig,
}

impl Model {
    fn wrap(inner: network::Model) -> Self {
        Self {
            inner,
            opt: None,
            train: TrainConfig::default(),
        }
    }
}

#[pymethods]
impl Model {
    /// `preset` is `desk`, `light` or `full`; `config` (JSON) overrides it.
    #[staticmethod]
    #[pyo3(signature = (preset="desk", classes=4, seed=0, config=None))]
    fn build(preset: &str, classes: usize, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg = match (config, preset) {
            (Some(json), _) => {
                serde_json::from_str::<ModelConfig>(json).map_err(|e| PyValueError::new_err(e.to_string()))?
            }
            (None, "desk") => ModelConfig::desk(classes),
            (None, "light") => ModelConfig::light(classes),
            (None, "full") => ModelConfig::full(1, classes),
            (None, other) => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(Self::wrap(network::Model::build(cfg, seed).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self::wrap(network::load_checkpoint(&path).map_err(err)?.model))
    }

    #[pyo3(signature = (path, epoch=0))]
    fn save(&self, path: PathBuf, epoch: usize) -> PyResult<()> {
        network::save_checkpoint(&path, &self.inner, epoch).map_err(err)
    }

    /// Copy with unit strides, circular boundary and no prediction norm.
    fn audit_mode(&self) -> PyResult<Self> {
        let cfg = self.inner.config().audit_mode();
        Ok(Self::wrap(self.inner.with_config(cfg).map_err(err)?))
    }

    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("config serialises")
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// `(B, C, H, W)` images to `(B, classes)` logits.
    fn forward(&self, x: &Tensor) -> PyResult<Tensor> {
        Ok(self.inner.forward(&x.inner).map_err(err)?.into())
    }

    fn loss(&self, x: &Tensor, labels: Vec<usize>) -> PyResult<f64> {
        self.inner.loss(&x.inner, &labels).map_err(err)
    }

    /// One AdamW step; returns the batch loss before the update.
    fn train_step(&mut self, x: &Tensor, labels: Vec<usize>, lr: f64) -> PyResult<f64> {
        let opt = self
            .opt
            .get_or_insert_with(|| AdamW::new(self.inner.params(), &self.train));
        let out = self.inner.train_step(&x.inner, &labels, opt, lr).map_err(err)?;
        Ok(out.loss)
    }

    #[pyo3(signature = (x, labels, batch=64))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        x: &Tensor,
        labels: Vec<usize>,
        batch: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let e = self.inner.evaluate(&x.inner, &labels, batch).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("accuracy", e.accuracy)?;
        d.set_item("per_class", e.per_class)?;
        d.set_item("mean_loss", e.mean_loss)?;
        d.set_item("samples", e.samples)?;
        Ok(d)
    }
}

#[pymodule]
fn icrcaps_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<P4Element>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(act, m)?)?;
    m.add_function(wrap_pyfunction!(act_planar, m)?)?;
    m.add_function(wrap_pyfunction!(rotate_filter, m)?)?;
    m.add_function(wrap_pyfunction!(lift_correlate, m)?)?;
    m.add_function(wrap_pyfunction!(group_correlate, m)?)?;
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(icr_weights, m)?)?;
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(load_cifar, m)?)?;
    Ok(())
}
