//! Python bindings: architectures, models, the SeedPack codec, the cost
//! model, metrics and gradient checks.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

use sinefm::codec;
use sinefm::cost::{self, CostTable};
use sinefm::gradcheck::layer_grad_check;
use sinefm::layer::channel_plan as plan;
use sinefm::network::{self, ConvertOptions};
use sinefm::train::ConfusionMatrix;
use sinefm::transforms::{eval_transform as eval, sample_hyperparams, ChannelParams};
use sinefm::{ArchDescriptor, HyperBounds, Shape, Tensor, TransformFamily};

create_exception!(sinefm_py, SineFMError, PyException);
create_exception!(sinefm_py, CorruptionError, SineFMError);

fn to_py(err: sinefm::Error) -> PyErr {
    match err {
        sinefm::Error::Corruption { .. } => CorruptionError::new_err(err.to_string()),
        sinefm::Error::Argument(_) | sinefm::Error::Dimension(_) => PyValueError::new_err(err.to_string()),
        _ => SineFMError::new_err(err.to_string()),
    }
}

fn family(name: &str) -> PyResult<TransformFamily> {
    name.parse().map_err(to_py)
}

/// Network architecture descriptor.
#[pyclass(name = "Architecture", module = "sinefm_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyArchitecture {
    inner: ArchDescriptor,
}

#[pymethods]
impl PyArchitecture {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ArchDescriptor::from_text(text).map_err(to_py)?,
        })
    }

    /// One of `tiny-vgg`, `tiny-resnet`, `tiny-unet`, `resnet50`.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        network::builtin(name)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown architecture '{name}'")))
    }

    #[pyo3(signature = (c_s = 16, fanout = 5, family = "sinusoidal", seed = 0))]
    fn to_sinefm(&self, c_s: usize, fanout: usize, family: &str, seed: u64) -> PyResult<Self> {
        let opts = ConvertOptions::new(c_s, fanout, self::family(family)?, seed);
        let inner = network::convert_with(&self.inner, &opts);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_standard(&self) -> Self {
        Self {
            inner: network::to_standard(&self.inner),
        }
    }

    #[getter]
    fn learnable_params(&self) -> usize {
        self.inner.learnable_params()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        self.inner.input
    }

    /// Per-layer parameter and FLOP counts as a dict.
    #[pyo3(signature = (hw = None))]
    fn cost<'py>(&self, py: Python<'py>, hw: Option<(usize, usize)>) -> PyResult<Bound<'py, PyDict>> {
        let report = cost::model_cost(&self.inner, hw, &CostTable::V1).map_err(to_py)?;
        let layers = PyList::empty(py);
        for l in &report.layers {
            let d = PyDict::new(py);
            d.set_item("index", l.index)?;
            d.set_item("kind", l.kind)?;
            d.set_item("params", l.params)?;
            d.set_item("flops", l.flops)?;
            d.set_item("output", l.output)?;
            layers.append(d)?;
        }
        let out = PyDict::new(py);
        out.set_item("table_version", report.table_version)?;
        out.set_item("total_params", report.total_params)?;
        out.set_item("total_flops", report.total_flops)?;
        out.set_item("layers", layers)?;
        Ok(out)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __str__(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!(
            "Architecture(input={:?}, layers={}, params={})",
            self.inner.input,
            self.inner.layers.len(),
            self.inner.learnable_params()
        )
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

type Dims = (usize, usize, usize, usize);

/// An instantiated f32 model.
#[pyclass(name = "Model", module = "sinefm_py", frozen)]
struct PyModel {
    inner: network::Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (architecture, seed = 0))]
    fn new(architecture: &PyArchitecture, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: network::Model::build(&architecture.inner, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn unpack(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: codec::unpack(data).map_err(to_py)?,
        })
    }

    fn pack<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &codec::pack(&self.inner))
    }

    #[getter]
    fn architecture(&self) -> PyArchitecture {
        PyArchitecture {
            inner: self.inner.descriptor().clone(),
        }
    }

    #[getter]
    fn learnable_params(&self) -> usize {
        self.inner.learnable_count()
    }

    /// Runs inference on a flat NCHW buffer; returns `(values, shape)`.
    fn predict(
        &self,
        py: Python<'_>,
        values: Vec<f32>,
        shape: Dims,
    ) -> PyResult<(Vec<f32>, Dims)> {
        let s = Shape::new(shape.0, shape.1, shape.2, shape.3).map_err(to_py)?;
        let x = Tensor::from_vec(s, values).map_err(to_py)?;
        let y = py.detach(|| self.inner.predict(&x)).map_err(to_py)?;
        let [n, c, h, w] = y.shape().0;
        Ok((y.into_data(), (n, c, h, w)))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(layers={}, params={})",
            self.inner.layers().len(),
            self.inner.learnable_count()
        )
    }
}

/// `{"c_g", "combine_in", "combine_out"}` for a layer.
#[pyfunction]
fn channel_plan<'py>(py: Python<'py>, c_out: usize, c_s: usize, fanout: usize) -> PyResult<Bound<'py, PyDict>> {
    let p = plan(c_out, c_s, fanout).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("c_g", p.c_g)?;
    d.set_item("combine_in", p.combine_in)?;
    d.set_item("combine_out", p.combine_out)?;
    Ok(d)
}

/// Hyperparameters of `count` channels as a list of dicts.
#[pyfunction]
fn sample_hparams<'py>(py: Python<'py>, seed: u64, family: &str, count: usize) -> PyResult<Bound<'py, PyList>> {
    let spec = sample_hyperparams(seed, self::family(family)?, count, &HyperBounds::default()).map_err(to_py)?;
    let out = PyList::empty(py);
    for p in spec.params() {
        let d = PyDict::new(py);
        match *p {
            ChannelParams::Monomial { beta } => d.set_item("beta", beta)?,
            ChannelParams::Polynomial { degree } => d.set_item("degree", degree)?,
            ChannelParams::Rbf { epsilon } => d.set_item("epsilon", epsilon)?,
            ChannelParams::Sinusoidal { omega, psi } => {
                d.set_item("omega", omega)?;
                d.set_item("psi", psi)?;
            }
        }
        out.append(d)?;
    }
    Ok(out)
}

/// Applies channel `channel` of the transform sampled from `seed`.
#[pyfunction]
#[pyo3(signature = (family, seed, channel, xs, count = None))]
fn eval_transform(family: &str, seed: u64, channel: usize, xs: Vec<f64>, count: Option<usize>) -> PyResult<Vec<f64>> {
    let spec = sample_hyperparams(seed, self::family(family)?, count.unwrap_or(channel + 1), &HyperBounds::default())
        .map_err(to_py)?;
    let x = Tensor::vector(&xs).map_err(to_py)?;
    Ok(eval(&spec, channel, &x).map_err(to_py)?.into_data())
}

#[pyfunction]
fn conv_flops(c_in: usize, kernel: usize, h_out: usize, w_out: usize, c_out: usize) -> u64 {
    cost::conv_flops(c_in, kernel, h_out, w_out, c_out)
}

/// Metrics of a confusion matrix given as rows indexed by true class.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, rows: Vec<Vec<u64>>) -> PyResult<Bound<'py, PyDict>> {
    let m = ConfusionMatrix::from_rows(&rows).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("miou", m.mean_iou())?;
    d.set_item("mean_f1", m.mean_f1())?;
    d.set_item("accuracy", m.overall_accuracy())?;
    d.set_item("iou", (0..m.classes()).map(|c| m.iou(c)).collect::<Vec<_>>())?;
    d.set_item("f1", (0..m.classes()).map(|c| m.f1(c)).collect::<Vec<_>>())?;
    Ok(d)
}

/// Layer gradient check; returns `(max_rel_error, checked, skipped)`.
#[pyfunction]
#[pyo3(signature = (family, seed = 0, eps = 1e-5))]
fn gradcheck(py: Python<'_>, family: &str, seed: u64, eps: f64) -> PyResult<(f64, usize, usize)> {
    let f = self::family(family)?;
    let r = py.detach(|| layer_grad_check(f, seed, eps)).map_err(to_py)?;
    Ok((r.max_rel_error, r.checked, r.skipped))
}

#[pymodule]
fn sinefm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyArchitecture>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(channel_plan, m)?)?;
    m.add_function(wrap_pyfunction!(sample_hparams, m)?)?;
    m.add_function(wrap_pyfunction!(eval_transform, m)?)?;
    m.add_function(wrap_pyfunction!(conv_flops, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("SineFMError", m.py().get_type::<SineFMError>())?;
    m.add("CorruptionError", m.py().get_type::<CorruptionError>())?;
    m.add("FAMILIES", TransformFamily::ALL.iter().map(|f| f.name()).collect::<Vec<_>>())?;
    Ok(())
}
