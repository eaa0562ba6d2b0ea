//! Python bindings: tensors, the TPS transform, both samplers, synthetic
//! data, metrics, the segmentation networks and the gradient-check suite.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use dtn_core::checkpoint::Checkpoint;
use dtn_core::model::{ModelKind, NetConfig, Network as CoreNetwork};
use dtn_core::nn::{argmax_labels, SgdConfig};
use dtn_core::tps::{build_delta, build_transform, map_grid, regular_fiducials, MappedGrid, Point};
use dtn_core::{DtnError, LabelMap, Tensor as CoreTensor};

fn err(e: DtnError) -> PyErr {
    match e {
        DtnError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn points(v: &[(f64, f64)]) -> Vec<Point> {
    v.iter().map(|&(x, y)| Point::new(x, y)).collect()
}

fn pairs(v: &[Point]) -> Vec<(f64, f64)> {
    v.iter().map(|p| (p.x, p.y)).collect()
}

fn labels(h: usize, w: usize, ids: Vec<usize>) -> PyResult<LabelMap> {
    LabelMap::new(h, w, ids).map_err(err)
}

/// Dense row-major float64 array of rank 1 to 4.
#[pyclass(module = "dtn")]
struct Tensor {
    inner: CoreTensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: CoreTensor::new(&shape, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: CoreTensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn max_abs_diff(&self, other: &Tensor) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Thin-plate-spline transform fitted to `len(f_in)` fiducials on the
/// regular lattice.
#[pyclass(module = "dtn")]
struct Tps {
    inner: dtn_core::tps::TpsTransform,
}

#[pymethods]
impl Tps {
    #[new]
    fn new(f_in: Vec<(f64, f64)>) -> PyResult<Self> {
        let delta = build_delta(&regular_fiducials(f_in.len()).map_err(err)?).map_err(err)?;
        Ok(Self {
            inner: build_transform(&points(&f_in), &delta).map_err(err)?,
        })
    }

    /// Maps a normalized output coordinate to a normalized input coordinate.
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.inner.apply(Point::new(x, y));
        (p.x, p.y)
    }

    /// The `2 x (K + 3)` coefficient matrix.
    fn matrix(&self) -> Tensor {
        Tensor {
            inner: self.inner.t.clone(),
        }
    }

    /// Source pixel coordinates for every pixel of an `h_out x w_out` grid.
    fn map_grid(
        &self,
        h_out: usize,
        w_out: usize,
        h_in: usize,
        w_in: usize,
    ) -> PyResult<Vec<(f64, f64)>> {
        Ok(pairs(
            &map_grid(&self.inner, h_out, w_out, h_in, w_in)
                .map_err(err)?
                .coords,
        ))
    }
}

#[pyfunction]
#[pyo3(name = "regular_fiducials")]
fn py_regular_fiducials(k: usize) -> PyResult<Vec<(f64, f64)>> {
    Ok(pairs(&regular_fiducials(k).map_err(err)?))
}

fn grid(
    coords: Vec<(f64, f64)>,
    h_out: usize,
    w_out: usize,
    h_in: usize,
    w_in: usize,
) -> PyResult<MappedGrid> {
    MappedGrid::new(h_out, w_out, h_in, w_in, points(&coords)).map_err(err)
}

/// Bilinear gather of `u` at pixel `coords`, one per output pixel (row-major).
#[pyfunction]
fn gather(u: &Tensor, coords: Vec<(f64, f64)>, h_out: usize, w_out: usize) -> PyResult<Tensor> {
    let (h, w, _) = u.inner.dims3("gather").map_err(err)?;
    let g = grid(coords, h_out, w_out, h, w)?;
    Ok(Tensor {
        inner: dtn_core::samplers::gather_forward(&u.inner, &g).map_err(err)?,
    })
}

/// Normalized scatter of `v` onto an `h_out x w_out` map. Returns the
/// output, the accumulated weight map and the hole-filled output.
#[pyfunction]
fn scatter(
    v: &Tensor,
    coords: Vec<(f64, f64)>,
    h_out: usize,
    w_out: usize,
) -> PyResult<(Tensor, Tensor, Tensor)> {
    let (h, w, _) = v.inner.dims3("scatter").map_err(err)?;
    let g = grid(coords, h, w, h_out, w_out)?;
    let r = dtn_core::samplers::scatter_forward(&v.inner, &g, h_out, w_out).map_err(err)?;
    let filled = dtn_core::samplers::fill_holes(&r);
    Ok((
        Tensor { inner: r.out },
        Tensor { inner: r.s },
        Tensor { inner: filled },
    ))
}

/// Synthetic sample: `(image, label ids)` with labels flattened row-major.
#[pyfunction]
fn gen_blobs(seed: u64, h: usize, w: usize, n_shapes: usize) -> PyResult<(Tensor, Vec<usize>)> {
    let s = dtn_core::data::gen_blobs(seed, h, w, n_shapes).map_err(err)?;
    Ok((Tensor { inner: s.image }, s.labels.ids().to_vec()))
}

#[pyfunction]
fn pixel_accuracy(pred: Vec<usize>, truth: Vec<usize>, h: usize, w: usize) -> PyResult<f64> {
    dtn_core::metrics::pixel_accuracy(&labels(h, w, pred)?, &labels(h, w, truth)?).map_err(err)
}

#[pyfunction]
fn mean_iou(
    pred: Vec<usize>,
    truth: Vec<usize>,
    h: usize,
    w: usize,
    n_classes: usize,
) -> PyResult<f64> {
    dtn_core::metrics::mean_iou(&labels(h, w, pred)?, &labels(h, w, truth)?, n_classes).map_err(err)
}

/// `(auc, [(fpr, tpr), ...])`.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<(f64, Vec<(f64, f64)>)> {
    let c = dtn_core::metrics::roc_auc(&scores, &truth).map_err(err)?;
    Ok((c.auc, c.points.iter().map(|p| (p.fpr, p.tpr)).collect()))
}

/// `[(name, max_rel_error, passed), ...]` for the full finite-difference suite.
#[pyfunction]
#[pyo3(signature = (seed=0, tol=dtn_core::gradcheck::DEFAULT_TOL))]
fn gradcheck(seed: u64, tol: f64) -> PyResult<Vec<(String, f64, bool)>> {
    Ok(dtn_core::gradcheck::run_suite(seed, tol)
        .map_err(err)?
        .into_iter()
        .map(|r| {
            let ok = r.passed();
            (r.name, r.max_rel_error, ok)
        })
        .collect())
}

/// U-Net (`kind="unet"`) or dense transformer network (`kind="dtn"`) on
/// square single-channel inputs.
#[pyclass(module = "dtn")]
struct Network {
    inner: CoreNetwork,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (kind, size=32, seed=0))]
    fn new(kind: &str, size: usize, seed: u64) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(err)?;
        Ok(Self {
            inner: CoreNetwork::new(NetConfig::desk(kind, size, size), seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path)
                .and_then(|c| c.to_network())
                .map_err(err)?,
        })
    }

    fn save(&mut self, path: &str, steps: usize) -> PyResult<()> {
        Checkpoint::from_network(&mut self.inner, steps)
            .save(path)
            .map_err(err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    fn param_count(&mut self) -> usize {
        self.inner.param_count()
    }

    /// Logits, `H x W x classes`.
    fn forward(&mut self, image: &Tensor) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.forward(&image.inner).map_err(err)?,
        })
    }

    fn predict(&mut self, image: &Tensor) -> PyResult<Vec<usize>> {
        let logits = self.inner.forward(&image.inner).map_err(err)?;
        Ok(argmax_labels(&logits).map_err(err)?.ids().to_vec())
    }

    /// One SGD step; returns the loss before the update.
    fn train_step(&mut self, image: &Tensor, labels_flat: Vec<usize>, lr: f64) -> PyResult<f64> {
        let (h, w, _) = image.inner.dims3("train_step").map_err(err)?;
        let lab = labels(h, w, labels_flat)?;
        let cfg = SgdConfig::new(lr, 0).map_err(err)?;
        self.inner.train_step(&image.inner, &lab, &cfg).map_err(err)
    }

    /// Predicted fiducials for `image` (dtn only, otherwise `None`).
    fn fiducials(&mut self, image: &Tensor) -> PyResult<Option<Vec<(f64, f64)>>> {
        Ok(self
            .inner
            .predict_fiducials(&image.inner)
            .map_err(err)?
            .map(|f| pairs(&f.f_in)))
    }
}

#[pymodule]
fn dtn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Tps>()?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(py_regular_fiducials, m)?)?;
    m.add_function(wrap_pyfunction!(gather, m)?)?;
    m.add_function(wrap_pyfunction!(scatter, m)?)?;
    m.add_function(wrap_pyfunction!(gen_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(mean_iou, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
