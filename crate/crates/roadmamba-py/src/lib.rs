//! Python bindings. Tensors cross the boundary as flat f64 lists plus a
//! shape, which keeps the interface free of numpy version coupling.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roadmamba::archive::{load_checkpoint, save_checkpoint, TensorArchive};
use roadmamba::backbone::{count_params, estimate_flops, Backbone, BackboneConfig};
use roadmamba::data::{render, SyntheticSpec};
use roadmamba::scan2d::ScanMode;
use roadmamba::ssm::{discretize_zoh, scan_parallel, scan_sequential, SsmContinuous};
use roadmamba::tensor::{set_precision, Precision, Tensor};
use roadmamba::train::{argmax_rows, compute_metrics};

fn to_tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(PyValueError::new_err(format!(
            "shape {shape:?} wants {n} values, got {}",
            data.len()
        )));
    }
    Ok(Tensor::from_vec(&shape, data))
}

/// Diagonal SSM discretized with zero-order hold, scanned both ways.
/// Returns (y_sequential, y_parallel) so callers can check agreement.
#[pyfunction]
fn ssm_scan(
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    deltas: Vec<f64>,
    x: Vec<f64>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let cont = SsmContinuous { a, b, c };
    let disc = discretize_zoh(&cont, &deltas).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let h0 = vec![0.0; disc.state_size];
    let seq = scan_sequential(&disc, &x, &h0).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let par = scan_parallel(&disc, &x, &h0).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((seq, par))
}

/// Render one synthetic sample; returns a flat [side*side*3] pixel list.
#[pyfunction]
#[pyo3(signature = (class, index=0, seed=0, side=64))]
fn synthetic_image(class: usize, index: usize, seed: u64, side: usize) -> PyResult<Vec<f64>> {
    if class >= 27 {
        return Err(PyValueError::new_err("class must be < 27"));
    }
    let spec = SyntheticSpec { side, noise_sigma: 0.05, seed };
    Ok(render(&spec, index, class))
}

/// Macro-averaged metrics as a dict with keys top1, meanP, meanR, meanF1.
#[pyfunction]
fn metrics(
    py: Python<'_>,
    preds: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
) -> PyResult<PyObject> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(PyValueError::new_err("preds and labels must match and be non-empty"));
    }
    let m = compute_metrics(&preds, &labels, num_classes);
    let d = pyo3::types::PyDict::new_bound(py);
    d.set_item("top1", m.top1)?;
    d.set_item("meanP", m.mean_precision)?;
    d.set_item("meanR", m.mean_recall)?;
    d.set_item("meanF1", m.mean_f1)?;
    Ok(d.into())
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    cfg: BackboneConfig,
    net: Backbone,
}

#[pymethods]
impl PyModel {
    /// Build a fresh network. `variant` is one of T, S, B, micro.
    #[new]
    #[pyo3(signature = (variant="micro", seed=0))]
    fn new(variant: &str, seed: u64) -> PyResult<Self> {
        let cfg = BackboneConfig::by_name(variant).map_err(PyValueError::new_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Backbone::new(&cfg, &mut rng);
        Ok(PyModel { cfg, net })
    }

    #[getter]
    fn image_side(&self) -> usize {
        self.cfg.image_side
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn num_params(&self, include_aux: bool) -> usize {
        count_params(&self.cfg, include_aux)
    }

    fn estimated_gflops(&self) -> f64 {
        estimate_flops(&self.cfg, self.cfg.image_side).0 / 1e9
    }

    /// Eval-mode forward. `images` is flat [b*side*side*3] in [0,1].
    /// Returns per-sample logit rows.
    fn forward(&self, images: Vec<f64>, batch: usize) -> PyResult<Vec<Vec<f64>>> {
        let s = self.cfg.image_side;
        let x = to_tensor(vec![batch, s, s, 3], images)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.net.forward(&x, ScanMode::Eval, &mut rng);
        let k = self.cfg.num_classes;
        let v = out.logits.to_vec();
        Ok((0..batch).map(|i| v[i * k..(i + 1) * k].to_vec()).collect())
    }

    fn predict(&self, images: Vec<f64>, batch: usize) -> PyResult<Vec<usize>> {
        let s = self.cfg.image_side;
        let x = to_tensor(vec![batch, s, s, 3], images)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.net.forward(&x, ScanMode::Eval, &mut rng);
        Ok(argmax_rows(&out.logits))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.net, std::path::Path::new(path))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn load(&self, path: &str) -> PyResult<()> {
        let ar = TensorArchive::load(std::path::Path::new(path))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        load_checkpoint(&self.net, &ar).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Parameter tensor names in checkpoint order.
    fn param_names(&self) -> Vec<String> {
        self.net.named_params().into_iter().map(|(n, _)| n).collect()
    }
}

/// Switch the compute precision for subsequent operations: "f32" or "f64".
#[pyfunction]
fn set_compute_precision(mode: &str) -> PyResult<()> {
    match mode {
        "f32" => set_precision(Precision::F32),
        "f64" => set_precision(Precision::F64),
        _ => return Err(PyValueError::new_err("expected f32 or f64")),
    }
    Ok(())
}

#[pymodule]
fn roadmamba_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(ssm_scan, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_image, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(set_compute_precision, m)?)?;
    Ok(())
}
