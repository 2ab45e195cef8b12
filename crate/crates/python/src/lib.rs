use std::path::PathBuf;

use ckn::aggregation::{kmeans_fit, vlad_encode, Codebook};
use ckn::encoder::{Architecture, CknModel};
use ckn::eval::{average_precision, mean_average_precision, ManifestEntry, Role};
use ckn::image::{Image, Patch};
use ckn::input::InputType;
use ckn::map::FeatureMap;
use ckn::oracles;
use ckn::pca::{self, PcaModel};
use ckn::synth::SyntheticBenchSpec;
use ckn::trainer::{approx_kernel, train_layer as fit_layer, LayerParams, LayerSpec, SgdConfig, TrainPairSet};
use ckn::CknError;
use ndarray::{Array1, Array2, ArrayView1};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: CknError) -> PyErr {
    match e {
        CknError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix<T: Copy + Default>(rows: &[Vec<T>]) -> PyResult<Array2<T>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j]))
}

fn to_rows<T: Copy>(m: &Array2<T>) -> Vec<Vec<T>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn input_type(name: &str) -> PyResult<InputType> {
    match name {
        "raw" => Ok(InputType::Raw),
        "white" => Ok(InputType::White { subpatch: 3 }),
        "grad" => Ok(InputType::Grad),
        other => Err(PyValueError::new_err(format!("unknown input type `{other}`"))),
    }
}

/// A layer stack that turns square patches into flat descriptors.
#[pyclass(name = "Model", module = "ckn")]
struct PyModel {
    inner: CknModel,
}

#[pymethods]
impl PyModel {
    /// Reference architecture for `input` with untrained random-feature layers.
    #[staticmethod]
    #[pyo3(signature = (input, alpha=0.5, seed=0))]
    fn random(input: &str, alpha: f64, seed: u64) -> PyResult<Self> {
        let arch = Architecture::reference(input_type(input)?);
        Ok(PyModel {
            inner: CknModel::random(&arch, alpha, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: CknModel::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn input(&self) -> &'static str {
        self.inner.input.name()
    }

    #[getter]
    fn input_side(&self) -> usize {
        self.inner.input_side
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.layers.len()
    }

    /// Descriptor of one patch given as row-major pixels in [0, 1].
    fn encode(&self, pixels: Vec<f64>, channels: usize) -> PyResult<Vec<f64>> {
        let side = self.inner.input_side;
        let image = Image::new(side, side, channels, pixels).map_err(py_err)?;
        let patch = Patch::from_image(image).map_err(py_err)?;
        self.inner.encode_patch(&patch).map_err(py_err)
    }
}

/// One trained layer with its random-feature kernel approximation.
#[pyclass(name = "Layer", module = "ckn")]
struct PyLayer {
    inner: LayerParams,
}

#[pymethods]
impl PyLayer {
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn filters(&self) -> usize {
        self.inner.filters()
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.weights)
    }

    #[getter]
    fn bias(&self) -> Vec<f64> {
        self.inner.bias.to_vec()
    }

    fn approx_kernel(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        approx_kernel(&self.inner, ArrayView1::from(&x), ArrayView1::from(&y)).map_err(py_err)
    }
}

/// Trains `filters` features for the Gaussian kernel of bandwidth `alpha` on
/// the given vectors (normalized internally). Returns the layer and the
/// initial and final mean validation objectives.
#[pyfunction]
#[pyo3(signature = (rows, filters, alpha, iterations=2000, batch_size=100, seed=0))]
fn train_layer(rows: Vec<Vec<f64>>, filters: usize, alpha: f64, iterations: usize, batch_size: usize, seed: u64) -> PyResult<(PyLayer, f64, f64)> {
    let data = matrix(&rows)?;
    let pool = TrainPairSet::from_rows(data.view(), seed).map_err(py_err)?;
    let spec = LayerSpec {
        subpatch: 1,
        subsample: 1,
        filters,
        in_channels: pool.dim(),
    };
    let cfg = SgdConfig {
        iterations,
        batch_size,
        probe_iterations: 100,
        check_period: 100,
        decay_period: (iterations / 4).max(1),
        validation_pairs: pool.len().min(10_000),
        seed,
        ..SgdConfig::default()
    };
    let (inner, report) = fit_layer(&pool, spec, alpha, &cfg).map_err(py_err)?;
    Ok((PyLayer { inner }, report.initial_validation, report.final_validation))
}

#[pyclass(name = "Pca", module = "ckn")]
struct PyPca {
    inner: PcaModel,
}

#[pymethods]
impl PyPca {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPca {
            inner: PcaModel::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn apply(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.apply(ArrayView1::from(&x)).map_err(py_err)?.to_vec())
    }
}

/// PCA with `mode` one of none, semi, full.
#[pyfunction]
#[pyo3(signature = (rows, dim, mode="semi"))]
fn pca_fit(rows: Vec<Vec<f64>>, dim: usize, mode: &str) -> PyResult<PyPca> {
    let mode = mode.parse().map_err(PyValueError::new_err)?;
    let data = matrix(&rows)?;
    Ok(PyPca {
        inner: pca::fit(data.view(), dim, mode).map_err(py_err)?,
    })
}

/// Returns the centroids and the inertia after every assignment step.
#[pyfunction]
#[pyo3(signature = (rows, k, seed=0, iterations=100))]
fn kmeans(rows: Vec<Vec<f32>>, k: usize, seed: u64, iterations: usize) -> PyResult<(Vec<Vec<f32>>, Vec<f64>)> {
    let data = matrix(&rows)?;
    let fit = kmeans_fit(data.view(), k, seed, iterations).map_err(py_err)?;
    Ok((to_rows(&fit.codebook.centroids), fit.inertia))
}

/// Power- and l2-normalized VLAD vector of one descriptor set.
#[pyfunction]
fn vlad(descriptors: Vec<Vec<f32>>, centroids: Vec<Vec<f32>>) -> PyResult<Vec<f64>> {
    let book = Codebook::new(matrix(&centroids)?).map_err(py_err)?;
    let data = if descriptors.is_empty() {
        Array2::zeros((0, book.dim()))
    } else {
        matrix(&descriptors)?
    };
    Ok(vlad_encode(data.view(), &book).map_err(py_err)?.values.to_vec())
}

/// Average precision of a ranked relevance list; None without relevant items.
#[pyfunction(name = "average_precision")]
fn py_average_precision(relevant: Vec<bool>) -> Option<f64> {
    average_precision(&relevant)
}

/// mAP where every row with role "query" or "both" queries the others.
#[pyfunction(name = "mean_average_precision")]
fn py_map(vectors: Vec<Vec<f32>>, labels: Vec<String>, roles: Vec<String>) -> PyResult<f64> {
    if labels.len() != roles.len() {
        return Err(PyValueError::new_err("labels and roles differ in length"));
    }
    let entries = labels
        .into_iter()
        .zip(roles)
        .enumerate()
        .map(|(i, (label, role))| {
            Ok(ManifestEntry {
                path: PathBuf::from(i.to_string()),
                label,
                role: role.parse::<Role>().map_err(PyValueError::new_err)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let data = matrix(&vectors)?;
    Ok(mean_average_precision(data.view(), &entries, "python").map_err(py_err)?.map())
}

/// Exact single-layer match kernel of two position-major maps.
#[pyfunction]
fn exact_match_kernel(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize, channels: usize, subpatch: usize, alpha: f64, beta: f64) -> PyResult<f64> {
    let a = FeatureMap::new(width, height, channels, a).map_err(py_err)?;
    let b = FeatureMap::new(width, height, channels, b).map_err(py_err)?;
    oracles::exact_match_kernel(&a, &b, subpatch, alpha, beta).map_err(py_err)
}

/// Returns `(estimate, exact, standard error)`.
#[pyfunction]
fn mc_gaussian_estimate(x: Vec<f64>, y: Vec<f64>, alpha: f64, samples: usize, seed: u64) -> PyResult<(f64, f64, f64)> {
    let r = oracles::mc_gaussian_estimate(Array1::from(x).view(), Array1::from(y).view(), alpha, samples, seed).map_err(py_err)?;
    Ok((r.approx, r.exact, r.std_error.unwrap_or(f64::NAN)))
}

/// Writes the synthetic benchmark to `out_dir`; returns the patch count.
#[pyfunction]
#[pyo3(signature = (out_dir, bases=50, copies=10, seed=0))]
fn synth(out_dir: PathBuf, bases: usize, copies: usize, seed: u64) -> PyResult<usize> {
    let spec = SyntheticBenchSpec {
        bases,
        copies,
        seed,
        ..SyntheticBenchSpec::default()
    };
    Ok(ckn::pipeline::synth(&spec, &out_dir).map_err(py_err)?.len())
}

#[pymodule]
#[pyo3(name = "ckn")]
fn ckn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyLayer>()?;
    m.add_class::<PyPca>()?;
    m.add_function(wrap_pyfunction!(train_layer, m)?)?;
    m.add_function(wrap_pyfunction!(pca_fit, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(vlad, m)?)?;
    m.add_function(wrap_pyfunction!(py_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(py_map, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(mc_gaussian_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
