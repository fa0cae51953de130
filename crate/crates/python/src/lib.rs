//! Python bindings: feature sets, configs, training, generation, probing,
//! attention maps and the self-check suite.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use symdistill::config::RunConfig;
use symdistill::featstore::{self, FeatureSet};
use symdistill::interpret::{self, Heads};
use symdistill::netcore::ModelParams;
use symdistill::probe::{self, Representation};
use symdistill::seqgen::{generate_batch, Sampling};
use symdistill::synth::{point_clusters, PointClusterSpec};
use symdistill::trainer::{self, TrainOptions};
use symdistill::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "FeatureSet", module = "symdistill_py")]
struct PyFeatureSet {
    inner: FeatureSet,
}

#[pymethods]
impl PyFeatureSet {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        featstore::read_features(path).map(|inner| PyFeatureSet { inner }).map_err(py_err)
    }

    /// Ten-cluster style synthetic set; train and eval sets share classes
    /// when they share `layout_seed`.
    #[staticmethod]
    #[pyo3(signature = (n_samples, n_classes=10, d_t=64, n_views=2, grid=(2, 2), noise=0.5, seed=0, layout_seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        n_samples: usize,
        n_classes: usize,
        d_t: usize,
        n_views: usize,
        grid: (usize, usize),
        noise: f64,
        seed: u64,
        layout_seed: u64,
    ) -> PyResult<Self> {
        point_clusters(&PointClusterSpec {
            n_samples,
            n_classes,
            d_t,
            n_views,
            grid,
            noise,
            seed,
            layout_seed: Some(layout_seed),
            ..Default::default()
        })
        .map(|inner| PyFeatureSet { inner })
        .map_err(py_err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        featstore::write_features(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn n_views(&self) -> usize {
        self.inner.n_views()
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        self.inner.grid()
    }

    #[getter]
    fn d_t(&self) -> usize {
        self.inner.d_t()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels().map(|l| l.ids.clone())
    }

    /// `(global, patches)` of one sample and view; patches is a list of rows.
    fn view(&self, sample: usize, view: usize) -> PyResult<(Vec<f32>, Vec<Vec<f32>>)> {
        let (g, p) = self.inner.view(sample, view).map_err(py_err)?;
        Ok((g.to_vec(), p.chunks(self.inner.d_t()).map(<[f32]>::to_vec).collect()))
    }

    fn fingerprint(&self) -> u64 {
        self.inner.fingerprint()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.grid();
        format!(
            "FeatureSet(n_samples={}, n_views={}, grid={h}x{w}, d_t={})",
            self.inner.n_samples(),
            self.inner.n_views(),
            self.inner.d_t()
        )
    }
}

#[pyclass(name = "RunConfig", module = "symdistill_py")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        RunConfig::parse(text).map(|inner| PyRunConfig { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        RunConfig::from_file(path).map(|inner| PyRunConfig { inner }).map_err(py_err)
    }

    /// Fully resolved `key = value` text.
    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "Model", module = "symdistill_py")]
struct PyModel {
    cfg: RunConfig,
    params: ModelParams<f32>,
}

fn repr_of(name: &str) -> PyResult<Representation> {
    name.parse().map_err(py_err)
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, params) = trainer::load_model(path).map_err(py_err)?;
        Ok(PyModel { cfg, params })
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig { inner: self.cfg.clone() }
    }

    /// Deterministic symbol ids for every sample of one view.
    #[pyo3(signature = (features, view=0))]
    fn generate(&self, features: &PyFeatureSet, view: usize) -> PyResult<Vec<Vec<usize>>> {
        let set = &features.inner;
        let idx: Vec<usize> = (0..set.n_samples()).collect();
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(128) {
            let (_, patches) = set.gather_view(chunk, view).map_err(py_err)?;
            let (seqs, _) = generate_batch(&self.params, &self.cfg.discretize, self.cfg.discretize.tau_end, &patches, chunk.len(), Sampling::Eval, false)
                .map_err(py_err)?;
            out.extend(seqs.into_iter().map(|s| s.ids));
        }
        Ok(out)
    }

    /// Per-position `(token_id, weights)` with weights as grid rows.
    #[pyo3(signature = (features, sample, view=0, head=None))]
    fn attention_maps(&self, features: &PyFeatureSet, sample: usize, view: usize, head: Option<usize>) -> PyResult<Vec<(usize, Vec<Vec<f32>>)>> {
        let heads = head.map_or(Heads::Mean, Heads::Single);
        let maps = interpret::attention_maps(&self.params, &self.cfg.discretize, &features.inner, sample, view, heads).map_err(py_err)?;
        Ok(maps
            .into_iter()
            .map(|m| (m.token_id, m.weights.chunks(m.grid_w).map(<[f32]>::to_vec).collect()))
            .collect())
    }

    /// `(k, top1, top5)` per k.
    #[pyo3(signature = (train, eval, representation="student_pooled", prefix=None, k=vec![20], temp=probe::KNN_TEMP))]
    fn knn(
        &self,
        train: &PyFeatureSet,
        eval: &PyFeatureSet,
        representation: &str,
        prefix: Option<usize>,
        k: Vec<usize>,
        temp: f64,
    ) -> PyResult<Vec<(usize, f64, f64)>> {
        let r = probe::knn_probe(&self.params, &self.cfg.discretize, &train.inner, &eval.inner, repr_of(representation)?, prefix, &k, temp)
            .map_err(py_err)?;
        Ok(r.rows.iter().map(|row| (row.k.unwrap_or(0), row.top1, row.top5)).collect())
    }

    /// `(prefix_n, top1, top5)` for every power-of-two prefix.
    #[pyo3(signature = (train, eval, k=20, temp=probe::KNN_TEMP))]
    fn subsequence(&self, train: &PyFeatureSet, eval: &PyFeatureSet, k: usize, temp: f64) -> PyResult<Vec<(usize, f64, f64)>> {
        let r = probe::subsequence_report(&self.params, &self.cfg.discretize, &train.inner, &eval.inner, k, temp).map_err(py_err)?;
        Ok(r.rows.iter().map(|row| (row.prefix_n.unwrap_or(0), row.top1, row.top5)).collect())
    }
}

/// Trains into `config.out_dir` and returns the last checkpoint path.
#[pyfunction]
#[pyo3(signature = (config, train, eval=None, stop_after_epochs=None))]
fn train(py: Python<'_>, config: &PyRunConfig, train: &PyFeatureSet, eval: Option<&PyFeatureSet>, stop_after_epochs: Option<usize>) -> PyResult<PathBuf> {
    let opts = TrainOptions {
        stop_after_epochs,
        progress: false,
    };
    let (cfg, tr, ev) = (config.inner.clone(), train.inner.clone(), eval.map(|e| e.inner.clone()));
    let out = py.detach(|| trainer::train(&cfg, &tr, ev.as_ref(), &opts)).map_err(py_err)?;
    Ok(out.checkpoint)
}

/// `(name, passed, detail)` for every invariant check.
#[pyfunction]
#[pyo3(signature = (quick=true))]
fn selfcheck(py: Python<'_>, quick: bool) -> Vec<(String, bool, String)> {
    py.detach(|| symdistill::selfcheck::run_all(quick))
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect()
}

#[pymodule]
fn symdistill_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureSet>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    Ok(())
}
