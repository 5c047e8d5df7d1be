//! Python bindings: synthetic scenes, geometry kernels, models, training,
//! prediction and metrics.

use std::path::PathBuf;

use dapnet::cli::{predict_points, train_command, RunConfig};
use dapnet::engine::Checkpoint;
use dapnet::eval::{metrics, ConfusionMatrix};
use dapnet::geom::{self, PointSet};
use dapnet::model::{Dapnet, Strategy};
use dapnet::pipeline::{read_pts, write_pts, PointRecord, PtsFile};
use dapnet::synth::{self, SceneClass, SceneSpec};
use dapnet::train::Schedule;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(dapnet, DapnetError, PyException);

fn py_err(e: dapnet::Error) -> PyErr {
    DapnetError::new_err(e.to_string())
}

type Row = (f64, f64, f64, f64, u32, u32, Option<usize>);

fn to_records(points: Vec<Row>) -> Vec<PointRecord> {
    points
        .into_iter()
        .map(|(x, y, z, intensity, return_number, num_returns, label)| PointRecord {
            x,
            y,
            z,
            intensity,
            return_number,
            num_returns,
            label,
        })
        .collect()
}

fn to_rows(records: &[PointRecord]) -> Vec<Row> {
    records
        .iter()
        .map(|r| (r.x, r.y, r.z, r.intensity, r.return_number, r.num_returns, r.label))
        .collect()
}

fn point_set(coords: Vec<[f64; 3]>) -> PyResult<PointSet> {
    PointSet::new(coords).map_err(py_err)
}

/// Synthetic labelled scene as `(points, class_names)`; each point is
/// `(x, y, z, intensity, return_number, num_returns, label)`.
#[pyfunction]
#[pyo3(signature = (extent=32.0, density=3.0, classes=None, noise=0.05, seed=1))]
fn generate_scene(
    extent: f64,
    density: f64,
    classes: Option<Vec<String>>,
    noise: f64,
    seed: u64,
) -> PyResult<(Vec<Row>, Vec<String>)> {
    let names = classes.unwrap_or_else(|| ["ground", "roof", "tree", "car"].map(String::from).to_vec());
    let classes = names
        .iter()
        .map(|n| SceneClass::parse(n).ok_or_else(|| DapnetError::new_err(format!("unknown class `{n}`"))))
        .collect::<PyResult<Vec<_>>>()?;
    let scene = synth::generate(&SceneSpec {
        extent,
        classes,
        density,
        noise,
        seed,
    })
    .map_err(py_err)?;
    Ok((to_rows(&scene.records), scene.class_names))
}

/// Reads a `.pts` file as `(points, class_names)`.
#[pyfunction]
fn load_pts(path: PathBuf) -> PyResult<(Vec<Row>, Option<Vec<String>>)> {
    let file = read_pts(&path).map_err(py_err)?;
    Ok((to_rows(&file.records), file.class_names))
}

#[pyfunction]
#[pyo3(signature = (path, points, class_names=None))]
fn save_pts(path: PathBuf, points: Vec<Row>, class_names: Option<Vec<String>>) -> PyResult<()> {
    write_pts(&path, &to_records(points), class_names.as_deref(), &[]).map_err(py_err)
}

/// Farthest point sampling from the lexicographically smallest point.
#[pyfunction]
fn fps(coords: Vec<[f64; 3]>, k: usize) -> PyResult<Vec<usize>> {
    let set = point_set(coords)?;
    geom::fps(&set, k, geom::canonical_seed(&set)).map_err(py_err)
}

/// Member indices of each centroid's ball, `len(centroids)` lists of `group_size`.
#[pyfunction]
fn ball_query(
    coords: Vec<[f64; 3]>,
    centroids: Vec<usize>,
    radius: f64,
    group_size: usize,
) -> PyResult<Vec<Vec<usize>>> {
    let set = point_set(coords)?;
    let g = geom::ball_query(&set, &centroids, radius, group_size).map_err(py_err)?;
    Ok((0..g.groups()).map(|i| g.members(i).to_vec()).collect())
}

/// Inverse-distance interpolation of per-source feature rows onto queries.
#[pyfunction]
#[pyo3(signature = (sources, features, queries, k=3))]
fn idw(sources: Vec<[f64; 3]>, features: Vec<Vec<f64>>, queries: Vec<[f64; 3]>, k: usize) -> PyResult<Vec<Vec<f64>>> {
    let width = features.first().map_or(0, Vec::len);
    if features.iter().any(|r| r.len() != width) {
        return Err(DapnetError::new_err("feature rows differ in width"));
    }
    let flat: Vec<f64> = features.concat();
    let out = geom::idw_interpolate(&point_set(sources)?, &flat, width, &point_set(queries)?, k).map_err(py_err)?;
    Ok(out.chunks(width.max(1)).map(<[f64]>::to_vec).collect())
}

/// Learning rate at iteration `i` of `total`.
#[pyfunction]
fn poly_lr(lr_initial: f64, lr_final: f64, total: usize, i: usize) -> PyResult<f64> {
    Schedule::new(lr_initial, lr_final, total)
        .and_then(|s| s.poly_lr(i))
        .map_err(py_err)
}

/// Precision, recall and F1 per class plus overall accuracy and average F1.
#[pyfunction]
#[pyo3(signature = (reference, predicted, class_names=None))]
fn evaluate<'py>(
    py: Python<'py>,
    reference: Vec<usize>,
    predicted: Vec<usize>,
    class_names: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let classes = reference.iter().chain(&predicted).max().map_or(1, |m| m + 1);
    let names = class_names.unwrap_or_else(|| (0..classes).map(|i| i.to_string()).collect());
    let mut cm = ConfusionMatrix::new(names).map_err(py_err)?;
    cm.accumulate(&reference, &predicted).map_err(py_err)?;
    let m = metrics(&cm).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("overall_accuracy", m.overall_accuracy)?;
    out.set_item("avg_f1", m.avg_f1)?;
    let per_class = PyDict::new(py);
    for s in &m.classes {
        let d = PyDict::new(py);
        d.set_item("precision", s.precision)?;
        d.set_item("recall", s.recall)?;
        d.set_item("f1", s.f1)?;
        d.set_item("support", s.support)?;
        per_class.set_item(&s.name, d)?;
    }
    out.set_item("classes", per_class)?;
    out.set_item("confusion", cm.counts().to_vec())?;
    Ok(out)
}

fn run_config(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut text = String::new();
    if let Some(kwargs) = kwargs {
        for (k, v) in kwargs.iter() {
            let key: String = k.extract()?;
            let value = if let Ok(s) = v.extract::<String>() {
                format!("{s:?}")
            } else if v.is_instance_of::<pyo3::types::PyBool>() {
                v.extract::<bool>()?.to_string()
            } else if let Ok(i) = v.extract::<i64>() {
                i.to_string()
            } else {
                format!("{:?}", v.extract::<f64>()?)
            };
            text += &format!("{key} = {value}\n");
        }
    }
    toml::from_str::<RunConfig>(&text).map_err(|e| DapnetError::new_err(format!("run settings: {e}")))
}

/// A DAPnet model. Settings such as `strategy`, `scale`, `softmax_mode` and
/// `seed` use the same names as the command-line config file.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Dapnet,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (class_names, **kwargs))]
    fn new(class_names: Vec<String>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let config = run_config(kwargs)?;
        let model_config = config.model_config(class_names).map_err(py_err)?;
        Ok(Self {
            inner: Dapnet::new(model_config, config.seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self {
            inner: Dapnet::from_checkpoint(&ckpt).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().and_then(|c| c.save(&path)).map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.config().class_names.clone()
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.config().strategy().name()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().numel()
    }

    /// Predicted label of every point, in input order. Keyword settings
    /// (`block_size`, `sample_points`, `seed`) control tiling and sampling.
    #[pyo3(signature = (points, **kwargs))]
    fn predict(&self, points: Vec<Row>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<usize>> {
        let config = run_config(kwargs)?;
        let file = PtsFile {
            records: to_records(points),
            class_names: None,
            extra: Vec::new(),
        };
        predict_points(&self.inner, &file, &config).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(strategy={}, classes={}, levels={}, parameters={})",
            c.strategy().name(),
            c.num_classes,
            c.levels(),
            self.inner.params().numel()
        )
    }
}

/// Trains on a labelled `.pts` file, writing logs and checkpoints to `run_dir`.
/// Returns a short summary.
#[pyfunction]
#[pyo3(signature = (data, run_dir, **kwargs))]
fn train(data: PathBuf, run_dir: PathBuf, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let config = run_config(kwargs)?;
    train_command(&data, &config, &run_dir).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "dapnet")]
fn dapnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DapnetError", m.py().get_type::<DapnetError>())?;
    m.add("STRATEGIES", Strategy::ALL.map(|s| s.name()).to_vec())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(load_pts, m)?)?;
    m.add_function(wrap_pyfunction!(save_pts, m)?)?;
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    m.add_function(wrap_pyfunction!(ball_query, m)?)?;
    m.add_function(wrap_pyfunction!(idw, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![(1.0, 2.0, 3.0, 0.5, 1, 2, Some(3)), (0.0, 0.0, 0.0, 0.0, 1, 1, None)];
        assert_eq!(to_rows(&to_records(rows.clone())), rows);
    }
}
