//! Python bindings: grid containers, scenario sampling, quantization,
//! error metrics, grid file IO, datasets and trained predictor bundles.
//!
//! Wrappers hold the Rust values; everything crossing the boundary is
//! plain Python data (floats, ints, lists, tuples, dicts, strings).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

use pogrid_core::grid::io::{
    aog_to_bytes, load_grid, pog_to_bytes, quantized_to_bytes, save_grid, GridGeometry,
};
use pogrid_core::grid::{metrics, quant, AugmentedOccupancyGrid, GridConfig, AOG_ATTRIBUTES};
use pogrid_core::pipelines::{load_predictor, TrainedPredictor};
use pogrid_core::scenario::dataset::DatasetManifest;
use pogrid_core::scenario::raster::{build_aog, compute_ground_truth_pog};
use pogrid_core::scenario::sampler::{sample_scenario_with, SamplerConfig};
use pogrid_core::scenario::{LayoutKind, RoadLayout};

fn err(e: pogrid_core::Error) -> PyErr {
    match e {
        pogrid_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn check_cell(rows: usize, cols: usize, i: usize, j: usize) -> PyResult<()> {
    if i >= rows || j >= cols {
        return Err(PyIndexError::new_err(format!(
            "cell ({i}, {j}) outside a {rows}x{cols} grid"
        )));
    }
    Ok(())
}

fn road_from_name(name: &str) -> PyResult<RoadLayout> {
    match name {
        "four_way_open" => Ok(RoadLayout::from_kind(LayoutKind::FourWayOpen)),
        "four_way_left_no_entry" => Ok(RoadLayout::from_kind(LayoutKind::FourWayLeftNoEntry)),
        other => Err(PyValueError::new_err(format!(
            "unknown road layout {other:?}, expected four_way_open or four_way_left_no_entry"
        ))),
    }
}

/// Augmented occupancy grid: per cell
/// [occupied, speed, orientation, accel_x, accel_y].
#[pyclass(frozen)]
struct Aog {
    inner: AugmentedOccupancyGrid,
}

#[pymethods]
impl Aog {
    #[getter]
    fn rows(&self) -> usize {
        self.inner.config().rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.config().cols
    }

    #[getter]
    fn attributes(&self) -> usize {
        self.inner.config().attributes
    }

    fn occupied(&self, i: usize, j: usize) -> PyResult<bool> {
        check_cell(self.rows(), self.cols(), i, j)?;
        Ok(self.inner.occupied(i, j))
    }

    /// The cell's attribute vector as a list.
    fn cell(&self, i: usize, j: usize) -> PyResult<Vec<f64>> {
        check_cell(self.rows(), self.cols(), i, j)?;
        Ok(self.inner.cell(i, j).to_vec())
    }

    /// Flat row-major, attribute-minor copy of the whole grid.
    fn values(&self) -> Vec<f64> {
        self.inner.as_slice().to_vec()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_grid(&path, &aog_to_bytes(&self.inner)).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Aog(rows={}, cols={})", self.rows(), self.cols())
    }
}

/// Predicted occupancy grid: per-cell probability at time `t_pred`.
#[pyclass(frozen)]
struct Pog {
    inner: pogrid_core::grid::PredictedOccupancyGrid,
}

#[pymethods]
impl Pog {
    #[getter]
    fn rows(&self) -> usize {
        self.inner.config().rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.config().cols
    }

    #[getter]
    fn t_pred(&self) -> f64 {
        self.inner.t_pred()
    }

    fn prob(&self, i: usize, j: usize) -> PyResult<f64> {
        check_cell(self.rows(), self.cols(), i, j)?;
        Ok(self.inner.prob(i, j))
    }

    fn values(&self) -> Vec<f64> {
        self.inner.as_slice().to_vec()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_grid(&path, &pog_to_bytes(&self.inner)).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Pog(rows={}, cols={}, t_pred={})", self.rows(), self.cols(), self.t_pred())
    }
}

/// Probability grid snapped to the six levels {0, 0.2, 0.4, 0.6, 0.8, 1.0},
/// stored as class indices.
#[pyclass(frozen, name = "QuantizedPog")]
struct PyQuantizedPog {
    inner: pogrid_core::grid::QuantizedPog,
}

#[pymethods]
impl PyQuantizedPog {
    #[getter]
    fn rows(&self) -> usize {
        self.inner.config().rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.config().cols
    }

    #[getter]
    fn t_pred(&self) -> f64 {
        self.inner.t_pred()
    }

    fn class_at(&self, i: usize, j: usize) -> PyResult<u8> {
        check_cell(self.rows(), self.cols(), i, j)?;
        Ok(self.inner.class(i, j))
    }

    fn value(&self, i: usize, j: usize) -> PyResult<f64> {
        check_cell(self.rows(), self.cols(), i, j)?;
        Ok(self.inner.value(i, j))
    }

    fn classes(&self) -> Vec<u8> {
        self.inner.classes().to_vec()
    }

    /// Expand back to a probability grid of level values.
    fn to_pog(&self) -> Pog {
        Pog { inner: self.inner.to_pog() }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_grid(&path, &quantized_to_bytes(&self.inner)).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "QuantizedPog(rows={}, cols={}, t_pred={})",
            self.rows(),
            self.cols(),
            self.t_pred()
        )
    }
}

/// A trained predictor bundle loaded from disk.
#[pyclass(frozen)]
struct Predictor {
    inner: TrainedPredictor,
}

#[pymethods]
impl Predictor {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Predictor { inner: load_predictor(&path).map_err(err)? })
    }

    #[getter]
    fn architecture(&self) -> String {
        self.inner.id().to_string()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.grid.rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.grid.cols
    }

    #[getter]
    fn t_pred(&self) -> f64 {
        self.inner.t_pred
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    fn predict(&self, aog: &Aog) -> PyResult<Pog> {
        Ok(Pog { inner: self.inner.predict(&aog.inner).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "Predictor(architecture='{}', rows={}, cols={}, t_pred={})",
            self.architecture(),
            self.rows(),
            self.cols(),
            self.t_pred()
        )
    }
}

/// A generated dataset directory: manifest plus lazily loaded records.
#[pyclass(frozen)]
struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    fn record(
        &self,
        records: &[pogrid_core::scenario::dataset::DatasetRecord],
        k: usize,
        split: &str,
    ) -> PyResult<(Aog, Pog, PyQuantizedPog)> {
        let record = records.get(k).ok_or_else(|| {
            PyIndexError::new_err(format!(
                "record {k} outside the {split} split of {} records",
                records.len()
            ))
        })?;
        let (aog, pog, qpog) = self.manifest.load_record(&self.root, record).map_err(err)?;
        Ok((Aog { inner: aog }, Pog { inner: pog }, PyQuantizedPog { inner: qpog }))
    }
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let manifest = DatasetManifest::load(&path).map_err(err)?;
        Ok(Dataset { root: path, manifest })
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.manifest.n_train
    }

    #[getter]
    fn n_val(&self) -> usize {
        self.manifest.n_val
    }

    #[getter]
    fn t_pred(&self) -> f64 {
        self.manifest.t_pred
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.manifest.seed
    }

    #[getter]
    fn rows(&self) -> usize {
        self.manifest.grid.rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.manifest.grid.cols
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.manifest.config_hash.clone()
    }

    /// (aog, pog, quantized) triple from the training split.
    fn train_record(&self, k: usize) -> PyResult<(Aog, Pog, PyQuantizedPog)> {
        self.record(&self.manifest.train, k, "train")
    }

    /// (aog, pog, quantized) triple from the validation split.
    fn val_record(&self, k: usize) -> PyResult<(Aog, Pog, PyQuantizedPog)> {
        self.record(&self.manifest.val, k, "val")
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n_train={}, n_val={})", self.n_train(), self.n_val())
    }
}

/// Sample one scenario and rasterize it: returns the observed grid, the
/// ground-truth probability grid at `t_pred`, and its quantization.
#[pyfunction]
#[pyo3(signature = (seed, rows=20, cols=20, cell=2.0, t_pred=1.0, road="four_way_open", hypotheses=3))]
fn sample_grids(
    seed: u64,
    rows: usize,
    cols: usize,
    cell: f64,
    t_pred: f64,
    road: &str,
    hypotheses: usize,
) -> PyResult<(Aog, Pog, PyQuantizedPog)> {
    let layout = road_from_name(road)?;
    let mut sampler = SamplerConfig::default();
    sampler.hypothesis.count = hypotheses;
    let grid = GridConfig::ego_centered(rows, cols, cell, AOG_ATTRIBUTES);
    let scenario = sample_scenario_with(&layout, seed, &sampler).map_err(err)?;
    let (aog, _) = build_aog(&scenario, &grid).map_err(err)?;
    let pog = compute_ground_truth_pog(&scenario, &grid, t_pred).map_err(err)?;
    let qpog = quant::quantize_pog(&pog);
    Ok((Aog { inner: aog }, Pog { inner: pog }, PyQuantizedPog { inner: qpog }))
}

/// Load a grid file; the attribute count decides whether it comes back as
/// an Aog or a Pog.
#[pyfunction]
fn load_grid_file(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let raw = load_grid(&path).map_err(err)?;
    let geometry = GridGeometry::default();
    match raw.attributes {
        1 => Ok(Pog { inner: raw.to_pog(&geometry).map_err(err)? }
            .into_pyobject(py)?
            .into_any()
            .unbind()),
        AOG_ATTRIBUTES => Ok(Aog { inner: raw.to_aog(&geometry).map_err(err)? }
            .into_pyobject(py)?
            .into_any()
            .unbind()),
        n => Err(PyValueError::new_err(format!("unsupported attribute count {n}"))),
    }
}

/// Snap one probability to the nearest quantization level.
#[pyfunction]
fn quantize_probability(p: f64) -> PyResult<f64> {
    quant::quantize_probability(p).map_err(err)
}

/// Quantize a whole probability grid.
#[pyfunction]
fn quantize(pog: &Pog) -> PyQuantizedPog {
    PyQuantizedPog { inner: quant::quantize_pog(&pog.inner) }
}

/// The quantization levels, ascending.
#[pyfunction]
fn levels() -> Vec<f64> {
    quant::LEVELS.to_vec()
}

/// Prediction error between a ground-truth grid and an estimate.
#[pyfunction]
fn pog_error(truth: &Pog, estimate: &Pog) -> PyResult<f64> {
    metrics::pog_error(&truth.inner, &estimate.inner).map_err(err)
}

/// Banded prediction errors keyed by ground-truth probability band.
/// Returns {"low": float|None, "mid": ..., "high": ...,
/// "low_cells": int, "mid_cells": int, "high_cells": int}.
#[pyfunction]
fn banded_pog_error(py: Python<'_>, truth: &Pog, estimate: &Pog) -> PyResult<Py<PyAny>> {
    let banded = metrics::banded_pog_error(&truth.inner, &estimate.inner).map_err(err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("low", banded.eps_low)?;
    out.set_item("mid", banded.eps_mid)?;
    out.set_item("high", banded.eps_high)?;
    out.set_item("low_cells", banded.low_cells)?;
    out.set_item("mid_cells", banded.mid_cells)?;
    out.set_item("high_cells", banded.high_cells)?;
    Ok(out.into_any().unbind())
}

#[pymodule]
fn pogrid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Aog>()?;
    m.add_class::<Pog>()?;
    m.add_class::<PyQuantizedPog>()?;
    m.add_class::<Predictor>()?;
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(sample_grids, m)?)?;
    m.add_function(wrap_pyfunction!(load_grid_file, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_probability, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(levels, m)?)?;
    m.add_function(wrap_pyfunction!(pog_error, m)?)?;
    m.add_function(wrap_pyfunction!(banded_pog_error, m)?)?;
    Ok(())
}
