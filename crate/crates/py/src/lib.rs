//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::collections::BTreeMap;

use nsn_core::config::RunConfig;
use nsn_core::data::{load_checkpoint, save_checkpoint, Checkpoint, Dataset, Split};
use nsn_core::surgery::{surgical_replace, PlanEntry, SurgeryPlan};
use nsn_core::training::{evaluate as core_evaluate, train as core_train};
use nsn_core::{analysis, data, seeded_rng, Activation, Matrix, NsnError, RankSpec};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

create_exception!(nsn, NsnException, PyValueError, "Error raised by the nested subspace network core.");

fn err(e: NsnError) -> PyErr {
    NsnException::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn rank_spec(rank: Option<usize>) -> RankSpec {
    rank.map_or(RankSpec::Full, RankSpec::Rank)
}

fn dataset(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: Option<usize>) -> PyResult<Dataset> {
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(to_matrix(features)?, labels, classes, Split::Train).map_err(err)
}

/// A trained or freshly initialized model, with its learned log-variances.
#[pyclass(name = "Model", module = "nsn", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    /// MLP over `dims`; NSN layers when `max_rank` is given, dense otherwise.
    #[staticmethod]
    #[pyo3(signature = (dims, max_rank=None, activation="relu", seed=0))]
    fn mlp(dims: Vec<usize>, max_rank: Option<usize>, activation: &str, seed: u64) -> PyResult<Self> {
        let activation = match activation {
            "relu" => Activation::Relu,
            "gelu" => Activation::Gelu,
            "identity" => Activation::Identity,
            other => return Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
        };
        let model = nsn_core::Model::mlp(&dims, max_rank, activation, &mut seeded_rng(seed)).map_err(err)?;
        Ok(PyModel {
            inner: Checkpoint::new(model),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(err)
    }

    /// Logits for a batch of inputs at `rank` (full rank when omitted).
    #[pyo3(signature = (x, rank=None))]
    fn forward(&self, x: Vec<Vec<f64>>, rank: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.model.forward(&to_matrix(x)?, rank_spec(rank)).map_err(err)?;
        Ok(to_rows(&out))
    }

    #[pyo3(signature = (rank=None))]
    fn flops(&self, rank: Option<usize>) -> u64 {
        self.inner.model.flops(rank_spec(rank))
    }

    fn truncate(&self, rank: usize) -> PyResult<Self> {
        Ok(PyModel {
            inner: Checkpoint {
                model: self.inner.model.truncate(rank).map_err(err)?,
                ..self.inner.clone()
            },
        })
    }

    /// Effective weight `B_r A_r` of one layer (the dense weight for dense layers).
    #[pyo3(signature = (layer, rank=None))]
    fn weight(&self, layer: usize, rank: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let block = self
            .inner
            .model
            .blocks()
            .get(layer)
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} out of range")))?;
        Ok(to_rows(&block.layer.weight_at(rank_spec(rank)).map_err(err)?))
    }

    #[getter]
    fn max_rank(&self) -> Option<usize> {
        self.inner.model.max_rank()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.model.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.model.output_dim()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.model.blocks().len()
    }

    #[getter]
    fn nsn_layer_count(&self) -> usize {
        self.inner.model.nsn_layer_count()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.model.parameter_count()
    }

    /// Learned log-variance per rank (empty before training).
    #[getter]
    fn s(&self) -> BTreeMap<usize, f64> {
        self.inner.uncertainty.as_ref().map(|u| u.values().clone()).unwrap_or_default()
    }

    fn __repr__(&self) -> String {
        let dims: Vec<String> = std::iter::once(self.inner.model.input_dim())
            .chain(self.inner.model.blocks().iter().map(|b| b.layer.d_out()))
            .map(|d| d.to_string())
            .collect();
        format!("Model({}, max_rank={:?})", dims.join("->"), self.inner.model.max_rank())
    }
}

/// `(U, singular_values, Vᵀ)` of a matrix.
#[pyfunction]
fn svd(m: Rows) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let dec = nsn_core::svd(&to_matrix(m)?).map_err(err)?;
    Ok((to_rows(&dec.u), dec.singular_values, to_rows(&dec.vt)))
}

#[pyfunction]
#[pyo3(signature = (d_in, d_out, rank=None))]
fn flops_linear(d_in: usize, d_out: usize, rank: Option<usize>) -> u64 {
    nsn_core::flops_linear(d_in, d_out, rank_spec(rank))
}

#[pyfunction]
fn break_even_rank(d_in: usize, d_out: usize) -> usize {
    nsn_core::break_even_rank(d_in, d_out)
}

#[pyfunction]
fn containment_score(w_small: Vec<Vec<f64>>, w_large: Vec<Vec<f64>>, r_small: usize, r_large: usize) -> PyResult<f64> {
    analysis::containment_score(&to_matrix(w_small)?, &to_matrix(w_large)?, r_small, r_large).map_err(err)
}

/// `(features, labels)` of the synthetic Gaussian-cluster dataset.
#[pyfunction]
#[pyo3(signature = (seed, num_classes=10, dim=64, per_class=500, separation=3.0))]
fn synth_clusters(seed: u64, num_classes: usize, dim: usize, per_class: usize, separation: f64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let d = data::synth_clusters(seed, num_classes, dim, per_class, separation).map_err(err)?;
    Ok((to_rows(&d.features), d.labels))
}

/// Replace dense layers with SVD-initialized NSN layers. `layers` holds
/// `(index, max_rank)` pairs; `None` replaces every dense layer losslessly.
#[pyfunction]
#[pyo3(signature = (model, layers=None))]
fn surgery(model: &PyModel, layers: Option<Vec<(usize, Option<usize>)>>) -> PyResult<PyModel> {
    let plan = match layers {
        Some(l) => SurgeryPlan {
            layers: l.into_iter().map(|(index, max_rank)| PlanEntry { index, max_rank }).collect(),
        },
        None => SurgeryPlan::all_dense(&model.inner.model),
    };
    let (inner, _) = surgical_replace(&model.inner, &plan).map_err(err)?;
    Ok(PyModel { inner })
}

/// Trains a copy of `model`. `config` is a TOML run config; only its
/// `[train]` table is used here.
#[pyfunction]
#[pyo3(signature = (model, features, labels, config="", num_classes=None))]
fn train(model: &PyModel, features: Vec<Vec<f64>>, labels: Vec<usize>, config: &str, num_classes: Option<usize>) -> PyResult<PyModel> {
    let cfg = RunConfig::from_toml_str(config).map_err(err)?;
    let data = dataset(features, labels, num_classes)?;
    let outcome = core_train(&model.inner.model, &data, None, &cfg.train).map_err(err)?;
    let mut inner = Checkpoint::new(outcome.model);
    inner.uncertainty = Some(outcome.uncertainty);
    inner.meta.seed = Some(cfg.train.seed);
    Ok(PyModel { inner })
}

/// `(mean cross-entropy, accuracy)` at `rank`.
#[pyfunction]
#[pyo3(signature = (model, features, labels, rank=None, num_classes=None))]
fn evaluate(model: &PyModel, features: Vec<Vec<f64>>, labels: Vec<usize>, rank: Option<usize>, num_classes: Option<usize>) -> PyResult<(f64, f64)> {
    let classes = num_classes.or(Some(model.inner.model.output_dim()));
    let data = dataset(features, labels, classes)?;
    core_evaluate(&model.inner.model, &data, rank_spec(rank)).map_err(err)
}

#[pymodule]
fn nsn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NsnError", m.py().get_type::<NsnException>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(flops_linear, m)?)?;
    m.add_function(wrap_pyfunction!(break_even_rank, m)?)?;
    m.add_function(wrap_pyfunction!(containment_score, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clusters, m)?)?;
    m.add_function(wrap_pyfunction!(surgery, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
