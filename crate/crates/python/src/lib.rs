//! Python bindings: graphs, fragmentation, tokenizers, the census, training
//! and the gradient checks. Matrices cross the boundary as lists of rows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mgmlab::analyze::{subtree_census, subtree_keys};
use mgmlab::fragment::{compose, FragmentContext, Recipe};
use mgmlab::gradcheck::{check_ops, check_pipeline, DEFAULT_STEP, DEFAULT_TOLERANCE, PIPELINE_TOLERANCE};
use mgmlab::molgraph::{self, parse_smiles};
use mgmlab::pretrain::{train, Checkpoint, TrainConfig, TrainOutput};
use mgmlab::sgt::{sgt_tokenize as sgt_run, NodeEmbedding, SgtConfig};
use mgmlab::tokenize::{build_motif_vocab, tok_motif};
use mgmlab::Error;
use ndarray::Array2;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_numerical() => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_recipe(recipe: &str) -> PyResult<Recipe> {
    recipe.parse().map_err(to_py)
}

/// A molecular graph parsed from SMILES.
#[pyclass(name = "MolGraph", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMolGraph {
    inner: molgraph::MolGraph,
}

#[pymethods]
impl PyMolGraph {
    #[new]
    fn new(smiles: &str) -> PyResult<Self> {
        parse_smiles(smiles).map(|inner| PyMolGraph { inner }).map_err(to_py)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    fn atomic_numbers(&self) -> Vec<u8> {
        self.inner.atomic_numbers()
    }

    fn symbols(&self) -> Vec<String> {
        self.inner.nodes().iter().map(|n| n.symbol()).collect()
    }

    /// `(i, j, bond code)` with codes 0..3 for single, double, triple, aromatic.
    fn edges(&self) -> Vec<(usize, usize, u8)> {
        self.inner
            .edges()
            .iter()
            .map(|e| (e.i, e.j, e.attr.bond_type.code()))
            .collect()
    }

    fn subtree_keys(&self) -> Vec<String> {
        subtree_keys(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("MolGraph(nodes={}, edges={})", self.inner.num_nodes(), self.inner.num_edges())
    }
}

/// Fragments of `graph` under `recipe`, as `(kind, nodes, edges)`.
#[pyfunction]
#[pyo3(signature = (graph, recipe = "relmole"))]
fn fragment(graph: &PyMolGraph, recipe: &str) -> PyResult<Vec<(String, Vec<usize>, Vec<usize>)>> {
    let frags = compose(&graph.inner, &parse_recipe(recipe)?, &FragmentContext::default()).map_err(to_py)?;
    Ok(frags
        .iter()
        .map(|f| (f.kind().name().to_string(), f.nodes().to_vec(), f.edges().to_vec()))
        .collect())
}

fn parse_all(smiles: Vec<String>) -> PyResult<Vec<molgraph::MolGraph>> {
    smiles.iter().map(|s| parse_smiles(s).map_err(to_py)).collect()
}

/// Motif tokens per molecule as `(nodes, id)`, plus the vocabulary keys.
#[pyfunction]
#[pyo3(signature = (smiles, recipe = "relmole", threshold = 5))]
fn motif_tokens(
    smiles: Vec<String>,
    recipe: &str,
    threshold: usize,
) -> PyResult<(Vec<Vec<(Vec<usize>, usize)>>, Vec<String>)> {
    let graphs = parse_all(smiles)?;
    let recipe = parse_recipe(recipe)?;
    let ctx = FragmentContext::default();
    let vocab = build_motif_vocab(&graphs, &recipe, &ctx, threshold).map_err(to_py)?;
    let tokens = graphs
        .iter()
        .map(|g| {
            let toks = tok_motif(g, &recipe, &ctx, &vocab).map_err(to_py)?;
            Ok(toks
                .iter()
                .map(|t| (t.fragment.nodes().to_vec(), t.id().unwrap_or(vocab.unk())))
                .collect())
        })
        .collect::<PyResult<_>>()?;
    Ok((tokens, vocab.keys().to_vec()))
}

/// SGT tokens for one graph. `embedding` maps atomic number to a row.
#[pyfunction]
#[pyo3(signature = (graph, embedding, operator = "gin", layers = 1, batch_norm = true))]
fn sgt_tokens(
    graph: &PyMolGraph,
    embedding: BTreeMap<u8, Vec<f64>>,
    operator: &str,
    layers: usize,
    batch_norm: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let dim = embedding.values().next().map_or(0, Vec::len);
    if embedding.values().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("embedding rows must share one length"));
    }
    let table = Array2::from_shape_vec(
        (embedding.len(), dim),
        embedding.values().flatten().copied().collect(),
    )
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let row_of = embedding.keys().enumerate().map(|(i, &z)| (z, i)).collect();
    let emb = NodeEmbedding::new(table, row_of).map_err(to_py)?;
    let cfg = SgtConfig {
        batch_norm,
        ..SgtConfig::new(operator.parse().map_err(to_py)?, layers, dim).map_err(to_py)?
    };
    Ok(rows(&sgt_run(&graph.inner, &emb, &cfg).map_err(to_py)?.values))
}

/// `(subtree counts, atom counts)`, each sorted by count descending.
#[pyfunction]
fn census(smiles: Vec<String>) -> PyResult<(Vec<(String, usize)>, Vec<(String, usize)>)> {
    let c = subtree_census(&parse_all(smiles)?);
    Ok((c.subtrees.0, c.atoms.0))
}

/// A saved model.
#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(path)
            .map(|inner| PyCheckpoint { inner })
            .map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.epoch
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config_text.clone()
    }

    fn names(&self) -> Vec<String> {
        self.inner.arrays.iter().map(|(n, _)| n.clone()).collect()
    }

    fn array(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .array(name)
            .map(rows)
            .ok_or_else(|| PyValueError::new_err(format!("no array named '{name}'")))
    }
}

/// Pretrains on `smiles` with a TOML training config (the `[train]` keys).
/// Returns per-epoch `(epoch, mean_loss, token_accuracy)` and the final
/// checkpoint.
#[pyfunction]
#[pyo3(signature = (smiles, config = "", out_dir = None))]
fn pretrain(
    py: Python<'_>,
    smiles: Vec<String>,
    config: &str,
    out_dir: Option<PathBuf>,
) -> PyResult<(Vec<(usize, f64, Option<f64>)>, PyCheckpoint)> {
    let graphs = parse_all(smiles)?;
    let cfg: TrainConfig = toml::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = py
        .detach(|| train(&graphs, &cfg, &TrainOutput { dir: out_dir }))
        .map_err(to_py)?;
    let metrics = out
        .metrics
        .iter()
        .map(|m| (m.epoch, m.mean_loss, m.token_accuracy))
        .collect();
    Ok((metrics, PyCheckpoint { inner: out.checkpoint }))
}

/// Runs the finite-difference suite; returns `(name, max_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (instances = 5, seed = 0))]
fn gradcheck(py: Python<'_>, instances: usize, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    py.detach(|| {
        let ops = check_ops(seed, instances, DEFAULT_STEP)?;
        let pipe = check_pipeline(seed, instances.div_ceil(10), DEFAULT_STEP)?;
        Ok(ops
            .into_iter()
            .map(|r| (r, DEFAULT_TOLERANCE))
            .chain(pipe.into_iter().map(|r| (r, PIPELINE_TOLERANCE)))
            .map(|(r, tol)| {
                let ok = r.passed(tol);
                (r.name, r.max_rel_error, ok)
            })
            .collect())
    })
    .map_err(to_py)
}

#[pymodule]
fn mgmlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMolGraph>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(fragment, m)?)?;
    m.add_function(wrap_pyfunction!(motif_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(sgt_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(census, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
