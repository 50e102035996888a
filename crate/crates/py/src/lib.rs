//! Python bindings: chains, trees, sampling, exact oracles, root estimators
//! and unknown-tree reconstruction.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

use treecast_core::broadcast::{self, Observations, RepeatedParams, RootPrior};
use treecast_core::chains;
use treecast_core::exact_oracle::{self, OracleCaps};
use treecast_core::harness::parse_chain;
use treecast_core::phylo_sq::{
    self, ExactSource, OracleMode, RandomSign, ReconstructionReport, SampleSource, VStatOracle,
};
use treecast_core::root_estimators::{self, Distance, Estimator, RowMatchConfig};
use treecast_core::trees::{self, canonical_form};
use treecast_core::Error;

create_exception!(treecast, GroupingFailure, PyException, "Sibling grouping did not produce blocks of size d.");
create_exception!(treecast, SizeOverflow, PyException, "An exact computation exceeded its size cap.");

fn to_py(err: Error) -> PyErr {
    match err {
        Error::GroupingFailure { .. } => GroupingFailure::new_err(err.to_string()),
        Error::SizeOverflow { .. } => SizeOverflow::new_err(err.to_string()),
        Error::Io(_) => PyOSError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for treecast_core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn prior_or_uniform(prior: Option<Vec<f64>>, q: usize) -> PyResult<RootPrior> {
    match prior {
        Some(p) => RootPrior::new(p).py_err(),
        None => Ok(RootPrior::uniform(q)),
    }
}

/// Row-stochastic transition matrix on `[q]`.
#[pyclass(frozen, module = "treecast")]
struct TransitionMatrix(chains::TransitionMatrix);

#[pymethods]
impl TransitionMatrix {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        chains::TransitionMatrix::validate(&rows).py_err().map(Self)
    }

    /// `example`, `bsc:<θ>`, `uniform:<q>` or a chain JSON file.
    #[staticmethod]
    fn parse(spec: &str) -> PyResult<Self> {
        parse_chain(spec).py_err().map(Self)
    }

    #[staticmethod]
    fn example() -> Self {
        Self(chains::TransitionMatrix::example_chain())
    }

    #[staticmethod]
    fn bsc(theta: f64) -> PyResult<Self> {
        chains::TransitionMatrix::bsc(theta).py_err().map(Self)
    }

    #[getter]
    fn q(&self) -> usize {
        self.0.q()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.rows()
    }

    fn stationary(&self) -> PyResult<Vec<f64>> {
        self.0.stationary().py_err()
    }

    /// `|λ₂|`, the second-largest eigenvalue modulus.
    #[getter]
    fn lambda2_modulus(&self) -> f64 {
        self.0.spectral().lambda2_modulus
    }

    /// Smallest `k` with `M^k` of rank one, if any.
    #[getter]
    fn rank_one_power(&self) -> Option<usize> {
        self.0.rank_one_power()
    }

    /// Subset size below which leaves carry no root information at `depth`.
    fn independence_threshold(&self, depth: usize) -> Option<u128> {
        self.0.spectral().independence_threshold(depth)
    }

    fn __repr__(&self) -> String {
        format!("TransitionMatrix({:?})", self.0.rows())
    }
}

/// Complete `d`-ary tree of the given depth, vertices in level order.
#[pyclass(frozen, module = "treecast")]
struct Tree(trees::TreeTopology);

#[pymethods]
impl Tree {
    #[new]
    fn new(d: usize, depth: usize) -> PyResult<Self> {
        trees::TreeTopology::build(d, depth).py_err().map(Self)
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.depth()
    }

    #[getter]
    fn leaf_count(&self) -> usize {
        self.0.leaf_count()
    }

    #[getter]
    fn vertex_count(&self) -> usize {
        self.0.vertex_count()
    }

    fn parent(&self, v: usize) -> Option<usize> {
        self.0.parent(v)
    }

    fn lca(&self, u: usize, v: usize) -> usize {
        self.0.lca(u, v)
    }

    /// Canonical form of a leaf placement as nested-list JSON.
    fn canonical_form(&self, tau: Vec<usize>) -> PyResult<String> {
        let tau = trees::LeafPermutation::from_vec(tau).py_err()?;
        if tau.len() != self.0.leaf_count() {
            return Err(PyValueError::new_err("placement length differs from the leaf count"));
        }
        Ok(serde_json::to_string(&canonical_form(&self.0, &tau)).expect("canonical trees serialize"))
    }

    fn __repr__(&self) -> String {
        format!("Tree(d={}, depth={})", self.0.d(), self.0.depth())
    }
}

/// All vertex labels of one broadcast sample, in level order.
#[pyfunction]
#[pyo3(signature = (tree, chain, seed, prior=None))]
fn sample_broadcast(tree: &Tree, chain: &TransitionMatrix, seed: u64, prior: Option<Vec<f64>>) -> PyResult<Vec<usize>> {
    let prior = prior_or_uniform(prior, chain.0.q())?;
    Ok(broadcast::sample_broadcast(&tree.0, &chain.0, &prior, seed).py_err()?.labels)
}

/// Repeated-model dataset: `(samples, y_star, tau)`.
#[pyfunction]
fn sample_repeated(
    chain: &TransitionMatrix,
    d: usize,
    depth: usize,
    m: usize,
    eps: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<usize>>, usize, Vec<usize>)> {
    let params = RepeatedParams { d, depth, m, eps, chain: chain.0.clone() };
    let ds = broadcast::sample_repeated(&params, seed).py_err()?;
    Ok((ds.samples, ds.hidden.y_star, ds.hidden.tau.as_slice().to_vec()))
}

/// `I(X_root; X'_S)` in nats.
#[pyfunction]
#[pyo3(signature = (tree, chain, subset, eps=0.0, prior=None))]
fn mutual_information(
    tree: &Tree,
    chain: &TransitionMatrix,
    mut subset: Vec<usize>,
    eps: f64,
    prior: Option<Vec<f64>>,
) -> PyResult<f64> {
    let prior = prior_or_uniform(prior, chain.0.q())?;
    subset.sort_unstable();
    let law = exact_oracle::conditional_subset_law(&tree.0, &chain.0, &subset, eps, &OracleCaps::default()).py_err()?;
    Ok(exact_oracle::mutual_information_root(&law.with_prior(&prior)))
}

/// Root posterior by belief propagation.
#[pyfunction]
#[pyo3(signature = (tree, chain, leaves, eps=0.0, prior=None))]
fn root_posterior(
    tree: &Tree,
    chain: &TransitionMatrix,
    leaves: Vec<usize>,
    eps: f64,
    prior: Option<Vec<f64>>,
) -> PyResult<Vec<f64>> {
    let prior = prior_or_uniform(prior, chain.0.q())?;
    Ok(exact_oracle::root_posterior_bp(&tree.0, &chain.0, &prior, &leaves, eps).py_err()?.0)
}

/// Largest correlation with `1(root = c) − ν_c` achievable by functions of
/// degree at most `degree`, maximized over `c`.
#[pyfunction]
#[pyo3(signature = (tree, chain, degree, eps=0.0))]
fn max_corr_low_degree(tree: &Tree, chain: &TransitionMatrix, degree: usize, eps: f64) -> PyResult<f64> {
    let prior = RootPrior::uniform(chain.0.q());
    let analysis = exact_oracle::LowDegreeAnalysis::new(&tree.0, &chain.0, &prior, eps, &OracleCaps::default()).py_err()?;
    analysis.max_corr_over_labels(degree).py_err()
}

fn row_match_config(distance: &str) -> PyResult<RowMatchConfig> {
    match distance {
        "tv" => Ok(RowMatchConfig { distance: Distance::Tv }),
        "l2" => Ok(RowMatchConfig { distance: Distance::L2 }),
        other => Err(PyValueError::new_err(format!("unknown distance `{other}`"))),
    }
}

/// Hierarchical row-matching estimate of the root.
#[pyfunction]
#[pyo3(signature = (tree, chain, leaves, distance="tv"))]
fn row_match_root(tree: &Tree, chain: &TransitionMatrix, leaves: Vec<usize>, distance: &str) -> PyResult<usize> {
    root_estimators::row_match_root(&tree.0, &chain.0, &leaves, &row_match_config(distance)?).py_err()
}

/// `law[a][b] = P(estimate = b | X = a)` for row matching over a height-`height` subtree.
#[pyfunction]
#[pyo3(signature = (chain, d, height, eps=0.0, distance="tv"))]
fn estimate_law(chain: &TransitionMatrix, d: usize, height: usize, eps: f64, distance: &str) -> PyResult<Vec<Vec<f64>>> {
    root_estimators::estimate_law(&chain.0, d, height, eps, &row_match_config(distance)?).py_err()
}

/// Per-class error rates as `(class, rate)` pairs, then `("worst", rate)`.
#[pyfunction]
#[pyo3(signature = (tree, chain, eps, trials, seed, estimator="row_match"))]
fn root_accuracy(
    tree: &Tree,
    chain: &TransitionMatrix,
    eps: f64,
    trials: usize,
    seed: u64,
    estimator: &str,
) -> PyResult<Vec<(String, f64)>> {
    let estimator = match estimator {
        "row_match" => Estimator::RowMatch(RowMatchConfig::default()),
        "row_match_l2" => Estimator::RowMatch(RowMatchConfig { distance: Distance::L2 }),
        "bp" => Estimator::Bp,
        other => return Err(PyValueError::new_err(format!("unknown estimator `{other}`"))),
    };
    let prior = RootPrior::uniform(chain.0.q());
    let report = root_estimators::accuracy_report(&estimator, &tree.0, &chain.0, &prior, eps, trials, seed).py_err()?;
    let mut out: Vec<(String, f64)> =
        report.rows.iter().map(|r| (r.class.clone(), r.errors / r.trials as f64)).collect();
    out.push(("worst".into(), report.worst_class_error));
    Ok(out)
}

/// Default grouping slack for `(chain, d, depth, eps)`.
#[pyfunction]
#[pyo3(signature = (chain, d, depth, eps=0.0))]
fn default_alpha(chain: &TransitionMatrix, d: usize, depth: usize, eps: f64) -> PyResult<f64> {
    phylo_sq::default_alpha(&chain.0, d, depth, eps, &RowMatchConfig::default()).py_err()
}

fn report_json(rec: &phylo_sq::Reconstruction, y_hat: usize, queries: u64, m: usize, alpha: f64) -> String {
    serde_json::to_string(&ReconstructionReport::new(rec, y_hat, queries, m, alpha)).expect("reports serialize")
}

/// Recovers the tree and root label from observed samples; returns the
/// report as JSON.
#[pyfunction]
#[pyo3(signature = (chain, samples, d, depth, eps=0.0, alpha=None))]
fn reconstruct(
    chain: &TransitionMatrix,
    samples: Vec<Vec<usize>>,
    d: usize,
    depth: usize,
    eps: f64,
    alpha: Option<f64>,
) -> PyResult<String> {
    let cfg = RowMatchConfig::default();
    let alpha = match alpha {
        Some(a) => a,
        None => phylo_sq::default_alpha(&chain.0, d, depth, eps, &cfg).py_err()?,
    };
    let m = samples.len();
    let obs = Observations { q: chain.0.q(), d, depth, eps, samples };
    let mut src = SampleSource::new(&obs, &chain.0, cfg).py_err()?;
    let rec = phylo_sq::reconstruct_tree(&mut src, &chain.0, alpha, d, depth).py_err()?;
    let y_hat = phylo_sq::recover_label(&mut src, &rec.tree).py_err()?;
    Ok(report_json(&rec, y_hat, 0, m, alpha))
}

/// Same as `reconstruct` but with exact expectations for a given hidden
/// `(y_star, tau)`.
#[pyfunction]
#[pyo3(signature = (chain, d, depth, y_star, tau, eps=0.0, alpha=None))]
fn reconstruct_exact(
    chain: &TransitionMatrix,
    d: usize,
    depth: usize,
    y_star: usize,
    tau: Vec<usize>,
    eps: f64,
    alpha: Option<f64>,
) -> PyResult<String> {
    let cfg = RowMatchConfig::default();
    let alpha = match alpha {
        Some(a) => a,
        None => phylo_sq::default_alpha(&chain.0, d, depth, eps, &cfg).py_err()?,
    };
    let hidden = broadcast::HiddenState { y_star, tau: trees::LeafPermutation::from_vec(tau).py_err()? };
    let mut src = ExactSource::new(d, depth, &chain.0, &hidden, eps, cfg).py_err()?;
    let rec = phylo_sq::reconstruct_tree(&mut src, &chain.0, alpha, d, depth).py_err()?;
    let y_hat = phylo_sq::recover_label(&mut src, &rec.tree).py_err()?;
    Ok(report_json(&rec, y_hat, 0, 0, alpha))
}

/// Runs the pipeline against a VSTAT(m) oracle whose hidden state is drawn
/// from `seed`. Returns `(report_json, band_violations)`.
#[pyfunction]
#[pyo3(signature = (chain, d, depth, m, seed, eps=0.0, mode="honest", alpha=None))]
#[allow(clippy::too_many_arguments)]
fn sq_run(
    chain: &TransitionMatrix,
    d: usize,
    depth: usize,
    m: usize,
    seed: u64,
    eps: f64,
    mode: &str,
    alpha: Option<f64>,
) -> PyResult<(String, usize)> {
    let mode = match mode {
        "honest" => OracleMode::Honest,
        "adversarial" => OracleMode::Adversarial(Box::new(RandomSign::new(seed ^ 0x5eed))),
        other => return Err(PyValueError::new_err(format!("unknown oracle mode `{other}`"))),
    };
    let alpha = match alpha {
        Some(a) => a,
        None => phylo_sq::default_alpha(&chain.0, d, depth, eps, &RowMatchConfig::default()).py_err()?,
    };
    let params = RepeatedParams { d, depth, m, eps, chain: chain.0.clone() };
    let mut oracle = VStatOracle::from_seed(&params, mode, seed).py_err()?;
    let out = phylo_sq::run_sq_pipeline(&mut oracle, &chain.0, d, depth, alpha).py_err()?;
    Ok((report_json(&out.reconstruction, out.y_hat, out.queries, m, alpha), oracle.band_violations()))
}

#[pymodule]
fn treecast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TransitionMatrix>()?;
    m.add_class::<Tree>()?;
    m.add("GroupingFailure", m.py().get_type::<GroupingFailure>())?;
    m.add("SizeOverflow", m.py().get_type::<SizeOverflow>())?;
    m.add_function(wrap_pyfunction!(sample_broadcast, m)?)?;
    m.add_function(wrap_pyfunction!(sample_repeated, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(root_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(max_corr_low_degree, m)?)?;
    m.add_function(wrap_pyfunction!(row_match_root, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_law, m)?)?;
    m.add_function(wrap_pyfunction!(root_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(default_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_exact, m)?)?;
    m.add_function(wrap_pyfunction!(sq_run, m)?)?;
    Ok(())
}
