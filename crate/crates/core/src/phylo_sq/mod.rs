//! Unknown-tree reconstruction from shuffled repeated samples.
//!
//! Layer by layer, current nodes are grouped into sibling sets by the
//! contracted pair moment `g(u, v) = |φᴴ E[e(X_u) e(X_v)ᵀ] φ|`; pairs with
//! `g ≥ g_max − α` are joined and the connected components become the next
//! layer. Internal node labels are row-matching estimates over the recovered
//! subtree. The same procedure runs on raw samples, on exact expectations,
//! or through a VSTAT oracle.

mod oracle;
mod sources;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::broadcast::RootPrior;
use crate::chains::{TransitionMatrix, RANK_TOL};
use crate::error::{Error, Result};
use crate::root_estimators::{estimate_law, RowMatchConfig};
use crate::trees::{CanonicalTree, LeafPermutation};

pub use oracle::{
    run_sq_pipeline, AdversaryPolicy, AlwaysDown, AlwaysUp, OracleMode, Query, QueryRecord, RandomSign,
    SqOutcome, VStatOracle, VStatSource,
};
pub use sources::{ExactSource, MomentSource, SampleSource};

/// `(1, −1)/√2`-style second eigenvector when `λ₂ ≠ 0`, otherwise the
/// generalized eigenvector with `Mφ ≠ 0`, `M²φ = 0`.
pub fn select_contraction_vector(m: &TransitionMatrix) -> Result<Vec<Complex<f64>>> {
    if !m.has_distinct_rows() {
        return Err(Error::DegenerateChannel);
    }
    let spec = m.spectral();
    if spec.lambda2_modulus >= RANK_TOL {
        spec.second_eigenvector.ok_or(Error::DegenerateChannel)
    } else {
        Ok(spec.require_generalized_eigvec()?.iter().map(|&x| Complex::new(x, 0.0)).collect())
    }
}

/// `|φᴴ E φ|`.
pub fn contract(phi: &[Complex<f64>], e: &DMatrix<f64>) -> f64 {
    let q = phi.len();
    let mut acc = Complex::new(0.0, 0.0);
    for a in 0..q {
        for b in 0..q {
            acc += phi[a].conj() * e[(a, b)] * phi[b];
        }
    }
    acc.norm()
}

/// Pair moments of one layer, `get(i, j)` defined for `i < j`.
#[derive(Debug, Clone)]
pub struct PairMoments {
    n: usize,
    data: Vec<DMatrix<f64>>,
}

impl PairMoments {
    pub fn new(n: usize, q: usize) -> Self {
        let pairs = n * n.saturating_sub(1) / 2;
        Self { n, data: vec![DMatrix::zeros(q, q); pairs] }
    }

    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.data[self.index(i, j)]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut DMatrix<f64> {
        let k = self.index(i, j);
        &mut self.data[k]
    }
}

/// Measured separation on one grouped layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGap {
    pub layer: usize,
    pub nodes: usize,
    pub g_max: f64,
    pub threshold: f64,
    /// Smallest statistic between two members of the same group.
    pub within_min: f64,
    /// Largest statistic between members of different groups.
    pub between_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub tree: CanonicalTree,
    pub tau_hat: LeafPermutation,
    pub per_layer_gaps: Vec<LayerGap>,
}

/// Groups the `n` current nodes into connected components of the graph
/// `g ≥ g_max − α`; every component must have exactly `d` members.
pub fn group_layer(g: &[Vec<f64>], alpha: f64, d: usize, layer: usize) -> Result<(Vec<Vec<usize>>, LayerGap)> {
    let n = g.len();
    let mut g_max = f64::NEG_INFINITY;
    for (i, row) in g.iter().enumerate() {
        for &x in &row[i + 1..] {
            g_max = g_max.max(x);
        }
    }
    let threshold = g_max - alpha;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if g[i][j] >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    if groups.iter().any(|grp| grp.len() != d) {
        let mut sizes: Vec<usize> = groups.iter().map(|grp| grp.len()).collect();
        sizes.sort_unstable();
        return Err(Error::GroupingFailure { layer, sizes, expected: d });
    }
    let group_of: Vec<usize> = (0..n).map(|i| slot[find(&mut parent, i)]).collect();
    let mut within_min = f64::INFINITY;
    let mut between_max = f64::NEG_INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            if group_of[i] == group_of[j] {
                within_min = within_min.min(g[i][j]);
            } else {
                between_max = between_max.max(g[i][j]);
            }
        }
    }
    let gap = LayerGap { layer, nodes: n, g_max, threshold, within_min, between_max };
    Ok((groups, gap))
}

/// Recovers the hierarchy over observed coordinates `0..d^ℓ`.
pub fn reconstruct_tree(
    source: &mut dyn MomentSource,
    m: &TransitionMatrix,
    alpha: f64,
    d: usize,
    depth: usize,
) -> Result<Reconstruction> {
    if d < 2 {
        return Err(Error::Invalid("branching factor must be at least 2".into()));
    }
    let n = source.leaf_count();
    let expected = (d as u128).checked_pow(depth as u32);
    if expected != Some(n as u128) {
        return Err(Error::Invalid(format!("{n} observed coordinates do not match d={d}, depth={depth}")));
    }
    let phi = if n > d { select_contraction_vector(m)? } else { Vec::new() };
    let mut nodes: Vec<CanonicalTree> = (0..n).map(CanonicalTree::Leaf).collect();
    let mut gaps = Vec::new();
    for layer in 0..depth {
        if nodes.len() == d {
            nodes = vec![CanonicalTree::node(nodes)];
            break;
        }
        let moments = source.layer_moments(&nodes)?;
        let k = nodes.len();
        let mut g = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i + 1..k {
                let v = contract(&phi, moments.get(i, j));
                g[i][j] = v;
                g[j][i] = v;
            }
        }
        let (groups, gap) = group_layer(&g, alpha, d, layer)?;
        gaps.push(gap);
        let mut next: Vec<CanonicalTree> = groups
            .into_iter()
            .map(|grp| CanonicalTree::node(grp.into_iter().map(|i| nodes[i].clone()).collect()))
            .collect();
        next.sort_by_key(|t| t.min_leaf());
        nodes = next;
    }
    let tree = nodes.pop().expect("at least one node");
    let tau_hat = tree.as_permutation()?;
    Ok(Reconstruction { tree, tau_hat, per_layer_gaps: gaps })
}

/// Plurality vote of per-sample root estimates over the recovered tree.
pub fn recover_label(source: &mut dyn MomentSource, tree: &CanonicalTree) -> Result<usize> {
    source.label(tree)
}

/// Exact statistics of one grouped layer: the common sibling value and the
/// largest non-sibling value, for root prior `prior`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactLayerStats {
    pub layer: usize,
    pub sibling: f64,
    pub non_sibling_max: f64,
}

impl ExactLayerStats {
    pub fn gap(&self) -> f64 {
        self.sibling - self.non_sibling_max
    }
}

/// Exact layer statistics in the infinite-sample limit, with internal labels
/// replaced by their row-matching estimates.
pub fn exact_layer_stats(
    m: &TransitionMatrix,
    prior: &RootPrior,
    d: usize,
    depth: usize,
    eps: f64,
    cfg: &RowMatchConfig,
) -> Result<Vec<ExactLayerStats>> {
    let phi = select_contraction_vector(m)?;
    let mut out = Vec::new();
    for layer in 0..depth.saturating_sub(1) {
        let law = estimate_matrix(&estimate_law(m, d, layer, eps, cfg)?);
        let node_depth = depth - layer;
        let parent_depth = node_depth - 1;
        let stat = |lca_depth: usize| -> f64 {
            let pi = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(m.propagate(prior.as_slice(), lca_depth)));
            let down = m.power(node_depth - lca_depth) * &law;
            contract(&phi, &(down.transpose() * pi * down))
        };
        let sibling = stat(parent_depth);
        let non_sibling_max = (0..parent_depth).map(stat).fold(0.0, f64::max);
        out.push(ExactLayerStats { layer, sibling, non_sibling_max });
    }
    Ok(out)
}

/// `P(estimate = b | X = a)` as a matrix.
pub(crate) fn estimate_matrix(law: &[Vec<f64>]) -> DMatrix<f64> {
    let q = law.len();
    DMatrix::from_fn(q, q, |a, b| law[a][b])
}

/// Default threshold slack.
///
/// When `λ₂ ≠ 0`: `(|λ₂|² − |λ₂|⁴)·min_c π(c)/4`. When `λ₂ = 0`: half the
/// smallest exact sibling/non-sibling gap over every grouped layer and every
/// possible hidden label.
pub fn default_alpha(m: &TransitionMatrix, d: usize, depth: usize, eps: f64, cfg: &RowMatchConfig) -> Result<f64> {
    let spec = m.spectral();
    if spec.lambda2_modulus >= RANK_TOL {
        let pi = m.stationary()?;
        let min_pi = pi.iter().copied().fold(f64::INFINITY, f64::min);
        let l2 = spec.lambda2_modulus.powi(2);
        return Ok((l2 - l2 * l2) * min_pi / 4.0);
    }
    let q = m.q();
    let mut gap = f64::INFINITY;
    for y in 0..q {
        for s in exact_layer_stats(m, &RootPrior::biased(q, y), d, depth, eps, cfg)? {
            gap = gap.min(s.gap());
        }
    }
    Ok(if gap.is_finite() { 0.5 * gap } else { 0.0 })
}

/// Machine-readable result of one reconstruction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub canonical_tree: CanonicalTree,
    pub tau_hat: Vec<usize>,
    pub y_hat: usize,
    pub queries: u64,
    pub m: usize,
    pub alpha: f64,
    pub per_layer_gaps: Vec<LayerGap>,
}

impl ReconstructionReport {
    pub fn new(rec: &Reconstruction, y_hat: usize, queries: u64, m: usize, alpha: f64) -> Self {
        Self {
            canonical_tree: rec.tree.clone(),
            tau_hat: rec.tau_hat.as_slice().to_vec(),
            y_hat,
            queries,
            m,
            alpha,
            per_layer_gaps: rec.per_layer_gaps.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contraction_vectors() {
        let phi = select_contraction_vector(&TransitionMatrix::example_chain()).unwrap();
        let s = 1.0 / 3f64.sqrt();
        for (x, e) in phi.iter().zip([s, -s, s]) {
            assert!((x.re - e).abs() < 1e-9 && x.im.abs() < 1e-12);
        }
        let phi = select_contraction_vector(&TransitionMatrix::bsc(0.8).unwrap()).unwrap();
        assert!((phi[0] + phi[1]).norm() < 1e-9);
        assert!((phi[0].norm() - 0.5f64.sqrt()).abs() < 1e-9);
        let rank_one = TransitionMatrix::uniform(3).unwrap();
        assert!(matches!(select_contraction_vector(&rank_one), Err(Error::DegenerateChannel)));
    }

    #[test]
    fn grouping_rejects_wrong_sizes() {
        // 4 nodes, pairs (0,1) and (2,3) strong
        let mut g = vec![vec![0.0; 4]; 4];
        g[0][1] = 1.0;
        g[1][0] = 1.0;
        g[2][3] = 1.0;
        g[3][2] = 1.0;
        let (groups, gap) = group_layer(&g, 0.5, 2, 0).unwrap();
        assert_eq!(groups, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(gap.within_min, 1.0);
        assert_eq!(gap.between_max, 0.0);
        assert!(matches!(group_layer(&g, 1.5, 2, 0), Err(Error::GroupingFailure { .. })));
    }

    #[test]
    fn pair_index_is_dense() {
        let pm = PairMoments::new(5, 2);
        let mut seen = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                seen.push(pm.index(i, j));
            }
        }
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
