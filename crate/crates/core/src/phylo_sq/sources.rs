use std::collections::HashMap;

use nalgebra::DMatrix;

use super::{estimate_matrix, PairMoments};
use crate::broadcast::{HiddenState, Observations, RootPrior};
use crate::chains::TransitionMatrix;
use crate::error::{Error, Result};
use crate::exact_oracle::pair_moment;
use crate::root_estimators::{estimate_law, row_match_hier, RowMatchConfig};
use crate::trees::{CanonicalTree, TreeTopology};

/// Where layer moments and root-label votes come from.
pub trait MomentSource {
    fn q(&self) -> usize;
    fn leaf_count(&self) -> usize;
    /// `E[e(X̂_u) e(X̂_v)ᵀ]` for every pair of current nodes, where `X̂` is the
    /// observed value at a leaf and the row-matching estimate otherwise.
    fn layer_moments(&mut self, nodes: &[CanonicalTree]) -> Result<PairMoments>;
    /// Plurality root label over the recovered tree, ties to the lowest.
    fn label(&mut self, tree: &CanonicalTree) -> Result<usize>;
}

/// Empirical moments from observed samples.
#[derive(Debug, Clone)]
pub struct SampleSource<'a> {
    obs: &'a Observations,
    chain: &'a TransitionMatrix,
    cfg: RowMatchConfig,
}

impl<'a> SampleSource<'a> {
    pub fn new(obs: &'a Observations, chain: &'a TransitionMatrix, cfg: RowMatchConfig) -> Result<Self> {
        if obs.samples.is_empty() {
            return Err(Error::Invalid("no samples".into()));
        }
        if chain.q() != obs.q {
            return Err(Error::Invalid("chain and observations disagree on alphabet size".into()));
        }
        let n = obs.samples[0].len();
        if obs.samples.iter().any(|s| s.len() != n || s.iter().any(|&x| x >= obs.q)) {
            return Err(Error::Invalid("malformed samples".into()));
        }
        Ok(Self { obs, chain, cfg })
    }

    fn estimates(&self, node: &CanonicalTree) -> Vec<usize> {
        self.obs.samples.iter().map(|x| row_match_hier(node, x, self.chain, &self.cfg)).collect()
    }
}

impl MomentSource for SampleSource<'_> {
    fn q(&self) -> usize {
        self.obs.q
    }

    fn leaf_count(&self) -> usize {
        self.obs.samples[0].len()
    }

    fn layer_moments(&mut self, nodes: &[CanonicalTree]) -> Result<PairMoments> {
        let q = self.obs.q;
        let labels: Vec<Vec<usize>> = nodes.iter().map(|t| self.estimates(t)).collect();
        let m = self.obs.samples.len() as f64;
        let mut out = PairMoments::new(nodes.len(), q);
        let mut counts = vec![0usize; q * q];
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                counts.iter_mut().for_each(|c| *c = 0);
                for (&a, &b) in labels[i].iter().zip(&labels[j]) {
                    counts[a * q + b] += 1;
                }
                *out.get_mut(i, j) = DMatrix::from_fn(q, q, |a, b| counts[a * q + b] as f64 / m);
            }
        }
        Ok(out)
    }

    fn label(&mut self, tree: &CanonicalTree) -> Result<usize> {
        let mut votes = vec![0usize; self.obs.q];
        for y in self.estimates(tree) {
            votes[y] += 1;
        }
        Ok(argmax_first(votes.iter().map(|&v| v as f64)))
    }
}

pub(crate) fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Exact expectations under the hidden `(Y*, τ)`: the infinite-sample limit.
#[derive(Debug, Clone)]
pub(crate) struct ExactModel {
    pub tree: TreeTopology,
    pub chain: TransitionMatrix,
    pub prior: RootPrior,
    pub inverse_tau: Vec<usize>,
    pub laws: Vec<DMatrix<f64>>,
}

impl ExactModel {
    pub fn new(
        tree: TreeTopology,
        chain: TransitionMatrix,
        hidden: &HiddenState,
        eps: f64,
        cfg: &RowMatchConfig,
    ) -> Result<Self> {
        let q = chain.q();
        let laws = (0..=tree.depth())
            .map(|h| estimate_law(&chain, tree.d(), h, eps, cfg).map(|l| estimate_matrix(&l)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prior: RootPrior::biased(q, hidden.y_star),
            inverse_tau: hidden.tau.inverse().as_slice().to_vec(),
            tree,
            chain,
            laws,
        })
    }

    /// Tree vertex a recovered node corresponds to, if it is a true subtree
    /// with the true internal structure.
    pub fn vertex_of(&self, node: &CanonicalTree) -> Option<usize> {
        match node {
            CanonicalTree::Leaf(j) => self.inverse_tau.get(*j).map(|&i| self.tree.leaf_vertex(i)),
            CanonicalTree::Node(children) => {
                let vs: Vec<usize> = children.iter().map(|c| self.vertex_of(c)).collect::<Option<_>>()?;
                let parent = self.tree.parent(vs[0])?;
                let mut sorted = vs.clone();
                sorted.sort_unstable();
                let expected: Vec<usize> = self.tree.children(parent).collect();
                (sorted == expected).then_some(parent)
            }
        }
    }

    fn height(&self, v: usize) -> usize {
        self.tree.depth() - self.tree.depth_of(v)
    }

    /// `E[e(X̂_u) e(X̂_v)ᵀ] = L_uᵀ · E[e(X_u) e(X_v)ᵀ] · L_v` for disjoint
    /// subtrees; `None` for nested ones.
    pub fn pair(&self, u: &CanonicalTree, v: &CanonicalTree) -> Option<DMatrix<f64>> {
        let (a, b) = (self.vertex_of(u)?, self.vertex_of(v)?);
        if a == b {
            // one estimate against itself: its law on the diagonal
            let law = self.label_law(u)?;
            return Some(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(law)));
        }
        let w = self.tree.lca(a, b);
        if w == a || w == b {
            // nested subtrees share leaves, so the estimates are not
            // conditionally independent given the common ancestor
            return None;
        }
        let pm = pair_moment(&self.tree, &self.chain, &self.prior, a, b);
        Some(self.laws[self.height(a)].transpose() * pm * &self.laws[self.height(b)])
    }

    /// Law of the root estimate over a recovered tree.
    pub fn label_law(&self, tree: &CanonicalTree) -> Option<Vec<f64>> {
        let v = self.vertex_of(tree)?;
        let marginal = self.chain.propagate(self.prior.as_slice(), self.tree.depth_of(v));
        let law = &self.laws[self.height(v)];
        let q = self.chain.q();
        Some((0..q).map(|b| (0..q).map(|a| marginal[a] * law[(a, b)]).sum()).collect())
    }
}

/// Infinite-sample moments computed from the true model. Requires every
/// recovered node to be a true subtree.
#[derive(Debug, Clone)]
pub struct ExactSource {
    model: ExactModel,
}

impl ExactSource {
    pub fn new(
        d: usize,
        depth: usize,
        chain: &TransitionMatrix,
        hidden: &HiddenState,
        eps: f64,
        cfg: RowMatchConfig,
    ) -> Result<Self> {
        let tree = TreeTopology::build(d, depth)?;
        if hidden.tau.len() != tree.leaf_count() {
            return Err(Error::Invalid("hidden permutation does not fit the tree".into()));
        }
        Ok(Self { model: ExactModel::new(tree, chain.clone(), hidden, eps, &cfg)? })
    }
}

fn not_a_subtree() -> Error {
    Error::Invalid("exact moments need recovered nodes to be true subtrees".into())
}

impl MomentSource for ExactSource {
    fn q(&self) -> usize {
        self.model.chain.q()
    }

    fn leaf_count(&self) -> usize {
        self.model.tree.leaf_count()
    }

    fn layer_moments(&mut self, nodes: &[CanonicalTree]) -> Result<PairMoments> {
        let mut out = PairMoments::new(nodes.len(), self.q());
        // moments depend only on the vertex pair's geometry; reuse by distance
        let mut cache: HashMap<(usize, usize, usize), DMatrix<f64>> = HashMap::new();
        let vertices: Vec<usize> =
            nodes.iter().map(|t| self.model.vertex_of(t).ok_or_else(not_a_subtree)).collect::<Result<_>>()?;
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let t = &self.model.tree;
                let w = t.lca(vertices[i], vertices[j]);
                let key = (t.depth_of(w), t.depth_of(vertices[i]), t.depth_of(vertices[j]));
                let e = match cache.get(&key) {
                    Some(e) => e.clone(),
                    None => {
                        let e = self.model.pair(&nodes[i], &nodes[j]).ok_or_else(not_a_subtree)?;
                        cache.insert(key, e.clone());
                        e
                    }
                };
                *out.get_mut(i, j) = e;
            }
        }
        Ok(out)
    }

    fn label(&mut self, tree: &CanonicalTree) -> Result<usize> {
        let law = self.model.label_law(tree).ok_or_else(not_a_subtree)?;
        Ok(argmax_first(law.into_iter()))
    }
}
