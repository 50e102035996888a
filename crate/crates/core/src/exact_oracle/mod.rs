//! Exact computations on small instances.
//!
//! Everything here is deterministic and exact up to floating-point rounding:
//! joint laws of the root with a subset of (noisy) leaves, mutual
//! information, BP posteriors, total-variation gaps, pair moments,
//! degree-restricted correlations and the repeated-model correlation.

mod lowdeg;
mod repeated;

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;

use crate::broadcast::{check_eps, RootPrior};
use crate::chains::TransitionMatrix;
use crate::error::{Error, Result};
use crate::trees::TreeTopology;

pub use lowdeg::{information_ceiling, max_corr_low_degree, LowDegreeAnalysis};
pub use repeated::{repeated_model_corr, LocalFactor, ProductFeature};

/// Size limits for exact enumeration. Exceeding one is an error, never a
/// silent truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleCaps {
    /// Maximum number of (root, configuration) table entries.
    pub table_entries: u128,
    /// Maximum dimension of a low-degree function basis.
    pub basis: usize,
    /// Maximum number of leaf permutations averaged over.
    pub permutations: u128,
}

impl Default for OracleCaps {
    fn default() -> Self {
        Self { table_entries: 10_000_000, basis: 4096, permutations: 1_000_000 }
    }
}

/// Noise channel `T_ε`: keep with probability 1−ε, else uniform.
pub fn noise_channel(q: usize, eps: f64) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |a, b| {
        let keep = if a == b { 1.0 - eps } else { 0.0 };
        keep + eps / q as f64
    })
}

/// `P(X'_S = x | X_ρ = c)` for a sorted leaf subset `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalLaw {
    pub q: usize,
    /// Leaf indices, ascending.
    pub subset: Vec<usize>,
    /// Row-major `[root][config]`; the first leaf of `subset` is the most
    /// significant base-q digit of `config`.
    pub table: Vec<f64>,
}

impl ConditionalLaw {
    pub fn configs(&self) -> usize {
        self.table.len() / self.q
    }

    pub fn row(&self, root: usize) -> &[f64] {
        let k = self.configs();
        &self.table[root * k..(root + 1) * k]
    }

    pub fn with_prior(self, prior: &RootPrior) -> JointLaw {
        let k = self.configs();
        let mut table = self.table;
        for (c, &p) in prior.as_slice().iter().enumerate() {
            table[c * k..(c + 1) * k].iter_mut().for_each(|x| *x *= p);
        }
        JointLaw { q: self.q, subset: self.subset, prior: prior.as_slice().to_vec(), table }
    }
}

/// Joint law of `(X_ρ, X'_S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLaw {
    pub q: usize,
    pub subset: Vec<usize>,
    pub prior: Vec<f64>,
    /// Row-major `[root][config]`, same digit order as [`ConditionalLaw`].
    pub table: Vec<f64>,
}

impl JointLaw {
    pub fn configs(&self) -> usize {
        self.table.len() / self.q
    }

    pub fn get(&self, root: usize, config: usize) -> f64 {
        self.table[root * self.configs() + config]
    }

    /// Marginal law of the leaf configuration.
    pub fn config_marginal(&self) -> Vec<f64> {
        let k = self.configs();
        let mut out = vec![0.0; k];
        for c in 0..self.q {
            for (x, o) in out.iter_mut().enumerate() {
                *o += self.table[c * k + x];
            }
        }
        out
    }

    pub fn decode(&self, config: usize) -> Vec<usize> {
        decode_config(config, self.q, self.subset.len())
    }

    /// CSV with columns `root,config,probability`; `config` lists the leaf
    /// values in subset order separated by spaces.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["root", "config", "probability"])?;
        let k = self.configs();
        for c in 0..self.q {
            for x in 0..k {
                let cfg: Vec<String> = self.decode(x).iter().map(|v| v.to_string()).collect();
                w.write_record([c.to_string(), cfg.join(" "), format!("{:e}", self.table[c * k + x])])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn decode_config(mut config: usize, q: usize, len: usize) -> Vec<usize> {
    let mut digits = vec![0; len];
    for slot in digits.iter_mut().rev() {
        *slot = config % q;
        config /= q;
    }
    digits
}

pub(crate) fn check_table(q: usize, subset_len: usize, cap: u128) -> Result<usize> {
    let mut size: u128 = q as u128;
    for _ in 0..subset_len {
        size = size.saturating_mul(q as u128);
        if size > cap {
            return Err(Error::overflow("joint law table", size, cap));
        }
    }
    Ok((size / q as u128) as usize)
}

fn sorted_subset(t: &TreeTopology, subset: &[usize]) -> Result<Vec<usize>> {
    let mut s = subset.to_vec();
    s.sort_unstable();
    if s.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("leaf subset has duplicates".into()));
    }
    if s.last().is_some_and(|&x| x >= t.leaf_count()) {
        return Err(Error::Invalid("leaf index out of range".into()));
    }
    Ok(s)
}

/// Conditional law of the noisy leaves in `subset` given the root label.
///
/// Dynamic programming over the spanning subtree of `subset`: each vertex
/// carries `P(X'_{S_v} = x | X_v = a)` for the part `S_v` of the subset
/// below it.
pub fn conditional_subset_law(
    t: &TreeTopology,
    m: &TransitionMatrix,
    subset: &[usize],
    eps: f64,
    caps: &OracleCaps,
) -> Result<ConditionalLaw> {
    check_eps(eps)?;
    let q = m.q();
    let subset = sorted_subset(t, subset)?;
    check_table(q, subset.len(), caps.table_entries)?;
    let noise = noise_channel(q, eps);
    let table = subtree_message(t, m, &noise, &subset, 0);
    Ok(ConditionalLaw { q, subset, table })
}

/// Message of vertex `v`: row-major `[a][config of S ∩ below(v)]`.
fn subtree_message(
    t: &TreeTopology,
    m: &TransitionMatrix,
    noise: &DMatrix<f64>,
    subset: &[usize],
    v: usize,
) -> Vec<f64> {
    let q = m.q();
    let range = t.leaf_range(v);
    let lo = subset.partition_point(|&x| x < range.start);
    let hi = subset.partition_point(|&x| x < range.end);
    if lo == hi {
        return vec![1.0; q];
    }
    if t.is_leaf(v) {
        let mut msg = vec![0.0; q * q];
        for a in 0..q {
            for b in 0..q {
                msg[a * q + b] = noise[(a, b)];
            }
        }
        return msg;
    }
    // product over children of Σ_b M[a][b]·child[b][·], earlier children
    // occupying the more significant digits
    let mut acc = vec![1.0; q];
    let mut acc_k = 1;
    for c in t.children(v) {
        let child = subtree_message(t, m, noise, subset, c);
        let ck = child.len() / q;
        if ck == 1 {
            continue;
        }
        let mut edge = vec![0.0; q * ck];
        for a in 0..q {
            for b in 0..q {
                let w = m.get(a, b);
                if w == 0.0 {
                    continue;
                }
                let src = &child[b * ck..(b + 1) * ck];
                let dst = &mut edge[a * ck..(a + 1) * ck];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let mut next = vec![0.0; q * acc_k * ck];
        for a in 0..q {
            for i in 0..acc_k {
                let left = acc[a * acc_k + i];
                let dst = &mut next[a * acc_k * ck + i * ck..a * acc_k * ck + (i + 1) * ck];
                for (d, e) in dst.iter_mut().zip(&edge[a * ck..(a + 1) * ck]) {
                    *d = left * e;
                }
            }
        }
        acc = next;
        acc_k *= ck;
    }
    acc
}

/// Joint law of the root and the noisy leaves in `subset`.
pub fn leaf_subset_law(
    t: &TreeTopology,
    m: &TransitionMatrix,
    prior: &RootPrior,
    subset: &[usize],
    eps: f64,
    caps: &OracleCaps,
) -> Result<JointLaw> {
    if prior.q() != m.q() {
        return Err(Error::Invalid("prior and chain alphabet sizes differ".into()));
    }
    Ok(conditional_subset_law(t, m, subset, eps, caps)?.with_prior(prior))
}

/// Plug-in mutual information `I(X_ρ; X'_S)` in nats.
pub fn mutual_information_root(law: &JointLaw) -> f64 {
    let k = law.configs();
    let marginal = law.config_marginal();
    let mut mi = 0.0;
    for c in 0..law.q {
        let pc = law.prior[c];
        if pc == 0.0 {
            continue;
        }
        for (x, &px) in marginal.iter().enumerate() {
            let p = law.table[c * k + x];
            if p > 0.0 {
                mi += p * (p / (pc * px)).ln();
            }
        }
    }
    mi
}

/// Posterior of the root given the full noisy leaf vector (tree order).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorVector(pub Vec<f64>);

impl PosteriorVector {
    /// Most probable label, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Upward belief propagation; `O(|V|·q²)`.
pub fn root_posterior_bp(
    t: &TreeTopology,
    m: &TransitionMatrix,
    prior: &RootPrior,
    leaves: &[usize],
    eps: f64,
) -> Result<PosteriorVector> {
    check_eps(eps)?;
    let q = m.q();
    if leaves.len() != t.leaf_count() {
        return Err(Error::Invalid(format!(
            "expected {} leaves, got {}",
            t.leaf_count(),
            leaves.len()
        )));
    }
    if leaves.iter().any(|&x| x >= q) {
        return Err(Error::Invalid("leaf label out of range".into()));
    }
    let noise = noise_channel(q, eps);
    let first_leaf = t.leaf_vertex(0);
    let mut msg = vec![0.0; t.vertex_count() * q];
    for (i, &x) in leaves.iter().enumerate() {
        let v = first_leaf + i;
        for a in 0..q {
            msg[v * q + a] = noise[(a, x)];
        }
    }
    let mut edge = vec![0.0; q];
    for v in (0..first_leaf).rev() {
        let mut acc = vec![1.0; q];
        for c in t.children(v) {
            for (a, e) in edge.iter_mut().enumerate() {
                *e = (0..q).map(|b| m.get(a, b) * msg[c * q + b]).sum();
            }
            acc.iter_mut().zip(&edge).for_each(|(x, e)| *x *= e);
        }
        let s: f64 = acc.iter().sum();
        if s > 0.0 {
            acc.iter_mut().for_each(|x| *x /= s);
        }
        msg[v * q..(v + 1) * q].copy_from_slice(&acc);
    }
    let mut post: Vec<f64> = (0..q).map(|a| prior.as_slice()[a] * msg[a]).collect();
    let s: f64 = post.iter().sum();
    if s > 0.0 {
        post.iter_mut().for_each(|x| *x /= s);
    } else {
        return Err(Error::Invalid("observation has zero probability".into()));
    }
    Ok(PosteriorVector(post))
}

/// Which statistic of the leaves the conditional laws are compared on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafProjection {
    /// The full noisy leaf vector.
    Full,
    /// Only the symbol counts `C(x)`.
    Counts,
}

/// `max_{c,c'} d_TV(L(stat(X'_L) | X_ρ = c), L(stat(X'_L) | X_ρ = c'))`.
pub fn tv_reconstruction_gap(
    t: &TreeTopology,
    m: &TransitionMatrix,
    eps: f64,
    projection: LeafProjection,
    caps: &OracleCaps,
) -> Result<f64> {
    let rows: Vec<Vec<f64>> = match projection {
        LeafProjection::Full => {
            let all: Vec<usize> = (0..t.leaf_count()).collect();
            let law = conditional_subset_law(t, m, &all, eps, caps)?;
            (0..m.q()).map(|c| law.row(c).to_vec()).collect()
        }
        LeafProjection::Counts => {
            let laws = count_laws(t, m, eps, caps)?;
            laws.into_iter().map(|l| l.into_values().collect()).collect()
        }
    };
    let mut gap: f64 = 0.0;
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            let tv = 0.5 * rows[a].iter().zip(&rows[b]).map(|(x, y)| (x - y).abs()).sum::<f64>();
            gap = gap.max(tv);
        }
    }
    Ok(gap)
}

/// Law of the leaf symbol counts given the root label, one map per label.
/// Every map has the same key set, in the same (sorted) order.
pub fn count_laws(
    t: &TreeTopology,
    m: &TransitionMatrix,
    eps: f64,
    caps: &OracleCaps,
) -> Result<Vec<BTreeMap<Vec<u32>, f64>>> {
    check_eps(eps)?;
    let q = m.q();
    let noise = noise_channel(q, eps);
    // number of count vectors: C(N + q − 1, q − 1)
    let n = t.leaf_count() as u128;
    let mut support: u128 = 1;
    for j in 1..q as u128 {
        support = support.saturating_mul(n + j) / j;
    }
    if support.saturating_mul(q as u128) > caps.table_entries {
        return Err(Error::overflow("count law table", support * q as u128, caps.table_entries));
    }
    // height-0 laws
    let mut laws: Vec<BTreeMap<Vec<u32>, f64>> = (0..q)
        .map(|a| {
            let mut law = BTreeMap::new();
            for b in 0..q {
                let mut key = vec![0u32; q];
                key[b] = 1;
                law.insert(key, noise[(a, b)]);
            }
            law
        })
        .collect();
    for _ in 0..t.depth() {
        // law of one child's subtree counts given the parent label
        let edge: Vec<BTreeMap<Vec<u32>, f64>> = (0..q)
            .map(|a| {
                let mut law = BTreeMap::new();
                for b in 0..q {
                    let w = m.get(a, b);
                    for (k, p) in &laws[b] {
                        *law.entry(k.clone()).or_insert(0.0) += w * p;
                    }
                }
                law
            })
            .collect();
        laws = edge
            .iter()
            .map(|e| {
                let mut acc = e.clone();
                for _ in 1..t.d() {
                    acc = convolve(&acc, e);
                }
                acc
            })
            .collect();
    }
    // align key sets across labels
    let keys: Vec<Vec<u32>> = {
        let mut all = BTreeMap::new();
        for l in &laws {
            for k in l.keys() {
                all.insert(k.clone(), ());
            }
        }
        all.into_keys().collect()
    };
    Ok(laws
        .into_iter()
        .map(|l| keys.iter().map(|k| (k.clone(), l.get(k).copied().unwrap_or(0.0))).collect())
        .collect())
}

fn convolve(a: &BTreeMap<Vec<u32>, f64>, b: &BTreeMap<Vec<u32>, f64>) -> BTreeMap<Vec<u32>, f64> {
    let mut out = BTreeMap::new();
    for (ka, pa) in a {
        for (kb, pb) in b {
            let key: Vec<u32> = ka.iter().zip(kb).map(|(x, y)| x + y).collect();
            *out.entry(key).or_insert(0.0) += pa * pb;
        }
    }
    out
}

/// `E[e(X_u) e(X_v)^T] = (M^a)^T Π_w M^b` with `w = lca(u, v)`, `a`, `b` the
/// distances from `w`, and `Π_w` the diagonal marginal law at `w`.
pub fn pair_moment(
    t: &TreeTopology,
    m: &TransitionMatrix,
    prior: &RootPrior,
    u: usize,
    v: usize,
) -> DMatrix<f64> {
    let w = t.lca(u, v);
    let dw = t.depth_of(w);
    let marginal = m.propagate(prior.as_slice(), dw);
    let pi_w = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(marginal));
    let a = m.power(t.depth_of(u) - dw);
    let b = m.power(t.depth_of(v) - dw);
    a.transpose() * pi_w * b
}

/// Marginal law of `X_v` at depth `depth`: `ν M^depth`.
pub fn vertex_marginal(m: &TransitionMatrix, prior: &RootPrior, depth: usize) -> Vec<f64> {
    m.propagate(prior.as_slice(), depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> TransitionMatrix {
        TransitionMatrix::example_chain()
    }

    #[test]
    fn empty_subset_law_is_prior() {
        let t = TreeTopology::build(2, 2).unwrap();
        let nu = RootPrior::new(vec![0.2, 0.3, 0.5]).unwrap();
        let law = leaf_subset_law(&t, &example(), &nu, &[], 0.1, &OracleCaps::default()).unwrap();
        assert_eq!(law.configs(), 1);
        assert_eq!(law.table, vec![0.2, 0.3, 0.5]);
        assert_eq!(mutual_information_root(&law), 0.0);
    }

    #[test]
    fn single_leaf_marginal_is_matrix_power() {
        let m = example();
        let t = TreeTopology::build(3, 3).unwrap();
        let nu = RootPrior::new(vec![0.6, 0.3, 0.1]).unwrap();
        let eps = 0.2;
        let law = leaf_subset_law(&t, &m, &nu, &[13], eps, &OracleCaps::default()).unwrap();
        let expect = nalgebra::DVector::from_row_slice(nu.as_slice()).transpose() * m.power(3) * noise_channel(3, eps);
        let got = law.config_marginal();
        for x in 0..3 {
            assert!((got[x] - expect[x]).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_one_law_factorizes() {
        let m = TransitionMatrix::uniform(3).unwrap();
        let t = TreeTopology::build(2, 2).unwrap();
        let nu = RootPrior::new(vec![0.5, 0.25, 0.25]).unwrap();
        let law = leaf_subset_law(&t, &m, &nu, &[0, 2, 3], 0.0, &OracleCaps::default()).unwrap();
        let marg = law.config_marginal();
        for c in 0..3 {
            for x in 0..law.configs() {
                assert!((law.get(c, x) - nu.as_slice()[c] * marg[x]).abs() <= 1e-12);
            }
        }
        assert!(mutual_information_root(&law).abs() < 1e-12);
    }

    #[test]
    fn table_cap_is_enforced() {
        let t = TreeTopology::build(2, 5).unwrap();
        let caps = OracleCaps { table_entries: 1000, ..Default::default() };
        let all: Vec<usize> = (0..32).collect();
        let err = leaf_subset_law(&t, &example(), &RootPrior::uniform(3), &all, 0.0, &caps).unwrap_err();
        assert!(matches!(err, Error::SizeOverflow { .. }));
    }

    #[test]
    fn subset_validation() {
        let t = TreeTopology::build(2, 2).unwrap();
        let caps = OracleCaps::default();
        assert!(conditional_subset_law(&t, &example(), &[1, 1], 0.0, &caps).is_err());
        assert!(conditional_subset_law(&t, &example(), &[4], 0.0, &caps).is_err());
        assert!(conditional_subset_law(&t, &example(), &[0], 1.0, &caps).is_err());
    }

    #[test]
    fn csv_export() {
        let t = TreeTopology::build(2, 1).unwrap();
        let law = leaf_subset_law(&t, &example(), &RootPrior::uniform(3), &[0, 1], 0.0, &OracleCaps::default()).unwrap();
        let mut buf = Vec::new();
        law.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 27);
        assert!(text.starts_with("root,config,probability\n0,0 0,"));
    }

    #[test]
    fn bp_rank_one_returns_prior() {
        let m = TransitionMatrix::uniform(3).unwrap();
        let t = TreeTopology::build(2, 3).unwrap();
        let nu = RootPrior::new(vec![0.1, 0.7, 0.2]).unwrap();
        let post = root_posterior_bp(&t, &m, &nu, &[0, 1, 2, 0, 1, 2, 2, 2], 0.0).unwrap();
        for (a, b) in post.0.iter().zip(nu.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(post.argmax(), 1);
    }

    #[test]
    fn bp_depth_zero_conditions_on_the_root_itself() {
        let m = example();
        let t = TreeTopology::build(2, 0).unwrap();
        let nu = RootPrior::uniform(3);
        let post = root_posterior_bp(&t, &m, &nu, &[2], 0.0).unwrap();
        assert_eq!(post.0, vec![0.0, 0.0, 1.0]);
        let post = root_posterior_bp(&t, &m, &nu, &[2], 0.3).unwrap();
        assert!((post.0[2] - (0.7 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn tv_gap_edge_cases() {
        let caps = OracleCaps::default();
        let t = TreeTopology::build(2, 2).unwrap();
        let m = TransitionMatrix::uniform(3).unwrap();
        assert!(tv_reconstruction_gap(&t, &m, 0.0, LeafProjection::Full, &caps).unwrap() < 1e-15);
        let bsc = TransitionMatrix::bsc(0.9).unwrap();
        let g0 = tv_reconstruction_gap(&t, &bsc, 0.0, LeafProjection::Full, &caps).unwrap();
        let g1 = tv_reconstruction_gap(&t, &bsc, 1.0 - 1e-9, LeafProjection::Full, &caps).unwrap();
        assert!(g0 > 0.5);
        assert!(g1 < 1e-7);
        // counts never separate better than the full vector
        let gc = tv_reconstruction_gap(&t, &bsc, 0.0, LeafProjection::Counts, &caps).unwrap();
        assert!(gc <= g0 + 1e-12);
    }

    #[test]
    fn count_laws_match_full_projection() {
        let caps = OracleCaps::default();
        let t = TreeTopology::build(2, 2).unwrap();
        let m = example();
        let eps = 0.1;
        let laws = count_laws(&t, &m, eps, &caps).unwrap();
        let all: Vec<usize> = (0..4).collect();
        let full = conditional_subset_law(&t, &m, &all, eps, &caps).unwrap();
        for c in 0..3 {
            let mut projected: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
            for (x, &p) in full.row(c).iter().enumerate() {
                let mut key = vec![0u32; 3];
                for v in decode_config(x, 3, 4) {
                    key[v] += 1;
                }
                *projected.entry(key).or_insert(0.0) += p;
            }
            for (k, p) in &laws[c] {
                assert!((projected[k] - p).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pair_moment_sibling_contraction() {
        // φ = (1, −1, 1): Mφ = (1, 0, −1), so φᵀ MᵀΠM φ = Π₀ + Π₂
        let m = example();
        let t = TreeTopology::build(2, 3).unwrap();
        let pi = RootPrior::stationary(&m).unwrap();
        let phi = nalgebra::DVector::from_vec(vec![1.0, -1.0, 1.0]);
        let sib = pair_moment(&t, &m, &RootPrior::uniform(3), 7, 8);
        // depth-2 parent: marginal already stationary
        assert!(((phi.transpose() * &sib * &phi)[(0, 0)] - 0.5).abs() < 1e-12);
        let far = pair_moment(&t, &m, &pi, 7, 9);
        assert!((phi.transpose() * &far * &phi)[(0, 0)].abs() < 1e-12);
    }
}
