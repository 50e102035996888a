//! Exact correlation of product features with the hidden label in the
//! repeated model.
//!
//! Conditional on `(Y*, τ)` the samples are independent, so for
//! `f(𝕏) = ∏_i f_i(X^{(i)}_{S_i})` the conditional expectation factorizes
//! into per-sample terms, each an exact subset-law computation. The outer
//! average over τ enumerates all leaf placements.

use std::collections::HashMap;

use super::{conditional_subset_law, OracleCaps};
use crate::broadcast::{RepeatedParams, RootPrior};
use crate::error::{Error, Result};

/// A function of one sample's observed coordinates `coords`, tabulated over
/// `[q]^{|coords|}` with the first coordinate most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFactor {
    pub sample: usize,
    pub coords: Vec<usize>,
    pub table: Vec<f64>,
}

impl LocalFactor {
    /// `∏_j 1(x_{coords[j]} = values[j])`.
    pub fn indicator(sample: usize, coords: Vec<usize>, values: &[usize], q: usize) -> Self {
        let idx = values.iter().fold(0usize, |acc, &v| acc * q + v);
        let mut table = vec![0.0; q.pow(coords.len() as u32)];
        table[idx] = 1.0;
        Self { sample, coords, table }
    }
}

/// Product of local factors over distinct samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProductFeature {
    pub factors: Vec<LocalFactor>,
}

impl ProductFeature {
    pub fn new(factors: Vec<LocalFactor>) -> Self {
        Self { factors }
    }

    /// Total number of coordinates the feature depends on.
    pub fn degree(&self) -> usize {
        self.factors.iter().map(|f| f.coords.len()).sum()
    }

    fn validate(&self, m: usize, n: usize, q: usize) -> Result<()> {
        let mut seen = vec![false; m];
        for f in &self.factors {
            if f.sample >= m {
                return Err(Error::Invalid(format!("sample {} out of range", f.sample)));
            }
            if std::mem::replace(&mut seen[f.sample], true) {
                return Err(Error::Invalid(format!("two factors for sample {}", f.sample)));
            }
            let mut c = f.coords.clone();
            c.sort_unstable();
            if c.windows(2).any(|w| w[0] == w[1]) || c.last().is_some_and(|&x| x >= n) {
                return Err(Error::Invalid("factor coordinates invalid".into()));
            }
            if f.table.len() != q.pow(f.coords.len() as u32) {
                return Err(Error::Invalid("factor table has wrong size".into()));
            }
        }
        Ok(())
    }
}

/// Exact `E_R[f(𝕏)·(1(Y* = c) − 1/q)]`.
pub fn repeated_model_corr(
    params: &RepeatedParams,
    feature: &ProductFeature,
    c: usize,
    caps: &OracleCaps,
) -> Result<f64> {
    let t = params.tree()?;
    let q = params.chain.q();
    let n = t.leaf_count();
    if c >= q {
        return Err(Error::Invalid(format!("target label {c} out of range")));
    }
    feature.validate(params.m, n, q)?;
    let mut perms: u128 = 1;
    for k in 2..=n as u128 {
        perms = perms.saturating_mul(k);
        if perms > caps.permutations {
            return Err(Error::overflow("leaf permutations", perms, caps.permutations));
        }
    }

    // E[f_i | root = r, tree leaves L] keyed by (factor, tree leaves)
    let mut cache: HashMap<(usize, Vec<usize>), Vec<f64>> = HashMap::new();
    let priors: Vec<RootPrior> = (0..q).map(|y| RootPrior::biased(q, y)).collect();

    // inverse placement: observed coordinate j sits at tree leaf inv[j]
    let mut inv: Vec<usize> = (0..n).collect();
    let mut sum_by_label = vec![0.0; q];
    loop {
        let mut per_label = vec![1.0; q];
        for (fi, f) in feature.factors.iter().enumerate() {
            let leaves: Vec<usize> = f.coords.iter().map(|&j| inv[j]).collect();
            let cond = match cache.get(&(fi, leaves.clone())) {
                Some(v) => v.clone(),
                None => {
                    let v = factor_given_root(&t, params, &leaves, &f.table, caps)?;
                    cache.insert((fi, leaves), v.clone());
                    v
                }
            };
            for (y, slot) in per_label.iter_mut().enumerate() {
                let e: f64 = priors[y].as_slice().iter().zip(&cond).map(|(p, e)| p * e).sum();
                *slot *= e;
            }
        }
        sum_by_label.iter_mut().zip(&per_label).for_each(|(s, p)| *s += p);
        if !next_permutation(&mut inv) {
            break;
        }
    }
    let perms = perms as f64;
    let qf = q as f64;
    Ok(sum_by_label
        .iter()
        .enumerate()
        .map(|(y, s)| {
            let centered = if y == c { 1.0 - 1.0 / qf } else { -1.0 / qf };
            centered * s / perms / qf
        })
        .sum())
}

/// `E[f(X'_leaves) | X_ρ = r]` for each root label `r`; `leaves` in the
/// factor's coordinate order.
fn factor_given_root(
    t: &crate::trees::TreeTopology,
    params: &RepeatedParams,
    leaves: &[usize],
    table: &[f64],
    caps: &OracleCaps,
) -> Result<Vec<f64>> {
    let q = params.chain.q();
    let law = conditional_subset_law(t, &params.chain, leaves, params.eps, caps)?;
    // law.subset is sorted; position of each factor coordinate in it
    let rank: Vec<usize> = leaves
        .iter()
        .map(|l| law.subset.binary_search(l).expect("leaf present"))
        .collect();
    let k = law.configs();
    let len = leaves.len();
    let mut out = vec![0.0; q];
    for (r, o) in out.iter_mut().enumerate() {
        let row = law.row(r);
        for (x, &p) in row.iter().enumerate().take(k) {
            if p == 0.0 {
                continue;
            }
            let sorted_digits = super::decode_config(x, q, len);
            let idx = rank.iter().fold(0usize, |acc, &s| acc * q + sorted_digits[s]);
            *o += p * table[idx];
        }
    }
    Ok(out)
}

/// Lexicographic successor; false once the last permutation is reached.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}
