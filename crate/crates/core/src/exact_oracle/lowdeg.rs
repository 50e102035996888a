//! Degree-restricted maximum correlation with the root.
//!
//! For `Y = 1(X_ρ = c) − ν(c)` and `g(x) = E[Y | X'_L = x]`, the supremum of
//! `E[f·Y] / sqrt(E[f²])` over functions of Efron–Stein degree ≤ D equals
//! the L²(P) norm of the projection of `g` onto that subspace. The subspace
//! is spanned by products of one-hot indicators `∏_{i∈U} 1(x_i = a_i)` with
//! `|U| ≤ D`; dropping the last symbol from each coordinate gives a basis.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{decode_config, leaf_subset_law, JointLaw, OracleCaps};
use crate::broadcast::RootPrior;
use crate::chains::TransitionMatrix;
use crate::error::{Error, Result};
use crate::trees::TreeTopology;

/// Relative eigenvalue cutoff of the Gram pseudoinverse.
pub const GRAM_CUTOFF: f64 = 1e-10;

/// Full leaf law of one instance, reused across degrees and targets.
#[derive(Debug, Clone)]
pub struct LowDegreeAnalysis {
    law: JointLaw,
    marginal: Vec<f64>,
    n: usize,
    caps: OracleCaps,
}

impl LowDegreeAnalysis {
    pub fn new(
        t: &TreeTopology,
        m: &TransitionMatrix,
        prior: &RootPrior,
        eps: f64,
        caps: &OracleCaps,
    ) -> Result<Self> {
        let n = t.leaf_count();
        if n > 63 {
            return Err(Error::overflow("leaf count for low-degree analysis", n as u128, 63));
        }
        let all: Vec<usize> = (0..n).collect();
        let law = leaf_subset_law(t, m, prior, &all, eps, caps)?;
        let marginal = law.config_marginal();
        Ok(Self { law, marginal, n, caps: *caps })
    }

    pub fn leaf_count(&self) -> usize {
        self.n
    }

    pub fn law(&self) -> &JointLaw {
        &self.law
    }

    /// `P(x)·E[Y | x] = P(c, x) − ν(c)·P(x)` for every configuration.
    fn weighted_target(&self, c: usize) -> Vec<f64> {
        let nu_c = self.law.prior[c];
        self.marginal
            .iter()
            .enumerate()
            .map(|(x, &px)| self.law.get(c, x) - nu_c * px)
            .collect()
    }

    /// `sqrt(Σ_x P(x)·E[Y | x]²)`: the unrestricted correlation.
    pub fn ceiling(&self, c: usize) -> f64 {
        let h = self.weighted_target(c);
        h.iter()
            .zip(&self.marginal)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&hx, &p)| hx * hx / p)
            .sum::<f64>()
            .sqrt()
    }

    pub fn corr(&self, degree: usize, c: usize) -> Result<f64> {
        if c >= self.law.q {
            return Err(Error::Invalid(format!("target label {c} out of range")));
        }
        let q = self.law.q;
        let degree = degree.min(self.n);
        let basis = BasisIndex::new(self.n, q, degree, self.caps.basis)?;
        let dim = basis.dim;
        let h = self.weighted_target(c);
        let mut gram = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        let mut active = Vec::new();
        for (x, &px) in self.marginal.iter().enumerate() {
            if px == 0.0 && h[x] == 0.0 {
                continue;
            }
            let digits = decode_config(x, q, self.n);
            active.clear();
            basis.active(&digits, &mut active);
            for &i in &active {
                b[i] += h[x];
                for &j in &active {
                    gram[(i, j)] += px;
                }
            }
        }
        let eig = SymmetricEigen::new(gram);
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let mut norm2 = 0.0;
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > GRAM_CUTOFF * top {
                let proj = eig.eigenvectors.column(k).dot(&b);
                norm2 += proj * proj / lambda;
            }
        }
        Ok(norm2.max(0.0).sqrt())
    }

    /// `max_c` of [`corr`](Self::corr).
    pub fn max_corr_over_labels(&self, degree: usize) -> Result<f64> {
        let mut best: f64 = 0.0;
        for c in 0..self.law.q {
            best = best.max(self.corr(degree, c)?);
        }
        Ok(best)
    }
}

/// Maps (coordinate subset, assignment) pairs to basis indices.
struct BasisIndex {
    q: usize,
    degree: usize,
    base: HashMap<u64, usize>,
    dim: usize,
}

impl BasisIndex {
    fn new(n: usize, q: usize, degree: usize, cap: usize) -> Result<Self> {
        let mut base = HashMap::new();
        let mut dim: usize = 0;
        let mut subset = Vec::new();
        fn walk(
            start: usize,
            n: usize,
            q: usize,
            degree: usize,
            subset: &mut Vec<usize>,
            base: &mut HashMap<u64, usize>,
            dim: &mut usize,
            cap: usize,
        ) -> Result<()> {
            let mask = subset.iter().fold(0u64, |acc, &i| acc | (1 << i));
            base.insert(mask, *dim);
            *dim += (q - 1).pow(subset.len() as u32);
            if *dim > cap {
                return Err(Error::overflow("low-degree basis", *dim as u128, cap as u128));
            }
            if subset.len() == degree {
                return Ok(());
            }
            for i in start..n {
                subset.push(i);
                walk(i + 1, n, q, degree, subset, base, dim, cap)?;
                subset.pop();
            }
            Ok(())
        }
        walk(0, n, q, degree, &mut subset, &mut base, &mut dim, cap)?;
        Ok(Self { q, degree, base, dim })
    }

    /// Indices of basis functions equal to 1 at `digits`.
    fn active(&self, digits: &[usize], out: &mut Vec<usize>) {
        let coords: Vec<usize> = (0..digits.len()).filter(|&i| digits[i] + 1 < self.q).collect();
        let mut chosen = Vec::with_capacity(self.degree);
        self.collect(digits, &coords, 0, &mut chosen, out);
    }

    fn collect(&self, digits: &[usize], coords: &[usize], start: usize, chosen: &mut Vec<usize>, out: &mut Vec<usize>) {
        let mask = chosen.iter().fold(0u64, |acc, &i| acc | (1 << i));
        let offset = chosen.iter().fold(0usize, |acc, &i| acc * (self.q - 1) + digits[i]);
        out.push(self.base[&mask] + offset);
        if chosen.len() == self.degree {
            return;
        }
        for k in start..coords.len() {
            chosen.push(coords[k]);
            self.collect(digits, coords, k + 1, chosen, out);
            chosen.pop();
        }
    }
}

/// Degree-≤D maximum correlation between the noisy leaves and
/// `1(X_ρ = c) − ν(c)`.
pub fn max_corr_low_degree(
    t: &TreeTopology,
    m: &TransitionMatrix,
    prior: &RootPrior,
    eps: f64,
    degree: usize,
    c: usize,
    caps: &OracleCaps,
) -> Result<f64> {
    LowDegreeAnalysis::new(t, m, prior, eps, caps)?.corr(degree, c)
}

/// Correlation achievable without any degree restriction.
pub fn information_ceiling(
    t: &TreeTopology,
    m: &TransitionMatrix,
    prior: &RootPrior,
    eps: f64,
    c: usize,
    caps: &OracleCaps,
) -> Result<f64> {
    Ok(LowDegreeAnalysis::new(t, m, prior, eps, caps)?.ceiling(c))
}
