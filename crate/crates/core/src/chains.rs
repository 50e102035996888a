//! Broadcast channels: validation, stationary law and spectral structure.

use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums may deviate from one by at most this much.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Relative singular-value cutoff used for numerical rank.
pub const RANK_TOL: f64 = 1e-9;
/// Two rows count as distinct when some coordinate differs by more than this.
pub const DISTINCT_ROW_TOL: f64 = 1e-12;

/// A validated row-stochastic q×q matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    q: usize,
    // row-major
    entries: Vec<f64>,
    ergodic: bool,
}

/// On-disk chain description: `{"q": 3, "rows": [[...], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChainFile {
    pub q: usize,
    pub rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    /// Validates a raw table. Rows are never renormalized.
    pub fn validate(rows: &[Vec<f64>]) -> Result<Self> {
        let q = rows.len();
        if q < 2 {
            return Err(Error::Invalid(format!("alphabet size {q} < 2")));
        }
        let mut entries = Vec::with_capacity(q * q);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != q {
                return Err(Error::Invalid(format!(
                    "row {i} has {} entries, expected {q}",
                    row.len()
                )));
            }
            for (j, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::Invalid(format!("entry ({i}, {j}) is not finite")));
                }
                if x < 0.0 {
                    return Err(Error::NegativeEntry { row: i, col: j, value: x });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NonStochastic { row: i, sum });
            }
            entries.extend_from_slice(row);
        }
        let ergodic = primitive_support(q, &entries);
        Ok(Self { q, entries, ergodic })
    }

    pub fn from_chain_file(file: &ChainFile) -> Result<Self> {
        if file.rows.len() != file.q {
            return Err(Error::Invalid(format!(
                "q = {} but {} rows given",
                file.q,
                file.rows.len()
            )));
        }
        Self::validate(&file.rows)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ChainFile = serde_json::from_str(text)?;
        Self::from_chain_file(&file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_chain_file(&self) -> ChainFile {
        ChainFile { q: self.q, rows: self.rows() }
    }

    /// Binary symmetric channel with second eigenvalue `theta`.
    pub fn bsc(theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::Domain(format!("theta = {theta} outside [0, 1]")));
        }
        let stay = (1.0 + theta) / 2.0;
        let flip = (1.0 - theta) / 2.0;
        Self::validate(&[vec![stay, flip], vec![flip, stay]])
    }

    /// Three-state chain whose square is rank one.
    pub fn example_chain() -> Self {
        Self::validate(&[
            vec![0.5, 0.0, 0.5],
            vec![0.25, 0.5, 0.25],
            vec![0.0, 1.0, 0.0],
        ])
        .expect("literal chain is stochastic")
    }

    /// Rank-one chain with every row uniform.
    pub fn uniform(q: usize) -> Result<Self> {
        Self::validate(&vec![vec![1.0 / q as f64; q]; q])
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn is_ergodic(&self) -> bool {
        self.ergodic
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.q + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.q..(from + 1) * self.q]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.q).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.q, self.q, &self.entries)
    }

    /// `M^k` (identity for k = 0).
    pub fn power(&self, k: usize) -> DMatrix<f64> {
        let m = self.matrix();
        let mut p = DMatrix::identity(self.q, self.q);
        for _ in 0..k {
            p = &p * &m;
        }
        p
    }

    /// Distribution after `k` steps from `start`.
    pub fn propagate(&self, start: &[f64], k: usize) -> Vec<f64> {
        let mut cur = start.to_vec();
        let mut next = vec![0.0; self.q];
        for _ in 0..k {
            next.iter_mut().for_each(|x| *x = 0.0);
            for (a, &pa) in cur.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (b, nb) in next.iter_mut().enumerate() {
                    *nb += pa * self.get(a, b);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn stationary(&self) -> Result<Vec<f64>> {
        if !self.ergodic {
            return Err(Error::NotErgodic);
        }
        let q = self.q;
        // (M^T - I) pi = 0 with the last equation replaced by sum(pi) = 1
        let mut a = self.matrix().transpose() - DMatrix::identity(q, q);
        for j in 0..q {
            a[(q - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(q);
        b[q - 1] = 1.0;
        let pi = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Invalid("singular stationary system".into()))?;
        let mut pi: Vec<f64> = pi.iter().map(|&x| if x < 0.0 { 0.0 } else { x }).collect();
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|x| *x /= s);
        Ok(pi)
    }

    pub fn has_distinct_rows(&self) -> bool {
        for i in 0..self.q {
            for j in i + 1..self.q {
                let differ = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .any(|(a, b)| (a - b).abs() > DISTINCT_ROW_TOL);
                if !differ {
                    return false;
                }
            }
        }
        true
    }

    /// Smallest `k ≤ q` with `M^k` of numerical rank one.
    pub fn rank_one_power(&self) -> Option<usize> {
        let m = self.matrix();
        let mut p = m.clone();
        for k in 1..=self.q {
            if numerical_rank(&p) == 1 {
                return Some(k);
            }
            p = &p * &m;
        }
        None
    }

    pub fn spectral(&self) -> SpectralData {
        let rank_one_power = self.rank_one_power();
        let m = self.matrix();
        if rank_one_power.is_some() {
            let generalized_eigvec = if numerical_rank(&m) > 1 {
                generalized_null_vector(&m)
            } else {
                None
            };
            return SpectralData {
                lambda2: Complex::new(0.0, 0.0),
                lambda2_modulus: 0.0,
                second_eigenvector: None,
                rank_one_power,
                generalized_eigvec,
            };
        }
        let lambda2 = second_eigenvalue(&m);
        let v = eigenvector(&m, lambda2);
        SpectralData {
            lambda2,
            lambda2_modulus: lambda2.norm(),
            second_eigenvector: Some(v),
            rank_one_power: None,
            generalized_eigvec: None,
        }
    }
}

/// Spectral summary of a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    /// Second eigenvalue (zero when some power of M is rank one).
    pub lambda2: Complex<f64>,
    pub lambda2_modulus: f64,
    /// Unit right eigenvector for `lambda2`; present iff `lambda2 != 0`.
    pub second_eigenvector: Option<Vec<Complex<f64>>>,
    pub rank_one_power: Option<usize>,
    /// Unit φ with Mφ ≠ 0 and M²φ = 0; present iff λ₂ = 0 and rank(M) > 1.
    pub generalized_eigvec: Option<Vec<f64>>,
}

impl SpectralData {
    pub fn require_generalized_eigvec(&self) -> Result<&[f64]> {
        self.generalized_eigvec
            .as_deref()
            .ok_or(Error::DegenerateChannel)
    }

    /// Leaf-subset size below which leaves carry no root information:
    /// `2^⌊(ℓ−1)/(k−1)⌋`. The root may have a single child in the spanning
    /// subtree of a subset, so only depths `1..ℓ` are forced to branch.
    /// `None` means unbounded (k = 1, ℓ ≥ 1) and `Some(1)` means no
    /// prediction (λ₂ ≠ 0 or ℓ = 0).
    pub fn independence_threshold(&self, depth: usize) -> Option<u128> {
        if depth == 0 {
            return Some(1);
        }
        self.power_of_two_threshold(depth - 1)
    }

    /// The nominal bound `2^⌊ℓ/(k−1)⌋`, which also counts a branching at
    /// the root. It is exceeded on concrete instances (e.g. any single leaf
    /// at depth 1); kept for reporting.
    pub fn nominal_independence_threshold(&self, depth: usize) -> Option<u128> {
        self.power_of_two_threshold(depth)
    }

    fn power_of_two_threshold(&self, levels: usize) -> Option<u128> {
        match self.rank_one_power {
            Some(1) => None,
            Some(k) => {
                let e = levels / (k - 1);
                if e >= 127 {
                    None
                } else {
                    Some(1u128 << e)
                }
            }
            None => Some(1),
        }
    }
}

pub(crate) fn singular_values_sorted(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let s = singular_values_sorted(m);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > RANK_TOL * top).count()
}

/// Orthonormal basis (as columns) of the numerical null space.
pub(crate) fn null_space(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let mut basis = Vec::new();
    let mut covered = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= RANK_TOL * top {
            basis.push(v_t.row(i).transpose());
            covered += 1;
        }
    }
    // thin SVD of a square matrix has n singular values; nothing else to add
    debug_assert!(covered <= n);
    basis
}

fn project(basis: &[DVector<f64>], x: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(x.len());
    for b in basis {
        out += b * b.dot(x);
    }
    out
}

fn generalized_null_vector(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let q = m.nrows();
    let n1 = null_space(m);
    let n2 = null_space(&(m * m));
    for i in 0..q {
        let mut e = DVector::zeros(q);
        e[i] = 1.0;
        let in_n2 = project(&n2, &e);
        let w = &in_n2 - project(&n1, &in_n2);
        let norm = w.norm();
        if norm > 1e-6 {
            let mut phi: Vec<f64> = (w / norm).iter().copied().collect();
            if let Some(first) = phi.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    phi.iter_mut().for_each(|x| *x = -*x);
                }
            }
            return Some(phi);
        }
    }
    None
}

/// Eigenvalue of largest modulus after removing the one closest to 1.
fn second_eigenvalue(m: &DMatrix<f64>) -> Complex<f64> {
    let eig: Vec<Complex<f64>> = m.clone().complex_eigenvalues().iter().copied().collect();
    let one = Complex::new(1.0, 0.0);
    let perron = eig
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - one).norm().total_cmp(&(b.1 - one).norm()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    eig.iter()
        .enumerate()
        .filter(|(i, _)| *i != perron)
        .map(|(_, z)| *z)
        .max_by(|a, b| {
            a.norm()
                .total_cmp(&b.norm())
                .then(a.im.total_cmp(&b.im))
                .then(a.re.total_cmp(&b.re))
        })
        .unwrap_or(Complex::new(0.0, 0.0))
}

fn eigenvector(m: &DMatrix<f64>, lambda: Complex<f64>) -> Vec<Complex<f64>> {
    let q = m.nrows();
    let a = DMatrix::from_fn(q, q, |i, j| {
        let d = if i == j { lambda } else { Complex::new(0.0, 0.0) };
        Complex::new(m[(i, j)], 0.0) - d
    });
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let mut v: Vec<Complex<f64>> = v_t.row(idx).iter().map(|z| z.conj()).collect();
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    // fix the phase: first non-negligible entry real and positive
    let pivot = v.iter().copied().find(|z| z.norm() > 1e-9).unwrap_or(Complex::new(1.0, 0.0));
    let phase = pivot.conj() / pivot.norm();
    v.iter_mut().for_each(|z| *z = *z * phase / norm);
    v
}

/// Support digraph is strongly connected and aperiodic iff some power of the
/// 0/1 support matrix is entrywise positive (Wielandt bound (q−1)²+1).
fn primitive_support(q: usize, entries: &[f64]) -> bool {
    let support: Vec<bool> = entries.iter().map(|&x| x > 0.0).collect();
    let mut p = support.clone();
    let steps = (q - 1) * (q - 1);
    for _ in 0..steps {
        let mut next = vec![false; q * q];
        for i in 0..q {
            for k in 0..q {
                if p[i * q + k] {
                    for j in 0..q {
                        if support[k * q + j] {
                            next[i * q + j] = true;
                        }
                    }
                }
            }
        }
        p = next;
    }
    p.iter().all(|&x| x)
}
