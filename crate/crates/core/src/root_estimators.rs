//! Root estimators that run in time polynomial in the tree size: recursive
//! row matching, BP argmax, and the linear count statistic.

use std::fmt;
use std::io::Write;

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::broadcast::{check_eps, BroadcastSampler, RootPrior};
use crate::chains::{TransitionMatrix, RANK_TOL};
use crate::error::{Error, Result};
use crate::exact_oracle::{noise_channel, root_posterior_bp};
use crate::rng;
use crate::trees::{CanonicalTree, TreeTopology};

/// Distance between an empirical distribution and a row of the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Half the ℓ₁ distance.
    #[default]
    Tv,
    L2,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Tv => 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>(),
            Distance::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

/// Ties always go to the lowest row index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct RowMatchConfig {
    pub distance: Distance,
}

/// Row of `m` closest to the empirical distribution of `counts`.
pub fn match_row(m: &TransitionMatrix, counts: &[usize], cfg: &RowMatchConfig) -> usize {
    let total: usize = counts.iter().sum();
    let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for c in 0..m.q() {
        let dist = cfg.distance.eval(&emp, m.row(c));
        if dist < best_dist {
            best = c;
            best_dist = dist;
        }
    }
    best
}

/// Bottom-up row matching on a known tree; `leaves` in tree order.
pub fn row_match_root(
    t: &TreeTopology,
    m: &TransitionMatrix,
    leaves: &[usize],
    cfg: &RowMatchConfig,
) -> Result<usize> {
    let q = m.q();
    check_leaves(t, q, leaves)?;
    let d = t.d();
    let mut layer = leaves.to_vec();
    let mut counts = vec![0usize; q];
    for _ in 0..t.depth() {
        layer = layer
            .chunks(d)
            .map(|children| {
                counts.iter_mut().for_each(|c| *c = 0);
                children.iter().for_each(|&x| counts[x] += 1);
                match_row(m, &counts, cfg)
            })
            .collect();
    }
    Ok(layer[0])
}

/// Row matching over a recovered hierarchy; leaf ids of `tree` index into
/// `observed`.
pub fn row_match_hier(
    tree: &CanonicalTree,
    observed: &[usize],
    m: &TransitionMatrix,
    cfg: &RowMatchConfig,
) -> usize {
    match tree {
        CanonicalTree::Leaf(i) => observed[*i],
        CanonicalTree::Node(children) => {
            let mut counts = vec![0usize; m.q()];
            for c in children {
                counts[row_match_hier(c, observed, m, cfg)] += 1;
            }
            match_row(m, &counts, cfg)
        }
    }
}

/// Law of the row-matching output at a vertex of the given height,
/// conditional on that vertex's true label: `out[a][b] = P(estimate = b | X = a)`.
///
/// Exact: the `d` child estimates are i.i.d. given the parent label, so the
/// output depends only on their count vector, enumerated with multinomial
/// weights.
pub fn estimate_law(
    m: &TransitionMatrix,
    d: usize,
    height: usize,
    eps: f64,
    cfg: &RowMatchConfig,
) -> Result<Vec<Vec<f64>>> {
    check_eps(eps)?;
    let q = m.q();
    let noise = noise_channel(q, eps);
    let mut law: Vec<Vec<f64>> = (0..q).map(|a| (0..q).map(|b| noise[(a, b)]).collect()).collect();
    if height == 0 {
        return Ok(law);
    }
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=d).scan(0.0, |acc, k| {
            *acc += (k as f64).ln();
            Some(*acc)
        }))
        .collect();
    let compositions = compositions(d, q);
    let decisions: Vec<usize> = compositions.iter().map(|c| match_row(m, c, cfg)).collect();
    for _ in 0..height {
        let mut next = vec![vec![0.0; q]; q];
        for a in 0..q {
            // law of one child's estimate given parent label a
            let p: Vec<f64> = (0..q).map(|b| (0..q).map(|c| m.get(a, c) * law[c][b]).sum()).collect();
            let ln_p: Vec<f64> = p.iter().map(|x| x.ln()).collect();
            for (counts, &dec) in compositions.iter().zip(&decisions) {
                let mut ln_w = ln_fact[d];
                let mut zero = false;
                for (b, &k) in counts.iter().enumerate() {
                    if k > 0 {
                        if p[b] == 0.0 {
                            zero = true;
                            break;
                        }
                        ln_w += k as f64 * ln_p[b] - ln_fact[k];
                    }
                }
                if !zero {
                    next[a][dec] += ln_w.exp();
                }
            }
        }
        law = next;
    }
    Ok(law)
}

/// All vectors of `q` nonnegative integers summing to `d`.
fn compositions(d: usize, q: usize) -> Vec<Vec<usize>> {
    fn walk(rest: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            cur.push(rest);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=rest {
            cur.push(k);
            walk(rest - k, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    walk(d, q, &mut Vec::with_capacity(q), &mut out);
    out
}

pub fn bp_argmax_root(
    t: &TreeTopology,
    m: &TransitionMatrix,
    prior: &RootPrior,
    leaves: &[usize],
    eps: f64,
) -> Result<usize> {
    Ok(root_posterior_bp(t, m, prior, leaves, eps)?.argmax())
}

fn check_leaves(t: &TreeTopology, q: usize, leaves: &[usize]) -> Result<()> {
    if leaves.len() != t.leaf_count() {
        return Err(Error::Invalid(format!("expected {} leaves, got {}", t.leaf_count(), leaves.len())));
    }
    if leaves.iter().any(|&x| x >= q) {
        return Err(Error::Invalid("leaf label out of range".into()));
    }
    Ok(())
}

/// Estimator choice for accuracy experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    RowMatch(RowMatchConfig),
    Bp,
    Constant(usize),
}

impl Estimator {
    pub fn estimate(
        &self,
        t: &TreeTopology,
        m: &TransitionMatrix,
        prior: &RootPrior,
        eps: f64,
        leaves: &[usize],
    ) -> Result<usize> {
        match self {
            Estimator::RowMatch(cfg) => row_match_root(t, m, leaves, cfg),
            Estimator::Bp => bp_argmax_root(t, m, prior, leaves, eps),
            Estimator::Constant(c) => Ok(*c),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::RowMatch(RowMatchConfig { distance: Distance::Tv }) => f.write_str("row_match"),
            Estimator::RowMatch(RowMatchConfig { distance: Distance::L2 }) => f.write_str("row_match_l2"),
            Estimator::Bp => f.write_str("bp"),
            Estimator::Constant(c) => write!(f, "constant_{c}"),
        }
    }
}

/// Linear statistic `S = Σ_i s_{x_i}` with `E[S | X_ρ = c] = v_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountStatistic {
    pub coefficients: Vec<Complex<f64>>,
    pub eigenvector: Vec<Complex<f64>>,
    pub lambda2: Complex<f64>,
    pub d: usize,
    pub depth: usize,
}

impl CountStatistic {
    /// `s = v / (d·λ₂)^ℓ`.
    pub fn fit(m: &TransitionMatrix, d: usize, depth: usize) -> Result<Self> {
        let spec = m.spectral();
        if spec.lambda2_modulus < RANK_TOL {
            return Err(Error::SingularChannel);
        }
        let v = spec.second_eigenvector.ok_or(Error::SingularChannel)?;
        let scale = (spec.lambda2 * d as f64).powi(depth as i32);
        let coefficients = v.iter().map(|x| x / scale).collect();
        Ok(Self { coefficients, eigenvector: v, lambda2: spec.lambda2, d, depth })
    }

    pub fn eval(&self, leaves: &[usize]) -> Complex<f64> {
        leaves.iter().map(|&x| self.coefficients[x]).sum()
    }

    /// `d^ℓ (M^ℓ s)_c` for every `c`.
    pub fn conditional_mean(&self, m: &TransitionMatrix) -> Vec<Complex<f64>> {
        let mk = complexify(&m.power(self.depth));
        let s = DVector::from_vec(self.coefficients.clone());
        let scale = (self.d as f64).powi(self.depth as i32);
        (mk * s).iter().map(|x| x * scale).collect()
    }

    /// Exact `E[|S|² | X_ρ = c]` under noise `eps`, from pair counts by
    /// lca depth.
    pub fn second_moment(&self, m: &TransitionMatrix, eps: f64) -> Result<Vec<f64>> {
        check_eps(eps)?;
        let q = m.q();
        let l = self.depth;
        let d = self.d as f64;
        let noise = complexify(&noise_channel(q, eps));
        let s = DVector::from_vec(self.coefficients.clone());
        // (M^j T_ε s) for j = 0..=ℓ
        let ts = &noise * &s;
        let mut down: Vec<DVector<Complex<f64>>> = vec![ts.clone()];
        let mc = complexify(&m.matrix());
        for j in 1..=l {
            let next = &mc * &down[j - 1];
            down.push(next);
        }
        let abs_s2: Vec<f64> = self.coefficients.iter().map(|x| x.norm_sqr()).collect();
        let noisy_abs = noise_channel(q, eps) * DVector::from_vec(abs_s2);
        let mut out = vec![0.0; q];
        for (c, o) in out.iter_mut().enumerate() {
            let leaf_law = m.power(l);
            let mut total = d.powi(l as i32) * (0..q).map(|b| leaf_law[(c, b)] * noisy_abs[b]).sum::<f64>();
            for h in 0..l {
                let pairs = d.powi(h as i32) * d * (d - 1.0) * d.powi(2 * (l - h - 1) as i32);
                let mh = m.power(h);
                let inner: f64 = (0..q).map(|w| mh[(c, w)] * down[l - h][w].norm_sqr()).sum();
                total += pairs * inner;
            }
            *o = total;
        }
        Ok(out)
    }
}

fn complexify(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    m.map(|x| Complex::new(x, 0.0))
}

/// One row of an accuracy report; `class` is a label or `all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub estimator: String,
    pub d: usize,
    #[serde(rename = "ℓ")]
    pub depth: usize,
    #[serde(rename = "ε")]
    pub eps: f64,
    pub trials: usize,
    pub class: String,
    pub errors: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Per-class and overall error rates with 95% Wilson intervals.
///
/// The root is fixed to each label in turn for `trials` runs; the overall
/// row weights classes by the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub rows: Vec<AccuracyRow>,
    pub worst_class_error: f64,
}

impl AccuracyReport {
    pub fn class_row(&self, c: usize) -> &AccuracyRow {
        &self.rows[c]
    }

    pub fn overall(&self) -> &AccuracyRow {
        self.rows.last().expect("report has an overall row")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Trial `i` of class `c` uses stream `c·trials + i` of `seed`.
pub fn accuracy_report(
    estimator: &Estimator,
    t: &TreeTopology,
    m: &TransitionMatrix,
    prior: &RootPrior,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<AccuracyReport> {
    check_eps(eps)?;
    if trials == 0 {
        return Err(Error::Invalid("trials must be at least 1".into()));
    }
    let q = m.q();
    let name = estimator.to_string();
    let mut rows = Vec::with_capacity(q + 1);
    let mut labels = Vec::new();
    let mut worst: f64 = 0.0;
    let mut overall_rate = 0.0;
    let mut overall_errors = 0.0;
    for c in 0..q {
        let mut point = vec![0.0; q];
        point[c] = 1.0;
        let sampler = BroadcastSampler::new(m, &RootPrior::new(point)?)?;
        let mut errors = 0usize;
        for i in 0..trials {
            let mut r = rng::stream(seed, (c * trials + i) as u64);
            sampler.sample_into(t, &mut r, &mut labels);
            let leaves = &mut labels[t.leaf_vertex(0)..];
            if eps > 0.0 {
                for x in leaves.iter_mut() {
                    if r.random::<f64>() < eps {
                        *x = r.random_range(0..q);
                    }
                }
            }
            if estimator.estimate(t, m, prior, eps, leaves)? != c {
                errors += 1;
            }
        }
        let (lo, hi) = wilson_interval(errors, trials);
        let rate = errors as f64 / trials as f64;
        worst = worst.max(rate);
        overall_rate += prior.as_slice()[c] * rate;
        overall_errors += prior.as_slice()[c] * errors as f64;
        rows.push(AccuracyRow {
            estimator: name.clone(),
            d: t.d(),
            depth: t.depth(),
            eps,
            trials,
            class: c.to_string(),
            errors: errors as f64,
            ci_low: lo,
            ci_high: hi,
        });
    }
    // normal interval on the prior-weighted error rate
    let var: f64 = (0..q)
        .map(|c| {
            let p = rows[c].errors / trials as f64;
            prior.as_slice()[c].powi(2) * p * (1.0 - p) / trials as f64
        })
        .sum();
    let half = Z95 * var.sqrt();
    rows.push(AccuracyRow {
        estimator: name,
        d: t.d(),
        depth: t.depth(),
        eps,
        trials: trials * q,
        class: "all".into(),
        errors: overall_errors,
        ci_low: (overall_rate - half).max(0.0),
        ci_high: (overall_rate + half).min(1.0),
    });
    Ok(AccuracyReport { rows, worst_class_error: worst })
}
