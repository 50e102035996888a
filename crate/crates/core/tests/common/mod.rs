//! Brute-force reference computations shared by the integration tests.
//!
//! Everything here is deliberately naive: full enumeration over vertex
//! labelings, explicit Gram–Schmidt, characteristic polynomials. None of it
//! calls into the library's inference code.

#![allow(dead_code)]

use nalgebra::Complex;
use treecast_core::chains::TransitionMatrix;
use treecast_core::trees::TreeTopology;

pub fn noise(q: usize, eps: f64) -> Vec<Vec<f64>> {
    (0..q)
        .map(|a| (0..q).map(|b| if a == b { 1.0 - eps + eps / q as f64 } else { eps / q as f64 }).collect())
        .collect()
}

/// `P(observed leaf = x | parent = a)`: one transition followed by noise.
pub fn emission(m: &TransitionMatrix, eps: f64) -> Vec<Vec<f64>> {
    let q = m.q();
    let t = noise(q, eps);
    (0..q).map(|a| (0..q).map(|x| (0..q).map(|b| m.get(a, b) * t[b][x]).sum()).collect()).collect()
}

/// `law[r][config]` over all noisy leaves, first leaf most significant,
/// by enumerating every labeling of the internal vertices.
pub fn brute_leaf_law(t: &TreeTopology, m: &TransitionMatrix, eps: f64) -> Vec<Vec<f64>> {
    let q = m.q();
    let n = t.leaf_count();
    let configs = q.pow(n as u32);
    if t.depth() == 0 {
        return noise(q, eps);
    }
    let emit = emission(m, eps);
    let first_leaf = t.leaf_vertex(0);
    let mut law = vec![vec![0.0; configs]; q];
    let internal = first_leaf - 1;
    for (r, row) in law.iter_mut().enumerate() {
        for code in 0..q.pow(internal as u32) {
            let mut labels = vec![r];
            labels.extend(digits(code, q, internal));
            let mut w = 1.0;
            for v in 1..first_leaf {
                w *= m.get(labels[(v - 1) / t.d()], labels[v]);
            }
            if w == 0.0 {
                continue;
            }
            let mut dist = vec![w];
            for i in 0..n {
                let parent = labels[(first_leaf + i - 1) / t.d()];
                dist = dist.iter().flat_map(|&p| emit[parent].iter().map(move |e| p * e)).collect();
            }
            row.iter_mut().zip(&dist).for_each(|(o, p)| *o += p);
        }
    }
    law
}

pub fn digits(mut config: usize, q: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = config % q;
        config /= q;
    }
    out
}

pub fn encode(values: &[usize], q: usize) -> usize {
    values.iter().fold(0, |acc, &v| acc * q + v)
}

/// Marginal of every row onto the sorted `subset`.
pub fn marginal_rows(law: &[Vec<f64>], q: usize, n: usize, subset: &[usize]) -> Vec<Vec<f64>> {
    let k = q.pow(subset.len() as u32);
    law.iter()
        .map(|row| {
            let mut out = vec![0.0; k];
            for (x, &p) in row.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let d = digits(x, q, n);
                let key = subset.iter().fold(0, |acc, &i| acc * q + d[i]);
                out[key] += p;
            }
            out
        })
        .collect()
}

/// `I(R; X)` in nats for `P(R = r, X = x) = prior[r]·rows[r][x]`.
pub fn mutual_information(prior: &[f64], rows: &[Vec<f64>]) -> f64 {
    let k = rows[0].len();
    let px: Vec<f64> = (0..k).map(|x| prior.iter().zip(rows).map(|(p, r)| p * r[x]).sum()).collect();
    let mut mi = 0.0;
    for (r, row) in rows.iter().enumerate() {
        for x in 0..k {
            let joint = prior[r] * row[x];
            if joint > 0.0 {
                mi += joint * (row[x] / px[x]).ln();
            }
        }
    }
    mi
}

/// Posterior over the root by Bayes' rule on the full leaf law.
pub fn brute_posterior(law: &[Vec<f64>], prior: &[f64], config: usize) -> Option<Vec<f64>> {
    let joint: Vec<f64> = law.iter().zip(prior).map(|(row, p)| row[config] * p).collect();
    let z: f64 = joint.iter().sum();
    (z > 0.0).then(|| joint.iter().map(|j| j / z).collect())
}

/// `E[e(X_u) e(X_v)ᵀ]` by enumerating the labels on the union of the two
/// root paths; every other vertex sums out.
pub fn path_union_pair_moment(t: &TreeTopology, m: &TransitionMatrix, prior: &[f64], u: usize, v: usize) -> Vec<Vec<f64>> {
    let q = m.q();
    let mut verts = Vec::new();
    for mut x in [u, v] {
        loop {
            verts.push(x);
            match t.parent(x) {
                Some(p) => x = p,
                None => break,
            }
        }
    }
    verts.sort_unstable();
    verts.dedup();
    let slot = |x: usize| verts.binary_search(&x).unwrap();
    let mut out = vec![vec![0.0; q]; q];
    for code in 0..q.pow(verts.len() as u32) {
        let labels = digits(code, q, verts.len());
        let mut w = prior[labels[0]];
        for (i, &x) in verts.iter().enumerate().skip(1) {
            w *= m.get(labels[slot(t.parent(x).unwrap())], labels[i]);
        }
        out[labels[slot(u)]][labels[slot(v)]] += w;
    }
    out
}

/// Row matching under total variation with lowest-index ties, written out
/// independently of the library.
pub fn tv_match(m: &TransitionMatrix, counts: &[usize]) -> usize {
    let total: usize = counts.iter().sum();
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for c in 0..m.q() {
        let dist: f64 = 0.5 * (0..m.q()).map(|b| (counts[b] as f64 / total as f64 - m.get(c, b)).abs()).sum::<f64>();
        if dist < best_dist {
            best = c;
            best_dist = dist;
        }
    }
    best
}

/// `P(row-match estimate = b | X_v = a)` at height `h`, by enumerating the
/// full noisy leaf vector below a single vertex.
pub fn brute_estimate_law(m: &TransitionMatrix, d: usize, height: usize, eps: f64) -> Vec<Vec<f64>> {
    let q = m.q();
    let t = TreeTopology::build(d, height).unwrap();
    let law = brute_leaf_law(&t, m, eps);
    let n = t.leaf_count();
    let mut out = vec![vec![0.0; q]; q];
    for (a, row) in law.iter().enumerate() {
        for (x, &p) in row.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut layer = digits(x, q, n);
            while layer.len() > 1 {
                layer = layer
                    .chunks(d)
                    .map(|ch| {
                        let mut counts = vec![0; q];
                        ch.iter().for_each(|&y| counts[y] += 1);
                        tv_match(m, &counts)
                    })
                    .collect();
            }
            out[a][layer[0]] += p;
        }
    }
    out
}

/// Norm of the L²(P) projection of `g` onto the span of `features`, where
/// `weighted[x] = P(x)·g(x)`. Modified Gram–Schmidt with a relative cutoff.
pub fn projection_norm(p: &[f64], weighted: &[f64], features: &[Vec<f64>]) -> f64 {
    let inner = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(p).map(|((x, y), w)| x * y * w).sum() };
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut total = 0.0;
    for f in features {
        let mut v = f.clone();
        let start = inner(&v, &v).sqrt();
        for _ in 0..2 {
            for e in &basis {
                let c = inner(&v, e);
                v.iter_mut().zip(e).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = inner(&v, &v).sqrt();
        if norm > 1e-9 * start.max(1e-300) && norm > 1e-14 {
            v.iter_mut().for_each(|x| *x /= norm);
            let c: f64 = v.iter().zip(weighted).map(|(x, h)| x * h).sum();
            total += c * c;
            basis.push(v);
        }
    }
    total.sqrt()
}

/// Every product of full one-hot indicators over at most `degree` of the
/// `n` coordinates, tabulated over `[q]^n` (overcomplete on purpose).
pub fn indicator_features(n: usize, q: usize, degree: usize) -> Vec<Vec<f64>> {
    let configs = q.pow(n as u32);
    let all: Vec<Vec<usize>> = (0..configs).map(|x| digits(x, q, n)).collect();
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        let coords: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
        if coords.len() > degree {
            continue;
        }
        for vals in 0..q.pow(coords.len() as u32) {
            let want = digits(vals, q, coords.len());
            out.push(all.iter().map(|x| f64::from(u8::from(coords.iter().zip(&want).all(|(&i, &w)| x[i] == w)))).collect());
        }
    }
    out
}

/// Observed-coordinate law of one repeated-model sample: `P(x | Y* = y, τ)`.
/// `map[i]` is the observed position of tree leaf `i`.
pub fn observed_law(tree_law: &[Vec<f64>], q: usize, n: usize, y: usize, map: &[usize]) -> Vec<f64> {
    let prior = biased_prior(q, y);
    let mut out = vec![0.0; q.pow(n as u32)];
    for tree_cfg in 0..out.len() {
        let leaves = digits(tree_cfg, q, n);
        let mut observed = vec![0; n];
        for (i, &x) in leaves.iter().enumerate() {
            observed[map[i]] = x;
        }
        let p: f64 = (0..q).map(|r| prior[r] * tree_law[r][tree_cfg]).sum();
        out[encode(&observed, q)] += p;
    }
    out
}

/// `ν_y = (2/3)·δ_y + (1/3)·uniform`.
pub fn biased_prior(q: usize, y: usize) -> Vec<f64> {
    let base = 1.0 / (3.0 * q as f64);
    (0..q).map(|r| if r == y { 2.0 / 3.0 + base } else { base }).collect()
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            let j = if k % 2 == 0 { i } else { 0 };
            a.swap(j, k - 1);
        }
    }
    let mut out = Vec::new();
    heap(n, &mut (0..n).collect(), &mut out);
    out
}

/// Characteristic polynomial coefficients `[1, c_1, …, c_q]` of `a` by the
/// Faddeev–LeVerrier recursion.
pub fn char_poly(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mul = |x: &[Vec<f64>], y: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| x[i][k] * y[k][j]).sum()).collect()).collect()
    };
    let mut coeffs = vec![1.0];
    let mut mk = vec![vec![0.0; n]; n];
    for k in 1..=n {
        let mut next = mul(a, &mk);
        // M_k = A·M_{k−1} + c_{k−1}·I ; c_k = −tr(A·M_k)/k
        for (i, row) in next.iter_mut().enumerate() {
            row[i] += coeffs[k - 1];
        }
        let amk = mul(a, &next);
        let tr: f64 = (0..n).map(|i| amk[i][i]).sum();
        coeffs.push(-tr / k as f64);
        mk = next;
    }
    coeffs
}

/// Roots of a monic polynomial by Durand–Kerner iteration.
pub fn poly_roots(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let n = coeffs.len() - 1;
    let eval = |z: Complex<f64>| coeffs.iter().fold(Complex::new(0.0, 0.0), |acc, &c| acc * z + c);
    let seed = Complex::new(0.4, 0.9);
    let mut roots: Vec<Complex<f64>> = (0..n).map(|i| seed.powu(i as u32)).collect();
    for _ in 0..2000 {
        let mut delta: f64 = 0.0;
        for i in 0..n {
            let mut denom = Complex::new(1.0, 0.0);
            for j in 0..n {
                if i != j {
                    denom *= roots[i] - roots[j];
                }
            }
            if denom.norm() == 0.0 {
                denom = Complex::new(1e-12, 0.0);
            }
            let step = eval(roots[i]) / denom;
            roots[i] -= step;
            delta = delta.max(step.norm());
        }
        if delta < 1e-15 {
            break;
        }
    }
    roots
}

/// Eigenvalue moduli of `m`, sorted descending.
pub fn eigen_moduli(m: &TransitionMatrix) -> Vec<f64> {
    let rows = m.rows();
    let mut out: Vec<f64> = poly_roots(&char_poly(&rows)).iter().map(|z| z.norm()).collect();
    out.sort_by(|a, b| b.partial_cmp(a).unwrap());
    out
}
