mod common;

use nalgebra::{Complex, DMatrix};
use treecast_core::broadcast::{sample_hidden, sample_repeated, HiddenState, RepeatedParams, RootPrior};
use treecast_core::chains::TransitionMatrix;
use treecast_core::phylo_sq::{
    contract, default_alpha, exact_layer_stats, group_layer, reconstruct_tree, recover_label, run_sq_pipeline,
    select_contraction_vector, AlwaysDown, AlwaysUp, ExactSource, OracleMode, Query, RandomSign, SampleSource,
    VStatOracle,
};
use treecast_core::root_estimators::{estimate_law, row_match_hier, RowMatchConfig};
use treecast_core::trees::{canonical_form, CanonicalTree, LeafPermutation, TreeTopology};
use treecast_core::Error;

use common::*;

/// Sibling statistic of two depth-`ℓ−h` vertices from path enumeration and
/// leaf-enumerated estimate laws.
fn brute_stat(m: &TransitionMatrix, prior: &[f64], d: usize, depth: usize, h: usize, u: usize, v: usize) -> f64 {
    let t = TreeTopology::build(d, depth).unwrap();
    let raw = path_union_pair_moment(&t, m, prior, u, v);
    let law = brute_estimate_law(m, d, h, 0.01);
    let q = m.q();
    let e = DMatrix::from_fn(q, q, |a, b| {
        let mut s = 0.0;
        for x in 0..q {
            for y in 0..q {
                s += law[x][a] * raw[x][y] * law[y][b];
            }
        }
        s
    });
    contract(&select_contraction_vector(m).unwrap(), &e)
}

/// Most likely root estimate under the biased prior; ties go to the lower label.
/// The estimate law is checked against leaf enumeration in `root_estimators`.
fn vote_winner(m: &TransitionMatrix, d: usize, depth: usize, eps: f64, y: usize) -> usize {
    let law = estimate_law(m, d, depth, eps, &RowMatchConfig::default()).unwrap();
    let prior = biased_prior(m.q(), y);
    let mass: Vec<f64> = (0..m.q()).map(|b| (0..m.q()).map(|a| prior[a] * law[a][b]).sum()).collect();
    (0..m.q()).fold(0, |best, b| if mass[b] > mass[best] + 1e-12 { b } else { best })
}

#[test]
fn exact_layer_statistics_match_enumeration() {
    let m = TransitionMatrix::example_chain();
    let cfg = RowMatchConfig::default();
    for (d, depth) in [(8, 2), (2, 3), (3, 3)] {
        let t = TreeTopology::build(d, depth).unwrap();
        for y in 0..3 {
            let prior = RootPrior::biased(3, y);
            let stats = exact_layer_stats(&m, &prior, d, depth, 0.01, &cfg).unwrap();
            assert_eq!(stats.len(), depth - 1);
            for s in &stats {
                let level: Vec<usize> = t.level(depth - s.layer).collect();
                let sib = brute_stat(&m, prior.as_slice(), d, depth, s.layer, level[0], level[1]);
                let far = (1..level.len())
                    .filter(|&j| t.parent(level[j]) != t.parent(level[0]))
                    .map(|j| brute_stat(&m, prior.as_slice(), d, depth, s.layer, level[0], level[j]))
                    .fold(0.0, f64::max);
                assert!((s.sibling - sib).abs() < 1e-12, "d={d} ℓ={depth} layer {}", s.layer);
                assert!((s.non_sibling_max - far).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pinned_example_chain_statistics() {
    // d = 8, ℓ = 2, ε = 0.01: sibling 0.2723 / 0.1634 / 0.0545 for Y* = 0, 1, 2
    let m = TransitionMatrix::example_chain();
    let cfg = RowMatchConfig::default();
    let want = [0.2723, 0.1634, 0.0545];
    for (y, w) in want.iter().enumerate() {
        let s = exact_layer_stats(&m, &RootPrior::biased(3, y), 8, 2, 0.01, &cfg).unwrap()[0];
        assert!((s.sibling - w).abs() < 5e-4);
        assert!(s.non_sibling_max < 1e-5);
    }
    let alpha = default_alpha(&m, 8, 2, 0.01, &cfg).unwrap();
    assert!((alpha - 0.0272).abs() < 1e-3);
}

#[test]
fn default_alpha_with_nonzero_second_eigenvalue() {
    let m = TransitionMatrix::bsc(0.8).unwrap();
    let alpha = default_alpha(&m, 2, 3, 0.0, &RowMatchConfig::default()).unwrap();
    // (0.64 − 0.4096)·(1/2)/4
    assert!((alpha - 0.0288).abs() < 1e-12);
}

#[test]
fn contraction_vector_requires_distinct_rows() {
    assert!(matches!(select_contraction_vector(&TransitionMatrix::uniform(3).unwrap()), Err(Error::DegenerateChannel)));
    let phi = select_contraction_vector(&TransitionMatrix::bsc(0.6).unwrap()).unwrap();
    assert!((phi[0] + phi[1]).norm() < 1e-12);
    // complex φ: the contraction uses the conjugate, so |φᴴ I φ| = |φ|²
    let rot = TransitionMatrix::validate(&[vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8], vec![0.8, 0.1, 0.1]]).unwrap();
    let phi = select_contraction_vector(&rot).unwrap();
    assert!(phi.iter().any(|z| z.im.abs() > 1e-6));
    let norm2: f64 = phi.iter().map(Complex::norm_sqr).sum();
    assert!((contract(&phi, &DMatrix::identity(3, 3)) - norm2).abs() < 1e-12);
}

#[test]
fn grouping_reports_component_sizes() {
    let g = |pairs: &[(usize, usize, f64)], n: usize| {
        let mut out = vec![vec![0.0; n]; n];
        for &(i, j, v) in pairs {
            out[i][j] = v;
            out[j][i] = v;
        }
        out
    };
    let ok = g(&[(0, 2, 1.0), (1, 3, 0.95), (0, 1, 0.1)], 4);
    let (groups, gap) = group_layer(&ok, 0.2, 2, 0).unwrap();
    assert_eq!(groups, vec![vec![0, 2], vec![1, 3]]);
    assert_eq!((gap.within_min, gap.between_max), (0.95, 0.1));
    // α too large merges everything
    match group_layer(&ok, 0.95, 2, 3) {
        Err(Error::GroupingFailure { layer, sizes, expected }) => {
            assert_eq!((layer, sizes, expected), (3, vec![4], 2));
        }
        other => panic!("{other:?}"),
    }
    // α too small leaves singletons
    assert!(matches!(group_layer(&ok, 0.01, 2, 0), Err(Error::GroupingFailure { .. })));
}

#[test]
fn exact_mode_recovers_every_placement_below_half_the_gap() {
    let m = TransitionMatrix::example_chain();
    let cfg = RowMatchConfig::default();
    for (d, depth) in [(8, 2), (2, 3), (3, 3)] {
        let t = TreeTopology::build(d, depth).unwrap();
        let gap = (0..3)
            .flat_map(|y| exact_layer_stats(&m, &RootPrior::biased(3, y), d, depth, 0.01, &cfg).unwrap())
            .map(|s| s.gap())
            .fold(f64::INFINITY, f64::min);
        for seed in 0..20u64 {
            let hidden = sample_hidden(&t, 3, seed);
            let truth = canonical_form(&t, &hidden.tau);
            for frac in [0.01, 0.25, 0.5, 0.99] {
                let alpha = frac * 0.5 * gap;
                let mut src = ExactSource::new(d, depth, &m, &hidden, 0.01, cfg).unwrap();
                let rec = reconstruct_tree(&mut src, &m, alpha, d, depth).unwrap();
                assert_eq!(rec.tree, truth);
                let y_hat = recover_label(&mut src, &rec.tree).unwrap();
                assert_eq!(y_hat, vote_winner(&m, d, depth, 0.01, hidden.y_star));
                if d == 8 {
                    assert_eq!(y_hat, hidden.y_star);
                }
                assert_eq!(canonical_form(&t, &rec.tau_hat), truth);
            }
        }
    }
}

#[test]
fn exact_source_rejects_false_subtrees() {
    let m = TransitionMatrix::example_chain();
    let hidden = HiddenState { y_star: 0, tau: LeafPermutation::identity(4) };
    let mut src = ExactSource::new(2, 2, &m, &hidden, 0.0, RowMatchConfig::default()).unwrap();
    let wrong = CanonicalTree::node(vec![
        CanonicalTree::node(vec![CanonicalTree::Leaf(0), CanonicalTree::Leaf(2)]),
        CanonicalTree::node(vec![CanonicalTree::Leaf(1), CanonicalTree::Leaf(3)]),
    ]);
    assert!(recover_label(&mut src, &wrong).is_err());
}

#[test]
fn samples_recover_a_strong_signal_tree() {
    let m = TransitionMatrix::bsc(0.9).unwrap();
    let cfg = RowMatchConfig::default();
    let params = RepeatedParams { d: 2, depth: 3, m: 20_000, eps: 0.0, chain: m.clone() };
    let t = params.tree().unwrap();
    let alpha = default_alpha(&m, 2, 3, 0.0, &cfg).unwrap();
    for seed in 0..5 {
        let ds = sample_repeated(&params, seed).unwrap();
        let obs = ds.observations();
        let mut src = SampleSource::new(&obs, &m, cfg).unwrap();
        let rec = reconstruct_tree(&mut src, &m, alpha, 2, 3).unwrap();
        assert_eq!(rec.tree, canonical_form(&t, &ds.hidden.tau));
        assert_eq!(recover_label(&mut src, &rec.tree).unwrap(), vote_winner(&m, 2, 3, 0.0, ds.hidden.y_star));
    }
}

#[test]
fn reconstruction_validates_shape() {
    let m = TransitionMatrix::example_chain();
    let hidden = HiddenState { y_star: 0, tau: LeafPermutation::identity(4) };
    let mut src = ExactSource::new(2, 2, &m, &hidden, 0.0, RowMatchConfig::default()).unwrap();
    assert!(matches!(reconstruct_tree(&mut src, &m, 0.01, 2, 3), Err(Error::Invalid(_))));
    assert!(ExactSource::new(2, 3, &m, &hidden, 0.0, RowMatchConfig::default()).is_err());
}

#[test]
fn vstat_responses_respect_the_band_with_brute_force_means() {
    let m = TransitionMatrix::example_chain();
    let params = RepeatedParams { d: 2, depth: 2, m: 60, eps: 0.1, chain: m.clone() };
    let t = params.tree().unwrap();
    let hidden = HiddenState { y_star: 2, tau: LeafPermutation::from_vec(vec![2, 0, 3, 1]).unwrap() };
    let law = brute_leaf_law(&t, &m, 0.1);
    let observed = observed_law(&law, 3, 4, 2, hidden.tau.as_slice());
    let tables: Vec<Vec<f64>> = (0..20).map(|k| (0..81).map(|x| ((x * 37 + k * 11) % 17) as f64 / 16.0).collect()).collect();
    let fns: Vec<Box<dyn Fn(&[usize]) -> f64>> = tables
        .iter()
        .map(|tab| {
            let tab = tab.clone();
            Box::new(move |x: &[usize]| tab[encode(x, 3)]) as Box<dyn Fn(&[usize]) -> f64>
        })
        .collect();
    let modes: Vec<OracleMode> = vec![
        OracleMode::Honest,
        OracleMode::Adversarial(Box::new(AlwaysUp)),
        OracleMode::Adversarial(Box::new(AlwaysDown)),
        OracleMode::Adversarial(Box::new(RandomSign::new(4))),
    ];
    for mode in modes {
        let mut o = VStatOracle::new(&params, hidden.clone(), mode, 9).unwrap();
        let queries: Vec<Query<'_>> = fns.iter().map(|f| Query::Function(f.as_ref())).collect();
        let responses = o.query_many(&queries).unwrap();
        for (k, r) in responses.iter().enumerate() {
            let p: f64 = observed.iter().zip(&tables[k]).map(|(w, f)| w * f).sum();
            let band = (1.0 / 60.0f64).max((p * (1.0 - p) / 60.0).sqrt());
            assert!((r - p).abs() <= band + 1e-12, "query {k}: {r} vs {p}");
            assert!((o.log()[k].p - p).abs() < 1e-12);
        }
        assert_eq!(o.band_violations(), 0);
    }
}

#[test]
fn sq_pipeline_counts_queries() {
    let m = TransitionMatrix::example_chain();
    let params = RepeatedParams { d: 8, depth: 2, m: 12_800, eps: 0.01, chain: m.clone() };
    let alpha = default_alpha(&m, 8, 2, 0.01, &RowMatchConfig::default()).unwrap();
    let t = params.tree().unwrap();
    let mut oracle = VStatOracle::from_seed(&params, OracleMode::Honest, 5).unwrap();
    let out = run_sq_pipeline(&mut oracle, &m, 8, 2, alpha).unwrap();
    let hidden = sample_hidden(&t, 3, 5);
    assert_eq!(out.reconstruction.tree, canonical_form(&t, &hidden.tau));
    // all leaf pairs once, q² entries each, plus q label queries
    assert_eq!(out.queries, (64 * 63 / 2 * 9 + 3) as u64);
    assert_eq!(oracle.band_violations(), 0);
    assert!(VStatOracle::from_seed(&RepeatedParams { m: 0, ..params }, OracleMode::Honest, 1).is_err());
}

#[test]
fn vstat_means_for_overlapping_and_look_alike_nodes() {
    // {0,1} and {0,2} share a minimum leaf and a height; a leaf nested in a
    // node is not independent of it
    let m = TransitionMatrix::example_chain();
    let cfg = RowMatchConfig::default();
    let params = RepeatedParams { d: 2, depth: 2, m: 100, eps: 0.1, chain: m.clone() };
    let t = params.tree().unwrap();
    let hidden = HiddenState { y_star: 0, tau: LeafPermutation::identity(4) };
    let observed = observed_law(&brute_leaf_law(&t, &m, 0.1), 3, 4, 0, hidden.tau.as_slice());
    let pair = |a, b| CanonicalTree::node(vec![CanonicalTree::Leaf(a), CanonicalTree::Leaf(b)]);
    let (true_pair, fake_pair, leaf) = (pair(0, 1), pair(0, 2), CanonicalTree::Leaf(0));
    let cases = [(&true_pair, &pair(2, 3)), (&fake_pair, &pair(1, 3)), (&leaf, &true_pair), (&true_pair, &true_pair)];
    let mut o = VStatOracle::new(&params, hidden, OracleMode::Honest, 1).unwrap();
    for (u, v) in cases {
        for (a, b) in [(0, 0), (0, 2), (1, 1)] {
            o.query(&Query::PairIndicator { u, v, a, b, chain: &m, cfg }).unwrap();
            let want: f64 = (0..81)
                .map(|x| {
                    let xs = digits(x, 3, 4);
                    let hit = row_match_hier(u, &xs, &m, &cfg) == a && row_match_hier(v, &xs, &m, &cfg) == b;
                    if hit { observed[x] } else { 0.0 }
                })
                .sum();
            let got = o.log().last().unwrap().p;
            assert!((got - want).abs() < 1e-12, "{u:?} {v:?} ({a}, {b}): {got} vs {want}");
        }
    }
}
