use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sources::{argmax_first, ExactModel, MomentSource};
use super::{reconstruct_tree, PairMoments, Reconstruction};
use crate::broadcast::{check_eps, sample_hidden, sample_observed, BroadcastSampler, HiddenState, RepeatedParams};
use crate::chains::TransitionMatrix;
use crate::error::{Error, Result};
use crate::exact_oracle::{leaf_subset_law, OracleCaps};
use crate::rng::{self, StreamRng};
use crate::root_estimators::{row_match_hier, RowMatchConfig};
use crate::trees::CanonicalTree;

/// Size of the Monte Carlo reference pool used for `p` when neither exact
/// enumeration nor a structured formula applies.
pub const REFERENCE_POOL: usize = 16_384;

/// Chooses the sign of the maximal allowed error.
pub trait AdversaryPolicy {
    /// `+1.0` or `−1.0`.
    fn sign(&mut self, p: f64) -> f64;
}

/// Independent fair sign per query.
#[derive(Debug, Clone)]
pub struct RandomSign(StreamRng);

impl RandomSign {
    pub fn new(seed: u64) -> Self {
        Self(rng::stream(seed, 0))
    }
}

impl AdversaryPolicy for RandomSign {
    fn sign(&mut self, _p: f64) -> f64 {
        if self.0.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysUp;

impl AdversaryPolicy for AlwaysUp {
    fn sign(&mut self, _p: f64) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysDown;

impl AdversaryPolicy for AlwaysDown {
    fn sign(&mut self, _p: f64) -> f64 {
        -1.0
    }
}

pub enum OracleMode {
    /// Fresh empirical mean, clamped into the legal band.
    Honest,
    /// `p ± band` with the sign chosen by the policy.
    Adversarial(Box<dyn AdversaryPolicy>),
}

impl std::fmt::Debug for OracleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleMode::Honest => f.write_str("Honest"),
            OracleMode::Adversarial(_) => f.write_str("Adversarial"),
        }
    }
}

/// A `[0, 1]`-valued function of one observed sample.
#[derive(Clone, Copy)]
pub enum Query<'a> {
    Function(&'a dyn Fn(&[usize]) -> f64),
    /// `1(X̂_u = a)·1(X̂_v = b)` with row-matching estimates over `u`, `v`.
    PairIndicator {
        u: &'a CanonicalTree,
        v: &'a CanonicalTree,
        a: usize,
        b: usize,
        chain: &'a TransitionMatrix,
        cfg: RowMatchConfig,
    },
    /// `1(X̂_root = label)`.
    LabelIndicator { tree: &'a CanonicalTree, label: usize, chain: &'a TransitionMatrix, cfg: RowMatchConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub p: f64,
    pub response: f64,
    pub band: f64,
}

impl QueryRecord {
    pub fn within_band(&self) -> bool {
        (self.response - self.p).abs() <= self.band * (1.0 + 1e-12) + 1e-15
    }
}

/// VSTAT(m) oracle over the repeated model with a fixed hidden state.
///
/// The hidden state never leaves the oracle; algorithms only see responses.
#[derive(Debug)]
pub struct VStatOracle {
    m: usize,
    mode: OracleMode,
    model: ExactModel,
    hidden: HiddenState,
    sampler: BroadcastSampler,
    eps: f64,
    rng: StreamRng,
    seed: u64,
    caps: OracleCaps,
    pool: Option<Vec<Vec<usize>>>,
    enumeration: Option<Option<Vec<(Vec<usize>, f64)>>>,
    log: Vec<QueryRecord>,
}

impl VStatOracle {
    /// `params.m` is the oracle's sample-size parameter.
    pub fn new(params: &RepeatedParams, hidden: HiddenState, mode: OracleMode, seed: u64) -> Result<Self> {
        check_eps(params.eps)?;
        if params.m == 0 {
            return Err(Error::Invalid("VSTAT parameter m must be positive".into()));
        }
        let tree = params.tree()?;
        let q = params.chain.q();
        if hidden.y_star >= q || hidden.tau.len() != tree.leaf_count() {
            return Err(Error::Invalid("hidden state does not fit the model".into()));
        }
        let model = ExactModel::new(tree, params.chain.clone(), &hidden, params.eps, &RowMatchConfig::default())?;
        let sampler = BroadcastSampler::new(&params.chain, &model.prior)?;
        Ok(Self {
            m: params.m,
            mode,
            model,
            hidden,
            sampler,
            eps: params.eps,
            rng: rng::stream(seed, 1),
            seed,
            caps: OracleCaps::default(),
            pool: None,
            enumeration: None,
            log: Vec::new(),
        })
    }

    /// Hidden state drawn from stream 0 of `seed`, as in [`crate::broadcast::sample_repeated`].
    pub fn from_seed(params: &RepeatedParams, mode: OracleMode, seed: u64) -> Result<Self> {
        let tree = params.tree()?;
        let hidden = sample_hidden(&tree, params.chain.q(), seed);
        Self::new(params, hidden, mode, seed)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn q(&self) -> usize {
        self.model.chain.q()
    }

    pub fn leaf_count(&self) -> usize {
        self.model.tree.leaf_count()
    }

    pub fn query_count(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn log(&self) -> &[QueryRecord] {
        &self.log
    }

    /// `max(1/m, √(p(1−p)/m))`.
    pub fn band(&self, p: f64) -> f64 {
        let m = self.m as f64;
        (1.0 / m).max((p * (1.0 - p) / m).max(0.0).sqrt())
    }

    /// Number of logged responses outside their band.
    pub fn band_violations(&self) -> usize {
        self.log.iter().filter(|r| !r.within_band()).count()
    }

    pub fn query(&mut self, query: &Query<'_>) -> Result<f64> {
        Ok(self.query_many(std::slice::from_ref(query))?[0])
    }

    /// Answers several queries; in honest mode they share one fresh batch
    /// of `m` samples. Each query is logged separately.
    pub fn query_many(&mut self, queries: &[Query<'_>]) -> Result<Vec<f64>> {
        let mut truth = Vec::with_capacity(queries.len());
        let mut pairs = HashMap::new();
        for q in queries {
            truth.push(self.true_mean(q, &mut pairs)?);
        }
        let responses: Vec<f64> = match &mut self.mode {
            OracleMode::Adversarial(policy) => {
                let m = self.m as f64;
                truth
                    .iter()
                    .map(|&p| {
                        let band = (1.0 / m).max((p * (1.0 - p) / m).max(0.0).sqrt());
                        (p + policy.sign(p) * band).clamp(0.0, 1.0)
                    })
                    .collect()
            }
            OracleMode::Honest => {
                let batch = self.fresh_batch();
                let means = evaluate(queries, &batch)?;
                means
                    .iter()
                    .zip(&truth)
                    .map(|(&r, &p)| {
                        let band = self.band(p);
                        r.clamp(p - band, p + band).clamp(0.0, 1.0)
                    })
                    .collect()
            }
        };
        for (&p, &response) in truth.iter().zip(&responses) {
            let band = self.band(p);
            self.log.push(QueryRecord { p, response, band });
        }
        Ok(responses)
    }

    fn fresh_batch(&mut self) -> Vec<Vec<usize>> {
        let mut scratch = Vec::new();
        (0..self.m)
            .map(|_| sample_observed(&self.model.tree, &self.sampler, &self.hidden, self.eps, &mut self.rng, &mut scratch))
            .collect()
    }

    /// Exact `p` when a formula or full enumeration is available, else the
    /// mean over the reference pool.
    fn true_mean<'q>(&mut self, query: &Query<'q>, pairs: &mut PairCache<'q>) -> Result<f64> {
        let structured = match *query {
            Query::PairIndicator { u, v, a, b, chain, cfg } if self.native(chain, &cfg) => {
                pairs.entry((u, v)).or_insert_with(|| self.model.pair(u, v)).as_ref().map(|e| e[(a, b)])
            }
            Query::LabelIndicator { tree, label, chain, cfg } if self.native(chain, &cfg) => {
                self.model.label_law(tree).map(|l| l[label])
            }
            _ => None,
        };
        if let Some(p) = structured {
            return Ok(p.clamp(0.0, 1.0));
        }
        if let Some(table) = self.enumeration() {
            let mut p = 0.0;
            for (x, w) in table {
                p += w * eval_one(query, x, &mut HashMap::new())?;
            }
            return Ok(p.clamp(0.0, 1.0));
        }
        let pool = self.pool();
        Ok(evaluate(std::slice::from_ref(query), pool)?[0])
    }

    fn native(&self, chain: &TransitionMatrix, cfg: &RowMatchConfig) -> bool {
        *chain == self.model.chain && *cfg == RowMatchConfig::default()
    }

    /// Observed configurations with positive probability, if `q^N` is
    /// within the table cap.
    fn enumeration(&mut self) -> Option<&[(Vec<usize>, f64)]> {
        if self.enumeration.is_none() {
            let t = &self.model.tree;
            let all: Vec<usize> = (0..t.leaf_count()).collect();
            let table = leaf_subset_law(t, &self.model.chain, &self.model.prior, &all, self.eps, &self.caps).ok().map(|law| {
                law.config_marginal()
                    .into_iter()
                    .enumerate()
                    .filter(|(_, p)| *p > 0.0)
                    .map(|(c, p)| (self.hidden.tau.to_observed(&law.decode(c)), p))
                    .collect()
            });
            self.enumeration = Some(table);
        }
        self.enumeration.as_ref().and_then(|e| e.as_deref())
    }

    fn pool(&mut self) -> &[Vec<usize>] {
        if self.pool.is_none() {
            let mut r = rng::stream(self.seed, 2);
            let mut scratch = Vec::new();
            let pool = (0..REFERENCE_POOL)
                .map(|_| sample_observed(&self.model.tree, &self.sampler, &self.hidden, self.eps, &mut r, &mut scratch))
                .collect();
            self.pool = Some(pool);
        }
        self.pool.as_deref().expect("pool initialized")
    }
}

type PairCache<'q> = HashMap<(&'q CanonicalTree, &'q CanonicalTree), Option<nalgebra::DMatrix<f64>>>;

/// Keyed by node value: distinct candidate subtrees can share a minimum
/// leaf and height.
type EstimateCache<'q> = HashMap<&'q CanonicalTree, usize>;

fn estimate<'q>(
    tree: &'q CanonicalTree,
    x: &[usize],
    chain: &TransitionMatrix,
    cfg: &RowMatchConfig,
    cache: &mut EstimateCache<'q>,
) -> usize {
    *cache
        .entry(tree)
        .or_insert_with(|| row_match_hier(tree, x, chain, cfg))
}

fn eval_one<'q>(query: &Query<'q>, x: &[usize], cache: &mut EstimateCache<'q>) -> Result<f64> {
    let v = match *query {
        Query::Function(f) => f(x),
        Query::PairIndicator { u, v, a, b, chain, cfg } => {
            let hit = estimate(u, x, chain, &cfg, cache) == a && estimate(v, x, chain, &cfg, cache) == b;
            f64::from(u8::from(hit))
        }
        Query::LabelIndicator { tree, label, chain, cfg } => {
            f64::from(u8::from(estimate(tree, x, chain, &cfg, cache) == label))
        }
    };
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Range(v));
    }
    Ok(v)
}

/// Means of `queries` over `batch`. Node estimates and pair counts are
/// computed once per batch and shared between queries.
fn evaluate<'q>(queries: &[Query<'q>], batch: &[Vec<usize>]) -> Result<Vec<f64>> {
    type NodeKey<'q> = (&'q CanonicalTree, usize, RowMatchConfig);
    fn key<'q>(tree: &'q CanonicalTree, chain: &TransitionMatrix, cfg: RowMatchConfig) -> NodeKey<'q> {
        (tree, chain as *const TransitionMatrix as usize, cfg)
    }
    let n = batch.len().max(1) as f64;
    let mut labels: HashMap<NodeKey, Vec<usize>> = HashMap::new();
    let mut pairs: HashMap<(NodeKey, NodeKey), Vec<usize>> = HashMap::new();
    let mut node_labels = |tree: &'q CanonicalTree, chain: &TransitionMatrix, cfg: RowMatchConfig| -> Vec<usize> {
        labels
            .entry(key(tree, chain, cfg))
            .or_insert_with(|| batch.iter().map(|x| row_match_hier(tree, x, chain, &cfg)).collect())
            .clone()
    };
    let mut out = Vec::with_capacity(queries.len());
    for query in queries {
        let mean = match *query {
            Query::Function(_) => {
                let mut s = 0.0;
                for x in batch {
                    s += eval_one(query, x, &mut EstimateCache::new())?;
                }
                s / n
            }
            Query::PairIndicator { u, v, a, b, chain, cfg } => {
                let q = chain.q();
                let k = (key(u, chain, cfg), key(v, chain, cfg));
                if !pairs.contains_key(&k) {
                    let (lu, lv) = (node_labels(u, chain, cfg), node_labels(v, chain, cfg));
                    let mut counts = vec![0usize; q * q];
                    for (&x, &y) in lu.iter().zip(&lv) {
                        counts[x * q + y] += 1;
                    }
                    pairs.insert(k, counts);
                }
                pairs[&k][a * q + b] as f64 / n
            }
            Query::LabelIndicator { tree, label, chain, cfg } => {
                node_labels(tree, chain, cfg).iter().filter(|&&y| y == label).count() as f64 / n
            }
        };
        out.push(mean);
    }
    Ok(out)
}

/// Moment source that only talks to a VSTAT oracle; vector quantities are
/// issued coordinatewise.
pub struct VStatSource<'o> {
    oracle: &'o mut VStatOracle,
    chain: TransitionMatrix,
    cfg: RowMatchConfig,
}

impl<'o> VStatSource<'o> {
    pub fn new(oracle: &'o mut VStatOracle, chain: &TransitionMatrix) -> Self {
        Self { oracle, chain: chain.clone(), cfg: RowMatchConfig::default() }
    }
}

impl MomentSource for VStatSource<'_> {
    fn q(&self) -> usize {
        self.chain.q()
    }

    fn leaf_count(&self) -> usize {
        self.oracle.leaf_count()
    }

    fn layer_moments(&mut self, nodes: &[CanonicalTree]) -> Result<PairMoments> {
        let q = self.chain.q();
        let mut queries = Vec::with_capacity(nodes.len() * nodes.len() / 2 * q * q);
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                for a in 0..q {
                    for b in 0..q {
                        queries.push(Query::PairIndicator {
                            u: &nodes[i],
                            v: &nodes[j],
                            a,
                            b,
                            chain: &self.chain,
                            cfg: self.cfg,
                        });
                    }
                }
            }
        }
        let responses = self.oracle.query_many(&queries)?;
        let mut out = PairMoments::new(nodes.len(), q);
        let mut it = responses.into_iter();
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let e = out.get_mut(i, j);
                for a in 0..q {
                    for b in 0..q {
                        e[(a, b)] = it.next().expect("one response per query");
                    }
                }
            }
        }
        Ok(out)
    }

    fn label(&mut self, tree: &CanonicalTree) -> Result<usize> {
        let queries: Vec<Query<'_>> = (0..self.chain.q())
            .map(|label| Query::LabelIndicator { tree, label, chain: &self.chain, cfg: self.cfg })
            .collect();
        let responses = self.oracle.query_many(&queries)?;
        Ok(argmax_first(responses.into_iter()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqOutcome {
    pub reconstruction: Reconstruction,
    pub y_hat: usize,
    pub queries: u64,
}

/// Tree and label recovery where every expectation is a VSTAT query.
pub fn run_sq_pipeline(
    oracle: &mut VStatOracle,
    m: &TransitionMatrix,
    d: usize,
    depth: usize,
    alpha: f64,
) -> Result<SqOutcome> {
    let before = oracle.query_count();
    let mut source = VStatSource::new(oracle, m);
    let reconstruction = reconstruct_tree(&mut source, m, alpha, d, depth)?;
    let y_hat = source.label(&reconstruction.tree)?;
    let queries = oracle.query_count() - before;
    Ok(SqOutcome { reconstruction, y_hat, queries })
}
