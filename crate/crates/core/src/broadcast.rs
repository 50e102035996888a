//! Sampling the broadcast process, leaf noise, and the repeated
//! unknown-tree model.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chains::TransitionMatrix;
use crate::error::{Error, Result};
use crate::rng::{self, cumulative, draw_cumulative, StreamRng};
use crate::trees::{LeafPermutation, TreeTopology};

/// Probability law of the root label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootPrior {
    probs: Vec<f64>,
}

impl RootPrior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Invalid("prior entries must be finite and nonnegative".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("prior sums to {s}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(q: usize) -> Self {
        Self { probs: vec![1.0 / q as f64; q] }
    }

    /// `(2/3)·δ_y + (1/3)·Uni([q])`.
    pub fn biased(q: usize, y: usize) -> Self {
        let mut probs = vec![1.0 / (3.0 * q as f64); q];
        probs[y] += 2.0 / 3.0;
        Self { probs }
    }

    pub fn stationary(m: &TransitionMatrix) -> Result<Self> {
        Ok(Self { probs: m.stationary()? })
    }

    pub fn q(&self) -> usize {
        self.probs.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Largest β with ν ≥ β·π entrywise.
    pub fn domination_coefficient(&self, pi: &[f64]) -> f64 {
        self.probs
            .iter()
            .zip(pi)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&n, &p)| n / p)
            .fold(f64::INFINITY, f64::min)
    }
}

/// One realization of the process; `labels` is indexed by vertex id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastSample {
    pub labels: Vec<usize>,
    leaf_offset: usize,
}

impl BroadcastSample {
    pub fn root(&self) -> usize {
        self.labels[0]
    }

    /// Leaf labels in tree order.
    pub fn leaf_view(&self) -> &[usize] {
        &self.labels[self.leaf_offset..]
    }
}

/// Precomputed cumulative rows for repeated sampling on one tree.
#[derive(Debug, Clone)]
pub struct BroadcastSampler {
    q: usize,
    prior: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl BroadcastSampler {
    pub fn new(m: &TransitionMatrix, prior: &RootPrior) -> Result<Self> {
        if prior.q() != m.q() {
            return Err(Error::Invalid("prior and chain alphabet sizes differ".into()));
        }
        Ok(Self {
            q: m.q(),
            prior: cumulative(prior.as_slice()),
            rows: (0..m.q()).map(|i| cumulative(m.row(i))).collect(),
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Fills `labels` (length = vertex count) in level order.
    pub fn sample_into<R: Rng + ?Sized>(&self, t: &TreeTopology, rng: &mut R, labels: &mut Vec<usize>) {
        labels.clear();
        labels.reserve(t.vertex_count());
        labels.push(draw_cumulative(rng, &self.prior));
        for v in 1..t.vertex_count() {
            let parent = labels[(v - 1) / t.d()];
            labels.push(draw_cumulative(rng, &self.rows[parent]));
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: &TreeTopology, rng: &mut R) -> BroadcastSample {
        let mut labels = Vec::new();
        self.sample_into(t, rng, &mut labels);
        BroadcastSample { labels, leaf_offset: t.leaf_vertex(0) }
    }
}

pub fn sample_broadcast(
    t: &TreeTopology,
    m: &TransitionMatrix,
    prior: &RootPrior,
    seed: u64,
) -> Result<BroadcastSample> {
    Ok(BroadcastSampler::new(m, prior)?.sample(t, &mut rng::stream(seed, 0)))
}

/// Leaf vector after the uniform-resampling noise operator.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLeaves {
    pub values: Vec<usize>,
    pub noise_mask: Vec<bool>,
    pub eps: f64,
}

pub(crate) fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Domain(format!("noise rate {eps} outside [0, 1)")));
    }
    Ok(())
}

/// Each coordinate is kept with probability 1−ε, otherwise replaced by a
/// uniform draw from `[q]` (which may equal the original value).
pub fn apply_noise_with<R: Rng + ?Sized>(
    x: &[usize],
    q: usize,
    eps: f64,
    rng: &mut R,
) -> Result<NoisyLeaves> {
    check_eps(eps)?;
    let mut values = x.to_vec();
    let mut noise_mask = vec![false; x.len()];
    if eps > 0.0 {
        for (v, mask) in values.iter_mut().zip(noise_mask.iter_mut()) {
            if rng.random::<f64>() < eps {
                *mask = true;
                *v = rng.random_range(0..q);
            }
        }
    }
    Ok(NoisyLeaves { values, noise_mask, eps })
}

pub fn apply_noise(x: &[usize], q: usize, eps: f64, seed: u64) -> Result<NoisyLeaves> {
    apply_noise_with(x, q, eps, &mut rng::stream(seed, 0))
}

/// Parameters of the noisy repeated broadcast model.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedParams {
    pub d: usize,
    pub depth: usize,
    pub m: usize,
    pub eps: f64,
    pub chain: TransitionMatrix,
}

impl RepeatedParams {
    pub fn tree(&self) -> Result<TreeTopology> {
        TreeTopology::build(self.d, self.depth)
    }
}

/// Hidden state of a repeated dataset; only evaluation code may read it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenState {
    pub y_star: usize,
    pub tau: LeafPermutation,
}

/// What a reconstruction algorithm gets to see.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub q: usize,
    pub d: usize,
    pub depth: usize,
    pub eps: f64,
    /// `samples[i][j]`: value at observed coordinate `j` in sample `i`.
    pub samples: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedDataset {
    pub hidden: HiddenState,
    pub samples: Vec<Vec<usize>>,
    pub params: RepeatedParams,
}

impl RepeatedDataset {
    pub fn observations(&self) -> Observations {
        Observations {
            q: self.params.chain.q(),
            d: self.params.d,
            depth: self.params.depth,
            eps: self.params.eps,
            samples: self.samples.clone(),
        }
    }

    pub fn into_parts(self) -> (Observations, HiddenState) {
        let obs = Observations {
            q: self.params.chain.q(),
            d: self.params.d,
            depth: self.params.depth,
            eps: self.params.eps,
            samples: self.samples,
        };
        (obs, self.hidden)
    }
}

/// Hidden draws for a repeated dataset, from stream 0 of `seed`.
pub fn sample_hidden(t: &TreeTopology, q: usize, seed: u64) -> HiddenState {
    let mut r = rng::stream(seed, 0);
    let y_star = r.random_range(0..q);
    let tau = LeafPermutation::random(t.leaf_count(), &mut r);
    HiddenState { y_star, tau }
}

/// One observed sample given the hidden state: root from the biased prior,
/// broadcast, shuffle by τ, then noise.
pub fn sample_observed(
    t: &TreeTopology,
    sampler: &BroadcastSampler,
    hidden: &HiddenState,
    eps: f64,
    rng: &mut StreamRng,
    scratch: &mut Vec<usize>,
) -> Vec<usize> {
    sampler.sample_into(t, rng, scratch);
    let leaves = &scratch[t.leaf_vertex(0)..];
    let mut observed = hidden.tau.to_observed(leaves);
    if eps > 0.0 {
        for v in observed.iter_mut() {
            if rng.random::<f64>() < eps {
                *v = rng.random_range(0..sampler.q());
            }
        }
    }
    observed
}

/// Sample `i` uses stream `i + 1` of `seed`; stream 0 holds (Y*, τ).
pub fn sample_repeated(params: &RepeatedParams, seed: u64) -> Result<RepeatedDataset> {
    check_eps(params.eps)?;
    let t = params.tree()?;
    let q = params.chain.q();
    let hidden = sample_hidden(&t, q, seed);
    let sampler = BroadcastSampler::new(&params.chain, &RootPrior::biased(q, hidden.y_star))?;
    let mut scratch = Vec::new();
    let samples = (0..params.m)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64 + 1);
            sample_observed(&t, &sampler, &hidden, params.eps, &mut r, &mut scratch)
        })
        .collect();
    Ok(RepeatedDataset { hidden, samples, params: params.clone() })
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    sample_index: usize,
    leaves: Vec<usize>,
}

/// One JSON object per line: `{"sample_index": i, "leaves": [...]}`.
pub fn write_samples_jsonl<W: Write>(samples: &[Vec<usize>], mut out: W) -> Result<()> {
    for (i, leaves) in samples.iter().enumerate() {
        let rec = SampleRecord { sample_index: i, leaves: leaves.clone() };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples_jsonl<R: BufRead>(input: R) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        if rec.sample_index != out.len() {
            return Err(Error::Invalid(format!(
                "sample_index {} out of order (expected {})",
                rec.sample_index,
                out.len()
            )));
        }
        out.push(rec.leaves);
    }
    Ok(out)
}

pub fn write_secret<W: Write>(hidden: &HiddenState, mut out: W) -> Result<()> {
    serde_json::to_writer(&mut out, hidden)?;
    out.write_all(b"\n")?;
    Ok(())
}
