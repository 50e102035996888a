//! Complete d-ary trees with level-order vertex ids.
//!
//! The root is vertex 0 and the children of `v` are `d·v + 1 ..= d·v + d`.
//! Leaves are additionally addressed by their *leaf index* `0..N`, which is
//! their left-to-right order, so the leaves below any vertex form a
//! contiguous index range.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Default upper bound on the vertex count of a tree.
pub const DEFAULT_VERTEX_CAP: u128 = 1 << 26;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeTopology {
    d: usize,
    depth: usize,
    level_start: Vec<usize>,
}

impl TreeTopology {
    pub fn build(d: usize, depth: usize) -> Result<Self> {
        Self::build_with_cap(d, depth, DEFAULT_VERTEX_CAP)
    }

    pub fn build_with_cap(d: usize, depth: usize, cap: u128) -> Result<Self> {
        if d < 2 {
            return Err(Error::Invalid(format!("branching factor {d} < 2")));
        }
        let mut level_start = Vec::with_capacity(depth + 2);
        let mut start: u128 = 0;
        let mut width: u128 = 1;
        for _ in 0..=depth {
            level_start.push(start as usize);
            start += width;
            if start > cap {
                return Err(Error::overflow("tree vertex count", start, cap));
            }
            width = width.saturating_mul(d as u128);
        }
        level_start.push(start as usize);
        Ok(Self { d, depth, level_start })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn vertex_count(&self) -> usize {
        self.level_start[self.depth + 1]
    }

    pub fn leaf_count(&self) -> usize {
        self.vertex_count() - self.level_start[self.depth]
    }

    /// Vertex ids at depth `level`.
    pub fn level(&self, level: usize) -> Range<usize> {
        self.level_start[level]..self.level_start[level + 1]
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        (v > 0).then(|| (v - 1) / self.d)
    }

    pub fn children(&self, v: usize) -> Range<usize> {
        if self.is_leaf(v) {
            return 0..0;
        }
        self.d * v + 1..self.d * v + self.d + 1
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        v >= self.level_start[self.depth]
    }

    pub fn depth_of(&self, v: usize) -> usize {
        // level_start is increasing; the last start ≤ v names the level
        self.level_start.partition_point(|&s| s <= v) - 1
    }

    pub fn leaf_vertex(&self, leaf: usize) -> usize {
        self.level_start[self.depth] + leaf
    }

    pub fn leaf_index(&self, v: usize) -> Option<usize> {
        self.is_leaf(v).then(|| v - self.level_start[self.depth])
    }

    /// Leaf indices below `v`.
    pub fn leaf_range(&self, v: usize) -> Range<usize> {
        let h = self.depth - self.depth_of(v);
        let mut first = v;
        for _ in 0..h {
            first = self.d * first + 1;
        }
        let start = first - self.level_start[self.depth];
        start..start + self.d.pow(h as u32)
    }

    pub fn lca(&self, mut u: usize, mut v: usize) -> usize {
        let (mut du, mut dv) = (self.depth_of(u), self.depth_of(v));
        while du > dv {
            u = (u - 1) / self.d;
            du -= 1;
        }
        while dv > du {
            v = (v - 1) / self.d;
            dv -= 1;
        }
        while u != v {
            u = (u - 1) / self.d;
            v = (v - 1) / self.d;
        }
        u
    }

    pub fn graph_distance(&self, u: usize, v: usize) -> usize {
        let w = self.lca(u, v);
        self.depth_of(u) + self.depth_of(v) - 2 * self.depth_of(w)
    }
}

/// Hidden placement of tree leaves into observed coordinates:
/// tree leaf `i` is reported at observed position `map[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafPermutation {
    map: Vec<usize>,
}

impl LeafPermutation {
    pub fn identity(n: usize) -> Self {
        Self { map: (0..n).collect() }
    }

    pub fn from_vec(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &x in &map {
            if x >= map.len() || seen[x] {
                return Err(Error::Invalid("not a permutation".into()));
            }
            seen[x] = true;
        }
        Ok(Self { map })
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(rng);
        Self { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    /// Observed position of tree leaf `leaf`.
    pub fn position(&self, leaf: usize) -> usize {
        self.map[leaf]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &p) in self.map.iter().enumerate() {
            inv[p] = i;
        }
        Self { map: inv }
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self { map: other.map.iter().map(|&i| self.map[i]).collect() }
    }

    /// Reorders tree-order leaf values into observed order.
    pub fn to_observed<T: Copy + Default>(&self, tree_order: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); tree_order.len()];
        for (i, &x) in tree_order.iter().enumerate() {
            out[self.map[i]] = x;
        }
        out
    }

    /// Reorders observed values back into tree order.
    pub fn to_tree_order<T: Copy>(&self, observed: &[T]) -> Vec<T> {
        self.map.iter().map(|&p| observed[p]).collect()
    }
}

/// Uniformly random leaf placement for `t`, drawn from stream 0 of `seed`.
pub fn shuffle(t: &TreeTopology, seed: u64) -> LeafPermutation {
    LeafPermutation::random(t.leaf_count(), &mut rng::stream(seed, 0))
}

/// Leaf-labelled hierarchy with children sorted by smallest leaf label.
///
/// Serializes as nested JSON arrays of leaf ids, e.g. `[[0, 3], [1, 2]]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CanonicalTree {
    Leaf(usize),
    Node(Vec<CanonicalTree>),
}

impl CanonicalTree {
    /// Builds a node, sorting `children` into canonical order.
    pub fn node(mut children: Vec<CanonicalTree>) -> Self {
        children.sort_by_key(|c| c.min_leaf());
        CanonicalTree::Node(children)
    }

    pub fn min_leaf(&self) -> usize {
        match self {
            CanonicalTree::Leaf(x) => *x,
            CanonicalTree::Node(ch) => ch.iter().map(|c| c.min_leaf()).min().unwrap_or(usize::MAX),
        }
    }

    /// Leaf labels in canonical left-to-right order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            CanonicalTree::Leaf(x) => out.push(*x),
            CanonicalTree::Node(ch) => ch.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            CanonicalTree::Leaf(_) => 0,
            CanonicalTree::Node(ch) => 1 + ch.iter().map(|c| c.height()).max().unwrap_or(0),
        }
    }

    /// Sets of leaf labels below each vertex at height `h` (sorted).
    pub fn blocks_at_height(&self, h: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        self.collect_blocks(h, &mut out);
        for b in out.iter_mut() {
            b.sort_unstable();
        }
        out.sort();
        out
    }

    fn collect_blocks(&self, h: usize, out: &mut Vec<Vec<usize>>) {
        if self.height() == h {
            out.push(self.leaves());
        } else if let CanonicalTree::Node(ch) = self {
            ch.iter().for_each(|c| c.collect_blocks(h, out));
        }
    }

    /// Placement consistent with this hierarchy: canonical slot `i` holds
    /// observed leaf `leaves()[i]`.
    pub fn as_permutation(&self) -> Result<LeafPermutation> {
        LeafPermutation::from_vec(self.leaves())
    }
}

/// Encoding of `(t, τ)` that forgets the order of children at every vertex.
pub fn canonical_form(t: &TreeTopology, tau: &LeafPermutation) -> CanonicalTree {
    fn build(t: &TreeTopology, tau: &LeafPermutation, v: usize) -> CanonicalTree {
        match t.leaf_index(v) {
            Some(i) => CanonicalTree::Leaf(tau.position(i)),
            None => CanonicalTree::node(t.children(v).map(|c| build(t, tau, c)).collect()),
        }
    }
    build(t, tau, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        let t = TreeTopology::build(2, 2).unwrap();
        assert_eq!(t.vertex_count(), 7);
        assert_eq!(t.leaf_count(), 4);
        let t = TreeTopology::build(3, 1).unwrap();
        assert_eq!(t.vertex_count(), 4);
        let t = TreeTopology::build(5, 0).unwrap();
        assert_eq!((t.vertex_count(), t.leaf_count()), (1, 1));
        assert!(matches!(TreeTopology::build(2, 60), Err(Error::SizeOverflow { .. })));
        assert!(TreeTopology::build(1, 3).is_err());
    }

    #[test]
    fn structure_invariants() {
        for (d, depth) in [(2, 3), (3, 2), (4, 2), (7, 1)] {
            let t = TreeTopology::build(d, depth).unwrap();
            assert_eq!(t.vertex_count(), (d.pow(depth as u32 + 1) - 1) / (d - 1));
            for v in 0..t.vertex_count() {
                for c in t.children(v) {
                    assert_eq!(t.parent(c), Some(v));
                    assert_eq!(t.depth_of(c), t.depth_of(v) + 1);
                }
                let r = t.leaf_range(v);
                assert_eq!(r.len(), d.pow((depth - t.depth_of(v)) as u32));
                for leaf in r {
                    assert_eq!(t.lca(v, t.leaf_vertex(leaf)), v);
                }
            }
        }
    }

    #[test]
    fn distances() {
        let t = TreeTopology::build(2, 2).unwrap();
        // siblings at the bottom level
        assert_eq!(t.graph_distance(3, 4), 2);
        assert_eq!(t.lca(3, 4), 1);
        assert_eq!(t.graph_distance(5, 5), 0);
        // leftmost and rightmost leaves
        assert_eq!(t.graph_distance(3, 6), 4);
        assert_eq!(t.lca(3, 6), 0);
        assert_eq!(t.graph_distance(0, 6), 2);
    }

    #[test]
    fn permutation_algebra() {
        let mut r = rng::stream(3, 0);
        let p = LeafPermutation::random(9, &mut r);
        assert_eq!(p.compose(&p.inverse()), LeafPermutation::identity(9));
        let vals: Vec<usize> = (10..19).collect();
        assert_eq!(p.to_tree_order(&p.to_observed(&vals)), vals);
        assert!(LeafPermutation::from_vec(vec![0, 0, 1]).is_err());
    }

    #[test]
    fn canonical_form_forgets_sibling_order() {
        let t = TreeTopology::build(2, 2).unwrap();
        let id = LeafPermutation::identity(4);
        let swap_sib = LeafPermutation::from_vec(vec![1, 0, 2, 3]).unwrap();
        let swap_far = LeafPermutation::from_vec(vec![2, 1, 0, 3]).unwrap();
        assert_eq!(canonical_form(&t, &id), canonical_form(&t, &swap_sib));
        assert_ne!(canonical_form(&t, &id), canonical_form(&t, &swap_far));
        let json = serde_json::to_string(&canonical_form(&t, &swap_far)).unwrap();
        assert_eq!(json, "[[0,3],[1,2]]");
        let back: CanonicalTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back, canonical_form(&t, &swap_far));
    }

    #[test]
    fn single_pair_has_one_form() {
        let t = TreeTopology::build(2, 1).unwrap();
        let a = canonical_form(&t, &LeafPermutation::identity(2));
        let b = canonical_form(&t, &LeafPermutation::from_vec(vec![1, 0]).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn canonical_permutation_reproduces_form() {
        let t = TreeTopology::build(3, 2).unwrap();
        let tau = shuffle(&t, 11);
        let form = canonical_form(&t, &tau);
        let tau_hat = form.as_permutation().unwrap();
        assert_eq!(canonical_form(&t, &tau_hat), form);
    }
}
