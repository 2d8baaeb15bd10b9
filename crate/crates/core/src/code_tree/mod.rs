//! C-ary prefix-code trees.
//!
//! Leaves carry item indices of a [`DiscreteSource`]; the depth of a leaf is the
//! number of tokens spent on that item. Besides Huffman construction this module
//! evaluates the uniform-router tree loss `L(T) = sum_j p(j) l(j) H(j)` over
//! internal nodes `j` (root at depth 0), its per-depth profile, and searches for
//! trees minimizing either objective.

mod bounds;
mod search;

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::source::DiscreteSource;

pub use bounds::{check_theorem3_bound, theorem2_gap, GapRow, Theorem3Report, MAX_EXHAUSTIVE_M};
pub use search::{search_optimal_tree, Objective, SearchMode, MAX_EXHAUSTIVE_ITEMS};

/// A tree node: an item index or a list of 2..=arity children.
///
/// Serializes as nested arrays of item indices, e.g. `[0, [1, [2, 3]]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Leaf(usize),
    Internal(Vec<TreeNode>),
}

impl TreeNode {
    fn min_item(&self) -> usize {
        match self {
            TreeNode::Leaf(i) => *i,
            TreeNode::Internal(c) => c.iter().map(TreeNode::min_item).min().unwrap_or(usize::MAX),
        }
    }

    fn canonicalize(&mut self) {
        if let TreeNode::Internal(children) = self {
            children.iter_mut().for_each(TreeNode::canonicalize);
            children.sort_by_key(TreeNode::min_item);
        }
    }

    fn encode_into(&self, out: &mut Vec<usize>) {
        match self {
            TreeNode::Leaf(i) => out.push(i + 2),
            TreeNode::Internal(c) => {
                out.push(0);
                c.iter().for_each(|n| n.encode_into(out));
                out.push(1);
            }
        }
    }
}

/// A prefix-code tree whose leaves are exactly the items `0..n_items`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTree", into = "RawTree")]
pub struct CodeTree {
    arity: usize,
    root: TreeNode,
    depths: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawTree {
    arity: usize,
    tree: TreeNode,
}

impl TryFrom<RawTree> for CodeTree {
    type Error = Error;
    fn try_from(raw: RawTree) -> Result<Self> {
        CodeTree::new(raw.arity, raw.tree)
    }
}

impl From<CodeTree> for RawTree {
    fn from(t: CodeTree) -> Self {
        RawTree {
            arity: t.arity,
            tree: t.root,
        }
    }
}

impl CodeTree {
    pub fn new(arity: usize, root: TreeNode) -> Result<Self> {
        if arity < 2 {
            return invalid(format!("arity must be at least 2, got {arity}"));
        }
        let mut depths: Vec<Option<usize>> = Vec::new();
        let mut stack = vec![(&root, 0usize)];
        while let Some((node, depth)) = stack.pop() {
            match node {
                TreeNode::Leaf(i) => {
                    if *i >= depths.len() {
                        depths.resize(i + 1, None);
                    }
                    if depths[*i].replace(depth).is_some() {
                        return invalid(format!("item {i} labels more than one leaf"));
                    }
                }
                TreeNode::Internal(children) => {
                    if children.len() < 2 || children.len() > arity {
                        return invalid(format!(
                            "internal node with {} children in an arity-{arity} tree",
                            children.len()
                        ));
                    }
                    stack.extend(children.iter().map(|c| (c, depth + 1)));
                }
            }
        }
        let depths = depths
            .into_iter()
            .enumerate()
            .map(|(i, d)| d.ok_or_else(|| Error::Validation(format!("item {i} has no leaf"))))
            .collect::<Result<Vec<_>>>()?;
        if depths.len() < 2 {
            return invalid("a code tree needs at least 2 items");
        }
        Ok(Self {
            arity,
            root,
            depths,
        })
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    pub fn n_items(&self) -> usize {
        self.depths.len()
    }

    /// Leaf depth (token count) of each item.
    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    /// `sum_i C^-len_i`.
    pub fn kraft_sum(&self) -> f64 {
        let c = self.arity as f64;
        self.depths.iter().map(|&d| c.powi(-(d as i32))).sum()
    }

    /// Same tree with children ordered by their smallest item.
    pub fn canonical(&self) -> CodeTree {
        let mut root = self.root.clone();
        root.canonicalize();
        CodeTree {
            arity: self.arity,
            root,
            depths: self.depths.clone(),
        }
    }

    /// Preorder token encoding of the canonical form; orders ties deterministically.
    pub fn canonical_encoding(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.canonical().root.encode_into(&mut out);
        out
    }

    fn check_covers(&self, src: &DiscreteSource) -> Result<()> {
        if self.n_items() != src.len() {
            return invalid(format!(
                "tree has {} leaves but the source has {} items",
                self.n_items(),
                src.len()
            ));
        }
        Ok(())
    }

    fn check_binary(&self, what: &'static str) -> Result<()> {
        fn binary(n: &TreeNode) -> bool {
            match n {
                TreeNode::Leaf(_) => true,
                TreeNode::Internal(c) => c.len() == 2 && c.iter().all(binary),
            }
        }
        if self.arity != 2 || !binary(&self.root) {
            return Err(Error::UnsupportedArity {
                arity: self.arity,
                what,
            });
        }
        Ok(())
    }
}

struct HeapEntry {
    prob: f64,
    order: usize,
    node: Option<TreeNode>,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.prob
            .total_cmp(&other.prob)
            .then(self.order.cmp(&other.order))
    }
}

/// C-ary Huffman tree. Zero-probability padding symbols join the first merge so
/// that every later merge is full; they are dropped from the final tree.
pub fn huffman(src: &DiscreteSource, arity: usize) -> Result<CodeTree> {
    if arity < 2 {
        return invalid(format!("arity must be at least 2, got {arity}"));
    }
    let n = src.len();
    let dummies = (arity - 1 - (n - 1) % (arity - 1)) % (arity - 1);
    let mut heap = BinaryHeap::with_capacity(n + dummies);
    let mut order = 0;
    for _ in 0..dummies {
        heap.push(Reverse(HeapEntry {
            prob: 0.0,
            order,
            node: None,
        }));
        order += 1;
    }
    for (i, &p) in src.probs().iter().enumerate() {
        heap.push(Reverse(HeapEntry {
            prob: p,
            order,
            node: Some(TreeNode::Leaf(i)),
        }));
        order += 1;
    }
    while heap.len() > 1 {
        let mut prob = 0.0;
        let mut children = Vec::with_capacity(arity);
        for _ in 0..arity.min(heap.len()) {
            let Reverse(e) = heap.pop().expect("non-empty heap");
            prob += e.prob;
            children.extend(e.node);
        }
        heap.push(Reverse(HeapEntry {
            prob,
            order,
            node: Some(TreeNode::Internal(children)),
        }));
        order += 1;
    }
    let root = heap
        .pop()
        .and_then(|Reverse(e)| e.node)
        .expect("at least two items");
    CodeTree::new(arity, root)
}

/// `E[len] = sum_i p(i) depth(i)`.
pub fn expected_length(tree: &CodeTree, src: &DiscreteSource) -> Result<f64> {
    tree.check_covers(src)?;
    Ok(tree
        .depths
        .iter()
        .zip(src.probs())
        .map(|(&d, &p)| p * d as f64)
        .sum())
}

/// Binary entropy (bits) of the split `a : b`.
pub(crate) fn split_entropy(a: f64, b: f64) -> f64 {
    let total = a + b;
    let h = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
    h(a / total) + h(b / total)
}

/// Per-depth profile `f_d = sum_{l(j)=d} p(j) H(j)` over internal nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthProfile {
    pub f: Vec<f64>,
}

impl DepthProfile {
    pub fn total(&self) -> f64 {
        self.f.iter().sum()
    }

    /// `sum_{d >= 1} d f_d`.
    pub fn weighted_total(&self) -> f64 {
        self.f.iter().enumerate().map(|(d, f)| d as f64 * f).sum()
    }
}

/// Depth profile of a binary tree.
pub fn depth_profile(tree: &CodeTree, src: &DiscreteSource) -> Result<DepthProfile> {
    tree.check_covers(src)?;
    tree.check_binary("depth_profile")?;
    fn walk(node: &TreeNode, depth: usize, src: &DiscreteSource, f: &mut Vec<f64>) -> f64 {
        match node {
            TreeNode::Leaf(i) => src.prob(*i),
            TreeNode::Internal(c) => {
                let a = walk(&c[0], depth + 1, src, f);
                let b = walk(&c[1], depth + 1, src, f);
                if f.len() <= depth {
                    f.resize(depth + 1, 0.0);
                }
                f[depth] += (a + b) * split_entropy(a, b);
                a + b
            }
        }
    }
    let mut f = Vec::new();
    walk(&tree.root, 0, src, &mut f);
    Ok(DepthProfile { f })
}

/// Uniform-router reconstruction loss of a binary tree, in bits.
pub fn tree_loss(tree: &CodeTree, src: &DiscreteSource) -> Result<f64> {
    tree.check_covers(src)?;
    tree.check_binary("tree_loss")?;
    fn walk(node: &TreeNode, depth: usize, src: &DiscreteSource, acc: &mut f64) -> f64 {
        match node {
            TreeNode::Leaf(i) => src.prob(*i),
            TreeNode::Internal(c) => {
                let a = walk(&c[0], depth + 1, src, acc);
                let b = walk(&c[1], depth + 1, src, acc);
                *acc += (a + b) * depth as f64 * split_entropy(a, b);
                a + b
            }
        }
    }
    let mut acc = 0.0;
    walk(&tree.root, 0, src, &mut acc);
    Ok(acc)
}

/// Random full binary tree over `n` items, for property tests and benches.
pub fn random_binary_tree<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Result<CodeTree> {
    if n < 2 {
        return invalid("a code tree needs at least 2 items");
    }
    let mut items: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(items.as_mut_slice(), rng);
    let mut pool: Vec<TreeNode> = items.into_iter().map(TreeNode::Leaf).collect();
    while pool.len() > 1 {
        let a = pool.swap_remove(rng.random_range(0..pool.len()));
        let b = pool.swap_remove(rng.random_range(0..pool.len()));
        pool.push(TreeNode::Internal(vec![a, b]));
    }
    CodeTree::new(2, pool.pop().expect("one root"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::{entropy, geometric_source};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn four_point() -> DiscreteSource {
        geometric_source(2).unwrap()
    }

    fn tree(json: &str) -> CodeTree {
        CodeTree::new(2, serde_json::from_str(json).unwrap()).unwrap()
    }

    /// Hand-expanded binary entropy, independent of `split_entropy`.
    fn h2(p: f64) -> f64 {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()) / std::f64::consts::LN_2
    }

    #[test]
    fn huffman_four_point() {
        let src = four_point();
        let t = huffman(&src, 2).unwrap();
        let mut d = t.depths().to_vec();
        d.sort();
        assert_eq!(d, vec![1, 2, 3, 3]);
        assert_eq!(expected_length(&t, &src).unwrap(), 1.75);
        assert_eq!(t.kraft_sum(), 1.0);
    }

    #[test]
    fn huffman_uniform_is_balanced() {
        let src = DiscreteSource::uniform(4).unwrap();
        let t = huffman(&src, 2).unwrap();
        assert_eq!(t.depths(), &[2, 2, 2, 2]);
        assert_eq!(expected_length(&t, &src).unwrap(), 2.0);
    }

    #[test]
    fn huffman_ternary_pads_first_merge() {
        // 4 items, arity 3: one dummy, so the first merge takes two real items.
        let src = DiscreteSource::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let t = huffman(&src, 3).unwrap();
        assert_eq!(t.depths(), &[1, 1, 2, 2]);
        assert!(t.kraft_sum() <= 1.0 + 1e-12);
        let h = entropy(&src, 3).unwrap();
        let l = expected_length(&t, &src).unwrap();
        assert!(h <= l && l < h + 1.0);
    }

    #[test]
    fn huffman_sandwich_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..200 {
            let n = 4 + trial % 61;
            let arity = 2 + trial % 2;
            let src = DiscreteSource::random(&mut rng, n).unwrap();
            let t = huffman(&src, arity).unwrap();
            let h = entropy(&src, arity).unwrap();
            let l = expected_length(&t, &src).unwrap();
            assert!(
                h <= l + 1e-12 && l < h + 1.0,
                "n={n} C={arity}: H={h} L={l}"
            );
            assert!(t.kraft_sum() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn tree_loss_examples() {
        let src = four_point();
        let chain = tree("[0,[1,[2,3]]]");
        let balanced = tree("[[0,1],[2,3]]");
        assert!((tree_loss(&chain, &src).unwrap() - 1.0).abs() < 1e-12);
        let expected = 0.75 * h2(2.0 / 3.0) + 0.25 * 1.0;
        let got = tree_loss(&balanced, &src).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.93872).abs() < 1e-5);

        let u = DiscreteSource::uniform(4).unwrap();
        assert!((tree_loss(&balanced, &u).unwrap() - 1.0).abs() < 1e-12);

        let pair = DiscreteSource::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(tree_loss(&tree("[0,1]"), &pair).unwrap(), 0.0);
    }

    #[test]
    fn depth_profile_examples() {
        let u = DiscreteSource::uniform(4).unwrap();
        let prof = depth_profile(&tree("[[0,1],[2,3]]"), &u).unwrap();
        assert_eq!(prof.f.len(), 2);
        assert!((prof.f[0] - 1.0).abs() < 1e-12 && (prof.f[1] - 1.0).abs() < 1e-12);
        assert!((prof.total() - 2.0).abs() < 1e-12);

        let pair = DiscreteSource::new(vec![0.3, 0.7]).unwrap();
        let prof = depth_profile(&tree("[0,1]"), &pair).unwrap();
        assert!((prof.f[0] - h2(0.3)).abs() < 1e-12);
    }

    #[test]
    fn profile_identities_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rand::Rng::random_range(&mut rng, 2..40);
            let src = DiscreteSource::random(&mut rng, n).unwrap();
            let t = random_binary_tree(&mut rng, n).unwrap();
            let prof = depth_profile(&t, &src).unwrap();
            assert!((prof.total() - entropy(&src, 2).unwrap()).abs() < 1e-9);
            assert!((prof.weighted_total() - tree_loss(&t, &src).unwrap()).abs() < 1e-9);
            assert!(prof.f.iter().all(|&f| (-1e-12..=1.0 + 1e-12).contains(&f)));
        }
    }

    #[test]
    fn non_binary_rejected() {
        let src = DiscreteSource::uniform(3).unwrap();
        let t = CodeTree::new(3, serde_json::from_str("[0,1,2]").unwrap()).unwrap();
        assert!(matches!(
            tree_loss(&t, &src),
            Err(Error::UnsupportedArity { .. })
        ));
        assert!(matches!(
            depth_profile(&t, &src),
            Err(Error::UnsupportedArity { .. })
        ));
    }

    #[test]
    fn invalid_trees_rejected() {
        let bad = |json: &str, arity| CodeTree::new(arity, serde_json::from_str(json).unwrap());
        assert!(bad("[0,[1]]", 2).is_err());
        assert!(bad("[0,0]", 2).is_err());
        assert!(bad("[0,2]", 2).is_err());
        assert!(bad("[0,1,2]", 2).is_err());
        let src = DiscreteSource::uniform(3).unwrap();
        assert!(expected_length(&tree("[0,1]"), &src).is_err());
    }

    #[test]
    fn json_roundtrip_and_canonical() {
        let t = tree("[[3,2],[1,0]]");
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"arity":2,"tree":[[3,2],[1,0]]}"#);
        let back: CodeTree = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert_eq!(
            serde_json::to_string(t.canonical().root()).unwrap(),
            "[[0,1],[2,3]]"
        );
        assert_eq!(
            t.canonical_encoding(),
            tree("[[0,1],[2,3]]").canonical_encoding()
        );
    }
}
