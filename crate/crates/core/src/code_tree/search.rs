//! Global and local search over full binary code trees.

use serde::{Deserialize, Serialize};

use super::{huffman, split_entropy, CodeTree, TreeNode};
use crate::error::{Error, Result};
use crate::source::DiscreteSource;

/// Exhaustive search enumerates `(2n - 3)!!` trees; 135135 at this size.
pub const MAX_EXHAUSTIVE_ITEMS: usize = 8;

const IMPROVEMENT_EPS: f64 = 1e-12;
const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Tree loss under the uniform router.
    UniformLoss,
    /// Expected leaf depth.
    ExpectedLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Exhaustive,
    Lift,
}

/// Binary tree in arena form. Nodes `0..n` are the leaves (node `i` is item `i`),
/// nodes `n..2n-1` are internal.
#[derive(Clone)]
struct Arena {
    n: usize,
    parent: Vec<usize>,
    children: Vec<[usize; 2]>,
    root: usize,
}

impl Arena {
    fn empty(n: usize) -> Self {
        Arena {
            n,
            parent: vec![NONE; 2 * n - 1],
            children: vec![[NONE; 2]; 2 * n - 1],
            root: NONE,
        }
    }

    fn from_tree(tree: &CodeTree) -> Self {
        let n = tree.n_items();
        let mut arena = Arena::empty(n);
        let mut next = n;
        fn build(node: &TreeNode, arena: &mut Arena, next: &mut usize) -> usize {
            match node {
                TreeNode::Leaf(i) => *i,
                TreeNode::Internal(c) => {
                    let id = *next;
                    *next += 1;
                    let a = build(&c[0], arena, next);
                    let b = build(&c[1], arena, next);
                    arena.children[id] = [a, b];
                    arena.parent[a] = id;
                    arena.parent[b] = id;
                    id
                }
            }
        }
        arena.root = build(tree.root(), &mut arena, &mut next);
        arena
    }

    fn to_tree(&self) -> CodeTree {
        fn build(a: &Arena, v: usize) -> TreeNode {
            if v < a.n {
                TreeNode::Leaf(v)
            } else {
                TreeNode::Internal(vec![build(a, a.children[v][0]), build(a, a.children[v][1])])
            }
        }
        CodeTree::new(2, build(self, self.root)).expect("arena holds a valid binary tree")
    }

    fn replace_child(&mut self, parent: usize, old: usize, new: usize) {
        let slot = self.children[parent]
            .iter()
            .position(|&c| c == old)
            .expect("child present");
        self.children[parent][slot] = new;
    }

    fn sibling(&self, v: usize) -> usize {
        let [a, b] = self.children[self.parent[v]];
        if a == v {
            b
        } else {
            a
        }
    }

    /// Objective value, using scratch buffers for masses and depths.
    fn evaluate(&self, probs: &[f64], objective: Objective, scratch: &mut Scratch) -> f64 {
        let Scratch { order, depth, mass } = scratch;
        order.clear();
        order.push(self.root);
        depth[self.root] = 0;
        let mut i = 0;
        while i < order.len() {
            let v = order[i];
            i += 1;
            if v >= self.n {
                for c in self.children[v] {
                    depth[c] = depth[v] + 1;
                    order.push(c);
                }
            }
        }
        match objective {
            Objective::ExpectedLength => (0..self.n).map(|i| probs[i] * depth[i] as f64).sum(),
            Objective::UniformLoss => {
                let mut loss = 0.0;
                for &v in order.iter().rev() {
                    if v < self.n {
                        mass[v] = probs[v];
                    } else {
                        let [a, b] = self.children[v];
                        mass[v] = mass[a] + mass[b];
                        loss += mass[v] * depth[v] as f64 * split_entropy(mass[a], mass[b]);
                    }
                }
                loss
            }
        }
    }

    /// Prunes the subtree at `x` and regrafts it as the sibling of `y`.
    ///
    /// `y` must lie outside the subtree of `x` and differ from its sibling.
    fn regraft(&mut self, x: usize, y: usize) {
        let p = self.parent[x];
        let s = self.sibling(x);
        let gp = self.parent[p];
        if gp == NONE {
            self.root = s;
        } else {
            self.replace_child(gp, p, s);
        }
        self.parent[s] = gp;

        let yp = self.parent[y];
        if yp == NONE {
            self.root = p;
        } else {
            self.replace_child(yp, y, p);
        }
        self.parent[p] = yp;
        self.children[p] = [y, x];
        self.parent[y] = p;
        self.parent[x] = p;
    }

    /// Exchanges the positions of leaves `x` and `y`, which must not be siblings.
    fn swap_leaves(&mut self, x: usize, y: usize) {
        let (px, py) = (self.parent[x], self.parent[y]);
        self.replace_child(px, x, y);
        self.replace_child(py, y, x);
        self.parent[x] = py;
        self.parent[y] = px;
    }

    /// Whether `w` lies in the subtree rooted at `v`.
    fn in_subtree(&self, mut w: usize, v: usize) -> bool {
        loop {
            if w == v {
                return true;
            }
            if w == self.root {
                return false;
            }
            w = self.parent[w];
        }
    }
}

struct Scratch {
    order: Vec<usize>,
    depth: Vec<usize>,
    mass: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            order: Vec::with_capacity(2 * n),
            depth: vec![0; 2 * n],
            mass: vec![0.0; 2 * n],
        }
    }
}

/// Finds a binary tree minimizing `objective` for `src`.
///
/// Exhaustive mode visits every unordered leaf-labelled full binary tree once and
/// breaks ties by the lowest canonical encoding. Lift mode starts from Huffman and
/// regrafts subtrees next to other nodes (leaves before internal nodes, light
/// before heavy), then swaps pairs of leaves, accepting the first improvement.
pub fn search_optimal_tree(
    src: &DiscreteSource,
    objective: Objective,
    mode: SearchMode,
) -> Result<CodeTree> {
    match mode {
        SearchMode::Exhaustive => exhaustive(src, objective),
        SearchMode::Lift => Ok(lift(src, objective)),
    }
}

fn exhaustive(src: &DiscreteSource, objective: Objective) -> Result<CodeTree> {
    let n = src.len();
    if n > MAX_EXHAUSTIVE_ITEMS {
        return Err(Error::TooLarge {
            items: n,
            max: MAX_EXHAUSTIVE_ITEMS,
        });
    }
    let mut arena = Arena::empty(n);
    arena.children[n] = [0, 1];
    arena.parent[0] = n;
    arena.parent[1] = n;
    arena.root = n;

    struct Best {
        value: f64,
        encoding: Vec<usize>,
        tree: Option<CodeTree>,
    }
    let mut best = Best {
        value: f64::INFINITY,
        encoding: Vec::new(),
        tree: None,
    };
    let mut scratch = Scratch::new(n);

    // Inserting leaf k onto the edge above any of the 2k - 1 existing nodes
    // generates each unordered tree exactly once.
    fn insert(
        k: usize,
        arena: &mut Arena,
        src: &DiscreteSource,
        objective: Objective,
        best: &mut Best,
        scratch: &mut Scratch,
    ) {
        let n = arena.n;
        if k == n {
            let value = arena.evaluate(src.probs(), objective, scratch);
            if value < best.value - IMPROVEMENT_EPS {
                let tree = arena.to_tree();
                best.encoding = tree.canonical_encoding();
                best.value = value;
                best.tree = Some(tree);
            } else if value <= best.value + IMPROVEMENT_EPS {
                let tree = arena.to_tree();
                let enc = tree.canonical_encoding();
                if enc < best.encoding {
                    best.encoding = enc;
                    best.value = best.value.min(value);
                    best.tree = Some(tree);
                }
            }
            return;
        }
        let u = n + k - 1;
        let present: Vec<usize> = (0..k).chain(n..u).collect();
        for v in present {
            let p = arena.parent[v];
            if p == NONE {
                arena.root = u;
            } else {
                arena.replace_child(p, v, u);
            }
            arena.parent[u] = p;
            arena.children[u] = [v, k];
            arena.parent[v] = u;
            arena.parent[k] = u;

            insert(k + 1, arena, src, objective, best, scratch);

            arena.parent[v] = p;
            arena.parent[k] = NONE;
            arena.parent[u] = NONE;
            arena.children[u] = [NONE; 2];
            if p == NONE {
                arena.root = v;
            } else {
                arena.replace_child(p, u, v);
            }
        }
    }

    insert(2, &mut arena, src, objective, &mut best, &mut scratch);
    Ok(best.tree.expect("at least one tree enumerated").canonical())
}

fn lift(src: &DiscreteSource, objective: Objective) -> CodeTree {
    let n = src.len();
    let probs = src.probs();
    let start = huffman(src, 2).expect("binary huffman on a valid source");
    let mut arena = Arena::from_tree(&start);
    let mut scratch = Scratch::new(n);
    let mut current = arena.evaluate(probs, objective, &mut scratch);

    'scan: loop {
        arena.evaluate(probs, Objective::UniformLoss, &mut scratch);
        let Scratch { depth, mass, .. } = &scratch;
        let nodes: Vec<usize> = (0..2 * n - 1).filter(|&v| v != arena.root).collect();
        // Leaves before subtrees, light before heavy.
        let mut movers = nodes.clone();
        movers.sort_by(|&a, &b| {
            (a >= n)
                .cmp(&(b >= n))
                .then(mass[a].total_cmp(&mass[b]))
                .then(a.cmp(&b))
        });
        // Targets from shallow to deep, so a deep subtree is first tried high up.
        let mut targets: Vec<usize> = (0..2 * n - 1).collect();
        targets.sort_by_key(|&y| (depth[y], y));

        for &x in &movers {
            for &y in &targets {
                if y == arena.parent[x] || y == arena.sibling(x) || arena.in_subtree(y, x) {
                    continue;
                }
                let mut candidate = arena.clone();
                candidate.regraft(x, y);
                let value = candidate.evaluate(probs, objective, &mut scratch);
                if value < current - IMPROVEMENT_EPS {
                    arena = candidate;
                    current = value;
                    continue 'scan;
                }
            }
        }
        for x in 0..n {
            for y in x + 1..n {
                if arena.parent[x] == arena.parent[y] {
                    continue;
                }
                let mut candidate = arena.clone();
                candidate.swap_leaves(x, y);
                let value = candidate.evaluate(probs, objective, &mut scratch);
                if value < current - IMPROVEMENT_EPS {
                    arena = candidate;
                    current = value;
                    continue 'scan;
                }
            }
        }
        break;
    }
    arena.to_tree().canonical()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code_tree::{expected_length, tree_loss};
    use crate::source::geometric_source;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn double_factorial(mut k: usize) -> usize {
        let mut acc = 1;
        while k > 1 {
            acc *= k;
            k -= 2;
        }
        acc
    }

    #[test]
    fn enumeration_counts_every_tree_once() {
        // Count distinct canonical encodings produced by the insertion scheme.
        for n in 2..=6 {
            let mut arena = Arena::empty(n);
            arena.children[n] = [0, 1];
            arena.parent[0] = n;
            arena.parent[1] = n;
            arena.root = n;
            let mut seen = std::collections::BTreeSet::new();
            fn go(k: usize, a: &mut Arena, seen: &mut std::collections::BTreeSet<Vec<usize>>) {
                let n = a.n;
                if k == n {
                    seen.insert(a.to_tree().canonical_encoding());
                    return;
                }
                let u = n + k - 1;
                for v in (0..k).chain(n..u).collect::<Vec<_>>() {
                    let mut b = a.clone();
                    let p = b.parent[v];
                    if p == NONE {
                        b.root = u;
                    } else {
                        b.replace_child(p, v, u);
                    }
                    b.parent[u] = p;
                    b.children[u] = [v, k];
                    b.parent[v] = u;
                    b.parent[k] = u;
                    go(k + 1, &mut b, seen);
                }
            }
            go(2, &mut arena, &mut seen);
            assert_eq!(seen.len(), double_factorial(2 * n - 3), "n={n}");
        }
    }

    #[test]
    fn four_point_uniform_loss_is_balanced() {
        let src = geometric_source(2).unwrap();
        let t = search_optimal_tree(&src, Objective::UniformLoss, SearchMode::Exhaustive).unwrap();
        assert_eq!(t.depths(), &[2, 2, 2, 2]);
        assert_eq!(expected_length(&t, &src).unwrap(), 2.0);
    }

    #[test]
    fn four_point_expected_length_is_huffman() {
        let src = geometric_source(2).unwrap();
        let t =
            search_optimal_tree(&src, Objective::ExpectedLength, SearchMode::Exhaustive).unwrap();
        assert_eq!(t.depths(), &[1, 2, 3, 3]);
    }

    #[test]
    fn geometric3_loss_minimizer_is_deeper_than_huffman() {
        let src = geometric_source(3).unwrap();
        let t = search_optimal_tree(&src, Objective::UniformLoss, SearchMode::Exhaustive).unwrap();
        let huff = huffman(&src, 2).unwrap();
        assert!(expected_length(&t, &src).unwrap() > expected_length(&huff, &src).unwrap());
    }

    #[test]
    fn exhaustive_rejects_large_sources() {
        let src = geometric_source(4).unwrap();
        assert!(matches!(
            search_optimal_tree(&src, Objective::UniformLoss, SearchMode::Exhaustive),
            Err(Error::TooLarge { items: 16, .. })
        ));
        assert!(search_optimal_tree(&src, Objective::UniformLoss, SearchMode::Lift).is_ok());
    }

    #[test]
    fn lift_matches_exhaustive_on_demo_sources() {
        for m in 1..=3 {
            let src = geometric_source(m).unwrap();
            for obj in [Objective::UniformLoss, Objective::ExpectedLength] {
                let ex = search_optimal_tree(&src, obj, SearchMode::Exhaustive).unwrap();
                let li = search_optimal_tree(&src, obj, SearchMode::Lift).unwrap();
                let eval = |t: &CodeTree| match obj {
                    Objective::UniformLoss => tree_loss(t, &src).unwrap(),
                    Objective::ExpectedLength => expected_length(t, &src).unwrap(),
                };
                assert!((eval(&ex) - eval(&li)).abs() < 1e-12, "M={m} {obj:?}");
            }
        }
    }

    #[test]
    fn lift_never_beats_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..40 {
            let n = 3 + trial % 6;
            let src = DiscreteSource::random(&mut rng, n).unwrap();
            let ex =
                search_optimal_tree(&src, Objective::UniformLoss, SearchMode::Exhaustive).unwrap();
            let li = search_optimal_tree(&src, Objective::UniformLoss, SearchMode::Lift).unwrap();
            let huff = huffman(&src, 2).unwrap();
            let (e, l, h) = (
                tree_loss(&ex, &src).unwrap(),
                tree_loss(&li, &src).unwrap(),
                tree_loss(&huff, &src).unwrap(),
            );
            assert!(l >= e - 1e-12 && l <= h + 1e-12);
        }
    }

    #[test]
    fn regraft_keeps_tree_valid() {
        let src = geometric_source(3).unwrap();
        let mut a = Arena::from_tree(&huffman(&src, 2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut moves = 0;
        for _ in 0..500 {
            let x = rand::Rng::random_range(&mut rng, 0..15);
            let y = rand::Rng::random_range(&mut rng, 0..15);
            if x == a.root || y == a.parent[x] || y == a.sibling(x) || a.in_subtree(y, x) {
                continue;
            }
            a.regraft(x, y);
            moves += 1;
            let t = a.to_tree();
            assert!((t.kraft_sum() - 1.0).abs() < 1e-12);
            assert_eq!(a.parent[x], a.parent[y]);
        }
        assert!(moves > 100);
    }
}
