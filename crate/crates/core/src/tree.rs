//! The auxiliary binary tree over time indices `0..=T`.
//!
//! A node spanning `[j, l]` with `j < l` is cut at `k = j + 2^p` where `2^p`
//! is half the smallest power of two that is `>= l - j + 1`. The left child
//! `[j, k-1]` therefore always has a power-of-two span and is a complete
//! binary tree.

use std::fmt::Write as _;

use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split {
    pub cut: usize,
    pub left: NodeId,
    pub right: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub start: usize,
    pub end: usize,
    pub split: Option<Split>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }

    pub fn span(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Cut point of a node spanning `[start, end]`, computed with integer
/// arithmetic only.
pub fn cut_point(start: usize, end: usize) -> Result<usize> {
    if start >= end {
        return Err(Error::InvalidArgument(format!(
            "cut point needs start < end (got [{start}, {end}])"
        )));
    }
    let span = end - start + 1;
    Ok(start + span.next_power_of_two() / 2)
}

#[derive(Clone, Debug)]
pub struct Tree {
    nodes: Vec<TreeNode>,
    root: NodeId,
    post_order: Vec<NodeId>,
    height: usize,
}

/// Builds the tree for indices `0..=horizon`.
pub fn build_tree(horizon: usize) -> Tree {
    let mut nodes = Vec::with_capacity(2 * horizon + 1);
    let mut post_order = Vec::with_capacity(2 * horizon + 1);
    let (root, height) = grow(&mut nodes, &mut post_order, 0, horizon);
    Tree {
        nodes,
        root,
        post_order,
        height,
    }
}

fn grow(
    nodes: &mut Vec<TreeNode>,
    order: &mut Vec<NodeId>,
    start: usize,
    end: usize,
) -> (NodeId, usize) {
    if start == end {
        nodes.push(TreeNode {
            start,
            end,
            split: None,
        });
        order.push(nodes.len() - 1);
        return (nodes.len() - 1, 1);
    }
    let cut = cut_point(start, end).expect("start < end");
    let (left, hl) = grow(nodes, order, start, cut - 1);
    let (right, hr) = grow(nodes, order, cut, end);
    nodes.push(TreeNode {
        start,
        end,
        split: Some(Split { cut, left, right }),
    });
    order.push(nodes.len() - 1);
    (nodes.len() - 1, 1 + hl.max(hr))
}

impl Tree {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Number of levels, counting the root and the leaves.
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn horizon(&self) -> usize {
        self.nodes[self.root].end
    }

    /// Children before parents, left subtree before right subtree.
    pub fn post_order(&self) -> &[NodeId] {
        &self.post_order
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.post_order
            .iter()
            .map(|&id| self.nodes[id])
            .filter(|n| n.is_leaf())
            .map(|n| n.start)
            .collect()
    }

    /// Number of merges index `t` takes part in on its way to the root.
    pub fn merge_depth(&self, t: usize) -> usize {
        let mut id = self.root;
        let mut depth = 0;
        while let Some(split) = self.nodes[id].split {
            depth += 1;
            id = if t < split.cut {
                split.left
            } else {
                split.right
            };
        }
        depth
    }

    /// Indented text rendering, one node per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        self.dump_node(self.root, 0, &mut out);
        out
    }

    fn dump_node(&self, id: NodeId, depth: usize, out: &mut String) {
        let node = self.nodes[id];
        let indent = "  ".repeat(depth);
        match node.split {
            None => writeln!(out, "{indent}{}", node.start).unwrap(),
            Some(split) => {
                writeln!(
                    out,
                    "{indent}{}:{} (cut {})",
                    node.start, node.end, split.cut
                )
                .unwrap();
                self.dump_node(split.left, depth + 1, out);
                self.dump_node(split.right, depth + 1, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(tree: &Tree) -> Vec<(usize, usize)> {
        tree.post_order()
            .iter()
            .map(|&id| (tree.node(id).start, tree.node(id).end))
            .collect()
    }

    #[test]
    fn cut_points() {
        assert_eq!(cut_point(0, 5).unwrap(), 4);
        assert_eq!(cut_point(0, 127).unwrap(), 64);
        assert_eq!(cut_point(2, 3).unwrap(), 3);
        assert_eq!(cut_point(0, 4).unwrap(), 4);
        assert!(cut_point(3, 3).is_err());
        assert!(cut_point(4, 3).is_err());
    }

    #[test]
    fn cut_point_matches_log_formula() {
        for start in 0..20usize {
            for end in start + 1..start + 300 {
                let span = (end - start + 1) as f64;
                let p = span.log2().ceil() as u32 - 1;
                assert_eq!(cut_point(start, end).unwrap(), start + 2usize.pow(p));
            }
        }
    }

    #[test]
    fn tree_of_six_indices() {
        let tree = build_tree(5);
        assert_eq!(
            spans(&tree),
            vec![
                (0, 0),
                (1, 1),
                (0, 1),
                (2, 2),
                (3, 3),
                (2, 3),
                (0, 3),
                (4, 4),
                (5, 5),
                (4, 5),
                (0, 5)
            ]
        );
        assert_eq!(tree.height(), 4);
        assert_eq!(tree.merge_depth(0), 3);
        assert_eq!(tree.merge_depth(4), 2);
    }

    #[test]
    fn degenerate_tree() {
        let tree = build_tree(0);
        assert_eq!(tree.nodes().len(), 1);
        assert!(tree.node(tree.root()).is_leaf());
        assert_eq!(tree.height(), 1);
    }

    #[test]
    fn height_formula() {
        assert_eq!(build_tree(511).height(), 10);
        for t in [1usize, 2, 3, 6, 7, 8, 100, 127, 128, 300] {
            let lg = ((t + 1) as f64).log2().ceil() as usize;
            let tree = build_tree(t);
            assert_eq!(tree.height(), lg + 1, "T = {t}");
            assert!((0..=t).all(|i| tree.merge_depth(i) <= lg));
        }
    }

    #[test]
    fn structure_invariants() {
        for t in 0..70 {
            let tree = build_tree(t);
            assert_eq!(tree.leaves(), (0..=t).collect::<Vec<_>>());
            for node in tree.nodes() {
                if let Some(s) = node.split {
                    let (l, r) = (tree.node(s.left), tree.node(s.right));
                    assert_eq!(
                        (l.start, l.end + 1, r.start, r.end),
                        (node.start, s.cut, s.cut, node.end)
                    );
                    assert!(l.span().is_power_of_two());
                    assert!(l.span() >= r.span());
                }
            }
        }
    }

    #[test]
    fn dump_is_indented() {
        let text = build_tree(2).dump();
        assert_eq!(text, "0:2 (cut 2)\n  0:1 (cut 1)\n    0\n    1\n  2\n");
    }
}
