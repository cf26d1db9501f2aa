//! Rooted phylogenies: Newick I/O, random trees with inverse-Gaussian branch
//! lengths, and patristic distances.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Index of a node inside a [`PhyloTree`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("newick parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("a random tree needs at least 2 tips, got {0}")]
    TooFewTips(usize),
    #[error("inverse Gaussian parameters must be positive (mu = {mu}, lambda = {lambda})")]
    InvalidIgParams { mu: f64, lambda: f64 },
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("invalid tree: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub branch_length: f64,
    pub label: Option<String>,
}

/// A rooted tree stored as an arena of nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct PhyloTree {
    nodes: Vec<Node>,
    root: NodeId,
    /// Set when a parsed Newick string omitted one or more branch lengths.
    missing_lengths: bool,
}

impl PhyloTree {
    /// Builds a tree from a parent vector. Exactly one entry must be `None`.
    pub fn from_parents(
        parents: &[Option<usize>],
        branch_lengths: &[f64],
        labels: Vec<Option<String>>,
    ) -> Result<Self, TreeError> {
        let n = parents.len();
        if n == 0 || branch_lengths.len() != n || labels.len() != n {
            return Err(TreeError::Invalid("inconsistent node arrays".into()));
        }
        let mut nodes: Vec<Node> = labels
            .into_iter()
            .zip(branch_lengths)
            .zip(parents)
            .map(|((label, &len), parent)| Node {
                parent: parent.map(NodeId),
                children: Vec::new(),
                branch_length: len,
                label,
            })
            .collect();
        let mut root = None;
        for (i, p) in parents.iter().enumerate() {
            match p {
                None if root.is_some() => {
                    return Err(TreeError::Invalid("more than one root".into()))
                }
                None => root = Some(NodeId(i)),
                Some(p) if *p >= n || *p == i => {
                    return Err(TreeError::Invalid(format!("bad parent for node {i}")))
                }
                Some(p) => nodes[*p].children.push(NodeId(i)),
            }
        }
        let root = root.ok_or_else(|| TreeError::Invalid("no root".into()))?;
        nodes[root.0].branch_length = 0.0;
        let tree = PhyloTree {
            nodes,
            root,
            missing_lengths: false,
        };
        tree.validate()?;
        Ok(tree)
    }

    fn validate(&self) -> Result<(), TreeError> {
        if self.preorder().len() != self.nodes.len() {
            return Err(TreeError::Invalid("parent relation is not a single tree".into()));
        }
        if let Some(n) = self
            .nodes
            .iter()
            .find(|n| !(n.branch_length >= 0.0 && n.branch_length.is_finite()))
        {
            return Err(TreeError::Invalid(format!(
                "branch length {} is not a non-negative finite number",
                n.branch_length
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn missing_lengths(&self) -> bool {
        self.missing_lengths
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].children
    }

    pub fn branch_length(&self, id: NodeId) -> f64 {
        self.nodes[id.0].branch_length
    }

    pub fn is_tip(&self, id: NodeId) -> bool {
        self.nodes[id.0].children.is_empty()
    }

    /// Tips in index order.
    pub fn tips(&self) -> Vec<NodeId> {
        self.ids().filter(|&i| self.is_tip(i)).collect()
    }

    /// Non-tip nodes (including the root) in index order.
    pub fn internal_nodes(&self) -> Vec<NodeId> {
        self.ids().filter(|&i| !self.is_tip(i)).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn check_id(&self, id: NodeId) -> Result<(), TreeError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TreeError::UnknownNode(id))
        }
    }

    /// Stable textual name used in exported files: the label when present,
    /// otherwise `node<index>`.
    pub fn name(&self, id: NodeId) -> String {
        match &self.nodes[id.0].label {
            Some(l) if !l.is_empty() => l.clone(),
            _ => format!("node{}", id.0),
        }
    }

    pub fn find_by_name(&self, name: &str) -> Option<NodeId> {
        self.ids().find(|&i| self.name(i) == name)
    }

    pub fn preorder(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if order.len() > self.nodes.len() {
                break;
            }
            order.push(id);
            stack.extend(self.nodes[id.0].children.iter().rev());
        }
        order
    }

    /// Distance from the root to every node.
    pub fn depths(&self) -> Vec<f64> {
        let mut depth = vec![0.0; self.nodes.len()];
        for id in self.preorder() {
            if let Some(p) = self.nodes[id.0].parent {
                depth[id.0] = depth[p.0] + self.nodes[id.0].branch_length;
            }
        }
        depth
    }

    /// Number of edges between the root and every node.
    fn levels(&self) -> Vec<usize> {
        let mut level = vec![0; self.nodes.len()];
        for id in self.preorder() {
            if let Some(p) = self.nodes[id.0].parent {
                level[id.0] = level[p.0] + 1;
            }
        }
        level
    }

    fn lca(&self, levels: &[usize], mut a: NodeId, mut b: NodeId) -> NodeId {
        while levels[a.0] > levels[b.0] {
            a = self.nodes[a.0].parent.unwrap();
        }
        while levels[b.0] > levels[a.0] {
            b = self.nodes[b.0].parent.unwrap();
        }
        while a != b {
            a = self.nodes[a.0].parent.unwrap();
            b = self.nodes[b.0].parent.unwrap();
        }
        a
    }
}

/// Symmetric matrix of patristic distances over an ordered node list.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub node_order: Vec<NodeId>,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// `entries` is row-major over `node_order`.
    pub fn from_parts(node_order: Vec<NodeId>, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), node_order.len() * node_order.len());
        DistanceMatrix {
            node_order,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.node_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_order.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.node_order.len() + j]
    }

    /// Maximum and mean over distinct pairs; `(0, 0)` for fewer than two nodes.
    pub fn pair_stats(&self) -> (f64, f64) {
        let n = self.len();
        let (mut max, mut sum, mut count) = (0.0f64, 0.0, 0usize);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self.get(i, j);
                max = max.max(d);
                sum += d;
                count += 1;
            }
        }
        if count == 0 {
            (0.0, 0.0)
        } else {
            (max, sum / count as f64)
        }
    }

    /// CSV with a header row of node names and one row per node.
    pub fn to_csv(&self, tree: &PhyloTree) -> String {
        let names: Vec<String> = self.node_order.iter().map(|&i| tree.name(i)).collect();
        let mut out = String::from("node_id");
        for name in &names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, name) in names.iter().enumerate() {
            out.push_str(name);
            for j in 0..self.len() {
                let _ = write!(out, ",{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

/// Patristic distances between every pair of nodes in `subset`, or between all
/// nodes when no subset is given. Uses `d(i, j) = depth(i) + depth(j) - 2 depth(lca)`.
pub fn patristic_distances(
    tree: &PhyloTree,
    subset: Option<&[NodeId]>,
) -> Result<DistanceMatrix, TreeError> {
    let node_order: Vec<NodeId> = match subset {
        Some(ids) => {
            for &id in ids {
                tree.check_id(id)?;
            }
            ids.to_vec()
        }
        None => tree.ids().collect(),
    };
    let depth = tree.depths();
    let levels = tree.levels();
    let n = node_order.len();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (node_order[i], node_order[j]);
            let d = if a == b {
                0.0
            } else {
                let l = tree.lca(&levels, a, b);
                (depth[a.0] - depth[l.0]) + (depth[b.0] - depth[l.0])
            };
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix {
        node_order,
        entries,
    })
}

/// One draw from IG(mu, lambda) by the Michael-Schucany-Haas transformation.
pub fn sample_inverse_gaussian<R: Rng + ?Sized>(
    mu: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<f64, TreeError> {
    if !(mu > 0.0 && lambda > 0.0 && mu.is_finite() && lambda.is_finite()) {
        return Err(TreeError::InvalidIgParams { mu, lambda });
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let y = z * z;
        let my = mu * y;
        // The two roots multiply to mu^2; take the larger one without cancellation.
        let big = mu + mu * my / (2.0 * lambda)
            + mu / (2.0 * lambda) * (4.0 * lambda * my + my * my).sqrt();
        let small = mu * mu / big;
        let u: f64 = rng.random();
        let x = if u <= mu / (mu + small) { small } else { big };
        if x > 0.0 && x.is_finite() {
            return Ok(x);
        }
    }
}

/// Random rooted binary tree. Topology grows by attaching each new tip to a
/// uniformly chosen edge (the root's stem included); every branch length is an
/// independent IG(ig_mu, ig_lambda) draw.
///
/// Nodes are renumbered in preorder; tips are labelled `t1..tn` and internal
/// nodes `n1..n(n-1)`, both in preorder.
pub fn random_tree<R: Rng + ?Sized>(
    n_tips: usize,
    ig_mu: f64,
    ig_lambda: f64,
    rng: &mut R,
) -> Result<PhyloTree, TreeError> {
    if n_tips < 2 {
        return Err(TreeError::TooFewTips(n_tips));
    }
    if !(ig_mu > 0.0 && ig_lambda > 0.0) {
        return Err(TreeError::InvalidIgParams {
            mu: ig_mu,
            lambda: ig_lambda,
        });
    }
    // parent links during growth
    let mut parent: Vec<Option<usize>> = vec![None, Some(0), Some(0)];
    let mut root = 0usize;
    for _ in 2..n_tips {
        // every node owns the edge above it; the root's is the stem
        let pick = rng.random_range(0..parent.len());
        let joint = parent.len();
        parent.push(parent[pick]);
        parent.push(Some(joint));
        parent[pick] = Some(joint);
        if pick == root {
            root = joint;
        }
    }
    let total = parent.len();
    let mut children = vec![Vec::new(); total];
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }
    // preorder renumbering
    let mut order = Vec::with_capacity(total);
    let mut stack = vec![root];
    while let Some(v) = stack.pop() {
        order.push(v);
        stack.extend(children[v].iter().rev());
    }
    let mut new_index = vec![0usize; total];
    for (k, &old) in order.iter().enumerate() {
        new_index[old] = k;
    }
    let mut parents = vec![None; total];
    let mut labels = vec![None; total];
    let (mut tip_count, mut inner_count) = (0, 0);
    for (k, &old) in order.iter().enumerate() {
        parents[k] = parent[old].map(|p| new_index[p]);
        labels[k] = Some(if children[old].is_empty() {
            tip_count += 1;
            format!("t{tip_count}")
        } else {
            inner_count += 1;
            format!("n{inner_count}")
        });
    }
    let mut lengths = vec![0.0; total];
    for (k, len) in lengths.iter_mut().enumerate() {
        if parents[k].is_some() {
            *len = sample_inverse_gaussian(ig_mu, ig_lambda, rng)?;
        }
    }
    PhyloTree::from_parents(&parents, &lengths, labels)
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    parents: Vec<Option<usize>>,
    lengths: Vec<f64>,
    labels: Vec<Option<String>>,
    missing: bool,
}

impl Parser<'_> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, TreeError> {
        Err(TreeError::Parse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.text.get(self.pos).copied()
    }

    fn token(&mut self) -> &str {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.text.len()
            && !matches!(self.text[self.pos], b'(' | b')' | b',' | b':' | b';')
            && !self.text[self.pos].is_ascii_whitespace()
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.text[start..self.pos]).unwrap_or("")
    }

    fn subtree(&mut self, parent: Option<usize>, depth: usize) -> Result<(), TreeError> {
        if depth > 100_000 {
            return self.err("nesting too deep");
        }
        let me = self.parents.len();
        self.parents.push(parent);
        self.lengths.push(0.0);
        self.labels.push(None);
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                self.subtree(Some(me), depth + 1)?;
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(b';') | None => return self.err("unbalanced parenthesis: missing ')'"),
                    Some(c) => return self.err(format!("unexpected '{}'", c as char)),
                }
            }
        }
        let label = self.token().to_string();
        if !label.is_empty() {
            self.labels[me] = Some(label);
        }
        if self.peek() == Some(b':') {
            self.pos += 1;
            let at = self.pos;
            let raw = self.token().to_string();
            let len: f64 = match raw.parse() {
                Ok(v) => v,
                Err(_) => {
                    self.pos = at;
                    return self.err(format!("invalid branch length '{raw}'"));
                }
            };
            if !(len >= 0.0) || !len.is_finite() {
                self.pos = at;
                return self.err(format!("negative or non-finite branch length {raw}"));
            }
            self.lengths[me] = len;
        } else if parent.is_some() {
            self.missing = true;
        }
        Ok(())
    }
}

/// Parses a Newick string. Missing branch lengths become 0 and set
/// [`PhyloTree::missing_lengths`].
pub fn parse_newick(text: &str) -> Result<PhyloTree, TreeError> {
    let mut p = Parser {
        text: text.as_bytes(),
        pos: 0,
        parents: Vec::new(),
        lengths: Vec::new(),
        labels: Vec::new(),
        missing: false,
    };
    if p.peek().is_none() {
        return p.err("empty input");
    }
    p.subtree(None, 0)?;
    match p.peek() {
        Some(b';') => p.pos += 1,
        Some(b')') => return p.err("unbalanced parenthesis: unexpected ')'"),
        Some(c) => return p.err(format!("dangling token starting with '{}'", c as char)),
        None => return p.err("missing terminating ';'"),
    }
    if p.peek().is_some() {
        return p.err("dangling input after ';'");
    }
    let mut tree = PhyloTree::from_parents(&p.parents, &p.lengths, p.labels)?;
    tree.missing_lengths = p.missing;
    Ok(tree)
}

/// Formats with 12 significant digits, then prints the shortest decimal that
/// round-trips that value.
fn format_length(x: f64) -> String {
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    format!("{rounded}")
}

pub fn serialize_newick(tree: &PhyloTree) -> String {
    fn write_node(tree: &PhyloTree, id: NodeId, out: &mut String) {
        let node = tree.node(id);
        if !node.children.is_empty() {
            out.push('(');
            for (k, &c) in node.children.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write_node(tree, c, out);
            }
            out.push(')');
        }
        if let Some(l) = &node.label {
            out.push_str(l);
        }
        if node.parent.is_some() {
            out.push(':');
            out.push_str(&format_length(node.branch_length));
        }
    }
    let mut out = String::new();
    write_node(tree, tree.root(), &mut out);
    out.push(';');
    out
}

/// Order-independent description of the tree topology, labels, and branch
/// lengths (rounded to 12 significant digits). Equal strings mean isomorphic trees.
pub fn canonical_form(tree: &PhyloTree) -> String {
    fn canon(tree: &PhyloTree, id: NodeId) -> String {
        let node = tree.node(id);
        let mut kids: Vec<String> = node.children.iter().map(|&c| canon(tree, c)).collect();
        kids.sort();
        format!(
            "({}){}:{}",
            kids.join(","),
            node.label.as_deref().unwrap_or(""),
            format_length(node.branch_length)
        )
    }
    canon(tree, tree.root())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parses_two_tip_tree() {
        let t = parse_newick("(A:1.0,B:2.0)R;").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.tips().len(), 2);
        assert_eq!(t.name(t.root()), "R");
        let a = t.find_by_name("A").unwrap();
        let b = t.find_by_name("B").unwrap();
        assert_eq!(t.branch_length(a), 1.0);
        assert_eq!(t.branch_length(b), 2.0);
        assert!(!t.missing_lengths());
    }

    #[test]
    fn parses_nested_tree() {
        let t = parse_newick("((A:1,B:1):0.5,C:2);").unwrap();
        assert_eq!(t.tips().len(), 3);
        assert_eq!(t.internal_nodes().len(), 2);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        match parse_newick("(A:1,B;") {
            Err(TreeError::Parse { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_newick("(A:1,B:2));"), Err(TreeError::Parse { .. })));
        assert!(matches!(parse_newick("(A:1,B:2) x y;"), Err(TreeError::Parse { .. })));
        assert!(matches!(parse_newick("(A:-1,B:2);"), Err(TreeError::Parse { offset: 3, .. })));
        assert!(matches!(parse_newick("(A:1,B:2)"), Err(TreeError::Parse { .. })));
        assert!(matches!(parse_newick("   "), Err(TreeError::Parse { .. })));
    }

    #[test]
    fn missing_lengths_are_flagged() {
        let t = parse_newick("(A,B:2);").unwrap();
        assert!(t.missing_lengths());
        assert_eq!(t.branch_length(t.find_by_name("A").unwrap()), 0.0);
    }

    #[test]
    fn single_tip_round_trip() {
        let t = parse_newick("A;").unwrap();
        assert_eq!(t.len(), 1);
        let s = serialize_newick(&t);
        assert_eq!(s, "A;");
        assert_eq!(parse_newick(&s).unwrap(), t);
    }

    #[test]
    fn two_tip_serialization() {
        let t = parse_newick("(A:1,B:2);").unwrap();
        assert_eq!(serialize_newick(&t), "(A:1,B:2);");
    }

    #[test]
    fn two_tip_distances() {
        let t = parse_newick("(A:1,B:2)R;").unwrap();
        let d = patristic_distances(&t, None).unwrap();
        let (a, b, r) = (
            t.find_by_name("A").unwrap().0,
            t.find_by_name("B").unwrap().0,
            t.root().0,
        );
        assert_eq!(d.get(a, b), 3.0);
        assert_eq!(d.get(a, r), 1.0);
        for i in 0..3 {
            assert_eq!(d.get(i, i), 0.0);
        }
    }

    #[test]
    fn unknown_subset_node_is_rejected() {
        let t = parse_newick("(A:1,B:2);").unwrap();
        assert_eq!(
            patristic_distances(&t, Some(&[NodeId(0), NodeId(7)])),
            Err(TreeError::UnknownNode(NodeId(7)))
        );
    }

    #[test]
    fn random_tree_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2, 3, 17, 128] {
            let t = random_tree(n, 0.5, 0.5, &mut rng).unwrap();
            assert_eq!(t.len(), 2 * n - 1);
            assert_eq!(t.tips().len(), n);
            for id in t.internal_nodes() {
                assert_eq!(t.children(id).len(), 2);
            }
            for id in t.ids().filter(|&i| i != t.root()) {
                assert!(t.branch_length(id) > 0.0);
            }
        }
        assert_eq!(
            random_tree(1, 0.5, 0.5, &mut rng),
            Err(TreeError::TooFewTips(1))
        );
    }

    #[test]
    fn random_tree_is_seeded() {
        let a = random_tree(40, 0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_tree(40, 0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inverse_gaussian_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_inverse_gaussian(0.5, 0.5, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        assert!((var - 0.25).abs() < 0.03, "variance {var}");
        assert!(draws.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn inverse_gaussian_degenerate_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = sample_inverse_gaussian(1.0, 1e6, &mut rng).unwrap();
            assert!((x - 1.0).abs() < 0.01);
        }
        assert!(sample_inverse_gaussian(0.0, 1.0, &mut rng).is_err());
        assert!(sample_inverse_gaussian(1.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn inverse_gaussian_is_deterministic() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_inverse_gaussian(0.5, 0.5, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn distance_csv_layout() {
        let t = parse_newick("(A:1,B:2)R;").unwrap();
        let d = patristic_distances(&t, None).unwrap();
        let csv = d.to_csv(&t);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "node_id,R,A,B");
        assert_eq!(lines[2], "A,1,0,3");
    }
}
