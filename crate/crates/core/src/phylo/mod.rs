//! Rooted bifurcating trees with branch lengths ("p-trees") and the
//! evolutionary covariance they induce on their leaves.

mod newick;

use std::collections::HashMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

pub use newick::parse_newick;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug)]
struct Node {
    name: Option<String>,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    /// Length of the edge from the parent (0 for the root).
    length: f64,
}

/// Rooted bifurcating tree with nonnegative edge lengths.
///
/// Node ids are dense indices assigned in preorder (parents before children,
/// left subtree before right), so the root is always `NodeId(0)`.
#[derive(Clone, Debug)]
pub struct PTree {
    nodes: Vec<Node>,
    depth: Vec<f64>,
    level: Vec<usize>,
}

/// Incremental construction used by the parser and the random generator.
#[derive(Debug, Default)]
pub(crate) struct TreeBuilder {
    nodes: Vec<Node>,
}

impl TreeBuilder {
    pub(crate) fn add(&mut self, parent: Option<NodeId>, name: Option<String>, length: f64) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            name,
            parent,
            children: Vec::new(),
            length,
        });
        if let Some(p) = parent {
            self.nodes[p.0].children.push(id);
        }
        id
    }

    pub(crate) fn set_name(&mut self, id: NodeId, name: Option<String>) {
        self.nodes[id.0].name = name;
    }

    pub(crate) fn set_length(&mut self, id: NodeId, length: f64) {
        self.nodes[id.0].length = length;
    }

    pub(crate) fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].children
    }

    pub(crate) fn build(self) -> Result<PTree> {
        PTree::from_nodes(self.nodes)
    }
}

impl PTree {
    fn from_nodes(raw: Vec<Node>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::TreeStructure("tree has no nodes".into()));
        }
        let roots: Vec<usize> = (0..raw.len()).filter(|&i| raw[i].parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::TreeStructure(format!("expected one root, found {}", roots.len())));
        }
        // Renumber in preorder so ids are stable regardless of build order.
        let mut order = Vec::with_capacity(raw.len());
        let mut stack = vec![roots[0]];
        while let Some(i) = stack.pop() {
            order.push(i);
            stack.extend(raw[i].children.iter().rev().map(|c| c.0));
        }
        if order.len() != raw.len() {
            return Err(Error::TreeStructure("tree is not connected".into()));
        }
        let mut new_id = vec![0; raw.len()];
        for (new, &old) in order.iter().enumerate() {
            new_id[old] = new;
        }
        let nodes: Vec<Node> = order
            .iter()
            .map(|&old| {
                let n = &raw[old];
                Node {
                    name: n.name.clone(),
                    parent: n.parent.map(|p| NodeId(new_id[p.0])),
                    children: n.children.iter().map(|c| NodeId(new_id[c.0])).collect(),
                    length: if n.parent.is_none() { 0.0 } else { n.length },
                }
            })
            .collect();

        let mut depth = vec![0.0; nodes.len()];
        let mut level = vec![0; nodes.len()];
        for i in 1..nodes.len() {
            let p = nodes[i].parent.expect("non-root has a parent").0;
            depth[i] = depth[p] + nodes[i].length;
            level[i] = level[p] + 1;
        }
        let tree = Self { nodes, depth, level };
        tree.validate()?;
        Ok(tree)
    }

    fn validate(&self) -> Result<()> {
        let mut names = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let label = self.label(NodeId(i));
            match node.children.len() {
                0 if i == 0 => {
                    return Err(Error::TreeStructure("the root must have two children".into()));
                }
                0 | 2 => {}
                k => {
                    return Err(Error::TreeStructure(format!(
                        "node {label} has {k} children; only bifurcating trees are supported"
                    )))
                }
            }
            if !(node.length >= 0.0 && node.length.is_finite()) {
                return Err(Error::TreeStructure(format!(
                    "edge into node {label} has invalid length {}",
                    node.length
                )));
            }
            if node.children.is_empty() {
                if let Some(name) = &node.name {
                    if names.insert(name.clone(), i).is_some() {
                        return Err(Error::TreeStructure(format!("duplicate leaf name {name:?}")));
                    }
                }
            }
        }
        let zero_edges = (1..self.nodes.len()).filter(|&i| self.nodes[i].length == 0.0).count();
        if zero_edges > 0 {
            log::warn!(
                "tree has {zero_edges} zero-length edge(s); the evolutionary covariance may be singular"
            );
        }
        Ok(())
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("unknown node id {id}")));
        }
        Ok(())
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    /// Length of the edge from the parent of `id` (0 for the root).
    pub fn edge_length(&self, id: NodeId) -> f64 {
        self.nodes[id.0].length
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].name.as_deref()
    }

    /// Name if present, otherwise `#<id>`.
    pub fn label(&self, id: NodeId) -> String {
        match &self.nodes[id.0].name {
            Some(n) => n.clone(),
            None => format!("#{}", id.0),
        }
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0].children.is_empty()
    }

    /// Path length from the root, `L(r, n)`.
    pub fn depth(&self, id: NodeId) -> f64 {
        self.depth[id.0]
    }

    /// Node ids in preorder.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes().filter(|&id| self.is_leaf(id))
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().count()
    }

    pub fn find_leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves().find(|&id| self.name(id) == Some(name))
    }

    /// Edges as `(parent, child, length)` in preorder of the child.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.nodes()
            .skip(1)
            .map(|c| (self.parent(c).expect("non-root"), c, self.edge_length(c)))
    }

    /// Most recent common ancestor.
    pub fn mrca(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (mut a, mut b) = (a, b);
        while self.level[a.0] > self.level[b.0] {
            a = self.parent(a).expect("deeper node has a parent");
        }
        while self.level[b.0] > self.level[a.0] {
            b = self.parent(b).expect("deeper node has a parent");
        }
        while a != b {
            a = self.parent(a).expect("distinct nodes below root");
            b = self.parent(b).expect("distinct nodes below root");
        }
        Ok(a)
    }

    /// Whether every leaf is at the same depth, within `tol` relative to the
    /// largest depth.
    pub fn is_ultrametric(&self, tol: f64) -> bool {
        let depths: Vec<f64> = self.leaves().map(|l| self.depth(l)).collect();
        let max = depths.iter().copied().fold(0.0, f64::max);
        let min = depths.iter().copied().fold(f64::INFINITY, f64::min);
        max - min <= tol * max.max(f64::MIN_POSITIVE)
    }

    /// Copy with every edge length multiplied by `s ≥ 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("scale factor must be nonnegative, got {s}")));
        }
        let mut t = self.clone();
        for n in &mut t.nodes {
            n.length *= s;
        }
        for d in &mut t.depth {
            *d *= s;
        }
        Ok(t)
    }

    /// Newick serialisation with full-precision branch lengths.
    pub fn to_newick(&self) -> String {
        fn quote(name: &str) -> String {
            if name.chars().any(|c| "()[]':;, \t\n".contains(c)) {
                format!("'{}'", name.replace('\'', "''"))
            } else {
                name.to_string()
            }
        }
        fn write(t: &PTree, id: NodeId, out: &mut String) {
            let ch = t.children(id);
            if !ch.is_empty() {
                out.push('(');
                for (i, c) in ch.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(t, *c, out);
                    out.push_str(&format!(":{}", t.edge_length(*c)));
                }
                out.push(')');
            }
            if let Some(n) = t.name(id) {
                out.push_str(&quote(n));
            }
        }
        let mut out = String::new();
        write(self, self.root(), &mut out);
        out.push(';');
        out
    }

    /// Random bifurcating tree grown by repeatedly splitting a uniformly
    /// chosen leaf. Edge lengths are uniform on `lengths`; leaves are named
    /// `t1, t2, …` left to right.
    pub fn random<R: Rng + ?Sized>(n_leaves: usize, lengths: (f64, f64), rng: &mut R) -> Result<Self> {
        if n_leaves < 2 {
            return Err(Error::invalid("a p-tree needs at least two leaves"));
        }
        let (lo, hi) = lengths;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid(format!("invalid edge length range [{lo}, {hi}]")));
        }
        let draw = |rng: &mut R| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let mut b = TreeBuilder::default();
        let root = b.add(None, None, 0.0);
        let mut leaves = vec![b.add(Some(root), None, draw(rng)), b.add(Some(root), None, draw(rng))];
        while leaves.len() < n_leaves {
            let idx = rng.random_range(0..leaves.len());
            let split = leaves.swap_remove(idx);
            leaves.push(b.add(Some(split), None, draw(rng)));
            leaves.push(b.add(Some(split), None, draw(rng)));
        }
        let tree = b.build()?;
        let mut b = TreeBuilder {
            nodes: tree.nodes.clone(),
        };
        for (i, leaf) in tree.leaves().enumerate() {
            b.set_name(leaf, Some(format!("t{}", i + 1)));
        }
        b.build()
    }
}

/// Row order of per-leaf matrices: a permutation of the tree's leaves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeafOrder {
    ids: Vec<NodeId>,
    names: Vec<String>,
}

impl LeafOrder {
    /// Leaves in left-to-right tree order.
    pub fn of(tree: &PTree) -> Self {
        let ids: Vec<NodeId> = tree.leaves().collect();
        let names = ids.iter().map(|&id| tree.label(id)).collect();
        Self { ids, names }
    }

    /// Order given by leaf names; must name every leaf exactly once.
    pub fn from_names<S: AsRef<str>>(tree: &PTree, names: &[S]) -> Result<Self> {
        let mut ids = Vec::with_capacity(names.len());
        let mut missing_in_tree = Vec::new();
        for n in names {
            match tree.find_leaf(n.as_ref()) {
                Some(id) if !ids.contains(&id) => ids.push(id),
                Some(_) => return Err(Error::invalid(format!("leaf {:?} listed twice", n.as_ref()))),
                None => missing_in_tree.push(n.as_ref().to_string()),
            }
        }
        let missing_in_data: Vec<String> = tree
            .leaves()
            .filter(|id| !ids.contains(id))
            .map(|id| tree.label(id))
            .collect();
        if !missing_in_tree.is_empty() || !missing_in_data.is_empty() {
            return Err(Error::Reconcile {
                missing_in_tree,
                missing_in_data,
            });
        }
        Ok(Self {
            names: ids.iter().map(|&id| tree.label(id)).collect(),
            ids,
        })
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Matrix of shared root-to-MRCA path lengths, `C_ij = L(r, MRCA(n_i, n_j))`.
#[derive(Clone, Debug)]
pub struct EvolCovariance {
    matrix: DMatrix<f64>,
    order: LeafOrder,
}

impl EvolCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn order(&self) -> &LeafOrder {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Wrap an explicit matrix (e.g. the identity) with a leaf order.
    pub fn from_matrix(matrix: DMatrix<f64>, order: LeafOrder) -> Result<Self> {
        if matrix.nrows() != order.len() || matrix.ncols() != order.len() {
            return Err(Error::DimensionMismatch {
                expected: order.len(),
                found: matrix.nrows(),
            });
        }
        if (&matrix - matrix.transpose()).amax() > 1e-12 * matrix.amax().max(1.0) {
            return Err(Error::invalid("covariance matrix is not symmetric"));
        }
        Ok(Self { matrix, order })
    }

    /// CSV with leaf names as header row and first column.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::new()];
        header.extend(self.order.names().iter().cloned());
        w.write_record(&header)?;
        for (i, name) in self.order.names().iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(self.matrix.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn evolutionary_covariance(tree: &PTree, order: &LeafOrder) -> Result<EvolCovariance> {
    let n = order.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        let a = order.ids()[i];
        if !tree.is_leaf(a) {
            return Err(Error::invalid(format!("node {a} in leaf order is not a leaf")));
        }
        c[(i, i)] = tree.depth(a);
        for j in 0..i {
            let m = tree.mrca(a, order.ids()[j])?;
            c[(i, j)] = tree.depth(m);
            c[(j, i)] = c[(i, j)];
        }
    }
    Ok(EvolCovariance {
        matrix: c,
        order: order.clone(),
    })
}
