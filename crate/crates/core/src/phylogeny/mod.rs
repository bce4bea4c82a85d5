//! Rooted full binary trees with time labels.
//!
//! A [`Phylogeny`] stores its vertices in an index arena. Vertex ids are
//! stable across surgery: pruning a subtree frees the id of the removed parent,
//! and regrafting reuses it, so a rejected Metropolis-Hastings move can be
//! undone exactly. Leaves carry integer labels `0..N` that index the evidence
//! arrays used by the likelihood.
//!
//! Times run from the root (time 0) to the leaves (time 1). Every internal
//! vertex other than the root has a time strictly between its parent's time
//! and each of its children's times.

mod builder;
mod export;
mod newick;
mod prior;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use builder::{NodeHandle, TreeBuilder};
pub use export::{TreeDump, VertexRecord, TREE_SCHEMA_VERSION};
pub use prior::{
    attachment_log_prior, attachment_log_priors, log_time_density, prior_log_density,
    prior_log_pmf, sample_prior, sample_stick_time, stick_time_log_density, TmcParams,
};

pub(crate) use prior::{log_sum_exp, log_topology_prior_unchecked, stick_time_rule};

/// Index of a vertex in the tree arena.
pub type VertexId = usize;

/// A branch, named by its child vertex: the edge `(parent(v), v)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct BranchId(pub VertexId);

impl BranchId {
    pub fn child(self) -> VertexId {
        self.0
    }
}

impl std::fmt::Display for BranchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

// Stamps identify the state of a vertex's subtree. Every surgery assigns a
// fresh stamp to the vertices whose downstream subtree changed, which is what
// the message cache keys on.
static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug)]
pub(crate) struct Vertex {
    pub(crate) parent: Option<VertexId>,
    pub(crate) children: Option<[VertexId; 2]>,
    pub(crate) time: f64,
    pub(crate) label: Option<usize>,
    /// Number of internal vertices in the subtree rooted here (0 for leaves).
    pub(crate) internal_count: usize,
    pub(crate) live: bool,
    pub(crate) stamp: u64,
}

impl Vertex {
    fn dead() -> Self {
        Vertex {
            parent: None,
            children: None,
            time: 0.0,
            label: None,
            internal_count: 0,
            live: false,
            stamp: 0,
        }
    }
}

/// A rooted full binary tree with time labels in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Phylogeny {
    pub(crate) vertices: Vec<Vertex>,
    free: Vec<VertexId>,
    pub(crate) root: VertexId,
    leaf_vertex: Vec<Option<VertexId>>,
    n_leaves: usize,
}

/// A subtree detached by [`Phylogeny::prune`], waiting to be regrafted.
#[derive(Clone, Debug, PartialEq)]
pub struct Pruned {
    /// Root of the detached subtree.
    pub subtree: VertexId,
    /// Id of the removed parent vertex, reused by the next regraft.
    pub spare: VertexId,
    /// The branch that now spans the gap left by the removed parent.
    pub old_branch: BranchId,
    /// Time of the removed parent.
    pub old_time: f64,
    /// Child slot the subtree occupied under its old parent.
    pub subtree_slot: usize,
}

impl PartialEq for Phylogeny {
    /// Structural identity: same live vertex ids, parents, child order,
    /// bit-identical times, labels and subtree counts. Free-list contents and
    /// cache stamps are ignored.
    fn eq(&self, other: &Self) -> bool {
        if self.root != other.root || self.n_leaves != other.n_leaves {
            return false;
        }
        let live = |p: &Phylogeny| p.vertices.iter().enumerate().filter(|(_, v)| v.live).map(|(i, _)| i).collect::<Vec<_>>();
        if live(self) != live(other) {
            return false;
        }
        let labels = |p: &Phylogeny| {
            let mut l: Vec<_> = p.leaf_vertex.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
            l.sort_unstable();
            l
        };
        if labels(self) != labels(other) {
            return false;
        }
        self.vertices
            .iter()
            .zip(other.vertices.iter())
            .filter(|(a, _)| a.live)
            .all(|(a, b)| {
                a.parent == b.parent
                    && a.children == b.children
                    && a.time.to_bits() == b.time.to_bits()
                    && a.label == b.label
                    && a.internal_count == b.internal_count
            })
    }
}

impl Phylogeny {
    /// The two-leaf tree: a root at time 0 with leaves `0` and `1` at time 1.
    pub fn cherry() -> Self {
        let mut b = TreeBuilder::new();
        let l0 = b.leaf(0);
        let l1 = b.leaf(1);
        let root = b.internal(0.0, l0, l1);
        b.finish(root).expect("cherry is valid")
    }

    pub(crate) fn from_raw(vertices: Vec<Vertex>, root: VertexId) -> Result<Self> {
        let mut leaf_vertex: Vec<Option<VertexId>> = Vec::new();
        let mut free = Vec::new();
        let mut n_leaves = 0;
        for (id, v) in vertices.iter().enumerate() {
            if !v.live {
                free.push(id);
                continue;
            }
            if let Some(label) = v.label {
                if label >= leaf_vertex.len() {
                    leaf_vertex.resize(label + 1, None);
                }
                if leaf_vertex[label].is_some() {
                    return Err(Error::InvalidTree(format!("duplicate leaf label {label}")));
                }
                leaf_vertex[label] = Some(id);
                n_leaves += 1;
            }
        }
        free.reverse();
        let mut tree = Phylogeny {
            vertices,
            free,
            root,
            leaf_vertex,
            n_leaves,
        };
        tree.recount();
        let stamp = fresh_stamp();
        for v in tree.vertices.iter_mut().filter(|v| v.live) {
            v.stamp = stamp;
        }
        tree.validate()?;
        Ok(tree)
    }

    fn recount(&mut self) {
        for v in self.postorder() {
            let count = match self.vertices[v].children {
                Some([l, r]) => 1 + self.vertices[l].internal_count + self.vertices[r].internal_count,
                None => 0,
            };
            self.vertices[v].internal_count = count;
        }
    }

    pub fn root(&self) -> VertexId {
        self.root
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn n_vertices(&self) -> usize {
        2 * self.n_leaves - 1
    }

    /// One past the largest leaf label in use. Evidence arrays are indexed
    /// by label, so they must have this length.
    pub fn label_slots(&self) -> usize {
        self.leaf_vertex.len()
    }

    pub fn contains(&self, v: VertexId) -> bool {
        self.vertices.get(v).is_some_and(|x| x.live)
    }

    fn vertex(&self, v: VertexId) -> Result<&Vertex> {
        match self.vertices.get(v) {
            Some(x) if x.live => Ok(x),
            _ => Err(Error::Lookup { kind: "vertex", id: v }),
        }
    }

    pub fn parent(&self, v: VertexId) -> Option<VertexId> {
        self.vertices[v].parent
    }

    pub fn children(&self, v: VertexId) -> Option<[VertexId; 2]> {
        self.vertices[v].children
    }

    pub fn time(&self, v: VertexId) -> f64 {
        self.vertices[v].time
    }

    pub fn is_leaf(&self, v: VertexId) -> bool {
        self.vertices[v].children.is_none()
    }

    pub fn label(&self, v: VertexId) -> Option<usize> {
        self.vertices[v].label
    }

    /// `c(v)`: the number of internal vertices in the subtree rooted at `v`.
    pub fn internal_count(&self, v: VertexId) -> usize {
        self.vertices[v].internal_count
    }

    pub(crate) fn stamp(&self, v: VertexId) -> u64 {
        self.vertices[v].stamp
    }

    pub fn leaf_vertex(&self, label: usize) -> Result<VertexId> {
        self.leaf_vertex
            .get(label)
            .copied()
            .flatten()
            .ok_or(Error::Lookup { kind: "leaf", id: label })
    }

    /// Leaf labels in increasing order.
    pub fn leaf_labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.leaf_vertex.iter().enumerate().filter_map(|(l, v)| v.map(|_| l))
    }

    /// Live vertex ids in increasing order.
    pub fn vertex_ids(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.vertices.iter().enumerate().filter(|(_, v)| v.live).map(|(i, _)| i)
    }

    /// Every edge of the tree, named by child vertex, in increasing id order.
    pub fn branches(&self) -> Vec<BranchId> {
        self.vertex_ids().filter(|&v| v != self.root).map(BranchId).collect()
    }

    /// `(t_parent, t_child)` for a branch.
    pub fn branch_interval(&self, branch: BranchId) -> Result<(f64, f64)> {
        let v = self.vertex(branch.0)?;
        let p = v.parent.ok_or(Error::Lookup { kind: "branch", id: branch.0 })?;
        Ok((self.vertices[p].time, v.time))
    }

    pub fn sibling(&self, v: VertexId) -> Option<VertexId> {
        let p = self.vertices[v].parent?;
        let [l, r] = self.vertices[p].children?;
        Some(if l == v { r } else { l })
    }

    /// Vertices in post-order (children before parents).
    pub fn postorder(&self) -> Vec<VertexId> {
        let mut out = Vec::with_capacity(self.vertices.len());
        let mut stack = vec![(self.root, false)];
        while let Some((v, expanded)) = stack.pop() {
            match self.vertices[v].children {
                Some([l, r]) if !expanded => {
                    stack.push((v, true));
                    stack.push((r, false));
                    stack.push((l, false));
                }
                _ => out.push(v),
            }
        }
        out
    }

    /// Vertices in pre-order (parents before children, left before right).
    pub fn preorder(&self) -> Vec<VertexId> {
        self.preorder_from(self.root)
    }

    pub fn preorder_from(&self, top: VertexId) -> Vec<VertexId> {
        let mut out = Vec::new();
        let mut stack = vec![top];
        while let Some(v) = stack.pop() {
            out.push(v);
            if let Some([l, r]) = self.vertices[v].children {
                stack.push(r);
                stack.push(l);
            }
        }
        out
    }

    /// Path from `v` up to and including the root.
    pub fn ancestors(&self, v: VertexId) -> impl Iterator<Item = VertexId> + '_ {
        std::iter::successors(Some(v), move |&x| self.vertices[x].parent)
    }

    pub fn is_ancestor(&self, anc: VertexId, v: VertexId) -> bool {
        self.ancestors(v).any(|x| x == anc)
    }

    /// Leaf labels below `v`, sorted.
    pub fn leaves_below(&self, v: VertexId) -> Vec<usize> {
        let mut out: Vec<usize> = self.preorder_from(v).into_iter().filter_map(|x| self.vertices[x].label).collect();
        out.sort_unstable();
        out
    }

    /// Canonical description of the unranked labeled topology: the sorted
    /// list of leaf sets under every internal vertex.
    pub fn clades(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self
            .vertex_ids()
            .filter(|&v| !self.is_leaf(v))
            .map(|v| self.leaves_below(v))
            .collect();
        out.sort();
        out
    }

    /// Leaf sets of the root's two children, smaller-label set first.
    pub fn top_split(&self) -> (Vec<usize>, Vec<usize>) {
        let [l, r] = self.vertices[self.root].children.expect("root is internal");
        let (a, b) = (self.leaves_below(l), self.leaves_below(r));
        if a[0] < b[0] {
            (a, b)
        } else {
            (b, a)
        }
    }

    /// Check every structural invariant, recomputing subtree counts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTree(m));
        let root = self.vertex(self.root)?;
        if root.parent.is_some() {
            return bad("root has a parent".into());
        }
        if root.time != 0.0 {
            return bad(format!("root time is {}", root.time));
        }
        if self.n_leaves < 2 {
            return bad(format!("{} leaves", self.n_leaves));
        }
        let order = self.preorder();
        let live = self.vertices.iter().filter(|v| v.live).count();
        if order.len() != live {
            return bad(format!("{} vertices reachable from the root, {} live", order.len(), live));
        }
        if live != 2 * self.n_leaves - 1 {
            return bad(format!("{live} vertices for {} leaves", self.n_leaves));
        }
        let mut seen = vec![false; self.vertices.len()];
        for &v in &order {
            if std::mem::replace(&mut seen[v], true) {
                return bad(format!("vertex {v} reached twice"));
            }
            let x = &self.vertices[v];
            match x.children {
                Some([l, r]) => {
                    if x.label.is_some() {
                        return bad(format!("internal vertex {v} has a label"));
                    }
                    for c in [l, r] {
                        if !self.contains(c) || self.vertices[c].parent != Some(v) {
                            return bad(format!("child {c} of {v} does not point back"));
                        }
                        if self.vertices[c].time <= x.time {
                            return bad(format!("child {c} (t={}) not after parent {v} (t={})", self.vertices[c].time, x.time));
                        }
                    }
                    if v != self.root && !(x.time > 0.0 && x.time < 1.0) {
                        return bad(format!("internal vertex {v} has time {}", x.time));
                    }
                    let expect = 1 + self.vertices[l].internal_count + self.vertices[r].internal_count;
                    if x.internal_count != expect {
                        return bad(format!("vertex {v} count {} != {expect}", x.internal_count));
                    }
                }
                None => {
                    if x.time != 1.0 {
                        return bad(format!("leaf {v} has time {}", x.time));
                    }
                    let Some(label) = x.label else {
                        return bad(format!("leaf {v} has no label"));
                    };
                    if self.leaf_vertex.get(label).copied().flatten() != Some(v) {
                        return bad(format!("label map disagrees for leaf {v}"));
                    }
                    if x.internal_count != 0 {
                        return bad(format!("leaf {v} has nonzero count"));
                    }
                }
            }
        }
        Ok(())
    }

    fn alloc(&mut self, vertex: Vertex) -> VertexId {
        match self.free.pop() {
            Some(id) => {
                self.vertices[id] = vertex;
                id
            }
            None => {
                self.vertices.push(vertex);
                self.vertices.len() - 1
            }
        }
    }

    fn release(&mut self, id: VertexId) {
        self.vertices[id] = Vertex::dead();
        self.free.push(id);
    }

    fn adjust_counts_and_restamp(&mut self, from: Option<VertexId>, delta: isize) {
        let stamp = fresh_stamp();
        let mut cur = from;
        while let Some(a) = cur {
            let x = &mut self.vertices[a];
            x.internal_count = (x.internal_count as isize + delta) as usize;
            x.stamp = stamp;
            cur = x.parent;
        }
    }

    /// Detach the subtree rooted at `v` together with its parent, splicing the
    /// sibling onto the grandparent.
    ///
    /// The parent of `v` must not be the root: the root time is pinned at 0,
    /// so removing it would leave a tree without a valid root.
    pub fn prune(&mut self, v: VertexId) -> Result<Pruned> {
        self.vertex(v)?;
        let p = self.vertices[v].parent.ok_or_else(|| Error::Argument("cannot prune the root".into()))?;
        let g = self.vertices[p]
            .parent
            .ok_or_else(|| Error::Argument(format!("vertex {v} hangs from the root and cannot be pruned")))?;
        let [pl, pr] = self.vertices[p].children.expect("parent is internal");
        let (s, subtree_slot) = if pl == v { (pr, 0) } else { (pl, 1) };
        let gc = self.vertices[g].children.as_mut().expect("grandparent is internal");
        let slot = if gc[0] == p { 0 } else { 1 };
        gc[slot] = s;
        self.vertices[s].parent = Some(g);
        self.vertices[v].parent = None;
        let old_time = self.vertices[p].time;
        let removed = self.vertices[v].internal_count + 1;
        self.vertices[p].live = false;
        self.vertices[p].children = None;
        self.vertices[p].parent = None;
        self.adjust_counts_and_restamp(Some(g), -(removed as isize));
        Ok(Pruned {
            subtree: v,
            spare: p,
            old_branch: BranchId(s),
            old_time,
            subtree_slot,
        })
    }

    /// Reattach a pruned subtree on `branch` at `time`, reusing the spare
    /// vertex id for the new parent.
    pub fn regraft(&mut self, pruned: &Pruned, branch: BranchId, time: f64) -> Result<()> {
        let x = branch.0;
        let v = pruned.subtree;
        self.vertex(x)?;
        let u = self.vertices[x].parent.ok_or(Error::Lookup { kind: "branch", id: x })?;
        if self.is_ancestor(v, x) {
            return Err(Error::Argument(format!("branch {x} lies inside the pruned subtree")));
        }
        let lo = self.vertices[u].time;
        let hi = self.vertices[x].time.min(self.vertices[v].time);
        if !(time > lo && time < hi) {
            return Err(Error::domain("regraft time", time, format!("the open interval ({lo}, {hi})")));
        }
        let w = pruned.spare;
        if w >= self.vertices.len() || self.vertices[w].live {
            return Err(Error::Argument(format!("spare vertex {w} is not free")));
        }
        let children = if pruned.subtree_slot == 0 { [v, x] } else { [x, v] };
        // w starts with x's count; the restamp pass below adds the subtree's share
        // to w and to every ancestor above it.
        self.vertices[w] = Vertex {
            parent: Some(u),
            children: Some(children),
            time,
            label: None,
            internal_count: self.vertices[x].internal_count,
            live: true,
            stamp: 0,
        };
        let uc = self.vertices[u].children.as_mut().expect("parent is internal");
        let slot = if uc[0] == x { 0 } else { 1 };
        uc[slot] = w;
        self.vertices[x].parent = Some(w);
        self.vertices[v].parent = Some(w);
        self.adjust_counts_and_restamp(Some(w), self.vertices[v].internal_count as isize + 1);
        Ok(())
    }

    /// Insert a new leaf `label` on `branch`, joined through a new internal
    /// vertex at `time`.
    pub fn attach(&mut self, branch: BranchId, time: f64, label: usize) -> Result<()> {
        let (lo, hi) = self.branch_interval(branch)?;
        if !(time > lo && time < hi) {
            return Err(Error::domain("attachment time", time, format!("the open interval ({lo}, {hi})")));
        }
        if self.leaf_vertex.get(label).copied().flatten().is_some() {
            return Err(Error::Argument(format!("leaf label {label} already in use")));
        }
        let leaf = self.alloc(Vertex {
            parent: None,
            children: None,
            time: 1.0,
            label: Some(label),
            internal_count: 0,
            live: true,
            stamp: fresh_stamp(),
        });
        let spare = self.alloc(Vertex::dead());
        let pruned = Pruned {
            subtree: leaf,
            spare,
            old_branch: branch,
            old_time: time,
            subtree_slot: 1,
        };
        if label >= self.leaf_vertex.len() {
            self.leaf_vertex.resize(label + 1, None);
        }
        self.leaf_vertex[label] = Some(leaf);
        self.n_leaves += 1;
        self.regraft(&pruned, branch, time)
    }

    /// Remove leaf `label` and its parent, splicing the sibling onto the
    /// grandparent. Returns the branch and time at which the leaf hung, so that
    /// `attach(branch, time, label)` restores the tree.
    pub fn detach(&mut self, label: usize) -> Result<(BranchId, f64)> {
        if self.n_leaves < 3 {
            return Err(Error::Size { min: 3, got: self.n_leaves });
        }
        let leaf = self.leaf_vertex(label)?;
        let pruned = self.prune(leaf)?;
        self.leaf_vertex[label] = None;
        while self.leaf_vertex.last() == Some(&None) {
            self.leaf_vertex.pop();
        }
        self.n_leaves -= 1;
        self.release(pruned.spare);
        self.release(leaf);
        Ok((pruned.old_branch, pruned.old_time))
    }
}
