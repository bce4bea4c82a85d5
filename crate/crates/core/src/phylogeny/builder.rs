use super::{Phylogeny, Vertex};
use crate::error::{Error, Result};

/// Opaque handle to a vertex created by a [`TreeBuilder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeHandle(usize);

/// Bottom-up construction of a [`Phylogeny`].
///
/// Vertex ids are assigned in creation order. Leaves get time 1; the vertex
/// passed to [`finish`](TreeBuilder::finish) becomes the root and must have
/// time 0.
///
/// ```
/// use tmc::phylogeny::TreeBuilder;
///
/// let mut b = TreeBuilder::new();
/// let (a, c, d) = (b.leaf(0), b.leaf(1), b.leaf(2));
/// let x = b.internal(0.6, a, c);
/// let root = b.internal(0.0, x, d);
/// let tree = b.finish(root).unwrap();
/// assert_eq!(tree.n_leaves(), 3);
/// ```
#[derive(Default)]
pub struct TreeBuilder {
    vertices: Vec<Vertex>,
}

impl TreeBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, label: usize) -> NodeHandle {
        self.vertices.push(Vertex {
            parent: None,
            children: None,
            time: 1.0,
            label: Some(label),
            internal_count: 0,
            live: true,
            stamp: 0,
        });
        NodeHandle(self.vertices.len() - 1)
    }

    pub fn internal(&mut self, time: f64, left: NodeHandle, right: NodeHandle) -> NodeHandle {
        let id = self.vertices.len();
        self.vertices.push(Vertex {
            parent: None,
            children: Some([left.0, right.0]),
            time,
            label: None,
            internal_count: 0,
            live: true,
            stamp: 0,
        });
        self.vertices[left.0].parent = Some(id);
        self.vertices[right.0].parent = Some(id);
        NodeHandle(id)
    }

    pub fn finish(self, root: NodeHandle) -> Result<Phylogeny> {
        let orphans = self
            .vertices
            .iter()
            .enumerate()
            .filter(|(i, v)| v.parent.is_none() && *i != root.0)
            .count();
        if orphans > 0 {
            return Err(Error::InvalidTree(format!("{orphans} vertices are not connected to the root")));
        }
        Phylogeny::from_raw(self.vertices, root.0)
    }
}
