use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Phylogeny, Vertex, VertexId};
use crate::error::{Error, Result};

/// Version of the JSON tree schema written by [`Phylogeny::to_dump`].
pub const TREE_SCHEMA_VERSION: u32 = 1;

/// JSON-serializable tree: one record per vertex, root first.
///
/// Siblings appear in the list in child-slot order, so a dump restores child
/// order and vertex ids exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    pub schema_version: u32,
    pub vertices: Vec<VertexRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexRecord {
    pub id: VertexId,
    pub parent: Option<VertexId>,
    pub time: f64,
    pub is_leaf: bool,
    pub label: Option<usize>,
}

impl Phylogeny {
    pub fn to_dump(&self) -> TreeDump {
        // list children in slot order so the loader recovers it
        let mut order = Vec::with_capacity(self.n_vertices());
        order.push(self.root);
        for v in self.preorder() {
            if let Some([l, r]) = self.children(v) {
                order.push(l);
                order.push(r);
            }
        }
        let vertices = order
            .into_iter()
            .map(|v| VertexRecord {
                id: v,
                parent: self.parent(v),
                time: self.time(v),
                is_leaf: self.is_leaf(v),
                label: self.label(v),
            })
            .collect();
        TreeDump {
            schema_version: TREE_SCHEMA_VERSION,
            vertices,
        }
    }

    pub fn from_dump(dump: &TreeDump) -> Result<Self> {
        if dump.schema_version != TREE_SCHEMA_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported tree schema version {}", dump.schema_version),
            });
        }
        let size = dump.vertices.iter().map(|r| r.id + 1).max().unwrap_or(0);
        let mut vertices = vec![Vertex::dead(); size];
        let mut kids: Vec<Vec<VertexId>> = vec![Vec::new(); size];
        let mut root = None;
        for r in &dump.vertices {
            if vertices[r.id].live {
                return Err(Error::InvalidTree(format!("vertex {} listed twice", r.id)));
            }
            vertices[r.id] = Vertex {
                parent: r.parent,
                children: None,
                time: r.time,
                label: r.label,
                internal_count: 0,
                live: true,
                stamp: 0,
            };
            match r.parent {
                Some(p) if p < size => kids[p].push(r.id),
                Some(p) => return Err(Error::Lookup { kind: "vertex", id: p }),
                None if root.is_none() => root = Some(r.id),
                None => return Err(Error::InvalidTree("more than one root".into())),
            }
        }
        for (id, r) in dump.vertices.iter().map(|r| (r.id, r)) {
            match (kids[id].as_slice(), r.is_leaf) {
                ([], true) => {}
                (&[l, c], false) => vertices[id].children = Some([l, c]),
                (k, _) => {
                    return Err(Error::InvalidTree(format!(
                        "vertex {id} (is_leaf = {}) has {} children",
                        r.is_leaf,
                        k.len()
                    )))
                }
            }
        }
        let root = root.ok_or_else(|| Error::InvalidTree("no root".into()))?;
        Phylogeny::from_raw(vertices, root)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_dump()).expect("tree dump serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dump: TreeDump = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_dump(&dump)
    }

    /// Graphviz rendering: leaves as boxes, internal vertices labelled with
    /// their time, edges labelled with branch length.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph phylogeny {\n  rankdir=TB;\n  node [shape=circle];\n");
        for v in self.preorder() {
            match self.label(v) {
                Some(l) => writeln!(s, "  v{v} [label=\"{l}\", shape=box];"),
                None => writeln!(s, "  v{v} [label=\"t={}\"];", self.time(v)),
            }
            .unwrap();
        }
        for v in self.preorder() {
            if let Some(p) = self.parent(v) {
                writeln!(s, "  v{p} -> v{v} [label=\"{}\"];", self.time(v) - self.time(p)).unwrap();
            }
        }
        s.push_str("}\n");
        s
    }
}
