//! Newick with branch lengths and integer leaf labels.
//!
//! Internal vertices carry a `[&time=...]` annotation holding their exact
//! time, so that parsing does not have to re-sum branch lengths. Without the
//! annotation a time is recovered as the parent time plus the branch length.
//! Numbers are written in shortest round-trip form.

use std::fmt::Write;

use super::{NodeHandle, Phylogeny, TreeBuilder, VertexId};
use crate::error::{Error, Result};

/// Tolerance on the summed root-to-leaf length when leaf depth is derived
/// from branch lengths.
const LEAF_DEPTH_TOLERANCE: f64 = 1e-9;

pub(crate) fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

impl Phylogeny {
    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        self.write_newick(self.root, &mut out);
        out.push(';');
        out
    }

    fn write_newick(&self, v: VertexId, out: &mut String) {
        match self.children(v) {
            Some([l, r]) => {
                out.push('(');
                self.write_newick(l, out);
                out.push(',');
                self.write_newick(r, out);
                out.push(')');
                if v != self.root {
                    write!(out, "[&time={}]", fmt_f64(self.time(v))).unwrap();
                }
            }
            None => write!(out, "{}", self.label(v).expect("leaf label")).unwrap(),
        }
        if let Some(p) = self.parent(v) {
            write!(out, ":{}", fmt_f64(self.time(v) - self.time(p))).unwrap();
        }
    }

    pub fn from_newick(text: &str) -> Result<Self> {
        let mut parser = Parser { src: text.as_bytes(), pos: 0 };
        let node = parser.subtree()?;
        parser.skip_ws();
        parser.expect(b';')?;
        parser.skip_ws();
        if parser.pos != parser.src.len() {
            return Err(parser.error("trailing characters after ';'"));
        }
        let mut builder = TreeBuilder::new();
        let root = place(&node, 0.0, true, &mut builder)?;
        builder.finish(root)
    }
}

struct ParsedNode {
    children: Vec<ParsedNode>,
    label: Option<String>,
    time: Option<f64>,
    length: Option<f64>,
    line: usize,
}

fn place(node: &ParsedNode, parent_time: f64, is_root: bool, b: &mut TreeBuilder) -> Result<NodeHandle> {
    let err = |message: String| Error::Parse { line: node.line, message };
    let time = if is_root {
        0.0
    } else {
        match (node.time, node.length) {
            (Some(t), _) => t,
            (None, Some(len)) => parent_time + len,
            (None, None) if node.children.is_empty() => 1.0,
            (None, None) => return Err(err("internal vertex without time or branch length".into())),
        }
    };
    match node.children.as_slice() {
        [] => {
            let label = node.label.as_deref().ok_or_else(|| err("leaf without a label".into()))?;
            let label: usize = label.parse().map_err(|_| err(format!("leaf label {label:?} is not a non-negative integer")))?;
            if (time - 1.0).abs() > LEAF_DEPTH_TOLERANCE {
                return Err(err(format!("leaf {label} sits at depth {time}, expected 1")));
            }
            Ok(b.leaf(label))
        }
        [l, r] => {
            let lh = place(l, time, false, b)?;
            let rh = place(r, time, false, b)?;
            Ok(b.internal(time, lh, rh))
        }
        other => Err(err(format!("vertex with {} children; only binary trees are supported", other.len()))),
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn line(&self) -> usize {
        1 + self.src[..self.pos.min(self.src.len())].iter().filter(|&&c| c == b'\n').count()
    }

    fn error(&self, message: &str) -> Error {
        Error::Parse {
            line: self.line(),
            message: format!("{message} (byte {})", self.pos),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected '{}'", c as char)))
        }
    }

    fn token(&mut self) -> String {
        let start = self.pos;
        while self.peek().is_some_and(|c| !b"(),:;[] \t\r\n".contains(&c)) {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let tok = self.token();
        tok.parse().map_err(|_| self.error(&format!("bad number {tok:?}")))
    }

    fn annotation(&mut self) -> Result<Option<f64>> {
        self.expect(b'[')?;
        let start = self.pos;
        while self.peek().is_some_and(|c| c != b']') {
            self.pos += 1;
        }
        let body = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.expect(b']')?;
        let mut time = None;
        for kv in body.trim_start_matches('&').split(',') {
            if let Some(v) = kv.trim().strip_prefix("time=") {
                time = Some(v.parse().map_err(|_| self.error(&format!("bad time annotation {v:?}")))?);
            }
        }
        Ok(time)
    }

    fn subtree(&mut self) -> Result<ParsedNode> {
        self.skip_ws();
        let line = self.line();
        let mut children = Vec::new();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                children.push(self.subtree()?);
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(self.error("expected ',' or ')'")),
                }
            }
        }
        self.skip_ws();
        let label = Some(self.token()).filter(|s| !s.is_empty());
        let mut node = ParsedNode {
            children,
            label,
            time: None,
            length: None,
            line,
        };
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'[') => {
                    if let Some(t) = self.annotation()? {
                        node.time = Some(t);
                    }
                }
                Some(b':') => {
                    self.pos += 1;
                    node.length = Some(self.number()?);
                }
                _ => break,
            }
        }
        if node.children.is_empty() && node.label.is_none() {
            return Err(self.error("empty leaf"));
        }
        Ok(node)
    }
}
