//! Gaussian random walk on a phylogeny, marginalized by belief propagation.
//!
//! The root location is drawn from `N(0, I)` and every other vertex from a
//! Gaussian centred on its parent with variance equal to the branch length.
//! Leaf evidence is a diagonal Gaussian factor per leaf; a zero variance
//! observes the leaf exactly.
//!
//! The root prior is treated as a pseudo-edge of length 1 joining the root to
//! a point mass at the origin, so every vertex combines messages the same
//! way. Messages are diagonal and every dimension is independent.

mod dense;
mod gradient;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phylogeny::{BranchId, Phylogeny, VertexId};

pub use dense::{dense_oracle, DenseOracle, DENSE_ORACLE_MAX_LEAVES};
pub use gradient::{leaf_predictive_grad, LeafGradient, PredictiveGradient};

/// Smallest branch-length variance used in message passing.
pub const BRANCH_VARIANCE_FLOOR: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub(crate) fn edge_variance(len: f64) -> f64 {
    len.max(BRANCH_VARIANCE_FLOOR)
}

/// Diagonal Gaussian over a `d`-dimensional location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFactor {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianFactor {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: variance.len(),
            });
        }
        if mean.is_empty() {
            return Err(Error::Argument("a Gaussian factor needs at least one dimension".into()));
        }
        for &m in &mean {
            if !m.is_finite() {
                return Err(Error::domain("mean", m, "the finite reals"));
            }
        }
        for &v in &variance {
            if !(v >= 0.0) || v.is_infinite() {
                return Err(Error::domain("variance", v, "[0, inf)"));
            }
        }
        Ok(GaussianFactor { mean, variance })
    }

    /// A point-mass observation.
    pub fn observed(mean: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((z, m), v)| -0.5 * (LN_2PI + v.ln() + (z - m) * (z - m) / v))
            .sum()
    }
}

/// Check one factor per leaf label with a common dimension, returning it.
pub fn check_evidence(tree: &Phylogeny, leaves: &[GaussianFactor]) -> Result<usize> {
    if leaves.len() != tree.label_slots() {
        return Err(Error::Arity {
            expected: tree.label_slots(),
            got: leaves.len(),
        });
    }
    let d = leaves.first().map_or(0, GaussianFactor::dim);
    for f in leaves {
        if f.mean.len() != d || f.variance.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: f.mean.len().max(f.variance.len()),
            });
        }
        if let Some(&v) = f.variance.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::domain("variance", v, "[0, inf)"));
        }
    }
    Ok(d)
}

/// Gaussian message about one vertex's location: `N(mu, diag(nu))` with the
/// log normalizer accumulated by the combinations that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub nu: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_z: f64,
}

impl Message {
    pub(crate) fn origin(d: usize) -> Self {
        Message {
            nu: vec![0.0; d],
            mu: vec![0.0; d],
            log_z: 0.0,
        }
    }

    fn from_factor(f: &GaussianFactor) -> Self {
        Message {
            nu: f.variance.clone(),
            mu: f.mean.clone(),
            log_z: 0.0,
        }
    }

    /// The same message after diffusing along an edge of variance `e`.
    pub(crate) fn widened(&self, e: f64) -> Message {
        Message {
            nu: self.nu.iter().map(|n| n + e).collect(),
            mu: self.mu.clone(),
            log_z: self.log_z,
        }
    }
}

/// Product of two messages (already widened by their edges). The returned
/// `log_z` adds the normalizer `log N(mu_1; mu_2, nu_1 + nu_2)` to both inputs'.
pub(crate) fn combine(a: &Message, b: &Message) -> Message {
    let d = a.mu.len();
    let mut nu = Vec::with_capacity(d);
    let mut mu = Vec::with_capacity(d);
    let mut log_z = a.log_z + b.log_z;
    for k in 0..d {
        let (w1, w2) = (a.nu[k], b.nu[k]);
        let s = w1 + w2;
        let diff = a.mu[k] - b.mu[k];
        log_z -= 0.5 * (diff * diff / s + s.ln() + LN_2PI);
        nu.push(w1 * w2 / s);
        mu.push((a.mu[k] * w2 + b.mu[k] * w1) / s);
    }
    Message { nu, mu, log_z }
}

/// Log normalizer of three messages meeting at a vertex, per dimension
/// `∫ Π_i N(x; mu_i, w_i) dx`, summed over dimensions.
pub(crate) fn three_way_log_z(k: &Message, l: &Message, m: &Message) -> f64 {
    let mut out = 0.0;
    for i in 0..k.mu.len() {
        let (wk, wl, wm) = (k.nu[i], l.nu[i], m.nu[i]);
        let s = wk * wl + wl * wm + wm * wk;
        let (a, b, c) = (k.mu[i], l.mu[i], m.mu[i]);
        let q = wm * (a - b).powi(2) + wk * (b - c).powi(2) + wl * (c - a).powi(2);
        out += -0.5 * q / s - 0.5 * s.ln() - LN_2PI;
    }
    out
}

/// Upward messages keyed by vertex and the vertex's subtree stamp.
///
/// A cache belongs to one evidence set; call [`clear`](MessageCache::clear)
/// after changing the evidence. Tree surgery needs no action: it gives fresh
/// stamps to every vertex whose subtree changed, and stale entries are
/// recomputed on the next lookup.
#[derive(Clone, Debug, Default)]
pub struct MessageCache {
    up: Vec<Option<(u64, Message)>>,
    hits: u64,
    misses: u64,
}

impl MessageCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.up.clear();
    }

    /// `(hits, misses)` since creation.
    pub fn stats(&self) -> (u64, u64) {
        (self.hits, self.misses)
    }

    fn get(&mut self, tree: &Phylogeny, v: VertexId) -> Option<&Message> {
        let stamp = tree.stamp(v);
        match self.up.get(v) {
            Some(Some((s, _))) if *s == stamp => {
                self.hits += 1;
                self.up[v].as_ref().map(|(_, m)| m)
            }
            _ => None,
        }
    }

    fn put(&mut self, tree: &Phylogeny, v: VertexId, m: Message) {
        if self.up.len() <= v {
            self.up.resize(v + 1, None);
        }
        self.misses += 1;
        self.up[v] = Some((tree.stamp(v), m));
    }
}

/// Message about `z_v` from the evidence in the subtree below `v`, not
/// including the edge above `v`.
pub(crate) fn up_message(tree: &Phylogeny, leaves: &[GaussianFactor], cache: &mut MessageCache, v: VertexId) -> Message {
    if let Some(m) = cache.get(tree, v) {
        return m.clone();
    }
    // iterative post-order over the stale part of the subtree
    let mut stack = vec![(v, false)];
    while let Some((u, expanded)) = stack.pop() {
        if cache.get(tree, u).is_some() {
            continue;
        }
        match tree.children(u) {
            None => {
                let label = tree.label(u).expect("leaf has a label");
                cache.put(tree, u, Message::from_factor(&leaves[label]));
            }
            Some([l, r]) if expanded => {
                let t = tree.time(u);
                let ml = cache.get(tree, l).expect("child computed").widened(edge_variance(tree.time(l) - t));
                let mr = cache.get(tree, r).expect("child computed").widened(edge_variance(tree.time(r) - t));
                cache.put(tree, u, combine(&ml, &mr));
            }
            Some([l, r]) => {
                stack.push((u, true));
                stack.push((r, false));
                stack.push((l, false));
            }
        }
    }
    cache.get(tree, v).expect("computed above").clone()
}

fn root_prior_log_z(root: &Message) -> f64 {
    let origin = Message::origin(root.mu.len()).widened(1.0);
    combine(root, &origin).log_z
}

/// `log p(evidence | tree)`: the GRW likelihood of point observations, or the
/// Gaussian-smoothed marginal likelihood under soft evidence.
pub fn joint_log_likelihood(tree: &Phylogeny, leaves: &[GaussianFactor], cache: &mut MessageCache) -> Result<f64> {
    check_evidence(tree, leaves)?;
    let up = up_message(tree, leaves, cache, tree.root());
    Ok(root_prior_log_z(&up))
}

/// Message about `z_{parent(x)}` from everything outside the subtree of `x`,
/// with its accumulated log normalizer.
fn above_message(tree: &Phylogeny, leaves: &[GaussianFactor], cache: &mut MessageCache, x: VertexId, d: usize) -> Message {
    let mut path: Vec<VertexId> = vec![x];
    path.extend(tree.ancestors(x));
    // path = x, parent(x), ..., root; walk it top-down
    let mut top = Message::origin(d).widened(1.0);
    for w in path.windows(2).rev() {
        let (c, p) = (w[0], w[1]);
        let s = tree.sibling(c).expect("non-root vertex has a sibling");
        let tp = tree.time(p);
        let from_s = up_message(tree, leaves, cache, s).widened(edge_variance(tree.time(s) - tp));
        let above = combine(&top, &from_s);
        if c == x {
            return above;
        }
        top = above.widened(edge_variance(tree.time(c) - tp));
    }
    unreachable!("x is not the root")
}

/// Joint log likelihood assembled at internal vertex `v` from its three
/// incoming messages. Equal to [`joint_log_likelihood`] for every `v`.
pub fn joint_log_likelihood_at(tree: &Phylogeny, leaves: &[GaussianFactor], cache: &mut MessageCache, v: VertexId) -> Result<f64> {
    let d = check_evidence(tree, leaves)?;
    let [l, r] = tree.children(v).ok_or(Error::Argument(format!("vertex {v} is a leaf")))?;
    let t = tree.time(v);
    let ml = up_message(tree, leaves, cache, l).widened(edge_variance(tree.time(l) - t));
    let mr = up_message(tree, leaves, cache, r).widened(edge_variance(tree.time(r) - t));
    let top = match tree.parent(v) {
        None => Message::origin(d).widened(1.0),
        Some(p) => above_message(tree, leaves, cache, v, d).widened(edge_variance(t - tree.time(p))),
    };
    Ok(ml.log_z + mr.log_z + top.log_z + three_way_log_z(&ml, &mr, &top))
}

/// Distribution of a leaf's location given the evidence at every other leaf.
/// The target's own factor is not used.
pub fn leaf_predictive(tree: &Phylogeny, leaves: &[GaussianFactor], target: usize, cache: &mut MessageCache) -> Result<GaussianFactor> {
    let d = check_evidence(tree, leaves)?;
    let v = tree.leaf_vertex(target)?;
    let p = tree.parent(v).expect("a leaf is not the root");
    let m = above_message(tree, leaves, cache, v, d).widened(edge_variance(tree.time(v) - tree.time(p)));
    Ok(GaussianFactor {
        mean: m.mu,
        variance: m.nu,
    })
}

/// For one branch: the message from below (the subtree of its child) and the
/// message from above (everything else, about the parent's location).
#[derive(Clone, Debug)]
pub struct BranchMessages {
    pub branch: BranchId,
    pub t_parent: f64,
    pub t_child: f64,
    pub below: Message,
    pub above: Message,
}

impl BranchMessages {
    /// Predictive Gaussian for a new leaf hung from this branch at time `t`.
    pub fn attach_predictive(&self, t: f64) -> GaussianFactor {
        let from_above = self.above.widened(edge_variance(t - self.t_parent));
        let from_below = self.below.widened(edge_variance(self.t_child - t));
        let at = combine(&from_above, &from_below).widened(edge_variance(1.0 - t));
        GaussianFactor {
            mean: at.mu,
            variance: at.nu,
        }
    }
}

/// Messages on both sides of every branch, in increasing branch order.
pub fn branch_messages(tree: &Phylogeny, leaves: &[GaussianFactor], cache: &mut MessageCache) -> Result<Vec<BranchMessages>> {
    let d = check_evidence(tree, leaves)?;
    let mut above: Vec<Option<Message>> = vec![None; tree.vertices.len()];
    for v in tree.preorder() {
        let Some([l, r]) = tree.children(v) else { continue };
        let t = tree.time(v);
        let top = match tree.parent(v) {
            None => Message::origin(d).widened(1.0),
            Some(p) => above[v].as_ref().expect("parent visited first").widened(edge_variance(t - tree.time(p))),
        };
        let ml = up_message(tree, leaves, cache, l).widened(edge_variance(tree.time(l) - t));
        let mr = up_message(tree, leaves, cache, r).widened(edge_variance(tree.time(r) - t));
        above[l] = Some(combine(&top, &mr));
        above[r] = Some(combine(&top, &ml));
    }
    tree.branches()
        .into_iter()
        .map(|b| {
            let x = b.child();
            Ok(BranchMessages {
                branch: b,
                t_parent: tree.time(tree.parent(x).expect("branch has a parent")),
                t_child: tree.time(x),
                below: up_message(tree, leaves, cache, x),
                above: above[x].take().expect("every non-root vertex visited"),
            })
        })
        .collect()
}

/// Draw vertex locations from the GRW prior and return the leaf locations as
/// point observations, indexed by label.
pub fn sample_locations<R: Rng + ?Sized>(tree: &Phylogeny, d: usize, rng: &mut R) -> Vec<GaussianFactor> {
    let mut loc: Vec<Vec<f64>> = vec![Vec::new(); tree.vertices.len()];
    for v in tree.preorder() {
        let (base, var) = match tree.parent(v) {
            None => (vec![0.0; d], 1.0),
            Some(p) => (loc[p].clone(), tree.time(v) - tree.time(p)),
        };
        let sd = var.sqrt();
        loc[v] = base.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    }
    let mut out = vec![
        GaussianFactor {
            mean: vec![0.0; d],
            variance: vec![0.0; d],
        };
        tree.label_slots()
    ];
    for label in tree.leaf_labels() {
        let v = tree.leaf_vertex(label).expect("label is live");
        out[label].mean = loc[v].clone();
    }
    out
}
