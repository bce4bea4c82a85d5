//! Gradient messages: derivatives of a leaf's predictive Gaussian with
//! respect to the evidence at every other leaf.

use super::{check_evidence, edge_variance, GaussianFactor, Message};
use crate::error::Result;
use crate::phylogeny::{Phylogeny, VertexId};

const ORIGIN: VertexId = usize::MAX;

/// Partials of the predictive `(mu, nu)` and of its log density with respect
/// to one other leaf's evidence. Each field has one entry per dimension; the
/// diagonal model has no cross-dimension terms and `nu` does not depend on
/// any mean.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafGradient {
    pub label: usize,
    pub d_mu_d_mean: Vec<f64>,
    pub d_mu_d_var: Vec<f64>,
    pub d_nu_d_var: Vec<f64>,
    pub d_log_density_d_mean: Vec<f64>,
    pub d_log_density_d_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveGradient {
    pub target: usize,
    pub predictive: GaussianFactor,
    /// `log N(query; mu, nu)`.
    pub log_density: f64,
    /// One entry per other leaf, in increasing label order.
    pub leaves: Vec<LeafGradient>,
}

// Per-leaf partials carried by a message: for each dimension
// [d nu / d var_j, d mu / d var_j, d mu / d mean_j].
type Partials = Vec<[f64; 3]>;

struct GradMessage {
    msg: Message,
    grads: Vec<(usize, Partials)>,
}

fn edge_between(tree: &Phylogeny, u: VertexId, w: VertexId) -> f64 {
    if u == ORIGIN || w == ORIGIN {
        return 1.0;
    }
    edge_variance((tree.time(u) - tree.time(w)).abs())
}

/// Message sent from `u` toward its neighbour `toward`, with gradients.
fn directed(tree: &Phylogeny, leaves: &[GaussianFactor], u: VertexId, toward: VertexId) -> GradMessage {
    if u == ORIGIN {
        return GradMessage {
            msg: Message::origin(leaves[0].dim()),
            grads: Vec::new(),
        };
    }
    let Some([l, r]) = tree.children(u) else {
        let label = tree.label(u).expect("leaf has a label");
        let d = leaves[label].dim();
        return GradMessage {
            msg: Message::from_factor(&leaves[label]),
            grads: vec![(label, vec![[1.0, 0.0, 1.0]; d])],
        };
    };
    let up = tree.parent(u).unwrap_or(ORIGIN);
    let others: Vec<VertexId> = [l, r, up].into_iter().filter(|&n| n != toward).collect();
    debug_assert_eq!(others.len(), 2);
    let a = directed(tree, leaves, others[0], u);
    let b = directed(tree, leaves, others[1], u);
    let ea = edge_between(tree, u, others[0]);
    let eb = edge_between(tree, u, others[1]);
    combine_with_grads(a, ea, b, eb)
}

fn combine_with_grads(a: GradMessage, ea: f64, b: GradMessage, eb: f64) -> GradMessage {
    let ma = a.msg.widened(ea);
    let mb = b.msg.widened(eb);
    let msg = super::combine(&ma, &mb);
    let d = msg.mu.len();
    let mut grads = Vec::with_capacity(a.grads.len() + b.grads.len());
    for (own, other, parts) in [(&ma, &mb, a.grads), (&mb, &ma, b.grads)] {
        for (label, p) in parts {
            let q = (0..d)
                .map(|k| {
                    let (w1, w2) = (own.nu[k], other.nu[k]);
                    let s = w1 + w2;
                    let r = w2 / s;
                    let dmu_dw1 = w2 * (other.mu[k] - own.mu[k]) / (s * s);
                    let [dnu, dmu_var, dmu_mean] = p[k];
                    [r * r * dnu, r * dmu_var + dmu_dw1 * dnu, r * dmu_mean]
                })
                .collect();
            grads.push((label, q));
        }
    }
    GradMessage { msg, grads }
}

/// Predictive Gaussian of leaf `target` given all other leaves, its log
/// density at `query`, and the gradients of all three with respect to every
/// other leaf's mean and variance.
pub fn leaf_predictive_grad(tree: &Phylogeny, leaves: &[GaussianFactor], target: usize, query: &[f64]) -> Result<PredictiveGradient> {
    let d = check_evidence(tree, leaves)?;
    if query.len() != d {
        return Err(crate::Error::Dimension {
            expected: d,
            got: query.len(),
        });
    }
    let v = tree.leaf_vertex(target)?;
    let p = tree.parent(v).expect("a leaf is not the root");
    let incoming = directed(tree, leaves, p, v);
    let e = edge_between(tree, v, p);
    let msg = incoming.msg.widened(e);
    let mut out: Vec<LeafGradient> = incoming
        .grads
        .into_iter()
        .map(|(label, parts)| {
            let mut g = LeafGradient {
                label,
                d_mu_d_mean: Vec::with_capacity(d),
                d_mu_d_var: Vec::with_capacity(d),
                d_nu_d_var: Vec::with_capacity(d),
                d_log_density_d_mean: Vec::with_capacity(d),
                d_log_density_d_var: Vec::with_capacity(d),
            };
            for (k, [dnu, dmu_var, dmu_mean]) in parts.into_iter().enumerate() {
                let (mu, nu) = (msg.mu[k], msg.nu[k]);
                let resid = (query[k] - mu) / nu;
                g.d_mu_d_mean.push(dmu_mean);
                g.d_mu_d_var.push(dmu_var);
                g.d_nu_d_var.push(dnu);
                g.d_log_density_d_mean.push(resid * dmu_mean);
                g.d_log_density_d_var.push((-0.5 / nu + 0.5 * resid * resid) * dnu + resid * dmu_var);
            }
            g
        })
        .collect();
    out.sort_by_key(|g| g.label);
    let predictive = GaussianFactor {
        mean: msg.mu,
        variance: msg.nu,
    };
    Ok(PredictiveGradient {
        target,
        log_density: predictive.log_density(query),
        predictive,
        leaves: out,
    })
}
