//! The time-marginalized coalescent: topology pmf, stick-breaking times and
//! the attachment distribution for a new leaf.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};

use super::{BranchId, Phylogeny, TreeBuilder};
use crate::error::{Error, Result};
use crate::quad;

/// Quadrature order for normalizing the stick density on internal branches.
const STICK_QUAD_ORDER: usize = 64;
/// Width of the final bisection bracket when inverting a stick-time CDF.
const TIME_TOLERANCE: f64 = 1e-10;

/// Beta shape parameters of the stick-breaking time process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct TmcParams {
    a: f64,
    b: f64,
    ln_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    a: f64,
    b: f64,
}

impl TryFrom<RawParams> for TmcParams {
    type Error = Error;
    fn try_from(raw: RawParams) -> Result<Self> {
        TmcParams::new(raw.a, raw.b)
    }
}

impl From<TmcParams> for RawParams {
    fn from(p: TmcParams) -> Self {
        RawParams { a: p.a, b: p.b }
    }
}

impl Default for TmcParams {
    fn default() -> Self {
        TmcParams::new(1.0, 1.0).expect("valid")
    }
}

fn xlogy(c: f64, y: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c * y.ln()
    }
}

impl TmcParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::domain("a", a, "(0, inf)"));
        }
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::domain("b", b, "(0, inf)"));
        }
        Ok(TmcParams { a, b, ln_norm: ln_beta(a, b) })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// `log Beta(x; a, b)`.
    pub fn ln_beta_pdf(&self, x: f64) -> f64 {
        xlogy(self.a - 1.0, x) + xlogy(self.b - 1.0, 1.0 - x) - self.ln_norm
    }

    pub(crate) fn grading(&self) -> u32 {
        let m = self.a.min(self.b).min(1.0);
        ((2.0 / m).ceil() as u32).clamp(1, 8)
    }

    fn beta(&self) -> Beta<f64> {
        Beta::new(self.a, self.b).expect("validated shape parameters")
    }
}

fn ln_binom2(n: usize) -> f64 {
    let n = n as f64;
    (n * (n - 1.0) / 2.0).ln()
}

pub(crate) fn log_topology_prior_unchecked(tree: &Phylogeny) -> f64 {
    let n = tree.n_leaves();
    let ln_fact: f64 = (2..n).map(|k| (k as f64).ln()).sum();
    let counts: f64 = tree
        .vertex_ids()
        .filter(|&v| !tree.is_leaf(v))
        .map(|v| (tree.internal_count(v) as f64).ln())
        .sum();
    let merges: f64 = (1..n).map(|i| ln_binom2(i + 1)).sum();
    ln_fact - counts - merges
}

/// Log probability of the tree's unranked labeled topology under uniform
/// random merging.
pub fn prior_log_pmf(tree: &Phylogeny) -> Result<f64> {
    tree.validate()?;
    Ok(log_topology_prior_unchecked(tree))
}

/// Log density of the internal-vertex times given the topology: each
/// non-root internal vertex breaks a Beta fraction off the remaining stick
/// `1 - t_parent`.
pub fn log_time_density(params: &TmcParams, tree: &Phylogeny) -> f64 {
    tree.vertex_ids()
        .filter(|&v| v != tree.root() && !tree.is_leaf(v))
        .map(|v| {
            let tp = tree.time(tree.parent(v).expect("non-root"));
            let frac = (tree.time(v) - tp) / (1.0 - tp);
            params.ln_beta_pdf(frac) - (1.0 - tp).ln()
        })
        .sum()
}

/// Joint log density of topology and times.
pub fn prior_log_density(params: &TmcParams, tree: &Phylogeny) -> Result<f64> {
    Ok(prior_log_pmf(tree)? + log_time_density(params, tree))
}

// Unnormalized density of a vertex inserted at `t` between `t_parent` and an
// internal child at `t_child`: the Beta factor for the new vertex's own stick
// fraction, and the Beta factor the child now draws below the new vertex, each
// with the Jacobian of its fraction with respect to time.
fn ln_stick_product(params: &TmcParams, tp: f64, tc: f64, t: f64) -> f64 {
    let own = params.ln_beta_pdf((t - tp) / (1.0 - tp)) - (1.0 - tp).ln();
    let below = params.ln_beta_pdf((tc - t) / (1.0 - t)) + (1.0 - tc).ln() - 2.0 * (1.0 - t).ln();
    own + below
}

fn ln_stick_normalizer(params: &TmcParams, tp: f64, tc: f64) -> f64 {
    quad::integrate(tp, tc, STICK_QUAD_ORDER, params.grading(), |t| ln_stick_product(params, tp, tc, t).exp()).ln()
}

fn check_interval(t_parent: f64, t_child: f64, t_new: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t_parent) || !(t_child > t_parent && t_child <= 1.0) {
        return Err(Error::domain(
            "branch interval",
            t_parent,
            format!("0 <= t_parent < t_child <= 1 (got t_child = {t_child})"),
        ));
    }
    if !(t_new > t_parent && t_new < t_child) {
        return Err(Error::domain("t_new", t_new, format!("the open interval ({t_parent}, {t_child})")));
    }
    Ok(())
}

/// Log density of the time of a vertex inserted on the branch
/// `(t_parent, t_child)`.
///
/// A child at time 1 is a leaf and draws no stick fraction of its own, so the
/// density is the new vertex's Beta factor alone. For an internal child the
/// product of both Beta factors is normalized over the branch by quadrature.
pub fn stick_time_log_density(params: &TmcParams, t_parent: f64, t_child: f64, t_new: f64) -> Result<f64> {
    check_interval(t_parent, t_child, t_new)?;
    if t_child == 1.0 {
        return Ok(params.ln_beta_pdf((t_new - t_parent) / (1.0 - t_parent)) - (1.0 - t_parent).ln());
    }
    Ok(ln_stick_product(params, t_parent, t_child, t_new) - ln_stick_normalizer(params, t_parent, t_child))
}

/// Quadrature rule for integrals against the stick density on the branch
/// `(t_parent, t_child)`: nodes with weights that sum to one.
pub(crate) fn stick_time_rule(params: &TmcParams, t_parent: f64, t_child: f64, order: usize) -> Vec<(f64, f64)> {
    let nodes = quad::graded_nodes(t_parent, t_child, order, params.grading());
    let ln_w: Vec<f64> = nodes
        .iter()
        .map(|&(t, w)| {
            let ln_p = if t_child == 1.0 {
                params.ln_beta_pdf((t - t_parent) / (1.0 - t_parent))
            } else {
                ln_stick_product(params, t_parent, t_child, t)
            };
            // nodes that round onto an endpoint carry no usable mass
            Some(w.ln() + ln_p).filter(|x| x.is_finite()).unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    let norm = log_sum_exp(ln_w.iter().copied());
    nodes.iter().zip(ln_w).map(|(&(t, _), lw)| (t, (lw - norm).exp())).collect()
}

fn bisect(mut lo: f64, mut hi: f64, target: f64, cdf: impl Fn(f64) -> f64) -> f64 {
    while hi - lo > TIME_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draw an insertion time on `(t_parent, t_child)` from the stick density by
/// inverting its CDF with bisection.
pub fn sample_stick_time<R: Rng + ?Sized>(params: &TmcParams, t_parent: f64, t_child: f64, rng: &mut R) -> Result<f64> {
    check_interval(t_parent, t_child, 0.5 * (t_parent + t_child))?;
    let u: f64 = rng.gen();
    let t = if t_child == 1.0 {
        let frac = bisect(0.0, 1.0, u, |x| beta_reg(params.a, params.b, x));
        t_parent + frac * (1.0 - t_parent)
    } else {
        let ln_z = ln_stick_normalizer(params, t_parent, t_child);
        let g = params.grading();
        bisect(t_parent, t_child, u, |t| {
            quad::integrate(t_parent, t, STICK_QUAD_ORDER, g, |s| (ln_stick_product(params, t_parent, t_child, s) - ln_z).exp())
        })
    };
    // keep the draw strictly inside the branch
    Ok(t.clamp(next_up(t_parent), next_down(t_child)))
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(if x >= 0.0 { x.to_bits() + 1 } else { x.to_bits() - 1 })
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(if x > 0.0 { x.to_bits() - 1 } else { x.to_bits() + 1 })
}

/// Sample a tree from the prior: merge uniformly random pairs until one
/// vertex remains, then break sticks from the root down.
pub fn sample_prior<R: Rng + ?Sized>(params: &TmcParams, n_leaves: usize, rng: &mut R) -> Result<Phylogeny> {
    if n_leaves < 2 {
        return Err(Error::Argument(format!("a phylogeny needs at least 2 leaves, got {n_leaves}")));
    }
    // vertices 0..n are leaves, n.. are merges in creation order
    let mut children: Vec<[usize; 2]> = Vec::with_capacity(n_leaves - 1);
    let mut active: Vec<usize> = (0..n_leaves).collect();
    while active.len() > 1 {
        let i = rng.gen_range(0..active.len());
        let mut j = rng.gen_range(0..active.len() - 1);
        if j >= i {
            j += 1;
        }
        let (hi, lo) = (i.max(j), i.min(j));
        let right = active.swap_remove(hi);
        let left = active.swap_remove(lo);
        children.push([left, right]);
        active.push(n_leaves + children.len() - 1);
    }
    let total = n_leaves + children.len();
    let mut time = vec![1.0; total];
    time[total - 1] = 0.0;
    let beta = params.beta();
    // parents are created after their children, so reverse order is top-down
    for k in (0..children.len()).rev() {
        let tp = time[n_leaves + k];
        for c in children[k] {
            if c >= n_leaves {
                time[c] = loop {
                    let t = tp + beta.sample(rng) * (1.0 - tp);
                    if t > tp && t < 1.0 {
                        break t;
                    }
                };
            }
        }
    }
    let mut b = TreeBuilder::new();
    let mut handles: Vec<_> = (0..n_leaves).map(|l| b.leaf(l)).collect();
    for (k, [l, r]) in children.iter().enumerate() {
        let h = b.internal(time[n_leaves + k], handles[*l], handles[*r]);
        handles.push(h);
    }
    b.finish(handles[total - 1])
}

/// Normalized log probability of attaching a new leaf to each branch, in
/// increasing branch order.
///
/// The weight of a branch is the topology pmf of the tree extended by a leaf
/// on that branch. Attaching above `v` creates a vertex with `c(v) + 1`
/// internal descendants and adds one to the count of every ancestor of `v`.
/// Positions above the root are not offered because the root time is pinned
/// at 0.
pub fn attachment_log_priors(tree: &Phylogeny) -> Vec<(BranchId, f64)> {
    let mut path = vec![0.0; tree.vertices.len()];
    let mut out = Vec::with_capacity(2 * tree.n_leaves());
    for v in tree.preorder() {
        let above = match tree.parent(v) {
            Some(p) => {
                let c = tree.internal_count(p) as f64;
                path[p] + ((c + 1.0) / c).ln()
            }
            None => 0.0,
        };
        path[v] = above;
        if v != tree.root() {
            out.push((BranchId(v), -((tree.internal_count(v) + 1) as f64).ln() - above));
        }
    }
    out.sort_unstable_by_key(|(b, _)| *b);
    let norm = log_sum_exp(out.iter().map(|(_, w)| *w));
    for (_, w) in &mut out {
        *w -= norm;
    }
    out
}

pub fn attachment_log_prior(tree: &Phylogeny, branch: BranchId) -> Result<f64> {
    tree.branch_interval(branch)?;
    attachment_log_priors(tree)
        .into_iter()
        .find(|(b, _)| *b == branch)
        .map(|(_, w)| w)
        .ok_or(Error::Lookup { kind: "branch", id: branch.0 })
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}
