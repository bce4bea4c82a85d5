//! Gauss–Legendre nodes with optional endpoint grading.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::legendre::GaussLegendre;

fn legendre_unit(order: usize) -> Arc<[(f64, f64)]> {
    static RULES: OnceLock<Mutex<HashMap<usize, Arc<[(f64, f64)]>>>> = OnceLock::new();
    let rules = RULES.get_or_init(Default::default);
    let mut rules = rules.lock().expect("quadrature cache poisoned");
    rules
        .entry(order)
        .or_insert_with(|| {
            let rule = GaussLegendre::new(NonZeroUsize::new(order).expect("order > 0"));
            // map [-1, 1] onto [0, 1]
            rule.as_node_weight_pairs()
                .iter()
                .map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w))
                .collect()
        })
        .clone()
}

/// Nodes and weights for `∫_lo^hi f(t) dt`.
///
/// With `grading > 1` the nodes are pulled toward both endpoints through
/// `s ↦ s^p / (s^p + (1-s)^p)`, which turns integrable algebraic endpoint
/// singularities of order `x^(1/p - 1)` or milder into smooth integrands.
pub(crate) fn graded_nodes(lo: f64, hi: f64, order: usize, grading: u32) -> Vec<(f64, f64)> {
    let width = hi - lo;
    let p = grading.max(1) as i32;
    legendre_unit(order)
        .iter()
        .map(|&(s, w)| {
            if p == 1 {
                return (lo + width * s, w * width);
            }
            let (sp, cp) = (s.powi(p), (1.0 - s).powi(p));
            let den = sp + cp;
            let phi = sp / den;
            let dphi = p as f64 * s.powi(p - 1) * (1.0 - s).powi(p - 1) / (den * den);
            (lo + width * phi, w * width * dphi)
        })
        .collect()
}

pub(crate) fn integrate(lo: f64, hi: f64, order: usize, grading: u32, f: impl Fn(f64) -> f64) -> f64 {
    graded_nodes(lo, hi, order, grading).into_iter().map(|(t, w)| w * f(t)).sum()
}
