//! Reference implementation by explicit covariance assembly.
//!
//! Under the GRW the covariance of two vertex locations is the depth of their
//! lowest common ancestor, where depth counts the unit root pseudo-edge plus
//! every branch length on the way down. The leaf block of that matrix plus the
//! evidence variances is the marginal covariance of the evidence means.

use nalgebra::{DMatrix, DVector};

use super::{check_evidence, edge_variance, GaussianFactor, LN_2PI};
use crate::error::{Error, Result};
use crate::phylogeny::Phylogeny;

/// Largest tree the dense oracle accepts.
pub const DENSE_ORACLE_MAX_LEAVES: usize = 64;

#[derive(Clone, Debug)]
pub struct DenseOracle {
    pub joint_log_likelihood: f64,
    /// Leave-one-out conditional of each leaf's location, indexed by label.
    pub conditionals: Vec<Option<GaussianFactor>>,
    /// Leaf covariance (before evidence noise), rows and columns in label order.
    pub leaf_covariance: DMatrix<f64>,
}

pub fn dense_oracle(tree: &Phylogeny, leaves: &[GaussianFactor]) -> Result<DenseOracle> {
    let d = check_evidence(tree, leaves)?;
    let n = tree.n_leaves();
    if n > DENSE_ORACLE_MAX_LEAVES {
        return Err(Error::Refused(format!(
            "dense oracle is capped at {DENSE_ORACLE_MAX_LEAVES} leaves, tree has {n}"
        )));
    }
    // full covariance over every live vertex, then the leaf block
    let ids: Vec<_> = tree.preorder();
    let mut index = vec![usize::MAX; tree.vertices.len()];
    for (i, &v) in ids.iter().enumerate() {
        index[v] = i;
    }
    let size = ids.len();
    let mut full = DMatrix::<f64>::zeros(size, size);
    for (i, &v) in ids.iter().enumerate() {
        match tree.parent(v) {
            None => full[(i, i)] = 1.0,
            Some(p) => {
                let pi = index[p];
                // cov(v, u) = cov(p, u) for every u placed before v that is not below v
                for j in 0..i {
                    let c = full[(pi, j)];
                    full[(i, j)] = c;
                    full[(j, i)] = c;
                }
                full[(i, i)] = full[(pi, pi)] + edge_variance(tree.time(v) - tree.time(p));
            }
        }
    }
    let labels: Vec<usize> = tree.leaf_labels().collect();
    let pos: Vec<usize> = labels.iter().map(|&l| index[tree.leaf_vertex(l).expect("live label")]).collect();
    let cov = DMatrix::from_fn(n, n, |i, j| full[(pos[i], pos[j])]);

    let mut joint = 0.0;
    let mut conditionals: Vec<Option<GaussianFactor>> = vec![None; tree.label_slots()];
    for &l in &labels {
        conditionals[l] = Some(GaussianFactor {
            mean: Vec::with_capacity(d),
            variance: Vec::with_capacity(d),
        });
    }
    for k in 0..d {
        let mut sigma = cov.clone();
        for (i, &l) in labels.iter().enumerate() {
            sigma[(i, i)] += leaves[l].variance[k];
        }
        let m = DVector::from_iterator(n, labels.iter().map(|&l| leaves[l].mean[k]));
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("evidence covariance is not positive definite".into()))?;
        let alpha = chol.solve(&m);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        joint += -0.5 * (m.dot(&alpha) + log_det + n as f64 * LN_2PI);

        for (i, &l) in labels.iter().enumerate() {
            let rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let s_rr = DMatrix::from_fn(rest.len(), rest.len(), |a, b| sigma[(rest[a], rest[b])]);
            let c_ir = DVector::from_iterator(rest.len(), rest.iter().map(|&j| cov[(i, j)]));
            let m_r = DVector::from_iterator(rest.len(), rest.iter().map(|&j| m[j]));
            let ch = s_rr
                .cholesky()
                .ok_or_else(|| Error::Numerical("conditioning covariance is not positive definite".into()))?;
            let w = ch.solve(&c_ir);
            let c = conditionals[l].as_mut().expect("allocated above");
            c.mean.push(w.dot(&m_r));
            c.variance.push(cov[(i, i)] - w.dot(&c_ir));
        }
    }
    Ok(DenseOracle {
        joint_log_likelihood: joint,
        conditionals,
        leaf_covariance: cov,
    })
}
