//! Reference computations shared by the integration and acceptance tests.
//! Nothing here calls the message-passing or prior code under test.

#![allow(dead_code)]

use std::collections::BTreeMap;

use tmc::grw::GaussianFactor;
use tmc::phylogeny::{Phylogeny, TreeBuilder};

pub type Topology = Vec<Vec<usize>>;

/// Exact topology pmf by summing over every merge history of `n` leaves.
pub fn enumerate_topologies(n: usize) -> BTreeMap<Topology, f64> {
    fn go(active: Vec<Vec<usize>>, clades: Vec<Vec<usize>>, p: f64, out: &mut BTreeMap<Topology, f64>) {
        if active.len() == 1 {
            let mut key = clades;
            key.sort();
            *out.entry(key).or_insert(0.0) += p;
            return;
        }
        let k = active.len();
        let pairs = (k * (k - 1) / 2) as f64;
        for i in 0..k {
            for j in i + 1..k {
                let mut merged: Vec<usize> = active[i].iter().chain(&active[j]).copied().collect();
                merged.sort_unstable();
                let mut next: Vec<Vec<usize>> = active
                    .iter()
                    .enumerate()
                    .filter(|(x, _)| *x != i && *x != j)
                    .map(|(_, c)| c.clone())
                    .collect();
                next.push(merged.clone());
                let mut cl = clades.clone();
                cl.push(merged);
                go(next, cl, p / pairs, out);
            }
        }
    }
    let mut out = BTreeMap::new();
    go((0..n).map(|i| vec![i]).collect(), Vec::new(), 1.0, &mut out);
    out
}

/// Non-root internal clades of a topology in the order [`build_tree`]
/// assigns their stick fractions: parents before children.
pub fn internal_order(topo: &Topology) -> Vec<Vec<usize>> {
    let mut sorted = topo.clone();
    sorted.sort_by_key(|c| std::cmp::Reverse(c.len()));
    sorted.into_iter().skip(1).collect()
}

/// Build a tree with the given clades. Non-root internal vertices get times
/// `t = t_parent + beta * (1 - t_parent)` with `betas` in [`internal_order`].
pub fn build_tree(topo: &Topology, betas: &[f64]) -> Phylogeny {
    let root: Vec<usize> = topo.iter().max_by_key(|c| c.len()).unwrap().clone();
    let order = internal_order(topo);
    assert_eq!(betas.len(), order.len());
    let mut times: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    times.insert(root.clone(), 0.0);
    for (c, beta) in order.iter().zip(betas) {
        let parent = topo
            .iter()
            .filter(|p| p.len() > c.len() && c.iter().all(|x| p.contains(x)))
            .min_by_key(|p| p.len())
            .unwrap();
        let tp = times[parent];
        times.insert(c.clone(), tp + beta * (1.0 - tp));
    }
    let mut b = TreeBuilder::new();
    fn make(c: &[usize], topo: &Topology, times: &BTreeMap<Vec<usize>, f64>, b: &mut TreeBuilder) -> tmc::phylogeny::NodeHandle {
        if c.len() == 1 {
            return b.leaf(c[0]);
        }
        // the largest proper subclade containing the smallest label is one child
        let left: Vec<usize> = topo
            .iter()
            .filter(|s| s.len() < c.len() && s.contains(&c[0]) && s.iter().all(|x| c.contains(x)))
            .max_by_key(|s| s.len())
            .cloned()
            .unwrap_or_else(|| vec![c[0]]);
        let right: Vec<usize> = c.iter().filter(|x| !left.contains(x)).copied().collect();
        let l = make(&left, topo, times, b);
        let r = make(&right, topo, times, b);
        b.internal(times[c], l, r)
    }
    let h = make(&root, topo, &times, &mut b);
    b.finish(h).unwrap()
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let x = a[i][i] - s;
                assert!(x > 0.0, "matrix is not positive definite");
                l[i][j] = x.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// Solve `L L^T x = b`.
pub fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

fn lca_time(tree: &Phylogeny, a: usize, b: usize) -> f64 {
    let mut path = Vec::new();
    let mut v = Some(a);
    while let Some(x) = v {
        path.push(x);
        v = tree.parent(x);
    }
    let mut w = b;
    loop {
        if path.contains(&w) {
            return tree.time(w);
        }
        w = tree.parent(w).unwrap();
    }
}

/// GRW covariance of leaf locations in label order: the root prior variance 1
/// plus the time of the lowest common ancestor.
pub fn leaf_covariance(tree: &Phylogeny) -> Vec<Vec<f64>> {
    let n = tree.n_leaves();
    let vs: Vec<usize> = (0..n).map(|l| tree.leaf_vertex(l).unwrap()).collect();
    (0..n).map(|i| (0..n).map(|j| 1.0 + lca_time(tree, vs[i], vs[j])).collect()).collect()
}

fn ln_mvn(y: &[f64], cov: &[Vec<f64>]) -> f64 {
    let l = cholesky(cov);
    let x = chol_solve(&l, y);
    let quad: f64 = y.iter().zip(&x).map(|(a, b)| a * b).sum();
    let logdet: f64 = 2.0 * l.iter().enumerate().map(|(i, r)| r[i].ln()).sum::<f64>();
    -0.5 * (quad + logdet + y.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Joint log likelihood of the evidence means by dense Gaussian algebra.
pub fn dense_log_likelihood(tree: &Phylogeny, ev: &[GaussianFactor]) -> f64 {
    let c = leaf_covariance(tree);
    let n = c.len();
    let d = ev[0].dim();
    (0..d)
        .map(|k| {
            let cov: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| c[i][j] + if i == j { ev[i].variance[k] } else { 0.0 }).collect())
                .collect();
            let y: Vec<f64> = ev.iter().map(|f| f.mean[k]).collect();
            ln_mvn(&y, &cov)
        })
        .sum()
}

/// Conditional `(mean, variance)` per dimension of the target leaf's location
/// given every other leaf's evidence.
pub fn dense_conditional(tree: &Phylogeny, ev: &[GaussianFactor], target: usize) -> (Vec<f64>, Vec<f64>) {
    let c = leaf_covariance(tree);
    let n = c.len();
    let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
    let d = ev[0].dim();
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for k in 0..d {
        let kmat: Vec<Vec<f64>> = others
            .iter()
            .map(|&i| others.iter().map(|&j| c[i][j] + if i == j { ev[i].variance[k] } else { 0.0 }).collect())
            .collect();
        let cross: Vec<f64> = others.iter().map(|&i| c[target][i]).collect();
        let y: Vec<f64> = others.iter().map(|&i| ev[i].mean[k]).collect();
        let l = cholesky(&kmat);
        let a = chol_solve(&l, &cross);
        mean.push(a.iter().zip(&y).map(|(p, q)| p * q).sum());
        var.push(c[target][target] - a.iter().zip(&cross).map(|(p, q)| p * q).sum::<f64>());
    }
    (mean, var)
}

/// Posterior over the topologies of `n` leaves with `a = b = 1`: the
/// enumerated pmf times the likelihood averaged over uniform stick fractions
/// by a tensor midpoint rule with `grid` points per fraction.
pub fn topology_posterior(n: usize, ev: &[GaussianFactor], grid: usize) -> BTreeMap<Topology, f64> {
    let pmf = enumerate_topologies(n);
    let mut out = BTreeMap::new();
    let k = n - 2;
    for (topo, p) in &pmf {
        let mut acc = 0.0;
        let total = grid.pow(k as u32);
        let mut betas = vec![0.0; k];
        let mut terms = Vec::with_capacity(total);
        for idx in 0..total {
            let mut r = idx;
            for b in betas.iter_mut() {
                *b = ((r % grid) as f64 + 0.5) / grid as f64;
                r /= grid;
            }
            terms.push(dense_log_likelihood(&build_tree(topo, &betas), ev));
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for t in &terms {
            acc += (t - m).exp();
        }
        out.insert(topo.clone(), p.ln() + m + (acc / total as f64).ln());
    }
    let m = out.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = out.values().map(|v| (v - m).exp()).sum();
    out.into_iter().map(|(t, v)| (t, (v - m).exp() / z)).collect()
}

pub fn total_variation(p: &BTreeMap<Topology, f64>, counts: &BTreeMap<Topology, u64>) -> f64 {
    let n: u64 = counts.values().sum();
    let mut keys: Vec<&Topology> = p.keys().chain(counts.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - counts.get(k).copied().unwrap_or(0) as f64 / n as f64).abs())
        .sum::<f64>()
}

/// Upper tail of the chi-square statistic for observed counts against
/// expected probabilities.
pub fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dof = (counts.len() - 1) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

/// Asymptotic p-value of the two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample_p(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut dmax) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        dmax = dmax.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * dmax;
    kolmogorov_q(lambda)
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        s += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

/// A prior tree with `2..=max_n` leaves and mixed point and soft evidence in
/// `1..=max_d` dimensions. `min_var` bounds soft variances from below; point
/// evidence is only used when `allow_point` is set. Trees with a branch
/// shorter than `1e-3` are redrawn, with fresh Beta shapes every 20 tries:
/// two point observations joined by a nearly zero-length path make the dense
/// covariance too ill-conditioned to serve as a reference at absolute
/// tolerance `1e-8`.
pub fn random_instance<R: rand::Rng>(rng: &mut R, max_n: usize, max_d: usize, min_var: f64, allow_point: bool) -> (Phylogeny, Vec<GaussianFactor>) {
    let n = rng.gen_range(2..=max_n);
    let d = rng.gen_range(1..=max_d);
    let mut params = tmc::phylogeny::TmcParams::new(rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)).unwrap();
    let mut tries = 0;
    let tree = loop {
        // some shape pairs almost never avoid short branches at large n
        tries += 1;
        if tries % 20 == 0 {
            params = tmc::phylogeny::TmcParams::new(rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)).unwrap();
        }
        let t = tmc::phylogeny::sample_prior(&params, n, rng).unwrap();
        let shortest = t
            .branches()
            .into_iter()
            .map(|b| {
                let (lo, hi) = t.branch_interval(b).unwrap();
                hi - lo
            })
            .fold(f64::INFINITY, f64::min);
        if shortest >= 1e-3 {
            break t;
        }
    };
    let ev = (0..n)
        .map(|_| {
            let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let var: Vec<f64> = (0..d)
                .map(|_| if allow_point && rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(min_var..1.0) })
                .collect();
            GaussianFactor::new(mean, var).unwrap()
        })
        .collect();
    (tree, ev)
}

/// Largest deviation between the analytic predictive gradients and
/// five-point central differences with step `h`, relative to the largest
/// analytic entry of the same kind.
pub fn gradient_fd_error(tree: &Phylogeny, ev: &[GaussianFactor], target: usize, query: &[f64], h: f64) -> f64 {
    use tmc::grw::{leaf_predictive, leaf_predictive_grad, MessageCache};
    let g = leaf_predictive_grad(tree, ev, target, query).unwrap();
    let d = ev[0].dim();
    let eval = |ev: &[GaussianFactor]| {
        let p = leaf_predictive(tree, ev, target, &mut MessageCache::new()).unwrap();
        let ld = p.log_density(query);
        [p.mean, p.variance, vec![ld]]
    };
    // derivative of every output with respect to one input coordinate
    let stencil = |set: &dyn Fn(&mut Vec<GaussianFactor>, f64)| {
        let at = |delta: f64| {
            let mut e = ev.to_vec();
            set(&mut e, delta);
            eval(&e)
        };
        let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
        let mut out = p1.clone();
        for (i, row) in out.iter_mut().enumerate() {
            for (k, x) in row.iter_mut().enumerate() {
                *x = (8.0 * (p1[i][k] - m1[i][k]) - (p2[i][k] - m2[i][k])) / (12.0 * h);
            }
        }
        out
    };
    // (analytic, numeric) pairs grouped by kind
    let mut kinds: [Vec<(f64, f64)>; 5] = Default::default();
    for lg in &g.leaves {
        let j = lg.label;
        for k in 0..d {
            let dm = stencil(&|e: &mut Vec<GaussianFactor>, delta| e[j].mean[k] += delta);
            kinds[0].push((lg.d_mu_d_mean[k], dm[0][k]));
            kinds[1].push((lg.d_log_density_d_mean[k], dm[2][0]));
            if ev[j].variance[k] > 10.0 * h {
                let dv = stencil(&|e: &mut Vec<GaussianFactor>, delta| e[j].variance[k] += delta);
                kinds[2].push((lg.d_mu_d_var[k], dv[0][k]));
                kinds[3].push((lg.d_nu_d_var[k], dv[1][k]));
                kinds[4].push((lg.d_log_density_d_var[k], dv[2][0]));
            }
        }
    }
    kinds
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| {
            let scale = v.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max).max(1e-300);
            v.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
        })
        .fold(0.0, f64::max)
}
