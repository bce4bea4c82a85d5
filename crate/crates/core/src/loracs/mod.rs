//! Inducing-point inference.
//!
//! `M` learnable pseudo-observations `s_1..s_M` are the leaves of a TMC whose
//! posterior `r(tau | s)` serves as the prior over trees. Each datum attaches
//! to a tree sample independently through the predictive distribution, so a
//! minibatch only ever touches the `M`-leaf trees. Data enter through
//! diagonal Gaussian factors `q(z_n | x_n)` supplied by an external encoder.
//!
//! For a tree sample and a datum, every branch `b` gets one time draw `t_b`
//! from a [`TimeSource`] and a weight
//!
//! ```text
//! w_b = log p(b) + log p(t_b | b) - log q(t_b | b) + E_q(z)[log N(z; mu_b, nu_b)]
//! ```
//!
//! where `(mu_b, nu_b)` is the predictive of a leaf hung from `b` at `t_b`.
//! The optimal branch posterior is `q*(b) ∝ exp(w_b)`. ELBO terms are summed
//! over branches in closed form rather than sampled, and the expectation over
//! `z` is a Gaussian cross-entropy. The gradient with respect to the inducing
//! points keeps only the path through the predictive density; the
//! score-function term from the dependence of `q(tau)` on `s` is dropped,
//! which biases the estimator.

mod optim;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grw::{leaf_predictive, leaf_predictive_grad, GaussianFactor, MessageCache};
use crate::mcmc::{chain_rng, ChainCheckpoint, ChainState};
use crate::phylogeny::{attachment_log_priors, log_sum_exp, sample_prior, sample_stick_time, stick_time_log_density, BranchId, Phylogeny, TmcParams};

pub use optim::{farthest_point_init, kmeans_init, Adam};

pub const INDUCING_SCHEMA_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Externally supplied Gaussian `q(z_n | x_n)` for one datum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatumFactor {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DatumFactor {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: variance.len(),
            });
        }
        if let Some(&v) = variance.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::domain("datum variance", v, "(0, inf)"));
        }
        if let Some(&m) = mean.iter().find(|m| !m.is_finite()) {
            return Err(Error::domain("datum mean", m, "the finite reals"));
        }
        Ok(DatumFactor { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `E_{z ~ N(mean, variance)}[log N(z; mu, nu)]`.
    pub fn expected_log_density(&self, g: &GaussianFactor) -> f64 {
        (0..self.dim())
            .map(|k| {
                let r = self.mean[k] - g.mean[k];
                -0.5 * (LN_2PI + g.variance[k].ln() + (r * r + self.variance[k]) / g.variance[k])
            })
            .sum()
    }

    fn check(&self) -> Result<()> {
        DatumFactor::new(self.mean.clone(), self.variance.clone()).map(|_| ())
    }
}

/// Distribution over the attachment time of a datum on a branch.
pub trait TimeSource: Sync {
    fn sample(&self, params: &TmcParams, t_parent: f64, t_child: f64, datum: &DatumFactor, rng: &mut dyn RngCore) -> Result<f64>;
    fn log_density(&self, params: &TmcParams, t_parent: f64, t_child: f64, t: f64, datum: &DatumFactor) -> Result<f64>;
}

/// Attachment times drawn from the stick-breaking prior itself. The time terms
/// of the ELBO then cancel exactly and nothing depends on the inducing points
/// through the times.
#[derive(Clone, Copy, Debug, Default)]
pub struct PriorTimes;

impl TimeSource for PriorTimes {
    fn sample(&self, params: &TmcParams, t_parent: f64, t_child: f64, _: &DatumFactor, rng: &mut dyn RngCore) -> Result<f64> {
        sample_stick_time(params, t_parent, t_child, rng)
    }

    fn log_density(&self, params: &TmcParams, t_parent: f64, t_child: f64, t: f64, _: &DatumFactor) -> Result<f64> {
        stick_time_log_density(params, t_parent, t_child, t)
    }
}

/// One branch's share of an attachment posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchAttachment {
    pub branch: BranchId,
    pub t_parent: f64,
    pub t_child: f64,
    pub time: f64,
    pub log_branch_prior: f64,
    pub log_time_prior: f64,
    pub log_time_q: f64,
    pub predictive: GaussianFactor,
    pub expected_log_lik: f64,
    /// Normalized `log q*(b)`.
    pub log_prob: f64,
}

/// `q*(e_n)` for one datum on one tree sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttachmentPosterior {
    pub branches: Vec<BranchAttachment>,
}

impl AttachmentPosterior {
    pub fn probabilities(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.log_prob.exp()).collect()
    }

    fn check_tree(&self, tree: &Phylogeny) -> Result<()> {
        let branches = tree.branches();
        if branches.len() != self.branches.len() {
            return Err(Error::Consistency(format!(
                "posterior has {} branches, tree has {}",
                self.branches.len(),
                branches.len()
            )));
        }
        for (b, ba) in branches.into_iter().zip(&self.branches) {
            let (lo, hi) = tree.branch_interval(b)?;
            if b != ba.branch || lo != ba.t_parent || hi != ba.t_child {
                return Err(Error::Consistency(format!("branch {} does not match the tree", ba.branch)));
            }
        }
        Ok(())
    }
}

/// Point observations at the inducing locations, indexed by leaf label.
pub fn inducing_evidence(points: &[Vec<f64>]) -> Vec<GaussianFactor> {
    points
        .iter()
        .map(|p| GaussianFactor {
            mean: p.clone(),
            variance: vec![0.0; p.len()],
        })
        .collect()
}

fn check_points(tree: &Phylogeny, points: &[Vec<f64>], datum: &DatumFactor) -> Result<()> {
    datum.check()?;
    if points.len() != tree.label_slots() {
        return Err(Error::Arity {
            expected: tree.label_slots(),
            got: points.len(),
        });
    }
    if let Some(p) = points.iter().find(|p| p.len() != datum.dim()) {
        return Err(Error::Dimension {
            expected: datum.dim(),
            got: p.len(),
        });
    }
    Ok(())
}

fn extended_evidence(points: &[Vec<f64>]) -> Vec<GaussianFactor> {
    let mut ev = inducing_evidence(points);
    let d = points.first().map_or(0, Vec::len);
    ev.push(GaussianFactor {
        mean: vec![0.0; d],
        variance: vec![0.0; d],
    });
    ev
}

/// Predictive of a new leaf attached to a copy of `tree` at `(branch, time)`.
fn attached_predictive(tree: &Phylogeny, evidence: &[GaussianFactor], branch: BranchId, time: f64) -> Result<GaussianFactor> {
    let mut provisional = tree.clone();
    let label = tree.label_slots();
    provisional.attach(branch, time, label)?;
    leaf_predictive(&provisional, evidence, label, &mut MessageCache::new())
}

/// Compute `q*(e_n)` for `datum` on `tree`, whose leaves are the inducing
/// points `points` (row `i` is the location of leaf label `i`).
pub fn attachment_posterior(
    points: &[Vec<f64>],
    params: &TmcParams,
    tree: &Phylogeny,
    datum: &DatumFactor,
    time_source: &dyn TimeSource,
    rng: &mut dyn RngCore,
) -> Result<AttachmentPosterior> {
    check_points(tree, points, datum)?;
    let evidence = extended_evidence(points);
    let mut branches = Vec::new();
    for (branch, log_branch_prior) in attachment_log_priors(tree) {
        let (lo, hi) = tree.branch_interval(branch)?;
        let time = time_source.sample(params, lo, hi, datum, rng)?;
        let predictive = attached_predictive(tree, &evidence, branch, time)?;
        let expected_log_lik = datum.expected_log_density(&predictive);
        branches.push(BranchAttachment {
            branch,
            t_parent: lo,
            t_child: hi,
            time,
            log_branch_prior,
            log_time_prior: stick_time_log_density(params, lo, hi, time)?,
            log_time_q: time_source.log_density(params, lo, hi, time, datum)?,
            predictive,
            expected_log_lik,
            log_prob: 0.0,
        });
    }
    let weight = |b: &BranchAttachment| b.log_branch_prior + b.log_time_prior - b.log_time_q + b.expected_log_lik;
    let norm = log_sum_exp(branches.iter().map(weight));
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("attachment weights normalize to {norm}")));
    }
    for b in &mut branches {
        b.log_prob = weight(b) - norm;
    }
    Ok(AttachmentPosterior { branches })
}

/// The per-datum ELBO terms for one tree sample, each an expectation over
/// branches under the given branch distribution. The reconstruction term
/// `log p(x_n | z_n)` and the encoder entropy belong to the caller.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub branch_prior: f64,
    pub time_prior: f64,
    pub time_q: f64,
    pub expected_log_lik: f64,
    /// `-E[log q(b)]`.
    pub branch_entropy: f64,
    pub total: f64,
}

/// ELBO contribution of `datum` under an arbitrary branch distribution
/// `probs`, with branches and times taken from `post` and predictives
/// recomputed from the current inducing points.
pub fn elbo_with_probs(points: &[Vec<f64>], tree: &Phylogeny, datum: &DatumFactor, post: &AttachmentPosterior, probs: &[f64]) -> Result<ElboTerms> {
    check_points(tree, points, datum)?;
    post.check_tree(tree)?;
    if probs.len() != post.branches.len() {
        return Err(Error::Arity {
            expected: post.branches.len(),
            got: probs.len(),
        });
    }
    let evidence = extended_evidence(points);
    let mut t = ElboTerms {
        branch_prior: 0.0,
        time_prior: 0.0,
        time_q: 0.0,
        expected_log_lik: 0.0,
        branch_entropy: 0.0,
        total: 0.0,
    };
    for (b, &q) in post.branches.iter().zip(probs) {
        if q == 0.0 {
            continue;
        }
        let g = attached_predictive(tree, &evidence, b.branch, b.time)?;
        t.branch_prior += q * b.log_branch_prior;
        t.time_prior += q * b.log_time_prior;
        t.time_q += q * b.log_time_q;
        t.expected_log_lik += q * datum.expected_log_density(&g);
        t.branch_entropy -= q * q.ln();
    }
    t.total = t.branch_prior + t.time_prior - t.time_q + t.expected_log_lik + t.branch_entropy;
    Ok(t)
}

/// ELBO contribution under `q*` itself.
pub fn elbo_contribution(points: &[Vec<f64>], tree: &Phylogeny, datum: &DatumFactor, post: &AttachmentPosterior) -> Result<ElboTerms> {
    elbo_with_probs(points, tree, datum, post, &post.probabilities())
}

/// Gradient of one branch's expected log likelihood with respect to every
/// inducing point, `M x d`.
fn branch_gradient(points: &[Vec<f64>], tree: &Phylogeny, datum: &DatumFactor, b: &BranchAttachment) -> Result<Vec<Vec<f64>>> {
    let evidence = extended_evidence(points);
    let mut provisional = tree.clone();
    let label = tree.label_slots();
    provisional.attach(b.branch, b.time, label)?;
    let pg = leaf_predictive_grad(&provisional, &evidence, label, &datum.mean)?;
    let d = datum.dim();
    let mut out = vec![vec![0.0; d]; points.len()];
    for lg in &pg.leaves {
        for k in 0..d {
            let (mu, nu) = (pg.predictive.mean[k], pg.predictive.variance[k]);
            // inducing points are exact observations, so only the mean path matters
            out[lg.label][k] = (datum.mean[k] - mu) / nu * lg.d_mu_d_mean[k];
        }
    }
    Ok(out)
}

/// Per-branch gradients of the expected log likelihood, unweighted, in the
/// branch order of `post`.
pub fn grad_inducing_per_branch(points: &[Vec<f64>], tree: &Phylogeny, datum: &DatumFactor, post: &AttachmentPosterior) -> Result<Vec<Vec<Vec<f64>>>> {
    check_points(tree, points, datum)?;
    post.check_tree(tree)?;
    post.branches.iter().map(|b| branch_gradient(points, tree, datum, b)).collect()
}

/// Gradient of [`elbo_contribution`] with respect to the inducing points,
/// holding `post` (branches, times and `q*`) fixed.
pub fn grad_inducing(points: &[Vec<f64>], tree: &Phylogeny, datum: &DatumFactor, post: &AttachmentPosterior) -> Result<Vec<Vec<f64>>> {
    let per_branch = grad_inducing_per_branch(points, tree, datum, post)?;
    let d = datum.dim();
    let mut out = vec![vec![0.0; d]; points.len()];
    for (g, b) in per_branch.iter().zip(&post.branches) {
        let q = b.log_prob.exp();
        for (row, grow) in out.iter_mut().zip(g) {
            for (x, gx) in row.iter_mut().zip(grow) {
                *x += q * gx;
            }
        }
    }
    Ok(out)
}

/// Inducing points with their tree chains and optimizer state.
#[derive(Clone, Debug)]
pub struct InducingSet {
    points: Vec<Vec<f64>>,
    params: TmcParams,
    chains: Vec<ChainState>,
    optimizer: Adam,
    seed: u64,
    steps: u64,
}

/// Summary of one [`InducingSet::fit_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub step: u64,
    /// ELBO contribution averaged over data and tree samples.
    pub mean_elbo: f64,
    pub grad_norm: f64,
    /// False when the gradient was not finite and the points were left as is.
    pub applied: bool,
    pub chain_accept_rate: f64,
}

impl InducingSet {
    /// Start from given points with `n_trees` chains, each initialized with a
    /// prior tree drawn from its own stream of `seed`.
    pub fn new(points: Vec<Vec<f64>>, params: TmcParams, n_trees: usize, seed: u64) -> Result<Self> {
        let m = points.len();
        if m < 2 {
            return Err(Error::Size { min: 2, got: m });
        }
        if n_trees == 0 {
            return Err(Error::Argument("at least one tree sample is needed".into()));
        }
        let d = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != d) {
            return Err(Error::Dimension { expected: d, got: p.len() });
        }
        let evidence = inducing_evidence(&points);
        let chains = (0..n_trees)
            .map(|i| {
                let mut rng = chain_rng(seed, i as u64);
                let tree = sample_prior(&params, m, &mut rng)?;
                ChainState::new(tree, evidence.clone(), params, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InducingSet {
            optimizer: Adam::new(m, d),
            points,
            params,
            chains,
            seed,
            steps: 0,
        })
    }

    /// Points drawn from `N(0, scale^2 I)`.
    pub fn random(m: usize, d: usize, scale: f64, params: TmcParams, n_trees: usize, seed: u64) -> Result<Self> {
        use rand_distr::StandardNormal;
        let mut rng = chain_rng(seed, u64::MAX);
        let points = (0..m)
            .map(|_| (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Self::new(points, params, n_trees, seed)
    }

    /// Points at k-means centroids of the datum means.
    pub fn from_kmeans(data: &[DatumFactor], m: usize, params: TmcParams, n_trees: usize, seed: u64) -> Result<Self> {
        let means: Vec<Vec<f64>> = data.iter().map(|d| d.mean.clone()).collect();
        let mut rng = chain_rng(seed, u64::MAX);
        let points = kmeans_init(&means, m, &mut rng)?;
        Self::new(points, params, n_trees, seed)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn params(&self) -> &TmcParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trees(&self) -> Vec<&Phylogeny> {
        self.chains.iter().map(ChainState::tree).collect()
    }

    /// Highest-scoring tree any chain has visited at the current points.
    pub fn map_tree(&self) -> &Phylogeny {
        self.chains
            .iter()
            .map(ChainState::best)
            .fold(None, |best: Option<(&Phylogeny, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
            .expect("at least one chain")
            .0
    }

    /// Advance every chain `n_mcmc` steps against the current points.
    pub fn resample_trees(&mut self, n_mcmc: u64) -> Result<()> {
        self.chains
            .par_iter_mut()
            .map(|c| (0..n_mcmc).try_for_each(|_| c.mh_step().map(|_| ())))
            .collect()
    }

    /// Attachment posteriors of every datum on every tree sample.
    /// Result `[i][j]` is datum `i` on tree `j`. Datum `i` on tree `j` uses
    /// stream `i * n_trees + j` of `seed`.
    pub fn attach_all(&self, data: &[DatumFactor], time_source: &dyn TimeSource, seed: u64) -> Result<Vec<Vec<AttachmentPosterior>>> {
        let n_trees = self.chains.len();
        data.par_iter()
            .enumerate()
            .map(|(i, datum)| {
                self.chains
                    .iter()
                    .enumerate()
                    .map(|(j, c)| {
                        let mut rng = chain_rng(seed, (i * n_trees + j) as u64);
                        attachment_posterior(&self.points, &self.params, c.tree(), datum, time_source, &mut rng)
                    })
                    .collect()
            })
            .collect()
    }

    /// One interleaved update: `n_mcmc` SPR steps per chain, then one Adam
    /// ascent step on the ELBO averaged over the batch and tree samples.
    ///
    /// The batch is processed in a canonical order, so the result does not
    /// depend on the order of `data`.
    pub fn fit_step<R: Rng + ?Sized>(&mut self, data: &[DatumFactor], step_size: f64, n_mcmc: u64, rng: &mut R) -> Result<FitReport> {
        if data.is_empty() {
            return Err(Error::Argument("fit_step needs a nonempty batch".into()));
        }
        let d = self.dim();
        if let Some(x) = data.iter().find(|x| x.dim() != d) {
            return Err(Error::Dimension { expected: d, got: x.dim() });
        }
        self.resample_trees(n_mcmc)?;
        let mut batch: Vec<&DatumFactor> = data.iter().collect();
        batch.sort_by(|a, b| cmp_f64s(&a.mean, &b.mean).then_with(|| cmp_f64s(&a.variance, &b.variance)));
        let batch: Vec<DatumFactor> = batch.into_iter().cloned().collect();
        let step_seed: u64 = rng.gen();
        let posts = self.attach_all(&batch, &PriorTimes, step_seed)?;

        let per: Vec<(f64, Vec<Vec<f64>>)> = batch
            .par_iter()
            .zip(posts.par_iter())
            .map(|(datum, row)| {
                let mut elbo = 0.0;
                let mut grad = vec![vec![0.0; d]; self.points.len()];
                for (c, post) in self.chains.iter().zip(row) {
                    elbo += elbo_contribution(&self.points, c.tree(), datum, post)?.total;
                    let g = grad_inducing(&self.points, c.tree(), datum, post)?;
                    for (r, gr) in grad.iter_mut().zip(g) {
                        for (x, gx) in r.iter_mut().zip(gr) {
                            *x += gx;
                        }
                    }
                }
                Ok((elbo, grad))
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / (batch.len() * self.chains.len()) as f64;
        let mut mean_elbo = 0.0;
        let mut grad = vec![vec![0.0; d]; self.points.len()];
        for (e, g) in per {
            mean_elbo += e * scale;
            for (r, gr) in grad.iter_mut().zip(g) {
                for (x, gx) in r.iter_mut().zip(gr) {
                    *x += gx * scale;
                }
            }
        }
        let grad_norm = grad.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        self.steps += 1;
        let applied = grad_norm.is_finite();
        if applied {
            self.optimizer.ascend(&mut self.points, &grad, step_size);
            let evidence = inducing_evidence(&self.points);
            for c in &mut self.chains {
                c.set_evidence(evidence.clone())?;
            }
        } else {
            log::warn!("step {}: non-finite gradient, update skipped", self.steps);
        }
        let accept = self.chains.iter().map(ChainState::accept_rate).sum::<f64>() / self.chains.len() as f64;
        Ok(FitReport {
            step: self.steps,
            mean_elbo,
            grad_norm,
            applied,
            chain_accept_rate: accept,
        })
    }

    pub fn checkpoint(&self) -> InducingCheckpoint {
        InducingCheckpoint {
            schema_version: INDUCING_SCHEMA_VERSION,
            points: self.points.clone(),
            params: self.params,
            seed: self.seed,
            steps: self.steps,
            optimizer: self.optimizer.clone(),
            chains: self.chains.iter().map(ChainState::checkpoint).collect(),
        }
    }

    pub fn from_checkpoint(ck: &InducingCheckpoint) -> Result<Self> {
        if ck.schema_version != INDUCING_SCHEMA_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported inducing checkpoint schema version {}", ck.schema_version),
            });
        }
        let evidence = inducing_evidence(&ck.points);
        let chains = ck
            .chains
            .iter()
            .map(|c| ChainState::from_checkpoint(c, evidence.clone()))
            .collect::<Result<Vec<_>>>()?;
        if chains.is_empty() {
            return Err(Error::Argument("checkpoint has no chains".into()));
        }
        Ok(InducingSet {
            points: ck.points.clone(),
            params: ck.params,
            chains,
            optimizer: ck.optimizer.clone(),
            seed: ck.seed,
            steps: ck.steps,
        })
    }
}

fn cmp_f64s(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(a.len().cmp(&b.len()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InducingCheckpoint {
    pub schema_version: u32,
    pub points: Vec<Vec<f64>>,
    pub params: TmcParams,
    pub seed: u64,
    pub steps: u64,
    pub optimizer: Adam,
    pub chains: Vec<ChainCheckpoint>,
}
