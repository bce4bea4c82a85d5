//! Subtree-prune-and-regraft Metropolis-Hastings over phylogenies.
//!
//! A move picks a vertex `v` uniformly among the prunable vertices, removes
//! the subtree below `v` together with its parent, and regrafts it on a branch
//! of the remaining tree at a uniformly drawn time. The target is the full
//! TMC posterior: topology pmf, stick-breaking density of the internal times,
//! and the GRW likelihood of the evidence.
//!
//! Prunable vertices are the non-root vertices whose parent is not the root,
//! so every tree with `N` leaves has exactly `2N - 4` of them. The root's
//! children are excluded because removing the root would leave a tree whose
//! root time is no longer 0. A regraft branch `(u, x)` is valid when
//! `t_u < t_v`, and the new parent time is uniform on
//! `(t_u, min(t_x, t_v))`. The branch the subtree was pruned from always
//! qualifies, so a proposal never fails for `N >= 3`.
//!
//! Chains are seeded from a master seed by [`chain_rng`]: chain `i` uses
//! ChaCha8 seeded with the master seed on stream `i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grw::{check_evidence, joint_log_likelihood, GaussianFactor, MessageCache};
use crate::phylogeny::{log_time_density, log_topology_prior_unchecked, BranchId, Phylogeny, Pruned, TmcParams, TreeDump, VertexId};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Random stream for chain `index` under `master_seed`.
pub fn chain_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct SprProposal {
    pub subtree: VertexId,
    pub target: BranchId,
    pub new_time: f64,
    pub log_q_forward: f64,
    pub log_q_reverse: f64,
}

/// Vertices a move may prune, in increasing id order.
pub fn prunable(tree: &Phylogeny) -> Vec<VertexId> {
    let root = tree.root();
    tree.vertex_ids().filter(|&v| v != root && tree.parent(v) != Some(root)).collect()
}

/// Branches of the tree hanging from the root (which excludes a pruned
/// subtree) on which a subtree whose top is at `t_subtree` may be regrafted.
fn regraft_sites(tree: &Phylogeny, t_subtree: f64) -> Vec<(BranchId, f64, f64)> {
    let root = tree.root();
    let mut out: Vec<_> = tree
        .preorder()
        .into_iter()
        .filter(|&x| x != root)
        .filter_map(|x| {
            let lo = tree.time(tree.parent(x).expect("non-root"));
            let hi = tree.time(x).min(t_subtree);
            (lo < t_subtree).then_some((BranchId(x), lo, hi))
        })
        .collect();
    out.sort_unstable_by_key(|(b, _, _)| *b);
    out
}

fn uniform_open<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    loop {
        let t = lo + rng.gen::<f64>() * (hi - lo);
        if t > lo && t < hi {
            return t;
        }
    }
}

/// Prune a uniformly chosen subtree and draw its regraft site. The tree is
/// left pruned.
fn propose_pruned<R: Rng + ?Sized>(tree: &mut Phylogeny, rng: &mut R) -> Result<(Pruned, SprProposal)> {
    if tree.n_leaves() < 3 {
        return Err(Error::Size { min: 3, got: tree.n_leaves() });
    }
    let candidates = prunable(tree);
    let v = candidates[rng.gen_range(0..candidates.len())];
    let pruned = tree.prune(v)?;
    let t_v = tree.time(v);
    let sites = regraft_sites(tree, t_v);
    let (target, lo, hi) = sites[rng.gen_range(0..sites.len())];
    let new_time = uniform_open(lo, hi, rng);
    let common = -(candidates.len() as f64).ln() - (sites.len() as f64).ln();
    let (old_lo, old_hi) = {
        let s = pruned.old_branch.child();
        (tree.time(tree.parent(s).expect("sibling has a parent")), tree.time(s).min(t_v))
    };
    let proposal = SprProposal {
        subtree: v,
        target,
        new_time,
        log_q_forward: common - (hi - lo).ln(),
        log_q_reverse: common - (old_hi - old_lo).ln(),
    };
    Ok((pruned, proposal))
}

/// Draw an SPR proposal for `tree` without changing it.
pub fn spr_propose<R: Rng + ?Sized>(tree: &mut Phylogeny, rng: &mut R) -> Result<SprProposal> {
    let (pruned, proposal) = propose_pruned(tree, rng)?;
    tree.regraft(&pruned, pruned.old_branch, pruned.old_time)?;
    Ok(proposal)
}

/// Log density of proposing the move that takes `tree` to the tree obtained by
/// pruning `subtree` and regrafting it on `target` at `time`.
pub fn spr_move_log_density(tree: &mut Phylogeny, subtree: VertexId, target: BranchId, time: f64) -> Result<f64> {
    let n_prunable = prunable(tree).len();
    let pruned = tree.prune(subtree)?;
    let sites = regraft_sites(tree, tree.time(subtree));
    let found = sites.iter().find(|(b, _, _)| *b == target).copied();
    tree.regraft(&pruned, pruned.old_branch, pruned.old_time)?;
    let (_, lo, hi) = found.ok_or(Error::Lookup { kind: "branch", id: target.0 })?;
    if !(time > lo && time < hi) {
        return Err(Error::domain("regraft time", time, format!("the open interval ({lo}, {hi})")));
    }
    Ok(-(n_prunable as f64).ln() - (sites.len() as f64).ln() - (hi - lo).ln())
}

/// Unnormalized log posterior: topology pmf, time density and likelihood.
pub fn log_target(params: &TmcParams, tree: &Phylogeny, evidence: &[GaussianFactor], cache: &mut MessageCache) -> Result<f64> {
    Ok(log_topology_prior_unchecked(tree) + log_time_density(params, tree) + joint_log_likelihood(tree, evidence, cache)?)
}

/// One Markov chain over trees for fixed evidence.
#[derive(Clone, Debug)]
pub struct ChainState {
    tree: Phylogeny,
    evidence: Vec<GaussianFactor>,
    params: TmcParams,
    cache: MessageCache,
    log_joint: f64,
    rng: ChaCha8Rng,
    steps: u64,
    accepted: u64,
    best_tree: Phylogeny,
    best_log_joint: f64,
}

/// What one step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub log_joint: f64,
    pub accept_rate: f64,
    pub accepted: bool,
}

impl ChainState {
    pub fn new(tree: Phylogeny, evidence: Vec<GaussianFactor>, params: TmcParams, rng: ChaCha8Rng) -> Result<Self> {
        check_evidence(&tree, &evidence)?;
        let mut cache = MessageCache::new();
        let log_joint = log_target(&params, &tree, &evidence, &mut cache)?;
        if !log_joint.is_finite() {
            return Err(Error::Numerical(format!("initial log joint is {log_joint}")));
        }
        Ok(ChainState {
            best_tree: tree.clone(),
            best_log_joint: log_joint,
            tree,
            evidence,
            params,
            cache,
            log_joint,
            rng,
            steps: 0,
            accepted: 0,
        })
    }

    pub fn tree(&self) -> &Phylogeny {
        &self.tree
    }

    pub fn evidence(&self) -> &[GaussianFactor] {
        &self.evidence
    }

    pub fn params(&self) -> &TmcParams {
        &self.params
    }

    pub fn log_joint(&self) -> f64 {
        self.log_joint
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn accept_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }

    /// Highest-scoring tree visited so far and its log joint.
    pub fn best(&self) -> (&Phylogeny, f64) {
        (&self.best_tree, self.best_log_joint)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Log joint of the current tree computed from scratch.
    pub fn recompute_log_joint(&self) -> Result<f64> {
        log_target(&self.params, &self.tree, &self.evidence, &mut MessageCache::new())
    }

    /// Replace the evidence, keeping the tree. Used when the observed
    /// locations move, as with inducing points.
    pub fn set_evidence(&mut self, evidence: Vec<GaussianFactor>) -> Result<()> {
        check_evidence(&self.tree, &evidence)?;
        self.evidence = evidence;
        self.cache.clear();
        self.log_joint = log_target(&self.params, &self.tree, &self.evidence, &mut self.cache)?;
        self.best_tree = self.tree.clone();
        self.best_log_joint = self.log_joint;
        Ok(())
    }

    /// One Metropolis-Hastings step. Returns whether the move was accepted;
    /// on rejection the tree is restored exactly.
    pub fn mh_step(&mut self) -> Result<bool> {
        self.steps += 1;
        if self.tree.n_leaves() < 3 {
            // a two-leaf tree has a single state
            return Ok(false);
        }
        let (pruned, prop) = propose_pruned(&mut self.tree, &mut self.rng)?;
        self.tree.regraft(&pruned, prop.target, prop.new_time)?;
        let proposed = log_target(&self.params, &self.tree, &self.evidence, &mut self.cache)?;
        let log_alpha = proposed - self.log_joint + prop.log_q_reverse - prop.log_q_forward;
        let u: f64 = self.rng.gen();
        if proposed.is_finite() && u.ln() < log_alpha {
            self.accepted += 1;
            self.log_joint = proposed;
            if proposed > self.best_log_joint {
                self.best_log_joint = proposed;
                self.best_tree = self.tree.clone();
            }
            return Ok(true);
        }
        let again = self.tree.prune(prop.subtree)?;
        let undo = Pruned {
            subtree_slot: pruned.subtree_slot,
            ..again
        };
        self.tree.regraft(&undo, pruned.old_branch, pruned.old_time)?;
        Ok(false)
    }

    pub fn checkpoint(&self) -> ChainCheckpoint {
        ChainCheckpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            tree: self.tree.to_dump(),
            params: self.params,
            rng: self.rng.clone(),
            steps: self.steps,
            accepted: self.accepted,
            log_joint: self.log_joint,
            best_tree: self.best_tree.to_dump(),
            best_log_joint: self.best_log_joint,
        }
    }

    /// Resume from a checkpoint. The evidence is not part of the checkpoint
    /// and must be the same as when it was written.
    pub fn from_checkpoint(ck: &ChainCheckpoint, evidence: Vec<GaussianFactor>) -> Result<Self> {
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported checkpoint schema version {}", ck.schema_version),
            });
        }
        let tree = Phylogeny::from_dump(&ck.tree)?;
        let mut state = ChainState::new(tree, evidence, ck.params, ck.rng.clone())?;
        if (state.log_joint - ck.log_joint).abs() > 1e-8 * (1.0 + ck.log_joint.abs()) {
            return Err(Error::Consistency(format!(
                "checkpoint log joint {} does not match the evidence ({})",
                ck.log_joint, state.log_joint
            )));
        }
        state.log_joint = ck.log_joint;
        state.steps = ck.steps;
        state.accepted = ck.accepted;
        state.best_tree = Phylogeny::from_dump(&ck.best_tree)?;
        state.best_log_joint = ck.best_log_joint;
        Ok(state)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainCheckpoint {
    pub schema_version: u32,
    pub tree: TreeDump,
    pub params: TmcParams,
    pub rng: ChaCha8Rng,
    pub steps: u64,
    pub accepted: u64,
    pub log_joint: f64,
    pub best_tree: TreeDump,
    pub best_log_joint: f64,
}

/// Advance the chain `n_steps` steps, calling `on_step` after each one with
/// the step record and, every `thin` steps, the current tree.
///
/// If the callback fails the run stops after the step that triggered it and
/// the chain stays in a valid state.
pub fn run_chain<F>(state: &mut ChainState, n_steps: u64, thin: u64, mut on_step: F) -> Result<()>
where
    F: FnMut(&StepRecord, Option<&Phylogeny>) -> std::result::Result<(), String>,
{
    if n_steps == 0 || thin == 0 {
        return Err(Error::Argument("n_steps and thin must be at least 1".into()));
    }
    for i in 1..=n_steps {
        let accepted = state.mh_step()?;
        let record = StepRecord {
            step: state.steps,
            log_joint: state.log_joint,
            accept_rate: state.accept_rate(),
            accepted,
        };
        let sample = (i % thin == 0).then_some(&state.tree);
        on_step(&record, sample).map_err(Error::Callback)?;
    }
    Ok(())
}

/// Thinned samples and the per-step trace of a run.
#[derive(Clone, Debug, Default)]
pub struct ChainOutput {
    pub samples: Vec<Phylogeny>,
    pub trace: Vec<StepRecord>,
}

pub fn collect_chain(state: &mut ChainState, n_steps: u64, thin: u64) -> Result<ChainOutput> {
    let mut out = ChainOutput::default();
    run_chain(state, n_steps, thin, |rec, tree| {
        out.trace.push(*rec);
        if let Some(t) = tree {
            out.samples.push(t.clone());
        }
        Ok(())
    })?;
    Ok(out)
}

/// Run independent chains in parallel, one per rayon task.
pub fn run_chains(states: &mut [ChainState], n_steps: u64, thin: u64) -> Result<Vec<ChainOutput>> {
    states.par_iter_mut().map(|s| collect_chain(s, n_steps, thin)).collect()
}
