//! Predictive distribution of a new leaf.
//!
//! A new leaf picks a branch with probability proportional to the TMC pmf of
//! the extended tree, an attachment time from the stick-breaking density on
//! that branch, and a location from the GRW given the existing evidence. The
//! density of the location is therefore a mixture over branches of a time
//! integral of Gaussians. The time integral uses a Gauss-Legendre rule per
//! branch whose weights are renormalized to sum to one, so the mixture is a
//! finite sum of proper Gaussians.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grw::{branch_messages, check_evidence, leaf_predictive, BranchMessages, GaussianFactor, MessageCache};
use crate::phylogeny::{attachment_log_priors, log_sum_exp, sample_stick_time, stick_time_rule, BranchId, Phylogeny, TmcParams};

/// Default Gauss-Legendre order of the per-branch time integral.
pub const DEFAULT_TIME_QUAD: usize = 32;
/// Smallest accepted order of the per-branch time integral.
pub const MIN_TIME_QUAD: usize = 8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Where a new leaf joins the tree, and its location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub branch: BranchId,
    pub time: f64,
    pub location: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    variance: Vec<f64>,
}

/// The predictive density as an explicit Gaussian mixture.
#[derive(Clone, Debug)]
pub struct PredictiveMixture {
    dim: usize,
    components: Vec<Component>,
}

fn check_order(n_time_quad: usize) -> Result<()> {
    if n_time_quad < MIN_TIME_QUAD {
        return Err(Error::Argument(format!(
            "time quadrature order must be at least {MIN_TIME_QUAD}, got {n_time_quad}"
        )));
    }
    Ok(())
}

impl PredictiveMixture {
    pub fn new(tree: &Phylogeny, leaves: &[GaussianFactor], params: &TmcParams, n_time_quad: usize) -> Result<Self> {
        check_order(n_time_quad)?;
        let dim = check_evidence(tree, leaves)?;
        let branch_prior = attachment_log_priors(tree);
        let messages = branch_messages(tree, leaves, &mut MessageCache::new())?;
        let mut components = Vec::with_capacity(branch_prior.len() * n_time_quad);
        for ((branch, log_p), bm) in branch_prior.into_iter().zip(messages) {
            debug_assert_eq!(branch, bm.branch);
            for (t, w) in stick_time_rule(params, bm.t_parent, bm.t_child, n_time_quad) {
                if w == 0.0 {
                    continue;
                }
                let g = bm.attach_predictive(t);
                components.push(Component {
                    log_weight: log_p + w.ln(),
                    mean: g.mean,
                    variance: g.variance,
                });
            }
        }
        Ok(PredictiveMixture { dim, components })
    }

    /// Equal-weight mixture of several predictives, for averaging over tree
    /// samples.
    pub fn pooled(parts: Vec<PredictiveMixture>) -> Result<Self> {
        let k = parts.len();
        let dim = parts.first().ok_or_else(|| Error::Argument("no mixtures to pool".into()))?.dim;
        let shift = (k as f64).ln();
        let mut components = Vec::new();
        for p in parts {
            if p.dim != dim {
                return Err(Error::Dimension { expected: dim, got: p.dim });
            }
            components.extend(p.components.into_iter().map(|c| Component {
                log_weight: c.log_weight - shift,
                ..c
            }));
        }
        Ok(PredictiveMixture { dim, components })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: z.len(),
            });
        }
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let mut lp = c.log_weight;
                for k in 0..self.dim {
                    let r = z[k] - c.mean[k];
                    lp -= 0.5 * (LN_2PI + c.variance[k].ln() + r * r / c.variance[k]);
                }
                lp
            })
            .collect();
        Ok(log_sum_exp(terms.iter().copied()))
    }
}

/// `log p(z)` for a new leaf's location under the predictive of one tree.
pub fn predictive_log_density(tree: &Phylogeny, leaves: &[GaussianFactor], params: &TmcParams, z: &[f64], n_time_quad: usize) -> Result<f64> {
    PredictiveMixture::new(tree, leaves, params, n_time_quad)?.log_density(z)
}

fn draw_branch<R: Rng + ?Sized>(prior: &[(BranchId, f64)], rng: &mut R) -> BranchId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(b, lp) in prior {
        acc += lp.exp();
        if u < acc {
            return b;
        }
    }
    prior.last().expect("a tree has branches").0
}

fn draw_location<R: Rng + ?Sized>(g: &GaussianFactor, rng: &mut R) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.variance)
        .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draw a new leaf. The location comes from attaching the leaf to a copy of
/// the tree and querying its leave-one-out predictive; `tree` itself is not
/// modified.
pub fn sample_predictive<R: Rng + ?Sized>(tree: &Phylogeny, leaves: &[GaussianFactor], params: &TmcParams, rng: &mut R) -> Result<Attachment> {
    let d = check_evidence(tree, leaves)?;
    let branch = draw_branch(&attachment_log_priors(tree), rng);
    let (lo, hi) = tree.branch_interval(branch)?;
    let time = sample_stick_time(params, lo, hi, rng)?;
    let mut provisional = tree.clone();
    let label = tree.label_slots();
    provisional.attach(branch, time, label)?;
    let mut extended = leaves.to_vec();
    extended.push(GaussianFactor {
        mean: vec![0.0; d],
        variance: vec![0.0; d],
    });
    let g = leaf_predictive(&provisional, &extended, label, &mut MessageCache::new())?;
    Ok(Attachment {
        branch,
        time,
        location: draw_location(&g, rng),
    })
}

/// Repeated predictive draws from one tree, with the branch messages computed
/// once. Draws the same random numbers in the same order as
/// [`sample_predictive`].
pub struct PredictiveSampler {
    params: TmcParams,
    prior: Vec<(BranchId, f64)>,
    messages: Vec<BranchMessages>,
}

impl PredictiveSampler {
    pub fn new(tree: &Phylogeny, leaves: &[GaussianFactor], params: &TmcParams) -> Result<Self> {
        let messages = branch_messages(tree, leaves, &mut MessageCache::new())?;
        Ok(PredictiveSampler {
            params: *params,
            prior: attachment_log_priors(tree),
            messages,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Attachment> {
        let branch = draw_branch(&self.prior, rng);
        let bm = self
            .messages
            .iter()
            .find(|m| m.branch == branch)
            .expect("messages cover every branch");
        let time = sample_stick_time(&self.params, bm.t_parent, bm.t_child, rng)?;
        let g = bm.attach_predictive(time);
        Ok(Attachment {
            branch,
            time,
            location: draw_location(&g, rng),
        })
    }
}

/// Axis-aligned grid for 2-D density evaluation. Row `i` has
/// `y = y_min + i * (y_max - y_min) / (ny - 1)`, column `j` has
/// `x = x_min + j * (x_max - x_min) / (nx - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y_min + i as f64 * (self.y_max - self.y_min) / (self.ny - 1) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Argument(format!(
                "grid resolution must be at least 2 per axis, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::Argument("grid bounds must satisfy min < max on both axes".into()));
        }
        Ok(())
    }
}

/// Predictive densities on a grid, row-major with rows along `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.spec.nx + j]
    }

    /// Cells strictly greater than their 8 neighbours, as `(row, column)`.
    pub fn local_maxima(&self) -> Vec<(usize, usize)> {
        let (ny, nx) = (self.spec.ny, self.spec.nx);
        let mut out = Vec::new();
        for i in 0..ny {
            for j in 0..nx {
                let v = self.at(i, j);
                let mut is_max = true;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if (di, dj) == (0, 0) || a < 0 || b < 0 || a >= ny as i64 || b >= nx as i64 {
                            continue;
                        }
                        if self.at(a as usize, b as usize) >= v {
                            is_max = false;
                        }
                    }
                }
                if is_max {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Evaluate a 2-D predictive density on a grid, in parallel over rows.
pub fn density_grid(mixture: &PredictiveMixture, spec: GridSpec) -> Result<DensityGrid> {
    if mixture.dim() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            got: mixture.dim(),
        });
    }
    spec.validate()?;
    let rows: Vec<Vec<f64>> = (0..spec.ny)
        .into_par_iter()
        .map(|i| {
            let y = spec.y(i);
            (0..spec.nx)
                .map(|j| mixture.log_density(&[spec.x(j), y]).map(f64::exp))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(DensityGrid {
        spec,
        values: rows.into_iter().flatten().collect(),
    })
}
