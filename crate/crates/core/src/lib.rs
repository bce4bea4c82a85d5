//! Bayesian hierarchical clustering with the time-marginalized coalescent.
//!
//! The crate is organised around a [`Phylogeny`](phylogeny::Phylogeny):
//!
//! - [`phylogeny`]: tree storage, surgery, the TMC prior and serialization.
//! - [`grw`]: the Gaussian random-walk likelihood, marginalized by belief
//!   propagation, with leave-one-out predictives and their gradients.
//! - [`mcmc`]: subtree-prune-and-regraft Metropolis-Hastings over trees.
//! - [`predictive`]: the predictive distribution of a new leaf.
//! - [`loracs`]: inducing-point inference for large datasets.
//! - [`io`]: matrix and CSV formats shared by the command-line tool.

mod error;
mod quad;

pub mod grw;
pub mod io;
pub mod loracs;
pub mod mcmc;
pub mod phylogeny;
pub mod predictive;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/prior.md")]
    mod prior {}
    #[doc = include_str!("../../../book/src/likelihood.md")]
    mod likelihood {}
    #[doc = include_str!("../../../book/src/mcmc.md")]
    mod mcmc {}
    #[doc = include_str!("../../../book/src/predictive.md")]
    mod predictive {}
    #[doc = include_str!("../../../book/src/inducing.md")]
    mod inducing {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
