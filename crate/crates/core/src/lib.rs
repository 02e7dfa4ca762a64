//! Forward-KL variational inference by transport score climbing.
//!
//! A normalizing flow serves both as the variational posterior `q(z; λ)` and
//! as the change of variables under which a persistent HMC chain runs. Each
//! iteration takes one HMC step in the warped space, maps the sample back to
//! latent space, and takes an Adam step on `−log q(z; λ)` (and, for models
//! with parameters, on `−log p(x, z; θ)`).
//!
//! Modules, bottom-up:
//! - [`numkit`]: vectors, seeded RNG, MLPs with backprop, Adam, finite differences
//! - [`flows`]: transport maps (identity, affine, IAF, RealNVP, stacks)
//! - [`targets`]: funnel, banana, Gaussian, conjugate Gaussian, multilevel logit
//! - [`hmc`]: warped-space density, leapfrog, HMC kernel, step-size adaptation
//! - [`climb`]: TSC, MSC and reparameterized ELBO training loops
//! - [`diagnostics`]: ESS, moments, distance to ground truth
//! - [`cli`]: experiment config, runner, artifact writers and run comparison

pub mod numkit;
pub mod flows;
pub mod targets;
pub mod hmc;
pub mod climb;
pub mod diagnostics;
pub mod cli;
