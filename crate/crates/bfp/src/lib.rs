//! Divide-and-conquer Bayesian inference for finite-state Gaussian-emission
//! hidden Markov models via the block filtered posterior.
//!
//! The pipeline partitions a long observed series into contiguous blocks,
//! runs a quasi-posterior Gibbs sampler on each block in parallel (the
//! one-block conditional likelihood raised to the number of blocks), and
//! pools the subset draws with an affine recenter/rescale combination.
//! Baseline combination rules, Baum-Welch EM for the combination center,
//! and total-variation / Wasserstein evaluation metrics round out the
//! toolkit.
//!
//! ```
//! use bfp::hmm::benchmark_model;
//! use bfp::partition::partition;
//! use bfp::sampler::{run_subset_sampler, PriorSpec, SamplerConfig};
//!
//! let model = benchmark_model();
//! let (_, y) = model.simulate(600, 1).unwrap();
//! let parts = partition(y.len(), 3).unwrap();
//! let (context, block) = parts.block_with_context(1, &y).unwrap();
//! let config = SamplerConfig {
//!     k_power: 3,
//!     iters: 40,
//!     burn_in: 20,
//!     thin: 2,
//!     seed: 7,
//!     context_config: None,
//! };
//! let draws = run_subset_sampler(context, block, 3, &PriorSpec::from_data(&y).unwrap(), &config, 1).unwrap();
//! assert_eq!(draws.len(), 10);
//! ```

pub mod combine;
pub mod em;
pub mod error;
pub mod experiment;
pub mod hmm;
pub mod io;
pub mod math;
pub mod metrics;
pub mod partition;
pub mod sampler;

pub use error::{Error, Result};
