//! Task-conditioned attention head selection for multi-task sequence models.
//!
//! Every self-attention layer owns a pool of `H'` candidate heads. Each task
//! (a language, a domain, a synthetic transformation) learns one logit per
//! candidate, and only `H` heads per layer take part in computation for
//! that task. Selection is learned end to end by maximising a
//! Gumbel-Softmax relaxed evidence lower bound.
//!
//! Two selection rules are provided:
//!
//! * **subset**: the `H` candidates with the highest posterior are used,
//!   concatenated in ascending head order;
//! * **group**: candidates are split into `H` contiguous groups of
//!   `r = H'/H` and the best candidate of each group fills that group's
//!   output block.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), the selection machinery ([`selection`]), a selective
//! encoder-decoder transformer ([`model`]), ELBO training ([`training`]),
//! synthetic multi-task suites ([`tasks`]), analysis tools ([`analysis`])
//! and an experiment runner ([`experiment`]).

pub mod analysis;
pub mod attention;
pub mod error;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod selection;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
