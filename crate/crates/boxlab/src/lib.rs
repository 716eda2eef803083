//! boxlab: exact-arithmetic tools for permutation-invariant conditional
//! probability distributions ("boxes") over n identical rounds.
//!
//! The library constructs de Finetti states `tau` in closed form, proves
//! entrywise reduction bounds `P(a|x) <= (n+1)^d * tau(a|x)` for symmetric
//! boxes, and lifts those bounds to failure probabilities of invariant tests
//! and to trace-distance gaps between channel pairs. All probability
//! arithmetic is exact rational (`num::BigRational`); floating point appears
//! only in the quadrature cross-checks.
//!
//! Module layout:
//! - [`boxes`]: dense rational boxes, round permutations, marginals,
//!   non-signalling checks.
//! - [`symmetry`]: symmetry templates (allowed single-round states), color
//!   counts, the orbit-average projector onto template-symmetric boxes.
//! - [`definetti`]: closed-form and quadrature evaluation of de Finetti
//!   states, plus the matching lower bounds.
//! - [`reduction`]: entrywise upper bounds, reduction verification campaigns,
//!   counting certificates, and test-failure bounds.
//! - [`channels`]: channels acting on boxes, box partitions and extensions,
//!   trace distance, and the de Finetti bound on channel distinguishability.
//! - [`cli`]: the `boxlab` command-line surface.

pub mod boxes;
pub mod channels;
pub mod cli;
pub mod definetti;
pub mod rat;
pub mod reduction;
pub mod symmetry;

pub use rat::Rat;
