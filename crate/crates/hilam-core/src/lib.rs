//! Hierarchical latent action modeling on a synthetic scripted-skill world.
//!
//! The pipeline, end to end:
//!
//! 1. [`world`] generates observation-only episodes from scripted skills and
//!    executes policy rollouts for evaluation.
//! 2. [`lam`] trains an inverse/forward dynamics pair that turns frame pairs
//!    into latent actions, then stays frozen as the tokenizer.
//! 3. [`chunker`] runs a two-stage dynamic-chunking hierarchy over latent
//!    action sequences, trained by next-latent prediction, and extracts
//!    variable-length latent skills from its learned boundaries.
//! 4. [`policy`] pretrains a hierarchical (and a flat baseline) policy on the
//!    extracted pseudo-labels, then fine-tunes the low level on a fraction of
//!    action-labeled demonstrations.
//! 5. [`metrics`] scores segmentation against the simulator's ground truth
//!    and success rates over rollouts; [`store`] persists everything;
//!    [`pipeline`] wires the stages together behind the CLI.
//!
//! All numerics run on the in-crate [`tensor`] tape at 64-bit precision with
//! deterministic seeding per consumer stream ([`rng`]).

pub mod chunker;
pub mod error;
pub mod lam;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod world;

pub use rng::{Rng, Stream};
pub use tensor::{AdamState, ParamSet, Tape, Tensor, TensorId};
