//! Competence-aware world-model agent on a multi-task gridworld.
//!
//! The crate is organized around a small reverse-mode tensor core
//! ([`diffmath`], generic over the scalar type), a deterministic gridworld
//! suite ([`gridtasks`]), a recurrent latent world model ([`worldmodel`])
//! with a quantile competence head ([`awareness`]), an actor-critic trained
//! in imagination ([`policy`]), competence-driven planners ([`regulate`]),
//! evaluation metrics ([`metrics`]), and the experiment harness
//! ([`harness`]).
//!
//! The numeric core is generic over [`scalar::Scalar`]; the agent stack uses
//! the `f64` aliases below.

pub mod awareness;
pub mod checkpoint;
pub mod config;
pub mod diffmath;
pub mod gridtasks;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod regulate;
pub mod replay;
pub mod rng;
pub mod scalar;
pub mod worldmodel;

/// Default scalar for the agent stack.
pub type Real = f64;

/// Dense tensor over [`Real`].
pub type Tensor = diffmath::Tensor<Real>;

/// Differentiation tape over [`Real`].
pub type Tape = diffmath::Tape<Real>;

/// Named parameter storage over [`Real`].
pub type ParamSet = diffmath::ParamSet<Real>;

/// Adam optimizer over [`Real`].
pub type Adam = diffmath::Adam<Real>;
