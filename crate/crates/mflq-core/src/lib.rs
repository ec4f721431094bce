//! Solver and simulation kernels for finite-horizon mean-field LQG leader-follower
//! games with state- and control-dependent noise.
//!
//! The crate is `no_std` with `alloc`. IO, file formats, parallel drivers and the
//! command-line front end live in the `mflq` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::should_implement_trait, clippy::needless_range_loop)]

extern crate alloc;

pub mod costs;
pub mod error;
pub mod model;
pub mod numerics;
pub mod riccati_feedback;
pub mod riccati_openloop;
pub mod rng;
pub mod simulator;
pub mod strategy;

pub type Mat = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

pub use model::{table1_model, validate, Dimensions, ModelParams};
pub use numerics::TimeGridFn;
