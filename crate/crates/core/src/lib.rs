//! Learning IDA-PBC controllers for port-Hamiltonian plants.
//!
//! A desired closed-loop system `(J_d, R_d, H_d)` is parameterized by sparse
//! polynomial dictionaries with hard-concrete gates and trained by
//! backpropagating a task loss through a fixed-step RK4 rollout of the closed
//! loop. The matching residual `η` measures how much of the desired dynamics
//! the actuator cannot realize.
//!
//! Modules, bottom up: [`numerics`], [`phcore`], [`dictionary`],
//! [`controller`], [`integrate`], [`losses`], [`optimize`], plus file formats
//! in [`config`] and [`checkpoint`].

pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod dictionary;
pub mod error;
pub mod integrate;
pub mod losses;
pub mod numerics;
pub mod optimize;
pub mod phcore;

pub use error::{Error, Result};
