//! Fault-tolerant orchestration of virtualized process controllers.
//!
//! Everything here is deterministic and runs on the discrete-event simulator
//! in [`simnet`]; IO lives in the companion host crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod harness;
pub mod hash;
pub mod icps;
pub mod model;
pub mod note;
pub mod orchestrator;
pub mod registry;
pub mod runtime;
pub mod simnet;
pub mod transport;
pub mod wire;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;
