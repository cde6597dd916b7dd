//! Host side of the VPC framework: config files, the file-backed artifact
//! store, report export, stepped sessions, parallel sweeps and the
//! `vpcctl` command line.

pub mod cli;
pub mod config;
pub mod export;
pub mod session;
pub mod store;
pub mod sweep;
