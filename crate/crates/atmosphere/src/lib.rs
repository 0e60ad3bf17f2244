//! Scenario runner for the atmosphere edge/fog/cloud platform.
//!
//! A scenario file describes the topology, the schemas, the agents on each
//! edge and the input workload. [`harness::run`] builds the nodes from
//! `atmosphere-core`, drives them in virtual or real time and reduces the
//! records into a [`report::RunReport`].

pub mod config;
pub mod cpu;
pub mod harness;
pub mod live;
pub mod process;
pub mod report;
pub mod runtime;
pub mod schedule;
pub mod sim;
pub mod topology;
