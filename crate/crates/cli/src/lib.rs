//! Verification harness and command-line driver for `rcnet-core`.

pub mod bench;
pub mod checks;
pub mod cli;
pub mod oracle;
pub mod report;
