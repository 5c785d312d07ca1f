//! Continuous build-and-test harness for scientific codes across platforms.

pub mod cli;
pub mod compare;
pub mod executor;
pub mod manifest;
pub mod poller;
pub mod process;
pub mod queue;
pub mod report;
pub mod template;
