//! Instance sets, evaluation, metrics and verification suites for the
//! branching agent.

pub mod evaluate;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod verify;
