//! Branch-and-bound for mixed-integer linear programs, exposed as a Markov
//! decision process over whole search trees, with a histogram-valued DQN
//! branching agent.

pub mod agent;
pub mod bnb;
pub mod env;
pub mod features;
pub mod gen;
pub mod lp;
pub mod milp;
pub mod targets;

#[cfg(test)]
pub(crate) mod testkit;
