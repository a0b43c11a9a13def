//! Goal-conditioned tabular agents that control how much they reveal about
//! their goal, with exact occupancy oracles and a recurrent observer.

pub mod agent;
pub mod env;
pub mod info;
pub mod oracle;
pub mod trainer;
pub mod observer;
pub mod config;
pub mod matrix;
pub mod persist;
pub mod stats;
