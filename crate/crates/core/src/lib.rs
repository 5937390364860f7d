//! Robust reward modeling at desk scale: causal augmentation of pairwise
//! preference data, linear reward models, a synthetic causal laboratory,
//! and artifact / best-of-N / DPO evaluation harnesses.

pub mod augmenter;
pub mod corpus;
pub mod experiment;
pub mod injector;
pub mod metrics;
pub mod policyeval;
pub mod rewardnet;
pub mod synthlab;
pub mod util;
