//! Cooperative dual-network deep Q-learning with direct error-driven
//! weight updates, plus numerical checks of the update rule's analysis.

pub mod cli;
pub mod envs;
pub mod linalg;
pub mod network;
pub mod parallel;
pub mod replay;
pub mod theory;
pub mod trainer;
