//! Quality-diversity evolution of LLM debate strategies.
//!
//! Strategies are instruction prompts grouped into seven persuasion
//! categories. Each generation they meet in debate tournaments, are rated by
//! an Elo model fitted to judge probabilities, and are replaced per category
//! by LLM-mutated offspring of the survivors. Two objectives are available:
//! persuasion (strategies compete) and truth (teams of two strategies help a
//! judge find the correct answer).

pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod debate;
pub mod evolution;
pub mod exec;
pub mod gateway;
pub mod layout;
pub mod rating;
pub mod seed;
pub mod template;
pub mod tournament;

pub use exec::Execution;
