//! Self-play preference data synthesis.
//!
//! An actor model answers instructions, a refiner model judges the answers
//! with self-consistency voting, and failed answers are repaired by a
//! budgeted breadth- or depth-first search over refinements. The resulting
//! trees are mined for preference pairs (DPO) and rejection-sampling
//! fine-tuning data for the refiner, all written as canonical JSONL.
//!
//! Every model call goes through [`gateway::Backend`]. A remote backend
//! talks to an OpenAI-compatible chat-completions endpoint; a scripted
//! backend ([`gateway::ScriptedModel`]) simulates the roles against the
//! verifiable tasks in [`synthetic`], which makes the whole pipeline
//! reproducible on a laptop.
//!
//! Module map:
//!
//! - [`model`]: shared domain types and refinement trees
//! - [`gateway`]: backends, retries, scripted doubles
//! - [`taxonomy`]: seed filtering and constraint-driven prompt evolution
//! - [`judgment`]: judge prompts, label parsing, majority voting
//! - [`search`]: BFS/DFS refinement, record extraction, decoding strategies
//! - [`losses`]: SFT and DPO objective oracles
//! - [`synthetic`]: verifiable tasks, pair constructions, similarity
//! - [`dataset`]: record schemas, emission, balancing, splits
//! - [`pipeline`]: configuration, iteration driver, statistics

pub mod dataset;
pub mod gateway;
pub mod judgment;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod search;
pub mod seed;
pub mod synthetic;
pub mod taxonomy;
mod template;

pub use model::{
    Judgment, Label, Origin, Producer, Prompt, RefinementNode, RefinementTree, Response, SamplingPlan, SearchBudget,
    TreeOutcome, VoteSet,
};
