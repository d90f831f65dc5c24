//! Zero-shot embodied task planning harness.
//!
//! The pipeline decomposes a household instruction through a self-questioning
//! language-model pass, turns the resulting conversation into a subgoal plan,
//! executes the plan in a symbolic household simulator and, when a subgoal
//! fails, asks a scene-conditioned model whether to retry or re-plan.
//! Plans are scored against annotated ground truth with an exact-sequence
//! metric and a relaxed partial-order metric.
//!
//! Module map:
//!
//! - [`plan`]: subgoal / plan data model and the textual template format
//! - [`world`]: symbolic simulator, object detector, scene renderer, goal checks
//! - [`prompts`]: prompt template loading and rendering
//! - [`gateway`]: chat-completion clients (HTTP provider, scripted oracle)
//! - [`engine`]: the decompose → plan → execute → recover loop
//! - [`eval`]: strict / relaxed plan matching and dataset metrics
//! - [`bench`]: task sets, batch runs, trace files and reports

pub mod bench;
pub mod engine;
pub mod eval;
pub mod gateway;
pub mod plan;
pub mod prompts;
pub mod world;

pub use engine::{EpisodeConfig, EpisodeTrace, Outcome, SocraticPlanner};
pub use eval::{GtAnnotation, MetricsReport, RelaxedSpec};
pub use gateway::{Completion, DecodeParams, ModelGateway, OracleScript, ScriptedGateway};
pub use plan::{ActionKind, Instruction, ObjectId, Plan, Subgoal};
pub use prompts::{PromptSet, RenderedPrompt};
pub use world::{Scenario, SceneSnapshot, WorldState};
