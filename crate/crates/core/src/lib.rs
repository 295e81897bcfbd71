//! GUI navigation agent framework: compressed dual-level memory, an active
//! look-back retrieval tool inside a think-act planning loop, a teacher-driven
//! pipeline producing tool-augmented instruction-tuning data, and a step-level
//! evaluation harness with context-token accounting.

pub mod action;
pub mod backend;
pub mod cli;
pub mod datagen;
pub mod eval;
pub mod matching;
pub mod memory;
pub mod planner;
pub mod trajectory;

pub use action::{parse_turn, serialize_turn, Action, ActionKind, AgentTurn, Platform, Point};
pub use backend::{Backend, BackendConfig, ChatMessage, HttpBackend, ScriptedBackend};
pub use memory::{CompressedMemory, Goal, MemoryCache, MemoryEntry, Observation};
pub use planner::{plan_step, PlanContext, PlanOutcome, PlanStep, PlannerConfig};
pub use trajectory::{BBox, Trajectory};
