//! Active look-back planning loop.
//!
//! At step `i` the planner shows the model the goal, the rendered memory of
//! steps `0..i` and the current screenshot. The model either answers with a
//! GUI action, or calls `retrieve` on an earlier step, in which case that
//! step's screenshot is appended as a tool message and the model is queried
//! again. Every later call sees the earlier message list unchanged, with new
//! messages only appended.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{parse_turn, Action, AgentTurn, Platform, PlatformMismatch, TurnParseError};
use crate::backend::{Backend, BackendError, ChatMessage, MessageBuilder, Role};
use crate::memory::{render_memory, CompressedMemory, Goal, MemorySource, Observation};
use crate::trajectory::Trajectory;

/// Action schema listing shared by the planner and teacher prompts.
macro_rules! action_schema {
    () => {
        r#"GUI actions (coordinates are fractions of screen width and height in [0,1]):
{"action":"click","coordinate":[x,y]}
{"action":"long_press","coordinate":[x,y]}
{"action":"left_double","coordinate":[x,y]}
{"action":"right_single","coordinate":[x,y]}
{"action":"type","text":"..."}
{"action":"scroll","direction":"up|down|left|right"}
{"action":"drag","start":[x,y],"end":[x,y]}
{"action":"wait"}
{"action":"open_app","name":"..."}
{"action":"press_home"}
{"action":"press_back"}
{"action":"hotkey","keys":["ctrl","c"]}
{"action":"finished"}

Tool:
{"action":"retrieve","step":j}
Returns the screenshot of an earlier step j (j smaller than the current step)."#
    };
}
#[allow(unused_imports)]
pub(crate) use action_schema;

pub const SYSTEM_PROMPT: &str = concat!(
    "You are a GUI agent operating a device through screenshots.\n",
    "Each turn you receive the task goal, a compressed memory summarizing the previous steps, and the current screenshot.\n",
    "First reason inside <think></think>. Then output exactly one call inside <tool_use></tool_use> as a JSON object.\n\n",
    action_schema!(),
    "\nUse retrieve when the memory lacks a visual detail you need; afterwards answer with a GUI action."
);

pub const BUDGET_EXHAUSTED_NOTICE: &str =
    "Retrieval budget exhausted. Do not call retrieve again; answer now with a GUI action.";

/// Label of the tool message carrying a retrieved screenshot.
pub fn retrieval_label(step: u32) -> String {
    format!("Observation from step {step}")
}

pub fn system_prompt_hash() -> String {
    hex::encode(Sha256::digest(SYSTEM_PROMPT.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub max_retrievals: u32,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { max_retrievals: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanContext {
    pub goal: Goal,
    pub memory: CompressedMemory,
    pub current: Observation,
    /// Observations of steps `0..i`.
    pub history: Vec<Observation>,
    pub platform: Platform,
}

impl PlanContext {
    pub fn from_trajectory(traj: &Trajectory, step: usize, memory: CompressedMemory) -> Self {
        PlanContext {
            goal: traj.goal.clone(),
            memory,
            current: traj.observations[step].clone(),
            history: traj.observations[..step].to_vec(),
            platform: traj.platform,
        }
    }

    pub fn step(&self) -> u32 {
        self.current.step_index
    }

    fn check(&self) -> Result<(), PlanError> {
        let i = self.step() as usize;
        let history_ok = self
            .history
            .iter()
            .enumerate()
            .all(|(k, o)| o.step_index as usize == k);
        if self.memory.len() != i || self.history.len() != i || !history_ok {
            return Err(PlanError::InvalidContext(format!(
                "step {i} needs memory and history for steps 0..{i}; got {} entries and {} observations",
                self.memory.len(),
                self.history.len()
            )));
        }
        Ok(())
    }
}

/// The opening message list for step `i`: system prompt and the user turn with memory and screenshot.
pub fn initial_messages(
    goal: &Goal,
    memory: &CompressedMemory,
    current: &Observation,
) -> Vec<ChatMessage> {
    initial_messages_rendered(goal, &render_memory(memory), current)
}

/// [`initial_messages`] from an already rendered memory.
pub fn initial_messages_rendered(
    goal: &Goal,
    rendered_memory: &str,
    current: &Observation,
) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(SYSTEM_PROMPT),
        MessageBuilder::new(Role::User)
            .text(format!(
                "Task goal: {}\n\nMemory of previous steps:\n{}\n\nCurrent screenshot (step {}):",
                goal.as_str(),
                rendered_memory,
                current.step_index
            ))
            .image(current.image.clone())
            .build(),
    ]
}

/// Tool message injecting a retrieved screenshot.
pub fn retrieval_message(obs: &Observation) -> ChatMessage {
    MessageBuilder::new(Role::Tool)
        .text(retrieval_label(obs.step_index))
        .image(obs.image.clone())
        .build()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanOutcome {
    DirectAction {
        action: Action,
    },
    RetrievalThenAction {
        retrieved_steps: Vec<u32>,
        action: Action,
    },
}

impl PlanOutcome {
    pub fn action(&self) -> &Action {
        match self {
            PlanOutcome::DirectAction { action }
            | PlanOutcome::RetrievalThenAction { action, .. } => action,
        }
    }

    pub fn retrieved_steps(&self) -> &[u32] {
        match self {
            PlanOutcome::DirectAction { .. } => &[],
            PlanOutcome::RetrievalThenAction {
                retrieved_steps, ..
            } => retrieved_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub outcome: PlanOutcome,
    pub turns: Vec<AgentTurn>,
    pub think_texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("retrieve index {j} is not before the current step {current}")]
    InvalidRetrieveIndex { j: u32, current: u32 },
    #[error("step {0} was already retrieved")]
    DuplicateRetrieve(u32),
    #[error("model kept calling retrieve after the budget was exhausted")]
    BudgetExhausted,
    #[error("parse error: {0}")]
    Parse(#[from] TurnParseError),
    #[error(transparent)]
    PlatformMismatch(#[from] PlatformMismatch),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("invalid plan context: {0}")]
    InvalidContext(String),
    #[error("memory unavailable: {0}")]
    Memory(String),
    #[error("malformed trajectory: {0}")]
    TrajectoryMalformed(String),
}

impl PlanError {
    /// Stable short name for reports.
    pub fn code(&self) -> &'static str {
        match self {
            PlanError::InvalidRetrieveIndex { .. } => "invalid_retrieve_index",
            PlanError::DuplicateRetrieve(_) => "duplicate_retrieve",
            PlanError::BudgetExhausted => "budget_exhausted",
            PlanError::Parse(_) => "parse_error",
            PlanError::PlatformMismatch(_) => "platform_mismatch",
            PlanError::Backend(_) => "backend_error",
            PlanError::InvalidContext(_) => "invalid_context",
            PlanError::Memory(_) => "memory_unavailable",
            PlanError::TrajectoryMalformed(_) => "trajectory_malformed",
        }
    }
}

/// One backend call inside a plan step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_index: usize,
    pub messages: Vec<ChatMessage>,
    pub raw_output: Option<String>,
    /// Canonical JSON of the parsed call, when parsing succeeded.
    pub parsed: Option<String>,
    pub error: Option<String>,
    /// Step whose screenshot was injected in response to this call.
    pub retrieve_executed: Option<u32>,
}

pub fn plan_step(
    backend: &dyn Backend,
    ctx: &PlanContext,
    config: &PlannerConfig,
) -> Result<PlanStep, PlanError> {
    plan_step_traced(backend, ctx, config, &mut Vec::new())
}

/// [`plan_step`] that also records every backend call into `trace`.
pub fn plan_step_traced(
    backend: &dyn Backend,
    ctx: &PlanContext,
    config: &PlannerConfig,
    trace: &mut Vec<CallRecord>,
) -> Result<PlanStep, PlanError> {
    ctx.check()?;
    let current = ctx.step();
    let mut messages = initial_messages(&ctx.goal, &ctx.memory, &ctx.current);
    let mut turns = Vec::new();
    let mut retrieved: Vec<u32> = Vec::new();
    let mut forced_final = false;

    loop {
        let mut record = CallRecord {
            call_index: trace.len(),
            messages: messages.clone(),
            raw_output: None,
            parsed: None,
            error: None,
            retrieve_executed: None,
        };
        let result = step_once(backend, &messages, &mut record);
        let turn = match result {
            Ok(turn) => turn,
            Err(e) => {
                record.error = Some(e.to_string());
                trace.push(record);
                return Err(e);
            }
        };
        messages.push(ChatMessage::assistant(turn.raw.clone()));

        let verdict = match &turn.call {
            Action::Retrieve { step: j } => {
                let j = *j;
                if j >= current {
                    Err(PlanError::InvalidRetrieveIndex { j, current })
                } else if retrieved.len() as u32 >= config.max_retrievals {
                    if forced_final {
                        Err(PlanError::BudgetExhausted)
                    } else {
                        messages.push(ChatMessage::text(Role::Tool, BUDGET_EXHAUSTED_NOTICE));
                        forced_final = true;
                        Ok(None)
                    }
                } else if retrieved.contains(&j) {
                    Err(PlanError::DuplicateRetrieve(j))
                } else {
                    messages.push(retrieval_message(&ctx.history[j as usize]));
                    retrieved.push(j);
                    record.retrieve_executed = Some(j);
                    Ok(None)
                }
            }
            action => action
                .validate_for_platform(ctx.platform)
                .map(|()| Some(action.clone()))
                .map_err(PlanError::from),
        };
        turns.push(turn);
        match verdict {
            Ok(None) => trace.push(record),
            Ok(Some(action)) => {
                trace.push(record);
                let outcome = if retrieved.is_empty() {
                    PlanOutcome::DirectAction { action }
                } else {
                    PlanOutcome::RetrievalThenAction {
                        retrieved_steps: retrieved,
                        action,
                    }
                };
                let think_texts = turns.iter().map(|t| t.think.clone()).collect();
                return Ok(PlanStep {
                    outcome,
                    turns,
                    think_texts,
                });
            }
            Err(e) => {
                record.error = Some(e.to_string());
                trace.push(record);
                return Err(e);
            }
        }
    }
}

fn step_once(
    backend: &dyn Backend,
    messages: &[ChatMessage],
    record: &mut CallRecord,
) -> Result<AgentTurn, PlanError> {
    let raw = backend.complete(messages)?;
    record.raw_output = Some(raw.clone());
    let turn = parse_turn(&raw)?;
    record.parsed = Some(turn.call.to_canonical_json());
    Ok(turn)
}

/// Result of planning one step of one trajectory under teacher forcing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub trajectory_id: String,
    pub step: u32,
    pub transcript: Vec<CallRecord>,
    pub result: Result<PlanStep, PlanError>,
}

/// One line of the transcript log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub trajectory_id: String,
    pub step: u32,
    #[serde(flatten)]
    pub call: CallRecord,
}

impl StepRecord {
    pub fn transcript_lines(&self) -> impl Iterator<Item = TranscriptLine> + '_ {
        self.transcript.iter().map(|c| TranscriptLine {
            trajectory_id: self.trajectory_id.clone(),
            step: self.step,
            call: c.clone(),
        })
    }
}

/// Plans step `i` of `traj` with memory of the ground-truth prefix.
pub fn plan_at(
    backend: &dyn Backend,
    traj: &Trajectory,
    step: usize,
    memory: &dyn MemorySource,
    config: &PlannerConfig,
) -> StepRecord {
    let mut transcript = Vec::new();
    let result = memory
        .memory_for(traj, step)
        .map_err(|e| PlanError::Memory(e.to_string()))
        .and_then(|mem| {
            let ctx = PlanContext::from_trajectory(traj, step, mem);
            plan_step_traced(backend, &ctx, config, &mut transcript)
        });
    StepRecord {
        trajectory_id: traj.id.clone(),
        step: step as u32,
        transcript,
        result,
    }
}

/// Plans every listed (trajectory, step) on a pool of `parallel` workers; output follows input order.
pub fn run_steps(
    backend: &dyn Backend,
    items: &[(Arc<Trajectory>, usize)],
    memory: &dyn MemorySource,
    config: &PlannerConfig,
    parallel: usize,
) -> Vec<StepRecord> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .expect("worker pool");
    pool.install(|| {
        items
            .par_iter()
            .map(|(traj, step)| plan_at(backend, traj, *step, memory, config))
            .collect()
    })
}

/// Teacher-forced offline run over all steps of one trajectory. Step failures are recorded, not raised.
pub fn run_episode_offline(
    backend: &dyn Backend,
    traj: &Trajectory,
    memory: &dyn MemorySource,
    config: &PlannerConfig,
) -> Result<Vec<StepRecord>, PlanError> {
    traj.check().map_err(PlanError::TrajectoryMalformed)?;
    Ok((0..traj.len())
        .map(|i| plan_at(backend, traj, i, memory, config))
        .collect())
}
