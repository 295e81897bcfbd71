//! Tool-augmented instruction-tuning data.
//!
//! Pipeline: four-stage teacher curation per (trajectory, step), correctness
//! filtering, recency rebalancing of retrieval samples, 1:1 balancing against
//! direct-action samples, reasoning synthesis and dialogue formatting.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{is_valid_think, parse_tool_use, serialize_turn, Action, AgentTurn};
use crate::backend::{Backend, BackendError, ChatMessage, MessageBuilder, Role};
use crate::matching::{matches_ground_truth, DEFAULT_GROUNDING_THRESHOLD};
use crate::memory::{render_memory, CompressedMemory, MemorySource};
use crate::planner::{action_schema, initial_messages_rendered, retrieval_message, SYSTEM_PROMPT};

pub use crate::trajectory::Trajectory;

pub const TEACHER_SYSTEM_PROMPT: &str = concat!(
    "You are an expert GUI agent teacher. You work through one step of a recorded task in four stages, ",
    "answering only the stage you are asked about.\n\n",
    action_schema!()
);

pub const SYNTHESIS_SYSTEM_PROMPT: &str = "You turn staged notes from a GUI agent into one coherent first-person \
reasoning passage. Keep every fact that justifies the final decision, drop repetition, and never output tags.";

/// Separator between pre- and post-retrieval reasoning in synthesizer output.
pub const AFTER_RETRIEVAL_MARKER: &str = "AFTER RETRIEVAL:";

fn stage_header(traj: &Trajectory, step: usize) -> String {
    format!("Task goal: {}\nCurrent step: {step}\n", traj.goal.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    HistoryRevision = 1,
    CandidateProposals = 2,
    ConfidenceEvaluation = 3,
    ActionPrediction = 4,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutputs {
    pub history_revision: String,
    pub candidate_proposals: String,
    pub confidence_evaluation: String,
    pub action_prediction: String,
}

impl StageOutputs {
    pub fn in_order(&self) -> [&str; 4] {
        [
            &self.history_revision,
            &self.candidate_proposals,
            &self.confidence_evaluation,
            &self.action_prediction,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuratedSample {
    pub trajectory: Arc<Trajectory>,
    pub step: u32,
    pub stage_outputs: StageOutputs,
    pub retrieved_step: Option<u32>,
    pub predicted_action: Action,
    pub matches_ground_truth: bool,
}

impl CuratedSample {
    pub fn trajectory_id(&self) -> &str {
        &self.trajectory.id
    }

    pub fn used_retrieval(&self) -> bool {
        self.retrieved_step.is_some()
    }

    /// `i - j` for a retrieval sample.
    pub fn retrieval_distance(&self) -> Option<u32> {
        self.retrieved_step.map(|j| self.step - j)
    }

    fn key(&self) -> (String, u32) {
        (self.trajectory.id.clone(), self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CurateError {
    #[error("stage {stage} output could not be parsed: {reason}")]
    StageParseFailure { stage: u8, reason: String },
    #[error("retrieve index {j} is not before the current step {current}")]
    InvalidRetrieveIndex { j: u32, current: u32 },
    #[error("step {step} is outside the trajectory (0..{len})")]
    StepOutOfRange { step: usize, len: usize },
    #[error("memory covers {got} steps, expected {expected}")]
    MemoryMismatch { expected: usize, got: usize },
    #[error("memory unavailable: {0}")]
    Memory(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl CurateError {
    pub fn code(&self) -> &'static str {
        match self {
            CurateError::StageParseFailure { .. } => "stage_parse_failure",
            CurateError::InvalidRetrieveIndex { .. } => "invalid_retrieve_index",
            CurateError::StepOutOfRange { .. } => "step_out_of_range",
            CurateError::MemoryMismatch { .. } => "memory_mismatch",
            CurateError::Memory(_) => "memory_unavailable",
            CurateError::Backend(_) => "backend_error",
        }
    }
}

/// Stage-3 decision, read from the final nonempty line: `RETRIEVE <j>` or `NO RETRIEVAL`.
pub fn parse_retrieval_decision(text: &str) -> Result<Option<u32>, CurateError> {
    let fail = |reason: &str| CurateError::StageParseFailure {
        stage: Stage::ConfidenceEvaluation as u8,
        reason: reason.to_string(),
    };
    let last = text
        .lines()
        .map(str::trim)
        .rev()
        .find(|l| !l.is_empty())
        .ok_or_else(|| fail("empty output"))?;
    let upper = last.to_ascii_uppercase();
    if upper == "NO RETRIEVAL" {
        return Ok(None);
    }
    match upper.strip_prefix("RETRIEVE") {
        Some(rest) if rest.starts_with(char::is_whitespace) => rest
            .trim()
            .parse::<u32>()
            .map(Some)
            .map_err(|_| fail("RETRIEVE must be followed by a step index")),
        _ => Err(fail("final line must be `RETRIEVE <j>` or `NO RETRIEVAL`")),
    }
}

fn stage_one_prompt(traj: &Trajectory, step: usize, memory: &CompressedMemory) -> ChatMessage {
    ChatMessage::text(
        Role::User,
        format!(
            "{}\nStage 1 - History revision.\nCompressed memory of the previous steps:\n{}\n\n\
             Review the memory and assess progress toward the goal: what has been achieved so far and what remains.",
            stage_header(traj, step),
            render_memory(memory)
        ),
    )
}

fn stage_two_prompt(traj: &Trajectory, step: usize) -> ChatMessage {
    MessageBuilder::new(Role::User)
        .text(format!(
            "{}\nStage 2 - Candidate proposals.\nThe current screenshot (step {step}) follows. \
             Propose several plausible next actions, each with a short justification.",
            stage_header(traj, step)
        ))
        .image(traj.observations[step].image.clone())
        .build()
}

fn stage_three_prompt(traj: &Trajectory, step: usize) -> ChatMessage {
    let range = if step == 0 {
        "There are no earlier steps, so retrieval is not possible.".to_string()
    } else {
        format!(
            "You may retrieve the screenshot of one earlier step j with 0 <= j <= {}.",
            step - 1
        )
    };
    ChatMessage::text(
        Role::User,
        format!(
            "{}\nStage 3 - Confidence evaluation.\nFor each candidate, state how confident you are and whether \
             a detail from an earlier screen is needed to decide. {range}\n\
             End with a final line that is exactly `RETRIEVE <j>` or `NO RETRIEVAL`.",
            stage_header(traj, step)
        ),
    )
}

fn stage_four_prompt(traj: &Trajectory, step: usize, retrieved: Option<u32>) -> ChatMessage {
    let mut b = MessageBuilder::new(Role::User).text(format!(
        "{}\nStage 4 - Tool-use action prediction.",
        stage_header(traj, step)
    ));
    if let Some(j) = retrieved {
        let obs = &traj.observations[j as usize];
        b = b
            .text(format!("Retrieved observation from step {j}:"))
            .image(obs.image.clone());
    }
    b.text(
        "Output the single next GUI action as <tool_use>{...}</tool_use> using the action schema.",
    )
    .build()
}

/// Runs the four teacher stages for step `step` of `traj`.
pub fn curate_step(
    teacher: &dyn Backend,
    traj: &Arc<Trajectory>,
    step: usize,
    memory: &CompressedMemory,
    grounding_threshold: f64,
) -> Result<CuratedSample, CurateError> {
    if step >= traj.len() {
        return Err(CurateError::StepOutOfRange {
            step,
            len: traj.len(),
        });
    }
    if memory.len() != step {
        return Err(CurateError::MemoryMismatch {
            expected: step,
            got: memory.len(),
        });
    }
    let mut dialogue = vec![ChatMessage::system(TEACHER_SYSTEM_PROMPT)];
    let mut ask = |prompt: ChatMessage| -> Result<String, CurateError> {
        dialogue.push(prompt);
        let out = teacher.complete(&dialogue)?;
        dialogue.push(ChatMessage::assistant(out.clone()));
        Ok(out)
    };
    let history_revision = ask(stage_one_prompt(traj, step, memory))?;
    let candidate_proposals = ask(stage_two_prompt(traj, step))?;
    let confidence_evaluation = ask(stage_three_prompt(traj, step))?;
    let retrieved_step = parse_retrieval_decision(&confidence_evaluation)?;
    if let Some(j) = retrieved_step {
        if j as usize >= step {
            return Err(CurateError::InvalidRetrieveIndex {
                j,
                current: step as u32,
            });
        }
    }
    let action_prediction = ask(stage_four_prompt(traj, step, retrieved_step))?;
    let predicted_action =
        parse_tool_use(&action_prediction).map_err(|e| CurateError::StageParseFailure {
            stage: Stage::ActionPrediction as u8,
            reason: e.to_string(),
        })?;
    if predicted_action.is_retrieve() {
        return Err(CurateError::StageParseFailure {
            stage: Stage::ActionPrediction as u8,
            reason: "final action must be a GUI action, not retrieve".into(),
        });
    }
    let matches = matches_ground_truth(
        &predicted_action,
        &traj.actions[step],
        traj.bboxes[step].as_ref(),
        grounding_threshold,
    );
    Ok(CuratedSample {
        trajectory: Arc::clone(traj),
        step: step as u32,
        stage_outputs: StageOutputs {
            history_revision,
            candidate_proposals,
            confidence_evaluation,
            action_prediction,
        },
        retrieved_step,
        predicted_action,
        matches_ground_truth: matches,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub tool_correct: Vec<CuratedSample>,
    pub notool_correct: Vec<CuratedSample>,
    pub dropped: usize,
}

/// Drops samples whose final action misses the ground truth and splits the rest by retrieval use.
pub fn filter_and_split(samples: Vec<CuratedSample>) -> Split {
    let mut split = Split::default();
    for s in samples {
        if !s.matches_ground_truth {
            split.dropped += 1;
        } else if s.used_retrieval() {
            split.tool_correct.push(s);
        } else {
            split.notool_correct.push(s);
        }
    }
    if split.tool_correct.is_empty() && split.notool_correct.is_empty() {
        log::warn!(
            "all {} curated samples were dropped by the correctness filter",
            split.dropped
        );
    }
    split
}

/// Sampling weight of a retrieval sample as a function of its distance bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum RecencyScheme {
    /// Weight `1 / count(bucket)`: every occupied distance bucket is equally likely.
    #[default]
    UniformBuckets,
    /// Weight proportional to `distance ^ alpha`.
    Power { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BalanceError {
    #[error("no retrieval samples to rebalance")]
    EmptyInput,
    #[error("sample from {trajectory_id} step {step} has no retrieval distance")]
    MissingDistance { trajectory_id: String, step: u32 },
    #[error("cannot balance: the {0} side is empty")]
    EmptySide(&'static str),
}

pub fn distance_histogram(samples: &[CuratedSample]) -> BTreeMap<u32, usize> {
    let mut h = BTreeMap::new();
    for d in samples.iter().filter_map(CuratedSample::retrieval_distance) {
        *h.entry(d).or_insert(0) += 1;
    }
    h
}

/// Seeded resampling with replacement; output size equals input size.
pub fn rebalance_recency(
    tool_samples: &[CuratedSample],
    scheme: RecencyScheme,
    seed: u64,
) -> Result<Vec<CuratedSample>, BalanceError> {
    rebalance_recency_n(tool_samples, scheme, tool_samples.len(), seed)
}

/// [`rebalance_recency`] drawing `n` samples.
pub fn rebalance_recency_n(
    tool_samples: &[CuratedSample],
    scheme: RecencyScheme,
    n: usize,
    seed: u64,
) -> Result<Vec<CuratedSample>, BalanceError> {
    if tool_samples.is_empty() {
        return Err(BalanceError::EmptyInput);
    }
    let distances = tool_samples
        .iter()
        .map(|s| match s.retrieval_distance() {
            Some(d) if d >= 1 => Ok(d),
            _ => Err(BalanceError::MissingDistance {
                trajectory_id: s.trajectory_id().to_string(),
                step: s.step,
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for d in &distances {
        *counts.entry(*d).or_insert(0) += 1;
    }
    let weights: Vec<f64> = distances
        .iter()
        .map(|d| match scheme {
            RecencyScheme::UniformBuckets => 1.0 / counts[d] as f64,
            RecencyScheme::Power { alpha } => f64::from(*d).powf(alpha),
        })
        .collect();
    let index = WeightedIndex::new(&weights).expect("weights are positive and finite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| tool_samples[index.sample(&mut rng)].clone())
        .collect())
}

/// Downsamples the larger side to the smaller side's size and shuffles the union.
pub fn balance_tool_nontool(
    tool: &[CuratedSample],
    notool: &[CuratedSample],
    seed: u64,
) -> Result<Vec<CuratedSample>, BalanceError> {
    if tool.is_empty() {
        return Err(BalanceError::EmptySide("tool"));
    }
    if notool.is_empty() {
        return Err(BalanceError::EmptySide("non-tool"));
    }
    let keep = tool.len().min(notool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |side: &[CuratedSample]| -> Vec<CuratedSample> {
        let mut idx = rand::seq::index::sample(&mut rng, side.len(), keep).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| side[i].clone()).collect()
    };
    let mut combined = pick(tool);
    combined.extend(pick(notool));
    combined.shuffle(&mut rng);
    Ok(combined)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthesisError {
    #[error("stage output {0} is empty")]
    EmptyStage(u8),
    #[error("synthesizer returned empty text")]
    EmptySynthesis,
    #[error("synthesized text contains block tags")]
    TaggedSynthesis,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub fn synthesis_messages(sample: &CuratedSample) -> Vec<ChatMessage> {
    let names = [
        "History revision",
        "Candidate proposals",
        "Confidence evaluation",
        "Action prediction",
    ];
    let mut prompt = format!(
        "Task goal: {}\nCurrent step: {}\n\n",
        sample.trajectory.goal.as_str(),
        sample.step
    );
    for (k, (name, text)) in names
        .iter()
        .zip(sample.stage_outputs.in_order())
        .enumerate()
    {
        prompt.push_str(&format!("[Stage {} - {name}]\n{}\n\n", k + 1, text.trim()));
    }
    prompt.push_str(&format!(
        "Final action: {}\n\nWrite the reasoning that leads to this action as one passage.",
        sample.predicted_action.describe()
    ));
    if let Some(j) = sample.retrieved_step {
        prompt.push_str(&format!(
            " The agent looks back at step {j} before acting: first write the reasoning that motivates \
             the look-back, then a line `{AFTER_RETRIEVAL_MARKER}` followed by the reasoning after seeing \
             that screenshot."
        ));
    }
    vec![
        ChatMessage::system(SYNTHESIS_SYSTEM_PROMPT),
        ChatMessage::text(Role::User, prompt),
    ]
}

/// Merges the four stage outputs into one reasoning text.
pub fn synthesize_reasoning(
    synth: &dyn Backend,
    sample: &CuratedSample,
) -> Result<String, SynthesisError> {
    for (k, text) in sample.stage_outputs.in_order().iter().enumerate() {
        if text.trim().is_empty() {
            return Err(SynthesisError::EmptyStage(k as u8 + 1));
        }
    }
    let out = synth.complete(&synthesis_messages(sample))?;
    let mut text = out.trim();
    if let Some(inner) = text
        .strip_prefix("<think>")
        .and_then(|t| t.strip_suffix("</think>"))
    {
        text = inner.trim();
    }
    if text.is_empty() {
        return Err(SynthesisError::EmptySynthesis);
    }
    if !is_valid_think(text) {
        return Err(SynthesisError::TaggedSynthesis);
    }
    Ok(text.to_string())
}

/// Splits synthesized reasoning into the think texts before and after a look-back.
pub fn split_reasoning(think: &str, retrieved_step: Option<u32>) -> (String, Option<String>) {
    let Some(j) = retrieved_step else {
        return (think.to_string(), None);
    };
    match think.split_once(AFTER_RETRIEVAL_MARKER) {
        Some((before, after)) if !before.trim().is_empty() && !after.trim().is_empty() => {
            (before.trim().to_string(), Some(after.trim().to_string()))
        }
        _ => (
            think.to_string(),
            Some(format!(
                "The screenshot from step {j} confirms the detail I needed, so I act on it now."
            )),
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftLabels {
    pub used_retrieval: bool,
    pub retrieval_distance: Option<u32>,
}

/// One step-level training dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub id: String,
    pub trajectory_id: String,
    pub step: u32,
    pub messages: Vec<ChatMessage>,
    pub labels: SftLabels,
}

impl SftSample {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serializes")
    }
}

/// Builds the dialogue: system, user (memory and screenshot), assistant, and for
/// retrieval samples a tool turn with the retrieved screenshot and a final assistant turn.
pub fn format_sft(sample: &CuratedSample, think: &str, memory_render: &str) -> SftSample {
    let traj = &sample.trajectory;
    let step = sample.step as usize;
    let mut messages =
        initial_messages_rendered(&traj.goal, memory_render, &traj.observations[step]);
    debug_assert_eq!(messages[0].text_content(), SYSTEM_PROMPT);
    let (before, after) = split_reasoning(think, sample.retrieved_step);
    match (sample.retrieved_step, after) {
        (Some(j), Some(after)) => {
            let retrieve = AgentTurn::new(before, Action::Retrieve { step: j });
            messages.push(ChatMessage::assistant(serialize_turn(&retrieve)));
            messages.push(retrieval_message(&traj.observations[j as usize]));
            let act = AgentTurn::new(after, sample.predicted_action.clone());
            messages.push(ChatMessage::assistant(serialize_turn(&act)));
        }
        _ => {
            let act = AgentTurn::new(before, sample.predicted_action.clone());
            messages.push(ChatMessage::assistant(serialize_turn(&act)));
        }
    }
    SftSample {
        id: format!("{}#{}", traj.id, sample.step),
        trajectory_id: traj.id.clone(),
        step: sample.step,
        messages,
        labels: SftLabels {
            used_retrieval: sample.used_retrieval(),
            retrieval_distance: sample.retrieval_distance(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub seed: u64,
    pub grounding_threshold: f64,
    pub recency: RecencyScheme,
    pub parallel: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            seed: 0,
            grounding_threshold: DEFAULT_GROUNDING_THRESHOLD,
            recency: RecencyScheme::UniformBuckets,
            parallel: 4,
        }
    }
}

/// Counts per pipeline stage, written to the dataset manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatagenStats {
    pub steps_attempted: usize,
    pub curate_failures: BTreeMap<String, usize>,
    pub curated: usize,
    pub dropped_incorrect: usize,
    pub tool_correct: usize,
    pub notool_correct: usize,
    pub distance_buckets_before: BTreeMap<u32, usize>,
    pub distance_buckets_after: BTreeMap<u32, usize>,
    pub final_tool: usize,
    pub final_notool: usize,
    pub synthesis_calls: usize,
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error("reasoning synthesis failed for {trajectory_id} step {step}: {source}")]
    Synthesis {
        trajectory_id: String,
        step: u32,
        #[source]
        source: SynthesisError,
    },
    #[error("memory unavailable: {0}")]
    Memory(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatagenOutput {
    pub samples: Vec<SftSample>,
    pub stats: DatagenStats,
}

/// Curates every step of every trajectory on a pool of `config.parallel` workers.
/// Results keep (trajectory, step) order; failures are returned alongside.
pub fn curate_all(
    teacher: &dyn Backend,
    trajectories: &[Arc<Trajectory>],
    memory: &dyn MemorySource,
    config: &DatagenConfig,
) -> Vec<Result<CuratedSample, CurateError>> {
    use rayon::prelude::*;
    let items: Vec<(Arc<Trajectory>, usize)> = trajectories
        .iter()
        .flat_map(|t| (0..t.len()).map(move |i| (Arc::clone(t), i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallel.max(1))
        .build()
        .expect("worker pool");
    pool.install(|| {
        items
            .par_iter()
            .map(|(traj, i)| {
                let mem = memory
                    .memory_for(traj, *i)
                    .map_err(|e| CurateError::Memory(e.to_string()))?;
                curate_step(teacher, traj, *i, &mem, config.grounding_threshold)
            })
            .collect()
    })
}

/// Full pipeline: curate, filter, rebalance, balance, synthesize, format.
pub fn run_pipeline(
    teacher: &dyn Backend,
    synthesizer: &dyn Backend,
    trajectories: &[Arc<Trajectory>],
    memory: &dyn MemorySource,
    config: &DatagenConfig,
) -> Result<DatagenOutput, DatagenError> {
    let mut stats = DatagenStats::default();
    let curated = curate_all(teacher, trajectories, memory, config);
    stats.steps_attempted = curated.len();
    let mut ok = Vec::new();
    for r in curated {
        match r {
            Ok(s) => ok.push(s),
            Err(e) => {
                log::debug!("curation failed: {e}");
                *stats
                    .curate_failures
                    .entry(e.code().to_string())
                    .or_insert(0) += 1;
            }
        }
    }
    stats.curated = ok.len();
    let split = filter_and_split(ok);
    stats.dropped_incorrect = split.dropped;
    stats.tool_correct = split.tool_correct.len();
    stats.notool_correct = split.notool_correct.len();
    stats.distance_buckets_before = distance_histogram(&split.tool_correct);

    let rebalanced = rebalance_recency(&split.tool_correct, config.recency, config.seed)?;
    stats.distance_buckets_after = distance_histogram(&rebalanced);
    let balanced = balance_tool_nontool(
        &rebalanced,
        &split.notool_correct,
        config.seed.wrapping_add(1),
    )?;
    stats.final_tool = balanced.iter().filter(|s| s.used_retrieval()).count();
    stats.final_notool = balanced.len() - stats.final_tool;

    let mut thinks: HashMap<(String, u32), String> = HashMap::new();
    let mut samples = Vec::with_capacity(balanced.len());
    for s in &balanced {
        let key = s.key();
        if !thinks.contains_key(&key) {
            let think = synthesize_with_retry(synthesizer, s)?;
            stats.synthesis_calls += 1;
            thinks.insert(key.clone(), think);
        }
        let mem = memory
            .memory_for(&s.trajectory, s.step as usize)
            .map_err(|e| DatagenError::Memory(e.to_string()))?;
        samples.push(format_sft(s, &thinks[&key], &render_memory(&mem)));
    }
    Ok(DatagenOutput { samples, stats })
}

fn synthesize_with_retry(
    synth: &dyn Backend,
    sample: &CuratedSample,
) -> Result<String, DatagenError> {
    match synthesize_reasoning(synth, sample) {
        Err(
            SynthesisError::EmptySynthesis
            | SynthesisError::TaggedSynthesis
            | SynthesisError::Backend(_),
        ) => synthesize_reasoning(synth, sample),
        other => other,
    }
    .map_err(|source| DatagenError::Synthesis {
        trajectory_id: sample.trajectory_id().to_string(),
        step: sample.step,
        source,
    })
}
