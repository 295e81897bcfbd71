//! Input-context length per step under different history representations.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{ChatMessage, ImageRef, MessageBuilder, Part, Role};
use crate::memory::{CacheError, MemorySource};
use crate::planner::{
    initial_messages, initial_messages_rendered, retrieval_message, TranscriptLine, SYSTEM_PROMPT,
};
use crate::trajectory::Trajectory;

const NO_HISTORY: &str = "(no prior steps)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "None")]
    None,
    #[serde(rename = "+A")]
    Actions,
    #[serde(rename = "+5O")]
    RecentObservations,
    #[serde(rename = "+AO")]
    AllObservations,
    #[serde(rename = "+SA")]
    Summaries,
    #[serde(rename = "+PAL")]
    SummariesWithLookback,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::None,
        Strategy::Actions,
        Strategy::RecentObservations,
        Strategy::AllObservations,
        Strategy::Summaries,
        Strategy::SummariesWithLookback,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "None",
            Strategy::Actions => "+A",
            Strategy::RecentObservations => "+5O",
            Strategy::AllObservations => "+AO",
            Strategy::Summaries => "+SA",
            Strategy::SummariesWithLookback => "+PAL",
        }
    }

    pub fn needs_memory(self) -> bool {
        matches!(self, Strategy::Summaries | Strategy::SummariesWithLookback)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase();
        Strategy::ALL
            .into_iter()
            .find(|st| {
                st.as_str().to_ascii_uppercase() == norm
                    || st.as_str().trim_start_matches('+').to_ascii_uppercase() == norm
            })
            .ok_or_else(|| {
                format!("unknown strategy {s:?}; expected one of None, +A, +5O, +AO, +SA, +PAL")
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageCost {
    Flat {
        tokens: u64,
    },
    /// `max(min_tokens, ceil(width * height / pixels_per_token))`.
    Area {
        pixels_per_token: f64,
        min_tokens: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub image: ImageCost,
    pub chars_per_token: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            image: ImageCost::Flat { tokens: 1400 },
            chars_per_token: 4,
        }
    }
}

impl CostModel {
    pub fn text_tokens(&self, s: &str) -> u64 {
        let chars = s.chars().count() as u64;
        chars.div_ceil(self.chars_per_token.max(1) as u64)
    }

    pub fn image_tokens(&self, width: u32, height: u32) -> u64 {
        match self.image {
            ImageCost::Flat { tokens } => tokens,
            ImageCost::Area {
                pixels_per_token,
                min_tokens,
            } => {
                let t = ((width as f64 * height as f64) / pixels_per_token).ceil() as u64;
                t.max(min_tokens)
            }
        }
    }

    /// Tokens of a message list. Image sizes are looked up in `dims`; unknown images count as 0x0.
    pub fn messages_tokens(
        &self,
        messages: &[ChatMessage],
        dims: &HashMap<&ImageRef, (u32, u32)>,
    ) -> (u64, usize) {
        let mut tokens = 0;
        let mut images = 0;
        for part in messages.iter().flat_map(|m| &m.parts) {
            match part {
                Part::Text { text } => tokens += self.text_tokens(text),
                Part::Image { image } => {
                    let (w, h) = dims.get(image).copied().unwrap_or((0, 0));
                    tokens += self.image_tokens(w, h);
                    images += 1;
                }
            }
        }
        (tokens, images)
    }
}

/// Retrievals assumed for the look-back strategy.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum RetrievalTrace {
    #[default]
    Empty,
    /// Expected retrievals per step that has history, each of the immediately preceding screenshot.
    Rate(f64),
    /// Retrieved step indices keyed by (trajectory id, step).
    Observed(BTreeMap<(String, u32), Vec<u32>>),
}

impl RetrievalTrace {
    pub fn from_transcripts(lines: &[TranscriptLine]) -> Self {
        let mut map: BTreeMap<(String, u32), Vec<u32>> = BTreeMap::new();
        for l in lines {
            if let Some(j) = l.call.retrieve_executed {
                map.entry((l.trajectory_id.clone(), l.step))
                    .or_default()
                    .push(j);
            }
        }
        RetrievalTrace::Observed(map)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TokenError {
    #[error("strategy {0} needs a memory cache")]
    NoMemorySource(Strategy),
    #[error(transparent)]
    Memory(#[from] CacheError),
}

impl TokenError {
    pub fn code(&self) -> &'static str {
        match self {
            TokenError::NoMemorySource(_) => "missing_memory_cache",
            TokenError::Memory(CacheError::MissingMemoryCache { .. }) => "missing_memory_cache",
            TokenError::Memory(_) => "memory_cache",
        }
    }
}

fn with_past_images(traj: &Trajectory, i: usize, from: usize) -> Vec<ChatMessage> {
    let current = &traj.observations[i];
    if from == i {
        return initial_messages_rendered(&traj.goal, NO_HISTORY, current);
    }
    let mut b = MessageBuilder::new(Role::User).text(format!(
        "Task goal: {}\n\nMemory of previous steps:\nScreenshots of steps {} to {} follow.",
        traj.goal.as_str(),
        from,
        i - 1
    ));
    for obs in &traj.observations[from..i] {
        b = b
            .text(format!("Screenshot of step {}:", obs.step_index))
            .image(obs.image.clone());
    }
    let user = b
        .text(format!(
            "\n\nCurrent screenshot (step {}):",
            current.step_index
        ))
        .image(current.image.clone())
        .build();
    vec![ChatMessage::system(SYSTEM_PROMPT), user]
}

/// The input message list at step `i` of `traj` under `strategy`. With no history
/// every strategy yields the same list.
pub fn context_messages(
    traj: &Trajectory,
    i: usize,
    strategy: Strategy,
    memory: Option<&dyn MemorySource>,
    retrieved: &[u32],
) -> Result<Vec<ChatMessage>, TokenError> {
    let current = &traj.observations[i];
    let msgs = match strategy {
        Strategy::None => initial_messages_rendered(&traj.goal, NO_HISTORY, current),
        Strategy::Actions => {
            let history = if i == 0 {
                NO_HISTORY.to_string()
            } else {
                traj.actions[..i]
                    .iter()
                    .enumerate()
                    .map(|(k, a)| format!("Step {k}: {}", a.describe()))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            initial_messages_rendered(&traj.goal, &history, current)
        }
        Strategy::RecentObservations => with_past_images(traj, i, i.saturating_sub(5)),
        Strategy::AllObservations => with_past_images(traj, i, 0),
        Strategy::Summaries | Strategy::SummariesWithLookback => {
            let source = memory.ok_or(TokenError::NoMemorySource(strategy))?;
            let mem = source.memory_for(traj, i)?;
            let mut msgs = initial_messages(&traj.goal, &mem, current);
            if strategy == Strategy::SummariesWithLookback {
                msgs.extend(
                    retrieved
                        .iter()
                        .filter(|&&j| (j as usize) < i)
                        .map(|&j| retrieval_message(&traj.observations[j as usize])),
                );
            }
            msgs
        }
    };
    Ok(msgs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTokens {
    pub step: u32,
    pub tokens: f64,
    pub images: f64,
}

/// Per-step input length of one trajectory.
pub fn trajectory_tokens(
    traj: &Trajectory,
    strategy: Strategy,
    cost: &CostModel,
    memory: Option<&dyn MemorySource>,
    trace: &RetrievalTrace,
) -> Result<Vec<StepTokens>, TokenError> {
    let dims: HashMap<&ImageRef, (u32, u32)> = traj
        .observations
        .iter()
        .map(|o| (&o.image, (o.width, o.height)))
        .collect();
    (0..traj.len())
        .map(|i| {
            let lookback = strategy == Strategy::SummariesWithLookback;
            let observed: Vec<u32> = match trace {
                RetrievalTrace::Observed(map) if lookback => map
                    .get(&(traj.id.clone(), i as u32))
                    .cloned()
                    .unwrap_or_default(),
                _ => Vec::new(),
            };
            let msgs = context_messages(traj, i, strategy, memory, &observed)?;
            let (tokens, images) = cost.messages_tokens(&msgs, &dims);
            let mut tokens_f = tokens as f64;
            let mut images_f = images as f64;
            if let (RetrievalTrace::Rate(rate), true, true) = (trace, lookback, i > 0) {
                let extra = retrieval_message(&traj.observations[i - 1]);
                let (t, n) = cost.messages_tokens(std::slice::from_ref(&extra), &dims);
                tokens_f += rate * t as f64;
                images_f += rate * n as f64;
            }
            Ok(StepTokens {
                step: i as u32,
                tokens: tokens_f,
                images: images_f,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBudgetReport {
    pub strategy: Strategy,
    pub trajectories: usize,
    pub steps: usize,
    /// Mean input tokens per step over all steps of all trajectories.
    pub mean_tokens: f64,
    pub mean_images: f64,
    pub cost_model: CostModel,
}

pub fn token_budget(
    trajectories: &[Arc<Trajectory>],
    strategy: Strategy,
    cost: &CostModel,
    memory: Option<&dyn MemorySource>,
    trace: &RetrievalTrace,
) -> Result<TokenBudgetReport, TokenError> {
    let mut steps = 0usize;
    let mut total = 0.0;
    let mut images = 0.0;
    for t in trajectories {
        for s in trajectory_tokens(t, strategy, cost, memory, trace)? {
            steps += 1;
            total += s.tokens;
            images += s.images;
        }
    }
    let mean = |x: f64| if steps == 0 { 0.0 } else { x / steps as f64 };
    Ok(TokenBudgetReport {
        strategy,
        trajectories: trajectories.len(),
        steps,
        mean_tokens: mean(total),
        mean_images: mean(images),
        cost_model: *cost,
    })
}

pub fn reports_table(reports: &[TokenBudgetReport]) -> String {
    let mut out = format!(
        "{:<8} {:>8} {:>12} {:>8}\n",
        "strategy", "steps", "mean tokens", "images"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<8} {:>8} {:>12.1} {:>8.2}\n",
            r.strategy.as_str(),
            r.steps,
            r.mean_tokens,
            r.mean_images
        ));
    }
    out
}
