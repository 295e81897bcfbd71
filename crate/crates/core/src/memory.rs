//! Dual-level summary memory: observation captions plus action-outcome
//! validations, and the JSONL cache that stores them per trajectory step.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::backend::{Backend, BackendError, ChatMessage, ImageRef, MessageBuilder, Role};
use crate::trajectory::Trajectory;

pub const EMPTY_MEMORY: &str = "(no prior steps)";
pub const TRUNCATION_MARKER: &str = " [truncated]";
pub const DEFAULT_FIELD_CAP: usize = 512;

pub const CAPTIONER_SYSTEM_PROMPT: &str = "You describe mobile and web app screenshots for a GUI agent. \
Answer in at most three sentences. Report only what matters for the task goal: visible on-screen text, \
widget labels, displayed messages, and enabled/disabled or selected states. Do not suggest actions.";

pub const VALIDATOR_SYSTEM_PROMPT: &str = "You verify the effect of one GUI action. You are given the action, \
the screenshot before it and the screenshot after it. Answer with one sentence stating what the action \
intended to do, followed by one sentence judging whether the expected effect occurred (success or failure) \
and what changed on screen.";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub step_index: u32,
    pub image: ImageRef,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Goal(String);

#[derive(Debug, Clone, PartialEq, Error)]
#[error("goal text is empty")]
pub struct EmptyGoal;

impl Goal {
    pub fn new(text: impl Into<String>) -> Result<Self, EmptyGoal> {
        let text = text.into();
        if text.trim().is_empty() {
            Err(EmptyGoal)
        } else {
            Ok(Goal(text))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Goal {
    type Error = EmptyGoal;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Goal::new(s)
    }
}

impl From<Goal> for String {
    fn from(g: Goal) -> String {
        g.0
    }
}

/// Summary of one past step: the screen it started from and what its action did.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub step: u32,
    pub observation_caption: String,
    pub action_description: String,
    pub action_outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("cannot append step {got}: expected step {expected}")]
    GapOrDuplicateStep { expected: u32, got: u32 },
    #[error("captioner returned empty output twice for step {step}")]
    EmptyCaption { step: u32 },
    #[error("validator returned empty output twice for step {step}")]
    EmptyOutcome { step: u32 },
    #[error("post-action observation must follow the pre-action one (got steps {pre} -> {post})")]
    StepOrderViolation { pre: u32, post: u32 },
    #[error("retrieve is a tool call and has no on-screen outcome")]
    RetrieveNotValidatable,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Ordered summaries for steps `0..i`. Append-only; appending returns a new value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompressedMemory {
    entries: Vec<MemoryEntry>,
}

impl CompressedMemory {
    pub fn new() -> Self {
        CompressedMemory::default()
    }

    pub fn from_entries(entries: Vec<MemoryEntry>) -> Result<Self, MemoryError> {
        entries
            .into_iter()
            .try_fold(CompressedMemory::new(), |m, e| m.append_step(e))
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_step(&self) -> u32 {
        self.entries.len() as u32
    }

    pub fn append_step(&self, entry: MemoryEntry) -> Result<CompressedMemory, MemoryError> {
        let expected = self.next_step();
        if entry.step != expected {
            return Err(MemoryError::GapOrDuplicateStep {
                expected,
                got: entry.step,
            });
        }
        let mut entries = self.entries.clone();
        entries.push(entry);
        Ok(CompressedMemory { entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub caption_cap: usize,
    pub outcome_cap: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            caption_cap: DEFAULT_FIELD_CAP,
            outcome_cap: DEFAULT_FIELD_CAP,
        }
    }
}

fn truncate_chars(text: &str, cap: usize) -> std::borrow::Cow<'_, str> {
    match text.char_indices().nth(cap) {
        None => text.into(),
        Some((cut, _)) => format!("{}{TRUNCATION_MARKER}", &text[..cut]).into(),
    }
}

pub fn render_memory(mem: &CompressedMemory) -> String {
    render_memory_with(mem, &RenderOptions::default())
}

/// One block per entry: `Step k:` header, caption line, action and outcome line.
pub fn render_memory_with(mem: &CompressedMemory, opts: &RenderOptions) -> String {
    if mem.is_empty() {
        return EMPTY_MEMORY.to_string();
    }
    let mut out = String::new();
    for (i, e) in mem.entries.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!(
            "Step {}:\n  Screen: {}\n  Action: {} | Outcome: {}",
            e.step,
            truncate_chars(&e.observation_caption, opts.caption_cap),
            e.action_description,
            truncate_chars(&e.action_outcome, opts.outcome_cap),
        ));
    }
    out
}

/// Messages sent to the observation captioner.
pub fn captioner_messages(obs: &Observation, goal: &Goal) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(CAPTIONER_SYSTEM_PROMPT),
        MessageBuilder::new(Role::User)
            .text(format!(
                "Task goal: {}\nDescribe the screenshot of step {} with respect to this goal.",
                goal.as_str(),
                obs.step_index
            ))
            .image(obs.image.clone())
            .build(),
    ]
}

/// Messages sent to the action validator.
pub fn validator_messages(
    action: &Action,
    pre: &Observation,
    post: &Observation,
    goal: &Goal,
) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(VALIDATOR_SYSTEM_PROMPT),
        MessageBuilder::new(Role::User)
            .text(format!(
                "Task goal: {}\nAction taken at step {}: {}\nScreenshot before the action:",
                goal.as_str(),
                pre.step_index,
                action.describe()
            ))
            .image(pre.image.clone())
            .text("Screenshot after the action:")
            .image(post.image.clone())
            .build(),
    ]
}

/// Calls the backend, retrying once when the output is blank.
fn complete_nonempty(
    backend: &dyn Backend,
    messages: &[ChatMessage],
) -> Result<Option<String>, BackendError> {
    for _ in 0..2 {
        let out = backend.complete(messages)?;
        if !out.trim().is_empty() {
            return Ok(Some(out));
        }
    }
    Ok(None)
}

pub fn caption_observation(
    backend: &dyn Backend,
    obs: &Observation,
    goal: &Goal,
) -> Result<String, MemoryError> {
    complete_nonempty(backend, &captioner_messages(obs, goal))?.ok_or(MemoryError::EmptyCaption {
        step: obs.step_index,
    })
}

pub fn validate_action(
    backend: &dyn Backend,
    action: &Action,
    pre: &Observation,
    post: &Observation,
    goal: &Goal,
) -> Result<String, MemoryError> {
    if post.step_index != pre.step_index + 1 {
        return Err(MemoryError::StepOrderViolation {
            pre: pre.step_index,
            post: post.step_index,
        });
    }
    if action.is_retrieve() {
        return Err(MemoryError::RetrieveNotValidatable);
    }
    complete_nonempty(backend, &validator_messages(action, pre, post, goal))?.ok_or(
        MemoryError::EmptyOutcome {
            step: pre.step_index,
        },
    )
}

/// Summarizes step `k` of a trajectory: caption of observation `k` plus validation of action `k`.
pub fn summarize_step(
    backend: &dyn Backend,
    traj: &Trajectory,
    k: usize,
) -> Result<MemoryEntry, MemoryError> {
    let pre = &traj.observations[k];
    let post = &traj.observations[k + 1];
    let action = &traj.actions[k];
    let caption = caption_observation(backend, pre, &traj.goal)?;
    let outcome = validate_action(backend, action, pre, post, &traj.goal)?;
    Ok(MemoryEntry {
        step: k as u32,
        observation_caption: caption,
        action_description: action.describe(),
        action_outcome: outcome,
    })
}

/// Optional post-pass reading a success judgment out of free-text validator output.
pub fn extract_success(outcome: &str) -> Option<bool> {
    let lower = outcome.to_lowercase();
    let failed = [
        "fail",
        "did not",
        "didn't",
        "unsuccessful",
        "no change",
        "not changed",
    ]
    .iter()
    .any(|w| lower.contains(w));
    let succeeded = [
        "success",
        "succeeded",
        "displayed",
        "opened",
        "is now",
        "appears",
        "shown",
    ]
    .iter()
    .any(|w| lower.contains(w));
    match (succeeded, failed) {
        (_, true) => Some(false),
        (true, false) => Some(true),
        (false, false) => None,
    }
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupted cache line: {message}")]
    Corrupted {
        path: String,
        line: usize,
        message: String,
    },
    #[error("memory cache has no entry for trajectory {trajectory_id} step {step}")]
    MissingMemoryCache { trajectory_id: String, step: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub trajectory_id: String,
    #[serde(flatten)]
    pub entry: MemoryEntry,
}

/// Source of compressed memory for a trajectory prefix.
pub trait MemorySource: Send + Sync {
    /// Memory covering steps `0..upto` of `traj`.
    fn memory_for(&self, traj: &Trajectory, upto: usize) -> Result<CompressedMemory, CacheError>;
}

/// Summaries keyed by (trajectory id, step), backed by a JSONL file.
#[derive(Debug, Default)]
pub struct MemoryCache {
    entries: BTreeMap<(String, u32), MemoryEntry>,
    path: Option<PathBuf>,
}

impl MemoryCache {
    pub fn in_memory() -> Self {
        MemoryCache::default()
    }

    /// Opens a cache file; a missing file is an empty cache.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let mut cache = MemoryCache {
            entries: BTreeMap::new(),
            path: Some(path.to_path_buf()),
        };
        if !path.exists() {
            return Ok(cache);
        }
        cache.read_lines(path)?;
        Ok(cache)
    }

    /// Opens an existing cache file; a missing file is an error.
    pub fn load(path: &Path) -> Result<Self, CacheError> {
        if !path.exists() {
            return Err(CacheError::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "memory cache not found"),
            });
        }
        MemoryCache::open(path)
    }

    fn read_lines(&mut self, path: &Path) -> Result<(), CacheError> {
        let io = |source| CacheError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = fs::File::open(path).map_err(io)?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CacheRecord =
                serde_json::from_str(&line).map_err(|e| CacheError::Corrupted {
                    path: path.display().to_string(),
                    line: n + 1,
                    message: e.to_string(),
                })?;
            self.entries
                .insert((record.trajectory_id, record.entry.step), record.entry);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, trajectory_id: &str, step: u32) -> bool {
        self.entries
            .contains_key(&(trajectory_id.to_string(), step))
    }

    pub fn get(&self, trajectory_id: &str, step: u32) -> Option<&MemoryEntry> {
        self.entries.get(&(trajectory_id.to_string(), step))
    }

    pub fn insert(&mut self, trajectory_id: &str, entry: MemoryEntry) {
        self.entries
            .insert((trajectory_id.to_string(), entry.step), entry);
    }

    /// Appends records to the backing file (if any) and to the in-memory map.
    pub fn append(&mut self, records: Vec<CacheRecord>) -> Result<(), CacheError> {
        if let Some(path) = &self.path {
            let io = |source| CacheError::Io {
                path: path.display().to_string(),
                source,
            };
            let mut file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io)?;
            for r in &records {
                let line = serde_json::to_string(r).expect("cache record serializes");
                writeln!(file, "{line}").map_err(io)?;
            }
        }
        for r in records {
            self.insert(&r.trajectory_id, r.entry);
        }
        Ok(())
    }
}

impl MemorySource for MemoryCache {
    fn memory_for(&self, traj: &Trajectory, upto: usize) -> Result<CompressedMemory, CacheError> {
        let mut mem = CompressedMemory::new();
        for k in 0..upto as u32 {
            let entry = self
                .get(&traj.id, k)
                .ok_or_else(|| CacheError::MissingMemoryCache {
                    trajectory_id: traj.id.clone(),
                    step: k,
                })?;
            mem = mem
                .append_step(entry.clone())
                .expect("steps are consecutive");
        }
        Ok(mem)
    }
}

/// Summarizes on demand through a backend, memoizing results.
pub struct OnlineSummarizer<B> {
    backend: B,
    cache: Mutex<MemoryCache>,
}

impl<B: Backend> OnlineSummarizer<B> {
    pub fn new(backend: B) -> Self {
        OnlineSummarizer {
            backend,
            cache: Mutex::new(MemoryCache::in_memory()),
        }
    }
}

impl<B: Backend> MemorySource for OnlineSummarizer<B> {
    fn memory_for(&self, traj: &Trajectory, upto: usize) -> Result<CompressedMemory, CacheError> {
        for k in 0..upto {
            if self
                .cache
                .lock()
                .expect("cache lock")
                .contains(&traj.id, k as u32)
            {
                continue;
            }
            // A failed summary leaves the step missing.
            match summarize_step(&self.backend, traj, k) {
                Ok(entry) => self
                    .cache
                    .lock()
                    .expect("cache lock")
                    .insert(&traj.id, entry),
                Err(e) => {
                    log::warn!("summarizing {} step {k} failed: {e}", traj.id);
                    return Err(CacheError::MissingMemoryCache {
                        trajectory_id: traj.id.clone(),
                        step: k as u32,
                    });
                }
            }
        }
        self.cache
            .lock()
            .expect("cache lock")
            .memory_for(traj, upto)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Point;
    use crate::backend::{Part, ScriptedBackend};
    use std::collections::HashSet;

    fn entry(step: u32) -> MemoryEntry {
        MemoryEntry {
            step,
            observation_caption: format!("screen {step}"),
            action_description: "press back".into(),
            action_outcome: "went back".into(),
        }
    }

    fn obs(step: u32) -> Observation {
        Observation {
            step_index: step,
            image: ImageRef::new(format!("/shots/{step}.png")),
            width: 100,
            height: 200,
        }
    }

    #[test]
    fn append_rules() {
        let empty = CompressedMemory::new();
        let one = empty.append_step(entry(0)).unwrap();
        assert_eq!(one.len(), 1);
        assert!(empty.is_empty());
        assert_eq!(
            one.append_step(entry(2)),
            Err(MemoryError::GapOrDuplicateStep {
                expected: 1,
                got: 2
            })
        );
        assert!(one.append_step(entry(0)).is_err());
    }

    #[test]
    fn render_empty_and_numbered() {
        assert_eq!(render_memory(&CompressedMemory::new()), "(no prior steps)");
        let one = CompressedMemory::from_entries(vec![entry(0)]).unwrap();
        assert_eq!(render_memory(&one).matches("Step 0:").count(), 1);
        let ten = CompressedMemory::from_entries((0..10).map(entry).collect()).unwrap();
        let rendered = render_memory(&ten);
        let headers = rendered
            .lines()
            .filter(|l| l.starts_with("Step ") && l.ends_with(':'))
            .count();
        assert_eq!(headers, 10);
    }

    #[test]
    fn render_truncates_long_fields() {
        let mut e = entry(0);
        e.observation_caption = "x".repeat(600);
        let mem = CompressedMemory::from_entries(vec![e]).unwrap();
        let r = render_memory(&mem);
        assert!(r.contains(&format!("{}{TRUNCATION_MARKER}", "x".repeat(512))));
        assert!(!r.contains(&"x".repeat(513)));
    }

    #[test]
    fn render_is_injective_on_generated_memories() {
        let mut seen = HashSet::new();
        let mut rendered = HashSet::new();
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        while seen.len() < 100 {
            let n = (next() % 4) as u32;
            let entries: Vec<_> = (0..n)
                .map(|s| MemoryEntry {
                    step: s,
                    observation_caption: format!("cap{}", next() % 5),
                    action_description: format!("act{}", next() % 3),
                    action_outcome: format!("out{}", next() % 3),
                })
                .collect();
            let mem = CompressedMemory::from_entries(entries).unwrap();
            if seen.insert(mem.clone()) {
                rendered.insert(render_memory(&mem));
            }
        }
        assert_eq!(rendered.len(), 100);
    }

    #[test]
    fn caption_prompt_shape() {
        let goal = Goal::new("Find the cheapest flight").unwrap();
        let msgs = captioner_messages(&obs(3), &goal);
        let text: String = msgs
            .iter()
            .map(ChatMessage::text_content)
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(text.matches("Find the cheapest flight").count(), 1);
        let images: usize = msgs.iter().map(|m| m.images().count()).sum();
        assert_eq!(images, 1);
    }

    #[test]
    fn caption_stored_verbatim_and_empty_retried() {
        let goal = Goal::new("log in").unwrap();
        let b = ScriptedBackend::queue(["Login screen showing error: wrong password"]).unwrap();
        assert_eq!(
            caption_observation(&b, &obs(0), &goal).unwrap(),
            "Login screen showing error: wrong password"
        );
        let b = ScriptedBackend::queue(["", "  "]).unwrap();
        assert_eq!(
            caption_observation(&b, &obs(4), &goal),
            Err(MemoryError::EmptyCaption { step: 4 })
        );
        assert_eq!(b.call_count(), 2);
        let b = ScriptedBackend::queue(["", "ok"]).unwrap();
        assert_eq!(caption_observation(&b, &obs(4), &goal).unwrap(), "ok");
    }

    #[test]
    fn validator_contract() {
        let goal = Goal::new("search football").unwrap();
        let sentence = "The user typed 'football' into the search bar, and the search results for related content are displayed.";
        let b = ScriptedBackend::queue([sentence]).unwrap();
        let typed = Action::Type {
            text: "football".into(),
        };
        assert_eq!(
            validate_action(&b, &typed, &obs(1), &obs(2), &goal).unwrap(),
            sentence
        );
        assert_eq!(
            validate_action(&b, &typed, &obs(1), &obs(1), &goal),
            Err(MemoryError::StepOrderViolation { pre: 1, post: 1 })
        );
        assert_eq!(
            validate_action(&b, &Action::Retrieve { step: 0 }, &obs(1), &obs(2), &goal),
            Err(MemoryError::RetrieveNotValidatable)
        );
        let msgs = validator_messages(
            &Action::Click {
                at: Point::new(0.1, 0.2),
            },
            &obs(1),
            &obs(2),
            &goal,
        );
        let images: Vec<_> = msgs
            .iter()
            .flat_map(|m| m.parts.iter())
            .filter_map(|p| match p {
                Part::Image { image } => Some(image.as_str().to_string()),
                _ => None,
            })
            .collect();
        assert_eq!(images, vec!["/shots/1.png", "/shots/2.png"]);
    }

    #[test]
    fn success_extraction() {
        assert_eq!(
            extract_success("The user typed 'football' into the search bar, and the search results are displayed."),
            Some(true)
        );
        assert_eq!(
            extract_success("The tap did not open the menu."),
            Some(false)
        );
        assert_eq!(extract_success("Something happened."), None);
    }
}
