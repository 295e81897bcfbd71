//! Step-level benchmark evaluation: type match (Type), grounding (GR) and
//! step success (SR), plus context-token accounting and retrieval statistics.

pub mod retrieval;
pub mod tokens;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{Action, ActionKind};
use crate::backend::Backend;
use crate::matching::{self, point_hits, DEFAULT_GROUNDING_THRESHOLD};
use crate::memory::{Goal, MemorySource, Observation};
use crate::planner::{run_steps, system_prompt_hash, PlanError, PlannerConfig, StepRecord};
use crate::trajectory::{BBox, Trajectory};

pub use retrieval::{retrieval_stats, RetrievalStats};
pub use tokens::{token_budget, CostModel, Strategy, TokenBudgetReport};

/// One benchmark step: predict action `step` of `trajectory` from its ground-truth prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTask {
    pub trajectory: Arc<Trajectory>,
    pub step: usize,
}

impl StepTask {
    pub fn trajectory_id(&self) -> &str {
        &self.trajectory.id
    }

    pub fn goal(&self) -> &Goal {
        &self.trajectory.goal
    }

    pub fn current(&self) -> &Observation {
        &self.trajectory.observations[self.step]
    }

    pub fn history(&self) -> &[Observation] {
        &self.trajectory.observations[..self.step]
    }

    pub fn gt_action(&self) -> &Action {
        &self.trajectory.actions[self.step]
    }

    pub fn gt_bbox(&self) -> Option<&BBox> {
        self.trajectory.bboxes[self.step].as_ref()
    }
}

/// All steps of the given trajectories, in file order.
pub fn step_tasks(trajectories: &[Arc<Trajectory>]) -> Vec<StepTask> {
    trajectories
        .iter()
        .flat_map(|t| {
            (0..t.len()).map(move |step| StepTask {
                trajectory: Arc::clone(t),
                step,
            })
        })
        .collect()
}

pub fn match_type(pred: &Action, gt: &Action) -> bool {
    matching::match_type(pred, gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grounding {
    Hit,
    Miss,
    /// Ground truth is not a point action; excluded from the GR denominator.
    NotApplicable,
}

pub fn match_grounding(pred: &Action, task: &StepTask, threshold: f64) -> Grounding {
    let Some(gt_point) = task.gt_action().point() else {
        return Grounding::NotApplicable;
    };
    match pred.point() {
        Some(p) if point_hits(&p, &gt_point, task.gt_bbox(), threshold) => Grounding::Hit,
        _ => Grounding::Miss,
    }
}

pub fn match_step_success(pred: &Action, task: &StepTask, threshold: f64) -> bool {
    matching::matches_ground_truth(pred, task.gt_action(), task.gt_bbox(), threshold)
}

/// Scores of one step. A missing prediction (planner failure) scores wrong everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub trajectory_id: String,
    pub step: u32,
    pub gt_kind: ActionKind,
    pub pred_kind: Option<ActionKind>,
    pub type_match: bool,
    pub grounding: Grounding,
    pub success: bool,
    pub error: Option<String>,
}

pub fn score_step(pred: Result<&Action, &PlanError>, task: &StepTask, threshold: f64) -> StepScore {
    let gt = task.gt_action();
    let base = StepScore {
        trajectory_id: task.trajectory_id().to_string(),
        step: task.step as u32,
        gt_kind: gt.kind(),
        pred_kind: None,
        type_match: false,
        grounding: if gt.kind().is_point() {
            Grounding::Miss
        } else {
            Grounding::NotApplicable
        },
        success: false,
        error: None,
    };
    match pred {
        Ok(a) => StepScore {
            pred_kind: Some(a.kind()),
            type_match: match_type(a, gt),
            grounding: match_grounding(a, task, threshold),
            success: match_step_success(a, task, threshold),
            ..base
        },
        Err(e) => StepScore {
            error: Some(e.code().to_string()),
            ..base
        },
    }
}

/// `100 * num / den` rounded half-up to one decimal, in exact integer arithmetic.
pub fn percent_1dp(num: usize, den: usize) -> f64 {
    assert!(den > 0, "percentage of an empty denominator");
    let (num, den) = (num as u128, den as u128);
    let tenths = (2 * 1000 * num + den) / (2 * den);
    tenths as f64 / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub benchmark: String,
    pub sample_count: usize,
    pub type_match_rate: f64,
    /// `None` when the benchmark has no point-action steps.
    pub grounding_rate: Option<f64>,
    pub step_success_rate: f64,
    pub type_matches: usize,
    pub grounding_hits: usize,
    pub grounding_total: usize,
    pub step_successes: usize,
    pub failures: BTreeMap<String, usize>,
    /// Ground-truth kind -> predicted kind (or `error`) -> count.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub config_hash: String,
}

pub fn aggregate(benchmark: &str, scores: &[StepScore], config_hash: &str) -> MetricsReport {
    let n = scores.len();
    let type_matches = scores.iter().filter(|s| s.type_match).count();
    let step_successes = scores.iter().filter(|s| s.success).count();
    let grounding_total = scores
        .iter()
        .filter(|s| s.grounding != Grounding::NotApplicable)
        .count();
    let grounding_hits = scores
        .iter()
        .filter(|s| s.grounding == Grounding::Hit)
        .count();
    let mut failures = BTreeMap::new();
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for s in scores {
        if let Some(e) = &s.error {
            *failures.entry(e.clone()).or_insert(0) += 1;
        }
        let pred = s
            .pred_kind
            .map(|k| k.as_str().to_string())
            .unwrap_or_else(|| "error".into());
        *confusion
            .entry(s.gt_kind.as_str().to_string())
            .or_default()
            .entry(pred)
            .or_insert(0) += 1;
    }
    let rate = |k| if n == 0 { 0.0 } else { percent_1dp(k, n) };
    MetricsReport {
        benchmark: benchmark.to_string(),
        sample_count: n,
        type_match_rate: rate(type_matches),
        grounding_rate: (grounding_total > 0).then(|| percent_1dp(grounding_hits, grounding_total)),
        step_success_rate: rate(step_successes),
        type_matches,
        grounding_hits,
        grounding_total,
        step_successes,
        failures,
        confusion,
        config_hash: config_hash.to_string(),
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let gr = self
            .grounding_rate
            .map(|g| format!("{g:.1}"))
            .unwrap_or_else(|| "n/a".into());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>7} {:>7}",
            "benchmark", "n", "Type", "GR", "SR"
        );
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7.1} {:>7} {:>7.1}",
            self.benchmark, self.sample_count, self.type_match_rate, gr, self.step_success_rate
        );
        if !self.failures.is_empty() {
            let _ = writeln!(out, "failures:");
            for (code, n) in &self.failures {
                let _ = writeln!(out, "  {code}: {n}");
            }
        }
        let _ = writeln!(out, "config: {}", self.config_hash);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub planner: PlannerConfig,
    pub grounding_threshold: f64,
    pub seed: u64,
    /// Worker count; does not affect results.
    #[serde(skip)]
    pub parallel: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            planner: PlannerConfig::default(),
            grounding_threshold: DEFAULT_GROUNDING_THRESHOLD,
            seed: 0,
            parallel: 1,
        }
    }
}

impl EvalConfig {
    /// Digest of everything that can change scores: system prompt, thresholds, budget, seed.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::json!({
            "system_prompt_sha256": system_prompt_hash(),
            "grounding_threshold": self.grounding_threshold,
            "max_retrievals": self.planner.max_retrievals,
            "seed": self.seed,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub retrieval: RetrievalStats,
    pub scores: Vec<StepScore>,
    pub records: Vec<StepRecord>,
}

/// Plans every task under teacher forcing and aggregates the metrics. Never fails:
/// planner and backend errors are scored as wrong predictions.
pub fn evaluate(
    backend: &dyn Backend,
    benchmark: &str,
    tasks: &[StepTask],
    memory: &dyn MemorySource,
    config: &EvalConfig,
) -> EvalOutput {
    let items: Vec<_> = tasks
        .iter()
        .map(|t| (Arc::clone(&t.trajectory), t.step))
        .collect();
    let records = run_steps(backend, &items, memory, &config.planner, config.parallel);
    let scores: Vec<StepScore> = tasks
        .iter()
        .zip(&records)
        .map(|(task, rec)| {
            let pred = rec.result.as_ref().map(|p| p.outcome.action());
            score_step(pred, task, config.grounding_threshold)
        })
        .collect();
    let report = aggregate(benchmark, &scores, &config.config_hash());
    let lines: Vec<_> = records
        .iter()
        .flat_map(StepRecord::transcript_lines)
        .collect();
    let retrieval = retrieval_stats(&lines, records.len());
    EvalOutput {
        report,
        retrieval,
        scores,
        records,
    }
}
