use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::planner::TranscriptLine;

/// How far back executed retrievals reach, and how often steps retrieve at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats {
    /// Distance `i - j` -> number of executed retrievals.
    pub histogram: BTreeMap<u32, usize>,
    pub max_distance: Option<u32>,
    pub retrievals: usize,
    pub steps: usize,
    pub steps_with_retrieval: usize,
    pub retrieval_rate: f64,
}

/// Statistics over transcript lines. `total_steps` is the number of planned steps,
/// including steps whose calls never retrieved.
pub fn retrieval_stats(lines: &[TranscriptLine], total_steps: usize) -> RetrievalStats {
    let mut histogram = BTreeMap::new();
    let mut retrieving = BTreeSet::new();
    let mut retrievals = 0;
    for line in lines {
        if let Some(j) = line.call.retrieve_executed {
            let d = line.step.saturating_sub(j);
            *histogram.entry(d).or_insert(0) += 1;
            retrievals += 1;
            retrieving.insert((line.trajectory_id.clone(), line.step));
        }
    }
    let steps = total_steps.max(retrieving.len());
    RetrievalStats {
        max_distance: histogram.keys().next_back().copied(),
        histogram,
        retrievals,
        steps,
        steps_with_retrieval: retrieving.len(),
        retrieval_rate: if steps == 0 {
            0.0
        } else {
            retrieving.len() as f64 / steps as f64
        },
    }
}

/// Number of distinct (trajectory, step) pairs in a transcript.
pub fn distinct_steps(lines: &[TranscriptLine]) -> usize {
    lines
        .iter()
        .map(|l| (l.trajectory_id.as_str(), l.step))
        .collect::<BTreeSet<_>>()
        .len()
}

impl RetrievalStats {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "steps: {}\nsteps with retrieval: {}\nretrieval rate: {:.4}\nmax distance: {}\n",
            self.steps,
            self.steps_with_retrieval,
            self.retrieval_rate,
            self.max_distance
                .map(|d| d.to_string())
                .unwrap_or_else(|| "n/a".into())
        );
        out.push_str("distance  count\n");
        for (d, n) in &self.histogram {
            out.push_str(&format!("{d:>8}  {n}\n"));
        }
        out
    }
}
