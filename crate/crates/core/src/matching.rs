//! Action matching against ground truth, shared by data filtering and evaluation.

use crate::action::{Action, Point};
use crate::trajectory::BBox;

/// Normalized distance under which a point counts as hitting a ground-truth point without a bbox.
pub const DEFAULT_GROUNDING_THRESHOLD: f64 = 0.14;

fn normalize_text(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Whether `pred` lands on the ground-truth target: inside `bbox` when given, else within `threshold`.
pub fn point_hits(pred: &Point, gt: &Point, bbox: Option<&BBox>, threshold: f64) -> bool {
    match bbox {
        Some(b) => b.contains(pred),
        None => pred.distance(gt) <= threshold,
    }
}

/// Kind equality, ignoring parameters.
pub fn match_type(pred: &Action, gt: &Action) -> bool {
    pred.kind() == gt.kind()
}

/// Full match: equal kinds and matching parameters. Retrieve never matches.
pub fn matches_ground_truth(
    pred: &Action,
    gt: &Action,
    bbox: Option<&BBox>,
    threshold: f64,
) -> bool {
    if pred.is_retrieve() || gt.is_retrieve() || !match_type(pred, gt) {
        return false;
    }
    match (pred, gt) {
        (Action::Type { text: a }, Action::Type { text: b }) => {
            normalize_text(a) == normalize_text(b)
        }
        (Action::Scroll { direction: a, .. }, Action::Scroll { direction: b, .. }) => a == b,
        (Action::OpenApp { name: a }, Action::OpenApp { name: b }) => {
            normalize_text(a) == normalize_text(b)
        }
        (Action::Hotkey { keys: a }, Action::Hotkey { keys: b }) => {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(x, y)| normalize_text(x) == normalize_text(y))
        }
        (Action::Drag { from: pf, to: pt }, Action::Drag { from: gf, to: gt }) => {
            pf.distance(gf) <= threshold && pt.distance(gt) <= threshold
        }
        _ => match (pred.point(), gt.point()) {
            (Some(p), Some(g)) => point_hits(&p, &g, bbox, threshold),
            _ => true,
        },
    }
}
