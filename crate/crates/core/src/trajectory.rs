//! Trajectory dataset files.
//!
//! One JSON object per line:
//!
//! ```json
//! {"id":"ep-1","goal":"Turn on wifi","platform":"mobile","coordinates":"normalized",
//!  "observations":[{"image":"shots/ep-1_0.png","width":1080,"height":2400}, ...],
//!  "actions":[{"action":"click","coordinate":[0.5,0.2]}, ...],
//!  "bboxes":[[0.4,0.1,0.6,0.3], null, ...]}
//! ```
//!
//! `observations` has one more entry than `actions`; action `k` moves the screen
//! from observation `k` to observation `k + 1`. With `"coordinates":"pixel"`,
//! action points and bboxes are in pixels of the observation the action was
//! taken on and are normalized at load. Relative image paths resolve against
//! the directory of the dataset file. `bboxes` is optional.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::action::{Action, Platform, Point};
use crate::backend::ImageRef;
use crate::memory::{Goal, Observation};

/// Ground-truth element box in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        0.0 <= self.x0
            && self.x0 < self.x1
            && self.x1 <= 1.0
            && 0.0 <= self.y0
            && self.y0 < self.y1
            && self.y1 <= 1.0
    }

    /// Inclusive containment.
    pub fn contains(&self, p: &Point) -> bool {
        self.x0 <= p.x && p.x <= self.x1 && self.y0 <= p.y && p.y <= self.y1
    }

    pub fn center(&self) -> Point {
        Point::new((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub goal: Goal,
    pub platform: Platform,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    /// Per-action ground-truth element boxes; same length as `actions`.
    pub bboxes: Vec<Option<BBox>>,
}

impl Trajectory {
    /// Number of actions (decision steps).
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn check(&self) -> Result<(), String> {
        if self.observations.len() != self.actions.len() + 1 {
            return Err(format!(
                "{} observations for {} actions (expected actions + 1)",
                self.observations.len(),
                self.actions.len()
            ));
        }
        if self.bboxes.len() != self.actions.len() {
            return Err("bbox list length differs from action count".into());
        }
        for (k, obs) in self.observations.iter().enumerate() {
            if obs.step_index as usize != k {
                return Err(format!(
                    "observation {k} carries step index {}",
                    obs.step_index
                ));
            }
        }
        if let Some(k) = self.actions.iter().position(Action::is_retrieve) {
            return Err(format!("step {k}: retrieve is not a ground-truth action"));
        }
        Ok(())
    }

    pub fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            id: self.id.clone(),
            goal: self.goal.as_str().to_string(),
            platform: self.platform,
            coordinates: CoordinateSpace::Normalized,
            observations: self
                .observations
                .iter()
                .map(|o| ObservationRecord {
                    image: o.image.as_str().to_string(),
                    width: o.width,
                    height: o.height,
                })
                .collect(),
            actions: self
                .actions
                .iter()
                .map(|a| {
                    serde_json::from_str(&a.to_canonical_json()).expect("canonical action json")
                })
                .collect(),
            bboxes: if self.bboxes.iter().all(Option::is_none) {
                None
            } else {
                Some(
                    self.bboxes
                        .iter()
                        .map(|b| b.map(|b| b.as_array()))
                        .collect(),
                )
            },
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("record serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateSpace {
    #[default]
    Normalized,
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: String,
    pub goal: String,
    pub platform: Platform,
    #[serde(default)]
    pub coordinates: CoordinateSpace,
    pub observations: Vec<ObservationRecord>,
    pub actions: Vec<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bboxes: Option<Vec<Option<[f64; 4]>>>,
}

/// A schema problem in one trajectory, located by step when possible.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("trajectory {trajectory_id}{}: {message}", step.map(|s| format!(" step {s}")).unwrap_or_default())]
pub struct SchemaViolation {
    pub trajectory_id: String,
    pub step: Option<usize>,
    pub message: String,
}

impl TrajectoryRecord {
    /// Converts to a [`Trajectory`], collecting every schema violation.
    pub fn into_trajectory(self, base_dir: &Path) -> Result<Trajectory, Vec<SchemaViolation>> {
        let id = self.id.clone();
        let mut violations = Vec::new();
        let mut violate = |step: Option<usize>, message: String| {
            violations.push(SchemaViolation {
                trajectory_id: id.clone(),
                step,
                message,
            })
        };
        if self.goal.trim().is_empty() {
            violate(None, "goal is empty".into());
        }
        if self.observations.len() != self.actions.len() + 1 {
            violate(
                None,
                format!(
                    "{} observations for {} actions (expected actions + 1)",
                    self.observations.len(),
                    self.actions.len()
                ),
            );
        }
        if let Some(b) = &self.bboxes {
            if b.len() != self.actions.len() {
                violate(
                    None,
                    format!("{} bboxes for {} actions", b.len(), self.actions.len()),
                );
            }
        }
        let observations: Vec<Observation> = self
            .observations
            .iter()
            .enumerate()
            .map(|(k, o)| {
                if o.width == 0 || o.height == 0 {
                    violate(Some(k), "screen dimensions must be positive".into());
                }
                let path = PathBuf::from(&o.image);
                let image = if path.is_absolute() || o.image.starts_with("data:") {
                    o.image.clone()
                } else {
                    base_dir.join(path).to_string_lossy().into_owned()
                };
                Observation {
                    step_index: k as u32,
                    image: ImageRef::new(image),
                    width: o.width.max(1),
                    height: o.height.max(1),
                }
            })
            .collect();
        let mut actions = Vec::with_capacity(self.actions.len());
        let mut bboxes = Vec::with_capacity(self.actions.len());
        for (k, raw) in self.actions.iter().enumerate() {
            let screen = observations
                .get(k)
                .map(|o| (o.width, o.height))
                .unwrap_or((1, 1));
            let decoded = match self.coordinates {
                CoordinateSpace::Normalized => Action::from_json(raw),
                CoordinateSpace::Pixel => Action::from_pixel_json(raw, screen.0, screen.1),
            };
            match decoded {
                Ok(a) if a.is_retrieve() => {
                    violate(Some(k), "retrieve is not a ground-truth action".into())
                }
                Ok(a) => {
                    let round_trip = Action::from_json_str(&a.to_canonical_json());
                    let reencoded = round_trip.as_ref().map(Action::to_canonical_json);
                    if reencoded.as_deref() != Ok(a.to_canonical_json().as_str()) {
                        violate(
                            Some(k),
                            "action does not round-trip through the canonical schema".into(),
                        );
                    }
                    actions.push(a);
                }
                Err(e) => violate(Some(k), format!("action: {e}")),
            }
            let bbox = self
                .bboxes
                .as_ref()
                .and_then(|b| b.get(k).copied().flatten())
                .map(|[x0, y0, x1, y1]| match self.coordinates {
                    CoordinateSpace::Normalized => BBox::new(x0, y0, x1, y1),
                    CoordinateSpace::Pixel => {
                        let (w, h) = (f64::from(screen.0), f64::from(screen.1));
                        BBox::new(x0 / w, y0 / h, x1 / w, y1 / h)
                    }
                });
            if let Some(b) = bbox {
                if !b.is_valid() {
                    violate(
                        Some(k),
                        format!("bbox {:?} is not a valid normalized box", b.as_array()),
                    );
                }
            }
            bboxes.push(bbox);
        }
        if !violations.is_empty() {
            return Err(violations);
        }
        let goal = Goal::new(self.goal).expect("goal checked above");
        Ok(Trajectory {
            id: self.id,
            goal,
            platform: self.platform,
            observations,
            actions,
            bboxes,
        })
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
}

/// Loads a trajectory JSONL file; fails on the first bad line.
pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, LoadError> {
    let io = |source| LoadError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| LoadError::Schema {
            path: path.display().to_string(),
            line: n + 1,
            message,
        };
        let record: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        let traj = record
            .into_trajectory(base)
            .map_err(|v| schema(v[0].to_string()))?;
        if !seen.insert(traj.id.clone()) {
            return Err(schema(format!("duplicate trajectory id `{}`", traj.id)));
        }
        out.push(traj);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(json: &str) -> TrajectoryRecord {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn pixel_coordinates_are_normalized() {
        let r = record(
            r#"{"id":"a","goal":"g","platform":"mobile","coordinates":"pixel",
            "observations":[{"image":"x.png","width":1000,"height":2000},{"image":"y.png","width":1000,"height":2000}],
            "actions":[{"action":"click","coordinate":[250,500]}],
            "bboxes":[[200,400,300,600]]}"#,
        );
        let t = r.into_trajectory(Path::new("/data")).unwrap();
        assert_eq!(
            t.actions[0],
            Action::Click {
                at: Point::new(0.25, 0.25)
            }
        );
        assert_eq!(t.bboxes[0], Some(BBox::new(0.2, 0.2, 0.3, 0.3)));
        assert_eq!(t.observations[1].image.as_str(), "/data/y.png");
    }

    #[test]
    fn collects_violations() {
        let r = record(
            r#"{"id":"b","goal":"","platform":"web",
            "observations":[{"image":"x.png","width":0,"height":2}],
            "actions":[{"action":"retrieve","step":0}]}"#,
        );
        let v = r.into_trajectory(Path::new(".")).unwrap_err();
        assert!(v.len() >= 3);
        assert!(v
            .iter()
            .any(|x| x.step == Some(0) && x.message.contains("retrieve")));
    }

    #[test]
    fn record_round_trip() {
        let r = record(
            r#"{"id":"a","goal":"g","platform":"web",
            "observations":[{"image":"/x.png","width":10,"height":20},{"image":"/y.png","width":10,"height":20}],
            "actions":[{"action":"hotkey","keys":["ctrl","c"]}]}"#,
        );
        let t = r.into_trajectory(Path::new("/")).unwrap();
        let again = t.to_record().into_trajectory(Path::new("/")).unwrap();
        assert_eq!(t, again);
        assert!(t.check().is_ok());
    }
}
