#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use lookback::action::{ActionKind, ScrollDirection};
use lookback::backend::{ImageRef, Program, Rule};
use lookback::memory::{MemoryEntry, Observation};
use lookback::{Action, Goal, MemoryCache, Platform, Point, Trajectory};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub mod oracle;

pub const SCREEN_W: u32 = 6;
pub const SCREEN_H: u32 = 12;

pub fn write_png(path: &Path, w: u32, h: u32, shade: u8) {
    let img = image::RgbImage::from_pixel(w, h, image::Rgb([shade, shade / 2, 255 - shade]));
    img.save(path).expect("write png");
}

pub fn goal_for(id: &str) -> String {
    format!("goal of {id}: reach the confirmation page")
}

/// Builds a trajectory whose screenshots are written under `dir`.
pub fn make_trajectory(
    dir: &Path,
    id: &str,
    platform: Platform,
    actions: Vec<Action>,
) -> Trajectory {
    let n = actions.len();
    let observations = (0..=n as u32)
        .map(|k| {
            let path = dir.join(format!("{id}_{k}.png"));
            write_png(&path, SCREEN_W, SCREEN_H, (k * 23 % 256) as u8);
            Observation {
                step_index: k,
                image: ImageRef::new(path.to_string_lossy().into_owned()),
                width: SCREEN_W,
                height: SCREEN_H,
            }
        })
        .collect();
    Trajectory {
        id: id.to_string(),
        goal: Goal::new(goal_for(id)).unwrap(),
        platform,
        observations,
        actions,
        bboxes: vec![None; n],
    }
}

/// Trajectory with screenshots referenced by path only; nothing is written to disk.
pub fn virtual_trajectory(id: &str, actions: Vec<Action>) -> Trajectory {
    let n = actions.len();
    Trajectory {
        id: id.to_string(),
        goal: Goal::new(goal_for(id)).unwrap(),
        platform: Platform::Mobile,
        observations: (0..=n as u32)
            .map(|k| Observation {
                step_index: k,
                image: ImageRef::new(format!("/virtual/{id}/{k}.png")),
                width: 1080,
                height: 2400,
            })
            .collect(),
        actions,
        bboxes: vec![None; n],
    }
}

fn q(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

pub fn random_action(rng: &mut impl Rng) -> Action {
    let p = |rng: &mut dyn RngCore| {
        Point::new(q(rng.gen_range(0.05..0.95)), q(rng.gen_range(0.05..0.95)))
    };
    match rng.gen_range(0..6) {
        0 | 1 => Action::Click { at: p(rng) },
        2 => Action::Type {
            text: format!("query {}", rng.gen_range(0..1000)),
        },
        3 => Action::Scroll {
            direction: [ScrollDirection::Up, ScrollDirection::Down][rng.gen_range(0..2)],
            magnitude: None,
        },
        4 => Action::PressBack,
        _ => Action::LongPress { at: p(rng) },
    }
}

/// An action that does not match `gt` under any rule.
pub fn wrong_action(gt: &Action) -> Action {
    match gt.kind() {
        ActionKind::PressBack => Action::PressHome,
        _ => Action::PressBack,
    }
}

pub fn random_actions(rng: &mut impl Rng, n: usize) -> Vec<Action> {
    (0..n).map(|_| random_action(rng)).collect()
}

pub fn entry(step: u32, caption_len: usize, outcome_len: usize, action_len: usize) -> MemoryEntry {
    MemoryEntry {
        step,
        observation_caption: pad(&format!("screen {step} shows a list"), caption_len),
        action_description: pad(&format!("tap {step}"), action_len),
        action_outcome: pad(
            &format!("the tap on step {step} opened the page"),
            outcome_len,
        ),
    }
}

fn pad(s: &str, len: usize) -> String {
    let mut out: String = s.chars().take(len).collect();
    while out.chars().count() < len {
        out.push('.');
    }
    out
}

/// In-memory summaries for every step of every trajectory.
pub fn cache_for(trajs: &[Arc<Trajectory>]) -> MemoryCache {
    let mut cache = MemoryCache::in_memory();
    for t in trajs {
        for k in 0..t.len() as u32 {
            cache.insert(&t.id, entry(k, 60, 80, 20));
        }
    }
    cache
}

/// What the scripted teacher does at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPlan {
    pub retrieve: Option<u32>,
    pub correct: bool,
    pub stage_three_garbled: bool,
}

pub fn header(traj: &Trajectory, step: usize) -> String {
    format!("Task goal: {}\nCurrent step: {step}\n", traj.goal.as_str())
}

/// Rule-based teacher (and synthesizer) following `plans`; unplanned steps get a parse failure.
pub fn teacher_program(
    trajs: &[Arc<Trajectory>],
    plans: &BTreeMap<(String, u32), StepPlan>,
) -> Program {
    let mut rules = Vec::new();
    for t in trajs {
        for i in 0..t.len() {
            let Some(plan) = plans.get(&(t.id.clone(), i as u32)) else {
                continue;
            };
            let h = header(t, i);
            let rule = |needle: &str, reply: String| Rule {
                contains: vec![h.clone(), needle.to_string()],
                reply,
            };
            let synth = match plan.retrieve {
                Some(j) => format!(
                    "The detail I need was on an earlier screen, so I look back at step {j}.\n\
                     AFTER RETRIEVAL:\nThe earlier screen confirms the target, so I act."
                ),
                None => {
                    "The current screen already shows the target, so I act directly.".to_string()
                }
            };
            rules.push(rule("Write the reasoning", synth));
            let decision = if plan.stage_three_garbled {
                "I cannot decide.".to_string()
            } else {
                match plan.retrieve {
                    Some(j) => format!("Candidate one is uncertain.\nRETRIEVE {j}"),
                    None => "Candidate one is clearly right.\nNO RETRIEVAL".to_string(),
                }
            };
            rules.push(rule("\nStage 3 - ", decision));
            let action = if plan.correct {
                t.actions[i].clone()
            } else {
                wrong_action(&t.actions[i])
            };
            rules.push(rule(
                "\nStage 4 - ",
                format!("<tool_use>{}</tool_use>", action.to_canonical_json()),
            ));
        }
    }
    Program::Rules {
        rules,
        default: Some("Progress is on track; candidates are the visible buttons.".to_string()),
    }
}

/// Summarizer replies keyed by step: captions and validations.
pub fn summarizer_program() -> Program {
    Program::Rules {
        rules: vec![
            Rule {
                contains: vec!["Describe the screenshot".into()],
                reply: "A settings list with a search bar at the top.".into(),
            },
            Rule {
                contains: vec!["Screenshot after the action".into()],
                reply: "The action succeeded and the next page opened.".into(),
            },
        ],
        default: None,
    }
}

/// Corpus of `n_traj` trajectories of `steps` steps with a seeded teacher plan.
pub struct Corpus {
    pub trajectories: Vec<Arc<Trajectory>>,
    pub plans: BTreeMap<(String, u32), StepPlan>,
}

pub fn corpus(dir: &Path, n_traj: usize, steps: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::new();
    let mut plans = BTreeMap::new();
    for n in 0..n_traj {
        let id = format!("traj{n:03}");
        let t = Arc::new(make_trajectory(
            dir,
            &id,
            Platform::Mobile,
            random_actions(&mut rng, steps),
        ));
        for i in 0..steps {
            let roll: f64 = rng.gen();
            let plan = if roll < 0.05 {
                StepPlan {
                    retrieve: None,
                    correct: true,
                    stage_three_garbled: true,
                }
            } else if i > 0 && roll < 0.55 {
                StepPlan {
                    retrieve: Some(rng.gen_range(0..i as u32)),
                    correct: rng.gen_bool(0.8),
                    stage_three_garbled: false,
                }
            } else {
                StepPlan {
                    retrieve: None,
                    correct: rng.gen_bool(0.8),
                    stage_three_garbled: false,
                }
            };
            plans.insert((id.clone(), i as u32), plan);
        }
        trajectories.push(t);
    }
    Corpus {
        trajectories,
        plans,
    }
}

pub fn write_trajectories(path: &Path, trajs: &[Arc<Trajectory>]) {
    let mut body = String::new();
    for t in trajs {
        body.push_str(&t.to_json_line());
        body.push('\n');
    }
    std::fs::write(path, body).unwrap();
}

pub fn write_program(path: &Path, program: &Program) -> PathBuf {
    std::fs::write(path, serde_json::to_string(program).unwrap()).unwrap();
    path.to_path_buf()
}

/// Independent count of (correct with retrieval, correct without retrieval) from the plan.
pub fn expected_split(plans: &BTreeMap<(String, u32), StepPlan>) -> (usize, usize) {
    let ok = plans
        .values()
        .filter(|p| p.correct && !p.stage_three_garbled);
    let (mut tool, mut notool) = (0, 0);
    for p in ok {
        if p.retrieve.is_some() {
            tool += 1;
        } else {
            notool += 1;
        }
    }
    (tool, notool)
}
