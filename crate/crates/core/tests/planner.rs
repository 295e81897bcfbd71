mod support;

use std::sync::Arc;

use lookback::backend::{ImageRef, Role};
use lookback::eval::tokens::context_messages;
use lookback::eval::Strategy as HistoryStrategy;
use lookback::memory::MemorySource;
use lookback::planner::{
    plan_step_traced, retrieval_label, run_episode_offline, run_steps, PlanError,
    BUDGET_EXHAUSTED_NOTICE,
};
use lookback::{
    serialize_turn, Action, AgentTurn, ChatMessage, MemoryCache, PlanContext, PlanOutcome,
    PlannerConfig, Point, ScriptedBackend, Trajectory,
};
use proptest::prelude::*;
use support::{cache_for, random_actions, virtual_trajectory};

fn turn(think: &str, a: Action) -> String {
    serialize_turn(&AgentTurn::new(think, a))
}

fn click(x: f64, y: f64) -> Action {
    Action::Click {
        at: Point::new(x, y),
    }
}

fn fixture(steps: usize) -> (Arc<Trajectory>, MemoryCache) {
    let t = Arc::new(virtual_trajectory(
        "p",
        (0..steps).map(|_| Action::PressBack).collect(),
    ));
    let cache = cache_for(std::slice::from_ref(&t));
    (t, cache)
}

fn ctx(t: &Trajectory, cache: &MemoryCache, step: usize) -> PlanContext {
    PlanContext::from_trajectory(t, step, cache.memory_for(t, step).unwrap())
}

fn cfg(max_retrievals: u32) -> PlannerConfig {
    PlannerConfig { max_retrievals }
}

/// Step index named in the planner's user message.
fn current_step(messages: &[ChatMessage]) -> u32 {
    let text = messages[1].text_content();
    let tail = text.rsplit("Current screenshot (step ").next().unwrap();
    tail.trim_end_matches("):").parse().unwrap()
}

#[test]
fn retrieve_then_act_follows_the_two_branch_transcript() {
    let (t, cache) = fixture(6);
    let c = ctx(&t, &cache, 5);
    let first = turn(
        "The price was on an earlier page.",
        Action::Retrieve { step: 2 },
    );
    let second = turn("Now I can tap it.", click(0.4, 0.6));
    let backend = ScriptedBackend::queue([first.clone(), second.clone()]).unwrap();
    let mut trace = Vec::new();
    let step = plan_step_traced(&backend, &c, &cfg(1), &mut trace).unwrap();
    assert_eq!(
        step.outcome,
        PlanOutcome::RetrievalThenAction {
            retrieved_steps: vec![2],
            action: click(0.4, 0.6)
        }
    );
    assert_eq!(
        step.think_texts,
        vec!["The price was on an earlier page.", "Now I can tap it."]
    );

    let calls = backend.calls();
    assert_eq!(calls.len(), 2);
    assert_eq!(calls[0].len(), 2);
    assert_eq!(calls[0][0].role, Role::System);
    assert_eq!(calls[0][1].role, Role::User);
    assert_eq!(
        calls[0][1].images().collect::<Vec<_>>(),
        vec![&t.observations[5].image]
    );
    assert_eq!(calls[1].len(), 4);
    assert_eq!(&calls[1][..2], &calls[0][..]);
    assert_eq!(calls[1][2], ChatMessage::assistant(first));
    assert_eq!(calls[1][3].role, Role::Tool);
    assert_eq!(calls[1][3].text_content(), retrieval_label(2));
    assert_eq!(
        calls[1][3].images().collect::<Vec<_>>(),
        vec![&t.observations[2].image]
    );
    assert_eq!(trace[0].retrieve_executed, Some(2));
    assert_eq!(trace[1].retrieve_executed, None);
}

#[test]
fn direct_action() {
    let (t, cache) = fixture(6);
    let backend = ScriptedBackend::queue([turn("tap", click(0.1, 0.1))]).unwrap();
    let step = plan_step_traced(&backend, &ctx(&t, &cache, 5), &cfg(1), &mut Vec::new()).unwrap();
    assert_eq!(
        step.outcome,
        PlanOutcome::DirectAction {
            action: click(0.1, 0.1)
        }
    );
    assert_eq!(backend.call_count(), 1);
}

#[test]
fn retrieving_the_current_step_is_rejected() {
    let (t, cache) = fixture(6);
    let backend = ScriptedBackend::queue([turn("x", Action::Retrieve { step: 5 })]).unwrap();
    let err =
        plan_step_traced(&backend, &ctx(&t, &cache, 5), &cfg(1), &mut Vec::new()).unwrap_err();
    assert_eq!(err, PlanError::InvalidRetrieveIndex { j: 5, current: 5 });
}

#[test]
fn budget_exhaustion_gets_one_forced_final_query() {
    let (t, cache) = fixture(6);
    let c = ctx(&t, &cache, 4);
    let backend = ScriptedBackend::queue([
        turn("a", Action::Retrieve { step: 1 }),
        turn("b", Action::Retrieve { step: 2 }),
        turn("c", click(0.5, 0.5)),
    ])
    .unwrap();
    let step = plan_step_traced(&backend, &c, &cfg(1), &mut Vec::new()).unwrap();
    assert_eq!(step.outcome.retrieved_steps(), &[1]);
    let last_call = backend.calls().pop().unwrap();
    assert_eq!(
        last_call.last().unwrap().text_content(),
        BUDGET_EXHAUSTED_NOTICE
    );

    let stubborn = ScriptedBackend::queue([
        turn("a", Action::Retrieve { step: 1 }),
        turn("b", Action::Retrieve { step: 2 }),
        turn("c", Action::Retrieve { step: 3 }),
    ])
    .unwrap();
    let err = plan_step_traced(&stubborn, &c, &cfg(1), &mut Vec::new()).unwrap_err();
    assert_eq!(err, PlanError::BudgetExhausted);
}

#[test]
fn platform_mismatch_is_an_error() {
    let (t, cache) = fixture(3);
    let backend = ScriptedBackend::queue([turn(
        "x",
        Action::Hotkey {
            keys: vec!["ctrl".into()],
        },
    )])
    .unwrap();
    let err =
        plan_step_traced(&backend, &ctx(&t, &cache, 1), &cfg(1), &mut Vec::new()).unwrap_err();
    assert_eq!(err.code(), "platform_mismatch");
}

#[test]
fn zero_budget_first_call_equals_summary_only_context() {
    let (t, cache) = fixture(8);
    for i in 0..8 {
        let backend = ScriptedBackend::queue([turn("go", Action::PressBack)]).unwrap();
        plan_step_traced(&backend, &ctx(&t, &cache, i), &cfg(0), &mut Vec::new()).unwrap();
        let sa = context_messages(&t, i, HistoryStrategy::Summaries, Some(&cache), &[]).unwrap();
        assert_eq!(
            serde_json::to_string(&backend.calls()[0]).unwrap(),
            serde_json::to_string(&sa).unwrap()
        );
    }
}

fn gt_responder(t: Arc<Trajectory>, retrieve: bool) -> ScriptedBackend {
    ScriptedBackend::responder(move |msgs| {
        let i = current_step(msgs);
        let last_is_tool = msgs.last().map(|m| m.role) == Some(Role::Tool);
        if retrieve && i > 0 && !last_is_tool {
            Some(turn("look back", Action::Retrieve { step: i - 1 }))
        } else {
            Some(turn("act", t.actions[i as usize].clone()))
        }
    })
}

#[test]
fn three_step_episode_matches_ground_truth() {
    let t = Arc::new(virtual_trajectory(
        "e",
        vec![
            click(0.2, 0.3),
            Action::Type {
                text: "milk".into(),
            },
            Action::PressBack,
        ],
    ));
    let cache = cache_for(std::slice::from_ref(&t));
    let records =
        run_episode_offline(&gt_responder(Arc::clone(&t), false), &t, &cache, &cfg(1)).unwrap();
    assert_eq!(records.len(), 3);
    for (i, r) in records.iter().enumerate() {
        let step = r.result.as_ref().unwrap();
        assert_eq!(
            step.outcome,
            PlanOutcome::DirectAction {
                action: t.actions[i].clone()
            }
        );
    }
}

#[test]
fn malformed_step_is_isolated() {
    let (t, cache) = fixture(3);
    let good = turn("ok", Action::PressBack);
    let backend = ScriptedBackend::queue([
        good.clone(),
        "<think>oops</think> no tool call".to_string(),
        good,
    ])
    .unwrap();
    let records = run_episode_offline(&backend, &t, &cache, &cfg(1)).unwrap();
    assert!(records[0].result.is_ok());
    assert!(matches!(records[1].result, Err(PlanError::Parse(_))));
    assert!(records[2].result.is_ok());
}

#[test]
fn retrieving_at_every_step_uses_exactly_one_retrieval() {
    let (t, cache) = fixture(7);
    let records =
        run_episode_offline(&gt_responder(Arc::clone(&t), true), &t, &cache, &cfg(1)).unwrap();
    for r in &records[1..] {
        let step = r.result.as_ref().unwrap();
        assert_eq!(step.outcome.retrieved_steps().len(), 1);
        assert!(step.outcome.retrieved_steps()[0] < r.step);
    }
    assert!(records[0]
        .result
        .as_ref()
        .unwrap()
        .outcome
        .retrieved_steps()
        .is_empty());
}

#[test]
fn malformed_trajectory_is_rejected() {
    let mut t = virtual_trajectory("bad", vec![Action::PressBack, Action::PressBack]);
    t.observations.pop();
    let cache = MemoryCache::in_memory();
    let backend = ScriptedBackend::queue(["x"]).unwrap();
    assert!(matches!(
        run_episode_offline(&backend, &t, &cache, &cfg(1)),
        Err(PlanError::TrajectoryMalformed(_))
    ));
}

#[test]
fn missing_history_image_is_not_needed_for_planning() {
    let (mut t, cache) = fixture(2);
    Arc::make_mut(&mut t).observations[0].image = ImageRef::new("/nowhere.png");
    let backend = ScriptedBackend::queue([turn("go", Action::PressBack)]).unwrap();
    assert!(plan_step_traced(&backend, &ctx(&t, &cache, 1), &cfg(1), &mut Vec::new()).is_ok());
}

#[test]
fn parallel_runs_are_order_preserving_and_identical() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let trajs: Vec<Arc<Trajectory>> = (0..6)
        .map(|n| {
            Arc::new(virtual_trajectory(
                &format!("t{n}"),
                random_actions(&mut rng, 5),
            ))
        })
        .collect();
    let cache = cache_for(&trajs);
    let items: Vec<_> = trajs
        .iter()
        .flat_map(|t| (0..5).map(move |i| (Arc::clone(t), i)))
        .collect();
    let b1 = ScriptedBackend::responder(|msgs| {
        Some(turn(
            "x",
            Action::Retrieve {
                step: current_step(msgs).saturating_sub(1),
            },
        ))
    });
    let b8 = ScriptedBackend::responder(|msgs| {
        Some(turn(
            "x",
            Action::Retrieve {
                step: current_step(msgs).saturating_sub(1),
            },
        ))
    });
    let one = run_steps(&b1, &items, &cache, &cfg(1), 1);
    let eight = run_steps(&b8, &items, &cache, &cfg(1), 8);
    assert_eq!(one, eight);
    for (r, (t, i)) in one.iter().zip(&items) {
        assert_eq!(
            (r.trajectory_id.as_str(), r.step as usize),
            (t.id.as_str(), *i)
        );
    }
}

#[derive(Debug, Clone)]
enum Move {
    Act,
    Retrieve(u32),
    Garbage,
}

fn moves() -> impl Strategy<Value = Vec<Move>> {
    proptest::collection::vec(
        prop_oneof![
            3 => Just(Move::Act),
            5 => (0u32..12).prop_map(Move::Retrieve),
            1 => Just(Move::Garbage),
        ],
        1..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn planner_invariants(script in moves(), step in 0usize..10, max in 0u32..4) {
        let (t, cache) = fixture(10);
        let replies: Vec<String> = script
            .iter()
            .map(|m| match m {
                Move::Act => turn("act", Action::PressBack),
                Move::Retrieve(j) => turn("look", Action::Retrieve { step: *j }),
                Move::Garbage => "no tags at all".to_string(),
            })
            .collect();
        let backend = ScriptedBackend::queue(replies).unwrap();
        let mut trace = Vec::new();
        let result = plan_step_traced(&backend, &ctx(&t, &cache, step), &cfg(max), &mut trace);

        let calls = backend.calls();
        for w in calls.windows(2) {
            prop_assert!(w[1].len() > w[0].len());
            prop_assert_eq!(&w[1][..w[0].len()], &w[0][..]);
        }
        let executed: Vec<u32> = trace.iter().filter_map(|c| c.retrieve_executed).collect();
        prop_assert!(executed.len() as u32 <= max);
        prop_assert!(executed.iter().all(|&j| (j as usize) < step));
        if let Ok(s) = &result {
            prop_assert!(!s.outcome.action().is_retrieve());
            prop_assert_eq!(s.outcome.retrieved_steps(), &executed[..]);
            let mut dedup = executed.clone();
            dedup.sort_unstable();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), executed.len());
        }
    }

    #[test]
    fn budget_is_irrelevant_without_retrieval(step in 0usize..8, x in 0u32..=10_000) {
        let (t, cache) = fixture(8);
        let reply = turn("tap", click(f64::from(x) / 10_000.0, 0.5));
        let b0 = ScriptedBackend::queue([reply.clone()]).unwrap();
        let b1 = ScriptedBackend::queue([reply]).unwrap();
        let (mut t0, mut t1) = (Vec::new(), Vec::new());
        let r0 = plan_step_traced(&b0, &ctx(&t, &cache, step), &cfg(0), &mut t0);
        let r1 = plan_step_traced(&b1, &ctx(&t, &cache, step), &cfg(1), &mut t1);
        prop_assert_eq!(r0, r1);
        prop_assert_eq!(t0, t1);
    }
}
