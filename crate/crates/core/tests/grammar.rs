use lookback::action::{parse_tool_use, ScrollDirection, TurnParseError};
use lookback::{parse_turn, serialize_turn, Action, AgentTurn, Platform, Point};
use proptest::prelude::*;
use serde_json::json;

fn coord() -> impl Strategy<Value = f64> {
    (0u32..=10_000).prop_map(|n| f64::from(n) / 10_000.0)
}

fn point() -> impl Strategy<Value = Point> {
    (coord(), coord()).prop_map(|(x, y)| Point::new(x, y))
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.!?\"'\\\\/{}\\[\\]:\n\t\u{e9}\u{4e2d}-]{0,40}"
}

fn think() -> impl Strategy<Value = String> {
    text().prop_filter("no tags", |s| lookback::action::is_valid_think(s))
}

pub fn action() -> impl Strategy<Value = Action> {
    let dir = prop_oneof![
        Just(ScrollDirection::Up),
        Just(ScrollDirection::Down),
        Just(ScrollDirection::Left),
        Just(ScrollDirection::Right)
    ];
    prop_oneof![
        point().prop_map(|at| Action::Click { at }),
        text().prop_map(|text| Action::Type { text }),
        (dir, proptest::option::of(1u32..=10_000)).prop_map(|(direction, m)| Action::Scroll {
            direction,
            magnitude: m.map(|m| f64::from(m) / 10_000.0),
        }),
        (point(), point()).prop_map(|(from, to)| Action::Drag { from, to }),
        proptest::option::of(0u64..100_000).prop_map(|duration_ms| Action::Wait { duration_ms }),
        proptest::option::of(text()).prop_map(|answer| Action::Finished { answer }),
        point().prop_map(|at| Action::LongPress { at }),
        text().prop_map(|name| Action::OpenApp { name }),
        Just(Action::PressHome),
        Just(Action::PressBack),
        proptest::collection::vec("[a-z]{1,6}", 1..4).prop_map(|keys| Action::Hotkey { keys }),
        point().prop_map(|at| Action::LeftDouble { at }),
        point().prop_map(|at| Action::RightSingle { at }),
        (0u32..500).prop_map(|step| Action::Retrieve { step }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn turns_round_trip(think in think(), call in action()) {
        let turn = AgentTurn::new(think.clone(), call.clone());
        let text = serialize_turn(&turn);
        let parsed = parse_turn(&text).unwrap();
        prop_assert_eq!(&parsed.think, &think);
        prop_assert_eq!(&parsed.call, &call);
        prop_assert_eq!(serialize_turn(&parsed), text);
    }

    #[test]
    fn canonical_json_is_a_fixed_point(call in action()) {
        let once = call.to_canonical_json();
        let again = Action::from_json_str(&once).unwrap().to_canonical_json();
        prop_assert_eq!(once, again);
    }

    #[test]
    fn pixel_coordinates_survive_round_trip(
        w in 1u32..=5000,
        h in 1u32..=5000,
        fx in 0.0f64..=1.0,
        fy in 0.0f64..=1.0,
    ) {
        let (px, py) = (fx * f64::from(w), fy * f64::from(h));
        let a = Action::from_pixel_json(&json!({"action": "click", "coordinate": [px, py]}), w, h).unwrap();
        let reparsed = Action::from_json_str(&a.to_canonical_json()).unwrap();
        let back = reparsed.to_pixel_json(w, h);
        let xy = back["coordinate"].as_array().unwrap();
        prop_assert!((xy[0].as_f64().unwrap() - px).abs() <= 0.5);
        prop_assert!((xy[1].as_f64().unwrap() - py).abs() <= 0.5);
    }
}

#[test]
fn malformed_inputs_are_rejected() {
    assert_eq!(
        parse_turn("<tool_use>{\"action\":\"press_back\"}</tool_use>").unwrap_err(),
        TurnParseError::MissingThinkBlock
    );
    assert_eq!(
        parse_turn("<think>x</think>").unwrap_err(),
        TurnParseError::MissingToolUseBlock
    );
    assert!(matches!(
        parse_turn("<think>x</think><tool_use>{\"action\":</tool_use>"),
        Err(TurnParseError::MalformedActionJson { .. })
    ));
    assert!(matches!(
        parse_turn("<think>x</think><tool_use>{\"action\":\"fly\"}</tool_use>"),
        Err(TurnParseError::UnknownActionKind(_))
    ));
    assert!(
        parse_tool_use("<tool_use>{\"action\":\"click\",\"coordinate\":[1.5,0.2]}</tool_use>")
            .is_err()
    );
}

#[test]
fn platform_groups() {
    let lp = Action::LongPress {
        at: Point::new(0.1, 0.1),
    };
    assert!(lp.validate_for_platform(Platform::Mobile).is_ok());
    assert!(lp.validate_for_platform(Platform::Web).is_err());
    let hk = Action::Hotkey {
        keys: vec!["ctrl".into(), "c".into()],
    };
    assert!(hk.validate_for_platform(Platform::Web).is_ok());
    assert!(hk.validate_for_platform(Platform::Mobile).is_err());
    for p in [Platform::General, Platform::Mobile, Platform::Web] {
        assert!(Action::Retrieve { step: 0 }
            .validate_for_platform(p)
            .is_ok());
        assert!(Action::PressBack
            .validate_for_platform(Platform::Mobile)
            .is_ok());
    }
}
