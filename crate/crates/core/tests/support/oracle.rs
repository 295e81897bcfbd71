//! Independent restatement of the scoring rules.

use lookback::action::ScrollDirection;
use lookback::{Action, BBox, Point};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn point_of(a: &Action) -> Option<Point> {
    match a {
        Action::Click { at }
        | Action::LongPress { at }
        | Action::LeftDouble { at }
        | Action::RightSingle { at } => Some(*at),
        _ => None,
    }
}

fn hit(p: Point, g: Point, bbox: Option<&BBox>) -> bool {
    match bbox {
        Some(b) => p.x >= b.x0 && p.x <= b.x1 && p.y >= b.y0 && p.y <= b.y1,
        None => ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt() <= 0.14,
    }
}

pub fn type_ok(p: &Action, g: &Action) -> bool {
    std::mem::discriminant(p) == std::mem::discriminant(g)
}

pub fn grounding(p: &Action, g: &Action, bbox: Option<&BBox>) -> Option<bool> {
    let gp = point_of(g)?;
    Some(point_of(p).is_some_and(|pp| hit(pp, gp, bbox)))
}

pub fn success(p: &Action, g: &Action, bbox: Option<&BBox>) -> bool {
    let norm = |s: &str| s.trim().to_lowercase();
    match (p, g) {
        (Action::Type { text: a }, Action::Type { text: b }) => norm(a) == norm(b),
        (Action::Scroll { direction: a, .. }, Action::Scroll { direction: b, .. }) => a == b,
        (Action::PressBack, Action::PressBack) | (Action::PressHome, Action::PressHome) => true,
        _ if type_ok(p, g) => grounding(p, g, bbox).unwrap_or(false),
        _ => false,
    }
}

/// Percentage rounded half-up at one decimal, via quotient and remainder.
pub fn pct(num: usize, den: usize) -> f64 {
    let q = 1000 * num / den;
    let r = 1000 * num % den;
    let tenths = if 2 * r >= den { q + 1 } else { q };
    tenths as f64 / 10.0
}

pub fn perturb(rng: &mut ChaCha8Rng, gt: &Action) -> Action {
    let jitter = |rng: &mut ChaCha8Rng, p: Point| {
        let s = rng.gen_range(0.0..0.3);
        Point::new(
            (p.x + rng.gen_range(-s..s)).clamp(0.0, 1.0),
            (p.y + rng.gen_range(-s..s)).clamp(0.0, 1.0),
        )
    };
    match rng.gen_range(0..4) {
        0 => gt.clone(),
        1 => super::random_action(rng),
        _ => match gt {
            Action::Click { at } => Action::Click {
                at: jitter(rng, *at),
            },
            Action::LongPress { at } => Action::LongPress {
                at: jitter(rng, *at),
            },
            Action::Type { text } => Action::Type {
                text: if rng.gen_bool(0.5) {
                    format!("  {}", text.to_uppercase())
                } else {
                    format!("{text}x")
                },
            },
            Action::Scroll { direction, .. } => Action::Scroll {
                direction: if rng.gen_bool(0.5) {
                    *direction
                } else {
                    ScrollDirection::Left
                },
                magnitude: Some(0.7),
            },
            other => other.clone(),
        },
    }
}
