//! Cross-checks the trigram-Dice scorer against a separate straightforward
//! implementation, and pins two frozen reference values.

use std::collections::HashSet;

use ppcl_core::perturb::similarity_score;
use proptest::prelude::*;

fn grams(w: &str) -> HashSet<String> {
    let s = format!("#{}#", w.to_lowercase());
    let cs: Vec<char> = s.chars().collect();
    (0..cs.len().saturating_sub(2))
        .map(|i| cs[i..i + 3].iter().collect())
        .collect()
}

fn oracle(a: &str, b: &str) -> f64 {
    let a: Vec<HashSet<String>> = a.split(' ').map(grams).collect();
    let b: Vec<HashSet<String>> = b.split(' ').map(grams).collect();
    let d = |x: &HashSet<String>, y: &HashSet<String>| {
        2.0 * x.intersection(y).count() as f64 / (x.len() + y.len()) as f64
    };
    let mut p = 0.0;
    for y in &b {
        let mut m: f64 = 0.0;
        for x in &a {
            m = m.max(d(x, y));
        }
        p += m;
    }
    p /= b.len() as f64;
    let mut r = 0.0;
    for x in &a {
        let mut m: f64 = 0.0;
        for y in &b {
            m = m.max(d(x, y));
        }
        r += m;
    }
    r /= a.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn score(a: &str, b: &str) -> f64 {
    let t = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    similarity_score(&t(a), &t(b)).unwrap()
}

#[test]
fn frozen_values() {
    assert_eq!(score("review all alarms", "review aul alarms"), 0.7017543859649124);
    assert_eq!(
        score("tell me the weather this week", "whats the weather forecast for this week"),
        0.6153846153846153
    );
}

#[test]
fn oracle_agrees_on_frozen_inputs() {
    for (a, b) in [
        ("review all alarms", "review aul alarms"),
        ("tell me the weather this week", "whats the weather forecast for this week"),
    ] {
        assert!((oracle(a, b) - score(a, b)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn oracle_agrees(a in "[a-e]{1,6}( [a-e]{1,6}){0,5}", b in "[a-e]{1,6}( [a-e]{1,6}){0,5}") {
        prop_assert!((oracle(&a, &b) - score(&a, &b)).abs() < 1e-12);
    }
}
