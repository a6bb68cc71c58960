//! Scripted border-clash runs must reproduce the recorded traces exactly.
//! Set `STRATLAB_BLESS=1` to rewrite the fixture after an intentional rule change.

use serde::{Deserialize, Serialize};
use stratlab::wargame::{format_trace, run_scenario, OpforProfile, Scenario, Side};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/border_clash_golden.json");

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct GoldenRun {
    blue: String,
    red: String,
    seed: u64,
    blue_trace: String,
    red_trace: String,
    rules: Vec<String>,
    blue_strength: u32,
    red_strength: u32,
}

fn current() -> Vec<GoldenRun> {
    let sc = Scenario::border_clash();
    let mut out = Vec::new();
    for blue in OpforProfile::ALL {
        for red in OpforProfile::ALL {
            for seed in [0u64, 7] {
                let run = run_scenario(&sc, blue, red, seed).unwrap();
                out.push(GoldenRun {
                    blue: blue.name().into(),
                    red: red.name().into(),
                    seed,
                    blue_trace: format_trace(&run.blue_trace),
                    red_trace: format_trace(&run.red_trace),
                    rules: run.decisions.iter().map(|d| d.outcome.rationale.join("+")).collect(),
                    blue_strength: run.final_state.total_strength(Side::Blue),
                    red_strength: run.final_state.total_strength(Side::Red),
                });
            }
        }
    }
    out
}

#[test]
fn border_clash_matches_golden_traces() {
    let now = current();
    if std::env::var("STRATLAB_BLESS").as_deref() == Ok("1") {
        std::fs::write(FIXTURE, serde_json::to_string_pretty(&now).unwrap() + "\n").unwrap();
    }
    let golden: Vec<GoldenRun> = serde_json::from_str(&std::fs::read_to_string(FIXTURE).unwrap()).unwrap();
    assert_eq!(golden.len(), now.len());
    for (g, n) in golden.iter().zip(&now) {
        assert_eq!(g, n, "{} vs {} seed {}", g.blue, g.red, g.seed);
    }
}
