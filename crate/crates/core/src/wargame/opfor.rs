//! Scripted opposing-force policies and a turn loop that plays them.

use super::{
    adjudicate, apply_decision, apply_event, distance, ActionSymbol, AdjudicationDecision, ActionTrace, Event, Order, Position,
    Scenario, Side, Unit, WargameState,
};
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpforProfile {
    /// Holds ground: fights only when contact is made, otherwise digs in.
    StaticDefense,
    /// Closes with the nearest enemy and attacks on contact.
    Aggressive,
    /// Harasses at range and breaks contact against stronger units.
    Probing,
}

impl OpforProfile {
    pub const ALL: [OpforProfile; 3] = [OpforProfile::StaticDefense, OpforProfile::Aggressive, OpforProfile::Probing];

    pub fn name(self) -> &'static str {
        match self {
            OpforProfile::StaticDefense => "static-defense",
            OpforProfile::Aggressive => "aggressive",
            OpforProfile::Probing => "probing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| crate::Error::Input(format!("unknown profile '{s}'")))
    }
}

fn policy_rng(state: &WargameState, side: Side, seed: u64) -> ChaCha8Rng {
    let side_bit = match side {
        Side::Blue => 0,
        Side::Red => 1,
    };
    ChaCha8Rng::seed_from_u64(seed ^ (u64::from(state.turn) * 2 + side_bit).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn step_toward(from: Position, to: Position) -> Position {
    (from.0 + (to.0 - from.0).signum(), from.1 + (to.1 - from.1).signum())
}

/// One order for `side`. Units act in rotation by turn number; `None` when
/// the side has no living units.
pub fn scripted_opfor(state: &WargameState, side: Side, profile: OpforProfile, seed: u64) -> Option<Order> {
    let living: Vec<&Unit> = state.living(side).collect();
    if living.is_empty() {
        return None;
    }
    let unit = living[state.turn as usize % living.len()];
    let mut rng = policy_rng(state, side, seed);
    let roll: f64 = rng.gen();
    let Some(enemy) = state.nearest_enemy(unit) else { return Some(Order::simple(&unit.id, ActionSymbol::Hold)) };
    let range = distance(unit.position, enemy.position);
    let order = match profile {
        OpforProfile::StaticDefense => {
            if range <= 1 {
                Order::attack(&unit.id, &enemy.id)
            } else if unit.strength < super::MAX_STRENGTH && roll < 0.5 {
                Order::simple(&unit.id, ActionSymbol::Fortify)
            } else {
                Order::simple(&unit.id, ActionSymbol::Defend)
            }
        }
        OpforProfile::Aggressive => {
            if range <= 1 {
                Order::attack(&unit.id, &enemy.id)
            } else if range == 2 && roll < 0.3 {
                Order::infiltrate(&unit.id, &enemy.id)
            } else {
                Order::move_to(&unit.id, step_toward(unit.position, enemy.position))
            }
        }
        OpforProfile::Probing => {
            if range <= 1 && unit.strength < enemy.strength {
                Order::simple(&unit.id, ActionSymbol::Withdraw)
            } else if range <= 1 {
                Order::attack(&unit.id, &enemy.id)
            } else if range == 2 {
                if roll < 0.5 {
                    Order::infiltrate(&unit.id, &enemy.id)
                } else {
                    Order::simple(&unit.id, ActionSymbol::Hold)
                }
            } else if roll < 0.7 {
                Order::move_to(&unit.id, step_toward(unit.position, enemy.position))
            } else {
                Order::simple(&unit.id, ActionSymbol::Hold)
            }
        }
    };
    Some(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub final_state: WargameState,
    pub decisions: Vec<AdjudicationDecision>,
    pub blue_trace: ActionTrace,
    pub red_trace: ActionTrace,
}

/// Plays every turn: injects first, then one blue and one red order.
pub fn run_scenario(scenario: &Scenario, blue: OpforProfile, red: OpforProfile, seed: u64) -> Result<ScenarioRun> {
    let mut state = scenario.initial_state()?;
    let mut run = ScenarioRun { final_state: state.clone(), decisions: vec![], blue_trace: vec![], red_trace: vec![] };
    for turn in 0..scenario.turns {
        for inject in scenario.injects.iter().filter(|i| i.turn == turn) {
            state = apply_event(&state, &inject.event)?;
        }
        for (side, profile) in [(Side::Blue, blue), (Side::Red, red)] {
            let Some(order) = scripted_opfor(&state, side, profile, seed) else { continue };
            let adjudication_seed = seed.wrapping_mul(31).wrapping_add(u64::from(turn) * 2 + (side == Side::Red) as u64);
            let decision = adjudicate(&state, &order, adjudication_seed);
            state = apply_decision(&state, &decision)?;
            match side {
                Side::Blue => run.blue_trace.push(order.action),
                Side::Red => run.red_trace.push(order.action),
            }
            run.decisions.push(decision);
        }
        state = apply_event(&state, &Event::EndTurn)?;
    }
    run.final_state = state;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_is_deterministic() {
        let s = Scenario::border_clash().initial_state().unwrap();
        for p in OpforProfile::ALL {
            for seed in 0..10 {
                assert_eq!(scripted_opfor(&s, Side::Red, p, seed), scripted_opfor(&s, Side::Red, p, seed));
            }
        }
    }

    #[test]
    fn static_defense_never_advances() {
        for seed in 0..25 {
            let run = run_scenario(&Scenario::border_clash(), OpforProfile::Aggressive, OpforProfile::StaticDefense, seed).unwrap();
            assert!(!run.red_trace.contains(&ActionSymbol::Move), "seed {seed}: {:?}", run.red_trace);
            assert!(!run.red_trace.contains(&ActionSymbol::Infiltrate));
        }
    }

    #[test]
    fn runs_preserve_bounds_and_history() {
        let sc = Scenario::border_clash();
        let run = run_scenario(&sc, OpforProfile::Probing, OpforProfile::Aggressive, 3).unwrap();
        assert_eq!(run.final_state.turn, sc.turns);
        assert!(run.final_state.units.iter().all(|u| u.strength <= 100));
        assert_eq!(run.blue_trace.len() + run.red_trace.len(), run.decisions.len());
        assert_eq!(run, run_scenario(&sc, OpforProfile::Probing, OpforProfile::Aggressive, 3).unwrap().with_latency_of(&run));
    }

    impl ScenarioRun {
        fn with_latency_of(mut self, other: &ScenarioRun) -> Self {
            for (a, b) in self.decisions.iter_mut().zip(&other.decisions) {
                a.latency_micros = b.latency_micros;
            }
            self
        }
    }
}
