//! Adjudication throughput measurement.

use super::{run_scenario, OpforProfile, Scenario};
use crate::error::{bail, Result};
use crate::profile::MachineDescriptor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::{Duration, Instant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    pub decisions: u64,
    pub seconds: f64,
    pub rate_per_hour: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub total_decisions: u64,
    /// Summed over scenarios, which run concurrently.
    pub rate_per_hour: f64,
    pub machine: MachineDescriptor,
}

impl BenchReport {
    /// CSV with `scenario,decisions,seconds,rate` rows.
    pub fn write_csv(&self, path: &Path, comment: &str) -> Result<()> {
        let mut text = format!("{comment}\n{}", self.machine.comment_lines());
        text.push_str("scenario,decisions,seconds,rate\n");
        for r in &self.rows {
            text.push_str(&format!("{},{},{:.6},{:.1}\n", r.scenario, r.decisions, r.seconds, r.rate_per_hour));
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Replays each scenario (aggressive blue against probing red, cycling
/// seeds) for `duration` and extrapolates adjudications per hour.
pub fn throughput_bench(scenarios: &[Scenario], duration: Duration) -> Result<BenchReport> {
    if duration < Duration::from_secs(1) {
        bail!(Input, "bench duration must be at least one second");
    }
    let rows: Vec<BenchRow> = scenarios
        .par_iter()
        .map(|sc| {
            let start = Instant::now();
            let mut decisions = 0u64;
            let mut seed = 0u64;
            while start.elapsed() < duration {
                decisions += run_scenario(sc, OpforProfile::Aggressive, OpforProfile::Probing, seed)?.decisions.len() as u64;
                seed += 1;
            }
            let seconds = start.elapsed().as_secs_f64();
            Ok(BenchRow { scenario: sc.name.clone(), decisions, seconds, rate_per_hour: decisions as f64 / seconds * 3600.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    let total_decisions = rows.iter().map(|r| r.decisions).sum();
    let rate_per_hour = rows.iter().map(|r| r.rate_per_hour).sum();
    Ok(BenchReport { rows, total_decisions, rate_per_hour, machine: MachineDescriptor::detect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_short() {
        let r = throughput_bench(&[], Duration::from_secs(1)).unwrap();
        assert_eq!((r.total_decisions, r.rate_per_hour), (0, 0.0));
        assert!(throughput_bench(&[], Duration::from_millis(10)).is_err());
    }
}
