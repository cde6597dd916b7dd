//! Parallel failure-time sweeps. Points run on the rayon pool and are
//! folded in grid order, so the report matches the sequential one.

use rayon::prelude::*;
use vpc_core::harness::{sweep_grid, sweep_point, ScenarioScript, ScriptError, SweepReport, Target};
use vpc_core::model::Micros;

pub fn par_sweep(
    base: &ScenarioScript,
    target: &Target,
    t_range: (Micros, Micros),
    step: Micros,
    seeds: &[u64],
) -> Result<SweepReport, ScriptError> {
    let points = sweep_grid(t_range, step, seeds)
        .into_par_iter()
        .map(|(t, seed)| sweep_point(base, target, t, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = SweepReport::default();
    for p in points {
        report.push(p);
    }
    Ok(report)
}
