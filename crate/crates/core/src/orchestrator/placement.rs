//! Placement score and selection.
//!
//! `score = min(cpu/cpu_max, mem/mem_max) − latency/latency_max`, maxima
//! over the live idle pool. All candidates share the denominator
//! `cpu_max · mem_max · latency_max`, so the comparison runs on exact
//! integer numerators. Ties go to the lowest node id.

use crate::model::NodeId;
use crate::note::Candidate;

/// Score numerator over the common denominator `cpu_max · mem_max · lat_max`.
pub fn score_numerator(c: &Candidate, cpu_max: u32, mem_max: u32, lat_max: u64) -> i128 {
    let (cpu_max, mem_max) = (i128::from(cpu_max.max(1)), i128::from(mem_max.max(1)));
    let lat_max = i128::from(lat_max.max(1));
    let capacity = (i128::from(c.cpu) * mem_max).min(i128::from(c.mem) * cpu_max);
    capacity * lat_max - i128::from(c.latency) * cpu_max * mem_max
}

/// The best eligible candidate, or `None` if none is eligible.
pub fn select(pool: &[Candidate]) -> Option<NodeId> {
    let cpu_max = pool.iter().map(|c| c.cpu).max()?;
    let mem_max = pool.iter().map(|c| c.mem).max()?;
    let lat_max = pool.iter().map(|c| c.latency).max()?;
    pool.iter()
        .filter(|c| c.eligible)
        .map(|c| (score_numerator(c, cpu_max, mem_max, lat_max), core::cmp::Reverse(c.node)))
        .max()
        .map(|(_, core::cmp::Reverse(n))| n)
}
