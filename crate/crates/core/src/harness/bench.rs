//! Modeled end-to-end latency of the two frame profiles.
//!
//! A sample is `serialize + link + deserialize`: the serialization proxies
//! together cost `frame_len · per_byte_ns`, the link adds its base latency
//! and a uniform jitter draw. Both profiles consume the same jitter stream,
//! so a comparison is paired sample by sample.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{NodeId, ProcessData};
use crate::simnet::{derive_seed, LinkSpec};
use crate::wire::{self, FrameProfile, Message};

use super::metrics::Percentiles;

pub const MIN_MESSAGES: usize = 1000;
pub const DEFAULT_PER_BYTE_NS: u64 = 10;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum BenchError {
    #[error("message count {0} is below the minimum of 1000")]
    TooFewMessages(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub link: LinkSpec,
    pub message_count: usize,
    pub seed: u64,
    pub per_byte_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub profile: FrameProfile,
    pub config: BenchConfig,
    /// Nanoseconds.
    pub percentiles: Percentiles,
    #[serde(skip)]
    pub samples: Vec<u64>,
}

/// The payload of the `i`-th benchmark message: a process data frame with
/// a few seeded channels.
pub fn payload(seed: u64, i: u64) -> Message {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i, 0xBE4C));
    let channels = rng.random_range(1..=6);
    let mut inputs = BTreeMap::new();
    for c in 0..channels {
        inputs.insert(format!("ch{c}"), rng.random_range(-1000.0..1000.0));
    }
    Message::ProcessData(ProcessData { deployment_id: "bench".into(), seq_hint: i, inputs, timestamp: i * 1000 })
}

pub fn latency_bench(profile: FrameProfile, cfg: BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.message_count < MIN_MESSAGES {
        return Err(BenchError::TooFewMessages(cfg.message_count));
    }
    let mut jitter = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x11AC, 0));
    let mut samples = Vec::with_capacity(cfg.message_count);
    for i in 0..cfg.message_count as u64 {
        let msg = payload(cfg.seed, i);
        let frame = wire::encode(&msg, profile, NodeId(1), NodeId(2)).expect("benchmark payloads encode");
        let cost = frame.len() as u64 * cfg.per_byte_ns;
        let serialize = cost / 2;
        let deserialize = cost - serialize;
        let j = if cfg.link.jitter_max == 0 { 0 } else { jitter.random_range(0..=cfg.link.jitter_max * 1000) };
        samples.push(serialize + cfg.link.base_latency * 1000 + j + deserialize);
    }
    Ok(BenchReport { profile, config: cfg, percentiles: Percentiles::of(&samples), samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub compact: BenchReport,
    pub routed: BenchReport,
    /// Compact minus Routed at p50, p90, p99, max (ns).
    pub delta: [i64; 4],
    /// Every paired sample had Compact ≤ Routed.
    pub paired_ok: bool,
}

pub fn compare(cfg: BenchConfig) -> Result<Comparison, BenchError> {
    let compact = latency_bench(FrameProfile::Compact, cfg)?;
    let routed = latency_bench(FrameProfile::Routed, cfg)?;
    let (c, r) = (compact.percentiles, routed.percentiles);
    let d = |a: u64, b: u64| a as i64 - b as i64;
    let delta = [d(c.p50, r.p50), d(c.p90, r.p90), d(c.p99, r.p99), d(c.max, r.max)];
    let paired_ok = compact.samples.iter().zip(&routed.samples).all(|(a, b)| a <= b);
    Ok(Comparison { compact, routed, delta, paired_ok })
}

/// Fixed-width text histogram, `buckets` rows between min and max.
pub fn histogram(samples: &[u64], buckets: usize, width: usize) -> String {
    let mut out = String::new();
    if samples.is_empty() || buckets == 0 {
        return out;
    }
    let lo = *samples.iter().min().unwrap();
    let hi = *samples.iter().max().unwrap();
    let span = (hi - lo).max(1);
    let mut counts = alloc::vec![0u64; buckets];
    for s in samples {
        let b = (((s - lo) as u128 * buckets as u128) / (span as u128 + 1)) as usize;
        counts[b.min(buckets - 1)] += 1;
    }
    let peak = *counts.iter().max().unwrap();
    for (i, c) in counts.iter().enumerate() {
        let from = lo + (span as u128 * i as u128 / buckets as u128) as u64;
        let bar = (*c as u128 * width as u128).div_ceil(peak as u128) as usize;
        let _ = writeln!(out, "{from:>12} | {:<width$} | {c}", "#".repeat(bar));
    }
    out
}

pub fn table(reports: &[&BenchReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>10} {:>10} {:>10} {:>10} {:>10}", "profile", "count", "p50_ns", "p90_ns", "p99_ns", "max_ns");
    for r in reports {
        let p = r.percentiles;
        let name = match r.profile {
            FrameProfile::Compact => "compact",
            FrameProfile::Routed => "routed",
        };
        let _ = writeln!(out, "{name:<8} {:>10} {:>10} {:>10} {:>10} {:>10}", p.count, p.p50, p.p90, p.p99, p.max);
    }
    out
}
