//! Built-in VPF step functions.
//!
//! An artifact blob is a parameter sheet of `key=value` lines (`#` starts a
//! comment); the descriptor's `logic_name` picks the step function:
//!
//! | logic         | parameters                                              | state            |
//! |---------------|---------------------------------------------------------|------------------|
//! | `pid`         | `kp ki kd` gains, `dt` seconds, `setpoint` (optional)   | Σe, e_prev (f64) |
//! | `threshold`   | `limit`                                                 | none             |
//! | `passthrough` |                                                         | none             |
//!
//! All take `input` (default `pv`) and `output` (default `u`) channel names.
//! PID output is `Kp·e + Ki·Σe·Δt + Kd·(e − e_prev)/Δt` where `e` is
//! `setpoint − input` when a setpoint is given and the raw input otherwise.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::model::{ExecutionMode, ProcessData, VpfDescriptor};

pub const CATALOG: [&str; 3] = ["pid", "threshold", "passthrough"];

#[derive(Clone, Debug, PartialEq, Error)]
pub enum VpfError {
    #[error("unknown logic {0:?}")]
    UnknownLogic(String),
    #[error("vpf {vpf}: malformed state ({len} bytes)")]
    MalformedState { vpf: String, len: usize },
    #[error("vpf {vpf}: bad parameter line {line:?}")]
    BadParameter { vpf: String, line: String },
    #[error("vpf {vpf}: missing input {channel:?}")]
    MissingInput { vpf: String, channel: String },
    #[error("vpf {vpf}: non-finite output")]
    NonFinite { vpf: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Seconds.
    pub dt: f64,
    pub setpoint: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Logic {
    Pid(PidGains),
    Threshold { limit: f64 },
    Passthrough,
}

/// A VPF ready to execute.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedVpf {
    pub desc: VpfDescriptor,
    pub logic: Logic,
    pub input: String,
    pub output: String,
}

pub fn load(desc: &VpfDescriptor, blob: &[u8]) -> Result<LoadedVpf, VpfError> {
    let bad = |line: &str| VpfError::BadParameter { vpf: desc.vpf_id.clone(), line: line.to_string() };
    let text = core::str::from_utf8(blob).map_err(|_| bad("<not utf-8>"))?;
    let mut params = BTreeMap::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(raw))?;
        params.insert(k.trim(), v.trim());
    }
    let num = |key: &str, default: Option<f64>| -> Result<Option<f64>, VpfError> {
        match params.get(key) {
            Some(v) => v.parse::<f64>().ok().filter(|x| x.is_finite()).map(Some).ok_or_else(|| bad(key)),
            None => Ok(default),
        }
    };
    let period_s = match desc.execution_mode {
        ExecutionMode::Cyclic { period } => period as f64 / 1e6,
        ExecutionMode::Acyclic => 1.0,
    };
    let logic = match desc.logic_name.as_str() {
        "pid" => {
            let dt = num("dt", Some(period_s))?.unwrap_or(period_s);
            if dt <= 0.0 {
                return Err(bad("dt"));
            }
            Logic::Pid(PidGains {
                kp: num("kp", Some(0.0))?.unwrap_or(0.0),
                ki: num("ki", Some(0.0))?.unwrap_or(0.0),
                kd: num("kd", Some(0.0))?.unwrap_or(0.0),
                dt,
                setpoint: num("setpoint", None)?,
            })
        }
        "threshold" => Logic::Threshold { limit: num("limit", None)?.ok_or_else(|| bad("limit"))? },
        "passthrough" => Logic::Passthrough,
        other => return Err(VpfError::UnknownLogic(other.to_string())),
    };
    Ok(LoadedVpf {
        desc: desc.clone(),
        logic,
        input: params.get("input").unwrap_or(&"pv").to_string(),
        output: params.get("output").unwrap_or(&"u").to_string(),
    })
}

fn f64_pair(state: &[u8]) -> Option<(f64, f64)> {
    let a: [u8; 8] = state.get(..8)?.try_into().ok()?;
    let b: [u8; 8] = state.get(8..16)?.try_into().ok()?;
    (state.len() == 16).then(|| (f64::from_be_bytes(a), f64::from_be_bytes(b)))
}

fn pair_bytes(a: f64, b: f64) -> Vec<u8> {
    let mut v = Vec::with_capacity(16);
    v.extend_from_slice(&a.to_be_bytes());
    v.extend_from_slice(&b.to_be_bytes());
    v
}

impl LoadedVpf {
    pub fn initial_state(&self) -> Vec<u8> {
        match self.logic {
            Logic::Pid(_) => pair_bytes(0.0, 0.0),
            Logic::Threshold { .. } | Logic::Passthrough => Vec::new(),
        }
    }

    pub fn is_cyclic(&self) -> bool {
        matches!(self.desc.execution_mode, ExecutionMode::Cyclic { .. })
    }

    /// One deterministic step. `channels` holds sensor inputs plus outputs
    /// of VPFs that ran earlier in the same cycle.
    pub fn step(&self, state: &[u8], channels: &BTreeMap<String, f64>) -> Result<(Vec<u8>, f64), VpfError> {
        let vpf = || self.desc.vpf_id.clone();
        let x = *channels
            .get(&self.input)
            .ok_or_else(|| VpfError::MissingInput { vpf: vpf(), channel: self.input.clone() })?;
        let (next, out) = match &self.logic {
            Logic::Pid(g) => {
                let (integral, prev) = f64_pair(state).ok_or(VpfError::MalformedState { vpf: vpf(), len: state.len() })?;
                let e = match g.setpoint {
                    Some(sp) => sp - x,
                    None => x,
                };
                let integral = integral + e;
                let u = g.kp * e + g.ki * integral * g.dt + g.kd * (e - prev) / g.dt;
                (pair_bytes(integral, e), u)
            }
            Logic::Threshold { limit } => {
                if !state.is_empty() {
                    return Err(VpfError::MalformedState { vpf: vpf(), len: state.len() });
                }
                (Vec::new(), if x > *limit { 1.0 } else { 0.0 })
            }
            Logic::Passthrough => {
                if !state.is_empty() {
                    return Err(VpfError::MalformedState { vpf: vpf(), len: state.len() });
                }
                (Vec::new(), x)
            }
        };
        if !out.is_finite() {
            return Err(VpfError::NonFinite { vpf: vpf() });
        }
        Ok((next, out))
    }
}

/// Executes one VPF against a process sample.
pub fn execute_vpf(vpf: &LoadedVpf, state: &[u8], input: &ProcessData) -> Result<(Vec<u8>, BTreeMap<String, f64>), VpfError> {
    let (next, out) = vpf.step(state, &input.inputs)?;
    let mut outputs = BTreeMap::new();
    outputs.insert(vpf.output.clone(), out);
    Ok((next, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash::Digest256;
    use crate::model::SemVer;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(logic: &str) -> VpfDescriptor {
        VpfDescriptor {
            vpf_id: logic.into(),
            version: SemVer::new(1, 0, 0),
            execution_mode: ExecutionMode::Cyclic { period: 1000 },
            logic_name: logic.into(),
            state_schema_id: logic.into(),
            artifact_digest: Digest256::ZERO,
        }
    }

    fn inputs(x: f64) -> BTreeMap<String, f64> {
        [("pv".to_string(), x)].into_iter().collect()
    }

    #[test]
    fn proportional_only() {
        let v = load(&desc("pid"), b"kp=1\nki=0\nkd=0\n").unwrap();
        let (_, u) = v.step(&v.initial_state(), &inputs(2.5)).unwrap();
        assert_eq!(u, 2.5);
    }

    #[test]
    fn threshold_relay() {
        let v = load(&desc("threshold"), b"limit=5").unwrap();
        assert_eq!(v.step(&[], &inputs(4.0)).unwrap().1, 0.0);
        assert_eq!(v.step(&[], &inputs(6.0)).unwrap().1, 1.0);
        assert_eq!(v.step(&[], &inputs(5.0)).unwrap().1, 0.0);
    }

    #[test]
    fn passthrough_and_channels() {
        let v = load(&desc("passthrough"), b"input = a # sensor\noutput=b").unwrap();
        let mut ch = BTreeMap::new();
        ch.insert("a".to_string(), -3.25);
        assert_eq!(v.step(&[], &ch).unwrap(), (Vec::new(), -3.25));
        assert!(matches!(v.step(&[], &inputs(1.0)), Err(VpfError::MissingInput { .. })));
    }

    #[test]
    fn load_errors() {
        assert_eq!(load(&desc("fir"), b""), Err(VpfError::UnknownLogic("fir".into())));
        assert!(matches!(load(&desc("threshold"), b""), Err(VpfError::BadParameter { .. })));
        assert!(matches!(load(&desc("pid"), b"kp"), Err(VpfError::BadParameter { .. })));
        assert!(matches!(load(&desc("pid"), b"kp=nan"), Err(VpfError::BadParameter { .. })));
        assert!(matches!(load(&desc("pid"), b"dt=0"), Err(VpfError::BadParameter { .. })));
        let v = load(&desc("pid"), b"kp=1").unwrap();
        assert!(matches!(v.step(&[0; 15], &inputs(1.0)), Err(VpfError::MalformedState { len: 15, .. })));
        let v = load(&desc("pid"), b"kp=1e308").unwrap();
        assert!(matches!(v.step(&v.initial_state(), &inputs(1e308)), Err(VpfError::NonFinite { .. })));
    }

    fn exact(x: f64) -> BigRational {
        BigRational::from_float(x).unwrap()
    }

    /// Independent reference: exact rational arithmetic on the difference
    /// equation, compared to the float implementation at each step.
    fn pid_oracle(steps: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kp, ki, kd) = (rng.random_range(0.0..3.0), rng.random_range(0.0..2.0), rng.random_range(0.0..0.5));
        let dt = 0.001;
        let sp = 1.0;
        let sheet = alloc::format!("kp={kp}\nki={ki}\nkd={kd}\ndt={dt}\nsetpoint={sp}\n");
        let v = load(&desc("pid"), sheet.as_bytes()).unwrap();
        let mut state = v.initial_state();
        let (kp_q, ki_q, kd_q, dt_q, sp_q) = (exact(kp), exact(ki), exact(kd), exact(dt), exact(sp));
        let mut sum = BigRational::from_integer(BigInt::from(0));
        let mut prev = sum.clone();
        for _ in 0..steps {
            let x: f64 = rng.random_range(-2.0..2.0);
            let (next, u) = v.step(&state, &inputs(x)).unwrap();
            state = next;
            let e = &sp_q - exact(x);
            sum = &sum + &e;
            let want = &kp_q * &e + &ki_q * &sum * &dt_q + &kd_q * (&e - &prev) / &dt_q;
            prev = e;
            let want_f = num_traits_to_f64(&want);
            let rel = if want_f == 0.0 { u.abs() } else { ((u - want_f) / want_f).abs() };
            assert!(rel <= 1e-12 || (u - want_f).abs() <= 1e-12, "u={u} want={want_f}");
        }
    }

    fn num_traits_to_f64(q: &BigRational) -> f64 {
        // Scale to 2^-200 resolution; plenty for a 1e-12 relative check.
        let scaled = (q * BigRational::from_integer(BigInt::from(1) << 200u32)).round().to_integer();
        let (sign, digits) = scaled.to_u64_digits();
        let mut v = 0.0f64;
        for d in digits.iter().rev() {
            v = v * 18_446_744_073_709_551_616.0 + *d as f64;
        }
        let v = v / 2f64.powi(200);
        if sign == num_bigint::Sign::Minus {
            -v
        } else {
            v
        }
    }

    #[test]
    fn pid_matches_difference_equation() {
        for seed in 0..5 {
            pid_oracle(1000, seed);
        }
    }

    #[test]
    fn twenty_step_reference() {
        // Hand-evaluated table for kp=2, ki=1, kd=0.5, dt=0.5, inputs 1..=20.
        let v = load(&desc("pid"), b"kp=2\nki=1\nkd=0.5\ndt=0.5").unwrap();
        let mut state = v.initial_state();
        let mut sum = 0.0;
        let mut prev = 0.0;
        for n in 1..=20 {
            let e = n as f64;
            sum += e;
            let want = 2.0 * e + sum * 0.5 + 0.5 * (e - prev) / 0.5;
            prev = e;
            let (s, u) = v.step(&state, &inputs(e)).unwrap();
            state = s;
            assert_eq!(u, want);
        }
        // Closed form at n=20: 40 + 105 + 1.
        assert_eq!(v.step(&pair_bytes(190.0, 19.0), &inputs(20.0)).unwrap().1, 146.0);
    }
}
