//! Open-loop request generators and the key → bucket hash.

use serde::{Deserialize, Serialize};

use crate::engine::{SimTime, SplitMix64};
use crate::topology::TopologyError;

/// Largest key space accepted for zipf sampling (exact inverse-CDF table).
pub const MAX_ZIPF_KEYS: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Service {
        farm: String,
        service: String,
    },
    /// A service name resolved through the geoplex router.
    Geoplex {
        service: String,
    },
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Service { farm, service } => write!(f, "{farm}/{service}"),
            Target::Geoplex { service } => write!(f, "{service}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ArrivalProcess {
    Poisson { rate: f64 },
    Fixed { interval_us: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KeyDist {
    Uniform,
    Zipf {
        exponent: f64,
    },
    /// Key = request id mod key space; spreads requests exactly evenly.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    pub target: Target,
    pub arrival: ArrivalProcess,
    pub read_fraction: f64,
    pub key_space: u64,
    pub key_dist: KeyDist,
    pub deadline_us: u64,
    pub demand_us: u64,
    pub write_demand_us: u64,
    pub start: SimTime,
    pub duration_us: u64,
}

impl WorkloadSpec {
    pub fn end(&self) -> SimTime {
        self.start + self.duration_us
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let bad = |what, detail: String| {
            Err(TopologyError::Invalid {
                what,
                element: format!("workload {}", self.name),
                detail,
            })
        };
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return bad("read fraction", self.read_fraction.to_string());
        }
        if self.deadline_us == 0 {
            return bad("deadline", "must be positive".into());
        }
        if self.demand_us == 0 || self.write_demand_us == 0 {
            return bad("demand", "must be positive".into());
        }
        if self.key_space == 0 {
            return bad("key space", "must be positive".into());
        }
        match self.arrival {
            ArrivalProcess::Poisson { rate } if !(rate.is_finite() && rate > 0.0) => {
                return bad("arrival rate", rate.to_string())
            }
            ArrivalProcess::Fixed { interval_us: 0 } => {
                return bad("arrival interval", "must be positive".into())
            }
            _ => {}
        }
        if let KeyDist::Zipf { exponent } = self.key_dist {
            if !(exponent.is_finite() && exponent > 0.0) {
                return bad("zipf exponent", exponent.to_string());
            }
            if self.key_space > MAX_ZIPF_KEYS {
                return bad(
                    "key space",
                    format!("zipf supports at most {MAX_ZIPF_KEYS} keys"),
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestKind {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: u64,
    pub key: u64,
    pub kind: RequestKind,
    pub arrival: SimTime,
    pub deadline_abs: SimTime,
    /// Position in the forwarding chain, 0 at the entry service.
    pub hop: u32,
}

/// Next arrival after `t`, or `None` once the window is exhausted.
pub fn next_arrival(spec: &WorkloadSpec, rng: &mut SplitMix64, t: SimTime) -> Option<SimTime> {
    let gap = match spec.arrival {
        ArrivalProcess::Poisson { rate } => rng.exponential_us(rate).ok()?,
        ArrivalProcess::Fixed { interval_us } => interval_us,
    };
    let next = t + gap;
    (next < spec.end()).then_some(next)
}

/// Key sampler with the zipf cumulative table precomputed once.
#[derive(Debug, Clone)]
pub struct KeySampler {
    space: u64,
    dist: KeyDist,
    cdf: Vec<f64>,
}

impl KeySampler {
    pub fn new(space: u64, dist: KeyDist) -> Self {
        let cdf = match dist {
            KeyDist::Zipf { exponent } => {
                let mut acc = 0.0;
                let mut cdf: Vec<f64> = (1..=space)
                    .map(|rank| {
                        acc += 1.0 / (rank as f64).powf(exponent);
                        acc
                    })
                    .collect();
                let total = acc;
                for c in &mut cdf {
                    *c /= total;
                }
                cdf
            }
            _ => Vec::new(),
        };
        Self { space, dist, cdf }
    }

    pub fn sample(&self, rng: &mut SplitMix64, request_id: u64) -> u64 {
        match self.dist {
            KeyDist::Uniform => {
                let k = (rng.uniform01() * self.space as f64) as u64;
                k.min(self.space - 1)
            }
            KeyDist::Zipf { .. } => {
                let u = rng.uniform01();
                let idx = self.cdf.partition_point(|&c| c <= u);
                (idx as u64).min(self.space - 1)
            }
            KeyDist::Sequential => request_id % self.space,
        }
    }
}

/// Builds the request arriving at `t`. Always draws one uniform for the
/// read/write choice, then whatever the key distribution needs.
pub fn make_request(
    spec: &WorkloadSpec,
    keys: &KeySampler,
    rng: &mut SplitMix64,
    id: u64,
    t: SimTime,
) -> Request {
    let kind = if rng.uniform01() < spec.read_fraction {
        RequestKind::Read
    } else {
        RequestKind::Write
    };
    let key = keys.sample(rng, id);
    Request {
        id,
        key,
        kind,
        arrival: t,
        deadline_abs: t + spec.deadline_us,
        hop: 0,
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// FNV-1a over the key's little-endian bytes, reduced mod `buckets`.
pub fn key_to_bucket(key: u64, buckets: u32) -> u32 {
    (fnv1a64(&key.to_le_bytes()) % buckets.max(1) as u64) as u32
}
