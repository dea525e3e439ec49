//! Request routing: geoplex farm selection, clone-set balancing (sprayer and
//! sieve), partition affinity, and write fan-out planning.
//!
//! Everything here is a pure decision over a view of the runtime state; the
//! simulation owns the state and applies the decisions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{GeoMode, PartitionMap, StorageModel, StorageVariant};
use crate::workload::{fnv1a64, key_to_bucket, RequestKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum BalancerKind {
    /// External sprayer cycling through members.
    #[default]
    RoundRobin,
    /// External sprayer choosing the shortest queue.
    LeastQueue,
    /// Members filter requests themselves via rendezvous hashing.
    Sieve,
}

impl BalancerKind {
    pub fn keyword(self) -> &'static str {
        match self {
            BalancerKind::RoundRobin => "round_robin",
            BalancerKind::LeastQueue => "least_queue",
            BalancerKind::Sieve => "sieve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BalancerPolicy {
    pub kind: BalancerKind,
    /// Time from a node failure until the balancer stops selecting it.
    pub detection_delay_us: u64,
}

pub const DEFAULT_DETECTION_US: u64 = 500_000;

impl Default for BalancerPolicy {
    fn default() -> Self {
        Self {
            kind: BalancerKind::RoundRobin,
            detection_delay_us: DEFAULT_DETECTION_US,
        }
    }
}

impl BalancerPolicy {
    pub fn new(kind: BalancerKind, detection_delay_us: u64) -> Self {
        Self {
            kind,
            detection_delay_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("no live farm in the geoplex")]
    NoLiveFarm,
    #[error("no healthy member")]
    NoHealthyMember,
    #[error("partition {0} is unavailable")]
    PartitionUnavailable(u32),
}

/// Picks a farm index out of `believed_live` (farm indices in geoplex order).
pub fn route_geoplex(
    request_id: u64,
    mode: GeoMode,
    believed_live: &[usize],
) -> Result<usize, RouteError> {
    if believed_live.is_empty() {
        return Err(RouteError::NoLiveFarm);
    }
    Ok(match mode {
        GeoMode::ActiveActive => believed_live[(request_id % believed_live.len() as u64) as usize],
        GeoMode::ActivePassive | GeoMode::None => believed_live[0],
    })
}

/// External sprayer. `members` must be ascending; `cursor` holds the last
/// round-robin pick for the service.
pub fn sprayer_pick(
    kind: BalancerKind,
    members: &[u32],
    cursor: &mut Option<u32>,
    queue_len: impl Fn(u32) -> usize,
) -> Result<u32, RouteError> {
    if members.is_empty() {
        return Err(RouteError::NoHealthyMember);
    }
    let pick = match kind {
        BalancerKind::LeastQueue => {
            // min_by_key keeps the first minimum, i.e. the lowest id.
            *members.iter().min_by_key(|&&m| queue_len(m)).unwrap()
        }
        _ => match *cursor {
            None => members[0],
            Some(last) => members
                .iter()
                .copied()
                .find(|&m| m > last)
                .unwrap_or(members[0]),
        },
    };
    if kind == BalancerKind::RoundRobin {
        *cursor = Some(pick);
    }
    Ok(pick)
}

/// Rendezvous weight of `member` for request `request_id`.
pub fn sieve_score(member: u32, request_id: u64) -> u64 {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&(member as u64).to_le_bytes());
    bytes[8..].copy_from_slice(&request_id.to_le_bytes());
    fnv1a64(&bytes)
}

/// Highest-random-weight choice; ties go to the lowest id.
pub fn sieve_pick(request_id: u64, members: &[u32]) -> Result<u32, RouteError> {
    members
        .iter()
        .copied()
        .map(|m| (sieve_score(m, request_id), std::cmp::Reverse(m)))
        .max()
        .map(|(_, std::cmp::Reverse(m))| m)
        .ok_or(RouteError::NoHealthyMember)
}

/// Clone-set pick under `kind`.
pub fn balance(
    kind: BalancerKind,
    request_id: u64,
    members: &[u32],
    cursor: &mut Option<u32>,
    queue_len: impl Fn(u32) -> usize,
) -> Result<u32, RouteError> {
    match kind {
        BalancerKind::Sieve => sieve_pick(request_id, members),
        _ => sprayer_pick(kind, members, cursor, queue_len),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffinityTarget {
    pub bucket: u32,
    pub partition: u32,
    pub pack: u32,
    pub member: u32,
}

/// Data-tier routing: key → bucket → partition → serving member.
pub fn affinity_route(key: u64, map: &PartitionMap) -> Result<AffinityTarget, RouteError> {
    let bucket = key_to_bucket(key, map.bucket_count);
    let partition = map.assignment[bucket as usize];
    match map.serving[partition as usize] {
        Some((pack, member)) => Ok(AffinityTarget {
            bucket,
            partition,
            pack,
            member,
        }),
        None => Err(RouteError::PartitionUnavailable(partition)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteDecision {
    /// Nodes that execute the request. More than one only for shared-nothing
    /// writes.
    pub nodes: Vec<u32>,
    /// Busy time of the shared store for a shared-disk write.
    pub store_busy_us: Option<u64>,
}

impl RouteDecision {
    pub fn write_amplification(&self) -> usize {
        self.nodes.len()
    }
}

/// Expands a clone-set pick into the set of executions.
///
/// `healthy` is the balancer's view of the clone set (ascending ids) and
/// `picked` its single-node choice.
pub fn plan_fanout(
    kind: RequestKind,
    storage: &StorageModel,
    picked: u32,
    healthy: &[u32],
    write_demand_us: u64,
) -> RouteDecision {
    match (kind, storage.variant) {
        (RequestKind::Read, _) => RouteDecision {
            nodes: vec![picked],
            store_busy_us: None,
        },
        (RequestKind::Write, StorageVariant::SharedNothing) => RouteDecision {
            nodes: healthy.to_vec(),
            store_busy_us: None,
        },
        (RequestKind::Write, StorageVariant::SharedDisk) => {
            let peers = healthy.len().max(1) as u64;
            RouteDecision {
                nodes: vec![picked],
                store_busy_us: Some(write_demand_us + storage.invalidation_cost_us * (peers - 1)),
            }
        }
    }
}
