//! Node state machine, RAID masking, pack failover, and online scaling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::topology::{bucket_counts, Failback, PackMode, RaidLevel, StorageVariant};

pub const DEFAULT_TAKEOVER_US: u64 = 2_000_000;
pub const DEFAULT_PROVISION_US: u64 = 1_000_000;
/// 100 MB/s.
pub const DEFAULT_COPY_RATE: f64 = 100e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeState {
    Healthy,
    /// Running on a RAID array with a masked disk fault.
    Degraded,
    Failed,
    /// Newly added clone copying state; not yet routable.
    Syncing,
}

impl NodeState {
    pub fn is_routable(self) -> bool {
        matches!(self, NodeState::Healthy | NodeState::Degraded)
    }

    pub fn can_transition_to(self, to: NodeState) -> bool {
        use NodeState::*;
        matches!(
            (self, to),
            (Healthy, Failed)
                | (Healthy, Degraded)
                | (Degraded, Healthy)
                | (Degraded, Failed)
                | (Failed, Healthy)
                | (Syncing, Healthy)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LifecycleError {
    #[error("illegal node transition {from:?} -> {to:?}")]
    IllegalTransition { from: NodeState, to: NodeState },
    #[error("unknown path `{0}`")]
    UnknownPath(String),
    #[error("service `{0}` is not a clone set")]
    NotRacs(String),
    #[error("service `{0}` is not partitioned")]
    NotRaps(String),
    #[error("no surviving pack member")]
    NoSurvivor,
}

pub fn check_transition(from: NodeState, to: NodeState) -> Result<(), LifecycleError> {
    if from.can_transition_to(to) {
        Ok(())
    } else {
        Err(LifecycleError::IllegalTransition { from, to })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiskOutcome {
    Masked,
    Exposed,
}

/// Effect of one more disk fault on a node in `state`.
pub fn raid_mask(raid: RaidLevel, state: NodeState) -> DiskOutcome {
    match (raid.masks_single_fault(), state) {
        (true, NodeState::Healthy) => DiskOutcome::Masked,
        _ => DiskOutcome::Exposed,
    }
}

/// Node path inside a farm: `farm/service/node`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodePath {
    pub farm: String,
    pub service: String,
    pub node: String,
}

impl std::fmt::Display for NodePath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.farm, self.service, self.node)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioAction {
    FailNode(NodePath),
    RepairNode(NodePath),
    FailDisk(NodePath),
    RepairDisk(NodePath),
    FailSite(String),
    RepairSite(String),
    AddClone { farm: String, service: String },
    AddPartition { farm: String, service: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub at: SimTime,
    pub action: ScenarioAction,
}

/// `ceil(bytes / rate)` expressed in microseconds.
pub fn transfer_us(bytes: u64, bytes_per_sec: f64) -> u64 {
    if bytes == 0 {
        return 0;
    }
    (bytes as f64 * 1e6 / bytes_per_sec).ceil() as u64
}

/// When a clone added at `t` becomes routable. Shared-nothing clones copy the
/// full service state first; shared-disk clones are stateless and only need
/// provisioning.
pub fn clone_join_time(
    storage: StorageVariant,
    state_size: u64,
    copy_rate: f64,
    provision_us: u64,
    t: SimTime,
) -> SimTime {
    match storage {
        StorageVariant::SharedNothing => t + transfer_us(state_size, copy_rate),
        StorageVariant::SharedDisk => t + provision_us,
    }
}

/// Reassigns `orphaned` partitions to `survivors` (ascending ids).
///
/// Active-active: each partition goes to the survivor currently serving the
/// fewest partitions (ties to the lowest id). Active-passive: the first
/// survivor (the standby) takes everything.
pub fn pack_failover(
    mode: PackMode,
    orphaned: &[u32],
    survivors: &[u32],
    load: &BTreeMap<u32, usize>,
) -> Result<Vec<(u32, u32)>, LifecycleError> {
    if survivors.is_empty() {
        return Err(LifecycleError::NoSurvivor);
    }
    let mut load: BTreeMap<u32, usize> = survivors
        .iter()
        .map(|&m| (m, load.get(&m).copied().unwrap_or(0)))
        .collect();
    let mut out = Vec::with_capacity(orphaned.len());
    for &p in orphaned {
        let member = match mode {
            PackMode::ActivePassive => survivors[0],
            PackMode::ActiveActive => {
                let (&m, _) = load
                    .iter()
                    .min_by_key(|(&m, &n)| (n, m))
                    .expect("survivors non-empty");
                m
            }
        };
        *load.get_mut(&member).unwrap() += 1;
        out.push((p, member));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Takeover {
    pub partition: u32,
    pub member: u32,
    pub done_at: SimTime,
    pub token: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionState {
    Served(u32),
    Unserved {
        /// Member whose failure orphaned the partition.
        lost_owner: Option<u32>,
        pending: Option<Takeover>,
    },
}

/// Runtime serving table of one pack.
#[derive(Debug, Clone)]
pub struct PackRuntime {
    pub mode: PackMode,
    pub members: Vec<u32>,
    pub detection_delay_us: u64,
    pub takeover_us: u64,
    pub failback: Failback,
    /// Partition → member serving it at t=0.
    pub home: BTreeMap<u32, u32>,
    pub partitions: BTreeMap<u32, PartitionState>,
}

impl PackRuntime {
    pub fn new(
        mode: PackMode,
        members: Vec<u32>,
        initial: &[(u32, u32)],
        detection_delay_us: u64,
        takeover_us: u64,
        failback: Failback,
    ) -> Self {
        Self {
            mode,
            members,
            detection_delay_us,
            takeover_us,
            failback,
            home: initial.iter().copied().collect(),
            partitions: initial
                .iter()
                .map(|&(p, m)| (p, PartitionState::Served(m)))
                .collect(),
        }
    }

    pub fn serving(&self, partition: u32) -> Option<u32> {
        match self.partitions.get(&partition)? {
            PartitionState::Served(m) => Some(*m),
            PartitionState::Unserved { .. } => None,
        }
    }

    /// Partitions served or about to be served by each member.
    fn load(&self) -> BTreeMap<u32, usize> {
        let mut load = BTreeMap::new();
        for state in self.partitions.values() {
            let m = match state {
                PartitionState::Served(m) => *m,
                PartitionState::Unserved {
                    pending: Some(t), ..
                } => t.member,
                _ => continue,
            };
            *load.entry(m).or_insert(0) += 1;
        }
        load
    }

    /// `member` just failed: everything it served or was taking over becomes
    /// unserved. Returns the affected partitions.
    pub fn member_failed(&mut self, member: u32) -> Vec<u32> {
        let mut hit = Vec::new();
        for (&p, state) in self.partitions.iter_mut() {
            match *state {
                PartitionState::Served(m) if m == member => {
                    *state = PartitionState::Unserved {
                        lost_owner: Some(member),
                        pending: None,
                    };
                    hit.push(p);
                }
                PartitionState::Unserved {
                    pending: Some(t), ..
                } if t.member == member => {
                    *state = PartitionState::Unserved {
                        lost_owner: Some(member),
                        pending: None,
                    };
                    hit.push(p);
                }
                _ => {}
            }
        }
        hit
    }

    /// Failure of `member` detected at `now`: plan takeovers for the
    /// partitions it orphaned. `survivors` are the live members, ascending.
    pub fn failure_detected(
        &mut self,
        member: u32,
        survivors: &[u32],
        now: SimTime,
        next_token: &mut u64,
    ) -> Result<Vec<Takeover>, LifecycleError> {
        let orphaned: Vec<u32> = self
            .partitions
            .iter()
            .filter_map(|(&p, s)| match s {
                PartitionState::Unserved {
                    lost_owner,
                    pending: None,
                } if *lost_owner == Some(member) || lost_owner.is_none() => Some(p),
                _ => None,
            })
            .collect();
        if orphaned.is_empty() {
            return Ok(Vec::new());
        }
        let plan = pack_failover(self.mode, &orphaned, survivors, &self.load())?;
        let done_at = now + self.takeover_us;
        let mut out = Vec::with_capacity(plan.len());
        for (partition, to) in plan {
            let t = Takeover {
                partition,
                member: to,
                done_at,
                token: *next_token,
            };
            *next_token += 1;
            if let Some(PartitionState::Unserved { pending, .. }) =
                self.partitions.get_mut(&partition)
            {
                *pending = Some(t);
            }
            out.push(t);
        }
        Ok(out)
    }

    /// Completes a takeover if it is still the pending one. Returns whether
    /// the partition is now served.
    pub fn takeover_done(&mut self, partition: u32, token: u64) -> bool {
        let Some(state) = self.partitions.get_mut(&partition) else {
            return false;
        };
        match *state {
            PartitionState::Unserved {
                pending: Some(t), ..
            } if t.token == token => {
                *state = PartitionState::Served(t.member);
                true
            }
            _ => false,
        }
    }

    /// `member` is back. Partitions with no takeover in progress are served by
    /// it immediately; with failback enabled, its home partitions are moved
    /// back after a takeover window. Returns (immediately served, takeovers).
    pub fn member_repaired(
        &mut self,
        member: u32,
        now: SimTime,
        next_token: &mut u64,
    ) -> (Vec<u32>, Vec<Takeover>) {
        let mut served = Vec::new();
        for (&p, state) in self.partitions.iter_mut() {
            if let PartitionState::Unserved { pending: None, .. } = state {
                *state = PartitionState::Served(member);
                served.push(p);
            }
        }
        let mut moves = Vec::new();
        if self.failback == Failback::OnRepair {
            for (&p, &home) in &self.home {
                if home != member {
                    continue;
                }
                let Some(state) = self.partitions.get_mut(&p) else {
                    continue;
                };
                let done_at = match *state {
                    PartitionState::Served(m) if m != member => now + self.takeover_us,
                    // A takeover elsewhere is under way; send it home instead.
                    PartitionState::Unserved {
                        pending: Some(t), ..
                    } if t.member != member => t.done_at,
                    _ => continue,
                };
                let t = Takeover {
                    partition: p,
                    member,
                    done_at,
                    token: *next_token,
                };
                *next_token += 1;
                *state = PartitionState::Unserved {
                    lost_owner: None,
                    pending: Some(t),
                };
                moves.push(t);
            }
        }
        (served, moves)
    }

    /// Adds a freshly provisioned partition served by `member`.
    pub fn host(&mut self, partition: u32, member: u32) {
        self.home.insert(partition, member);
        self.partitions
            .insert(partition, PartitionState::Served(member));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BucketMove {
    pub bucket: u32,
    pub from: u32,
    pub to: u32,
}

/// Greedy rebalance: repeatedly move the lowest-numbered bucket of the most
/// loaded partition to the least loaded one (ties to the lowest partition id)
/// until counts differ by at most one.
pub fn rebalance_plan(assignment: &[u32], partitions: u32) -> Vec<BucketMove> {
    let mut assignment = assignment.to_vec();
    let mut counts = bucket_counts(&assignment, partitions);
    let mut plan = Vec::new();
    loop {
        let (max_p, &max_n) = counts
            .iter()
            .enumerate()
            .min_by_key(|(p, &n)| (std::cmp::Reverse(n), *p))
            .expect("at least one partition");
        let (min_p, &min_n) = counts
            .iter()
            .enumerate()
            .min_by_key(|(p, &n)| (n, *p))
            .unwrap();
        if max_n - min_n <= 1 {
            return plan;
        }
        let bucket = assignment
            .iter()
            .position(|&p| p as usize == max_p)
            .expect("most loaded partition owns a bucket");
        assignment[bucket] = min_p as u32;
        counts[max_p] -= 1;
        counts[min_p] += 1;
        plan.push(BucketMove {
            bucket: bucket as u32,
            from: max_p as u32,
            to: min_p as u32,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn legal_transitions() {
        use NodeState::*;
        let all = [Healthy, Degraded, Failed, Syncing];
        let legal = [
            (Healthy, Failed),
            (Healthy, Degraded),
            (Degraded, Healthy),
            (Degraded, Failed),
            (Failed, Healthy),
            (Syncing, Healthy),
        ];
        for from in all {
            for to in all {
                assert_eq!(
                    from.can_transition_to(to),
                    legal.contains(&(from, to)),
                    "{from:?} -> {to:?}"
                );
            }
        }
        assert!(check_transition(Failed, Degraded).is_err());
    }

    #[test]
    fn raid_rules() {
        assert_eq!(
            raid_mask(RaidLevel::Raid1, NodeState::Healthy),
            DiskOutcome::Masked
        );
        assert_eq!(
            raid_mask(RaidLevel::None, NodeState::Healthy),
            DiskOutcome::Exposed
        );
        assert_eq!(
            raid_mask(RaidLevel::Raid5, NodeState::Degraded),
            DiskOutcome::Exposed
        );
        assert_eq!(
            raid_mask(RaidLevel::Raid5, NodeState::Healthy),
            DiskOutcome::Masked
        );
    }

    #[test]
    fn clone_join_times() {
        // 10 GB at 100 MB/s is 100 s.
        assert_eq!(
            clone_join_time(
                StorageVariant::SharedNothing,
                10_000_000_000,
                100e6,
                1_000_000,
                SimTime::ZERO
            ),
            SimTime::from_secs(100)
        );
        assert_eq!(
            clone_join_time(
                StorageVariant::SharedDisk,
                10_000_000_000,
                100e6,
                DEFAULT_PROVISION_US,
                SimTime::from_secs(5)
            ),
            SimTime::from_secs(6)
        );
        assert_eq!(transfer_us(1, 3.0), 333_334);
    }

    #[test]
    fn active_passive_window() {
        // Primary fails at 100 s, detect 5 s, takeover 10 s.
        let mut pack = PackRuntime::new(
            PackMode::ActivePassive,
            vec![0, 1],
            &[(0, 0)],
            5_000_000,
            10_000_000,
            Failback::None,
        );
        let mut token = 0;
        assert_eq!(pack.member_failed(0), vec![0]);
        assert_eq!(pack.serving(0), None);
        let detect = SimTime::from_secs(100) + pack.detection_delay_us;
        let plan = pack.failure_detected(0, &[1], detect, &mut token).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].member, 1);
        assert_eq!(plan[0].done_at, SimTime::from_secs(115));
        assert_eq!(pack.serving(0), None);
        assert!(pack.takeover_done(0, plan[0].token));
        assert_eq!(pack.serving(0), Some(1));

        // No failback: the repaired primary stays standby.
        let (served, moves) = pack.member_repaired(0, SimTime::from_secs(200), &mut token);
        assert!(served.is_empty() && moves.is_empty());
        assert_eq!(pack.serving(0), Some(1));
    }

    #[test]
    fn active_active_survivor_takes_all() {
        let mut pack = PackRuntime::new(
            PackMode::ActiveActive,
            vec![0, 1],
            &[(0, 0), (1, 1), (2, 0), (3, 1)],
            0,
            0,
            Failback::None,
        );
        let mut token = 0;
        pack.member_failed(1);
        let plan = pack
            .failure_detected(1, &[0], SimTime::ZERO, &mut token)
            .unwrap();
        for t in &plan {
            assert!(pack.takeover_done(t.partition, t.token));
        }
        assert!((0..4).all(|p| pack.serving(p) == Some(0)));
    }

    #[test]
    fn spreads_orphans_over_least_loaded() {
        let load = BTreeMap::from([(0, 2), (1, 0), (2, 1)]);
        let plan = pack_failover(PackMode::ActiveActive, &[7, 8, 9], &[0, 1, 2], &load).unwrap();
        assert_eq!(plan, vec![(7, 1), (8, 1), (9, 2)]);
        let plan = pack_failover(PackMode::ActivePassive, &[7, 8], &[1, 2], &load).unwrap();
        assert_eq!(plan, vec![(7, 1), (8, 1)]);
    }

    #[test]
    fn no_survivor_until_repair() {
        let mut pack = PackRuntime::new(
            PackMode::ActivePassive,
            vec![0, 1],
            &[(0, 0)],
            0,
            0,
            Failback::None,
        );
        let mut token = 0;
        pack.member_failed(0);
        pack.member_failed(1);
        assert_eq!(
            pack.failure_detected(0, &[], SimTime::ZERO, &mut token),
            Err(LifecycleError::NoSurvivor)
        );
        let (served, _) = pack.member_repaired(1, SimTime::from_secs(1), &mut token);
        assert_eq!(served, vec![0]);
        assert_eq!(pack.serving(0), Some(1));
    }

    #[test]
    fn takeover_target_dies_mid_window() {
        let mut pack = PackRuntime::new(
            PackMode::ActivePassive,
            vec![0, 1, 2],
            &[(0, 0)],
            0,
            10,
            Failback::None,
        );
        let mut token = 0;
        pack.member_failed(0);
        let plan = pack
            .failure_detected(0, &[1, 2], SimTime::ZERO, &mut token)
            .unwrap();
        assert_eq!(plan[0].member, 1);
        pack.member_failed(1);
        assert!(!pack.takeover_done(0, plan[0].token));
        let plan = pack
            .failure_detected(1, &[2], SimTime(5), &mut token)
            .unwrap();
        assert_eq!(plan[0].member, 2);
        assert!(pack.takeover_done(0, plan[0].token));
        assert_eq!(pack.serving(0), Some(2));
    }

    #[test]
    fn failback_moves_home_partitions() {
        let mut pack = PackRuntime::new(
            PackMode::ActivePassive,
            vec![0, 1],
            &[(0, 0)],
            0,
            10,
            Failback::OnRepair,
        );
        let mut token = 0;
        pack.member_failed(0);
        let plan = pack
            .failure_detected(0, &[1], SimTime::ZERO, &mut token)
            .unwrap();
        pack.takeover_done(0, plan[0].token);
        let (served, moves) = pack.member_repaired(0, SimTime(100), &mut token);
        assert!(served.is_empty());
        assert_eq!(moves.len(), 1);
        assert_eq!(pack.serving(0), None);
        assert_eq!(moves[0].done_at, SimTime(110));
        assert!(pack.takeover_done(0, moves[0].token));
        assert_eq!(pack.serving(0), Some(0));
    }

    #[test]
    fn repair_during_takeover_redirects_home() {
        let mut pack = PackRuntime::new(
            PackMode::ActivePassive,
            vec![0, 1],
            &[(0, 0)],
            0,
            10,
            Failback::OnRepair,
        );
        let mut token = 0;
        pack.member_failed(0);
        let plan = pack
            .failure_detected(0, &[1], SimTime::ZERO, &mut token)
            .unwrap();
        let (served, moves) = pack.member_repaired(0, SimTime(4), &mut token);
        assert!(served.is_empty());
        assert_eq!(moves[0].member, 0);
        assert_eq!(moves[0].done_at, SimTime(10));
        assert!(!pack.takeover_done(0, plan[0].token));
        assert!(pack.takeover_done(0, moves[0].token));
        assert_eq!(pack.serving(0), Some(0));
    }

    #[test]
    fn rebalance_two_to_three() {
        let assignment = [0, 1, 0, 1, 0, 1];
        let plan = rebalance_plan(&assignment, 3);
        assert_eq!(
            plan,
            vec![
                BucketMove {
                    bucket: 0,
                    from: 0,
                    to: 2
                },
                BucketMove {
                    bucket: 1,
                    from: 1,
                    to: 2
                },
            ]
        );
        let mut after = assignment.to_vec();
        for m in &plan {
            after[m.bucket as usize] = m.to;
        }
        assert_eq!(bucket_counts(&after, 3), vec![2, 2, 2]);
    }

    #[test]
    fn rebalance_already_balanced() {
        assert!(rebalance_plan(&[0, 1, 2, 0, 1], 3).is_empty());
    }

    proptest! {
        #[test]
        fn rebalance_ends_balanced(p in 1u32..16, extra in 0u32..64, grow in 1u32..4) {
            let b = p + extra + grow;
            let assignment: Vec<u32> = (0..b).map(|x| x % p).collect();
            let plan = rebalance_plan(&assignment, p + grow);
            let mut after = assignment.clone();
            for m in &plan {
                prop_assert_eq!(after[m.bucket as usize], m.from);
                after[m.bucket as usize] = m.to;
            }
            let counts = bucket_counts(&after, p + grow);
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }
}
