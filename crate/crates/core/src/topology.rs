//! Static farm model: geoplex → farm → service → (clones | partitions × packs).
//!
//! A [`Topology`] is built once from a [`GeoplexSpec`], validated, and never
//! mutated afterwards. Runtime membership changes (added clones, added
//! partitions, failures) live in the simulation state, not here.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifecycle::NodeState;
use crate::routing::BalancerPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RaidLevel {
    None,
    Raid1,
    Raid5,
}

impl RaidLevel {
    pub fn masks_single_fault(self) -> bool {
        !matches!(self, RaidLevel::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u32,
    /// Requests per second for a 1 ms reference request.
    pub service_rate: f64,
    pub disk_capacity: u64,
    pub raid: RaidLevel,
    /// Multiplier on `service_rate` while the node runs on a degraded array.
    pub degraded_rate_factor: f64,
}

impl NodeSpec {
    pub fn new(id: u32, service_rate: f64) -> Self {
        Self {
            id,
            service_rate,
            disk_capacity: 0,
            raid: RaidLevel::None,
            degraded_rate_factor: 1.0,
        }
    }

    pub fn label(&self) -> String {
        format!("n{}", self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StorageVariant {
    SharedNothing,
    SharedDisk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageModel {
    pub variant: StorageVariant,
    pub shared_store: Option<NodeSpec>,
    /// Per write, per attached peer other than the writer.
    pub invalidation_cost_us: u64,
}

impl StorageModel {
    pub fn shared_nothing() -> Self {
        Self {
            variant: StorageVariant::SharedNothing,
            shared_store: None,
            invalidation_cost_us: 0,
        }
    }

    pub fn shared_disk(store: NodeSpec, invalidation_cost_us: u64) -> Self {
        Self {
            variant: StorageVariant::SharedDisk,
            shared_store: Some(store),
            invalidation_cost_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ServiceKind {
    Racs,
    Raps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PackMode {
    ActiveActive,
    ActivePassive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Failback {
    #[default]
    None,
    OnRepair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackSpec {
    pub members: Vec<NodeSpec>,
    pub mode: PackMode,
    pub storage_variant: StorageVariant,
    pub partitions_hosted: Vec<u32>,
    pub takeover_us: u64,
    pub failback: Failback,
}

impl PackSpec {
    /// Lowest-id member; serves every hosted partition of an active-passive
    /// pack at t=0.
    pub fn primary(&self) -> Option<u32> {
        self.members.iter().map(|m| m.id).min()
    }

    /// Member serving each hosted partition at t=0. Active-active packs deal
    /// partitions round-robin over members in id order.
    pub fn initial_serving(&self) -> Vec<(u32, u32)> {
        let mut ids: Vec<u32> = self.members.iter().map(|m| m.id).collect();
        ids.sort_unstable();
        if ids.is_empty() {
            return Vec::new();
        }
        self.partitions_hosted
            .iter()
            .enumerate()
            .map(|(i, &p)| match self.mode {
                PackMode::ActivePassive => (p, ids[0]),
                PackMode::ActiveActive => (p, ids[i % ids.len()]),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub kind: ServiceKind,
    pub storage: StorageModel,
    pub balancer: BalancerPolicy,
    /// Clone set (racs only).
    pub nodes: Vec<NodeSpec>,
    /// Packs (raps only). Member ids are unique across the service.
    pub packs: Vec<PackSpec>,
    pub partition_count: u32,
    pub bucket_count: u32,
    pub state_size: u64,
    pub forwards_to: Option<String>,
    /// Re-route once when the first attempt lands on a dead node.
    pub retry: bool,
}

impl ServiceSpec {
    pub fn racs(name: impl Into<String>, nodes: Vec<NodeSpec>, balancer: BalancerPolicy) -> Self {
        Self {
            name: name.into(),
            kind: ServiceKind::Racs,
            storage: StorageModel::shared_nothing(),
            balancer,
            nodes,
            packs: Vec::new(),
            partition_count: 0,
            bucket_count: 0,
            state_size: 0,
            forwards_to: None,
            retry: false,
        }
    }

    pub fn raps(
        name: impl Into<String>,
        packs: Vec<PackSpec>,
        partition_count: u32,
        bucket_count: u32,
    ) -> Self {
        Self {
            name: name.into(),
            kind: ServiceKind::Raps,
            storage: StorageModel::shared_nothing(),
            balancer: BalancerPolicy::default(),
            nodes: Vec::new(),
            packs,
            partition_count,
            bucket_count,
            state_size: 0,
            forwards_to: None,
            retry: false,
        }
    }

    /// Every compute node of the service (clones, or pack members in pack
    /// order). The shared store is not included.
    pub fn all_nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes
            .iter()
            .chain(self.packs.iter().flat_map(|p| p.members.iter()))
    }

    pub fn node_count(&self) -> usize {
        self.all_nodes().count() + usize::from(self.storage.shared_store.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarmSpec {
    pub name: String,
    pub services: Vec<ServiceSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum GeoMode {
    #[default]
    None,
    ActiveActive,
    ActivePassive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoplexSpec {
    pub farms: Vec<FarmSpec>,
    pub mode: GeoMode,
    /// Farms replicated by the geoplex, in routing order. Empty when
    /// `mode` is `None`.
    pub members: Vec<String>,
    pub detection_delay_us: u64,
}

impl GeoplexSpec {
    pub fn single(farms: Vec<FarmSpec>) -> Self {
        Self {
            farms,
            mode: GeoMode::None,
            members: Vec::new(),
            detection_delay_us: 0,
        }
    }
}

/// Bucket → partition → serving member table for one raps service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMap {
    pub bucket_count: u32,
    pub assignment: Vec<u32>,
    /// `serving[p]` is `(pack index, member id)`, or `None` while the
    /// partition is unserved.
    pub serving: Vec<Option<(u32, u32)>>,
}

impl PartitionMap {
    pub fn partition_count(&self) -> u32 {
        self.serving.len() as u32
    }

    pub fn bucket_counts(&self) -> Vec<u32> {
        bucket_counts(&self.assignment, self.partition_count())
    }
}

pub fn bucket_counts(assignment: &[u32], partitions: u32) -> Vec<u32> {
    let mut counts = vec![0u32; partitions as usize];
    for &p in assignment {
        counts[p as usize] += 1;
    }
    counts
}

/// Round-robin initial assignment: bucket `b` goes to partition `b mod P`.
pub fn partition_map_init(
    bucket_count: u32,
    partition_count: u32,
) -> Result<PartitionMap, TopologyError> {
    if partition_count == 0 || bucket_count < partition_count {
        return Err(TopologyError::InvalidCounts {
            buckets: bucket_count,
            partitions: partition_count,
        });
    }
    Ok(PartitionMap {
        bucket_count,
        assignment: (0..bucket_count).map(|b| b % partition_count).collect(),
        serving: vec![None; partition_count as usize],
    })
}

/// Members whose state is Healthy or Degraded, ascending by id.
pub fn healthy_members(members: impl IntoIterator<Item = (u32, NodeState)>) -> Vec<u32> {
    let mut ids: Vec<u32> = members
        .into_iter()
        .filter(|(_, s)| s.is_routable())
        .map(|(id, _)| id)
        .collect();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("duplicate {kind} id `{name}`")]
    DuplicateId { kind: &'static str, name: String },
    #[error("service `{service}` forwards to unknown service `{target}`")]
    DanglingForward { service: String, target: String },
    #[error("forwarding cycle: {}", .cycle.join(" -> "))]
    ForwardCycle { cycle: Vec<String> },
    #[error("pack {pack} of service `{service}` has no members")]
    EmptyPack { service: String, pack: usize },
    #[error("shared-disk service `{service}` has no shared store")]
    SharedDiskWithoutStore { service: String },
    #[error("invalid bucket/partition counts: {buckets} buckets for {partitions} partitions")]
    InvalidCounts { buckets: u32, partitions: u32 },
    #[error("service `{service}` has no nodes")]
    EmptyService { service: String },
    #[error("partition {partition} of service `{service}` is hosted by {hosts} packs")]
    PartitionHosting {
        service: String,
        partition: u32,
        hosts: usize,
    },
    #[error("invalid {what} in `{element}`: {detail}")]
    Invalid {
        what: &'static str,
        element: String,
        detail: String,
    },
    #[error("unknown farm `{0}`")]
    UnknownFarm(String),
    #[error("unknown path `{0}`")]
    UnknownPath(String),
}

fn invalid(
    what: &'static str,
    element: impl Into<String>,
    detail: impl fmt::Display,
) -> TopologyError {
    TopologyError::Invalid {
        what,
        element: element.into(),
        detail: detail.to_string(),
    }
}

/// Index of a service across the whole topology.
pub type ServiceId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceEntry {
    pub farm: usize,
    pub spec: ServiceSpec,
    pub forwards_to: Option<ServiceId>,
    pub partition_map: Option<PartitionMap>,
}

/// Validated, immutable farm model.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    mode: GeoMode,
    geo_detection_us: u64,
    farm_names: Vec<String>,
    geo_members: Vec<usize>,
    services: Vec<ServiceEntry>,
}

impl Topology {
    pub fn mode(&self) -> GeoMode {
        self.mode
    }

    pub fn geo_detection_us(&self) -> u64 {
        self.geo_detection_us
    }

    pub fn farm_names(&self) -> &[String] {
        &self.farm_names
    }

    pub fn farm_index(&self, name: &str) -> Option<usize> {
        self.farm_names.iter().position(|f| f == name)
    }

    /// Farm indices taking part in the geoplex, in routing order.
    pub fn geoplex_members(&self) -> &[usize] {
        &self.geo_members
    }

    pub fn services(&self) -> &[ServiceEntry] {
        &self.services
    }

    pub fn service(&self, id: ServiceId) -> &ServiceEntry {
        &self.services[id]
    }

    pub fn find_service(&self, farm: &str, service: &str) -> Option<ServiceId> {
        let farm = self.farm_index(farm)?;
        self.services
            .iter()
            .position(|s| s.farm == farm && s.spec.name == service)
    }

    pub fn service_path(&self, id: ServiceId) -> String {
        let s = &self.services[id];
        format!("{}/{}", self.farm_names[s.farm], s.spec.name)
    }

    pub fn node_count(&self) -> usize {
        self.services.iter().map(|s| s.spec.node_count()).sum()
    }

    pub fn farm_node_count(&self, farm: usize) -> usize {
        self.services
            .iter()
            .filter(|s| s.farm == farm)
            .map(|s| s.spec.node_count())
            .sum()
    }
}

pub fn build_topology(spec: &GeoplexSpec) -> Result<Topology, TopologyError> {
    let mut farm_names = Vec::with_capacity(spec.farms.len());
    let mut seen_farms = BTreeSet::new();
    for farm in &spec.farms {
        if farm.name == crate::metrics::ROOT_SCOPE || farm.name.contains('/') {
            return Err(invalid(
                "farm name",
                farm.name.clone(),
                "reserved or contains `/`",
            ));
        }
        if !seen_farms.insert(farm.name.as_str()) {
            return Err(TopologyError::DuplicateId {
                kind: "farm",
                name: farm.name.clone(),
            });
        }
        farm_names.push(farm.name.clone());
    }

    let mut geo_members = Vec::new();
    match spec.mode {
        GeoMode::None => {}
        GeoMode::ActiveActive | GeoMode::ActivePassive => {
            let mut seen = BTreeSet::new();
            for name in &spec.members {
                let idx = farm_names
                    .iter()
                    .position(|f| f == name)
                    .ok_or_else(|| TopologyError::UnknownFarm(name.clone()))?;
                if !seen.insert(idx) {
                    return Err(TopologyError::DuplicateId {
                        kind: "geoplex farm",
                        name: name.clone(),
                    });
                }
                geo_members.push(idx);
            }
            if geo_members.len() < 2 {
                return Err(invalid(
                    "geoplex",
                    "geoplex",
                    format!("needs at least 2 farms, has {}", geo_members.len()),
                ));
            }
        }
    }

    let mut services = Vec::new();
    for (farm_idx, farm) in spec.farms.iter().enumerate() {
        let base = services.len();
        let mut names = BTreeMap::new();
        for (i, svc) in farm.services.iter().enumerate() {
            if names.insert(svc.name.as_str(), base + i).is_some() {
                return Err(TopologyError::DuplicateId {
                    kind: "service",
                    name: format!("{}/{}", farm.name, svc.name),
                });
            }
        }
        for svc in &farm.services {
            let path = format!("{}/{}", farm.name, svc.name);
            validate_service(&path, svc)?;
            let forwards_to = match &svc.forwards_to {
                None => None,
                Some(target) => Some(*names.get(target.as_str()).ok_or_else(|| {
                    TopologyError::DanglingForward {
                        service: path.clone(),
                        target: target.clone(),
                    }
                })?),
            };
            let partition_map = match svc.kind {
                ServiceKind::Racs => None,
                ServiceKind::Raps => Some(initial_partition_map(svc)?),
            };
            services.push(ServiceEntry {
                farm: farm_idx,
                spec: svc.clone(),
                forwards_to,
                partition_map,
            });
        }
    }

    check_forward_cycles(&services, &farm_names)?;

    Ok(Topology {
        mode: spec.mode,
        geo_detection_us: spec.detection_delay_us,
        farm_names,
        geo_members,
        services,
    })
}

fn validate_node(path: &str, node: &NodeSpec) -> Result<(), TopologyError> {
    if !(node.service_rate.is_finite() && node.service_rate > 0.0) {
        return Err(invalid(
            "service rate",
            format!("{path}/{}", node.label()),
            node.service_rate,
        ));
    }
    if !(node.degraded_rate_factor > 0.0 && node.degraded_rate_factor <= 1.0) {
        return Err(invalid(
            "degraded rate factor",
            format!("{path}/{}", node.label()),
            node.degraded_rate_factor,
        ));
    }
    Ok(())
}

fn validate_service(path: &str, svc: &ServiceSpec) -> Result<(), TopologyError> {
    match (svc.storage.variant, &svc.storage.shared_store) {
        (StorageVariant::SharedDisk, None) => {
            return Err(TopologyError::SharedDiskWithoutStore {
                service: path.to_string(),
            })
        }
        (StorageVariant::SharedNothing, Some(_)) => {
            return Err(invalid(
                "storage",
                path,
                "shared store given for a shared-nothing service",
            ))
        }
        (StorageVariant::SharedDisk, Some(store)) => validate_node(path, store)?,
        _ => {}
    }

    let mut ids = BTreeSet::new();
    for node in svc.all_nodes() {
        validate_node(path, node)?;
        if !ids.insert(node.id) {
            return Err(TopologyError::DuplicateId {
                kind: "node",
                name: format!("{path}/{}", node.label()),
            });
        }
    }

    match svc.kind {
        ServiceKind::Racs => {
            if svc.nodes.is_empty() {
                return Err(TopologyError::EmptyService {
                    service: path.to_string(),
                });
            }
            if !svc.packs.is_empty() {
                return Err(invalid("racs service", path, "clone sets have no packs"));
            }
        }
        ServiceKind::Raps => {
            if svc.packs.is_empty() {
                return Err(TopologyError::EmptyService {
                    service: path.to_string(),
                });
            }
            if !svc.nodes.is_empty() {
                return Err(invalid("raps service", path, "partitions live in packs"));
            }
            for (i, pack) in svc.packs.iter().enumerate() {
                if pack.members.is_empty() {
                    return Err(TopologyError::EmptyPack {
                        service: path.to_string(),
                        pack: i,
                    });
                }
            }
            if svc.partition_count == 0 || svc.bucket_count < svc.partition_count {
                return Err(TopologyError::InvalidCounts {
                    buckets: svc.bucket_count,
                    partitions: svc.partition_count,
                });
            }
            let mut hosts = vec![0usize; svc.partition_count as usize];
            for pack in &svc.packs {
                for &p in &pack.partitions_hosted {
                    if p >= svc.partition_count {
                        return Err(invalid(
                            "partition id",
                            path,
                            format!("{p} >= partition count {}", svc.partition_count),
                        ));
                    }
                    hosts[p as usize] += 1;
                }
            }
            if let Some((p, &n)) = hosts.iter().enumerate().find(|(_, &n)| n != 1) {
                return Err(TopologyError::PartitionHosting {
                    service: path.to_string(),
                    partition: p as u32,
                    hosts: n,
                });
            }
        }
    }
    Ok(())
}

fn initial_partition_map(svc: &ServiceSpec) -> Result<PartitionMap, TopologyError> {
    let mut map = partition_map_init(svc.bucket_count, svc.partition_count)?;
    for (pack_idx, pack) in svc.packs.iter().enumerate() {
        for (partition, member) in pack.initial_serving() {
            map.serving[partition as usize] = Some((pack_idx as u32, member));
        }
    }
    Ok(map)
}

fn check_forward_cycles(
    services: &[ServiceEntry],
    farm_names: &[String],
) -> Result<(), TopologyError> {
    // Each service has at most one outgoing edge, so walking from every start
    // point finds every cycle.
    for start in 0..services.len() {
        let mut visited = vec![start];
        let mut cur = start;
        while let Some(next) = services[cur].forwards_to {
            if let Some(pos) = visited.iter().position(|&v| v == next) {
                let mut cycle: Vec<String> = visited[pos..]
                    .iter()
                    .map(|&i| format!("{}/{}", farm_names[services[i].farm], services[i].spec.name))
                    .collect();
                cycle.push(cycle[0].clone());
                return Err(TopologyError::ForwardCycle { cycle });
            }
            visited.push(next);
            cur = next;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::BalancerPolicy;
    use proptest::prelude::*;

    fn clones(n: u32) -> Vec<NodeSpec> {
        (0..n).map(|i| NodeSpec::new(i, 100.0)).collect()
    }

    fn pack(first_id: u32, size: u32, mode: PackMode, hosted: Vec<u32>) -> PackSpec {
        PackSpec {
            members: (first_id..first_id + size)
                .map(|i| NodeSpec::new(i, 100.0))
                .collect(),
            mode,
            storage_variant: StorageVariant::SharedNothing,
            partitions_hosted: hosted,
            takeover_us: 2_000_000,
            failback: Failback::None,
        }
    }

    fn one_farm(services: Vec<ServiceSpec>) -> GeoplexSpec {
        GeoplexSpec::single(vec![FarmSpec {
            name: "f".into(),
            services,
        }])
    }

    #[test]
    fn single_racs_service() {
        let spec = one_farm(vec![ServiceSpec::racs(
            "web",
            clones(3),
            BalancerPolicy::default(),
        )]);
        let topo = build_topology(&spec).unwrap();
        assert_eq!(topo.services().len(), 1);
        assert_eq!(topo.service(0).spec.nodes.len(), 3);
        assert_eq!(topo.find_service("f", "web"), Some(0));
        assert_eq!(topo.service_path(0), "f/web");
    }

    #[test]
    fn raps_with_active_passive_packs() {
        let packs = (0..4)
            .map(|p| pack(p * 2, 2, PackMode::ActivePassive, vec![p]))
            .collect();
        let spec = one_farm(vec![ServiceSpec::raps("db", packs, 4, 64)]);
        let topo = build_topology(&spec).unwrap();
        let map = topo.service(0).partition_map.as_ref().unwrap();
        assert_eq!(map.assignment.len(), 64);
        assert_eq!(map.bucket_counts(), vec![16, 16, 16, 16]);
        // Lowest-id member of each pack is primary.
        assert_eq!(
            map.serving,
            vec![Some((0, 0)), Some((1, 2)), Some((2, 4)), Some((3, 6))]
        );
    }

    #[test]
    fn active_active_pack_deals_partitions_over_members() {
        let p = pack(0, 2, PackMode::ActiveActive, vec![0, 1, 2, 3]);
        assert_eq!(p.initial_serving(), vec![(0, 0), (1, 1), (2, 0), (3, 1)]);
        assert_eq!(p.primary(), Some(0));
    }

    #[test]
    fn dangling_forward() {
        let mut web = ServiceSpec::racs("web", clones(1), BalancerPolicy::default());
        web.forwards_to = Some("nope".into());
        let err = build_topology(&one_farm(vec![web])).unwrap_err();
        assert_eq!(
            err,
            TopologyError::DanglingForward {
                service: "f/web".into(),
                target: "nope".into()
            }
        );
    }

    #[test]
    fn forward_cycle_is_named() {
        let mut a = ServiceSpec::racs("a", clones(1), BalancerPolicy::default());
        let mut b = ServiceSpec::racs("b", clones(1), BalancerPolicy::default());
        a.forwards_to = Some("b".into());
        b.forwards_to = Some("a".into());
        let err = build_topology(&one_farm(vec![a, b])).unwrap_err();
        assert_eq!(
            err,
            TopologyError::ForwardCycle {
                cycle: vec!["f/a".into(), "f/b".into(), "f/a".into()]
            }
        );
    }

    #[test]
    fn self_forward_is_a_cycle() {
        let mut a = ServiceSpec::racs("a", clones(1), BalancerPolicy::default());
        a.forwards_to = Some("a".into());
        assert!(matches!(
            build_topology(&one_farm(vec![a])),
            Err(TopologyError::ForwardCycle { .. })
        ));
    }

    #[test]
    fn duplicate_names() {
        let s = ServiceSpec::racs("a", clones(1), BalancerPolicy::default());
        assert!(matches!(
            build_topology(&one_farm(vec![s.clone(), s.clone()])),
            Err(TopologyError::DuplicateId {
                kind: "service",
                ..
            })
        ));
        let farm = FarmSpec {
            name: "x".into(),
            services: vec![s],
        };
        assert!(matches!(
            build_topology(&GeoplexSpec::single(vec![farm.clone(), farm])),
            Err(TopologyError::DuplicateId { kind: "farm", .. })
        ));
        let mut nodes = clones(2);
        nodes[1].id = 0;
        assert!(matches!(
            build_topology(&one_farm(vec![ServiceSpec::racs(
                "a",
                nodes,
                BalancerPolicy::default()
            )])),
            Err(TopologyError::DuplicateId { kind: "node", .. })
        ));
    }

    #[test]
    fn empty_pack_and_missing_store() {
        let mut p = pack(0, 0, PackMode::ActivePassive, vec![0]);
        p.members.clear();
        let err =
            build_topology(&one_farm(vec![ServiceSpec::raps("db", vec![p], 1, 4)])).unwrap_err();
        assert_eq!(
            err,
            TopologyError::EmptyPack {
                service: "f/db".into(),
                pack: 0
            }
        );

        let mut s = ServiceSpec::racs("files", clones(2), BalancerPolicy::default());
        s.storage.variant = StorageVariant::SharedDisk;
        let err = build_topology(&one_farm(vec![s])).unwrap_err();
        assert_eq!(
            err,
            TopologyError::SharedDiskWithoutStore {
                service: "f/files".into()
            }
        );
    }

    #[test]
    fn every_partition_hosted_once() {
        let packs = vec![
            pack(0, 1, PackMode::ActivePassive, vec![0, 1]),
            pack(1, 1, PackMode::ActivePassive, vec![1]),
        ];
        assert!(matches!(
            build_topology(&one_farm(vec![ServiceSpec::raps("db", packs, 2, 4)])),
            Err(TopologyError::PartitionHosting {
                partition: 1,
                hosts: 2,
                ..
            })
        ));
        let packs = vec![pack(0, 1, PackMode::ActivePassive, vec![0])];
        assert!(matches!(
            build_topology(&one_farm(vec![ServiceSpec::raps("db", packs, 2, 4)])),
            Err(TopologyError::PartitionHosting {
                partition: 1,
                hosts: 0,
                ..
            })
        ));
    }

    #[test]
    fn geoplex_needs_two_farms() {
        let farm = |n: &str| FarmSpec {
            name: n.into(),
            services: vec![ServiceSpec::racs("s", clones(1), BalancerPolicy::default())],
        };
        let mut spec = GeoplexSpec::single(vec![farm("a"), farm("b")]);
        spec.mode = GeoMode::ActiveActive;
        spec.members = vec!["a".into()];
        assert!(build_topology(&spec).is_err());
        spec.members = vec!["a".into(), "b".into()];
        let topo = build_topology(&spec).unwrap();
        assert_eq!(topo.geoplex_members(), &[0, 1]);
        spec.members = vec!["a".into(), "zz".into()];
        assert_eq!(
            build_topology(&spec).unwrap_err(),
            TopologyError::UnknownFarm("zz".into())
        );
    }

    #[test]
    fn build_is_pure() {
        let packs = (0..3)
            .map(|p| pack(p * 2, 2, PackMode::ActiveActive, vec![p]))
            .collect();
        let spec = one_farm(vec![
            ServiceSpec::racs("web", clones(4), BalancerPolicy::default()),
            ServiceSpec::raps("db", packs, 3, 12),
        ]);
        assert_eq!(
            build_topology(&spec).unwrap(),
            build_topology(&spec).unwrap()
        );
    }

    #[test]
    fn init_examples() {
        let m = partition_map_init(6, 2).unwrap();
        assert_eq!(m.assignment, vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(
            partition_map_init(6, 3).unwrap().bucket_counts(),
            vec![2, 2, 2]
        );
        assert_eq!(
            partition_map_init(2, 3),
            Err(TopologyError::InvalidCounts {
                buckets: 2,
                partitions: 3
            })
        );
        assert!(partition_map_init(0, 0).is_err());
    }

    #[test]
    fn healthy_members_filters_and_sorts() {
        use NodeState::*;
        assert_eq!(
            healthy_members([(2, Healthy), (0, Healthy), (1, Healthy)]),
            vec![0, 1, 2]
        );
        assert_eq!(
            healthy_members([(0, Healthy), (1, Failed), (2, Degraded)]),
            vec![0, 2]
        );
        assert_eq!(healthy_members([(0, Syncing)]), Vec::<u32>::new());
    }

    proptest! {
        #[test]
        fn init_is_balanced(p in 1u32..=256, extra in 0u32..=256) {
            let b = p + extra;
            let map = partition_map_init(b, p).unwrap();
            let counts = map.bucket_counts();
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert_eq!(counts.iter().sum::<u32>(), b);
        }
    }
}
