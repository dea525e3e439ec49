//! The simulation runtime: owns the event queue, node and service state, and
//! drives requests through routing, queueing and failover.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::engine::{
    Detected, Event, EventKind, EventQueue, NodeKey, NodeSlot, SimTime, SplitMix64,
};
use crate::lifecycle::{
    check_transition, clone_join_time, raid_mask, rebalance_plan, transfer_us, DiskOutcome,
    NodeState, PackRuntime, ScenarioAction, ScenarioEvent, DEFAULT_COPY_RATE, DEFAULT_PROVISION_US,
};
use crate::metrics::{utilization, NodeUsage, Recorder, RunReport, ROOT_SCOPE};
use crate::routing::{affinity_route, balance, plan_fanout, route_geoplex};
use crate::topology::{GeoMode, NodeSpec, PartitionMap, ServiceId, ServiceKind, Topology};
use crate::workload::{make_request, next_arrival, KeySampler, RequestKind, Target, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceLevel {
    Off,
    /// Faults, repairs, detections, takeovers, scaling.
    #[default]
    Lifecycle,
    /// Lifecycle plus one line per arrival, routing decision and outcome.
    Requests,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub trace: TraceLevel,
    /// Keep per-request outcomes in the report.
    pub record_outcomes: bool,
    /// Keep a log of every routing decision.
    pub audit_routes: bool,
    /// Bytes per second for clone sync and bucket moves.
    pub copy_rate: f64,
    pub provision_us: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trace: TraceLevel::Lifecycle,
            record_outcomes: false,
            audit_routes: false,
            copy_rate: DEFAULT_COPY_RATE,
            provision_us: DEFAULT_PROVISION_US,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unknown path `{0}`")]
    UnknownPath(String),
    #[error("workload `{0}` targets the geoplex but no geoplex is configured")]
    NoGeoplex(String),
    #[error("workload `{0}`: {1}")]
    Workload(String, String),
}

/// One routing decision, recorded when route auditing is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteRecord {
    pub time: SimTime,
    pub request: u64,
    pub service: ServiceId,
    pub node: u32,
    /// Bucket and partition, for partitioned services.
    pub bucket: Option<u32>,
    pub partition: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketMoveRecord {
    pub service: ServiceId,
    pub bucket: u32,
    pub from: u32,
    pub to: u32,
    pub planned_at: SimTime,
    pub due_at: SimTime,
    /// Cutover time; `None` if the move was superseded or the run ended first.
    pub done_at: Option<SimTime>,
}

/// Everything a finished run produces.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: String,
    pub warnings: Vec<String>,
    pub routes: Vec<RouteRecord>,
    pub moves: Vec<BucketMoveRecord>,
}

/// Service time of `work_us` of reference work on a node of `rate` rps
/// (a 1000 rps node runs reference work at face value).
pub fn service_time_us(work_us: u64, rate: f64, factor: f64) -> u64 {
    let t = (work_us as f64 * 1000.0 / (rate * factor)).round();
    (t as u64).max(1)
}

#[derive(Debug, Clone, Copy)]
struct Job {
    request: u64,
    attempt: u32,
    store: bool,
    work_us: u64,
}

#[derive(Debug, Clone, Copy)]
struct Running {
    job: Job,
    start: SimTime,
}

#[derive(Debug)]
struct NodeRt {
    key: NodeKey,
    farm: usize,
    label: String,
    spec: NodeSpec,
    state: NodeState,
    node_down: bool,
    failed_disks: u8,
    syncing: bool,
    queue: VecDeque<Job>,
    current: Option<Running>,
    busy_us: u64,
    epoch: u64,
}

impl NodeRt {
    fn new(key: NodeKey, farm: usize, label: String, spec: NodeSpec, state: NodeState) -> Self {
        Self {
            key,
            farm,
            label,
            spec,
            state,
            node_down: false,
            failed_disks: 0,
            syncing: state == NodeState::Syncing,
            queue: VecDeque::new(),
            current: None,
            busy_us: 0,
            epoch: 0,
        }
    }

    fn load(&self) -> usize {
        self.queue.len() + usize::from(self.current.is_some())
    }
}

#[derive(Debug)]
struct ServiceRt {
    path: String,
    scope: usize,
    members: BTreeMap<u32, usize>,
    store: Option<usize>,
    /// Members the balancer believes healthy, ascending.
    view: Vec<u32>,
    cursor: Option<u32>,
    member_pack: BTreeMap<u32, usize>,
    packs: Vec<PackRuntime>,
    map: Option<PartitionMap>,
    /// Assignment including moves still in progress.
    planned: Vec<u32>,
    pending_moves: BTreeMap<u32, (u64, usize)>,
    detect_us: u64,
}

#[derive(Debug)]
struct FarmRt {
    name: String,
    scope: usize,
    nodes: Vec<usize>,
    site_down: bool,
    believed_live: bool,
    epoch: u64,
}

#[derive(Debug)]
enum Entry {
    Service(ServiceId),
    /// (farm, service) per geoplex member.
    Geoplex(Vec<(usize, ServiceId)>),
}

#[derive(Debug)]
struct WorkloadRt {
    spec: WorkloadSpec,
    keys: KeySampler,
    entry: Entry,
}

#[derive(Debug)]
struct Flight {
    arrival: SimTime,
    deadline: SimTime,
    key: u64,
    kind: RequestKind,
    demand_us: u64,
    write_demand_us: u64,
    scopes: Vec<usize>,
    service: ServiceId,
    hop: u32,
    attempt: u32,
    pending: u32,
    store_busy: Option<u64>,
    retried: bool,
    avoid: Option<u32>,
    write_counted: bool,
}

pub struct Simulation {
    topo: Topology,
    cfg: RunConfig,
    queue: EventQueue,
    rng: SplitMix64,
    nodes: Vec<NodeRt>,
    node_index: HashMap<NodeKey, usize>,
    services: Vec<ServiceRt>,
    farms: Vec<FarmRt>,
    workloads: Vec<WorkloadRt>,
    flights: HashMap<u64, Flight>,
    next_request: u64,
    next_token: u64,
    rec: Recorder,
    root: usize,
    seq: u64,
    trace: String,
    warnings: Vec<String>,
    routes: Vec<RouteRecord>,
    moves: Vec<BucketMoveRecord>,
}

fn parse_member(node: &str) -> Option<NodeSlot> {
    if node == "store" {
        return Some(NodeSlot::Store);
    }
    let digits = node.strip_prefix('n')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().map(NodeSlot::Member)
}

impl Simulation {
    pub fn new(
        topo: &Topology,
        workloads: &[WorkloadSpec],
        injects: &[ScenarioEvent],
        cfg: RunConfig,
    ) -> Result<Self, SimError> {
        let mut rec = Recorder::new(cfg.record_outcomes);
        let root = rec.scope_id(ROOT_SCOPE, false);
        let mut farms: Vec<FarmRt> = topo
            .farm_names()
            .iter()
            .map(|name| FarmRt {
                name: name.clone(),
                scope: rec.scope_id(name, false),
                nodes: Vec::new(),
                site_down: false,
                believed_live: true,
                epoch: 0,
            })
            .collect();

        let mut nodes = Vec::new();
        let mut node_index = HashMap::new();
        let mut services = Vec::new();
        for (sid, entry) in topo.services().iter().enumerate() {
            let path = topo.service_path(sid);
            let spec = &entry.spec;
            let mut rt = ServiceRt {
                scope: rec.scope_id(&path, true),
                path: path.clone(),
                members: BTreeMap::new(),
                store: None,
                view: Vec::new(),
                cursor: None,
                member_pack: BTreeMap::new(),
                packs: Vec::new(),
                map: entry.partition_map.clone(),
                planned: entry
                    .partition_map
                    .as_ref()
                    .map(|m| m.assignment.clone())
                    .unwrap_or_default(),
                pending_moves: BTreeMap::new(),
                detect_us: spec.balancer.detection_delay_us,
            };
            let mut add = |slot: NodeSlot, node: &NodeSpec, label: String| {
                let key = NodeKey { service: sid, slot };
                let idx = nodes.len();
                nodes.push(NodeRt::new(
                    key,
                    entry.farm,
                    label,
                    node.clone(),
                    NodeState::Healthy,
                ));
                node_index.insert(key, idx);
                farms[entry.farm].nodes.push(idx);
                idx
            };
            for n in spec.all_nodes() {
                let idx = add(NodeSlot::Member(n.id), n, format!("{path}/{}", n.label()));
                rt.members.insert(n.id, idx);
            }
            if let Some(store) = &spec.storage.shared_store {
                rt.store = Some(add(NodeSlot::Store, store, format!("{path}/store")));
            }
            if spec.kind == ServiceKind::Racs {
                rt.view = rt.members.keys().copied().collect();
            }
            for (p, pack) in spec.packs.iter().enumerate() {
                let mut ids: Vec<u32> = pack.members.iter().map(|m| m.id).collect();
                ids.sort_unstable();
                for &m in &ids {
                    rt.member_pack.insert(m, p);
                }
                rt.packs.push(PackRuntime::new(
                    pack.mode,
                    ids,
                    &pack.initial_serving(),
                    rt.detect_us,
                    pack.takeover_us,
                    pack.failback,
                ));
            }
            services.push(rt);
        }

        let mut wrts = Vec::new();
        for w in workloads {
            w.validate()
                .map_err(|e| SimError::Workload(w.name.clone(), e.to_string()))?;
            let entry = match &w.target {
                Target::Service { farm, service } => Entry::Service(
                    topo.find_service(farm, service)
                        .ok_or_else(|| SimError::UnknownPath(w.target.to_string()))?,
                ),
                Target::Geoplex { service } => {
                    if topo.mode() == GeoMode::None {
                        return Err(SimError::NoGeoplex(w.name.clone()));
                    }
                    let mut per = Vec::new();
                    for &f in topo.geoplex_members() {
                        let sid = topo
                            .find_service(&topo.farm_names()[f], service)
                            .ok_or_else(|| {
                                SimError::UnknownPath(format!("{}/{service}", topo.farm_names()[f]))
                            })?;
                        per.push((f, sid));
                    }
                    Entry::Geoplex(per)
                }
            };
            wrts.push(WorkloadRt {
                keys: KeySampler::new(w.key_space, w.key_dist),
                spec: w.clone(),
                entry,
            });
        }

        let mut sim = Self {
            topo: topo.clone(),
            cfg,
            queue: EventQueue::new(),
            rng: SplitMix64::new(0),
            nodes,
            node_index,
            services,
            farms,
            workloads: wrts,
            flights: HashMap::new(),
            next_request: 0,
            next_token: 0,
            rec,
            root,
            seq: 0,
            trace: String::new(),
            warnings: Vec::new(),
            routes: Vec::new(),
            moves: Vec::new(),
        };
        sim.rng = SplitMix64::new(sim.cfg.seed);

        let mut ordered: Vec<&ScenarioEvent> = injects.iter().collect();
        ordered.sort_by_key(|e| e.at);
        let growth = sim.growth_allowance(injects);
        for ev in ordered {
            let kind = sim.resolve_action(&ev.action, &growth)?;
            sim.schedule(ev.at, kind);
        }
        for (i, w) in workloads.iter().enumerate() {
            if let Some(t) = next_arrival(w, &mut sim.rng, w.start) {
                sim.schedule(t, EventKind::Arrival { workload: i });
            }
        }
        Ok(sim)
    }

    /// Highest member id each service may reach through scripted scaling.
    fn growth_allowance(&self, injects: &[ScenarioEvent]) -> BTreeMap<ServiceId, u32> {
        let mut out = BTreeMap::new();
        for (sid, s) in self.services.iter().enumerate() {
            let spec = &self.topo.service(sid).spec;
            let per_step = match spec.kind {
                ServiceKind::Racs => 1,
                ServiceKind::Raps => spec.packs.first().map_or(1, |p| p.members.len() as u32),
            };
            let steps = injects
                .iter()
                .filter(|e| match &e.action {
                    ScenarioAction::AddClone { farm, service }
                    | ScenarioAction::AddPartition { farm, service } => {
                        self.topo.find_service(farm, service) == Some(sid)
                    }
                    _ => false,
                })
                .count() as u32;
            let base = s.members.keys().next_back().map_or(0, |m| m + 1);
            out.insert(sid, base + steps * per_step);
        }
        out
    }

    fn resolve_action(
        &self,
        action: &ScenarioAction,
        growth: &BTreeMap<ServiceId, u32>,
    ) -> Result<EventKind, SimError> {
        let service = |farm: &str, service: &str| {
            self.topo
                .find_service(farm, service)
                .ok_or_else(|| SimError::UnknownPath(format!("{farm}/{service}")))
        };
        let node = |p: &crate::lifecycle::NodePath| -> Result<NodeKey, SimError> {
            let sid = service(&p.farm, &p.service)?;
            let slot = parse_member(&p.node).ok_or_else(|| SimError::UnknownPath(p.to_string()))?;
            let ok = match slot {
                NodeSlot::Store => self.services[sid].store.is_some(),
                NodeSlot::Member(m) => m < growth[&sid],
            };
            if !ok {
                return Err(SimError::UnknownPath(p.to_string()));
            }
            Ok(NodeKey { service: sid, slot })
        };
        let farm = |name: &str| {
            self.topo
                .farm_index(name)
                .ok_or_else(|| SimError::UnknownPath(name.to_string()))
        };
        Ok(match action {
            ScenarioAction::FailNode(p) => EventKind::NodeFail(node(p)?),
            ScenarioAction::RepairNode(p) => EventKind::NodeRepair(node(p)?),
            ScenarioAction::FailDisk(p) => EventKind::DiskFail(node(p)?),
            ScenarioAction::RepairDisk(p) => EventKind::DiskRepair(node(p)?),
            ScenarioAction::FailSite(f) => EventKind::SiteFail { farm: farm(f)? },
            ScenarioAction::RepairSite(f) => EventKind::SiteRepair { farm: farm(f)? },
            ScenarioAction::AddClone { farm, service: s } => EventKind::AddClone {
                service: service(farm, s)?,
            },
            ScenarioAction::AddPartition { farm, service: s } => EventKind::AddPartition {
                service: service(farm, s)?,
            },
        })
    }

    pub fn now(&self) -> SimTime {
        self.queue.clock()
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// Jobs queued or in service at node `farm/service/node`.
    pub fn queue_len(&self, path: &str) -> Option<usize> {
        self.node_by_label(path).map(|n| n.load())
    }

    pub fn node_state(&self, path: &str) -> Option<NodeState> {
        self.node_by_label(path).map(|n| n.state)
    }

    pub fn partition_map(&self, farm: &str, service: &str) -> Option<&PartitionMap> {
        let sid = self.topo.find_service(farm, service)?;
        self.services[sid].map.as_ref()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn node_by_label(&self, path: &str) -> Option<&NodeRt> {
        self.nodes.iter().find(|n| n.label == path)
    }

    /// Processes every event up to and including `t`.
    pub fn advance_to(&mut self, t: SimTime) {
        while let Some(ev) = self.queue.pop_until(t) {
            self.handle(ev);
        }
        if t > self.queue.clock() {
            self.queue.advance_clock(t);
        }
    }

    /// Stops the run at `end`: requests still in the system count as in
    /// flight, and partially served jobs contribute their busy time so far.
    pub fn finish(mut self, end: SimTime) -> RunOutput {
        self.advance_to(end);
        let now = self.now();
        let mut open: Vec<(u64, Flight)> = self.flights.drain().collect();
        open.sort_unstable_by_key(|(id, _)| *id);
        for (id, f) in open {
            self.rec
                .finish(id, &f.scopes, f.arrival, f.deadline, None, false);
        }
        let duration = now.as_micros();
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let busy = n.busy_us + n.current.map_or(0, |r| now - r.start);
                (
                    n.label.clone(),
                    NodeUsage {
                        busy_us: busy,
                        utilization: utilization(busy, duration),
                    },
                )
            })
            .collect();
        RunOutput {
            report: self.rec.finalize(duration, nodes),
            trace: self.trace,
            warnings: self.warnings,
            routes: self.routes,
            moves: self.moves,
        }
    }

    pub fn run_until(mut self, end: SimTime) -> RunOutput {
        self.advance_to(end);
        self.finish(end)
    }

    fn schedule(&mut self, t: SimTime, kind: EventKind) {
        self.queue
            .schedule(t, kind)
            .expect("events are never scheduled in the past");
    }

    fn log(&mut self, kind: &str, detail: std::fmt::Arguments<'_>) {
        if self.cfg.trace == TraceLevel::Off {
            return;
        }
        let _ = writeln!(
            self.trace,
            "{} {} {kind} {detail}",
            self.now().as_micros(),
            self.seq
        );
    }

    fn log_request(&mut self, kind: &str, detail: std::fmt::Arguments<'_>) {
        if self.cfg.trace == TraceLevel::Requests {
            self.log(kind, detail);
        }
    }

    fn warn(&mut self, msg: String) {
        self.log("Warning", format_args!("{msg}"));
        self.warnings
            .push(format!("t={}us: {msg}", self.now().as_micros()));
    }

    fn handle(&mut self, ev: Event) {
        self.seq = ev.sequence;
        match ev.kind {
            EventKind::Arrival { workload } => self.on_arrival(workload),
            EventKind::ServiceDone { node, epoch } => self.on_service_done(node, epoch),
            EventKind::NodeFail(k) => self.on_node_fault(k, true),
            EventKind::NodeRepair(k) => self.on_node_fault(k, false),
            EventKind::DiskFail(k) => self.on_disk_fail(k),
            EventKind::DiskRepair(k) => self.on_disk_repair(k),
            EventKind::SiteFail { farm } => self.on_site(farm, true),
            EventKind::SiteRepair { farm } => self.on_site(farm, false),
            EventKind::FailureDetected(Detected::Node { node, epoch }) => {
                self.detect_node(node, epoch)
            }
            EventKind::FailureDetected(Detected::Site { farm, epoch }) => {
                self.detect_site(farm, epoch)
            }
            EventKind::TakeoverDone {
                service,
                partition,
                member,
                token,
            } => self.on_takeover_done(service, partition, member, token),
            EventKind::AddClone { service } => self.on_add_clone(service),
            EventKind::CloneJoined { node } => self.on_clone_joined(node),
            EventKind::AddPartition { service } => self.on_add_partition(service),
            EventKind::BucketMoveDone {
                service,
                bucket,
                to,
                token,
            } => self.on_bucket_move_done(service, bucket, to, token),
        }
    }

    // ---- requests -------------------------------------------------------

    fn on_arrival(&mut self, w: usize) {
        let now = self.now();
        let id = self.next_request;
        self.next_request += 1;
        let wl = &self.workloads[w];
        let req = make_request(&wl.spec, &wl.keys, &mut self.rng, id, now);
        if let Some(t) = next_arrival(&wl.spec, &mut self.rng, now) {
            self.schedule(t, EventKind::Arrival { workload: w });
        }
        let wl = &self.workloads[w];
        let (demand_us, write_demand_us) = (wl.spec.demand_us, wl.spec.write_demand_us);
        let target = match &wl.entry {
            Entry::Service(sid) => Ok(*sid),
            Entry::Geoplex(per) => {
                let live: Vec<usize> = per
                    .iter()
                    .map(|&(f, _)| f)
                    .filter(|&f| self.farms[f].believed_live)
                    .collect();
                route_geoplex(id, self.topo.mode(), &live)
                    .map(|f| per.iter().find(|&&(pf, _)| pf == f).unwrap().1)
            }
        };
        self.rec.present(self.root);
        if self.cfg.trace == TraceLevel::Requests {
            let name = self.workloads[w].spec.name.clone();
            self.log(
                "Arrival",
                format_args!(
                    "req={id} workload={name} kind={:?} key={}",
                    req.kind, req.key
                ),
            );
        }
        let sid = match target {
            Ok(sid) => sid,
            Err(e) => {
                self.rec
                    .finish(id, &[self.root], now, req.deadline_abs, Some(now), true);
                self.log_request("Fail", format_args!("req={id} {e}"));
                return;
            }
        };
        let farm_scope = self.farms[self.topo.service(sid).farm].scope;
        self.rec.present(farm_scope);
        self.flights.insert(
            id,
            Flight {
                arrival: now,
                deadline: req.deadline_abs,
                key: req.key,
                kind: req.kind,
                demand_us,
                write_demand_us,
                scopes: vec![self.root, farm_scope],
                service: sid,
                hop: 0,
                attempt: 0,
                pending: 0,
                store_busy: None,
                retried: false,
                avoid: None,
                write_counted: false,
            },
        );
        self.enter_service(id, sid);
    }

    fn enter_service(&mut self, id: u64, sid: ServiceId) {
        let scope = self.services[sid].scope;
        self.rec.present(scope);
        let f = self.flights.get_mut(&id).unwrap();
        f.scopes.push(scope);
        f.service = sid;
        f.attempt += 1;
        f.retried = false;
        f.avoid = None;
        self.dispatch(id);
    }

    fn dispatch(&mut self, id: u64) {
        let now = self.now();
        let f = &self.flights[&id];
        let sid = f.service;
        let entry = self.topo.service(sid);
        let terminal = entry.forwards_to.is_none();
        let kind = if terminal { f.kind } else { RequestKind::Read };
        let work = if kind == RequestKind::Write {
            f.write_demand_us
        } else {
            f.demand_us
        };
        let (key, avoid, attempt) = (f.key, f.avoid, f.attempt);

        let mut bucket_info = None;
        let (targets, store_busy) = match entry.spec.kind {
            ServiceKind::Racs => {
                let nodes = &self.nodes;
                let svc = &mut self.services[sid];
                let members: Vec<u32> = svc
                    .view
                    .iter()
                    .copied()
                    .filter(|&m| Some(m) != avoid)
                    .collect();
                let pick = balance(
                    entry.spec.balancer.kind,
                    id,
                    &members,
                    &mut svc.cursor,
                    |m| nodes[svc.members[&m]].load(),
                );
                match pick {
                    Ok(p) => {
                        let d = plan_fanout(kind, &entry.spec.storage, p, &members, work);
                        (d.nodes, d.store_busy_us)
                    }
                    Err(e) => return self.attempt_failed(id, attempt, None, e.to_string()),
                }
            }
            ServiceKind::Raps => {
                let map = self.services[sid]
                    .map
                    .as_ref()
                    .expect("partitioned service has a map");
                match affinity_route(key, map) {
                    Ok(t) => {
                        bucket_info = Some((t.bucket, t.partition));
                        (vec![t.member], None)
                    }
                    Err(e) => return self.attempt_failed(id, attempt, None, e.to_string()),
                }
            }
        };

        if self.cfg.audit_routes {
            for &m in &targets {
                self.routes.push(RouteRecord {
                    time: now,
                    request: id,
                    service: sid,
                    node: m,
                    bucket: bucket_info.map(|b| b.0),
                    partition: bucket_info.map(|b| b.1),
                });
            }
        }
        let svc = &self.services[sid];
        if let Some(&dead) = targets
            .iter()
            .find(|&&m| !self.nodes[svc.members[&m]].state.is_routable())
        {
            let label = self.nodes[svc.members[&dead]].label.clone();
            return self.attempt_failed(
                id,
                attempt,
                Some(dead),
                format!("routed to failed {label}"),
            );
        }
        if store_busy.is_some() {
            let store = svc.store.expect("shared-disk service has a store");
            if !self.nodes[store].state.is_routable() {
                return self.attempt_failed(id, attempt, None, "shared store down".into());
            }
        }

        if kind == RequestKind::Write {
            let scope = svc.scope;
            let f = self.flights.get_mut(&id).unwrap();
            if !f.write_counted {
                f.write_counted = true;
                self.rec.client_write(scope);
            }
            self.rec.node_writes(scope, targets.len() as u64);
        }
        if self.cfg.trace == TraceLevel::Requests {
            let path = self.services[sid].path.clone();
            self.log(
                "Route",
                format_args!("req={id} service={path} nodes={targets:?}"),
            );
        }
        let f = self.flights.get_mut(&id).unwrap();
        f.pending = targets.len() as u32;
        f.store_busy = store_busy;
        for m in targets {
            let idx = self.services[sid].members[&m];
            self.enqueue(
                idx,
                Job {
                    request: id,
                    attempt,
                    store: false,
                    work_us: work,
                },
            );
        }
    }

    fn enqueue(&mut self, idx: usize, job: Job) {
        self.nodes[idx].queue.push_back(job);
        if self.nodes[idx].current.is_none() {
            self.start_next(idx);
        }
    }

    fn start_next(&mut self, idx: usize) {
        let now = self.now();
        let n = &mut self.nodes[idx];
        let Some(job) = n.queue.pop_front() else {
            return;
        };
        let factor = if n.state == NodeState::Degraded {
            n.spec.degraded_rate_factor
        } else {
            1.0
        };
        let dt = service_time_us(job.work_us, n.spec.service_rate, factor);
        n.current = Some(Running { job, start: now });
        let kind = EventKind::ServiceDone {
            node: n.key,
            epoch: n.epoch,
        };
        self.schedule(now + dt, kind);
    }

    fn on_service_done(&mut self, key: NodeKey, epoch: u64) {
        let now = self.now();
        let Some(&idx) = self.node_index.get(&key) else {
            return;
        };
        let n = &mut self.nodes[idx];
        if n.epoch != epoch {
            return;
        }
        let Some(run) = n.current.take() else {
            return;
        };
        n.busy_us += now - run.start;
        self.start_next(idx);
        self.job_done(run.job);
    }

    fn job_done(&mut self, job: Job) {
        let Some(f) = self.flights.get_mut(&job.request) else {
            return;
        };
        if f.attempt != job.attempt {
            return;
        }
        if !job.store {
            f.pending -= 1;
            if f.pending > 0 {
                return;
            }
            if let Some(busy) = f.store_busy.take() {
                let store = self.services[f.service].store.expect("store present");
                if !self.nodes[store].state.is_routable() {
                    return self.attempt_failed(
                        job.request,
                        job.attempt,
                        None,
                        "shared store down".into(),
                    );
                }
                f.pending = 1;
                self.enqueue(
                    store,
                    Job {
                        request: job.request,
                        attempt: job.attempt,
                        store: true,
                        work_us: busy,
                    },
                );
                return;
            }
        }
        self.stage_complete(job.request);
    }

    fn stage_complete(&mut self, id: u64) {
        let f = &self.flights[&id];
        match self.topo.service(f.service).forwards_to {
            Some(next) => {
                self.flights.get_mut(&id).unwrap().hop += 1;
                self.enter_service(id, next);
            }
            None => {
                let now = self.now();
                let f = self.flights.remove(&id).unwrap();
                let outcome =
                    self.rec
                        .finish(id, &f.scopes, f.arrival, f.deadline, Some(now), false);
                self.log_request(
                    "Complete",
                    format_args!("req={id} latency={} {outcome:?}", now - f.arrival),
                );
            }
        }
    }

    /// The current attempt of request `id` failed. Retries once when the
    /// service allows it, steering away from `dead`.
    fn attempt_failed(&mut self, id: u64, attempt: u32, dead: Option<u32>, reason: String) {
        let Some(f) = self.flights.get_mut(&id) else {
            return;
        };
        if f.attempt != attempt {
            return;
        }
        if self.topo.service(f.service).spec.retry && !f.retried {
            f.retried = true;
            f.attempt += 1;
            f.avoid = dead;
            f.pending = 0;
            f.store_busy = None;
            self.log_request("Retry", format_args!("req={id} {reason}"));
            return self.dispatch(id);
        }
        let now = self.now();
        let f = self.flights.remove(&id).unwrap();
        self.rec
            .finish(id, &f.scopes, f.arrival, f.deadline, Some(now), true);
        self.log_request("Fail", format_args!("req={id} {reason}"));
    }

    // ---- node lifecycle -------------------------------------------------

    fn node(&mut self, key: NodeKey, what: &str) -> Option<usize> {
        match self.node_index.get(&key) {
            Some(&i) => Some(i),
            None => {
                let path = self.services[key.service].path.clone();
                self.warn(format!("{what}: no such node {:?} in {path}", key.slot));
                None
            }
        }
    }

    fn on_node_fault(&mut self, key: NodeKey, fail: bool) {
        let kind = if fail { "NodeFail" } else { "NodeRepair" };
        let Some(idx) = self.node(key, kind) else {
            return;
        };
        let label = self.nodes[idx].label.clone();
        self.log(kind, format_args!("{label}"));
        let n = &mut self.nodes[idx];
        if n.state == NodeState::Syncing {
            return self.warn(format!("{kind} on syncing node {label} ignored"));
        }
        if fail {
            if n.node_down || n.state == NodeState::Failed {
                return self.warn(format!("{label} already failed"));
            }
            n.node_down = true;
        } else {
            if !n.node_down && n.failed_disks == 0 {
                return self.warn(format!("{label} is not failed"));
            }
            n.node_down = false;
            n.failed_disks = 0;
        }
        self.refresh(idx);
    }

    fn on_disk_fail(&mut self, key: NodeKey) {
        let Some(idx) = self.node(key, "DiskFail") else {
            return;
        };
        let n = &mut self.nodes[idx];
        let label = n.label.clone();
        let state = n.state;
        if matches!(state, NodeState::Failed | NodeState::Syncing) {
            self.log("DiskFail", format_args!("{label}"));
            return self.warn(format!("disk fault on {state:?} node {label} ignored"));
        }
        let outcome = raid_mask(n.spec.raid, n.state);
        n.failed_disks += 1;
        self.log("DiskFail", format_args!("{label} {outcome:?}"));
        self.refresh(idx);
    }

    fn on_disk_repair(&mut self, key: NodeKey) {
        let Some(idx) = self.node(key, "DiskRepair") else {
            return;
        };
        let label = self.nodes[idx].label.clone();
        self.log("DiskRepair", format_args!("{label}"));
        if self.nodes[idx].failed_disks == 0 {
            return self.warn(format!("{label} has no failed disk"));
        }
        self.nodes[idx].failed_disks = 0;
        self.refresh(idx);
    }

    fn desired_state(&self, idx: usize) -> NodeState {
        let n = &self.nodes[idx];
        if n.syncing {
            return NodeState::Syncing;
        }
        let exposed = match n.failed_disks {
            0 => false,
            1 => raid_mask(n.spec.raid, NodeState::Healthy) == DiskOutcome::Exposed,
            _ => true,
        };
        if n.node_down || self.farms[n.farm].site_down || exposed {
            NodeState::Failed
        } else if n.failed_disks > 0 {
            NodeState::Degraded
        } else {
            NodeState::Healthy
        }
    }

    /// Moves a node to the state its fault flags call for, through Healthy
    /// when there is no direct legal transition.
    fn refresh(&mut self, idx: usize) {
        let to = self.desired_state(idx);
        let from = self.nodes[idx].state;
        if from == to {
            return;
        }
        let steps: &[NodeState] = if from.can_transition_to(to) {
            &[to]
        } else {
            &[NodeState::Healthy, to]
        };
        for &step in steps {
            let cur = self.nodes[idx].state;
            check_transition(cur, step).expect("node state machine");
            self.nodes[idx].state = step;
            let label = self.nodes[idx].label.clone();
            self.log("State", format_args!("{label} {cur:?}->{step:?}"));
            if step == NodeState::Failed {
                self.node_down(idx);
            } else if matches!(cur, NodeState::Failed | NodeState::Syncing) {
                self.node_up(idx);
            }
        }
    }

    fn node_down(&mut self, idx: usize) {
        let now = self.now();
        let n = &mut self.nodes[idx];
        n.epoch += 1;
        let (key, epoch) = (n.key, n.epoch);
        let mut jobs = Vec::with_capacity(n.load());
        if let Some(r) = n.current.take() {
            n.busy_us += now - r.start;
            jobs.push(r.job);
        }
        jobs.extend(n.queue.drain(..));
        let member = match key.slot {
            NodeSlot::Member(m) => {
                let svc = &mut self.services[key.service];
                if let Some(&p) = svc.member_pack.get(&m) {
                    let hit = svc.packs[p].member_failed(m);
                    let map = svc.map.as_mut().unwrap();
                    for part in hit {
                        map.serving[part as usize] = None;
                    }
                }
                if svc.detect_us == 0 {
                    self.detect_node(key, epoch);
                } else {
                    let at = now + svc.detect_us;
                    self.schedule(
                        at,
                        EventKind::FailureDetected(Detected::Node { node: key, epoch }),
                    );
                }
                Some(m)
            }
            NodeSlot::Store => None,
        };
        let label = self.nodes[idx].label.clone();
        for job in jobs {
            self.attempt_failed(job.request, job.attempt, member, format!("{label} failed"));
        }
    }

    fn node_up(&mut self, idx: usize) {
        let now = self.now();
        let key = self.nodes[idx].key;
        let NodeSlot::Member(m) = key.slot else {
            return;
        };
        let svc = &mut self.services[key.service];
        if let Some(&p) = svc.member_pack.get(&m) {
            let (served, moves) = svc.packs[p].member_repaired(m, now, &mut self.next_token);
            let map = svc.map.as_mut().unwrap();
            for part in served {
                map.serving[part as usize] = Some((p as u32, m));
            }
            for t in &moves {
                map.serving[t.partition as usize] = None;
            }
            for t in moves {
                self.schedule(
                    t.done_at,
                    EventKind::TakeoverDone {
                        service: key.service,
                        partition: t.partition,
                        member: t.member,
                        token: t.token,
                    },
                );
            }
        } else if let Err(pos) = svc.view.binary_search(&m) {
            svc.view.insert(pos, m);
        }
        self.start_next(idx);
    }

    fn detect_node(&mut self, key: NodeKey, epoch: u64) {
        let now = self.now();
        let Some(&idx) = self.node_index.get(&key) else {
            return;
        };
        if self.nodes[idx].epoch != epoch || self.nodes[idx].state != NodeState::Failed {
            return;
        }
        let NodeSlot::Member(m) = key.slot else {
            return;
        };
        let label = self.nodes[idx].label.clone();
        self.log("FailureDetected", format_args!("{label}"));
        let svc = &mut self.services[key.service];
        let Some(&p) = svc.member_pack.get(&m) else {
            if let Ok(pos) = svc.view.binary_search(&m) {
                svc.view.remove(pos);
            }
            return;
        };
        let survivors: Vec<u32> = svc.packs[p]
            .members
            .iter()
            .copied()
            .filter(|s| self.nodes[svc.members[s]].state.is_routable())
            .collect();
        match svc.packs[p].failure_detected(m, &survivors, now, &mut self.next_token) {
            Ok(plan) => {
                for t in plan {
                    self.schedule(
                        t.done_at,
                        EventKind::TakeoverDone {
                            service: key.service,
                            partition: t.partition,
                            member: t.member,
                            token: t.token,
                        },
                    );
                }
            }
            Err(e) => self.warn(format!("{label}: {e}")),
        }
    }

    fn on_takeover_done(&mut self, sid: ServiceId, partition: u32, member: u32, token: u64) {
        let svc = &mut self.services[sid];
        let p = svc.member_pack[&member];
        if svc.packs[p].takeover_done(partition, token) {
            svc.map.as_mut().unwrap().serving[partition as usize] = Some((p as u32, member));
            let path = svc.path.clone();
            self.log(
                "TakeoverDone",
                format_args!("{path} partition={partition} member=n{member}"),
            );
        }
    }

    fn on_site(&mut self, farm: usize, fail: bool) {
        let kind = if fail { "SiteFail" } else { "SiteRepair" };
        let name = self.farms[farm].name.clone();
        self.log(kind, format_args!("{name}"));
        if self.farms[farm].site_down == fail {
            let msg = if fail {
                "already failed"
            } else {
                "is not failed"
            };
            return self.warn(format!("site {name} {msg}"));
        }
        let f = &mut self.farms[farm];
        f.site_down = fail;
        if fail {
            f.epoch += 1;
        } else {
            f.believed_live = true;
        }
        let epoch = f.epoch;
        for idx in self.farms[farm].nodes.clone() {
            self.refresh(idx);
        }
        if fail && self.topo.mode() != GeoMode::None && self.topo.geoplex_members().contains(&farm)
        {
            let delay = self.topo.geo_detection_us();
            if delay == 0 {
                self.detect_site(farm, epoch);
            } else {
                let at = self.now() + delay;
                self.schedule(
                    at,
                    EventKind::FailureDetected(Detected::Site { farm, epoch }),
                );
            }
        }
    }

    fn detect_site(&mut self, farm: usize, epoch: u64) {
        let f = &mut self.farms[farm];
        if f.epoch != epoch || !f.site_down {
            return;
        }
        f.believed_live = false;
        let name = f.name.clone();
        self.log("FailureDetected", format_args!("site {name}"));
    }

    // ---- scaling --------------------------------------------------------

    fn on_add_clone(&mut self, sid: ServiceId) {
        let now = self.now();
        let entry = self.topo.service(sid);
        let path = self.services[sid].path.clone();
        if entry.spec.kind != ServiceKind::Racs {
            self.log("AddClone", format_args!("{path}"));
            return self.warn(format!("add_clone on {path}: not a cloned service"));
        }
        let svc = &self.services[sid];
        let id = svc.members.keys().next_back().map_or(0, |m| m + 1);
        let template = &self.nodes[*svc.members.values().next().expect("clone set is non-empty")];
        let mut spec = template.spec.clone();
        spec.id = id;
        let key = NodeKey {
            service: sid,
            slot: NodeSlot::Member(id),
        };
        let farm = entry.farm;
        let join = clone_join_time(
            entry.spec.storage.variant,
            entry.spec.state_size,
            self.cfg.copy_rate,
            self.cfg.provision_us,
            now,
        );
        let label = format!("{path}/n{id}");
        self.log(
            "AddClone",
            format_args!("{label} joins_at={}", join.as_micros()),
        );
        let idx = self.nodes.len();
        self.nodes
            .push(NodeRt::new(key, farm, label, spec, NodeState::Syncing));
        self.node_index.insert(key, idx);
        self.farms[farm].nodes.push(idx);
        self.services[sid].members.insert(id, idx);
        self.schedule(join, EventKind::CloneJoined { node: key });
    }

    fn on_clone_joined(&mut self, key: NodeKey) {
        let Some(&idx) = self.node_index.get(&key) else {
            return;
        };
        let label = self.nodes[idx].label.clone();
        self.log("CloneJoined", format_args!("{label}"));
        self.nodes[idx].syncing = false;
        self.refresh(idx);
    }

    fn on_add_partition(&mut self, sid: ServiceId) {
        let now = self.now();
        let path = self.services[sid].path.clone();
        self.log("AddPartition", format_args!("{path}"));
        if self.topo.service(sid).spec.kind != ServiceKind::Raps {
            return self.warn(format!(
                "add_partition on {path}: not a partitioned service"
            ));
        }
        let entry = self.topo.service(sid);
        let svc = &self.services[sid];
        let map = svc.map.as_ref().unwrap();
        let partition = map.partition_count();
        if partition + 1 > map.bucket_count {
            return self.warn(format!(
                "add_partition on {path}: {} buckets cannot cover {} partitions",
                map.bucket_count,
                partition + 1
            ));
        }
        let template = &entry.spec.packs[0];
        let first_id = svc.members.keys().next_back().map_or(0, |m| m + 1);
        let mut ids = Vec::new();
        let farm = entry.farm;
        let pack_idx = svc.packs.len();
        for (id, member) in (first_id..).zip(&template.members) {
            let mut spec = member.clone();
            spec.id = id;
            let key = NodeKey {
                service: sid,
                slot: NodeSlot::Member(id),
            };
            let idx = self.nodes.len();
            self.nodes.push(NodeRt::new(
                key,
                farm,
                format!("{path}/n{id}"),
                spec,
                NodeState::Healthy,
            ));
            self.node_index.insert(key, idx);
            self.farms[farm].nodes.push(idx);
            self.services[sid].members.insert(id, idx);
            self.services[sid].member_pack.insert(id, pack_idx);
            ids.push(id);
        }
        let primary = ids[0];
        let mode = template.mode;
        let svc = &mut self.services[sid];
        svc.packs.push(PackRuntime::new(
            mode,
            ids,
            &[(partition, primary)],
            svc.detect_us,
            template.takeover_us,
            template.failback,
        ));
        let map = svc.map.as_mut().unwrap();
        map.serving.push(Some((pack_idx as u32, primary)));
        let bucket_bytes = entry.spec.state_size / u64::from(map.bucket_count);
        let due = now + transfer_us(bucket_bytes, self.cfg.copy_rate);
        let plan = rebalance_plan(&svc.planned, partition + 1);
        for mv in plan {
            let token = self.next_token;
            self.next_token += 1;
            let svc = &mut self.services[sid];
            svc.planned[mv.bucket as usize] = mv.to;
            svc.pending_moves
                .insert(mv.bucket, (token, self.moves.len()));
            self.moves.push(BucketMoveRecord {
                service: sid,
                bucket: mv.bucket,
                from: mv.from,
                to: mv.to,
                planned_at: now,
                due_at: due,
                done_at: None,
            });
            self.log(
                "BucketMove",
                format_args!(
                    "{path} bucket={} p{}->p{} due={}",
                    mv.bucket,
                    mv.from,
                    mv.to,
                    due.as_micros()
                ),
            );
            self.schedule(
                due,
                EventKind::BucketMoveDone {
                    service: sid,
                    bucket: mv.bucket,
                    to: mv.to,
                    token,
                },
            );
        }
    }

    fn on_bucket_move_done(&mut self, sid: ServiceId, bucket: u32, to: u32, token: u64) {
        let now = self.now();
        let svc = &mut self.services[sid];
        let Some(&(expected, record)) = svc.pending_moves.get(&bucket) else {
            return;
        };
        if expected != token {
            return;
        }
        svc.pending_moves.remove(&bucket);
        svc.map.as_mut().unwrap().assignment[bucket as usize] = to;
        self.moves[record].done_at = Some(now);
        let path = svc.path.clone();
        self.log(
            "BucketMoveDone",
            format_args!("{path} bucket={bucket} owner=p{to}"),
        );
    }
}
