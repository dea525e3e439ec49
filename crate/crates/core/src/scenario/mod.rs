//! Scenario files: parsing, canonical serialization, and lowering into the
//! runtime model.

pub mod ast;
pub mod lexer;
pub mod parser;
pub mod serialize;

use thiserror::Error;

pub use ast::Scenario;
pub use parser::parse_scenario;
pub use serialize::serialize_scenario;

use crate::engine::SimTime;
use crate::lifecycle::{
    NodePath, ScenarioAction, ScenarioEvent, DEFAULT_COPY_RATE, DEFAULT_PROVISION_US,
    DEFAULT_TAKEOVER_US,
};
use crate::routing::{BalancerPolicy, DEFAULT_DETECTION_US};
use crate::sim::{RunConfig, SimError, Simulation};
use crate::topology::{
    build_topology, Failback, FarmSpec, GeoplexSpec, NodeSpec, PackMode, PackSpec, RaidLevel,
    ServiceKind, ServiceSpec, StorageModel, StorageVariant, Topology, TopologyError,
};
use crate::workload::{ArrivalProcess, KeyDist, Target, WorkloadSpec};
use ast::*;

pub const DEFAULT_GEO_DETECTION_US: u64 = 1_000_000;
pub const DEFAULT_KEY_SPACE: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}, column {col}: expected {expected}, found {found}")]
    Syntax {
        line: u32,
        col: u32,
        expected: String,
        found: String,
    },
    #[error("line {line}, column {col}: unknown unit `{unit}`")]
    UnknownUnit { line: u32, col: u32, unit: String },
    #[error("line {line}, column {col}: duplicate {kind} block \"{name}\"")]
    DuplicateBlockName {
        line: u32,
        col: u32,
        kind: &'static str,
        name: String,
    },
}

impl ParseError {
    pub(crate) fn syntax(
        span: Span,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        ParseError::Syntax {
            line: span.line,
            col: span.col,
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn unknown_unit(span: Span, unit: &str) -> Self {
        ParseError::UnknownUnit {
            line: span.line,
            col: span.col,
            unit: unit.to_string(),
        }
    }

    pub(crate) fn duplicate(span: Span, kind: &'static str, name: &str) -> Self {
        ParseError::DuplicateBlockName {
            line: span.line,
            col: span.col,
            kind,
            name: name.to_string(),
        }
    }
}

/// Anything that can go wrong between scenario text and a ready simulation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoadError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("line {line}, column {col}: {message}")]
    Invalid {
        line: u32,
        col: u32,
        message: String,
    },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn invalid(span: Span, message: impl Into<String>) -> LoadError {
    LoadError::Invalid {
        line: span.line,
        col: span.col,
        message: message.into(),
    }
}

/// A scenario lowered to runtime inputs.
#[derive(Debug, Clone)]
pub struct Model {
    pub geoplex: GeoplexSpec,
    pub topology: Topology,
    pub workloads: Vec<WorkloadSpec>,
    pub injects: Vec<ScenarioEvent>,
    pub seed: Option<u64>,
    pub copy_rate: f64,
    pub provision_us: u64,
}

impl Model {
    pub fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            copy_rate: self.copy_rate,
            provision_us: self.provision_us,
            ..RunConfig::default()
        }
    }

    pub fn simulation(&self, cfg: RunConfig) -> Result<Simulation, SimError> {
        Simulation::new(&self.topology, &self.workloads, &self.injects, cfg)
    }

    /// When every request of every workload has either finished or missed
    /// its deadline; the last scripted event if there are no workloads.
    pub fn default_end(&self) -> SimTime {
        let load = self.workloads.iter().map(|w| w.end() + w.deadline_us).max();
        let script = self.injects.iter().map(|e| e.at).max();
        load.or(script).unwrap_or(SimTime::ZERO)
    }
}

/// Parses, lowers and validates scenario text.
pub fn load(text: &str) -> Result<Model, LoadError> {
    lower(&parse_scenario(text)?)
}

pub fn lower(sc: &Scenario) -> Result<Model, LoadError> {
    let d = sc.defaults().cloned().unwrap_or_default();
    let detect = d.detect.map_or(DEFAULT_DETECTION_US, |v| v.micros());
    let takeover = d.takeover.map_or(DEFAULT_TAKEOVER_US, |v| v.micros());
    let failback = d.failback.unwrap_or_default();
    let copy_rate = d.copy_rate.map_or(DEFAULT_COPY_RATE, |r| r.bytes_per_sec());
    if copy_rate.is_nan() || copy_rate <= 0.0 {
        return Err(invalid(d.span, "copy_rate must be positive"));
    }

    let mut farms = Vec::new();
    for f in sc.farms() {
        let mut services = Vec::new();
        for s in &f.services {
            services.push(lower_service(s, detect, takeover, failback)?);
        }
        farms.push(FarmSpec {
            name: f.name.clone(),
            services,
        });
    }
    let geoplex = match sc.geoplex() {
        None => GeoplexSpec::single(farms),
        Some(g) => GeoplexSpec {
            farms,
            mode: g.mode,
            members: g.farms.clone(),
            detection_delay_us: g.detect.map_or(DEFAULT_GEO_DETECTION_US, |v| v.micros()),
        },
    };
    let topology = build_topology(&geoplex)?;

    let workloads = sc
        .workloads()
        .map(lower_workload)
        .collect::<Result<Vec<_>, _>>()?;
    for (w, b) in workloads.iter().zip(sc.workloads()) {
        w.validate()
            .map_err(|e| invalid(b.span, format!("workload \"{}\": {e}", w.name)))?;
    }
    let injects = sc
        .injects()
        .map(lower_inject)
        .collect::<Result<Vec<_>, _>>()?;

    let model = Model {
        geoplex,
        topology,
        workloads,
        injects,
        seed: d.seed,
        copy_rate,
        provision_us: d.provision.map_or(DEFAULT_PROVISION_US, |v| v.micros()),
    };
    // Resolve every path now so that bad references surface as load errors.
    model.simulation(model.run_config(0))?;
    Ok(model)
}

fn node_spec(id: u32, n: &NodeBlock) -> NodeSpec {
    NodeSpec {
        id,
        service_rate: n.rate,
        disk_capacity: n.disk.bytes(),
        raid: n.raid.unwrap_or(RaidLevel::None),
        degraded_rate_factor: n.degraded.unwrap_or(1.0),
    }
}

fn lower_service(
    s: &ServiceBlock,
    detect: u64,
    takeover: u64,
    failback: Failback,
) -> Result<ServiceSpec, LoadError> {
    let node = s
        .node
        .as_ref()
        .ok_or_else(|| invalid(s.span, format!("service \"{}\" needs a node block", s.name)))?;
    let balancer = match &s.balancer {
        Some(b) => BalancerPolicy::new(b.kind, b.detect.map_or(detect, |v| v.micros())),
        None => BalancerPolicy::new(Default::default(), detect),
    };
    let variant = s.storage.unwrap_or(StorageVariant::SharedNothing);
    let storage = StorageModel {
        variant,
        shared_store: s.store.as_ref().map(|n| node_spec(0, n)),
        invalidation_cost_us: s.invalidation.map_or(0, |v| v.micros()),
    };
    let mut spec = match s.kind {
        ServiceKind::Racs => {
            for (attr, set) in [
                ("partitions", s.partitions.is_some()),
                ("buckets", s.buckets.is_some()),
                ("packs", s.packs.is_some()),
                ("pack", s.pack.is_some()),
            ] {
                if set {
                    return Err(invalid(
                        s.span,
                        format!("`{attr}` applies to raps services"),
                    ));
                }
            }
            let clones = s.clones.unwrap_or(1);
            let nodes = (0..clones).map(|i| node_spec(i, node)).collect();
            ServiceSpec::racs(s.name.clone(), nodes, balancer)
        }
        ServiceKind::Raps => {
            if s.clones.is_some() {
                return Err(invalid(s.span, "`clones` applies to racs services"));
            }
            let partitions = s.partitions.unwrap_or(1);
            let buckets = s.buckets.unwrap_or(partitions);
            let packs = match &s.pack {
                None => (0..partitions)
                    .map(|p| PackSpec {
                        members: vec![node_spec(p, node)],
                        mode: PackMode::ActivePassive,
                        storage_variant: variant,
                        partitions_hosted: vec![p],
                        takeover_us: takeover,
                        failback,
                    })
                    .collect(),
                Some(pb) => {
                    if pb.size == 0 {
                        return Err(invalid(pb.span, "pack size must be positive"));
                    }
                    let count = s.packs.unwrap_or(match pb.mode {
                        PackMode::ActivePassive => partitions,
                        PackMode::ActiveActive => partitions.div_ceil(pb.size),
                    });
                    if count == 0 {
                        return Err(invalid(pb.span, "at least one pack is needed"));
                    }
                    (0..count)
                        .map(|k| PackSpec {
                            members: (0..pb.size)
                                .map(|i| node_spec(k * pb.size + i, node))
                                .collect(),
                            mode: pb.mode,
                            storage_variant: pb.storage,
                            partitions_hosted: (0..partitions).filter(|p| p % count == k).collect(),
                            takeover_us: pb.takeover.map_or(takeover, |v| v.micros()),
                            failback: pb.failback.unwrap_or(failback),
                        })
                        .collect()
                }
            };
            let mut spec = ServiceSpec::raps(s.name.clone(), packs, partitions, buckets);
            spec.balancer = balancer;
            spec
        }
    };
    spec.storage = storage;
    spec.state_size = s.state_size.map_or(0, |v| v.bytes());
    spec.forwards_to = s.forward.clone();
    spec.retry = s.retry.unwrap_or(false);
    Ok(spec)
}

fn lower_workload(w: &WorkloadBlock) -> Result<WorkloadSpec, LoadError> {
    let target = match w.target.as_slice() {
        [service] => Target::Geoplex {
            service: service.clone(),
        },
        [farm, service] => Target::Service {
            farm: farm.clone(),
            service: service.clone(),
        },
        _ => {
            return Err(invalid(
                w.span,
                "target must be \"farm\"/\"service\" or a geoplex service",
            ))
        }
    };
    let total = w.read + w.write;
    if total.is_nan() || total <= 0.0 {
        return Err(invalid(w.span, "mix needs a positive read + write"));
    }
    Ok(WorkloadSpec {
        name: w.name.clone(),
        target,
        arrival: match &w.arrival {
            ArrivalDecl::Poisson(rate) => ArrivalProcess::Poisson { rate: *rate },
            ArrivalDecl::Fixed(d) => ArrivalProcess::Fixed {
                interval_us: d.micros(),
            },
        },
        read_fraction: w.read / total,
        key_space: w.keys.unwrap_or(DEFAULT_KEY_SPACE),
        key_dist: match w.dist {
            None | Some(DistDecl::Uniform) => KeyDist::Uniform,
            Some(DistDecl::Zipf(s)) => KeyDist::Zipf { exponent: s },
            Some(DistDecl::Sequential) => KeyDist::Sequential,
        },
        deadline_us: w.deadline.micros(),
        demand_us: w.demand.micros(),
        write_demand_us: w.write_demand.unwrap_or(w.demand).micros(),
        start: SimTime(w.start.map_or(0, |v| v.micros())),
        duration_us: w.duration.micros(),
    })
}

fn lower_inject(item: &InjectItem) -> Result<ScenarioEvent, LoadError> {
    let node_path = |p: &[String]| match p {
        [farm, service, node] => Ok(NodePath {
            farm: farm.clone(),
            service: service.clone(),
            node: node.clone(),
        }),
        _ => Err(invalid(
            item.span,
            "node path must be \"farm\"/\"service\"/\"node\"",
        )),
    };
    let site = |p: &[String]| match p {
        [farm] => Ok(farm.clone()),
        _ => Err(invalid(item.span, "site path is a single farm name")),
    };
    let service = |p: &[String]| match p {
        [farm, service] => Ok((farm.clone(), service.clone())),
        _ => Err(invalid(
            item.span,
            "service path must be \"farm\"/\"service\"",
        )),
    };
    let action = match &item.action {
        ActionDecl::Fail(FaultTarget::Node, p) => ScenarioAction::FailNode(node_path(p)?),
        ActionDecl::Repair(FaultTarget::Node, p) => ScenarioAction::RepairNode(node_path(p)?),
        ActionDecl::Fail(FaultTarget::Disk, p) => ScenarioAction::FailDisk(node_path(p)?),
        ActionDecl::Repair(FaultTarget::Disk, p) => ScenarioAction::RepairDisk(node_path(p)?),
        ActionDecl::Fail(FaultTarget::Site, p) => ScenarioAction::FailSite(site(p)?),
        ActionDecl::Repair(FaultTarget::Site, p) => ScenarioAction::RepairSite(site(p)?),
        ActionDecl::AddClone(p) => {
            let (farm, service) = service(p)?;
            ScenarioAction::AddClone { farm, service }
        }
        ActionDecl::AddPartition(p) => {
            let (farm, service) = service(p)?;
            ScenarioAction::AddPartition { farm, service }
        }
    };
    Ok(ScenarioEvent {
        at: SimTime(item.at.micros()),
        action,
    })
}

/// Scenarios shipped with the library.
pub const BUNDLED: &[(&str, &str)] = &[
    ("msft1997", include_str!("../../scenarios/msft1997.farm")),
    (
        "fig5_threetier",
        include_str!("../../scenarios/fig5_threetier.farm"),
    ),
    (
        "taxonomy_clone_shared_nothing",
        include_str!("../../scenarios/taxonomy_clone_shared_nothing.farm"),
    ),
    (
        "taxonomy_clone_shared_disk",
        include_str!("../../scenarios/taxonomy_clone_shared_disk.farm"),
    ),
    (
        "taxonomy_pack_shared_nothing",
        include_str!("../../scenarios/taxonomy_pack_shared_nothing.farm"),
    ),
    (
        "taxonomy_pack_shared_disk",
        include_str!("../../scenarios/taxonomy_pack_shared_disk.farm"),
    ),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
