//! Syntax tree of a scenario file. Every value keeps the unit it was written
//! with so that serialization reproduces the input faithfully.

use std::fmt;

use crate::routing::BalancerKind;
use crate::topology::{Failback, GeoMode, PackMode, RaidLevel, ServiceKind, StorageVariant};

/// Source position (1-based). Positions never take part in comparisons, so
/// two trees parsed from differently formatted text compare equal.
#[derive(Debug, Clone, Copy, Default)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

impl PartialEq for Span {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeUnit {
    Us,
    Ms,
    S,
    Min,
    H,
}

impl TimeUnit {
    pub fn keyword(self) -> &'static str {
        match self {
            TimeUnit::Us => "us",
            TimeUnit::Ms => "ms",
            TimeUnit::S => "s",
            TimeUnit::Min => "min",
            TimeUnit::H => "h",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Some(match s {
            "us" => TimeUnit::Us,
            "ms" => TimeUnit::Ms,
            "s" => TimeUnit::S,
            "min" => TimeUnit::Min,
            "h" => TimeUnit::H,
            _ => return None,
        })
    }

    pub fn micros(self) -> f64 {
        match self {
            TimeUnit::Us => 1.0,
            TimeUnit::Ms => 1e3,
            TimeUnit::S => 1e6,
            TimeUnit::Min => 60e6,
            TimeUnit::H => 3600e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeUnit {
    B,
    Kb,
    Mb,
    Gb,
    Tb,
}

impl SizeUnit {
    pub fn keyword(self) -> &'static str {
        match self {
            SizeUnit::B => "B",
            SizeUnit::Kb => "KB",
            SizeUnit::Mb => "MB",
            SizeUnit::Gb => "GB",
            SizeUnit::Tb => "TB",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Some(match s {
            "B" => SizeUnit::B,
            "KB" => SizeUnit::Kb,
            "MB" => SizeUnit::Mb,
            "GB" => SizeUnit::Gb,
            "TB" => SizeUnit::Tb,
            _ => return None,
        })
    }

    /// Decimal multiples.
    pub fn bytes(self) -> f64 {
        match self {
            SizeUnit::B => 1.0,
            SizeUnit::Kb => 1e3,
            SizeUnit::Mb => 1e6,
            SizeUnit::Gb => 1e9,
            SizeUnit::Tb => 1e12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Duration {
    pub value: f64,
    pub unit: TimeUnit,
}

impl Duration {
    pub fn micros(self) -> u64 {
        (self.value * self.unit.micros()).round() as u64
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.value, self.unit.keyword())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Size {
    pub value: f64,
    pub unit: SizeUnit,
}

impl Size {
    pub fn bytes(self) -> u64 {
        (self.value * self.unit.bytes()).round() as u64
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.value, self.unit.keyword())
    }
}

/// Bytes per second, written `100 MB/s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ByteRate {
    pub value: f64,
    pub unit: SizeUnit,
}

impl ByteRate {
    pub fn bytes_per_sec(self) -> f64 {
        self.value * self.unit.bytes()
    }
}

impl fmt::Display for ByteRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}/s", self.value, self.unit.keyword())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Geoplex(GeoplexBlock),
    Farm(FarmBlock),
    Workload(WorkloadBlock),
    Inject(InjectBlock),
    Defaults(DefaultsBlock),
}

impl Scenario {
    pub fn farms(&self) -> impl Iterator<Item = &FarmBlock> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Farm(f) => Some(f),
            _ => None,
        })
    }

    pub fn workloads(&self) -> impl Iterator<Item = &WorkloadBlock> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Workload(w) => Some(w),
            _ => None,
        })
    }

    pub fn injects(&self) -> impl Iterator<Item = &InjectItem> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Inject(i) => Some(i.items.iter()),
                _ => None,
            })
            .flatten()
    }

    pub fn geoplex(&self) -> Option<&GeoplexBlock> {
        self.blocks.iter().find_map(|b| match b {
            Block::Geoplex(g) => Some(g),
            _ => None,
        })
    }

    pub fn defaults(&self) -> Option<&DefaultsBlock> {
        self.blocks.iter().find_map(|b| match b {
            Block::Defaults(d) => Some(d),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoplexBlock {
    pub span: Span,
    pub mode: GeoMode,
    pub farms: Vec<String>,
    pub detect: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FarmBlock {
    pub span: Span,
    pub name: String,
    pub services: Vec<ServiceBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceBlock {
    pub span: Span,
    pub name: String,
    pub kind: ServiceKind,
    pub storage: Option<StorageVariant>,
    pub store: Option<NodeBlock>,
    pub invalidation: Option<Duration>,
    pub clones: Option<u32>,
    pub partitions: Option<u32>,
    pub buckets: Option<u32>,
    pub packs: Option<u32>,
    pub state_size: Option<Size>,
    pub node: Option<NodeBlock>,
    pub pack: Option<PackBlock>,
    pub balancer: Option<BalancerDecl>,
    pub forward: Option<String>,
    pub retry: Option<bool>,
}

impl ServiceBlock {
    pub fn new(span: Span, name: String, kind: ServiceKind) -> Self {
        Self {
            span,
            name,
            kind,
            storage: None,
            store: None,
            invalidation: None,
            clones: None,
            partitions: None,
            buckets: None,
            packs: None,
            state_size: None,
            node: None,
            pack: None,
            balancer: None,
            forward: None,
            retry: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeBlock {
    pub span: Span,
    /// Requests per second.
    pub rate: f64,
    pub disk: Size,
    pub raid: Option<RaidLevel>,
    pub degraded: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackBlock {
    pub span: Span,
    pub size: u32,
    pub mode: PackMode,
    pub storage: StorageVariant,
    pub takeover: Option<Duration>,
    pub failback: Option<Failback>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancerDecl {
    pub kind: BalancerKind,
    pub detect: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalDecl {
    Poisson(f64),
    Fixed(Duration),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DistDecl {
    Uniform,
    Zipf(f64),
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadBlock {
    pub span: Span,
    pub name: String,
    pub target: Vec<String>,
    pub arrival: ArrivalDecl,
    pub read: f64,
    pub write: f64,
    pub deadline: Duration,
    pub demand: Duration,
    pub write_demand: Option<Duration>,
    pub duration: Duration,
    pub keys: Option<u64>,
    pub dist: Option<DistDecl>,
    pub start: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectBlock {
    pub span: Span,
    pub items: Vec<InjectItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultTarget {
    Node,
    Disk,
    Site,
}

impl FaultTarget {
    pub fn keyword(self) -> &'static str {
        match self {
            FaultTarget::Node => "node",
            FaultTarget::Disk => "disk",
            FaultTarget::Site => "site",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionDecl {
    Fail(FaultTarget, Vec<String>),
    Repair(FaultTarget, Vec<String>),
    AddClone(Vec<String>),
    AddPartition(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectItem {
    pub span: Span,
    pub at: Duration,
    pub action: ActionDecl,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DefaultsBlock {
    pub span: Span,
    pub seed: Option<u64>,
    pub detect: Option<Duration>,
    pub takeover: Option<Duration>,
    pub copy_rate: Option<ByteRate>,
    pub provision: Option<Duration>,
    pub failback: Option<Failback>,
}
