//! Canonical text form: two-space indent, one attribute per line, blocks in
//! declaration order separated by a blank line.

use std::fmt::Write as _;

use super::ast::*;
use crate::topology::{Failback, GeoMode, PackMode, RaidLevel, ServiceKind, StorageVariant};

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

fn path(segs: &[String]) -> String {
    segs.iter().map(|s| quote(s)).collect::<Vec<_>>().join("/")
}

fn storage(v: StorageVariant) -> &'static str {
    match v {
        StorageVariant::SharedNothing => "shared_nothing",
        StorageVariant::SharedDisk => "shared_disk",
    }
}

fn failback(f: Failback) -> &'static str {
    match f {
        Failback::None => "none",
        Failback::OnRepair => "on_repair",
    }
}

struct Out {
    text: String,
    depth: usize,
}

impl Out {
    fn line(&mut self, s: impl AsRef<str>) {
        for _ in 0..self.depth {
            self.text.push_str("  ");
        }
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    fn open(&mut self, s: impl AsRef<str>) {
        self.line(format!("{} {{", s.as_ref()));
        self.depth += 1;
    }

    fn close(&mut self) {
        self.depth -= 1;
        self.line("}");
    }
}

pub fn serialize_scenario(sc: &Scenario) -> String {
    let mut out = Out {
        text: String::new(),
        depth: 0,
    };
    for (i, block) in sc.blocks.iter().enumerate() {
        if i > 0 {
            out.text.push('\n');
        }
        match block {
            Block::Geoplex(g) => geoplex(&mut out, g),
            Block::Farm(f) => farm(&mut out, f),
            Block::Workload(w) => workload(&mut out, w),
            Block::Inject(b) => inject(&mut out, b),
            Block::Defaults(d) => defaults(&mut out, d),
        }
    }
    out.text
}

fn geoplex(out: &mut Out, g: &GeoplexBlock) {
    out.open("geoplex");
    out.line(match g.mode {
        GeoMode::ActivePassive => "mode active_passive",
        _ => "mode active_active",
    });
    let farms: Vec<String> = g.farms.iter().map(|f| quote(f)).collect();
    out.line(format!("farms {}", farms.join(", ")));
    if let Some(d) = g.detect {
        out.line(format!("detect {d}"));
    }
    out.close();
}

fn farm(out: &mut Out, f: &FarmBlock) {
    out.open(format!("farm {}", quote(&f.name)));
    for (i, s) in f.services.iter().enumerate() {
        if i > 0 {
            out.text.push('\n');
        }
        service(out, s);
    }
    out.close();
}

fn node(out: &mut Out, kw: &str, n: &NodeBlock) {
    out.open(kw);
    out.line(format!("rate {} rps", n.rate));
    out.line(format!("disk {}", n.disk));
    if let Some(r) = n.raid {
        out.line(match r {
            RaidLevel::None => "raid none",
            RaidLevel::Raid1 => "raid raid1",
            RaidLevel::Raid5 => "raid raid5",
        });
    }
    if let Some(d) = n.degraded {
        out.line(format!("degraded {d}"));
    }
    out.close();
}

fn service(out: &mut Out, s: &ServiceBlock) {
    out.open(format!("service {}", quote(&s.name)));
    out.line(match s.kind {
        ServiceKind::Racs => "kind racs",
        ServiceKind::Raps => "kind raps",
    });
    if let Some(v) = s.storage {
        out.line(format!("storage {}", storage(v)));
    }
    if let Some(n) = &s.store {
        node(out, "store", n);
    }
    if let Some(d) = s.invalidation {
        out.line(format!("invalidation {d}"));
    }
    for (kw, v) in [
        ("clones", s.clones),
        ("partitions", s.partitions),
        ("buckets", s.buckets),
        ("packs", s.packs),
    ] {
        if let Some(v) = v {
            out.line(format!("{kw} {v}"));
        }
    }
    if let Some(v) = s.state_size {
        out.line(format!("state_size {v}"));
    }
    if let Some(n) = &s.node {
        node(out, "node", n);
    }
    if let Some(p) = &s.pack {
        out.open("pack");
        out.line(format!("size {}", p.size));
        out.line(match p.mode {
            PackMode::ActiveActive => "mode active_active",
            PackMode::ActivePassive => "mode active_passive",
        });
        out.line(format!("storage {}", storage(p.storage)));
        if let Some(d) = p.takeover {
            out.line(format!("takeover {d}"));
        }
        if let Some(f) = p.failback {
            out.line(format!("failback {}", failback(f)));
        }
        out.close();
    }
    if let Some(b) = &s.balancer {
        let mut l = format!("balancer {}", b.kind.keyword());
        if let Some(d) = b.detect {
            let _ = write!(l, " detect {d}");
        }
        out.line(l);
    }
    if let Some(f) = &s.forward {
        out.line(format!("forward {}", quote(f)));
    }
    if let Some(r) = s.retry {
        out.line(if r { "retry on" } else { "retry off" });
    }
    out.close();
}

fn workload(out: &mut Out, w: &WorkloadBlock) {
    out.open(format!("workload {}", quote(&w.name)));
    out.line(format!("target {}", path(&w.target)));
    out.line(match &w.arrival {
        ArrivalDecl::Poisson(r) => format!("arrival poisson {r} rps"),
        ArrivalDecl::Fixed(d) => format!("arrival fixed {d}"),
    });
    out.line(format!("mix read {} write {}", w.read, w.write));
    out.line(format!("deadline {}", w.deadline));
    out.line(format!("demand {}", w.demand));
    if let Some(d) = w.write_demand {
        out.line(format!("write_demand {d}"));
    }
    out.line(format!("duration {}", w.duration));
    if let Some(k) = w.keys {
        out.line(format!("keys {k}"));
    }
    if let Some(d) = &w.dist {
        out.line(match d {
            DistDecl::Uniform => "dist uniform".to_string(),
            DistDecl::Zipf(s) => format!("dist zipf {s}"),
            DistDecl::Sequential => "dist sequential".to_string(),
        });
    }
    if let Some(s) = w.start {
        out.line(format!("start {s}"));
    }
    out.close();
}

fn inject(out: &mut Out, b: &InjectBlock) {
    out.open("inject");
    for item in &b.items {
        let action = match &item.action {
            ActionDecl::Fail(t, p) => format!("fail {} {}", t.keyword(), path(p)),
            ActionDecl::Repair(t, p) => format!("repair {} {}", t.keyword(), path(p)),
            ActionDecl::AddClone(p) => format!("add_clone {}", path(p)),
            ActionDecl::AddPartition(p) => format!("add_partition {}", path(p)),
        };
        out.line(format!("at {}: {action}", item.at));
    }
    out.close();
}

fn defaults(out: &mut Out, d: &DefaultsBlock) {
    out.open("defaults");
    if let Some(s) = d.seed {
        out.line(format!("seed {s}"));
    }
    if let Some(v) = d.detect {
        out.line(format!("detect {v}"));
    }
    if let Some(v) = d.takeover {
        out.line(format!("takeover {v}"));
    }
    if let Some(v) = d.copy_rate {
        out.line(format!("copy_rate {v}"));
    }
    if let Some(v) = d.provision {
        out.line(format!("provision {v}"));
    }
    if let Some(f) = d.failback {
        out.line(format!("failback {}", failback(f)));
    }
    out.close();
}
