use std::collections::BTreeSet;

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::ParseError;
use crate::routing::BalancerKind;
use crate::topology::{Failback, GeoMode, PackMode, RaidLevel, ServiceKind, StorageVariant};

/// Parses scenario text. Stops at the first error.
pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let toks = tokenize(text)?;
    Parser { toks, pos: 0 }.scenario()
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

type Res<T> = Result<T, ParseError>;

fn once<T>(slot: &mut Option<T>, value: T, span: Span, attr: &str) -> Res<()> {
    if slot.is_some() {
        return Err(ParseError::syntax(
            span,
            "a new attribute",
            format!("second `{attr}`"),
        ));
    }
    *slot = Some(value);
    Ok(())
}

fn required<T>(slot: Option<T>, span: Span, attr: &str) -> Res<T> {
    slot.ok_or_else(|| ParseError::syntax(span, format!("`{attr}`"), "`}`"))
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, expected: impl Into<String>) -> Res<T> {
        let t = self.peek();
        Err(ParseError::syntax(t.span, expected, t.tok.describe()))
    }

    fn punct(&mut self, tok: Tok) -> Res<Span> {
        if self.peek().tok == tok {
            Ok(self.next().span)
        } else {
            self.err(tok.describe())
        }
    }

    fn keyword(&mut self, kw: &str) -> Res<Span> {
        match &self.peek().tok {
            Tok::Word(w) if w == kw => Ok(self.next().span),
            _ => self.err(format!("`{kw}`")),
        }
    }

    fn word(&mut self, what: &str) -> Res<(String, Span)> {
        match &self.peek().tok {
            Tok::Word(w) => {
                let w = w.clone();
                Ok((w, self.next().span))
            }
            _ => self.err(what),
        }
    }

    fn choice<T: Copy>(&mut self, options: &[(&str, T)]) -> Res<T> {
        if let Tok::Word(w) = &self.peek().tok {
            if let Some(&(_, v)) = options.iter().find(|(k, _)| k == w) {
                self.next();
                return Ok(v);
            }
        }
        let names: Vec<String> = options.iter().map(|(k, _)| format!("`{k}`")).collect();
        self.err(names.join(" or "))
    }

    fn string(&mut self) -> Res<String> {
        match &self.peek().tok {
            Tok::Str(s) => {
                let s = s.clone();
                self.next();
                Ok(s)
            }
            _ => self.err("string"),
        }
    }

    /// `"a" / "b"` or `"a/b"`; both yield the segments `[a, b]`.
    fn path(&mut self) -> Res<Vec<String>> {
        let span = self.peek().span;
        let mut segs = Vec::new();
        loop {
            let s = self.string()?;
            for seg in s.split('/') {
                if seg.is_empty() {
                    return Err(ParseError::syntax(
                        span,
                        "non-empty path segment",
                        format!("\"{s}\""),
                    ));
                }
                segs.push(seg.to_string());
            }
            if self.peek().tok != Tok::Slash {
                return Ok(segs);
            }
            self.next();
        }
    }

    fn number(&mut self) -> Res<f64> {
        match &self.peek().tok {
            Tok::Num(n) => {
                let v = n.parse().expect("lexer yields valid numbers");
                self.next();
                Ok(v)
            }
            _ => self.err("number"),
        }
    }

    fn int(&mut self) -> Res<u64> {
        match &self.peek().tok {
            Tok::Num(n) if !n.contains('.') => match n.parse() {
                Ok(v) => {
                    self.next();
                    Ok(v)
                }
                Err(_) => self.err("integer in range"),
            },
            _ => self.err("integer"),
        }
    }

    fn int32(&mut self) -> Res<u32> {
        let span = self.peek().span;
        let v = self.int()?;
        u32::try_from(v).map_err(|_| ParseError::syntax(span, "integer below 2^32", v.to_string()))
    }

    fn unit_word(&mut self, what: &str) -> Res<(String, Span)> {
        match &self.peek().tok {
            Tok::Word(_) => self.word(what),
            _ => self.err(what),
        }
    }

    fn duration(&mut self) -> Res<Duration> {
        let value = self.number()?;
        let (u, span) = self.unit_word("time unit")?;
        let unit = TimeUnit::from_keyword(&u).ok_or_else(|| ParseError::unknown_unit(span, &u))?;
        Ok(Duration { value, unit })
    }

    fn size_unit(&mut self) -> Res<SizeUnit> {
        let (u, span) = self.unit_word("size unit")?;
        SizeUnit::from_keyword(&u).ok_or_else(|| ParseError::unknown_unit(span, &u))
    }

    fn size(&mut self) -> Res<Size> {
        let value = self.number()?;
        Ok(Size {
            value,
            unit: self.size_unit()?,
        })
    }

    fn byte_rate(&mut self) -> Res<ByteRate> {
        let value = self.number()?;
        let unit = self.size_unit()?;
        self.punct(Tok::Slash)?;
        let (s, span) = self.unit_word("`s`")?;
        if s != "s" {
            return Err(ParseError::unknown_unit(
                span,
                &format!("{}/{s}", unit.keyword()),
            ));
        }
        Ok(ByteRate { value, unit })
    }

    fn rps(&mut self) -> Res<f64> {
        let v = self.number()?;
        let (u, span) = self.unit_word("`rps`")?;
        if u != "rps" {
            return Err(ParseError::unknown_unit(span, &u));
        }
        Ok(v)
    }

    fn scenario(&mut self) -> Res<Scenario> {
        let mut sc = Scenario::default();
        let mut farms = BTreeSet::new();
        let mut workloads = BTreeSet::new();
        let (mut geoplex, mut defaults) = (false, false);
        loop {
            let t = self.peek().clone();
            let kw = match &t.tok {
                Tok::Eof => return Ok(sc),
                Tok::Word(w) => w.clone(),
                _ => return self.err("`geoplex`, `farm`, `workload`, `inject` or `defaults`"),
            };
            let block = match kw.as_str() {
                "geoplex" => {
                    if std::mem::replace(&mut geoplex, true) {
                        return Err(ParseError::duplicate(t.span, "geoplex", ""));
                    }
                    Block::Geoplex(self.geoplex()?)
                }
                "farm" => {
                    let f = self.farm()?;
                    if !farms.insert(f.name.clone()) {
                        return Err(ParseError::duplicate(t.span, "farm", &f.name));
                    }
                    Block::Farm(f)
                }
                "workload" => {
                    let w = self.workload()?;
                    if !workloads.insert(w.name.clone()) {
                        return Err(ParseError::duplicate(t.span, "workload", &w.name));
                    }
                    Block::Workload(w)
                }
                "inject" => Block::Inject(self.inject()?),
                "defaults" => {
                    if std::mem::replace(&mut defaults, true) {
                        return Err(ParseError::duplicate(t.span, "defaults", ""));
                    }
                    Block::Defaults(self.defaults()?)
                }
                _ => return self.err("`geoplex`, `farm`, `workload`, `inject` or `defaults`"),
            };
            sc.blocks.push(block);
        }
    }

    /// Runs `attr` for each attribute keyword until the closing brace.
    fn attributes(
        &mut self,
        mut attr: impl FnMut(&mut Self, &str, Span) -> Res<bool>,
    ) -> Res<Span> {
        self.punct(Tok::LBrace)?;
        loop {
            if self.peek().tok == Tok::RBrace {
                return Ok(self.next().span);
            }
            let t = self.peek().clone();
            let Tok::Word(w) = &t.tok else {
                return self.err("attribute or `}`");
            };
            self.next();
            if !attr(self, w, t.span)? {
                return Err(ParseError::syntax(
                    t.span,
                    "attribute or `}`",
                    t.tok.describe(),
                ));
            }
        }
    }

    fn geoplex(&mut self) -> Res<GeoplexBlock> {
        let span = self.keyword("geoplex")?;
        let (mut mode, mut farms, mut detect) = (None, None, None);
        let end = self.attributes(|p, w, at| {
            match w {
                "mode" => {
                    let m = p.choice(&[
                        ("active_active", GeoMode::ActiveActive),
                        ("active_passive", GeoMode::ActivePassive),
                    ])?;
                    once(&mut mode, m, at, w)?;
                }
                "farms" => {
                    let mut names = vec![p.string()?];
                    loop {
                        if p.peek().tok == Tok::Comma {
                            p.next();
                            names.push(p.string()?);
                        } else if matches!(p.peek().tok, Tok::Str(_)) {
                            names.push(p.string()?);
                        } else {
                            break;
                        }
                    }
                    once(&mut farms, names, at, w)?;
                }
                "detect" => {
                    let d = p.duration()?;
                    once(&mut detect, d, at, w)?;
                }
                _ => return Ok(false),
            }
            Ok(true)
        })?;
        Ok(GeoplexBlock {
            span,
            mode: required(mode, end, "mode")?,
            farms: required(farms, end, "farms")?,
            detect,
        })
    }

    fn farm(&mut self) -> Res<FarmBlock> {
        let span = self.keyword("farm")?;
        let name = self.string()?;
        self.punct(Tok::LBrace)?;
        let mut services: Vec<ServiceBlock> = Vec::new();
        while self.peek().tok != Tok::RBrace {
            let at = self.peek().span;
            let svc = self.service()?;
            if services.iter().any(|s| s.name == svc.name) {
                return Err(ParseError::duplicate(at, "service", &svc.name));
            }
            services.push(svc);
        }
        self.next();
        Ok(FarmBlock {
            span,
            name,
            services,
        })
    }

    fn service(&mut self) -> Res<ServiceBlock> {
        let span = self.keyword("service")?;
        let name = self.string()?;
        let mut kind = None;
        let mut svc = ServiceBlock::new(span, name, ServiceKind::Racs);
        let end = self.attributes(|p, w, at| {
            match w {
                "kind" => {
                    let k =
                        p.choice(&[("racs", ServiceKind::Racs), ("raps", ServiceKind::Raps)])?;
                    once(&mut kind, k, at, w)?;
                }
                "storage" => {
                    let v = p.storage_variant()?;
                    once(&mut svc.storage, v, at, w)?;
                }
                "store" => {
                    let n = p.node_body(at)?;
                    once(&mut svc.store, n, at, w)?;
                }
                "invalidation" => {
                    let d = p.duration()?;
                    once(&mut svc.invalidation, d, at, w)?;
                }
                "clones" => {
                    let v = p.int32()?;
                    once(&mut svc.clones, v, at, w)?;
                }
                "partitions" => {
                    let v = p.int32()?;
                    once(&mut svc.partitions, v, at, w)?;
                }
                "buckets" => {
                    let v = p.int32()?;
                    once(&mut svc.buckets, v, at, w)?;
                }
                "packs" => {
                    let v = p.int32()?;
                    once(&mut svc.packs, v, at, w)?;
                }
                "state_size" => {
                    let v = p.size()?;
                    once(&mut svc.state_size, v, at, w)?;
                }
                "node" => {
                    let n = p.node_body(at)?;
                    once(&mut svc.node, n, at, w)?;
                }
                "pack" => {
                    let n = p.pack_body(at)?;
                    once(&mut svc.pack, n, at, w)?;
                }
                "balancer" => {
                    let kind = p.choice(&[
                        ("round_robin", BalancerKind::RoundRobin),
                        ("least_queue", BalancerKind::LeastQueue),
                        ("sieve", BalancerKind::Sieve),
                    ])?;
                    let detect = if matches!(&p.peek().tok, Tok::Word(d) if d == "detect") {
                        p.next();
                        Some(p.duration()?)
                    } else {
                        None
                    };
                    once(&mut svc.balancer, BalancerDecl { kind, detect }, at, w)?;
                }
                "forward" => {
                    let s = p.string()?;
                    once(&mut svc.forward, s, at, w)?;
                }
                "retry" => {
                    let v = p.choice(&[("on", true), ("off", false)])?;
                    once(&mut svc.retry, v, at, w)?;
                }
                _ => return Ok(false),
            }
            Ok(true)
        })?;
        svc.kind = required(kind, end, "kind")?;
        Ok(svc)
    }

    fn storage_variant(&mut self) -> Res<StorageVariant> {
        self.choice(&[
            ("shared_nothing", StorageVariant::SharedNothing),
            ("shared_disk", StorageVariant::SharedDisk),
        ])
    }

    fn node_body(&mut self, span: Span) -> Res<NodeBlock> {
        let (mut rate, mut disk, mut raid, mut degraded) = (None, None, None, None);
        let end = self.attributes(|p, w, at| {
            match w {
                "rate" => {
                    let v = p.rps()?;
                    once(&mut rate, v, at, w)?;
                }
                "disk" => {
                    let v = p.size()?;
                    once(&mut disk, v, at, w)?;
                }
                "raid" => {
                    let v = p.choice(&[
                        ("none", RaidLevel::None),
                        ("raid1", RaidLevel::Raid1),
                        ("raid5", RaidLevel::Raid5),
                    ])?;
                    once(&mut raid, v, at, w)?;
                }
                "degraded" => {
                    let v = p.number()?;
                    once(&mut degraded, v, at, w)?;
                }
                _ => return Ok(false),
            }
            Ok(true)
        })?;
        Ok(NodeBlock {
            span,
            rate: required(rate, end, "rate")?,
            disk: required(disk, end, "disk")?,
            raid,
            degraded,
        })
    }

    fn pack_body(&mut self, span: Span) -> Res<PackBlock> {
        let (mut size, mut mode, mut storage, mut takeover, mut failback) =
            (None, None, None, None, None);
        let end = self.attributes(|p, w, at| {
            match w {
                "size" => {
                    let v = p.int32()?;
                    once(&mut size, v, at, w)?;
                }
                "mode" => {
                    let v = p.choice(&[
                        ("active_active", PackMode::ActiveActive),
                        ("active_passive", PackMode::ActivePassive),
                    ])?;
                    once(&mut mode, v, at, w)?;
                }
                "storage" => {
                    let v = p.storage_variant()?;
                    once(&mut storage, v, at, w)?;
                }
                "takeover" => {
                    let v = p.duration()?;
                    once(&mut takeover, v, at, w)?;
                }
                "failback" => {
                    let v = p.failback()?;
                    once(&mut failback, v, at, w)?;
                }
                _ => return Ok(false),
            }
            Ok(true)
        })?;
        Ok(PackBlock {
            span,
            size: required(size, end, "size")?,
            mode: required(mode, end, "mode")?,
            storage: required(storage, end, "storage")?,
            takeover,
            failback,
        })
    }

    fn failback(&mut self) -> Res<Failback> {
        self.choice(&[("none", Failback::None), ("on_repair", Failback::OnRepair)])
    }

    fn workload(&mut self) -> Res<WorkloadBlock> {
        let span = self.keyword("workload")?;
        let name = self.string()?;
        let (mut target, mut arrival, mut mix, mut deadline, mut demand) =
            (None, None, None, None, None);
        let (mut write_demand, mut duration, mut keys, mut dist, mut start) =
            (None, None, None, None, None);
        let end = self.attributes(|p, w, at| {
            match w {
                "target" => {
                    let v = p.path()?;
                    once(&mut target, v, at, w)?;
                }
                "arrival" => {
                    let v = match p.choice(&[("poisson", true), ("fixed", false)])? {
                        true => ArrivalDecl::Poisson(p.rps()?),
                        false => ArrivalDecl::Fixed(p.duration()?),
                    };
                    once(&mut arrival, v, at, w)?;
                }
                "mix" => {
                    p.keyword("read")?;
                    let r = p.number()?;
                    p.keyword("write")?;
                    let wr = p.number()?;
                    once(&mut mix, (r, wr), at, w)?;
                }
                "deadline" => {
                    let v = p.duration()?;
                    once(&mut deadline, v, at, w)?;
                }
                "demand" => {
                    let v = p.duration()?;
                    once(&mut demand, v, at, w)?;
                }
                "write_demand" => {
                    let v = p.duration()?;
                    once(&mut write_demand, v, at, w)?;
                }
                "duration" => {
                    let v = p.duration()?;
                    once(&mut duration, v, at, w)?;
                }
                "keys" => {
                    let v = p.int()?;
                    once(&mut keys, v, at, w)?;
                }
                "dist" => {
                    let v = match p.choice(&[("uniform", 0), ("zipf", 1), ("sequential", 2)])? {
                        0 => DistDecl::Uniform,
                        1 => DistDecl::Zipf(p.number()?),
                        _ => DistDecl::Sequential,
                    };
                    once(&mut dist, v, at, w)?;
                }
                "start" => {
                    let v = p.duration()?;
                    once(&mut start, v, at, w)?;
                }
                _ => return Ok(false),
            }
            Ok(true)
        })?;
        let (read, write) = required(mix, end, "mix")?;
        Ok(WorkloadBlock {
            span,
            name,
            target: required(target, end, "target")?,
            arrival: required(arrival, end, "arrival")?,
            read,
            write,
            deadline: required(deadline, end, "deadline")?,
            demand: required(demand, end, "demand")?,
            write_demand,
            duration: required(duration, end, "duration")?,
            keys,
            dist,
            start,
        })
    }

    fn inject(&mut self) -> Res<InjectBlock> {
        let span = self.keyword("inject")?;
        self.punct(Tok::LBrace)?;
        let mut items = Vec::new();
        while self.peek().tok != Tok::RBrace {
            let at_span = self.keyword("at")?;
            let at = self.duration()?;
            self.punct(Tok::Colon)?;
            let (w, wspan) = self.word("`fail`, `repair`, `add_clone` or `add_partition`")?;
            let action = match w.as_str() {
                "fail" | "repair" => {
                    let target = self.choice(&[
                        ("node", FaultTarget::Node),
                        ("disk", FaultTarget::Disk),
                        ("site", FaultTarget::Site),
                    ])?;
                    let path = self.path()?;
                    if w == "fail" {
                        ActionDecl::Fail(target, path)
                    } else {
                        ActionDecl::Repair(target, path)
                    }
                }
                "add_clone" => ActionDecl::AddClone(self.path()?),
                "add_partition" => ActionDecl::AddPartition(self.path()?),
                other => {
                    return Err(ParseError::syntax(
                        wspan,
                        "`fail`, `repair`, `add_clone` or `add_partition`",
                        format!("`{other}`"),
                    ))
                }
            };
            items.push(InjectItem {
                span: at_span,
                at,
                action,
            });
        }
        self.next();
        Ok(InjectBlock { span, items })
    }

    fn defaults(&mut self) -> Res<DefaultsBlock> {
        let span = self.keyword("defaults")?;
        let mut d = DefaultsBlock {
            span,
            ..DefaultsBlock::default()
        };
        self.attributes(|p, w, at| {
            match w {
                "seed" => {
                    let v = p.int()?;
                    once(&mut d.seed, v, at, w)?;
                }
                "detect" => {
                    let v = p.duration()?;
                    once(&mut d.detect, v, at, w)?;
                }
                "takeover" => {
                    let v = p.duration()?;
                    once(&mut d.takeover, v, at, w)?;
                }
                "copy_rate" => {
                    let v = p.byte_rate()?;
                    once(&mut d.copy_rate, v, at, w)?;
                }
                "provision" => {
                    let v = p.duration()?;
                    once(&mut d.provision, v, at, w)?;
                }
                "failback" => {
                    let v = p.failback()?;
                    once(&mut d.failback, v, at, w)?;
                }
                _ => return Ok(false),
            }
            Ok(true)
        })?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
farm "f" {
  service "s" {
    kind racs
    clones 2
    node { rate 100 rps disk 1 GB }
    balancer round_robin
  }
}
workload "w" {
  target "f"/"s"
  arrival poisson 50 rps
  mix read 9 write 1
  deadline 100 ms
  demand 1 ms
  duration 10 s
}
"#;

    #[test]
    fn minimal_scenario() {
        let sc = parse_scenario(MINIMAL).unwrap();
        let farms: Vec<_> = sc.farms().collect();
        assert_eq!(farms.len(), 1);
        assert_eq!(farms[0].services.len(), 1);
        let s = &farms[0].services[0];
        assert_eq!(s.clones, Some(2));
        assert_eq!(s.node.as_ref().unwrap().disk.bytes(), 1_000_000_000);
        let w = sc.workloads().next().unwrap();
        assert_eq!(w.target, vec!["f".to_string(), "s".to_string()]);
        assert_eq!(w.deadline.micros(), 100_000);
    }

    #[test]
    fn missing_brace_reports_line() {
        let text = "farm \"f\" {\n  service \"s\" {\n    kind racs\n";
        match parse_scenario(text).unwrap_err() {
            ParseError::Syntax { line, expected, .. } => {
                assert_eq!(line, 4);
                assert!(expected.contains('}'), "{expected}");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn unknown_unit() {
        let text = "workload \"w\" { deadline 5 fortnights }";
        assert!(matches!(
            parse_scenario(text),
            Err(ParseError::UnknownUnit {
                line: 1,
                col: 27,
                ..
            })
        ));
    }

    #[test]
    fn missing_unit_is_syntax_error() {
        let text = "defaults { detect 5 }";
        assert!(matches!(
            parse_scenario(text),
            Err(ParseError::Syntax { .. })
        ));
    }

    #[test]
    fn duplicate_farm() {
        let text = "farm \"a\" { }\nfarm \"a\" { }";
        assert!(matches!(
            parse_scenario(text),
            Err(ParseError::DuplicateBlockName { line: 2, .. })
        ));
    }

    #[test]
    fn inject_actions() {
        let text = r#"inject {
  at 10 s: fail node "f"/"s"/"n0"
  at 20 s: repair disk "f/s/n1"
  at 30 s: fail site "f"
  at 1 min: add_clone "f"/"s"
}"#;
        let sc = parse_scenario(text).unwrap();
        let items: Vec<_> = sc.injects().collect();
        assert_eq!(items.len(), 4);
        assert_eq!(
            items[1].action,
            ActionDecl::Repair(FaultTarget::Disk, vec!["f".into(), "s".into(), "n1".into()])
        );
        assert_eq!(items[3].at.micros(), 60_000_000);
    }

    #[test]
    fn copy_rate_units() {
        let sc = parse_scenario("defaults { copy_rate 100 MB/s seed 7 }").unwrap();
        let d = sc.defaults().unwrap();
        assert_eq!(d.copy_rate.unwrap().bytes_per_sec(), 100e6);
        assert_eq!(d.seed, Some(7));
        assert!(matches!(
            parse_scenario("defaults { copy_rate 100 MB/h }"),
            Err(ParseError::UnknownUnit { .. })
        ));
    }

    #[test]
    fn empty_is_valid() {
        assert_eq!(
            parse_scenario("  # nothing\n").unwrap(),
            Scenario::default()
        );
    }
}
