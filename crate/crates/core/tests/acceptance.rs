//! End-to-end acceptance checks. Each check builds a small scenario, runs it,
//! and compares the measurement with a value worked out by hand (or by a
//! closed-form formula) rather than with anything the simulator computes.
//!
//! Run with `cargo test -p farmsim-core --test acceptance`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::panic;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use farmsim_core::engine::SimTime;
use farmsim_core::metrics::{availability, to_csv, Outcome, RunReport};
use farmsim_core::scenario::{self, parse_scenario, serialize_scenario, Model, BUNDLED};
use farmsim_core::sim::{RunOutput, TraceLevel};
use farmsim_core::workload::ArrivalProcess;

type Check = Result<String, String>;

const SEC: u64 = 1_000_000;

fn load(text: &str) -> Model {
    scenario::load(text).unwrap_or_else(|e| panic!("scenario did not load: {e}\n{text}"))
}

fn run(
    model: &Model,
    end: SimTime,
    f: impl FnOnce(&mut farmsim_core::sim::RunConfig),
) -> RunOutput {
    let mut cfg = model.run_config(model.seed.unwrap_or(1));
    f(&mut cfg);
    model.simulation(cfg).expect("simulation").run_until(end)
}

fn avail(report: &RunReport, scope: &str) -> f64 {
    availability(report, scope)
        .expect("scope has traffic")
        .value()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(measured: f64, oracle: f64, tol: f64) -> bool {
    (measured - oracle).abs() <= tol
}

// 1 ----------------------------------------------------------------------

fn clone_availability() -> Check {
    let started = Instant::now();
    let t_end = 1000u64;
    // Node i cycles with period 10^(i+1) s and is down for the last tenth.
    let periods = [10u64, 100, 1000];
    let mut inject = String::from("inject {\n");
    let mut down_windows: Vec<Vec<(u64, u64)>> = Vec::new();
    for (i, period) in periods.iter().enumerate() {
        let mut windows = Vec::new();
        for k in 0..t_end / period {
            let up = k * period + period * 9 / 10;
            let back = (k + 1) * period;
            windows.push((up, back));
            let _ = writeln!(inject, "  at {up} s: fail node \"f\"/\"web\"/\"n{i}\"");
            let _ = writeln!(inject, "  at {back} s: repair node \"f\"/\"web\"/\"n{i}\"");
        }
        down_windows.push(windows);
    }
    inject.push('}');
    let text = format!(
        "defaults {{ seed 7 detect 0 s }}
farm \"f\" {{ service \"web\" {{ kind racs clones 3 node {{ rate 1000 rps disk 1 GB }} balancer round_robin }} }}
workload \"r\" {{ target \"f\"/\"web\" arrival poisson 120 rps mix read 1 write 0
  deadline 1 s demand 1 ms duration {t_end} s }}
{inject}"
    );

    // Per-node availability from the script itself, then the closed form.
    for w in &down_windows {
        let down: u64 = w.iter().map(|(a, b)| b - a).sum();
        let a = 1.0 - down as f64 / t_end as f64;
        ensure(within(a, 0.9, 1e-12), || {
            format!("script gives per-node availability {a}")
        })?;
    }
    let a: f64 = 0.9;
    let oracle = 1.0 - (1.0 - a).powi(3);

    let model = load(&text);
    let out = run(&model, SimTime(t_end * SEC), |_| {});
    let scope = &out.report.scopes["f/web"];
    let measured = avail(&out.report, "f/web");
    let elapsed = started.elapsed();
    let detail = format!(
        "measured {measured:.6}, oracle {oracle:.6}, {} requests, {:.2} s",
        scope.presented,
        elapsed.as_secs_f64()
    );
    ensure(scope.presented >= 100_000, || {
        format!("too few requests: {detail}")
    })?;
    ensure(within(measured, oracle, 0.005), || detail.clone())?;
    ensure(elapsed < Duration::from_secs(5), || {
        format!("too slow: {detail}")
    })?;
    Ok(detail)
}

// 2 ----------------------------------------------------------------------

fn bare_partition_availability() -> Check {
    let p = 4.0;
    let f = 0.1;
    let oracle = 1.0 - f / p;
    let text = "defaults { seed 11 detect 0 s }
farm \"f\" { service \"db\" { kind raps partitions 4 node { rate 1000 rps disk 1 GB } } }
workload \"w\" { target \"f\"/\"db\" arrival poisson 200 rps mix read 1 write 0
  deadline 1 s demand 1 ms duration 1000 s keys 1000000 dist uniform }
inject {
  at 300 s: fail node \"f\"/\"db\"/\"n2\"
  at 400 s: repair node \"f\"/\"db\"/\"n2\"
}";
    let model = load(text);
    let out = run(&model, SimTime(1000 * SEC), |_| {});
    let measured = avail(&out.report, "f/db");
    let detail = format!(
        "measured {measured:.6}, oracle {oracle:.6}, {} requests",
        out.report.scopes["f/db"].presented
    );
    ensure(within(measured, oracle, 0.003), || detail.clone())?;
    Ok(detail)
}

// 3 ----------------------------------------------------------------------

fn pack_failover_outage() -> Check {
    let (detect_s, takeover_s) = (5u64, 10u64);
    let rate = 100u64;
    let partitions = 4u64;
    let oracle = (detect_s + takeover_s) * rate / partitions;
    let text = format!(
        "defaults {{ seed 3 detect {detect_s} s takeover {takeover_s} s }}
farm \"f\" {{ service \"db\" {{
  kind raps partitions 4 buckets 4
  pack {{ size 2 mode active_passive storage shared_disk }}
  node {{ rate 1000 rps disk 1 GB }}
}} }}
workload \"w\" {{ target \"f\"/\"db\" arrival fixed 10 ms mix read 1 write 0
  deadline 1 s demand 1 ms duration 300 s keys 4 dist sequential }}
inject {{ at 100 s: fail node \"f\"/\"db\"/\"n0\" }}"
    );
    let model = load(&text);
    let out = run(&model, SimTime(300 * SEC), |c| c.record_outcomes = true);

    // Keys cycle over the four buckets, so each partition sees a quarter of
    // the arrivals; the hosting partition of key k is fixed for the run.
    let failed: Vec<_> = out
        .report
        .outcomes
        .iter()
        .filter(|o| o.outcome == Outcome::Failed)
        .collect();
    let count = failed.len() as u64;
    let first = failed.first().map(|o| o.arrival.0).unwrap_or(0);
    let last = failed.last().map(|o| o.arrival.0).unwrap_or(0);
    let detail = format!(
        "{count} failed (oracle {oracle} ± 2), arrivals {:.2}s..{:.2}s",
        first as f64 / SEC as f64,
        last as f64 / SEC as f64
    );
    ensure(count.abs_diff(oracle) <= 2, || detail.clone())?;
    ensure(
        first >= 100 * SEC && last <= (100 + detect_s + takeover_s) * SEC,
        || format!("failures outside the outage window: {detail}"),
    )?;
    Ok(detail)
}

// 4 ----------------------------------------------------------------------

fn saturation(n: u32, read: u32, write: u32, offered: u32) -> f64 {
    let text = format!(
        "defaults {{ seed 5 }}
farm \"f\" {{ service \"s\" {{ kind racs clones {n} node {{ rate 1000 rps disk 1 GB }} balancer round_robin }} }}
workload \"w\" {{ target \"f\"/\"s\" arrival poisson {offered} rps mix read {read} write {write}
  deadline 1 h demand 1 ms duration 20 s }}"
    );
    let model = load(&text);
    let out = run(&model, SimTime(20 * SEC), |_| {});
    out.report.scopes["f/s"].serviced() as f64 / 20.0
}

fn write_non_scaling() -> Check {
    let w1 = saturation(1, 0, 1, 3000);
    let w4 = saturation(4, 0, 1, 3000);
    let r1 = saturation(1, 1, 0, 3000);
    let r4 = saturation(4, 1, 0, 6000);
    let detail = format!(
        "writes {w1:.0}/s vs {w4:.0}/s (ratio {:.3}); reads {r1:.0}/s vs {r4:.0}/s (ratio {:.3})",
        w4 / w1,
        r4 / r1
    );
    ensure(within(w4 / w1, 1.0, 0.05), || detail.clone())?;
    ensure(within(r4 / r1, 4.0, 0.4), || detail.clone())?;
    Ok(detail)
}

// 5 ----------------------------------------------------------------------

fn shared_disk_bottleneck() -> Check {
    // 150 writes/s, each costing 1 ms at the store plus 1 ms per peer to
    // invalidate: store load is 0.15 * n, crossing 1 between 6 and 7 clones.
    let mut rows = Vec::new();
    for n in 1..=7u32 {
        let text = format!(
            "defaults {{ seed 9 }}
farm \"f\" {{ service \"s\" {{
  kind racs storage shared_disk
  store {{ rate 1000 rps disk 1 TB }}
  invalidation 1 ms
  clones {n}
  node {{ rate 1000 rps disk 1 GB }}
  balancer round_robin
}} }}
workload \"w\" {{ target \"f\"/\"s\" arrival poisson 300 rps mix read 1 write 1
  deadline 200 ms demand 1 ms duration 120 s }}"
        );
        let model = load(&text);
        let out = run(&model, SimTime(120 * SEC), |_| {});
        let util = out.report.nodes["f/s/store"].utilization;
        let offered_util = 150.0 * n as f64 / 1000.0;
        rows.push((n, offered_util, util, avail(&out.report, "f/s")));
    }
    let detail = rows
        .iter()
        .map(|(n, _, u, a)| format!("n={n} util {u:.3} avail {a:.4}"))
        .collect::<Vec<_>>()
        .join("; ");
    for pair in rows.windows(2) {
        ensure(pair[1].2 > pair[0].2, || {
            format!("store utilization not increasing: {detail}")
        })?;
    }
    let below: Vec<_> = rows.iter().filter(|r| r.1 < 1.0).collect();
    let above: Vec<_> = rows.iter().filter(|r| r.1 > 1.0).collect();
    ensure(!below.is_empty() && !above.is_empty(), || {
        "no threshold crossing".into()
    })?;
    let worst_below = below.iter().map(|r| r.3).fold(f64::INFINITY, f64::min);
    let best_above = above.iter().map(|r| r.3).fold(0.0, f64::max);
    ensure(worst_below > 0.99, || {
        format!("unsaturated store lost requests: {detail}")
    })?;
    ensure(best_above < worst_below - 0.1, || {
        format!("no degradation past 1: {detail}")
    })?;
    Ok(detail)
}

// 6 ----------------------------------------------------------------------

fn active_active_overload() -> Check {
    // One pack of two active members, one partition each. Arrivals every
    // 1 ms alternate between the partitions, demand 1.2 ms: 60% per member.
    let text = "defaults { seed 13 detect 500 ms takeover 1 s }
farm \"f\" { service \"db\" {
  kind raps partitions 2 buckets 4 packs 1
  pack { size 2 mode active_active storage shared_disk }
  node { rate 1000 rps disk 1 GB }
} }
workload \"w\" { target \"f\"/\"db\" arrival fixed 1 ms mix read 1 write 0
  deadline 100 ms demand 1200 us duration 120 s keys 4 dist sequential }
inject {
  at 30 s: fail node \"f\"/\"db\"/\"n1\"
  at 90 s: repair node \"f\"/\"db\"/\"n1\"
}";
    let model = load(text);
    let mut cfg = model.run_config(13);
    cfg.record_outcomes = true;
    let mut sim = model.simulation(cfg).expect("simulation");
    let mut samples = Vec::new();
    for s in 32..90u64 {
        sim.advance_to(SimTime(s * SEC));
        samples.push(sim.queue_len("f/db/n0").expect("survivor exists"));
    }
    let out = sim.finish(SimTime(120 * SEC));

    let window = |from: u64, to: u64| {
        let (mut ok, mut all) = (0u64, 0u64);
        for o in &out.report.outcomes {
            if o.arrival.0 >= from * SEC && o.arrival.0 < to * SEC {
                all += 1;
                ok += u64::from(o.outcome == Outcome::ServicedInDeadline);
            }
        }
        ok as f64 / all as f64
    };
    let pre = window(0, 30);
    let post = window(30, 90);
    let detail = format!(
        "pre {pre:.4}, post {post:.4}, survivor queue {} -> {}",
        samples[0],
        samples[samples.len() - 1]
    );
    ensure(post < pre, || detail.clone())?;
    ensure(samples.windows(2).all(|w| w[1] > w[0]), || {
        format!("queue not growing: {samples:?}")
    })?;
    Ok(detail)
}

// 7 ----------------------------------------------------------------------

fn geoplex_beats_single_farm() -> Check {
    let t_end = 1000u64;
    let (down_from, down_to) = (100u64, 200u64);
    let detect = 1.0;
    let farm = |name: &str| {
        format!(
            "farm \"{name}\" {{ service \"web\" {{ kind racs clones 2 node {{ rate 1000 rps disk 1 GB }} }} }}\n"
        )
    };
    let faults = format!(
        "inject {{\n  at {down_from} s: fail site \"a\"\n  at {down_to} s: repair site \"a\"\n}}\n"
    );
    let load_text = |target: &str| {
        format!(
            "workload \"w\" {{ target {target} arrival fixed 10 ms mix read 1 write 0
  deadline 1 s demand 1 ms duration {t_end} s }}\n"
        )
    };
    let geo_text = format!(
        "geoplex {{ mode active_active farms \"a\", \"b\" detect 1 s }}\n{}{}{}{faults}",
        farm("a"),
        farm("b"),
        load_text("\"web\"")
    );
    let single_text = format!("{}{}{faults}", farm("a"), load_text("\"a\"/\"web\""));

    let geo = run(&load(&geo_text), SimTime(t_end * SEC), |_| {});
    let single = run(&load(&single_text), SimTime(t_end * SEC), |_| {});
    let a_geo = avail(&geo.report, "all");
    let a_single = avail(&single.report, "all");

    // Until the outage is detected, half the requests still go to the dead site.
    let down = (down_to - down_from) as f64;
    let oracle_geo = 1.0 - 0.5 * detect / t_end as f64;
    let oracle_single = 1.0 - down / t_end as f64;
    let detail = format!(
        "geoplex {a_geo:.6} (oracle {oracle_geo:.6}), single farm {a_single:.6} (oracle {oracle_single:.6})"
    );
    ensure(a_geo > a_single, || detail.clone())?;
    ensure(within(a_geo, oracle_geo, 0.005), || detail.clone())?;
    ensure(within(a_single, oracle_single, 0.005), || detail.clone())?;
    Ok(detail)
}

// 8 ----------------------------------------------------------------------

fn rebalance_plan() -> Check {
    let text = "defaults { seed 17 copy_rate 100 MB/s }
farm \"f\" { service \"db\" {
  kind raps partitions 2 buckets 6 state_size 6 GB
  node { rate 1000 rps disk 10 GB }
} }
workload \"w\" { target \"f\"/\"db\" arrival poisson 300 rps mix read 1 write 1
  deadline 1 s demand 1 ms duration 60 s }
inject { at 20 s: add_partition \"f\"/\"db\" }";
    let model = load(text);
    let mut cfg = model.run_config(17);
    cfg.audit_routes = true;
    let mut sim = model.simulation(cfg).expect("simulation");
    sim.advance_to(SimTime(60 * SEC));
    let counts = sim
        .partition_map("f", "db")
        .expect("raps service")
        .bucket_counts();
    let out = sim.finish(SimTime(61 * SEC));

    // Start: bucket b on partition b mod 2, so p0 = {0,2,4}, p1 = {1,3,5}.
    // Both hold 3; the tie goes to p0, which gives up its lowest bucket 0.
    // Now p1 holds the most and gives up bucket 1. Everyone ends with 2.
    let expected_plan = vec![(0u32, 0u32, 2u32), (1, 1, 2)];
    let plan: Vec<_> = out.moves.iter().map(|m| (m.bucket, m.from, m.to)).collect();
    ensure(plan == expected_plan, || {
        format!("plan {plan:?}, expected {expected_plan:?}")
    })?;
    ensure(counts == vec![2, 2, 2], || {
        format!("final counts {counts:?}")
    })?;

    // Audit every routed request: a bucket's owner sequence may change at
    // most once, and only at that bucket's recorded cutover.
    let cutover: BTreeMap<u32, (u32, u32, u64)> = out
        .moves
        .iter()
        .map(|m| {
            (
                m.bucket,
                (m.from, m.to, m.done_at.expect("move finished").0),
            )
        })
        .collect();
    let mut owners: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut violations = 0u64;
    let mut audited = 0u64;
    for r in &out.routes {
        let (Some(b), Some(p)) = (r.bucket, r.partition) else {
            continue;
        };
        audited += 1;
        let seq = owners.entry(b).or_default();
        if seq.last() != Some(&p) {
            seq.push(p);
        }
        if let Some(&(from, to, done)) = cutover.get(&b) {
            let expected = if r.time.0 < done { from } else { to };
            violations += u64::from(p != expected);
        } else {
            violations += u64::from(p != b % 2);
        }
    }
    let flips = owners.values().filter(|s| s.len() > 2).count();
    let detail = format!("plan {plan:?}, counts {counts:?}, {audited} routes audited, {violations} with a second owner");
    ensure(audited > 10_000, || format!("too few routes: {detail}"))?;
    ensure(violations == 0 && flips == 0, || detail.clone())?;
    Ok(detail)
}

// 9 ----------------------------------------------------------------------

fn determinism() -> Check {
    let mut notes = Vec::new();
    for (name, text) in BUNDLED {
        let model = load(text);
        let end = model.default_end();
        let level = if *name == "msft1997" {
            TraceLevel::Lifecycle
        } else {
            TraceLevel::Requests
        };
        let once = || run(&model, end, |c| c.trace = level);
        let (a, b) = (once(), once());
        let (csv_a, csv_b) = (to_csv(&a.report), to_csv(&b.report));
        ensure(csv_a == csv_b, || format!("{name}: report.csv differs"))?;
        ensure(a.trace == b.trace, || format!("{name}: trace.log differs"))?;
        ensure(!a.trace.is_empty(), || format!("{name}: empty trace"))?;
        notes.push(format!("{name} ({} trace bytes)", a.trace.len()));
    }
    Ok(notes.join(", "))
}

// 10 ---------------------------------------------------------------------

fn scale_check() -> Check {
    let text = scenario::bundled("msft1997").ok_or("msft1997 is not bundled")?;
    let model = load(text);
    let farms = model.topology.farm_names().len();
    let nodes = model.topology.node_count();
    let rps: f64 = model
        .workloads
        .iter()
        .map(|w| match w.arrival {
            ArrivalProcess::Poisson { rate } => rate,
            ArrivalProcess::Fixed { interval_us } => SEC as f64 / interval_us as f64,
        })
        .sum();
    ensure(farms == 4 && nodes == 150, || {
        format!("{farms} farms, {nodes} nodes")
    })?;
    ensure(within(rps, 1000.0, 1e-9), || {
        format!("aggregate load {rps} rps")
    })?;

    let started = Instant::now();
    let out = run(&model, SimTime(3600 * SEC), |_| {});
    let elapsed = started.elapsed();
    let presented = out.report.scopes["all"].presented;
    let detail = format!(
        "{farms} farms, {nodes} nodes, {presented} requests in {:.1} s wall",
        elapsed.as_secs_f64()
    );
    ensure(elapsed < Duration::from_secs(60), || detail.clone())?;
    Ok(detail)
}

// 11 ---------------------------------------------------------------------

fn dsl_round_trip() -> Check {
    for (name, text) in BUNDLED {
        let ast = parse_scenario(text).map_err(|e| format!("{name}: {e}"))?;
        let canon = serialize_scenario(&ast);
        let again = parse_scenario(&canon).map_err(|e| format!("{name} canonical: {e}"))?;
        ensure(again == ast, || {
            format!("{name}: AST changed after round trip")
        })?;
        let canon2 = serialize_scenario(&again);
        ensure(canon2 == canon, || {
            format!("{name}: canonical text is not a fixpoint")
        })?;
    }
    Ok(format!("{} bundled scenarios", BUNDLED.len()))
}

type Named = (&'static str, fn() -> Check);

fn main() -> ExitCode {
    let checks: [Named; 11] = [
        ("clone availability", clone_availability),
        ("bare partition availability", bare_partition_availability),
        ("pack failover outage", pack_failover_outage),
        ("write non-scaling", write_non_scaling),
        ("shared-disk bottleneck", shared_disk_bottleneck),
        ("active-active overload", active_active_overload),
        ("geoplex", geoplex_beats_single_farm),
        ("rebalance", rebalance_plan),
        ("determinism", determinism),
        ("scale check", scale_check),
        ("dsl round-trip", dsl_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let result = panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "{} of {} acceptance checks passed",
        checks.len() - failed,
        checks.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
