//! End-to-end acceptance checks on the ten-node reference topology. Prints
//! one PASS/FAIL line per check and exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;
use srp::codec::*;
use srp::crypto::QidMode;
use srp::harness::*;
use srp::simnet::{ground_truth_check, TraceRecord, MS};

const S: NodeId = NodeId(100);
const T: NodeId = NodeId(200);
const M1: NodeId = NodeId(101);
const M2: NodeId = NodeId(102);
const X: NodeId = NodeId(250);
const M_STAR: NodeId = NodeId(150);

fn n(v: u32) -> NodeId {
    NodeId(v)
}

type Check = Result<String, String>;

fn ids(route: &[NodeId]) -> String {
    let parts: Vec<String> = route.iter().map(|n| n.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run(cfg: &ScenarioConfig) -> Result<RunOutcome, String> {
    run_scenario(cfg).map_err(|e| e.to_string())
}

fn bundled(name: &str) -> Result<RunOutcome, String> {
    run(&load_bundled(name).map_err(|e| e.to_string())?)
}

fn at<'a>(out: &'a RunOutcome, node: NodeId, event: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
    out.trace.iter().filter(move |r| r.node == node && r.event == event)
}

fn fabricated_reply() -> Check {
    let out = bundled("scenario1")?;
    let rejected = at(&out, S, "reply_reject")
        .filter(|r| r.reason.as_deref() == Some("BadMac") && r.route.as_deref() == Some(&[S, M1, T][..]))
        .count();
    ensure(rejected >= 1, "no BadMac rejection of [S,M1,T] at S")?;
    let falses = out.report.false_routes().count();
    ensure(falses == 0, format!("{falses} false routes accepted"))?;
    Ok(format!("{rejected} [S,M1,T] reply rejected BadMac, 0 false routes"))
}

fn request_dropping() -> Check {
    let out = bundled("scenario2")?;
    let routes: Vec<_> = out.report.accepted_routes().collect();
    ensure(!routes.is_empty(), "discovery found no route")?;
    ensure(out.report.success_fraction() == 1.0, "a discovery failed")?;
    ensure(routes.iter().all(|r| !r.nodes.contains(&M1)), "an accepted route contains M1")?;
    Ok(format!("{} routes accepted, none through M1", routes.len()))
}

fn reply_tampering() -> Check {
    let out = bundled("scenario3")?;
    let bad = at(&out, S, "reply_reject").filter(|r| r.reason.as_deref() == Some("BadMac")).count();
    ensure(bad >= 1, "tampered reply was not rejected BadMac")?;
    let target = [S, n(1), M1, n(5), n(4), T];
    let hit = out.report.accepted_routes().find(|r| r.nodes == target).ok_or("untampered route not accepted")?;
    ensure(hit.truth.is_genuine(), "untampered route fails ground truth")?;
    Ok(format!("{bad} tampered reply rejected BadMac; [S,1,M1,5,4,T] accepted and genuine"))
}

fn request_corruption() -> Check {
    let out = bundled("scenario4")?;
    let forged = [S, X, n(3), M2, T];
    let sent = at(&out, T, "reply_sent").any(|r| r.route.as_deref() == Some(&forged[..]));
    ensure(sent, "T never answered the corrupted request")?;
    let dropped = at(&out, n(3), "drop").filter(|r| r.reason.as_deref() == Some("NextHopUnreachable")).count();
    ensure(dropped >= 1, "node 3 did not drop the reply")?;
    let with_x = out.report.accepted_routes().filter(|r| r.nodes.contains(&X)).count();
    ensure(with_x == 0, format!("{with_x} accepted routes contain X"))?;
    Ok(format!("reply over [T,M2,3,X,S] dropped NextHopUnreachable at 3 ({dropped}x), 0 routes with X"))
}

fn replay() -> Check {
    let cfg = load_bundled("scenario5").map_err(|e| e.to_string())?;
    let out = run(&cfg)?;
    let first = out.report.discoveries.first().ok_or("no discovery")?;
    let (qseq, qid) = (first.qseq, first.qid);
    let same = |r: &&TraceRecord| r.qseq == Some(qseq) && r.qid == Some(qid);
    // The two replays fire 50 ms and 6400 ms after M1 first hears the request.
    let replays: Vec<_> = at(&out, M1, "attack").filter(|r| r.reason.as_deref() == Some("Replay")).map(|r| r.time).collect();
    ensure(replays.len() == 2, format!("expected 2 replays, saw {}", replays.len()))?;
    let neighbors: BTreeSet<NodeId> = out.topology.neighbors(M1).collect();
    let window = |t: u64| t..t + 10 * MS;
    let dup = out
        .trace
        .iter()
        .filter(|r| window(replays[0]).contains(&r.time) && neighbors.contains(&r.node) && r.peer == Some(M1))
        .filter(same)
        .collect::<Vec<_>>();
    let dup_ok = !dup.is_empty() && dup.iter().all(|r| r.event == "drop" && matches!(r.reason.as_deref(), Some("Duplicate" | "OwnRequest")));
    ensure(dup_ok, format!("immediate replay not dropped as duplicate: {dup:?}"))?;
    let dups = dup.iter().filter(|r| r.reason.as_deref() == Some("Duplicate")).count();
    ensure(dups >= 1, "no Duplicate drop")?;
    let late = out.trace.iter().filter(|r| r.time >= replays[1]).filter(same).collect::<Vec<_>>();
    let relayed = late.iter().any(|r| r.event == "relay");
    ensure(relayed, "late replay did not propagate")?;
    let replayed = late.iter().filter(|r| r.node == T && r.has("request_reject", Some("Replayed"))).count();
    ensure(replayed >= 1, "late replay not rejected Replayed at T")?;
    let accepted_late = late.iter().any(|r| r.node == T && r.event == "reply_sent");
    ensure(!accepted_late, "T answered the late replay")?;
    Ok(format!("{dups} Duplicate drops at M1's neighbors; late copy propagated and rejected Replayed at T {replayed}x"))
}

fn qid_prediction() -> Check {
    let mut cfg = load_bundled("scenario6").map_err(|e| e.to_string())?;
    let blocked = |out: &RunOutcome| -> (usize, usize) {
        // The first discovery is the one the attacker observes.
        let later: Vec<_> = out.report.discoveries.iter().skip(1).collect();
        (later.iter().filter(|d| d.routes.is_empty()).count(), later.len())
    };
    let random = run(&cfg)?;
    let planted = at(&random, M1, "attack").count();
    ensure(planted == 1, "attacker never started guessing")?;
    let guesses = random.trace.iter().filter(|r| r.node == M1 && r.event == "tx" && r.time > 100 * MS && r.time < 1_100_000 * MS).count();
    ensure(guesses >= 1000, format!("only {guesses} guessed requests sent"))?;
    let (b_rand, total) = blocked(&random);
    ensure(total == 1000, format!("expected 1000 benign discoveries, got {total}"))?;
    cfg.protocol.qid_mode = QidMode::Sequential;
    let seq = run(&cfg)?;
    let (b_seq, total_seq) = blocked(&seq);
    ensure(total_seq == 1000, format!("control: expected 1000 discoveries, got {total_seq}"))?;
    ensure(b_rand == 0, format!("{b_rand} of 1000 blocked with random qids"))?;
    ensure(b_seq * 100 >= 99 * total_seq, format!("control blocked only {b_seq} of {total_seq}"))?;
    Ok(format!("random qids: {b_rand}/1000 blocked; sequential control: {b_seq}/1000 blocked"))
}

fn spoofing() -> Check {
    let out = bundled("scenario7")?;
    let through: Vec<_> = out.report.accepted_routes().filter(|r| r.nodes.contains(&M_STAR)).collect();
    ensure(!through.is_empty(), "no accepted route through M*")?;
    for r in &through {
        let truth = ground_truth_check(&out.topology, &out.bindings, &r.nodes, r.accepted_at);
        ensure(truth.is_genuine(), format!("{:?} fails ground truth: {truth:?}", r.nodes))?;
    }
    Ok(format!("{} routes through M* accepted, all genuine at radio level", through.len()))
}

fn multi_spoof() -> Check {
    let cfg = load_bundled("scenario8").map_err(|e| e.to_string())?;
    let out = run(&cfg)?;
    let d = out.report.discoveries.first().ok_or("no discovery")?;
    let xor = cfg.attackers[0].params.get("qid_xor").and_then(|v| v.as_u64()).unwrap_or(0x00ff_00ff) as u32;
    let neighbors: Vec<NodeId> = out.topology.neighbors(M1).filter(|&v| v != S).collect();
    let mut per = BTreeMap::new();
    for r in out.trace.iter().filter(|r| r.event == "relay" && neighbors.contains(&r.node)) {
        *per.entry((r.node, r.qid.unwrap_or(0))).or_insert(0u32) += 1;
    }
    for &nb in &neighbors {
        for qid in [d.qid, d.qid ^ xor] {
            let c = per.get(&(nb, qid)).copied().unwrap_or(0);
            ensure(c == 1, format!("node {nb} relayed qid {qid:#x} {c} times"))?;
        }
    }
    ensure(per.values().all(|&c| c == 1), format!("some qid relayed more than once: {per:?}"))?;
    let bad = at(&out, T, "request_reject")
        .filter(|r| r.reason.as_deref() == Some("BadMac") && r.qid == Some(d.qid ^ xor))
        .count();
    ensure(bad >= 1, "modified-qid copy not rejected BadMac at T")?;
    Ok(format!("neighbors {} relay each qid once; modified qid rejected BadMac at T {bad}x", ids(&neighbors)))
}

fn collusion() -> Check {
    let out = bundled("collusion")?;
    let falses: Vec<_> = out.report.false_routes().collect();
    ensure(falses.len() == 1, format!("{} false routes", falses.len()))?;
    ensure(falses[0].nodes.contains(&M1) && falses[0].nodes.contains(&M2), "false route lacks a colluder")?;
    let genuine = out.report.genuine_routes().count();
    ensure(genuine + 1 == out.report.accepted_routes().count(), "unclassified routes")?;
    Ok(format!("1 false route {}, {genuine} genuine", ids(&falses[0].nodes)))
}

fn fake_route_error() -> Check {
    let out = bundled("fake_error")?;
    let mism = at(&out, S, "error_reject").filter(|r| r.reason.as_deref() == Some("PrefixMismatch") && r.time < 2000 * MS).count();
    ensure(mism >= 1, "M2's error not rejected PrefixMismatch")?;
    let honest = at(&out, S, "error_accept").filter(|r| r.time >= 2000 * MS).count();
    ensure(honest >= 1, "honest error not accepted")?;
    let accepted_early = at(&out, S, "error_accept").any(|r| r.time < 2000 * MS);
    ensure(!accepted_early, "an error was accepted before the link failed")?;
    let route = [S, n(1), n(4), T];
    let status = out.nodes[&S].source.cache.routes_to(T).iter().find(|c| c.nodes == route).map(|c| c.status);
    ensure(status == Some(srp::node::RouteStatus::Broken), format!("route status {status:?}"))?;
    Ok(format!("off-route error rejected PrefixMismatch {mism}x; honest error accepted, route broken"))
}

fn dos_resilience() -> Check {
    let cfg = load_bundled("flood").map_err(|e| e.to_string())?;
    let mut quiet = cfg.clone();
    quiet.attackers.clear();
    let base = run(&quiet)?;
    let attacked = run(&cfg)?;
    let lat = |o: &RunOutcome| o.report.discoveries.first().and_then(|d| d.latency_us);
    let l0 = lat(&base).ok_or("no attack-free latency")?;
    let l1 = lat(&attacked).ok_or("discovery under flood failed")?;
    ensure(l1 <= 3 * l0, format!("latency {l1} us vs {l0} us attack-free"))?;
    let rate = cfg.attackers[0].params["rate"].as_f64().unwrap_or(0.0);
    // S discovers at about one query per second.
    ensure(rate >= 100.0, "flooder slower than 100 q/s")?;
    let start = cfg.attackers[0].params.get("start_ms").and_then(|v| v.as_u64()).unwrap_or(0) * MS;
    let deadline = start + 1000 * MS;
    for nb in attacked.topology.neighbors(M1) {
        let last = attacked
            .trace
            .iter()
            .filter(|r| r.node == nb && r.event == "enqueue" && r.peer == Some(M1) && r.time <= deadline)
            .last()
            .ok_or(format!("node {nb} never queued from M1"))?;
        ensure(last.reason.as_deref() == Some("class3"), format!("node {nb} has M1 in {:?} at 1 s", last.reason))?;
    }
    Ok(format!("latency {l1} us vs {l0} us attack-free; M1 in class 3 at every neighbor by 1 s"))
}

const ATTACKS: &[&str] = &[
    "fabricate_reply",
    "drop_requests",
    "tamper_reply",
    "corrupt_accumulated_route",
    "replay_request",
    "flood_predicted_qids",
    "spoof_relay",
    "multi_spoof_replies",
    "fabricate_route_error",
    "query_flood",
];

fn random_attack(rng: &mut ChaCha8Rng) -> (String, serde_json::Value) {
    let kind = ATTACKS[rng.random_range(0..ATTACKS.len())];
    let id = |rng: &mut ChaCha8Rng| rng.random_range(300u32..400);
    let params = match kind {
        "fabricate_reply" => json!({"relay": rng.random_bool(0.5)}),
        "drop_requests" => json!({"except_from": if rng.random_bool(0.3) { vec![1] } else { vec![] }}),
        "tamper_reply" => json!({"invented": [id(rng)], "reroute": rng.random_bool(0.5)}),
        "corrupt_accumulated_route" => {
            json!({"at": rng.random_range(0..3), "remove": rng.random_range(0..2), "insert": [id(rng)]})
        }
        "replay_request" => json!({"delays_ms": [rng.random_range(1..100), rng.random_range(500..2500)]}),
        "flood_predicted_qids" => json!({"source": 100, "target": 200, "count": rng.random_range(1..50), "interval_ms": 5}),
        "spoof_relay" => json!({"fake_id": id(rng)}),
        "multi_spoof_replies" => json!({"fake_ids": [id(rng), id(rng) + 100], "modify_qid": rng.random_bool(0.5)}),
        "fabricate_route_error" => json!({"link": [4, 200], "via": [1, 100], "delay_ms": rng.random_range(0..500)}),
        _ => json!({"rate": rng.random_range(5.0..100.0), "duration_ms": 2000}),
    };
    (kind.to_string(), params)
}

/// Checks every reply S accepted against what T actually sent and when.
fn audit(cfg: &ScenarioConfig, out: &RunOutcome) -> Vec<String> {
    let mut bad = Vec::new();
    let sent: BTreeSet<(u16, u32, Vec<NodeId>)> = at(out, T, "reply_sent")
        .map(|r| (r.qseq.unwrap_or(0), r.qid.unwrap_or(0), r.route.clone().unwrap_or_default()))
        .collect();
    for acc in at(out, S, "reply_accept") {
        let route = acc.route.clone().unwrap_or_default();
        let (qseq, qid) = (acc.qseq.unwrap_or(0), acc.qid.unwrap_or(0));
        if !sent.contains(&(qseq, qid, route.clone())) {
            bad.push(format!("seed {}: {route:?} q{qseq} not sent by T", cfg.seed));
        }
        let fresh = out.report.discoveries.iter().any(|d| {
            d.qseq == qseq && d.qid == qid && (d.issued_at..=d.closed_at).contains(&acc.time)
        });
        if !fresh {
            bad.push(format!("seed {}: {route:?} q{qseq} accepted outside its query", cfg.seed));
        }
        if !ground_truth_check(&out.topology, &out.bindings, &route, acc.time).is_genuine() {
            bad.push(format!("seed {}: {route:?} fails ground truth", cfg.seed));
        }
    }
    bad
}

fn formal_goals() -> Check {
    let template = load_bundled("benign").map_err(|e| e.to_string())?;
    let candidates = [n(1), n(2), n(3), n(4), n(5), n(6), M1, M2];
    let runs = 10_000u64;
    let results: Vec<Result<(usize, Vec<String>), String>> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xace5 ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut cfg = template.clone();
            cfg.name = format!("random-{i}");
            cfg.seed = rng.random();
            cfg.expect.clear();
            cfg.end_time_ms = 3000;
            cfg.discoveries[0].count = 2;
            cfg.discoveries[0].interval_ms = 1200;
            let node = candidates[rng.random_range(0..candidates.len())];
            let (kind, params) = random_attack(&mut rng);
            cfg.attackers.push(AttackerConfig { node, kind, params });
            let out = run_scenario(&cfg).map_err(|e| format!("run {i}: {e}"))?;
            let accepted = at(&out, S, "reply_accept").count();
            Ok((accepted, audit(&cfg, &out)))
        })
        .collect();
    let mut accepted = 0;
    let mut violations = Vec::new();
    for r in results {
        let (a, v) = r?;
        accepted += a;
        violations.extend(v);
    }
    ensure(violations.is_empty(), format!("{} violations, first: {}", violations.len(), violations.first().cloned().unwrap_or_default()))?;
    ensure(accepted > 0, "no reply accepted in any run")?;
    Ok(format!("{runs} runs, {accepted} accepted replies, 0 violations"))
}

fn codec() -> Check {
    let h = SrpHeader { pkt_type: PacketType::Request, flags: Flags::default(), qseq: 0x0102, qid: 0x0304_0506, mac: [0xaa; 16] };
    let req = RouteRequest { header: RequestHeader::Base(h), source: S, target: T, ttl: 9, accumulated_route: vec![] };
    let bytes = encode_packet(&Packet::Request(req)).map_err(|e| e.to_string())?;
    let mut lead = vec![0u8, 0, 1, 2, 3, 4, 5, 6];
    lead.extend([0xaa; 16]);
    ensure(bytes[..24] == lead[..], "header layout differs")?;
    ensure(bytes[24..28] == 100u32.to_be_bytes(), "payload does not start at byte 24")?;
    ensure(HEADER_LEN == 24 && bytes.len() == 24 + 4 + 4 + 1 + 1, format!("request is {} bytes", bytes.len()))?;

    let stats = catch_unwind(|| fuzz_decode(1_000_000, 7)).map_err(|_| "decoder panicked under fuzzing")?;
    ensure(stats.non_canonical == 0, format!("{} inputs decoded non-canonically", stats.non_canonical))?;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..10_000 {
        let p = random_packet(&mut rng);
        let enc = encode_packet(&p).map_err(|e| format!("packet {i}: {e}"))?;
        let dec = decode_packet(&enc).map_err(|e| format!("packet {i}: {e}"))?;
        ensure(dec == p, format!("packet {i} changed in roundtrip"))?;
    }
    Ok(format!(
        "24-byte header; 1e6 fuzz inputs ({} decoded, {} rejected), no panic; 10000 roundtrips exact",
        stats.decoded, stats.rejected
    ))
}

fn determinism() -> Check {
    let mut checked = 0;
    for name in bundled_names() {
        let mut cfg = load_bundled(name).map_err(|e| e.to_string())?;
        cfg.protocol.trace_packets = true;
        let a = run(&cfg)?.trace.to_jsonl();
        let b = run(&cfg)?.trace.to_jsonl();
        ensure(a == b, format!("{name}: traces differ"))?;
        checked += 1;
    }
    Ok(format!("{checked} bundled scenarios, byte-identical traces on rerun"))
}

fn main() -> ExitCode {
    let checks: &[(&str, fn() -> Check)] = &[
        ("01 fabricated reply", fabricated_reply),
        ("02 request dropping", request_dropping),
        ("03 reply tampering", reply_tampering),
        ("04 request corruption", request_corruption),
        ("05 replay", replay),
        ("06 qid prediction", qid_prediction),
        ("07 spoofed relay", spoofing),
        ("08 multiple spoofed relays", multi_spoof),
        ("09 collusion", collusion),
        ("10 fake route error", fake_route_error),
        ("11 request flood", dos_resilience),
        ("12 randomized adversaries", formal_goals),
        ("13 codec", codec),
        ("14 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("PASS {name}: {msg} [{secs:.2}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} [{secs:.2}s]");
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
