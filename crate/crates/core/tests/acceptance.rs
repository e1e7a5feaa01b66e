//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! run with `cargo test --test acceptance -- --nocapture` to see them.
//!
//! A criterion listed in `KNOWN_FAILURES` is one that cannot hold for this
//! model. It is still computed in full and reported as FAIL; the test only
//! insists that the set of failures is exactly the known one, so a change in
//! either direction is noticed.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use ringwarden_core::challenge::{compute_response, generate_challenge, PrngState};
use ringwarden_core::om::{
    check_interactive_consistency, enumerate_strategies, find_violation, OmParams, Order,
    RandomStrategy,
};
use ringwarden_core::protocol::{ProtocolConfig, Time};
use ringwarden_core::reliability::{
    apply_round, decrease_score, increase_score, validate_transition, FormulaVariant,
    ReliabilityTable, Score, TransitionCheck, UpdatePolicy, Verdict, DEFAULT_EQ_TOL,
};
use ringwarden_core::simnet::{
    run_scenario, FaultBehavior, FaultSpec, LinkFailure, LinkModel, Trace,
};
use ringwarden_core::wire::{
    decode_message, encode_message, ChallengePayload, Message, NodeId, ResponsePayload,
    TokenPayload, WireError,
};
use serde_json::Value;

/// The three-general case cannot produce an IC1 violation when ties and
/// silence both resolve to RETREAT: the two loyal lieutenants take the
/// majority of the same two-element multiset.
const KNOWN_FAILURES: &[&str] = &["1b"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const EPOCH: Time = 100;
const RESPONSE_TIMEOUT: Time = 10;

fn cfg(n: u32, variant: FormulaVariant, seed: u64) -> ProtocolConfig {
    let mut c = ProtocolConfig::new(n, EPOCH, RESPONSE_TIMEOUT);
    c.policy = UpdatePolicy::with_variant(variant);
    c.run_seed = seed;
    c
}

fn duration(c: &ProtocolConfig, epochs: u64) -> Time {
    epochs * c.epoch_time + 2 * c.head_timeout
}

// 1. OM(m) theorem instances.

fn om_four_generals() -> Outcome {
    let mut tables = 0;
    let mut bad = Vec::new();
    for commander in 0..4 {
        for value in [Order::Attack, Order::Retreat] {
            let placements = std::iter::once(None).chain((0..4).map(Some));
            for traitor in placements {
                let p = OmParams::new(4, 1, commander, value, traitor);
                tables += enumerate_strategies(&p, |_, o| {
                    if !(o.consistency.ic1 && o.consistency.ic2) {
                        bad.push(format!("commander {commander} traitor {traitor:?}"));
                    }
                    ControlFlow::Continue(())
                })
                .unwrap();
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!("{tables} strategy tables, {} violations", bad.len()),
    )
}

fn om_three_generals_witness() -> Outcome {
    let mut searched = 0;
    let mut witness = None;
    for value in [Order::Attack, Order::Retreat] {
        let p = OmParams::new(3, 1, 0, value, [0]);
        searched += enumerate_strategies(&p, |_, _| ControlFlow::Continue(())).unwrap();
        if let Some(w) = find_violation(&p, false).unwrap() {
            witness = Some(w);
        }
    }
    let ic2 = find_violation(&OmParams::new(3, 1, 0, Order::Attack, [2]), true).unwrap();
    match witness {
        Some((s, o)) => outcome(true, format!("IC1 witness {:?} -> {:?}", s.table, o.decisions)),
        None => outcome(
            false,
            format!(
                "no IC1 witness among {searched} traitor-commander tables (ties resolve to RETREAT); \
                 IC2 witness with a traitor lieutenant: {}",
                ic2.is_some()
            ),
        ),
    }
}

fn om_seven_generals_sampled() -> Outcome {
    let mut failures = 0;
    let mut runs = 0;
    let mut rng = PrngState::new(2024);
    for sample in 0..10_000u64 {
        let commander = rng.next_below(7) as u32;
        let a = rng.next_below(7) as u32;
        let b = (a + 1 + rng.next_below(6) as u32) % 7;
        let value = if sample % 2 == 0 {
            Order::Attack
        } else {
            Order::Retreat
        };
        let p = OmParams::new(7, 2, commander, value, [a, b]);
        let c = check_interactive_consistency(&p, &mut RandomStrategy { seed: sample }).unwrap();
        runs += 1;
        if !(c.ic1 && c.ic2) {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("n=7 m=2: {runs} sampled strategies, {failures} violations"),
    )
}

// 2. Detection convergence.

fn brute_force_detection(variant: FormulaVariant) -> u64 {
    let delta: f64 = 0.2;
    let mut s: f64 = 1.0;
    let mut k = 0;
    while s >= 0.30 {
        let step = match variant {
            FormulaVariant::ExponentialV1 => delta.powf(1.0 / (s / 1.5)),
            FormulaVariant::ExponentialV2 => delta.powf((1.0 / s) / 1.5),
            FormulaVariant::Linear => delta,
        };
        s = (s - step).max(0.0);
        k += 1;
    }
    k
}

fn detection_convergence() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (variant, frozen) in [
        (FormulaVariant::ExponentialV1, 162),
        (FormulaVariant::ExponentialV2, 5),
    ] {
        let k = brute_force_detection(variant);
        let c = cfg(4, variant, 9);
        let faults = [FaultSpec::new(
            2,
            FaultBehavior::WrongResponse { perturbation: 0.5 },
        )];
        let (_, m) = run_scenario(
            c.clone(),
            &faults,
            LinkModel::default(),
            duration(&c, k + 8),
        )
        .unwrap();
        let got = m.detection_epoch(2);
        pass &= k == frozen && got == Some(k);
        details.push(format!("{variant:?}: oracle {k}, simulator {got:?}"));
    }
    outcome(
        pass,
        details.join("; ") + " (V2 lands in the five to six epoch range)",
    )
}

// 3. Honest agreement under one or two Byzantine nodes.

fn menu() -> Vec<FaultBehavior> {
    use FaultBehavior::*;
    vec![
        WrongResponse { perturbation: 0.5 },
        SilentResponse { probability: 0.5 },
        SilentResponse { probability: 1.0 },
        DropTokenBroadcast { probability: 0.5 },
        DropChallengeBroadcast { probability: 0.5 },
        CorruptReplyBits { probability: 0.5 },
        SpuriousBroadcast { at: 1250 },
        LieInTable { perturbation: 0.3 },
        Stutter {
            delay_factor: 20.0,
            from: 800,
            until: 3200,
        },
        FailStop { at: 1500 },
        DropEverything { from: 1500 },
    ]
}

fn honest_agreement() -> Outcome {
    let c = cfg(7, FormulaVariant::ExponentialV1, 77);
    let d = duration(&c, 50);
    let behaviors = menu();
    let mut runs = 0;
    let mut violations = 0;
    let mut unsound = Vec::new();
    let mut check = |faults: Vec<FaultSpec>| {
        let (_, m) = run_scenario(c.clone(), &faults, LinkModel::default(), d).unwrap();
        runs += 1;
        violations += m.agreement_violations;
        let faulty: BTreeSet<u32> = faults.iter().map(|f| f.node.0).collect();
        for node in m.detection_epochs.keys() {
            if !faulty.contains(&node.parse::<u32>().unwrap()) {
                unsound.push(format!("{faults:?}"));
            }
        }
    };
    for (i, b) in behaviors.iter().enumerate() {
        for node in 0..7 {
            check(vec![FaultSpec {
                node: NodeId(node),
                behavior: b.clone(),
                rng_seed: 100 + i as u64,
            }]);
        }
    }
    for (i, a) in behaviors.iter().enumerate() {
        for (j, b) in behaviors.iter().enumerate() {
            for (x, y) in [(0, 1), (2, 5)] {
                check(vec![
                    FaultSpec {
                        node: NodeId(x),
                        behavior: a.clone(),
                        rng_seed: 200 + i as u64,
                    },
                    FaultSpec {
                        node: NodeId(y),
                        behavior: b.clone(),
                        rng_seed: 300 + j as u64,
                    },
                ]);
            }
        }
    }
    outcome(
        violations == 0 && unsound.is_empty(),
        format!(
            "{runs} runs at n=7 over 50 epochs: {violations} disagreeing boundaries, {} honest nodes marked faulty",
            unsound.len()
        ),
    )
}

// 4. Ring liveness with consecutive silent nodes.

fn accepted_ids(trace: &Trace, node: NodeId) -> Vec<u64> {
    trace
        .records_for(node)
        .filter(|r| {
            matches!(
                r.kind.as_str(),
                "token_accepted" | "table_rejected" | "token_sent"
            )
        })
        .map(|r| r.detail["token_id"].as_u64().unwrap())
        .collect()
}

fn ring_liveness() -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for k in 1..=3u32 {
        let c = cfg(8, FormulaVariant::ExponentialV1, 5);
        let faults: Vec<FaultSpec> = (3..3 + k)
            .map(|i| FaultSpec::new(i, FaultBehavior::FailStop { at: 0 }))
            .collect();
        let run =
            || run_scenario(c.clone(), &faults, LinkModel::default(), duration(&c, 50)).unwrap();
        let (trace, m) = run();
        let (trace2, m2) = run();
        let stalls = k as u64 * 50u64.div_ceil(8);
        let floor = 50 - stalls;
        let increasing = (0..8).filter(|i| !(3..3 + k).contains(i)).all(|i| {
            accepted_ids(&trace, NodeId(i))
                .windows(2)
                .all(|w| w[0] < w[1])
        });
        let deterministic = trace == trace2 && m == m2;
        pass &= m.token_rounds >= floor && increasing && deterministic;
        details.push(format!("k={k}: {} rounds (floor {floor})", m.token_rounds));
    }
    outcome(
        pass,
        details.join(", ") + ", token ids strictly increasing, reruns identical",
    )
}

// 5. Wire robustness.

fn random_message(rng: &mut PrngState) -> Message {
    let sender = NodeId(rng.next_below(16) as u32);
    match rng.next_below(3) {
        0 => {
            let n = rng.next_below(12) as usize;
            let scores = (0..n)
                .map(|_| Score::new(rng.next_unit()).unwrap())
                .collect();
            Message::token(
                sender,
                TokenPayload {
                    token_id: rng.next_u64(),
                    cur_token_holder: sender,
                    new_token_holder: NodeId(rng.next_below(16) as u32),
                    r_table: ReliabilityTable::from_scores(scores),
                },
            )
        }
        1 => {
            let token_id = rng.next_u64();
            Message::challenge(
                sender,
                generate_challenge(rng.next_u64(), token_id, sender).unwrap(),
            )
        }
        _ => Message::response(
            sender,
            NodeId(rng.next_below(16) as u32),
            ResponsePayload {
                source: sender,
                response: rng.next_unit() * 1e3 - 5e2,
            },
        ),
    }
}

fn wire_robustness() -> Outcome {
    let mut rng = PrngState::new(0xB17F11B);
    let mut pairs = 0u64;
    let mut misses = 0u64;
    while pairs < 12_000 {
        let msg = random_message(&mut rng);
        let clean = encode_message(&msg);
        for _ in 0..40 {
            let bit = rng.next_below(clean.len() as u64 * 8) as usize;
            let mut bytes = clean.clone();
            bytes[bit / 8] ^= 1 << (bit % 8);
            pairs += 1;
            if !matches!(
                decode_message(&bytes),
                Err(WireError::ChecksumMismatch { .. })
            ) {
                misses += 1;
            }
        }
    }
    outcome(
        misses == 0,
        format!("{pairs} (message, bit) pairs, {misses} undetected"),
    )
}

// 6. Challenge integrity.

/// Second, array-based implementation of the response pipeline.
mod independent {
    type Grid = [[f64; 10]; 10];

    fn echelon(mut a: Grid) -> Grid {
        let mut r = 0;
        for c in 0..10 {
            if r == 10 {
                break;
            }
            let p = (r..10).fold(r, |best, i| {
                if a[i][c].abs() > a[best][c].abs() {
                    i
                } else {
                    best
                }
            });
            if a[p][c].abs() <= 1e-12 {
                (r..10).for_each(|i| a[i][c] = 0.0);
                continue;
            }
            a.swap(p, r);
            for i in r + 1..10 {
                let f = a[i][c] / a[r][c];
                for j in c + 1..10 {
                    a[i][j] -= f * a[r][j];
                }
                a[i][c] = 0.0;
            }
            r += 1;
        }
        a
    }

    fn scalar(e: &Grid) -> f64 {
        let den = e
            .iter()
            .fold(0.0, |acc, row| acc + row.iter().fold(0.0, |s, v| s + v));
        let num = (0..10).fold(0.0, |acc, j| {
            acc + (0..10).fold(1.0, |p, i| {
                if e[i][j].abs() > 1e-12 {
                    p * e[i][j]
                } else {
                    p
                }
            })
        });
        num / den
    }

    pub fn response(f: &Grid, i: &[[i64; 10]; 10]) -> f64 {
        let fi = i.map(|row| row.map(|v| v as f64));
        scalar(&echelon(*f)) / scalar(&echelon(fi))
    }
}

fn challenge_integrity() -> Outcome {
    let mut mismatches = 0;
    let mut responses = BTreeSet::new();
    let mut finite = true;
    let mut deterministic = true;
    for k in 0..100u64 {
        let c: ChallengePayload =
            generate_challenge(0x5EED, k + 1, NodeId((k % 7) as u32)).unwrap();
        let a = compute_response(&c).unwrap();
        deterministic &= generate_challenge(0x5EED, k + 1, NodeId((k % 7) as u32)).unwrap() == c
            && compute_response(&c).unwrap().to_bits() == a.to_bits();
        if independent::response(&c.float_matrix, &c.int_matrix).to_bits() != a.to_bits() {
            mismatches += 1;
        }
        finite &= a.is_finite();
        responses.insert(a.to_bits());
    }
    outcome(
        mismatches == 0 && finite && deterministic && responses.len() == 100,
        format!(
            "100 payloads: {mismatches} mismatches between pipelines, {} distinct finite responses",
            responses.len()
        ),
    )
}

// 7. Score dynamics.

fn score_dynamics() -> Outcome {
    let variants = [
        FormulaVariant::ExponentialV1,
        FormulaVariant::ExponentialV2,
        FormulaVariant::Linear,
    ];
    let mut violations = 0;
    for v in variants {
        let p = UpdatePolicy::with_variant(v);
        for k in 0..=100 {
            let s = Score::new(k as f64 / 100.0).unwrap();
            let (up, down) = (increase_score(s, &p).value(), decrease_score(s, &p).value());
            if !(0.0..=1.0).contains(&up)
                || !(0.0..=1.0).contains(&down)
                || up < s.value()
                || down > s.value()
            {
                violations += 1;
            }
        }
        if v != FormulaVariant::Linear {
            for k in 1..10 {
                let (a, b) = (k as f64 / 10.0, (k + 1) as f64 / 10.0);
                if p.decrease_step(b) <= p.decrease_step(a)
                    || p.increase_step(b) > p.increase_step(a)
                {
                    violations += 1;
                }
            }
        }
    }

    let mut rng = PrngState::new(77);
    let (mut unsound, mut incomplete, mut perturbed) = (0, 0, 0);
    for round in 0..1000 {
        let p = UpdatePolicy::with_variant(variants[round % 3]);
        let n = 2 + rng.next_below(10) as usize;
        let old = ReliabilityTable::from_scores(
            (0..n)
                .map(|_| Score::new(rng.next_unit()).unwrap())
                .collect(),
        );
        let verdicts: Vec<Verdict> = (0..n)
            .map(|_| match rng.next_below(4) {
                0 => Verdict::Agree,
                1 => Verdict::Disagree,
                2 => Verdict::TimedOut,
                _ => Verdict::NotParticipating,
            })
            .collect();
        let new = apply_round(&old, &verdicts, &p);
        if validate_transition(&old, &new, &p, DEFAULT_EQ_TOL) != TransitionCheck::Accept {
            unsound += 1;
        }
        for i in 0..n {
            let (o, v) = (
                old.get(NodeId(i as u32)).value(),
                new.get(NodeId(i as u32)).value(),
            );
            if v == o {
                continue;
            }
            // Push the change further by 3 * eq_tol, or pull it back when
            // the far side would leave [0, 1].
            let dir = (v - o).signum();
            let shift = 3.0 * DEFAULT_EQ_TOL;
            let w = if (0.0..=1.0).contains(&(v + dir * shift)) {
                v + dir * shift
            } else {
                v - dir * shift
            };
            if (w - o).signum() != dir {
                continue;
            }
            let mut bad = new.clone();
            bad.set(NodeId(i as u32), Score::new(w).unwrap());
            perturbed += 1;
            if validate_transition(&old, &bad, &p, DEFAULT_EQ_TOL).is_accept() {
                incomplete += 1;
            }
        }
    }
    outcome(
        violations == 0 && unsound == 0 && incomplete == 0,
        format!(
            "grid violations {violations}; 1000 rounds: {unsound} rejected honest tables, \
             {incomplete} of {perturbed} perturbed tables accepted"
        ),
    )
}

// 8. Equivalences.

fn honest_view(trace: &Trace, honest: &[u32]) -> (Vec<String>, Vec<Vec<Vec<f64>>>) {
    let records = trace
        .records
        .iter()
        .filter(|r| r.node.is_none_or(|n| honest.contains(&n.0)))
        .map(|r| serde_json::to_string(r).unwrap())
        .collect();
    let tables = trace
        .snapshots
        .iter()
        .map(|s| {
            honest
                .iter()
                .map(|&i| s.tables[i as usize].clone())
                .collect()
        })
        .collect();
    (records, tables)
}

fn judged(trace: &Trace, token_id: u64) -> Option<(u64, Value)> {
    trace
        .records
        .iter()
        .find(|r| r.kind == "round_judged" && r.detail["token_id"] == token_id)
        .map(|r| (r.t, r.detail.clone()))
}

fn round_start(trace: &Trace, token_id: u64) -> Option<(Time, NodeId)> {
    trace
        .records
        .iter()
        .find(|r| r.kind == "round_started" && r.detail["token_id"] == token_id)
        .map(|r| (r.t, r.node.unwrap()))
}

fn equivalences() -> Outcome {
    let c = cfg(5, FormulaVariant::ExponentialV1, 31);
    let d = duration(&c, 30);
    let honest = [0, 1, 2, 4];

    let stop = [FaultSpec::new(3, FaultBehavior::FailStop { at: 1234 })];
    let mute = [FaultSpec::new(
        3,
        FaultBehavior::DropEverything { from: 1234 },
    )];
    let (a, _) = run_scenario(c.clone(), &stop, LinkModel::default(), d).unwrap();
    let (b, _) = run_scenario(c.clone(), &mute, LinkModel::default(), d).unwrap();
    let failstop_equal = honest_view(&a, &honest) == honest_view(&b, &honest);

    // Node 3 never answers in one run; in the other its link to the head of
    // each chosen round is down for that round's challenge window only.
    let (silent, _) = run_scenario(
        c.clone(),
        &[FaultSpec::new(
            3,
            FaultBehavior::SilentResponse { probability: 1.0 },
        )],
        LinkModel::default(),
        d,
    )
    .unwrap();
    let mut compared = 0;
    let mut equal = true;
    for token_id in [6u64, 12, 17] {
        let (start, head) = round_start(&silent, token_id).unwrap();
        if head == NodeId(3) {
            continue;
        }
        let links = LinkModel {
            failed_links: vec![LinkFailure {
                a: NodeId(3),
                b: head,
                from: start,
                until: Some(start + c.response_timeout + 1),
            }],
            ..LinkModel::default()
        };
        let (cut, _) = run_scenario(c.clone(), &[], links, d).unwrap();
        compared += 1;
        let (x, y) = (judged(&silent, token_id), judged(&cut, token_id));
        equal &= x.is_some() && x == y && x.unwrap().1["verdicts"][3] == "timed_out";
    }
    outcome(
        failstop_equal && equal && compared > 0,
        format!(
            "fail-stop vs muted honest traces equal: {failstop_equal}; \
             failed link vs silent responder verdicts equal in {compared} rounds: {equal}"
        ),
    )
}

#[test]
fn acceptance() {
    type Check = fn() -> Outcome;
    let checks: &[(&str, &str, Check, Duration)] = &[
        (
            "1a",
            "OM(1) with four generals, exhaustive",
            om_four_generals,
            Duration::from_secs(10),
        ),
        (
            "1b",
            "OM(1) with three generals shows an IC1 violation",
            om_three_generals_witness,
            Duration::from_secs(10),
        ),
        (
            "1c",
            "OM(2) with seven generals, sampled",
            om_seven_generals_sampled,
            Duration::from_secs(60),
        ),
        (
            "2",
            "detection epoch equals the iteration oracle",
            detection_convergence,
            Duration::from_secs(5),
        ),
        (
            "3",
            "honest tables agree under one or two faults",
            honest_agreement,
            Duration::from_secs(60),
        ),
        (
            "4",
            "ring keeps rotating past silent nodes",
            ring_liveness,
            Duration::from_secs(60),
        ),
        (
            "5",
            "every single-bit flip is caught",
            wire_robustness,
            Duration::from_secs(60),
        ),
        (
            "6",
            "challenge responses deterministic and distinct",
            challenge_integrity,
            Duration::from_secs(60),
        ),
        (
            "7",
            "score dynamics and table validation",
            score_dynamics,
            Duration::from_secs(60),
        ),
        (
            "8",
            "fail-stop and failed-link equivalences",
            equivalences,
            Duration::from_secs(60),
        ),
    ];
    let mut failed = Vec::new();
    for (id, name, check, budget) in checks {
        let t = Instant::now();
        let o = check();
        let elapsed = t.elapsed();
        let pass = o.pass && elapsed <= *budget;
        if !pass {
            failed.push(*id);
        }
        let status = if pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:<2} {status}  {name}: {} [{:.2?}]",
            o.detail, elapsed
        );
    }
    println!("criterion 9  SKIP  cluster overhead timings: not reproducible in a simulator, no timing claim made");
    assert_eq!(failed, KNOWN_FAILURES, "unexpected set of failing criteria");
}
