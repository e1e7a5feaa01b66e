//! Deterministic discrete-event simulation of a ring of protocol nodes.
//!
//! Events are processed in strict `(time, sequence)` order, where the
//! sequence number is assigned at enqueue. Every outgoing message passes
//! through the sender's [`FaultSpec`] and the pairwise [`LinkModel`] before
//! it is queued for delivery. Fault randomness comes from a SplitMix64 stream
//! per fault, separate from the challenge generator.
//!
//! At the end of every simulated instant with no token in flight, if an
//! honest node has accepted a newer token than the last recorded epoch, the
//! simulator snapshots every node's table. Agreement and detection metrics
//! are computed from these snapshots only.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::challenge::PrngState;
use crate::protocol::{
    successor, ConfigError, NodeState, ProtocolAction, ProtocolConfig, ProtocolEvent, Time,
    TimerKind,
};
use crate::reliability::{is_faulty, Score};
use crate::wire::{encode_message, Body, Message, MessageClass, NodeId, TokenPayload};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultBehavior {
    Honest,
    /// Halts at `at`: no further events are processed and nothing is sent.
    FailStop {
        at: Time,
    },
    /// Outgoing messages sent in `[from, until)` are delayed by
    /// `delay_factor * base_latency` on top of the link latency.
    Stutter {
        delay_factor: f64,
        from: Time,
        until: Time,
    },
    /// A faulty arithmetic unit: every challenge result this node computes,
    /// including its own result while head, is off by `perturbation`.
    WrongResponse {
        perturbation: f64,
    },
    SilentResponse {
        probability: f64,
    },
    DropTokenBroadcast {
        probability: f64,
    },
    DropChallengeBroadcast {
        probability: f64,
    },
    /// Flips one random bit of an outgoing response frame.
    CorruptReplyBits {
        probability: f64,
    },
    /// Broadcasts a stale token out of turn at `at`.
    SpuriousBroadcast {
        at: Time,
    },
    /// Shifts one random entry of every outgoing token table.
    LieInTable {
        perturbation: f64,
    },
    /// Keeps running but every message sent from `from` on is lost.
    DropEverything {
        from: Time,
    },
}

impl FaultBehavior {
    pub fn is_honest(&self) -> bool {
        matches!(self, FaultBehavior::Honest)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub node: NodeId,
    pub behavior: FaultBehavior,
    #[serde(default)]
    pub rng_seed: u64,
}

impl FaultSpec {
    pub fn new(node: u32, behavior: FaultBehavior) -> Self {
        FaultSpec {
            node: NodeId(node),
            behavior,
            rng_seed: node as u64,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |what: &str| {
            Err(SimError::InvalidFault {
                node: self.node,
                reason: what.to_string(),
            })
        };
        match self.behavior {
            FaultBehavior::SilentResponse { probability: p }
            | FaultBehavior::DropTokenBroadcast { probability: p }
            | FaultBehavior::DropChallengeBroadcast { probability: p }
            | FaultBehavior::CorruptReplyBits { probability: p }
                if !(0.0..=1.0).contains(&p) =>
            {
                bad("probability must lie in [0, 1]")
            }
            FaultBehavior::Stutter {
                delay_factor,
                from,
                until,
            } => {
                if !(delay_factor.is_finite() && delay_factor >= 0.0) {
                    bad("delay_factor must be finite and non-negative")
                } else if from > until {
                    bad("stutter interval is reversed")
                } else {
                    Ok(())
                }
            }
            FaultBehavior::WrongResponse { perturbation }
            | FaultBehavior::LieInTable { perturbation }
                if !perturbation.is_finite() || perturbation == 0.0 =>
            {
                bad("perturbation must be finite and nonzero")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyOverride {
    pub a: NodeId,
    pub b: NodeId,
    pub latency: Time,
}

/// A failed link drops traffic both ways while `from <= t < until`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkFailure {
    pub a: NodeId,
    pub b: NodeId,
    #[serde(default)]
    pub from: Time,
    #[serde(default)]
    pub until: Option<Time>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    pub base_latency: Time,
    #[serde(default)]
    pub overrides: Vec<LatencyOverride>,
    #[serde(default)]
    pub failed_links: Vec<LinkFailure>,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            base_latency: 1,
            overrides: Vec::new(),
            failed_links: Vec::new(),
        }
    }
}

fn same_pair(a: NodeId, b: NodeId, x: NodeId, y: NodeId) -> bool {
    (a == x && b == y) || (a == y && b == x)
}

impl LinkModel {
    pub fn latency(&self, from: NodeId, to: NodeId) -> Time {
        self.overrides
            .iter()
            .rev()
            .find(|o| same_pair(o.a, o.b, from, to))
            .map_or(self.base_latency, |o| o.latency)
    }

    pub fn is_failed(&self, from: NodeId, to: NodeId, t: Time) -> bool {
        self.failed_links
            .iter()
            .any(|f| same_pair(f.a, f.b, from, to) && t >= f.from && f.until.is_none_or(|u| t < u))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("fault refers to node {0}, outside the ring")]
    FaultNode(NodeId),
    #[error("more than one fault for node {0}")]
    DuplicateFault(NodeId),
    #[error("fault for node {node}: {reason}")]
    InvalidFault { node: NodeId, reason: String },
    #[error("link entry refers to node {0}, outside the ring")]
    LinkNode(NodeId),
    #[error("link latency must be positive")]
    ZeroLatency,
}

/// An action after fault injection, with any transport-level tampering.
#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing {
    pub action: ProtocolAction,
    pub extra_delay: Time,
    /// Bit to flip in the encoded frame (taken modulo its bit length).
    pub flip_bit: Option<u64>,
    pub effect: Option<&'static str>,
}

impl Outgoing {
    fn pass(action: ProtocolAction) -> Self {
        Outgoing {
            action,
            extra_delay: 0,
            flip_bit: None,
            effect: None,
        }
    }
}

fn message_of(action: &ProtocolAction) -> Option<&Message> {
    match action {
        ProtocolAction::Broadcast(m) | ProtocolAction::SendTo(_, m) => Some(m),
        _ => None,
    }
}

/// Runs one action emitted by `f.node` through its fault. Non-message
/// actions always pass. `WrongResponse` and `SpuriousBroadcast` act
/// elsewhere (the node's arithmetic and the scheduler) and pass here too.
pub fn apply_fault(
    f: &FaultSpec,
    action: ProtocolAction,
    mut rng: PrngState,
    now: Time,
    base_latency: Time,
) -> (Vec<Outgoing>, PrngState) {
    let Some(class) = message_of(&action).map(Message::class) else {
        return (vec![Outgoing::pass(action)], rng);
    };
    let dropped = |rng| (Vec::new(), rng);
    let out = match &f.behavior {
        FaultBehavior::FailStop { at } if now >= *at => return dropped(rng),
        FaultBehavior::DropEverything { from } if now >= *from => return dropped(rng),
        FaultBehavior::Stutter {
            delay_factor,
            from,
            until,
        } if (*from..*until).contains(&now) => Outgoing {
            extra_delay: (delay_factor * base_latency as f64).round() as Time,
            effect: Some("delay"),
            ..Outgoing::pass(action)
        },
        FaultBehavior::SilentResponse { probability } if class == MessageClass::Response => {
            if rng.chance(*probability) {
                return dropped(rng);
            }
            Outgoing::pass(action)
        }
        FaultBehavior::DropTokenBroadcast { probability } if class == MessageClass::Token => {
            if rng.chance(*probability) {
                return dropped(rng);
            }
            Outgoing::pass(action)
        }
        FaultBehavior::DropChallengeBroadcast { probability }
            if class == MessageClass::Challenge =>
        {
            if rng.chance(*probability) {
                return dropped(rng);
            }
            Outgoing::pass(action)
        }
        FaultBehavior::CorruptReplyBits { probability } if class == MessageClass::Response => {
            if rng.chance(*probability) {
                let bit = rng.next_u64();
                Outgoing {
                    flip_bit: Some(bit),
                    effect: Some("corrupt"),
                    ..Outgoing::pass(action)
                }
            } else {
                Outgoing::pass(action)
            }
        }
        FaultBehavior::LieInTable { perturbation } if class == MessageClass::Token => {
            let mut action = action;
            if let ProtocolAction::Broadcast(Message {
                body: Body::Token(t),
                ..
            }) = &mut action
            {
                if !t.r_table.is_empty() {
                    let idx = NodeId(rng.next_below(t.r_table.len() as u64) as u32);
                    let v = t.r_table.get(idx).value();
                    let shifted = if v + perturbation <= 1.0 && v + perturbation >= 0.0 {
                        v + perturbation
                    } else {
                        v - perturbation
                    };
                    t.r_table.set(idx, Score::saturating(shifted));
                }
            }
            Outgoing {
                effect: Some("lie"),
                ..Outgoing::pass(action)
            }
        }
        _ => Outgoing::pass(action),
    };
    (vec![out], rng)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SimPayload {
    Start,
    Deliver {
        from: NodeId,
        class: MessageClass,
        bytes: Vec<u8>,
    },
    Timer {
        kind: TimerKind,
        generation: u64,
    },
    InjectSpurious,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimEvent {
    pub at: Time,
    pub seq: u64,
    pub target: NodeId,
    pub payload: SimPayload,
}

struct Queued(SimEvent);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.0.at, self.0.seq) == (other.0.at, other.0.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.0.at, self.0.seq).cmp(&(other.0.at, other.0.seq))
    }
}

/// Min-queue on `(at, seq)`; `seq` follows enqueue order.
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Queued>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, at: Time, target: NodeId, payload: SimPayload) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Queued(SimEvent {
            at,
            seq,
            target,
            payload,
        })));
        seq
    }

    pub fn deliver(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|Reverse(Queued(e))| e)
    }

    pub fn peek_time(&self) -> Option<Time> {
        self.heap.peek().map(|Reverse(Queued(e))| e.at)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: Time,
    pub node: Option<NodeId>,
    pub kind: String,
    pub detail: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSnapshot {
    pub epoch: u64,
    pub time: Time,
    /// Every node's table at the boundary, halted nodes included.
    pub tables: Vec<Vec<f64>>,
    /// The table held by the most honest nodes (lowest id wins ties).
    pub majority: Vec<f64>,
    pub agreed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub node: NodeId,
    pub epoch: u64,
    pub reporter: NodeId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<EpochSnapshot>,
    pub detections: Vec<Detection>,
}

impl Trace {
    /// One JSON object per line: `{"t", "node", "kind", "detail"}`.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn records_for(&self, node: NodeId) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.node == Some(node))
    }

    pub fn snapshot(&self, epoch: u64) -> Option<&EpochSnapshot> {
        self.snapshots.iter().find(|s| s.epoch == epoch)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub token: u64,
    pub challenge: u64,
    pub response: u64,
}

impl ClassCounts {
    fn bump(&mut self, class: MessageClass) {
        match class {
            MessageClass::Token => self.token += 1,
            MessageClass::Challenge => self.challenge += 1,
            MessageClass::Response => self.response += 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    /// First epoch at which a strict majority of honest tables put the node
    /// below threshold.
    pub detection_epochs: BTreeMap<String, u64>,
    pub agreement_violations: u64,
    /// Epoch boundaries observed, one per token accepted by honest nodes.
    pub token_rounds: u64,
    pub last_epoch: u64,
    pub final_time: Time,
    pub messages_sent: ClassCounts,
    pub messages_delivered: ClassCounts,
    pub messages_dropped: u64,
    pub final_scores: Vec<f64>,
}

impl Metrics {
    pub fn detection_epoch(&self, node: u32) -> Option<u64> {
        self.detection_epochs.get(&node.to_string()).copied()
    }
}

pub struct Simulation {
    cfg: ProtocolConfig,
    links: LinkModel,
    nodes: Vec<NodeState>,
    faults: Vec<FaultSpec>,
    fault_rngs: Vec<PrngState>,
    halted: Vec<bool>,
    queue: EventQueue,
    timer_generation: BTreeMap<(NodeId, TimerKind), u64>,
    tokens_in_flight: usize,
    now: Time,
    last_epoch: u64,
    trace: Trace,
    metrics: Metrics,
}

impl Simulation {
    /// The node configuration's `propagation_delay` is set to the link
    /// model's base latency.
    pub fn new(
        mut cfg: ProtocolConfig,
        faults: &[FaultSpec],
        links: LinkModel,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        if links.base_latency == 0 || links.overrides.iter().any(|o| o.latency == 0) {
            return Err(SimError::ZeroLatency);
        }
        let n = cfg.n;
        for l in &links.overrides {
            for id in [l.a, l.b] {
                if id.0 >= n {
                    return Err(SimError::LinkNode(id));
                }
            }
        }
        for l in &links.failed_links {
            for id in [l.a, l.b] {
                if id.0 >= n {
                    return Err(SimError::LinkNode(id));
                }
            }
        }
        cfg.propagation_delay = links.base_latency;

        let mut specs: Vec<FaultSpec> = (0..n)
            .map(|i| FaultSpec::new(i, FaultBehavior::Honest))
            .collect();
        let mut seen = vec![false; n as usize];
        for f in faults {
            if f.node.0 >= n {
                return Err(SimError::FaultNode(f.node));
            }
            if std::mem::replace(&mut seen[f.node.index()], true) {
                return Err(SimError::DuplicateFault(f.node));
            }
            f.validate()?;
            specs[f.node.index()] = f.clone();
        }

        let nodes = (0..n)
            .map(|i| {
                let mut s = NodeState::new(NodeId(i), &cfg);
                if let FaultBehavior::WrongResponse { perturbation } = specs[i as usize].behavior {
                    s.response_bias = perturbation;
                }
                s
            })
            .collect();
        let fault_rngs = specs.iter().map(|f| PrngState::new(f.rng_seed)).collect();

        let mut sim = Simulation {
            cfg,
            links,
            nodes,
            faults: specs,
            fault_rngs,
            halted: vec![false; n as usize],
            queue: EventQueue::default(),
            timer_generation: BTreeMap::new(),
            tokens_in_flight: 0,
            now: 0,
            last_epoch: 0,
            trace: Trace::default(),
            metrics: Metrics::default(),
        };
        for i in 0..n {
            match sim.faults[i as usize].behavior {
                FaultBehavior::FailStop { at } => {
                    sim.queue.push(at, NodeId(i), SimPayload::InjectSpurious);
                }
                FaultBehavior::SpuriousBroadcast { at } => {
                    sim.queue.push(at, NodeId(i), SimPayload::InjectSpurious);
                }
                _ => {}
            }
        }
        for i in 0..n {
            sim.queue.push(0, NodeId(i), SimPayload::Start);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn is_honest(&self, node: NodeId) -> bool {
        self.faults[node.index()].behavior.is_honest()
    }

    fn observers(&self) -> Vec<usize> {
        let honest: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| self.faults[i].behavior.is_honest())
            .collect();
        if honest.is_empty() {
            (0..self.nodes.len()).filter(|&i| !self.halted[i]).collect()
        } else {
            honest
        }
    }

    fn record(&mut self, node: Option<NodeId>, kind: &str, detail: Value) {
        self.trace.records.push(TraceRecord {
            t: self.now,
            node,
            kind: kind.to_string(),
            detail,
        });
    }

    /// Processes every event with `at <= until`.
    pub fn run_until(&mut self, until: Time) {
        while let Some(t) = self.queue.peek_time() {
            if t > until {
                break;
            }
            if t > self.now {
                self.close_instant();
                self.now = t;
            }
            let ev = self.queue.deliver().expect("peeked");
            self.process(ev);
        }
        self.close_instant();
        self.now = self.now.max(until);
    }

    pub fn finish(mut self) -> (Trace, Metrics) {
        self.close_instant();
        let mut m = self.metrics;
        m.final_time = self.now;
        m.last_epoch = self.last_epoch;
        m.final_scores = self
            .trace
            .snapshots
            .last()
            .map_or_else(|| vec![1.0; self.cfg.n as usize], |s| s.majority.clone());
        (self.trace, m)
    }

    fn process(&mut self, ev: SimEvent) {
        let target = ev.target;
        let ti = target.index();
        if let SimPayload::Deliver { class, .. } = &ev.payload {
            if *class == MessageClass::Token {
                self.tokens_in_flight -= 1;
            }
        }
        if let FaultBehavior::FailStop { at } = self.faults[ti].behavior {
            if ev.at >= at && !self.halted[ti] {
                self.halted[ti] = true;
                self.record(Some(target), "halt", json!({}));
            }
        }
        if self.halted[ti] {
            if matches!(ev.payload, SimPayload::Deliver { .. }) {
                self.metrics.messages_dropped += 1;
            }
            return;
        }
        let event = match ev.payload {
            SimPayload::Start => ProtocolEvent::Start,
            SimPayload::Deliver { class, bytes, .. } => {
                self.metrics.messages_delivered.bump(class);
                ProtocolEvent::Received(bytes)
            }
            SimPayload::Timer { kind, generation } => {
                if self.timer_generation.get(&(target, kind)) != Some(&generation) {
                    return;
                }
                ProtocolEvent::TimerFired(kind)
            }
            SimPayload::InjectSpurious => {
                self.inject_spurious(target);
                return;
            }
        };
        let actions = self.nodes[ti].handle_event(event, &self.cfg, self.now);
        for a in actions {
            self.perform(target, a);
        }
    }

    fn inject_spurious(&mut self, node: NodeId) {
        if !matches!(
            self.faults[node.index()].behavior,
            FaultBehavior::SpuriousBroadcast { .. }
        ) {
            return;
        }
        let s = &self.nodes[node.index()];
        let token = TokenPayload {
            token_id: s.last_token_id,
            cur_token_holder: node,
            new_token_holder: successor(node, self.cfg.n),
            r_table: s.table.clone(),
        };
        self.record(
            Some(node),
            "fault",
            json!({ "effect": "spurious", "token_id": token.token_id }),
        );
        self.transmit(node, &Message::token(node, token), 0, None);
    }

    fn perform(&mut self, node: NodeId, action: ProtocolAction) {
        match action {
            ProtocolAction::SetTimer(kind, deadline) => {
                let g = self.timer_generation.entry((node, kind)).or_insert(0);
                *g += 1;
                let generation = *g;
                self.queue
                    .push(deadline, node, SimPayload::Timer { kind, generation });
            }
            ProtocolAction::CancelTimer(kind) => {
                *self.timer_generation.entry((node, kind)).or_insert(0) += 1;
            }
            ProtocolAction::ReportDetection {
                node: suspect,
                epoch,
            } => {
                self.trace.detections.push(Detection {
                    node: suspect,
                    epoch,
                    reporter: node,
                });
                self.record(
                    Some(node),
                    "detect",
                    json!({ "suspect": suspect, "epoch": epoch }),
                );
            }
            ProtocolAction::Trace(note) => {
                let mut detail = serde_json::to_value(&note).expect("notes serialize");
                let kind = detail
                    .as_object_mut()
                    .and_then(|o| o.remove("kind"))
                    .and_then(|k| k.as_str().map(str::to_string))
                    .unwrap_or_else(|| "note".to_string());
                self.record(Some(node), &kind, detail);
            }
            msg_action @ (ProtocolAction::Broadcast(_) | ProtocolAction::SendTo(..)) => {
                let f = &self.faults[node.index()];
                let rng = self.fault_rngs[node.index()];
                let class = message_of(&msg_action)
                    .map(Message::class)
                    .expect("message action");
                let (outs, rng) =
                    apply_fault(f, msg_action, rng, self.now, self.links.base_latency);
                self.fault_rngs[node.index()] = rng;
                if outs.is_empty() {
                    self.metrics.messages_dropped += 1;
                    self.record(
                        Some(node),
                        "fault",
                        json!({ "effect": "drop", "class": class }),
                    );
                }
                for o in outs {
                    if let Some(effect) = o.effect {
                        self.record(
                            Some(node),
                            "fault",
                            json!({ "effect": effect, "class": class }),
                        );
                    }
                    match &o.action {
                        ProtocolAction::Broadcast(m) => {
                            self.transmit(node, m, o.extra_delay, o.flip_bit)
                        }
                        ProtocolAction::SendTo(to, m) => self.send_one(
                            node,
                            *to,
                            m,
                            encode_message(m),
                            o.extra_delay,
                            o.flip_bit,
                        ),
                        other => self.perform(node, other.clone()),
                    }
                }
            }
        }
    }

    fn transmit(&mut self, from: NodeId, msg: &Message, extra: Time, flip: Option<u64>) {
        let bytes = encode_message(msg);
        self.metrics.messages_sent.bump(msg.class());
        self.record(Some(from), "send", send_detail(msg, NodeId::BROADCAST));
        let bytes = flipped(bytes, flip);
        for to in (0..self.cfg.n).map(NodeId).filter(|&to| to != from) {
            self.enqueue_delivery(from, to, msg.class(), bytes.clone(), extra);
        }
    }

    fn send_one(
        &mut self,
        from: NodeId,
        to: NodeId,
        msg: &Message,
        bytes: Vec<u8>,
        extra: Time,
        flip: Option<u64>,
    ) {
        self.metrics.messages_sent.bump(msg.class());
        self.record(Some(from), "send", send_detail(msg, to));
        if to.0 >= self.cfg.n || to == from {
            self.metrics.messages_dropped += 1;
            return;
        }
        self.enqueue_delivery(from, to, msg.class(), flipped(bytes, flip), extra);
    }

    fn enqueue_delivery(
        &mut self,
        from: NodeId,
        to: NodeId,
        class: MessageClass,
        bytes: Vec<u8>,
        extra: Time,
    ) {
        if self.links.is_failed(from, to, self.now) {
            self.metrics.messages_dropped += 1;
            self.record(Some(from), "link_drop", json!({ "to": to, "class": class }));
            return;
        }
        let at = self.now + self.links.latency(from, to) + extra;
        if class == MessageClass::Token {
            self.tokens_in_flight += 1;
        }
        self.queue
            .push(at, to, SimPayload::Deliver { from, class, bytes });
    }

    /// Epoch bookkeeping at the end of a simulated instant.
    #[allow(clippy::needless_range_loop)]
    fn close_instant(&mut self) {
        if self.tokens_in_flight > 0 {
            return;
        }
        let observers = self.observers();
        let Some(epoch) = observers.iter().map(|&i| self.nodes[i].last_token_id).max() else {
            return;
        };
        if epoch <= self.last_epoch {
            return;
        }
        self.last_epoch = epoch;

        let tables: Vec<Vec<f64>> = self.nodes.iter().map(|s| s.table.values()).collect();
        let mut groups: Vec<(Vec<f64>, usize)> = Vec::new();
        for &i in &observers {
            match groups.iter_mut().find(|(t, _)| *t == tables[i]) {
                Some(g) => g.1 += 1,
                None => groups.push((tables[i].clone(), 1)),
            }
        }
        let agreed = groups.len() <= 1;
        let best = groups.iter().map(|g| g.1).max().unwrap_or(0);
        let majority = groups
            .into_iter()
            .find(|g| g.1 == best)
            .map(|g| g.0)
            .unwrap_or_default();
        if !agreed {
            self.metrics.agreement_violations += 1;
        }
        self.metrics.token_rounds += 1;

        let p = self.cfg.policy;
        for j in 0..self.cfg.n as usize {
            let key = j.to_string();
            if self.metrics.detection_epochs.contains_key(&key) {
                continue;
            }
            let marking = observers
                .iter()
                .filter(|&&i| is_faulty(Score::saturating(tables[i][j]), &p))
                .count();
            if 2 * marking > observers.len() {
                self.metrics.detection_epochs.insert(key, epoch);
            }
        }
        self.record(
            None,
            "epoch",
            json!({ "epoch": epoch, "majority": majority, "agreed": agreed }),
        );
        self.trace.snapshots.push(EpochSnapshot {
            epoch,
            time: self.now,
            tables,
            majority,
            agreed,
        });
    }
}

fn flipped(mut bytes: Vec<u8>, flip: Option<u64>) -> Vec<u8> {
    if let Some(bit) = flip {
        let bit = (bit % (bytes.len() as u64 * 8)) as usize;
        bytes[bit / 8] ^= 1 << (bit % 8);
    }
    bytes
}

fn send_detail(msg: &Message, to: NodeId) -> Value {
    let mut d = json!({ "class": msg.class(), "to": to.to_string() });
    if let Body::Token(t) = &msg.body {
        d["token_id"] = json!(t.token_id);
    }
    d
}

/// Builds a simulation, runs it to `duration` and returns its trace and
/// metrics. Identical inputs give identical outputs.
pub fn run_scenario(
    cfg: ProtocolConfig,
    faults: &[FaultSpec],
    links: LinkModel,
    duration: Time,
) -> Result<(Trace, Metrics), SimError> {
    let mut sim = Simulation::new(cfg, faults, links)?;
    sim.run_until(duration);
    Ok(sim.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reliability::{FormulaVariant, UpdatePolicy};

    fn cfg(n: u32) -> ProtocolConfig {
        ProtocolConfig {
            run_seed: 1,
            ..ProtocolConfig::new(n, 100, 10)
        }
    }

    fn response_action() -> ProtocolAction {
        ProtocolAction::SendTo(
            NodeId(0),
            Message::response(
                NodeId(1),
                NodeId(0),
                crate::wire::ResponsePayload {
                    source: NodeId(1),
                    response: 2.5,
                },
            ),
        )
    }

    #[test]
    fn queue_orders_by_time_then_enqueue() {
        let mut q = EventQueue::default();
        q.push(5, NodeId(0), SimPayload::Start);
        q.push(3, NodeId(1), SimPayload::Start);
        q.push(5, NodeId(2), SimPayload::Start);
        q.push(3, NodeId(3), SimPayload::Start);
        let order: Vec<u32> = std::iter::from_fn(|| q.deliver())
            .map(|e| e.target.0)
            .collect();
        assert_eq!(order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn honest_fault_is_identity() {
        let f = FaultSpec::new(1, FaultBehavior::Honest);
        let (out, _) = apply_fault(&f, response_action(), PrngState::new(3), 10, 1);
        assert_eq!(out, vec![Outgoing::pass(response_action())]);
    }

    #[test]
    fn certain_corruption_flips_a_bit() {
        let f = FaultSpec::new(1, FaultBehavior::CorruptReplyBits { probability: 1.0 });
        let (out, _) = apply_fault(&f, response_action(), PrngState::new(3), 10, 1);
        assert_eq!(out.len(), 1);
        let ProtocolAction::SendTo(_, m) = &out[0].action else {
            panic!()
        };
        let bytes = flipped(encode_message(m), out[0].flip_bit);
        assert!(matches!(
            crate::wire::decode_message(&bytes),
            Err(crate::wire::WireError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn drop_faults_only_touch_their_class() {
        let f = FaultSpec::new(1, FaultBehavior::DropTokenBroadcast { probability: 1.0 });
        let (out, _) = apply_fault(&f, response_action(), PrngState::new(3), 10, 1);
        assert_eq!(out.len(), 1);
        let f = FaultSpec::new(1, FaultBehavior::SilentResponse { probability: 1.0 });
        let (out, _) = apply_fault(&f, response_action(), PrngState::new(3), 10, 1);
        assert!(out.is_empty());
        let f = FaultSpec::new(1, FaultBehavior::FailStop { at: 20 });
        assert_eq!(
            apply_fault(&f, response_action(), PrngState::new(3), 19, 1)
                .0
                .len(),
            1
        );
        assert!(apply_fault(&f, response_action(), PrngState::new(3), 20, 1)
            .0
            .is_empty());
    }

    #[test]
    fn stutter_delays_inside_interval() {
        let f = FaultSpec::new(
            1,
            FaultBehavior::Stutter {
                delay_factor: 4.0,
                from: 10,
                until: 20,
            },
        );
        let (out, _) = apply_fault(&f, response_action(), PrngState::new(0), 15, 2);
        assert_eq!(out[0].extra_delay, 8);
        let (out, _) = apply_fault(&f, response_action(), PrngState::new(0), 20, 2);
        assert_eq!(out[0].extra_delay, 0);
    }

    #[test]
    fn broadcast_fans_out_to_everyone_else() {
        let mut sim = Simulation::new(cfg(4), &[], LinkModel::default()).unwrap();
        sim.run_until(0);
        // Node 0's challenge is queued for the three others.
        assert_eq!(sim.metrics.messages_sent.challenge, 1);
        assert_eq!(sim.queue.len() - timers(&sim), 3);
    }

    fn timers(sim: &Simulation) -> usize {
        sim.queue
            .heap
            .iter()
            .filter(|Reverse(Queued(e))| matches!(e.payload, SimPayload::Timer { .. }))
            .count()
    }

    #[test]
    fn failed_link_blocks_one_recipient() {
        let links = LinkModel {
            failed_links: vec![LinkFailure {
                a: NodeId(2),
                b: NodeId(0),
                from: 0,
                until: None,
            }],
            ..LinkModel::default()
        };
        let (trace, _) = run_scenario(cfg(4), &[], links, 50).unwrap();
        assert!(trace.records_for(NodeId(2)).all(|r| r.kind != "responded"));
        assert!(trace.records_for(NodeId(1)).any(|r| r.kind == "responded"));
        assert!(trace.records_for(NodeId(3)).any(|r| r.kind == "responded"));
    }

    #[test]
    fn honest_ring_stays_saturated() {
        let (trace, m) = run_scenario(cfg(4), &[], LinkModel::default(), 20 * 100 + 220).unwrap();
        assert!(m.detection_epochs.is_empty());
        assert_eq!(m.agreement_violations, 0);
        assert!(m.token_rounds >= 20);
        assert!(m.final_scores.iter().all(|&s| s == 1.0));
        assert!(trace.snapshots.iter().all(|s| s.agreed));
    }

    #[test]
    fn wrong_response_decays_one_step_per_epoch() {
        let mut c = cfg(4);
        c.policy = UpdatePolicy::with_variant(FormulaVariant::ExponentialV2);
        let faults = [FaultSpec::new(
            3,
            FaultBehavior::WrongResponse { perturbation: 0.5 },
        )];
        let (trace, m) =
            run_scenario(c.clone(), &faults, LinkModel::default(), 10 * 100 + 220).unwrap();
        let mut s = Score::RELIABLE;
        for snap in &trace.snapshots {
            s = crate::reliability::decrease_score(s, &c.policy);
            assert_eq!(snap.majority[3], s.value(), "epoch {}", snap.epoch);
        }
        assert_eq!(m.detection_epoch(3), Some(5));
    }

    #[test]
    fn config_errors() {
        let dup = [
            FaultSpec::new(1, FaultBehavior::Honest),
            FaultSpec::new(1, FaultBehavior::WrongResponse { perturbation: 1.0 }),
        ];
        assert!(matches!(
            Simulation::new(cfg(4), &dup, LinkModel::default()),
            Err(SimError::DuplicateFault(_))
        ));
        let out_of_ring = [FaultSpec::new(9, FaultBehavior::Honest)];
        assert!(matches!(
            Simulation::new(cfg(4), &out_of_ring, LinkModel::default()),
            Err(SimError::FaultNode(_))
        ));
        let bad_p = [FaultSpec::new(
            1,
            FaultBehavior::SilentResponse { probability: 1.5 },
        )];
        assert!(matches!(
            Simulation::new(cfg(4), &bad_p, LinkModel::default()),
            Err(SimError::InvalidFault { .. })
        ));
        let zero = LinkModel {
            base_latency: 0,
            ..LinkModel::default()
        };
        assert!(matches!(
            Simulation::new(cfg(4), &[], zero),
            Err(SimError::ZeroLatency)
        ));
    }
}
