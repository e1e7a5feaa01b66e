//! Per-node protocol state machine.
//!
//! The token holder (head) issues a challenge, collects responses, judges
//! them, updates its reliability table, waits out the epoch and broadcasts
//! the token carrying the new table to the next ring member. Everyone else
//! (lieutenants) answers challenges from the expected head, validates the
//! table carried by each token and keeps a succession timer so that a
//! silent head is skipped and penalised.
//!
//! [`NodeState::handle_event`] is a deterministic transition function: time
//! only enters through `now`, and all effects are returned as
//! [`ProtocolAction`]s for the harness to interpret.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::challenge::{compute_response, generate_challenge};
use crate::reliability::{
    apply_round, decrease_score, is_faulty, judge_responses, validate_transition, RejectReason,
    ReliabilityTable, Reply, TransitionCheck, UpdatePolicy, Verdict, DEFAULT_EQ_TOL,
    DEFAULT_MATCH_TOL,
};
use crate::wire::{decode_message, Body, Message, NodeId, ResponsePayload, TokenPayload};

/// Simulated time in abstract ticks.
pub type Time = u64;

pub fn successor(id: NodeId, n: u32) -> NodeId {
    NodeId((id.0 + 1) % n)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtocolConfig {
    pub n: u32,
    pub epoch_time: Time,
    pub response_timeout: Time,
    pub head_timeout: Time,
    /// Expected one-way broadcast delay. A head that hands the token on
    /// starts its own succession timer this much later, so its deadline
    /// lines up with the recipients'.
    pub propagation_delay: Time,
    pub policy: UpdatePolicy,
    pub run_seed: u64,
    pub match_tol: f64,
    pub eq_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("ring size must be at least 2, got {0}")]
    RingTooSmall(u32),
    #[error("response_timeout must be positive and below epoch_time")]
    ResponseTimeout,
    #[error("head_timeout must be at least epoch_time")]
    HeadTimeout,
    #[error(transparent)]
    Policy(#[from] crate::reliability::PolicyError),
}

impl ProtocolConfig {
    /// Uses `head_timeout = epoch_time + response_timeout`.
    pub fn new(n: u32, epoch_time: Time, response_timeout: Time) -> Self {
        ProtocolConfig {
            n,
            epoch_time,
            response_timeout,
            head_timeout: epoch_time + response_timeout,
            propagation_delay: 1,
            policy: UpdatePolicy::default(),
            run_seed: 0,
            match_tol: DEFAULT_MATCH_TOL,
            eq_tol: DEFAULT_EQ_TOL,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 2 {
            return Err(ConfigError::RingTooSmall(self.n));
        }
        if self.response_timeout == 0 || self.response_timeout >= self.epoch_time {
            return Err(ConfigError::ResponseTimeout);
        }
        if self.head_timeout < self.epoch_time {
            return Err(ConfigError::HeadTimeout);
        }
        self.policy.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerKind {
    HeadSuccession,
    ResponseCollection,
    EpochWait,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolEvent {
    Start,
    /// A frame as it came off the wire; decoding happens inside the node.
    Received(Vec<u8>),
    TimerFired(TimerKind),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolAction {
    Broadcast(Message),
    SendTo(NodeId, Message),
    SetTimer(TimerKind, Time),
    CancelTimer(TimerKind),
    ReportDetection { node: NodeId, epoch: u64 },
    Trace(TraceNote),
}

/// Structured notes emitted for the trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceNote {
    RoundStarted {
        token_id: u64,
    },
    ChallengeFailed {
        token_id: u64,
        error: String,
    },
    RoundJudged {
        token_id: u64,
        reference: Option<f64>,
        verdicts: Vec<Verdict>,
    },
    TokenSent {
        token_id: u64,
        next: NodeId,
    },
    TokenAccepted {
        token_id: u64,
        from: NodeId,
        next: NodeId,
    },
    TableRejected {
        token_id: u64,
        from: NodeId,
        reason: RejectReason,
    },
    SpuriousToken {
        token_id: u64,
        from: NodeId,
        expected: NodeId,
    },
    MalformedToken {
        token_id: u64,
        from: NodeId,
    },
    StaleToken {
        token_id: u64,
        from: NodeId,
        last: u64,
    },
    SpuriousChallenge {
        from: NodeId,
        expected: NodeId,
    },
    Responded {
        head: NodeId,
    },
    DuplicateResponse {
        source: NodeId,
    },
    LateResponse {
        source: NodeId,
    },
    UnknownResponder {
        source: NodeId,
    },
    HeadTimeout {
        failed: NodeId,
        next: NodeId,
    },
    Undecodable {
        error: String,
    },
    Misaddressed {
        receiver: NodeId,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum RoundPhase {
    Collecting {
        deadline: Time,
        pending: BTreeMap<NodeId, f64>,
    },
    EpochWait {
        deadline: Time,
        token: TokenPayload,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadRound {
    pub token_id: u64,
    pub started: Time,
    pub phase: RoundPhase,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Role {
    Lieutenant,
    Head(HeadRound),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub me: NodeId,
    pub role: Role,
    pub expected_head: NodeId,
    pub last_token_id: u64,
    pub table: ReliabilityTable,
    pub succession_deadline: Option<Time>,
    /// Added to every challenge result this node computes, its own included.
    /// Zero for a healthy arithmetic unit.
    pub response_bias: f64,
}

type Actions = Vec<ProtocolAction>;

impl NodeState {
    /// Node 0 holds the token first.
    pub fn new(me: NodeId, cfg: &ProtocolConfig) -> Self {
        NodeState {
            me,
            role: Role::Lieutenant,
            expected_head: NodeId(0),
            last_token_id: 0,
            table: ReliabilityTable::new(cfg.n as usize),
            succession_deadline: None,
            response_bias: 0.0,
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self.role, Role::Head(_))
    }

    pub fn handle_event(
        &mut self,
        event: ProtocolEvent,
        cfg: &ProtocolConfig,
        now: Time,
    ) -> Actions {
        let mut out = Vec::new();
        match event {
            ProtocolEvent::Start => {
                if self.expected_head == self.me {
                    self.head_begin_round(cfg, now, &mut out);
                } else {
                    self.arm_succession(now + cfg.head_timeout, &mut out);
                }
            }
            ProtocolEvent::TimerFired(kind) => self.on_timer(kind, cfg, now, &mut out),
            ProtocolEvent::Received(bytes) => self.on_frame(&bytes, cfg, now, &mut out),
        }
        out
    }

    fn on_timer(&mut self, kind: TimerKind, cfg: &ProtocolConfig, now: Time, out: &mut Actions) {
        match kind {
            TimerKind::HeadSuccession => {
                if self.succession_deadline == Some(now) && !self.is_head() {
                    self.on_head_timeout(cfg, now, out);
                }
            }
            TimerKind::ResponseCollection => {
                if let Role::Head(HeadRound {
                    phase: RoundPhase::Collecting { deadline, .. },
                    ..
                }) = &self.role
                {
                    if *deadline == now {
                        self.head_finish_round(cfg, now, out);
                    }
                }
            }
            TimerKind::EpochWait => {
                if let Role::Head(HeadRound {
                    phase: RoundPhase::EpochWait { deadline, .. },
                    ..
                }) = &self.role
                {
                    if *deadline == now {
                        self.head_pass_token(cfg, now, out);
                    }
                }
            }
        }
    }

    fn on_frame(&mut self, bytes: &[u8], cfg: &ProtocolConfig, now: Time, out: &mut Actions) {
        let msg = match decode_message(bytes) {
            Ok(m) => m,
            Err(e) => {
                out.push(ProtocolAction::Trace(TraceNote::Undecodable {
                    error: e.to_string(),
                }));
                return;
            }
        };
        let receiver = msg.header.receiver;
        if receiver != self.me && !receiver.is_broadcast() {
            out.push(ProtocolAction::Trace(TraceNote::Misaddressed { receiver }));
            return;
        }
        let sender = msg.header.sender;
        match msg.body {
            Body::Token(token) => self.lieutenant_on_token(sender, token, cfg, now, out),
            Body::Challenge(c) => {
                if self.is_head() || sender != self.expected_head {
                    out.push(ProtocolAction::Trace(TraceNote::SpuriousChallenge {
                        from: sender,
                        expected: self.expected_head,
                    }));
                    return;
                }
                self.lieutenant_on_challenge(sender, &c, out);
            }
            Body::Response(r) => self.head_on_response(sender, r, cfg, now, out),
        }
    }

    fn arm_succession(&mut self, deadline: Time, out: &mut Actions) {
        self.succession_deadline = Some(deadline);
        out.push(ProtocolAction::SetTimer(
            TimerKind::HeadSuccession,
            deadline,
        ));
    }

    fn own_result(&self, c: &crate::wire::ChallengePayload) -> Result<f64, String> {
        compute_response(c)
            .map(|v| v + self.response_bias)
            .map_err(|e| e.to_string())
    }

    /// Issue the challenge for token `last_token_id + 1`.
    pub fn head_begin_round(&mut self, cfg: &ProtocolConfig, now: Time, out: &mut Actions) {
        let token_id = self.last_token_id + 1;
        if self.succession_deadline.take().is_some() {
            out.push(ProtocolAction::CancelTimer(TimerKind::HeadSuccession));
        }
        self.expected_head = self.me;
        out.push(ProtocolAction::Trace(TraceNote::RoundStarted { token_id }));

        let mut pending = BTreeMap::new();
        let deadline = now + cfg.response_timeout;
        match generate_challenge(cfg.run_seed, token_id, self.me) {
            Ok(c) => {
                match self.own_result(&c) {
                    Ok(v) => {
                        pending.insert(self.me, v);
                    }
                    Err(error) => out.push(ProtocolAction::Trace(TraceNote::ChallengeFailed {
                        token_id,
                        error,
                    })),
                }
                out.push(ProtocolAction::Broadcast(Message::challenge(self.me, c)));
            }
            Err(e) => out.push(ProtocolAction::Trace(TraceNote::ChallengeFailed {
                token_id,
                error: e.to_string(),
            })),
        }
        self.role = Role::Head(HeadRound {
            token_id,
            started: now,
            phase: RoundPhase::Collecting { deadline, pending },
        });
        out.push(ProtocolAction::SetTimer(
            TimerKind::ResponseCollection,
            deadline,
        ));
        if cfg.n == 1 {
            self.head_finish_round(cfg, now, out);
        }
    }

    /// First write wins; the round closes as soon as every node has answered.
    pub fn head_on_response(
        &mut self,
        sender: NodeId,
        r: ResponsePayload,
        cfg: &ProtocolConfig,
        now: Time,
        out: &mut Actions,
    ) {
        let pending = match &mut self.role {
            Role::Head(HeadRound {
                phase: RoundPhase::Collecting { pending, .. },
                ..
            }) => pending,
            _ => {
                out.push(ProtocolAction::Trace(TraceNote::LateResponse {
                    source: r.source,
                }));
                return;
            }
        };
        if r.source.0 >= cfg.n || r.source != sender {
            out.push(ProtocolAction::Trace(TraceNote::UnknownResponder {
                source: r.source,
            }));
            return;
        }
        if pending.contains_key(&r.source) {
            out.push(ProtocolAction::Trace(TraceNote::DuplicateResponse {
                source: r.source,
            }));
            return;
        }
        pending.insert(r.source, r.response);
        if pending.len() == cfg.n as usize {
            out.push(ProtocolAction::CancelTimer(TimerKind::ResponseCollection));
            self.head_finish_round(cfg, now, out);
        }
    }

    /// Judge, update the table and start the epoch wait. Missing responses
    /// count as timeouts. The token leaves one epoch after the round began.
    pub fn head_finish_round(&mut self, cfg: &ProtocolConfig, now: Time, out: &mut Actions) {
        let Role::Head(round) = &mut self.role else {
            return;
        };
        let RoundPhase::Collecting { pending, .. } = &round.phase else {
            return;
        };

        let replies = (0..cfg.n).map(NodeId).map(|id| {
            let reply = pending
                .get(&id)
                .map_or(Reply::TimedOut, |&v| Reply::Value(v));
            (id, reply)
        });
        let (reference, verdicts) = match judge_responses(replies, cfg.match_tol) {
            Ok(j) => (Some(j.reference), j.verdict_vec(cfg.n as usize)),
            Err(_) => (None, vec![Verdict::NotParticipating; cfg.n as usize]),
        };
        let new_table = apply_round(&self.table, &verdicts, &cfg.policy);
        let token_id = round.token_id;
        out.push(ProtocolAction::Trace(TraceNote::RoundJudged {
            token_id,
            reference,
            verdicts,
        }));
        report_crossings(&self.table, &new_table, &cfg.policy, token_id, out);

        let deadline = (round.started + cfg.epoch_time).max(now);
        round.phase = RoundPhase::EpochWait {
            deadline,
            token: TokenPayload {
                token_id,
                cur_token_holder: self.me,
                new_token_holder: successor(self.me, cfg.n),
                r_table: new_table,
            },
        };
        out.push(ProtocolAction::SetTimer(TimerKind::EpochWait, deadline));
    }

    fn head_pass_token(&mut self, cfg: &ProtocolConfig, now: Time, out: &mut Actions) {
        let role = std::mem::replace(&mut self.role, Role::Lieutenant);
        let Role::Head(HeadRound {
            phase: RoundPhase::EpochWait { token, .. },
            ..
        }) = role
        else {
            self.role = role;
            return;
        };
        self.table = token.r_table.clone();
        self.last_token_id = token.token_id;
        self.expected_head = token.new_token_holder;
        out.push(ProtocolAction::Trace(TraceNote::TokenSent {
            token_id: token.token_id,
            next: token.new_token_holder,
        }));
        out.push(ProtocolAction::Broadcast(Message::token(self.me, token)));
        if self.expected_head == self.me {
            self.head_begin_round(cfg, now, out);
        } else {
            self.arm_succession(now + cfg.propagation_delay + cfg.head_timeout, out);
        }
    }

    /// Answer only the head we expect.
    pub fn lieutenant_on_challenge(
        &mut self,
        sender: NodeId,
        c: &crate::wire::ChallengePayload,
        out: &mut Actions,
    ) {
        match self.own_result(c) {
            Ok(value) => {
                let reply = ResponsePayload {
                    source: self.me,
                    response: value,
                };
                out.push(ProtocolAction::SendTo(
                    sender,
                    Message::response(self.me, sender, reply),
                ));
                out.push(ProtocolAction::Trace(TraceNote::Responded { head: sender }));
            }
            Err(error) => out.push(ProtocolAction::Trace(TraceNote::ChallengeFailed {
                token_id: 0,
                error,
            })),
        }
    }

    /// Tokens from anyone but the expected head, or with a stale id, are
    /// ignored outright. A token whose table fails validation still moves
    /// succession forward; only the table is discarded.
    pub fn lieutenant_on_token(
        &mut self,
        sender: NodeId,
        token: TokenPayload,
        cfg: &ProtocolConfig,
        now: Time,
        out: &mut Actions,
    ) {
        let token_id = token.token_id;
        if self.is_head() || sender != self.expected_head {
            out.push(ProtocolAction::Trace(TraceNote::SpuriousToken {
                token_id,
                from: sender,
                expected: self.expected_head,
            }));
            return;
        }
        if token.cur_token_holder != sender
            || token.new_token_holder.0 >= cfg.n
            || token.new_token_holder != successor(sender, cfg.n)
        {
            out.push(ProtocolAction::Trace(TraceNote::MalformedToken {
                token_id,
                from: sender,
            }));
            return;
        }
        if token_id <= self.last_token_id {
            out.push(ProtocolAction::Trace(TraceNote::StaleToken {
                token_id,
                from: sender,
                last: self.last_token_id,
            }));
            return;
        }

        match validate_transition(&self.table, &token.r_table, &cfg.policy, cfg.eq_tol) {
            TransitionCheck::Accept => {
                report_crossings(&self.table, &token.r_table, &cfg.policy, token_id, out);
                self.table = token.r_table;
                out.push(ProtocolAction::Trace(TraceNote::TokenAccepted {
                    token_id,
                    from: sender,
                    next: token.new_token_holder,
                }));
            }
            TransitionCheck::Reject { reason } => {
                out.push(ProtocolAction::Trace(TraceNote::TableRejected {
                    token_id,
                    from: sender,
                    reason,
                }));
            }
        }
        self.last_token_id = token_id;
        self.expected_head = token.new_token_holder;
        if self.expected_head == self.me {
            self.head_begin_round(cfg, now, out);
        } else {
            self.arm_succession(now + cfg.head_timeout, out);
        }
    }

    /// The expected head stayed silent: penalise it and move on to its
    /// successor, taking over if that is us.
    pub fn on_head_timeout(&mut self, cfg: &ProtocolConfig, now: Time, out: &mut Actions) {
        let failed = self.expected_head;
        let old = self.table.clone();
        let penalised = decrease_score(self.table.get(failed), &cfg.policy);
        self.table.set(failed, penalised);
        report_crossings(&old, &self.table, &cfg.policy, self.last_token_id, out);

        self.expected_head = successor(failed, cfg.n);
        out.push(ProtocolAction::Trace(TraceNote::HeadTimeout {
            failed,
            next: self.expected_head,
        }));
        if self.expected_head == self.me {
            self.head_begin_round(cfg, now, out);
        } else {
            self.arm_succession(now + cfg.head_timeout, out);
        }
    }
}

fn report_crossings(
    old: &ReliabilityTable,
    new: &ReliabilityTable,
    p: &UpdatePolicy,
    epoch: u64,
    out: &mut Actions,
) {
    for (i, (o, n)) in old.iter().zip(new.iter()).enumerate() {
        if !is_faulty(o, p) && is_faulty(n, p) {
            out.push(ProtocolAction::ReportDetection {
                node: NodeId(i as u32),
                epoch,
            });
        }
    }
}
