//! Lamport's oral-messages algorithm OM(m), with adversary enumeration.
//!
//! Traitors answer through a [`TraitorStrategy`] keyed by the recursion
//! path (the chain of commanders so far, ending in the sender) and the
//! recipient. A strategy may stay silent; receivers then assume RETREAT.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::challenge::PrngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Attack,
    Retreat,
}

impl Order {
    pub const DEFAULT: Order = Order::Retreat;
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Order::Attack => "attack",
            Order::Retreat => "retreat",
        })
    }
}

impl FromStr for Order {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "attack" | "a" => Ok(Order::Attack),
            "retreat" | "r" => Ok(Order::Retreat),
            other => Err(format!(
                "unknown order {other:?}, expected attack or retreat"
            )),
        }
    }
}

/// Strict majority; ties and empty input give RETREAT.
pub fn majority(values: &[Order]) -> Order {
    let attack = values.iter().filter(|&&v| v == Order::Attack).count();
    if 2 * attack > values.len() {
        Order::Attack
    } else {
        Order::Retreat
    }
}

/// Path of commanders from the top, ending in the current sender.
pub type Path = Vec<u32>;

pub trait TraitorStrategy {
    /// What the traitor at the end of `path` tells `recipient`, given the
    /// value a loyal sender would have relayed. `None` is silence.
    fn send(&mut self, path: &[u32], recipient: u32, honest: Order) -> Option<Order>;
}

/// Traitors that behave loyally.
pub struct HonestStrategy;

impl TraitorStrategy for HonestStrategy {
    fn send(&mut self, _: &[u32], _: u32, honest: Order) -> Option<Order> {
        Some(honest)
    }
}

/// A fixed message table. Queries missing from the table are answered
/// honestly.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TableStrategy {
    pub table: BTreeMap<(Path, u32), Option<Order>>,
}

impl TraitorStrategy for TableStrategy {
    fn send(&mut self, path: &[u32], recipient: u32, honest: Order) -> Option<Order> {
        self.table
            .get(&(path.to_vec(), recipient))
            .copied()
            .unwrap_or(Some(honest))
    }
}

/// Answers honestly and remembers every query in order.
#[derive(Clone, Debug, Default)]
pub struct RecordingStrategy {
    pub queries: Vec<(Path, u32)>,
}

impl TraitorStrategy for RecordingStrategy {
    fn send(&mut self, path: &[u32], recipient: u32, honest: Order) -> Option<Order> {
        self.queries.push((path.to_vec(), recipient));
        Some(honest)
    }
}

/// Each query is answered by hashing it with a seed, so the same seed gives
/// the same (colluding) strategy across runs.
#[derive(Clone, Copy, Debug)]
pub struct RandomStrategy {
    pub seed: u64,
}

impl TraitorStrategy for RandomStrategy {
    fn send(&mut self, path: &[u32], recipient: u32, _: Order) -> Option<Order> {
        let mut s = PrngState::new(self.seed);
        for &p in path
            .iter()
            .chain(std::iter::once(&u32::MAX))
            .chain(std::iter::once(&recipient))
        {
            let x = s.next_u64();
            s = PrngState::new(x ^ p as u64);
        }
        choice(s.next_below(3))
    }
}

fn choice(k: u64) -> Option<Order> {
    match k {
        0 => Some(Order::Attack),
        1 => Some(Order::Retreat),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OmParams {
    pub n: u32,
    pub m: u32,
    pub commander: u32,
    pub value: Order,
    pub traitors: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OmError {
    #[error("need at least one participant")]
    NoParticipants,
    #[error("participant {0} outside 0..{1}")]
    OutOfRange(u32, u32),
    #[error("strategy space of {0} queries is too large to enumerate")]
    TooLarge(usize),
}

impl OmParams {
    pub fn new(
        n: u32,
        m: u32,
        commander: u32,
        value: Order,
        traitors: impl IntoIterator<Item = u32>,
    ) -> Self {
        OmParams {
            n,
            m,
            commander,
            value,
            traitors: traitors.into_iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<(), OmError> {
        if self.n == 0 {
            return Err(OmError::NoParticipants);
        }
        if let Some(&bad) = std::iter::once(&self.commander)
            .chain(&self.traitors)
            .find(|&&i| i >= self.n)
        {
            return Err(OmError::OutOfRange(bad, self.n));
        }
        Ok(())
    }

    pub fn commander_loyal(&self) -> bool {
        !self.traitors.contains(&self.commander)
    }

    pub fn loyal_lieutenants(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.n).filter(move |i| *i != self.commander && !self.traitors.contains(i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Consistency {
    pub ic1: bool,
    pub ic2: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OmOutcome {
    /// Decision of every loyal lieutenant.
    pub decisions: BTreeMap<u32, Order>,
    /// Message slots used, silent ones included.
    pub messages: u64,
    pub consistency: Consistency,
}

struct Run<'a> {
    traitors: &'a BTreeSet<u32>,
    strategy: &'a mut dyn TraitorStrategy,
    messages: u64,
}

impl Run<'_> {
    /// One OM(m) instance; returns the value every lieutenant ends up using.
    fn om(
        &mut self,
        m: u32,
        path: &mut Path,
        value: Order,
        lieutenants: &[u32],
    ) -> BTreeMap<u32, Order> {
        let commander = *path.last().expect("path holds the commander");
        let loyal = !self.traitors.contains(&commander);
        let mut received = BTreeMap::new();
        for &l in lieutenants {
            self.messages += 1;
            let v = if loyal {
                Some(value)
            } else {
                self.strategy.send(path, l, value)
            };
            received.insert(l, v.unwrap_or(Order::DEFAULT));
        }
        if m == 0 {
            return received;
        }
        // relayed[i][j]: value lieutenant i uses for lieutenant j's order.
        let mut relayed: BTreeMap<u32, Vec<Order>> = lieutenants
            .iter()
            .map(|&i| (i, vec![received[&i]]))
            .collect();
        for &j in lieutenants {
            let others: Vec<u32> = lieutenants.iter().copied().filter(|&i| i != j).collect();
            if others.is_empty() {
                continue;
            }
            path.push(j);
            let sub = self.om(m - 1, path, received[&j], &others);
            path.pop();
            for (i, v) in sub {
                relayed.get_mut(&i).expect("lieutenant").push(v);
            }
        }
        relayed
            .into_iter()
            .map(|(i, vs)| (i, majority(&vs)))
            .collect()
    }
}

/// Runs OM(m) and returns every loyal lieutenant's decision.
pub fn om_decide(
    params: &OmParams,
    strategy: &mut dyn TraitorStrategy,
) -> Result<OmOutcome, OmError> {
    params.validate()?;
    let lieutenants: Vec<u32> = (0..params.n).filter(|&i| i != params.commander).collect();
    let mut run = Run {
        traitors: &params.traitors,
        strategy,
        messages: 0,
    };
    let all = run.om(
        params.m,
        &mut vec![params.commander],
        params.value,
        &lieutenants,
    );
    let decisions: BTreeMap<u32, Order> =
        params.loyal_lieutenants().map(|i| (i, all[&i])).collect();
    let consistency = interactive_consistency(params, &decisions);
    Ok(OmOutcome {
        decisions,
        messages: run.messages,
        consistency,
    })
}

fn interactive_consistency(params: &OmParams, decisions: &BTreeMap<u32, Order>) -> Consistency {
    let mut values = decisions.values();
    let ic1 = match values.next() {
        Some(first) => values.all(|v| v == first),
        None => true,
    };
    let ic2 = !params.commander_loyal() || decisions.values().all(|&v| v == params.value);
    Consistency { ic1, ic2 }
}

pub fn check_interactive_consistency(
    params: &OmParams,
    strategy: &mut dyn TraitorStrategy,
) -> Result<Consistency, OmError> {
    om_decide(params, strategy).map(|o| o.consistency)
}

/// `n-1 + (n-1)(n-2) + ... ` up to depth `m`, the number of messages
/// OM(m) sends when `m <= n - 2`.
pub fn om_message_count(n: u64, m: u64) -> u64 {
    let mut total = 0;
    let mut term = 1;
    for k in 0..=m {
        term *= n.saturating_sub(1 + k);
        total += term;
    }
    total
}

/// Every (path, recipient) a traitor is asked about. The recursion shape
/// does not depend on message values, so one honest run finds them all.
pub fn query_set(params: &OmParams) -> Result<Vec<(Path, u32)>, OmError> {
    let mut rec = RecordingStrategy::default();
    om_decide(params, &mut rec)?;
    let traitors = &params.traitors;
    let mut queries: Vec<(Path, u32)> = rec
        .queries
        .into_iter()
        .filter(|(p, _)| traitors.contains(p.last().expect("nonempty path")))
        .collect();
    queries.sort();
    queries.dedup();
    Ok(queries)
}

/// Largest query set [`enumerate_strategies`] accepts (3^16 tables).
pub const MAX_ENUMERATED_QUERIES: usize = 16;

/// Visits every strategy table over the query set: each query answered
/// ATTACK, RETREAT or silence. Returns the number of tables visited.
pub fn enumerate_strategies(
    params: &OmParams,
    mut visit: impl FnMut(&TableStrategy, &OmOutcome) -> ControlFlow<()>,
) -> Result<u64, OmError> {
    let queries = query_set(params)?;
    if queries.len() > MAX_ENUMERATED_QUERIES {
        return Err(OmError::TooLarge(queries.len()));
    }
    let total = 3u64.pow(queries.len() as u32);
    for code in 0..total {
        let mut c = code;
        let mut strategy = TableStrategy::default();
        for q in &queries {
            strategy.table.insert(q.clone(), choice(c % 3));
            c /= 3;
        }
        let outcome = om_decide(params, &mut strategy.clone())?;
        if visit(&strategy, &outcome).is_break() {
            return Ok(code + 1);
        }
    }
    Ok(total)
}

/// Runs the exhaustive search and returns the first table breaking IC1 (or
/// IC2 when `ic2` is set).
pub fn find_violation(
    params: &OmParams,
    ic2: bool,
) -> Result<Option<(TableStrategy, OmOutcome)>, OmError> {
    let mut found = None;
    enumerate_strategies(params, |s, o| {
        let ok = if ic2 {
            o.consistency.ic2
        } else {
            o.consistency.ic1
        };
        if ok {
            ControlFlow::Continue(())
        } else {
            found = Some((s.clone(), o.clone()));
            ControlFlow::Break(())
        }
    })?;
    Ok(found)
}
