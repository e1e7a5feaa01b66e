//! Browser bindings for the demo page in `www/`. Every export takes plain
//! values and returns a JSON string; failures come back as `{"error": ...}`.

use ringwarden_core::om::{om_decide, OmParams, Order, RandomStrategy};
use ringwarden_core::reliability::{
    decrease_score, increase_score, steps_to_detection, FormulaVariant, Score, UpdatePolicy,
};
use ringwarden_core::scenario::ScenarioFile;
use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const VARIANTS: [FormulaVariant; 3] = [
    FormulaVariant::ExponentialV1,
    FormulaVariant::ExponentialV2,
    FormulaVariant::Linear,
];

fn error(msg: impl ToString) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

#[derive(Serialize)]
struct Curve {
    variant: FormulaVariant,
    /// Scores after 0..=steps consecutive decreases from 1.0.
    falling: Vec<f64>,
    /// Scores after 0..=steps consecutive increases from 0.0.
    rising: Vec<f64>,
    steps_to_detection: Option<u64>,
}

/// Score trajectories under every formula variant.
#[wasm_bindgen]
pub fn score_curves(delta: f64, threshold: f64, steps: u32) -> String {
    let steps = steps.min(1000);
    let mut curves = Vec::new();
    for variant in VARIANTS {
        let p = UpdatePolicy {
            delta,
            threshold,
            formula_variant: variant,
        };
        if let Err(e) = p.validate() {
            return error(e);
        }
        let iterate = |start: Score, f: fn(Score, &UpdatePolicy) -> Score| {
            std::iter::successors(Some(start), |&s| Some(f(s, &p)))
                .take(steps as usize + 1)
                .map(Score::value)
                .collect()
        };
        curves.push(Curve {
            variant,
            falling: iterate(Score::RELIABLE, decrease_score),
            rising: iterate(Score::UNRELIABLE, increase_score),
            steps_to_detection: steps_to_detection(&p, 10_000),
        });
    }
    json!({ "threshold": threshold, "curves": curves }).to_string()
}

/// Runs a scenario file and returns its metrics and per-epoch majority
/// tables.
#[wasm_bindgen]
pub fn run_scenario_json(scenario: &str) -> String {
    let file = match ScenarioFile::parse(scenario) {
        Ok(f) => f,
        Err(e) => return error(e),
    };
    if file.duration_epochs > 2000 || file.protocol.n > 64 {
        return error("the demo is limited to 64 nodes and 2000 epochs");
    }
    let (trace, metrics) = match file.run() {
        Ok(r) => r,
        Err(e) => return error(e),
    };
    let epochs: Vec<Value> = trace
        .snapshots
        .iter()
        .map(|s| json!({ "epoch": s.epoch, "scores": s.majority, "agreed": s.agreed }))
        .collect();
    json!({
        "n": file.protocol.n,
        "threshold": file.protocol.threshold,
        "metrics": metrics,
        "epochs": epochs,
    })
    .to_string()
}

/// OM(m) with a seeded traitor strategy. `traitors` is comma-separated.
#[wasm_bindgen]
pub fn om_demo(n: u32, m: u32, commander: u32, value: &str, traitors: &str, seed: u64) -> String {
    if n > 9 || m > 3 {
        return error("the demo is limited to 9 generals and depth 3");
    }
    let value: Order = match value.parse() {
        Ok(v) => v,
        Err(e) => return error(e),
    };
    let mut ids = Vec::new();
    for t in traitors.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match t.parse::<u32>() {
            Ok(id) => ids.push(id),
            Err(_) => return error(format!("bad traitor id {t:?}")),
        }
    }
    let params = OmParams::new(n, m, commander, value, ids);
    match om_decide(&params, &mut RandomStrategy { seed }) {
        Ok(o) => json!({
            "commander_loyal": params.commander_loyal(),
            "decisions": o.decisions,
            "messages": o.messages,
            "ic1": o.consistency.ic1,
            "ic2": o.consistency.ic2,
        })
        .to_string(),
        Err(e) => error(e),
    }
}
