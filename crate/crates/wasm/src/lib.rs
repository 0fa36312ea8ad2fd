//! Browser bindings. Every entry point takes plain numbers and returns a
//! JSON string so the page needs no generated type glue.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use resilab::engine::trapezoid;
use resilab::reflection::{preservation_distance, ReflectiveMap};
use resilab::{run_scenario, RunOptions, RunResult, Scenario};

const LEARNING: &str = include_str!("../../../scenarios/learning.toml");

#[derive(Serialize)]
struct Sweep {
    u: Vec<f64>,
    delta: Vec<f64>,
    bound: f64,
}

/// Additivity residual `q(u + u2) - q(u) - q(u2)` for `u` over
/// `[0, span]`, with the worst-case bound for the channel.
#[wasm_bindgen]
pub fn channel_sweep(gain: f64, bias: f64, quantization: f64, u2: f64, span: f64, points: usize) -> Result<String, String> {
    let map = ReflectiveMap {
        quantization,
        ..ReflectiveMap::affine(0, gain, bias)
    };
    if let Some((field, msg)) = map.problems().into_iter().next() {
        return Err(format!("{field}: {msg}"));
    }
    let points = points.clamp(2, 10_000);
    let u: Vec<f64> = (0..points).map(|i| span * i as f64 / (points - 1) as f64).collect();
    let delta = u.iter().map(|&x| preservation_distance(&map, x, u2)).collect();
    let sweep = Sweep {
        u,
        delta,
        bound: 1.5 * quantization + bias.abs(),
    };
    Ok(serde_json::to_string(&sweep).expect("sweep serializes"))
}

#[derive(Serialize)]
struct Lane {
    behavior: &'static str,
    delta: Vec<f64>,
    cost: f64,
}

#[derive(Serialize)]
struct Race {
    time: Vec<f64>,
    lanes: Vec<Lane>,
}

/// Passive, reactive and predictive nodes tracking a signal whose channel
/// bias drifts at `rate` per second, with optional sensor noise.
#[wasm_bindgen]
pub fn behavior_race(rate: f64, noise: f64, duration: f64, seed: u64) -> Result<String, String> {
    let lanes = [
        ("passive", r#"{ kind = "passive" }"#),
        ("reactive", r#"{ kind = "reactive", gain = 1.0 }"#),
        ("predictive", r#"{ kind = "predictive_order_k", order = 1, history = 8 }"#),
    ];
    let mut time = Vec::new();
    let mut out = Vec::new();
    for (name, behavior) in lanes {
        let text = format!(
            "schema_version = 1\n[engine]\nduration = {duration:?}\ndt = 0.1\nseed = {seed}\n\
             [[environment.figures]]\nname = \"signal\"\ninitial = 1.0\n\
             [[environment.figures]]\nname = \"load\"\ndrift = {{ kind = \"linear\", rate = {rate:?} }}\n\
             [[nodes]]\nname = \"{name}\"\nbehavior = {behavior}\n\
             channel = {{ figure = 0, noise_std = {noise:?}, disturbance = 1 }}\n"
        );
        let r = run(&text)?;
        time = r.node_records(0).map(|t| t.time).collect();
        let delta = r.deltas(0);
        let abs: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
        out.push(Lane {
            behavior: name,
            cost: trapezoid(&time, &abs),
            delta,
        });
    }
    Ok(serde_json::to_string(&Race { time, lanes: out }).expect("race serializes"))
}

#[derive(Serialize)]
struct Episode {
    strategy: Option<String>,
    cost: f64,
    reward: Option<f64>,
}

#[derive(Serialize)]
struct Learning {
    episodes: Vec<Episode>,
    verdict: String,
    normalized_slope: Option<f64>,
}

/// The bundled two-strategy shock scenario, with learning on or off.
#[wasm_bindgen]
pub fn learning_run(seed: u64, learning: bool) -> Result<String, String> {
    let mut s = Scenario::load(LEARNING).map_err(|e| e.to_string())?;
    s.engine.seed = seed;
    for n in &mut s.nodes {
        n.controller.learning = learning;
    }
    let r = run_scenario(&s, &RunOptions::default()).map_err(|e| e.to_string())?;
    let episodes = r
        .node_episodes
        .iter()
        .map(|e| Episode {
            strategy: e.metrics.strategy.clone(),
            cost: e.metrics.cost,
            reward: e.reward,
        })
        .collect();
    let (verdict, normalized_slope) = match &r.antifragility {
        Ok(a) => (format!("{:?}", a.verdict), Some(a.normalized_slope)),
        Err(e) => (e.to_string(), None),
    };
    Ok(serde_json::to_string(&Learning {
        episodes,
        verdict,
        normalized_slope,
    })
    .expect("learning serializes"))
}

fn run(text: &str) -> Result<RunResult, String> {
    let s = Scenario::load(text).map_err(|e| e.to_string())?;
    run_scenario(&s, &RunOptions::default()).map_err(|e| e.to_string())
}
