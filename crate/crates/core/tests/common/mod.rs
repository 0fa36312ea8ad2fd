//! Scenario builders shared by the integration tests.
#![allow(dead_code)]

use rand::seq::index::sample;
use resilab::rng::{stream, Purpose};
use resilab::{run_scenario, RunOptions, RunResult, Scenario};

pub const LEARNING: &str = include_str!("../../../../scenarios/learning.toml");

pub fn learning(seed: u64, learning: bool) -> Scenario {
    let mut s = Scenario::load(LEARNING).expect("learning scenario is valid");
    s.engine.seed = seed;
    s.nodes[0].controller.learning = learning;
    s
}

pub fn run(s: &Scenario) -> RunResult {
    run_scenario(s, &RunOptions::default()).expect("run succeeds")
}

/// One node watching a constant signal through a channel whose bias picks
/// up a disturbance figure drifting at `rate` per second.
pub fn drift(behavior: &str, rate: f64, duration: f64) -> Scenario {
    Scenario::load(&format!(
        r#"
schema_version = 1
[engine]
duration = {duration:?}
dt = 0.1
seed = 3
[[environment.figures]]
name = "signal"
initial = 2.0
[[environment.figures]]
name = "load"
drift = {{ kind = "linear", rate = {rate:?} }}
[[nodes]]
name = "n"
behavior = {behavior}
channel = {{ figure = 0, disturbance = 1 }}
"#
    ))
    .expect("drift scenario is valid")
}

/// Perfect channel, constant environment, Passive guarded node with a
/// non-empty catalog (so any modelling would be visible).
pub fn perfect() -> Scenario {
    Scenario::load(
        r#"
schema_version = 1
[engine]
duration = 50.0
dt = 0.1
seed = 9
[[environment.figures]]
name = "signal"
initial = 1.5
[[nodes]]
name = "n"
contract = { class = "HardRT", t = 0.1 }
guard_window = 10
[nodes.channel]
figure = 0
[[nodes.controller.catalog]]
id = "fast"
action = { reconfigure = { behavior = { kind = "reactive", gain = 1.0 } } }
"#,
    )
    .expect("perfect scenario is valid")
}

pub const DIVERSITY_NODES: usize = 12;
pub const DIVERSITY_BUDGET: f64 = 0.12;
pub const DIVERSITY_CAPACITY: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    ReactiveNeutral,
    ReactiveIndividualistic,
    ReactiveCooperative,
    PredictiveNeutral,
    PredictiveIndividualistic,
    PredictiveCooperative,
}

pub const VARIANTS: [Variant; 6] = [
    Variant::ReactiveNeutral,
    Variant::ReactiveIndividualistic,
    Variant::ReactiveCooperative,
    Variant::PredictiveNeutral,
    Variant::PredictiveIndividualistic,
    Variant::PredictiveCooperative,
];

impl Variant {
    fn parts(self) -> (&'static str, &'static str) {
        let reactive = r#"{ kind = "reactive", gain = 1.0 }"#;
        let predictive = r#"{ kind = "predictive_order_k", order = 1, history = 4 }"#;
        match self {
            Variant::ReactiveNeutral => (reactive, "neutral"),
            Variant::ReactiveIndividualistic => (reactive, "individualistic"),
            Variant::ReactiveCooperative => (reactive, "cooperative"),
            Variant::PredictiveNeutral => (predictive, "neutral"),
            Variant::PredictiveIndividualistic => (predictive, "individualistic"),
            Variant::PredictiveCooperative => (predictive, "cooperative"),
        }
    }
}

/// Nodes hit by the shared shock in `trial`.
pub fn shocked(trial: u64) -> Vec<usize> {
    let mut rng = stream(trial, Purpose::Scenario, 0);
    let mut v = sample(&mut rng, DIVERSITY_NODES, DIVERSITY_NODES / 2).into_vec();
    v.sort_unstable();
    v
}

/// Budget-limited population, each node with its own disturbance figure;
/// one shock at t = 2 s hits the figures of `hit`.
pub fn population(variants: &[Variant], hit: &[usize], seed: u64) -> Scenario {
    let n = variants.len();
    let mut t = format!(
        "schema_version = 1\n[engine]\nduration = 25.0\ndt = 0.1\nseed = {seed}\n\
         [environment]\nturbulence_threshold = 5.0\n\
         [[environment.figures]]\nname = \"signal\"\n"
    );
    for i in 0..n {
        t += &format!("[[environment.figures]]\nname = \"d{i}\"\n");
    }
    for &i in hit {
        t += &format!(
            "[[environment.shocks]]\nat = 2.0\nfigure = {}\nmagnitude = 1.0\nrecovery_window = 20.0\n",
            i + 1
        );
    }
    t += &format!(
        "[collective]\nbudget = {DIVERSITY_BUDGET:?}\njoin_share = {:?}\nvariant_space = 6\n",
        DIVERSITY_BUDGET / n as f64
    );
    for (i, v) in variants.iter().enumerate() {
        let (behavior, social) = v.parts();
        t += &format!(
            "[[nodes]]\nname = \"n{i}\"\nbehavior = {behavior}\nsocial = \"{social}\"\n\
             contract = {{ class = \"HardRT\", t = 0.1 }}\nguard_window = 5\n\
             base_capacity = {DIVERSITY_CAPACITY:?}\n\
             channel = {{ figure = 0, noise_std = 0.01, disturbance = {} }}\n",
            i + 1
        );
    }
    Scenario::load(&t).expect("population scenario is valid")
}

pub fn diverse() -> Vec<Variant> {
    (0..DIVERSITY_NODES).map(|i| VARIANTS[i % VARIANTS.len()]).collect()
}

/// Greedy default: every node reactive and individualistic.
pub fn monoculture() -> Vec<Variant> {
    vec![Variant::ReactiveIndividualistic; DIVERSITY_NODES]
}

/// Slowest restoration among shocked nodes; never restored counts as
/// infinite.
pub fn worst_recovery(r: &RunResult) -> f64 {
    r.node_episodes
        .iter()
        .map(|e| e.metrics.restoration_time.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
}
