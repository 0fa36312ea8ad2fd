//! Fixed-step simulation loop.
//!
//! Every tick runs the stages in one order for all nodes: pending
//! reconfigurations, environment (drift, shocks, regime label), sensing,
//! Δ, guard, controller, behavior, collective, metrics.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{Behavior, BehaviorClass, Observation};
use crate::collective::{decide_social_action, diversity_score, NodeView, ResourcePool, SocialAction, SocialBehavior};
use crate::controller::{reward, Controller, ControllerError, LearningState, Mode, StrategyAction};
use crate::environment::{apply_shock, step_environment, DriftProcess, EnvError, EnvState, RegimeWindow, ShockEvent};
use crate::identity::{check_contract_with, ContractStatus, FailureDetector, IdentityClass, IdentityFailureEvent};
use crate::reflection::{quantize, sense, DeltaSample, Quale, ReflectiveMap};
use crate::rng::{stream, Purpose, Stream};
use crate::scenario::{ConfigError, NodeConfig, Scenario};

const EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("environment: {0}")]
    Environment(#[from] EnvError),
    #[error("node {node}: {source}")]
    Controller { node: String, source: ControllerError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Reconfigure,
    Environment,
    Sensing,
    Delta,
    Guard,
    Controller,
    Behavior,
    Collective,
    Metrics,
}

/// One instrumentation mark: `seq` increases across the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageMark {
    pub tick: usize,
    pub seq: u64,
    pub stage: Stage,
    pub node: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Learning state to resume from, by node name.
    pub learning: BTreeMap<String, LearningState>,
    /// Record stage marks.
    pub instrument: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRecord {
    pub time: f64,
    pub node: usize,
    pub figure: usize,
    pub raw: f64,
    pub quale: f64,
    pub delta: f64,
    pub mode: Mode,
    pub status: Option<ContractStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Reconfigure,
    Revert,
    Social,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChangeRecord {
    pub time: f64,
    pub node: usize,
    pub strategy: String,
    pub kind: ChangeKind,
    pub ok: bool,
    pub pre: String,
    pub post: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub time: f64,
    pub reserve: f64,
    pub allocations: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEvent {
    pub node: usize,
    pub event: IdentityFailureEvent,
}

/// Recovery of one node from one shock.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryMetrics {
    pub episode: usize,
    /// Integrated |Δ| over the recovery window, quale·seconds.
    pub cost: f64,
    /// Seconds from the shock to restoration, if restored inside the window.
    pub restoration_time: Option<f64>,
    pub strategy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeEpisode {
    pub node: usize,
    #[serde(flatten)]
    pub metrics: RecoveryMetrics,
    pub regime: Option<String>,
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Fragile,
    Robust,
    Antifragile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Antifragility {
    pub slope: f64,
    pub normalized_slope: f64,
    pub verdict: Verdict,
    pub tolerance: f64,
    pub episodes: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("at least 4 episodes are needed, got {0}")]
pub struct InsufficientEpisodes(pub usize);

#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: Scenario,
    pub node_names: Vec<String>,
    pub ticks: usize,
    pub records: Vec<TickRecord>,
    pub changes: Vec<ChangeRecord>,
    pub pool_log: Vec<PoolRecord>,
    pub events: Vec<NodeEvent>,
    pub node_episodes: Vec<NodeEpisode>,
    pub episodes: Vec<RecoveryMetrics>,
    pub antifragility: Result<Antifragility, InsufficientEpisodes>,
    pub learning: BTreeMap<String, LearningState>,
    /// Model-building operations per node.
    pub overhead: Vec<u64>,
    pub pool_violations: Vec<String>,
    pub diversity: f64,
    pub baselines: Vec<Option<f64>>,
    pub stages: Vec<StageMark>,
}

impl RunResult {
    /// Tick records of one node in time order.
    pub fn node_records(&self, node: usize) -> impl Iterator<Item = &TickRecord> {
        self.records.iter().filter(move |r| r.node == node)
    }

    pub fn modes(&self, node: usize) -> Vec<Mode> {
        self.node_records(node).map(|r| r.mode).collect()
    }

    pub fn statuses(&self, node: usize) -> Vec<Option<ContractStatus>> {
        self.node_records(node).map(|r| r.status).collect()
    }

    pub fn deltas(&self, node: usize) -> Vec<f64> {
        self.node_records(node).map(|r| r.delta).collect()
    }
}

/// Trapezoid integral of `values` sampled at `times`.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| (t[1] - t[0]) * (v[0] + v[1]) / 2.0)
        .sum()
}

/// Cost and restoration time of one node for each shock.
///
/// `statuses` of `None` (no contract) count as Holding. Restoration is the
/// first tick at or after the shock that starts `run` consecutive Holding
/// ticks, all inside the window.
pub fn compute_recovery_metrics(
    times: &[f64],
    abs_deltas: &[f64],
    statuses: &[Option<ContractStatus>],
    shocks: &[ShockEvent],
    run: usize,
) -> Vec<RecoveryMetrics> {
    shocks
        .iter()
        .enumerate()
        .map(|(episode, s)| {
            let end = s.at + s.recovery_window;
            let idx: Vec<usize> = (0..times.len())
                .filter(|&i| times[i] >= s.at - EPS && times[i] <= end + EPS)
                .collect();
            let ts: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
            let vs: Vec<f64> = idx.iter().map(|&i| abs_deltas[i]).collect();
            let holding = |i: usize| statuses[i].is_none_or(|st| st == ContractStatus::Holding);
            let restoration_time = idx
                .windows(run.max(1))
                .find(|w| w.iter().all(|&i| holding(i)))
                .map(|w| times[w[0]] - s.at);
            RecoveryMetrics {
                episode,
                cost: trapezoid(&ts, &vs),
                restoration_time,
                strategy: None,
            }
        })
        .collect()
}

/// Median of all pairwise slopes.
pub fn theil_sen(values: &[f64]) -> f64 {
    let mut slopes = Vec::with_capacity(values.len() * values.len().saturating_sub(1) / 2);
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            slopes.push((values[j] - values[i]) / (j - i) as f64);
        }
    }
    if slopes.is_empty() {
        return 0.0;
    }
    slopes.sort_by(f64::total_cmp);
    let m = slopes.len();
    if m % 2 == 1 {
        slopes[m / 2]
    } else {
        (slopes[m / 2 - 1] + slopes[m / 2]) / 2.0
    }
}

/// Trend of per-episode cost: Theil–Sen slope normalized by the first cost
/// (by the mean cost when the first is zero).
pub fn antifragility_score(costs: &[f64], tolerance: f64) -> Result<Antifragility, InsufficientEpisodes> {
    if costs.len() < 4 {
        return Err(InsufficientEpisodes(costs.len()));
    }
    let slope = theil_sen(costs);
    let scale = if costs[0] != 0.0 {
        costs[0].abs()
    } else {
        costs.iter().sum::<f64>() / costs.len() as f64
    };
    let normalized_slope = if scale > 0.0 { slope / scale } else { 0.0 };
    let verdict = if normalized_slope < -tolerance {
        Verdict::Antifragile
    } else if normalized_slope > tolerance {
        Verdict::Fragile
    } else {
        Verdict::Robust
    };
    Ok(Antifragility {
        slope,
        normalized_slope,
        verdict,
        tolerance,
        episodes: costs.len(),
    })
}

struct Pending {
    strategy: Option<String>,
    kind: ChangeKind,
    behavior: Option<BehaviorClass>,
    map: ReflectiveMap,
}

struct Selection {
    episode: usize,
    strategy: usize,
    regime: String,
    failed: bool,
    reward: Option<f64>,
}

struct NodeRt<'a> {
    cfg: &'a NodeConfig,
    resident_behavior: BehaviorClass,
    resident_map: ReflectiveMap,
    behavior: Behavior,
    map: ReflectiveMap,
    nominal: (f64, f64),
    correction: f64,
    pending: Option<Pending>,
    sample_origin: f64,
    sample_k: u64,
    in_flight: VecDeque<(Quale, f64)>,
    held: f64,
    held_correction: f64,
    fresh: bool,
    raw: f64,
    delta: f64,
    guard: VecDeque<f64>,
    status: Option<ContractStatus>,
    utilization: f64,
    holding_streak: usize,
    detector: Option<FailureDetector>,
    obs: Observation,
    controller: Controller,
    noise: Stream,
    explore: Stream,
    selections: Vec<Selection>,
    queued_social: Option<(usize, SocialAction)>,
    times: Vec<f64>,
    abs_deltas: Vec<f64>,
    statuses: Vec<Option<ContractStatus>>,
    relevant: BTreeSet<usize>,
}

impl NodeRt<'_> {
    fn contract(&self) -> Option<IdentityClass> {
        self.cfg.contract.filter(|c| !matches!(c, IdentityClass::NonRt))
    }

    /// Status the controller is allowed to see.
    fn guard_signal(&self) -> ContractStatus {
        match self.contract() {
            Some(IdentityClass::BestEffort { .. }) | None => ContractStatus::Holding,
            Some(_) => self.status.unwrap_or(ContractStatus::Holding),
        }
    }

    fn summary(&self, behavior: &BehaviorClass, map: &ReflectiveMap) -> String {
        serde_json::json!({ "behavior": behavior, "channel": map }).to_string()
    }

    fn effective_bias(&self, env: &EnvState) -> f64 {
        let leak = self.cfg.channel.disturbance.map_or(0.0, |d| self.cfg.channel.coupling * env.figures[d]);
        self.map.bias + leak + self.correction
    }
}

fn reward_key(s: &ShockEvent) -> f64 {
    s.magnitude.abs()
}

/// Runs `scenario` start to finish.
pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<RunResult, EngineError> {
    scenario.validate()?;
    let baselines = calibrate(scenario)?;
    simulate(scenario, options, &baselines)
}

/// Reward baselines per node: the fixed one from the config, or the
/// integrated |Δ| of a Passive copy of the node under its largest shock.
fn calibrate(scenario: &Scenario) -> Result<Vec<Option<f64>>, EngineError> {
    let nodes = scenario.expanded();
    if let Some(b) = scenario.engine.reward_baseline {
        return Ok(vec![Some(b); nodes.len()]);
    }
    let learning_nodes: Vec<bool> = nodes.iter().map(|(_, n)| !n.controller.catalog.is_empty()).collect();
    if !learning_nodes.iter().any(|&l| l) {
        return Ok(vec![None; nodes.len()]);
    }
    let shocks = &scenario.environment.shocks;
    let mut largest: Vec<Option<usize>> = Vec::with_capacity(nodes.len());
    for (_, n) in &nodes {
        let rel = relevant_shocks(n, shocks);
        let mut best: Option<usize> = None;
        for j in rel {
            if best.is_none_or(|b| reward_key(&shocks[j]) > reward_key(&shocks[b])) {
                best = Some(j);
            }
        }
        largest.push(best);
    }
    let mut out = vec![None; nodes.len()];
    let wanted: BTreeSet<usize> = largest.iter().flatten().copied().collect();
    for j in wanted {
        let mut calib = scenario.clone();
        calib.environment.shocks = vec![shocks[j]];
        calib.engine.reward_baseline = Some(1.0);
        for n in &mut calib.nodes {
            n.behavior = BehaviorClass::Passive;
            n.social = None;
            n.controller.catalog.clear();
        }
        let result = simulate(&calib, &RunOptions::default(), &vec![None; nodes.len()])?;
        for (i, l) in largest.iter().enumerate() {
            if *l == Some(j) && learning_nodes[i] {
                out[i] = result
                    .node_episodes
                    .iter()
                    .find(|e| e.node == i)
                    .map(|e| e.metrics.cost);
            }
        }
    }
    Ok(out)
}

fn relevant_shocks(node: &NodeConfig, shocks: &[ShockEvent]) -> BTreeSet<usize> {
    shocks
        .iter()
        .enumerate()
        .filter(|(_, s)| s.figure == node.channel.figure || Some(s.figure) == node.channel.disturbance)
        .map(|(j, _)| j)
        .collect()
}

struct Marks {
    on: bool,
    seq: u64,
    marks: Vec<StageMark>,
}

impl Marks {
    fn mark(&mut self, tick: usize, stage: Stage, node: Option<usize>) {
        if self.on {
            self.marks.push(StageMark {
                tick,
                seq: self.seq,
                stage,
                node,
            });
        }
        self.seq += 1;
    }
}

fn simulate(scenario: &Scenario, options: &RunOptions, baselines: &[Option<f64>]) -> Result<RunResult, EngineError> {
    let dt = scenario.engine.dt;
    let seed = scenario.engine.seed;
    let n_ticks = scenario.ticks();
    let env_cfg = &scenario.environment;
    let shocks = &env_cfg.shocks;
    let processes: Vec<DriftProcess> = env_cfg
        .figures
        .iter()
        .enumerate()
        .map(|(i, f)| DriftProcess {
            figure: i,
            kind: f.drift.clone(),
        })
        .collect();
    let mut env_streams: Vec<Stream> = (0..processes.len())
        .map(|i| stream(seed, Purpose::Environment, i as u64))
        .collect();
    let mut env = EnvState::new(env_cfg.figures.iter().map(|f| f.initial).collect());
    let mut regimes = RegimeWindow::new(processes.len(), env_cfg.regime_window, env_cfg.turbulence_threshold);

    let expanded = scenario.expanded();
    let names: Vec<String> = expanded.iter().map(|(n, _)| n.clone()).collect();
    let mut nodes: Vec<NodeRt> = Vec::with_capacity(expanded.len());
    for (i, (name, cfg)) in expanded.iter().enumerate() {
        let map = cfg.channel.map(dt);
        let controller = Controller::new(cfg.controller.clone(), options.learning.get(name).cloned())
            .map_err(|source| EngineError::Controller {
                node: name.clone(),
                source,
            })?;
        let detector = match cfg.contract {
            Some(c @ (IdentityClass::HardRt { .. } | IdentityClass::SoftRt { .. })) => {
                FailureDetector::new(c, cfg.detector).ok()
            }
            _ => None,
        };
        nodes.push(NodeRt {
            cfg,
            resident_behavior: cfg.behavior.clone(),
            resident_map: map,
            behavior: Behavior::new(cfg.behavior.clone()),
            map,
            nominal: cfg.channel.nominal(),
            correction: 0.0,
            pending: None,
            sample_origin: 0.0,
            sample_k: 0,
            in_flight: VecDeque::new(),
            held: 0.0,
            held_correction: 0.0,
            fresh: false,
            raw: 0.0,
            delta: 0.0,
            guard: VecDeque::with_capacity(cfg.guard_window),
            status: None,
            utilization: 0.0,
            holding_streak: 0,
            detector,
            obs: Observation::new(cfg.behavior.history_len()),
            controller,
            noise: stream(seed, Purpose::SensorNoise, i as u64),
            explore: stream(seed, Purpose::Controller, i as u64),
            selections: Vec::new(),
            queued_social: None,
            times: Vec::with_capacity(n_ticks),
            abs_deltas: Vec::with_capacity(n_ticks),
            statuses: Vec::with_capacity(n_ticks),
            relevant: relevant_shocks(cfg, shocks),
        });
    }

    let coll = &scenario.collective;
    let social_cfg = coll.social();
    let mut pool = ResourcePool::new(coll.budget, coll.join_share);
    let pooled = coll.budget > 0.0 || nodes.iter().any(|n| n.cfg.social.is_some());

    let mut records = Vec::with_capacity(n_ticks * nodes.len());
    let mut changes = Vec::new();
    let mut pool_log = Vec::new();
    let mut events = Vec::new();
    let mut pool_violations = Vec::new();
    let mut shock_applied = vec![false; shocks.len()];
    let mut marks = Marks {
        on: options.instrument,
        seq: 0,
        marks: Vec::new(),
    };

    for tick in 0..n_ticks {
        let t = tick as f64 * dt;

        marks.mark(tick, Stage::Reconfigure, None);
        for (i, node) in nodes.iter_mut().enumerate() {
            if let Some(p) = node.pending.take() {
                let pre = node.summary(&node.behavior.class, &node.map);
                if let Some(b) = p.behavior {
                    node.obs.resize(b.history_len());
                    node.behavior = Behavior::new(b);
                }
                if p.map.sampling_period != node.map.sampling_period {
                    node.sample_origin = t;
                    node.sample_k = 0;
                }
                node.map = p.map;
                let post = node.summary(&node.behavior.class, &node.map);
                changes.push(ChangeRecord {
                    time: t,
                    node: i,
                    strategy: p.strategy.unwrap_or_else(|| "resident".into()),
                    kind: p.kind,
                    ok: true,
                    pre,
                    post,
                });
            }
        }

        marks.mark(tick, Stage::Environment, None);
        if tick > 0 {
            env = step_environment(&env, &processes, dt, &mut env_streams)?;
        }
        env.time = t;
        for (j, s) in shocks.iter().enumerate() {
            if !shock_applied[j] && s.at <= t + EPS && t < s.at + dt - EPS {
                env = apply_shock(&env, s)?;
                shock_applied[j] = true;
            }
        }
        let regime = regimes.push(&env);
        env.regime = regime;
        let regime_label = regime.as_str();

        for (i, node) in nodes.iter_mut().enumerate() {
            marks.mark(tick, Stage::Sensing, Some(i));
            let raw = env.figures[node.map.figure];
            node.raw = raw;
            let mut eff = node.map;
            eff.bias = node.effective_bias(&env);
            if tick == 0 {
                node.held = quantize(eff.gain.mul_add(raw, eff.bias), eff.quantization);
                node.held_correction = node.correction;
            }
            let due = node.sample_origin + node.sample_k as f64 * node.map.sampling_period;
            if t + EPS * t.abs().max(1.0) >= due {
                let q = sense(&eff, raw, t, &mut node.noise);
                node.in_flight.push_back((q, node.correction));
                node.sample_k += 1;
                while node.sample_origin + node.sample_k as f64 * node.map.sampling_period <= t + EPS {
                    node.sample_k += 1;
                }
            }
            node.fresh = false;
            while let Some(&(q, c)) = node.in_flight.front() {
                if q.acquired_at <= t + EPS * t.abs().max(1.0) {
                    node.held = q.value;
                    node.held_correction = c;
                    node.fresh = true;
                    node.in_flight.pop_front();
                } else {
                    break;
                }
            }
        }

        for (i, node) in nodes.iter_mut().enumerate() {
            marks.mark(tick, Stage::Delta, Some(i));
            let ideal = node.nominal.0.mul_add(node.raw, node.nominal.1);
            node.delta = node.held - ideal;
            if node.fresh {
                let context: Vec<f64> = node.cfg.context.iter().map(|&f| env.figures[f]).collect();
                node.obs.push(
                    DeltaSample {
                        time: t,
                        figure: node.map.figure,
                        delta: node.delta,
                    },
                    node.held_correction,
                    context,
                );
            }
        }

        for (i, node) in nodes.iter_mut().enumerate() {
            marks.mark(tick, Stage::Guard, Some(i));
            let sample = DeltaSample {
                time: t,
                figure: node.map.figure,
                delta: node.delta,
            };
            if let Some(contract) = node.contract() {
                if node.guard.len() == node.cfg.guard_window {
                    node.guard.pop_front();
                }
                node.guard.push_back(node.delta);
                let window: Vec<f64> = node.guard.iter().copied().collect();
                let margin = node.cfg.controller.safety.margin_threshold;
                if let Ok(check) = check_contract_with(&window, &contract, margin) {
                    node.status = Some(check.status);
                    node.utilization = check.utilization;
                }
            }
            node.holding_streak = match node.status {
                Some(ContractStatus::Holding) | None => node.holding_streak + 1,
                _ => 0,
            };
            if let Some(det) = node.detector.as_mut() {
                if let Some(event) = det.observe(&sample) {
                    events.push(NodeEvent { node: i, event });
                }
            }
        }

        for (i, node) in nodes.iter_mut().enumerate() {
            marks.mark(tick, Stage::Controller, Some(i));
            close_episodes(node, shocks, t, false, baselines[i], &names[i])?;
            let episode = node
                .relevant
                .iter()
                .copied()
                .filter(|&j| shocks[j].at <= t + EPS && t <= shocks[j].at + shocks[j].recovery_window + EPS)
                .max();
            let sample = DeltaSample {
                time: t,
                figure: node.map.figure,
                delta: node.delta,
            };
            let signal = node.guard_signal();
            let decision = node
                .controller
                .tick(&sample, signal, regime_label, episode, &mut node.explore)
                .map_err(|source| EngineError::Controller {
                    node: names[i].clone(),
                    source,
                })?;
            if let (Some(k), Some(ep)) = (decision.selected, episode) {
                let strategy = node.controller.config.catalog[k].clone();
                node.selections.push(Selection {
                    episode: ep,
                    strategy: k,
                    regime: regime_label.to_string(),
                    failed: false,
                    reward: None,
                });
                match strategy.action {
                    StrategyAction::Reconfigure { behavior, channel } => {
                        node.pending = Some(Pending {
                            strategy: Some(strategy.id.clone()),
                            kind: ChangeKind::Reconfigure,
                            behavior,
                            map: channel.apply(&node.map),
                        });
                    }
                    StrategyAction::Social(action) => node.queued_social = Some((k, action)),
                }
            } else if decision.previous == Mode::Resilient && decision.mode == Mode::Elastic {
                let differs = node.behavior.class != node.resident_behavior || node.map != node.resident_map;
                if differs {
                    node.pending = Some(Pending {
                        strategy: None,
                        kind: ChangeKind::Revert,
                        behavior: Some(node.resident_behavior.clone()),
                        map: node.resident_map,
                    });
                }
            }
        }

        for (i, node) in nodes.iter_mut().enumerate() {
            marks.mark(tick, Stage::Behavior, Some(i));
            if !node.fresh {
                continue;
            }
            let action = node.behavior.act(&node.obs);
            let desired = action.bias_adjustment;
            let applied = match node.cfg.base_capacity {
                Some(base) => {
                    pool.set_need(i, desired.abs() - base);
                    let cap = base + pool.allocation(i);
                    desired.clamp(-cap, cap)
                }
                None => desired,
            };
            node.correction += applied;
            if action.gain_multiplier != 1.0 {
                node.map.gain *= action.gain_multiplier;
            }
            if let Some(p) = action.resample {
                node.map.sampling_period = p;
                node.sample_origin = t;
                node.sample_k = 1;
            }
        }

        let views: Vec<NodeView> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeView {
                id: i,
                status: n.status.unwrap_or(ContractStatus::Holding),
                utilization: n.utilization,
                holding_streak: n.holding_streak,
            })
            .collect();
        for i in 0..nodes.len() {
            marks.mark(tick, Stage::Collective, Some(i));
            if let Some((k, action)) = nodes[i].queued_social.take() {
                let before = pool.allocation(i);
                let ok = pool.apply(i, &action).is_ok();
                if !ok {
                    if let Some(sel) = nodes[i].selections.last_mut() {
                        sel.failed = true;
                    }
                }
                changes.push(ChangeRecord {
                    time: t,
                    node: i,
                    strategy: nodes[i].controller.config.catalog[k].id.clone(),
                    kind: ChangeKind::Social,
                    ok,
                    pre: format!("{{\"allocation\":{before}}}"),
                    post: format!("{{\"allocation\":{}}}", pool.allocation(i)),
                });
            }
            if let Some(social) = nodes[i].cfg.social {
                if let Some(action) = decide_social_action(&views[i], &views, social, &pool, &social_cfg) {
                    // Decisions are feasible by construction; a refusal is harmless.
                    let _ = pool.apply(i, &action);
                }
            }
        }
        if pooled {
            for v in pool.violations() {
                pool_violations.push(format!("t={t}: {v}"));
            }
        }

        marks.mark(tick, Stage::Metrics, None);
        for (i, node) in nodes.iter_mut().enumerate() {
            node.times.push(t);
            node.abs_deltas.push(node.delta.abs());
            node.statuses.push(node.status);
            records.push(TickRecord {
                time: t,
                node: i,
                figure: node.map.figure,
                raw: node.raw,
                quale: node.held,
                delta: node.delta,
                mode: node.controller.mode(),
                status: node.status,
            });
        }
        if pooled {
            pool_log.push(PoolRecord {
                time: t,
                reserve: pool.reserve(),
                allocations: pool.allocations_units().keys().map(|&m| (m, pool.allocation(m))).collect(),
            });
        }
    }

    let end = n_ticks as f64 * dt;
    for (i, node) in nodes.iter_mut().enumerate() {
        close_episodes(node, shocks, end, true, baselines[i], &names[i])?;
    }

    let restoration = scenario.engine.restoration_ticks;
    let mut node_episodes = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        let metrics = compute_recovery_metrics(&node.times, &node.abs_deltas, &node.statuses, shocks, restoration);
        for mut m in metrics {
            if !node.relevant.contains(&m.episode) {
                continue;
            }
            let sel = node.selections.iter().find(|s| s.episode == m.episode);
            m.strategy = sel.map(|s| node.controller.config.catalog[s.strategy].id.clone());
            node_episodes.push(NodeEpisode {
                node: i,
                metrics: m,
                regime: sel.map(|s| s.regime.clone()),
                reward: sel.and_then(|s| s.reward),
            });
        }
    }
    node_episodes.sort_by_key(|e| (e.metrics.episode, e.node));

    let mut episodes = Vec::with_capacity(shocks.len());
    for j in 0..shocks.len() {
        let mine: Vec<&NodeEpisode> = node_episodes.iter().filter(|e| e.metrics.episode == j).collect();
        let (cost, restoration_time) = if mine.is_empty() {
            (0.0, Some(0.0))
        } else {
            let cost = mine.iter().map(|e| e.metrics.cost).sum::<f64>() / mine.len() as f64;
            let worst = mine
                .iter()
                .map(|e| e.metrics.restoration_time)
                .try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r)));
            (cost, worst)
        };
        let strategies: BTreeSet<&str> = mine.iter().filter_map(|e| e.metrics.strategy.as_deref()).collect();
        episodes.push(RecoveryMetrics {
            episode: j,
            cost,
            restoration_time,
            strategy: if strategies.is_empty() {
                None
            } else {
                Some(strategies.into_iter().collect::<Vec<_>>().join("|"))
            },
        });
    }
    let costs: Vec<f64> = episodes.iter().map(|e| e.cost).collect();
    let antifragility = antifragility_score(&costs, scenario.engine.antifragility_tolerance);

    let variants: Vec<_> = expanded
        .iter()
        .map(|(_, n)| (n.behavior.kind(), n.social.unwrap_or(SocialBehavior::Neutral)))
        .collect();
    let space = scenario.collective.variant_space.unwrap_or_else(|| scenario.present_variants());
    let diversity = diversity_score(&variants, space);

    Ok(RunResult {
        scenario: scenario.effective(),
        node_names: names.clone(),
        ticks: n_ticks,
        records,
        changes,
        pool_log,
        events,
        node_episodes,
        episodes,
        antifragility,
        learning: nodes
            .iter()
            .zip(&names)
            .map(|(n, name)| (name.clone(), n.controller.learning.clone()))
            .collect(),
        overhead: nodes.iter().map(|n| n.controller.overhead).collect(),
        pool_violations,
        diversity,
        baselines: baselines.to_vec(),
        stages: marks.marks,
    })
}

/// Credits every selection whose recovery window has elapsed by `t`.
fn close_episodes(
    node: &mut NodeRt,
    shocks: &[ShockEvent],
    t: f64,
    all: bool,
    baseline: Option<f64>,
    name: &str,
) -> Result<(), EngineError> {
    for k in 0..node.selections.len() {
        let sel = &node.selections[k];
        if sel.reward.is_some() {
            continue;
        }
        let s = &shocks[sel.episode];
        let end = s.at + s.recovery_window;
        if !(all || t > end + EPS) {
            continue;
        }
        let idx: Vec<usize> = (0..node.times.len())
            .filter(|&i| node.times[i] >= s.at - EPS && node.times[i] <= end + EPS)
            .collect();
        let ts: Vec<f64> = idx.iter().map(|&i| node.times[i]).collect();
        let vs: Vec<f64> = idx.iter().map(|&i| node.abs_deltas[i]).collect();
        let cost = trapezoid(&ts, &vs);
        let r = if sel.failed {
            0.0
        } else {
            reward(cost, baseline.unwrap_or(0.0))
        };
        let id = node.controller.config.catalog[sel.strategy].id.clone();
        let (regime, episode) = (sel.regime.clone(), sel.episode);
        node.controller
            .learn(&regime, episode, &id, r)
            .map_err(|source| EngineError::Controller {
                node: name.to_string(),
                source,
            })?;
        node.selections[k].reward = Some(r);
    }
    Ok(())
}
