//! Scenario document: the schema read from TOML or JSON, its defaults, and
//! validation that reports every problem with its key path.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::BehaviorClass;
use crate::collective::{SocialBehavior, SocialConfig};
use crate::controller::ControllerConfig;
use crate::environment::{DriftKind, ShockEvent};
use crate::identity::{DetectorConfig, IdentityClass};
use crate::reflection::ReflectiveMap;

pub const SCHEMA_VERSION: u32 = 1;
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub engine: EngineConfig,
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub collective: CollectiveConfig,
    #[serde(default)]
    pub nodes: Vec<NodeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Simulated seconds.
    pub duration: f64,
    pub dt: f64,
    pub seed: u64,
    /// Consecutive Holding ticks that count as restored.
    pub restoration_ticks: usize,
    /// Dead band of the antifragility verdict, per episode.
    pub antifragility_tolerance: f64,
    /// Fixed reward baseline; when absent a calibration pre-run measures it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_baseline: Option<f64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            duration: 100.0,
            dt: 0.1,
            seed: 0,
            restoration_ticks: 5,
            antifragility_tolerance: 0.02,
            reward_baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub figures: Vec<FigureConfig>,
    #[serde(default)]
    pub shocks: Vec<ShockEvent>,
    #[serde(default = "default_regime_window")]
    pub regime_window: usize,
    #[serde(default = "default_regime_threshold")]
    pub turbulence_threshold: f64,
}

fn default_regime_window() -> usize {
    20
}

fn default_regime_threshold() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FigureConfig {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub initial: f64,
    #[serde(default = "constant")]
    pub drift: DriftKind,
}

fn constant() -> DriftKind {
    DriftKind::Constant
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectiveConfig {
    /// Shared correction budget per tick.
    pub budget: f64,
    pub join_share: f64,
    /// Ticks of uninterrupted Holding before a Neutral member leaves.
    pub calm_window: usize,
    pub assist_quantum: f64,
    pub reciprocity_weight: f64,
    pub assist_below: f64,
    /// Number of (behavior, social) combinations the diversity score is
    /// normalized by; absent means the count of distinct combinations present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant_space: Option<usize>,
}

impl Default for CollectiveConfig {
    fn default() -> Self {
        let social = SocialConfig::default();
        CollectiveConfig {
            budget: 0.0,
            join_share: 0.0,
            calm_window: social.calm_window,
            assist_quantum: social.assist_quantum,
            reciprocity_weight: social.reciprocity_weight,
            assist_below: social.assist_below,
            variant_space: None,
        }
    }
}

impl CollectiveConfig {
    pub fn social(&self) -> SocialConfig {
        SocialConfig {
            calm_window: self.calm_window,
            assist_quantum: self.assist_quantum,
            reciprocity_weight: self.reciprocity_weight,
            assist_below: self.assist_below,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub figure: usize,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub quantization: f64,
    /// Seconds between samples; defaults to the engine tick.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_period: Option<f64>,
    #[serde(default)]
    pub latency: f64,
    /// Gain a perfect channel would have; defaults to `gain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_bias: Option<f64>,
    /// Figure whose value leaks into the channel bias.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<usize>,
    #[serde(default = "one")]
    pub coupling: f64,
}

fn one() -> f64 {
    1.0
}

impl ChannelConfig {
    pub fn nominal(&self) -> (f64, f64) {
        (self.nominal_gain.unwrap_or(self.gain), self.nominal_bias.unwrap_or(self.bias))
    }

    /// The configured reflective map; `dt` fills a missing sampling period.
    pub fn map(&self, dt: f64) -> ReflectiveMap {
        ReflectiveMap {
            figure: self.figure,
            gain: self.gain,
            bias: self.bias,
            noise_std: self.noise_std,
            quantization: self.quantization,
            sampling_period: self.sampling_period.unwrap_or(dt),
            latency: self.latency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    /// Replicas of this node; replicas are named `name-0`, `name-1`, ...
    #[serde(default = "one_node")]
    pub count: usize,
    pub channel: ChannelConfig,
    #[serde(default = "passive")]
    pub behavior: BehaviorClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub social: Option<SocialBehavior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contract: Option<IdentityClass>,
    #[serde(default = "default_guard_window")]
    pub guard_window: usize,
    /// Per-tick correction capacity before any pool allocation; absent means
    /// unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_capacity: Option<f64>,
    /// Extra figures fed to predictive behaviors as regressors.
    #[serde(default)]
    pub context: Vec<usize>,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
}

fn one_node() -> usize {
    1
}

fn passive() -> BehaviorClass {
    BehaviorClass::Passive
}

fn default_guard_window() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{} validation error(s):\n{}", .0.len(), .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Issue>),
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// JSON when the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            Self::from_json(text)
        } else {
            Self::from_toml(text)
        }
    }

    /// Parses and validates.
    pub fn load(text: &str) -> Result<Self, ConfigError> {
        let s = Self::parse(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes to toml")
    }

    /// Tick count, `duration / dt` rounded.
    pub fn ticks(&self) -> usize {
        if self.engine.dt > 0.0 {
            (self.engine.duration / self.engine.dt).round() as usize
        } else {
            0
        }
    }

    /// The scenario with every optional default written out.
    pub fn effective(&self) -> Scenario {
        let mut s = self.clone();
        for node in &mut s.nodes {
            let (g, b) = node.channel.nominal();
            node.channel.nominal_gain = Some(g);
            node.channel.nominal_bias = Some(b);
            node.channel.sampling_period = Some(node.channel.sampling_period.unwrap_or(self.engine.dt));
            node.detector.reference = Some(node.detector.reference.unwrap_or_else(|| {
                node.contract.and_then(|c| c.threshold()).map_or(0.0, |t| t / 2.0)
            }));
        }
        if s.collective.variant_space.is_none() {
            s.collective.variant_space = Some(self.present_variants());
        }
        s
    }

    /// Distinct (behavior, social) combinations among expanded nodes.
    pub fn present_variants(&self) -> usize {
        let set: std::collections::BTreeSet<_> = self
            .nodes
            .iter()
            .filter(|n| n.count > 0)
            .map(|n| (n.behavior.kind(), n.social))
            .collect();
        set.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    /// Every problem in the document.
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        let mut push = |path: String, message: String| out.push(Issue { path, message });
        if self.schema_version != SCHEMA_VERSION {
            push(
                "schema_version".into(),
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            );
        }

        let e = &self.engine;
        if !(e.dt > 0.0 && e.dt.is_finite()) {
            push("engine.dt".into(), format!("must be > 0, got {}", e.dt));
        }
        if !(e.duration >= 0.0 && e.duration.is_finite()) {
            push("engine.duration".into(), format!("must be >= 0, got {}", e.duration));
        } else if e.dt > 0.0 {
            let ratio = e.duration / e.dt;
            if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
                push(
                    "engine.duration".into(),
                    format!("{} is not a whole number of ticks of {}", e.duration, e.dt),
                );
            }
        }
        if e.restoration_ticks == 0 {
            push("engine.restoration_ticks".into(), "must be >= 1".into());
        }
        if !(e.antifragility_tolerance >= 0.0) {
            push("engine.antifragility_tolerance".into(), "must be >= 0".into());
        }
        if let Some(b) = e.reward_baseline {
            if !(b > 0.0 && b.is_finite()) {
                push("engine.reward_baseline".into(), format!("must be > 0, got {b}"));
            }
        }

        let env = &self.environment;
        let n = env.figures.len();
        if n == 0 {
            push("environment.figures".into(), "at least one figure is required".into());
        }
        for (i, f) in env.figures.iter().enumerate() {
            if !f.initial.is_finite() {
                push(format!("environment.figures[{i}].initial"), "must be finite".into());
            }
            if let Err(m) = f.drift.check() {
                push(format!("environment.figures[{i}].drift"), m);
            }
        }
        if env.regime_window == 0 {
            push("environment.regime_window".into(), "must be >= 1".into());
        }
        if !(env.turbulence_threshold > 0.0) {
            push("environment.turbulence_threshold".into(), "must be > 0".into());
        }
        for (i, s) in env.shocks.iter().enumerate() {
            let p = format!("environment.shocks[{i}]");
            if s.figure >= n {
                push(format!("{p}.figure"), format!("index {} out of range for {n} figures", s.figure));
            }
            if !(s.recovery_window > 0.0 && s.recovery_window.is_finite()) {
                push(format!("{p}.recovery_window"), format!("must be > 0, got {}", s.recovery_window));
            }
            if !s.magnitude.is_finite() {
                push(format!("{p}.magnitude"), "must be finite".into());
            }
            if !(s.at >= 0.0) {
                push(format!("{p}.at"), format!("must be >= 0, got {}", s.at));
            } else if s.at + s.recovery_window > e.duration + EPS {
                push(
                    format!("{p}.recovery_window"),
                    format!("window ends at {} after the run ends at {}", s.at + s.recovery_window, e.duration),
                );
            }
            if i > 0 {
                let prev = &env.shocks[i - 1];
                if !(s.at >= prev.at) {
                    push(format!("{p}.at"), "shock times must not decrease".into());
                }
            }
            // Windows of shocks on the same figure must not overlap.
            if let Some((j, prev)) = env.shocks[..i]
                .iter()
                .enumerate()
                .rev()
                .find(|(_, q)| q.figure == s.figure)
            {
                if s.at < prev.at + prev.recovery_window - EPS {
                    push(
                        format!("{p}.at"),
                        format!("recovery window overlaps shocks[{j}] on figure {}", s.figure),
                    );
                }
            }
        }

        let c = &self.collective;
        if !(c.budget >= 0.0 && c.budget.is_finite()) {
            push("collective.budget".into(), "must be >= 0".into());
        }
        if !(c.join_share >= 0.0 && c.join_share.is_finite()) {
            push("collective.join_share".into(), "must be >= 0".into());
        }
        if !(c.assist_quantum > 0.0) {
            push("collective.assist_quantum".into(), "must be > 0".into());
        }
        if !(c.reciprocity_weight >= 1.0) {
            push("collective.reciprocity_weight".into(), "must be >= 1".into());
        }
        if let Some(v) = c.variant_space {
            if v < self.present_variants() {
                push(
                    "collective.variant_space".into(),
                    format!("{v} is smaller than the {} combinations present", self.present_variants()),
                );
            }
        }

        let mut names = std::collections::BTreeSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let p = format!("nodes[{i}]");
            if node.name.is_empty() {
                push(format!("{p}.name"), "must not be empty".into());
            } else if !names.insert(node.name.as_str()) {
                push(format!("{p}.name"), format!("duplicate node name {:?}", node.name));
            }
            let ch = &node.channel;
            let map = ch.map(e.dt);
            if ch.figure >= n {
                push(format!("{p}.channel.figure"), format!("index {} out of range", ch.figure));
            }
            for (field, msg) in map.problems() {
                push(format!("{p}.channel.{field}"), msg);
            }
            if let Some(d) = ch.disturbance {
                if d >= n {
                    push(format!("{p}.channel.disturbance"), format!("index {d} out of range"));
                }
            }
            if let (Some(g), Some(b)) = (ch.nominal_gain, ch.nominal_bias) {
                if !(g.is_finite() && b.is_finite()) {
                    push(format!("{p}.channel.nominal_gain"), "nominal gain and bias must be finite".into());
                }
            }
            if !ch.coupling.is_finite() {
                push(format!("{p}.channel.coupling"), "must be finite".into());
            }
            if let Err(err) = node.behavior.check(node.context.len() + 1) {
                push(format!("{p}.behavior"), err.to_string());
            }
            for (j, &f) in node.context.iter().enumerate() {
                if f >= n {
                    push(format!("{p}.context[{j}]"), format!("index {f} out of range"));
                }
            }
            if let Some(contract) = &node.contract {
                if let Err(err) = contract.check() {
                    push(format!("{p}.contract"), err.to_string());
                }
            }
            if node.guard_window == 0 {
                push(format!("{p}.guard_window"), "must be >= 1".into());
            }
            if let Some(cap) = node.base_capacity {
                if !(cap >= 0.0 && cap.is_finite()) {
                    push(format!("{p}.base_capacity"), "must be >= 0".into());
                }
            }
            let d = &node.detector;
            if !(d.slack >= 0.0) {
                push(format!("{p}.detector.slack"), "must be >= 0".into());
            }
            if !(d.threshold > 0.0) {
                push(format!("{p}.detector.threshold"), "must be > 0".into());
            }
            if d.window == 0 {
                push(format!("{p}.detector.window"), "must be >= 1".into());
            }
            for (field, msg) in node.controller.problems() {
                push(format!("{p}.controller.{field}"), msg);
            }
            for (j, s) in node.controller.catalog.iter().enumerate() {
                let sp = format!("{p}.controller.catalog[{j}]");
                match &s.action {
                    crate::controller::StrategyAction::Reconfigure { behavior, channel } => {
                        if let Some(b) = behavior {
                            if let Err(err) = b.check(node.context.len() + 1) {
                                push(format!("{sp}.behavior"), err.to_string());
                            }
                        }
                        for (field, msg) in channel.apply(&map).problems() {
                            push(format!("{sp}.channel.{field}"), msg);
                        }
                    }
                    crate::controller::StrategyAction::Social(action) => {
                        if let crate::collective::SocialAction::Assist { target, .. } = action {
                            if *target >= self.expanded_len() {
                                push(format!("{sp}.action.target"), format!("node index {target} out of range"));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Number of nodes after replication.
    pub fn expanded_len(&self) -> usize {
        self.nodes.iter().map(|n| n.count).sum()
    }

    /// Nodes after replication, with their run-time names.
    pub fn expanded(&self) -> Vec<(String, &NodeConfig)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if node.count == 1 {
                out.push((node.name.clone(), node));
            } else {
                for i in 0..node.count {
                    out.push((format!("{}-{i}", node.name), node));
                }
            }
        }
        out
    }
}
