//! Auto-resilience loop for one node: monitor Δ, assess safety, switch
//! between elastic and resilient operation, pick a strategy per shock
//! episode and learn from how well it worked.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::BehaviorClass;
use crate::collective::SocialAction;
use crate::identity::ContractStatus;
use crate::reflection::{DeltaSample, ReflectiveMap};
use crate::rng::Stream;

pub const LEARNING_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("sample at t={got} arrived after t={last}")]
    Sequence { last: f64, got: f64 },
    #[error("strategy catalog is empty")]
    EmptyCatalog,
    #[error("unknown strategy id {0:?}")]
    UnknownStrategy(String),
    #[error("duplicate strategy id {0:?}")]
    DuplicateStrategy(String),
    #[error("learning state version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("learning state does not match catalog: {0}")]
    Mismatch(String),
    #[error("learning state json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Elastic,
    Resilient,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Elastic => "Elastic",
            Mode::Resilient => "Resilient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Safety {
    Safe,
    Unsafe,
}

/// EWMA and EW variance of |Δ|, plus the EWMA values over the trend horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Monitor {
    pub alpha: f64,
    pub ewma: f64,
    pub variance: f64,
    last_time: Option<f64>,
    recent: VecDeque<f64>,
    horizon: usize,
}

impl Monitor {
    pub fn new(alpha: f64, horizon: usize) -> Self {
        let horizon = horizon.max(1);
        Monitor {
            alpha,
            ewma: 0.0,
            variance: 0.0,
            last_time: None,
            recent: VecDeque::with_capacity(horizon + 1),
            horizon,
        }
    }

    pub fn step(&mut self, sample: &DeltaSample) -> Result<(), ControllerError> {
        if let Some(last) = self.last_time {
            if !(sample.time > last) {
                return Err(ControllerError::Sequence { last, got: sample.time });
            }
        }
        self.last_time = Some(sample.time);
        let x = sample.delta.abs();
        let diff = x - self.ewma;
        let incr = self.alpha * diff;
        self.ewma += incr;
        self.variance = (1.0 - self.alpha) * (self.variance + diff * incr);
        if self.recent.len() == self.horizon + 1 {
            self.recent.pop_front();
        }
        self.recent.push_back(self.ewma);
        Ok(())
    }

    /// Current EWMA extrapolated one horizon ahead along its recent change.
    pub fn trend(&self) -> f64 {
        match (self.recent.front(), self.recent.back()) {
            (Some(old), Some(now)) => now + (now - old),
            _ => self.ewma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyPredicate {
    pub turbulence_threshold: f64,
    /// Utilization above which a holding contract counts as at risk.
    pub margin_threshold: f64,
    pub horizon: usize,
}

impl Default for SafetyPredicate {
    fn default() -> Self {
        SafetyPredicate {
            turbulence_threshold: 0.1,
            margin_threshold: crate::identity::DEFAULT_AT_RISK,
            horizon: 10,
        }
    }
}

pub fn assess_safety(monitor: &Monitor, predicate: &SafetyPredicate, status: ContractStatus) -> Safety {
    if status != ContractStatus::Holding || monitor.trend() > predicate.turbulence_threshold {
        Safety::Unsafe
    } else {
        Safety::Safe
    }
}

/// Mode state with exit hysteresis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeSwitch {
    pub mode: Mode,
    pub hysteresis: usize,
    safe_streak: usize,
}

impl ModeSwitch {
    pub fn new(hysteresis: usize) -> Self {
        ModeSwitch {
            mode: Mode::Elastic,
            hysteresis,
            safe_streak: 0,
        }
    }

    pub fn step(&mut self, verdict: Safety) -> Mode {
        self.mode = match (self.mode, verdict) {
            (_, Safety::Unsafe) => {
                self.safe_streak = 0;
                Mode::Resilient
            }
            (Mode::Elastic, Safety::Safe) => Mode::Elastic,
            (Mode::Resilient, Safety::Safe) => {
                self.safe_streak += 1;
                if self.safe_streak >= self.hysteresis {
                    self.safe_streak = 0;
                    Mode::Elastic
                } else {
                    Mode::Resilient
                }
            }
        };
        self.mode
    }
}

pub fn switch_mode(state: &mut ModeSwitch, verdict: Safety) -> Mode {
    state.step(verdict)
}

/// Mode timeline as a pure function of the verdict timeline.
pub fn replay_modes(verdicts: &[Safety], hysteresis: usize) -> Vec<Mode> {
    let mut s = ModeSwitch::new(hysteresis);
    verdicts.iter().map(|&v| s.step(v)).collect()
}

/// Replacement channel parameters; absent fields keep the current value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<f64>,
}

impl ChannelPatch {
    pub fn apply(&self, map: &ReflectiveMap) -> ReflectiveMap {
        ReflectiveMap {
            figure: map.figure,
            gain: self.gain.unwrap_or(map.gain),
            bias: self.bias.unwrap_or(map.bias),
            noise_std: self.noise_std.unwrap_or(map.noise_std),
            quantization: self.quantization.unwrap_or(map.quantization),
            sampling_period: self.sampling_period.unwrap_or(map.sampling_period),
            latency: self.latency.unwrap_or(map.latency),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyAction {
    Reconfigure {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        behavior: Option<BehaviorClass>,
        #[serde(default)]
        channel: ChannelPatch,
    },
    Social(SocialAction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub id: String,
    pub action: StrategyAction,
}

pub fn check_catalog(catalog: &[Strategy]) -> Result<(), ControllerError> {
    if catalog.is_empty() {
        return Err(ControllerError::EmptyCatalog);
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in catalog {
        if !seen.insert(s.id.as_str()) {
            return Err(ControllerError::DuplicateStrategy(s.id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum Exploration {
    Ucb1 { c: f64 },
    EpsilonGreedy { epsilon: f64 },
}

impl Default for Exploration {
    fn default() -> Self {
        Exploration::Ucb1 {
            c: std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub strategy_id: String,
    pub pulls: u64,
    pub mean: f64,
    /// 0 is the best arm.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRecord {
    pub episode: usize,
    pub regime: String,
    pub strategy_id: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningState {
    pub version: u32,
    pub exploration: Exploration,
    /// Arms in catalog order, one bandit per regime label.
    pub regimes: BTreeMap<String, Vec<ArmStats>>,
    pub history: Vec<LearningRecord>,
}

impl LearningState {
    pub fn new(exploration: Exploration) -> Self {
        LearningState {
            version: LEARNING_VERSION,
            exploration,
            regimes: BTreeMap::new(),
            history: Vec::new(),
        }
    }

    fn fresh_arms(catalog: &[Strategy]) -> Vec<ArmStats> {
        catalog
            .iter()
            .enumerate()
            .map(|(i, s)| ArmStats {
                strategy_id: s.id.clone(),
                pulls: 0,
                mean: 0.0,
                rank: i,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("learning state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ControllerError> {
        let state: LearningState = serde_json::from_str(text).map_err(|e| ControllerError::Json(e.to_string()))?;
        if state.version != LEARNING_VERSION {
            return Err(ControllerError::Version {
                found: state.version,
                expected: LEARNING_VERSION,
            });
        }
        Ok(state)
    }

    /// Confirms every stored bandit lines up with `catalog`.
    pub fn check_against(&self, catalog: &[Strategy]) -> Result<(), ControllerError> {
        for (regime, arms) in &self.regimes {
            let ids: Vec<&str> = arms.iter().map(|a| a.strategy_id.as_str()).collect();
            let want: Vec<&str> = catalog.iter().map(|s| s.id.as_str()).collect();
            if ids != want {
                return Err(ControllerError::Mismatch(format!(
                    "regime {regime:?} has arms {ids:?}, catalog has {want:?}"
                )));
            }
        }
        Ok(())
    }
}

/// UCB1 score; unpulled arms score infinity.
pub fn ucb_score(mean: f64, pulls: u64, total: u64, c: f64) -> f64 {
    if pulls == 0 {
        return f64::INFINITY;
    }
    mean + c * ((total as f64).ln() / pulls as f64).sqrt()
}

/// Index into `catalog` of the arm to play in `regime`.
pub fn select_strategy(
    learning: &LearningState,
    regime: &str,
    catalog: &[Strategy],
    rng: &mut Stream,
) -> Result<usize, ControllerError> {
    if catalog.is_empty() {
        return Err(ControllerError::EmptyCatalog);
    }
    let Some(arms) = learning.regimes.get(regime) else {
        return Ok(0);
    };
    if arms.len() != catalog.len() {
        return Err(ControllerError::Mismatch(format!(
            "regime {regime:?} has {} arms, catalog has {}",
            arms.len(),
            catalog.len()
        )));
    }
    if let Some(i) = arms.iter().position(|a| a.pulls == 0) {
        return Ok(i);
    }
    match learning.exploration {
        Exploration::Ucb1 { c } => {
            let total: u64 = arms.iter().map(|a| a.pulls).sum();
            Ok(argmax(arms.iter().map(|a| ucb_score(a.mean, a.pulls, total, c))))
        }
        Exploration::EpsilonGreedy { epsilon } => {
            if rng.random::<f64>() < epsilon {
                Ok(rng.random_range(0..catalog.len()))
            } else {
                Ok(argmax(arms.iter().map(|a| a.mean)))
            }
        }
    }
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Reward in [0, 1] from an episode's integrated |Δ|.
pub fn reward(integral: f64, baseline: f64) -> f64 {
    if !(baseline > 0.0) {
        return if integral > 0.0 { 0.0 } else { 1.0 };
    }
    1.0 - (integral / baseline).clamp(0.0, 1.0)
}

/// Credits `reward` to `strategy_id` in `regime`, re-ranks, and appends to
/// the history.
pub fn evaluate_and_learn(
    learning: &mut LearningState,
    catalog: &[Strategy],
    regime: &str,
    episode: usize,
    strategy_id: &str,
    reward: f64,
) -> Result<(), ControllerError> {
    let index = catalog
        .iter()
        .position(|s| s.id == strategy_id)
        .ok_or_else(|| ControllerError::UnknownStrategy(strategy_id.to_string()))?;
    let arms = learning
        .regimes
        .entry(regime.to_string())
        .or_insert_with(|| LearningState::fresh_arms(catalog));
    if arms.len() != catalog.len() {
        return Err(ControllerError::Mismatch(format!("regime {regime:?} arm count")));
    }
    let arm = &mut arms[index];
    arm.pulls += 1;
    arm.mean += (reward - arm.mean) / arm.pulls as f64;
    let mut order: Vec<usize> = (0..arms.len()).collect();
    order.sort_by(|&a, &b| arms[b].mean.total_cmp(&arms[a].mean).then(a.cmp(&b)));
    for (rank, &i) in order.iter().enumerate() {
        arms[i].rank = rank;
    }
    learning.history.push(LearningRecord {
        episode,
        regime: regime.to_string(),
        strategy_id: strategy_id.to_string(),
        reward,
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Smoothing factor of the |Δ| EWMA.
    pub alpha: f64,
    pub safety: SafetyPredicate,
    pub hysteresis: usize,
    pub exploration: Exploration,
    /// When false the first catalog strategy is always enacted and nothing is
    /// learned.
    pub learning: bool,
    pub catalog: Vec<Strategy>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            alpha: 0.1,
            safety: SafetyPredicate::default(),
            hysteresis: 10,
            exploration: Exploration::default(),
            learning: true,
            catalog: Vec::new(),
        }
    }
}

impl ControllerConfig {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            out.push(("alpha", format!("must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.safety.turbulence_threshold > 0.0) {
            out.push(("safety.turbulence_threshold", "must be > 0".into()));
        }
        if !(self.safety.margin_threshold > 0.0) {
            out.push(("safety.margin_threshold", "must be > 0".into()));
        }
        if self.safety.horizon == 0 {
            out.push(("safety.horizon", "must be >= 1".into()));
        }
        match self.exploration {
            Exploration::Ucb1 { c } if !(c >= 0.0 && c.is_finite()) => {
                out.push(("exploration.c", "must be finite and >= 0".into()))
            }
            Exploration::EpsilonGreedy { epsilon } if !(0.0..=1.0).contains(&epsilon) => {
                out.push(("exploration.epsilon", "must lie in [0, 1]".into()))
            }
            _ => {}
        }
        if let Err(e) = check_catalog(&self.catalog) {
            if !self.catalog.is_empty() {
                out.push(("catalog", e.to_string()));
            }
        }
        out
    }
}

/// What the controller decided on one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub safety: Safety,
    pub mode: Mode,
    /// Previous mode, to spot transitions.
    pub previous: Mode,
    /// Catalog index chosen this tick, if any.
    pub selected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub config: ControllerConfig,
    pub monitor: Monitor,
    pub switch: ModeSwitch,
    pub learning: LearningState,
    /// Model-building operations (selection and learning updates).
    pub overhead: u64,
    chosen_for: Option<usize>,
}

impl Controller {
    pub fn new(config: ControllerConfig, learning: Option<LearningState>) -> Result<Self, ControllerError> {
        if !config.catalog.is_empty() {
            check_catalog(&config.catalog)?;
        }
        let learning = match learning {
            Some(l) => {
                l.check_against(&config.catalog)?;
                l
            }
            None => LearningState::new(config.exploration),
        };
        Ok(Controller {
            monitor: Monitor::new(config.alpha, config.safety.horizon),
            switch: ModeSwitch::new(config.hysteresis),
            learning,
            overhead: 0,
            chosen_for: None,
            config,
        })
    }

    pub fn mode(&self) -> Mode {
        self.switch.mode
    }

    /// One pass of monitor, assess, switch and (for an open episode without
    /// a choice yet) select.
    pub fn tick(
        &mut self,
        sample: &DeltaSample,
        status: ContractStatus,
        regime: &str,
        episode: Option<usize>,
        rng: &mut Stream,
    ) -> Result<Decision, ControllerError> {
        self.monitor.step(sample)?;
        let safety = assess_safety(&self.monitor, &self.config.safety, status);
        let previous = self.switch.mode;
        let mode = self.switch.step(safety);
        let mut selected = None;
        if mode == Mode::Resilient && !self.config.catalog.is_empty() {
            if let Some(ep) = episode {
                if self.chosen_for != Some(ep) {
                    self.chosen_for = Some(ep);
                    self.overhead += 1;
                    selected = Some(if self.config.learning {
                        select_strategy(&self.learning, regime, &self.config.catalog, rng)?
                    } else {
                        0
                    });
                }
            }
        }
        Ok(Decision {
            safety,
            mode,
            previous,
            selected,
        })
    }

    /// Credits an episode outcome when learning is on.
    pub fn learn(&mut self, regime: &str, episode: usize, strategy_id: &str, reward: f64) -> Result<(), ControllerError> {
        if !self.config.learning {
            return Ok(());
        }
        self.overhead += 1;
        evaluate_and_learn(&mut self.learning, &self.config.catalog, regime, episode, strategy_id, reward)
    }
}
