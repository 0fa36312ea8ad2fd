//! Identity classes of Δ traces, contract self-checks and drift detection.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reflection::{DeltaSample, DeltaTrace};

/// Required fraction of samples within the best-effort bound.
pub const BEST_EFFORT_QUANTILE: (usize, usize) = (95, 100);
/// Default utilization above which a holding contract is reported at risk.
pub const DEFAULT_AT_RISK: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", deny_unknown_fields)]
pub enum IdentityClass {
    #[serde(rename = "HardRT")]
    HardRt { t: f64 },
    #[serde(rename = "SoftRT")]
    SoftRt { t: f64, sigma: f64 },
    #[serde(rename = "BestEffort")]
    BestEffort { b: f64 },
    #[serde(rename = "NonRT")]
    NonRt,
}

impl IdentityClass {
    pub fn name(&self) -> &'static str {
        match self {
            IdentityClass::HardRt { .. } => "HardRT",
            IdentityClass::SoftRt { .. } => "SoftRT",
            IdentityClass::BestEffort { .. } => "BestEffort",
            IdentityClass::NonRt => "NonRT",
        }
    }

    /// Position in the preference order; higher is stronger.
    pub fn strength(&self) -> u8 {
        match self {
            IdentityClass::HardRt { .. } => 3,
            IdentityClass::SoftRt { .. } => 2,
            IdentityClass::BestEffort { .. } => 1,
            IdentityClass::NonRt => 0,
        }
    }

    /// The primary threshold (`t` or `b`).
    pub fn threshold(&self) -> Option<f64> {
        match *self {
            IdentityClass::HardRt { t } | IdentityClass::SoftRt { t, .. } => Some(t),
            IdentityClass::BestEffort { b } => Some(b),
            IdentityClass::NonRt => None,
        }
    }

    pub fn check(&self) -> Result<(), IdentityError> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        let valid = match *self {
            IdentityClass::HardRt { t } => ok(t),
            IdentityClass::SoftRt { t, sigma } => ok(t) && ok(sigma),
            IdentityClass::BestEffort { b } => ok(b),
            IdentityClass::NonRt => true,
        };
        if valid {
            Ok(())
        } else {
            Err(IdentityError::InvalidThreshold(*self))
        }
    }
}

impl fmt::Display for IdentityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdentityClass::HardRt { t } => write!(f, "HardRT({t})"),
            IdentityClass::SoftRt { t, sigma } => write!(f, "SoftRT({t},{sigma})"),
            IdentityClass::BestEffort { b } => write!(f, "BestEffort({b})"),
            IdentityClass::NonRt => f.write_str("NonRT"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdentityError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("NonRT carries no contract to check")]
    ContractFree,
    #[error("thresholds must be positive and finite: {0}")]
    InvalidThreshold(IdentityClass),
}

/// Thresholds of the classes a trace may be tested against. Absent entries
/// are skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    pub hard: Option<f64>,
    pub soft: Option<(f64, f64)>,
    pub best_effort: Option<f64>,
}

impl Candidates {
    /// A contract together with the best-effort class at the same threshold,
    /// so that a broken contract degrades instead of dropping straight to
    /// NonRT.
    pub fn for_contract(contract: &IdentityClass) -> Self {
        match *contract {
            IdentityClass::HardRt { t } => Candidates {
                hard: Some(t),
                best_effort: Some(t),
                ..Default::default()
            },
            IdentityClass::SoftRt { t, sigma } => Candidates {
                soft: Some((t, sigma)),
                best_effort: Some(t),
                ..Default::default()
            },
            IdentityClass::BestEffort { b } => Candidates {
                best_effort: Some(b),
                ..Default::default()
            },
            IdentityClass::NonRt => Candidates::default(),
        }
    }
}

/// Statistics of |Δ| over a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub count: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Population standard deviation of |Δ|.
    pub std_abs: f64,
}

impl WindowStats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let abs: Vec<f64> = values.into_iter().map(f64::abs).collect();
        let count = abs.len();
        if count == 0 {
            return WindowStats {
                count,
                max_abs: 0.0,
                mean_abs: 0.0,
                std_abs: 0.0,
            };
        }
        let n = count as f64;
        let max_abs = abs.iter().copied().fold(0.0, f64::max);
        let mean_abs = abs.iter().sum::<f64>() / n;
        let var = abs.iter().map(|x| (x - mean_abs).powi(2)).sum::<f64>() / n;
        WindowStats {
            count,
            max_abs,
            mean_abs,
            std_abs: var.sqrt(),
        }
    }
}

/// Number of samples within `b`.
fn count_within(values: &[f64], b: f64) -> usize {
    values.iter().filter(|x| x.abs() <= b).count()
}

fn best_effort_holds(values: &[f64], b: f64) -> bool {
    let (num, den) = BEST_EFFORT_QUANTILE;
    count_within(values, b) * den >= num * values.len()
}

/// Smallest |Δ| bound that the best-effort fraction would accept.
fn best_effort_quantile(values: &[f64]) -> f64 {
    let (num, den) = BEST_EFFORT_QUANTILE;
    let mut abs: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let k = (num * abs.len()).div_ceil(den).max(1);
    abs[k - 1]
}

fn holds(class: &IdentityClass, values: &[f64], stats: &WindowStats) -> bool {
    match *class {
        IdentityClass::HardRt { t } => stats.max_abs <= t,
        IdentityClass::SoftRt { t, sigma } => stats.mean_abs <= t && stats.std_abs <= sigma,
        IdentityClass::BestEffort { b } => best_effort_holds(values, b),
        IdentityClass::NonRt => true,
    }
}

/// Strongest class among `candidates` that the last `window` samples satisfy.
pub fn classify_trace(
    trace: &DeltaTrace,
    candidates: &Candidates,
    window: usize,
) -> Result<IdentityClass, IdentityError> {
    if trace.is_empty() {
        return Err(IdentityError::InsufficientData("empty trace".into()));
    }
    if window == 0 || window > trace.len() {
        return Err(IdentityError::InsufficientData(format!(
            "window {window} does not fit a trace of {} samples",
            trace.len()
        )));
    }
    let values: Vec<f64> = trace.samples[trace.len() - window..].iter().map(|s| s.delta).collect();
    classify_values(&values, candidates)
}

/// Classification of a bare window of Δ values.
pub fn classify_values(values: &[f64], candidates: &Candidates) -> Result<IdentityClass, IdentityError> {
    if values.is_empty() {
        return Err(IdentityError::InsufficientData("empty window".into()));
    }
    let stats = WindowStats::of(values.iter().copied());
    let ordered = [
        candidates.hard.map(|t| IdentityClass::HardRt { t }),
        candidates.soft.map(|(t, sigma)| IdentityClass::SoftRt { t, sigma }),
        candidates.best_effort.map(|b| IdentityClass::BestEffort { b }),
    ];
    for class in ordered.into_iter().flatten() {
        class.check()?;
        if holds(&class, values, &stats) {
            return Ok(class);
        }
    }
    Ok(IdentityClass::NonRt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContractStatus {
    Holding,
    AtRisk,
    Violated,
}

impl ContractStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ContractStatus::Holding => "Holding",
            ContractStatus::AtRisk => "AtRisk",
            ContractStatus::Violated => "Violated",
        }
    }

    pub fn is_holding(self) -> bool {
        self == ContractStatus::Holding
    }
}

/// Result of a contract self-check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractCheck {
    pub status: ContractStatus,
    /// Ratio of the observed statistic to its bound; `> 1` means violated.
    pub utilization: f64,
}

/// How close a window is to breaking `contract`, as a ratio to its bound.
pub fn utilization(values: &[f64], contract: &IdentityClass) -> Result<f64, IdentityError> {
    let stats = WindowStats::of(values.iter().copied());
    Ok(match *contract {
        IdentityClass::HardRt { t } => stats.max_abs / t,
        IdentityClass::SoftRt { t, sigma } => (stats.mean_abs / t).max(stats.std_abs / sigma),
        IdentityClass::BestEffort { b } => best_effort_quantile(values) / b,
        IdentityClass::NonRt => return Err(IdentityError::ContractFree),
    })
}

/// Self-check of a window against its contract with the default at-risk ratio.
pub fn check_contract(values: &[f64], contract: &IdentityClass) -> Result<ContractCheck, IdentityError> {
    check_contract_with(values, contract, DEFAULT_AT_RISK)
}

pub fn check_contract_with(
    values: &[f64],
    contract: &IdentityClass,
    at_risk: f64,
) -> Result<ContractCheck, IdentityError> {
    if matches!(contract, IdentityClass::NonRt) {
        return Err(IdentityError::ContractFree);
    }
    contract.check()?;
    if values.is_empty() {
        return Err(IdentityError::InsufficientData("empty window".into()));
    }
    let stats = WindowStats::of(values.iter().copied());
    let u = utilization(values, contract)?;
    let status = if !holds(contract, values, &stats) {
        ContractStatus::Violated
    } else if u > at_risk {
        ContractStatus::AtRisk
    } else {
        ContractStatus::Holding
    };
    Ok(ContractCheck { status, utilization: u })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// In-control level of Δ subtracted before accumulating. `None` means half
    /// the contract threshold.
    pub reference: Option<f64>,
    pub slack: f64,
    pub threshold: f64,
    /// Samples used by the contract check on the immediate-violation path.
    pub window: usize,
    /// Samples summarized in an emitted event.
    pub summary_window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            reference: None,
            slack: 0.01,
            threshold: 0.5,
            window: 1,
            summary_window: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityFailureEvent {
    pub time: f64,
    pub figure: usize,
    pub previous: IdentityClass,
    pub max_abs: f64,
    pub window_mean: f64,
    pub window_std: f64,
}

/// Streaming identity-failure detector: a two-sided CUSUM on Δ around the
/// reference band, raced against the contract check.
#[derive(Debug, Clone)]
pub struct FailureDetector {
    contract: IdentityClass,
    config: DetectorConfig,
    reference: f64,
    upper: f64,
    lower: f64,
    armed: bool,
    recent: VecDeque<f64>,
    check_buf: VecDeque<f64>,
    last_time: Option<f64>,
}

impl FailureDetector {
    pub fn new(contract: IdentityClass, config: DetectorConfig) -> Result<Self, IdentityError> {
        let t = contract.threshold().ok_or(IdentityError::ContractFree)?;
        contract.check()?;
        Ok(Self {
            contract,
            config,
            reference: config.reference.unwrap_or(t / 2.0),
            upper: 0.0,
            lower: 0.0,
            armed: true,
            recent: VecDeque::with_capacity(config.summary_window.max(1)),
            check_buf: VecDeque::with_capacity(config.window.max(1)),
            last_time: None,
        })
    }

    pub fn statistics(&self) -> (f64, f64) {
        (self.upper, self.lower)
    }

    pub fn is_armed(&self) -> bool {
        self.armed
    }

    /// Feeds one sample; returns an event at most once per excursion.
    pub fn observe(&mut self, sample: &DeltaSample) -> Option<IdentityFailureEvent> {
        debug_assert!(self.last_time.is_none_or(|t| sample.time > t));
        self.last_time = Some(sample.time);
        let keep = |buf: &mut VecDeque<f64>, cap: usize, x: f64| {
            if buf.len() == cap.max(1) {
                buf.pop_front();
            }
            buf.push_back(x);
        };
        keep(&mut self.recent, self.config.summary_window, sample.delta);
        keep(&mut self.check_buf, self.config.window, sample.delta);

        let x = sample.delta;
        let k = self.config.slack;
        self.upper = (self.upper + (x - self.reference) - k).max(0.0);
        self.lower = (self.lower + (-x - self.reference) - k).max(0.0);

        let window: Vec<f64> = self.check_buf.iter().copied().collect();
        let status = check_contract(&window, &self.contract)
            .map(|c| c.status)
            .unwrap_or(ContractStatus::Holding);

        if !self.armed {
            if status.is_holding() {
                self.armed = true;
                self.upper = 0.0;
                self.lower = 0.0;
            }
            return None;
        }
        let crossed = self.upper > self.config.threshold || self.lower > self.config.threshold;
        if crossed || status == ContractStatus::Violated {
            self.armed = false;
            self.upper = 0.0;
            self.lower = 0.0;
            let stats = WindowStats::of(self.recent.iter().copied());
            return Some(IdentityFailureEvent {
                time: sample.time,
                figure: sample.figure,
                previous: self.contract,
                max_abs: stats.max_abs,
                window_mean: stats.mean_abs,
                window_std: stats.std_abs,
            });
        }
        None
    }
}

/// Runs a fresh detector over a stream and returns the first event.
pub fn detect_identity_failure<'a>(
    stream: impl IntoIterator<Item = &'a DeltaSample>,
    contract: &IdentityClass,
    config: &DetectorConfig,
) -> Result<Option<IdentityFailureEvent>, IdentityError> {
    let mut detector = FailureDetector::new(*contract, *config)?;
    Ok(stream.into_iter().find_map(|s| detector.observe(s)))
}
