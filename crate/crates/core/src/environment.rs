//! The evolving vector of raw facts and environmental conditions.
//!
//! Figures evolve under one [`DriftProcess`] each and can be hit by
//! scheduled [`ShockEvent`]s. The regime label (calm or turbulent) is a
//! cheap windowed statistic over recent history.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Calm,
    Turbulent,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Calm => "calm",
            Regime::Turbulent => "turbulent",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("expected one drift process per figure ({expected}), got {got}")]
    ProcessCount { expected: usize, got: usize },
    #[error("figure index {index} out of range for {len} figures")]
    FigureOutOfRange { index: usize, len: usize },
    #[error("invalid drift process for figure {figure}: {reason}")]
    InvalidProcess { figure: usize, reason: String },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
}

/// One snapshot of the environment vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub time: f64,
    pub figures: Vec<f64>,
    pub regime: Regime,
    /// Active sub-process of each regime-switching figure (calm for the others).
    pub phases: Vec<Regime>,
}

impl EnvState {
    pub fn new(figures: Vec<f64>) -> Self {
        let n = figures.len();
        Self {
            time: 0.0,
            figures,
            regime: Regime::Calm,
            phases: vec![Regime::Calm; n],
        }
    }

    pub fn len(&self) -> usize {
        self.figures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.figures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftKind {
    Constant,
    Linear {
        rate: f64,
    },
    RandomWalk {
        step_std: f64,
    },
    RegimeSwitching {
        calm: Box<DriftKind>,
        turbulent: Box<DriftKind>,
        hazard: f64,
    },
}

impl DriftKind {
    /// Checks the parameter invariants; nested switching is not allowed.
    pub fn check(&self) -> Result<(), String> {
        match self {
            DriftKind::Constant => Ok(()),
            DriftKind::Linear { rate } if !rate.is_finite() => Err("rate must be finite".into()),
            DriftKind::Linear { .. } => Ok(()),
            DriftKind::RandomWalk { step_std } if !(*step_std >= 0.0 && step_std.is_finite()) => {
                Err("step_std must be finite and >= 0".into())
            }
            DriftKind::RandomWalk { .. } => Ok(()),
            DriftKind::RegimeSwitching {
                calm,
                turbulent,
                hazard,
            } => {
                if !(0.0..=1.0).contains(hazard) {
                    return Err("hazard must lie in [0, 1]".into());
                }
                for sub in [calm, turbulent] {
                    if matches!(**sub, DriftKind::RegimeSwitching { .. }) {
                        return Err("regime-switching processes cannot nest".into());
                    }
                    sub.check()?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftProcess {
    pub figure: usize,
    pub kind: DriftKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShockEvent {
    pub at: f64,
    pub figure: usize,
    pub magnitude: f64,
    pub recovery_window: f64,
}

fn advance(kind: &DriftKind, value: f64, dt: f64, rng: &mut Stream) -> f64 {
    match kind {
        DriftKind::Constant => value,
        DriftKind::Linear { rate } => value + rate * dt,
        DriftKind::RandomWalk { step_std } => {
            if *step_std == 0.0 {
                value
            } else {
                let z: f64 = rng.sample(StandardNormal);
                value + step_std * dt.sqrt() * z
            }
        }
        // Nested switching is rejected by `check`.
        DriftKind::RegimeSwitching { .. } => value,
    }
}

/// Advances every figure by `dt` under its process.
///
/// `streams` holds one random stream per figure so draws never leak between
/// figures.
pub fn step_environment(
    state: &EnvState,
    processes: &[DriftProcess],
    dt: f64,
    streams: &mut [Stream],
) -> Result<EnvState, EnvError> {
    let n = state.figures.len();
    if !(dt > 0.0) {
        return Err(EnvError::NonPositiveStep(dt));
    }
    if processes.len() != n || streams.len() != n {
        return Err(EnvError::ProcessCount {
            expected: n,
            got: processes.len().min(streams.len()),
        });
    }
    let mut next = state.clone();
    next.time = state.time + dt;
    let mut seen = vec![false; n];
    for process in processes {
        let i = process.figure;
        if i >= n {
            return Err(EnvError::FigureOutOfRange { index: i, len: n });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(EnvError::InvalidProcess {
                figure: i,
                reason: "more than one process drives this figure".into(),
            });
        }
        process
            .kind
            .check()
            .map_err(|reason| EnvError::InvalidProcess { figure: i, reason })?;
        let rng = &mut streams[i];
        next.figures[i] = match &process.kind {
            DriftKind::RegimeSwitching {
                calm,
                turbulent,
                hazard,
            } => {
                let active = match state.phases[i] {
                    Regime::Calm => calm,
                    Regime::Turbulent => turbulent,
                };
                let value = advance(active, state.figures[i], dt, rng);
                let flip: f64 = rng.random();
                if flip < hazard * dt {
                    next.phases[i] = match state.phases[i] {
                        Regime::Calm => Regime::Turbulent,
                        Regime::Turbulent => Regime::Calm,
                    };
                }
                value
            }
            other => advance(other, state.figures[i], dt, rng),
        };
    }
    Ok(next)
}

/// Adds the shock's magnitude to its figure.
pub fn apply_shock(state: &EnvState, shock: &ShockEvent) -> Result<EnvState, EnvError> {
    if shock.figure >= state.figures.len() {
        return Err(EnvError::FigureOutOfRange {
            index: shock.figure,
            len: state.figures.len(),
        });
    }
    let mut next = state.clone();
    next.figures[shock.figure] += shock.magnitude;
    Ok(next)
}

/// Mean absolute increment of a series; zero when it has fewer than two points.
pub fn mean_abs_increment(series: &[f64]) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let total: f64 = series.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    total / (series.len() - 1) as f64
}

/// Turbulent iff any figure's windowed mean absolute increment exceeds
/// `threshold`.
pub fn label_regime(history: &[EnvState], threshold: f64) -> Regime {
    debug_assert!(!history.is_empty());
    let n = history.first().map_or(0, EnvState::len);
    let turbulent = (0..n).any(|i| {
        let series: Vec<f64> = history.iter().map(|s| s.figures[i]).collect();
        mean_abs_increment(&series) > threshold
    });
    if turbulent {
        Regime::Turbulent
    } else {
        Regime::Calm
    }
}

/// Sliding window used by the engine to label regimes without keeping the
/// whole run in memory.
#[derive(Debug, Clone)]
pub struct RegimeWindow {
    capacity: usize,
    threshold: f64,
    series: Vec<VecDeque<f64>>,
}

impl RegimeWindow {
    /// `window` counts increments, so `window + 1` samples are retained.
    pub fn new(figures: usize, window: usize, threshold: f64) -> Self {
        Self {
            capacity: window.max(1) + 1,
            threshold,
            series: vec![VecDeque::new(); figures],
        }
    }

    pub fn push(&mut self, state: &EnvState) -> Regime {
        for (buf, &x) in self.series.iter_mut().zip(&state.figures) {
            if buf.len() == self.capacity {
                buf.pop_front();
            }
            buf.push_back(x);
        }
        let turbulent = self.series.iter().any(|buf| {
            let (a, b) = buf.as_slices();
            let joined: Vec<f64> = a.iter().chain(b).copied().collect();
            mean_abs_increment(&joined) > self.threshold
        });
        if turbulent {
            Regime::Turbulent
        } else {
            Regime::Calm
        }
    }
}
