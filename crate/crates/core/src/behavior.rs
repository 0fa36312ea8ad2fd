//! Individual behaviors: policies that turn observations of Δ into corrective
//! actions on the node's own reflective channel.
//!
//! All five classes share one actuator vocabulary ([`CorrectiveAction`]) so
//! that they can be compared on the same Δ metric.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reflection::DeltaSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BehaviorClass {
    /// Inert: never acts.
    Passive,
    /// Acts on a fixed schedule of bias adjustments, cycled, blind to Δ.
    ActiveNonPurposeful { schedule: Vec<f64> },
    /// Servo towards a fixed correction setpoint, blind to Δ.
    PurposefulNonTeleological { setpoint: f64 },
    /// Proportional correction on the observed Δ.
    Reactive { gain: f64 },
    /// Least-squares extrapolation of Δ one step ahead.
    PredictiveOrderK { order: usize, history: usize },
}

/// Fieldless tag of a [`BehaviorClass`], used for diversity accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Passive,
    ActiveNonPurposeful,
    PurposefulNonTeleological,
    Reactive,
    PredictiveOrderK,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BehaviorError {
    #[error("reactive gain must lie in (0, 2], got {0}")]
    Gain(f64),
    #[error("predictive order must be >= 1 and history >= order + 1 (order {order}, history {history})")]
    Order { order: usize, history: usize },
    #[error("predictive order {order} needs {order} context variables, only {available} tracked")]
    Context { order: usize, available: usize },
    #[error("non-finite parameter in behavior")]
    NonFinite,
}

impl BehaviorClass {
    pub fn kind(&self) -> BehaviorKind {
        match self {
            BehaviorClass::Passive => BehaviorKind::Passive,
            BehaviorClass::ActiveNonPurposeful { .. } => BehaviorKind::ActiveNonPurposeful,
            BehaviorClass::PurposefulNonTeleological { .. } => BehaviorKind::PurposefulNonTeleological,
            BehaviorClass::Reactive { .. } => BehaviorKind::Reactive,
            BehaviorClass::PredictiveOrderK { .. } => BehaviorKind::PredictiveOrderK,
        }
    }

    /// Checks parameter invariants. `context` is the number of context
    /// variables the node tracks (time counts as the first one).
    pub fn check(&self, context: usize) -> Result<(), BehaviorError> {
        match self {
            BehaviorClass::Reactive { gain } if !(*gain > 0.0 && *gain <= 2.0) => Err(BehaviorError::Gain(*gain)),
            BehaviorClass::PredictiveOrderK { order, history } => {
                if *order == 0 || *history < order + 1 {
                    Err(BehaviorError::Order {
                        order: *order,
                        history: *history,
                    })
                } else if *order > context {
                    Err(BehaviorError::Context {
                        order: *order,
                        available: context,
                    })
                } else {
                    Ok(())
                }
            }
            BehaviorClass::ActiveNonPurposeful { schedule } if schedule.iter().any(|x| !x.is_finite()) => {
                Err(BehaviorError::NonFinite)
            }
            BehaviorClass::PurposefulNonTeleological { setpoint } if !setpoint.is_finite() => {
                Err(BehaviorError::NonFinite)
            }
            _ => Ok(()),
        }
    }

    /// History samples the behavior needs to see.
    pub fn history_len(&self) -> usize {
        match self {
            BehaviorClass::PredictiveOrderK { history, .. } => *history,
            _ => 1,
        }
    }
}

/// Number of context variables a behavior's model consumes.
pub fn behavior_order(behavior: &BehaviorClass) -> usize {
    match behavior {
        BehaviorClass::PredictiveOrderK { order, .. } => *order,
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectiveAction {
    /// Added to the channel's correction offset, in quale units.
    pub bias_adjustment: f64,
    /// Multiplies the channel gain.
    pub gain_multiplier: f64,
    pub resample: Option<f64>,
    /// Set when a predictive behavior lacked history and acted reactively.
    pub fallback: bool,
}

impl CorrectiveAction {
    pub const NONE: CorrectiveAction = CorrectiveAction {
        bias_adjustment: 0.0,
        gain_multiplier: 1.0,
        resample: None,
        fallback: false,
    };

    fn bias(bias_adjustment: f64) -> Self {
        CorrectiveAction {
            bias_adjustment,
            ..Self::NONE
        }
    }

    pub fn is_none(&self) -> bool {
        self.bias_adjustment == 0.0 && self.gain_multiplier == 1.0 && self.resample.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub time: f64,
    /// Observed Δ.
    pub delta: f64,
    /// Correction offset in effect when `delta` was observed.
    pub correction: f64,
    /// Extra context figures, e.g. other raw facts.
    pub context: Vec<f64>,
}

/// What a behavior sees at one tick. The last history entry is the latest
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub latest: DeltaSample,
    /// Current contract utilization, when the node is guarded.
    pub goal: Option<f64>,
    /// Correction offset currently applied to the channel.
    pub correction: f64,
    pub history: VecDeque<HistoryEntry>,
    capacity: usize,
}

impl Observation {
    pub fn new(capacity: usize) -> Self {
        Observation {
            latest: DeltaSample {
                time: 0.0,
                figure: 0,
                delta: 0.0,
            },
            goal: None,
            correction: 0.0,
            history: VecDeque::with_capacity(capacity.max(1)),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Records a new sample, evicting the oldest beyond capacity.
    pub fn push(&mut self, sample: DeltaSample, correction: f64, context: Vec<f64>) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(HistoryEntry {
            time: sample.time,
            delta: sample.delta,
            correction,
            context,
        });
        self.latest = sample;
        self.correction = correction;
    }

    /// Replaces the buffer bound; keeps the newest entries.
    pub fn resize(&mut self, capacity: usize) {
        self.capacity = capacity.max(1);
        while self.history.len() > self.capacity {
            self.history.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.history.clear();
    }
}

/// A behavior plus the little state it carries (the schedule cursor).
#[derive(Debug, Clone, PartialEq)]
pub struct Behavior {
    pub class: BehaviorClass,
    cursor: usize,
}

impl Behavior {
    pub fn new(class: BehaviorClass) -> Self {
        Behavior { class, cursor: 0 }
    }

    pub fn act(&mut self, obs: &Observation) -> CorrectiveAction {
        match &self.class {
            BehaviorClass::Passive => CorrectiveAction::NONE,
            BehaviorClass::ActiveNonPurposeful { schedule } => {
                if schedule.is_empty() {
                    return CorrectiveAction::NONE;
                }
                let step = schedule[self.cursor % schedule.len()];
                self.cursor = (self.cursor + 1) % schedule.len();
                CorrectiveAction::bias(step)
            }
            BehaviorClass::PurposefulNonTeleological { setpoint } => CorrectiveAction::bias(setpoint - obs.correction),
            BehaviorClass::Reactive { gain } => CorrectiveAction::bias(-gain * obs.latest.delta),
            BehaviorClass::PredictiveOrderK { order, .. } => match predict_next(obs, *order) {
                Some(predicted) => CorrectiveAction::bias(-predicted),
                None => CorrectiveAction {
                    fallback: true,
                    ..CorrectiveAction::bias(-obs.latest.delta)
                },
            },
        }
    }
}

/// Predicted Δ at the next sample if no further correction were applied, or
/// `None` without enough history.
///
/// The model is fitted on the open-loop error (observed Δ minus the
/// correction in effect), with an intercept, the time trend and `order - 1`
/// context regressors. Context values at the next step are extrapolated from
/// their last two samples.
pub fn predict_next(obs: &Observation, order: usize) -> Option<f64> {
    let h = &obs.history;
    let n = h.len();
    if order == 0 || n < order + 1 {
        return None;
    }
    let last = h.back()?;
    let extra = order - 1;
    if h.iter().any(|e| e.context.len() < extra) {
        return None;
    }
    let spacing = if n >= 2 {
        (last.time - h[0].time) / (n - 1) as f64
    } else {
        0.0
    };
    let cols = 2 + extra;
    let design = DMatrix::from_fn(n, cols, |r, c| match c {
        0 => 1.0,
        1 => h[r].time - last.time,
        _ => h[r].context[c - 2],
    });
    let target = DVector::from_iterator(n, h.iter().map(|e| e.delta - e.correction));
    let mut next = DVector::zeros(cols);
    next[0] = 1.0;
    next[1] = spacing;
    for j in 0..extra {
        let cur = last.context[j];
        let prev = if n >= 2 { h[n - 2].context[j] } else { cur };
        next[2 + j] = cur + (cur - prev);
    }
    let svd = design.svd(true, true);
    let beta = svd.solve(&target, 1e-12).ok()?;
    let open_loop = next.dot(&beta);
    open_loop.is_finite().then_some(open_loop + obs.correction)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs_with(deltas: &[f64]) -> Observation {
        let mut obs = Observation::new(deltas.len().max(1));
        for (i, &d) in deltas.iter().enumerate() {
            obs.push(
                DeltaSample {
                    time: i as f64,
                    figure: 0,
                    delta: d,
                },
                0.0,
                vec![],
            );
        }
        obs
    }

    #[test]
    fn passive_is_inert() {
        let mut b = Behavior::new(BehaviorClass::Passive);
        assert_eq!(b.act(&obs_with(&[3.0])), CorrectiveAction::NONE);
    }

    #[test]
    fn reactive_proportional() {
        let mut b = Behavior::new(BehaviorClass::Reactive { gain: 1.0 });
        assert!(b.act(&obs_with(&[0.0])).is_none());
        let mut b = Behavior::new(BehaviorClass::Reactive { gain: 0.5 });
        assert_eq!(b.act(&obs_with(&[0.4])).bias_adjustment, -0.2);
    }

    #[test]
    fn schedule_cycles_regardless_of_obs() {
        let mut b = Behavior::new(BehaviorClass::ActiveNonPurposeful {
            schedule: vec![0.1, -0.1, 0.0],
        });
        let got: Vec<f64> = [5.0, -5.0, 0.0, 1.0]
            .iter()
            .map(|&d| b.act(&obs_with(&[d])).bias_adjustment)
            .collect();
        assert_eq!(got, vec![0.1, -0.1, 0.0, 0.1]);
    }

    #[test]
    fn servo_ignores_delta() {
        let mut b = Behavior::new(BehaviorClass::PurposefulNonTeleological { setpoint: -0.3 });
        let mut obs = obs_with(&[9.0]);
        obs.correction = -0.1;
        assert!((b.act(&obs).bias_adjustment + 0.2).abs() < 1e-12);
        obs.latest.delta = -9.0;
        assert!((b.act(&obs).bias_adjustment + 0.2).abs() < 1e-12);
    }

    #[test]
    fn predictive_line_extrapolation() {
        let mut b = Behavior::new(BehaviorClass::PredictiveOrderK { order: 1, history: 3 });
        let a = b.act(&obs_with(&[0.1, 0.2, 0.3]));
        assert!((a.bias_adjustment + 0.4).abs() < 1e-12, "{a:?}");
        assert!(!a.fallback);
    }

    #[test]
    fn predictive_accounts_for_applied_correction() {
        // Open-loop error 0.1 t, with corrections already applied.
        let mut obs = Observation::new(3);
        let corrections = [0.0, -0.2, -0.3];
        for (i, c) in corrections.iter().enumerate() {
            let t = i as f64;
            obs.push(
                DeltaSample {
                    time: t,
                    figure: 0,
                    delta: 0.1 * t + c,
                },
                *c,
                vec![],
            );
        }
        // Next open-loop value 0.3; with -0.3 in effect, predicted Δ is 0.
        let p = predict_next(&obs, 1).unwrap();
        assert!(p.abs() < 1e-12, "{p}");
    }

    #[test]
    fn predictive_cold_start_falls_back() {
        let mut b = Behavior::new(BehaviorClass::PredictiveOrderK { order: 2, history: 5 });
        let a = b.act(&obs_with(&[0.3, 0.5]));
        assert!(a.fallback);
        assert_eq!(a.bias_adjustment, -0.5);
    }

    #[test]
    fn second_order_uses_context() {
        // Δ = 2 * x where x is a context figure growing quadratically.
        let mut obs = Observation::new(6);
        for i in 0..6 {
            let t = i as f64;
            let x = t * t;
            obs.push(
                DeltaSample {
                    time: t,
                    figure: 0,
                    delta: 2.0 * x,
                },
                0.0,
                vec![x],
            );
        }
        // x extrapolated linearly from 16, 25 to 34.
        let p = predict_next(&obs, 2).unwrap();
        assert!((p - 68.0).abs() < 1e-8, "{p}");
    }

    #[test]
    fn orders() {
        assert_eq!(behavior_order(&BehaviorClass::Passive), 0);
        assert_eq!(behavior_order(&BehaviorClass::Reactive { gain: 1.0 }), 0);
        assert_eq!(behavior_order(&BehaviorClass::PredictiveOrderK { order: 2, history: 4 }), 2);
    }

    #[test]
    fn invariants() {
        assert!(BehaviorClass::Reactive { gain: 0.0 }.check(1).is_err());
        assert!(BehaviorClass::Reactive { gain: 2.0 }.check(1).is_ok());
        assert!(BehaviorClass::Reactive { gain: 2.5 }.check(1).is_err());
        assert!(BehaviorClass::PredictiveOrderK { order: 1, history: 1 }.check(1).is_err());
        assert!(BehaviorClass::PredictiveOrderK { order: 2, history: 3 }.check(1).is_err());
        assert!(BehaviorClass::PredictiveOrderK { order: 2, history: 3 }.check(2).is_ok());
    }

    #[test]
    fn history_is_bounded() {
        let obs = obs_with(&[1.0, 2.0, 3.0]);
        let mut small = obs.clone();
        small.resize(2);
        assert_eq!(small.history.len(), 2);
        assert_eq!(small.history[0].delta, 2.0);
    }
}
