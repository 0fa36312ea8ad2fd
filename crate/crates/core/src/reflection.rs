//! Reflective maps: the sensing channel from a raw fact to its quale.
//!
//! A map is affine (`gain * raw + bias`) plus Gaussian noise, quantization
//! to a grid, a sampling period and an acquisition latency. The additivity
//! residual of the map (how far `q(u1 + u2)` is from `q(u1) + q(u2)`) is the
//! preservation distance; the running system instead measures the per-tick
//! tracking error against an ideal channel.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectiveMap {
    pub figure: usize,
    pub gain: f64,
    pub bias: f64,
    pub noise_std: f64,
    /// Quantization step; `0` disables quantization.
    pub quantization: f64,
    pub sampling_period: f64,
    pub latency: f64,
}

impl ReflectiveMap {
    /// A noise-free, unquantized affine channel sampled every second.
    pub fn affine(figure: usize, gain: f64, bias: f64) -> Self {
        Self {
            figure,
            gain,
            bias,
            noise_std: 0.0,
            quantization: 0.0,
            sampling_period: 1.0,
            latency: 0.0,
        }
    }

    /// Lists every violated parameter invariant as `(field, message)`.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.sampling_period > 0.0 && self.sampling_period.is_finite()) {
            out.push(("sampling_period", format!("must be > 0, got {}", self.sampling_period)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            out.push(("noise_std", format!("must be >= 0, got {}", self.noise_std)));
        }
        if !(self.quantization >= 0.0 && self.quantization.is_finite()) {
            out.push(("quantization", format!("must be >= 0, got {}", self.quantization)));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            out.push(("latency", format!("must be >= 0, got {}", self.latency)));
        }
        if !self.gain.is_finite() {
            out.push(("gain", "must be finite".to_string()));
        }
        if !self.bias.is_finite() {
            out.push(("bias", "must be finite".to_string()));
        }
        out
    }

    /// Deterministic part of the map, `quantize(gain * raw + bias)`.
    pub fn reflect(&self, raw: f64) -> f64 {
        quantize(self.gain.mul_add(raw, self.bias), self.quantization)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quale {
    pub value: f64,
    pub acquired_at: f64,
    pub figure: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSample {
    pub time: f64,
    pub figure: usize,
    pub delta: f64,
}

/// Rounds `x` to the nearest multiple of `step`, ties to even. `step == 0`
/// leaves `x` untouched.
pub fn quantize(x: f64, step: f64) -> f64 {
    if step == 0.0 {
        x
    } else {
        (x / step).round_ties_even() * step
    }
}

/// Samples the channel at time `t`.
pub fn sense(map: &ReflectiveMap, raw: f64, t: f64, rng: &mut Stream) -> Quale {
    let mut x = map.gain.mul_add(raw, map.bias);
    if map.noise_std > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        x += map.noise_std * z;
    }
    Quale {
        value: quantize(x, map.quantization),
        acquired_at: t + map.latency,
        figure: map.figure,
    }
}

// Error-free transformations used by the algebraic probe.

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Correctly rounded sum of `terms` (Shewchuk's partials).
fn exact_sum(terms: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &t in terms {
        let mut x = t;
        let mut kept = 0;
        for i in 0..partials.len() {
            let y = partials[i];
            let (hi, lo) = if x.abs() < y.abs() { two_sum(y, x) } else { two_sum(x, y) };
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    // Partials are non-overlapping and increasing; summing from the top with
    // the half-way correction gives the correctly rounded result.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        n -= 1;
        let x = hi;
        let y = partials[n];
        let (s, e) = two_sum(x, y);
        hi = s;
        lo = e;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Exact components of `gain * u + bias`, with `u` given as an unevaluated
/// sum of parts.
fn affine_terms(map: &ReflectiveMap, u: &[f64], out: &mut Vec<f64>) {
    for &part in u {
        let (p, e) = two_prod(map.gain, part);
        out.push(p);
        out.push(e);
    }
    out.push(map.bias);
}

/// Additivity residual `q(u1 + u2) - q(u1) - q(u2)` of the noise-free map.
///
/// The sum `u1 + u2` on the raw-fact side is taken exactly and every affine
/// evaluation is rounded once, so without quantization the result is the
/// exact algebraic residual (`-bias` for an affine map).
pub fn preservation_distance(map: &ReflectiveMap, u1: f64, u2: f64) -> f64 {
    let (s, se) = two_sum(u1, u2);
    if map.quantization == 0.0 {
        let mut terms = Vec::with_capacity(12);
        affine_terms(map, &[s, se], &mut terms);
        let mut neg = Vec::with_capacity(6);
        affine_terms(map, &[u1], &mut neg);
        affine_terms(map, &[u2], &mut neg);
        terms.extend(neg.into_iter().map(|t| -t));
        return exact_sum(&terms);
    }
    let level = |parts: &[f64]| {
        let mut terms = Vec::with_capacity(6);
        affine_terms(map, parts, &mut terms);
        (exact_sum(&terms) / map.quantization).round_ties_even()
    };
    (level(&[s, se]) - level(&[u1]) - level(&[u2])) * map.quantization
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedValue {
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("series lengths differ: {ideal} ideal vs {observed} observed")]
    Length { ideal: usize, observed: usize },
    #[error("sample {index} is off-grid: ideal at {ideal}, observed at {observed}")]
    Grid { index: usize, ideal: f64, observed: f64 },
    #[error("non-finite delta at sample {0}")]
    NonFinite(usize),
}

/// Ordered Δ samples of one figure.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaTrace {
    pub figure: usize,
    pub samples: Vec<DeltaSample>,
}

impl DeltaTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn abs_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.delta.abs())
    }
}

const GRID_TOLERANCE: f64 = 1e-9;

/// Per-tick difference between what the channel reported and what a perfect
/// channel would have reported.
pub fn tracking_error(
    figure: usize,
    ideal: &[TimedValue],
    observed: &[TimedValue],
) -> Result<DeltaTrace, AlignmentError> {
    if ideal.len() != observed.len() {
        return Err(AlignmentError::Length {
            ideal: ideal.len(),
            observed: observed.len(),
        });
    }
    let mut samples = Vec::with_capacity(ideal.len());
    for (index, (i, o)) in ideal.iter().zip(observed).enumerate() {
        if (i.time - o.time).abs() > GRID_TOLERANCE {
            return Err(AlignmentError::Grid {
                index,
                ideal: i.time,
                observed: o.time,
            });
        }
        let delta = o.value - i.value;
        if !delta.is_finite() {
            return Err(AlignmentError::NonFinite(index));
        }
        samples.push(DeltaSample {
            time: i.time,
            figure,
            delta,
        });
    }
    Ok(DeltaTrace { figure, samples })
}

/// One row of an exported channel trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time: f64,
    pub figure: usize,
    pub raw: f64,
    pub quale: f64,
    pub delta: f64,
}

pub fn write_trace_csv<W: Write>(out: W, rows: &[TraceRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Error)]
pub enum TraceReadError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("trace mixes figures {0} and {1}")]
    MixedFigures(usize, usize),
    #[error("line {line}: timestamps must be strictly increasing")]
    NotIncreasing { line: u64 },
}

/// Reads a Δ trace from CSV. Only `time` and `delta` are required; a
/// `figure` column, when present, must be constant.
pub fn read_delta_trace_csv<R: Read>(input: R) -> Result<DeltaTrace, TraceReadError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| TraceReadError::Malformed {
            line: e.position().map_or(1, |p| p.line()),
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let time_col = col("time").ok_or(TraceReadError::MissingColumn("time"))?;
    let delta_col = col("delta").ok_or(TraceReadError::MissingColumn("delta"))?;
    let figure_col = col("figure");
    let mut trace = DeltaTrace::default();
    let mut figure: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| TraceReadError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<f64, TraceReadError> {
            let text = record.get(i).ok_or_else(|| TraceReadError::Malformed {
                line,
                message: format!("missing `{name}` field"),
            })?;
            let v: f64 = text.parse().map_err(|_| TraceReadError::Malformed {
                line,
                message: format!("`{name}` is not a number: {text:?}"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(TraceReadError::Malformed {
                    line,
                    message: format!("`{name}` is not finite"),
                })
            }
        };
        let time = field(time_col, "time")?;
        let delta = field(delta_col, "delta")?;
        let fig = match figure_col {
            Some(i) => {
                let text = record.get(i).unwrap_or("");
                text.parse::<usize>().map_err(|_| TraceReadError::Malformed {
                    line,
                    message: format!("`figure` is not an index: {text:?}"),
                })?
            }
            None => 0,
        };
        match figure {
            None => figure = Some(fig),
            Some(f) if f != fig => return Err(TraceReadError::MixedFigures(f, fig)),
            _ => {}
        }
        if let Some(last) = trace.samples.last() {
            if time <= last.time {
                return Err(TraceReadError::NotIncreasing { line });
            }
        }
        trace.samples.push(DeltaSample { time, figure: fig, delta });
    }
    trace.figure = figure.unwrap_or(0);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn rng() -> Stream {
        stream(1, Purpose::SensorNoise, 0)
    }

    fn with_q(gain: f64, bias: f64, q: f64) -> ReflectiveMap {
        ReflectiveMap {
            quantization: q,
            ..ReflectiveMap::affine(0, gain, bias)
        }
    }

    #[test]
    fn sense_examples() {
        assert_eq!(sense(&with_q(1.0, 0.0, 0.0), 3.7, 0.0, &mut rng()).value, 3.7);
        assert_eq!(sense(&with_q(2.0, 1.0, 0.0), 3.0, 0.0, &mut rng()).value, 7.0);
        assert_eq!(sense(&with_q(1.0, 0.0, 0.5), 3.7, 0.0, &mut rng()).value, 3.5);
    }

    #[test]
    fn latency_shifts_timestamp_only() {
        let map = ReflectiveMap {
            latency: 0.25,
            ..ReflectiveMap::affine(2, 1.0, 0.0)
        };
        let q = sense(&map, 1.5, 4.0, &mut rng());
        assert_eq!(q.value, 1.5);
        assert_eq!(q.acquired_at, 4.25);
        assert_eq!(q.figure, 2);
    }

    #[test]
    fn quantize_ties_to_even() {
        assert_eq!(quantize(0.25, 0.5), 0.0);
        assert_eq!(quantize(0.75, 0.5), 1.0);
        assert_eq!(quantize(-0.25, 0.5), -0.0);
        assert_eq!(quantize(1.3, 0.0), 1.3);
    }

    #[test]
    fn preservation_distance_examples() {
        assert_eq!(preservation_distance(&with_q(3.3, 0.0, 0.0), 0.1, 0.7), 0.0);
        assert_eq!(preservation_distance(&with_q(1.0, 0.37, 0.0), 1.1, -2.9), -0.37);
        assert_eq!(preservation_distance(&with_q(1.0, 0.0, 0.5), 0.3, 0.3), -0.5);
    }

    #[test]
    fn exact_sum_cancels() {
        assert_eq!(exact_sum(&[1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum(&[0.1, 0.2, -0.3]), 2.7755575615628914e-17);
        assert_eq!(exact_sum(&[]), 0.0);
    }

    #[test]
    fn tracking_error_examples() {
        let grid: Vec<TimedValue> = (0..10)
            .map(|i| TimedValue {
                time: i as f64 * 0.1,
                value: i as f64,
            })
            .collect();
        let trace = tracking_error(0, &grid, &grid).unwrap();
        assert_eq!(trace.len(), 10);
        assert!(trace.samples.iter().all(|s| s.delta == 0.0));

        let shifted: Vec<TimedValue> = grid
            .iter()
            .map(|s| TimedValue {
                value: s.value + 0.2,
                ..*s
            })
            .collect();
        let trace = tracking_error(0, &grid, &shifted).unwrap();
        assert!(trace.samples.iter().all(|s| (s.delta - 0.2).abs() < 1e-12));
    }

    #[test]
    fn tracking_error_alignment() {
        let a = [TimedValue { time: 0.0, value: 0.0 }];
        let b = [TimedValue { time: 0.5, value: 0.0 }];
        assert!(matches!(tracking_error(0, &a, &b), Err(AlignmentError::Grid { index: 0, .. })));
        assert!(matches!(tracking_error(0, &a, &[]), Err(AlignmentError::Length { .. })));
    }

    #[test]
    fn problems_are_listed() {
        let map = ReflectiveMap {
            sampling_period: -1.0,
            noise_std: -0.1,
            ..ReflectiveMap::affine(0, 1.0, 0.0)
        };
        let fields: Vec<_> = map.problems().into_iter().map(|(f, _)| f).collect();
        assert_eq!(fields, vec!["sampling_period", "noise_std"]);
    }

    #[test]
    fn trace_csv_round_trip() {
        let rows = vec![
            TraceRow { time: 0.0, figure: 1, raw: 1.0, quale: 1.1, delta: 0.1 },
            TraceRow { time: 0.1, figure: 1, raw: 1.0, quale: 0.95, delta: -0.05 },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time,figure,raw,quale,delta\n"));
        let trace = read_delta_trace_csv(buf.as_slice()).unwrap();
        assert_eq!(trace.figure, 1);
        assert_eq!(trace.samples.iter().map(|s| s.delta).collect::<Vec<_>>(), vec![0.1, -0.05]);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = "time,delta\n0.0,0.1\n0.1,oops\n";
        match read_delta_trace_csv(text.as_bytes()) {
            Err(TraceReadError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "time,delta\n0.1,0.0\n0.1,0.0\n";
        assert!(matches!(
            read_delta_trace_csv(text.as_bytes()),
            Err(TraceReadError::NotIncreasing { line: 3 })
        ));
    }
}
