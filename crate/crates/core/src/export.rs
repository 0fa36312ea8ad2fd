//! Run exports: CSV tables plus `report.json`, written to a staging
//! directory and moved into place only once every file is complete.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::engine::RunResult;

pub const TICKS: &str = "ticks.csv";
pub const EPISODES: &str = "episodes.csv";
pub const REPORT: &str = "report.json";

fn table(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| io::Error::other(e.to_string()))
}

fn opt<T: ToString>(x: Option<T>, none: &str) -> String {
    x.map_or_else(|| none.to_string(), |v| v.to_string())
}

pub fn ticks_csv(r: &RunResult) -> io::Result<Vec<u8>> {
    table(
        &["time", "node", "figure", "raw", "quale", "delta", "mode", "contract_status"],
        r.records.iter().map(|t| {
            vec![
                t.time.to_string(),
                r.node_names[t.node].clone(),
                t.figure.to_string(),
                t.raw.to_string(),
                t.quale.to_string(),
                t.delta.to_string(),
                t.mode.as_str().to_string(),
                opt(t.status.map(|s| s.as_str()), "none"),
            ]
        }),
    )
}

pub fn episodes_csv(r: &RunResult) -> io::Result<Vec<u8>> {
    table(
        &["episode", "cost", "restoration_time", "strategy"],
        r.episodes.iter().map(|e| {
            vec![
                e.episode.to_string(),
                e.cost.to_string(),
                opt(e.restoration_time, "not_restored"),
                opt(e.strategy.clone(), "none"),
            ]
        }),
    )
}

pub fn node_episodes_csv(r: &RunResult) -> io::Result<Vec<u8>> {
    table(
        &["episode", "node", "cost", "restoration_time", "strategy", "regime", "reward"],
        r.node_episodes.iter().map(|e| {
            vec![
                e.metrics.episode.to_string(),
                r.node_names[e.node].clone(),
                e.metrics.cost.to_string(),
                opt(e.metrics.restoration_time, "not_restored"),
                opt(e.metrics.strategy.clone(), "none"),
                opt(e.regime.clone(), ""),
                opt(e.reward, ""),
            ]
        }),
    )
}

pub fn changes_csv(r: &RunResult) -> io::Result<Vec<u8>> {
    table(
        &["time", "node", "strategy", "kind", "ok", "pre", "post"],
        r.changes.iter().map(|c| {
            vec![
                c.time.to_string(),
                r.node_names[c.node].clone(),
                c.strategy.clone(),
                serde_json::to_value(c.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                c.ok.to_string(),
                c.pre.clone(),
                c.post.clone(),
            ]
        }),
    )
}

pub fn events_csv(r: &RunResult) -> io::Result<Vec<u8>> {
    table(
        &["time", "node", "figure", "previous_class", "max_abs", "window_mean", "window_std"],
        r.events.iter().map(|e| {
            vec![
                e.event.time.to_string(),
                r.node_names[e.node].clone(),
                e.event.figure.to_string(),
                e.event.previous.to_string(),
                e.event.max_abs.to_string(),
                e.event.window_mean.to_string(),
                e.event.window_std.to_string(),
            ]
        }),
    )
}

/// Long format: one row per holder per tick, the reserve included.
pub fn pool_csv(r: &RunResult) -> io::Result<Vec<u8>> {
    table(
        &["time", "holder", "allocation"],
        r.pool_log.iter().flat_map(|p| {
            std::iter::once(vec![p.time.to_string(), "reserve".into(), p.reserve.to_string()]).chain(
                p.allocations
                    .iter()
                    .map(|(m, a)| vec![p.time.to_string(), r.node_names[*m].clone(), a.to_string()]),
            )
        }),
    )
}

pub fn report(r: &RunResult) -> Value {
    let mut out = Map::new();
    match &r.antifragility {
        Ok(a) => {
            out.insert("verdict".into(), json!(a.verdict));
            out.insert("slope".into(), json!(a.slope));
            out.insert("normalized_slope".into(), json!(a.normalized_slope));
            out.insert("tolerance".into(), json!(a.tolerance));
        }
        Err(_) => {
            out.insert("verdict".into(), json!("InsufficientEpisodes"));
            out.insert("slope".into(), Value::Null);
            out.insert("normalized_slope".into(), Value::Null);
            out.insert("tolerance".into(), json!(r.scenario.engine.antifragility_tolerance));
        }
    }
    out.insert(
        "method".into(),
        json!("Theil-Sen slope of per-episode integrated |delta| against episode index, divided by the first episode cost"),
    );
    out.insert("episodes".into(), json!(r.episodes.len()));
    out.insert("ticks".into(), json!(r.ticks));
    let mut ranks = Map::new();
    for (name, state) in &r.learning {
        let mut per = Map::new();
        for (regime, arms) in &state.regimes {
            let mut order: Vec<_> = arms.iter().collect();
            order.sort_by_key(|a| a.rank);
            per.insert(
                regime.clone(),
                Value::Array(
                    order
                        .iter()
                        .map(|a| json!({"strategy_id": a.strategy_id, "pulls": a.pulls, "mean": a.mean}))
                        .collect(),
                ),
            );
        }
        ranks.insert(name.clone(), Value::Object(per));
    }
    out.insert("ranks".into(), Value::Object(ranks));
    let overhead: Map<String, Value> = r
        .node_names
        .iter()
        .zip(&r.overhead)
        .map(|(n, o)| (n.clone(), json!(o)))
        .collect();
    out.insert("overhead".into(), Value::Object(overhead));
    let baselines: Map<String, Value> = r
        .node_names
        .iter()
        .zip(&r.baselines)
        .map(|(n, b)| (n.clone(), json!(b)))
        .collect();
    out.insert("reward_baselines".into(), Value::Object(baselines));
    out.insert("pool_violations".into(), json!(r.pool_violations.len()));
    out.insert("identity_failures".into(), json!(r.events.len()));
    out.insert("diversity".into(), json!(r.diversity));
    out.insert(
        "effective_config".into(),
        serde_json::to_value(&r.scenario).expect("scenario serializes"),
    );
    Value::Object(out)
}

/// Every export as (file name, bytes).
pub fn render(r: &RunResult) -> io::Result<Vec<(&'static str, Vec<u8>)>> {
    let learning: serde_json::Map<String, Value> = r
        .learning
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::to_value(v).expect("learning serializes")))
        .collect();
    let mut report = serde_json::to_vec_pretty(&report(r)).map_err(io::Error::other)?;
    report.push(b'\n');
    let mut learning = serde_json::to_vec_pretty(&learning).map_err(io::Error::other)?;
    learning.push(b'\n');
    Ok(vec![
        (TICKS, ticks_csv(r)?),
        (EPISODES, episodes_csv(r)?),
        ("node_episodes.csv", node_episodes_csv(r)?),
        ("changes.csv", changes_csv(r)?),
        ("events.csv", events_csv(r)?),
        ("pool.csv", pool_csv(r)?),
        ("learning.json", learning),
        (REPORT, report),
    ])
}

/// Writes every export into `dir`. Files land under a staging directory
/// first and are renamed into place once all of them are written.
pub fn write_exports(r: &RunResult, dir: &Path) -> io::Result<Vec<PathBuf>> {
    let files = render(r)?;
    fs::create_dir_all(dir)?;
    let staging = dir.join(format!(".staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir(&staging)?;
    let written = (|| {
        for (name, bytes) in &files {
            fs::write(staging.join(name), bytes)?;
        }
        let mut out = Vec::new();
        for (name, _) in &files {
            let dest = dir.join(name);
            fs::rename(staging.join(name), &dest)?;
            out.push(dest);
        }
        Ok(out)
    })();
    let _ = fs::remove_dir_all(&staging);
    written
}
