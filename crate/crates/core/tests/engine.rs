mod common;

use resilab::engine::{ChangeKind, Stage};
use resilab::environment::ShockEvent;
use resilab::identity::IdentityClass;
use resilab::{run_scenario, RunOptions, Scenario};

use common::*;

fn guarded_drift(catalog: &str) -> Scenario {
    let mut s = drift(r#"{ kind = "passive" }"#, 0.01, 60.0);
    s.nodes[0].contract = Some(IdentityClass::HardRt { t: 0.05 });
    s.nodes[0].guard_window = 5;
    s.environment.shocks.push(ShockEvent {
        at: 1.0,
        figure: 1,
        magnitude: 0.0,
        recovery_window: 55.0,
    });
    if !catalog.is_empty() {
        s.nodes[0].controller.catalog = toml::from_str::<Wrap>(catalog).unwrap().catalog;
    }
    s
}

#[derive(serde::Deserialize)]
struct Wrap {
    catalog: Vec<resilab::controller::Strategy>,
}

#[test]
fn zero_duration_gives_empty_run() {
    let mut s = drift(r#"{ kind = "passive" }"#, 0.01, 1.0);
    s.engine.duration = 0.0;
    let r = run(&s);
    assert_eq!(r.ticks, 0);
    assert!(r.records.is_empty() && r.episodes.is_empty());
    assert!(r.antifragility.is_err());
}

#[test]
fn same_seed_same_records() {
    let s = population(&diverse(), &shocked(1), 1);
    let a = run(&s);
    let b = run(&s);
    assert_eq!(a.records, b.records);
    assert_eq!(a.changes, b.changes);
    assert_eq!(a.pool_log, b.pool_log);
}

#[test]
fn seed_only_matters_with_noise() {
    let mut a = drift(r#"{ kind = "reactive", gain = 0.5 }"#, 0.01, 10.0);
    let mut b = a.clone();
    b.engine.seed = 77;
    assert_eq!(run(&a).records, run(&b).records);
    a.nodes[0].channel.noise_std = 0.1;
    b.nodes[0].channel.noise_std = 0.1;
    assert_ne!(run(&a).records, run(&b).records);
}

#[test]
fn stages_run_in_order_every_tick() {
    let s = population(&diverse(), &shocked(2), 2);
    let r = run_scenario(
        &s,
        &RunOptions {
            instrument: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!r.stages.is_empty());
    assert!(r.stages.windows(2).all(|w| w[0].seq < w[1].seq));
    for tick in 0..r.ticks {
        let stages: Vec<Stage> = r.stages.iter().filter(|m| m.tick == tick).map(|m| m.stage).collect();
        assert!(stages.windows(2).all(|w| w[0] <= w[1]), "tick {tick}: {stages:?}");
        assert_eq!(stages.last(), Some(&Stage::Metrics));
    }
}

#[test]
fn power_of_two_rescaling_keeps_timelines() {
    let base = learning(4, true);
    let mut big = base.clone();
    let s = 4.0;
    for f in &mut big.environment.figures {
        f.initial *= s;
    }
    for sh in &mut big.environment.shocks {
        sh.magnitude *= s;
    }
    big.environment.turbulence_threshold *= s;
    let n = &mut big.nodes[0];
    n.channel.noise_std *= s;
    n.contract = n.contract.map(|c| match c {
        IdentityClass::HardRt { t } => IdentityClass::HardRt { t: t * s },
        other => other,
    });
    n.controller.safety.turbulence_threshold *= s;
    n.detector.slack *= s;
    n.detector.threshold *= s;
    let (a, b) = (run(&base), run(&big));
    assert_eq!(a.statuses(0), b.statuses(0));
    assert_eq!(a.modes(0), b.modes(0));
    let strategies = |r: &resilab::RunResult| -> Vec<Option<String>> {
        r.episodes.iter().map(|e| e.strategy.clone()).collect()
    };
    assert_eq!(strategies(&a), strategies(&b));
    for (x, y) in a.deltas(0).iter().zip(b.deltas(0)) {
        assert_eq!(x * s, y);
    }
}

#[test]
fn reconfiguring_to_predictive_beats_staying_passive() {
    let passive = run(&guarded_drift(""));
    let adapted = run(&guarded_drift(
        r#"catalog = [{ id = "predict", action = { reconfigure = { behavior = { kind = "predictive_order_k", order = 1, history = 4 } } } }]"#,
    ));
    assert!(adapted
        .changes
        .iter()
        .any(|c| c.kind == ChangeKind::Reconfigure && c.ok && c.strategy == "predict"));
    assert!(adapted.episodes[0].cost < passive.episodes[0].cost);
}

#[test]
fn identical_reconfigure_records_equal_pre_and_post() {
    let r = run(&guarded_drift(
        r#"catalog = [{ id = "same", action = { reconfigure = { behavior = { kind = "passive" } } } }]"#,
    ));
    let c = r.changes.iter().find(|c| c.strategy == "same").expect("strategy enacted");
    assert_eq!(c.pre, c.post);
}

#[test]
fn joining_twice_is_a_failed_enactment() {
    let mut s = guarded_drift(r#"catalog = [{ id = "join", action = { social = { action = "join" } } }]"#);
    s.nodes[0].social = Some(resilab::collective::SocialBehavior::Individualistic);
    s.collective.budget = 1.0;
    s.collective.join_share = 0.5;
    let r = run(&s);
    let c = r.changes.iter().find(|c| c.strategy == "join").expect("strategy enacted");
    assert_eq!(c.kind, ChangeKind::Social);
    assert!(!c.ok);
    assert_eq!(r.node_episodes[0].reward, Some(0.0));
}

#[test]
fn neutral_members_never_move_allocations() {
    let variants = vec![Variant::ReactiveNeutral; DIVERSITY_NODES];
    for trial in 0..3 {
        let r = run(&population(&variants, &shocked(trial), trial));
        assert!(r.pool_log.iter().any(|p| !p.allocations.is_empty()));
        let mut held = std::collections::BTreeMap::new();
        for p in &r.pool_log {
            for (m, a) in &p.allocations {
                let first = *held.entry(*m).or_insert(*a);
                assert_eq!(first, *a, "node {m} allocation moved");
            }
            held.retain(|m, _| p.allocations.contains_key(m));
        }
    }
}

#[test]
fn replicas_are_expanded_by_count() {
    let mut s = perfect();
    s.nodes[0].count = 3;
    let r = run(&s);
    assert_eq!(r.node_names, ["n-0", "n-1", "n-2"]);
    assert_eq!(r.records.len(), 3 * r.ticks);
}

#[test]
fn exports_land_without_staging_leftovers() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&learning(0, true));
    let written = resilab::export::write_exports(&r, dir.path()).unwrap();
    assert_eq!(written.len(), 8);
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().all(|n| !n.starts_with(".staging")), "{names:?}");
    let episodes = std::fs::read_to_string(dir.path().join("episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 31);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"], 30);
    assert_eq!(report["overhead"]["guarded"], serde_json::json!(r.overhead[0]));
}
