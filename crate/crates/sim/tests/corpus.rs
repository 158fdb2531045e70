use std::path::PathBuf;

use en_core::domain::RegionId;
use en_sim::report::Outcome;
use en_sim::scenario::SimTime;
use en_sim::{simulate, Requirement, Scenario, SimulationRun};

fn corpus(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn r(code: &str) -> RegionId {
    code.parse().unwrap()
}

fn matched(run: &SimulationRun, notified: &str, infected: &str) -> bool {
    run.matches.iter().any(|(n, i, _)| n == notified && i == infected)
}

fn keys_of(run: &SimulationRun, user: &str) -> Vec<[u8; 16]> {
    run.uploaded[user].iter().map(|k| *k.bytes()).collect()
}

fn stored_at(run: &SimulationRun, region: &str, keys: &[[u8; 16]]) -> usize {
    let stored = run.node(r(region)).unwrap().store().read_since(Default::default()).unwrap();
    stored.iter().filter(|s| keys.contains(s.key.bytes())).count()
}

#[test]
fn every_corpus_scenario_passes() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("scn") {
            continue;
        }
        let scenario = Scenario::load(&path).unwrap();
        let report = simulate(&scenario).unwrap().report;
        assert!(report.passed, "{}:\n{}", path.display(), report.to_text());
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn alice_learns_about_bob() {
    let run = simulate(&corpus("f1_alice_bob.scn")).unwrap();
    assert_eq!(run.matches.len(), 1);
    assert!(matched(&run, "alice", "bob"));
    let f1 = &run.report.verdicts[&Requirement::F1];
    assert_eq!((f1.matched, f1.missed, f1.unexpected), (1, 0, 0));

    let bob = keys_of(&run, "bob");
    // Keys only exist from day 0 on.
    assert_eq!(bob.len(), 7);
    assert_eq!(stored_at(&run, "AA", &bob), 7);
    assert_eq!(stored_at(&run, "CC", &bob), 0);
    assert_eq!(run.report.backends["CC"].remote_keys, 0);
    assert!(run.downloaded["carol"].iter().all(|k| !bob.contains(k)));
}

#[test]
fn bob_learns_about_alice_but_not_after_lapse() {
    let run = simulate(&corpus("f2_bob_listens.scn")).unwrap();
    assert!(matched(&run, "bob", "alice"));
    assert!(!matched(&run, "bob", "dave"));
    let f2 = &run.report.verdicts[&Requirement::F2];
    assert_eq!((f2.matched, f2.missed, f2.unexpected), (1, 0, 0));
    let dave = keys_of(&run, "dave");
    assert!(run.downloaded["bob"].iter().all(|k| !dave.contains(k)));
    let alice = keys_of(&run, "alice");
    assert!(alice.iter().all(|k| run.downloaded["bob"].contains(k)));
}

#[test]
fn travelers_meeting_abroad_both_learn() {
    let run = simulate(&corpus("f3_travelers.scn")).unwrap();
    assert!(matched(&run, "erin", "frank"));
    assert!(matched(&run, "frank", "erin"));
    let f3 = &run.report.verdicts[&Requirement::F3];
    assert_eq!((f3.matched, f3.missed, f3.unexpected), (2, 0, 0));
    // Neither home backend learns about the other's resident.
    assert_eq!(stored_at(&run, "CC", &keys_of(&run, "erin")), 0);
    assert_eq!(stored_at(&run, "BB", &keys_of(&run, "frank")), 0);
}

#[test]
fn roaming_upload_is_an_expected_miss() {
    let run = simulate(&corpus("roaming_upload.scn")).unwrap();
    assert!(run.matches.is_empty());
    assert!(run.report.uploads.is_empty());
    let entry = &run.report.notifications[0];
    assert!(matches!(entry.outcome, Outcome::ExpectedMiss(_)), "{entry:?}");
    assert!(run.report.passed);
}

#[test]
fn commuter_keys_reach_every_base_region() {
    let run = simulate(&corpus("commuter.scn")).unwrap();
    let gina = keys_of(&run, "gina");
    assert_eq!(run.report.uploads[0].backend, "BB");
    assert_eq!(run.report.uploads[0].declared, ["BB", "CC"]);
    assert_eq!(stored_at(&run, "CC", &gina), gina.len());
    assert_eq!(stored_at(&run, "AA", &gina), 0);
    assert!(matched(&run, "hans", "gina"));
}

#[test]
fn reports_are_reproducible() {
    let scenario = corpus("f1_alice_bob.scn");
    let a = simulate(&scenario).unwrap().report;
    let b = simulate(&scenario).unwrap().report;
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_text(), b.to_text());
}

#[test]
fn partial_replication_arrives_within_one_poll_cycle() {
    let scenario = corpus("f1_alice_bob.scn");
    let report = simulate(&scenario).unwrap().report;
    let upload = report.uploads[0].at.parse::<SimTime>().unwrap().0;
    let arrival = report
        .timeline
        .iter()
        .find(|e| e.consumer == "AA" && e.producer == "BB" && e.keys > 0)
        .expect("replication event");
    let arrived = arrival.at.parse::<SimTime>().unwrap().0;
    let cycle = scenario.cadence.build_interval_secs + scenario.cadence.poll_interval_secs;
    assert!(arrived.secs() - upload.secs() <= cycle, "{} -> {}", report.uploads[0].at, arrival.at);
    assert!(report.timeline.iter().all(|e| e.consumer != "CC" || e.keys == 0));
    let text = report.to_text();
    assert!(text.contains("result: PASS"));
    assert!(text.contains("AA <- BB"));
}
