use std::collections::BTreeSet;
use std::time::Instant;

use en_core::domain::{RegionId, ReplicationType};
use en_sim::generate::{enterprise_scenario, random_scenario, RandomParams};
use en_sim::scenario::{ClusterSpec, InfectionSpec, LinkSpec, RegionSpec, SimTime, TripSpec, UserSpec};
use en_sim::{
    check_alt2_equivalence, compare_replication_modes, measure_replication_traffic, simulate, Alt2Verdict,
    Listening, Scenario,
};

fn r(code: &str) -> RegionId {
    code.parse().unwrap()
}

fn t(s: &str) -> SimTime {
    s.parse().unwrap()
}

fn trio_cluster(seed: u64) -> Scenario {
    let mut p = RandomParams::new(seed);
    p.regions = 3;
    p.users = 24;
    p.horizon_days = 16;
    p.replication = ReplicationType::AllToAll;
    p.single_cluster = true;
    p.travel_probability = 0.7;
    p.contacts = 50;
    p.infections = 6;
    random_scenario(&p)
}

fn bare(name: &str, regions: &[&str], horizon_days: u32) -> Scenario {
    Scenario {
        name: name.into(),
        seed: 9,
        horizon_days,
        replication: ReplicationType::Partial,
        listening: Listening::Roaming,
        max_base_regions: 3,
        cadence: Default::default(),
        regions: regions.iter().map(|c| RegionSpec { id: r(c), vendor: None }).collect(),
        clusters: Vec::new(),
        links: Vec::new(),
        users: Vec::new(),
        contacts: Vec::new(),
        infections: Vec::new(),
    }
}

fn user(id: &str, base: &str) -> UserSpec {
    UserSpec {
        id: id.into(),
        base: vec![r(base)],
        trips: Vec::new(),
    }
}

#[test]
fn home_listening_matches_roaming_listening_in_a_cluster() {
    let mut total = 0;
    for seed in 100..104 {
        let scenario = trio_cluster(seed);
        match check_alt2_equivalence(&scenario).unwrap() {
            Alt2Verdict::Equivalent { matches } => total += matches.len(),
            other => panic!("seed {seed}: {other}"),
        }
    }
    assert!(total > 0, "scenarios should produce some exposures");
}

#[test]
fn alt2_without_infections_is_trivially_equivalent() {
    let mut scenario = trio_cluster(7);
    scenario.infections.clear();
    assert_eq!(
        check_alt2_equivalence(&scenario).unwrap(),
        Alt2Verdict::Equivalent { matches: BTreeSet::new() }
    );
}

#[test]
fn alt2_is_inapplicable_with_a_partial_link() {
    let mut scenario = trio_cluster(7);
    scenario.links.push(LinkSpec {
        consumer: r("AT"),
        producer: r("BE"),
        mode: ReplicationType::Partial,
    });
    assert!(matches!(check_alt2_equivalence(&scenario).unwrap(), Alt2Verdict::Inapplicable(_)));
    let mut split = trio_cluster(7);
    split.clusters[0].members.pop();
    assert!(matches!(check_alt2_equivalence(&split).unwrap(), Alt2Verdict::Inapplicable(_)));
}

#[test]
fn home_listening_is_not_enough_under_partial_replication() {
    // Frank visits AA and meets a local who uploads later. Under partial
    // replication AA's keys never reach CC, so only roaming listening works.
    let mut s = bare("partial-home", &["AA", "CC"], 10);
    s.users.push(user("lena", "AA"));
    let mut frank = user("frank", "CC");
    frank.trips.push(TripSpec {
        region: r("AA"),
        enter: t("1+08:00"),
        exit: t("2+18:00"),
    });
    s.users.push(frank);
    s.contacts.push(en_sim::scenario::ContactSpec {
        a: "lena".into(),
        b: "frank".into(),
        at: t("2+09:00"),
        region: None,
    });
    s.infections.push(InfectionSpec {
        user: "lena".into(),
        at: t("4+10:00"),
        region: None,
    });
    let roaming = simulate(&s).unwrap();
    assert_eq!(roaming.matches.len(), 1);
    s.listening = Listening::Home;
    let home = simulate(&s).unwrap();
    assert!(home.matches.is_empty());
    assert!(home.report.passed, "{}", home.report.to_text());
}

#[test]
fn no_travelers_means_header_only_partial_traffic() {
    let mut s = bare("stay-home", &["AA", "BB", "CC"], 6);
    for (i, region) in ["AA", "BB", "CC"].iter().enumerate() {
        for j in 0..3 {
            s.users.push(user(&format!("u{i}{j}"), region));
        }
        s.infections.push(InfectionSpec {
            user: format!("u{i}0"),
            at: t("2+10:00"),
            region: None,
        });
    }
    let report = simulate(&s).unwrap().report;
    let traffic = measure_replication_traffic(&report);
    assert_eq!(traffic.keys, 0);
    assert_eq!(traffic.batches, 0);
    // Pollers still talked to each other; every answer was an empty feed.
    assert!(report.links.iter().all(|l| l.requests > 0 && l.bytes == 0));
    let cmp = compare_replication_modes(&s).unwrap();
    assert!(cmp.partial_within_all_to_all());
    assert_eq!(cmp.all_to_all.keys, 3 * 2 * 3);
}

#[test]
fn single_traveler_crosses_one_border_with_fourteen_keys() {
    let mut s = bare("one-trip", &["AA", "BB", "CC"], 20);
    s.users.push(user("lena", "AA"));
    let mut bob = user("bob", "BB");
    bob.trips.push(TripSpec {
        region: r("AA"),
        enter: t("10+08:00"),
        exit: t("12+18:00"),
    });
    s.users.push(bob);
    s.users.push(user("carl", "CC"));
    s.infections.push(InfectionSpec {
        user: "bob".into(),
        at: t("15+10:00"),
        region: None,
    });
    let report = simulate(&s).unwrap().report;
    let traffic = measure_replication_traffic(&report);
    assert_eq!(traffic.keys, 14);
    let carrying: Vec<_> = traffic.links.iter().filter(|l| l.keys > 0).collect();
    assert_eq!(carrying.len(), 1);
    assert_eq!((carrying[0].consumer.as_str(), carrying[0].producer.as_str()), ("AA", "BB"));
    assert_eq!(carrying[0].batches, 1);
}

#[test]
fn partial_traffic_never_exceeds_all_to_all() {
    for seed in [11, 12, 13] {
        let mut p = RandomParams::new(seed);
        p.users = 20;
        p.horizon_days = 12;
        let cmp = compare_replication_modes(&random_scenario(&p)).unwrap();
        assert!(cmp.partial_within_all_to_all(), "seed {seed}: {cmp:?}");
    }
}

#[test]
fn everyone_everywhere_makes_partial_close_to_all_to_all() {
    // Every user visits every other region early on, so every upload
    // declares all regions.
    let mut s = bare("grand-tour", &["AA", "BB", "CC"], 12);
    let regions = ["AA", "BB", "CC"];
    for (i, home) in regions.iter().enumerate() {
        let mut u = user(&format!("t{i}"), home);
        let mut day = 0;
        for other in regions.iter().filter(|o| *o != home) {
            u.trips.push(TripSpec {
                region: r(other),
                enter: t(&format!("{day}+08:00")),
                exit: t(&format!("{day}+20:00")),
            });
            day += 1;
        }
        s.users.push(u);
        s.infections.push(InfectionSpec {
            user: format!("t{i}"),
            at: t(&format!("{}+10:00", 4 + i)),
            region: None,
        });
    }
    let cmp = compare_replication_modes(&s).unwrap();
    assert_eq!(cmp.partial.keys, cmp.all_to_all.keys);
    assert!(cmp.partial_within_all_to_all());
}

#[test]
fn enterprise_users_download_every_upload() {
    let scenario = enterprise_scenario(5, 6, 120);
    let run = simulate(&scenario).unwrap();
    assert!(run.report.passed, "{}", run.report.to_text());
    let all: BTreeSet<[u8; 16]> = run.uploaded.values().flatten().map(|k| *k.bytes()).collect();
    assert!(!all.is_empty());
    for (user, keys) in &run.downloaded {
        assert_eq!(keys, &all, "{user}");
    }
}

#[test]
fn cluster_membership_drives_link_modes() {
    let mut s = bare("mixed", &["AA", "BB", "CC"], 5);
    s.replication = ReplicationType::AllToAll;
    s.clusters.push(ClusterSpec {
        name: "PAIR".into(),
        members: vec![r("AA"), r("BB")],
    });
    let report = simulate(&s).unwrap().report;
    let mode = |c: &str, p: &str| {
        report
            .links
            .iter()
            .find(|l| l.consumer == c && l.producer == p)
            .map(|l| l.mode.clone())
            .unwrap()
    };
    assert_eq!(mode("AA", "BB"), "all-to-all");
    assert_eq!(mode("CC", "AA"), "partial");
    assert_eq!(mode("AA", "CC"), "partial");
}

#[test]
fn randomized_runs_pass_and_stay_fast() {
    let start = Instant::now();
    for seed in 0..3 {
        let report = simulate(&random_scenario(&RandomParams::new(seed))).unwrap().report;
        assert!(report.passed, "seed {seed}:\n{}", report.to_text());
        assert!(report.isolation_violations.is_empty());
    }
    assert!(start.elapsed().as_secs() < 60);
}
