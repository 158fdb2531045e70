use en_core::domain::ReplicationType;
use en_sim::generate::{random_scenario, RandomParams};
use en_sim::{simulate, Scenario};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = RandomParams> {
    (0..=i64::MAX as u64, 2usize..5, 4usize..20, 6u32..15, any::<bool>(), 0.0f64..1.0).prop_map(
        |(seed, regions, users, horizon, a2a, travel)| {
            let mut p = RandomParams::new(seed);
            p.regions = regions;
            p.users = users;
            p.horizon_days = horizon;
            p.travel_probability = travel;
            p.contacts = users * 2;
            p.infections = users / 3 + 1;
            if a2a {
                p.replication = ReplicationType::AllToAll;
                p.single_cluster = true;
            }
            p
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Notifications happen exactly when they must, keys never reach a
    /// backend that was not declared, and no region set is ever served.
    #[test]
    fn random_federations_keep_their_promises(p in params()) {
        let scenario = random_scenario(&p);
        let report = simulate(&scenario).unwrap().report;
        prop_assert!(report.isolation_violations.is_empty(), "{:?}", report.isolation_violations);
        prop_assert!(report.privacy.leaks.is_empty());
        prop_assert!(report.passed, "{}", report.to_text());
        for n in &report.notifications {
            prop_assert!(!n.outcome.is_violation());
        }
    }

    #[test]
    fn huge_seeds_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let mut scenario = random_scenario(&RandomParams::new(1));
        scenario.seed = seed;
        prop_assert!(scenario.validate().is_err());
        prop_assert!(scenario.to_toml().is_err());
    }

    #[test]
    fn scenarios_round_trip_through_text(p in params()) {
        let scenario = random_scenario(&p);
        let text = scenario.to_toml().unwrap();
        prop_assert_eq!(text.parse::<Scenario>().unwrap(), scenario);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn same_seed_same_report(seed in 0..=i64::MAX as u64) {
        let scenario = random_scenario(&RandomParams::new(seed));
        let a = simulate(&scenario).unwrap().report.to_json();
        let b = simulate(&scenario).unwrap().report.to_json();
        prop_assert_eq!(a, b);
    }
}
