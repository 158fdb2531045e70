//! Seeded scenario generators for randomized checks and load runs.

use en_core::domain::{RegionId, ReplicationType, Timestamp, SECS_PER_DAY, SECS_PER_INTERVAL};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario::{
    location_at, Cadence, ClusterSpec, ContactSpec, InfectionSpec, Listening, RegionSpec, Scenario, SimTime,
    TripSpec, UserSpec,
};

const CODES: [&str; 24] = [
    "AT", "BE", "CH", "CZ", "DE", "DK", "ES", "FI", "FR", "GR", "HR", "HU", "IE", "IT", "LT", "LU", "LV",
    "NL", "NO", "PL", "PT", "RO", "SE", "SI",
];

#[derive(Debug, Clone)]
pub struct RandomParams {
    pub name: String,
    /// Must fit in an `i64`, like every scenario seed.
    pub seed: u64,
    pub regions: usize,
    pub users: usize,
    pub horizon_days: u32,
    pub replication: ReplicationType,
    /// Put every region in one cluster.
    pub single_cluster: bool,
    /// Chance that a user makes trips at all.
    pub travel_probability: f64,
    pub max_trips: usize,
    pub contacts: usize,
    pub infections: usize,
}

impl RandomParams {
    pub fn new(seed: u64) -> Self {
        RandomParams {
            name: format!("random-{seed}"),
            seed,
            regions: 3,
            users: 30,
            horizon_days: 21,
            replication: ReplicationType::Partial,
            single_cluster: false,
            travel_probability: 0.5,
            max_trips: 2,
            contacts: 60,
            infections: 8,
        }
    }
}

fn at_step(t: u64) -> SimTime {
    SimTime(Timestamp(t / SECS_PER_INTERVAL * SECS_PER_INTERVAL))
}

/// A scenario with random itineraries, co-located contacts and infections.
///
/// Infections stop two days before the horizon so replication can finish.
pub fn random_scenario(p: &RandomParams) -> Scenario {
    assert!(p.regions >= 1 && p.regions <= CODES.len(), "1..={} regions", CODES.len());
    assert!(p.horizon_days >= 4, "horizon too short");
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let regions: Vec<RegionId> = CODES[..p.regions].iter().map(|c| c.parse().expect("valid code")).collect();
    let horizon = u64::from(p.horizon_days) * SECS_PER_DAY;

    let mut users = Vec::with_capacity(p.users);
    for i in 0..p.users {
        let home = *regions.choose(&mut rng).expect("regions");
        let mut trips = Vec::new();
        if regions.len() > 1 && rng.gen_bool(p.travel_probability) {
            let count = rng.gen_range(1..=p.max_trips.max(1));
            // Trips are laid out left to right so they never overlap.
            let mut cursor = rng.gen_range(0..SECS_PER_DAY * 2);
            for _ in 0..count {
                let length = rng.gen_range(SECS_PER_DAY / 2..SECS_PER_DAY * 5);
                if cursor + length >= horizon {
                    break;
                }
                let region = **regions
                    .iter()
                    .filter(|r| **r != home)
                    .collect::<Vec<_>>()
                    .choose(&mut rng)
                    .expect("another region");
                trips.push(TripSpec {
                    region,
                    enter: at_step(cursor),
                    exit: at_step(cursor + length),
                });
                cursor += length + rng.gen_range(SECS_PER_DAY / 2..SECS_PER_DAY * 4);
            }
        }
        users.push(UserSpec {
            id: format!("u{i:04}"),
            base: vec![home],
            trips,
        });
    }

    let mut contacts = Vec::with_capacity(p.contacts);
    let mut attempts = 0;
    while contacts.len() < p.contacts && attempts < p.contacts * 50 && users.len() > 1 {
        attempts += 1;
        let at = at_step(rng.gen_range(0..horizon - SECS_PER_DAY));
        let a = rng.gen_range(0..users.len());
        let here = location_at(&users[a], at.0);
        let candidates: Vec<usize> = (0..users.len())
            .filter(|&b| b != a && location_at(&users[b], at.0) == here)
            .collect();
        if let Some(&b) = candidates.choose(&mut rng) {
            contacts.push(ContactSpec {
                a: users[a].id.clone(),
                b: users[b].id.clone(),
                at,
                region: Some(here),
            });
        }
    }

    let mut ids: Vec<usize> = (0..users.len()).collect();
    ids.shuffle(&mut rng);
    let mut infections: Vec<InfectionSpec> = ids
        .into_iter()
        .take(p.infections)
        .map(|u| InfectionSpec {
            user: users[u].id.clone(),
            at: at_step(rng.gen_range(SECS_PER_DAY..horizon - 2 * SECS_PER_DAY)),
            region: None,
        })
        .collect();
    infections.sort_by(|a, b| a.at.cmp(&b.at).then_with(|| a.user.cmp(&b.user)));

    Scenario {
        name: p.name.clone(),
        seed: p.seed,
        horizon_days: p.horizon_days,
        replication: p.replication,
        listening: Listening::Roaming,
        max_base_regions: 1,
        cadence: Cadence::default(),
        clusters: if p.single_cluster {
            vec![ClusterSpec {
                name: "CLUSTER".into(),
                members: regions.clone(),
            }]
        } else {
            Vec::new()
        },
        regions: regions.into_iter().map(|id| RegionSpec { id, vendor: None }).collect(),
        links: Vec::new(),
        users,
        contacts,
        infections,
    }
}

/// An all-to-all enterprise: `sites` regions in one cluster.
pub fn enterprise_scenario(seed: u64, sites: usize, users: usize) -> Scenario {
    let mut params = RandomParams::new(seed);
    params.name = format!("enterprise-{sites}x{users}");
    params.regions = sites;
    params.users = users;
    params.horizon_days = 6;
    params.replication = ReplicationType::AllToAll;
    params.single_cluster = true;
    params.travel_probability = 0.2;
    params.max_trips = 1;
    params.contacts = users * 2;
    params.infections = users / 20;
    let mut scenario = random_scenario(&params);
    scenario.clusters[0].name = "ENTERPRISE".into();
    scenario
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_scenarios_are_valid_and_reproducible() {
        for seed in 0..10 {
            let scenario = random_scenario(&RandomParams::new(seed));
            scenario.validate().unwrap();
            assert_eq!(scenario, random_scenario(&RandomParams::new(seed)));
            let text = scenario.to_toml().unwrap();
            assert_eq!(text.parse::<Scenario>().unwrap(), scenario);
        }
        assert_ne!(random_scenario(&RandomParams::new(1)), random_scenario(&RandomParams::new(2)));
    }

    #[test]
    fn enterprise_shape() {
        let scenario = enterprise_scenario(3, 12, 200);
        scenario.validate().unwrap();
        assert_eq!(scenario.regions.len(), 12);
        assert_eq!(scenario.clusters[0].members.len(), 12);
        assert_eq!(scenario.infections.len(), 10);
    }
}
