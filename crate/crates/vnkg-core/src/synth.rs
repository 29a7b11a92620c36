//! Synthetic graph generators for tests and benchmarks.
//!
//! `random_kg` produces an unstructured dataset for exercising the split
//! machinery. `planted_kg` builds a clustered social graph whose withheld
//! facts are recoverable from two planted rules, so pipeline-level tests can
//! measure whether rule-derived supervision actually helps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeSet;

use crate::rules::{Atom, LogicRule};
use crate::split::RawDataset;
use crate::store::{EntityId, RelationId, Triple, TripleStore};

/// Uniform random dataset: distinct triples over `num_entities` entities and
/// `num_relations` relations, dealt into train/valid/test with the requested
/// sizes. Every entity is pinned into train first so splits start from a
/// connected-ish vocabulary rather than isolated ids.
pub fn random_kg(
    num_entities: usize,
    num_relations: usize,
    train: usize,
    valid: usize,
    test: usize,
    seed: u64,
) -> RawDataset {
    assert!(num_entities >= 2 && num_relations >= 1);
    assert!(train >= num_entities, "need at least one train triple per entity");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = RawDataset::default();
    for i in 0..num_entities {
        data.entities.intern(&format!("e{i}"));
    }
    for r in 0..num_relations {
        data.relations.intern(&format!("r{r}"));
    }

    let mut used: BTreeSet<Triple> = BTreeSet::new();
    let draw = |rng: &mut ChaCha12Rng, used: &mut BTreeSet<Triple>, head: Option<usize>| {
        loop {
            let h = head.unwrap_or_else(|| rng.gen_range(0..num_entities));
            let t = rng.gen_range(0..num_entities);
            if t == h {
                continue;
            }
            let r = rng.gen_range(0..num_relations);
            let triple = Triple::new(EntityId(h), RelationId(r), EntityId(t));
            if used.insert(triple) {
                return triple;
            }
        }
    };

    for h in 0..num_entities {
        data.train.push(draw(&mut rng, &mut used, Some(h)));
    }
    while data.train.len() < train {
        let t = draw(&mut rng, &mut used, None);
        data.train.push(t);
    }
    for _ in 0..valid {
        let t = draw(&mut rng, &mut used, None);
        data.valid.push(t);
    }
    for _ in 0..test {
        let t = draw(&mut rng, &mut used, None);
        data.test.push(t);
    }
    data
}

/// Shape of the clustered graph built by [`planted_kg`].
#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub clusters: usize,
    pub observed_per_cluster: usize,
    pub unseen_per_cluster: usize,
    /// Outgoing `follows` edges per observed member.
    pub follows_per_member: usize,
    /// Probability that a `follows` edge is paired with a `knows` edge.
    pub knows_rate: f64,
    /// Probability that a `follows` edge leaves its cluster.
    pub cross_rate: f64,
    /// Observed `knows` facts per cluster moved into the validation split.
    pub held_out_knows_per_cluster: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            clusters: 12,
            observed_per_cluster: 18,
            unseen_per_cluster: 5,
            follows_per_member: 3,
            knows_rate: 0.9,
            cross_rate: 0.05,
            held_out_knows_per_cluster: 2,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct PlantedKg {
    pub store: TripleStore,
    pub rules: Vec<LogicRule>,
}

/// Clustered social graph with two planted regularities:
///
///   (x,follows,y) => (x,knows,y)                      0.90
///   (x,follows,y) & (y,locatedIn,z) => (x,locatedIn,z) 0.85
///
/// Each cluster has a community hub and a place hub. Observed members carry
/// memberOf/locatedIn edges to their hubs plus follows/knows edges inside the
/// cluster (a few follows cross clusters as noise). Each unseen member is
/// deliberately sparse: a single auxiliary follows edge, with two test facts
/// that are exactly the conclusions the planted rules reach from that edge.
/// Rule-derived densification therefore adds real information instead of
/// repackaging what aggregation already sees. Validation holds fully observed
/// knows pairs withheld from O.
pub fn planted_kg(cfg: &PlantedConfig) -> PlantedKg {
    assert!(cfg.clusters >= 2 && cfg.observed_per_cluster >= 4);
    assert!(cfg.follows_per_member < cfg.observed_per_cluster);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut store = TripleStore::default();

    let member_of = RelationId(store.relations.intern("memberOf"));
    let located_in = RelationId(store.relations.intern("locatedIn"));
    let follows = RelationId(store.relations.intern("follows"));
    let knows = RelationId(store.relations.intern("knows"));

    let mut observed: Vec<Vec<EntityId>> = Vec::new();
    let mut unseen: Vec<Vec<EntityId>> = Vec::new();
    let mut community = Vec::new();
    let mut place = Vec::new();
    for c in 0..cfg.clusters {
        community.push(EntityId(store.entities.intern(&format!("community{c}"))));
        place.push(EntityId(store.entities.intern(&format!("place{c}"))));
        let mut obs = Vec::new();
        for i in 0..cfg.observed_per_cluster {
            obs.push(EntityId(store.entities.intern(&format!("m{c}_{i}"))));
        }
        let mut uns = Vec::new();
        for i in 0..cfg.unseen_per_cluster {
            let e = EntityId(store.entities.intern(&format!("u{c}_{i}")));
            store.unseen.insert(e);
            uns.push(e);
        }
        observed.push(obs);
        unseen.push(uns);
    }

    let mut knows_pool: Vec<Vec<Triple>> = vec![Vec::new(); cfg.clusters];
    for c in 0..cfg.clusters {
        for &m in &observed[c] {
            store.observed.insert(Triple::new(m, member_of, community[c]));
            store.observed.insert(Triple::new(m, located_in, place[c]));

            let mut targets: Vec<EntityId> =
                observed[c].iter().copied().filter(|&t| t != m).collect();
            targets.shuffle(&mut rng);
            for k in 0..cfg.follows_per_member {
                let mut target = targets[k];
                if rng.gen_bool(cfg.cross_rate) {
                    let other = (c + 1 + rng.gen_range(0..cfg.clusters - 1)) % cfg.clusters;
                    target = observed[other][rng.gen_range(0..cfg.observed_per_cluster)];
                }
                if !store.observed.insert(Triple::new(m, follows, target)) {
                    continue;
                }
                if rng.gen_bool(cfg.knows_rate) {
                    let t = Triple::new(m, knows, target);
                    if store.observed.insert(t) && target != community[c] {
                        knows_pool[c].push(t);
                    }
                }
            }
        }
    }

    // Validation must stay fully observed, so it holds back knows pairs
    // between observed members instead of touching the unseen set.
    for c in 0..cfg.clusters {
        knows_pool[c].shuffle(&mut rng);
        for t in knows_pool[c].iter().take(cfg.held_out_knows_per_cluster) {
            store.observed.remove(t);
            store.validation.insert(*t);
        }
    }

    for c in 0..cfg.clusters {
        for &u in &unseen[c] {
            let a = observed[c][rng.gen_range(0..cfg.observed_per_cluster)];
            store.auxiliary.insert(Triple::new(u, follows, a));

            // Withheld facts, each reachable from the lone AUX edge through a
            // planted rule: follows(u,a) => knows(u,a);
            // follows(u,a) & locatedIn(a,place) => locatedIn(u,place).
            store.test.insert(Triple::new(u, knows, a));
            store.test.insert(Triple::new(u, located_in, place[c]));
        }
    }

    let atom = |h: &str, r: RelationId, t: &str| Atom {
        head_var: h.to_string(),
        relation: r,
        tail_var: t.to_string(),
    };
    let rules = vec![
        LogicRule {
            premises: vec![atom("x", follows, "y")],
            conclusion: atom("x", knows, "y"),
            confidence: 0.90,
        },
        LogicRule {
            premises: vec![atom("x", follows, "y"), atom("y", located_in, "z")],
            conclusion: atom("x", located_in, "z"),
            confidence: 0.85,
        },
    ];

    store.validate().expect("planted graph violates store invariants");
    PlantedKg { store, rules }
}
