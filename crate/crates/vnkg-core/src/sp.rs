//! Symmetric-path (SP) rule mining and grounding.
//!
//! A symmetric path of length 2k walks k edges away from a start entity and
//! then walks the same relations back in reverse order with opposite
//! direction, ending at a different entity. The pattern is fully determined
//! by its first half, stored as extended relation ids (base id = forward,
//! inverse id = backward).
//!
//! An SP rule `sp_i => sp_j` says: when a node pair is connected by an sp_i
//! path, it tends to also be connected by an sp_j path. Mining counts
//! distinct (start, end) pairs per pattern over walks from unseen entities;
//! grounding recovers the missing first edge of sp_j when the rest of the
//! path already exists.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::rules::{GroundRule, RuleKind};
use crate::store::{Adjacency, EntityId, RelationId, Triple, TripleStore};
use crate::{Error, Result};

/// First half of a symmetric path, as extended relation ids. The second half
/// is implied: same relations reversed with flipped direction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SpPattern {
    pub half: Vec<RelationId>,
}

impl SpPattern {
    pub fn new(half: Vec<RelationId>) -> Self {
        SpPattern { half }
    }

    /// Mirrored second half: reverse order, opposite direction per step.
    pub fn mirror(&self, store: &TripleStore) -> Vec<RelationId> {
        self.half.iter().rev().map(|&r| flipped(store, r)).collect()
    }

    /// Complete step sequence of length 2k.
    pub fn full(&self, store: &TripleStore) -> Vec<RelationId> {
        let mut seq = self.half.clone();
        seq.extend(self.mirror(store));
        seq
    }

    pub fn display(&self, store: &TripleStore) -> String {
        let steps: Vec<String> = self
            .half
            .iter()
            .map(|&r| {
                if store.is_base(r) {
                    format!("fwd:{}", store.relations.name(r.0))
                } else {
                    format!("bwd:{}", store.relations.name(r.0 - store.num_base_relations()))
                }
            })
            .collect();
        format!("sp[{}]", steps.join(","))
    }

    pub fn parse(text: &str, store: &TripleStore, path: &Path, lineno: usize) -> Result<Self> {
        let t = text.trim();
        let inner = t
            .strip_prefix("sp[")
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| Error::parse(path, lineno, format!("pattern {t:?} must be sp[...]")))?;
        let mut half = Vec::new();
        for step in inner.split(',') {
            let step = step.trim();
            let (dir, name) = step
                .split_once(':')
                .ok_or_else(|| Error::parse(path, lineno, format!("step {step:?} must be fwd:rel or bwd:rel")))?;
            let base = store
                .relations
                .get(name.trim())
                .ok_or_else(|| Error::parse(path, lineno, format!("unknown relation {name:?}")))?;
            let id = match dir {
                "fwd" => RelationId(base),
                "bwd" => RelationId(base + store.num_base_relations()),
                other => {
                    return Err(Error::parse(path, lineno, format!("bad direction {other:?}")));
                }
            };
            half.push(id);
        }
        if half.is_empty() || half.len() > 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("half length {} outside 1..=3", half.len()),
            ));
        }
        Ok(SpPattern { half })
    }
}

/// A concrete symmetric path: walked from `start`, mirror-symmetric, ending
/// at `end` != `start`. Only the boundary edges are kept; they become the
/// premises of SP groundings.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SpInstance {
    pub pattern: SpPattern,
    pub start: EntityId,
    pub end: EntityId,
    /// First edge of the walk, as a canonical stored triple.
    pub first: Triple,
    /// Last edge of the walk, as a canonical stored triple.
    pub last: Triple,
}

#[derive(Debug, Clone)]
pub enum WalkBudget {
    /// Seeded random walks per start entity per half length.
    Sampled { walks: usize, seed: u64 },
    /// Depth-first enumeration of every instance. Exact, for small graphs.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpRule {
    pub premise: SpPattern,
    pub conclusion: SpPattern,
    /// Head coverage: |pairs with premise and conclusion| / |pairs with premise|.
    pub confidence: f64,
    /// Distinct (start, end) pairs exhibiting the premise pattern.
    pub support: usize,
}

/// Canonical stored triple for one step `from --rel--> to` in extended-id
/// space: inverse ids flip back to the underlying base triple.
fn step_triple(store: &TripleStore, from: EntityId, rel: RelationId, to: EntityId) -> Triple {
    if store.is_base(rel) {
        Triple::new(from, rel, to)
    } else {
        Triple::new(to, RelationId(rel.0 - store.num_base_relations()), from)
    }
}

/// Opposite direction of a base or inverse id. Patterns never hold the
/// self-connection id.
fn flipped(store: &TripleStore, r: RelationId) -> RelationId {
    let b = store.num_base_relations();
    if r.0 < b {
        RelationId(r.0 + b)
    } else {
        RelationId(r.0 - b)
    }
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Find symmetric-path instances from one start entity over the adjacency
/// (built from O∪AUX). Sampled walks take k free steps, then k forced steps
/// that must mirror the first half; a walk with no edge matching the forced
/// step terminates early. Half lengths run 1..=max_half_len.
pub fn discover_sp_patterns(
    store: &TripleStore,
    adj: &Adjacency,
    start: EntityId,
    budget: &WalkBudget,
    max_half_len: usize,
) -> BTreeSet<SpInstance> {
    let mut out = BTreeSet::new();
    for k in 1..=max_half_len {
        match budget {
            WalkBudget::Sampled { walks, seed } => {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(*seed, start.0 as u64, k as u64));
                for _ in 0..*walks {
                    sample_walk(store, adj, start, k, &mut rng, &mut out);
                }
            }
            WalkBudget::Exhaustive => {
                let mut half = Vec::with_capacity(k);
                exhaustive_free(store, adj, start, start, k, &mut half, None, &mut out);
            }
        }
    }
    out
}

fn sample_walk(
    store: &TripleStore,
    adj: &Adjacency,
    start: EntityId,
    k: usize,
    rng: &mut ChaCha12Rng,
    out: &mut BTreeSet<SpInstance>,
) {
    let mut node = start;
    let mut half = Vec::with_capacity(k);
    let mut first = None;
    for i in 0..k {
        let nbrs = adj.neighbors(node);
        if nbrs.is_empty() {
            return;
        }
        let (rel, next) = nbrs[rng.gen_range(0..nbrs.len())];
        if i == 0 {
            first = Some(step_triple(store, node, rel, next));
        }
        half.push(rel);
        node = next;
    }
    let mut last = None;
    for i in 0..k {
        let want = flipped(store, half[k - 1 - i]);
        let matches: Vec<(RelationId, EntityId)> =
            adj.neighbors(node).iter().copied().filter(|&(r, _)| r == want).collect();
        if matches.is_empty() {
            return;
        }
        let (rel, next) = matches[rng.gen_range(0..matches.len())];
        if i == k - 1 {
            last = Some(step_triple(store, node, rel, next));
        }
        node = next;
    }
    if node != start {
        out.insert(SpInstance {
            pattern: SpPattern::new(half),
            start,
            end: node,
            first: first.unwrap(),
            last: last.unwrap(),
        });
    }
}

fn exhaustive_free(
    store: &TripleStore,
    adj: &Adjacency,
    start: EntityId,
    node: EntityId,
    depth_left: usize,
    half: &mut Vec<RelationId>,
    first: Option<Triple>,
    out: &mut BTreeSet<SpInstance>,
) {
    if depth_left == 0 {
        let k = half.len();
        exhaustive_forced(store, adj, start, node, half, k, first.unwrap(), None, out);
        return;
    }
    for &(rel, next) in adj.neighbors(node) {
        let first = first.or_else(|| Some(step_triple(store, node, rel, next)));
        half.push(rel);
        exhaustive_free(store, adj, start, next, depth_left - 1, half, first, out);
        half.pop();
    }
}

#[allow(clippy::too_many_arguments)]
fn exhaustive_forced(
    store: &TripleStore,
    adj: &Adjacency,
    start: EntityId,
    node: EntityId,
    half: &[RelationId],
    steps_left: usize,
    first: Triple,
    last: Option<Triple>,
    out: &mut BTreeSet<SpInstance>,
) {
    if steps_left == 0 {
        if node != start {
            out.insert(SpInstance {
                pattern: SpPattern::new(half.to_vec()),
                start,
                end: node,
                first,
                last: last.unwrap(),
            });
        }
        return;
    }
    let want = flipped(store, half[steps_left - 1]);
    for &(rel, next) in adj.neighbors(node) {
        if rel != want {
            continue;
        }
        let step = step_triple(store, node, rel, next);
        let last = if steps_left == 1 { Some(step) } else { last };
        exhaustive_forced(store, adj, start, next, half, steps_left - 1, first, last, out);
    }
}

/// Head-coverage confidence of `premise => conclusion` over an instance set:
/// the fraction of distinct (start, end) pairs carrying the premise pattern
/// that also carry the conclusion pattern. Returns None when no pair carries
/// the premise. Second component is the support (premise pair count).
pub fn score_sp_rule(
    instances: &BTreeSet<SpInstance>,
    premise: &SpPattern,
    conclusion: &SpPattern,
) -> Option<(f64, usize)> {
    let pairs = |p: &SpPattern| -> BTreeSet<(EntityId, EntityId)> {
        instances
            .iter()
            .filter(|i| &i.pattern == p)
            .map(|i| (i.start, i.end))
            .collect()
    };
    let premise_pairs = pairs(premise);
    if premise_pairs.is_empty() {
        return None;
    }
    let conclusion_pairs = pairs(conclusion);
    let both = premise_pairs.intersection(&conclusion_pairs).count();
    Some((both as f64 / premise_pairs.len() as f64, premise_pairs.len()))
}

#[derive(Debug, Clone)]
pub struct SpMineConfig {
    pub budget: WalkBudget,
    pub max_half_len: usize,
    pub min_confidence: f64,
    pub min_support: usize,
}

impl Default for SpMineConfig {
    fn default() -> Self {
        SpMineConfig {
            budget: WalkBudget::Sampled { walks: 1000, seed: 0 },
            max_half_len: 3,
            min_confidence: 0.8,
            min_support: 5,
        }
    }
}

#[derive(Debug, Default)]
pub struct SpMineResult {
    pub rules: Vec<SpRule>,
    /// Every instance discovered, reused later by grounding.
    pub instances: BTreeSet<SpInstance>,
}

/// Mine SP rules by walking from every unseen entity. Candidate rule pairs
/// are limited to patterns co-observed at the same start entity; confidence
/// counts pairs globally across all starts.
pub fn mine_sp_rules(store: &TripleStore, adj: &Adjacency, cfg: &SpMineConfig) -> SpMineResult {
    let mut instances: BTreeSet<SpInstance> = BTreeSet::new();
    for &u in &store.unseen {
        instances.extend(discover_sp_patterns(store, adj, u, &cfg.budget, cfg.max_half_len));
    }

    let mut at_start: BTreeMap<EntityId, BTreeSet<&SpPattern>> = BTreeMap::new();
    for i in &instances {
        at_start.entry(i.start).or_default().insert(&i.pattern);
    }
    let mut candidates: BTreeSet<(&SpPattern, &SpPattern)> = BTreeSet::new();
    for patterns in at_start.values() {
        for &p in patterns {
            for &q in patterns {
                if p != q {
                    candidates.insert((p, q));
                }
            }
        }
    }

    let mut rules = Vec::new();
    for (premise, conclusion) in candidates {
        if let Some((confidence, support)) = score_sp_rule(&instances, premise, conclusion) {
            if support >= cfg.min_support && confidence >= cfg.min_confidence {
                rules.push(SpRule {
                    premise: premise.clone(),
                    conclusion: conclusion.clone(),
                    confidence,
                    support,
                });
            }
        }
    }
    rules.sort_by(|a, b| (&a.premise, &a.conclusion).cmp(&(&b.premise, &b.conclusion)));
    SpMineResult { rules, instances }
}

/// Ground an SP rule. For each premise instance from an unseen start, search
/// backward from its end for the conclusion pattern minus its first edge;
/// every completion yields the missing first edge as the conclusion triple,
/// with premises {first of sp_i, last of sp_i, the sp_j edge at the far end}.
pub fn ground_sp(
    rule: &SpRule,
    instances: &BTreeSet<SpInstance>,
    store: &TripleStore,
    adj: &Adjacency,
) -> Vec<GroundRule> {
    let full_j = rule.conclusion.full(store);
    let mut out: BTreeSet<GroundRule> = BTreeSet::new();
    for inst in instances {
        if inst.pattern != rule.premise || !store.is_unseen(inst.start) {
            continue;
        }
        // Suffix s_2..s_2k must exist ending at inst.end; walk it backward.
        let tail = &full_j[1..];
        let s_last = *tail.last().unwrap();
        for &(rel, w) in adj.neighbors(inst.end) {
            if rel != flipped(store, s_last) {
                continue;
            }
            let x_last2 = step_triple(store, w, s_last, inst.end);
            backward(
                store,
                adj,
                w,
                &tail[..tail.len() - 1],
                &mut |w1| {
                    let conclusion = step_triple(store, inst.start, full_j[0], w1);
                    if !store.in_observed_or_aux(&conclusion) {
                        out.insert(GroundRule {
                            kind: RuleKind::Sp,
                            confidence: rule.confidence,
                            premises: vec![inst.first, inst.last, x_last2],
                            conclusion,
                        });
                    }
                },
            );
        }
    }
    out.into_iter().collect()
}

/// Walk `steps` backward (consumed from the back) from `node`; call `emit`
/// with every entity reachable at the front of the remaining path.
fn backward(
    store: &TripleStore,
    adj: &Adjacency,
    node: EntityId,
    steps: &[RelationId],
    emit: &mut impl FnMut(EntityId),
) {
    match steps.last() {
        None => emit(node),
        Some(&s) => {
            for &(rel, next) in adj.neighbors(node) {
                if rel == flipped(store, s) {
                    backward(store, adj, next, &steps[..steps.len() - 1], emit);
                }
            }
        }
    }
}

pub fn format_sp_rules(rules: &[SpRule], store: &TripleStore) -> String {
    let mut out = String::new();
    for r in rules {
        out.push_str(&format!(
            "{} => {}\t{}\t{}\n",
            r.premise.display(store),
            r.conclusion.display(store),
            r.confidence,
            r.support
        ));
    }
    out
}

pub fn parse_sp_rules(path: &Path, store: &TripleStore) -> Result<Vec<SpRule>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sp_rules_str(&text, store, path)
}

pub fn parse_sp_rules_str(text: &str, store: &TripleStore, path: &Path) -> Result<Vec<SpRule>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, lineno, "expected rule<TAB>confidence<TAB>support"));
        }
        let (premise_text, conclusion_text) = fields[0]
            .split_once("=>")
            .ok_or_else(|| Error::parse(path, lineno, "missing => separator"))?;
        let premise = SpPattern::parse(premise_text, store, path, lineno)?;
        let conclusion = SpPattern::parse(conclusion_text, store, path, lineno)?;
        let confidence: f64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad confidence {:?}", fields[1])))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::parse(path, lineno, format!("confidence {confidence} outside [0, 1]")));
        }
        let support: usize = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad support {:?}", fields[2])))?;
        out.push(SpRule { premise, conclusion, confidence, support });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Partitions;
    use std::path::PathBuf;

    fn fake_path() -> PathBuf {
        PathBuf::from("sp_rules.txt")
    }

    /// Build a store from named edges; edges touching an unseen entity go to
    /// AUX, the rest to O. Returns the store and an O∪AUX adjacency.
    fn graph(edges: &[(&str, &str, &str)], unseen: &[&str]) -> (TripleStore, Adjacency) {
        let mut store = TripleStore::default();
        for name in unseen {
            store.entities.intern(name);
        }
        let mut triples = Vec::new();
        for (h, r, t) in edges {
            let h = EntityId(store.entities.intern(h));
            let r = RelationId(store.relations.intern(r));
            let t = EntityId(store.entities.intern(t));
            triples.push(Triple::new(h, r, t));
        }
        for name in unseen {
            store.unseen.insert(EntityId(store.entities.get(name).unwrap()));
        }
        for t in triples {
            if store.is_unseen(t.head) || store.is_unseen(t.tail) {
                store.auxiliary.insert(t);
            } else {
                store.observed.insert(t);
            }
        }
        let adj = store.build_index(Partitions { observed: true, auxiliary: true, virtual_: false });
        (store, adj)
    }

    fn e(store: &TripleStore, n: &str) -> EntityId {
        EntityId(store.entities.get(n).unwrap())
    }

    fn r(store: &TripleStore, n: &str) -> RelationId {
        RelationId(store.relations.get(n).unwrap())
    }

    #[test]
    fn minimal_symmetric_path_is_found() {
        let (store, adj) = graph(&[("a", "r", "b"), ("c", "r", "b")], &["a"]);
        let found = discover_sp_patterns(&store, &adj, e(&store, "a"), &WalkBudget::Exhaustive, 3);
        let expected = SpInstance {
            pattern: SpPattern::new(vec![r(&store, "r")]),
            start: e(&store, "a"),
            end: e(&store, "c"),
            first: Triple::new(e(&store, "a"), r(&store, "r"), e(&store, "b")),
            last: Triple::new(e(&store, "c"), r(&store, "r"), e(&store, "b")),
        };
        assert!(found.contains(&expected), "missing length-2 instance in {found:?}");
        // Every instance is mirror-symmetric by construction; ends differ from start.
        for inst in &found {
            assert_ne!(inst.start, inst.end);
        }
    }

    #[test]
    fn asymmetric_chain_yields_no_instances() {
        // a-r1->b-r2->c has no mirror-symmetric completion that leaves a.
        let (store, adj) = graph(&[("a", "r1", "b"), ("b", "r2", "c")], &["a"]);
        let found = discover_sp_patterns(&store, &adj, e(&store, "a"), &WalkBudget::Exhaustive, 3);
        assert!(found.is_empty(), "unexpected instances {found:?}");
    }

    #[test]
    fn mirror_reverses_order_and_flips_direction() {
        let (store, _) = graph(&[("a", "r1", "b"), ("b", "r2", "c")], &[]);
        let b = store.num_base_relations();
        let r1 = r(&store, "r1");
        let r2inv = RelationId(r(&store, "r2").0 + b);
        let p = SpPattern::new(vec![r1, r2inv]);
        assert_eq!(p.mirror(&store), vec![r(&store, "r2"), RelationId(r1.0 + b)]);
        assert_eq!(p.full(&store), vec![r1, r2inv, r(&store, "r2"), RelationId(r1.0 + b)]);
    }

    /// Oracle: enumerate every directed walk of length 2k with plain DFS over
    /// the adjacency, keep those whose step sequence satisfies the mirror
    /// predicate and whose end differs from the start.
    fn oracle_instances(
        store: &TripleStore,
        adj: &Adjacency,
        start: EntityId,
        max_half: usize,
    ) -> BTreeSet<SpInstance> {
        fn walks(
            adj: &Adjacency,
            node: EntityId,
            len: usize,
            path: &mut Vec<(EntityId, RelationId, EntityId)>,
            out: &mut Vec<Vec<(EntityId, RelationId, EntityId)>>,
        ) {
            if len == 0 {
                out.push(path.clone());
                return;
            }
            for &(rel, next) in adj.neighbors(node) {
                path.push((node, rel, next));
                walks(adj, next, len - 1, path, out);
                path.pop();
            }
        }
        let mut out = BTreeSet::new();
        for k in 1..=max_half {
            let mut all = Vec::new();
            walks(adj, start, 2 * k, &mut Vec::new(), &mut all);
            for w in all {
                let seq: Vec<RelationId> = w.iter().map(|&(_, r, _)| r).collect();
                let symmetric = (0..k).all(|i| seq[2 * k - 1 - i] == flipped(store, seq[i]));
                let end = w.last().unwrap().2;
                if symmetric && end != start {
                    let (f, l) = (w[0], w[2 * k - 1]);
                    out.insert(SpInstance {
                        pattern: SpPattern::new(seq[..k].to_vec()),
                        start,
                        end,
                        first: step_triple(store, f.0, f.1, f.2),
                        last: step_triple(store, l.0, l.1, l.2),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn exhaustive_discovery_matches_full_walk_oracle() {
        // Dense little graph with parallel relations and a cycle.
        let (store, adj) = graph(
            &[
                ("u", "r1", "a"),
                ("u", "r2", "b"),
                ("b", "r1", "a"),
                ("c", "r1", "a"),
                ("c", "r2", "b"),
                ("b", "r3", "c"),
                ("d", "r3", "c"),
                ("d", "r2", "u"),
                ("a", "r3", "d"),
            ],
            &["u"],
        );
        let u = e(&store, "u");
        let mine = discover_sp_patterns(&store, &adj, u, &WalkBudget::Exhaustive, 3);
        let oracle = oracle_instances(&store, &adj, u, 3);
        assert_eq!(mine, oracle);
        assert!(!oracle.is_empty());
    }

    #[test]
    fn sampled_discovery_is_deterministic_subset_of_exhaustive() {
        let (store, adj) = graph(
            &[
                ("u", "r1", "a"),
                ("b", "r1", "a"),
                ("c", "r1", "a"),
                ("u", "r2", "d"),
                ("b", "r2", "d"),
                ("a", "r3", "d"),
            ],
            &["u"],
        );
        let u = e(&store, "u");
        let budget = WalkBudget::Sampled { walks: 40, seed: 7 };
        let sampled = discover_sp_patterns(&store, &adj, u, &budget, 3);
        let again = discover_sp_patterns(&store, &adj, u, &budget, 3);
        assert_eq!(sampled, again);
        let exhaustive = discover_sp_patterns(&store, &adj, u, &WalkBudget::Exhaustive, 3);
        assert!(sampled.is_subset(&exhaustive));
        assert!(!sampled.is_empty());
    }

    fn instance(store: &TripleStore, p: &SpPattern, s: &str, t: &str) -> SpInstance {
        // Boundary triples don't matter for counting; reuse the pattern's
        // first step between the endpoints.
        let first = step_triple(store, e(store, s), p.half[0], e(store, t));
        SpInstance {
            pattern: p.clone(),
            start: e(store, s),
            end: e(store, t),
            first,
            last: first,
        }
    }

    #[test]
    fn head_coverage_matches_the_published_counting_example() {
        // Five pairs with sp_i, four of which also have sp_j: 0.8 exactly.
        let (store, _) = graph(
            &[
                ("bob", "r1", "x"),
                ("zurich", "r2", "x"),
                ("sam", "r2", "x"),
                ("rome", "r2", "x"),
                ("amy", "r2", "x"),
                ("adam", "r2", "x"),
            ],
            &[],
        );
        let sp_i = SpPattern::new(vec![r(&store, "r1")]);
        let sp_j = SpPattern::new(vec![r(&store, "r2")]);
        let mut instances = BTreeSet::new();
        for end in ["zurich", "sam", "rome", "amy", "adam"] {
            instances.insert(instance(&store, &sp_i, "bob", end));
        }
        for end in ["zurich", "rome", "amy", "adam"] {
            instances.insert(instance(&store, &sp_j, "bob", end));
        }
        let (conf, support) = score_sp_rule(&instances, &sp_i, &sp_j).unwrap();
        assert_eq!(conf, 0.8);
        assert_eq!(support, 5);
        assert!(score_sp_rule(&instances, &SpPattern::new(vec![r(&store, "r1"), r(&store, "r2")]), &sp_j).is_none());
    }

    #[test]
    fn head_coverage_matches_counting_oracle_on_random_pairs() {
        let (store, _) = graph(&[("a", "p", "b"), ("a", "q", "b")], &[]);
        let names: Vec<String> = (0..12).map(|i| format!("n{i}")).collect();
        let mut store = store;
        for n in &names {
            store.entities.intern(n);
        }
        let sp_i = SpPattern::new(vec![r(&store, "p")]);
        let sp_j = SpPattern::new(vec![r(&store, "q")]);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut instances = BTreeSet::new();
        let mut i_pairs = BTreeSet::new();
        let mut j_pairs = BTreeSet::new();
        for _ in 0..50 {
            let s = &names[rng.gen_range(0..names.len())];
            let t = &names[rng.gen_range(0..names.len())];
            if s == t {
                continue;
            }
            if rng.gen_bool(0.6) {
                instances.insert(instance(&store, &sp_i, s, t));
                i_pairs.insert((e(&store, s), e(&store, t)));
            }
            if rng.gen_bool(0.5) {
                instances.insert(instance(&store, &sp_j, s, t));
                j_pairs.insert((e(&store, s), e(&store, t)));
            }
        }
        let (conf, support) = score_sp_rule(&instances, &sp_i, &sp_j).unwrap();
        let both = i_pairs.intersection(&j_pairs).count();
        assert_eq!(support, i_pairs.len());
        assert!((conf - both as f64 / i_pairs.len() as f64).abs() < 1e-15);
    }

    /// Ten distinct ends connected to `u` by sp_i (via per-end middles), nine
    /// of them also carrying the sp_j suffix. Support 10, confidence 0.9.
    fn mining_fixture() -> (TripleStore, Adjacency) {
        let mut edges: Vec<(String, String, String)> = Vec::new();
        for i in 0..10 {
            edges.push(("u".into(), "p".into(), format!("m{i}")));
            edges.push((format!("end{i}"), "p".into(), format!("m{i}")));
            if i < 9 {
                edges.push(("u".into(), "q".into(), format!("w{i}")));
                edges.push((format!("end{i}"), "q".into(), format!("w{i}")));
            }
        }
        let borrowed: Vec<(&str, &str, &str)> =
            edges.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())).collect();
        graph(&borrowed, &["u"])
    }

    #[test]
    fn mining_keeps_rules_over_support_and_confidence_floors() {
        let (store, adj) = mining_fixture();
        let cfg = SpMineConfig { budget: WalkBudget::Exhaustive, max_half_len: 1, ..Default::default() };
        let result = mine_sp_rules(&store, &adj, &cfg);
        let p = SpPattern::new(vec![r(&store, "p")]);
        let q = SpPattern::new(vec![r(&store, "q")]);
        let found = result.rules.iter().find(|ru| ru.premise == p && ru.conclusion == q);
        let rule = found.expect("p => q should survive");
        assert_eq!(rule.support, 10);
        assert!((rule.confidence - 0.9).abs() < 1e-15);
        // q => p has confidence 1.0 but support 9: fails a floor of 10.
        let strict = SpMineConfig { min_support: 10, budget: WalkBudget::Exhaustive, max_half_len: 1, ..Default::default() };
        let result = mine_sp_rules(&store, &adj, &strict);
        assert!(result.rules.iter().all(|ru| !(ru.premise == q && ru.conclusion == p)));
    }

    #[test]
    fn grounding_recovers_missing_first_edge() {
        // sp_i: u-p->m<-p-end. sp_j suffix present: end-q->f. Missing (u,q,f).
        let (store, adj) = graph(
            &[("u", "p", "m"), ("end", "p", "m"), ("end", "q", "f")],
            &["u"],
        );
        let rule = SpRule {
            premise: SpPattern::new(vec![r(&store, "p")]),
            conclusion: SpPattern::new(vec![r(&store, "q")]),
            confidence: 0.8,
            support: 5,
        };
        let instances =
            discover_sp_patterns(&store, &adj, e(&store, "u"), &WalkBudget::Exhaustive, 1);
        let grounded = ground_sp(&rule, &instances, &store, &adj);
        assert_eq!(grounded.len(), 1);
        let g = &grounded[0];
        assert_eq!(g.kind, RuleKind::Sp);
        assert_eq!(g.conclusion, Triple::new(e(&store, "u"), r(&store, "q"), e(&store, "f")));
        assert_eq!(
            g.premises,
            vec![
                Triple::new(e(&store, "u"), r(&store, "p"), e(&store, "m")),
                Triple::new(e(&store, "end"), r(&store, "p"), e(&store, "m")),
                Triple::new(e(&store, "end"), r(&store, "q"), e(&store, "f")),
            ]
        );
    }

    #[test]
    fn grounding_skips_conclusions_already_present() {
        let (store, adj) = graph(
            &[("u", "p", "m"), ("end", "p", "m"), ("end", "q", "f"), ("u", "q", "f")],
            &["u"],
        );
        let rule = SpRule {
            premise: SpPattern::new(vec![r(&store, "p")]),
            conclusion: SpPattern::new(vec![r(&store, "q")]),
            confidence: 0.8,
            support: 5,
        };
        let instances =
            discover_sp_patterns(&store, &adj, e(&store, "u"), &WalkBudget::Exhaustive, 1);
        assert!(ground_sp(&rule, &instances, &store, &adj).is_empty());
    }

    /// Oracle for grounding: enumerate candidate first edges directly. For
    /// every entity w and every forward walk w -> ... -> end matching the
    /// conclusion suffix, pair it with every premise instance ending at end.
    #[test]
    fn grounding_matches_exhaustive_path_matcher() {
        let (store, adj) = graph(
            &[
                ("u", "p", "m1"),
                ("e1", "p", "m1"),
                ("u", "p", "m2"),
                ("e2", "p", "m2"),
                ("e1", "q", "f1"),
                ("f1", "s", "g1"),
                ("e2", "q", "f2"),
                ("u", "q", "f3"),
                ("f3", "s", "g1"),
            ],
            &["u"],
        );
        // Conclusion pattern of half length 2: u -q-> f -s-> g <-s- f' <-q- end.
        let rule = SpRule {
            premise: SpPattern::new(vec![r(&store, "p")]),
            conclusion: SpPattern::new(vec![r(&store, "q"), r(&store, "s")]),
            confidence: 0.9,
            support: 5,
        };
        let instances =
            discover_sp_patterns(&store, &adj, e(&store, "u"), &WalkBudget::Exhaustive, 3);
        let grounded: BTreeSet<GroundRule> =
            ground_sp(&rule, &instances, &store, &adj).into_iter().collect();

        // Independent enumeration with forward walks.
        let full = rule.conclusion.full(&store);
        let mut expected = BTreeSet::new();
        for inst in &instances {
            if inst.pattern != rule.premise {
                continue;
            }
            for w1 in 0..store.entities.len() {
                let w1 = EntityId(w1);
                // All forward walks from w1 along full[1..], tracking edges.
                fn fwd(
                    store: &TripleStore,
                    adj: &Adjacency,
                    node: EntityId,
                    steps: &[RelationId],
                    edges: &mut Vec<Triple>,
                    out: &mut Vec<(EntityId, Vec<Triple>)>,
                ) {
                    match steps.first() {
                        None => out.push((node, edges.clone())),
                        Some(&s) => {
                            for &(rel, next) in adj.neighbors(node) {
                                if rel == s {
                                    edges.push(step_triple(store, node, rel, next));
                                    fwd(store, adj, next, &steps[1..], edges, out);
                                    edges.pop();
                                }
                            }
                        }
                    }
                }
                let mut walks = Vec::new();
                fwd(&store, &adj, w1, &full[1..], &mut Vec::new(), &mut walks);
                for (end, edges) in walks {
                    if end != inst.end {
                        continue;
                    }
                    let conclusion = step_triple(&store, inst.start, full[0], w1);
                    if store.in_observed_or_aux(&conclusion) {
                        continue;
                    }
                    expected.insert(GroundRule {
                        kind: RuleKind::Sp,
                        confidence: rule.confidence,
                        premises: vec![inst.first, inst.last, *edges.last().unwrap()],
                        conclusion,
                    });
                }
            }
        }
        assert_eq!(grounded, expected);
        assert!(!expected.is_empty());
    }

    #[test]
    fn rule_dsl_round_trips() {
        let (store, _) = graph(&[("a", "r1", "b"), ("a", "r2", "b"), ("a", "r3", "b")], &[]);
        let text = "sp[fwd:r1,bwd:r2] => sp[fwd:r1,fwd:r3]\t0.85\t7\n";
        let rules = parse_sp_rules_str(text, &store, &fake_path()).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].premise.half.len(), 2);
        assert!(store.is_inverse(rules[0].premise.half[1]));
        assert_eq!(format_sp_rules(&rules, &store), text);

        for bad in [
            "sp[fwd:r1] => sp[fwd:nope]\t0.8\t5\n",
            "sp[fwd:r1] sp[fwd:r2]\t0.8\t5\n",
            "sp[up:r1] => sp[fwd:r2]\t0.8\t5\n",
            "sp[fwd:r1] => sp[fwd:r2]\t1.4\t5\n",
            "sp[fwd:r1,fwd:r1,fwd:r1,fwd:r1] => sp[fwd:r2]\t0.8\t5\n",
        ] {
            assert!(parse_sp_rules_str(bad, &store, &fake_path()).is_err(), "{bad:?} should fail");
        }
    }
}
