//! Triple classification and filtered link prediction.
//!
//! Classification fits one decision threshold per relation on validation
//! scores and reports test accuracy. Link prediction hides the slot opposite
//! a test triple's unseen endpoint, scores every observed entity as a
//! replacement, removes candidates that form some other known triple, and
//! ranks the truth with mean-tie ranks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::model::{decode_raw, logistic, EncoderConfig, EncoderGraph, Forward, ModelParams, ParamVars};
use crate::store::{EntityId, RelationId, Triple, TripleStore};
use crate::tape::Tape;
use crate::{Error, Result};

/// Per-relation decision thresholds; relations unseen in validation fall
/// back to the global one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationThresholds {
    pub per_relation: BTreeMap<usize, f64>,
    pub global: f64,
}

impl RelationThresholds {
    pub fn get(&self, r: RelationId) -> f64 {
        self.per_relation.get(&r.0).copied().unwrap_or(self.global)
    }
}

/// Best threshold for "predict true when score ≥ δ" and its accuracy.
/// Candidates are midpoints of consecutive distinct scores plus sentinels
/// below and above; a single distinct score offers {score, score + 1}.
/// Accuracy ties resolve toward the larger threshold.
fn best_threshold(pairs: &[(f64, bool)]) -> Option<(f64, f64)> {
    if pairs.is_empty() {
        return None;
    }
    let mut scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut candidates = Vec::new();
    if scores.len() == 1 {
        candidates.push(scores[0]);
        candidates.push(scores[0] + 1.0);
    } else {
        candidates.push(scores[0] - 1.0);
        for w in scores.windows(2) {
            candidates.push((w[0] + w[1]) / 2.0);
        }
        candidates.push(scores[scores.len() - 1] + 1.0);
    }
    let mut best = None;
    for &delta in &candidates {
        let correct = pairs.iter().filter(|&&(s, y)| (s >= delta) == y).count();
        let acc = correct as f64 / pairs.len() as f64;
        // Candidates ascend, so >= keeps the largest tied threshold.
        if best.map_or(true, |(_, a)| acc >= a) {
            best = Some((delta, acc));
        }
    }
    best
}

/// Fit per-relation thresholds on labeled validation scores.
pub fn fit_thresholds(scored: &[(Triple, bool, f64)]) -> Result<RelationThresholds> {
    let all: Vec<(f64, bool)> = scored.iter().map(|&(_, y, s)| (s, y)).collect();
    let (global, _) = best_threshold(&all)
        .ok_or_else(|| Error::Data("no validation scores to fit thresholds on".into()))?;
    let mut by_rel: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    for &(t, y, s) in scored {
        by_rel.entry(t.relation.0).or_default().push((s, y));
    }
    let per_relation = by_rel
        .into_iter()
        .filter_map(|(r, pairs)| best_threshold(&pairs).map(|(d, _)| (r, d)))
        .collect();
    Ok(RelationThresholds { per_relation, global })
}

/// Fraction of labeled test scores on the correct side of their relation's
/// threshold.
pub fn classification_accuracy(
    scored: &[(Triple, bool, f64)],
    thresholds: &RelationThresholds,
) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::Data("no test triples to classify".into()));
    }
    let correct = scored
        .iter()
        .filter(|&&(t, y, s)| (s >= thresholds.get(t.relation)) == y)
        .count();
    Ok(correct as f64 / scored.len() as f64)
}

/// One negative per positive by corrupting head or tail with an observed
/// entity; corruptions that hit a known triple are resampled up to a cap.
pub fn corruption_negatives(positives: &[Triple], store: &TripleStore, seed: u64) -> Vec<Triple> {
    let entities = store.observed_entities();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let known = |t: &Triple| {
        store.observed.contains(t)
            || store.auxiliary.contains(t)
            || store.validation.contains(t)
            || store.test.contains(t)
    };
    positives
        .iter()
        .map(|pos| {
            let mut candidate = *pos;
            for _ in 0..100 {
                let e = entities[rng.gen_range(0..entities.len())];
                candidate = if rng.gen_bool(0.5) {
                    Triple::new(e, pos.relation, pos.tail)
                } else {
                    Triple::new(pos.head, pos.relation, e)
                };
                if !known(&candidate) {
                    break;
                }
            }
            candidate
        })
        .collect()
}

/// Mean-tie rank of the truth among survivors: 1 + strictly higher + half
/// the other members of its tied block.
pub fn rank_with_mean_ties(truth_score: f64, others: &[f64]) -> f64 {
    let higher = others.iter().filter(|&&s| s > truth_score).count();
    let tied = others.iter().filter(|&&s| s == truth_score).count();
    higher as f64 + 1.0 + tied as f64 / 2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingReport {
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub ranks: Vec<f64>,
}

pub fn aggregate(ranks: Vec<f64>) -> Result<RankingReport> {
    if ranks.is_empty() {
        return Err(Error::Data("no ranks to aggregate".into()));
    }
    let n = ranks.len() as f64;
    let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RankingReport {
        mr: ranks.iter().sum::<f64>() / n,
        mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
        hits1: hits(1.0),
        hits3: hits(3.0),
        hits10: hits(10.0),
        ranks,
    })
}

/// Which slot of a test triple gets ranked over candidate entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HiddenSlot {
    Head,
    Tail,
}

/// Materialized query-aware embeddings over one frozen forward pass.
pub struct EmbeddingCache<'a> {
    fwd: Forward<'a>,
    values: BTreeMap<(EntityId, RelationId), Vec<f64>>,
}

impl<'a> EmbeddingCache<'a> {
    pub fn new(
        tape: &'a mut Tape,
        params: &ModelParams,
        graph: &'a EncoderGraph,
        cfg: &'a EncoderConfig,
    ) -> Result<EmbeddingCache<'a>> {
        let vars = ParamVars::register(tape, params, false);
        let fwd = Forward::with_vars(tape, vars, graph, cfg, false, 0)?;
        Ok(EmbeddingCache { fwd, values: BTreeMap::new() })
    }

    pub fn embedding(&mut self, e: EntityId, query: RelationId) -> Result<&[f64]> {
        if !self.values.contains_key(&(e, query)) {
            let v = self.fwd.embedding_values(e, query)?;
            self.values.insert((e, query), v);
        }
        Ok(&self.values[&(e, query)])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkPredictionOutcome {
    pub report: RankingReport,
    /// Test triples with two unseen endpoints cannot be ranked against
    /// observed candidates; they are skipped and counted.
    pub skipped_both_unseen: usize,
}

/// Which triple sets remove candidate completions before ranking. The full
/// filter (all four) is the standard protocol; narrower filters make ranks
/// strictly harder, never easier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSets {
    pub observed: bool,
    pub auxiliary: bool,
    pub validation: bool,
    pub test: bool,
}

impl Default for FilterSets {
    fn default() -> Self {
        FilterSets { observed: true, auxiliary: true, validation: true, test: true }
    }
}

/// Filtered ranking over every test triple. The slot opposite the unseen
/// endpoint is hidden and refilled with each observed entity; candidates
/// forming a triple known from O∪AUX∪validation∪test (other than the truth)
/// are removed before ranking.
pub fn evaluate_link_prediction(
    store: &TripleStore,
    graph: &EncoderGraph,
    params: &ModelParams,
    cfg: &EncoderConfig,
    triples: &[Triple],
) -> Result<LinkPredictionOutcome> {
    evaluate_link_prediction_with(store, graph, params, cfg, triples, FilterSets::default())
}

/// [`evaluate_link_prediction`] with a custom candidate filter.
pub fn evaluate_link_prediction_with(
    store: &TripleStore,
    graph: &EncoderGraph,
    params: &ModelParams,
    cfg: &EncoderConfig,
    triples: &[Triple],
    filter: FilterSets,
) -> Result<LinkPredictionOutcome> {
    let mut tape = Tape::new();
    let mut cache = EmbeddingCache::new(&mut tape, params, graph, cfg)?;
    let known = |t: &Triple| {
        (filter.observed && store.observed.contains(t))
            || (filter.auxiliary && store.auxiliary.contains(t))
            || (filter.validation && store.validation.contains(t))
            || (filter.test && store.test.contains(t))
    };
    // Candidates are the rows the encoder can score, which coincide with the
    // store's observed entities whenever graph and store are in sync.
    let candidates = graph.obs_entities.clone();
    let mut ranks = Vec::new();
    let mut skipped = 0usize;

    for t in triples {
        let head_unseen = store.is_unseen(t.head);
        let tail_unseen = store.is_unseen(t.tail);
        let slot = match (head_unseen, tail_unseen) {
            (true, true) => {
                skipped += 1;
                continue;
            }
            (true, false) => HiddenSlot::Tail,
            // Fully observed triples rank the tail slot too.
            _ => {
                if tail_unseen {
                    HiddenSlot::Head
                } else {
                    HiddenSlot::Tail
                }
            }
        };
        let truth_entity = match slot {
            HiddenSlot::Tail => t.tail,
            HiddenSlot::Head => t.head,
        };
        if !graph.is_observed(truth_entity) {
            return Err(Error::Data(format!(
                "ground truth {} of test triple {} is not an observed candidate",
                store.entity_label(truth_entity),
                store.display_triple(t)
            )));
        }

        let (fixed_query, cand_query) = match slot {
            HiddenSlot::Tail => (t.relation, graph.inverse(t.relation)),
            HiddenSlot::Head => (graph.inverse(t.relation), t.relation),
        };
        let fixed_entity = match slot {
            HiddenSlot::Tail => t.head,
            HiddenSlot::Head => t.tail,
        };
        let fixed_emb = cache.embedding(fixed_entity, fixed_query)?.to_vec();
        let rel_vec = params.rel_emb.row(t.relation.0).to_vec();

        let mut truth_score = None;
        let mut survivor_scores = Vec::new();
        for &c in &candidates {
            let completed = match slot {
                HiddenSlot::Tail => Triple::new(t.head, t.relation, c),
                HiddenSlot::Head => Triple::new(c, t.relation, t.tail),
            };
            let is_truth = c == truth_entity;
            if !is_truth && known(&completed) {
                continue;
            }
            let cand_emb = cache.embedding(c, cand_query)?;
            let raw = match slot {
                HiddenSlot::Tail => decode_raw(cfg.decoder, &fixed_emb, &rel_vec, cand_emb)?,
                HiddenSlot::Head => decode_raw(cfg.decoder, cand_emb, &rel_vec, &fixed_emb)?,
            };
            if is_truth {
                truth_score = Some(raw);
            } else {
                survivor_scores.push(raw);
            }
        }
        let truth_score = truth_score.expect("truth passed the candidate check above");
        ranks.push(rank_with_mean_ties(truth_score, &survivor_scores));
    }

    Ok(LinkPredictionOutcome { report: aggregate(ranks)?, skipped_both_unseen: skipped })
}

/// Logistic probabilities for arbitrary triples under a frozen model, in
/// input order. Used by classification and by soft-label snapshots.
pub fn score_probabilities(
    store: &TripleStore,
    graph: &EncoderGraph,
    params: &ModelParams,
    cfg: &EncoderConfig,
    triples: &[Triple],
) -> Result<Vec<f64>> {
    let _ = store;
    let mut tape = Tape::new();
    let mut cache = EmbeddingCache::new(&mut tape, params, graph, cfg)?;
    let mut out = Vec::with_capacity(triples.len());
    for t in triples {
        let h = cache.embedding(t.head, t.relation)?.to_vec();
        let tl = cache.embedding(t.tail, graph.inverse(t.relation))?;
        let raw = decode_raw(cfg.decoder, &h, params.rel_emb.row(t.relation.0), tl)?;
        out.push(logistic(raw));
    }
    Ok(out)
}
