//! Iterative optimization over hard-labeled and soft-labeled triples.
//!
//! Each epoch shuffles the observed triples into minibatches and pairs every
//! minibatch with a fixed subset of the virtual neighbors (assigned by
//! hashing their unseen entity, so one entity's virtual neighborhood trains
//! together). Per minibatch the current model scores the batch's virtual
//! conclusions and rule premises, the soft labels are re-solved from those
//! scores, and one ADAM step minimizes cross entropy on hard labels plus
//! cross entropy against the fresh soft labels plus an L2 penalty on the
//! embedding tables.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{evaluate_link_prediction, score_probabilities};
use crate::model::{mix, EncoderConfig, EncoderGraph, Forward, ModelParams, ParamVars};
use crate::rules::GroundRule;
use crate::softlabel::solve_soft_labels;
use crate::store::{EntityId, Triple, TripleStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epochs; each runs `minibatches` update steps.
    pub epochs: usize,
    pub minibatches: usize,
    /// Negatives sampled per positive triple.
    pub negatives: usize,
    pub learning_rate: f64,
    /// L2 coefficient on the entity, unknown, and relation embedding tables.
    pub l2: f64,
    /// Global-norm gradient clip.
    pub clip_norm: f64,
    /// Rule-consistency weight handed to the soft-label solver.
    pub penalty_c: f64,
    pub seed: u64,
    /// Compute validation MRR every this many epochs (1 = every epoch).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            minibatches: 100,
            negatives: 64,
            learning_rate: 0.002,
            l2: 0.001,
            clip_norm: 5.0,
            penalty_c: 0.01,
            seed: 0,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.minibatches == 0 {
            return Err(Error::Data("epochs and minibatches must be at least 1".into()));
        }
        if self.learning_rate < 0.0 || self.l2 < 0.0 || self.penalty_c < 0.0 {
            return Err(Error::Data("negative learning rate, l2, or penalty".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Data("clip norm must be positive".into()));
        }
        if self.validate_every == 0 {
            return Err(Error::Data("validate_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// `k` corruptions of one positive: head or tail (uniform) replaced by a
/// uniform entity from `pool`. Corruptions that reproduce a triple in O∪AUX
/// are resampled up to 100 times, then kept as tolerable label noise.
pub fn sample_negatives<R: Rng>(
    positive: &Triple,
    k: usize,
    store: &TripleStore,
    pool: &[EntityId],
    rng: &mut R,
) -> Vec<Triple> {
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut candidate = *positive;
        for _ in 0..100 {
            let e = pool[rng.gen_range(0..pool.len())];
            candidate = if rng.gen_bool(0.5) {
                Triple::new(e, positive.relation, positive.tail)
            } else {
                Triple::new(positive.head, positive.relation, e)
            };
            if !store.in_observed_or_aux(&candidate) {
                break;
            }
        }
        out.push(candidate);
    }
    out
}

/// Virtual triples bucketed into `minibatches` groups by hashing their
/// unseen endpoint, keeping each entity's virtual neighborhood in one batch.
pub fn vn_batch_assignment(store: &TripleStore, minibatches: usize) -> Vec<Vec<Triple>> {
    let mut batches = vec![Vec::new(); minibatches];
    for t in &store.virtual_ {
        let owner = if store.is_unseen(t.head) { t.head } else { t.tail };
        let idx = (mix(0x5EED, owner.0 as u64, 0) % minibatches as u64) as usize;
        batches[idx].push(*t);
    }
    batches
}

/// Mean clamped cross entropy between decoder probabilities of `triples` and
/// constant `labels`.
fn mean_cross_entropy(fwd: &mut Forward, triples: &[Triple], labels: &[f64]) -> Result<Var> {
    debug_assert_eq!(triples.len(), labels.len());
    let raw = fwd.decode_batch(triples)?;
    let p = fwd.tape.logistic(raw)?;
    let p = fwd.tape.clamp(p, 1e-7, 1.0 - 1e-7)?;
    let y = fwd.tape.constant(Tensor::vector(labels.to_vec()));
    let log_p = fwd.tape.log(p)?;
    let pos_term = fwd.tape.hadamard(y, log_p)?;
    let one = fwd.tape.constant(Tensor::scalar(1.0));
    let q = fwd.tape.sub(one, p)?;
    let not_y = fwd.tape.constant(Tensor::vector(labels.iter().map(|l| 1.0 - l).collect()));
    let log_q = fwd.tape.log(q)?;
    let neg_term = fwd.tape.hadamard(not_y, log_q)?;
    let total = fwd.tape.add(pos_term, neg_term)?;
    let mean = fwd.tape.mean(total)?;
    fwd.tape.scale_const(mean, -1.0)
}

fn l2_penalty(tape: &mut Tape, vars: &ParamVars, coeff: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for v in [vars.entity_emb, vars.unknown_emb, vars.rel_emb] {
        let sq = tape.hadamard(v, v)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    tape.scale_const(total.unwrap(), coeff)
}

/// The per-batch objective: mean cross entropy of the hard-labeled batch,
/// plus mean cross entropy of the soft-labeled virtual batch (omitted when
/// empty), plus the embedding L2 penalty.
pub fn batch_loss(
    fwd: &mut Forward,
    vars: &ParamVars,
    hard: &[(Triple, f64)],
    soft: &[(Triple, f64)],
    l2: f64,
) -> Result<Var> {
    let mut loss: Option<Var> = None;
    for group in [hard, soft] {
        if group.is_empty() {
            continue;
        }
        let triples: Vec<Triple> = group.iter().map(|&(t, _)| t).collect();
        let labels: Vec<f64> = group.iter().map(|&(_, y)| y).collect();
        let ce = mean_cross_entropy(fwd, &triples, &labels)?;
        loss = Some(match loss {
            None => ce,
            Some(l) => fwd.tape.add(l, ce)?,
        });
    }
    let mut loss =
        loss.ok_or_else(|| Error::Data("batch has neither hard nor soft examples".into()))?;
    if l2 > 0.0 {
        let pen = l2_penalty(fwd.tape, vars, l2)?;
        loss = fwd.tape.add(loss, pen)?;
    }
    Ok(loss)
}

/// ADAM with bias correction; one slot pair per parameter tensor in
/// [`ModelParams::named`] order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Adam {
        let shapes: Vec<Tensor> =
            params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: shapes.clone(), v: shapes }
    }

    /// One update. `grads` follows the named parameter order; `None` means
    /// the parameter was not touched this batch and contributes a zero
    /// gradient. Gradients are jointly rescaled when their global norm
    /// exceeds `clip`.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Option<Tensor>],
        clip: f64,
    ) -> Result<()> {
        let mut named = params.named_mut();
        if named.len() != grads.len() {
            return Err(Error::Shape {
                op: "adam",
                details: format!("{} gradients for {} parameters", grads.len(), named.len()),
            });
        }
        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            sq += g.sum_of_squares();
        }
        if !sq.is_finite() {
            return Err(Error::Numeric("gradient norm is not finite".into()));
        }
        let norm = sq.sqrt();
        let factor = if norm > clip { clip / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in named.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let g = grads[i].as_ref().map_or(0.0, |t| t.data()[j]) * factor;
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * g;
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (md[j] / bc1) / ((vd[j] / bc2).sqrt() + self.eps);
                pd[j] -= update;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the epoch's nonempty minibatches.
    pub loss: f64,
    pub validation_mrr: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters when a validation set exists, otherwise
    /// the final-epoch parameters.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// How many times the soft-label program was solved (0 under hard-rule
    /// or structure-only semantics).
    pub soft_solves: usize,
}

/// Run the training loop. The store's virtual partition and `groundings`
/// must already reflect the chosen ablation; this function only switches
/// labels (hard rules fix every soft label at 1) and trusts the encoder
/// config for the query layer.
pub fn train(
    store: &TripleStore,
    groundings: &BTreeMap<Triple, Vec<GroundRule>>,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    init: ModelParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if !enc_cfg.ablation.uses_virtual_neighbors() && !store.virtual_.is_empty() {
        return Err(Error::Data(
            "structure-only training must not receive virtual triples".into(),
        ));
    }
    let positives: Vec<Triple> = store.observed.iter().copied().collect();
    if positives.is_empty() {
        return Err(Error::Data("no observed triples to train on".into()));
    }
    for t in &store.virtual_ {
        if !groundings.contains_key(t) {
            return Err(Error::Data(format!(
                "virtual triple {} has no grounding entry",
                store.display_triple(t)
            )));
        }
    }

    let graph = EncoderGraph::build(store)?;
    let pool = store.observed_entities();
    let vn_batches = vn_batch_assignment(store, cfg.minibatches);
    let validation: Vec<Triple> = store.validation.iter().copied().collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut history = Vec::new();
    let mut soft_solves = 0usize;
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut shuffled = positives.clone();
    let chunk = positives.len().div_ceil(cfg.minibatches);

    for epoch in 0..cfg.epochs {
        shuffled.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches_run = 0usize;

        for b in 0..cfg.minibatches {
            let hard_pos = shuffled.get(b * chunk..((b + 1) * chunk).min(shuffled.len()));
            let hard_pos = hard_pos.unwrap_or(&[]);
            let vn_b = &vn_batches[b];
            if hard_pos.is_empty() && vn_b.is_empty() {
                continue;
            }

            let mut hard: Vec<(Triple, f64)> = Vec::new();
            for pos in hard_pos {
                hard.push((*pos, 1.0));
            }
            for pos in hard_pos {
                for neg in sample_negatives(pos, cfg.negatives, store, &pool, &mut rng) {
                    hard.push((neg, 0.0));
                }
            }

            let soft: Vec<(Triple, f64)> = if vn_b.is_empty() {
                Vec::new()
            } else if enc_cfg.ablation.hard_labels() {
                vn_b.iter().map(|t| (*t, 1.0)).collect()
            } else {
                let mut needed: Vec<Triple> = Vec::new();
                let mut batch_groundings: BTreeMap<Triple, Vec<GroundRule>> = BTreeMap::new();
                for t in vn_b {
                    let gs = &groundings[t];
                    needed.push(*t);
                    for g in gs {
                        needed.extend(g.premises.iter().copied());
                    }
                    batch_groundings.insert(*t, gs.clone());
                }
                needed.sort();
                needed.dedup();
                let probs = score_probabilities(store, &graph, &params, enc_cfg, &needed)?;
                let score_of: BTreeMap<Triple, f64> =
                    needed.into_iter().zip(probs).collect();
                let table = solve_soft_labels(
                    &batch_groundings,
                    |t| score_of.get(t).copied(),
                    cfg.penalty_c,
                )?;
                soft_solves += 1;
                vn_b.iter()
                    .map(|t| {
                        let s = table.get(t).expect("solver covers every batch conclusion");
                        (*t, s)
                    })
                    .collect()
            };

            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, &params, true);
            let mut fwd = Forward::with_vars(
                &mut tape,
                vars.clone(),
                &graph,
                enc_cfg,
                true,
                mix(cfg.seed, epoch as u64, b as u64),
            )?;
            let loss = batch_loss(&mut fwd, &vars, &hard, &soft, cfg.l2)?;
            drop(fwd);
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged to {loss_value} at epoch {epoch} batch {b}"
                )));
            }
            epoch_loss += loss_value;
            batches_run += 1;

            let grads = tape.backward(loss)?;
            let grad_vec: Vec<Option<Tensor>> =
                vars.ordered().into_iter().map(|v| grads.get(v).cloned()).collect();
            adam.step(&mut params, &grad_vec, cfg.clip_norm)?;
        }

        let mut record = EpochRecord {
            epoch,
            loss: epoch_loss / batches_run.max(1) as f64,
            validation_mrr: None,
        };
        if !validation.is_empty() && (epoch + 1) % cfg.validate_every == 0 {
            let outcome =
                evaluate_link_prediction(store, &graph, &params, enc_cfg, &validation)?;
            let mrr = outcome.report.mrr;
            record.validation_mrr = Some(mrr);
            if best.as_ref().map_or(true, |(_, m, _)| mrr > *m) {
                best = Some((epoch, mrr, params.clone()));
            }
        }
        history.push(record);
    }

    let (best_epoch, params) = match best {
        Some((e, _, p)) => (Some(e), p),
        None => (None, params),
    };
    Ok(TrainOutcome { params, history, best_epoch, soft_solves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ablation, DecoderKind};
    use crate::rules::RuleKind;
    use crate::store::RelationId;
    use crate::tape::grad_check;

    fn tiny_store() -> TripleStore {
        let mut store = TripleStore::default();
        let names = ["a", "b", "c", "d"];
        for n in names {
            store.entities.intern(n);
        }
        let r0 = RelationId(store.relations.intern("r0"));
        let r1 = RelationId(store.relations.intern("r1"));
        let e = |n: &str| EntityId(store.entities.get(n).unwrap());
        for (h, r, t) in [
            ("a", r0, "b"),
            ("b", r0, "c"),
            ("c", r1, "d"),
            ("d", r0, "a"),
            ("a", r1, "c"),
        ] {
            store.observed.insert(Triple::new(e(h), r, e(t)));
        }
        store
    }

    /// tiny_store plus one unseen entity with an auxiliary edge, one virtual
    /// triple, and a grounding justifying it.
    fn vn_store() -> (TripleStore, BTreeMap<Triple, Vec<GroundRule>>) {
        let mut store = tiny_store();
        let u = EntityId(store.entities.intern("u"));
        store.unseen.insert(u);
        let r0 = RelationId(store.relations.get("r0").unwrap());
        let r1 = RelationId(store.relations.get("r1").unwrap());
        let a = EntityId(store.entities.get("a").unwrap());
        let c = EntityId(store.entities.get("c").unwrap());
        let aux = Triple::new(u, r0, a);
        store.auxiliary.insert(aux);
        let vn = Triple::new(u, r1, c);
        store.virtual_.insert(vn);
        let grounding = GroundRule {
            kind: RuleKind::Logic,
            confidence: 0.9,
            premises: vec![aux],
            conclusion: vn,
        };
        let mut groundings = BTreeMap::new();
        groundings.insert(vn, vec![grounding]);
        (store, groundings)
    }

    fn small_enc(d: usize) -> EncoderConfig {
        let mut cfg = EncoderConfig::new(d, 2, DecoderKind::DistMult);
        cfg.dropout = 0.0;
        cfg
    }

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            minibatches: 2,
            negatives: 2,
            learning_rate: 0.05,
            l2: 0.0001,
            clip_norm: 5.0,
            penalty_c: 0.01,
            seed,
            validate_every: 1,
        }
    }

    #[test]
    fn two_entity_negatives_come_from_the_exhaustive_candidate_set() {
        let mut store = TripleStore::default();
        let a = EntityId(store.entities.intern("a"));
        let b = EntityId(store.entities.intern("b"));
        let r = RelationId(store.relations.intern("r"));
        let pos = Triple::new(a, r, b);
        store.observed.insert(pos);
        let pool = store.observed_entities();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let allowed = [Triple::new(b, r, b), Triple::new(a, r, a)];
        let mut seen = [false, false];
        for _ in 0..200 {
            for neg in sample_negatives(&pos, 1, &store, &pool, &mut rng) {
                let i = allowed.iter().position(|t| *t == neg).expect("negative outside candidate set");
                seen[i] = true;
            }
        }
        assert!(seen[0] && seen[1], "both corruptions should appear over 200 draws");
    }

    #[test]
    fn negatives_are_deterministic_under_a_seed() {
        let store = tiny_store();
        let pool = store.observed_entities();
        let pos = *store.observed.iter().next().unwrap();
        let mut r1 = ChaCha12Rng::seed_from_u64(7);
        let mut r2 = ChaCha12Rng::seed_from_u64(7);
        assert_eq!(
            sample_negatives(&pos, 16, &store, &pool, &mut r1),
            sample_negatives(&pos, 16, &store, &pool, &mut r2)
        );
    }

    #[test]
    fn negatives_avoid_true_triples_on_a_dense_graph() {
        // Half of all corruptions of (a, r, b) hit a true triple here, so
        // resampling must filter them.
        let mut store = TripleStore::default();
        for n in ["a", "b", "c", "d"] {
            store.entities.intern(n);
        }
        let r = RelationId(store.relations.intern("r"));
        let e = |n: &str| EntityId(store.entities.get(n).unwrap());
        for h in ["a", "b"] {
            for t in ["a", "b", "c", "d"] {
                store.observed.insert(Triple::new(e(h), r, e(t)));
            }
        }
        let pos = Triple::new(e("a"), r, e("b"));
        let pool = store.observed_entities();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for neg in sample_negatives(&pos, 500, &store, &pool, &mut rng) {
            assert!(!store.in_observed_or_aux(&neg), "emitted a true triple");
        }
    }

    #[test]
    fn single_positive_at_even_odds_costs_ln_two() {
        let store = tiny_store();
        let graph = EncoderGraph::build(&store).unwrap();
        let cfg = small_enc(4);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut params = ModelParams::init(4, store.num_base_relations(), &cfg, &mut rng);
        // Zero relation vectors force every raw score to 0, probability 1/2.
        params.rel_emb = Tensor::zeros(&[2, 4]);
        let pos = *store.observed.iter().next().unwrap();

        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &params, false);
        let mut fwd = Forward::with_vars(&mut tape, vars.clone(), &graph, &cfg, false, 0).unwrap();
        let loss = batch_loss(&mut fwd, &vars, &[(pos, 1.0)], &[], 0.0).unwrap();
        drop(fwd);
        let got = tape.value(loss).item().unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12, "{got}");
    }

    #[test]
    fn mixed_batch_loss_matches_hand_computation() {
        let (store, _) = vn_store();
        let graph = EncoderGraph::build(&store).unwrap();
        let cfg = small_enc(4);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let params = ModelParams::init(4, store.num_base_relations(), &cfg, &mut rng);

        let obs: Vec<Triple> = store.observed.iter().copied().collect();
        let hard = vec![(obs[0], 1.0), (obs[1], 1.0), (obs[2], 0.0)];
        let vn = *store.virtual_.iter().next().unwrap();
        let soft = vec![(vn, 0.85)];
        let l2 = 0.01;

        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &params, false);
        let mut fwd = Forward::with_vars(&mut tape, vars.clone(), &graph, &cfg, false, 0).unwrap();
        let loss = batch_loss(&mut fwd, &vars, &hard, &soft, l2).unwrap();
        drop(fwd);
        let got = tape.value(loss).item().unwrap();

        // Independent route: probabilities via the evaluation scorer, cross
        // entropy and the penalty by hand.
        let hard_triples: Vec<Triple> = hard.iter().map(|&(t, _)| t).collect();
        let probs = score_probabilities(&store, &graph, &params, &cfg, &hard_triples).unwrap();
        let ce = |p: f64, y: f64| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        };
        let hard_ce: f64 = probs
            .iter()
            .zip(&hard)
            .map(|(p, &(_, y))| ce(*p, y))
            .sum::<f64>()
            / hard.len() as f64;
        let vn_prob = score_probabilities(&store, &graph, &params, &cfg, &[vn]).unwrap()[0];
        let soft_ce = ce(vn_prob, 0.85);
        let pen = l2
            * (params.entity_emb.sum_of_squares()
                + params.unknown_emb.sum_of_squares()
                + params.rel_emb.sum_of_squares());
        let want = hard_ce + soft_ce + pen;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn soft_label_matching_probability_minimizes_the_soft_term() {
        // For fixed probability p, cross entropy against label s is minimized
        // at s = p, where it equals the Bernoulli entropy.
        let p: f64 = 0.73;
        let ce = |s: f64| -s * p.ln() - (1.0 - s) * (1.0 - p).ln();
        let entropy = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
        assert!((ce(p) - entropy).abs() < 1e-12);
        // ce is affine in s; the minimum over p for fixed s is at p = s.
        let ce_over_p = |q: f64| -0.73 * q.ln() - (1.0 - 0.73) * (1.0 - q).ln();
        for q in [0.1, 0.3, 0.5, 0.9, 0.99] {
            assert!(ce_over_p(q) >= ce_over_p(0.73) - 1e-12);
        }
    }

    #[test]
    fn batch_loss_gradients_match_finite_differences() {
        let (store, _) = vn_store();
        let graph = EncoderGraph::build(&store).unwrap();
        let cfg = small_enc(4);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let params = ModelParams::init(4, store.num_base_relations(), &cfg, &mut rng);
        let tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();

        let obs: Vec<Triple> = store.observed.iter().copied().collect();
        let hard = vec![(obs[0], 1.0), (obs[3], 0.0)];
        let vn = *store.virtual_.iter().next().unwrap();
        let soft = vec![(vn, 0.6)];
        let num_layers = cfg.num_layers();

        let report = grad_check(&tensors, 1e-5, 1e-6, &mut |tape, vars| {
            let pv = ParamVars::from_slice(vars, num_layers);
            let mut fwd = Forward::with_vars(tape, pv.clone(), &graph, &cfg, false, 0)?;
            batch_loss(&mut fwd, &pv, &hard, &soft, 0.001)
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let (store, groundings) = vn_store();
        let cfg = small_enc(4);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let init = ModelParams::init(4, store.num_base_relations(), &cfg, &mut rng);
        let frozen: Vec<Vec<f64>> =
            init.named().iter().map(|(_, t)| t.data().to_vec()).collect();
        let mut tc = quick_cfg(3, 1);
        tc.learning_rate = 0.0;
        let out = train(&store, &groundings, &cfg, &tc, init).unwrap();
        for ((_, t), before) in out.params.named().iter().zip(&frozen) {
            assert_eq!(t.data(), before.as_slice());
        }
    }

    #[test]
    fn training_is_deterministic_and_loss_falls_on_the_overfit_fixture() {
        let store = tiny_store();
        let cfg = small_enc(4);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let init = ModelParams::init(4, store.num_base_relations(), &cfg, &mut rng);
        let tc = quick_cfg(30, 2);
        let out1 = train(&store, &BTreeMap::new(), &cfg, &tc, init.clone()).unwrap();
        let out2 = train(&store, &BTreeMap::new(), &cfg, &tc, init).unwrap();
        let losses1: Vec<f64> = out1.history.iter().map(|r| r.loss).collect();
        let losses2: Vec<f64> = out2.history.iter().map(|r| r.loss).collect();
        assert_eq!(losses1, losses2, "same seed must give the same trajectory");
        assert!(
            losses1.last().unwrap() < &losses1[0],
            "loss should fall: {} -> {}",
            losses1[0],
            losses1.last().unwrap()
        );
        assert_eq!(out1.soft_solves, 0);
    }

    #[test]
    fn soft_labels_move_with_the_embeddings() {
        let (store, groundings) = vn_store();
        let cfg = small_enc(4);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let init = ModelParams::init(4, store.num_base_relations(), &cfg, &mut rng);
        let graph = EncoderGraph::build(&store).unwrap();
        let vn = *store.virtual_.iter().next().unwrap();
        let premise = groundings[&vn][0].premises[0];

        let solve_with = |params: &ModelParams| -> f64 {
            let probs =
                score_probabilities(&store, &graph, params, &cfg, &[vn, premise]).unwrap();
            let map: BTreeMap<Triple, f64> =
                [(vn, probs[0]), (premise, probs[1])].into_iter().collect();
            solve_soft_labels(&groundings, |t| map.get(t).copied(), 0.01)
                .unwrap()
                .get(&vn)
                .unwrap()
        };
        let before = solve_with(&init);
        let tc = quick_cfg(4, 3);
        let out = train(&store, &groundings, &cfg, &tc, init).unwrap();
        let after = solve_with(&out.params);
        assert_ne!(before, after, "labels should track the moving embeddings");
        // One virtual batch per epoch gets solved.
        assert_eq!(out.soft_solves, 4);
    }

    #[test]
    fn hard_rules_skip_the_solver_and_pin_labels_at_one() {
        let (store, groundings) = vn_store();
        let mut cfg = small_enc(4);
        cfg.ablation = Ablation::HardRules;
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let init = ModelParams::init(4, store.num_base_relations(), &cfg, &mut rng);
        let tc = quick_cfg(3, 4);
        let out = train(&store, &groundings, &cfg, &tc, init).unwrap();
        assert_eq!(out.soft_solves, 0);
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn structure_only_rejects_virtual_triples() {
        let (store, groundings) = vn_store();
        let mut cfg = small_enc(4);
        cfg.ablation = Ablation::StructureOnly;
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let init = ModelParams::init(4, store.num_base_relations(), &cfg, &mut rng);
        let err = train(&store, &groundings, &cfg, &quick_cfg(1, 0), init).unwrap_err();
        assert!(err.to_string().contains("virtual"), "{err}");
    }

    #[test]
    fn nan_parameters_abort_with_a_numeric_error() {
        let store = tiny_store();
        let cfg = small_enc(4);
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let mut init = ModelParams::init(4, store.num_base_relations(), &cfg, &mut rng);
        init.entity_emb.data_mut()[0] = f64::NAN;
        let err = train(&store, &BTreeMap::new(), &cfg, &quick_cfg(1, 0), init).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn validation_tracking_keeps_the_best_epoch() {
        let (mut store, groundings) = vn_store();
        // Validation triple: the unseen entity against an observed tail.
        let u = EntityId(store.entities.get("u").unwrap());
        let r0 = RelationId(store.relations.get("r0").unwrap());
        let b = EntityId(store.entities.get("b").unwrap());
        store.validation.insert(Triple::new(u, r0, b));
        let cfg = small_enc(4);
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let init = ModelParams::init(4, store.num_base_relations(), &cfg, &mut rng);
        let out = train(&store, &groundings, &cfg, &quick_cfg(3, 5), init).unwrap();
        let best_epoch = out.best_epoch.expect("validation ran");
        let best_mrr = out.history[best_epoch].validation_mrr.unwrap();
        for r in &out.history {
            if let Some(m) = r.validation_mrr {
                assert!(best_mrr >= m);
            }
        }
    }

    #[test]
    fn vn_batches_keep_an_entity_coherent_and_stable() {
        let (mut store, _) = vn_store();
        let v = EntityId(store.entities.intern("v"));
        store.unseen.insert(v);
        let r0 = RelationId(store.relations.get("r0").unwrap());
        let r1 = RelationId(store.relations.get("r1").unwrap());
        let b = EntityId(store.entities.get("b").unwrap());
        let d = EntityId(store.entities.get("d").unwrap());
        store.auxiliary.insert(Triple::new(v, r0, b));
        store.virtual_.insert(Triple::new(v, r1, b));
        store.virtual_.insert(Triple::new(v, r1, d));

        let batches1 = vn_batch_assignment(&store, 4);
        let batches2 = vn_batch_assignment(&store, 4);
        assert_eq!(batches1, batches2);
        let total: usize = batches1.iter().map(|b| b.len()).sum();
        assert_eq!(total, store.virtual_.len());
        for batch in &batches1 {
            // All of v's triples must share a batch: no batch holds a proper
            // nonempty subset of them.
            let v_count = batch.iter().filter(|t| t.head == v || t.tail == v).count();
            assert!(v_count == 0 || v_count == 2, "split neighborhood: {v_count}");
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut c = TrainConfig::default();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.clip_norm = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn adam_matches_a_scalar_reference_implementation() {
        // One-parameter quadratic: constant gradient g = 3, two steps.
        let mut params = ModelParams {
            entity_emb: Tensor::scalar(1.0),
            unknown_emb: Tensor::scalar(0.0),
            layer_weights: vec![Tensor::scalar(0.0)],
            layer_alphas: vec![Tensor::scalar(0.0)],
            attn_u: Tensor::scalar(0.0),
            attn_we: Tensor::scalar(0.0),
            attn_wq: Tensor::scalar(0.0),
            attn_zq: Tensor::scalar(0.0),
            rel_emb: Tensor::scalar(0.0),
        };
        let mut adam = Adam::new(&params, 0.1);
        let g = 3.0;
        let make_grads = || {
            let mut v: Vec<Option<Tensor>> = vec![None; 9];
            v[0] = Some(Tensor::scalar(g));
            v
        };
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut vv, mut x) = (0.0, 0.0, 1.0);
        for t in 1..=2 {
            adam.step(&mut params, &make_grads(), 100.0).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            vv = b2 * vv + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1f64(t, b1));
            let vh = vv / (1.0 - b1f64(t, b2));
            x -= 0.1 * mh / (vh.sqrt() + eps);
            assert!(
                (params.entity_emb.item().unwrap() - x).abs() < 1e-15,
                "step {t}: {} vs {x}",
                params.entity_emb.item().unwrap()
            );
        }

        // Clipping: norm 3 against clip 1.5 halves the gradient.
        let mut adam = Adam::new(&params, 0.1);
        let before = params.entity_emb.item().unwrap();
        adam.step(&mut params, &make_grads(), 1.5).unwrap();
        let clipped_g = g * (1.5 / 3.0);
        let mh = (1.0 - b1) * clipped_g / (1.0 - b1);
        let vh = (1.0 - b2) * clipped_g * clipped_g / (1.0 - b2);
        let want = before - 0.1 * mh / (vh.sqrt() + eps);
        assert!((params.entity_emb.item().unwrap() - want).abs() < 1e-15);
    }

    fn b1f64(t: usize, b: f64) -> f64 {
        b.powi(t as i32)
    }
}
