//! Product t-norm truth calculus and the closed-form soft-label solver.
//!
//! Virtual triples get a label s ∈ [0,1] that stays close to the model's own
//! truth estimate I while being pulled up by the rules that concluded them.
//! The underlying program (squared deviation plus C-weighted slack per ground
//! rule, labels boxed to [0,1]) is convex and separable per triple, so the
//! solver is a single clamped affine expression, not an iterative loop.

use std::collections::BTreeMap;

use crate::rules::GroundRule;
use crate::store::Triple;
use crate::{Error, Result};

pub fn and(a: f64, b: f64) -> f64 {
    a * b
}

pub fn or(a: f64, b: f64) -> f64 {
    a + b - a * b
}

pub fn not(a: f64) -> f64 {
    1.0 - a
}

/// Truth of `premise => conclusion` under the product t-norm:
/// p·c − p + 1. Vacuously 1 when the premise is false.
pub fn implication(premise: f64, conclusion: f64) -> f64 {
    premise * conclusion - premise + 1.0
}

pub fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Truth of a ground rule as a function of its conclusion's soft label s:
/// an affine form slope·s + intercept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTruth {
    pub slope: f64,
    pub intercept: f64,
}

impl AffineTruth {
    pub fn at(&self, s: f64) -> f64 {
        self.slope * s + self.intercept
    }
}

/// Conditional truth of a grounding given premise truths: conjoining the
/// premises gives P = Π truths, and the implication becomes P·s − P + 1,
/// i.e. slope P and intercept 1 − P. The slope is also the gradient of the
/// rule's truth in s, which is what the closed form sums.
pub fn conditional_truth(premise_truths: &[f64]) -> AffineTruth {
    let p: f64 = premise_truths.iter().product();
    AffineTruth { slope: p, intercept: 1.0 - p }
}

#[derive(Debug, Clone, Default)]
pub struct SoftLabelTable {
    pub labels: BTreeMap<Triple, f64>,
    pub c: f64,
}

impl SoftLabelTable {
    pub fn get(&self, t: &Triple) -> Option<f64> {
        self.labels.get(t).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Solve for every virtual triple's soft label:
///
/// s(x) = clamp01( I(x) + C · Σ_f λ_f · Π(premise truths of f) )
///
/// `score` supplies I(·) for the virtual triple and all premises, typically
/// the decoder's logistic probability under the current embeddings. A triple
/// with no groundings degenerates to s = clamp01(I).
pub fn solve_soft_labels(
    groundings: &BTreeMap<Triple, Vec<GroundRule>>,
    mut score: impl FnMut(&Triple) -> Option<f64>,
    c: f64,
) -> Result<SoftLabelTable> {
    let mut need = |t: &Triple| -> Result<f64> {
        score(t).ok_or_else(|| {
            Error::Data(format!(
                "no score for triple ({}, {}, {})",
                t.head.0, t.relation.0, t.tail.0
            ))
        })
    };
    let mut table = SoftLabelTable { labels: BTreeMap::new(), c };
    for (triple, rules) in groundings {
        let prior = need(triple)?;
        let mut pull = 0.0;
        for g in rules {
            let truths = g
                .premises
                .iter()
                .map(|p| need(p))
                .collect::<Result<Vec<f64>>>()?;
            pull += g.confidence * conditional_truth(&truths).slope;
        }
        table.labels.insert(*triple, clamp01(prior + c * pull));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::RuleKind;
    use crate::store::{EntityId, RelationId};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn tnorm_identities_hold_over_sampled_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..500 {
            let t: f64 = rng.gen();
            let u: f64 = rng.gen();
            assert!((and(1.0, t) - t).abs() < 1e-15);
            assert!((or(0.0, t) - t).abs() < 1e-15);
            assert!((not(not(t)) - t).abs() < 1e-15);
            for v in [and(t, u), or(t, u), not(t), implication(t, u)] {
                assert!((0.0..=1.0).contains(&v), "{v} out of range for t={t}, u={u}");
            }
        }
    }

    #[test]
    fn implication_spot_values() {
        assert_eq!(implication(0.0, 0.3), 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t: f64 = rng.gen();
            assert!((implication(1.0, t) - t).abs() < 1e-15);
        }
        assert!((implication(0.7, 0.4) - 0.58).abs() < 1e-15);
    }

    #[test]
    fn conditional_truth_multiplies_premises() {
        let a = conditional_truth(&[1.0]);
        assert_eq!((a.slope, a.intercept), (1.0, 0.0));
        assert_eq!(conditional_truth(&[1.0, 1.0, 1.0]).slope, 1.0);
        let b = conditional_truth(&[0.9, 0.8]);
        assert!((b.slope - 0.72).abs() < 1e-15);
        assert!((b.intercept - 0.28).abs() < 1e-15);
        assert!((b.at(0.5) - (0.72 * 0.5 + 0.28)).abs() < 1e-15);
    }

    fn triple(h: usize, r: usize, t: usize) -> Triple {
        Triple::new(EntityId(h), RelationId(r), EntityId(t))
    }

    fn grounding(confidence: f64, premises: &[Triple], conclusion: Triple) -> GroundRule {
        GroundRule { kind: RuleKind::Logic, confidence, premises: premises.to_vec(), conclusion }
    }

    #[test]
    fn closed_form_spot_values() {
        let vn = triple(0, 0, 1);
        let premise = triple(2, 0, 1);
        let mut map = BTreeMap::new();
        map.insert(vn, vec![grounding(0.9, &[premise], vn)]);
        let score = |t: &Triple| Some(if *t == vn { 0.5 } else { 1.0 });
        let table = solve_soft_labels(&map, score, 0.01).unwrap();
        assert!((table.get(&vn).unwrap() - 0.509).abs() < 1e-12);

        // Upper truncation.
        let score = |t: &Triple| Some(if *t == vn { 0.999 } else { 1.0 });
        let mut map1 = BTreeMap::new();
        map1.insert(vn, vec![grounding(1.0, &[premise], vn)]);
        let table = solve_soft_labels(&map1, score, 0.01).unwrap();
        assert_eq!(table.get(&vn).unwrap(), 1.0);
    }

    #[test]
    fn zero_penalty_returns_the_prior() {
        let vn = triple(0, 0, 1);
        let mut map = BTreeMap::new();
        map.insert(vn, vec![grounding(0.9, &[triple(2, 0, 1)], vn)]);
        let table = solve_soft_labels(&map, |_| Some(0.3), 0.0).unwrap();
        assert_eq!(table.get(&vn).unwrap(), 0.3);
    }

    #[test]
    fn missing_score_is_an_error_naming_the_triple() {
        let vn = triple(0, 0, 1);
        let premise = triple(2, 0, 1);
        let mut map = BTreeMap::new();
        map.insert(vn, vec![grounding(0.9, &[premise], vn)]);
        let err = solve_soft_labels(&map, |t| (*t == vn).then_some(0.5), 0.01).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 0, 1)"), "unhelpful error {msg:?}");
    }

    #[test]
    fn labels_are_monotone_in_prior_confidence_and_premise_truth() {
        let vn = triple(0, 0, 1);
        let premise = triple(2, 0, 1);
        let solve = |prior: f64, lam: f64, truth: f64| {
            let mut map = BTreeMap::new();
            map.insert(vn, vec![grounding(lam, &[premise], vn)]);
            let score = move |t: &Triple| Some(if *t == vn { prior } else { truth });
            solve_soft_labels(&map, score, 0.01).unwrap().get(&vn).unwrap()
        };
        let base = solve(0.4, 0.8, 0.7);
        assert!(solve(0.5, 0.8, 0.7) > base);
        assert!(solve(0.4, 0.9, 0.7) > base);
        assert!(solve(0.4, 0.8, 0.9) > base);
    }

    /// Projected gradient descent on the original program with the slack at
    /// its conditional optimum: G(s) = (s−I)²/2 + C·Σ max(0, λ(1−π_f(s))).
    /// The hinge condition is evaluated numerically each step; `>=` picks the
    /// one-sided derivative from inside the box at the s=1 kink, where the
    /// hinge argument touches zero.
    fn pgd_oracle(prior: f64, groundings: &[(f64, Vec<f64>)], c: f64) -> f64 {
        let mut s: f64 = 0.5;
        for _ in 0..2000 {
            let mut grad = s - prior;
            for (lam, truths) in groundings {
                let p: f64 = truths.iter().product();
                let pi = p * s - p + 1.0;
                if lam * (1.0 - pi) >= 0.0 {
                    grad -= c * lam * p;
                }
            }
            s = (s - 0.5 * grad).clamp(0.0, 1.0);
        }
        s
    }

    /// Second, derivative-free check: ternary search on G over [0,1]. The
    /// quadratic term makes G strictly convex, so interval shrinking finds
    /// the minimum without touching any gradient expression.
    fn ternary_oracle(prior: f64, groundings: &[(f64, Vec<f64>)], c: f64) -> f64 {
        let g = |s: f64| -> f64 {
            let mut v = 0.5 * (s - prior) * (s - prior);
            for (lam, truths) in groundings {
                let p: f64 = truths.iter().product();
                let pi = p * s - p + 1.0;
                v += c * (lam * (1.0 - pi)).max(0.0);
            }
            v
        };
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if g(m1) <= g(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn closed_form_matches_projected_gradient_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for case in 0..8 {
            let vn = triple(0, 0, 1);
            // Engineer clamp boundaries in two cases.
            let prior = match case {
                0 => 0.999,
                1 => 0.0,
                _ => rng.gen(),
            };
            let n_rules = if case == 0 { 3 } else { rng.gen_range(0..4) };
            let mut spec: Vec<(f64, Vec<f64>)> = Vec::new();
            let mut map = BTreeMap::new();
            let mut scores = BTreeMap::new();
            scores.insert(vn, prior);
            let mut rules = Vec::new();
            for g in 0..n_rules {
                let lam = if case == 0 { 1.0 } else { rng.gen() };
                let n_prem = rng.gen_range(1..=3);
                let mut truths = Vec::new();
                let mut premises = Vec::new();
                for p in 0..n_prem {
                    let t = triple(10 + g * 4 + p, 1, 2);
                    let truth = if case == 0 { 1.0 } else { rng.gen() };
                    scores.insert(t, truth);
                    truths.push(truth);
                    premises.push(t);
                }
                rules.push(grounding(lam, &premises, vn));
                spec.push((lam, truths));
            }
            map.insert(vn, rules);
            let table = solve_soft_labels(&map, |t| scores.get(t).copied(), 0.01).unwrap();
            let got = table.get(&vn).unwrap();
            let want = pgd_oracle(prior, &spec, 0.01);
            assert!(
                (got - want).abs() < 1e-6,
                "case {case}: closed form {got} vs pgd oracle {want}"
            );
            let want2 = ternary_oracle(prior, &spec, 0.01);
            assert!(
                (got - want2).abs() < 1e-6,
                "case {case}: closed form {got} vs ternary oracle {want2}"
            );
        }
    }
}
