//! Horn-style logic rules over relations: parsing, grounding against the
//! known triples, and assembly of the virtual-neighbor set.
//!
//! Rule syntax, one rule per line, confidence after a tab:
//!
//! ```text
//! (x,r1,y) => (x,r2,y)	0.92
//! (x,r1,z) & (z,r2,y) => (x,r3,y)	0.85
//! ```
//!
//! Premises have one or two atoms. A grounding instantiates every variable
//! against O∪AUX; its conclusion is a candidate virtual neighbor when it is
//! absent from O∪AUX and touches an unseen entity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::store::{EntityId, RelationId, Triple, TripleStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub head_var: String,
    pub relation: RelationId,
    pub tail_var: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogicRule {
    pub premises: Vec<Atom>,
    pub conclusion: Atom,
    pub confidence: f64,
}

impl LogicRule {
    pub fn display(&self, store: &TripleStore) -> String {
        let atom = |a: &Atom| {
            format!("({},{},{})", a.head_var, store.relations.name(a.relation.0), a.tail_var)
        };
        let premise = self.premises.iter().map(atom).collect::<Vec<_>>().join(" & ");
        format!("{} => {}", premise, atom(&self.conclusion))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RuleKind {
    Logic,
    Sp,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleKind::Logic => write!(f, "logic"),
            RuleKind::Sp => write!(f, "sp"),
        }
    }
}

/// A fully instantiated rule application. Premises are concrete triples from
/// O∪AUX; the conclusion is the inferred triple.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundRule {
    pub kind: RuleKind,
    pub confidence: f64,
    pub premises: Vec<Triple>,
    pub conclusion: Triple,
}

impl Eq for GroundRule {}

impl Ord for GroundRule {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.conclusion
            .cmp(&other.conclusion)
            .then(self.kind.cmp(&other.kind))
            .then(self.confidence.total_cmp(&other.confidence))
            .then(self.premises.cmp(&other.premises))
    }
}

impl PartialOrd for GroundRule {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl GroundRule {
    /// Preference order when several groundings conclude the same triple:
    /// higher confidence first, then logic over symmetric-path provenance,
    /// then the lexicographically smaller premise list.
    pub fn preferred_over(&self, other: &GroundRule) -> bool {
        match self.confidence.total_cmp(&other.confidence) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => match (self.kind, other.kind) {
                (RuleKind::Logic, RuleKind::Sp) => true,
                (RuleKind::Sp, RuleKind::Logic) => false,
                _ => self.premises < other.premises,
            },
        }
    }
}

#[derive(Debug, Default)]
pub struct ParsedRules {
    pub rules: Vec<LogicRule>,
    /// Rules discarded for confidence below the threshold.
    pub dropped: usize,
}

/// Parse a rule file, keeping rules with confidence at or above
/// `min_confidence`. Relations must already exist in the vocabulary.
pub fn parse_rules(path: &Path, store: &TripleStore, min_confidence: f64) -> Result<ParsedRules> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rules_str(&text, store, min_confidence, path)
}

pub fn parse_rules_str(
    text: &str,
    store: &TripleStore,
    min_confidence: f64,
    path: &Path,
) -> Result<ParsedRules> {
    let mut out = ParsedRules::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let (body, conf_text) = line.rsplit_once('\t').ok_or_else(|| {
            Error::parse(path, lineno, "expected rule<TAB>confidence")
        })?;
        let confidence: f64 = conf_text
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad confidence {conf_text:?}")))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::parse(path, lineno, format!("confidence {confidence} outside [0, 1]")));
        }
        let (premise_text, conclusion_text) = body
            .split_once("=>")
            .ok_or_else(|| Error::parse(path, lineno, "missing => separator"))?;
        let mut premises = Vec::new();
        for part in premise_text.split('&') {
            premises.push(parse_atom(part, store, path, lineno)?);
        }
        if premises.is_empty() || premises.len() > 2 {
            return Err(Error::parse(
                path,
                lineno,
                format!("premise must have 1 or 2 atoms, found {}", premises.len()),
            ));
        }
        let conclusion = parse_atom(conclusion_text, store, path, lineno)?;
        let bound: BTreeSet<&str> = premises
            .iter()
            .flat_map(|a| [a.head_var.as_str(), a.tail_var.as_str()])
            .collect();
        for v in [&conclusion.head_var, &conclusion.tail_var] {
            if !bound.contains(v.as_str()) {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("conclusion variable {v:?} not bound by any premise"),
                ));
            }
        }
        if confidence < min_confidence {
            out.dropped += 1;
            continue;
        }
        out.rules.push(LogicRule { premises, conclusion, confidence });
    }
    Ok(out)
}

fn parse_atom(text: &str, store: &TripleStore, path: &Path, lineno: usize) -> Result<Atom> {
    let t = text.trim();
    let inner = t
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::parse(path, lineno, format!("atom {t:?} not parenthesized")))?;
    let fields: Vec<&str> = inner.split(',').map(str::trim).collect();
    if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
        return Err(Error::parse(path, lineno, format!("atom {t:?} must be (var,relation,var)")));
    }
    let relation = store
        .relations
        .get(fields[1])
        .ok_or_else(|| Error::parse(path, lineno, format!("unknown relation {:?}", fields[1])))?;
    Ok(Atom {
        head_var: fields[0].to_string(),
        relation: RelationId(relation),
        tail_var: fields[2].to_string(),
    })
}

pub fn format_rules(rules: &[LogicRule], store: &TripleStore) -> String {
    let mut out = String::new();
    for r in rules {
        out.push_str(&r.display(store));
        out.push('\t');
        out.push_str(&format!("{}\n", r.confidence));
    }
    out
}

/// Instantiate every rule against O∪AUX. A grounding is emitted when all
/// premises match concrete triples, the conclusion is absent from O∪AUX, and
/// the conclusion touches at least one unseen entity.
pub fn ground_logic(rules: &[LogicRule], store: &TripleStore) -> Vec<GroundRule> {
    let mut by_relation: BTreeMap<RelationId, Vec<Triple>> = BTreeMap::new();
    for t in store.observed.iter().chain(store.auxiliary.iter()) {
        by_relation.entry(t.relation).or_default().push(*t);
    }
    let empty: Vec<Triple> = Vec::new();
    let mut out: BTreeSet<GroundRule> = BTreeSet::new();

    for rule in rules {
        let first = &rule.premises[0];
        for t1 in by_relation.get(&first.relation).unwrap_or(&empty) {
            let mut bindings: BTreeMap<&str, EntityId> = BTreeMap::new();
            if !bind(&mut bindings, first, t1) {
                continue;
            }
            match rule.premises.get(1) {
                None => {
                    if let Some(g) = conclude(rule, &bindings, &[*t1], store) {
                        out.insert(g);
                    }
                }
                Some(second) => {
                    for t2 in by_relation.get(&second.relation).unwrap_or(&empty) {
                        let mut b2 = bindings.clone();
                        if !bind(&mut b2, second, t2) {
                            continue;
                        }
                        if let Some(g) = conclude(rule, &b2, &[*t1, *t2], store) {
                            out.insert(g);
                        }
                    }
                }
            }
        }
    }
    out.into_iter().collect()
}

fn bind<'a>(bindings: &mut BTreeMap<&'a str, EntityId>, atom: &'a Atom, t: &Triple) -> bool {
    for (var, entity) in [(&atom.head_var, t.head), (&atom.tail_var, t.tail)] {
        match bindings.get(var.as_str()) {
            Some(&bound) if bound != entity => return false,
            Some(_) => {}
            None => {
                bindings.insert(var, entity);
            }
        }
    }
    true
}

fn conclude(
    rule: &LogicRule,
    bindings: &BTreeMap<&str, EntityId>,
    premises: &[Triple],
    store: &TripleStore,
) -> Option<GroundRule> {
    let head = *bindings.get(rule.conclusion.head_var.as_str())?;
    let tail = *bindings.get(rule.conclusion.tail_var.as_str())?;
    let conclusion = Triple::new(head, rule.conclusion.relation, tail);
    if store.in_observed_or_aux(&conclusion) {
        return None;
    }
    if !store.is_unseen(head) && !store.is_unseen(tail) {
        return None;
    }
    Some(GroundRule {
        kind: RuleKind::Logic,
        confidence: rule.confidence,
        premises: premises.to_vec(),
        conclusion,
    })
}

/// Virtual-neighbor set with the groundings backing each triple.
#[derive(Debug, Clone, Default)]
pub struct VirtualNeighborhood {
    pub triples: BTreeSet<Triple>,
    /// Groundings concluding each triple. With deduplication (the default)
    /// each list holds exactly the preferred grounding.
    pub groundings: BTreeMap<Triple, Vec<GroundRule>>,
    /// Conclusions rejected because both endpoints were unseen; such an edge
    /// would connect two untrained entities and cannot help aggregation.
    pub rejected_both_unseen: usize,
}

impl VirtualNeighborhood {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }
}

/// Assemble the virtual-neighbor set from groundings of any provenance.
///
/// Conclusions already in O∪AUX are skipped; conclusions must have exactly one
/// unseen endpoint. With `keep_all_groundings` every surviving grounding per
/// triple is retained (their contributions add up during label solving);
/// otherwise only the preferred one is kept.
pub fn generate_virtual_neighbors(
    groundings: &[GroundRule],
    store: &TripleStore,
    keep_all_groundings: bool,
) -> VirtualNeighborhood {
    let mut vn = VirtualNeighborhood::default();
    for g in groundings {
        let c = &g.conclusion;
        if store.in_observed_or_aux(c) {
            continue;
        }
        let ends = store.is_unseen(c.head) as usize + store.is_unseen(c.tail) as usize;
        if ends != 1 {
            if ends == 2 {
                vn.rejected_both_unseen += 1;
            }
            continue;
        }
        let entry = vn.groundings.entry(*c).or_default();
        if keep_all_groundings {
            if !entry.contains(g) {
                entry.push(g.clone());
            }
        } else if entry.is_empty() || g.preferred_over(&entry[0]) {
            entry.clear();
            entry.push(g.clone());
        }
        vn.triples.insert(*c);
    }
    vn
}
