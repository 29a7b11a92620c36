//! Partitioned triple storage with interned vocabularies and a bidirectional
//! adjacency index.
//!
//! Partitions: `observed` (both endpoints seen during training), `auxiliary`
//! (exactly one endpoint is an unseen entity), `virtual` (rule-inferred),
//! `validation`, and `test`. Relation identifiers live in an extended space:
//! base relations from the vocabulary, one inverse per base relation, and a
//! reserved self-connection id, so both edge directions carry their own
//! aggregation weights downstream.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple { head, relation, tail }
    }
}

/// Interned surface forms with dense ids in first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Vocab::default()
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `surface_form<TAB>id` per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, name) in self.names.iter().enumerate() {
            out.push_str(name);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocab::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (name, id) = match (parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(i), None) => (n, i),
                _ => return Err(Error::parse(path, lineno + 1, "expected surface_form<TAB>id")),
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(path, lineno + 1, format!("bad id {id:?}")))?;
            if id != vocab.len() {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("id {} out of order, expected {}", id, vocab.len()),
                ));
            }
            if vocab.index.contains_key(name) {
                return Err(Error::parse(path, lineno + 1, format!("duplicate entry {name:?}")));
            }
            vocab.intern(name);
        }
        Ok(vocab)
    }
}

/// Directions a relation can be traversed in when walking the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Forward => write!(f, "fwd"),
            Direction::Backward => write!(f, "bwd"),
        }
    }
}

/// Which partitions an adjacency index covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partitions {
    pub observed: bool,
    pub auxiliary: bool,
    pub virtual_: bool,
}

impl Partitions {
    pub const OBSERVED: Partitions =
        Partitions { observed: true, auxiliary: false, virtual_: false };
    pub const OBSERVED_AUX: Partitions =
        Partitions { observed: true, auxiliary: true, virtual_: false };
    pub const AUX_VIRTUAL: Partitions =
        Partitions { observed: false, auxiliary: true, virtual_: true };
    pub const ALL: Partitions = Partitions { observed: true, auxiliary: true, virtual_: true };
}

/// Neighbor lists over the extended relation-id space: a stored triple
/// `(h, r, t)` appears at `h` as `(r, t)` and at `t` as `(inv(r), h)`.
#[derive(Debug, Clone)]
pub struct Adjacency {
    lists: Vec<Vec<(RelationId, EntityId)>>,
}

impl Adjacency {
    pub fn neighbors(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        self.lists.get(e.0).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Default)]
pub struct TripleStore {
    pub entities: Vocab,
    pub relations: Vocab,
    pub observed: BTreeSet<Triple>,
    pub auxiliary: BTreeSet<Triple>,
    pub virtual_: BTreeSet<Triple>,
    pub validation: BTreeSet<Triple>,
    pub test: BTreeSet<Triple>,
    pub unseen: BTreeSet<EntityId>,
}

/// Average neighbor counts per predicted fact, split by entity kind.
/// `None` when no entity of that kind appears in the test set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NeighborRatioStats {
    pub unseen: Option<f64>,
    pub observed: Option<f64>,
}

impl TripleStore {
    pub fn num_base_relations(&self) -> usize {
        self.relations.len()
    }

    /// Extended ids: base relations, their inverses, one self-connection.
    pub fn num_relation_ids(&self) -> usize {
        2 * self.relations.len() + 1
    }

    pub fn is_base(&self, r: RelationId) -> bool {
        r.0 < self.relations.len()
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        let b = self.relations.len();
        r.0 >= b && r.0 < 2 * b
    }

    pub fn self_connection(&self) -> RelationId {
        RelationId(2 * self.relations.len())
    }

    /// Inverse of a base or inverse id. The self-connection has none.
    pub fn inverse(&self, r: RelationId) -> Result<RelationId> {
        let b = self.relations.len();
        if r.0 < b {
            Ok(RelationId(r.0 + b))
        } else if r.0 < 2 * b {
            Ok(RelationId(r.0 - b))
        } else {
            Err(Error::Data("self-connection relation has no inverse".to_string()))
        }
    }

    /// Base relation underlying a base or inverse id.
    pub fn base_of(&self, r: RelationId) -> Result<RelationId> {
        let b = self.relations.len();
        if r.0 < b {
            Ok(r)
        } else if r.0 < 2 * b {
            Ok(RelationId(r.0 - b))
        } else {
            Err(Error::Data("self-connection relation has no base".to_string()))
        }
    }

    /// Human-readable name for any extended relation id.
    pub fn relation_label(&self, r: RelationId) -> String {
        let b = self.relations.len();
        if r.0 < b {
            self.relations.name(r.0).to_string()
        } else if r.0 < 2 * b {
            format!("{}^-1", self.relations.name(r.0 - b))
        } else {
            "<self>".to_string()
        }
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        self.entities.name(e.0)
    }

    pub fn is_unseen(&self, e: EntityId) -> bool {
        self.unseen.contains(&e)
    }

    /// Entities that are not unseen, in ascending id order.
    pub fn observed_entities(&self) -> Vec<EntityId> {
        (0..self.entities.len()).map(EntityId).filter(|e| !self.unseen.contains(e)).collect()
    }

    fn partitions(&self) -> [(&'static str, &BTreeSet<Triple>); 5] {
        [
            ("observed", &self.observed),
            ("auxiliary", &self.auxiliary),
            ("virtual", &self.virtual_),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    /// Membership across O and AUX, the sets rule grounding reads.
    pub fn in_observed_or_aux(&self, t: &Triple) -> bool {
        self.observed.contains(t) || self.auxiliary.contains(t)
    }

    /// Add virtual triples, skipping any already present in O or AUX.
    /// Returns `(added, skipped)`.
    pub fn add_virtual(&mut self, triples: impl IntoIterator<Item = Triple>) -> (usize, usize) {
        let (mut added, mut skipped) = (0, 0);
        for t in triples {
            if self.in_observed_or_aux(&t) {
                skipped += 1;
            } else if self.virtual_.insert(t) {
                added += 1;
            }
        }
        (added, skipped)
    }

    /// Bidirectional neighbor index over the selected partitions.
    pub fn build_index(&self, parts: Partitions) -> Adjacency {
        let mut lists = vec![Vec::new(); self.entities.len()];
        let mut insert = |set: &BTreeSet<Triple>| {
            for t in set {
                let inv = RelationId(t.relation.0 + self.relations.len());
                lists[t.head.0].push((t.relation, t.tail));
                lists[t.tail.0].push((inv, t.head));
            }
        };
        if parts.observed {
            insert(&self.observed);
        }
        if parts.auxiliary {
            insert(&self.auxiliary);
        }
        if parts.virtual_ {
            insert(&self.virtual_);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        Adjacency { lists }
    }

    /// Structural invariants every loaded or constructed store must satisfy:
    /// entity/relation ids in range, stored relations are base ids, O and
    /// validation never touch an unseen entity, every auxiliary triple has
    /// exactly one unseen endpoint, and the five partitions are disjoint.
    pub fn validate(&self) -> Result<()> {
        for (name, set) in self.partitions() {
            for t in set {
                if t.head.0 >= self.entities.len() || t.tail.0 >= self.entities.len() {
                    return Err(Error::Data(format!("{name}: entity id out of range in {t:?}")));
                }
                if t.relation.0 >= self.relations.len() {
                    return Err(Error::Data(format!(
                        "{name}: triple {t:?} does not use a base relation id"
                    )));
                }
            }
        }
        for e in &self.unseen {
            if e.0 >= self.entities.len() {
                return Err(Error::Data(format!("unseen entity id {} out of range", e.0)));
            }
        }
        for t in &self.observed {
            if self.is_unseen(t.head) || self.is_unseen(t.tail) {
                return Err(Error::Data(format!(
                    "observed triple touches unseen entity: {}",
                    self.display_triple(t)
                )));
            }
        }
        for t in &self.validation {
            if self.is_unseen(t.head) || self.is_unseen(t.tail) {
                return Err(Error::Data(format!(
                    "validation triple touches unseen entity: {}",
                    self.display_triple(t)
                )));
            }
        }
        for t in &self.auxiliary {
            let ends = self.is_unseen(t.head) as usize + self.is_unseen(t.tail) as usize;
            if ends != 1 {
                return Err(Error::Data(format!(
                    "auxiliary triple must have exactly one unseen endpoint, {} has {}",
                    self.display_triple(t),
                    ends
                )));
            }
        }
        let parts = self.partitions();
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                if let Some(t) = parts[i].1.intersection(parts[j].1).next() {
                    return Err(Error::Data(format!(
                        "partitions {} and {} share triple {}",
                        parts[i].0,
                        parts[j].0,
                        self.display_triple(t)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn display_triple(&self, t: &Triple) -> String {
        format!(
            "({}, {}, {})",
            self.entity_label(t.head),
            self.relation_label(t.relation),
            self.entity_label(t.tail)
        )
    }

    /// Average, over entities of each kind that appear in the test set, of
    /// `#neighbor triples in O∪AUX(∪VN) / #test triples mentioning the entity`.
    pub fn neighbor_ratio_stats(&self, include_virtual: bool) -> NeighborRatioStats {
        let mut test_counts: BTreeMap<EntityId, usize> = BTreeMap::new();
        for t in &self.test {
            *test_counts.entry(t.head).or_insert(0) += 1;
            if t.tail != t.head {
                *test_counts.entry(t.tail).or_insert(0) += 1;
            }
        }
        let parts = if include_virtual { Partitions::ALL } else { Partitions::OBSERVED_AUX };
        let adj = self.build_index(parts);
        let (mut u_sum, mut u_n, mut o_sum, mut o_n) = (0.0, 0usize, 0.0, 0usize);
        for (&e, &predicted) in &test_counts {
            let ratio = adj.neighbors(e).len() as f64 / predicted as f64;
            if self.is_unseen(e) {
                u_sum += ratio;
                u_n += 1;
            } else {
                o_sum += ratio;
                o_n += 1;
            }
        }
        NeighborRatioStats {
            unseen: (u_n > 0).then(|| u_sum / u_n as f64),
            observed: (o_n > 0).then(|| o_sum / o_n as f64),
        }
    }

    pub fn save_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.entities.save(&dir.join("entities.tsv"))?;
        self.relations.save(&dir.join("relations.tsv"))?;
        for (name, set) in self.partitions() {
            save_triples(&dir.join(format!("{name}.tsv")), self, set.iter())?;
        }
        let unseen_path = dir.join("unseen.txt");
        let mut out = String::new();
        for e in &self.unseen {
            out.push_str(self.entity_label(*e));
            out.push('\n');
        }
        fs::write(&unseen_path, out).map_err(|e| Error::io(&unseen_path, e))?;

        let manifest = Manifest {
            entities: "entities.tsv".into(),
            relations: "relations.tsv".into(),
            observed: "observed.tsv".into(),
            auxiliary: "auxiliary.tsv".into(),
            virtual_: Some("virtual.tsv".into()),
            validation: "validation.tsv".into(),
            test: "test.tsv".into(),
            unseen: "unseen.txt".into(),
        };
        let manifest_path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    pub fn load_manifest(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(manifest_path, 1, format!("manifest decode: {e}")))?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

        let mut store = TripleStore {
            entities: Vocab::load(&base.join(&manifest.entities))?,
            relations: Vocab::load(&base.join(&manifest.relations))?,
            ..TripleStore::default()
        };
        let mut load_set = |rel_path: &str| -> Result<BTreeSet<Triple>> {
            let path = base.join(rel_path);
            let triples = load_triples(&path, &mut store.entities, &mut store.relations)?;
            Ok(triples.into_iter().collect())
        };
        store.observed = load_set(&manifest.observed)?;
        store.auxiliary = load_set(&manifest.auxiliary)?;
        store.virtual_ = match &manifest.virtual_ {
            Some(p) => load_set(p)?,
            None => BTreeSet::new(),
        };
        store.validation = load_set(&manifest.validation)?;
        store.test = load_set(&manifest.test)?;

        let unseen_path = base.join(&manifest.unseen);
        let unseen_text = fs::read_to_string(&unseen_path).map_err(|e| Error::io(&unseen_path, e))?;
        for (lineno, line) in unseen_text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            match store.entities.get(line) {
                Some(id) => {
                    store.unseen.insert(EntityId(id));
                }
                None => {
                    return Err(Error::parse(
                        &unseen_path,
                        lineno + 1,
                        format!("unknown entity {line:?}"),
                    ))
                }
            }
        }
        store.validate()?;
        Ok(store)
    }
}

/// Names of the files a partitioned dataset consists of, relative to the
/// manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub entities: String,
    pub relations: String,
    pub observed: String,
    pub auxiliary: String,
    #[serde(rename = "virtual")]
    pub virtual_: Option<String>,
    pub validation: String,
    pub test: String,
    pub unseen: String,
}

/// Parse `head<TAB>relation<TAB>tail` lines, interning new surface forms.
/// Duplicates are preserved; an empty file yields an empty list.
pub fn load_triples(path: &Path, entities: &mut Vocab, relations: &mut Vocab) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected head<TAB>relation<TAB>tail, got {} fields", fields.len()),
            ));
        }
        triples.push(Triple {
            head: EntityId(entities.intern(fields[0])),
            relation: RelationId(relations.intern(fields[1])),
            tail: EntityId(entities.intern(fields[2])),
        });
    }
    Ok(triples)
}

pub fn save_triples<'a>(
    path: &Path,
    store: &TripleStore,
    triples: impl Iterator<Item = &'a Triple>,
) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in triples {
        writeln!(
            file,
            "{}\t{}\t{}",
            store.entity_label(t.head),
            store.relations.name(t.relation.0),
            store.entity_label(t.tail)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
