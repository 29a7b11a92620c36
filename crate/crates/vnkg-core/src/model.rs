//! Entity encoder and triple decoders.
//!
//! The encoder stacks weighted graph-convolution layers (one attention
//! scalar per directed relation, tanh activation, shared self term) and
//! finishes with a query-aware attention layer that re-weights an entity's
//! neighborhood for the relation being asked about. Observed entities
//! aggregate over O; unseen entities run the same stack over their AUX∪VN
//! edges, whose far endpoints are always observed, with a shared trainable
//! row standing in for their own input embedding.
//!
//! Scoring a triple (h, r, t) encodes h under query r and t under query
//! r⁻¹, then applies the decoder (DistMult, TransE, or ComplEx with the
//! vector split into real and imaginary halves).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::store::{EntityId, RelationId, Triple, TripleStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderKind {
    DistMult,
    TransE,
    ComplEx,
}

/// Run modes mirroring the ablation study: which rule kinds feed the virtual
/// neighborhood and whether the query layer exists at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Structure layers only: no query layer, no virtual neighbors.
    StructureOnly,
    /// Rules with hard labels: soft-label solving skipped, s ≡ 1.
    HardRules,
    /// Soft labels from logic rules only.
    SoftLogicOnly,
    /// Soft labels from logic and SP rules.
    LogicPlusSp,
    /// The complete model (same rule set as LogicPlusSp).
    Full,
}

impl Ablation {
    pub fn uses_query_layer(self) -> bool {
        self != Ablation::StructureOnly
    }

    pub fn uses_virtual_neighbors(self) -> bool {
        self != Ablation::StructureOnly
    }

    pub fn uses_sp_rules(self) -> bool {
        matches!(self, Ablation::HardRules | Ablation::LogicPlusSp | Ablation::Full)
    }

    pub fn hard_labels(self) -> bool {
        self == Ablation::HardRules
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding width per level: dims[0] is the input table width, dims[l]
    /// the output of structure layer l. Length = number of layers + 1.
    pub dims: Vec<usize>,
    pub dropout: f64,
    pub decoder: DecoderKind,
    pub ablation: Ablation,
    /// Give inverse-direction queries the base relation's attention vector
    /// instead of their own row.
    pub share_inverse_zq: bool,
    /// Use a zero input row for unseen entities instead of the trained one.
    pub zero_unknown: bool,
}

impl EncoderConfig {
    pub fn new(d: usize, layers: usize, decoder: DecoderKind) -> Self {
        EncoderConfig {
            dims: vec![d; layers + 1],
            dropout: 0.3,
            decoder,
            ablation: Ablation::Full,
            share_inverse_zq: false,
            zero_unknown: false,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::Data("encoder needs at least one structure layer".into()));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Data("zero-width layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Data(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.decoder == DecoderKind::ComplEx && self.output_dim() % 2 != 0 {
            return Err(Error::Data(format!(
                "ComplEx needs an even output width, got {}",
                self.output_dim()
            )));
        }
        Ok(())
    }
}

/// All trainable tensors. Entity rows cover observed entities only (compact
/// row order = ascending entity id); unseen entities share `unknown_emb`.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub entity_emb: Tensor,         // n_obs × dims[0]
    pub unknown_emb: Tensor,        // 1 × dims[0]
    pub layer_weights: Vec<Tensor>, // dims[l-1] × dims[l]
    pub layer_alphas: Vec<Tensor>,  // 2·|R| × 1, one scalar per directed relation
    pub attn_u: Tensor,             // 3d
    pub attn_we: Tensor,            // d × d
    pub attn_wq: Tensor,            // d × d
    pub attn_zq: Tensor,            // 2·|R| × d, per-query attention vector
    pub rel_emb: Tensor,            // |R| × d decoder relation vectors
}

impl ModelParams {
    pub fn init<R: Rng>(n_observed: usize, n_base_relations: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d0 = cfg.dims[0];
        let d = cfg.output_dim();
        let b2 = 2 * n_base_relations;
        let emb_bound = |width: usize| 6.0 / (width as f64).sqrt();
        let glorot = |r: usize, c: usize, rng: &mut R| {
            let bound = (6.0 / (r + c) as f64).sqrt();
            Tensor::uniform(&[r, c], -bound, bound, rng)
        };
        let mut layer_weights = Vec::new();
        let mut layer_alphas = Vec::new();
        for l in 1..cfg.dims.len() {
            layer_weights.push(glorot(cfg.dims[l - 1], cfg.dims[l], rng));
            layer_alphas.push(Tensor::filled(&[b2, 1], 1.0));
        }
        ModelParams {
            entity_emb: Tensor::uniform(&[n_observed, d0], -emb_bound(d0), emb_bound(d0), rng),
            unknown_emb: Tensor::uniform(&[1, d0], -emb_bound(d0), emb_bound(d0), rng),
            layer_weights,
            layer_alphas,
            attn_u: Tensor::uniform(&[3 * d], -emb_bound(3 * d), emb_bound(3 * d), rng),
            attn_we: glorot(d, d, rng),
            attn_wq: glorot(d, d, rng),
            attn_zq: Tensor::uniform(&[b2, d], -emb_bound(d), emb_bound(d), rng),
            rel_emb: Tensor::uniform(&[n_base_relations, d], -emb_bound(d), emb_bound(d), rng),
        }
    }

    /// Stable name/tensor ordering shared by the optimizer and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("entity_emb".to_string(), &self.entity_emb),
            ("unknown_emb".to_string(), &self.unknown_emb),
        ];
        for (l, w) in self.layer_weights.iter().enumerate() {
            out.push((format!("w{l}"), w));
        }
        for (l, a) in self.layer_alphas.iter().enumerate() {
            out.push((format!("alpha{l}"), a));
        }
        out.push(("attn_u".to_string(), &self.attn_u));
        out.push(("attn_we".to_string(), &self.attn_we));
        out.push(("attn_wq".to_string(), &self.attn_wq));
        out.push(("attn_zq".to_string(), &self.attn_zq));
        out.push(("rel_emb".to_string(), &self.rel_emb));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("entity_emb".to_string(), &mut self.entity_emb),
            ("unknown_emb".to_string(), &mut self.unknown_emb),
        ];
        for (l, w) in self.layer_weights.iter_mut().enumerate() {
            out.push((format!("w{l}"), w));
        }
        for (l, a) in self.layer_alphas.iter_mut().enumerate() {
            out.push((format!("alpha{l}"), a));
        }
        out.push(("attn_u".to_string(), &mut self.attn_u));
        out.push(("attn_we".to_string(), &mut self.attn_we));
        out.push(("attn_wq".to_string(), &mut self.attn_wq));
        out.push(("attn_zq".to_string(), &mut self.attn_zq));
        out.push(("rel_emb".to_string(), &mut self.rel_emb));
        out
    }

    /// Rebuild from checkpointed (name, tensor) pairs.
    pub fn from_named(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor> = entries.into_iter().collect();
        fn take(map: &mut BTreeMap<String, Tensor>, k: &str) -> Result<Tensor> {
            map.remove(k).ok_or_else(|| Error::Checkpoint(format!("missing tensor {k:?}")))
        }
        let entity_emb = take(&mut map, "entity_emb")?;
        let unknown_emb = take(&mut map, "unknown_emb")?;
        let mut layer_weights = Vec::new();
        let mut layer_alphas = Vec::new();
        for l in 0.. {
            match map.remove(&format!("w{l}")) {
                Some(w) => {
                    let a = map.remove(&format!("alpha{l}")).ok_or_else(|| {
                        Error::Checkpoint(format!("missing tensor \"alpha{l}\""))
                    })?;
                    layer_weights.push(w);
                    layer_alphas.push(a);
                }
                None => break,
            }
        }
        if layer_weights.is_empty() {
            return Err(Error::Checkpoint("no layer weights found".into()));
        }
        let out = ModelParams {
            entity_emb,
            unknown_emb,
            layer_weights,
            layer_alphas,
            attn_u: take(&mut map, "attn_u")?,
            attn_we: take(&mut map, "attn_we")?,
            attn_wq: take(&mut map, "attn_wq")?,
            attn_zq: take(&mut map, "attn_zq")?,
            rel_emb: take(&mut map, "rel_emb")?,
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {k:?}")));
        }
        Ok(out)
    }

    /// Write every parameter tensor plus the encoder config to a container
    /// file. Reloading reproduces the model bit for bit.
    pub fn save_checkpoint(&self, path: &Path, cfg: &EncoderConfig) -> Result<()> {
        let meta = serde_json::to_value(cfg)
            .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
        let named = self.named();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        checkpoint::save(path, &refs, &meta)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, EncoderConfig)> {
        let (tensors, meta) = checkpoint::load(path)?;
        let cfg: EncoderConfig = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
        Ok((Self::from_named(tensors)?, cfg))
    }
}

/// Static picture of the graph the encoder runs over: compact rows for the
/// observed entities with per-relation edge lists from O, plus per-unseen
/// neighbor lists from AUX∪VN whose far endpoints are observed rows.
#[derive(Debug, Clone)]
pub struct EncoderGraph {
    pub num_base_relations: usize,
    pub obs_entities: Vec<EntityId>,
    pub obs_index: Vec<Option<usize>>,
    /// Per directed relation with ≥1 edge: (relation, source rows, destination
    /// rows); destination i aggregates α_r · h_source.
    pub rel_edges: Vec<(RelationId, Vec<usize>, Vec<usize>)>,
    /// Per observed row: outgoing and incoming O edges as (directed relation,
    /// neighbor row).
    pub obs_neighbors: Vec<Vec<(RelationId, usize)>>,
    /// Per unseen entity: AUX∪VN edges as (directed relation, neighbor row).
    pub unseen_neighbors: BTreeMap<EntityId, Vec<(RelationId, usize)>>,
}

impl EncoderGraph {
    pub fn build(store: &TripleStore) -> Result<EncoderGraph> {
        let obs_entities = store.observed_entities();
        let mut obs_index = vec![None; store.entities.len()];
        for (row, e) in obs_entities.iter().enumerate() {
            obs_index[e.0] = Some(row);
        }
        let b = store.num_base_relations();
        let row_of = |e: EntityId, part: &str| -> Result<usize> {
            obs_index[e.0].ok_or_else(|| {
                Error::Data(format!(
                    "{part} triple touches unseen entity {} where an observed one is required",
                    store.entity_label(e)
                ))
            })
        };

        let mut edges: BTreeMap<RelationId, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        let mut obs_neighbors = vec![Vec::new(); obs_entities.len()];
        for t in &store.observed {
            let (h, tl) = (row_of(t.head, "observed")?, row_of(t.tail, "observed")?);
            let inv = RelationId(t.relation.0 + b);
            let fwd = edges.entry(t.relation).or_default();
            fwd.0.push(tl);
            fwd.1.push(h);
            let bwd = edges.entry(inv).or_default();
            bwd.0.push(h);
            bwd.1.push(tl);
            obs_neighbors[h].push((t.relation, tl));
            obs_neighbors[tl].push((inv, h));
        }

        let mut unseen_neighbors: BTreeMap<EntityId, Vec<(RelationId, usize)>> = BTreeMap::new();
        for (part, set) in [("auxiliary", &store.auxiliary), ("virtual", &store.virtual_)] {
            for t in set {
                let (u, nbr, rel) = if store.is_unseen(t.head) {
                    (t.head, t.tail, t.relation)
                } else if store.is_unseen(t.tail) {
                    (t.tail, t.head, RelationId(t.relation.0 + b))
                } else {
                    return Err(Error::Data(format!(
                        "{part} triple {} has no unseen endpoint",
                        store.display_triple(t)
                    )));
                };
                let row = row_of(nbr, part)?;
                unseen_neighbors.entry(u).or_default().push((rel, row));
            }
        }

        Ok(EncoderGraph {
            num_base_relations: b,
            obs_entities,
            obs_index,
            rel_edges: edges.into_iter().map(|(r, (s, d))| (r, s, d)).collect(),
            obs_neighbors,
            unseen_neighbors,
        })
    }

    pub fn inverse(&self, r: RelationId) -> RelationId {
        if r.0 < self.num_base_relations {
            RelationId(r.0 + self.num_base_relations)
        } else {
            RelationId(r.0 - self.num_base_relations)
        }
    }

    pub fn is_observed(&self, e: EntityId) -> bool {
        self.obs_index.get(e.0).copied().flatten().is_some()
    }

    /// Compact row of an observed entity, None for unseen or unknown ids.
    pub fn obs_row(&self, e: EntityId) -> Option<usize> {
        self.obs_index.get(e.0).copied().flatten()
    }
}

/// Tape leaves for every parameter, in [`ModelParams::named`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub entity_emb: Var,
    pub unknown_emb: Var,
    pub layer_weights: Vec<Var>,
    pub layer_alphas: Vec<Var>,
    pub attn_u: Var,
    pub attn_we: Var,
    pub attn_wq: Var,
    pub attn_zq: Var,
    pub rel_emb: Var,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> ParamVars {
        let mut leaves = params
            .named()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad));
        let vars: Vec<Var> = leaves.by_ref().collect();
        ParamVars::from_slice(&vars, params.layer_weights.len())
    }

    /// Vars in [`ModelParams::named`] order, for pairing with gradients.
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = vec![self.entity_emb, self.unknown_emb];
        v.extend(&self.layer_weights);
        v.extend(&self.layer_alphas);
        v.extend([self.attn_u, self.attn_we, self.attn_wq, self.attn_zq, self.rel_emb]);
        v
    }

    /// Reassemble from a flat ordered slice (the grad-check entry point).
    pub fn from_slice(vars: &[Var], num_layers: usize) -> ParamVars {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter slice too short");
        let entity_emb = next();
        let unknown_emb = next();
        let layer_weights: Vec<Var> = (0..num_layers).map(|_| next()).collect();
        let layer_alphas: Vec<Var> = (0..num_layers).map(|_| next()).collect();
        ParamVars {
            entity_emb,
            unknown_emb,
            layer_weights,
            layer_alphas,
            attn_u: next(),
            attn_we: next(),
            attn_wq: next(),
            attn_zq: next(),
            rel_emb: next(),
        }
    }
}

/// One forward pass: owns the growing tape via a borrow, computes the
/// observed stack eagerly, and builds unseen stacks and query-aware outputs
/// lazily with caching. Create a fresh one per minibatch or evaluation pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    vars: ParamVars,
    graph: &'a EncoderGraph,
    cfg: &'a EncoderConfig,
    train: bool,
    dropout_seed: u64,
    /// h^(l) over all observed rows, index 0 = input table.
    obs_stack: Vec<Var>,
    unseen_stack: BTreeMap<EntityId, Vec<Var>>,
    plain_cache: BTreeMap<EntityId, Var>,
    query_cache: BTreeMap<(EntityId, RelationId), Var>,
    touched: BTreeSet<&'static str>,
}

pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

impl<'a> Forward<'a> {
    pub fn with_vars(
        tape: &'a mut Tape,
        vars: ParamVars,
        graph: &'a EncoderGraph,
        cfg: &'a EncoderConfig,
        train: bool,
        dropout_seed: u64,
    ) -> Result<Forward<'a>> {
        cfg.validate()?;
        if vars.layer_weights.len() != cfg.num_layers() {
            return Err(Error::Shape {
                op: "forward",
                details: format!(
                    "{} layer weights for {} layers",
                    vars.layer_weights.len(),
                    cfg.num_layers()
                ),
            });
        }
        let n = graph.obs_entities.len();
        let emb_rows = tape.value(vars.entity_emb).rows();
        if emb_rows != n {
            return Err(Error::Shape {
                op: "forward",
                details: format!("entity table has {emb_rows} rows, graph has {n} observed"),
            });
        }
        let mut fwd = Forward {
            tape,
            vars,
            graph,
            cfg,
            train,
            dropout_seed,
            obs_stack: Vec::new(),
            unseen_stack: BTreeMap::new(),
            plain_cache: BTreeMap::new(),
            query_cache: BTreeMap::new(),
            touched: BTreeSet::new(),
        };
        fwd.build_observed_stack()?;
        Ok(fwd)
    }

    pub fn touched(&self) -> &BTreeSet<&'static str> {
        &self.touched
    }

    fn build_observed_stack(&mut self) -> Result<()> {
        self.touched.insert("entity_emb");
        let n = self.graph.obs_entities.len();
        let mut h = self.vars.entity_emb;
        self.obs_stack.push(h);
        for l in 0..self.cfg.num_layers() {
            self.touched.insert("layer_weights");
            let mut agg: Option<Var> = None;
            for (rel, srcs, dsts) in &self.graph.rel_edges {
                self.touched.insert("layer_alphas");
                let gathered = self.tape.gather_rows(h, srcs)?;
                let alpha = self.tape.gather_rows(self.vars.layer_alphas[l], &[rel.0])?;
                let scaled = self.tape.scale(gathered, alpha)?;
                let spread = self.tape.scatter_add_rows(scaled, dsts, n)?;
                agg = Some(match agg {
                    None => spread,
                    Some(a) => self.tape.add(a, spread)?,
                });
            }
            let pre = match agg {
                None => h,
                Some(a) => self.tape.add(a, h)?,
            };
            let lin = self.tape.matmul(pre, self.vars.layer_weights[l])?;
            let act = self.tape.tanh(lin)?;
            let out =
                self.tape
                    .dropout(act, self.cfg.dropout, self.train, mix(self.dropout_seed, 0, l as u64))?;
            self.obs_stack.push(out);
            h = out;
        }
        Ok(())
    }

    /// h^(l) rows for one unseen entity, aggregating AUX∪VN neighbors whose
    /// values come from the observed stack of the previous layer.
    fn build_unseen_stack(&mut self, e: EntityId) -> Result<()> {
        if self.unseen_stack.contains_key(&e) {
            return Ok(());
        }
        let neighbors = self
            .graph
            .unseen_neighbors
            .get(&e)
            .filter(|n| !n.is_empty())
            .ok_or_else(|| {
                Error::Data(format!("unseen entity {} has no auxiliary or virtual edges", e.0))
            })?
            .clone();
        let mut by_rel: BTreeMap<RelationId, Vec<usize>> = BTreeMap::new();
        for (rel, row) in neighbors {
            by_rel.entry(rel).or_default().push(row);
        }
        let d0 = self.cfg.dims[0];
        let mut h = if self.cfg.zero_unknown {
            self.tape.constant(Tensor::zeros(&[1, d0]))
        } else {
            self.touched.insert("unknown_emb");
            self.vars.unknown_emb
        };
        let mut stack = vec![h];
        for l in 0..self.cfg.num_layers() {
            let mut agg: Option<Var> = None;
            for (rel, rows) in &by_rel {
                let gathered = self.tape.gather_rows(self.obs_stack[l], rows)?;
                let ones = self.tape.constant(Tensor::filled(&[1, rows.len()], 1.0));
                let summed = self.tape.matmul(ones, gathered)?;
                let alpha = self.tape.gather_rows(self.vars.layer_alphas[l], &[rel.0])?;
                let scaled = self.tape.scale(summed, alpha)?;
                agg = Some(match agg {
                    None => scaled,
                    Some(a) => self.tape.add(a, scaled)?,
                });
            }
            let pre = match agg {
                None => h,
                Some(a) => self.tape.add(a, h)?,
            };
            let lin = self.tape.matmul(pre, self.vars.layer_weights[l])?;
            let act = self.tape.tanh(lin)?;
            let out = self.tape.dropout(
                act,
                self.cfg.dropout,
                self.train,
                mix(self.dropout_seed, 1 + e.0 as u64, l as u64),
            )?;
            stack.push(out);
            h = out;
        }
        self.unseen_stack.insert(e, stack);
        Ok(())
    }

    /// The entity's last-structure-layer embedding as a 1×d row.
    pub fn structure_embedding(&mut self, e: EntityId) -> Result<Var> {
        if let Some(&v) = self.plain_cache.get(&e) {
            return Ok(v);
        }
        let v = match self.graph.obs_row(e) {
            Some(row) => {
                let last = *self.obs_stack.last().unwrap();
                self.tape.gather_rows(last, &[row])?
            }
            None => {
                self.build_unseen_stack(e)?;
                *self.unseen_stack[&e].last().unwrap()
            }
        };
        self.plain_cache.insert(e, v);
        Ok(v)
    }

    fn attention_neighbors(&self, e: EntityId) -> Vec<(RelationId, usize)> {
        match self.graph.obs_row(e) {
            Some(row) => self.graph.obs_neighbors[row].clone(),
            None => self.graph.unseen_neighbors.get(&e).cloned().unwrap_or_default(),
        }
    }

    /// Query-aware output h^O and the attention weights over the entity's
    /// neighbors. Zero neighbors fall back to the structure embedding with no
    /// weights.
    pub fn query_attention(
        &mut self,
        e: EntityId,
        query: RelationId,
    ) -> Result<(Var, Option<Var>)> {
        let neighbors = self.attention_neighbors(e);
        if neighbors.is_empty() {
            return Ok((self.structure_embedding(e)?, None));
        }
        if self.graph.obs_row(e).is_none() {
            // Unseen entities must have edges or structure_embedding errors;
            // the same holds here via attention_neighbors being nonempty.
            self.build_unseen_stack(e)?;
        }
        self.touched.insert("attn_u");
        self.touched.insert("attn_we");
        self.touched.insert("attn_wq");
        self.touched.insert("attn_zq");

        let last = *self.obs_stack.last().unwrap();
        let rows: Vec<usize> = neighbors.iter().map(|&(_, row)| row).collect();
        let k = rows.len();
        let neighbor_h = self.tape.gather_rows(last, &rows)?;

        let hi = self.structure_embedding(e)?;
        let hi_we = self.tape.matmul(hi, self.vars.attn_we)?;
        let zq_row = self.zq_row(query)?;
        let zq = self.tape.gather_rows(self.vars.attn_zq, &[zq_row])?;
        let zq_wq = self.tape.matmul(zq, self.vars.attn_wq)?;
        let nbr_we = self.tape.matmul(neighbor_h, self.vars.attn_we)?;

        let ones = self.tape.constant(Tensor::filled(&[k, 1], 1.0));
        let rep_i = self.tape.matmul(ones, hi_we)?;
        let rep_q = self.tape.matmul(ones, zq_wq)?;
        let cat = self.tape.concat(&[rep_i, rep_q, nbr_we], 1)?;
        let scores = self.tape.matmul(cat, self.vars.attn_u)?;
        let beta = self.tape.leaky_relu(scores, 0.01)?;
        let weights = self.tape.softmax(beta)?;
        let weights_row = self.tape.reshape(weights, vec![1, k])?;
        let out = self.tape.matmul(weights_row, neighbor_h)?;
        Ok((out, Some(weights)))
    }

    fn zq_row(&self, query: RelationId) -> Result<usize> {
        let b = self.graph.num_base_relations;
        if query.0 >= 2 * b {
            return Err(Error::Data(format!("relation id {} cannot be a query", query.0)));
        }
        if self.cfg.share_inverse_zq && query.0 >= b {
            Ok(query.0 - b)
        } else {
            Ok(query.0)
        }
    }

    /// Decoder-facing embedding of an entity for a query relation: the
    /// query-aware output, or the structure embedding when the query layer is
    /// ablated away.
    pub fn embedding(&mut self, e: EntityId, query: RelationId) -> Result<Var> {
        if !self.cfg.ablation.uses_query_layer() {
            return self.structure_embedding(e);
        }
        if let Some(&v) = self.query_cache.get(&(e, query)) {
            return Ok(v);
        }
        let (v, _) = self.query_attention(e, query)?;
        self.query_cache.insert((e, query), v);
        Ok(v)
    }

    pub fn embedding_values(&mut self, e: EntityId, query: RelationId) -> Result<Vec<f64>> {
        let v = self.embedding(e, query)?;
        Ok(self.tape.value(v).data().to_vec())
    }

    /// Raw decoder scores for a batch of triples, one per row, as a length-m
    /// vector node. Heads are encoded under the triple's relation, tails
    /// under its inverse.
    pub fn decode_batch(&mut self, triples: &[Triple]) -> Result<Var> {
        if triples.is_empty() {
            return Err(Error::Data("empty decode batch".into()));
        }
        self.touched.insert("rel_emb");
        let mut head_rows = Vec::with_capacity(triples.len());
        let mut tail_rows = Vec::with_capacity(triples.len());
        let mut rel_rows = Vec::with_capacity(triples.len());
        for t in triples {
            if t.relation.0 >= self.graph.num_base_relations {
                return Err(Error::Data(format!("triple carries non-base relation {}", t.relation.0)));
            }
            head_rows.push(self.embedding(t.head, t.relation)?);
            tail_rows.push(self.embedding(t.tail, self.graph.inverse(t.relation))?);
            rel_rows.push(t.relation.0);
        }
        let e_h = self.tape.concat(&head_rows, 0)?;
        let e_t = self.tape.concat(&tail_rows, 0)?;
        let r = self.tape.gather_rows(self.vars.rel_emb, &rel_rows)?;
        let raw = match self.cfg.decoder {
            DecoderKind::DistMult => {
                let hr = self.tape.hadamard(e_h, r)?;
                let hrt = self.tape.hadamard(hr, e_t)?;
                self.tape.sum_axis(hrt, 1)?
            }
            DecoderKind::TransE => {
                let shifted = self.tape.add(e_h, r)?;
                let diff = self.tape.sub(shifted, e_t)?;
                let dist = self.tape.abs(diff)?;
                let norms = self.tape.sum_axis(dist, 1)?;
                self.tape.scale_const(norms, -1.0)?
            }
            DecoderKind::ComplEx => {
                let d = self.cfg.output_dim();
                let half = d / 2;
                let split = |tape: &mut Tape, v: Var| -> Result<(Var, Var)> {
                    Ok((tape.slice_cols(v, 0, half)?, tape.slice_cols(v, half, d)?))
                };
                let (h_re, h_im) = split(self.tape, e_h)?;
                let (r_re, r_im) = split(self.tape, r)?;
                let (t_re, t_im) = split(self.tape, e_t)?;
                let mut tri = |a: Var, b: Var, c: Var| -> Result<Var> {
                    let ab = self.tape.hadamard(a, b)?;
                    self.tape.hadamard(ab, c)
                };
                let p1 = tri(h_re, r_re, t_re)?;
                let p2 = tri(h_im, r_re, t_im)?;
                let p3 = tri(h_re, r_im, t_im)?;
                let p4 = tri(h_im, r_im, t_re)?;
                let s1 = self.tape.add(p1, p2)?;
                let s2 = self.tape.add(s1, p3)?;
                let s3 = self.tape.sub(s2, p4)?;
                self.tape.sum_axis(s3, 1)?
            }
        };
        Ok(raw)
    }

    /// Probability map of a raw-score node.
    pub fn probabilities(&mut self, raw: Var) -> Result<Var> {
        self.tape.logistic(raw)
    }
}

/// Pure-slice decoder scores, shared by evaluation (which materializes
/// embeddings once and scores many candidates) and by tests that pin the tape
/// path against an independent implementation.
pub fn decode_raw(kind: DecoderKind, e_h: &[f64], r: &[f64], e_t: &[f64]) -> Result<f64> {
    let d = e_h.len();
    if r.len() != d || e_t.len() != d {
        return Err(Error::Shape {
            op: "decode_raw",
            details: format!("{} / {} / {}", e_h.len(), r.len(), e_t.len()),
        });
    }
    match kind {
        DecoderKind::DistMult => Ok((0..d).map(|i| e_h[i] * r[i] * e_t[i]).sum()),
        DecoderKind::TransE => Ok(-(0..d).map(|i| (e_h[i] + r[i] - e_t[i]).abs()).sum::<f64>()),
        DecoderKind::ComplEx => {
            if d % 2 != 0 {
                return Err(Error::Shape { op: "decode_raw", details: format!("odd width {d}") });
            }
            let h = d / 2;
            let mut s = 0.0;
            for i in 0..h {
                s += e_h[i] * r[i] * e_t[i]
                    + e_h[h + i] * r[i] * e_t[h + i]
                    + e_h[i] * r[h + i] * e_t[h + i]
                    - e_h[h + i] * r[h + i] * e_t[i];
            }
            Ok(s)
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
