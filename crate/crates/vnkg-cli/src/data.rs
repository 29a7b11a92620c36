//! Dataset-facing subcommands: split, stats, mine-sp, ground, infer-vn.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::{json, Value};

use vnkg_core::rules::{
    format_rules, generate_virtual_neighbors, ground_logic, parse_rules, GroundRule, LogicRule,
    RuleKind, VirtualNeighborhood,
};
use vnkg_core::softlabel::{solve_soft_labels, SoftLabelTable};
use vnkg_core::sp::{
    discover_sp_patterns, format_sp_rules, ground_sp, mine_sp_rules, parse_sp_rules, SpInstance,
    SpMineConfig, WalkBudget,
};
use vnkg_core::split::{split_dataset, Amount, RawDataset, SplitConfig, Strategy};
use vnkg_core::store::{load_triples, Adjacency, Partitions, TripleStore};
use vnkg_core::Triple;

use crate::config::{pick, resolve_seed, FileConfig};
use crate::report::{ensure_dir, write_json, Report};
use crate::CliError;

pub fn parse_strategy(text: &str) -> Result<Strategy, String> {
    match text {
        "subject" => Ok(Strategy::Subject),
        "object" => Ok(Strategy::Object),
        "both" => Ok(Strategy::Both),
        other => Err(format!("unknown strategy {other:?} (subject|object|both)")),
    }
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Subject => "subject",
        Strategy::Object => "object",
        Strategy::Both => "both",
    }
}

/// Accepts the data directory written by `split` or a manifest path inside it.
pub fn load_store(data: &Path) -> Result<TripleStore, CliError> {
    let manifest = if data.is_dir() { data.join("manifest.json") } else { data.to_path_buf() };
    if !manifest.exists() {
        return Err(CliError::Data(format!("no dataset manifest at {}", manifest.display())));
    }
    Ok(TripleStore::load_manifest(&manifest)?)
}

// ---------------------------------------------------------------------------
// split

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Training triples, TSV `head<TAB>relation<TAB>tail`.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Which endpoint of sampled test triples becomes unseen.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Percent of test triples to sample.
    #[arg(long, conflicts_with = "count")]
    pub fraction: Option<f64>,
    /// Absolute number of test triples to sample.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "split-out")]
    pub out_dir: PathBuf,
}

pub fn load_raw_dataset(
    train: &Path,
    valid: &Path,
    test: &Path,
) -> Result<RawDataset, CliError> {
    let mut data = RawDataset::default();
    data.train = load_triples(train, &mut data.entities, &mut data.relations)?;
    data.valid = load_triples(valid, &mut data.entities, &mut data.relations)?;
    data.test = load_triples(test, &mut data.entities, &mut data.relations)?;
    Ok(data)
}

fn resolve_split_config(args: &SplitArgs, file: &FileConfig) -> Result<SplitConfig, CliError> {
    let section = &file.split;
    let strategy = match args.strategy {
        Some(s) => s,
        None => match &section.strategy {
            Some(text) => parse_strategy(text).map_err(CliError::Data)?,
            None => Strategy::Subject,
        },
    };
    let flag_amount = match (args.fraction, args.count) {
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        (Some(f), None) => Some(Amount::Percent(f)),
        (None, Some(n)) => Some(Amount::Count(n)),
        (None, None) => None,
    };
    let cfg_amount = match (section.fraction, section.count) {
        (Some(_), Some(_)) => {
            return Err(CliError::Data(
                "config split section sets both fraction and count".into(),
            ))
        }
        (Some(f), None) => Some(Amount::Percent(f)),
        (None, Some(n)) => Some(Amount::Count(n)),
        (None, None) => None,
    };
    let amount = pick(flag_amount, cfg_amount, Amount::Percent(10.0));
    let seed = resolve_seed(args.seed, section.seed, file)?;
    Ok(SplitConfig { strategy, amount, seed })
}

fn split_config_json(cfg: &SplitConfig, args: &SplitArgs) -> Value {
    let amount = match cfg.amount {
        Amount::Percent(f) => json!({"fraction": f}),
        Amount::Count(n) => json!({"count": n}),
    };
    json!({
        "train": args.train.display().to_string(),
        "valid": args.valid.display().to_string(),
        "test": args.test.display().to_string(),
        "strategy": strategy_name(cfg.strategy),
        "amount": amount,
        "seed": cfg.seed,
    })
}

pub fn cmd_split(args: &SplitArgs, file: &FileConfig) -> Result<(), CliError> {
    let report = Report::start("split");
    let cfg = resolve_split_config(args, file)?;
    let data = load_raw_dataset(&args.train, &args.valid, &args.test)?;
    let result = split_dataset(&data, &cfg)?;
    result.store.validate()?;

    ensure_dir(&args.out_dir)?;
    let mut report = report;
    let manifest = result.store.save_to_dir(&args.out_dir)?;
    report.output("manifest", &manifest);
    let body = json!({
        "summary": result.summary,
        "dropped_train": result.dropped_train.len(),
    });
    let path = report.finish(&args.out_dir, split_config_json(&cfg, args), body)?;
    println!(
        "split: {} observed, {} auxiliary, {} unseen entities, {} validation, {} test",
        result.summary.observed,
        result.summary.auxiliary,
        result.summary.unseen_entities,
        result.summary.validation,
        result.summary.test,
    );
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// stats

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Dataset directory (or manifest path) from `split`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "stats-out")]
    pub out_dir: PathBuf,
}

pub fn stats_body(store: &TripleStore) -> Value {
    json!({
        "entities": store.entities.len(),
        "relations": store.relations.len(),
        "observed": store.observed.len(),
        "auxiliary": store.auxiliary.len(),
        "virtual": store.virtual_.len(),
        "unseen_entities": store.unseen.len(),
        "validation": store.validation.len(),
        "test": store.test.len(),
        "neighbor_ratio": store.neighbor_ratio_stats(false),
        "neighbor_ratio_with_virtual": store.neighbor_ratio_stats(true),
    })
}

pub fn cmd_stats(args: &StatsArgs, _file: &FileConfig) -> Result<(), CliError> {
    let report = Report::start("stats");
    let store = load_store(&args.data)?;
    let body = stats_body(&store);
    println!("{}", serde_json::to_string_pretty(&body).expect("stats encode"));
    ensure_dir(&args.out_dir)?;
    let cfg = json!({"data": args.data.display().to_string()});
    let path = report.finish(&args.out_dir, cfg, json!({ "stats": body }))?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// mine-sp

#[derive(Debug, Args)]
pub struct MineSpArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Random walks per unseen entity per half length.
    #[arg(long, conflicts_with = "exhaustive")]
    pub walks: Option<usize>,
    /// Enumerate every symmetric path instead of sampling.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long)]
    pub max_half_len: Option<usize>,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    #[arg(long)]
    pub min_support: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "mine-out")]
    pub out_dir: PathBuf,
}

pub struct MineOptions {
    pub cfg: SpMineConfig,
}

pub fn resolve_mine(args: &MineSpArgs, file: &FileConfig) -> Result<MineOptions, CliError> {
    let section = &file.mine_sp;
    let seed = resolve_seed(args.seed, section.seed, file)?;
    let exhaustive = args.exhaustive || section.exhaustive.unwrap_or(false);
    let budget = if exhaustive {
        WalkBudget::Exhaustive
    } else {
        WalkBudget::Sampled { walks: pick(args.walks, section.walks, 1000), seed }
    };
    Ok(MineOptions {
        cfg: SpMineConfig {
            budget,
            max_half_len: pick(args.max_half_len, section.max_half_len, 3),
            min_confidence: pick(args.min_confidence, section.min_confidence, 0.8),
            min_support: pick(args.min_support, section.min_support, 5),
        },
    })
}

pub fn mine_config_json(opts: &MineOptions, data: &Path) -> Value {
    let budget = match &opts.cfg.budget {
        WalkBudget::Sampled { walks, seed } => json!({"walks": walks, "seed": seed}),
        WalkBudget::Exhaustive => json!("exhaustive"),
    };
    json!({
        "data": data.display().to_string(),
        "budget": budget,
        "max_half_len": opts.cfg.max_half_len,
        "min_confidence": opts.cfg.min_confidence,
        "min_support": opts.cfg.min_support,
    })
}

pub fn cmd_mine_sp(args: &MineSpArgs, file: &FileConfig) -> Result<(), CliError> {
    let report = Report::start("mine-sp");
    let store = load_store(&args.data)?;
    let opts = resolve_mine(args, file)?;
    let adj = store.build_index(Partitions::OBSERVED_AUX);
    let mined = mine_sp_rules(&store, &adj, &opts.cfg);

    ensure_dir(&args.out_dir)?;
    let mut report = report;
    let rules_path = args.out_dir.join("sp_rules.tsv");
    fs::write(&rules_path, format_sp_rules(&mined.rules, &store))
        .map_err(|e| CliError::Data(format!("{}: {e}", rules_path.display())))?;
    report.output("sp_rules", &rules_path);

    let body = json!({
        "rules": mined.rules.len(),
        "instances": mined.instances.len(),
    });
    let path = report.finish(&args.out_dir, mine_config_json(&opts, &args.data), body)?;
    println!(
        "mine-sp: {} rules from {} symmetric-path instances",
        mined.rules.len(),
        mined.instances.len()
    );
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// ground / infer-vn

#[derive(Debug, Args)]
pub struct GroundArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Logic rule file in the rule DSL.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Symmetric-path rule file (mine-sp output).
    #[arg(long)]
    pub sp_rules: Option<PathBuf>,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    #[arg(long, conflicts_with = "exhaustive")]
    pub walks: Option<usize>,
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long)]
    pub max_half_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "ground-out")]
    pub out_dir: PathBuf,
}

/// Walk instances for grounding file-supplied SP rules; mirrors the mining
/// loop so `ground` and `mine-sp` see the same instance set.
pub fn sp_instances(
    store: &TripleStore,
    adj: &Adjacency,
    budget: &WalkBudget,
    max_half_len: usize,
) -> std::collections::BTreeSet<SpInstance> {
    let mut instances = std::collections::BTreeSet::new();
    for &u in &store.unseen {
        instances.extend(discover_sp_patterns(store, adj, u, budget, max_half_len));
    }
    instances
}

pub struct GroundingRun {
    pub groundings: Vec<GroundRule>,
    pub logic_rules: usize,
    pub logic_dropped: usize,
    pub sp_rules: usize,
}

pub fn collect_groundings(
    store: &TripleStore,
    logic_path: Option<&Path>,
    sp_path: Option<&Path>,
    min_confidence: f64,
    budget: &WalkBudget,
    max_half_len: usize,
) -> Result<GroundingRun, CliError> {
    let mut run =
        GroundingRun { groundings: Vec::new(), logic_rules: 0, logic_dropped: 0, sp_rules: 0 };
    if let Some(path) = logic_path {
        let parsed = parse_rules(path, store, min_confidence)?;
        run.logic_rules = parsed.rules.len();
        run.logic_dropped = parsed.dropped;
        run.groundings.extend(ground_logic(&parsed.rules, store));
    }
    if let Some(path) = sp_path {
        let rules = parse_sp_rules(path, store)?;
        run.sp_rules = rules.len();
        let adj = store.build_index(Partitions::OBSERVED_AUX);
        let instances = sp_instances(store, &adj, budget, max_half_len);
        for rule in &rules {
            run.groundings.extend(ground_sp(rule, &instances, store, &adj));
        }
    }
    Ok(run)
}

fn grounding_json(store: &TripleStore, id: usize, g: &GroundRule) -> Value {
    json!({
        "id": id,
        "kind": g.kind.to_string(),
        "confidence": g.confidence,
        "premises": g.premises.iter().map(|t| store.display_triple(t)).collect::<Vec<_>>(),
        "conclusion": store.display_triple(&g.conclusion),
    })
}

fn ground_config_json(args: &GroundArgs, min_confidence: f64, budget: &WalkBudget) -> Value {
    let budget = match budget {
        WalkBudget::Sampled { walks, seed } => json!({"walks": walks, "seed": seed}),
        WalkBudget::Exhaustive => json!("exhaustive"),
    };
    json!({
        "data": args.data.display().to_string(),
        "rules": args.rules.as_ref().map(|p| p.display().to_string()),
        "sp_rules": args.sp_rules.as_ref().map(|p| p.display().to_string()),
        "min_confidence": min_confidence,
        "budget": budget,
        "max_half_len": args.max_half_len.unwrap_or(3),
    })
}

fn resolve_ground_budget(
    args: &GroundArgs,
    file: &FileConfig,
) -> Result<(WalkBudget, usize, f64), CliError> {
    let seed = resolve_seed(args.seed, file.mine_sp.seed, file)?;
    let exhaustive = args.exhaustive || file.mine_sp.exhaustive.unwrap_or(false);
    let budget = if exhaustive {
        WalkBudget::Exhaustive
    } else {
        WalkBudget::Sampled { walks: pick(args.walks, file.mine_sp.walks, 1000), seed }
    };
    let max_half_len = pick(args.max_half_len, file.mine_sp.max_half_len, 3);
    let min_confidence = pick(args.min_confidence, file.rules.min_confidence, 0.8);
    Ok((budget, max_half_len, min_confidence))
}

pub fn cmd_ground(args: &GroundArgs, file: &FileConfig) -> Result<(), CliError> {
    if args.rules.is_none() && args.sp_rules.is_none() {
        return Err(CliError::Usage(
            "ground needs --rules and/or --sp-rules".into(),
        ));
    }
    let report = Report::start("ground");
    let store = load_store(&args.data)?;
    let (budget, max_half_len, min_confidence) = resolve_ground_budget(args, file)?;
    let run = collect_groundings(
        &store,
        args.rules.as_deref(),
        args.sp_rules.as_deref(),
        min_confidence,
        &budget,
        max_half_len,
    )?;

    ensure_dir(&args.out_dir)?;
    let mut report = report;
    let listing: Vec<Value> =
        run.groundings.iter().enumerate().map(|(i, g)| grounding_json(&store, i, g)).collect();
    let groundings_path = args.out_dir.join("groundings.json");
    write_json(&groundings_path, &json!({ "groundings": listing }))?;
    report.output("groundings", &groundings_path);

    let logic_count =
        run.groundings.iter().filter(|g| matches!(g.kind, RuleKind::Logic)).count();
    let body = json!({
        "groundings": run.groundings.len(),
        "from_logic": logic_count,
        "from_sp": run.groundings.len() - logic_count,
        "logic_rules": run.logic_rules,
        "logic_rules_dropped": run.logic_dropped,
        "sp_rules": run.sp_rules,
    });
    let path =
        report.finish(&args.out_dir, ground_config_json(args, min_confidence, &budget), body)?;
    println!(
        "ground: {} groundings ({} logic, {} symmetric-path)",
        run.groundings.len(),
        logic_count,
        run.groundings.len() - logic_count
    );
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct InferVnArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Logic rule file in the rule DSL.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Symmetric-path rule file (mine-sp output).
    #[arg(long)]
    pub sp_rules: Option<PathBuf>,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    #[arg(long, conflicts_with = "exhaustive")]
    pub walks: Option<usize>,
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long)]
    pub max_half_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep every grounding of a conclusion instead of only the preferred one.
    #[arg(long)]
    pub keep_all_groundings: bool,
    /// Checkpoint supplying the model probabilities behind the soft labels.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub penalty_c: Option<f64>,
    #[arg(long, default_value = "vn-out")]
    pub out_dir: PathBuf,
}

impl InferVnArgs {
    fn as_ground(&self) -> GroundArgs {
        GroundArgs {
            data: self.data.clone(),
            rules: self.rules.clone(),
            sp_rules: self.sp_rules.clone(),
            min_confidence: self.min_confidence,
            walks: self.walks,
            exhaustive: self.exhaustive,
            max_half_len: self.max_half_len,
            seed: self.seed,
            out_dir: self.out_dir.clone(),
        }
    }
}

/// Write the virtual-neighbor table: one line per (triple, grounding), with
/// the rule confidence and the grounding id pointing into groundings.json.
pub fn write_vn_tsv(
    path: &Path,
    store: &TripleStore,
    vn: &VirtualNeighborhood,
    ids: &BTreeMap<GroundRule, usize>,
) -> Result<(), CliError> {
    let mut out = String::new();
    for (triple, groundings) in &vn.groundings {
        for g in groundings {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                store.entity_label(triple.head),
                store.relations.name(triple.relation.0),
                store.entity_label(triple.tail),
                g.confidence,
                ids[g],
            ));
        }
    }
    fs::write(path, out).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_label_tsv(
    path: &Path,
    store: &TripleStore,
    table: &SoftLabelTable,
    vn: &VirtualNeighborhood,
    ids: &BTreeMap<GroundRule, usize>,
) -> Result<(), CliError> {
    let mut out = String::new();
    for (triple, label) in &table.labels {
        let gids: Vec<String> =
            vn.groundings[triple].iter().map(|g| ids[g].to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            store.entity_label(triple.head),
            store.relations.name(triple.relation.0),
            store.entity_label(triple.tail),
            label,
            gids.join(","),
        ));
    }
    fs::write(path, out).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_infer_vn(args: &InferVnArgs, file: &FileConfig) -> Result<(), CliError> {
    let g = &args.as_ground();
    if g.rules.is_none() && g.sp_rules.is_none() {
        return Err(CliError::Usage(
            "infer-vn needs --rules and/or --sp-rules".into(),
        ));
    }
    let report = Report::start("infer-vn");
    let store = load_store(&g.data)?;
    let (budget, max_half_len, min_confidence) = resolve_ground_budget(g, file)?;
    let run = collect_groundings(
        &store,
        g.rules.as_deref(),
        g.sp_rules.as_deref(),
        min_confidence,
        &budget,
        max_half_len,
    )?;
    let vn = generate_virtual_neighbors(&run.groundings, &store, args.keep_all_groundings);

    // Ids enumerate the retained groundings in table order, matching the
    // rows of vn.tsv and labels.tsv.
    let mut ids: BTreeMap<GroundRule, usize> = BTreeMap::new();
    let mut listing = Vec::new();
    for groundings in vn.groundings.values() {
        for gr in groundings {
            let id = ids.len();
            ids.entry(gr.clone()).or_insert(id);
            listing.push(grounding_json(&store, ids[gr], gr));
        }
    }

    ensure_dir(&g.out_dir)?;
    let mut report = report;
    let groundings_path = g.out_dir.join("groundings.json");
    write_json(&groundings_path, &json!({ "groundings": listing }))?;
    report.output("groundings", &groundings_path);
    let vn_path = g.out_dir.join("vn.tsv");
    write_vn_tsv(&vn_path, &store, &vn, &ids)?;
    report.output("vn", &vn_path);

    let mut labels_written = false;
    if let Some(ckpt) = &args.checkpoint {
        let c = pick(args.penalty_c, file.train.penalty_c, 0.01);
        let table = soft_labels_from_checkpoint(&store, &vn, ckpt, c)?;
        let labels_path = g.out_dir.join("labels.tsv");
        write_label_tsv(&labels_path, &store, &table, &vn, &ids)?;
        report.output("labels", &labels_path);
        labels_written = true;
    }

    let mut config = ground_config_json(g, min_confidence, &budget);
    let map = config.as_object_mut().unwrap();
    map.insert("keep_all_groundings".into(), json!(args.keep_all_groundings));
    map.insert(
        "checkpoint".into(),
        json!(args.checkpoint.as_ref().map(|p| p.display().to_string())),
    );
    let body = json!({
        "virtual_triples": vn.triples.len(),
        "groundings": ids.len(),
        "rejected_both_unseen": vn.rejected_both_unseen,
        "soft_labels": labels_written,
    });
    let path = report.finish(&g.out_dir, config, body)?;
    println!(
        "infer-vn: {} virtual triples from {} groundings ({} rejected with both endpoints unseen)",
        vn.triples.len(),
        ids.len(),
        vn.rejected_both_unseen
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Solve the soft-label program against checkpointed model probabilities.
/// The probabilities are computed over the VN-augmented graph, exactly as the
/// trainer sees them.
fn soft_labels_from_checkpoint(
    store: &TripleStore,
    vn: &VirtualNeighborhood,
    checkpoint: &Path,
    penalty_c: f64,
) -> Result<SoftLabelTable, CliError> {
    use vnkg_core::eval::score_probabilities;
    use vnkg_core::model::{EncoderGraph, ModelParams};

    let (params, enc) = ModelParams::load_checkpoint(checkpoint)?;
    let mut augmented = store.clone();
    augmented.add_virtual(vn.triples.iter().copied());
    let graph = EncoderGraph::build(&augmented)?;

    let mut wanted: Vec<Triple> = Vec::new();
    for (t, gs) in &vn.groundings {
        wanted.push(*t);
        for g in gs {
            wanted.extend(g.premises.iter().copied());
        }
    }
    wanted.sort();
    wanted.dedup();
    let probs = score_probabilities(&augmented, &graph, &params, &enc, &wanted)?;
    let table: BTreeMap<Triple, f64> = wanted.into_iter().zip(probs).collect();
    Ok(solve_soft_labels(&vn.groundings, |t| table.get(t).copied(), penalty_c)?)
}

/// Shared by run-all's demo mode: dump logic rules in the DSL so the run
/// exercises the same parse path as user-supplied files.
pub fn write_logic_rules(
    path: &Path,
    rules: &[LogicRule],
    store: &TripleStore,
) -> Result<(), CliError> {
    fs::write(path, format_rules(rules, store))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
