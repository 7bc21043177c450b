//! Self-supervised training: instances mined from the seed taxonomy, a flat
//! key=value configuration, AdamW, and the batch loop.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{AnchorIndex, Scorer};
use crate::objectives::{overall_loss, GaussGrad, GaussTriple, LossHyper, LossParts};
use crate::projection::{Activation, Dims, EmbeddingTable, ParamGrads, ProjectionParams};
use crate::taxonomy::{NodeId, TaxonomyGraph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub child: NodeId,
    pub parent: NodeId,
    /// Up to N distinct non-parents; shorter only when the taxonomy has too
    /// few eligible nodes.
    pub negatives: Vec<NodeId>,
}

impl TrainingInstance {
    pub fn id(&self) -> String {
        format!("{}->{}", self.parent, self.child)
    }
}

/// One instance per seed edge. Negatives are sampled without replacement from
/// the hard-negative pool; a short pool is topped up uniformly from nodes that
/// are neither the child nor related to it by ancestry.
pub fn generate_instances(
    seed: &TaxonomyGraph,
    n: usize,
    rng_seed: u64,
    exclude_ancestors: bool,
) -> Result<Vec<TrainingInstance>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one negative per instance".into()));
    }
    if seed.edge_count() == 0 {
        return Err(Error::TooSmall("seed taxonomy has no edges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(seed.edge_count());
    for (parent, child) in seed.edges() {
        let pool: Vec<NodeId> = seed
            .hard_negative_pool_with(child.as_str(), exclude_ancestors)?
            .into_iter()
            .collect();
        let mut negatives: Vec<NodeId> = if pool.len() <= n {
            let mut p = pool;
            p.shuffle(&mut rng);
            p
        } else {
            index::sample(&mut rng, pool.len(), n)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        };
        if negatives.len() < n {
            let taken: BTreeSet<NodeId> = negatives.iter().cloned().collect();
            let anc = seed.ancestors(child.as_str())?;
            let desc = seed.descendants(child.as_str())?;
            let rest: Vec<&NodeId> = seed
                .node_ids()
                .filter(|id| {
                    *id != child && !anc.contains(*id) && !desc.contains(*id) && !taken.contains(*id)
                })
                .collect();
            let need = (n - negatives.len()).min(rest.len());
            negatives.extend(
                index::sample(&mut rng, rest.len(), need)
                    .into_iter()
                    .map(|i| rest[i].clone()),
            );
        }
        out.push(TrainingInstance {
            child: child.clone(),
            parent: parent.clone(),
            negatives,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegAggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Box dimension d.
    pub dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub lr: f64,
    /// Instances (not triples) per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub loss: LossHyper,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Fraction of edges held out for validation MRR; 0 disables.
    pub val_fraction: f64,
    pub neg_aggregation: NegAggregation,
    pub exclude_ancestors: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 32,
            hidden: 64,
            dropout: 0.2,
            activation: Activation::Relu,
            lr: 1e-3,
            batch_size: 128,
            epochs: 125,
            negatives: 20,
            loss: LossHyper::default(),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            patience: 0,
            val_fraction: 0.0,
            neg_aggregation: NegAggregation::Mean,
            exclude_ancestors: false,
            workers: 1,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "dim",
    "hidden",
    "dropout",
    "activation",
    "lr",
    "batch_size",
    "epochs",
    "negatives",
    "margin",
    "lambda",
    "c_scale",
    "min_var",
    "max_var",
    "w_sym",
    "w_asym",
    "w_vol",
    "seed",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "patience",
    "val_fraction",
    "neg_aggregation",
    "exclude_ancestors",
    "workers",
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dim" => self.dim = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "activation" => self.activation = v.parse()?,
            "lr" => self.lr = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "negatives" => self.negatives = parse_value(key, v)?,
            "margin" => self.loss.margin = parse_value(key, v)?,
            "lambda" => self.loss.lambda = parse_value(key, v)?,
            "c_scale" => self.loss.c_scale = parse_value(key, v)?,
            "min_var" => self.loss.min_var = parse_value(key, v)?,
            "max_var" => self.loss.max_var = parse_value(key, v)?,
            "w_sym" => self.loss.w_sym = parse_value(key, v)?,
            "w_asym" => self.loss.w_asym = parse_value(key, v)?,
            "w_vol" => self.loss.w_vol = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "val_fraction" => self.val_fraction = parse_value(key, v)?,
            "neg_aggregation" => {
                self.neg_aggregation = match v {
                    "mean" => NegAggregation::Mean,
                    "sum" => NegAggregation::Sum,
                    _ => return Err(Error::InvalidArgument(format!("bad value `{v}` for `{key}`"))),
                }
            }
            "exclude_ancestors" => self.exclude_ancestors = parse_value(key, v)?,
            "workers" => self.workers = parse_value(key, v)?,
            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("line {}: expected `key = value`", i + 1))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) && CONFIG_KEYS.contains(&k) {
                return Err(Error::InvalidArgument(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::InvalidArgument(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Every key in canonical order; parsing this reproduces `self`.
    pub fn to_text(&self) -> String {
        let l = &self.loss;
        let agg = match self.neg_aggregation {
            NegAggregation::Mean => "mean",
            NegAggregation::Sum => "sum",
        };
        let values: [String; 26] = [
            self.dim.to_string(),
            self.hidden.to_string(),
            self.dropout.to_string(),
            self.activation.to_string(),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.negatives.to_string(),
            l.margin.to_string(),
            l.lambda.to_string(),
            l.c_scale.to_string(),
            l.min_var.to_string(),
            l.max_var.to_string(),
            l.w_sym.to_string(),
            l.w_asym.to_string(),
            l.w_vol.to_string(),
            self.seed.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.eps.to_string(),
            self.weight_decay.to_string(),
            self.patience.to_string(),
            self.val_fraction.to_string(),
            agg.to_string(),
            self.exclude_ancestors.to_string(),
            self.workers.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// SHA-256 of the canonical text, excluding `workers` (which does not
    /// change results).
    pub fn hash(&self) -> [u8; 32] {
        let canon = TrainConfig {
            workers: 1,
            ..self.clone()
        };
        Sha256::digest(canon.to_text().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dim == 0 || self.hidden == 0 {
            return bad("dim and hidden must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.negatives == 0 || self.workers == 0 {
            return bad("batch_size, epochs, negatives and workers must be >= 1".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps must be positive".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)` with bias-corrected moments.
pub fn optimizer_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: if grads.len() != params.len() { grads.len() } else { state.m.len() },
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_sym: f64,
    pub loss_align: f64,
    pub loss_diverge: f64,
    pub loss_reg: f64,
    pub loss_clip: f64,
    pub clamp_events: usize,
    pub grad_norm: f64,
    pub val_mrr: Option<f64>,
    pub seconds: f64,
}

pub const HISTORY_HEADER: &str =
    "epoch,loss_total,loss_sym,loss_align,loss_diverge,loss_reg,loss_clip,clamp_events,grad_norm,val_mrr,seconds";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (1-based).
    pub selected_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.epochs {
            let val = r.val_mrr.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.loss_total,
                r.loss_sym,
                r.loss_align,
                r.loss_diverge,
                r.loss_reg,
                r.loss_clip,
                r.clamp_events,
                r.grad_norm,
                val,
                r.seconds
            )
            .unwrap();
        }
        s
    }

    /// Equality ignoring wall time.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.selected_epoch == other.selected_epoch
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                EpochRecord {
                    seconds: 0.0,
                    ..a.clone()
                } == EpochRecord {
                    seconds: 0.0,
                    ..b.clone()
                }
            })
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_VALIDATION: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Debug, Default, Clone, Copy)]
struct PartSums {
    total: f64,
    sym: f64,
    align: f64,
    diverge: f64,
    reg: f64,
    clip: f64,
    clamps: usize,
}

impl PartSums {
    fn add(&mut self, p: &LossParts, s: f64) {
        self.total += s * p.total;
        self.sym += s * p.sym;
        self.align += s * p.align;
        self.diverge += s * p.diverge;
        self.reg += s * p.reg;
        self.clip += s * p.clip;
        self.clamps += p.clamped as usize;
    }

    fn merge(&mut self, o: &PartSums) {
        self.total += o.total;
        self.sym += o.sym;
        self.align += o.align;
        self.diverge += o.diverge;
        self.reg += o.reg;
        self.clip += o.clip;
        self.clamps += o.clamps;
    }
}

fn tag(e: Error, instance: &TrainingInstance) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite {
            what,
            instance: instance.id(),
        },
        e => e,
    }
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Loss parts and parameter gradients of one instance (N triples sharing the
/// child and parent forward passes).
fn instance_step(
    params: &ProjectionParams,
    inst: &TrainingInstance,
    emb: &EmbeddingTable,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PartSums, ParamGrads)> {
    let d = params.dims().output;
    let (cb, ct) = params.forward_train(emb.get(inst.child.as_str())?, rng)?;
    let (pb, pt) = params.forward_train(emb.get(inst.parent.as_str())?, rng)?;
    let (cg, pg) = (cb.to_gaussian(), pb.to_gaussian());
    let scale = match cfg.neg_aggregation {
        NegAggregation::Mean => 1.0 / inst.negatives.len() as f64,
        NegAggregation::Sum => 1.0,
    };
    let mut sums = PartSums::default();
    let mut grads = ParamGrads::zeros(params.dims());
    let mut g_child = GaussGrad::zeros(d);
    let mut g_parent = GaussGrad::zeros(d);
    for neg in &inst.negatives {
        let (nb, nt) = params.forward_train(emb.get(neg.as_str())?, rng)?;
        let t = GaussTriple::new(cg.clone(), pg.clone(), nb.to_gaussian())?;
        let (parts, gb) = overall_loss(&t, &cfg.loss)?;
        if !parts.total.is_finite() || !gb.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                instance: inst.id(),
            });
        }
        sums.add(&parts, scale);
        g_child.add_scaled(&gb.child, scale);
        g_parent.add_scaled(&gb.parent, scale);
        params.backward_into(
            Some(&nt),
            &scaled(&gb.neg_parent.mean, scale),
            &scaled(&gb.neg_parent.offset, scale),
            &mut grads,
        )?;
    }
    params.backward_into(Some(&ct), &g_child.mean, &g_child.offset, &mut grads)?;
    params.backward_into(Some(&pt), &g_parent.mean, &g_parent.offset, &mut grads)?;
    Ok((sums, grads))
}

/// Overall loss of one instance (mean or sum over its triples) and its
/// gradient with respect to every network parameter.
pub fn instance_objective(
    params: &ProjectionParams,
    inst: &TrainingInstance,
    emb: &EmbeddingTable,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ParamGrads)> {
    if inst.negatives.is_empty() {
        return Ok((0.0, ParamGrads::zeros(params.dims())));
    }
    let (s, g) = instance_step(params, inst, emb, cfg, rng).map_err(|e| tag(e, inst))?;
    Ok((s.total, g))
}

/// Validation MRR: each held-out child ranks every seed node except itself
/// and its descendants; gold is its parent set.
fn validation_mrr(
    params: &ProjectionParams,
    emb: &EmbeddingTable,
    seed: &TaxonomyGraph,
    val: &[&TrainingInstance],
) -> Result<f64> {
    let index = AnchorIndex::project(params, emb, seed)?;
    let mut total = 0.0;
    for inst in val {
        let mut exclude = seed.descendants(inst.child.as_str())?;
        exclude.insert(inst.child.clone());
        let gold = seed.parents(inst.child.as_str())?;
        let q = index.get(inst.child.as_str()).expect("seed node projected");
        let r = index.rank(&inst.child, q, gold, Scorer::Bc, Some(&exclude))?;
        total += 1.0 / r.best_rank() as f64;
    }
    Ok(total / val.len() as f64)
}

pub fn train(cfg: &TrainConfig, seed: &TaxonomyGraph, emb: &EmbeddingTable) -> Result<(ProjectionParams, TrainHistory)> {
    train_with_progress(cfg, seed, emb, |_| {})
}

/// As [`train`], calling `on_epoch` after every completed epoch.
pub fn train_with_progress(
    cfg: &TrainConfig,
    seed: &TaxonomyGraph,
    emb: &EmbeddingTable,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ProjectionParams, TrainHistory)> {
    cfg.validate()?;
    if let Some(id) = emb.first_missing(seed.node_ids()) {
        return Err(Error::MissingEmbedding(id.to_string()));
    }
    let instances = generate_instances(seed, cfg.negatives, cfg.seed, cfg.exclude_ancestors)?;

    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut val_idx = Vec::new();
    if cfg.val_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_VALIDATION, 0));
        order.shuffle(&mut rng);
        let n_val = ((cfg.val_fraction * instances.len() as f64).round() as usize).max(1);
        if n_val >= instances.len() {
            return Err(Error::TooSmall("validation split leaves no training edges".into()));
        }
        val_idx = order.drain(..n_val).collect();
        val_idx.sort_unstable();
        order.sort_unstable();
    }
    // Instances without any eligible negative carry no loss.
    order.retain(|&i| !instances[i].negatives.is_empty());
    if order.is_empty() {
        return Err(Error::TooSmall("no training instance has a negative".into()));
    }
    let val: Vec<&TrainingInstance> = val_idx.iter().map(|&i| &instances[i]).collect();

    let dims = Dims {
        input: emb.dim(),
        hidden: cfg.hidden,
        output: cfg.dim,
    };
    let mut params = ProjectionParams::init(dims, cfg.activation, cfg.dropout, cfg.seed)?;
    params.set_config_hash(cfg.hash());
    let mut state = AdamState::new(dims.param_count());
    let adam = cfg.adam();

    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let chunk = cfg.workers * 4;

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ProjectionParams, usize)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut shuffled = order.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(
            cfg.seed,
            STREAM_SHUFFLE,
            epoch as u64,
        )));
        let mut sums = PartSums::default();
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for batch in shuffled.chunks(cfg.batch_size) {
            let run = |i: usize| -> Result<(PartSums, ParamGrads)> {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(
                    cfg.seed,
                    STREAM_DROPOUT,
                    ((epoch as u64) << 32) | i as u64,
                ));
                instance_step(&params, &instances[i], emb, cfg, &mut rng).map_err(|e| tag(e, &instances[i]))
            };
            let mut grad = ParamGrads::zeros(dims);
            for part in batch.chunks(chunk) {
                let results: Vec<Result<(PartSums, ParamGrads)>> = match &pool {
                    Some(p) => p.install(|| part.par_iter().map(|&i| run(i)).collect()),
                    None => part.iter().map(|&i| run(i)).collect(),
                };
                for r in results {
                    let (s, g) = r?;
                    sums.merge(&s);
                    grad.add_assign(&g);
                }
            }
            grad.scale(1.0 / batch.len() as f64);
            let norm = grad.norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient".into(),
                    instance: format!("epoch {epoch} batch {}", batches + 1),
                });
            }
            norm_sum += norm;
            batches += 1;
            optimizer_step(&mut state, params.values_mut(), &grad.0, &adam)?;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite {
                what: "parameters".into(),
                instance: format!("epoch {epoch}"),
            });
        }
        let val_mrr = if val.is_empty() {
            None
        } else {
            Some(validation_mrr(&params, emb, seed, &val)?)
        };
        let n = order.len() as f64;
        let rec = EpochRecord {
            epoch,
            loss_total: sums.total / n,
            loss_sym: sums.sym / n,
            loss_align: sums.align / n,
            loss_diverge: sums.diverge / n,
            loss_reg: sums.reg / n,
            loss_clip: sums.clip / n,
            clamp_events: sums.clamps,
            grad_norm: norm_sum / batches as f64,
            val_mrr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.epochs.push(rec);
        history.selected_epoch = epoch;

        if let Some(mrr) = val_mrr {
            if best.as_ref().is_none_or(|(b, _, _)| mrr > *b) {
                best = Some((mrr, params.clone(), epoch));
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, p, epoch)) = best {
        params = p;
        history.selected_epoch = epoch;
    }
    Ok((params, history))
}
