//! The masked-graph-modeling loop: mask nodes, compute targets from the
//! clean graph outside the tape, reconstruct them from the corrupted graph,
//! and step Adam. Also the checkpoint container and the per-epoch metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyze::subtree_keys;
use crate::error::{Error, Result};
use crate::fragment::{load_patterns, CleavageTable, Fragment, FragmentContext, Recipe};
use crate::io::{fnv1a64, write_atomic};
use crate::molgraph::MolGraph;
use crate::nets::{pool_subgraph, Autoencoder, GraphBatch, ModelConfig, PoolMode, Preset, RemaskMode};
use crate::sgt::{sgt_tokenize, GraphOperatorKind, NodeEmbedding, SgtConfig, DEFAULT_BN_EPS};
use crate::tensorcore::{Mat, ParamStore, Tape, Tensor};
use crate::tokenize::{
    build_motif_vocab, tok_motif, AtomVocab, FrozenGnnTokenizer, FrozenLayer, MotifVocabulary,
};

pub const DEFAULT_MASK_RATIO: f64 = 0.35;

/// Independent generator for a named purpose (`"init"`, `"shuffle"`,
/// `"mask"`, ...) and an index within it, all derived from one run seed.
pub fn stream_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(stream.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}

// ---------------------------------------------------------------------------
// Masking

/// `max(1, round(ratio * n))` with halves rounded up.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Sorted batch-level node indices.
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

/// Samples the masked set per graph and returns the input ids with the mask
/// id substituted.
pub fn mask_nodes(batch: &GraphBatch, ratio: f64, seed: u64, mask_id: usize) -> Result<(Vec<usize>, MaskPlan)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} is outside (0, 1)")));
    }
    let mut rng = stream_rng(seed, "mask", 0);
    let mut masked = Vec::new();
    for k in 0..batch.num_graphs() {
        let range = batch.nodes_of(k);
        let n = range.len();
        let mut picked = rand::seq::index::sample(&mut rng, n, mask_count(n, ratio)).into_vec();
        picked.sort_unstable();
        masked.extend(picked.into_iter().map(|i| range.start + i));
    }
    let mut ids = batch.atom_ids.clone();
    for &i in &masked {
        ids[i] = mask_id;
    }
    Ok((ids, MaskPlan { masked, ratio, seed }))
}

// ---------------------------------------------------------------------------
// Tokenizers and targets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Node,
    Sgt,
    Motif,
    Frozen,
}

/// A ready-to-use tokenizer with whatever state it needs.
#[derive(Debug, Clone)]
pub enum Tokenizer {
    Node,
    Sgt(SgtConfig),
    Motif {
        recipe: Recipe,
        ctx: FragmentContext,
        vocab: MotifVocabulary,
    },
    Frozen(FrozenGnnTokenizer),
}

impl Tokenizer {
    /// Output width the decoder head needs.
    pub fn out_dim(&self, atoms: &AtomVocab) -> usize {
        match self {
            Tokenizer::Node => atoms.size(),
            Tokenizer::Sgt(cfg) => cfg.token_dim(),
            Tokenizer::Motif { vocab, .. } => vocab.num_classes(),
            Tokenizer::Frozen(t) => t.dim(),
        }
    }
}

/// Reconstruction targets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenSet {
    /// One class id per node.
    Discrete { ids: Vec<usize>, classes: usize },
    /// One vector per node.
    Continuous(Mat),
    /// One class id per fragment; fragments use batch node indices.
    Fragments {
        frags: Vec<Fragment>,
        ids: Vec<usize>,
        classes: usize,
    },
}

/// Embedding rows of the model keyed by the atom vocabulary (UNK excluded).
pub fn model_embedding(model: &Autoencoder, atoms: &AtomVocab) -> Result<NodeEmbedding> {
    let rows = atoms.atoms().iter().enumerate().map(|(i, &z)| (z, i)).collect();
    NodeEmbedding::new(model.embedding_table(), rows)
}

/// Targets from the clean batch. Values are plain arrays, so nothing here
/// can carry a gradient back into the model.
pub fn compute_targets(
    batch: &GraphBatch,
    graphs: &[MolGraph],
    tok: &Tokenizer,
    model: &Autoencoder,
    atoms: &AtomVocab,
) -> Result<TokenSet> {
    Ok(match tok {
        Tokenizer::Node => TokenSet::Discrete {
            ids: batch.atom_ids.clone(),
            classes: atoms.size(),
        },
        Tokenizer::Sgt(cfg) => {
            let emb = model_embedding(model, atoms)?;
            TokenSet::Continuous(sgt_tokenize(&batch.graph, &emb, cfg)?.values)
        }
        Tokenizer::Frozen(t) => TokenSet::Continuous(t.hidden(&batch.graph)),
        Tokenizer::Motif { recipe, ctx, vocab } => {
            if graphs.len() != batch.num_graphs() {
                return Err(Error::Model("graph list does not match the batch".into()));
            }
            let parent = batch.graph.id();
            let mut frags = Vec::new();
            let mut ids = Vec::new();
            let mut edge_base = 0;
            for (k, g) in graphs.iter().enumerate() {
                let base = batch.offsets[k];
                for t in tok_motif(g, recipe, ctx, vocab)? {
                    let nodes = t.fragment.nodes().iter().map(|v| v + base).collect();
                    let edges = t.fragment.edges().iter().map(|e| e + edge_base).collect();
                    frags.push(Fragment::with_parent(parent, nodes, edges, t.fragment.kind()));
                    ids.push(t.id().expect("motif tokens are discrete"));
                }
                edge_base += g.num_edges();
            }
            TokenSet::Fragments {
                frags,
                ids,
                classes: vocab.num_classes(),
            }
        }
    })
}

/// Indices of fragments sharing at least one node with `masked`.
pub fn contributing_fragments(frags: &[Fragment], masked: &[usize]) -> Vec<usize> {
    frags
        .iter()
        .enumerate()
        .filter(|(_, f)| masked.iter().any(|&m| f.contains(m)))
        .map(|(k, _)| k)
        .collect()
}

/// Loss over masked nodes, or over fragments touching a masked node, each
/// averaged over the contributing tokens.
pub fn reconstruction_loss(
    tape: &mut Tape,
    z: Tensor,
    targets: &TokenSet,
    plan: &MaskPlan,
    pool: PoolMode,
) -> Result<Tensor> {
    if plan.masked.is_empty() {
        return Err(Error::Model("no masked nodes contribute to the loss".into()));
    }
    match targets {
        TokenSet::Discrete { ids, .. } => {
            let logits = tape.select_rows(z, &plan.masked)?;
            let y: Vec<usize> = plan.masked.iter().map(|&i| ids[i]).collect();
            tape.cross_entropy(logits, &y)
        }
        TokenSet::Continuous(values) => {
            let pred = tape.select_rows(z, &plan.masked)?;
            let y = values.select(Axis(0), &plan.masked);
            tape.mse_loss(pred, &y)
        }
        TokenSet::Fragments { frags, ids, .. } => {
            let contrib = contributing_fragments(frags, &plan.masked);
            if contrib.is_empty() {
                return Err(Error::Model("no fragment intersects the masked nodes".into()));
            }
            let pooled = contrib
                .iter()
                .map(|&k| pool_subgraph(tape, z, &frags[k], pool))
                .collect::<Result<Vec<_>>>()?;
            let logits = tape.concat_rows(&pooled)?;
            let y: Vec<usize> = contrib.iter().map(|&k| ids[k]).collect();
            tape.cross_entropy(logits, &y)
        }
    }
}

/// Index of the nearest vocabulary row (Euclidean), lowest index on ties.
pub fn nearest_token(z: ndarray::ArrayView1<'_, f64>, vocab: &Mat) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, row) in vocab.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Fraction of rows of `z` whose nearest vocabulary token is `truth[r]`.
pub fn token_prediction_accuracy(z: &Mat, vocab: &Mat, truth: &[usize]) -> Result<f64> {
    if vocab.nrows() == 0 {
        return Err(Error::Model("empty token vocabulary".into()));
    }
    if z.nrows() != truth.len() || z.ncols() != vocab.ncols() {
        return Err(Error::Shape {
            op: "token_prediction_accuracy",
            detail: format!("z {:?}, vocab {:?}, {} labels", z.dim(), vocab.dim(), truth.len()),
        });
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let correct = z
        .rows()
        .into_iter()
        .zip(truth)
        .filter(|(row, &t)| nearest_token(*row, vocab) == t)
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Distinct tokens of a batch keyed by one-hop subtree, in key order, and
/// each node's index into that list.
pub fn subtree_vocabulary(batch: &MolGraph, tokens: &Mat) -> (Mat, Vec<usize>) {
    let keys = subtree_keys(batch);
    let mut first: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        first.entry(k).or_insert(i);
    }
    let index: BTreeMap<&str, usize> = first.keys().enumerate().map(|(j, k)| (*k, j)).collect();
    let rows: Vec<usize> = first.values().copied().collect();
    let vocab = tokens.select(Axis(0), &rows);
    let truth = keys.iter().map(|k| index[k.as_str()]).collect();
    (vocab, truth)
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// `(correct, total)` for one batch, or `None` when the tokenizer has no
/// accuracy notion here.
fn batch_accuracy(z: &Mat, targets: &TokenSet, plan: &MaskPlan, tok: &Tokenizer, batch: &GraphBatch) -> Option<(usize, usize)> {
    let total = plan.masked.len();
    match (tok, targets) {
        (Tokenizer::Node, TokenSet::Discrete { ids, .. }) => {
            let correct = plan.masked.iter().filter(|&&i| argmax(z.row(i)) == ids[i]).count();
            Some((correct, total))
        }
        (Tokenizer::Sgt(_), TokenSet::Continuous(values)) => {
            let (vocab, truth) = subtree_vocabulary(&batch.graph, values);
            let correct = plan
                .masked
                .iter()
                .filter(|&&i| nearest_token(z.row(i), &vocab) == truth[i])
                .count();
            Some((correct, total))
        }
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, p)| Mat::zeros(p.value.raw_dim())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`. A
/// non-finite gradient leaves every parameter untouched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Model("optimizer state does not match the parameters".into()));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFiniteGradient { param: p.name.clone() });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in store.iter_mut().enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        ndarray::Zip::from(&mut p.value)
            .and(m)
            .and(v)
            .and(&p.grad)
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + state.eps);
            });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration

fn default_operator() -> String {
    "gin".into()
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_recipe() -> String {
    "relmole".into()
}
fn default_threshold() -> usize {
    crate::tokenize::DEFAULT_MOTIF_THRESHOLD
}
fn default_ratio() -> f64 {
    DEFAULT_MASK_RATIO
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_dim() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_tokenizer")]
    pub tokenizer: TokenizerKind,
    /// `gin`, `gin(<eps>)`, `gcn` or `sage`.
    #[serde(default = "default_operator")]
    pub sgt_operator: String,
    #[serde(default = "default_one")]
    pub sgt_layers: usize,
    #[serde(default = "default_true")]
    pub sgt_batch_norm: bool,
    #[serde(default = "default_recipe")]
    pub recipe: String,
    #[serde(default = "default_threshold")]
    pub motif_threshold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patterns: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cleavage: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_checkpoint: Option<PathBuf>,
    #[serde(default = "default_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_remask")]
    pub remask: RemaskMode,
    #[serde(default = "default_encoder")]
    pub encoder: Preset,
    #[serde(default = "default_decoder")]
    pub decoder: Preset,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_true")]
    pub edge_features: bool,
    #[serde(default)]
    pub pool: PoolMode,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Record elapsed milliseconds in the metrics; off keeps metrics files
    /// byte-identical across runs.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_tokenizer() -> TokenizerKind {
    TokenizerKind::Sgt
}
fn default_remask() -> RemaskMode {
    RemaskMode::V2
}
fn default_encoder() -> Preset {
    Preset::GtsSmall
}
fn default_decoder() -> Preset {
    Preset::GtsTiny
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} is outside (0, 1)", self.mask_ratio));
        }
        if self.batch_size == 0 || self.dim == 0 || self.sgt_layers == 0 || self.motif_threshold == 0 {
            return bad("batch_size, dim, sgt_layers and motif_threshold must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        self.operator()?;
        self.recipe()?;
        if self.tokenizer == TokenizerKind::Frozen && self.frozen_checkpoint.is_none() {
            return bad("the frozen tokenizer needs frozen_checkpoint".into());
        }
        Ok(())
    }

    pub fn operator(&self) -> Result<GraphOperatorKind> {
        self.sgt_operator.parse()
    }

    pub fn recipe(&self) -> Result<Recipe> {
        self.recipe.parse()
    }

    pub fn sgt_config(&self) -> Result<SgtConfig> {
        let mut cfg = SgtConfig::new(self.operator()?, self.sgt_layers, self.dim)?;
        cfg.bn_epsilon = DEFAULT_BN_EPS;
        cfg.batch_norm = self.sgt_batch_norm;
        Ok(cfg)
    }

    pub fn fragment_context(&self) -> Result<FragmentContext> {
        let mut ctx = FragmentContext::default();
        if let Some(p) = &self.patterns {
            ctx.patterns = load_patterns(p)?;
        }
        if let Some(p) = &self.cleavage {
            ctx.table = CleavageTable::load(p)?;
        }
        Ok(ctx)
    }

    /// Builds the tokenizer, reading the corpus when a vocabulary is needed.
    pub fn build_tokenizer(&self, corpus: &[MolGraph]) -> Result<Tokenizer> {
        Ok(match self.tokenizer {
            TokenizerKind::Node => Tokenizer::Node,
            TokenizerKind::Sgt => Tokenizer::Sgt(self.sgt_config()?),
            TokenizerKind::Motif => {
                let recipe = self.recipe()?;
                let ctx = self.fragment_context()?;
                let vocab = build_motif_vocab(corpus, &recipe, &ctx, self.motif_threshold)?;
                Tokenizer::Motif { recipe, ctx, vocab }
            }
            TokenizerKind::Frozen => {
                let path = self.frozen_checkpoint.as_ref().expect("validated");
                Tokenizer::Frozen(FrozenGnnTokenizer::from_checkpoint(&Checkpoint::load(path)?)?)
            }
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 8] = b"MGMLCKPT";
const VERSION: u32 = 1;

/// Named arrays plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// TOML with `[train]` and `[model]` tables.
    pub config_text: String,
    pub fingerprint: u64,
    pub epoch: u64,
    /// Run seed; every generator is derived from it and the epoch.
    pub rng_seed: u64,
    /// Next epoch the shuffle and mask streams would draw for.
    pub rng_epoch: u64,
    pub arrays: Vec<(String, Mat)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    model: ModelConfig,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Autoencoder, train: &TrainConfig, atoms: &AtomVocab, epoch: u64) -> Self {
        let meta = CheckpointMeta {
            train: train.clone(),
            model: model.cfg,
        };
        let config_text = toml::to_string(&meta).expect("config serializes");
        let mut arrays: Vec<(String, Mat)> = model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        let z = Array2::from_shape_fn((1, atoms.atoms().len()), |(_, j)| atoms.atoms()[j] as f64);
        arrays.push(("vocab.atoms".into(), z));
        Checkpoint {
            fingerprint: fnv1a64(config_text.as_bytes()),
            config_text,
            epoch,
            rng_seed: train.seed,
            rng_epoch: epoch,
            arrays,
        }
    }

    pub fn array(&self, name: &str) -> Option<&Mat> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn meta(&self) -> Result<CheckpointMeta> {
        toml::from_str(&self.config_text).map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(self.meta()?.train)
    }

    pub fn atoms(&self) -> Result<AtomVocab> {
        let z = self
            .array("vocab.atoms")
            .ok_or_else(|| Error::Checkpoint("missing vocab.atoms".into()))?;
        Ok(AtomVocab::new(z.iter().map(|&v| v as u8).collect()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.config_text);
        for v in [self.fingerprint, self.epoch, self.rng_seed, self.rng_epoch] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, m) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_text = r.string()?;
        let fingerprint = r.u64()?;
        if fingerprint != fnv1a64(config_text.as_bytes()) {
            return Err(Error::Checkpoint("config fingerprint mismatch".into()));
        }
        let epoch = r.u64()?;
        let rng_seed = r.u64()?;
        let rng_epoch = r.u64()?;
        let count = r.len()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let (rows, cols) = (r.len()?, r.len()?);
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Checkpoint(format!("array '{name}' is too large")))?;
            let raw = r.take(n * 8)?;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Array2::from_shape_vec((rows, cols), vals)
                .map_err(|e| Error::Checkpoint(format!("array '{name}': {e}")))?;
            arrays.push((name, m));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config_text,
            fingerprint,
            epoch,
            rng_seed,
            rng_epoch,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Autoencoder {
    /// Rebuilds the model and copies every stored parameter in; names and
    /// shapes must match exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt.meta()?;
        let mut model = Autoencoder::new(meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected = model.store.len();
        let stored = ckpt.arrays.iter().filter(|(n, _)| n != "vocab.atoms").count();
        if stored != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {stored} parameters, model expects {expected}"
            )));
        }
        for (name, m) in &ckpt.arrays {
            if name == "vocab.atoms" {
                continue;
            }
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
            let p = model.store.get_mut(id);
            if p.value.dim() != m.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    m.dim(),
                    p.value.dim()
                )));
            }
            p.value.assign(m);
        }
        Ok(model)
    }
}

impl FrozenGnnTokenizer {
    /// Uses the encoder's embedding and message-passing layers; edge tables
    /// are ignored since tokenizers see atom types only.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let atoms = ckpt.atoms()?;
        let get = |name: String| {
            ckpt.array(&name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing '{name}'")))
        };
        let embed = get("encoder.embed".into())?;
        let mut layers = Vec::new();
        for l in 0.. {
            let p = format!("encoder.gin{l}");
            if ckpt.array(&format!("{p}.w1")).is_none() {
                break;
            }
            layers.push(FrozenLayer {
                w1: get(format!("{p}.w1"))?,
                b1: get(format!("{p}.b1"))?,
                w2: get(format!("{p}.w2"))?,
                b2: get(format!("{p}.b2"))?,
                norm: Some((get(format!("{p}.bn.gamma"))?, get(format!("{p}.bn.beta"))?)),
            });
        }
        FrozenGnnTokenizer::new(atoms, embed, layers, 0.0)
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub token_accuracy: Option<f64>,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "epoch,mean_loss,token_accuracy,wall_ms";

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let acc = m.token_accuracy.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", m.epoch, m.mean_loss, acc, m.wall_ms));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Autoencoder,
    pub atoms: AtomVocab,
    pub tokenizer: Tokenizer,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
}

/// Where `train` writes files; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Runs the pretraining loop on `corpus`.
pub fn train(corpus: &[MolGraph], cfg: &TrainConfig, out: &TrainOutput) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let atoms = AtomVocab::from_graphs(corpus);
    let tokenizer = cfg.build_tokenizer(corpus)?;
    let mcfg = ModelConfig {
        num_atom_ids: atoms.size(),
        dim: cfg.dim,
        encoder: cfg.encoder,
        decoder: cfg.decoder,
        out_dim: tokenizer.out_dim(&atoms),
        edge_features: cfg.edge_features,
        remask: cfg.remask,
    };
    let mut model = Autoencoder::new(mcfg, &mut stream_rng(cfg.seed, "init", 0))?;
    let mut adam = AdamState::new(&model.store);
    let mut metrics = Vec::new();
    let start = Instant::now();
    let save = |model: &Autoencoder, epoch: usize, metrics: &[EpochMetrics]| -> Result<()> {
        if let Some(dir) = &out.dir {
            Checkpoint::from_model(model, cfg, &atoms, epoch as u64).save(dir.join(CHECKPOINT_FILE))?;
            write_atomic(&dir.join(METRICS_FILE), metrics_csv(metrics).as_bytes())?;
        }
        Ok(())
    };

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut acc = (0usize, 0usize);
        let mut have_acc = false;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let wrap = |e: Error| Error::Train {
                epoch: epoch + 1,
                batch: b,
                source: Box::new(e),
            };
            let graphs: Vec<MolGraph> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let batch = GraphBatch::new(&graphs, &atoms).map_err(wrap)?;
            let mask_seed = fnv1a64(&[cfg.seed.to_le_bytes(), (epoch as u64).to_le_bytes(), (b as u64).to_le_bytes()].concat());
            let (_, plan) = mask_nodes(&batch, cfg.mask_ratio, mask_seed, model.mask_id()).map_err(wrap)?;
            let targets = compute_targets(&batch, &graphs, &tokenizer, &model, &atoms).map_err(wrap)?;
            let mut tape = Tape::new();
            let (_, z) = model.forward(&mut tape, &batch, &plan.masked).map_err(wrap)?;
            let loss = reconstruction_loss(&mut tape, z, &targets, &plan, cfg.pool).map_err(wrap)?;
            loss_sum += tape.scalar(loss);
            batches += 1;
            if let Some((c, t)) = batch_accuracy(tape.value(z), &targets, &plan, &tokenizer, &batch) {
                acc.0 += c;
                acc.1 += t;
                have_acc = true;
            }
            model.store.zero_grad();
            tape.backward(loss, &mut model.store).map_err(wrap)?;
            adam_step(&mut model.store, &mut adam, cfg.lr).map_err(wrap)?;
        }
        let m = EpochMetrics {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches as f64,
            token_accuracy: (have_acc && acc.1 > 0).then(|| acc.0 as f64 / acc.1 as f64),
            wall_ms: if cfg.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        log::info!("epoch {} loss {:.6}", m.epoch, m.mean_loss);
        metrics.push(m);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            save(&model, epoch + 1, &metrics)?;
        }
    }
    save(&model, cfg.epochs, &metrics)?;
    let checkpoint = Checkpoint::from_model(&model, cfg, &atoms, cfg.epochs as u64);
    Ok(TrainOutcome {
        model,
        atoms,
        tokenizer,
        metrics,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::parse_smiles;
    use ndarray::array;

    fn graphs(smiles: &[&str]) -> Vec<MolGraph> {
        smiles.iter().map(|s| parse_smiles(s).unwrap()).collect()
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(10, 0.35), 4);
        assert_eq!(mask_count(1, 0.35), 1);
        assert_eq!(mask_count(2, 0.25), 1);
        assert_eq!(mask_count(4, 0.375), 2);
        assert_eq!(mask_count(3, 0.5), 2);
    }

    #[test]
    fn masking_is_seeded() {
        let gs = graphs(&["CCCCCCCCCC", "CCO"]);
        let atoms = AtomVocab::from_graphs(&gs);
        let batch = GraphBatch::new(&gs, &atoms).unwrap();
        let (ids, plan) = mask_nodes(&batch, 0.35, 11, 99).unwrap();
        assert_eq!(plan.masked.len(), 4 + 1);
        assert!(plan.masked[..4].iter().all(|&i| i < 10));
        for (i, &id) in ids.iter().enumerate() {
            let want = if plan.masked.contains(&i) { 99 } else { batch.atom_ids[i] };
            assert_eq!(id, want);
        }
        assert_eq!(mask_nodes(&batch, 0.35, 11, 99).unwrap().1, plan);
        let differs = (0..20).any(|s| mask_nodes(&batch, 0.35, s, 99).unwrap().1.masked != plan.masked);
        assert!(differs);
        assert!(mask_nodes(&batch, 1.0, 1, 99).is_err());
        assert!(mask_nodes(&batch, 0.0, 1, 99).is_err());
    }

    #[test]
    fn mse_example_and_locality() {
        let mut t = Tape::new();
        let z = t.constant(array![[5.0, 5.0], [0.0, 0.0]]).unwrap();
        let targets = TokenSet::Continuous(array![[7.0, 7.0], [1.0, 1.0]]);
        let plan = MaskPlan {
            masked: vec![1],
            ratio: 0.5,
            seed: 0,
        };
        let l = reconstruction_loss(&mut t, z, &targets, &plan, PoolMode::Mean).unwrap();
        assert_eq!(t.scalar(l), 1.0);
    }

    #[test]
    fn adam_examples() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, -2.0]]).unwrap();
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 0.1).unwrap();
        assert_eq!(store.value(id), &array![[1.0, -2.0]]);
        store.get_mut(id).grad = array![[3.0, -0.5]];
        adam_step(&mut store, &mut st, 0.0).unwrap();
        assert_eq!(store.value(id), &array![[1.0, -2.0]]);
        let before = store.value(id).clone();
        for _ in 0..2000 {
            adam_step(&mut store, &mut st, 0.01).unwrap();
        }
        let mut last = store.value(id).clone();
        adam_step(&mut store, &mut st, 0.01).unwrap();
        last -= store.value(id);
        for d in last.iter() {
            assert!((d.abs() - 0.01).abs() < 1e-4, "{d}");
        }
        assert_ne!(store.value(id), &before);
        store.get_mut(id).grad = array![[f64::NAN, 0.0]];
        let snapshot = store.value(id).clone();
        assert!(matches!(
            adam_step(&mut store, &mut st, 0.01),
            Err(Error::NonFiniteGradient { .. })
        ));
        assert_eq!(store.value(id), &snapshot);
    }

    #[test]
    fn accuracy_by_hand() {
        let vocab = array![[0.0, 0.0], [1.0, 0.0], [10.0, 10.0]];
        let z = array![[0.4, 0.0], [0.6, 0.0], [0.5, 0.0], [9.0, 9.0]];
        // rows go to 0, 1, 0 (tie -> lowest), 2
        let acc = token_prediction_accuracy(&z, &vocab, &[0, 1, 1, 2]).unwrap();
        assert_eq!(acc, 0.75);
        assert_eq!(token_prediction_accuracy(&vocab, &vocab, &[0, 1, 2]).unwrap(), 1.0);
        assert!(token_prediction_accuracy(&z, &Mat::zeros((0, 2)), &[0, 0, 0, 0]).is_err());
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            dim: 4,
            encoder: Preset::GtsTiny,
            decoder: Preset::Linear,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let corpus = graphs(&["CCO", "c1ccccc1O", "CC(=O)N", "CN"]);
        let out = train(&corpus, &tiny_config(), &TrainOutput::default()).unwrap();
        let bytes = out.checkpoint.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, out.checkpoint);
        let model = Autoencoder::from_checkpoint(&back).unwrap();
        let batch = GraphBatch::new(&corpus, &out.atoms).unwrap();
        let run = |m: &Autoencoder| {
            let mut t = Tape::new();
            let (_, z) = m.forward(&mut t, &batch, &[0, 4]).unwrap();
            t.value(z).clone()
        };
        assert_eq!(run(&model), run(&out.model));
        let mut broken = bytes.clone();
        broken[20] ^= 1;
        assert!(Checkpoint::from_bytes(&broken).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let corpus = graphs(&["CCO", "CN"]);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let out = train(&corpus, &cfg, &TrainOutput::default()).unwrap();
        assert!(out.metrics.is_empty());
        let fresh = Autoencoder::new(out.model.cfg, &mut stream_rng(cfg.seed, "init", 0)).unwrap();
        let fresh_ckpt = Checkpoint::from_model(&fresh, &cfg, &out.atoms, 0);
        assert_eq!(out.checkpoint, fresh_ckpt);
    }

    #[test]
    fn every_tokenizer_trains() {
        let corpus = graphs(&["CCO", "c1ccccc1O", "CC(=O)N", "CN", "OCC(=O)O"]);
        for kind in [TokenizerKind::Node, TokenizerKind::Sgt, TokenizerKind::Motif] {
            let cfg = TrainConfig {
                tokenizer: kind,
                motif_threshold: 1,
                ..tiny_config()
            };
            let out = train(&corpus, &cfg, &TrainOutput::default()).unwrap();
            assert_eq!(out.metrics.len(), 2);
            assert_eq!(out.metrics[0].token_accuracy.is_some(), kind != TokenizerKind::Motif);
        }
        let dir = tempfile::tempdir().unwrap();
        let base = train(&corpus, &tiny_config(), &TrainOutput { dir: Some(dir.path().into()) }).unwrap();
        let cfg = TrainConfig {
            tokenizer: TokenizerKind::Frozen,
            frozen_checkpoint: Some(dir.path().join(CHECKPOINT_FILE)),
            ..tiny_config()
        };
        let out = train(&corpus, &cfg, &TrainOutput::default()).unwrap();
        assert_eq!(out.model.cfg.out_dim, base.model.cfg.dim);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(toml::from_str::<TrainConfig>("epochs = 3\nbogus = 1").is_err());
        let cfg: TrainConfig = toml::from_str("epochs = 3\nencoder = \"gts\"").unwrap();
        assert_eq!(cfg.encoder, Preset::Gts);
        let back: TrainConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig {
            mask_ratio: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
