//! Encoder and decoder stacks for the graph autoencoder.
//!
//! A stack is a run of GIN message-passing layers followed by single-head
//! attention layers. The encoder reads node embeddings (with the reserved
//! mask row `m0` at masked positions); before the decoder, masked rows can be
//! remasked with the learned vector `m1`.

use std::fmt;
use std::ops::Range;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fragment::Fragment;
use crate::molgraph::{batch_graphs, BondType, MolGraph};
use crate::tensorcore::{Mat, ParamId, ParamStore, SparseMat, Tape, Tensor};
use crate::tokenize::AtomVocab;

/// Layer counts from the compared architectures; the model dim is chosen
/// separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Linear,
    Gine,
    GineSmall,
    Gts,
    GtsSmall,
    GtsTiny,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Linear,
        Preset::Gine,
        Preset::GineSmall,
        Preset::Gts,
        Preset::GtsSmall,
        Preset::GtsTiny,
    ];

    /// `(message-passing layers, attention layers)`.
    pub fn layers(self) -> (usize, usize) {
        match self {
            Preset::Linear => (0, 0),
            Preset::Gine => (5, 0),
            Preset::GineSmall => (3, 0),
            Preset::Gts => (5, 4),
            Preset::GtsSmall => (3, 1),
            Preset::GtsTiny => (1, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Linear => "linear",
            Preset::Gine => "gine",
            Preset::GineSmall => "gine_small",
            Preset::Gts => "gts",
            Preset::GtsSmall => "gts_small",
            Preset::GtsTiny => "gts_tiny",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stack preset '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub gin_layers: usize,
    pub attn_layers: usize,
    pub dim: usize,
}

impl StackConfig {
    pub fn from_preset(p: Preset, dim: usize) -> Self {
        let (gin_layers, attn_layers) = p.layers();
        StackConfig {
            gin_layers,
            attn_layers,
            dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemaskMode {
    None,
    V1,
    V2,
}

impl FromStr for RemaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RemaskMode::None),
            "v1" => Ok(RemaskMode::V1),
            "v2" => Ok(RemaskMode::V2),
            _ => Err(Error::Config(format!("unknown remask mode '{s}'"))),
        }
    }
}

impl fmt::Display for RemaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RemaskMode::None => "none",
            RemaskMode::V1 => "v1",
            RemaskMode::V2 => "v2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Mean,
    Sum,
    Max,
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolMode::Mean),
            "sum" => Ok(PoolMode::Sum),
            "max" => Ok(PoolMode::Max),
            _ => Err(Error::Config(format!("unknown pooling mode '{s}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Batches

/// A disjoint union of graphs with the constant operators message passing
/// needs.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub graph: MolGraph,
    /// `offsets[k]..offsets[k + 1]` are the nodes of graph `k`.
    pub offsets: Vec<usize>,
    pub graph_of: Vec<usize>,
    pub atom_ids: Vec<usize>,
    adj: Rc<SparseMat>,
    bond_counts: Rc<SparseMat>,
}

impl GraphBatch {
    pub fn new(graphs: &[MolGraph], atoms: &AtomVocab) -> Result<Self> {
        let (graph, mut offsets) = batch_graphs(graphs)?;
        offsets.push(graph.num_nodes());
        let mut graph_of = Vec::with_capacity(graph.num_nodes());
        for k in 0..graphs.len() {
            graph_of.extend(std::iter::repeat_n(k, offsets[k + 1] - offsets[k]));
        }
        let n = graph.num_nodes();
        let mut adj = Vec::with_capacity(2 * graph.num_edges());
        let mut counts = Vec::with_capacity(2 * graph.num_edges());
        for e in graph.edges() {
            adj.push((e.i, e.j, 1.0));
            adj.push((e.j, e.i, 1.0));
            let b = e.attr.bond_type.code() as usize;
            counts.push((e.i, b, 1.0));
            counts.push((e.j, b, 1.0));
        }
        Ok(GraphBatch {
            atom_ids: atoms.ids(&graph),
            adj: Rc::new(SparseMat::new(n, n, adj)?),
            bond_counts: Rc::new(SparseMat::new(n, BondType::ALL.len(), counts)?),
            graph,
            offsets,
            graph_of,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn nodes_of(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn adjacency(&self) -> &Rc<SparseMat> {
        &self.adj
    }

    /// `n x 4` counts of incident bonds per type.
    pub fn bond_counts(&self) -> &Rc<SparseMat> {
        &self.bond_counts
    }
}

// ---------------------------------------------------------------------------
// Layers

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Affine {
            gamma: store.add(format!("{prefix}.gamma"), Mat::ones((1, dim)))?,
            beta: store.add(format!("{prefix}.beta"), Mat::zeros((1, dim)))?,
        })
    }

    fn on_tape(&self, tape: &mut Tape, store: &ParamStore) -> Result<(Tensor, Tensor)> {
        Ok((tape.param(store, self.gamma)?, tape.param(store, self.beta)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// `4 x d` bond-type embedding added to every incoming message.
    pub edge_embed: Option<ParamId>,
    pub eps: f64,
}

impl GinLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        dim: usize,
        eps: f64,
        edge_features: bool,
    ) -> Result<Self> {
        if !eps.is_finite() {
            return Err(Error::Model("GIN eps must be finite".into()));
        }
        let hidden = 2 * dim;
        Ok(GinLayer {
            w1: store.add(format!("{prefix}.w1"), glorot(rng, dim, hidden))?,
            b1: store.add(format!("{prefix}.b1"), Mat::zeros((1, hidden)))?,
            w2: store.add(format!("{prefix}.w2"), glorot(rng, hidden, dim))?,
            b2: store.add(format!("{prefix}.b2"), Mat::zeros((1, dim)))?,
            edge_embed: if edge_features {
                Some(store.add(format!("{prefix}.edge"), glorot(rng, BondType::ALL.len(), dim))?)
            } else {
                None
            },
            eps,
        })
    }
}

/// `MLP((1 + eps) h_i + sum_{j in N(i)} (h_j + E[b_ij]))`, with the edge
/// term present only when the layer has an edge table and `bond_counts` is
/// given.
pub fn gin_forward(
    tape: &mut Tape,
    store: &ParamStore,
    h: Tensor,
    adj: &Rc<SparseMat>,
    layer: &GinLayer,
    bond_counts: Option<&Rc<SparseMat>>,
) -> Result<Tensor> {
    let mut agg = tape.spmm(adj, h)?;
    if let (Some(table), Some(counts)) = (layer.edge_embed, bond_counts) {
        let e = tape.param(store, table)?;
        let msg = tape.spmm(counts, e)?;
        agg = tape.add(agg, msg)?;
    }
    let own = tape.scale(h, 1.0 + layer.eps)?;
    let x = tape.add(own, agg)?;
    let (w1, b1) = (tape.param(store, layer.w1)?, tape.param(store, layer.b1)?);
    let (w2, b2) = (tape.param(store, layer.w2)?, tape.param(store, layer.b2)?);
    let mid = tape.linear(x, w1, b1)?;
    let mid = tape.relu(mid)?;
    tape.linear(mid, w2, b2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayer {
    pub norm1: Affine,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm2: Affine,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

impl AttnLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dim: usize) -> Result<Self> {
        let hidden = 2 * dim;
        Ok(AttnLayer {
            norm1: Affine::new(store, &format!("{prefix}.norm1"), dim)?,
            wq: store.add(format!("{prefix}.wq"), glorot(rng, dim, dim))?,
            wk: store.add(format!("{prefix}.wk"), glorot(rng, dim, dim))?,
            wv: store.add(format!("{prefix}.wv"), glorot(rng, dim, dim))?,
            wo: store.add(format!("{prefix}.wo"), glorot(rng, dim, dim))?,
            norm2: Affine::new(store, &format!("{prefix}.norm2"), dim)?,
            ff_w1: store.add(format!("{prefix}.ff_w1"), glorot(rng, dim, hidden))?,
            ff_b1: store.add(format!("{prefix}.ff_b1"), Mat::zeros((1, hidden)))?,
            ff_w2: store.add(format!("{prefix}.ff_w2"), glorot(rng, hidden, dim))?,
            ff_b2: store.add(format!("{prefix}.ff_b2"), Mat::zeros((1, dim)))?,
        })
    }
}

/// Output of one attention layer together with the per-graph attention
/// matrices, for inspection.
#[derive(Debug, Clone)]
pub struct AttnOutput {
    pub out: Tensor,
    /// `(rows of h, softmax weights)` for every graph block.
    pub weights: Vec<(Range<usize>, Tensor)>,
}

/// Pre-norm single-head attention plus feed-forward, both residual. Rows of
/// `h` must be grouped by graph: `membership[r]` is the graph of row `r` and
/// is non-decreasing. Attention never crosses graph blocks.
pub fn attn_forward(
    tape: &mut Tape,
    store: &ParamStore,
    h: Tensor,
    membership: &[usize],
    layer: &AttnLayer,
) -> Result<AttnOutput> {
    let (n, d) = tape.shape(h);
    if membership.len() != n {
        return Err(Error::Shape {
            op: "attn_forward",
            detail: format!("{} membership entries for {n} rows", membership.len()),
        });
    }
    if membership.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Model("attention rows must be grouped by graph".into()));
    }
    let (g1, b1) = layer.norm1.on_tape(tape, store)?;
    let a = tape.layer_norm(h, g1, b1)?;
    let wq = tape.param(store, layer.wq)?;
    let wk = tape.param(store, layer.wk)?;
    let wv = tape.param(store, layer.wv)?;
    let q = tape.matmul(a, wq)?;
    let k = tape.matmul(a, wk)?;
    let v = tape.matmul(a, wv)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut blocks = Vec::new();
    let mut weights = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && membership[end] == membership[start] {
            end += 1;
        }
        let rows: Vec<usize> = (start..end).collect();
        let (qb, kb, vb) = (
            tape.select_rows(q, &rows)?,
            tape.select_rows(k, &rows)?,
            tape.select_rows(v, &rows)?,
        );
        let kt = tape.transpose(kb)?;
        let scores = tape.matmul(qb, kt)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.softmax_rows(scores)?;
        blocks.push(tape.matmul(p, vb)?);
        weights.push((start..end, p));
        start = end;
    }
    if blocks.is_empty() {
        return Err(Error::Model("attention over zero rows".into()));
    }
    let ctx = tape.concat_rows(&blocks)?;
    let wo = tape.param(store, layer.wo)?;
    let o = tape.matmul(ctx, wo)?;
    let x = tape.add(h, o)?;
    let (g2, b2) = layer.norm2.on_tape(tape, store)?;
    let f = tape.layer_norm(x, g2, b2)?;
    let (fw1, fb1) = (tape.param(store, layer.ff_w1)?, tape.param(store, layer.ff_b1)?);
    let (fw2, fb2) = (tape.param(store, layer.ff_w2)?, tape.param(store, layer.ff_b2)?);
    let f = tape.linear(f, fw1, fb1)?;
    let f = tape.relu(f)?;
    let f = tape.linear(f, fw2, fb2)?;
    Ok(AttnOutput {
        out: tape.add(x, f)?,
        weights,
    })
}

/// GIN layers (each followed by batch norm, ReLU between layers) then
/// attention layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub gin: Vec<(GinLayer, Affine)>,
    pub attn: Vec<AttnLayer>,
}

impl Stack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: StackConfig,
        edge_features: bool,
    ) -> Result<Self> {
        let gin = (0..cfg.gin_layers)
            .map(|l| {
                let p = format!("{prefix}.gin{l}");
                let layer = GinLayer::new(store, rng, &p, cfg.dim, 0.0, edge_features)?;
                let norm = Affine::new(store, &format!("{p}.bn"), cfg.dim)?;
                Ok((layer, norm))
            })
            .collect::<Result<_>>()?;
        let attn = (0..cfg.attn_layers)
            .map(|l| AttnLayer::new(store, rng, &format!("{prefix}.attn{l}"), cfg.dim))
            .collect::<Result<_>>()?;
        Ok(Stack { gin, attn })
    }

    fn run_gin(&self, tape: &mut Tape, store: &ParamStore, batch: &GraphBatch, mut h: Tensor) -> Result<Tensor> {
        let last = self.gin.len().saturating_sub(1);
        for (l, (layer, norm)) in self.gin.iter().enumerate() {
            h = gin_forward(tape, store, h, batch.adjacency(), layer, Some(batch.bond_counts()))?;
            let (g, b) = norm.on_tape(tape, store)?;
            h = tape.batch_norm(h, g, b)?;
            if l < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn run_attn(&self, tape: &mut Tape, store: &ParamStore, mut h: Tensor, membership: &[usize]) -> Result<Tensor> {
        for layer in &self.attn {
            h = attn_forward(tape, store, h, membership, layer)?.out;
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// Autoencoder

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Atom-vocabulary size including UNK; the mask row `m0` follows.
    pub num_atom_ids: usize,
    pub dim: usize,
    pub encoder: Preset,
    pub decoder: Preset,
    pub out_dim: usize,
    pub edge_features: bool,
    pub remask: RemaskMode,
}

/// Named intermediate tensors of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub input: Tensor,
    pub post_gin: Tensor,
    /// Attention output: all rows, or only the kept rows under remask v2.
    pub post_attn: Option<Tensor>,
    /// Decoder input after remasking.
    pub hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: ParamId,
    pub m1: ParamId,
    pub encoder: Stack,
    pub decoder: Stack,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Autoencoder {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.dim == 0 || cfg.out_dim == 0 || cfg.num_atom_ids == 0 {
            return Err(Error::Model("model dims must be positive".into()));
        }
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let a = 3f64.sqrt();
        let table = Array2::from_shape_fn((cfg.num_atom_ids + 1, d), |_| rng.gen_range(-a..a));
        let embed = store.add("encoder.embed", table)?;
        let encoder = Stack::new(
            &mut store,
            rng,
            "encoder",
            StackConfig::from_preset(cfg.encoder, d),
            cfg.edge_features,
        )?;
        let m1 = store.add("remask.m1", glorot(rng, 1, d))?;
        let decoder = Stack::new(
            &mut store,
            rng,
            "decoder",
            StackConfig::from_preset(cfg.decoder, d),
            cfg.edge_features,
        )?;
        let head_w = store.add("decoder.head.w", glorot(rng, d, cfg.out_dim))?;
        let head_b = store.add("decoder.head.b", Mat::zeros((1, cfg.out_dim)))?;
        Ok(Autoencoder {
            cfg,
            store,
            embed,
            m1,
            encoder,
            decoder,
            head_w,
            head_b,
        })
    }

    /// Embedding row used for masked inputs.
    pub fn mask_id(&self) -> usize {
        self.cfg.num_atom_ids
    }

    /// Input features with `m0` substituted at `masked`.
    pub fn embed_input(&self, tape: &mut Tape, batch: &GraphBatch, masked: &[usize]) -> Result<Tensor> {
        if batch.atom_ids.iter().any(|&i| i >= self.cfg.num_atom_ids) {
            return Err(Error::Model("atom id outside the model's vocabulary".into()));
        }
        let table = tape.param(&self.store, self.embed)?;
        tape.embedding_lookup(table, &batch.atom_ids, Some((self.mask_id(), masked)))
    }

    pub fn encode(&self, tape: &mut Tape, batch: &GraphBatch, masked: &[usize], mode: RemaskMode) -> Result<Encoded> {
        let input = self.embed_input(tape, batch, masked)?;
        let post_gin = self.encoder.run_gin(tape, &self.store, batch, input)?;
        let (post_attn, hidden) = self.attention_stage(tape, batch, post_gin, masked, mode)?;
        Ok(Encoded {
            input,
            post_gin,
            post_attn,
            hidden,
        })
    }

    /// Encoder attention layers plus remasking, starting from the
    /// message-passing output `h`. Returns `(attention output, hidden)`.
    ///
    /// Under v2, masked rows are removed before the attention layers and
    /// `m1` is padded back afterwards; without attention layers this is the
    /// same as v1.
    pub fn attention_stage(
        &self,
        tape: &mut Tape,
        batch: &GraphBatch,
        h: Tensor,
        masked: &[usize],
        mode: RemaskMode,
    ) -> Result<(Option<Tensor>, Tensor)> {
        let n = batch.num_nodes();
        if masked.iter().any(|&i| i >= n) {
            return Err(Error::Model("masked index out of range".into()));
        }
        let has_attn = !self.encoder.attn.is_empty();
        if mode == RemaskMode::V2 && has_attn && !masked.is_empty() {
            let mut is_masked = vec![false; n];
            for &i in masked {
                is_masked[i] = true;
            }
            let keep: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
            let membership: Vec<usize> = keep.iter().map(|&i| batch.graph_of[i]).collect();
            for k in 0..batch.num_graphs() {
                if batch.nodes_of(k).all(|i| is_masked[i]) {
                    return Err(Error::Model(format!(
                        "every node of graph {k} is masked; lower the mask ratio"
                    )));
                }
            }
            let kept = tape.select_rows(h, &keep)?;
            let out = self.encoder.run_attn(tape, &self.store, kept, &membership)?;
            let m1 = tape.param(&self.store, self.m1)?;
            let pad = tape.repeat_row(m1, n)?;
            let hidden = tape.overwrite_rows(pad, &keep, out)?;
            return Ok((Some(out), hidden));
        }
        let post_attn = if has_attn {
            Some(self.encoder.run_attn(tape, &self.store, h, &batch.graph_of)?)
        } else {
            None
        };
        let enc = post_attn.unwrap_or(h);
        let hidden = if mode != RemaskMode::None && !masked.is_empty() {
            let m1 = tape.param(&self.store, self.m1)?;
            let fill = tape.repeat_row(m1, masked.len())?;
            tape.overwrite_rows(enc, masked, fill)?
        } else {
            enc
        };
        Ok((post_attn, hidden))
    }

    pub fn decode(&self, tape: &mut Tape, batch: &GraphBatch, hidden: Tensor) -> Result<Tensor> {
        let (n, d) = tape.shape(hidden);
        if n != batch.num_nodes() || d != self.cfg.dim {
            return Err(Error::Shape {
                op: "decode",
                detail: format!("hidden {n}x{d}, expected {}x{}", batch.num_nodes(), self.cfg.dim),
            });
        }
        let h = self.decoder.run_gin(tape, &self.store, batch, hidden)?;
        let h = self.decoder.run_attn(tape, &self.store, h, &batch.graph_of)?;
        let w = tape.param(&self.store, self.head_w)?;
        let b = tape.param(&self.store, self.head_b)?;
        tape.linear(h, w, b)
    }

    /// Encoder, remask (using the configured mode) and decoder.
    pub fn forward(&self, tape: &mut Tape, batch: &GraphBatch, masked: &[usize]) -> Result<(Encoded, Tensor)> {
        let enc = self.encode(tape, batch, masked, self.cfg.remask)?;
        let z = self.decode(tape, batch, enc.hidden)?;
        Ok((enc, z))
    }

    /// Current embedding rows (without the mask row).
    pub fn embedding_table(&self) -> Mat {
        let t = self.store.value(self.embed);
        t.slice(ndarray::s![..self.cfg.num_atom_ids, ..]).to_owned()
    }
}

/// Pools the rows of `z` belonging to `frag` into one `1 x d` row.
pub fn pool_subgraph(tape: &mut Tape, z: Tensor, frag: &Fragment, mode: PoolMode) -> Result<Tensor> {
    if frag.is_empty() {
        return Err(Error::Model("cannot pool an empty fragment".into()));
    }
    let rows = tape.shape(z).0;
    if let Some(&bad) = frag.nodes().iter().find(|&&v| v >= rows) {
        return Err(Error::Model(format!("fragment node {bad} outside {rows} rows")));
    }
    let sel = tape.select_rows(z, frag.nodes())?;
    match mode {
        PoolMode::Mean => tape.mean_rows(sel),
        PoolMode::Sum => tape.sum_rows(sel),
        PoolMode::Max => tape.max_rows(sel),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fragment::FragmentKind;
    use crate::molgraph::parse_smiles;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(encoder: Preset, decoder: Preset, remask: RemaskMode) -> (Autoencoder, AtomVocab) {
        let atoms = AtomVocab::new(vec![6, 7, 8]);
        let cfg = ModelConfig {
            num_atom_ids: atoms.size(),
            dim: 4,
            encoder,
            decoder,
            out_dim: 3,
            edge_features: true,
            remask,
        };
        (Autoencoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap(), atoms)
    }

    #[test]
    fn presets() {
        assert_eq!(Preset::Gts.layers(), (5, 4));
        assert_eq!(Preset::GtsSmall.layers(), (3, 1));
        assert_eq!(Preset::GtsTiny.layers(), (1, 1));
        assert_eq!("gine_small".parse::<Preset>().unwrap(), Preset::GineSmall);
        assert!("gat".parse::<Preset>().is_err());
    }

    #[test]
    fn pooling_examples() {
        let g = parse_smiles("CC").unwrap();
        let frag = Fragment::new(&g, vec![0, 1], vec![0], FragmentKind::Induced);
        let single = Fragment::new(&g, vec![1], vec![], FragmentKind::SingletonNode);
        let mut t = Tape::new();
        let z = t.constant(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let pooled = |t: &mut Tape, f: &Fragment, m| {
            let p = pool_subgraph(t, z, f, m).unwrap();
            t.value(p).row(0).to_vec()
        };
        assert_eq!(pooled(&mut t, &frag, PoolMode::Mean), vec![2.0, 3.0]);
        assert_eq!(pooled(&mut t, &frag, PoolMode::Sum), vec![4.0, 6.0]);
        assert_eq!(pooled(&mut t, &frag, PoolMode::Max), vec![3.0, 4.0]);
        for m in [PoolMode::Mean, PoolMode::Sum, PoolMode::Max] {
            assert_eq!(pooled(&mut t, &single, m), vec![3.0, 4.0]);
        }
    }

    #[test]
    fn isolated_node_gin() {
        let (m, atoms) = model(Preset::GtsTiny, Preset::Linear, RemaskMode::None);
        let batch = GraphBatch::new(&[parse_smiles("C").unwrap()], &atoms).unwrap();
        let layer = &m.encoder.gin[0].0;
        let mut t = Tape::new();
        let h = t.constant(array![[0.5, -1.0, 2.0, 0.0]]).unwrap();
        let out = gin_forward(&mut t, &m.store, h, batch.adjacency(), layer, Some(batch.bond_counts())).unwrap();
        let x = array![[0.5, -1.0, 2.0, 0.0]];
        let s = &m.store;
        let mid = (x.dot(s.value(layer.w1)) + s.value(layer.b1)).mapv(|v: f64| v.max(0.0));
        let want = mid.dot(s.value(layer.w2)) + s.value(layer.b2);
        assert_eq!(t.value(out), &want);
    }

    #[test]
    fn remask_v1_rows_equal_m1() {
        let (mut m, atoms) = model(Preset::GtsTiny, Preset::GtsTiny, RemaskMode::V1);
        m.store.get_mut(m.m1).value = array![[9.0, 9.0, 9.0, 9.0]];
        let batch = GraphBatch::new(&[parse_smiles("CCO").unwrap()], &atoms).unwrap();
        let mut t = Tape::new();
        let enc = m.encode(&mut t, &batch, &[1], RemaskMode::V1).unwrap();
        assert_eq!(t.value(enc.hidden).row(1).to_vec(), vec![9.0; 4]);
    }

    #[test]
    fn empty_mask_is_identity() {
        let (m, atoms) = model(Preset::GtsSmall, Preset::GtsTiny, RemaskMode::V2);
        let batch = GraphBatch::new(&[parse_smiles("CCO").unwrap(), parse_smiles("N").unwrap()], &atoms).unwrap();
        let run = |mode| {
            let mut t = Tape::new();
            let enc = m.encode(&mut t, &batch, &[], mode).unwrap();
            t.value(enc.hidden).clone()
        };
        let base = run(RemaskMode::None);
        assert_eq!(run(RemaskMode::V1), base);
        assert_eq!(run(RemaskMode::V2), base);
    }

    #[test]
    fn fully_masked_graph_is_rejected() {
        let (m, atoms) = model(Preset::GtsTiny, Preset::Linear, RemaskMode::V2);
        let batch = GraphBatch::new(&[parse_smiles("CC").unwrap(), parse_smiles("N").unwrap()], &atoms).unwrap();
        let mut t = Tape::new();
        let err = m.encode(&mut t, &batch, &[2], RemaskMode::V2).unwrap_err();
        assert!(err.to_string().contains("mask ratio"), "{err}");
    }

    #[test]
    fn attention_blocks() {
        let (m, atoms) = model(Preset::GtsTiny, Preset::Linear, RemaskMode::None);
        let batch = GraphBatch::new(&[parse_smiles("C").unwrap(), parse_smiles("CC").unwrap()], &atoms).unwrap();
        let mut t = Tape::new();
        let h = t
            .constant(array![[1.0, 0.0, 0.0, 2.0], [0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]])
            .unwrap();
        let out = attn_forward(&mut t, &m.store, h, &batch.graph_of, &m.encoder.attn[0]).unwrap();
        assert_eq!(out.weights.len(), 2);
        assert_eq!(t.value(out.weights[0].1), &array![[1.0]]);
        for (_, w) in &out.weights {
            for row in t.value(*w).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        let v = t.value(out.out);
        assert_eq!(v.row(1), v.row(2));
    }

    #[test]
    fn decode_shapes() {
        let (m, atoms) = model(Preset::GtsSmall, Preset::GtsSmall, RemaskMode::V2);
        let batch = GraphBatch::new(&[parse_smiles("O").unwrap()], &atoms).unwrap();
        let mut t = Tape::new();
        let (_, z) = m.forward(&mut t, &batch, &[]).unwrap();
        assert_eq!(t.shape(z), (1, 3));
        let (lin, _) = model(Preset::Linear, Preset::Linear, RemaskMode::None);
        let mut t = Tape::new();
        let h = t.constant(Mat::ones((1, 4))).unwrap();
        let z = lin.decode(&mut t, &batch, h).unwrap();
        let want = Mat::ones((1, 4)).dot(lin.store.value(lin.head_w)) + lin.store.value(lin.head_b);
        assert_eq!(t.value(z), &want);
    }
}
