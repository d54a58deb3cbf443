//! Simple GNN-based tokenizer: `k` propagations with a fixed linear graph
//! operator, each followed by batch normalization without affine
//! parameters, concatenated across layers. The tokenizer owns no weights; it
//! reads the encoder's node-embedding table and runs entirely outside any
//! gradient tape.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::{adjacency, AdjacencyView, MolGraph};

/// GIN epsilon used by the tokenizer.
pub const DEFAULT_GIN_EPS: f64 = 0.5;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GraphOperatorKind {
    /// `A + (1 + eps) I`
    Gin { eps: f64 },
    /// `D^-1/2 (A + I) D^-1/2`
    Gcn,
    /// `D^-1 (A + I)`
    Sage,
}

impl fmt::Display for GraphOperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphOperatorKind::Gin { eps } => write!(f, "gin({eps})"),
            GraphOperatorKind::Gcn => f.write_str("gcn"),
            GraphOperatorKind::Sage => f.write_str("sage"),
        }
    }
}

impl FromStr for GraphOperatorKind {
    type Err = Error;

    /// Accepts `gin`, `gin(0.3)`, `gcn`, `sage`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "gin" => return Ok(GraphOperatorKind::Gin { eps: DEFAULT_GIN_EPS }),
            "gcn" => return Ok(GraphOperatorKind::Gcn),
            "sage" => return Ok(GraphOperatorKind::Sage),
            _ => {}
        }
        let eps = s
            .strip_prefix("gin(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|e| e.trim().parse::<f64>().ok())
            .filter(|e| e.is_finite())
            .ok_or_else(|| Error::Config(format!("unknown graph operator '{s}'")))?;
        Ok(GraphOperatorKind::Gin { eps })
    }
}

/// Dense `ω(A)` for the operator family.
pub fn build_operator(adj: &AdjacencyView, kind: GraphOperatorKind) -> Array2<f64> {
    let n = adj.n();
    match kind {
        GraphOperatorKind::Gin { eps } => &adj.a + &(Array2::<f64>::eye(n) * (1.0 + eps)),
        GraphOperatorKind::Gcn => Array2::from_shape_fn((n, n), |(i, j)| {
            adj.a_tilde[[i, j]] / (adj.deg_tilde[i] * adj.deg_tilde[j]).sqrt()
        }),
        GraphOperatorKind::Sage => {
            Array2::from_shape_fn((n, n), |(i, j)| adj.a_tilde[[i, j]] / adj.deg_tilde[i])
        }
    }
}

/// Column-wise `(x - mean) / sqrt(max(var, eps))` using batch statistics
/// and the population variance. No learned scale or shift. The guard only
/// engages for (near-)constant columns, so every other column comes out
/// with standard deviation 1 up to rounding.
pub fn batch_normalize(m: &Array2<f64>, bn_epsilon: f64) -> Array2<f64> {
    let n = m.nrows().max(1) as f64;
    let mut out = m.clone();
    for mut col in out.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = var.max(bn_epsilon).sqrt();
        col.mapv_inplace(|v| (v - mean) / denom);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgtConfig {
    pub kind: GraphOperatorKind,
    pub layers: usize,
    pub embedding_dim: usize,
    pub bn_epsilon: f64,
    /// Switch for the normalization step; off only for diagnostics.
    pub batch_norm: bool,
}

impl SgtConfig {
    pub fn new(kind: GraphOperatorKind, layers: usize, embedding_dim: usize) -> Result<Self> {
        let cfg = SgtConfig {
            kind,
            layers,
            embedding_dim,
            bn_epsilon: DEFAULT_BN_EPS,
            batch_norm: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("SGT needs at least one layer and dimension".into()));
        }
        if let GraphOperatorKind::Gin { eps } = self.kind {
            if !eps.is_finite() {
                return Err(Error::Config("GIN epsilon must be finite".into()));
            }
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::Config("bn_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.layers * self.embedding_dim
    }
}

/// Node-embedding rows keyed by atomic number.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbedding {
    table: Array2<f64>,
    row_of: BTreeMap<u8, usize>,
}

impl NodeEmbedding {
    pub fn new(table: Array2<f64>, row_of: BTreeMap<u8, usize>) -> Result<Self> {
        if let Some((z, r)) = row_of.iter().find(|(_, &r)| r >= table.nrows()) {
            return Err(Error::Tokenizer(format!(
                "embedding row {r} for Z={z} is outside a {}-row table",
                table.nrows()
            )));
        }
        Ok(NodeEmbedding { table, row_of })
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn row(&self, z: u8) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.row_of.get(&z).map(|&r| self.table.row(r))
    }
}

/// Tokens for every node of a batch: row `i` is `[H1_i, ..., Hk_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgtTokens {
    pub values: Array2<f64>,
    pub layers: usize,
    pub dim: usize,
}

impl SgtTokens {
    pub fn layer(&self, l: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![.., l * self.dim..(l + 1) * self.dim])
    }

    pub fn token_dim(&self) -> usize {
        self.values.ncols()
    }
}

/// `op · h`, with each row's terms summed in sorted order so that nodes
/// whose weighted neighbor rows form the same multiset get bit-identical
/// results regardless of node numbering.
pub fn propagate(op: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((op.nrows(), h.ncols()));
    for (i, coeffs) in op.rows().into_iter().enumerate() {
        let mut terms: Vec<Vec<f64>> = coeffs
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(j, &c)| h.row(j).iter().map(|v| c * v).collect())
            .collect();
        terms.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut row = out.row_mut(i);
        for t in &terms {
            for (o, v) in row.iter_mut().zip(t) {
                *o += v;
            }
        }
    }
    out
}

pub fn sgt_tokenize(batch: &MolGraph, embedding: &NodeEmbedding, cfg: &SgtConfig) -> Result<SgtTokens> {
    cfg.validate()?;
    if embedding.dim() != cfg.embedding_dim {
        return Err(Error::Tokenizer(format!(
            "embedding dim {} does not match SGT dim {}",
            embedding.dim(),
            cfg.embedding_dim
        )));
    }
    let n = batch.num_nodes();
    let d = cfg.embedding_dim;
    let mut h = Array2::<f64>::zeros((n, d));
    for (i, node) in batch.nodes().iter().enumerate() {
        let row = embedding.row(node.atomic_number).ok_or_else(|| {
            Error::Tokenizer(format!(
                "embedding has no row for atomic number {}",
                node.atomic_number
            ))
        })?;
        h.row_mut(i).assign(&row);
    }
    let op = build_operator(&adjacency(batch), cfg.kind);
    let mut out = Array2::<f64>::zeros((n, cfg.token_dim()));
    for l in 0..cfg.layers {
        let propagated = propagate(&op, &h);
        h = if cfg.batch_norm {
            batch_normalize(&propagated, cfg.bn_epsilon)
        } else {
            propagated
        };
        out.slice_mut(s![.., l * d..(l + 1) * d]).assign(&h);
    }
    Ok(SgtTokens {
        values: out,
        layers: cfg.layers,
        dim: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::parse_smiles;
    use ndarray::array;

    fn two_hot() -> NodeEmbedding {
        NodeEmbedding::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            BTreeMap::from([(6, 0), (8, 1)]),
        )
        .unwrap()
    }

    #[test]
    fn operator_examples() {
        let path = adjacency(&parse_smiles("CC").unwrap());
        assert_eq!(
            build_operator(&path, GraphOperatorKind::Gin { eps: 0.5 }),
            array![[1.5, 1.0], [1.0, 1.5]]
        );
        assert_eq!(build_operator(&path, GraphOperatorKind::Gcn), array![[0.5, 0.5], [0.5, 0.5]]);
        let star = adjacency(&parse_smiles("C(C)(C)C").unwrap());
        let sage = build_operator(&star, GraphOperatorKind::Sage);
        assert_eq!(sage.row(0).to_vec(), vec![0.25; 4]);
        for row in sage.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bn_examples() {
        let out = batch_normalize(&array![[1.0], [3.0]], DEFAULT_BN_EPS);
        assert_eq!(out, array![[-1.0], [1.0]]);
        let out = batch_normalize(&array![[2.0], [2.0]], 1e-5);
        assert_eq!(out, array![[0.0], [0.0]]);
    }

    #[test]
    fn methanol_tokens() {
        let g = parse_smiles("CO").unwrap();
        let cfg = SgtConfig::new(GraphOperatorKind::Gin { eps: 0.5 }, 1, 2).unwrap();
        let t = sgt_tokenize(&g, &two_hot(), &cfg).unwrap();
        // propagated rows [1.5, 1] and [1, 1.5]; per-column mean 1.25, std 0.25
        assert_eq!(t.values, array![[1.0, -1.0], [-1.0, 1.0]]);
    }

    #[test]
    fn shapes_and_errors() {
        let g = parse_smiles("CCO").unwrap();
        let emb = NodeEmbedding::new(
            Array2::from_shape_fn((2, 4), |(i, j)| (i * 4 + j) as f64),
            BTreeMap::from([(6, 0), (8, 1)]),
        )
        .unwrap();
        let cfg = SgtConfig::new(GraphOperatorKind::Gcn, 2, 4).unwrap();
        let t = sgt_tokenize(&g, &emb, &cfg).unwrap();
        assert_eq!(t.values.dim(), (3, 8));
        assert_eq!(t.layer(1).dim(), (3, 4));
        let missing = parse_smiles("CN").unwrap();
        assert!(sgt_tokenize(&missing, &emb, &cfg).is_err());
        assert!(SgtConfig::new(GraphOperatorKind::Gcn, 0, 4).is_err());
    }

    #[test]
    fn operator_names() {
        assert_eq!("gin".parse::<GraphOperatorKind>().unwrap(), GraphOperatorKind::Gin { eps: 0.5 });
        assert_eq!(
            "gin(0.1)".parse::<GraphOperatorKind>().unwrap(),
            GraphOperatorKind::Gin { eps: 0.1 }
        );
        assert!("gat".parse::<GraphOperatorKind>().is_err());
    }
}
