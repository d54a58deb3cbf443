//! Tokenizers that map graphs or fragments to reconstruction targets.
//!
//! Node and edge tokenizers emit one discrete id per node or bond. The motif
//! tokenizer fragments a graph with a recipe and looks each fragment's
//! canonical key up in a corpus vocabulary. The frozen-GNN tokenizer runs a
//! fixed message-passing network with plain array arithmetic, so its weights
//! never meet a gradient tape.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fragment::{compose, Fragment, FragmentContext, FragmentKind, Recipe};
use crate::io::{fnv1a64, write_atomic};
use crate::molgraph::{adjacency, MolGraph};
use crate::tensorcore::{standardize_cols, NORM_EPS};

pub const DEFAULT_MOTIF_THRESHOLD: usize = 5;
/// Largest fragment that [`canonical_key`] will canonicalize.
pub const MAX_KEY_NODES: usize = 12;
const BRUTE_FORCE_NODES: usize = 8;
pub const UNK_KEY: &str = "<UNK>";

#[derive(Debug, Clone, PartialEq)]
pub enum TokenValue {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub value: TokenValue,
    pub fragment: Fragment,
}

impl Token {
    pub fn id(&self) -> Option<usize> {
        match self.value {
            TokenValue::Discrete(id) => Some(id),
            TokenValue::Continuous(_) => None,
        }
    }
}

/// Atomic numbers seen in a corpus, ascending, plus a trailing UNK id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomVocab {
    atoms: Vec<u8>,
}

impl AtomVocab {
    pub fn new(mut atoms: Vec<u8>) -> Self {
        atoms.sort_unstable();
        atoms.dedup();
        AtomVocab { atoms }
    }

    pub fn from_graphs<'a>(graphs: impl IntoIterator<Item = &'a MolGraph>) -> Self {
        Self::new(
            graphs
                .into_iter()
                .flat_map(|g| g.nodes().iter().map(|a| a.atomic_number))
                .collect(),
        )
    }

    pub fn atoms(&self) -> &[u8] {
        &self.atoms
    }

    pub fn unk(&self) -> usize {
        self.atoms.len()
    }

    /// Number of ids including UNK.
    pub fn size(&self) -> usize {
        self.atoms.len() + 1
    }

    pub fn id(&self, z: u8) -> usize {
        self.atoms.binary_search(&z).unwrap_or(self.unk())
    }

    pub fn ids(&self, g: &MolGraph) -> Vec<usize> {
        g.nodes().iter().map(|a| self.id(a.atomic_number)).collect()
    }
}

pub fn tok_node(g: &MolGraph, vocab: &AtomVocab) -> Vec<Token> {
    let id = g.id();
    g.nodes()
        .iter()
        .enumerate()
        .map(|(i, a)| Token {
            value: TokenValue::Discrete(vocab.id(a.atomic_number)),
            fragment: Fragment::with_parent(id, vec![i], vec![], FragmentKind::SingletonNode),
        })
        .collect()
}

/// One id per edge; ids follow `BondType::code` (single, double, triple,
/// aromatic).
pub fn tok_edge(g: &MolGraph) -> Vec<Token> {
    let id = g.id();
    g.edges()
        .iter()
        .enumerate()
        .map(|(k, e)| Token {
            value: TokenValue::Discrete(e.attr.bond_type.code() as usize),
            fragment: Fragment::with_parent(id, vec![e.i, e.j], vec![k], FragmentKind::SingleEdge),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Canonical keys

/// Local view of a fragment: labels plus a dense bond-code matrix.
struct KeyGraph {
    labels: Vec<String>,
    /// `bond[i][j]`: 1..=4 for the bond types, `NO_BOND` otherwise. Bonds
    /// sort before "no bond" so the minimum prefers connected orderings,
    /// which keeps the search narrow.
    bond: Vec<Vec<u8>>,
}

const NO_BOND: u8 = 5;

impl KeyGraph {
    fn new(frag: &Fragment, g: &MolGraph) -> Self {
        let labels = frag.nodes().iter().map(|&v| g.node(v).symbol()).collect();
        let n = frag.len();
        let mut bond = vec![vec![NO_BOND; n]; n];
        let local = |v: usize| frag.nodes().binary_search(&v).expect("edge inside fragment");
        for &k in frag.edges() {
            let e = g.edge(k);
            let (a, b) = (local(e.i), local(e.j));
            let c = e.attr.bond_type.code() + 1;
            bond[a][b] = c;
            bond[b][a] = c;
        }
        KeyGraph { labels, bond }
    }

    /// Nodes grouped by label, groups in ascending label order.
    fn label_classes(&self) -> Vec<Vec<usize>> {
        let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            by.entry(l).or_default().push(i);
        }
        by.into_values().collect()
    }

    /// Lower-triangle bond codes in placement order: for each position `p`,
    /// the codes to positions `0..p`.
    fn code(&self, order: &[usize]) -> Vec<u8> {
        let mut out = Vec::with_capacity(order.len() * order.len() / 2);
        for p in 1..order.len() {
            for q in 0..p {
                out.push(self.bond[order[p]][order[q]]);
            }
        }
        out
    }

    fn render(&self, order: &[usize]) -> String {
        let labels: Vec<&str> = order.iter().map(|&v| self.labels[v].as_str()).collect();
        let mut s = labels.join(".");
        s.push('|');
        for c in self.code(order) {
            s.push(char::from(b'0' + c));
        }
        s
    }
}

/// Permutation-invariant string for a fragment's labelled subgraph.
///
/// The key is the minimum, over all node orderings, of the label sequence
/// followed by the lower-triangle bond codes. Since labels come first, only
/// orderings with sorted labels can be minimal; the search runs over those.
/// Up to 8 nodes every such ordering is enumerated; from 9 to 12 a
/// branch-and-bound search prunes any partial ordering whose code prefix
/// already exceeds the best one, which yields the same minimum.
pub fn canonical_key(frag: &Fragment, g: &MolGraph) -> Result<String> {
    if frag.len() > MAX_KEY_NODES {
        return Err(Error::Tokenizer(format!(
            "fragment with {} nodes exceeds the {MAX_KEY_NODES}-node canonicalization limit; \
             use a recipe with smaller fragments or raise the vocabulary threshold",
            frag.len()
        )));
    }
    let kg = KeyGraph::new(frag, g);
    let order = if frag.len() <= BRUTE_FORCE_NODES {
        brute_force_order(&kg)
    } else {
        branch_and_bound_order(&kg)
    };
    Ok(kg.render(&order))
}

fn brute_force_order(kg: &KeyGraph) -> Vec<usize> {
    let classes = kg.label_classes();
    let mut best: Option<(Vec<u8>, Vec<usize>)> = None;
    let mut perms: Vec<Vec<usize>> = classes.clone();
    loop {
        let order: Vec<usize> = perms.iter().flatten().copied().collect();
        let code = kg.code(&order);
        if best.as_ref().is_none_or(|(b, _)| code < *b) {
            best = Some((code, order));
        }
        // odometer over per-class permutations
        let mut k = 0;
        loop {
            if k == perms.len() {
                return best.map(|(_, o)| o).unwrap_or_default();
            }
            if next_permutation(&mut perms[k]) {
                break;
            }
            k += 1;
        }
    }
}

/// Advances to the next lexicographic permutation; on the last one, resets
/// to sorted order and returns false.
fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        v.reverse();
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn branch_and_bound_order(kg: &KeyGraph) -> Vec<usize> {
    let classes = kg.label_classes();
    let slot_class: Vec<usize> = classes
        .iter()
        .enumerate()
        .flat_map(|(c, m)| std::iter::repeat_n(c, m.len()))
        .collect();
    let n = slot_class.len();
    struct Search<'a> {
        kg: &'a KeyGraph,
        classes: &'a [Vec<usize>],
        slot_class: &'a [usize],
        used: Vec<bool>,
        order: Vec<usize>,
        code: Vec<u8>,
        best: Option<(Vec<u8>, Vec<usize>)>,
    }
    impl Search<'_> {
        fn go(&mut self) {
            let p = self.order.len();
            if p == self.slot_class.len() {
                if self.best.as_ref().is_none_or(|(b, _)| self.code < *b) {
                    self.best = Some((self.code.clone(), self.order.clone()));
                }
                return;
            }
            for &v in &self.classes[self.slot_class[p]] {
                if self.used[v] {
                    continue;
                }
                let start = self.code.len();
                for q in 0..p {
                    self.code.push(self.kg.bond[v][self.order[q]]);
                }
                let worse = self
                    .best
                    .as_ref()
                    .is_some_and(|(b, _)| self.code[..] > b[..self.code.len()]);
                if !worse {
                    self.used[v] = true;
                    self.order.push(v);
                    self.go();
                    self.order.pop();
                    self.used[v] = false;
                }
                self.code.truncate(start);
            }
        }
    }
    let mut s = Search {
        kg,
        classes: &classes,
        slot_class: &slot_class,
        used: vec![false; n],
        order: Vec::with_capacity(n),
        code: Vec::new(),
        best: None,
    };
    s.go();
    s.best.map(|(_, o)| o).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Motif vocabulary

/// Stable identity of a recipe together with the pattern library and
/// cleavage table it consults.
pub fn recipe_fingerprint(recipe: &Recipe, ctx: &FragmentContext) -> String {
    let mut text = String::new();
    for p in &ctx.patterns {
        let _ = writeln!(text, "{p}");
    }
    for (l, r) in &ctx.table.pairs {
        let _ = writeln!(text, "{} | {}", l.source(), r.source());
    }
    format!("{recipe}#{:016x}", fnv1a64(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotifVocabulary {
    keys: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
    threshold: usize,
    fingerprint: String,
    unk_count: usize,
}

impl MotifVocabulary {
    fn from_counts(counts: BTreeMap<String, usize>, threshold: usize, fingerprint: String) -> Self {
        let mut kept: Vec<(String, usize)> = Vec::new();
        let mut unk_count = 0;
        for (k, c) in counts {
            if c >= threshold {
                kept.push((k, c));
            } else {
                unk_count += c;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (keys, counts): (Vec<_>, Vec<_>) = kept.into_iter().unzip();
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        MotifVocabulary {
            keys,
            counts,
            index,
            threshold,
            fingerprint,
            unk_count,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn unk(&self) -> usize {
        self.keys.len()
    }

    /// Number of classes including UNK.
    pub fn num_classes(&self) -> usize {
        self.keys.len() + 1
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Total count of fragments whose key fell below the threshold.
    pub fn unk_count(&self) -> usize {
        self.unk_count
    }

    pub fn id(&self, key: &str) -> usize {
        self.index.get(key).copied().unwrap_or(self.unk())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# motif vocabulary\trecipe={}\tthreshold={}\n",
            self.fingerprint, self.threshold
        );
        for (i, (k, c)) in self.keys.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(s, "{i}\t{c}\t{k}");
        }
        let _ = writeln!(s, "{}\t{}\t{UNK_KEY}", self.unk(), self.unk_count);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, message: &str| Error::Line {
            line: line + 1,
            message: message.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty vocabulary file"))?;
        let mut fingerprint = None;
        let mut threshold = None;
        for field in header.trim_start_matches('#').split('\t') {
            if let Some(v) = field.strip_prefix("recipe=") {
                fingerprint = Some(v.to_string());
            } else if let Some(v) = field.strip_prefix("threshold=") {
                threshold = v.parse::<usize>().ok();
            }
        }
        let (fingerprint, threshold) = fingerprint
            .zip(threshold)
            .ok_or_else(|| bad(0, "header needs recipe= and threshold="))?;
        let mut keys = Vec::new();
        let mut counts = Vec::new();
        let mut unk_count = None;
        for (ln, raw) in lines {
            if raw.trim().is_empty() {
                continue;
            }
            if unk_count.is_some() {
                return Err(bad(ln, "entries after the UNK line"));
            }
            let mut parts = raw.splitn(3, '\t');
            let (Some(i), Some(c), Some(k)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(ln, "expected index<TAB>count<TAB>key"));
            };
            let i: usize = i.parse().map_err(|_| bad(ln, "bad index"))?;
            let c: usize = c.parse().map_err(|_| bad(ln, "bad count"))?;
            if i != keys.len() {
                return Err(bad(ln, "indices must be dense and ascending"));
            }
            if k == UNK_KEY {
                unk_count = Some(c);
            } else {
                if c < threshold {
                    return Err(bad(ln, "count below the vocabulary threshold"));
                }
                keys.push(k.to_string());
                counts.push(c);
            }
        }
        let unk_count = unk_count.ok_or_else(|| bad(0, "missing UNK line"))?;
        let index: HashMap<_, _> = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        if index.len() != keys.len() {
            return Err(Error::Tokenizer("duplicate key in vocabulary file".into()));
        }
        Ok(MotifVocabulary {
            keys,
            counts,
            index,
            threshold,
            fingerprint,
            unk_count,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Canonical keys of every fragment the recipe produces for `g`.
pub fn motif_keys(g: &MolGraph, recipe: &Recipe, ctx: &FragmentContext) -> Result<Vec<(Fragment, String)>> {
    compose(g, recipe, ctx)?
        .into_iter()
        .map(|f| {
            let k = canonical_key(&f, g)?;
            Ok((f, k))
        })
        .collect()
}

/// Counts keys over the corpus in parallel; the merge is order-independent,
/// so the result does not depend on the thread count.
pub fn build_motif_vocab(
    corpus: &[MolGraph],
    recipe: &Recipe,
    ctx: &FragmentContext,
    threshold: usize,
) -> Result<MotifVocabulary> {
    if corpus.is_empty() {
        return Err(Error::Tokenizer("cannot build a vocabulary from an empty corpus".into()));
    }
    if threshold == 0 {
        return Err(Error::Tokenizer("vocabulary threshold must be at least 1".into()));
    }
    let counts = corpus
        .par_iter()
        .map(|g| {
            let mut local = BTreeMap::new();
            for (_, k) in motif_keys(g, recipe, ctx)? {
                *local.entry(k).or_insert(0usize) += 1;
            }
            Ok(local)
        })
        .try_reduce(BTreeMap::new, |mut a, b| {
            for (k, c) in b {
                *a.entry(k).or_insert(0) += c;
            }
            Ok(a)
        })?;
    Ok(MotifVocabulary::from_counts(
        counts,
        threshold,
        recipe_fingerprint(recipe, ctx),
    ))
}

pub fn tok_motif(
    g: &MolGraph,
    recipe: &Recipe,
    ctx: &FragmentContext,
    vocab: &MotifVocabulary,
) -> Result<Vec<Token>> {
    let fp = recipe_fingerprint(recipe, ctx);
    if fp != vocab.fingerprint {
        return Err(Error::Tokenizer(format!(
            "vocabulary was built with recipe '{}', not '{fp}'",
            vocab.fingerprint
        )));
    }
    Ok(motif_keys(g, recipe, ctx)?
        .into_iter()
        .map(|(fragment, k)| Token {
            value: TokenValue::Discrete(vocab.id(&k)),
            fragment,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Frozen GNN tokenizer

/// One GIN layer: `h' = relu((1 + eps) h + A h) W1 + b1) W2 + b2`, followed
/// by batch norm and ReLU on every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    /// `(gamma, beta)`; absent means no normalization after this layer.
    pub norm: Option<(Array2<f64>, Array2<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenGnnTokenizer {
    atoms: AtomVocab,
    embed: Array2<f64>,
    layers: Vec<FrozenLayer>,
    eps: f64,
}

impl FrozenGnnTokenizer {
    /// `embed` needs a row for every atom-vocabulary id including UNK.
    pub fn new(atoms: AtomVocab, embed: Array2<f64>, layers: Vec<FrozenLayer>, eps: f64) -> Result<Self> {
        let shape = |what: String| Error::Shape {
            op: "frozen_gnn",
            detail: what,
        };
        if embed.nrows() < atoms.size() {
            return Err(shape(format!(
                "embedding has {} rows for {} atom ids",
                embed.nrows(),
                atoms.size()
            )));
        }
        if layers.is_empty() {
            return Err(shape("no layers".into()));
        }
        let mut d = embed.ncols();
        for (l, layer) in layers.iter().enumerate() {
            let h = layer.w1.ncols();
            let out = layer.w2.ncols();
            let ok = layer.w1.nrows() == d
                && layer.b1.dim() == (1, h)
                && layer.w2.nrows() == h
                && layer.b2.dim() == (1, out)
                && layer
                    .norm
                    .as_ref()
                    .is_none_or(|(g, b)| g.dim() == (1, out) && b.dim() == (1, out));
            if !ok {
                return Err(shape(format!("layer {l} shapes do not chain from width {d}")));
            }
            d = out;
        }
        if !eps.is_finite() {
            return Err(shape("non-finite eps".into()));
        }
        Ok(FrozenGnnTokenizer {
            atoms,
            embed,
            layers,
            eps,
        })
    }

    pub fn atoms(&self) -> &AtomVocab {
        &self.atoms
    }

    pub fn dim(&self) -> usize {
        self.layers.last().map_or(self.embed.ncols(), |l| l.w2.ncols())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Final-layer node states, one row per node.
    pub fn hidden(&self, g: &MolGraph) -> Array2<f64> {
        let ids = self.atoms.ids(g);
        let mut h = self.embed.select(Axis(0), &ids);
        let a = adjacency(g).a;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let x = &h * (1.0 + self.eps) + a.dot(&h);
            let mid = (x.dot(&layer.w1) + &layer.b1).mapv(|v| v.max(0.0));
            let mut y = mid.dot(&layer.w2) + &layer.b2;
            if let Some((gamma, beta)) = &layer.norm {
                y = standardize_cols(&y, NORM_EPS).0 * gamma + beta;
            }
            if l < last {
                y.mapv_inplace(|v| v.max(0.0));
            }
            h = y;
        }
        h
    }
}

pub fn frozen_gnn_tokenize(g: &MolGraph, t: &FrozenGnnTokenizer) -> Vec<Token> {
    let id = g.id();
    t.hidden(g)
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| Token {
            value: TokenValue::Continuous(row.to_vec()),
            fragment: Fragment::with_parent(id, vec![i], vec![], FragmentKind::SingletonNode),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{induced_subgraph, parse_smiles};
    use ndarray::array;

    fn ids(tokens: &[Token]) -> Vec<usize> {
        tokens.iter().map(|t| t.id().unwrap()).collect()
    }

    #[test]
    fn node_and_edge_tokens() {
        let vocab = AtomVocab::new(vec![8, 6, 7]);
        assert_eq!(ids(&tok_node(&parse_smiles("CO").unwrap(), &vocab)), vec![0, 2]);
        assert_eq!(ids(&tok_node(&parse_smiles("C").unwrap(), &vocab)), vec![0]);
        assert_eq!(ids(&tok_node(&parse_smiles("CS").unwrap(), &vocab)), vec![0, 3]);
        assert_eq!(ids(&tok_edge(&parse_smiles("CO").unwrap())), vec![0]);
        assert_eq!(ids(&tok_edge(&parse_smiles("C=O").unwrap())), vec![1]);
        assert_eq!(ids(&tok_edge(&parse_smiles("c1ccccc1").unwrap())), vec![3; 6]);
    }

    fn whole(g: &MolGraph) -> Fragment {
        induced_subgraph(g, &(0..g.num_nodes()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn keys() {
        let g = parse_smiles("O").unwrap();
        assert_eq!(canonical_key(&whole(&g), &g).unwrap(), "O|");
        let a = parse_smiles("C1CC1").unwrap();
        assert_eq!(canonical_key(&whole(&a), &a).unwrap(), "C.C.C|111");
        let x = parse_smiles("OCC=O").unwrap();
        let y = parse_smiles("O=CCO").unwrap();
        assert_eq!(
            canonical_key(&whole(&x), &x).unwrap(),
            canonical_key(&whole(&y), &y).unwrap()
        );
        let big = parse_smiles("CCCCCCCCCCCCC").unwrap();
        let err = canonical_key(&whole(&big), &big).unwrap_err().to_string();
        assert!(err.contains("threshold"), "{err}");
    }

    #[test]
    fn search_regimes_agree() {
        // Both search strategies compute the same minimum; compare them on
        // fragments small enough for brute force.
        for s in ["c1ccccc1", "CC(C)(C)C", "OC1CC(N)C1", "C1CC2CCC12", "NC(=O)c1ccccc1"] {
            let g = parse_smiles(s).unwrap();
            if g.num_nodes() > 9 {
                continue;
            }
            let kg = KeyGraph::new(&whole(&g), &g);
            assert_eq!(
                kg.render(&brute_force_order(&kg)),
                kg.render(&branch_and_bound_order(&kg)),
                "{s}"
            );
        }
    }

    #[test]
    fn vocab_threshold_and_tokens() {
        let ctx = FragmentContext::default();
        let benzene = parse_smiles("c1ccccc1").unwrap();
        let tri = parse_smiles("C1CC1").unwrap();
        let corpus = vec![benzene.clone(), benzene.clone(), benzene.clone(), tri.clone()];
        let v = build_motif_vocab(&corpus, &Recipe::Cycles, &ctx, 2).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.unk(), 1);
        assert_eq!(v.counts(), &[3]);
        assert_eq!(ids(&tok_motif(&benzene, &Recipe::Cycles, &ctx, &v).unwrap()), vec![0]);
        assert_eq!(ids(&tok_motif(&tri, &Recipe::Cycles, &ctx, &v).unwrap()), vec![1]);
        let v1 = build_motif_vocab(&corpus, &Recipe::Cycles, &ctx, 1).unwrap();
        assert_eq!(v1.len(), 2);
        assert!(tok_motif(&tri, &Recipe::Brics, &ctx, &v1).is_err());
        assert!(build_motif_vocab(&[], &Recipe::Cycles, &ctx, 1).is_err());

        let round = MotifVocabulary::parse(&v1.to_text()).unwrap();
        assert_eq!(round, v1);

        let recipe: Recipe = "cycles > remaining_nodes".parse().unwrap();
        let toluene = parse_smiles("Cc1ccccc1").unwrap();
        let vt = build_motif_vocab(std::slice::from_ref(&toluene), &recipe, &ctx, 1).unwrap();
        assert_eq!(tok_motif(&toluene, &recipe, &ctx, &vt).unwrap().len(), 2);
    }

    #[test]
    fn frozen_one_layer_on_methanol() {
        let atoms = AtomVocab::new(vec![6, 8]);
        let embed = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let layer = FrozenLayer {
            w1: array![[1.0], [2.0]],
            b1: array![[0.5]],
            w2: array![[1.0, -1.0]],
            b2: array![[0.0, 1.0]],
            norm: None,
        };
        let t = FrozenGnnTokenizer::new(atoms, embed, vec![layer], 0.0).unwrap();
        let toks = frozen_gnn_tokenize(&parse_smiles("CO").unwrap(), &t);
        // x = h + A h = [[1,1],[1,1]]; mid = relu(1 + 2 + 0.5) = 3.5
        for tok in &toks {
            assert_eq!(tok.value, TokenValue::Continuous(vec![3.5, -2.5]));
        }
    }

    #[test]
    fn frozen_zero_weights_and_shape_errors() {
        let atoms = AtomVocab::new(vec![6, 8]);
        let zero = FrozenLayer {
            w1: Array2::zeros((3, 4)),
            b1: Array2::zeros((1, 4)),
            w2: Array2::zeros((4, 2)),
            b2: Array2::zeros((1, 2)),
            norm: None,
        };
        let t = FrozenGnnTokenizer::new(atoms.clone(), Array2::ones((3, 3)), vec![zero.clone()], 0.0)
            .unwrap();
        for tok in frozen_gnn_tokenize(&parse_smiles("OCC=O").unwrap(), &t) {
            assert_eq!(tok.value, TokenValue::Continuous(vec![0.0, 0.0]));
        }
        assert!(FrozenGnnTokenizer::new(atoms.clone(), Array2::ones((3, 2)), vec![zero.clone()], 0.0).is_err());
        assert!(FrozenGnnTokenizer::new(atoms, Array2::ones((2, 3)), vec![zero], 0.0).is_err());
    }
}
