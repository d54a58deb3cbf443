//! Molecular graph data model.
//!
//! A [`MolGraph`] is an undirected, attributed heavy-atom graph: nodes carry
//! an atomic number plus chirality and aromaticity flags, edges carry a bond
//! type. This module also holds the SMILES-subset reader, the line-oriented
//! structured graph format, and the dense adjacency helpers used by the
//! tokenizers and networks.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::fragment::{Fragment, FragmentKind};

/// Hard cap on graph size; dense adjacency is used throughout.
pub const MAX_NODES: usize = 1024;

const ELEMENTS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// Element symbol for an atomic number (1-118).
pub fn element_symbol(z: u8) -> Option<&'static str> {
    ELEMENTS.get((z as usize).checked_sub(1)?).copied()
}

/// Atomic number for an element symbol, case-sensitive (`"Cl"`, not `"CL"`).
pub fn atomic_number(symbol: &str) -> Option<u8> {
    ELEMENTS
        .iter()
        .position(|s| *s == symbol)
        .map(|i| (i + 1) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Chirality {
    #[default]
    Unspecified,
    TetCw,
    TetCcw,
    Other,
}

impl Chirality {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Chirality::Unspecified,
            1 => Chirality::TetCw,
            2 => Chirality::TetCcw,
            3 => Chirality::Other,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondType {
    pub const ALL: [BondType; 4] = [
        BondType::Single,
        BondType::Double,
        BondType::Triple,
        BondType::Aromatic,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        BondType::ALL.get(code as usize).copied()
    }

    pub fn symbol(self) -> char {
        match self {
            BondType::Single => '-',
            BondType::Double => '=',
            BondType::Triple => '#',
            BondType::Aromatic => ':',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeAttr {
    pub atomic_number: u8,
    pub chirality: Chirality,
    pub is_aromatic: bool,
}

impl NodeAttr {
    pub fn new(atomic_number: u8, is_aromatic: bool) -> Self {
        NodeAttr {
            atomic_number,
            chirality: Chirality::Unspecified,
            is_aromatic,
        }
    }

    /// Element symbol, lowercase when aromatic (`c`, `n`, ...).
    pub fn symbol(&self) -> String {
        let s = element_symbol(self.atomic_number).unwrap_or("?");
        if self.is_aromatic {
            s.to_lowercase()
        } else {
            s.to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdgeAttr {
    pub bond_type: BondType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub attr: EdgeAttr,
}

impl Edge {
    pub fn other(&self, node: usize) -> usize {
        if self.i == node {
            self.j
        } else {
            self.i
        }
    }
}

/// Identity of a graph's content, used to check that fragments refer to the
/// graph they are combined with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GraphId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MolGraph {
    nodes: Vec<NodeAttr>,
    edges: Vec<Edge>,
}

impl MolGraph {
    pub fn new(nodes: Vec<NodeAttr>, edges: Vec<Edge>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        if nodes.len() > MAX_NODES {
            return Err(Error::Graph(format!(
                "graph has {} nodes, cap is {MAX_NODES}",
                nodes.len()
            )));
        }
        for (idx, n) in nodes.iter().enumerate() {
            if !(1..=118).contains(&n.atomic_number) {
                return Err(Error::Graph(format!(
                    "node {idx} has atomic number {} outside 1-118",
                    n.atomic_number
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for e in &edges {
            if e.i >= nodes.len() || e.j >= nodes.len() {
                return Err(Error::Graph(format!(
                    "edge ({}, {}) references a missing node",
                    e.i, e.j
                )));
            }
            if e.i == e.j {
                return Err(Error::Graph(format!("self-loop on node {}", e.i)));
            }
            if !seen.insert((e.i.min(e.j), e.i.max(e.j))) {
                return Err(Error::Graph(format!("duplicate edge ({}, {})", e.i, e.j)));
            }
        }
        Ok(MolGraph { nodes, edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[NodeAttr] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, idx: usize) -> &NodeAttr {
        &self.nodes[idx]
    }

    pub fn edge(&self, idx: usize) -> &Edge {
        &self.edges[idx]
    }

    pub fn atomic_numbers(&self) -> Vec<u8> {
        self.nodes.iter().map(|n| n.atomic_number).collect()
    }

    /// Per-node list of `(neighbor, edge index)`, ordered by edge index.
    pub fn neighbors(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (k, e) in self.edges.iter().enumerate() {
            out[e.i].push((e.j, k));
            out[e.j].push((e.i, k));
        }
        out
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for e in &self.edges {
            deg[e.i] += 1;
            deg[e.j] += 1;
        }
        deg
    }

    pub fn find_edge(&self, a: usize, b: usize) -> Option<usize> {
        self.edges
            .iter()
            .position(|e| (e.i == a && e.j == b) || (e.i == b && e.j == a))
    }

    /// Connected-component label per node; labels are dense and ordered by
    /// first node.
    pub fn components(&self) -> Vec<usize> {
        let adj = self.neighbors();
        let mut label = vec![usize::MAX; self.nodes.len()];
        let mut next = 0;
        for start in 0..self.nodes.len() {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = next;
            while let Some(u) = stack.pop() {
                for &(v, _) in &adj[u] {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn num_components(&self) -> usize {
        self.components().into_iter().max().map_or(0, |m| m + 1)
    }

    pub fn id(&self) -> GraphId {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        GraphId(h.finish())
    }
}

/// Dense adjacency `A`, its self-looped form `Ã = A + I`, and the diagonal of
/// the degree matrix `D̃` of `Ã`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyView {
    pub a: Array2<f64>,
    pub a_tilde: Array2<f64>,
    pub deg_tilde: Array1<f64>,
}

impl AdjacencyView {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_tilde(&self) -> Array2<f64> {
        Array2::from_diag(&self.deg_tilde)
    }
}

pub fn adjacency(g: &MolGraph) -> AdjacencyView {
    let n = g.num_nodes();
    let mut a = Array2::<f64>::zeros((n, n));
    for e in g.edges() {
        a[[e.i, e.j]] = 1.0;
        a[[e.j, e.i]] = 1.0;
    }
    let a_tilde = &a + &Array2::<f64>::eye(n);
    let deg_tilde = a_tilde.sum_axis(ndarray::Axis(1));
    AdjacencyView {
        a,
        a_tilde,
        deg_tilde,
    }
}

/// Fragment holding `nodes` and every edge of `g` with both endpoints inside.
pub fn induced_subgraph(g: &MolGraph, nodes: &[usize]) -> Result<Fragment> {
    if nodes.is_empty() {
        return Err(Error::Graph("induced subgraph of an empty node set".into()));
    }
    if let Some(&bad) = nodes.iter().find(|&&v| v >= g.num_nodes()) {
        return Err(Error::Graph(format!(
            "node {bad} out of range for a graph of {} nodes",
            g.num_nodes()
        )));
    }
    let set: BTreeSet<usize> = nodes.iter().copied().collect();
    let edges = g
        .edges()
        .iter()
        .enumerate()
        .filter(|(_, e)| set.contains(&e.i) && set.contains(&e.j))
        .map(|(k, _)| k)
        .collect();
    Ok(Fragment::new(
        g,
        set.into_iter().collect(),
        edges,
        FragmentKind::Induced,
    ))
}

/// Disjoint union of `graphs`; `offsets[k]` is the first node of graph `k`.
pub fn batch_graphs(graphs: &[MolGraph]) -> Result<(MolGraph, Vec<usize>)> {
    if graphs.is_empty() {
        return Err(Error::Graph("cannot batch an empty graph list".into()));
    }
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut offsets = Vec::with_capacity(graphs.len());
    for g in graphs {
        let base = nodes.len();
        offsets.push(base);
        nodes.extend_from_slice(g.nodes());
        edges.extend(g.edges().iter().map(|e| Edge {
            i: e.i + base,
            j: e.j + base,
            attr: e.attr,
        }));
    }
    Ok((MolGraph::new(nodes, edges)?, offsets))
}

// ---------------------------------------------------------------------------
// SMILES subset reader

fn smiles_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Smiles {
        offset,
        message: message.into(),
    }
}

struct OpenRing {
    atom: usize,
    bond: Option<BondType>,
    offset: usize,
}

/// Parses the supported SMILES subset into a heavy-atom graph.
///
/// Supported: organic-subset atoms, aromatic lowercase atoms, bracket atoms
/// holding a bare element symbol, bonds `- = # :`, branches, ring closures
/// `1`-`9` and `%nn`, and `.` component separators. Charges, isotopes,
/// hydrogen counts, chirality marks and `/ \` bonds are rejected.
pub fn parse_smiles(text: &str) -> Result<MolGraph> {
    let bytes = text.as_bytes();
    let mut nodes: Vec<NodeAttr> = Vec::new();
    let mut edges: Vec<Edge> = Vec::new();
    let mut prev: Option<usize> = None;
    let mut pending: Option<(BondType, usize)> = None;
    let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
    let mut rings: HashMap<u32, OpenRing> = HashMap::new();
    let mut pos = 0;

    let add_edge = |edges: &mut Vec<Edge>, a: usize, b: usize, bond: BondType, at: usize| {
        if a == b {
            return Err(smiles_err(at, "ring closure bonds an atom to itself"));
        }
        if edges
            .iter()
            .any(|e| (e.i == a && e.j == b) || (e.i == b && e.j == a))
        {
            return Err(smiles_err(at, format!("duplicate bond between atoms {a} and {b}")));
        }
        edges.push(Edge {
            i: a,
            j: b,
            attr: EdgeAttr { bond_type: bond },
        });
        Ok(())
    };

    while pos < bytes.len() {
        let c = bytes[pos];
        let start = pos;
        match c {
            b'-' | b'=' | b'#' | b':' => {
                if pending.is_some() {
                    return Err(smiles_err(pos, "two consecutive bond symbols"));
                }
                if prev.is_none() {
                    return Err(smiles_err(pos, "dangling bond symbol"));
                }
                let bond = match c {
                    b'-' => BondType::Single,
                    b'=' => BondType::Double,
                    b'#' => BondType::Triple,
                    _ => BondType::Aromatic,
                };
                pending = Some((bond, pos));
                pos += 1;
            }
            b'/' | b'\\' => {
                return Err(smiles_err(pos, "directional bonds are not supported"));
            }
            b'(' => {
                if let Some((_, at)) = pending {
                    return Err(smiles_err(at, "dangling bond symbol"));
                }
                if prev.is_none() {
                    return Err(smiles_err(pos, "branch opened before any atom"));
                }
                branches.push((prev, pos));
                pos += 1;
            }
            b')' => {
                if let Some((_, at)) = pending {
                    return Err(smiles_err(at, "dangling bond symbol"));
                }
                match branches.pop() {
                    Some((p, _)) => prev = p,
                    None => return Err(smiles_err(pos, "unbalanced parenthesis")),
                }
                pos += 1;
            }
            b'.' => {
                if let Some((_, at)) = pending {
                    return Err(smiles_err(at, "dangling bond symbol"));
                }
                if prev.is_none() {
                    return Err(smiles_err(pos, "'.' before any atom"));
                }
                prev = None;
                pos += 1;
            }
            b'0'..=b'9' | b'%' => {
                let (num, len) = if c == b'%' {
                    let digits = bytes.get(pos + 1..pos + 3).filter(|d| {
                        d.len() == 2 && d.iter().all(u8::is_ascii_digit)
                    });
                    match digits {
                        Some(d) => (((d[0] - b'0') * 10 + (d[1] - b'0')) as u32, 3),
                        None => return Err(smiles_err(pos, "'%' must be followed by two digits")),
                    }
                } else {
                    if c == b'0' {
                        return Err(smiles_err(pos, "ring closure digit 0 is not supported"));
                    }
                    ((c - b'0') as u32, 1)
                };
                let atom = prev.ok_or_else(|| smiles_err(pos, "ring closure before any atom"))?;
                let bond = pending.take().map(|(b, _)| b);
                match rings.remove(&num) {
                    Some(open) => {
                        let bond = match (open.bond, bond) {
                            (Some(a), Some(b)) if a != b => {
                                return Err(smiles_err(pos, "conflicting ring closure bonds"))
                            }
                            (Some(a), _) | (None, Some(a)) => a,
                            (None, None) => default_bond(&nodes[open.atom], &nodes[atom]),
                        };
                        add_edge(&mut edges, open.atom, atom, bond, pos)?;
                    }
                    None => {
                        rings.insert(
                            num,
                            OpenRing {
                                atom,
                                bond,
                                offset: pos,
                            },
                        );
                    }
                }
                pos += len;
            }
            _ => {
                let (attr, len) = read_atom(bytes, pos)?;
                if nodes.len() >= MAX_NODES {
                    return Err(smiles_err(pos, format!("more than {MAX_NODES} atoms")));
                }
                let idx = nodes.len();
                nodes.push(attr);
                if let Some(p) = prev {
                    let bond = match pending.take() {
                        Some((b, _)) => b,
                        None => default_bond(&nodes[p], &nodes[idx]),
                    };
                    add_edge(&mut edges, p, idx, bond, start)?;
                }
                prev = Some(idx);
                pos += len;
            }
        }
    }

    if let Some((_, at)) = pending {
        return Err(smiles_err(at, "dangling bond symbol"));
    }
    if let Some((_, at)) = branches.first() {
        return Err(smiles_err(*at, "unbalanced parenthesis"));
    }
    if let Some(open) = rings.values().min_by_key(|r| r.offset) {
        return Err(smiles_err(open.offset, "unclosed ring digit"));
    }
    if nodes.is_empty() {
        return Err(smiles_err(0, "no atoms"));
    }
    MolGraph::new(nodes, edges)
}

fn default_bond(a: &NodeAttr, b: &NodeAttr) -> BondType {
    if a.is_aromatic && b.is_aromatic {
        BondType::Aromatic
    } else {
        BondType::Single
    }
}

fn read_atom(bytes: &[u8], pos: usize) -> Result<(NodeAttr, usize)> {
    let c = bytes[pos];
    if c == b'[' {
        let close = bytes[pos..]
            .iter()
            .position(|&b| b == b']')
            .ok_or_else(|| smiles_err(pos, "unterminated bracket atom"))?;
        let inner = std::str::from_utf8(&bytes[pos + 1..pos + close])
            .map_err(|_| smiles_err(pos, "non-ASCII bracket atom"))?;
        if inner.is_empty() {
            return Err(smiles_err(pos, "empty bracket atom"));
        }
        let attr = if let Some(z) = atomic_number(inner) {
            NodeAttr::new(z, false)
        } else if matches!(inner, "b" | "c" | "n" | "o" | "p" | "s" | "se" | "as") {
            let mut upper = inner.to_string();
            upper[..1].make_ascii_uppercase();
            NodeAttr::new(atomic_number(&upper).unwrap(), true)
        } else {
            return Err(smiles_err(
                pos,
                format!("unsupported bracket atom [{inner}]: only a bare element symbol is allowed"),
            ));
        };
        return Ok((attr, close + 1));
    }
    let two = bytes.get(pos..pos + 2);
    if two == Some(b"Cl") {
        return Ok((NodeAttr::new(17, false), 2));
    }
    if two == Some(b"Br") {
        return Ok((NodeAttr::new(35, false), 2));
    }
    let attr = match c {
        b'B' => NodeAttr::new(5, false),
        b'C' => NodeAttr::new(6, false),
        b'N' => NodeAttr::new(7, false),
        b'O' => NodeAttr::new(8, false),
        b'P' => NodeAttr::new(15, false),
        b'S' => NodeAttr::new(16, false),
        b'F' => NodeAttr::new(9, false),
        b'I' => NodeAttr::new(53, false),
        b'b' => NodeAttr::new(5, true),
        b'c' => NodeAttr::new(6, true),
        b'n' => NodeAttr::new(7, true),
        b'o' => NodeAttr::new(8, true),
        b'p' => NodeAttr::new(15, true),
        b's' => NodeAttr::new(16, true),
        _ => {
            let ch = std::str::from_utf8(&bytes[pos..])
                .ok()
                .and_then(|s| s.chars().next())
                .unwrap_or('?');
            return Err(smiles_err(pos, format!("unknown atom symbol '{ch}'")));
        }
    };
    Ok((attr, 1))
}

// ---------------------------------------------------------------------------
// Corpus files

/// Serializes graphs in the structured line format.
pub fn format_graphs(graphs: &[MolGraph]) -> String {
    let mut out = String::new();
    for g in graphs {
        let _ = writeln!(out, "graph {} {}", g.num_nodes(), g.num_edges());
        for (i, n) in g.nodes().iter().enumerate() {
            let _ = writeln!(
                out,
                "node {i} {} {} {}",
                n.atomic_number,
                n.chirality.code(),
                u8::from(n.is_aromatic)
            );
        }
        for e in g.edges() {
            let _ = writeln!(out, "edge {} {} {}", e.i, e.j, e.attr.bond_type.code());
        }
    }
    out
}

/// Reads either a SMILES-lines corpus or the structured graph format; the
/// first significant line decides which.
pub fn parse_graph_text(text: &str) -> Result<Vec<MolGraph>> {
    let significant = |l: &str| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('#')
    };
    let structured = text
        .lines()
        .find(|l| significant(l))
        .is_some_and(|l| l.trim_start().starts_with("graph "));
    if structured {
        parse_structured(text)
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| significant(l))
            .map(|(k, l)| {
                parse_smiles(l.trim()).map_err(|e| Error::Line {
                    line: k + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

fn parse_structured(text: &str) -> Result<Vec<MolGraph>> {
    struct Pending {
        line: usize,
        n_nodes: usize,
        n_edges: usize,
        nodes: Vec<NodeAttr>,
        edges: Vec<Edge>,
    }
    fn finish(p: Pending) -> Result<MolGraph> {
        if p.nodes.len() != p.n_nodes || p.edges.len() != p.n_edges {
            return Err(Error::Line {
                line: p.line,
                message: format!(
                    "graph header declares {} nodes / {} edges, found {} / {}",
                    p.n_nodes,
                    p.n_edges,
                    p.nodes.len(),
                    p.edges.len()
                ),
            });
        }
        MolGraph::new(p.nodes, p.edges).map_err(|e| Error::Line {
            line: p.line,
            message: e.to_string(),
        })
    }

    let mut graphs = Vec::new();
    let mut cur: Option<Pending> = None;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Line {
            line,
            message: format!("{msg}: '{t}'"),
        };
        let fields: Vec<&str> = t.split_whitespace().collect();
        let nums: Vec<usize> = fields[1..]
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-numeric field"))?;
        match (fields[0], nums.as_slice()) {
            ("graph", &[n, m]) => {
                if let Some(p) = cur.take() {
                    graphs.push(finish(p)?);
                }
                cur = Some(Pending {
                    line,
                    n_nodes: n,
                    n_edges: m,
                    nodes: Vec::with_capacity(n),
                    edges: Vec::with_capacity(m),
                });
            }
            ("node", &[idx, z, chir, arom]) => {
                let p = cur.as_mut().ok_or_else(|| bad("node before graph header"))?;
                if idx != p.nodes.len() || !p.edges.is_empty() {
                    return Err(bad("node lines must be numbered 0.. and precede edges"));
                }
                let z = u8::try_from(z)
                    .ok()
                    .filter(|z| (1..=118).contains(z))
                    .ok_or_else(|| bad("atomic number outside 1-118"))?;
                let chirality = u8::try_from(chir)
                    .ok()
                    .and_then(Chirality::from_code)
                    .ok_or_else(|| bad("chirality code must be 0-3"))?;
                if arom > 1 {
                    return Err(bad("aromatic flag must be 0 or 1"));
                }
                p.nodes.push(NodeAttr {
                    atomic_number: z,
                    chirality,
                    is_aromatic: arom == 1,
                });
            }
            ("edge", &[i, j, bond]) => {
                let p = cur.as_mut().ok_or_else(|| bad("edge before graph header"))?;
                let bond_type = u8::try_from(bond)
                    .ok()
                    .and_then(BondType::from_code)
                    .ok_or_else(|| bad("bond code must be 0-3"))?;
                p.edges.push(Edge {
                    i,
                    j,
                    attr: EdgeAttr { bond_type },
                });
            }
            _ => return Err(bad("malformed line")),
        }
    }
    if let Some(p) = cur.take() {
        graphs.push(finish(p)?);
    }
    Ok(graphs)
}

pub fn load_graph_file(path: impl AsRef<Path>) -> Result<Vec<MolGraph>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph_text(&text)
}

pub fn write_graph_file(graphs: &[MolGraph], path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), format_graphs(graphs).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triples(g: &MolGraph) -> Vec<(usize, usize, BondType)> {
        g.edges()
            .iter()
            .map(|e| (e.i, e.j, e.attr.bond_type))
            .collect()
    }

    #[test]
    fn methanol() {
        let g = parse_smiles("CO").unwrap();
        assert_eq!(g.atomic_numbers(), vec![6, 8]);
        assert_eq!(triples(&g), vec![(0, 1, BondType::Single)]);
    }

    #[test]
    fn cyclopropane_triangle() {
        let g = parse_smiles("C1CC1").unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_edges(), 3);
        assert!(g.degrees().iter().all(|&d| d == 2));
    }

    #[test]
    fn acetaminophen_counts() {
        let g = parse_smiles("CC(=O)Nc1cccc(O)c1").unwrap();
        assert_eq!(g.num_nodes(), 11);
        assert_eq!(g.num_edges(), 11);
        assert_eq!(g.num_edges() + g.num_components() - g.num_nodes(), 1);
        let aromatic = g
            .edges()
            .iter()
            .filter(|e| e.attr.bond_type == BondType::Aromatic)
            .count();
        assert_eq!(aromatic, 6);
        assert_eq!(g.edge(1).attr.bond_type, BondType::Double);
    }

    #[test]
    fn error_offsets() {
        let off = |s: &str| match parse_smiles(s) {
            Err(Error::Smiles { offset, .. }) => offset,
            other => panic!("expected SMILES error for {s:?}, got {other:?}"),
        };
        assert_eq!(off("C1CC"), 1);
        assert_eq!(off("CC(C"), 2);
        assert_eq!(off("CC)C"), 2);
        assert_eq!(off("CXC"), 1);
        assert_eq!(off("CC="), 2);
        assert_eq!(off("C=(C)"), 1);
        assert_eq!(off("C[NH4]"), 1);
        assert_eq!(off("C/C=C/C"), 1);
        assert_eq!(off(""), 0);
    }

    #[test]
    fn percent_ring_and_explicit_ring_bond() {
        let g = parse_smiles("C%12CC%12").unwrap();
        assert_eq!(g.num_edges(), 3);
        let g = parse_smiles("C=1CCCCC1").unwrap();
        assert_eq!(g.find_edge(0, 5).map(|k| g.edge(k).attr.bond_type), Some(BondType::Double));
        assert!(parse_smiles("C=1CC-1").is_err());
        assert!(parse_smiles("C11").is_err());
    }

    #[test]
    fn bracket_atoms() {
        let g = parse_smiles("[Na][Cl]").unwrap();
        assert_eq!(g.atomic_numbers(), vec![11, 17]);
        let g = parse_smiles("c1cc[se]c1").unwrap();
        assert!(g.node(3).is_aromatic);
        assert_eq!(g.node(3).atomic_number, 34);
    }

    #[test]
    fn dot_separates_components() {
        let g = parse_smiles("CC.O").unwrap();
        assert_eq!(g.num_components(), 2);
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn adjacency_examples() {
        let v = adjacency(&parse_smiles("CO").unwrap());
        assert_eq!(v.a, ndarray::array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(v.a_tilde, ndarray::array![[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(v.d_tilde(), ndarray::array![[2.0, 0.0], [0.0, 2.0]]);

        let v = adjacency(&parse_smiles("C").unwrap());
        assert_eq!(v.a, ndarray::array![[0.0]]);
        assert_eq!(v.d_tilde(), ndarray::array![[1.0]]);

        let v = adjacency(&parse_smiles("C1CC1").unwrap());
        assert!(v.a.sum_axis(ndarray::Axis(1)).iter().all(|&s| s == 2.0));
    }

    #[test]
    fn induced_examples() {
        let tri = parse_smiles("C1CC1").unwrap();
        let f = induced_subgraph(&tri, &[0, 1]).unwrap();
        assert_eq!((f.nodes().len(), f.edges().len()), (2, 1));
        let f = induced_subgraph(&tri, &[0, 1, 2]).unwrap();
        assert_eq!(f.to_graph(&tri).unwrap(), tri);
        let path = parse_smiles("CCC").unwrap();
        let f = induced_subgraph(&path, &[0, 2]).unwrap();
        assert_eq!((f.nodes().len(), f.edges().len()), (2, 0));
        assert!(induced_subgraph(&path, &[]).is_err());
        assert!(induced_subgraph(&path, &[3]).is_err());
    }

    #[test]
    fn batching() {
        let co = parse_smiles("CO").unwrap();
        let (b, off) = batch_graphs(&[co.clone(), co.clone()]).unwrap();
        assert_eq!(b.num_nodes(), 4);
        assert_eq!(
            b.edges().iter().map(|e| (e.i, e.j)).collect::<Vec<_>>(),
            vec![(0, 1), (2, 3)]
        );
        assert_eq!(off, vec![0, 2]);
        let (b, off) = batch_graphs(std::slice::from_ref(&co)).unwrap();
        assert_eq!((b, off), (co, vec![0]));
        let gs: Vec<_> = ["CCC", "CO", "CCCCC"]
            .iter()
            .map(|s| parse_smiles(s).unwrap())
            .collect();
        assert_eq!(batch_graphs(&gs).unwrap().1, vec![0, 3, 5]);
        assert!(batch_graphs(&[]).is_err());
    }

    #[test]
    fn corpus_text_formats() {
        let gs = parse_graph_text("# comment\nCO\n\nC1CC1\n").unwrap();
        assert_eq!(gs.iter().map(MolGraph::num_nodes).collect::<Vec<_>>(), vec![2, 3]);
        let text = format_graphs(&gs);
        let again = parse_graph_text(&text).unwrap();
        assert_eq!(again, gs);
        assert_eq!(format_graphs(&again), text);
        assert!(parse_graph_text("").unwrap().is_empty());
        match parse_graph_text("CO\nCC\nXxQ\n") {
            Err(Error::Line { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected line error, got {other:?}"),
        }
        match parse_graph_text("graph 2 1\nnode 0 6 0 0\nnode 1 8 0 0\nedge 0 1 9\n") {
            Err(Error::Line { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected line error, got {other:?}"),
        }
    }
}
