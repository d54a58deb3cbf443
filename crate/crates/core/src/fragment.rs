//! Fragmentation functions: functional-group matching, ring perception,
//! cycle merging, environment-based bond cleavage, leftover nodes and edges,
//! and the recipes that combine them.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::molgraph::{atomic_number, BondType, GraphId, MolGraph, NodeAttr};

/// Patterns above this size are refused by the matcher.
pub const MAX_PATTERN_ATOMS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FragmentKind {
    Fg,
    Cycle,
    MergedCycle,
    BricsPiece,
    SingletonNode,
    SingleEdge,
    Refined,
    Induced,
}

impl FragmentKind {
    pub fn name(self) -> &'static str {
        match self {
            FragmentKind::Fg => "fg",
            FragmentKind::Cycle => "cycle",
            FragmentKind::MergedCycle => "merged_cycle",
            FragmentKind::BricsPiece => "brics_piece",
            FragmentKind::SingletonNode => "singleton_node",
            FragmentKind::SingleEdge => "single_edge",
            FragmentKind::Refined => "refined",
            FragmentKind::Induced => "induced",
        }
    }
}

/// A subgraph of a parent graph: sorted node indices plus sorted indices of
/// the parent's edges that belong to it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fragment {
    nodes: Vec<usize>,
    edges: Vec<usize>,
    kind: FragmentKind,
    parent: GraphId,
}

impl Fragment {
    pub fn new(g: &MolGraph, nodes: Vec<usize>, edges: Vec<usize>, kind: FragmentKind) -> Self {
        Self::with_parent(g.id(), nodes, edges, kind)
    }

    pub(crate) fn with_parent(
        parent: GraphId,
        mut nodes: Vec<usize>,
        mut edges: Vec<usize>,
        kind: FragmentKind,
    ) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        edges.sort_unstable();
        edges.dedup();
        debug_assert!(!nodes.is_empty());
        Fragment {
            nodes,
            edges,
            kind,
            parent,
        }
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    pub fn kind(&self) -> FragmentKind {
        self.kind
    }

    pub fn parent(&self) -> GraphId {
        self.parent
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.nodes.binary_search(&node).is_ok()
    }

    fn order_key(&self) -> (usize, usize, &[usize], &[usize]) {
        (self.nodes[0], self.nodes.len(), &self.nodes, &self.edges)
    }

    /// Materializes the fragment as a standalone graph; node `k` of the result
    /// is `self.nodes()[k]` of the parent.
    pub fn to_graph(&self, g: &MolGraph) -> Result<MolGraph> {
        check_parent(g, std::slice::from_ref(self))?;
        let local: HashMap<usize, usize> =
            self.nodes.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        let nodes = self.nodes.iter().map(|&v| *g.node(v)).collect();
        let edges = self
            .edges
            .iter()
            .map(|&k| {
                let e = g.edge(k);
                crate::molgraph::Edge {
                    i: local[&e.i],
                    j: local[&e.j],
                    attr: e.attr,
                }
            })
            .collect();
        MolGraph::new(nodes, edges)
    }
}

/// Sorts by (min node id, size) and drops exact duplicates.
pub fn normalize(mut frags: Vec<Fragment>) -> Vec<Fragment> {
    frags.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    frags.dedup_by(|b, a| a.nodes == b.nodes && a.edges == b.edges);
    frags
}

fn check_parent(g: &MolGraph, frags: &[Fragment]) -> Result<()> {
    let id = g.id();
    for f in frags {
        if f.parent != id {
            return Err(Error::Graph(
                "fragment does not belong to the given graph".into(),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Patterns

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomQuery {
    /// `None` matches any element.
    pub elements: Option<Vec<u8>>,
    /// `None` matches both aromatic and aliphatic atoms.
    pub aromatic: Option<bool>,
}

impl AtomQuery {
    pub fn any() -> Self {
        AtomQuery {
            elements: None,
            aromatic: None,
        }
    }

    pub fn matches(&self, atom: &NodeAttr) -> bool {
        self.aromatic.is_none_or(|a| a == atom.is_aromatic)
            && self
                .elements
                .as_ref()
                .is_none_or(|zs| zs.contains(&atom.atomic_number))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondQuery {
    Is(BondType),
    /// Unwritten bond: single or aromatic.
    SingleOrAromatic,
    Any,
}

impl BondQuery {
    pub fn matches(self, bond: BondType) -> bool {
        match self {
            BondQuery::Is(b) => b == bond,
            BondQuery::SingleOrAromatic => {
                matches!(bond, BondType::Single | BondType::Aromatic)
            }
            BondQuery::Any => true,
        }
    }
}

/// A small connected query graph in a simplified SMARTS-like notation.
///
/// Atoms: `C` (aliphatic), `c` (aromatic), `[Cl]`, `[#6]` (either
/// aromaticity), `[F,Cl,Br]` (element list), `*` (anything), `A` / `a` (any
/// aliphatic / aromatic atom). Bonds: `-`, `=`, `#`, `:`, `~` (any); an
/// unwritten bond means single or aromatic. Branches and ring digits work as
/// in SMILES.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub name: String,
    pub atoms: Vec<AtomQuery>,
    pub bonds: Vec<(usize, usize, BondQuery)>,
    source: String,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} := {}", self.name, self.source)
    }
}

fn pat_err(text: &str, pos: usize, msg: &str) -> Error {
    Error::Pattern(format!("'{text}' at byte {pos}: {msg}"))
}

impl Pattern {
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let text = text.trim();
        let b = text.as_bytes();
        let mut atoms: Vec<AtomQuery> = Vec::new();
        let mut bonds: Vec<(usize, usize, BondQuery)> = Vec::new();
        let mut prev: Option<usize> = None;
        let mut pending: Option<BondQuery> = None;
        let mut stack: Vec<Option<usize>> = Vec::new();
        let mut rings: HashMap<u8, (usize, Option<BondQuery>)> = HashMap::new();
        let mut pos = 0;
        while pos < b.len() {
            let c = b[pos];
            match c {
                b'-' | b'=' | b'#' | b':' | b'~' => {
                    if prev.is_none() || pending.is_some() {
                        return Err(pat_err(text, pos, "misplaced bond symbol"));
                    }
                    pending = Some(match c {
                        b'-' => BondQuery::Is(BondType::Single),
                        b'=' => BondQuery::Is(BondType::Double),
                        b'#' => BondQuery::Is(BondType::Triple),
                        b':' => BondQuery::Is(BondType::Aromatic),
                        _ => BondQuery::Any,
                    });
                    pos += 1;
                }
                b'(' => {
                    if prev.is_none() || pending.is_some() {
                        return Err(pat_err(text, pos, "misplaced branch"));
                    }
                    stack.push(prev);
                    pos += 1;
                }
                b')' => {
                    if pending.is_some() {
                        return Err(pat_err(text, pos, "dangling bond symbol"));
                    }
                    prev = stack
                        .pop()
                        .ok_or_else(|| pat_err(text, pos, "unbalanced parenthesis"))?;
                    pos += 1;
                }
                b'1'..=b'9' => {
                    let atom = prev.ok_or_else(|| pat_err(text, pos, "ring digit before atom"))?;
                    let bond = pending.take();
                    if let Some((other, obond)) = rings.remove(&c) {
                        let q = bond.or(obond).unwrap_or(BondQuery::SingleOrAromatic);
                        if other == atom {
                            return Err(pat_err(text, pos, "ring closure onto itself"));
                        }
                        bonds.push((other, atom, q));
                    } else {
                        rings.insert(c, (atom, bond));
                    }
                    pos += 1;
                }
                _ => {
                    let (q, len) = read_atom_query(text, pos)?;
                    let idx = atoms.len();
                    atoms.push(q);
                    if let Some(p) = prev {
                        bonds.push((p, idx, pending.take().unwrap_or(BondQuery::SingleOrAromatic)));
                    }
                    prev = Some(idx);
                    pos += len;
                }
            }
        }
        if pending.is_some() {
            return Err(pat_err(text, b.len(), "dangling bond symbol"));
        }
        if !stack.is_empty() {
            return Err(pat_err(text, b.len(), "unbalanced parenthesis"));
        }
        if !rings.is_empty() {
            return Err(pat_err(text, b.len(), "unclosed ring digit"));
        }
        if atoms.is_empty() {
            return Err(Error::Pattern(format!("pattern '{name}' is empty")));
        }
        let pattern = Pattern {
            name: name.to_string(),
            atoms,
            bonds,
            source: text.to_string(),
        };
        pattern.validate()?;
        Ok(pattern)
    }

    /// Builds a pattern from explicit parts (used by tests and generators).
    pub fn from_parts(
        name: &str,
        atoms: Vec<AtomQuery>,
        bonds: Vec<(usize, usize, BondQuery)>,
    ) -> Result<Self> {
        let p = Pattern {
            name: name.to_string(),
            atoms,
            bonds,
            source: "<constructed>".to_string(),
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let n = self.atoms.len();
        if n == 0 {
            return Err(Error::Pattern(format!("pattern '{}' is empty", self.name)));
        }
        let mut adj = vec![Vec::new(); n];
        for &(a, b, _) in &self.bonds {
            if a >= n || b >= n || a == b {
                return Err(Error::Pattern(format!(
                    "pattern '{}' has an invalid bond ({a}, {b})",
                    self.name
                )));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if seen.contains(&false) {
            return Err(Error::Pattern(format!(
                "pattern '{}' is not connected",
                self.name
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

fn read_atom_query(text: &str, pos: usize) -> Result<(AtomQuery, usize)> {
    let b = text.as_bytes();
    let c = b[pos];
    if c == b'[' {
        let close = text[pos..]
            .find(']')
            .ok_or_else(|| pat_err(text, pos, "unterminated bracket"))?;
        let inner = &text[pos + 1..pos + close];
        let mut zs = Vec::new();
        let mut arom: Option<Option<bool>> = None;
        for item in inner.split(',') {
            let (z, a) = if let Some(num) = item.strip_prefix('#') {
                let z: u8 = num
                    .parse()
                    .ok()
                    .filter(|z| (1..=118).contains(z))
                    .ok_or_else(|| pat_err(text, pos, "bad atomic number"))?;
                (z, None)
            } else if let Some(z) = atomic_number(item) {
                (z, Some(false))
            } else {
                let mut up = item.to_string();
                if let Some(first) = up.get_mut(0..1) {
                    first.make_ascii_uppercase();
                }
                match atomic_number(&up) {
                    Some(z) if item.chars().next().is_some_and(|ch| ch.is_ascii_lowercase()) => {
                        (z, Some(true))
                    }
                    _ => return Err(pat_err(text, pos, "unknown element in bracket")),
                }
            };
            match arom {
                None => arom = Some(a),
                Some(prev) if prev != a => {
                    return Err(pat_err(text, pos, "mixed aromaticity in bracket list"))
                }
                _ => {}
            }
            zs.push(z);
        }
        return Ok((
            AtomQuery {
                elements: Some(zs),
                aromatic: arom.flatten(),
            },
            close + 1,
        ));
    }
    let q = |z: u8, a: bool| AtomQuery {
        elements: Some(vec![z]),
        aromatic: Some(a),
    };
    if b.get(pos..pos + 2) == Some(b"Cl") {
        return Ok((q(17, false), 2));
    }
    if b.get(pos..pos + 2) == Some(b"Br") {
        return Ok((q(35, false), 2));
    }
    let out = match c {
        b'*' => AtomQuery::any(),
        b'A' => AtomQuery {
            elements: None,
            aromatic: Some(false),
        },
        b'a' => AtomQuery {
            elements: None,
            aromatic: Some(true),
        },
        b'B' => q(5, false),
        b'C' => q(6, false),
        b'N' => q(7, false),
        b'O' => q(8, false),
        b'P' => q(15, false),
        b'S' => q(16, false),
        b'F' => q(9, false),
        b'I' => q(53, false),
        b'b' => q(5, true),
        b'c' => q(6, true),
        b'n' => q(7, true),
        b'o' => q(8, true),
        b'p' => q(15, true),
        b's' => q(16, true),
        _ => return Err(pat_err(text, pos, "unknown atom symbol")),
    };
    Ok((out, 1))
}

/// Reads a pattern file: `name := pattern` per line, `#` comments.
pub fn parse_pattern_list(text: &str) -> Result<Vec<Pattern>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, body) = line.split_once(":=").ok_or_else(|| Error::Line {
            line: k + 1,
            message: "expected 'name := pattern'".into(),
        })?;
        let p = Pattern::parse(name.trim(), body).map_err(|e| Error::Line {
            line: k + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn load_patterns(path: impl AsRef<Path>) -> Result<Vec<Pattern>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pattern_list(&text)
}

pub const DEFAULT_PATTERNS: &str = "\
hydroxyl := O
amine := [#6]N
amide := C(=O)N
carboxyl := C(=O)O
ester := C(=O)O[#6]
ether := [#6]O[#6]
ketone := [#6]C(=O)[#6]
aldehyde := [#6]C=O
nitro := N(=O)O
thiol := [#6]S
halide := [#6][F,Cl,Br,I]
nitrile := C#N
";

/// The bundled 12-pattern functional-group library.
pub fn default_patterns() -> Vec<Pattern> {
    parse_pattern_list(DEFAULT_PATTERNS).expect("bundled patterns parse")
}

// ---------------------------------------------------------------------------
// Subgraph matching

struct Matcher<'a> {
    g: &'a MolGraph,
    p: &'a Pattern,
    adj: Vec<Vec<(usize, usize)>>,
    order: Vec<usize>,
    /// For each position in `order` after the first: (mapped pattern neighbor,
    /// bond query) that constrains the candidate set.
    parent: Vec<Option<(usize, BondQuery)>>,
    forbidden: Option<usize>,
}

impl<'a> Matcher<'a> {
    fn new(g: &'a MolGraph, p: &'a Pattern, forbidden: Option<usize>) -> Self {
        let n = p.atoms.len();
        let mut padj = vec![Vec::new(); n];
        for &(a, b, q) in &p.bonds {
            padj[a].push((b, q));
            padj[b].push((a, q));
        }
        let mut order = vec![0];
        let mut parent = vec![None];
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut queue = VecDeque::from([0]);
        while let Some(u) = queue.pop_front() {
            for &(v, q) in &padj[u] {
                if !seen[v] {
                    seen[v] = true;
                    order.push(v);
                    parent.push(Some((u, q)));
                    queue.push_back(v);
                }
            }
        }
        Matcher {
            g,
            p,
            adj: g.neighbors(),
            order,
            parent,
            forbidden,
        }
    }

    fn bond_ok(&self, a: usize, b: usize, q: BondQuery) -> Option<usize> {
        self.adj[a]
            .iter()
            .find(|(nb, _)| *nb == b)
            .filter(|(_, k)| q.matches(self.g.edge(*k).attr.bond_type))
            .map(|(_, k)| *k)
    }

    fn consistent(&self, map: &[Option<usize>], pat_atom: usize, node: usize) -> bool {
        if Some(node) == self.forbidden || !self.p.atoms[pat_atom].matches(self.g.node(node)) {
            return false;
        }
        if map.contains(&Some(node)) {
            return false;
        }
        self.p.bonds.iter().all(|&(a, b, q)| {
            let other = if a == pat_atom {
                b
            } else if b == pat_atom {
                a
            } else {
                return true;
            };
            match map[other] {
                Some(m) => self.bond_ok(node, m, q).is_some(),
                None => true,
            }
        })
    }

    /// Calls `visit` with each complete mapping (pattern atom -> node) in
    /// deterministic order. `anchor` pins pattern atom 0.
    fn run(&self, anchor: Option<usize>, visit: &mut dyn FnMut(&[usize]) -> bool) {
        let mut map = vec![None; self.p.atoms.len()];
        let first: Vec<usize> = match anchor {
            Some(a) => vec![a],
            None => (0..self.g.num_nodes()).collect(),
        };
        for start in first {
            if self.consistent(&map, 0, start) {
                map[0] = Some(start);
                if !self.extend(&mut map, 1, visit) {
                    return;
                }
                map[0] = None;
            }
        }
    }

    fn extend(
        &self,
        map: &mut Vec<Option<usize>>,
        depth: usize,
        visit: &mut dyn FnMut(&[usize]) -> bool,
    ) -> bool {
        if depth == self.order.len() {
            let full: Vec<usize> = map.iter().map(|m| m.unwrap()).collect();
            return visit(&full);
        }
        let atom = self.order[depth];
        let (par, _) = self.parent[depth].expect("non-root atoms have a BFS parent");
        let anchor = map[par].unwrap();
        for &(cand, _) in &self.adj[anchor] {
            if self.consistent(map, atom, cand) {
                map[atom] = Some(cand);
                if !self.extend(map, depth + 1, visit) {
                    return false;
                }
                map[atom] = None;
            }
        }
        true
    }

    fn edge_images(&self, mapping: &[usize]) -> Vec<usize> {
        self.p
            .bonds
            .iter()
            .map(|&(a, b, q)| self.bond_ok(mapping[a], mapping[b], q).unwrap())
            .collect()
    }
}

fn check_pattern_size(p: &Pattern) -> Result<()> {
    if p.atoms.len() > MAX_PATTERN_ATOMS {
        return Err(Error::Pattern(format!(
            "pattern '{}' has {} atoms; the matcher accepts at most {MAX_PATTERN_ATOMS}",
            p.name,
            p.atoms.len()
        )));
    }
    Ok(())
}

/// All matches of one pattern, deduplicated by node set (first mapping in
/// search order supplies the edge set).
pub fn match_pattern(g: &MolGraph, p: &Pattern) -> Result<Vec<Fragment>> {
    check_pattern_size(p)?;
    let id = g.id();
    let m = Matcher::new(g, p, None);
    let mut by_nodes: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    m.run(None, &mut |mapping| {
        let mut nodes = mapping.to_vec();
        nodes.sort_unstable();
        by_nodes.entry(nodes).or_insert_with(|| m.edge_images(mapping));
        true
    });
    Ok(normalize(
        by_nodes
            .into_iter()
            .map(|(n, e)| Fragment::with_parent(id, n, e, FragmentKind::Fg))
            .collect(),
    ))
}

/// Union over `patterns` of every match in `g`.
pub fn match_patterns(g: &MolGraph, patterns: &[Pattern]) -> Result<Vec<Fragment>> {
    let mut out = Vec::new();
    for p in patterns {
        out.extend(match_pattern(g, p)?);
    }
    Ok(normalize(out))
}

/// True when pattern atom 0 can sit on `anchor` without using `excluded`.
pub fn matches_at(g: &MolGraph, p: &Pattern, anchor: usize, excluded: Option<usize>) -> bool {
    let m = Matcher::new(g, p, excluded);
    let mut found = false;
    m.run(Some(anchor), &mut |_| {
        found = true;
        false
    });
    found
}

// ---------------------------------------------------------------------------
// Cycles

/// A minimum cycle basis: candidate cycles from shortest-path trees rooted at
/// every node (Horton's set, which contains every shortest cycle through each
/// edge), ordered by (length, node set, edge set) and accepted greedily when
/// independent over GF(2).
pub fn extract_cycles(g: &MolGraph) -> Vec<Fragment> {
    let n = g.num_nodes();
    let m = g.num_edges();
    let rank = m + g.num_components() - n;
    if rank == 0 {
        return Vec::new();
    }
    let mut adj = g.neighbors();
    for list in &mut adj {
        list.sort_unstable();
    }
    let mut candidates: BTreeSet<(usize, Vec<usize>, Vec<usize>)> = BTreeSet::new();
    for root in 0..n {
        // BFS tree with smallest-index parents.
        let mut parent = vec![usize::MAX; n];
        let mut parent_edge = vec![usize::MAX; n];
        let mut dist = vec![usize::MAX; n];
        dist[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &(v, k) in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    parent[v] = u;
                    parent_edge[v] = k;
                    queue.push_back(v);
                }
            }
        }
        let path = |mut v: usize| {
            let mut nodes = vec![v];
            let mut edges = Vec::new();
            while v != root {
                edges.push(parent_edge[v]);
                v = parent[v];
                nodes.push(v);
            }
            (nodes, edges)
        };
        for (k, e) in g.edges().iter().enumerate() {
            if dist[e.i] == usize::MAX || parent_edge[e.i] == k || parent_edge[e.j] == k {
                continue;
            }
            let (pu, eu) = path(e.i);
            let (pv, ev) = path(e.j);
            let su: BTreeSet<usize> = pu.iter().copied().collect();
            if pv.iter().filter(|v| su.contains(v)).count() != 1 {
                continue;
            }
            let mut nodes: Vec<usize> = su.into_iter().chain(pv).collect();
            nodes.sort_unstable();
            nodes.dedup();
            let mut edges: Vec<usize> = eu.into_iter().chain(ev).chain([k]).collect();
            edges.sort_unstable();
            if nodes.len() < 3 {
                continue;
            }
            candidates.insert((nodes.len(), nodes, edges));
        }
    }

    let words = m.div_ceil(64);
    let mut basis: Vec<(usize, Vec<u64>)> = Vec::new();
    let id = g.id();
    let mut out = Vec::new();
    for (_, nodes, edges) in candidates {
        let mut v = vec![0u64; words];
        for &k in &edges {
            v[k / 64] |= 1 << (k % 64);
        }
        for (pivot, row) in &basis {
            if v[pivot / 64] >> (pivot % 64) & 1 == 1 {
                for (a, b) in v.iter_mut().zip(row) {
                    *a ^= b;
                }
            }
        }
        let lead = v
            .iter()
            .enumerate()
            .find(|(_, w)| **w != 0)
            .map(|(i, w)| i * 64 + w.trailing_zeros() as usize);
        if let Some(pivot) = lead {
            for (_, row) in basis.iter_mut() {
                if row[pivot / 64] >> (pivot % 64) & 1 == 1 {
                    for (a, b) in row.iter_mut().zip(&v) {
                        *a ^= b;
                    }
                }
            }
            basis.push((pivot, v));
            out.push(Fragment::with_parent(id, nodes, edges, FragmentKind::Cycle));
            if out.len() == rank {
                break;
            }
        }
    }
    normalize(out)
}

/// Unions any two cycles sharing more than two nodes, until no such pair
/// remains.
pub fn merge_cycles(cycles: &[Fragment]) -> Result<Vec<Fragment>> {
    let Some(first) = cycles.first() else {
        return Ok(Vec::new());
    };
    if cycles.iter().any(|c| c.parent != first.parent) {
        return Err(Error::Graph("cycles come from different graphs".into()));
    }
    if let Some(bad) = cycles
        .iter()
        .find(|c| !matches!(c.kind, FragmentKind::Cycle | FragmentKind::MergedCycle))
    {
        return Err(Error::Graph(format!(
            "merge_cycles expects cycle fragments, got {}",
            bad.kind.name()
        )));
    }
    let mut work: Vec<Fragment> = cycles.to_vec();
    'outer: loop {
        for i in 0..work.len() {
            for j in i + 1..work.len() {
                let shared = work[i]
                    .nodes
                    .iter()
                    .filter(|v| work[j].contains(**v))
                    .count();
                if shared > 2 {
                    let b = work.remove(j);
                    let a = &mut work[i];
                    a.nodes.extend(b.nodes);
                    a.edges.extend(b.edges);
                    *a = Fragment::with_parent(
                        a.parent,
                        std::mem::take(&mut a.nodes),
                        std::mem::take(&mut a.edges),
                        FragmentKind::MergedCycle,
                    );
                    continue 'outer;
                }
            }
        }
        break;
    }
    Ok(normalize(work))
}

// ---------------------------------------------------------------------------
// Cleavage

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleavageTable {
    pub pairs: Vec<(Pattern, Pattern)>,
}

pub const DEFAULT_CLEAVAGE: &str = "\
# amide N | aromatic C
NC=O | c
# ester O | aliphatic C
OC=O | C
# amine N | aliphatic C
N | C
# aromatic C | aliphatic C
c | C
";

impl CleavageTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let wrap = |e: Error| Error::Line {
                line: k + 1,
                message: e.to_string(),
            };
            let (l, r) = line.split_once('|').ok_or_else(|| Error::Line {
                line: k + 1,
                message: "expected 'left | right'".into(),
            })?;
            let n = pairs.len();
            let left = Pattern::parse(&format!("pair{n}.left"), l).map_err(wrap)?;
            let right = Pattern::parse(&format!("pair{n}.right"), r).map_err(wrap)?;
            pairs.push((left, right));
        }
        Ok(CleavageTable { pairs })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl Default for CleavageTable {
    fn default() -> Self {
        CleavageTable::parse(DEFAULT_CLEAVAGE).expect("bundled cleavage table parses")
    }
}

/// Edges whose endpoints anchor a (left, right) environment pair, each side
/// matched without crossing the bond.
pub fn cleavage_sites(g: &MolGraph, table: &CleavageTable) -> Result<Vec<usize>> {
    for (l, r) in &table.pairs {
        check_pattern_size(l)?;
        check_pattern_size(r)?;
    }
    let mut sites = Vec::new();
    for (k, e) in g.edges().iter().enumerate() {
        let hit = table.pairs.iter().any(|(l, r)| {
            (matches_at(g, l, e.i, Some(e.j)) && matches_at(g, r, e.j, Some(e.i)))
                || (matches_at(g, l, e.j, Some(e.i)) && matches_at(g, r, e.i, Some(e.j)))
        });
        if hit {
            sites.push(k);
        }
    }
    Ok(sites)
}

/// Connected pieces left after deleting every cleavage site.
pub fn brics_cleave(g: &MolGraph, table: &CleavageTable) -> Result<Vec<Fragment>> {
    let cut: BTreeSet<usize> = cleavage_sites(g, table)?.into_iter().collect();
    let kept: Vec<usize> = (0..g.num_edges()).filter(|k| !cut.contains(k)).collect();
    Ok(components_of(g, &(0..g.num_nodes()).collect::<Vec<_>>(), &kept)
        .into_iter()
        .map(|(nodes, edges)| Fragment::with_parent(g.id(), nodes, edges, FragmentKind::BricsPiece))
        .collect::<Vec<_>>())
    .map(normalize)
}

/// Connected components of the subgraph (nodes, edges).
fn components_of(g: &MolGraph, nodes: &[usize], edges: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut root: HashMap<usize, usize> = nodes.iter().map(|&v| (v, v)).collect();
    fn find(root: &mut HashMap<usize, usize>, v: usize) -> usize {
        let p = root[&v];
        if p == v {
            v
        } else {
            let r = find(root, p);
            root.insert(v, r);
            r
        }
    }
    for &k in edges {
        let e = g.edge(k);
        let (a, b) = (find(&mut root, e.i), find(&mut root, e.j));
        if a != b {
            root.insert(a.max(b), a.min(b));
        }
    }
    let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for &v in nodes {
        let r = find(&mut root, v);
        groups.entry(r).or_default().0.push(v);
    }
    for &k in edges {
        let r = find(&mut root, g.edge(k).i);
        groups.get_mut(&r).unwrap().1.push(k);
    }
    groups.into_values().collect()
}

// ---------------------------------------------------------------------------
// Leftovers and refinement

/// Every node outside all `covered` fragments, as singleton fragments.
pub fn remaining_nodes(g: &MolGraph, covered: &[Fragment]) -> Result<Vec<Fragment>> {
    check_parent(g, covered)?;
    let mut hit = vec![false; g.num_nodes()];
    for f in covered {
        for &v in &f.nodes {
            hit[v] = true;
        }
    }
    let id = g.id();
    Ok(hit
        .iter()
        .enumerate()
        .filter(|(_, h)| !**h)
        .map(|(v, _)| Fragment::with_parent(id, vec![v], Vec::new(), FragmentKind::SingletonNode))
        .collect())
}

/// Every edge outside all `covered` fragments as a two-node fragment. With
/// `cc_single_only`, only single bonds between two aliphatic carbons qualify.
pub fn remaining_edges(
    g: &MolGraph,
    covered: &[Fragment],
    cc_single_only: bool,
) -> Result<Vec<Fragment>> {
    check_parent(g, covered)?;
    let mut hit = vec![false; g.num_edges()];
    for f in covered {
        for &k in &f.edges {
            hit[k] = true;
        }
    }
    let id = g.id();
    let aliphatic_c = |v: usize| {
        let a = g.node(v);
        a.atomic_number == 6 && !a.is_aromatic
    };
    Ok(g.edges()
        .iter()
        .enumerate()
        .filter(|(k, _)| !hit[*k])
        .filter(|(_, e)| {
            !cc_single_only
                || (e.attr.bond_type == BondType::Single && aliphatic_c(e.i) && aliphatic_c(e.j))
        })
        .map(|(k, e)| Fragment::with_parent(id, vec![e.i, e.j], vec![k], FragmentKind::SingleEdge))
        .collect())
}

/// Nodes lying on a cycle of the subgraph (nodes, edges): endpoints of every
/// edge that is not a bridge.
fn ring_nodes(g: &MolGraph, nodes: &[usize], edges: &[usize]) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for &k in edges {
        let rest: Vec<usize> = edges.iter().copied().filter(|&x| x != k).collect();
        let e = g.edge(k);
        let comps = components_of(g, nodes, &rest);
        let same = comps.iter().any(|(ns, _)| ns.contains(&e.i) && ns.contains(&e.j));
        if same {
            out.insert(e.i);
            out.insert(e.j);
        }
    }
    out
}

/// Splits each fragment's ring content from its acyclic content: atoms hanging
/// off a ring become singletons, and acyclic chains become fragments of their
/// own. Fragments that are purely cyclic or purely acyclic pass unchanged.
pub fn mgssl_refine(g: &MolGraph, fragments: &[Fragment]) -> Result<Vec<Fragment>> {
    check_parent(g, fragments)?;
    let mut out = Vec::new();
    for f in fragments {
        let ring = ring_nodes(g, &f.nodes, &f.edges);
        if ring.is_empty() || ring.len() == f.nodes.len() {
            out.push(f.clone());
            continue;
        }
        let (ring_part, chain_part): (Vec<usize>, Vec<usize>) =
            f.nodes.iter().partition(|v| ring.contains(v));
        let within = |set: &[usize]| -> Vec<usize> {
            f.edges
                .iter()
                .copied()
                .filter(|&k| {
                    let e = g.edge(k);
                    set.contains(&e.i) && set.contains(&e.j)
                })
                .collect()
        };
        for part in [&ring_part, &chain_part] {
            for (nodes, edges) in components_of(g, part, &within(part)) {
                let kind = if nodes.len() == 1 {
                    FragmentKind::SingletonNode
                } else {
                    FragmentKind::Refined
                };
                out.push(Fragment::with_parent(f.parent, nodes, edges, kind));
            }
        }
    }
    Ok(normalize(out))
}

// ---------------------------------------------------------------------------
// Recipes

/// Pattern library and cleavage table consulted by recipes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentContext {
    pub patterns: Vec<Pattern>,
    pub table: CleavageTable,
}

impl Default for FragmentContext {
    fn default() -> Self {
        FragmentContext {
            patterns: default_patterns(),
            table: CleavageTable::default(),
        }
    }
}

/// A fragmentation recipe. Every node maps an incoming fragment set to an
/// outgoing one: generators add their fragments to the input, `merge_cycles`
/// and `mgssl_refine` rewrite it, `Union` runs children on the same input and
/// unites the results, and `Chain` feeds each stage into the next.
///
/// Text form: stages separated by `>`, alternatives by `+`, parentheses for
/// grouping, e.g. `(cycles + fg) > remaining_cc > remaining_nodes`. The
/// presets `mgssl` and `relmole` expand to their definitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recipe {
    Cycles,
    MergeCycles,
    FunctionalGroups,
    Brics,
    RemainingNodes,
    RemainingEdges,
    RemainingCcSingle,
    MgsslRefine,
    Union(Vec<Recipe>),
    Chain(Vec<Recipe>),
}

impl Recipe {
    pub fn mgssl() -> Self {
        Recipe::Chain(vec![Recipe::Brics, Recipe::MgsslRefine])
    }

    pub fn relmole() -> Self {
        Recipe::Chain(vec![
            Recipe::Union(vec![Recipe::Cycles, Recipe::FunctionalGroups]),
            Recipe::RemainingCcSingle,
            Recipe::RemainingNodes,
        ])
    }

    fn validate(&self) -> Result<()> {
        match self {
            Recipe::Union(c) | Recipe::Chain(c) if c.is_empty() => {
                Err(Error::Recipe("empty recipe group".into()))
            }
            Recipe::Union(c) | Recipe::Chain(c) => c.iter().try_for_each(Recipe::validate),
            _ => Ok(()),
        }
    }

    pub fn apply(
        &self,
        g: &MolGraph,
        ctx: &FragmentContext,
        input: Vec<Fragment>,
    ) -> Result<Vec<Fragment>> {
        let add = |mut input: Vec<Fragment>, more: Vec<Fragment>| {
            input.extend(more);
            normalize(input)
        };
        Ok(match self {
            Recipe::Cycles => add(input, extract_cycles(g)),
            Recipe::FunctionalGroups => add(input, match_patterns(g, &ctx.patterns)?),
            Recipe::Brics => add(input, brics_cleave(g, &ctx.table)?),
            Recipe::RemainingNodes => {
                let more = remaining_nodes(g, &input)?;
                add(input, more)
            }
            Recipe::RemainingEdges => {
                let more = remaining_edges(g, &input, false)?;
                add(input, more)
            }
            Recipe::RemainingCcSingle => {
                let more = remaining_edges(g, &input, true)?;
                add(input, more)
            }
            Recipe::MergeCycles => {
                let (cyc, rest): (Vec<_>, Vec<_>) = input.into_iter().partition(|f| {
                    matches!(f.kind, FragmentKind::Cycle | FragmentKind::MergedCycle)
                });
                add(rest, merge_cycles(&cyc)?)
            }
            Recipe::MgsslRefine => mgssl_refine(g, &input)?,
            Recipe::Union(children) => {
                let mut out = Vec::new();
                for c in children {
                    out.extend(c.apply(g, ctx, input.clone())?);
                }
                normalize(out)
            }
            Recipe::Chain(stages) => {
                let mut cur = input;
                for s in stages {
                    cur = s.apply(g, ctx, cur)?;
                }
                cur
            }
        })
    }
}

/// Runs `recipe` on `g` from an empty fragment set.
pub fn compose(g: &MolGraph, recipe: &Recipe, ctx: &FragmentContext) -> Result<Vec<Fragment>> {
    recipe.validate()?;
    Ok(normalize(recipe.apply(g, ctx, Vec::new())?))
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Recipe::Cycles => "cycles",
            Recipe::MergeCycles => "merge_cycles",
            Recipe::FunctionalGroups => "fg",
            Recipe::Brics => "brics",
            Recipe::RemainingNodes => "remaining_nodes",
            Recipe::RemainingEdges => "remaining_edges",
            Recipe::RemainingCcSingle => "remaining_cc",
            Recipe::MgsslRefine => "mgssl_refine",
            Recipe::Union(c) => {
                write!(f, "(")?;
                for (i, r) in c.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{r}")?;
                }
                return write!(f, ")");
            }
            Recipe::Chain(c) => {
                write!(f, "(")?;
                for (i, r) in c.iter().enumerate() {
                    if i > 0 {
                        write!(f, " > ")?;
                    }
                    write!(f, "{r}")?;
                }
                return write!(f, ")");
            }
        };
        f.write_str(name)
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens = tokenize_recipe(s)?;
        if tokens.is_empty() {
            return Err(Error::Recipe("empty recipe".into()));
        }
        let mut pos = 0;
        let r = parse_chain(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::Recipe(format!(
                "unexpected '{}' in recipe '{s}'",
                tokens[pos]
            )));
        }
        r.validate()?;
        Ok(r)
    }
}

fn tokenize_recipe(s: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in s.chars() {
        if ch.is_ascii_alphanumeric() || ch == '_' {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        match ch {
            '(' | ')' | '+' | '>' => out.push(ch.to_string()),
            c if c.is_whitespace() => {}
            c => return Err(Error::Recipe(format!("unexpected character '{c}' in recipe"))),
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    Ok(out)
}

fn parse_chain(t: &[String], pos: &mut usize) -> Result<Recipe> {
    let mut stages = vec![parse_union(t, pos)?];
    while t.get(*pos).map(String::as_str) == Some(">") {
        *pos += 1;
        stages.push(parse_union(t, pos)?);
    }
    Ok(if stages.len() == 1 {
        stages.pop().unwrap()
    } else {
        Recipe::Chain(stages)
    })
}

fn parse_union(t: &[String], pos: &mut usize) -> Result<Recipe> {
    let mut items = vec![parse_term(t, pos)?];
    while t.get(*pos).map(String::as_str) == Some("+") {
        *pos += 1;
        items.push(parse_term(t, pos)?);
    }
    Ok(if items.len() == 1 {
        items.pop().unwrap()
    } else {
        Recipe::Union(items)
    })
}

fn parse_term(t: &[String], pos: &mut usize) -> Result<Recipe> {
    let tok = t
        .get(*pos)
        .ok_or_else(|| Error::Recipe("recipe ends unexpectedly".into()))?;
    *pos += 1;
    Ok(match tok.as_str() {
        "(" => {
            let inner = parse_chain(t, pos)?;
            if t.get(*pos).map(String::as_str) != Some(")") {
                return Err(Error::Recipe("missing ')' in recipe".into()));
            }
            *pos += 1;
            inner
        }
        "cycles" => Recipe::Cycles,
        "merge_cycles" => Recipe::MergeCycles,
        "fg" => Recipe::FunctionalGroups,
        "brics" => Recipe::Brics,
        "remaining_nodes" => Recipe::RemainingNodes,
        "remaining_edges" => Recipe::RemainingEdges,
        "remaining_cc" => Recipe::RemainingCcSingle,
        "mgssl_refine" => Recipe::MgsslRefine,
        "mgssl" => Recipe::mgssl(),
        "relmole" => Recipe::relmole(),
        other => return Err(Error::Recipe(format!("unknown recipe step '{other}'"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::parse_smiles;

    fn mol(s: &str) -> MolGraph {
        parse_smiles(s).unwrap()
    }

    fn node_sets(fs: &[Fragment]) -> Vec<Vec<usize>> {
        fs.iter().map(|f| f.nodes().to_vec()).collect()
    }

    #[test]
    fn amide_on_acetaminophen() {
        let g = mol("CC(=O)Nc1cccc(O)c1");
        let amide = Pattern::parse("amide", "C(=O)N").unwrap();
        let hits = match_patterns(&g, &[amide]).unwrap();
        assert_eq!(node_sets(&hits), vec![vec![1, 2, 3]]);
        assert_eq!(hits[0].edges().len(), 2);
    }

    #[test]
    fn hydroxyl_and_empty_list() {
        let g = mol("CO");
        let oh = Pattern::parse("hydroxyl", "O").unwrap();
        assert_eq!(node_sets(&match_patterns(&g, &[oh]).unwrap()), vec![vec![1]]);
        assert!(match_patterns(&g, &[]).unwrap().is_empty());
    }

    #[test]
    fn oversized_pattern_rejected() {
        let big = Pattern::parse("big", &"C".repeat(17)).unwrap();
        assert!(matches!(
            match_patterns(&mol("CC"), &[big]),
            Err(Error::Pattern(_))
        ));
    }

    #[test]
    fn pattern_grammar() {
        let p = Pattern::parse("halide", "[#6][F,Cl,Br,I]").unwrap();
        assert_eq!(p.atoms[0].aromatic, None);
        assert_eq!(p.atoms[1].elements, Some(vec![9, 17, 35, 53]));
        let hits = match_pattern(&mol("Clc1ccccc1"), &p).unwrap();
        assert_eq!(node_sets(&hits), vec![vec![0, 1]]);
        assert!(Pattern::parse("x", "C(").is_err());
        assert!(Pattern::parse("x", "C1CC").is_err());
        assert!(Pattern::parse("x", "Q").is_err());
        assert!(Pattern::parse("x", "[c,C]").is_err());
        assert_eq!(default_patterns().len(), 12);
    }

    #[test]
    fn benzene_and_naphthalene_rings() {
        let benz = extract_cycles(&mol("c1ccccc1"));
        assert_eq!(node_sets(&benz), vec![vec![0, 1, 2, 3, 4, 5]]);
        assert!(extract_cycles(&mol("CO")).is_empty());
        let naph = extract_cycles(&mol("c1ccc2ccccc2c1"));
        assert_eq!(naph.len(), 2);
        assert!(naph.iter().all(|f| f.len() == 6 && f.edges().len() == 6));
        let shared = naph[0].nodes().iter().filter(|v| naph[1].contains(**v)).count();
        assert_eq!(shared, 2);
    }

    #[test]
    fn cubane_like_basis_is_complete() {
        // cube graph: 8 nodes, 12 edges, cyclomatic number 5, all faces are 4-rings
        let g = mol("C12C3C4C1C5C2C3C45");
        let rings = extract_cycles(&g);
        assert_eq!(rings.len(), 5);
        assert!(rings.iter().all(|f| f.len() == 4));
    }

    #[test]
    fn merge_rules() {
        let naph = extract_cycles(&mol("c1ccc2ccccc2c1"));
        assert_eq!(merge_cycles(&naph).unwrap(), naph);

        // two 5-rings sharing the path 0-1-2
        let g = mol("C12CC3CC1CCC2C3");
        let id = g.id();
        let a = Fragment::with_parent(id, vec![0, 1, 2, 3, 4], vec![], FragmentKind::Cycle);
        let b = Fragment::with_parent(id, vec![0, 1, 2, 5, 6], vec![], FragmentKind::Cycle);
        let merged = merge_cycles(&[a.clone(), b]).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].len(), 7);
        assert_eq!(merged[0].kind(), FragmentKind::MergedCycle);
        assert_eq!(merge_cycles(&merged).unwrap(), merged);
        assert_eq!(merge_cycles(std::slice::from_ref(&a)).unwrap(), vec![a.clone()]);

        let other = Fragment::with_parent(GraphId(1), vec![0, 1, 2], vec![], FragmentKind::Cycle);
        assert!(merge_cycles(&[a, other]).is_err());
    }

    #[test]
    fn cleave_acetaminophen() {
        let g = mol("CC(=O)Nc1cccc(O)c1");
        let table = CleavageTable::parse("NC=O | c").unwrap();
        assert_eq!(cleavage_sites(&g, &table).unwrap(), vec![3]);
        let pieces = brics_cleave(&g, &table).unwrap();
        let sizes: Vec<usize> = pieces.iter().map(Fragment::len).collect();
        assert_eq!(sizes, vec![4, 7]);

        let none = CleavageTable::parse("S | S").unwrap();
        let whole = brics_cleave(&g, &none).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].len(), 11);
        assert_eq!(whole[0].edges().len(), 11);

        let co = mol("CO");
        let t = CleavageTable::parse("C | O").unwrap();
        assert_eq!(node_sets(&brics_cleave(&co, &t).unwrap()), vec![vec![0], vec![1]]);
    }

    #[test]
    fn leftovers() {
        let tol = mol("Cc1ccccc1");
        let rings = extract_cycles(&tol);
        assert_eq!(node_sets(&remaining_nodes(&tol, &rings).unwrap()), vec![vec![0]]);
        let all = remaining_nodes(&tol, &[]).unwrap();
        assert_eq!(all.len(), 7);
        let mut covered = rings.clone();
        covered.extend(remaining_nodes(&tol, &rings).unwrap());
        assert!(remaining_nodes(&tol, &covered).unwrap().is_empty());

        let eb = mol("CCc1ccccc1");
        let mut cov = extract_cycles(&eb);
        cov.extend(remaining_nodes(&eb, &cov).unwrap());
        let cc = remaining_edges(&eb, &cov, true).unwrap();
        assert_eq!(node_sets(&cc), vec![vec![0, 1]]);
        assert_eq!(remaining_edges(&eb, &cov, false).unwrap().len(), 2);
        let full: Vec<Fragment> = vec![induced_all(&eb)];
        assert!(remaining_edges(&eb, &full, false).unwrap().is_empty());
    }

    fn induced_all(g: &MolGraph) -> Fragment {
        crate::molgraph::induced_subgraph(g, &(0..g.num_nodes()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn mgssl_rules() {
        let tol = mol("Cc1ccccc1");
        let piece = induced_all(&tol);
        let out = mgssl_refine(&tol, &[piece]).unwrap();
        assert_eq!(node_sets(&out), vec![vec![0], vec![1, 2, 3, 4, 5, 6]]);

        let propyl = mol("CCC");
        let p = induced_all(&propyl);
        assert_eq!(mgssl_refine(&propyl, std::slice::from_ref(&p)).unwrap(), vec![p]);

        let benz = mol("c1ccccc1");
        let b = induced_all(&benz);
        assert_eq!(mgssl_refine(&benz, std::slice::from_ref(&b)).unwrap(), vec![b]);
    }

    #[test]
    fn recipes() {
        let ctx = FragmentContext::default();
        let tol = mol("Cc1ccccc1");
        let r: Recipe = "cycles > remaining_nodes".parse().unwrap();
        let out = compose(&tol, &r, &ctx).unwrap();
        assert_eq!(node_sets(&out), vec![vec![0], vec![1, 2, 3, 4, 5, 6]]);

        let out = compose(&mol("CO"), &Recipe::relmole(), &ctx).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|f| f.len() == 1));

        assert!("".parse::<Recipe>().is_err());
        assert!("cycles >".parse::<Recipe>().is_err());
        assert!("(cycles".parse::<Recipe>().is_err());
        assert!("bogus".parse::<Recipe>().is_err());
        assert!(compose(&tol, &Recipe::Union(vec![]), &ctx).is_err());

        let again: Recipe = Recipe::relmole().to_string().parse().unwrap();
        assert_eq!(again, Recipe::relmole());
        assert_eq!("mgssl".parse::<Recipe>().unwrap(), Recipe::mgssl());
    }

    #[test]
    fn mgssl_preset_on_toluene() {
        let ctx = FragmentContext::default();
        let out = compose(&mol("Cc1ccccc1"), &Recipe::mgssl(), &ctx).unwrap();
        // aromatic C | aliphatic C cleaves the methyl already
        assert_eq!(node_sets(&out), vec![vec![0], vec![1, 2, 3, 4, 5, 6]]);
    }
}
