#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use mgmlab::fragment::{AtomQuery, BondQuery, Pattern};
use mgmlab::molgraph::{load_graph_file, BondType, Edge, EdgeAttr, MolGraph, NodeAttr};
use rand::Rng;

pub fn toy_corpus() -> Vec<MolGraph> {
    load_graph_file(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy100.smi")).unwrap()
}

/// Random connected labelled graph: a random tree plus a few extra edges.
pub fn random_graph(rng: &mut impl Rng, max_nodes: usize) -> MolGraph {
    let n = rng.gen_range(1..=max_nodes);
    let elems = [6u8, 6, 6, 7, 8, 16];
    let nodes: Vec<NodeAttr> = (0..n)
        .map(|_| NodeAttr::new(elems[rng.gen_range(0..elems.len())], rng.gen_bool(0.3)))
        .collect();
    let mut pairs = BTreeSet::new();
    for v in 1..n {
        pairs.insert((rng.gen_range(0..v), v));
    }
    for _ in 0..rng.gen_range(0..=n / 2) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(i, j)| Edge {
            i,
            j,
            attr: EdgeAttr {
                bond_type: BondType::ALL[rng.gen_range(0..4)],
            },
        })
        .collect();
    MolGraph::new(nodes, edges).unwrap()
}

pub fn random_pattern(rng: &mut impl Rng) -> Pattern {
    let k = rng.gen_range(1..=4);
    let atom = |rng: &mut dyn rand::RngCore| AtomQuery {
        elements: match rng.gen_range(0..4) {
            0 => None,
            1 => Some(vec![6]),
            2 => Some(vec![7, 8]),
            _ => Some(vec![6, 8]),
        },
        aromatic: match rng.gen_range(0..3) {
            0 => None,
            1 => Some(false),
            _ => Some(true),
        },
    };
    let atoms = (0..k).map(|_| atom(rng)).collect();
    let bond = |rng: &mut dyn rand::RngCore| match rng.gen_range(0..5) {
        0 => BondQuery::Is(BondType::Single),
        1 => BondQuery::Is(BondType::Double),
        2 => BondQuery::Is(BondType::Aromatic),
        3 => BondQuery::SingleOrAromatic,
        _ => BondQuery::Any,
    };
    let mut bonds = Vec::new();
    for v in 1..k {
        bonds.push((rng.gen_range(0..v), v, bond(rng)));
    }
    if k >= 3 && rng.gen_bool(0.3) && !bonds.iter().any(|&(a, b, _)| (a, b) == (0, k - 1)) {
        bonds.push((0, k - 1, bond(rng)));
    }
    Pattern::from_parts("random", atoms, bonds).unwrap()
}

/// Node sets of every injective pattern embedding, by exhaustive search.
pub fn brute_force_matches(g: &MolGraph, p: &Pattern) -> BTreeSet<Vec<usize>> {
    let mut bond_of = BTreeMap::new();
    for e in g.edges() {
        bond_of.insert((e.i, e.j), e.attr.bond_type);
        bond_of.insert((e.j, e.i), e.attr.bond_type);
    }
    let k = p.atoms.len();
    let n = g.num_nodes();
    let mut out = BTreeSet::new();
    let mut map = vec![0usize; k];
    fn rec(
        depth: usize,
        map: &mut Vec<usize>,
        k: usize,
        n: usize,
        g: &MolGraph,
        p: &Pattern,
        bond_of: &BTreeMap<(usize, usize), BondType>,
        out: &mut BTreeSet<Vec<usize>>,
    ) {
        if depth == k {
            let ok = p.bonds.iter().all(|&(a, b, q)| {
                bond_of.get(&(map[a], map[b])).is_some_and(|&bt| q.matches(bt))
            });
            if ok {
                let mut s = map.clone();
                s.sort_unstable();
                out.insert(s);
            }
            return;
        }
        for v in 0..n {
            if map[..depth].contains(&v) || !p.atoms[depth].matches(g.node(v)) {
                continue;
            }
            map[depth] = v;
            rec(depth + 1, map, k, n, g, p, bond_of, out);
        }
    }
    rec(0, &mut map, k, n, g, p, &bond_of, &mut out);
    out
}
