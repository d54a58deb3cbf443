mod common;

use mgmlab::analyze::{subtree_census, subtree_keys};
use mgmlab::molgraph::{format_graphs, induced_subgraph, parse_graph_text, Edge, MolGraph};
use mgmlab::nets::{Autoencoder, GraphBatch, ModelConfig, Preset, RemaskMode};
use mgmlab::pretrain::{mask_nodes, stream_rng, Checkpoint, TrainConfig};
use mgmlab::sgt::{sgt_tokenize, GraphOperatorKind, NodeEmbedding, SgtConfig};
use mgmlab::tokenize::{canonical_key, AtomVocab};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relabels node `i` as `perm[i]`.
fn permute(g: &MolGraph, perm: &[usize]) -> MolGraph {
    let mut nodes = g.nodes().to_vec();
    for (i, n) in g.nodes().iter().enumerate() {
        nodes[perm[i]] = *n;
    }
    let edges = g
        .edges()
        .iter()
        .map(|e| Edge {
            i: perm[e.i],
            j: perm[e.j],
            attr: e.attr,
        })
        .collect();
    MolGraph::new(nodes, edges).unwrap()
}

fn graph_and_perm(seed: u64, max_nodes: usize) -> (MolGraph, Vec<usize>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = common::random_graph(&mut rng, max_nodes);
    let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
    perm.shuffle(&mut rng);
    (g, perm, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_count_is_rounded_share(seed in any::<u64>(), ratio in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graphs: Vec<MolGraph> = (0..rng.gen_range(1..5)).map(|_| common::random_graph(&mut rng, 20)).collect();
        let atoms = AtomVocab::from_graphs(&graphs);
        let batch = GraphBatch::new(&graphs, &atoms).unwrap();
        let (ids, plan) = mask_nodes(&batch, ratio, seed, atoms.size()).unwrap();
        for g in 0..batch.num_graphs() {
            let range = batch.nodes_of(g);
            let n = range.len();
            let got = plan.masked.iter().filter(|i| range.contains(i)).count();
            prop_assert_eq!(got, ((ratio * n as f64).round() as usize).clamp(1, n));
        }
        for (i, &id) in ids.iter().enumerate() {
            prop_assert_eq!(id == atoms.size(), plan.masked.contains(&i));
        }
    }

    #[test]
    fn canonical_key_ignores_node_order(seed in any::<u64>()) {
        let (g, perm, _) = graph_and_perm(seed, 9);
        let h = permute(&g, &perm);
        let all = |g: &MolGraph| induced_subgraph(g, &(0..g.num_nodes()).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(canonical_key(&all(&g), &g).unwrap(), canonical_key(&all(&h), &h).unwrap());
    }

    #[test]
    fn subtree_keys_follow_nodes(seed in any::<u64>()) {
        let (g, perm, _) = graph_and_perm(seed, 15);
        let before = subtree_keys(&g);
        let after = subtree_keys(&permute(&g, &perm));
        for i in 0..g.num_nodes() {
            prop_assert_eq!(&before[i], &after[perm[i]]);
        }
    }

    #[test]
    fn sgt_is_permutation_equivariant(seed in any::<u64>(), layers in 1usize..3, op in 0usize..3) {
        let (g, perm, mut rng) = graph_and_perm(seed, 15);
        prop_assume!(g.num_nodes() > 1);
        let atoms = AtomVocab::from_graphs([&g]);
        let table = Array2::from_shape_fn((atoms.atoms().len(), 4), |_| rng.gen_range(-1.0..1.0));
        let emb = NodeEmbedding::new(table, atoms.atoms().iter().enumerate().map(|(i, &z)| (z, i)).collect()).unwrap();
        let kind = [GraphOperatorKind::Gin { eps: 0.5 }, GraphOperatorKind::Gcn, GraphOperatorKind::Sage][op];
        let cfg = SgtConfig::new(kind, layers, 4).unwrap();
        let a = sgt_tokenize(&g, &emb, &cfg).unwrap().values;
        let b = sgt_tokenize(&permute(&g, &perm), &emb, &cfg).unwrap().values;
        for i in 0..g.num_nodes() {
            for c in 0..4 {
                prop_assert!((a[[i, c]] - b[[perm[i], c]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn census_ignores_corpus_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut graphs: Vec<MolGraph> = (0..8).map(|_| common::random_graph(&mut rng, 10)).collect();
        let before = subtree_census(&graphs);
        graphs.shuffle(&mut rng);
        prop_assert_eq!(before, subtree_census(&graphs));
    }

    #[test]
    fn graph_text_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graphs: Vec<MolGraph> = (0..3).map(|_| common::random_graph(&mut rng, 12)).collect();
        prop_assert_eq!(parse_graph_text(&format_graphs(&graphs)).unwrap(), graphs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), dim in 2usize..8, epoch in 0u64..1000) {
        let atoms = AtomVocab::new(vec![6, 7, 8]);
        let cfg = TrainConfig { dim, seed, ..TrainConfig::default() };
        let model = Autoencoder::new(
            ModelConfig {
                num_atom_ids: atoms.size(),
                dim,
                encoder: Preset::GtsTiny,
                decoder: Preset::GtsTiny,
                out_dim: dim,
                edge_features: true,
                remask: RemaskMode::V2,
            },
            &mut stream_rng(seed, "init", 0),
        )
        .unwrap();
        let ckpt = Checkpoint::from_model(&model, &cfg, &atoms, epoch);
        let bytes = ckpt.to_bytes();
        prop_assert_eq!(&Checkpoint::from_bytes(&bytes).unwrap(), &ckpt);
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let restored = Autoencoder::from_checkpoint(&ckpt).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(restored.store.iter()) {
            prop_assert_eq!(&a.value, &b.value);
        }
    }
}
