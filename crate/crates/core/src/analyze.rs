//! Diagnostics: the one-hop subtree census and linear probes of frozen
//! encoder representations.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fragment::{match_pattern, Pattern};
use crate::molgraph::MolGraph;
use crate::nets::{Autoencoder, GraphBatch, RemaskMode};
use crate::pretrain::{mask_nodes, stream_rng, Checkpoint};
use crate::tensorcore::{standardize_cols, Mat, ParamStore, Tape, NORM_EPS};
use crate::tokenize::AtomVocab;

/// `"C:CO"`: the center symbol, a colon, then the neighbor symbols sorted
/// ascending and concatenated. Aromatic atoms are lowercase.
pub fn subtree_key(g: &MolGraph, i: usize) -> String {
    let nbrs = g
        .edges()
        .iter()
        .filter_map(|e| (e.i == i).then_some(e.j).or((e.j == i).then_some(e.i)));
    key_of(g, i, nbrs)
}

/// [`subtree_key`] for every node.
pub fn subtree_keys(g: &MolGraph) -> Vec<String> {
    g.neighbors()
        .iter()
        .enumerate()
        .map(|(i, nb)| key_of(g, i, nb.iter().map(|&(j, _)| j)))
        .collect()
}

fn key_of(g: &MolGraph, i: usize, nbrs: impl Iterator<Item = usize>) -> String {
    let mut syms: Vec<String> = nbrs.map(|j| g.node(j).symbol()).collect();
    syms.sort();
    format!("{}:{}", g.node(i).symbol(), syms.concat())
}

/// Counts sorted by count descending, then key ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Distribution(pub Vec<(String, usize)>);

impl Distribution {
    fn from_counts(counts: BTreeMap<String, usize>) -> Self {
        let mut v: Vec<_> = counts.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Distribution(v)
    }

    pub fn num_types(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(|(_, c)| c).sum()
    }

    pub fn get(&self, key: &str) -> usize {
        self.0.iter().find(|(k, _)| k == key).map_or(0, |(_, c)| *c)
    }

    /// `key,count,fraction` rows followed by a `# types=..,total=..` line.
    pub fn to_csv(&self) -> String {
        let total = self.total().max(1) as f64;
        let mut s = String::from("key,count,fraction\n");
        for (k, c) in &self.0 {
            s.push_str(&format!("{k},{c},{:.6}\n", *c as f64 / total));
        }
        s.push_str(&format!("# types={},total={}\n", self.num_types(), self.total()));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Census {
    pub subtrees: Distribution,
    pub atoms: Distribution,
}

/// One subtree key and one atom symbol per node of every molecule.
pub fn subtree_census(corpus: &[MolGraph]) -> Census {
    type Counts = (BTreeMap<String, usize>, BTreeMap<String, usize>);
    let (subtrees, atoms) = corpus
        .par_iter()
        .map(|g| {
            let mut local: Counts = Default::default();
            for (i, key) in subtree_keys(g).into_iter().enumerate() {
                *local.0.entry(key).or_default() += 1;
                *local.1.entry(g.node(i).symbol()).or_default() += 1;
            }
            local
        })
        .reduce(Counts::default, |mut a, b| {
            for (k, c) in b.0 {
                *a.0.entry(k).or_default() += c;
            }
            for (k, c) in b.1 {
                *a.1.entry(k).or_default() += c;
            }
            a
        });
    Census {
        subtrees: Distribution::from_counts(subtrees),
        atoms: Distribution::from_counts(atoms),
    }
}

// ---------------------------------------------------------------------------
// Linear probes

pub const PROBE_EPOCHS: usize = 1000;
pub const PROBE_TRAIN_FRACTION: f64 = 0.9;
pub const PROBE_LR: f64 = 0.1;

/// Multinomial logistic regression trained by full-batch gradient descent
/// on standardized inputs. Binary problems use two classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub w: Mat,
    pub b: Mat,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LinearClassifier {
    pub fn fit(x: &Mat, y: &[usize], classes: usize, epochs: usize, lr: f64) -> Result<Self> {
        if x.nrows() == 0 || x.nrows() != y.len() || classes == 0 {
            return Err(Error::Model("probe needs a nonempty labelled training set".into()));
        }
        if y.iter().any(|&c| c >= classes) {
            return Err(Error::Model("probe label outside the class range".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("rows").to_vec();
        let (xs, inv_std) = standardize_cols(x, NORM_EPS);
        let d = x.ncols();
        let mut store = ParamStore::new();
        let w = store.add("probe.w", Mat::zeros((d, classes)))?;
        let b = store.add("probe.b", Mat::zeros((1, classes)))?;
        for _ in 0..epochs {
            let mut tape = Tape::new();
            let xt = tape.constant(xs.clone())?;
            let wt = tape.param(&store, w)?;
            let bt = tape.param(&store, b)?;
            let logits = tape.linear(xt, wt, bt)?;
            let loss = tape.cross_entropy(logits, y)?;
            store.zero_grad();
            tape.backward(loss, &mut store)?;
            for p in store.iter_mut() {
                p.value.scaled_add(-lr, &p.grad);
            }
        }
        Ok(LinearClassifier {
            w: store.value(w).clone(),
            b: store.value(b).clone(),
            mean,
            inv_std,
        })
    }

    pub fn logits(&self, x: &Mat) -> Mat {
        let mut xs = x.clone();
        for (j, mut col) in xs.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) * self.inv_std[j]);
        }
        xs.dot(&self.w) + &self.b
    }

    /// Arg-max class per row, lowest index on ties.
    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (k, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Area under the ROC curve by the rank-sum statistic; ties count half.
/// `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based average rank of the tie group
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTask {
    MaskedAtomType,
    FgPresence,
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeTask::MaskedAtomType => "masked_atom_type",
            ProbeTask::FgPresence => "fg_presence",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub task: ProbeTask,
    /// `accuracy` or `roc_auc`.
    pub metric_name: &'static str,
    pub metric: f64,
    /// Majority-class accuracy on the test split, for the atom task.
    pub baseline: Option<f64>,
    pub per_class: Vec<(String, f64)>,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub notes: Vec<String>,
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task: {}", self.task)?;
        writeln!(f, "metric: {} = {:.6}", self.metric_name, self.metric)?;
        if let Some(b) = self.baseline {
            writeln!(f, "baseline: majority = {b:.6}")?;
        }
        writeln!(f, "train: {}", self.train_size)?;
        writeln!(f, "test: {}", self.test_size)?;
        writeln!(f, "seed: {}", self.seed)?;
        for (c, v) in &self.per_class {
            writeln!(f, "class {c}: {v:.6}")?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub seed: u64,
    pub train_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Graphs per encoder pass.
    pub batch_size: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            seed: 0,
            train_fraction: PROBE_TRAIN_FRACTION,
            epochs: PROBE_EPOCHS,
            lr: PROBE_LR,
            batch_size: 32,
        }
    }
}

/// Seeded train/test split of `0..n`.
fn split(n: usize, opts: &ProbeOptions) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(opts.seed, "probe", 0));
    let train = ((n as f64) * opts.train_fraction).round() as usize;
    if train == 0 || train >= n {
        return Err(Error::Config(format!(
            "{n} probe examples are too few for a {} train split",
            opts.train_fraction
        )));
    }
    let test = idx.split_off(train);
    Ok((idx, test))
}

/// Predicts masked atom types from the encoder's hidden states with
/// remasking disabled, so the masked positions keep their own states.
pub fn probe_masked_atoms_with(
    model: &Autoencoder,
    atoms: &AtomVocab,
    corpus: &[MolGraph],
    ratio: f64,
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (b, chunk) in corpus.chunks(opts.batch_size.max(1)).enumerate() {
        let batch = GraphBatch::new(chunk, atoms)?;
        let (_, plan) = mask_nodes(&batch, ratio, opts.seed.wrapping_add(b as u64), model.mask_id())?;
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &batch, &plan.masked, RemaskMode::None)?;
        let h = tape.value(enc.hidden);
        for &i in &plan.masked {
            feats.push(h.row(i).to_owned());
            labels.push(batch.atom_ids[i]);
        }
    }
    let x = ndarray::stack(Axis(0), &feats.iter().map(|r| r.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Model(e.to_string()))?;
    let (train, test) = split(labels.len(), opts)?;
    let pick = |ix: &[usize]| (x.select(Axis(0), ix), ix.iter().map(|&i| labels[i]).collect::<Vec<_>>());
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    let classes = atoms.size();
    let clf = LinearClassifier::fit(&xtr, &ytr, classes, opts.epochs, opts.lr)?;
    let pred = clf.predict(&xte);
    let correct = pred.iter().zip(&yte).filter(|(p, y)| p == y).count();

    let mut freq = vec![0usize; classes];
    for &y in &ytr {
        freq[y] += 1;
    }
    let majority = (0..classes).max_by_key(|&c| (freq[c], std::cmp::Reverse(c))).unwrap_or(0);
    let baseline = yte.iter().filter(|&&y| y == majority).count() as f64 / yte.len() as f64;

    let mut per_class = Vec::new();
    for c in 0..classes {
        let total = yte.iter().filter(|&&y| y == c).count();
        if total > 0 {
            let hit = pred.iter().zip(&yte).filter(|(p, y)| **y == c && **p == c).count();
            per_class.push((class_name(atoms, c), hit as f64 / total as f64));
        }
    }
    Ok(ProbeReport {
        task: ProbeTask::MaskedAtomType,
        metric_name: "accuracy",
        metric: correct as f64 / yte.len() as f64,
        baseline: Some(baseline),
        per_class,
        train_size: train.len(),
        test_size: test.len(),
        seed: opts.seed,
        notes: vec![format!("mask ratio {ratio}; remasking disabled")],
    })
}

fn class_name(atoms: &AtomVocab, c: usize) -> String {
    atoms
        .atoms()
        .get(c)
        .map_or_else(|| "unk".to_string(), |z| format!("Z={z}"))
}

pub fn probe_masked_atoms(ckpt: &Checkpoint, corpus: &[MolGraph], ratio: f64, opts: &ProbeOptions) -> Result<ProbeReport> {
    let model = Autoencoder::from_checkpoint(ckpt)?;
    probe_masked_atoms_with(&model, &ckpt.atoms()?, corpus, ratio, opts)
}

/// Mean-pooled, unmasked encoder output per molecule.
pub fn pooled_representations(model: &Autoencoder, atoms: &AtomVocab, corpus: &[MolGraph], batch_size: usize) -> Result<Mat> {
    let mut out = Array2::zeros((corpus.len(), model.cfg.dim));
    let mut row = 0;
    for chunk in corpus.chunks(batch_size.max(1)) {
        let batch = GraphBatch::new(chunk, atoms)?;
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &batch, &[], RemaskMode::None)?;
        let h = tape.value(enc.hidden);
        for k in 0..batch.num_graphs() {
            let rows = h.slice(ndarray::s![batch.nodes_of(k), ..]);
            out.row_mut(row).assign(&rows.mean_axis(Axis(0)).expect("graphs are nonempty"));
            row += 1;
        }
    }
    Ok(out)
}

/// Per-pattern presence labels, one column per pattern.
pub fn fg_labels(corpus: &[MolGraph], patterns: &[Pattern]) -> Result<Vec<Vec<bool>>> {
    corpus
        .iter()
        .map(|g| {
            patterns
                .iter()
                .map(|p| Ok(!match_pattern(g, p)?.is_empty()))
                .collect()
        })
        .collect()
}

/// Per-pattern linear classifiers on given representations, scored by
/// macro area-under-ROC on the test split. Patterns absent from the corpus,
/// or with a single-class test split, are left out with a note.
pub fn probe_fg_reps(reps: &Mat, labels: &[Vec<bool>], patterns: &[Pattern], opts: &ProbeOptions) -> Result<ProbeReport> {
    if patterns.is_empty() {
        return Err(Error::Config("the FG probe needs at least one pattern".into()));
    }
    let (train, test) = split(reps.nrows(), opts)?;
    let xtr = reps.select(Axis(0), &train);
    let xte = reps.select(Axis(0), &test);
    let mut notes = vec!["labels come from the bundled pattern library".to_string()];
    let mut per_class = Vec::new();
    for (j, p) in patterns.iter().enumerate() {
        let col: Vec<bool> = labels.iter().map(|l| l[j]).collect();
        if !col.iter().any(|&l| l) {
            log::warn!("pattern '{}' never occurs in the corpus; excluded", p.name);
            notes.push(format!("pattern '{}' absent from the corpus; excluded", p.name));
            continue;
        }
        let ytr: Vec<usize> = train.iter().map(|&i| col[i] as usize).collect();
        let yte: Vec<bool> = test.iter().map(|&i| col[i]).collect();
        let clf = LinearClassifier::fit(&xtr, &ytr, 2, opts.epochs, opts.lr)?;
        let scores: Vec<f64> = clf.logits(&xte).rows().into_iter().map(|r| r[1] - r[0]).collect();
        match roc_auc(&scores, &yte) {
            Some(auc) => per_class.push((p.name.clone(), auc)),
            None => notes.push(format!("pattern '{}' has one class in the test split; excluded", p.name)),
        }
    }
    if per_class.is_empty() {
        return Err(Error::Config("no pattern has both classes in the test split".into()));
    }
    let metric = per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64;
    Ok(ProbeReport {
        task: ProbeTask::FgPresence,
        metric_name: "roc_auc",
        metric,
        baseline: None,
        per_class,
        train_size: train.len(),
        test_size: test.len(),
        seed: opts.seed,
        notes,
    })
}

pub fn probe_fg(ckpt: &Checkpoint, corpus: &[MolGraph], patterns: &[Pattern], opts: &ProbeOptions) -> Result<ProbeReport> {
    let model = Autoencoder::from_checkpoint(ckpt)?;
    let reps = pooled_representations(&model, &ckpt.atoms()?, corpus, opts.batch_size)?;
    probe_fg_reps(&reps, &fg_labels(corpus, patterns)?, patterns, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fragment::default_patterns;
    use crate::molgraph::parse_smiles;

    #[test]
    fn census_examples() {
        let c = subtree_census(&[parse_smiles("CO").unwrap()]);
        assert_eq!(c.subtrees.0, vec![("C:O".to_string(), 1), ("O:C".to_string(), 1)]);
        let c = subtree_census(&[parse_smiles("c1ccccc1").unwrap()]);
        assert_eq!(c.subtrees.0, vec![("c:cc".to_string(), 6)]);
        assert_eq!(c.atoms.0, vec![("c".to_string(), 6)]);
        let csv = c.subtrees.to_csv();
        assert_eq!(csv, "key,count,fraction\nc:cc,6,1.000000\n# types=1,total=6\n");
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(roc_auc(&[1.0; 4], &[false, true, true, false]), Some(0.5));
        assert_eq!(roc_auc(&[1.0, 2.0], &[true, true]), None);
    }

    #[test]
    fn separable_reps_are_learned() {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| if j == i % 2 { 2.0 + (i as f64) * 0.01 } else { 0.1 * j as f64 });
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let clf = LinearClassifier::fit(&x, &y, 2, 200, PROBE_LR).unwrap();
        assert_eq!(clf.predict(&x), y);
    }

    #[test]
    fn constant_reps_give_chance_auc() {
        let corpus: Vec<MolGraph> = ["CO", "CC", "CCO", "CCC", "OCCO", "CCCC", "CO", "CC", "CCO", "CCN"]
            .iter()
            .map(|s| parse_smiles(s).unwrap())
            .collect();
        let pats = default_patterns();
        let hydroxyl: Vec<Pattern> = pats.into_iter().filter(|p| p.name == "hydroxyl").collect();
        assert_eq!(hydroxyl.len(), 1);
        let labels = fg_labels(&corpus, &hydroxyl).unwrap();
        assert!(labels[0][0]);
        let reps = Mat::from_elem((corpus.len(), 4), 3.0);
        let opts = ProbeOptions {
            train_fraction: 0.6,
            epochs: 50,
            ..ProbeOptions::default()
        };
        let seeds_with_both = (0..20).find_map(|s| {
            probe_fg_reps(&reps, &labels, &hydroxyl, &ProbeOptions { seed: s, ..opts }).ok()
        });
        let report = seeds_with_both.unwrap();
        assert_eq!(report.metric, 0.5);
    }
}
