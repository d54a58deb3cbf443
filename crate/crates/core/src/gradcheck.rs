//! Central finite-difference checks for tape gradients.
//!
//! The numerical side only evaluates forward passes, so it stays independent
//! of every backward rule it is used to validate.

use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::molgraph::{parse_smiles, MolGraph};
use crate::nets::{Autoencoder, GraphBatch, ModelConfig, PoolMode, Preset, RemaskMode};
use crate::pretrain::{mask_nodes, reconstruction_loss, TokenSet};
use crate::tensorcore::{Mat, ParamStore, SparseMat, Tape, Tensor};
use crate::tokenize::AtomVocab;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 30;

/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients from
/// inflating the ratio.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// A scalar function of every parameter in a store.
pub type Objective<'a> = dyn Fn(&mut Tape, &ParamStore) -> Result<Tensor> + 'a;

/// Largest relative error over all parameter entries between the tape
/// gradient and a central difference with step `h`.
pub fn check_objective(store: &mut ParamStore, f: &Objective<'_>, h: f64) -> Result<f64> {
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Mat> = store.iter().map(|(_, p)| p.grad.clone()).collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.scalar(loss))
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for (k, id) in ids.into_iter().enumerate() {
        let len = store.value(id).len();
        for e in 0..len {
            let orig = store.value(id).as_slice().expect("standard layout")[e];
            set_entry(store, id, e, orig + h);
            let up = eval(store)?;
            set_entry(store, id, e, orig - h);
            let down = eval(store)?;
            set_entry(store, id, e, orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].as_slice().expect("standard layout")[e];
            worst = worst.max(rel_error(a, numeric));
        }
    }
    Ok(worst)
}

fn set_entry(store: &mut ParamStore, id: crate::tensorcore::ParamId, e: usize, v: f64) {
    store.get_mut(id).value.as_slice_mut().expect("standard layout")[e] = v;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero, so ReLU
/// and max kinks are never within a finite-difference step.
fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, gap: f64) -> Mat {
    Array2::from_shape_fn((r, c), |_| {
        let v: f64 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces a matrix-valued op to a scalar through a fixed random projection.
fn project(tape: &mut Tape, out: Tensor, proj: &Mat) -> Result<Tensor> {
    let p = tape.constant(proj.clone())?;
    let prod = tape.mul(out, p)?;
    tape.sum(prod)
}

type Builder = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>>;

struct Case {
    inputs: Vec<Mat>,
    build: Builder,
}

type CaseGen = fn(&mut ChaCha8Rng) -> Case;

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(2..6), rng.gen_range(1..5))
}

fn unary(rng: &mut ChaCha8Rng, gap: f64, f: fn(&mut Tape, Tensor) -> Result<Tensor>) -> Case {
    let (r, c) = dims(rng);
    Case {
        inputs: vec![rand_mat(rng, r, c, gap)],
        build: Box::new(move |t, x| f(t, x[0])),
    }
}

fn op_cases() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("matmul", |rng| {
            let (r, k) = dims(rng);
            let c = rng.gen_range(1..5);
            Case {
                inputs: vec![rand_mat(rng, r, k, 0.0), rand_mat(rng, k, c, 0.0)],
                build: Box::new(|t, x| t.matmul(x[0], x[1])),
            }
        }),
        ("spmm", |rng| {
            let (r, c) = dims(rng);
            let entries: Vec<_> = (0..r * 2)
                .map(|_| (rng.gen_range(0..r), rng.gen_range(0..r), rng.gen_range(-1.0..1.0)))
                .collect();
            let a = Rc::new(SparseMat::new(r, r, entries).expect("in range"));
            Case {
                inputs: vec![rand_mat(rng, r, c, 0.0)],
                build: Box::new(move |t, x| t.spmm(&a, x[0])),
            }
        }),
        ("add", |rng| binary(rng, |t, a, b| t.add(a, b))),
        ("sub", |rng| binary(rng, |t, a, b| t.sub(a, b))),
        ("mul", |rng| binary(rng, |t, a, b| t.mul(a, b))),
        ("add_row", |rng| {
            let (r, c) = dims(rng);
            Case {
                inputs: vec![rand_mat(rng, r, c, 0.0), rand_mat(rng, 1, c, 0.0)],
                build: Box::new(|t, x| t.add_row(x[0], x[1])),
            }
        }),
        ("scale", |rng| {
            let alpha = rng.gen_range(-2.0..2.0);
            let (r, c) = dims(rng);
            Case {
                inputs: vec![rand_mat(rng, r, c, 0.0)],
                build: Box::new(move |t, x| t.scale(x[0], alpha)),
            }
        }),
        ("transpose", |rng| unary(rng, 0.0, |t, x| t.transpose(x))),
        ("concat_cols", |rng| {
            let r = rng.gen_range(1..5);
            let (a, b) = (rng.gen_range(1..4), rng.gen_range(1..4));
            Case {
                inputs: vec![rand_mat(rng, r, a, 0.0), rand_mat(rng, r, b, 0.0)],
                build: Box::new(|t, x| t.concat_cols(&[x[0], x[1], x[0]])),
            }
        }),
        ("concat_rows", |rng| {
            let c = rng.gen_range(1..5);
            let (a, b) = (rng.gen_range(1..4), rng.gen_range(1..4));
            Case {
                inputs: vec![rand_mat(rng, a, c, 0.0), rand_mat(rng, b, c, 0.0)],
                build: Box::new(|t, x| t.concat_rows(&[x[1], x[0]])),
            }
        }),
        ("select_rows", |rng| {
            let (r, c) = dims(rng);
            let rows: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..r)).collect();
            Case {
                inputs: vec![rand_mat(rng, r, c, 0.0)],
                build: Box::new(move |t, x| t.select_rows(x[0], &rows)),
            }
        }),
        ("overwrite_rows", |rng| {
            let (r, c) = dims(rng);
            let mut rows: Vec<usize> = (0..r).filter(|_| rng.gen_bool(0.5)).collect();
            if rows.is_empty() {
                rows.push(0);
            }
            let m = rows.len();
            Case {
                inputs: vec![rand_mat(rng, r, c, 0.0), rand_mat(rng, m, c, 0.0)],
                build: Box::new(move |t, x| t.overwrite_rows(x[0], &rows, x[1])),
            }
        }),
        ("repeat_row", |rng| {
            let c = rng.gen_range(1..5);
            let count = rng.gen_range(1..5);
            Case {
                inputs: vec![rand_mat(rng, 1, c, 0.0)],
                build: Box::new(move |t, x| t.repeat_row(x[0], count)),
            }
        }),
        ("relu", |rng| unary(rng, 0.05, |t, x| t.relu(x))),
        ("softmax_rows", |rng| unary(rng, 0.0, |t, x| t.softmax_rows(x))),
        ("sum", |rng| unary(rng, 0.0, |t, x| t.sum(x))),
        ("mean", |rng| unary(rng, 0.0, |t, x| t.mean(x))),
        ("sum_rows", |rng| unary(rng, 0.0, |t, x| t.sum_rows(x))),
        ("mean_rows", |rng| unary(rng, 0.0, |t, x| t.mean_rows(x))),
        ("max_rows", |rng| {
            // distinct entries per column, separated by much more than a step
            let (r, c) = dims(rng);
            let mut m = Mat::zeros((r, c));
            for j in 0..c {
                let mut vals: Vec<f64> = (0..r).map(|i| i as f64 * 0.1).collect();
                for i in (1..r).rev() {
                    vals.swap(i, rng.gen_range(0..=i));
                }
                for i in 0..r {
                    m[[i, j]] = vals[i] + rng.gen_range(0.0..0.01);
                }
            }
            Case {
                inputs: vec![m],
                build: Box::new(|t, x| t.max_rows(x[0])),
            }
        }),
        ("batch_norm", |rng| norm_case(rng, true)),
        ("layer_norm", |rng| norm_case(rng, false)),
        ("mse_loss", |rng| {
            let (r, c) = dims(rng);
            let target = rand_mat(rng, r, c, 0.0);
            Case {
                inputs: vec![rand_mat(rng, r, c, 0.0)],
                build: Box::new(move |t, x| t.mse_loss(x[0], &target)),
            }
        }),
        ("cross_entropy", |rng| {
            let (r, c) = dims(rng);
            let k = c + 1;
            let ids: Vec<usize> = (0..r).map(|_| rng.gen_range(0..k)).collect();
            Case {
                inputs: vec![rand_mat(rng, r, k, 0.0)],
                build: Box::new(move |t, x| t.cross_entropy(x[0], &ids)),
            }
        }),
        ("embedding_lookup", |rng| {
            let (k, c) = dims(rng);
            let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..k)).collect();
            let positions: Vec<usize> = (0..ids.len()).filter(|_| rng.gen_bool(0.3)).collect();
            Case {
                inputs: vec![rand_mat(rng, k + 1, c, 0.0)],
                build: Box::new(move |t, x| t.embedding_lookup(x[0], &ids, Some((k, &positions)))),
            }
        }),
        ("linear", |rng| {
            let (r, k) = dims(rng);
            let c = rng.gen_range(1..5);
            Case {
                inputs: vec![
                    rand_mat(rng, r, k, 0.0),
                    rand_mat(rng, k, c, 0.0),
                    rand_mat(rng, 1, c, 0.0),
                ],
                build: Box::new(|t, x| t.linear(x[0], x[1], x[2])),
            }
        }),
    ]
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, Tensor, Tensor) -> Result<Tensor>) -> Case {
    let (r, c) = dims(rng);
    Case {
        inputs: vec![rand_mat(rng, r, c, 0.0), rand_mat(rng, r, c, 0.0)],
        build: Box::new(move |t, x| f(t, x[0], x[1])),
    }
}

fn norm_case(rng: &mut ChaCha8Rng, batch: bool) -> Case {
    let (r, c) = (rng.gen_range(2..6), rng.gen_range(2..5));
    Case {
        inputs: vec![
            rand_mat(rng, r, c, 0.0),
            rand_mat(rng, 1, c, 0.0),
            rand_mat(rng, 1, c, 0.0),
        ],
        build: Box::new(move |t, x| {
            if batch {
                t.batch_norm(x[0], x[1], x[2])
            } else {
                t.layer_norm(x[0], x[1], x[2])
            }
        }),
    }
}

/// Names of the primitives covered by [`check_ops`].
pub fn op_names() -> Vec<&'static str> {
    op_cases().into_iter().map(|(n, _)| n).collect()
}

/// Checks every differentiable primitive on `instances` random inputs each.
pub fn check_ops(seed: u64, instances: usize, h: f64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for (name, gen) in op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let case = gen(&mut rng);
            let mut store = ParamStore::new();
            let ids: Vec<_> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(i, m)| store.add(format!("x{i}"), m.clone()))
                .collect::<Result<_>>()?;
            // Projection shape is only known after one forward pass.
            let probe = {
                let mut tape = Tape::new();
                let xs: Vec<_> = ids.iter().map(|&id| tape.param(&store, id)).collect::<Result<_>>()?;
                let out = (case.build)(&mut tape, &xs)?;
                tape.shape(out)
            };
            let proj = rand_mat(&mut rng, probe.0, probe.1, 0.1);
            let build = &case.build;
            let f = |tape: &mut Tape, store: &ParamStore| -> Result<Tensor> {
                let xs: Vec<_> = ids.iter().map(|&id| tape.param(store, id)).collect::<Result<_>>()?;
                let out = build(tape, &xs)?;
                project(tape, out, &proj)
            };
            worst = worst.max(check_objective(&mut store, &f, h)?);
        }
        reports.push(CheckReport {
            name: name.to_string(),
            instances,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

pub const PIPELINE_TOLERANCE: f64 = 1e-3;

const PIPELINE_SMILES: [&str; 8] = [
    "CCO", "c1ccccc1O", "CC(=O)N", "C1CC1C#N", "OCC(=O)O", "CN(C)C=O", "c1ccncc1", "CCCl",
];

/// Full encode -> remask -> decode -> loss pipeline for each remask mode,
/// with both a cross-entropy (discrete targets) and an MSE (continuous
/// targets) head, on random small batches and model dims up to 8.
pub fn check_pipeline(seed: u64, instances: usize, h: f64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for (remask, continuous) in [
        (RemaskMode::V1, false),
        (RemaskMode::V1, true),
        (RemaskMode::V2, false),
        (RemaskMode::V2, true),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let count = rng.gen_range(1..4);
            let graphs: Vec<MolGraph> = (0..count)
                .map(|_| parse_smiles(PIPELINE_SMILES[rng.gen_range(0..PIPELINE_SMILES.len())]))
                .collect::<Result<_>>()?;
            let atoms = AtomVocab::from_graphs(&graphs);
            let batch = GraphBatch::new(&graphs, &atoms)?;
            let dim = rng.gen_range(2..=8);
            let out_dim = if continuous { rng.gen_range(1..=4) } else { atoms.size() };
            let cfg = ModelConfig {
                num_atom_ids: atoms.size(),
                dim,
                encoder: if inst % 2 == 0 { Preset::GtsTiny } else { Preset::GtsSmall },
                decoder: Preset::GtsTiny,
                out_dim,
                edge_features: true,
                remask,
            };
            let mut model = Autoencoder::new(cfg, &mut rng)?;
            let (_, plan) = mask_nodes(&batch, 0.35, rng.gen(), model.mask_id())?;
            let targets = if continuous {
                TokenSet::Continuous(rand_mat(&mut rng, batch.num_nodes(), out_dim, 0.0))
            } else {
                TokenSet::Discrete {
                    ids: batch.atom_ids.clone(),
                    classes: atoms.size(),
                }
            };
            let shell = model.clone();
            let f = |tape: &mut Tape, store: &ParamStore| -> Result<Tensor> {
                let mut m = shell.clone();
                m.store = store.clone();
                let (_, z) = m.forward(tape, &batch, &plan.masked)?;
                reconstruction_loss(tape, z, &targets, &plan, PoolMode::Mean)
            };
            worst = worst.max(check_objective(&mut model.store, &f, h)?);
        }
        reports.push(CheckReport {
            name: format!("pipeline/{remask}/{}", if continuous { "mse" } else { "ce" }),
            instances,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(2.0, 1.0), 0.5);
        assert!(rel_error(1e-9, 0.0) < 1e-5);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::from_elem((1, 1), 0.7)).unwrap();
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, id)?;
            // x * const(x): the value is x^2 but only half the gradient flows
            let copy = t.constant(s.value(id).clone())?;
            let y = t.mul(x, copy)?;
            t.sum(y)
        };
        let err = check_objective(&mut store, &f, DEFAULT_STEP).unwrap();
        assert!(err > 0.4, "{err}");
    }

    #[test]
    fn all_ops_pass() {
        for r in check_ops(7, 5, DEFAULT_STEP).unwrap() {
            assert!(r.passed(DEFAULT_TOLERANCE), "{} {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn pipeline_passes() {
        for r in check_pipeline(3, 2, DEFAULT_STEP).unwrap() {
            assert!(r.passed(PIPELINE_TOLERANCE), "{} {}", r.name, r.max_rel_error);
        }
    }
}
