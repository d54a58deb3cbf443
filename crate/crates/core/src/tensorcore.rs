//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! A [`Tape`] records every operation as it runs. Leaves are either
//! constants or bindings of a [`Parameter`] held in a [`ParamStore`];
//! [`Tape::backward`] walks the record in reverse and accumulates adjoints
//! into the store. A tape is rebuilt for every step, and each tape can be
//! differentiated once.
//!
//! Every value is two-dimensional; a scalar is a `1 x 1` matrix. The only
//! broadcast is a `1 x d` row added to an `n x d` matrix ([`Tape::add_row`]).

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Guard added to variances in the normalization ops.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
}

/// Named trainable parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Model(format!("duplicate parameter name '{name}'")));
        }
        let grad = Mat::zeros(value.raw_dim());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Constant sparse matrix in coordinate form, used for message passing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMat {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMat {
    pub fn new(rows: usize, cols: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = entries.iter().find(|(r, c, _)| *r >= rows || *c >= cols) {
            return Err(shape_err("sparse", format!("entry ({r}, {c}) outside {rows}x{cols}")));
        }
        Ok(SparseMat {
            rows,
            cols,
            entries,
        })
    }

    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros((self.rows, self.cols));
        for &(r, c, v) in &self.entries {
            m[[r, c]] += v;
        }
        m
    }

    fn dot(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros((self.rows, x.ncols()));
        for &(r, c, v) in &self.entries {
            out.row_mut(r).scaled_add(v, &x.row(c));
        }
        out
    }

    fn t_dot(&self, g: &Mat) -> Mat {
        let mut out = Mat::zeros((self.cols, g.ncols()));
        for &(r, c, v) in &self.entries {
            out.row_mut(c).scaled_add(v, &g.row(r));
        }
        out
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Tensor, Tensor),
    SpMM(Rc<SparseMat>, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Transpose(Tensor),
    ConcatCols(Vec<Tensor>),
    ConcatRows(Vec<Tensor>),
    SelectRows(Tensor, Vec<usize>),
    OverwriteRows {
        base: Tensor,
        rows: Vec<usize>,
        src: Tensor,
    },
    RepeatRow(Tensor),
    Relu(Tensor),
    SoftmaxRows(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    SumRows(Tensor),
    MeanRows(Tensor),
    MaxRows(Tensor, Vec<usize>),
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Mse {
        pred: Tensor,
        target: Rc<Mat>,
    },
    CrossEntropy {
        logits: Tensor,
        ids: Vec<usize>,
        probs: Mat,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Adjoints from one backward pass, addressable by tensor.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> Option<&Mat> {
        self.adj.get(t.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    differentiated: bool,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Mat, op: Op) -> Result<Tensor> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Tensor(self.nodes.len() - 1))
    }

    pub fn value(&self, t: Tensor) -> &Mat {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.dim()
    }

    /// Scalar value of a `1 x 1` tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Result<Tensor> {
        self.push("constant", value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Tensor> {
        self.push("param", store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", va.dim(), vb.dim())));
        }
        let v = va.dot(vb);
        self.push("matmul", v, Op::MatMul(a, b))
    }

    /// Constant sparse matrix times `x`.
    pub fn spmm(&mut self, a: &Rc<SparseMat>, x: Tensor) -> Result<Tensor> {
        let vx = self.value(x);
        if a.cols != vx.nrows() {
            return Err(shape_err("spmm", format!("{}x{} x {:?}", a.rows, a.cols, vx.dim())));
        }
        let v = a.dot(vx);
        self.push("spmm", v, Op::SpMM(Rc::clone(a), x))
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        self.push("sub", v, Op::Sub(a, b))
    }

    /// `x + row` with a `1 x d` row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Tensor, row: Tensor) -> Result<Tensor> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != vx.ncols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", vx.dim(), vr.dim())));
        }
        let v = vx + vr;
        self.push("add_row", v, Op::AddRow(x, row))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Tensor, alpha: f64) -> Result<Tensor> {
        let v = self.value(x) * alpha;
        self.push("scale", v, Op::Scale(x, alpha))
    }

    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let v = self.value(x).t().to_owned();
        self.push("transpose", v, Op::Transpose(x))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs".into()));
        };
        let rows = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let cols = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(shape_err("concat_rows", "column counts differ".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()))
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&mut self, x: Tensor, rows: &[usize]) -> Result<Tensor> {
        let vx = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.nrows()) {
            return Err(shape_err(
                "select_rows",
                format!("row {bad} of a {}-row tensor", vx.nrows()),
            ));
        }
        let v = vx.select(Axis(0), rows);
        self.push("select_rows", v, Op::SelectRows(x, rows.to_vec()))
    }

    /// Copy of `base` with `base[rows[k]] = src[k]`; `rows` must be distinct.
    pub fn overwrite_rows(&mut self, base: Tensor, rows: &[usize], src: Tensor) -> Result<Tensor> {
        let (vb, vs) = (self.value(base), self.value(src));
        if vs.nrows() != rows.len() || vs.ncols() != vb.ncols() {
            return Err(shape_err(
                "overwrite_rows",
                format!("{} rows into {:?} from {:?}", rows.len(), vb.dim(), vs.dim()),
            ));
        }
        let mut seen = vec![false; vb.nrows()];
        for &r in rows {
            if r >= vb.nrows() || std::mem::replace(&mut seen[r], true) {
                return Err(shape_err("overwrite_rows", format!("bad or repeated row {r}")));
            }
        }
        let mut v = vb.clone();
        for (k, &r) in rows.iter().enumerate() {
            v.row_mut(r).assign(&vs.row(k));
        }
        self.push(
            "overwrite_rows",
            v,
            Op::OverwriteRows {
                base,
                rows: rows.to_vec(),
                src,
            },
        )
    }

    /// Stacks a `1 x d` row `count` times.
    pub fn repeat_row(&mut self, row: Tensor, count: usize) -> Result<Tensor> {
        let vr = self.value(row);
        if vr.nrows() != 1 {
            return Err(shape_err("repeat_row", format!("{:?} is not a row", vr.dim())));
        }
        let v = vr
            .broadcast((count, vr.ncols()))
            .expect("row broadcasts")
            .to_owned();
        self.push("repeat_row", v, Op::RepeatRow(row))
    }

    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push("relu", v, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|a| (a - m).exp());
            let s = row.sum();
            row.mapv_inplace(|a| a / s);
        }
        self.push("softmax_rows", v, Op::SoftmaxRows(x))
    }

    pub fn sum(&mut self, x: Tensor) -> Result<Tensor> {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        self.push("sum", v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Tensor) -> Result<Tensor> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let v = Mat::from_elem((1, 1), vx.sum() / vx.len() as f64);
        self.push("mean", v, Op::Mean(x))
    }

    /// Column sums, `1 x d`.
    pub fn sum_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let v = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push("sum_rows", v, Op::SumRows(x))
    }

    /// Column means, `1 x d`.
    pub fn mean_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let vx = self.value(x);
        if vx.nrows() == 0 {
            return Err(shape_err("mean_rows", "no rows".into()));
        }
        let v = vx.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        self.push("mean_rows", v, Op::MeanRows(x))
    }

    /// Column maxima, `1 x d`; the adjoint goes to the first maximal row.
    pub fn max_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let vx = self.value(x);
        if vx.nrows() == 0 {
            return Err(shape_err("max_rows", "no rows".into()));
        }
        let mut arg = vec![0; vx.ncols()];
        let mut v = Mat::zeros((1, vx.ncols()));
        for (c, col) in vx.columns().into_iter().enumerate() {
            let mut best = 0;
            for r in 1..col.len() {
                if col[r] > col[best] {
                    best = r;
                }
            }
            arg[c] = best;
            v[[0, c]] = col[best];
        }
        self.push("max_rows", v, Op::MaxRows(x, arg))
    }

    /// Per-column standardization over rows with a learned affine map
    /// (`gamma`, `beta` are `1 x d`).
    pub fn batch_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<Tensor> {
        let vx = self.value(x);
        let d = vx.ncols();
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) || vx.nrows() == 0 {
            return Err(shape_err(
                "batch_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.dim(), self.shape(gamma), self.shape(beta)),
            ));
        }
        let (xhat, inv_std) = standardize_cols(vx, NORM_EPS);
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            "batch_norm",
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Per-row standardization with a learned affine map.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<Tensor> {
        let vx = self.value(x);
        let d = vx.ncols();
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) || d == 0 {
            return Err(shape_err("layer_norm", format!("x {:?}", vx.dim())));
        }
        let (xt, inv_std) = standardize_cols(&vx.t().to_owned(), NORM_EPS);
        let xhat = xt.t().to_owned();
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean over all entries of the squared difference to a constant target.
    pub fn mse_loss(&mut self, pred: Tensor, target: &Mat) -> Result<Tensor> {
        let vp = self.value(pred);
        if vp.dim() != target.dim() {
            return Err(shape_err("mse_loss", format!("{:?} vs {:?}", vp.dim(), target.dim())));
        }
        if vp.is_empty() {
            return Err(shape_err("mse_loss", "no rows".into()));
        }
        let diff = vp - target;
        let v = Mat::from_elem((1, 1), diff.mapv(|a| a * a).sum() / diff.len() as f64);
        self.push(
            "mse_loss",
            v,
            Op::Mse {
                pred,
                target: Rc::new(target.clone()),
            },
        )
    }

    /// Mean over rows of the negative log-softmax at the true class.
    pub fn cross_entropy(&mut self, logits: Tensor, ids: &[usize]) -> Result<Tensor> {
        let vl = self.value(logits);
        let (m, k) = vl.dim();
        if m == 0 || ids.len() != m {
            return Err(shape_err("cross_entropy", format!("{m} rows, {} ids", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(shape_err("cross_entropy", format!("class {bad} of {k}")));
        }
        let mut probs = vl.clone();
        let mut total = 0.0;
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|a| (a - mx).exp()).sum::<f64>().ln();
            total += lse - row[ids[r]];
            row.mapv_inplace(|a| (a - lse).exp());
        }
        let v = Mat::from_elem((1, 1), total / m as f64);
        self.push(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits,
                ids: ids.to_vec(),
                probs,
            },
        )
    }

    /// Gathers embedding rows for `ids`; when `mask` is `Some((mask_id,
    /// positions))`, the ids at those positions are replaced by `mask_id`.
    pub fn embedding_lookup(
        &mut self,
        table: Tensor,
        ids: &[usize],
        mask: Option<(usize, &[usize])>,
    ) -> Result<Tensor> {
        let k = self.shape(table).0;
        let mut ids = ids.to_vec();
        if let Some((mask_id, positions)) = mask {
            if mask_id >= k {
                return Err(shape_err("embedding_lookup", format!("mask id {mask_id} of {k}")));
            }
            for &p in positions {
                let slot = ids.get_mut(p).ok_or_else(|| {
                    shape_err("embedding_lookup", format!("mask position {p} out of range"))
                })?;
                *slot = mask_id;
            }
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(shape_err("embedding_lookup", format!("id {bad} of {k}")));
        }
        self.select_rows(table, &ids)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Back-propagates from scalar `loss`, adding parameter gradients into
    /// `store`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Tensor, store: &mut ParamStore) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Tape(format!(
                "loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.differentiated = true;
        let mut adj: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(adj: &mut [Option<Mat>], t: Tensor, g: Mat) {
            match &mut adj[t.0] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].clone() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    p.grad += &g;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, g.dot(&vb.t()));
                    acc(&mut adj, *b, va.t().dot(&g));
                }
                Op::SpMM(a, x) => acc(&mut adj, *x, a.t_dot(&g)),
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, -g);
                }
                Op::AddRow(x, row) => {
                    acc(&mut adj, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut adj, *x, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(x, alpha) => acc(&mut adj, *x, g * *alpha),
                Op::Transpose(x) => acc(&mut adj, *x, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut adj, p, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut adj, p, g.slice(s![r..r + h, ..]).to_owned());
                        r += h;
                    }
                }
                Op::SelectRows(x, rows) => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::OverwriteRows { base, rows, src } => {
                    let mut gb = g.clone();
                    let gs = g.select(Axis(0), rows);
                    for &r in rows {
                        gb.row_mut(r).fill(0.0);
                    }
                    acc(&mut adj, *base, gb);
                    acc(&mut adj, *src, gs);
                }
                Op::RepeatRow(row) => {
                    acc(&mut adj, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Relu(x) => {
                    let mask = self.value(*x).mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut adj, *x, g * mask);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut adj, *x, y * &(&g - &dot));
                }
                Op::Sum(x) => {
                    let gx = Mat::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    acc(&mut adj, *x, gx);
                }
                Op::Mean(x) => {
                    let vx = self.value(*x);
                    let gx = Mat::from_elem(vx.raw_dim(), g[[0, 0]] / vx.len() as f64);
                    acc(&mut adj, *x, gx);
                }
                Op::SumRows(x) => {
                    let n = self.shape(*x).0;
                    let gx = g.broadcast((n, g.ncols())).unwrap().to_owned();
                    acc(&mut adj, *x, gx);
                }
                Op::MeanRows(x) => {
                    let n = self.shape(*x).0;
                    let gx = g.broadcast((n, g.ncols())).unwrap().to_owned() / n as f64;
                    acc(&mut adj, *x, gx);
                }
                Op::MaxRows(x, arg) => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    for (c, &r) in arg.iter().enumerate() {
                        gx[[r, c]] += g[[0, c]];
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let vg = self.value(*gamma);
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * vg;
                    let dx = standardize_backward(&dxhat, xhat, inv_std);
                    acc(&mut adj, *gamma, dgamma);
                    acc(&mut adj, *beta, dbeta);
                    acc(&mut adj, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let vg = self.value(*gamma);
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = (&g * vg).t().to_owned();
                    let dx = standardize_backward(&dxhat, &xhat.t().to_owned(), inv_std);
                    acc(&mut adj, *gamma, dgamma);
                    acc(&mut adj, *beta, dbeta);
                    acc(&mut adj, *x, dx.t().to_owned());
                }
                Op::Mse { pred, target } => {
                    let vp = self.value(*pred);
                    let scale = 2.0 * g[[0, 0]] / vp.len() as f64;
                    acc(&mut adj, *pred, (vp - &**target) * scale);
                }
                Op::CrossEntropy { logits, ids, probs } => {
                    let m = ids.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &id) in ids.iter().enumerate() {
                        gl[[r, id]] -= 1.0;
                    }
                    acc(&mut adj, *logits, gl * (g[[0, 0]] / m));
                }
            }
        }
        Ok(Gradients { adj })
    }
}

/// Column-wise `(x - mean) / sqrt(var + eps)` with population variance.
pub fn standardize_cols(x: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.ncols());
    for mut col in out.columns_mut() {
        let mu = col.sum() / n;
        let var = col.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        col.mapv_inplace(|a| (a - mu) * is);
        inv.push(is);
    }
    (out, inv)
}

fn standardize_backward(dxhat: &Mat, xhat: &Mat, inv_std: &[f64]) -> Mat {
    let n = xhat.nrows() as f64;
    let mut dx = Mat::zeros(xhat.raw_dim());
    for c in 0..xhat.ncols() {
        let dh = dxhat.column(c);
        let h = xhat.column(c);
        let sum_dh = dh.sum();
        let sum_dh_h = (&dh * &h).sum();
        let mut out = dx.column_mut(c);
        for r in 0..h.len() {
            out[r] = inv_std[c] / n * (n * dh[r] - sum_dh - h[r] * sum_dh_h);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let i3 = t.constant(Mat::eye(3)).unwrap();
        let m = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mt = t.constant(m.clone()).unwrap();
        let p = t.matmul(i3, mt).unwrap();
        assert_eq!(t.value(p), &m);

        let z = t.constant(array![[0.0, 0.0]]).unwrap();
        let s = t.softmax_rows(z).unwrap();
        assert_eq!(t.value(s), &array![[0.5, 0.5]]);

        let pred = t.constant(array![[0.0, 0.0]]).unwrap();
        let l = t.mse_loss(pred, &array![[1.0, 1.0]]).unwrap();
        assert_eq!(t.scalar(l), 1.0);

        for k in [2usize, 5, 11] {
            let logits = t.constant(Mat::zeros((3, k))).unwrap();
            let ce = t.cross_entropy(logits, &[0, k - 1, 1]).unwrap();
            assert!((t.scalar(ce) - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_examples() {
        let mut t = Tape::new();
        let table = t.constant(array![[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]]).unwrap();
        let e = t.embedding_lookup(table, &[1, 0, 1], None).unwrap();
        assert_eq!(t.value(e), &array![[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let e = t.embedding_lookup(table, &[1, 0, 1], Some((2, &[2]))).unwrap();
        assert_eq!(t.value(e).row(2).to_vec(), vec![9.0, 9.0]);
        assert!(t.embedding_lookup(table, &[3], None).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0], [3.0]]).unwrap();
        let g = t.constant(array![[2.0]]).unwrap();
        let b = t.constant(array![[1.0]]).unwrap();
        let y = t.batch_norm(x, g, b).unwrap();
        assert!(close(t.value(y), &array![[-1.0], [3.0]], 1e-5));
        let flat = t.constant(array![[4.0, 1.0], [4.0, 2.0]]).unwrap();
        let one = t.constant(array![[1.0, 1.0]]).unwrap();
        let zero = t.constant(array![[0.0, 0.0]]).unwrap();
        let y = t.batch_norm(flat, one, zero).unwrap();
        assert_eq!(t.value(y).column(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_basics() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[1.0, -2.0], [3.0, 0.5]]).unwrap();
        let u = store.add("unused", array![[1.0]]).unwrap();
        let mut t = Tape::new();
        let xt = t.param(&store, x).unwrap();
        let _ = t.param(&store, u).unwrap();
        let s = t.sum(xt).unwrap();
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(x), &Mat::ones((2, 2)));
        assert_eq!(store.grad(u), &Mat::zeros((1, 1)));
        assert!(t.backward(s, &mut store).is_err());
        assert!(store.add("x", Mat::zeros((1, 1))).is_err());
    }

    #[test]
    fn backward_scales_linearly() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.3, -0.2], [0.1, 0.4]]).unwrap();
        let grad = |store: &mut ParamStore, alpha: f64| {
            store.zero_grad();
            let mut t = Tape::new();
            let wt = t.param(store, w).unwrap();
            let h = t.relu(wt).unwrap();
            let sm = t.softmax_rows(h).unwrap();
            let l = t.sum(sm).unwrap();
            let l2 = t.mul(wt, wt).unwrap();
            let l2 = t.sum(l2).unwrap();
            let tot = t.add(l, l2).unwrap();
            let scaled = t.scale(tot, alpha).unwrap();
            t.backward(scaled, store).unwrap();
            store.grad(w).clone()
        };
        let g1 = grad(&mut store, 1.0);
        let g3 = grad(&mut store, -3.0);
        assert!(close(&(g1 * -3.0), &g3, 1e-12));
    }

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        let mut t = Tape::new();
        assert!(matches!(
            t.constant(array![[f64::NAN]]),
            Err(Error::NonFinite(_))
        ));
        let big = t.constant(array![[1e200]]).unwrap();
        assert!(matches!(t.mul(big, big), Err(Error::NonFinite(_))));
        let a = t.constant(Mat::zeros((2, 3))).unwrap();
        assert!(matches!(t.matmul(a, a), Err(Error::Shape { .. })));
        let m = t.mean(a).unwrap();
        let mut store = ParamStore::new();
        assert!(t.backward(a, &mut store).is_err());
        assert!(t.backward(m, &mut store).is_ok());
    }

    #[test]
    fn spmm_matches_dense() {
        let a = Rc::new(SparseMat::new(2, 3, vec![(0, 1, 2.0), (1, 2, -1.0), (0, 1, 1.0)]).unwrap());
        let mut t = Tape::new();
        let x = t.constant(array![[1.0], [2.0], [3.0]]).unwrap();
        let y = t.spmm(&a, x).unwrap();
        assert_eq!(t.value(y), &a.to_dense().dot(&array![[1.0], [2.0], [3.0]]));
        assert!(SparseMat::new(1, 1, vec![(1, 0, 1.0)]).is_err());
    }
}
