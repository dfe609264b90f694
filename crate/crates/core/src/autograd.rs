//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied during a forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients for
//! every node. Trainable tensors live in a [`ParamStore`]; binding one onto a
//! tape with [`Tape::param`] makes its gradient retrievable by [`ParamId`].
//!
//! Everything is a 2-D matrix. Column vectors are `n x 1`, scalars are `1 x 1`.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use crate::sparse::Csr;

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A sparse operator together with its transpose, so that the backward pass of
/// a sparse product is another sparse product.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    pub forward: Csr,
    pub adjoint: Csr,
}

impl SparseOperator {
    pub fn new(forward: Csr) -> Arc<Self> {
        let adjoint = forward.transpose();
        Arc::new(Self { forward, adjoint })
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Var),
    RowDot(Var, Var),
    SafeDiv(Var, Var, f64),
    Spmm(Arc<SparseOperator>, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Gather(Var, Arc<[usize]>),
    RepeatRow(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var, f64),
    LogSumExpRows(Var),
    Diag(Var),
    Softplus(Var),
    Mean(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn softmax_row_inplace(row: &mut ndarray::ArrayViewMut1<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    row.mapv_inplace(|x| {
        let e = (x - max).exp();
        total += e;
        e
    });
    row.mapv_inplace(|x| x / total);
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the value computed for `v`.
    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    /// A constant input. Gradients flowing into it are computed but never used.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bind a trainable tensor onto the tape.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&*self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) + &*self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `a` is `n x m`, `row` is `1 x m`; the row is broadcast over all rows of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let row = self.value(row);
            assert_eq!(row.nrows(), 1, "add_row expects a 1 x m operand");
            &*self.value(a) + &row.row(0)
        };
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) - &*self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) * &*self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = &*self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    /// Multiply row `i` of `a` by `c[i, 0]`.
    pub fn row_scale(&self, a: Var, c: Var) -> Var {
        let value = {
            let a = self.value(a);
            let c = self.value(c);
            assert_eq!(c.dim(), (a.nrows(), 1), "row_scale expects an n x 1 factor");
            let mut out = a.clone();
            Zip::from(out.rows_mut())
                .and(c.column(0))
                .for_each(|mut row, &f| row *= f);
            out
        };
        self.push(value, Op::RowScale(a, c))
    }

    /// Per-row inner product, `n x 1`.
    pub fn row_dot(&self, a: Var, b: Var) -> Var {
        let value = {
            let a = self.value(a);
            let b = self.value(b);
            assert_eq!(a.dim(), b.dim(), "row_dot shape mismatch");
            let dots = Zip::from(a.rows())
                .and(b.rows())
                .map_collect(|x, y| x.dot(&y));
            dots.insert_axis(Axis(1))
        };
        self.push(value, Op::RowDot(a, b))
    }

    /// Elementwise `a / b`, yielding `0` wherever `b < eps`.
    pub fn safe_div(&self, a: Var, b: Var, eps: f64) -> Var {
        let value = {
            let a = self.value(a);
            let b = self.value(b);
            Zip::from(&*a)
                .and(&*b)
                .map_collect(|&x, &y| if y < eps { 0.0 } else { x / y })
        };
        self.push(value, Op::SafeDiv(a, b, eps))
    }

    /// Sparse-dense product `op.forward * x`.
    pub fn spmm(&self, op: &Arc<SparseOperator>, x: Var) -> Var {
        let value = op.forward.matmul(&self.value(x).view());
        self.push(value, Op::Spmm(Arc::clone(op), x))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = values.first().map(|v| v.nrows()).unwrap_or(0);
            let width: usize = values.iter().map(|v| v.ncols()).sum();
            let mut out = Matrix::zeros((rows, width));
            let mut offset = 0;
            for v in &values {
                assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
                out.slice_mut(s![.., offset..offset + v.ncols()]).assign(&**v);
                offset += v.ncols();
            }
            out
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    /// Rows of `a` selected by `index` (repeats allowed).
    pub fn gather(&self, a: Var, index: Arc<[usize]>) -> Var {
        let value = self.value(a).select(Axis(0), &index);
        self.push(value, Op::Gather(a, index))
    }

    /// Tile a `1 x m` row into `n x m`.
    pub fn repeat_row(&self, row: Var, n: usize) -> Var {
        let value = {
            let row = self.value(row);
            assert_eq!(row.nrows(), 1, "repeat_row expects a 1 x m operand");
            row.broadcast((n, row.ncols())).unwrap().to_owned()
        };
        self.push(value, Op::RepeatRow(row))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let mut out = self.value(a).clone();
            for mut row in out.rows_mut() {
                softmax_row_inplace(&mut row);
            }
            out
        };
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Scale each row to unit L2 norm; the norm is floored at `eps`.
    pub fn normalize_rows(&self, a: Var, eps: f64) -> Var {
        let value = {
            let mut out = self.value(a).clone();
            for mut row in out.rows_mut() {
                let norm = row.dot(&row).sqrt().max(eps);
                row /= norm;
            }
            out
        };
        self.push(value, Op::NormalizeRows(a, eps))
    }

    /// Stable `log(sum(exp(row)))` per row, `n x 1`.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let value = {
            let a = self.value(a);
            let lse = a.map_axis(Axis(1), |row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
            });
            lse.insert_axis(Axis(1))
        };
        self.push(value, Op::LogSumExpRows(a))
    }

    /// Diagonal of a square matrix as `n x 1`.
    pub fn diag(&self, a: Var) -> Var {
        let value = {
            let a = self.value(a);
            assert_eq!(a.nrows(), a.ncols(), "diag expects a square operand");
            a.diag().to_owned().insert_axis(Axis(1))
        };
        self.push(value, Op::Diag(a))
    }

    /// Elementwise `ln(1 + e^x)`, overflow-free.
    pub fn softplus(&self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    /// Mean of all entries as a `1 x 1` scalar. An empty input has mean 0.
    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let a = self.value(a);
            let m = if a.is_empty() { 0.0 } else { a.sum() / a.len() as f64 };
            Matrix::from_elem((1, 1), m)
        };
        self.push(value, Op::Mean(a))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::RowScale(a, c) => {
                    let av = val(*a);
                    let cv = val(*c);
                    let gc = Zip::from(g.rows())
                        .and(av.rows())
                        .map_collect(|x, y| x.dot(&y))
                        .insert_axis(Axis(1));
                    let mut ga = g;
                    Zip::from(ga.rows_mut())
                        .and(cv.column(0))
                        .for_each(|mut row, &f| row *= f);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *c, gc);
                }
                Op::RowDot(a, b) => {
                    let mut ga = val(*b).clone();
                    let mut gb = val(*a).clone();
                    Zip::from(ga.rows_mut())
                        .and(gb.rows_mut())
                        .and(g.column(0))
                        .for_each(|mut x, mut y, &f| {
                            x *= f;
                            y *= f;
                        });
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::SafeDiv(a, b, eps) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let ga = Zip::from(&g)
                        .and(bv)
                        .map_collect(|&g, &y| if y < *eps { 0.0 } else { g / y });
                    let gb = Zip::from(&g).and(av).and(bv).map_collect(|&g, &x, &y| {
                        if y < *eps {
                            0.0
                        } else {
                            -g * x / (y * y)
                        }
                    });
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Spmm(op, x) => acc(&mut grads, *x, op.adjoint.matmul(&g.view())),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Matrix::zeros(val(*a).dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, index) => {
                    let mut ga = Matrix::zeros(val(*a).dim());
                    for (row, &src) in g.rows().into_iter().zip(index.iter()) {
                        let mut target = ga.row_mut(src);
                        target += &row;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RepeatRow(row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.dim());
                    Zip::from(ga.rows_mut())
                        .and(y.rows())
                        .and(g.rows())
                        .for_each(|mut out, y, g| {
                            let inner = y.dot(&g);
                            Zip::from(&mut out)
                                .and(&y)
                                .and(&g)
                                .for_each(|o, &yy, &gg| *o = yy * (gg - inner));
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, eps) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(x.dim());
                    Zip::from(ga.rows_mut())
                        .and(x.rows())
                        .and(y.rows())
                        .and(g.rows())
                        .for_each(|mut out, x, y, g| {
                            let norm = x.dot(&x).sqrt();
                            if norm < *eps {
                                out.assign(&(&g / *eps));
                            } else {
                                let inner = y.dot(&g);
                                Zip::from(&mut out)
                                    .and(&y)
                                    .and(&g)
                                    .for_each(|o, &yy, &gg| *o = (gg - yy * inner) / norm);
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let x = val(*a);
                    let lse = &node.value;
                    let mut ga = x.clone();
                    Zip::from(ga.rows_mut())
                        .and(lse.column(0))
                        .and(g.column(0))
                        .for_each(|mut row, &l, &gg| row.mapv_inplace(|v| (v - l).exp() * gg));
                    acc(&mut grads, *a, ga);
                }
                Op::Diag(a) => {
                    let n = val(*a).nrows();
                    let mut ga = Matrix::zeros((n, n));
                    for i in 0..n {
                        ga[[i, i]] = g[[i, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = Zip::from(&g)
                        .and(val(*a))
                        .map_collect(|&g, &x| g * sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let n = x.len().max(1) as f64;
                    acc(&mut grads, *a, Matrix::from_elem(x.dim(), g[[0, 0]] / n));
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` influenced the loss.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per bound parameter. A parameter bound more than once gets the
    /// sum of its bindings' gradients.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Option<Matrix>> {
        let mut out: Vec<Option<Matrix>> = vec![None; store.len()];
        for (id, var) in &self.params {
            if let Some(g) = self.of(*var) {
                match &mut out[id.0] {
                    Some(existing) => *existing += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Matrix,
    decay: bool,
}

/// Named trainable tensors. Registration order defines [`ParamId`]s.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "parameter {name} registered twice"
        );
        self.params.push(Param {
            name,
            value,
            decay: false,
        });
        ParamId(self.params.len() - 1)
    }

    /// Register a tensor subject to optimizer weight decay.
    pub fn register_decayed(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let id = self.register(name, value);
        self.params[id.0].decay = true;
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_decayed(&self, id: ParamId) -> bool {
        self.params[id.0].decay
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Xavier/Glorot uniform initialization for a `rows x cols` tensor, treating
/// `rows` as fan-out and `cols` as fan-in.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// First-order adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| Matrix::zeros(store.value(id).dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>]) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(grad) = &grads[id.0] else { continue };
            let decay = if store.is_decayed(id) {
                self.weight_decay
            } else {
                0.0
            };
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let p = store.value_mut(id);
            Zip::from(p).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                let g = g + decay * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}
