//! Reverse-mode gradient accumulation over dense matrix operations.
//!
//! Objectives that need gradients with respect to many structured
//! parameters (FITC marginal likelihood, deep-GP evidence bound) record
//! their forward computation on a tape of matrix ops and run a single
//! reverse sweep. Everything is `f64` and shapes are two-dimensional;
//! scalars are 1x1 and column vectors n x 1.

use ndarray::prelude::*;

use crate::error::Result;
use crate::linalg::{self, SymMatrix};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    ClampMin(Var, f64),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    Diag(Var),
    DiagMat(Var),
    TrilStrict(Var),
    /// Cholesky of a symmetric matrix plus escalating jitter.
    Chol(Var),
    /// `L^{-1} B` with `L` lower triangular.
    TriSolveLower(Var, Var),
    ConcatCols(Vec<Var>),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Gradients of a scalar output with respect to every tape node.
pub(crate) struct Grads {
    adjoints: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient for `var`, zeros if the output does not depend on it.
    pub fn get(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        match &self.adjoints[var.0] {
            Some(a) => a.clone(),
            None => Array2::zeros(shape),
        }
    }
}

/// Recording tape. Build the computation through the methods below, then
/// call [`Tape::backward`] on a 1x1 output node.
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

fn bcast_dim(a: usize, b: usize) -> usize {
    debug_assert!(a == b || a == 1 || b == 1, "incompatible broadcast {a} vs {b}");
    a.max(b)
}

fn bcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    (bcast_dim(a.0, b.0), bcast_dim(a.1, b.1))
}

fn expand(x: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if x.dim() == shape {
        x.clone()
    } else {
        x.broadcast(shape)
            .expect("broadcast-compatible shapes")
            .to_owned()
    }
}

/// Sums `adj` over the axes that were broadcast to produce it, recovering
/// an adjoint of shape `shape`.
fn reduce_to(adj: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut out = adj.clone();
    if shape.0 == 1 && out.nrows() > 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() > 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn tril_inclusive(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..a.ncols() {
            a[[i, j]] = 0.0;
        }
    }
    a
}

/// Lower triangle with the diagonal halved; upper triangle zeroed.
fn phi_lower_half_diag(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    for i in 0..n {
        a[[i, i]] *= 0.5;
        for j in (i + 1)..n {
            a[[i, j]] = 0.0;
        }
    }
    a
}

fn solve_lower(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    use ndarray_linalg::{Diag, SolveTriangular, UPLO};
    l.solve_triangular(UPLO::Lower, Diag::NonUnit, b)
        .expect("triangular solve")
}

fn solve_lower_t(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    use ndarray_linalg::{Diag, SolveTriangular, UPLO};
    l.t()
        .to_owned()
        .solve_triangular(UPLO::Upper, Diag::NonUnit, b)
        .expect("triangular solve")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[[0, 0]]
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = bcast_shape(self.value(a).dim(), self.value(b).dim());
        let v = &expand(self.value(a), shape) + &expand(self.value(b), shape);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let shape = bcast_shape(self.value(a).dim(), self.value(b).dim());
        let v = &expand(self.value(a), shape) - &expand(self.value(b), shape);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = bcast_shape(self.value(a).dim(), self.value(b).dim());
        let v = &expand(self.value(a), shape) * &expand(self.value(b), shape);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let shape = bcast_shape(self.value(a).dim(), self.value(b).dim());
        let v = &expand(self.value(a), shape) / &expand(self.value(b), shape);
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(floor));
        self.push(Op::ClampMin(a, floor), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(Op::AddConst(a), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    /// Sum of each row: n x m -> n x 1.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::RowSums(a), v)
    }

    /// Sum of each column: n x m -> 1 x m.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::ColSums(a), v)
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag(&mut self, a: Var) -> Var {
        let v = self.value(a).diag().to_owned().insert_axis(Axis(1));
        self.push(Op::Diag(a), v)
    }

    /// Diagonal matrix from a column vector.
    pub fn diag_mat(&mut self, a: Var) -> Var {
        let col = self.value(a).column(0).to_owned();
        let v = Array2::from_diag(&col);
        self.push(Op::DiagMat(a), v)
    }

    /// Strictly lower triangle (diagonal zeroed).
    pub fn tril_strict(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let n = v.nrows();
        for i in 0..n {
            for j in i..v.ncols() {
                v[[i, j]] = 0.0;
            }
        }
        self.push(Op::TrilStrict(a), v)
    }

    /// Cholesky factor of `(A + A^T)/2` plus jitter from the escalation
    /// ladder. The input is symmetrized so the reverse rule (which spreads
    /// sensitivity over both triangles) is exact for any input.
    pub fn chol(&mut self, a: Var, base_jitter: f64) -> Result<Var> {
        let v = self.value(a);
        let sym = SymMatrix::from_lower((v + &v.t()).mapv(|x| x * 0.5))?;
        let f = linalg::cholesky(&sym, base_jitter)?;
        Ok(self.push(Op::Chol(a), f.lower().clone()))
    }

    pub fn tri_solve_lower(&mut self, l: Var, b: Var) -> Var {
        let v = solve_lower(self.value(l), self.value(b));
        self.push(Op::TriSolveLower(l, b), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    /// Reverse sweep from a 1x1 output node.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.value(output).dim(), (1, 1), "output must be scalar");
        let mut adjoints: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adjoints[output.0] = Some(Array2::ones((1, 1)));

        for id in (0..=output.0).rev() {
            let Some(out_adj) = adjoints[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf | Op::Const => {
                    adjoints[id] = Some(out_adj);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoints, *a, reduce_to(&out_adj, self.value(*a).dim()));
                    self.accumulate(&mut adjoints, *b, reduce_to(&out_adj, self.value(*b).dim()));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoints, *a, reduce_to(&out_adj, self.value(*a).dim()));
                    let neg = out_adj.mapv(|x| -x);
                    self.accumulate(&mut adjoints, *b, reduce_to(&neg, self.value(*b).dim()));
                }
                Op::Mul(a, b) => {
                    let shape = out_adj.dim();
                    let av = expand(self.value(*a), shape);
                    let bv = expand(self.value(*b), shape);
                    self.accumulate(
                        &mut adjoints,
                        *a,
                        reduce_to(&(&out_adj * &bv), self.value(*a).dim()),
                    );
                    self.accumulate(
                        &mut adjoints,
                        *b,
                        reduce_to(&(&out_adj * &av), self.value(*b).dim()),
                    );
                }
                Op::Div(a, b) => {
                    let shape = out_adj.dim();
                    let av = expand(self.value(*a), shape);
                    let bv = expand(self.value(*b), shape);
                    self.accumulate(
                        &mut adjoints,
                        *a,
                        reduce_to(&(&out_adj / &bv), self.value(*a).dim()),
                    );
                    let db = &out_adj * &(-&av / &(&bv * &bv));
                    self.accumulate(&mut adjoints, *b, reduce_to(&db, self.value(*b).dim()));
                }
                Op::Neg(a) => {
                    self.accumulate(&mut adjoints, *a, out_adj.mapv(|x| -x));
                }
                Op::Exp(a) => {
                    self.accumulate(&mut adjoints, *a, &out_adj * &node.value);
                }
                Op::Ln(a) => {
                    self.accumulate(&mut adjoints, *a, &out_adj / self.value(*a));
                }
                Op::Sqrt(a) => {
                    let d = &out_adj * &node.value.mapv(|y| 0.5 / y);
                    self.accumulate(&mut adjoints, *a, d);
                }
                Op::Square(a) => {
                    let d = &out_adj * &self.value(*a).mapv(|x| 2.0 * x);
                    self.accumulate(&mut adjoints, *a, d);
                }
                Op::ClampMin(a, floor) => {
                    let mask = self.value(*a).mapv(|x| if x > *floor { 1.0 } else { 0.0 });
                    self.accumulate(&mut adjoints, *a, &out_adj * &mask);
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut adjoints, *a, out_adj.mapv(|x| x * c));
                }
                Op::AddConst(a) => {
                    self.accumulate(&mut adjoints, *a, out_adj);
                }
                Op::MatMul(a, b) => {
                    let da = out_adj.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&out_adj);
                    self.accumulate(&mut adjoints, *a, da);
                    self.accumulate(&mut adjoints, *b, db);
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut adjoints, *a, out_adj.t().to_owned());
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).dim();
                    self.accumulate(&mut adjoints, *a, Array2::from_elem(shape, out_adj[[0, 0]]));
                }
                Op::RowSums(a) => {
                    let shape = self.value(*a).dim();
                    self.accumulate(&mut adjoints, *a, expand(&out_adj, shape));
                }
                Op::ColSums(a) => {
                    let shape = self.value(*a).dim();
                    self.accumulate(&mut adjoints, *a, expand(&out_adj, shape));
                }
                Op::Diag(a) => {
                    let n = self.value(*a).nrows();
                    let mut d = Array2::zeros((n, n));
                    for i in 0..n {
                        d[[i, i]] = out_adj[[i, 0]];
                    }
                    self.accumulate(&mut adjoints, *a, d);
                }
                Op::DiagMat(a) => {
                    let n = self.value(*a).nrows();
                    let mut d = Array2::zeros((n, 1));
                    for i in 0..n {
                        d[[i, 0]] = out_adj[[i, i]];
                    }
                    self.accumulate(&mut adjoints, *a, d);
                }
                Op::TrilStrict(a) => {
                    let mut d = out_adj.clone();
                    let n = d.nrows();
                    for i in 0..n {
                        for j in i..d.ncols() {
                            d[[i, j]] = 0.0;
                        }
                    }
                    self.accumulate(&mut adjoints, *a, d);
                }
                Op::Chol(a) => {
                    // Reverse-mode rule for L = chol(A) with symmetric A:
                    // P = phi(L^T Lbar), Abar = sym(L^{-T} P L^{-1}),
                    // where phi keeps the lower triangle and halves the
                    // diagonal.
                    let l = &node.value;
                    let p = phi_lower_half_diag(l.t().dot(&out_adj));
                    let x = solve_lower_t(l, &p);
                    let s_t = solve_lower_t(l, &x.t().to_owned());
                    let s = s_t.t().to_owned();
                    let sym = (&s + &s.t()).mapv(|v| v * 0.5);
                    self.accumulate(&mut adjoints, *a, sym);
                }
                Op::TriSolveLower(lv, bv) => {
                    // X = L^{-1} B:
                    //   Bbar += L^{-T} Xbar
                    //   Lbar += tril(-(L^{-T} Xbar) X^T)
                    let l = self.value(*lv);
                    let x = &node.value;
                    let db = solve_lower_t(l, &out_adj);
                    let dl = tril_inclusive(-db.dot(&x.t()));
                    self.accumulate(&mut adjoints, *bv, db);
                    self.accumulate(&mut adjoints, *lv, dl);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let slice = out_adj.slice(s![.., col..col + w]).to_owned();
                        self.accumulate(&mut adjoints, *p, slice);
                        col += w;
                    }
                }
            }
        }
        Grads { adjoints }
    }

    fn accumulate(&self, adjoints: &mut [Option<Array2<f64>>], var: Var, contrib: Array2<f64>) {
        debug_assert_eq!(self.value(var).dim(), contrib.dim());
        match &mut adjoints[var.0] {
            Some(a) => *a += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// RBF covariance matrix between the rows of `xa` and `xb`, built from tape
/// ops so gradients flow into the inputs and the log-hyperparameters.
/// `log_ls` is a 1 x D (or 1 x 1 isotropic) leaf.
pub(crate) fn rbf_matrix(
    tape: &mut Tape,
    log_variance: Var,
    log_ls: Var,
    xa: Var,
    xb: Var,
) -> Var {
    let inv_ls = {
        let n = tape.neg(log_ls);
        tape.exp(n)
    };
    let a_scaled = tape.mul(xa, inv_ls);
    let b_scaled = tape.mul(xb, inv_ls);
    let a_sq = {
        let s = tape.square(a_scaled);
        tape.row_sums(s)
    };
    let b_sq = {
        let s = tape.square(b_scaled);
        let rs = tape.row_sums(s);
        tape.transpose(rs)
    };
    let bt = tape.transpose(b_scaled);
    let cross = tape.matmul(a_scaled, bt);
    let sq = {
        let outer = tape.add(a_sq, b_sq);
        let m2 = tape.scale(cross, -2.0);
        let raw = tape.add(outer, m2);
        tape.clamp_min(raw, 0.0)
    };
    let gamma = tape.exp(log_variance);
    let e = {
        let h = tape.scale(sq, -0.5);
        tape.exp(h)
    };
    tape.mul(gamma, e)
}
