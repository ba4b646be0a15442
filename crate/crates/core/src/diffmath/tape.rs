//! Wengert tape over dense `f64` matrices.
//!
//! Every primitive pushes its value and a recorded operation onto the tape; the
//! reverse sweep walks the tape backwards, accumulating adjoints. A tape lives
//! for exactly one forward/backward pass and carries no state across passes.
//! Scalars are represented as `1x1` matrices.

use nalgebra::DMatrix;

use super::linalg;
use crate::error::{Error, Result};

/// Handle to a matrix registered on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeMatrix {
    id: usize,
    rows: usize,
    cols: usize,
}

/// A `1x1` [`TapeMatrix`].
pub type TapeValue = TapeMatrix;

impl TapeMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    ScaleBy(usize, usize),
    DivBy(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Sum(usize),
    SumSquares(usize),
    Entry(usize, usize, usize),
    Diagonal(usize),
    Gather {
        src: usize,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    HCat(Vec<usize>),
    VCat(Vec<usize>),
    Clamp {
        src: usize,
        lo: f64,
        hi: f64,
    },
    LogDet {
        src: usize,
        inverse: DMatrix<f64>,
    },
    Inverse(usize),
    Softmax {
        src: usize,
        inv_tau: f64,
    },
    SchurStep {
        src: usize,
        bit: f64,
    },
    CostMatrix {
        x: DMatrix<f64>,
        y: usize,
    },
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
    requires_grad: bool,
}

/// Arena recording one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: TapeMatrix) -> Option<&DMatrix<f64>> {
        self.adjoints.get(var.id).and_then(|a| a.as_ref())
    }

    /// Adjoint of `var`, zero if nothing flowed into it.
    pub fn wrt(&self, var: TapeMatrix) -> DMatrix<f64> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                DMatrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::DimensionMismatch(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after the first `len`; earlier handles stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: TapeMatrix) -> &DMatrix<f64> {
        &self.nodes[var.id].value
    }

    /// Value of a `1x1` handle.
    pub fn scalar(&self, var: TapeValue) -> f64 {
        self.nodes[var.id].value[(0, 0)]
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, name: &'static str) -> Result<TapeMatrix> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ScaleBy(a, b)
            | Op::DivBy(a, b) => self.requires(*a) || self.requires(*b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::SumSquares(a)
            | Op::Entry(a, _, _)
            | Op::Diagonal(a)
            | Op::Inverse(a) => self.requires(*a),
            Op::Gather { src, .. }
            | Op::Clamp { src, .. }
            | Op::LogDet { src, .. }
            | Op::Softmax { src, .. }
            | Op::SchurStep { src, .. } => self.requires(*src),
            Op::CostMatrix { y, .. } => self.requires(*y),
            Op::HCat(ids) | Op::VCat(ids) => ids.iter().any(|&i| self.requires(i)),
        };
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(TapeMatrix { id, rows, cols })
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: DMatrix<f64>) -> Result<TapeMatrix> {
        let var = self.push(value, Op::Leaf, "param")?;
        self.nodes[var.id].requires_grad = true;
        Ok(var)
    }

    /// Registers a constant; no adjoint is ever accumulated for it.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Result<TapeMatrix> {
        self.push(value, Op::Leaf, "constant")
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<TapeValue> {
        self.constant(DMatrix::from_element(1, 1, value))
    }

    pub fn identity(&mut self, n: usize) -> Result<TapeMatrix> {
        self.constant(DMatrix::identity(n, n))
    }

    pub fn matmul(&mut self, a: TapeMatrix, b: TapeMatrix) -> Result<TapeMatrix> {
        if a.cols != b.rows {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a.id, b.id), "matmul")
    }

    pub fn transpose(&mut self, a: TapeMatrix) -> Result<TapeMatrix> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a.id), "transpose")
    }

    fn same_shape(op: &str, a: TapeMatrix, b: TapeMatrix) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(shape_err(op, a.shape(), b.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TapeMatrix, b: TapeMatrix) -> Result<TapeMatrix> {
        Self::same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.id, b.id), "add")
    }

    pub fn sub(&mut self, a: TapeMatrix, b: TapeMatrix) -> Result<TapeMatrix> {
        Self::same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a.id, b.id), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TapeMatrix, b: TapeMatrix) -> Result<TapeMatrix> {
        Self::same_shape("mul", a, b)?;
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a.id, b.id), "mul")
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: TapeMatrix, b: TapeMatrix) -> Result<TapeMatrix> {
        Self::same_shape("div", a, b)?;
        let v = self.value(a).component_div(self.value(b));
        self.push(v, Op::Div(a.id, b.id), "div")
    }

    /// `a * s` for a `1x1` handle `s`.
    pub fn scale_by(&mut self, a: TapeMatrix, s: TapeValue) -> Result<TapeMatrix> {
        if !s.is_scalar() {
            return Err(shape_err("scale_by", a.shape(), s.shape()));
        }
        let v = self.value(a) * self.scalar(s);
        self.push(v, Op::ScaleBy(a.id, s.id), "scale_by")
    }

    /// `a / s` for a `1x1` handle `s`.
    pub fn div_by(&mut self, a: TapeMatrix, s: TapeValue) -> Result<TapeMatrix> {
        if !s.is_scalar() {
            return Err(shape_err("div_by", a.shape(), s.shape()));
        }
        let v = self.value(a) / self.scalar(s);
        self.push(v, Op::DivBy(a.id, s.id), "div_by")
    }

    pub fn scale(&mut self, a: TapeMatrix, c: f64) -> Result<TapeMatrix> {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a.id, c), "scale")
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: TapeMatrix, c: f64) -> Result<TapeMatrix> {
        let v = self.value(a).add_scalar(c);
        self.push(v, Op::Offset(a.id), "offset")
    }

    pub fn exp(&mut self, a: TapeMatrix) -> Result<TapeMatrix> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.id), "exp")
    }

    pub fn ln(&mut self, a: TapeMatrix) -> Result<TapeMatrix> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("logarithm of a non-positive value".into()));
        }
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a.id), "ln")
    }

    pub fn sqrt(&mut self, a: TapeMatrix) -> Result<TapeMatrix> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("square root of a non-positive value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a.id), "sqrt")
    }

    pub fn sigmoid(&mut self, a: TapeMatrix) -> Result<TapeMatrix> {
        let v = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(a.id), "sigmoid")
    }

    pub fn sum(&mut self, a: TapeMatrix) -> Result<TapeValue> {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a.id), "sum")
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: TapeMatrix) -> Result<TapeValue> {
        let v = DMatrix::from_element(1, 1, self.value(a).norm_squared());
        self.push(v, Op::SumSquares(a.id), "sum_squares")
    }

    pub fn entry(&mut self, a: TapeMatrix, r: usize, c: usize) -> Result<TapeValue> {
        if r >= a.rows || c >= a.cols {
            return Err(Error::DimensionMismatch(format!(
                "entry ({r},{c}) of a {}x{} matrix",
                a.rows, a.cols
            )));
        }
        let v = DMatrix::from_element(1, 1, self.value(a)[(r, c)]);
        self.push(v, Op::Entry(a.id, r, c), "entry")
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diagonal(&mut self, a: TapeMatrix) -> Result<TapeMatrix> {
        if a.rows != a.cols {
            return Err(shape_err("diagonal", a.shape(), a.shape()));
        }
        let d = self.value(a).diagonal();
        let v = DMatrix::from_column_slice(a.rows, 1, d.as_slice());
        self.push(v, Op::Diagonal(a.id), "diagonal")
    }

    /// Submatrix `a[rows, cols]`; indices may repeat.
    pub fn gather(&mut self, a: TapeMatrix, rows: &[usize], cols: &[usize]) -> Result<TapeMatrix> {
        if rows.iter().any(|&r| r >= a.rows) || cols.iter().any(|&c| c >= a.cols) {
            return Err(Error::DimensionMismatch("gather index out of range".into()));
        }
        let src = self.value(a);
        let v = DMatrix::from_fn(rows.len(), cols.len(), |i, j| src[(rows[i], cols[j])]);
        self.push(
            v,
            Op::Gather {
                src: a.id,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            "gather",
        )
    }

    /// Horizontal concatenation of equal-height matrices.
    pub fn hcat(&mut self, parts: &[TapeMatrix]) -> Result<TapeMatrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::DimensionMismatch("hcat of unequal heights".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            v.view_mut((0, at), (rows, p.cols)).copy_from(self.value(*p));
            at += p.cols;
        }
        self.push(v, Op::HCat(parts.iter().map(|p| p.id).collect()), "hcat")
    }

    /// Vertical concatenation of equal-width matrices.
    pub fn vcat(&mut self, parts: &[TapeMatrix]) -> Result<TapeMatrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::DimensionMismatch("vcat of unequal widths".into()));
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            v.view_mut((at, 0), (p.rows, cols)).copy_from(self.value(*p));
            at += p.rows;
        }
        self.push(v, Op::VCat(parts.iter().map(|p| p.id).collect()), "vcat")
    }

    /// Elementwise clamp; the adjoint passes only where the input lies inside `[lo, hi]`.
    pub fn clamp(&mut self, a: TapeMatrix, lo: f64, hi: f64) -> Result<TapeMatrix> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { src: a.id, lo, hi }, "clamp")
    }

    /// `log det(a)` for symmetric positive definite `a`, with reverse rule `g * a^{-1}`.
    pub fn logdet_psd(&mut self, a: TapeMatrix) -> Result<TapeValue> {
        if a.rows != a.cols {
            return Err(shape_err("logdet_psd", a.shape(), a.shape()));
        }
        let (l, _) = linalg::cholesky_jittered(self.value(a))?;
        let ld = linalg::logdet_from_factor(&l);
        let inverse = linalg::inverse_from_factor(&l);
        self.push(
            DMatrix::from_element(1, 1, ld),
            Op::LogDet { src: a.id, inverse },
            "logdet_psd",
        )
    }

    /// Inverse of a symmetric positive definite matrix.
    pub fn inverse_psd(&mut self, a: TapeMatrix) -> Result<TapeMatrix> {
        if a.rows != a.cols {
            return Err(shape_err("inverse_psd", a.shape(), a.shape()));
        }
        let inv = linalg::inverse_spd(self.value(a))?;
        self.push(inv, Op::Inverse(a.id), "inverse_psd")
    }

    /// `softmax(a / tau)` of a column vector, computed in the log domain with max subtraction.
    pub fn softmax(&mut self, a: TapeMatrix, tau: f64) -> Result<TapeMatrix> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidTemperature(tau));
        }
        if a.cols != 1 {
            return Err(shape_err("softmax", a.shape(), (a.rows, 1)));
        }
        let v = softmax_column(self.value(a), tau);
        self.push(
            v,
            Op::Softmax {
                src: a.id,
                inv_tau: 1.0 / tau,
            },
            "softmax",
        )
    }

    /// One elimination step of the sequential Cholesky sampler on an `m x m` kernel.
    ///
    /// With `d = a00 - (1 - bit)` the output is the `(m-1) x (m-1)` trailing block
    /// `a[1:,1:] - (a[1:,0] / d) a[0,1:]`.
    pub fn schur_step(&mut self, a: TapeMatrix, bit: bool) -> Result<TapeMatrix> {
        if a.rows != a.cols || a.rows < 2 {
            return Err(shape_err("schur_step", a.shape(), a.shape()));
        }
        let b = if bit { 1.0 } else { 0.0 };
        let src = self.value(a);
        let m = a.rows;
        let d = src[(0, 0)] - (1.0 - b);
        let v = DMatrix::from_fn(m - 1, m - 1, |i, j| {
            src[(i + 1, j + 1)] - src[(i + 1, 0)] / d * src[(0, j + 1)]
        });
        self.push(v, Op::SchurStep { src: a.id, bit: b }, "schur_step")
    }

    /// Soft Jaccard costs between the constant columns of `x` and the columns of `y`.
    ///
    /// `C[i, j] = 1 - x_i.y_j / (M - (1 - x_i).(1 - y_j))`, with `C = 0` where the
    /// denominator falls below `1e-12`.
    pub fn cost_matrix(&mut self, x: &DMatrix<f64>, y: TapeMatrix) -> Result<TapeMatrix> {
        if x.nrows() != y.rows {
            return Err(shape_err("cost_matrix", x.shape(), y.shape()));
        }
        let yv = self.value(y);
        let v = soft_jaccard_matrix(x, yv);
        self.push(
            v,
            Op::CostMatrix {
                x: x.clone(),
                y: y.id,
            },
            "cost_matrix",
        )
    }

    /// Reverse sweep from a scalar root with unit seed.
    pub fn backward(&self, root: TapeValue) -> Result<Gradients> {
        if !root.is_scalar() {
            return Err(Error::NotScalar(root.rows, root.cols));
        }
        self.backward_seeded(&[(root, DMatrix::from_element(1, 1, 1.0))])
    }

    /// Reverse sweep from arbitrary seed adjoints.
    pub fn backward_seeded(&self, seeds: &[(TapeMatrix, DMatrix<f64>)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<DMatrix<f64>>> = (0..n).map(|_| None).collect();
        let mut top = 0;
        for (var, seed) in seeds {
            if seed.shape() != var.shape() {
                return Err(shape_err("seed", var.shape(), seed.shape()));
            }
            accumulate(&mut adj, var.id, seed.clone());
            top = top.max(var.id + 1);
        }
        for id in (0..top).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match &adj[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(id, &g, &mut adj);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }

    fn propagate(&self, id: usize, g: &DMatrix<f64>, adj: &mut [Option<DMatrix<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        let mut send = |i: usize, d: DMatrix<f64>| {
            if self.nodes[i].requires_grad {
                accumulate(adj, i, d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, g * val(*b).transpose());
                send(*b, val(*a).transpose() * g);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                send(*a, g.component_mul(val(*b)));
                send(*b, g.component_mul(val(*a)));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                send(*a, g.component_div(bv));
                let db = -g.component_mul(val(*a)).component_div(&bv.component_mul(bv));
                send(*b, db);
            }
            Op::ScaleBy(a, s) => {
                let sv = val(*s)[(0, 0)];
                send(*a, g * sv);
                send(*s, DMatrix::from_element(1, 1, g.dot(val(*a))));
            }
            Op::DivBy(a, s) => {
                let sv = val(*s)[(0, 0)];
                send(*a, g / sv);
                send(*s, DMatrix::from_element(1, 1, -g.dot(val(*a)) / (sv * sv)));
            }
            Op::Scale(a, c) => send(*a, g * *c),
            Op::Offset(a) => send(*a, g.clone()),
            Op::Exp(a) => send(*a, g.component_mul(out)),
            Op::Ln(a) => send(*a, g.component_div(val(*a))),
            Op::Sqrt(a) => send(*a, g.component_div(&(out * 2.0))),
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |gi, s| gi * s * (1.0 - s))),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::SumSquares(a) => send(*a, val(*a) * (2.0 * g[(0, 0)])),
            Op::Entry(a, r, c) => {
                let (nr, nc) = val(*a).shape();
                let mut d = DMatrix::zeros(nr, nc);
                d[(*r, *c)] = g[(0, 0)];
                send(*a, d);
            }
            Op::Diagonal(a) => {
                let n = val(*a).nrows();
                let mut d = DMatrix::zeros(n, n);
                for i in 0..n {
                    d[(i, i)] = g[(i, 0)];
                }
                send(*a, d);
            }
            Op::Gather { src, rows, cols } => {
                let (nr, nc) = val(*src).shape();
                let mut d = DMatrix::zeros(nr, nc);
                for (i, &r) in rows.iter().enumerate() {
                    for (j, &c) in cols.iter().enumerate() {
                        d[(r, c)] += g[(i, j)];
                    }
                }
                send(*src, d);
            }
            Op::HCat(ids) => {
                let mut at = 0;
                for &p in ids {
                    let (r, c) = val(p).shape();
                    send(p, g.view((0, at), (r, c)).into_owned());
                    at += c;
                }
            }
            Op::VCat(ids) => {
                let mut at = 0;
                for &p in ids {
                    let (r, c) = val(p).shape();
                    send(p, g.view((at, 0), (r, c)).into_owned());
                    at += r;
                }
            }
            Op::Clamp { src, lo, hi } => {
                let d = g.zip_map(val(*src), |gi, x| if x >= *lo && x <= *hi { gi } else { 0.0 });
                send(*src, d);
            }
            Op::LogDet { src, inverse } => send(*src, inverse * g[(0, 0)]),
            Op::Inverse(a) => {
                let t = out.transpose();
                send(*a, -(&t * g * &t));
            }
            Op::Softmax { src, inv_tau } => {
                let dot = out.dot(g);
                let d = out.zip_map(g, |y, gi| *inv_tau * y * (gi - dot));
                send(*src, d);
            }
            Op::SchurStep { src, bit } => {
                let a = val(*src);
                let m = a.nrows();
                let d = a[(0, 0)] - (1.0 - bit);
                let mut da = DMatrix::zeros(m, m);
                let mut dd = 0.0;
                for i in 0..m - 1 {
                    for j in 0..m - 1 {
                        let gij = g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        da[(i + 1, j + 1)] += gij;
                        da[(i + 1, 0)] -= gij * a[(0, j + 1)] / d;
                        da[(0, j + 1)] -= gij * a[(i + 1, 0)] / d;
                        dd += gij * a[(i + 1, 0)] * a[(0, j + 1)] / (d * d);
                    }
                }
                da[(0, 0)] += dd;
                send(*src, da);
            }
            Op::CostMatrix { x, y } => {
                send(*y, soft_jaccard_matrix_vjp(x, val(*y), g));
            }
        }
    }
}

fn accumulate(adj: &mut [Option<DMatrix<f64>>], id: usize, d: DMatrix<f64>) {
    match &mut adj[id] {
        Some(acc) => *acc += d,
        slot @ None => *slot = Some(d),
    }
}

/// Log-domain softmax of a column vector at temperature `tau`.
pub fn softmax_column(a: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let z = a / tau;
    let max = z.max();
    let e = z.map(|x| (x - max).exp());
    let total = e.sum();
    e / total
}

pub(crate) const SOFT_JACCARD_FLOOR: f64 = 1e-12;

/// Soft Jaccard costs between columns of `x` (`M x n`) and columns of `y` (`M x p`).
pub fn soft_jaccard_matrix(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = x.shape();
    let p = y.ncols();
    DMatrix::from_fn(n, p, |i, j| {
        let (mut inter, mut union) = (0.0, 0.0);
        for k in 0..m {
            let (xk, yk) = (x[(k, i)], y[(k, j)]);
            inter += xk * yk;
            union += xk + yk - xk * yk;
        }
        if union <= SOFT_JACCARD_FLOOR {
            0.0
        } else {
            1.0 - inter / union
        }
    })
}

fn soft_jaccard_matrix_vjp(x: &DMatrix<f64>, y: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = x.shape();
    let p = y.ncols();
    let mut dy = DMatrix::zeros(m, p);
    for j in 0..p {
        for i in 0..n {
            let gij = g[(i, j)];
            if gij == 0.0 {
                continue;
            }
            let (mut inter, mut union) = (0.0, 0.0);
            for k in 0..m {
                let (xk, yk) = (x[(k, i)], y[(k, j)]);
                inter += xk * yk;
                union += xk + yk - xk * yk;
            }
            if union <= SOFT_JACCARD_FLOOR {
                continue;
            }
            let u2 = union * union;
            for k in 0..m {
                let xk = x[(k, i)];
                dy[(k, j)] -= gij * (xk * union - inter * (1.0 - xk)) / u2;
            }
        }
    }
    dy
}
