//! Define-by-run reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] records a fixed set of primitives, each with a closed-form
//! adjoint. The one that matters most is [`Tape::ridge_solve`], whose
//! backward pass reuses the forward Cholesky factor:
//!
//! ```text
//! W = G⁻¹R,  G = AᵀA + λI,  R = AᵀB
//! U  = G⁻¹·W̄
//! Ā  = (B − AW)·Uᵀ − A·U·Wᵀ
//! B̄  = A·U
//! λ̄  = −⟨W, U⟩
//! ```
//!
//! so no factorization is ever differentiated entry by entry.
//!
//! Inputs recorded with [`Tape::constant`] never receive adjoints, and the
//! backward pass skips work whose only consumer would be a constant. That
//! keeps the gradient of `F·W` with a large data matrix `F` down to the one
//! product `Fᵀ·Ḡ`.

use std::borrow::Cow;

use thiserror::Error;

use crate::tensor::{ridge_pinv_factored, solve_spd, LinalgError, Matrix, Scalar, SpdFactorization};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("backward root must be 1x1, got {0}x{1}")]
    NotScalarRoot(usize, usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative expressed through the activation's output `y = σ(x)`.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn apply_matrix<T: Scalar>(self, m: &Matrix<T>) -> Matrix<T> {
        m.map(|x| self.apply(x))
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation '{other}' (expected sigmoid, tanh or relu)")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow for large `x` or underflow to zero for
/// very negative `x`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inverse needs a positive argument, got {y}");
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

enum Op<'a, T> {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Scale(usize, T),
    AddBiasColumn(usize),
    Activation(usize, Activation),
    SoftmaxRows(usize),
    Softplus(usize),
    FrobeniusSq(usize),
    Sum(usize),
    CrossEntropyMean {
        logits: usize,
        labels: Cow<'a, [usize]>,
    },
    RidgeSolve {
        a: usize,
        b: usize,
        lambda: usize,
        factor: SpdFactorization<T>,
    },
}

struct Node<'a, T: Clone> {
    value: Cow<'a, Matrix<T>>,
    op: Op<'a, T>,
    requires_grad: bool,
}

/// Record of a computation; rebuilt for every evaluation.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix<T>>, op: Op<'a, T>, requires_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id, rows, cols }
    }

    fn grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn val(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.id].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A differentiable input borrowed for the tape's lifetime.
    pub fn leaf_ref(&mut self, value: &'a Matrix<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    /// A non-differentiable input borrowed for the tape's lifetime, so large
    /// data matrices are never copied.
    pub fn constant_ref(&mut self, value: &'a Matrix<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        self.val(v)
    }

    /// True when every recorded value is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.is_finite())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).matmul(self.val(b));
        let rg = self.grad(a) || self.grad(b);
        self.push(Cow::Owned(value), Op::MatMul(a.id, b.id), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).add(self.val(b));
        let rg = self.grad(a) || self.grad(b);
        self.push(Cow::Owned(value), Op::Add(a.id, b.id), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.val(a).scale(s);
        let rg = self.grad(a);
        self.push(Cow::Owned(value), Op::Scale(a.id, s), rg)
    }

    /// `[1, A]`
    pub fn add_bias_column(&mut self, a: Var) -> Var {
        let value = self.val(a).with_bias_column();
        let rg = self.grad(a);
        self.push(Cow::Owned(value), Op::AddBiasColumn(a.id), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let value = act.apply_matrix(self.val(a));
        let rg = self.grad(a);
        self.push(Cow::Owned(value), Op::Activation(a.id, act), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.val(a));
        let rg = self.grad(a);
        self.push(Cow::Owned(value), Op::SoftmaxRows(a.id), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.val(a).map(softplus);
        let rg = self.grad(a);
        self.push(Cow::Owned(value), Op::Softplus(a.id), rg)
    }

    /// `‖A‖²_F` as a 1x1 node.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.val(a).frobenius_sq());
        let rg = self.grad(a);
        self.push(Cow::Owned(value), Op::FrobeniusSq(a.id), rg)
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.val(a).sum());
        let rg = self.grad(a);
        self.push(Cow::Owned(value), Op::Sum(a.id), rg)
    }

    /// Mean softmax cross-entropy of `logits` (batch × classes) against
    /// integer labels.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: impl Into<Cow<'a, [usize]>>) -> Var {
        let labels = labels.into();
        let l = self.val(logits);
        assert_eq!(l.rows(), labels.len(), "cross_entropy_mean: one label per row");
        let mut total = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = l.row(r);
            assert!(y < row.len(), "cross_entropy_mean: label {y} out of range");
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln();
            total += (lse - row[y]).as_f64();
        }
        let mean = if labels.is_empty() {
            0.0
        } else {
            total / labels.len() as f64
        };
        let rg = self.grad(logits);
        self.push(
            Cow::Owned(Matrix::scalar(T::from_f64(mean))),
            Op::CrossEntropyMean {
                logits: logits.id,
                labels,
            },
            rg,
        )
    }

    /// `W = (AᵀA + λI)⁻¹AᵀB` with `lambda` a 1x1 node.
    ///
    /// Shares its kernel with [`crate::tensor::ridge_pinv_apply`], so the
    /// forward value is bit-identical to it.
    pub fn ridge_solve(&mut self, a: Var, b: Var, lambda: Var) -> Result<Var, LinalgError> {
        assert_eq!(lambda.shape(), (1, 1), "ridge_solve: lambda must be 1x1");
        let lam = self.val(lambda).item();
        let (w, factor) = ridge_pinv_factored(self.val(a), lam, self.val(b))?;
        let rg = self.grad(a) || self.grad(b) || self.grad(lambda);
        Ok(self.push(
            Cow::Owned(w),
            Op::RidgeSolve {
                a: a.id,
                b: b.id,
                lambda: lambda.id,
                factor,
            },
            rg,
        ))
    }

    /// Propagates adjoints from a 1x1 `root` back to every leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, AutodiffError> {
        if root.shape() != (1, 1) {
            return Err(AutodiffError::NotScalarRoot(root.rows, root.cols));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Matrix<T>>> = (0..n).map(|_| None).collect();
        adj[root.id] = Some(Matrix::scalar(T::one()));

        for id in (0..=root.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                adj[id] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Constant => continue,
                _ => match adj[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut adj)?;
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| match node.op {
                Op::Leaf => Some(
                    adj[id]
                        .take()
                        .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn propagate(&self, node: &Node<'a, T>, g: &Matrix<T>, adj: &mut [Option<Matrix<T>>]) -> Result<(), AutodiffError> {
        let needs = |i: usize| self.nodes[i].requires_grad;
        let value = |i: usize| -> &Matrix<T> { &self.nodes[i].value };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(adj, *a, g.matmul_nt(value(*b)));
                }
                if needs(*b) {
                    accumulate(adj, *b, value(*a).matmul_tn(g));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(adj, *b, g.clone());
                }
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.scale(*s)),
            Op::AddBiasColumn(a) => accumulate(adj, *a, g.columns(1, g.cols())),
            Op::Activation(a, act) => {
                let act = *act;
                let d = node.value.zip_map(g, |y, gy| gy * act.derivative_from_output(y));
                accumulate(adj, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let s = &node.value;
                let mut d = Matrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let (sr, gr) = (s.row(r), g.row(r));
                    let inner = sr.iter().zip(gr).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                    for (o, (&p, &q)) in d.row_mut(r).iter_mut().zip(sr.iter().zip(gr)) {
                        *o = p * (q - inner);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::Softplus(a) => {
                let d = value(*a).zip_map(g, |x, gy| gy * sigmoid(x));
                accumulate(adj, *a, d);
            }
            Op::FrobeniusSq(a) => {
                let s = g.item() + g.item();
                accumulate(adj, *a, value(*a).scale(s));
            }
            Op::Sum(a) => {
                let x = value(*a);
                accumulate(adj, *a, Matrix::filled(x.rows(), x.cols(), g.item()));
            }
            Op::CrossEntropyMean { logits, labels } => {
                let n = labels.len().max(1);
                let scale = g.item() / T::from_f64(n as f64);
                let mut d = softmax_rows(value(*logits));
                for (r, &y) in labels.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[y] = row[y] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                accumulate(adj, *logits, d);
            }
            Op::RidgeSolve { a, b, lambda, factor } => {
                let w = &node.value;
                let u = solve_spd(factor, g)?;
                let av = value(*a);
                let au = if needs(*a) || needs(*b) {
                    Some(av.matmul(&u))
                } else {
                    None
                };
                if needs(*a) {
                    let resid = value(*b).sub(&av.matmul(w));
                    let mut da = resid.matmul_nt(&u);
                    da.axpy(-T::one(), &au.as_ref().unwrap().matmul_nt(w));
                    accumulate(adj, *a, da);
                }
                if needs(*b) {
                    accumulate(adj, *b, au.unwrap());
                }
                if needs(*lambda) {
                    accumulate(adj, *lambda, Matrix::scalar(-w.dot(&u)));
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Matrix<T>>], id: usize, g: Matrix<T>) {
    match &mut adj[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints of the leaves of a tape.
pub struct Gradients<T> {
    leaves: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`; zero when `v` is a leaf off every path to the root,
    /// `None` when `v` is not a leaf.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.leaves.get(v.id).and_then(|g| g.as_ref())
    }

    /// Moves the adjoint of leaf `v` out.
    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.leaves.get_mut(v.id).and_then(|g| g.take())
    }

    pub fn all_finite(&self) -> bool {
        self.leaves.iter().flatten().all(|g| g.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(50.0f64) - 50.0).abs() < 1e-15);
        let tiny = softplus(-50.0f64);
        assert!(tiny > 0.0);
        assert!((tiny / (-50.0f64).exp() - 1.0).abs() < 1e-12);
        assert!(softplus(1e4f64).is_finite());
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-6, 1e-2, 0.5, 3.0, 40.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn frobenius_adjoint_is_twice_input() {
        let x = Matrix::<f64>::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let f = tape.frobenius_sq(v);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(v).unwrap(), &x.scale(2.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(v), Err(AutodiffError::NotScalarRoot(2, 2))));
    }

    #[test]
    fn unreachable_leaf_gets_exact_zero() {
        let mut tape = Tape::<f64>::new();
        let used = tape.leaf(Matrix::filled(2, 2, 1.0));
        let unused = tape.leaf(Matrix::filled(3, 1, 7.0));
        let root = tape.sum(used);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Matrix::zeros(3, 1));
    }

    #[test]
    fn constants_get_no_adjoint() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Matrix::filled(2, 2, 1.0));
        let w = tape.leaf(Matrix::filled(2, 1, 1.0));
        let p = tape.matmul(c, w);
        let root = tape.sum(p);
        let g = tape.backward(root).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap(), &Matrix::filled(2, 1, 2.0));
    }

    #[test]
    fn ridge_solve_identity_design_linear_case() {
        // W = B/2, L = ΣW, so ∂L/∂B = ½·1.
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Matrix::identity(3));
        let b = tape.leaf(Matrix::from_fn(3, 2, |r, c| (r + c) as f64));
        let lam = tape.constant(Matrix::scalar(1.0));
        let w = tape.ridge_solve(a, b, lam).unwrap();
        let root = tape.sum(w);
        let g = tape.backward(root).unwrap();
        let expected = Matrix::filled(3, 2, 0.5);
        assert!(g.get(b).unwrap().sub(&expected).max_abs() < 1e-15);
    }

    #[test]
    fn ridge_solve_scalar_lambda_derivative() {
        // W = ab/(a²+λ); at a=1, b=2, λ=1: W = 1, ∂W/∂λ = −ab/(a²+λ)² = −0.5.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Matrix::scalar(1.0));
        let b = tape.leaf(Matrix::scalar(2.0));
        let lam = tape.leaf(Matrix::scalar(1.0));
        let w = tape.ridge_solve(a, b, lam).unwrap();
        assert!((tape.value(w).item() - 1.0).abs() < 1e-15);
        let root = tape.sum(w);
        let g = tape.backward(root).unwrap();
        assert!((g.get(lam).unwrap().item() + 0.5).abs() < 1e-15);
        // ∂W/∂b = a/(a²+λ) = 0.5; ∂W/∂a = b(λ−a²)/(a²+λ)² = 0
        assert!((g.get(b).unwrap().item() - 0.5).abs() < 1e-15);
        assert!(g.get(a).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn ridge_solve_propagates_nonpositive_lambda_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Matrix::identity(2));
        let lam = tape.constant(Matrix::scalar(-1.0));
        assert!(tape.ridge_solve(a, a, lam).is_err());
    }

    #[test]
    fn activation_parse_round_trip() {
        for act in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
            assert_eq!(act.name().parse::<Activation>().unwrap(), act);
        }
        assert!("gelu".parse::<Activation>().is_err());
    }
}
