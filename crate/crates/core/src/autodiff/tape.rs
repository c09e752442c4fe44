//! Recording tape with eager forward-mode tangents and a reverse sweep.
//!
//! Every node stores its value and, when any ancestor carries a tangent, its
//! directional derivative. Nodes that depend on a [`Tape::param`] leaf are
//! "live" and receive adjoints during [`Tape::backward`].

use super::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    Silu(Var),
    Sin(Var),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Silu(_) => "silu",
            Op::Sin(_) => "sin",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SqNorm(_) => "sq_norm",
            Op::Dot(..) => "dot",
            Op::Concat(_) => "concat",
            Op::StopGradient => "stop_gradient",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    tangent: Option<Tensor>,
    op: Op,
    live: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// d silu / dx = σ(x)·(1 + x·(1 − σ(x)))
fn silu_slope(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn check_finite(op: &Op, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op: op.name().to_string(),
        })
    }
}

/// `a[m,k] · b[k,n]`; a rank-1 `b` is a column and yields a rank-1 result.
fn matmul_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    };
    let &[m, k] = a.shape() else {
        return Err(mismatch());
    };
    let (kb, n, out_shape) = match *b.shape() {
        [kb] => (kb, 1, vec![m]),
        [kb, n] => (kb, n, vec![m, n]),
        _ => return Err(mismatch()),
    };
    if k != kb {
        return Err(mismatch());
    }
    let mut out = Tensor::zeros(&out_shape);
    gemm_acc(m, k, n, a.data(), false, b.data(), false, out.data_mut());
    Ok(out)
}

/// `x · wᵀ + b` with `x[B,in]` (or `[in]`), `w[out,in]`, `b[out]`.
fn affine_value(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mismatch = |right: &Tensor| Error::ShapeMismatch {
        op: "affine",
        left: x.shape().to_vec(),
        right: right.shape().to_vec(),
    };
    let &[out_dim, in_dim] = w.shape() else {
        return Err(mismatch(w));
    };
    let (rows, out_shape) = match *x.shape() {
        [n] if n == in_dim => (1, vec![out_dim]),
        [r, n] if n == in_dim => (r, vec![r, out_dim]),
        _ => return Err(mismatch(w)),
    };
    let mut out = Tensor::zeros(&out_shape);
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(mismatch(b));
        }
        for r in 0..rows {
            out.data_mut()[r * out_dim..(r + 1) * out_dim].copy_from_slice(b.data());
        }
    }
    gemm_acc(
        rows,
        in_dim,
        out_dim,
        x.data(),
        false,
        w.data(),
        true,
        out.data_mut(),
    );
    Ok(out)
}

fn concat_values(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let rank = first.shape().len();
    let rows = first.rows();
    for p in parts {
        if p.shape().len() != rank || p.rows() != rows || rank == 0 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    let shape = if rank == 1 {
        vec![total]
    } else {
        vec![rows, total]
    };
    Tensor::new(shape, data)
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

    fn push(&mut self, op: Op, value: Tensor, tangent: Option<Tensor>, live: bool) -> Result<Var> {
        check_finite(&op, &value)?;
        if let Some(t) = &tangent {
            check_finite(&op, t)?;
        }
        self.nodes.push(Node {
            value,
            tangent,
            op,
            live,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// A constant leaf with no tangent.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Input, value, None, false)
    }

    /// A constant leaf carrying a forward-mode tangent.
    pub fn input_with_tangent(&mut self, value: Tensor, tangent: Tensor) -> Result<Var> {
        same_shape("tangent", &value, &tangent)?;
        self.push(Op::Input, value, Some(tangent), false)
    }

    /// A leaf whose adjoint is collected by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Param, value, None, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn tangent(&self, v: Var) -> Option<&Tensor> {
        self.node(v).tangent.as_ref()
    }

    /// The tangent of `v`, materialising zeros when nothing upstream had one.
    pub fn tangent_or_zero(&self, v: Var) -> Tensor {
        let n = self.node(v);
        n.tangent
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.shape()))
    }

    fn live(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).live)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = matmul_value(av, bv)?;
        let tangent = match (self.tangent(a), self.tangent(b)) {
            (None, None) => None,
            (ta, tb) => {
                let mut acc = Tensor::zeros(value.shape());
                if let Some(ta) = ta {
                    acc.add_assign(&matmul_value(ta, bv)?);
                }
                if let Some(tb) = tb {
                    acc.add_assign(&matmul_value(av, tb)?);
                }
                Some(acc)
            }
        };
        let live = self.live(&[a, b]);
        self.push(Op::MatMul(a, b), value, tangent, live)
    }

    fn binary(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(&Tensor, &Tensor, Option<&Tensor>, Option<&Tensor>) -> Tensor,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op.name(), av, bv)?;
        let value = av.zip_map(bv, f);
        let tangent = match (self.tangent(a), self.tangent(b)) {
            (None, None) => None,
            (ta, tb) => Some(df(av, bv, ta, tb)),
        };
        let live = self.live(&[a, b]);
        self.push(op, value, tangent, live)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y, |av, _, ta, tb| {
            let mut t = ta.cloned().unwrap_or_else(|| Tensor::zeros(av.shape()));
            if let Some(tb) = tb {
                t.add_assign(tb);
            }
            t
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y, |av, _, ta, tb| {
            let mut t = ta.cloned().unwrap_or_else(|| Tensor::zeros(av.shape()));
            if let Some(tb) = tb {
                for (x, y) in t.data_mut().iter_mut().zip(tb.data()) {
                    *x -= y;
                }
            }
            t
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y, |av, bv, ta, tb| {
            let mut t = Tensor::zeros(av.shape());
            if let Some(ta) = ta {
                t.add_assign(&ta.zip_map(bv, |d, y| d * y));
            }
            if let Some(tb) = tb {
                t.add_assign(&tb.zip_map(av, |d, x| d * x));
            }
            t
        })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).map(|x| k * x);
        let tangent = self.tangent(a).map(|t| t.map(|d| k * d));
        let live = self.live(&[a]);
        self.push(Op::Scale(a, k), value, tangent, live)
    }

    /// `x · wᵀ + b`, the dense layer primitive.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let value = affine_value(xv, wv, Some(bv))?;
        let (tx, tw, tb) = (self.tangent(x), self.tangent(w), self.tangent(b));
        let tangent = if tx.is_none() && tw.is_none() && tb.is_none() {
            None
        } else {
            let mut acc = Tensor::zeros(value.shape());
            if let Some(tb) = tb {
                let out_dim = tb.len();
                for row in acc.data_mut().chunks_mut(out_dim) {
                    row.copy_from_slice(tb.data());
                }
            }
            if let Some(tx) = tx {
                acc.add_assign(&affine_value(tx, wv, None)?);
            }
            if let Some(tw) = tw {
                acc.add_assign(&affine_value(xv, tw, None)?);
            }
            Some(acc)
        };
        let live = self.live(&[x, w, b]);
        self.push(Op::Affine { x, w, b }, value, tangent, live)
    }

    fn unary(
        &mut self,
        op: Op,
        a: Var,
        f: impl Fn(f64) -> f64,
        slope: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let av = self.value(a);
        let value = av.map(f);
        let tangent = self
            .tangent(a)
            .map(|t| t.zip_map(av, |d, x| d * slope(x)));
        let live = self.live(&[a]);
        self.push(op, value, tangent, live)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh(a), a, f64::tanh, |x| {
            let y = x.tanh();
            1.0 - y * y
        })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Silu(a), a, |x| x * sigmoid(x), silu_slope)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sin(a), a, f64::sin, f64::cos)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let tangent = self
            .tangent(a)
            .map(|t| Tensor::scalar(t.data().iter().sum()));
        let live = self.live(&[a]);
        self.push(Op::Sum(a), value, tangent, live)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let n = n as f64;
        let value = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        let tangent = self
            .tangent(a)
            .map(|t| Tensor::scalar(t.data().iter().sum::<f64>() / n));
        let live = self.live(&[a]);
        self.push(Op::Mean(a), value, tangent, live)
    }

    /// Sum of squares of every entry.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::scalar(av.sq_norm());
        let tangent = self.tangent(a).map(|t| Tensor::scalar(2.0 * av.dot(t)));
        let live = self.live(&[a]);
        self.push(Op::SqNorm(a), value, tangent, live)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("dot", av, bv)?;
        let value = Tensor::scalar(av.dot(bv));
        let tangent = match (self.tangent(a), self.tangent(b)) {
            (None, None) => None,
            (ta, tb) => Some(Tensor::scalar(
                ta.map_or(0.0, |t| t.dot(bv)) + tb.map_or(0.0, |t| av.dot(t)),
            )),
        };
        let live = self.live(&[a, b]);
        self.push(Op::Dot(a, b), value, tangent, live)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat_values(&values)?;
        let tangent = if parts.iter().any(|&p| self.tangent(p).is_some()) {
            let tangents: Vec<Tensor> = parts.iter().map(|&p| self.tangent_or_zero(p)).collect();
            let refs: Vec<&Tensor> = tangents.iter().collect();
            Some(concat_values(&refs)?)
        } else {
            None
        };
        let live = self.live(parts);
        self.push(Op::Concat(parts.to_vec()), value, tangent, live)
    }

    /// Same value, but constant to both differentiation modes.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        self.push(Op::StopGradient, value, None, false)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.node(loss).live {
            adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }

        fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.live {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let live = |v: Var| self.nodes[v.0].live;
            match &node.op {
                Op::Input | Op::StopGradient => {}
                Op::Param => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2();
                    let n = if bv.shape().len() == 1 { 1 } else { bv.cols() };
                    if live(*a) {
                        // dA = G · Bᵀ
                        let mut da = Tensor::zeros(av.shape());
                        gemm_acc(m, n, k, g.data(), false, bv.data(), true, da.data_mut());
                        acc(&mut adj, *a, da);
                    }
                    if live(*b) {
                        // dB = Aᵀ · G
                        let mut db = Tensor::zeros(bv.shape());
                        gemm_acc(k, m, n, av.data(), true, g.data(), false, db.data_mut());
                        acc(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if live(*a) {
                        acc(&mut adj, *a, g.clone());
                    }
                    if live(*b) {
                        acc(&mut adj, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if live(*a) {
                        acc(&mut adj, *a, g.clone());
                    }
                    if live(*b) {
                        acc(&mut adj, *b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if live(*a) {
                        acc(&mut adj, *a, g.zip_map(self.value(*b), |d, y| d * y));
                    }
                    if live(*b) {
                        acc(&mut adj, *b, g.zip_map(self.value(*a), |d, x| d * x));
                    }
                }
                Op::Scale(a, k) => acc(&mut adj, *a, g.map(|d| k * d)),
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, in_dim) = xv.dims2();
                    let out_dim = wv.rows();
                    if live(*x) {
                        // dX = G · W
                        let mut dx = Tensor::zeros(xv.shape());
                        gemm_acc(
                            rows,
                            out_dim,
                            in_dim,
                            g.data(),
                            false,
                            wv.data(),
                            false,
                            dx.data_mut(),
                        );
                        acc(&mut adj, *x, dx);
                    }
                    if live(*w) {
                        // dW = Gᵀ · X
                        let mut dw = Tensor::zeros(wv.shape());
                        gemm_acc(
                            out_dim,
                            rows,
                            in_dim,
                            g.data(),
                            true,
                            xv.data(),
                            false,
                            dw.data_mut(),
                        );
                        acc(&mut adj, *w, dw);
                    }
                    if live(*b) {
                        let mut db = vec![0.0; out_dim];
                        for r in 0..rows {
                            for (s, d) in db.iter_mut().zip(g.row(r)) {
                                *s += d;
                            }
                        }
                        acc(&mut adj, *b, Tensor::vector(db));
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut adj, *a, g.zip_map(y, |d, y| d * (1.0 - y * y)));
                }
                Op::Silu(a) => {
                    acc(
                        &mut adj,
                        *a,
                        g.zip_map(self.value(*a), |d, x| d * silu_slope(x)),
                    );
                }
                Op::Sin(a) => {
                    acc(&mut adj, *a, g.zip_map(self.value(*a), |d, x| d * x.cos()));
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    acc(&mut adj, *a, Tensor::full(self.value(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let s = g.data()[0] / av.len() as f64;
                    acc(&mut adj, *a, Tensor::full(av.shape(), s));
                }
                Op::SqNorm(a) => {
                    let s = 2.0 * g.data()[0];
                    acc(&mut adj, *a, self.value(*a).map(|x| s * x));
                }
                Op::Dot(a, b) => {
                    let s = g.data()[0];
                    if live(*a) {
                        acc(&mut adj, *a, self.value(*b).map(|y| s * y));
                    }
                    if live(*b) {
                        acc(&mut adj, *b, self.value(*a).map(|x| s * x));
                    }
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let c = pv.cols();
                        if live(*p) {
                            let mut data = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                let row = &g.data()[r * total..(r + 1) * total];
                                data.extend_from_slice(&row[offset..offset + c]);
                            }
                            acc(&mut adj, *p, Tensor::new(pv.shape().to_vec(), data)?);
                        }
                        offset += c;
                    }
                }
            }
        }
        for (i, a) in adj.iter().enumerate() {
            if let Some(a) = a {
                check_finite(&self.nodes[i].op, a)?;
            }
        }
        Ok(Gradients { adj })
    }
}

/// Adjoints produced by [`Tape::backward`], keyed by parameter leaf.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for `vars` in order, zeros for leaves the loss did not reach.
    pub fn collect(&self, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|&v| {
                self.get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
                    .with_shape(tape.value(v).shape())
            })
            .collect()
    }
}
