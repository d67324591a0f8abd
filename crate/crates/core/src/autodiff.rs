//! Reverse-mode differentiation over a scalar tape, Adam, and a
//! finite-difference gradient check.
//!
//! Parameters are read lazily from a borrowed vector: only coordinates a
//! loss touches get leaves, so tabular policies with large parameter
//! vectors stay cheap to differentiate.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Tanh(Var),
    Sum(Vec<Var>),
    Dot(Vec<Var>, Vec<Var>),
    /// `log softmax(inputs)[pick]`, fused for stability.
    LogSoftmax(Vec<Var>, usize),
    /// Forward-only; rejected by the backward pass.
    Round,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: f64,
}

/// Topologically ordered computation record; every node's inputs precede it.
pub struct Tape<'p> {
    theta: &'p [f64],
    nodes: Vec<Node>,
    leaves: HashMap<usize, Var>,
}

/// Sparse gradient: `(parameter index, partial derivative)`, ascending.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub entries: Vec<(usize, f64)>,
}

impl Gradient {
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut g = vec![0.0; n];
        for &(i, d) in &self.entries {
            if i < n {
                g[i] += d;
            }
        }
        g
    }
}

impl<'p> Tape<'p> {
    pub fn new(theta: &'p [f64]) -> Self {
        Self { theta, nodes: Vec::with_capacity(256), leaves: HashMap::new() }
    }

    pub fn theta(&self) -> &'p [f64] {
        self.theta
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Const, value)
    }

    /// Leaf for `theta[index]`; repeated calls share one node.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(&v) = self.leaves.get(&index) {
            return v;
        }
        let v = self.push(Op::Param(index), self.theta[index]);
        self.leaves.insert(index, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b), self.value(a) + self.value(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b), self.value(a) - self.value(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b), self.value(a) * self.value(b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a, b), self.value(a) / self.value(b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a), -self.value(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::Scale(a, k), k * self.value(a))
    }

    /// `a + k` for a constant `k`.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::Offset(a), self.value(a) + k)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a), self.value(a).ln())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a), self.value(a).exp())
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(Op::Square(a), x * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a), self.value(a).tanh())
    }

    pub fn round(&mut self, a: Var) -> Var {
        self.push(Op::Round, self.value(a).round())
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.value(x)).sum();
        self.push(Op::Sum(xs.to_vec()), v)
    }

    /// `Σ w_i x_i`.
    pub fn dot(&mut self, ws: &[Var], xs: &[Var]) -> Var {
        assert_eq!(ws.len(), xs.len(), "dot operands differ in length");
        let v = ws.iter().zip(xs).map(|(&w, &x)| self.value(w) * self.value(x)).sum();
        self.push(Op::Dot(ws.to_vec(), xs.to_vec()), v)
    }

    /// `log softmax(logits)[pick]`.
    pub fn log_softmax(&mut self, logits: &[Var], pick: usize) -> Var {
        assert!(pick < logits.len(), "log_softmax pick out of range");
        let lse = crate::util::log_sum_exp(logits.iter().map(|&x| self.value(x)));
        let v = self.value(logits[pick]) - lse;
        self.push(Op::LogSoftmax(logits.to_vec(), pick), v)
    }

    /// `softplus(x) = log(1 + e^x)`, built from primitives with the branch
    /// chosen on the forward value for stability.
    pub fn softplus(&mut self, x: Var) -> Var {
        if self.value(x) > 0.0 {
            let nx = self.neg(x);
            let e = self.exp(nx);
            let l = self.offset(e, 1.0);
            let l = self.log(l);
            self.add(x, l)
        } else {
            let e = self.exp(x);
            let l = self.offset(e, 1.0);
            self.log(l)
        }
    }

    /// Reverse sweep from `out`.
    pub fn backward(&self, out: Var) -> Result<Gradient> {
        let mut adj = vec![0.0; out.0 + 1];
        adj[out.0] = 1.0;
        let mut grads: HashMap<usize, f64> = HashMap::new();
        for i in (0..=out.0).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = &self.nodes[i];
            let val = |v: Var| self.nodes[v.0].value;
            match &node.op {
                Op::Const => {}
                Op::Param(p) => *grads.entry(*p).or_default() += g,
                Op::Add(a, b) => {
                    adj[a.0] += g;
                    adj[b.0] += g;
                }
                Op::Sub(a, b) => {
                    adj[a.0] += g;
                    adj[b.0] -= g;
                }
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    adj[a.0] += g * y;
                    adj[b.0] += g * x;
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    adj[a.0] += g / y;
                    adj[b.0] -= g * x / (y * y);
                }
                Op::Neg(a) => adj[a.0] -= g,
                Op::Scale(a, k) => adj[a.0] += g * k,
                Op::Offset(a) => adj[a.0] += g,
                Op::Log(a) => adj[a.0] += g / val(*a),
                Op::Exp(a) => adj[a.0] += g * node.value,
                Op::Square(a) => adj[a.0] += 2.0 * g * val(*a),
                Op::Tanh(a) => adj[a.0] += g * (1.0 - node.value * node.value),
                Op::Sum(xs) => {
                    for x in xs {
                        adj[x.0] += g;
                    }
                }
                Op::Dot(ws, xs) => {
                    for (w, x) in ws.iter().zip(xs) {
                        let (wv, xv) = (val(*w), val(*x));
                        adj[w.0] += g * xv;
                        adj[x.0] += g * wv;
                    }
                }
                Op::LogSoftmax(xs, pick) => {
                    // d/dx_j = [j == pick] - softmax_j
                    let lse = crate::util::log_sum_exp(xs.iter().map(|&x| val(x)));
                    for (j, x) in xs.iter().enumerate() {
                        let p = (val(*x) - lse).exp();
                        let d = if j == *pick { 1.0 - p } else { -p };
                        adj[x.0] += g * d;
                    }
                }
                Op::Round => return Err(Error::UnsupportedPrimitive("round")),
            }
        }
        let mut entries: Vec<(usize, f64)> = grads.into_iter().collect();
        entries.sort_unstable_by_key(|&(i, _)| i);
        Ok(Gradient { entries })
    }
}

/// Dense gradient of a scalar loss built on a tape over `theta`.
pub fn grad<F>(loss_fn: F, theta: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(theta);
    let out = loss_fn(&mut tape)?;
    Ok(tape.backward(out)?.to_dense(theta.len()))
}

/// Loss value at `theta`.
pub fn evaluate<F>(loss_fn: F, theta: &[f64]) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(theta);
    let out = loss_fn(&mut tape)?;
    Ok(tape.value(out))
}

/// Max over coordinates of `|analytic - central difference| / max(|analytic|, floor)`.
///
/// A central difference carries roundoff of about `ε·|f|/h`, which swamps a
/// gradient that is exactly zero. `floor` is `1e5·ε·max(|f|, 1)/h` (at least
/// `1e-8`), so roundoff alone scores around 1e-5.
pub fn finite_diff_check<F>(loss_fn: F, theta: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = grad(&loss_fn, theta)?;
    let f0 = evaluate(&loss_fn, theta)?;
    let floor = (1e5 * f64::EPSILON * f0.abs().max(1.0) / h).max(1e-8);
    let mut work = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        work[i] = theta[i] + h;
        let up = evaluate(&loss_fn, &work)?;
        work[i] = theta[i] - h;
        let down = evaluate(&loss_fn, &work)?;
        work[i] = theta[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Learning rate used in the original large-model recipe; kept for reference.
pub const PAPER_LR: f64 = 3e-6;
pub const DEFAULT_LR: f64 = 1e-3;

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Grows the moment vectors for newly allocated parameters. New
    /// coordinates start at zero, which is exactly the state they would have
    /// had after receiving only zero gradients.
    pub fn resize(&mut self, n: usize) {
        if n > self.m.len() {
            self.m.resize(n, 0.0);
            self.v.resize(n, 0.0);
        }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() {
            return Err(Error::DimensionMismatch { expected: self.m.len(), got: theta.len() });
        }
        if g.len() != theta.len() {
            return Err(Error::DimensionMismatch { expected: theta.len(), got: g.len() });
        }
        self.t += 1;
        let (c1, c2) = self.corrections();
        for (i, &gi) in g.iter().enumerate() {
            self.update(theta, i, gi, c1, c2);
        }
        Ok(())
    }

    /// Same update as [`AdamState::step`] with a sparse gradient.
    pub fn step_sparse(&mut self, theta: &mut [f64], g: &Gradient) -> Result<()> {
        if theta.len() != self.m.len() {
            return Err(Error::DimensionMismatch { expected: self.m.len(), got: theta.len() });
        }
        if let Some(&(i, _)) = g.entries.last() {
            if i >= theta.len() {
                return Err(Error::DimensionMismatch { expected: theta.len(), got: i + 1 });
            }
        }
        self.t += 1;
        let (c1, c2) = self.corrections();
        let mut next = g.entries.iter().peekable();
        for i in 0..theta.len() {
            let mut gi = 0.0;
            while let Some(&&(j, d)) = next.peek() {
                if j != i {
                    break;
                }
                gi += d;
                next.next();
            }
            if gi == 0.0 && self.m[i] == 0.0 && self.v[i] == 0.0 {
                continue;
            }
            self.update(theta, i, gi, c1, c2);
        }
        Ok(())
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.t as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    #[inline]
    fn update(&mut self, theta: &mut [f64], i: usize, g: f64, c1: f64, c2: f64) {
        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
        let mhat = self.m[i] / c1;
        let vhat = self.v[i] / c2;
        theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
    }
}
