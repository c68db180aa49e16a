//! Reverse-mode automatic differentiation over scalar computation graphs.
//!
//! A [`Tape`] is an append-only arena of scalar nodes. Every node's parents
//! were pushed before it, so the arena order is a topological order and a
//! single reverse sweep visits each node exactly once, in reverse topological
//! order. Gradients are exact partial derivatives of the root with respect to
//! every reachable operand.
//!
//! Operands live in one of three address spaces:
//!
//! - **nodes** — values computed on this tape (leaves and op results),
//! - **tracked** — a flat parameter vector whose gradients are requested,
//! - **frozen** — a flat parameter vector treated as constants (read during
//!   the forward pass, skipped during the backward pass).
//!
//! Matrix products are expressed with fused [`Op::Dot`] nodes over contiguous
//! runs, which keeps both passes cache-friendly; everything else is plain
//! scalar ops. All arithmetic is `f64`.

use crate::error::{Error, Result};

const TAG_SHIFT: u32 = 30;
const OFF_MASK: u32 = (1 << TAG_SHIFT) - 1;
const TAG_NODE: u32 = 0;
const TAG_TRACKED: u32 = 1;
const TAG_FROZEN: u32 = 2;

/// A node handle on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A space-tagged operand index: a tape node, a tracked-parameter slot, or a
/// frozen-parameter slot.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Ix(u32);

impl Ix {
    /// Sentinel for "no operand" (e.g. a dot product without a bias term).
    pub const NONE: Ix = Ix(u32::MAX);

    pub fn tracked(offset: usize) -> Ix {
        debug_assert!(offset < OFF_MASK as usize);
        Ix((TAG_TRACKED << TAG_SHIFT) | offset as u32)
    }

    pub fn frozen(offset: usize) -> Ix {
        debug_assert!(offset < OFF_MASK as usize);
        Ix((TAG_FROZEN << TAG_SHIFT) | offset as u32)
    }

    #[inline]
    fn split(self) -> (u32, usize) {
        (self.0 >> TAG_SHIFT, (self.0 & OFF_MASK) as usize)
    }
}

impl From<Var> for Ix {
    fn from(v: Var) -> Ix {
        Ix(v.0)
    }
}

/// Which parameter space a network's weights are bound to on the current tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Space {
    /// Gradients are accumulated for these parameters.
    Tracked,
    /// Parameters are read-only constants for this tape.
    Frozen,
}

impl Space {
    pub fn ix(self, offset: usize) -> Ix {
        match self {
            Space::Tracked => Ix::tracked(offset),
            Space::Frozen => Ix::frozen(offset),
        }
    }
}

/// A contiguous run of nodes, used for vector-shaped intermediate values.
#[derive(Clone, Copy, Debug)]
pub struct NodeRange {
    pub start: u32,
    pub len: u32,
}

impl NodeRange {
    pub fn var(&self, k: usize) -> Var {
        debug_assert!((k as u32) < self.len);
        Var(self.start + k as u32)
    }

    pub fn iter(&self) -> impl Iterator<Item = Var> {
        let (s, l) = (self.start, self.len);
        (s..s + l).map(Var)
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Ix, Ix),
    Sub(Ix, Ix),
    Mul(Ix, Ix),
    Div(Ix, Ix),
    Neg(Ix),
    Scale(Ix, f64),
    Offset(Ix),
    Relu(Ix),
    Abs(Ix),
    Exp(Ix),
    Ln(Ix),
    Sqrt(Ix),
    Recip(Ix),
    Softplus(Ix),
    /// Fused dot product: sum_k w[k] * nodes[xs + k], plus an optional bias
    /// operand. `w` is the base of a contiguous run in any space; `xs` is a
    /// contiguous node run.
    Dot { w: Ix, xs: u32, len: u32, bias: Ix },
    /// Sum of a contiguous node run.
    Sum { start: u32, len: u32 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Softplus(..) => "softplus",
            Op::Dot { .. } => "dot",
            Op::Sum { .. } => "sum",
        }
    }
}

/// Reusable tape storage, so batch loops do not re-allocate per sample.
#[derive(Default)]
pub struct TapeBuffers {
    ops: Vec<Op>,
    values: Vec<f64>,
    grads: Vec<f64>,
}

/// Scalar computation graph bound to a tracked and a frozen parameter vector.
///
/// Either slice may be empty. The tape may be `reset` and rebuilt while the
/// bound parameters are unchanged; rebinding requires a new tape (recycle the
/// storage through [`Tape::into_buffers`]).
pub struct Tape<'a> {
    tracked: &'a [f64],
    frozen: &'a [f64],
    ops: Vec<Op>,
    values: Vec<f64>,
    grads: Vec<f64>,
}

impl<'a> Tape<'a> {
    pub fn new(tracked: &'a [f64], frozen: &'a [f64]) -> Tape<'a> {
        Tape::from_buffers(TapeBuffers::default(), tracked, frozen)
    }

    pub fn from_buffers(mut bufs: TapeBuffers, tracked: &'a [f64], frozen: &'a [f64]) -> Tape<'a> {
        bufs.ops.clear();
        bufs.values.clear();
        bufs.grads.clear();
        Tape { tracked, frozen, ops: bufs.ops, values: bufs.values, grads: bufs.grads }
    }

    pub fn into_buffers(self) -> TapeBuffers {
        TapeBuffers { ops: self.ops, values: self.values, grads: self.grads }
    }

    /// Drop all nodes, keeping capacity and parameter bindings.
    pub fn reset(&mut self) {
        self.ops.clear();
        self.values.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Index the next pushed node will get.
    pub fn next_index(&self) -> u32 {
        self.ops.len() as u32
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    #[inline]
    fn fetch(&self, ix: Ix) -> f64 {
        let (tag, off) = ix.split();
        match tag {
            TAG_NODE => self.values[off],
            TAG_TRACKED => self.tracked[off],
            _ => self.frozen[off],
        }
    }

    /// Read an operand by space-tagged index (for tests and diagnostics).
    pub fn operand(&self, ix: Ix) -> f64 {
        self.fetch(ix)
    }

    #[inline]
    fn push(&mut self, op: Op, value: f64) -> Var {
        let idx = self.ops.len() as u32;
        assert!(idx < OFF_MASK, "tape overflow");
        self.ops.push(op);
        self.values.push(value);
        Var(idx)
    }

    // ── node constructors ────────────────────────────────────────────

    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Push a contiguous run of leaves.
    pub fn leaves(&mut self, values: &[f64]) -> NodeRange {
        let start = self.next_index();
        for &v in values {
            self.leaf(v);
        }
        NodeRange { start, len: values.len() as u32 }
    }

    pub fn add(&mut self, a: impl Into<Ix>, b: impl Into<Ix>) -> Var {
        let (a, b) = (a.into(), b.into());
        let v = self.fetch(a) + self.fetch(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: impl Into<Ix>, b: impl Into<Ix>) -> Var {
        let (a, b) = (a.into(), b.into());
        let v = self.fetch(a) - self.fetch(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: impl Into<Ix>, b: impl Into<Ix>) -> Var {
        let (a, b) = (a.into(), b.into());
        let v = self.fetch(a) * self.fetch(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: impl Into<Ix>, b: impl Into<Ix>) -> Var {
        let (a, b) = (a.into(), b.into());
        let v = self.fetch(a) / self.fetch(b);
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, a: impl Into<Ix>) -> Var {
        let a = a.into();
        let v = -self.fetch(a);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: impl Into<Ix>, c: f64) -> Var {
        let a = a.into();
        let v = self.fetch(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn offset(&mut self, a: impl Into<Ix>, c: f64) -> Var {
        let a = a.into();
        let v = self.fetch(a) + c;
        self.push(Op::Offset(a), v)
    }

    /// Copy an operand into a fresh node (gradient passes through).
    pub fn copy(&mut self, a: impl Into<Ix>) -> Var {
        self.scale(a, 1.0)
    }

    /// Rectifier; the subgradient at the kink is 0.
    pub fn relu(&mut self, a: impl Into<Ix>) -> Var {
        let a = a.into();
        let v = self.fetch(a).max(0.0);
        self.push(Op::Relu(a), v)
    }

    /// Absolute value; the subgradient at the kink is 0.
    pub fn abs(&mut self, a: impl Into<Ix>) -> Var {
        let a = a.into();
        let v = self.fetch(a).abs();
        self.push(Op::Abs(a), v)
    }

    pub fn exp(&mut self, a: impl Into<Ix>) -> Var {
        let a = a.into();
        let v = self.fetch(a).exp();
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: impl Into<Ix>) -> Var {
        let a = a.into();
        let v = self.fetch(a).ln();
        self.push(Op::Ln(a), v)
    }

    pub fn sqrt(&mut self, a: impl Into<Ix>) -> Var {
        let a = a.into();
        let v = self.fetch(a).sqrt();
        self.push(Op::Sqrt(a), v)
    }

    pub fn recip(&mut self, a: impl Into<Ix>) -> Var {
        let a = a.into();
        let v = self.fetch(a).recip();
        self.push(Op::Recip(a), v)
    }

    /// Numerically stable ln(1 + exp(a)).
    pub fn softplus(&mut self, a: impl Into<Ix>) -> Var {
        let a = a.into();
        let x = self.fetch(a);
        let v = x.max(0.0) + (-x.abs()).exp().ln_1p();
        self.push(Op::Softplus(a), v)
    }

    /// Fused dot product of a contiguous operand run `w` (any space) against a
    /// contiguous node run `xs`, plus an optional bias operand.
    pub fn dot(&mut self, w: Ix, xs: NodeRange, bias: Ix) -> Var {
        let len = xs.len();
        let (tag, off) = w.split();
        let x_vals = &self.values[xs.start as usize..xs.start as usize + len];
        let w_vals: &[f64] = match tag {
            TAG_NODE => &self.values[off..off + len],
            TAG_TRACKED => &self.tracked[off..off + len],
            _ => &self.frozen[off..off + len],
        };
        let mut acc = 0.0;
        for k in 0..len {
            acc += w_vals[k] * x_vals[k];
        }
        if bias != Ix::NONE {
            acc += self.fetch(bias);
        }
        self.push(Op::Dot { w, xs: xs.start, len: len as u32, bias }, acc)
    }

    /// Dot product of two contiguous node runs.
    pub fn dot_nodes(&mut self, a: NodeRange, b: NodeRange, bias: Ix) -> Var {
        debug_assert_eq!(a.len, b.len);
        self.dot(Ix(a.start), b, bias)
    }

    /// Sum of a contiguous node run.
    pub fn sum_range(&mut self, r: NodeRange) -> Var {
        let s = self.values[r.start as usize..r.start as usize + r.len()].iter().sum();
        self.push(Op::Sum { start: r.start, len: r.len }, s)
    }

    pub fn mean_range(&mut self, r: NodeRange) -> Var {
        let s = self.sum_range(r);
        self.scale(s, 1.0 / r.len() as f64)
    }

    // ── backward pass ────────────────────────────────────────────────

    /// Gradient of the last backward pass with respect to a node.
    pub fn grad(&self, v: Var) -> f64 {
        self.grads[v.index()]
    }

    /// Run the backward pass from a scalar root. Gradients with respect to
    /// tracked parameters are *added* into `tracked_acc`, which must have the
    /// tracked vector's length; node gradients are kept on the tape and can
    /// be read with [`Tape::grad`].
    pub fn backward_into(&mut self, root: Var, tracked_acc: &mut [f64]) -> Result<()> {
        if tracked_acc.len() != self.tracked.len() {
            return Err(Error::Contract(format!(
                "gradient accumulator length {} does not match tracked parameter length {}",
                tracked_acc.len(),
                self.tracked.len()
            )));
        }
        let ri = root.index();
        if !self.values[ri].is_finite() {
            return Err(self.numeric_err(ri));
        }
        self.grads.clear();
        self.grads.resize(self.ops.len(), 0.0);
        self.grads[ri] = 1.0;

        // Reverse topological sweep; nodes pushed after the root cannot
        // influence it and are skipped.
        for i in (0..=ri).rev() {
            let g = self.grads[i];
            if g == 0.0 {
                continue;
            }
            if !self.values[i].is_finite() {
                return Err(self.numeric_err(i));
            }
            let op = self.ops[i];
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.bump(a, g, i, tracked_acc)?;
                    self.bump(b, g, i, tracked_acc)?;
                }
                Op::Sub(a, b) => {
                    self.bump(a, g, i, tracked_acc)?;
                    self.bump(b, -g, i, tracked_acc)?;
                }
                Op::Mul(a, b) => {
                    let (fa, fb) = (self.fetch(a), self.fetch(b));
                    self.bump(a, g * fb, i, tracked_acc)?;
                    self.bump(b, g * fa, i, tracked_acc)?;
                }
                Op::Div(a, b) => {
                    let fb = self.fetch(b);
                    let z = self.values[i];
                    self.bump(a, g / fb, i, tracked_acc)?;
                    self.bump(b, -g * z / fb, i, tracked_acc)?;
                }
                Op::Neg(a) => self.bump(a, -g, i, tracked_acc)?,
                Op::Scale(a, c) => self.bump(a, g * c, i, tracked_acc)?,
                Op::Offset(a) => self.bump(a, g, i, tracked_acc)?,
                Op::Relu(a) => {
                    if self.fetch(a) > 0.0 {
                        self.bump(a, g, i, tracked_acc)?;
                    }
                }
                Op::Abs(a) => {
                    let fa = self.fetch(a);
                    let s = if fa > 0.0 {
                        1.0
                    } else if fa < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    self.bump(a, g * s, i, tracked_acc)?;
                }
                Op::Exp(a) => {
                    let z = self.values[i];
                    self.bump(a, g * z, i, tracked_acc)?;
                }
                Op::Ln(a) => {
                    let fa = self.fetch(a);
                    self.bump(a, g / fa, i, tracked_acc)?;
                }
                Op::Sqrt(a) => {
                    let z = self.values[i];
                    self.bump(a, g * 0.5 / z, i, tracked_acc)?;
                }
                Op::Recip(a) => {
                    let z = self.values[i];
                    self.bump(a, -g * z * z, i, tracked_acc)?;
                }
                Op::Softplus(a) => {
                    let fa = self.fetch(a);
                    let sig = 1.0 / (1.0 + (-fa).exp());
                    self.bump(a, g * sig, i, tracked_acc)?;
                }
                Op::Dot { w, xs, len, bias } => {
                    let len = len as usize;
                    let xs = xs as usize;
                    if xs + len > i {
                        return Err(self.structural_err(i));
                    }
                    let (tag, off) = w.split();
                    match tag {
                        TAG_NODE => {
                            if off + len > i {
                                return Err(self.structural_err(i));
                            }
                            for k in 0..len {
                                let (wv, xv) = (self.values[off + k], self.values[xs + k]);
                                self.grads[xs + k] += g * wv;
                                self.grads[off + k] += g * xv;
                            }
                        }
                        TAG_TRACKED => {
                            for k in 0..len {
                                let (wv, xv) = (self.tracked[off + k], self.values[xs + k]);
                                self.grads[xs + k] += g * wv;
                                tracked_acc[off + k] += g * xv;
                            }
                        }
                        _ => {
                            for k in 0..len {
                                self.grads[xs + k] += g * self.frozen[off + k];
                            }
                        }
                    }
                    if bias != Ix::NONE {
                        self.bump(bias, g, i, tracked_acc)?;
                    }
                }
                Op::Sum { start, len } => {
                    let (start, len) = (start as usize, len as usize);
                    if start + len > i {
                        return Err(self.structural_err(i));
                    }
                    for k in start..start + len {
                        self.grads[k] += g;
                    }
                }
            }
        }
        Ok(())
    }

    /// Backward pass returning a fresh tracked-gradient vector.
    pub fn backward(&mut self, root: Var) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.tracked.len()];
        self.backward_into(root, &mut acc)?;
        Ok(acc)
    }

    #[inline]
    fn bump(&mut self, ix: Ix, g: f64, child: usize, tracked_acc: &mut [f64]) -> Result<()> {
        let (tag, off) = ix.split();
        match tag {
            TAG_NODE => {
                if off >= child {
                    return Err(self.structural_err(child));
                }
                self.grads[off] += g;
            }
            TAG_TRACKED => tracked_acc[off] += g,
            _ => {}
        }
        Ok(())
    }

    fn numeric_err(&self, node: usize) -> Error {
        Error::Numeric(format!(
            "non-finite value {} at node {} ({})",
            self.values[node],
            node,
            self.ops[node].name()
        ))
    }

    fn structural_err(&self, node: usize) -> Error {
        Error::Structural(format!(
            "node {} ({}) references a non-ancestor node; graph is not in topological order",
            node,
            self.ops[node].name()
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_gradient() {
        let mut t = Tape::new(&[], &[]);
        let x = t.leaf(3.0);
        t.backward(x).unwrap();
        assert_eq!(t.grad(x), 1.0);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new(&[], &[]);
        let x = t.leaf(2.0);
        let y = t.leaf(5.0);
        let z = t.mul(x, y);
        t.backward(z).unwrap();
        assert_eq!(t.grad(x), 5.0);
        assert_eq!(t.grad(y), 2.0);
    }

    #[test]
    fn tracked_params_get_gradients() {
        let params = [2.0, -3.0];
        let mut t = Tape::new(&params, &[]);
        let x = t.leaf(4.0);
        // z = p0 * x + p1
        let z = t.dot(Ix::tracked(0), NodeRange { start: x.0, len: 1 }, Ix::tracked(1));
        let g = t.backward(z).unwrap();
        assert_eq!(g, vec![4.0, 1.0]);
        assert_eq!(t.grad(x), 2.0);
    }

    #[test]
    fn frozen_params_get_no_gradients() {
        let frozen = [7.0];
        let mut t = Tape::new(&[], &frozen);
        let x = t.leaf(2.0);
        let z = t.mul(x, Ix::frozen(0));
        assert_eq!(t.value(z), 14.0);
        t.backward(z).unwrap();
        assert_eq!(t.grad(x), 7.0);
    }

    #[test]
    fn nonfinite_value_is_reported() {
        let mut t = Tape::new(&[], &[]);
        let x = t.leaf(-1.0);
        let z = t.ln(x); // NaN
        let err = t.backward(z).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("ln"));
    }

    #[test]
    fn softmax_composite_matches_finite_differences() {
        // softmax cross-term: f(v) = sum_i softmax(v)_i * w_i with both v and
        // w as leaves, checked against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = 5;
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let eval = |v: &[f64], w: &[f64], t: &mut Tape| -> Var {
                let vr = t.leaves(v);
                let wr = t.leaves(w);
                let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps_start = t.next_index();
                for i in 0..v.len() {
                    let s = t.offset(vr.var(i), -m);
                    let _ = t.exp(s);
                    let _ = s; // offsets interleave; gather exps below
                }
                // gather exp nodes into a contiguous run
                let gathered = t.next_index();
                for i in 0..v.len() {
                    let e = Var(exps_start + 2 * i as u32 + 1);
                    t.copy(e);
                }
                let exps = NodeRange { start: gathered, len: v.len() as u32 };
                let denom = t.sum_range(exps);
                let probs_start = t.next_index();
                for i in 0..v.len() {
                    t.div(exps.var(i), denom);
                }
                let probs = NodeRange { start: probs_start, len: v.len() as u32 };
                t.dot_nodes(probs, wr, Ix::NONE)
            };
            let mut tape = Tape::new(&[], &[]);
            let root = eval(&v, &w, &mut tape);
            tape.backward(root).unwrap();
            let ad: Vec<f64> = (0..n).map(|i| tape.grad(Var(i as u32))).collect();

            let h = 1e-5;
            for i in 0..n {
                let mut vp = v.clone();
                vp[i] += h;
                let mut tp = Tape::new(&[], &[]);
                let rp = eval(&vp, &w, &mut tp);
                let fp = tp.value(rp);
                vp[i] -= 2.0 * h;
                let mut tm = Tape::new(&[], &[]);
                let rm = eval(&vp, &w, &mut tm);
                let fm = tm.value(rm);
                let fd = (fp - fm) / (2.0 * h);
                let rel = (ad[i] - fd).abs() / fd.abs().max(1.0);
                assert!(rel < 1e-4, "grad mismatch: ad={} fd={}", ad[i], fd);
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let build = |t: &mut Tape| -> (Var, Var) {
            let a = t.leaf(1.25);
            let b = t.leaf(-0.75);
            let c = t.mul(a, b);
            let d = t.exp(c);
            let e = t.add(d, a);
            let f = t.offset(e, 2.0);
            let g = t.sqrt(f);
            (a, g)
        };
        let mut ta = Tape::new(&[], &[]);
        let (a1, r1) = build(&mut ta);
        ta.backward(r1).unwrap();
        let mut tb = Tape::new(&[], &[]);
        let (a2, r2) = build(&mut tb);
        tb.backward(r2).unwrap();
        assert_eq!(ta.grad(a1).to_bits(), tb.grad(a2).to_bits());
    }

    #[test]
    fn nodes_after_root_are_ignored() {
        let mut t = Tape::new(&[], &[]);
        let x = t.leaf(2.0);
        let root = t.mul(x, x);
        let _later = t.exp(root);
        t.backward(root).unwrap();
        assert_eq!(t.grad(x), 4.0);
    }

    #[test]
    fn buffers_are_recyclable() {
        let mut bufs = TapeBuffers::default();
        for i in 0..3 {
            let params = [i as f64 + 1.0];
            let mut t = Tape::from_buffers(bufs, &params, &[]);
            let x = t.leaf(3.0);
            let z = t.mul(x, Ix::tracked(0));
            let g = t.backward(z).unwrap();
            assert_eq!(g[0], 3.0);
            bufs = t.into_buffers();
        }
    }
}
