//! Small tape-level layer builders shared by the pose lifter and the energy
//! networks. Every builder has a value-only twin that performs the identical
//! arithmetic in the same order, so detached forward passes are bit-identical
//! to tape forward passes.

use rand::Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{NodeRange, Space, Tape};

/// Resolved offsets of one linear layer inside a flat parameter vector.
/// Weights are stored row-major: row r of `w` starts at `w + r * in_dim`.
#[derive(Clone, Copy, Debug)]
pub struct LinearLayout {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayout {
    /// Register uniformly initialized weights and zero biases under
    /// `name.w` / `name.b`, with bound `init_scale / sqrt(in_dim)`.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<LinearLayout> {
        let bound = init_scale / (in_dim as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), in_dim * out_dim, bound, rng)?;
        let b = store.add_zeros(&format!("{name}.b"), out_dim)?;
        Ok(LinearLayout { w, b, in_dim, out_dim })
    }

    /// Resolve an already registered layer.
    pub fn resolve(store: &ParamStore, name: &str) -> Result<LinearLayout> {
        let (w, wl) = store.range(&format!("{name}.w"))?;
        let (b, out_dim) = store.range(&format!("{name}.b"))?;
        Ok(LinearLayout { w, b, in_dim: wl / out_dim, out_dim })
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

/// y = W x + b on the tape.
pub fn linear(tape: &mut Tape, space: Space, lay: &LinearLayout, x: NodeRange) -> NodeRange {
    debug_assert_eq!(x.len(), lay.in_dim);
    let start = tape.next_index();
    for r in 0..lay.out_dim {
        tape.dot(space.ix(lay.w + r * lay.in_dim), x, space.ix(lay.b + r));
    }
    NodeRange { start, len: lay.out_dim as u32 }
}

/// Value-only linear layer with the same accumulation order as [`linear`].
pub fn linear_value(params: &[f64], lay: &LinearLayout, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for r in 0..lay.out_dim {
        let row = &params[lay.w + r * lay.in_dim..lay.w + (r + 1) * lay.in_dim];
        let mut acc = 0.0;
        for k in 0..lay.in_dim {
            acc += row[k] * x[k];
        }
        acc += params[lay.b + r];
        out.push(acc);
    }
}

pub fn relu_range(tape: &mut Tape, x: NodeRange) -> NodeRange {
    let start = tape.next_index();
    for v in x.iter() {
        tape.relu(v);
    }
    NodeRange { start, len: x.len }
}

pub fn relu_value(x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(x.iter().map(|&v| v.max(0.0)));
}

/// Element-wise sum of two equal-length runs.
pub fn add_ranges(tape: &mut Tape, a: NodeRange, b: NodeRange) -> NodeRange {
    debug_assert_eq!(a.len, b.len);
    let start = tape.next_index();
    for k in 0..a.len() {
        tape.add(a.var(k), b.var(k));
    }
    NodeRange { start, len: a.len }
}

pub fn add_value(a: &[f64], b: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(a.iter().zip(b).map(|(&x, &y)| x + y));
}

/// Offsets of a layer-norm's gain and bias vectors.
#[derive(Clone, Copy, Debug)]
pub struct NormLayout {
    pub gain: usize,
    pub bias: usize,
    pub dim: usize,
}

impl NormLayout {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Result<NormLayout> {
        let gain = store.add(&format!("{name}.g"), vec![1.0; dim])?;
        let bias = store.add_zeros(&format!("{name}.b"), dim)?;
        Ok(NormLayout { gain, bias, dim })
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Layer normalization with learnable gain and bias.
pub fn layer_norm(tape: &mut Tape, space: Space, lay: &NormLayout, x: NodeRange) -> NodeRange {
    debug_assert_eq!(x.len(), lay.dim);
    let n = lay.dim as f64;
    let sum = tape.sum_range(x);
    let mean = tape.scale(sum, 1.0 / n);
    let cent_start = tape.next_index();
    for v in x.iter() {
        tape.sub(v, mean);
    }
    let cent = NodeRange { start: cent_start, len: x.len };
    let sq_start = tape.next_index();
    for v in cent.iter() {
        tape.mul(v, v);
    }
    let sq = NodeRange { start: sq_start, len: x.len };
    let var_sum = tape.sum_range(sq);
    let var = tape.scale(var_sum, 1.0 / n);
    let var_eps = tape.offset(var, NORM_EPS);
    let std = tape.sqrt(var_eps);
    let inv = tape.recip(std);
    let unit_start = tape.next_index();
    for k in 0..x.len() {
        tape.mul(cent.var(k), inv);
    }
    let unit = NodeRange { start: unit_start, len: x.len };
    let scaled_start = tape.next_index();
    for k in 0..x.len() {
        tape.mul(unit.var(k), space.ix(lay.gain + k));
    }
    let scaled = NodeRange { start: scaled_start, len: x.len };
    let out_start = tape.next_index();
    for k in 0..x.len() {
        tape.add(scaled.var(k), space.ix(lay.bias + k));
    }
    NodeRange { start: out_start, len: x.len }
}
