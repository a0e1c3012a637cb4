use crate::error::{Error, Result};
use crate::numerics::{ScanStrategy, Tensor, DEFAULT_SCAN_CHUNK};

/// One step of the recurrence as a composable (decay, drive) pair.
///
/// Applying an element to a state h gives a * h + b. Composition applies
/// `self` first, then `next`; it is associative, which is what lets the
/// parallel scan re-bracket the recurrence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanElement {
    pub a: f64,
    pub b: f64,
}

impl ScanElement {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    /// Identity under composition: leaves the state unchanged.
    pub fn identity() -> Self {
        Self { a: 1.0, b: 0.0 }
    }

    /// `self` applied first, then `next`.
    pub fn compose(self, next: ScanElement) -> ScanElement {
        ScanElement {
            a: next.a * self.a,
            b: next.a * self.b + next.b,
        }
    }

    pub fn apply(self, h: f64) -> f64 {
        self.a * h + self.b
    }
}

/// Zero-order-hold discretization of the diagonal state matrix, with the
/// simplified Euler drive: A_bar = exp(delta * A), B_bar = delta * B.
///
/// `delta` is [T, D] and strictly positive, `a` is [D, N], `b` is [T, N];
/// both outputs are [T, D, N].
pub fn discretize(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let dshape = delta.shape();
    let [t, d] = <[usize; 2]>::try_from(dshape.as_slice())
        .map_err(|_| Error::Shape(format!("discretize delta must be [T, D], got {dshape:?}")))?;
    let n = {
        let ashape = a.shape();
        if ashape.len() != 2 || ashape[0] != d {
            return Err(Error::Shape(format!(
                "discretize state matrix must be [{d}, N], got {ashape:?}"
            )));
        }
        ashape[1]
    };
    if b.shape() != [t, n] {
        return Err(Error::Shape(format!(
            "discretize input projection must be [{t}, {n}], got {:?}",
            b.shape()
        )));
    }
    if delta.to_vec().iter().any(|&v| v <= 0.0) {
        return Err(Error::Contract(
            "discretize requires strictly positive delta".into(),
        ));
    }
    let delta_col = delta.reshape(&[t, d, 1])?;
    let a_bar = delta_col.mul(a)?.exp()?;
    let b_bar = delta_col.mul(&b.reshape(&[t, 1, n])?)?;
    Ok((a_bar, b_bar))
}

/// Reference evaluation of the selective recurrence, step by step:
/// h_t = A_bar_t * h_{t-1} + B_bar_x_t, y_t = <C_t, h_t> + D_skip * x_t.
pub fn scan_sequential(
    a_bar: &Tensor,
    b_bar_x: &Tensor,
    c: &Tensor,
    x: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    a_bar.linear_scan(b_bar_x, c, x, d_skip, ScanStrategy::Sequential)
}

/// The same recurrence evaluated by a Blelloch-style associative scan over
/// (decay, drive) pairs, partitioned along time at the default chunk size.
pub fn scan_parallel(
    a_bar: &Tensor,
    b_bar_x: &Tensor,
    c: &Tensor,
    x: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    scan_parallel_with_chunk(a_bar, b_bar_x, c, x, d_skip, DEFAULT_SCAN_CHUNK)
}

/// Parallel scan with an explicit time-partition length.
pub fn scan_parallel_with_chunk(
    a_bar: &Tensor,
    b_bar_x: &Tensor,
    c: &Tensor,
    x: &Tensor,
    d_skip: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    a_bar.linear_scan(b_bar_x, c, x, d_skip, ScanStrategy::Parallel { chunk })
}

/// The gated recurrence g_t = sigmoid(W x_t + bias),
/// h_t = (1 - g_t) h_{t-1} + g_t x_t with h_0 = 0.
///
/// This is the illustrative simplification of the selection mechanism; the
/// production block gates multiplicatively instead.
pub fn gated_recurrence(x: &Tensor, gate_w: &Tensor, gate_bias: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let [t, d] = <[usize; 2]>::try_from(shape.as_slice())
        .map_err(|_| Error::Shape(format!("gated_recurrence input must be [T, D], got {shape:?}")))?;
    if gate_w.shape() != [d, d] {
        return Err(Error::Shape(format!(
            "gate weights must be [{d}, {d}], got {:?}",
            gate_w.shape()
        )));
    }
    if gate_bias.shape() != [d] {
        return Err(Error::Shape(format!(
            "gate bias must be [{d}], got {:?}",
            gate_bias.shape()
        )));
    }
    let tape = x.tape();
    let g = x.matmul(gate_w)?.add(gate_bias)?.sigmoid();
    let decay = tape.full(&[t, d], 1.0).sub(&g)?.reshape(&[t, d, 1])?;
    let drive = g.mul(x)?.reshape(&[t, d, 1])?;
    // Read the state out directly: C = 1 over a single state dim, no
    // feedthrough.
    let ones_c = tape.full(&[t, 1], 1.0);
    let zero_x = tape.full(&[t, d], 0.0);
    let zero_skip = tape.full(&[d], 0.0);
    decay.linear_scan(&drive, &ones_c, &zero_x, &zero_skip, ScanStrategy::Sequential)
}
