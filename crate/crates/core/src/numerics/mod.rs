//! Dense tensor arithmetic with tape-based reverse-mode differentiation.
//!
//! Everything upstream (scans, blocks, the full encoder-decoder) is built
//! from the operations here. Tensors are immutable f64 buffers recorded on
//! a [`Tape`]; calling [`Tensor::backward`] on a scalar walks the tape in
//! reverse and accumulates gradients into every `requires_grad` leaf.
//!
//! A tape is single-owner and cheap to throw away: training evaluates each
//! batch item on its own tape and merges the extracted gradients in a fixed
//! order, which keeps results bit-identical to sequential evaluation.

mod gradcheck;
mod ops;
mod tensor;

pub use gradcheck::grad_check;
pub use ops::{ScanStrategy, DEFAULT_SCAN_CHUNK};
pub use tensor::{Tape, Tensor};

pub(crate) use ops::scan_parallel_kernel;

use crate::error::Result;

impl Tensor {
    /// The tape this tensor is recorded on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    /// Linear-recurrence scan: h_t = a_t * h_{t-1} + b_t over a [T, D, N]
    /// state, read out against `c` [T, N] with feedthrough `d_skip` [D]
    /// applied to `x` [T, D]. `self` is the decay tensor.
    pub fn linear_scan(
        &self,
        drive: &Tensor,
        c: &Tensor,
        x: &Tensor,
        d_skip: &Tensor,
        strategy: ScanStrategy,
    ) -> Result<Tensor> {
        ops::record_scan(self, drive, c, x, d_skip, strategy)
    }
}
