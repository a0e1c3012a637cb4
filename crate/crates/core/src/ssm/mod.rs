//! Selective state-space machinery: discretization, the sequential and
//! parallel scans, the illustrative gated recurrence, and the Mamba block.

mod block;
mod scan;

pub use block::{
    mamba_block, mamba_block_core, register_block_params, BlockDims, BlockParamRefs,
    BlockStepState, LN_EPS,
};
pub use scan::{discretize, gated_recurrence, scan_parallel, scan_parallel_with_chunk, scan_sequential, ScanElement};

pub use crate::numerics::{ScanStrategy, DEFAULT_SCAN_CHUNK};
