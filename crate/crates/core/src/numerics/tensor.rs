use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::ops::Op;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub op: Op,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    /// Accumulated gradients, parallel to `nodes`. Persist across backward
    /// calls so repeated passes add up.
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Recording tape for reverse-mode differentiation.
///
/// Cloning a `Tape` clones the handle, not the recording; all tensors
/// created through the same tape share one node arena.
#[derive(Clone)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    pub(crate) fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        inner.grads.push(None);
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// Creates a leaf tensor from explicit data.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn zeros(&self, shape: &[usize], requires_grad: bool) -> Tensor {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], requires_grad, Op::Leaf)
    }

    pub fn full(&self, shape: &[usize], value: f64) -> Tensor {
        self.push(shape.to_vec(), vec![value; numel(shape)], false, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to one value on a [`Tape`].
///
/// The underlying buffer is immutable after creation; gradients accumulate
/// separately on the tape.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.tape.inner.borrow().nodes[self.id].shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Copies the value out of the tape.
    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        assert_eq!(node.data.len(), 1, "scalar_value on non-scalar tensor");
        node.data[0]
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    /// Clears this tensor's accumulated gradient.
    pub fn zero_grad(&self) {
        self.tape.inner.borrow_mut().grads[self.id] = None;
    }

    pub(crate) fn same_tape(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.tape.inner, &other.tape.inner)
    }

    /// Runs reverse-mode accumulation from this scalar.
    ///
    /// Each call performs a fresh pass seeded with 1 and adds the result
    /// into the persistent gradients, so two calls double what one call
    /// produces.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            if node.data.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward requires a scalar, got shape {:?}",
                    node.shape
                )));
            }
        }
        let mut inner = self.tape.inner.borrow_mut();
        let TapeInner { nodes, grads } = &mut *inner;

        // Local pass buffers; merged into `grads` at the end.
        let mut local: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        local[self.id] = Some(vec![1.0]);

        for i in (0..=self.id).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = local[i].take() else { continue };
            super::ops::backward_step(nodes, &mut local, i, &gout);
            // Keep this node's own contribution.
            local[i] = Some(gout);
        }

        for (slot, contribution) in grads.iter_mut().zip(local.into_iter()) {
            if let Some(c) = contribution {
                match slot {
                    Some(g) => {
                        for (gi, ci) in g.iter_mut().zip(&c) {
                            *gi += ci;
                        }
                    }
                    None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

/// How a binary elementwise op maps each input into the output index space.
///
/// Broadcasting is restricted to stretching axes of extent 1; ranks may
/// differ by at most one leading axis.
#[derive(Debug, Clone)]
pub(crate) struct BroadcastPlan {
    pub out_shape: Vec<usize>,
    pub a_strides: Vec<usize>,
    pub b_strides: Vec<usize>,
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for (stride, extent) in strides.iter_mut().zip(shape).rev() {
        *stride = acc;
        acc *= extent;
    }
    strides
}

pub(crate) fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<BroadcastPlan> {
    if a.len().abs_diff(b.len()) > 1 {
        return Err(Error::Shape(format!(
            "broadcast rank mismatch beyond one leading axis: {a:?} vs {b:?}"
        )));
    }
    let rank = a.len().max(b.len());
    let mut a_pad = vec![1usize; rank - a.len()];
    a_pad.extend_from_slice(a);
    let mut b_pad = vec![1usize; rank - b.len()];
    b_pad.extend_from_slice(b);

    let mut out_shape = Vec::with_capacity(rank);
    for (&ea, &eb) in a_pad.iter().zip(&b_pad) {
        if ea == eb || ea == 1 || eb == 1 {
            out_shape.push(ea.max(eb));
        } else {
            return Err(Error::Shape(format!(
                "incompatible broadcast extents: {a:?} vs {b:?}"
            )));
        }
    }
    let mut a_strides = row_major_strides(&a_pad);
    let mut b_strides = row_major_strides(&b_pad);
    for axis in 0..rank {
        if a_pad[axis] == 1 && out_shape[axis] != 1 {
            a_strides[axis] = 0;
        }
        if b_pad[axis] == 1 && out_shape[axis] != 1 {
            b_strides[axis] = 0;
        }
    }
    Ok(BroadcastPlan {
        out_shape,
        a_strides,
        b_strides,
    })
}

impl BroadcastPlan {
    /// Calls `f(out_base, a_base, b_base, inner_len, a_step, b_step)` for
    /// each innermost run of the output, walking outer axes in row-major
    /// order. `a_step`/`b_step` are 0 or 1.
    pub fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let rank = self.out_shape.len();
        if rank == 0 {
            f(0, 0, 0, 1, 0, 0);
            return;
        }
        let inner_len = self.out_shape[rank - 1];
        let a_step = self.a_strides[rank - 1].min(1);
        let b_step = self.b_strides[rank - 1].min(1);
        let outer_rank = rank - 1;
        let mut counters = vec![0usize; outer_rank];
        let mut a_base = 0usize;
        let mut b_base = 0usize;
        let mut out_base = 0usize;
        loop {
            f(out_base, a_base, b_base, inner_len, a_step, b_step);
            out_base += inner_len;
            // Increment the outer multi-index.
            let mut axis = outer_rank;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                counters[axis] += 1;
                a_base += self.a_strides[axis];
                b_base += self.b_strides[axis];
                if counters[axis] < self.out_shape[axis] {
                    break;
                }
                a_base -= self.a_strides[axis] * counters[axis];
                b_base -= self.b_strides[axis] * counters[axis];
                counters[axis] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rejects_rank_gap_of_two() {
        assert!(broadcast_plan(&[4], &[2, 3, 4]).is_err());
    }

    #[test]
    fn broadcast_stretches_singletons() {
        let plan = broadcast_plan(&[3, 1], &[1, 4]).unwrap();
        assert_eq!(plan.out_shape, vec![3, 4]);
        assert_eq!(plan.a_strides, vec![1, 0]);
        assert_eq!(plan.b_strides, vec![0, 1]);
    }

    #[test]
    fn broadcast_prepends_one_axis() {
        let plan = broadcast_plan(&[5, 3], &[3]).unwrap();
        assert_eq!(plan.out_shape, vec![5, 3]);
        assert_eq!(plan.b_strides, vec![0, 1]);
    }
}
