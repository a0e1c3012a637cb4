//! Linear-recurrence scan over per-step decay/drive pairs.
//!
//! The recurrence is h_t = a_t * h_{t-1} + b_t elementwise over a [D, N]
//! state, with readout y_td = sum_n c_tn * h_tdn + skip_d * x_td. The
//! sequential kernel is the reference; the parallel kernel evaluates the
//! same recurrence with a Blelloch-style associative scan inside fixed-size
//! time partitions. Backward recomputes states from sqrt(T)-spaced
//! checkpoints instead of storing every h_t.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::super::tensor::{Node, Tensor};
use super::Op;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanStrategy {
    Sequential,
    Parallel { chunk: usize },
}

pub(crate) struct ScanOp {
    pub a_bar: usize,
    pub bx: usize,
    pub c: usize,
    pub x: usize,
    pub d_skip: usize,
    pub t: usize,
    pub d: usize,
    pub n: usize,
    /// Checkpoint interval, ceil(sqrt(T)).
    pub every: usize,
    /// States entering segments 1.., each D*N long.
    pub checkpoints: Vec<f64>,
}

pub(crate) fn scan_sequential_kernel(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    x: &[f64],
    d_skip: &[f64],
    t: usize,
    d: usize,
    n: usize,
    y: &mut [f64],
    mut state_sink: impl FnMut(usize, &[f64]),
) {
    let dn = d * n;
    let mut h = vec![0.0; dn];
    for ti in 0..t {
        let arow = &a[ti * dn..(ti + 1) * dn];
        let brow = &b[ti * dn..(ti + 1) * dn];
        for ((hv, &av), &bv) in h.iter_mut().zip(arow).zip(brow) {
            *hv = av * *hv + bv;
        }
        emit_row(
            &h,
            &c[ti * n..(ti + 1) * n],
            &x[ti * d..(ti + 1) * d],
            d_skip,
            &mut y[ti * d..(ti + 1) * d],
            d,
            n,
        );
        state_sink(ti, &h);
    }
}

#[inline]
fn emit_row(h: &[f64], crow: &[f64], xrow: &[f64], d_skip: &[f64], yrow: &mut [f64], d: usize, n: usize) {
    for dd in 0..d {
        let hrow = &h[dd * n..(dd + 1) * n];
        let mut acc = 0.0;
        for (hv, cv) in hrow.iter().zip(crow) {
            acc += hv * cv;
        }
        yrow[dd] = acc + d_skip[dd] * xrow[dd];
    }
}

/// Blelloch up/down sweep over one padded partition, in place.
///
/// On entry `pa`/`pb` hold the partition's (decay, drive) elements padded
/// with identities to a power of two. On exit they hold the *exclusive*
/// prefix composition at each slot.
fn blelloch_exclusive(pa: &mut [f64], pb: &mut [f64], lp: usize, dn: usize) {
    let mut half = 1;
    while half < lp {
        let stride = half * 2;
        let mut j = stride - 1;
        while j < lp {
            let (left, right) = pa.split_at_mut(j * dn);
            let la = &left[(j - half) * dn..(j - half + 1) * dn];
            let ra = &mut right[..dn];
            let (bleft, bright) = pb.split_at_mut(j * dn);
            let lb = &bleft[(j - half) * dn..(j - half + 1) * dn];
            let rb = &mut bright[..dn];
            for q in 0..dn {
                rb[q] = ra[q] * lb[q] + rb[q];
                ra[q] *= la[q];
            }
            j += stride;
        }
        half = stride;
    }
    for q in 0..dn {
        pa[(lp - 1) * dn + q] = 1.0;
        pb[(lp - 1) * dn + q] = 0.0;
    }
    let mut half = lp / 2;
    while half >= 1 {
        let stride = half * 2;
        let mut j = stride - 1;
        while j < lp {
            let (left, right) = pa.split_at_mut(j * dn);
            let la = &mut left[(j - half) * dn..(j - half + 1) * dn];
            let ra = &mut right[..dn];
            let (bleft, bright) = pb.split_at_mut(j * dn);
            let lb = &mut bleft[(j - half) * dn..(j - half + 1) * dn];
            let rb = &mut bright[..dn];
            for q in 0..dn {
                // Left child takes the parent's prefix; right child takes
                // parent-then-left-subtree.
                let (sa, sb) = (la[q], lb[q]);
                la[q] = ra[q];
                lb[q] = rb[q];
                rb[q] = sa * rb[q] + sb;
                ra[q] *= sa;
            }
            j += stride;
        }
        half /= 2;
    }
}

pub(crate) fn scan_parallel_kernel(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    x: &[f64],
    d_skip: &[f64],
    t: usize,
    d: usize,
    n: usize,
    chunk: usize,
    y: &mut [f64],
    mut state_sink: impl FnMut(usize, &[f64]),
) {
    let dn = d * n;
    let chunk = chunk.max(1);
    let n_chunks = t.div_ceil(chunk);

    // Per-partition exclusive prefixes, computed independently.
    let prefixes: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let t0 = ci * chunk;
            let len = chunk.min(t - t0);
            let lp = len.next_power_of_two();
            let mut pa = vec![1.0; lp * dn];
            let mut pb = vec![0.0; lp * dn];
            pa[..len * dn].copy_from_slice(&a[t0 * dn..(t0 + len) * dn]);
            pb[..len * dn].copy_from_slice(&b[t0 * dn..(t0 + len) * dn]);
            blelloch_exclusive(&mut pa, &mut pb, lp, dn);
            (pa, pb, len)
        })
        .collect();

    // Carry the entering state across partitions and emit outputs. The
    // inclusive value at local index i is exclusive(i) composed with the
    // original element i, applied to the partition's entering state.
    let mut h_in = vec![0.0; dn];
    let mut h = vec![0.0; dn];
    for (ci, (pa, pb, len)) in prefixes.iter().enumerate() {
        let t0 = ci * chunk;
        for li in 0..*len {
            let ti = t0 + li;
            let ea = &a[ti * dn..(ti + 1) * dn];
            let eb = &b[ti * dn..(ti + 1) * dn];
            let xa = &pa[li * dn..(li + 1) * dn];
            let xb = &pb[li * dn..(li + 1) * dn];
            for q in 0..dn {
                h[q] = ea[q] * (xa[q] * h_in[q] + xb[q]) + eb[q];
            }
            emit_row(
                &h,
                &c[ti * n..(ti + 1) * n],
                &x[ti * d..(ti + 1) * d],
                d_skip,
                &mut y[ti * d..(ti + 1) * d],
                d,
                n,
            );
            state_sink(ti, &h);
        }
        h_in.copy_from_slice(&h);
    }
}

/// Records a scan node on the tape shared by the inputs.
pub(crate) fn record_scan(
    a_bar: &Tensor,
    bx: &Tensor,
    c: &Tensor,
    x: &Tensor,
    d_skip: &Tensor,
    strategy: ScanStrategy,
) -> Result<Tensor> {
    assert!(
        a_bar.same_tape(bx) && a_bar.same_tape(c) && a_bar.same_tape(x) && a_bar.same_tape(d_skip),
        "operands must share a tape"
    );
    let inner = a_bar.tape.inner.borrow();
    let (na, nb, nc, nx, ns) = (
        &inner.nodes[a_bar.id],
        &inner.nodes[bx.id],
        &inner.nodes[c.id],
        &inner.nodes[x.id],
        &inner.nodes[d_skip.id],
    );
    let [t, d, n] = <[usize; 3]>::try_from(na.shape.as_slice())
        .map_err(|_| Error::Shape(format!("scan decay must be [T, D, N], got {:?}", na.shape)))?;
    if nb.shape != [t, d, n] {
        return Err(Error::Shape(format!(
            "scan drive shape {:?} does not match decay {:?}",
            nb.shape, na.shape
        )));
    }
    if nc.shape != [t, n] {
        return Err(Error::Shape(format!(
            "scan readout must be [{t}, {n}], got {:?}",
            nc.shape
        )));
    }
    if nx.shape != [t, d] {
        return Err(Error::Shape(format!(
            "scan input must be [{t}, {d}], got {:?}",
            nx.shape
        )));
    }
    if ns.shape != [d] {
        return Err(Error::Shape(format!(
            "scan feedthrough must be [{d}], got {:?}",
            ns.shape
        )));
    }

    let every = (t as f64).sqrt().ceil() as usize;
    let every = every.max(1);
    let mut checkpoints = Vec::new();
    let mut y = vec![0.0; t * d];
    {
        let sink = |ti: usize, h: &[f64]| {
            if (ti + 1) % every == 0 && ti + 1 < t {
                checkpoints.extend_from_slice(h);
            }
        };
        match strategy {
            ScanStrategy::Sequential => scan_sequential_kernel(
                &na.data, &nb.data, &nc.data, &nx.data, &ns.data, t, d, n, &mut y, sink,
            ),
            ScanStrategy::Parallel { chunk } => scan_parallel_kernel(
                &na.data, &nb.data, &nc.data, &nx.data, &ns.data, t, d, n, chunk, &mut y, sink,
            ),
        }
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("scan produced non-finite output".into()));
    }
    let requires = na.requires_grad
        || nb.requires_grad
        || nc.requires_grad
        || nx.requires_grad
        || ns.requires_grad;
    let op = Op::Scan(ScanOp {
        a_bar: a_bar.id,
        bx: bx.id,
        c: c.id,
        x: x.id,
        d_skip: d_skip.id,
        t,
        d,
        n,
        every,
        checkpoints,
    });
    drop(inner);
    Ok(a_bar.tape.push(vec![t, d], y, requires, op))
}

/// Backward for the scan: recompute states segment by segment from the
/// stored checkpoints, then push gradients through the recurrence in
/// reverse. Gradients match the sequential evaluation order.
pub(crate) fn scan_backward(nodes: &[Node], local: &mut [Option<Vec<f64>>], op: &ScanOp, gout: &[f64]) {
    let (t, d, n, every) = (op.t, op.d, op.n, op.every);
    let dn = d * n;
    let a = &nodes[op.a_bar].data;
    let b = &nodes[op.bx].data;
    let c = &nodes[op.c].data;
    let x = &nodes[op.x].data;
    let skip = &nodes[op.d_skip].data;

    let mut ga = vec![0.0; t * dn];
    let mut gb = vec![0.0; t * dn];
    let mut gc = vec![0.0; t * n];
    let mut gx = vec![0.0; t * d];
    let mut gskip = vec![0.0; d];

    let n_seg = t.div_ceil(every);
    // hs[0] holds the segment's entering state, hs[i + 1] the state after
    // local step i.
    let mut hs = vec![0.0; (every + 1) * dn];
    let mut gh = vec![0.0; dn];

    for seg in (0..n_seg).rev() {
        let t0 = seg * every;
        let t1 = (t0 + every).min(t);
        let len = t1 - t0;
        if seg == 0 {
            hs[..dn].fill(0.0);
        } else {
            hs[..dn].copy_from_slice(&op.checkpoints[(seg - 1) * dn..seg * dn]);
        }
        for li in 0..len {
            let ti = t0 + li;
            let (prev, cur) = hs.split_at_mut((li + 1) * dn);
            let prev = &prev[li * dn..];
            let cur = &mut cur[..dn];
            let arow = &a[ti * dn..(ti + 1) * dn];
            let brow = &b[ti * dn..(ti + 1) * dn];
            for q in 0..dn {
                cur[q] = arow[q] * prev[q] + brow[q];
            }
        }
        for li in (0..len).rev() {
            let ti = t0 + li;
            let gyrow = &gout[ti * d..(ti + 1) * d];
            let crow = &c[ti * n..(ti + 1) * n];
            let h_cur = &hs[(li + 1) * dn..(li + 2) * dn];
            let gcrow = &mut gc[ti * n..(ti + 1) * n];
            for dd in 0..d {
                let gyv = gyrow[dd];
                gx[ti * d + dd] += gyv * skip[dd];
                gskip[dd] += gyv * x[ti * d + dd];
                if gyv != 0.0 {
                    let hrow = &h_cur[dd * n..(dd + 1) * n];
                    let ghrow = &mut gh[dd * n..(dd + 1) * n];
                    for nn in 0..n {
                        ghrow[nn] += gyv * crow[nn];
                        gcrow[nn] += gyv * hrow[nn];
                    }
                }
            }
            let h_prev = &hs[li * dn..(li + 1) * dn];
            let arow = &a[ti * dn..(ti + 1) * dn];
            let garow = &mut ga[ti * dn..(ti + 1) * dn];
            let gbrow = &mut gb[ti * dn..(ti + 1) * dn];
            for q in 0..dn {
                garow[q] += gh[q] * h_prev[q];
                gbrow[q] += gh[q];
                gh[q] *= arow[q];
            }
        }
    }

    let mut add_into = |id: usize, contribution: &[f64]| {
        if nodes[id].requires_grad {
            let buf = local[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
            for (g, &v) in buf.iter_mut().zip(contribution) {
                *g += v;
            }
        }
    };
    add_into(op.a_bar, &ga);
    add_into(op.bx, &gb);
    add_into(op.c, &gc);
    add_into(op.x, &gx);
    add_into(op.d_skip, &gskip);
}
