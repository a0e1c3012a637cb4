use crate::error::{Error, Result};

use super::tensor::{broadcast_plan, numel, BroadcastPlan, Node, Tensor};

mod scan;

pub use scan::ScanStrategy;
pub(crate) use scan::{record_scan, scan_parallel_kernel, ScanOp};

/// Default time-axis partition length for the parallel scan. This is a
/// recorded configuration value: results are reproducible for a fixed
/// partition size.
pub const DEFAULT_SCAN_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Sigmoid,
    Silu,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        plan: BroadcastPlan,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Reshape {
        x: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        stride: usize,
        padding: usize,
    },
    /// Depthwise causal convolution over time: out[t][c] depends on
    /// x[t-K+1 ..= t][c] with implicit left zero padding.
    ConvDepthwiseCausal {
        x: usize,
        w: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        /// (mean, inv_std) per row, captured at forward time.
        stats: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        /// Softmax probabilities per row (zero rows where ignored).
        probs: Vec<f64>,
        targets: Vec<i64>,
        n_active: usize,
    },
    Scan(ScanOp),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows {
        a: usize,
        b: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    Sum {
        x: usize,
    },
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn all_finite(data: &[f64]) -> bool {
    data.iter().all(|v| v.is_finite())
}

impl Tensor {
    fn binary(&self, rhs: &Tensor, kind: BinKind) -> Result<Tensor> {
        assert!(self.same_tape(rhs), "operands must share a tape");
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.id], &inner.nodes[rhs.id]);
        let plan = broadcast_plan(&a.shape, &b.shape)?;
        let mut out = vec![0.0; numel(&plan.out_shape)];
        let (ad, bd) = (&a.data, &b.data);
        let f: fn(f64, f64) -> f64 = match kind {
            BinKind::Add => |x, y| x + y,
            BinKind::Sub => |x, y| x - y,
            BinKind::Mul => |x, y| x * y,
        };
        plan.for_each_row(|ob, ab, bb, len, astep, bstep| {
            let orow = &mut out[ob..ob + len];
            match (astep, bstep) {
                (1, 1) => {
                    let ar = &ad[ab..ab + len];
                    let br = &bd[bb..bb + len];
                    for i in 0..len {
                        orow[i] = f(ar[i], br[i]);
                    }
                }
                (1, 0) => {
                    let ar = &ad[ab..ab + len];
                    let bv = bd[bb];
                    for i in 0..len {
                        orow[i] = f(ar[i], bv);
                    }
                }
                (0, 1) => {
                    let av = ad[ab];
                    let br = &bd[bb..bb + len];
                    for i in 0..len {
                        orow[i] = f(av, br[i]);
                    }
                }
                _ => orow[0] = f(ad[ab], bd[bb]),
            }
        });
        let requires = a.requires_grad || b.requires_grad;
        let shape = plan.out_shape.clone();
        let op = Op::Binary {
            kind,
            a: self.id,
            b: rhs.id,
            plan,
        };
        drop(inner);
        Ok(self.tape.push(shape, out, requires, op))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinKind::Mul)
    }

    fn unary(&self, kind: UnaryKind) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let out: Vec<f64> = match kind {
            UnaryKind::Exp => node.data.iter().map(|&v| v.exp()).collect(),
            UnaryKind::Sigmoid => node.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
            UnaryKind::Silu => node.data.iter().map(|&v| v * sigmoid_scalar(v)).collect(),
            UnaryKind::Softplus => node.data.iter().map(|&v| softplus_scalar(v)).collect(),
        };
        let shape = node.shape.clone();
        let requires = node.requires_grad;
        drop(inner);
        self.tape.push(shape, out, requires, Op::Unary { kind, x: self.id })
    }

    /// Elementwise e^x. Fails if any output overflows to infinity.
    pub fn exp(&self) -> Result<Tensor> {
        let out = self.unary(UnaryKind::Exp);
        {
            let inner = out.tape.inner.borrow();
            if !all_finite(&inner.nodes[out.id].data) {
                return Err(Error::Numeric("exp overflowed to non-finite".into()));
            }
        }
        Ok(out)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn silu(&self) -> Tensor {
        self.unary(UnaryKind::Silu)
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(UnaryKind::Softplus)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let out: Vec<f64> = node.data.iter().map(|&v| v * factor).collect();
        let shape = node.shape.clone();
        let requires = node.requires_grad;
        drop(inner);
        self.tape.push(
            shape,
            out,
            requires,
            Op::Scale {
                x: self.id,
                factor,
            },
        )
    }

    /// Same data, new shape. The element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        if numel(shape) != node.data.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                node.shape, shape
            )));
        }
        let out = node.data.clone();
        let requires = node.requires_grad;
        drop(inner);
        Ok(self
            .tape
            .push(shape.to_vec(), out, requires, Op::Reshape { x: self.id }))
    }

    /// Matrix product. Accepts [m,k]x[k,n] or batched [b,m,k]x[b,k,n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        assert!(self.same_tape(rhs), "operands must share a tape");
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.id], &inner.nodes[rhs.id]);
        let (batch, m, k, k2, n, out_shape) = match (a.shape.as_slice(), b.shape.as_slice()) {
            ([m, k], [k2, n]) => (1usize, *m, *k, *k2, *n, vec![*m, *n]),
            ([ba, m, k], [bb, k2, n]) => {
                if ba != bb {
                    return Err(Error::Shape(format!(
                        "matmul batch extents differ: {ba} vs {bb}"
                    )));
                }
                (*ba, *m, *k, *k2, *n, vec![*ba, *m, *n])
            }
            _ => {
                return Err(Error::Shape(format!(
                    "matmul expects rank-2 or rank-3 operands, got {:?} x {:?}",
                    a.shape, b.shape
                )))
            }
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            matmul_kernel(
                &a.data[bi * m * k..(bi + 1) * m * k],
                &b.data[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let requires = a.requires_grad || b.requires_grad;
        let op = Op::Matmul {
            a: self.id,
            b: rhs.id,
            batch,
            m,
            k,
            n,
        };
        drop(inner);
        Ok(self.tape.push(out_shape, out, requires, op))
    }

    /// 1-D convolution (cross-correlation): x is [T, C_in], kernel is
    /// [K, C_in, C_out]; output is [T', C_out] with
    /// T' = (T + 2*padding - K) / stride + 1.
    pub fn conv1d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        assert!(self.same_tape(kernel), "operands must share a tape");
        let inner = self.tape.inner.borrow();
        let (x, w) = (&inner.nodes[self.id], &inner.nodes[kernel.id]);
        let ([t, c_in], [kk, kc_in, c_out]) = (
            <[usize; 2]>::try_from(x.shape.as_slice())
                .map_err(|_| Error::Shape(format!("conv1d input must be rank 2, got {:?}", x.shape)))?,
            <[usize; 3]>::try_from(w.shape.as_slice())
                .map_err(|_| Error::Shape(format!("conv1d kernel must be rank 3, got {:?}", w.shape)))?,
        );
        if kk < 1 || stride < 1 {
            return Err(Error::Contract("conv1d requires K >= 1 and stride >= 1".into()));
        }
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d channel mismatch: input {c_in}, kernel {kc_in}"
            )));
        }
        if t + 2 * padding < kk {
            return Err(Error::Shape(format!(
                "conv1d window {kk} larger than padded input {}",
                t + 2 * padding
            )));
        }
        let t_out = (t + 2 * padding - kk) / stride + 1;
        let mut out = vec![0.0; t_out * c_out];
        for to in 0..t_out {
            let orow = &mut out[to * c_out..(to + 1) * c_out];
            for ki in 0..kk {
                let src = (to * stride + ki) as isize - padding as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let xrow = &x.data[src as usize * c_in..(src as usize + 1) * c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let wrow = &w.data[(ki * c_in + ci) * c_out..(ki * c_in + ci + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let requires = x.requires_grad || w.requires_grad;
        let op = Op::Conv1d {
            x: self.id,
            w: kernel.id,
            stride,
            padding,
        };
        drop(inner);
        Ok(self.tape.push(vec![t_out, c_out], out, requires, op))
    }

    /// Depthwise causal convolution: x is [T, C], kernel is [K, C], output
    /// is [T, C]. Position t sees x[t-K+1 ..= t] of its own channel, with
    /// zeros to the left of the sequence.
    pub fn conv1d_depthwise_causal(&self, kernel: &Tensor) -> Result<Tensor> {
        assert!(self.same_tape(kernel), "operands must share a tape");
        let inner = self.tape.inner.borrow();
        let (x, w) = (&inner.nodes[self.id], &inner.nodes[kernel.id]);
        let [t, c] = <[usize; 2]>::try_from(x.shape.as_slice())
            .map_err(|_| Error::Shape(format!("depthwise conv input must be rank 2, got {:?}", x.shape)))?;
        let [k, wc] = <[usize; 2]>::try_from(w.shape.as_slice())
            .map_err(|_| Error::Shape(format!("depthwise conv kernel must be rank 2, got {:?}", w.shape)))?;
        if wc != c {
            return Err(Error::Shape(format!(
                "depthwise conv channel mismatch: input {c}, kernel {wc}"
            )));
        }
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let orow = &mut out[ti * c..(ti + 1) * c];
            for ki in 0..k {
                let src = ti as isize - (k as isize - 1) + ki as isize;
                if src < 0 {
                    continue;
                }
                let xrow = &x.data[src as usize * c..(src as usize + 1) * c];
                let wrow = &w.data[ki * c..(ki + 1) * c];
                for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let requires = x.requires_grad || w.requires_grad;
        let op = Op::ConvDepthwiseCausal {
            x: self.id,
            w: kernel.id,
        };
        drop(inner);
        Ok(self.tape.push(vec![t, c], out, requires, op))
    }

    /// Layer normalization over the last axis, then affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        assert!(self.same_tape(gain) && self.same_tape(bias), "operands must share a tape");
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm requires eps > 0".into()));
        }
        let inner = self.tape.inner.borrow();
        let (x, g, b) = (
            &inner.nodes[self.id],
            &inner.nodes[gain.id],
            &inner.nodes[bias.id],
        );
        let d = *x
            .shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm input must have rank >= 1".into()))?;
        if g.shape != [d] || b.shape != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{d}], got {:?} and {:?}",
                g.shape, b.shape
            )));
        }
        let rows = x.data.len() / d;
        let mut out = vec![0.0; x.data.len()];
        let mut stats = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let xr = &x.data[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            stats.push(mean);
            stats.push(inv);
            let orow = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                orow[i] = (xr[i] - mean) * inv * g.data[i] + b.data[i];
            }
        }
        let shape = x.shape.clone();
        let requires = x.requires_grad || g.requires_grad || b.requires_grad;
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            stats,
        };
        drop(inner);
        Ok(self.tape.push(shape, out, requires, op))
    }

    /// Mean negative log softmax probability of `targets` over rows whose
    /// target is not `ignore_id`. Numerically stabilized by max
    /// subtraction. Returns a scalar.
    pub fn softmax_cross_entropy(&self, targets: &[i64], ignore_id: i64) -> Result<Tensor> {
        let inner = self.tape.inner.borrow();
        let logits = &inner.nodes[self.id];
        let [t, v] = <[usize; 2]>::try_from(logits.shape.as_slice())
            .map_err(|_| Error::Shape(format!("cross entropy expects [T, V] logits, got {:?}", logits.shape)))?;
        if targets.len() != t {
            return Err(Error::Shape(format!(
                "cross entropy: {t} logit rows but {} targets",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let mut n_active = 0usize;
        for (r, &target) in targets.iter().enumerate() {
            if target == ignore_id {
                continue;
            }
            if target < 0 || target as usize >= v {
                return Err(Error::Contract(format!(
                    "cross entropy target {target} out of range for vocab {v}"
                )));
            }
            let row = &logits.data[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &l in row {
                denom += (l - max).exp();
            }
            let log_denom = denom.ln();
            let prow = &mut probs[r * v..(r + 1) * v];
            for (p, &l) in prow.iter_mut().zip(row) {
                *p = (l - max).exp() / denom;
            }
            total += log_denom - (row[target as usize] - max);
            n_active += 1;
        }
        if n_active == 0 {
            return Err(Error::UndefinedLoss);
        }
        let loss = total / n_active as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("cross entropy produced non-finite loss".into()));
        }
        let requires = logits.requires_grad;
        let op = Op::SoftmaxCrossEntropy {
            logits: self.id,
            probs,
            targets: targets.to_vec(),
            n_active,
        };
        drop(inner);
        Ok(self.tape.push(vec![1], vec![loss], requires, op))
    }

    /// Selects rows of a [P, C] table by index; output is [len(ids), C].
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let inner = self.tape.inner.borrow();
        let table = &inner.nodes[self.id];
        let [p, c] = <[usize; 2]>::try_from(table.shape.as_slice())
            .map_err(|_| Error::Shape(format!("gather_rows expects a rank-2 table, got {:?}", table.shape)))?;
        let mut out = vec![0.0; ids.len() * c];
        for (i, &row) in ids.iter().enumerate() {
            if row >= p {
                return Err(Error::Contract(format!(
                    "gather index {row} out of range for table with {p} rows"
                )));
            }
            out[i * c..(i + 1) * c].copy_from_slice(&table.data[row * c..(row + 1) * c]);
        }
        let requires = table.requires_grad;
        let op = Op::Gather {
            table: self.id,
            ids: ids.to_vec(),
        };
        drop(inner);
        Ok(self.tape.push(vec![ids.len(), c], out, requires, op))
    }

    /// Stacks two rank-2 tensors along the row axis.
    pub fn concat_rows(&self, below: &Tensor) -> Result<Tensor> {
        assert!(self.same_tape(below), "operands must share a tape");
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.id], &inner.nodes[below.id]);
        let ([ra, ca], [rb, cb]) = (
            <[usize; 2]>::try_from(a.shape.as_slice())
                .map_err(|_| Error::Shape(format!("concat_rows expects rank-2 tensors, got {:?}", a.shape)))?,
            <[usize; 2]>::try_from(b.shape.as_slice())
                .map_err(|_| Error::Shape(format!("concat_rows expects rank-2 tensors, got {:?}", b.shape)))?,
        );
        if ca != cb {
            return Err(Error::Shape(format!(
                "concat_rows column mismatch: {ca} vs {cb}"
            )));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(&a.data);
        out.extend_from_slice(&b.data);
        let requires = a.requires_grad || b.requires_grad;
        let op = Op::ConcatRows {
            a: self.id,
            b: below.id,
        };
        drop(inner);
        Ok(self.tape.push(vec![ra + rb, ca], out, requires, op))
    }

    /// Copies `len` rows starting at `start` from a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id];
        let [r, c] = <[usize; 2]>::try_from(x.shape.as_slice())
            .map_err(|_| Error::Shape(format!("slice_rows expects a rank-2 tensor, got {:?}", x.shape)))?;
        if start + len > r {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = x.data[start * c..(start + len) * c].to_vec();
        let requires = x.requires_grad;
        let op = Op::SliceRows {
            x: self.id,
            start,
        };
        drop(inner);
        Ok(self.tape.push(vec![len, c], out, requires, op))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id];
        let total: f64 = x.data.iter().sum();
        let requires = x.requires_grad;
        drop(inner);
        self.tape.push(vec![1], vec![total], requires, Op::Sum { x: self.id })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Adds one op's contribution to the local gradient buffers during a
/// backward pass. `gout` is the gradient flowing into node `i`'s output.
pub(crate) fn backward_step(nodes: &[Node], local: &mut [Option<Vec<f64>>], i: usize, gout: &[f64]) {
    // Fetch-or-create the gradient buffer for an input node, skipping
    // inputs that do not require gradients.
    macro_rules! grad_of {
        ($id:expr) => {{
            if nodes[$id].requires_grad {
                Some(local[$id].get_or_insert_with(|| vec![0.0; nodes[$id].data.len()]))
            } else {
                None
            }
        }};
    }

    match &nodes[i].op {
        Op::Leaf => {}
        Op::Unary { kind, x } => {
            if let Some(gx) = grad_of!(*x) {
                let xd = &nodes[*x].data;
                let yd = &nodes[i].data;
                match kind {
                    UnaryKind::Exp => {
                        for ((g, &go), &y) in gx.iter_mut().zip(gout).zip(yd) {
                            *g += go * y;
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for ((g, &go), &y) in gx.iter_mut().zip(gout).zip(yd) {
                            *g += go * y * (1.0 - y);
                        }
                    }
                    UnaryKind::Silu => {
                        for ((g, &go), &xv) in gx.iter_mut().zip(gout).zip(xd) {
                            let s = sigmoid_scalar(xv);
                            *g += go * s * (1.0 + xv * (1.0 - s));
                        }
                    }
                    UnaryKind::Softplus => {
                        for ((g, &go), &xv) in gx.iter_mut().zip(gout).zip(xd) {
                            *g += go * sigmoid_scalar(xv);
                        }
                    }
                }
            }
        }
        Op::Binary { kind, a, b, plan } => {
            if let Some(ga) = grad_of!(*a) {
                let bd = &nodes[*b].data;
                plan.for_each_row(|ob, ab, bb, len, astep, bstep| {
                    let grow = &gout[ob..ob + len];
                    match kind {
                        BinKind::Add | BinKind::Sub => {
                            if astep == 1 {
                                for i in 0..len {
                                    ga[ab + i] += grow[i];
                                }
                            } else {
                                ga[ab] += grow.iter().sum::<f64>();
                            }
                        }
                        BinKind::Mul => {
                            if astep == 1 && bstep == 1 {
                                for i in 0..len {
                                    ga[ab + i] += grow[i] * bd[bb + i];
                                }
                            } else if astep == 1 {
                                let bv = bd[bb];
                                for i in 0..len {
                                    ga[ab + i] += grow[i] * bv;
                                }
                            } else if bstep == 1 {
                                let mut acc = 0.0;
                                for i in 0..len {
                                    acc += grow[i] * bd[bb + i];
                                }
                                ga[ab] += acc;
                            } else {
                                ga[ab] += grow[0] * bd[bb];
                            }
                        }
                    }
                });
            }
            if let Some(gb) = grad_of!(*b) {
                let ad = &nodes[*a].data;
                let sign = if *kind == BinKind::Sub { -1.0 } else { 1.0 };
                plan.for_each_row(|ob, ab, bb, len, astep, bstep| {
                    let grow = &gout[ob..ob + len];
                    match kind {
                        BinKind::Add | BinKind::Sub => {
                            if bstep == 1 {
                                for i in 0..len {
                                    gb[bb + i] += sign * grow[i];
                                }
                            } else {
                                gb[bb] += sign * grow.iter().sum::<f64>();
                            }
                        }
                        BinKind::Mul => {
                            if bstep == 1 && astep == 1 {
                                for i in 0..len {
                                    gb[bb + i] += grow[i] * ad[ab + i];
                                }
                            } else if bstep == 1 {
                                let av = ad[ab];
                                for i in 0..len {
                                    gb[bb + i] += grow[i] * av;
                                }
                            } else if astep == 1 {
                                let mut acc = 0.0;
                                for i in 0..len {
                                    acc += grow[i] * ad[ab + i];
                                }
                                gb[bb] += acc;
                            } else {
                                gb[bb] += grow[0] * ad[ab];
                            }
                        }
                    }
                });
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = grad_of!(*x) {
                for (g, &go) in gx.iter_mut().zip(gout) {
                    *g += go * factor;
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = grad_of!(*x) {
                for (g, &go) in gx.iter_mut().zip(gout) {
                    *g += go;
                }
            }
        }
        Op::Matmul {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(ga) = grad_of!(*a) {
                // dA[i,p] = sum_j gout[i,j] * B[p,j]
                let bd = &nodes[*b].data;
                for bi in 0..*batch {
                    let gy = &gout[bi * m * n..(bi + 1) * m * n];
                    let bdat = &bd[bi * k * n..(bi + 1) * k * n];
                    let gadat = &mut ga[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        let gyrow = &gy[i * n..(i + 1) * n];
                        let garow = &mut gadat[i * k..(i + 1) * k];
                        for p in 0..k {
                            let brow = &bdat[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (gv, bv) in gyrow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            garow[p] += acc;
                        }
                    }
                }
            }
            if let Some(gb) = grad_of!(*b) {
                // dB[p,j] = sum_i A[i,p] * gout[i,j]
                let ad = &nodes[*a].data;
                for bi in 0..*batch {
                    let gy = &gout[bi * m * n..(bi + 1) * m * n];
                    let adat = &ad[bi * m * k..(bi + 1) * m * k];
                    let gbdat = &mut gb[bi * k * n..(bi + 1) * k * n];
                    for i in 0..m {
                        let arow = &adat[i * k..(i + 1) * k];
                        let gyrow = &gy[i * n..(i + 1) * n];
                        for (p, &av) in arow.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gbdat[p * n..(p + 1) * n];
                            for (gbv, &gv) in gbrow.iter_mut().zip(gyrow) {
                                *gbv += av * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::Conv1d {
            x,
            w,
            stride,
            padding,
        } => {
            let (t, c_in) = {
                let s = &nodes[*x].shape;
                (s[0], s[1])
            };
            let (kk, c_out) = {
                let s = &nodes[*w].shape;
                (s[0], s[2])
            };
            let t_out = nodes[i].shape[0];
            if let Some(gx) = grad_of!(*x) {
                let wd = &nodes[*w].data;
                for to in 0..t_out {
                    let gyrow = &gout[to * c_out..(to + 1) * c_out];
                    for ki in 0..kk {
                        let src = (to * stride + ki) as isize - *padding as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let gxrow = &mut gx[src as usize * c_in..(src as usize + 1) * c_in];
                        for (ci, gxv) in gxrow.iter_mut().enumerate() {
                            let wrow = &wd[(ki * c_in + ci) * c_out..(ki * c_in + ci + 1) * c_out];
                            let mut acc = 0.0;
                            for (wv, gv) in wrow.iter().zip(gyrow) {
                                acc += wv * gv;
                            }
                            *gxv += acc;
                        }
                    }
                }
            }
            if let Some(gw) = grad_of!(*w) {
                let xd = &nodes[*x].data;
                for to in 0..t_out {
                    let gyrow = &gout[to * c_out..(to + 1) * c_out];
                    for ki in 0..kk {
                        let src = (to * stride + ki) as isize - *padding as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let xrow = &xd[src as usize * c_in..(src as usize + 1) * c_in];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let gwrow = &mut gw[(ki * c_in + ci) * c_out..(ki * c_in + ci + 1) * c_out];
                            for (gwv, &gv) in gwrow.iter_mut().zip(gyrow) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::ConvDepthwiseCausal { x, w } => {
            let (t, c) = {
                let s = &nodes[*x].shape;
                (s[0], s[1])
            };
            let k = nodes[*w].shape[0];
            if let Some(gx) = grad_of!(*x) {
                let wd = &nodes[*w].data;
                for ti in 0..t {
                    let gyrow = &gout[ti * c..(ti + 1) * c];
                    for ki in 0..k {
                        let src = ti as isize - (k as isize - 1) + ki as isize;
                        if src < 0 {
                            continue;
                        }
                        let gxrow = &mut gx[src as usize * c..(src as usize + 1) * c];
                        let wrow = &wd[ki * c..(ki + 1) * c];
                        for ((gxv, &gv), &wv) in gxrow.iter_mut().zip(gyrow).zip(wrow) {
                            *gxv += gv * wv;
                        }
                    }
                }
            }
            if let Some(gw) = grad_of!(*w) {
                let xd = &nodes[*x].data;
                for ti in 0..t {
                    let gyrow = &gout[ti * c..(ti + 1) * c];
                    for ki in 0..k {
                        let src = ti as isize - (k as isize - 1) + ki as isize;
                        if src < 0 {
                            continue;
                        }
                        let xrow = &xd[src as usize * c..(src as usize + 1) * c];
                        let gwrow = &mut gw[ki * c..(ki + 1) * c];
                        for ((gwv, &gv), &xv) in gwrow.iter_mut().zip(gyrow).zip(xrow) {
                            *gwv += gv * xv;
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let d = *nodes[*x].shape.last().unwrap();
            let rows = nodes[*x].data.len() / d;
            let xd = &nodes[*x].data;
            let gd = &nodes[*gain].data;
            if let Some(gx) = grad_of!(*x) {
                for r in 0..rows {
                    let (mean, inv) = (stats[2 * r], stats[2 * r + 1]);
                    let xr = &xd[r * d..(r + 1) * d];
                    let gyr = &gout[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * inv;
                        let dxhat = gyr[i] * gd[i];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_d = 1.0 / d as f64;
                    let gxr = &mut gx[r * d..(r + 1) * d];
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * inv;
                        let dxhat = gyr[i] * gd[i];
                        gxr[i] += inv * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
            }
            if let Some(gg) = grad_of!(*gain) {
                for r in 0..rows {
                    let (mean, inv) = (stats[2 * r], stats[2 * r + 1]);
                    let xr = &xd[r * d..(r + 1) * d];
                    let gyr = &gout[r * d..(r + 1) * d];
                    for i in 0..d {
                        gg[i] += gyr[i] * (xr[i] - mean) * inv;
                    }
                }
            }
            if let Some(gb) = grad_of!(*bias) {
                for r in 0..rows {
                    let gyr = &gout[r * d..(r + 1) * d];
                    for i in 0..d {
                        gb[i] += gyr[i];
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            targets,
            n_active,
        } => {
            if let Some(gl) = grad_of!(*logits) {
                let v = nodes[*logits].shape[1];
                let scale = gout[0] / *n_active as f64;
                for (r, &target) in targets.iter().enumerate() {
                    let prow = &probs[r * v..(r + 1) * v];
                    if prow.iter().all(|&p| p == 0.0) {
                        continue; // ignored row
                    }
                    let glrow = &mut gl[r * v..(r + 1) * v];
                    for (g, &p) in glrow.iter_mut().zip(prow) {
                        *g += scale * p;
                    }
                    glrow[target as usize] -= scale;
                }
            }
        }
        Op::Scan(scan) => scan::scan_backward(nodes, local, scan, gout),
        Op::Gather { table, ids } => {
            if let Some(gt) = grad_of!(*table) {
                let c = nodes[*table].shape[1];
                for (i, &row) in ids.iter().enumerate() {
                    let grow = &gout[i * c..(i + 1) * c];
                    let trow = &mut gt[row * c..(row + 1) * c];
                    for (t, &g) in trow.iter_mut().zip(grow) {
                        *t += g;
                    }
                }
            }
        }
        Op::ConcatRows { a, b } => {
            let na = nodes[*a].data.len();
            if let Some(ga) = grad_of!(*a) {
                for (g, &go) in ga.iter_mut().zip(&gout[..na]) {
                    *g += go;
                }
            }
            if let Some(gb) = grad_of!(*b) {
                for (g, &go) in gb.iter_mut().zip(&gout[na..]) {
                    *g += go;
                }
            }
        }
        Op::SliceRows { x, start } => {
            if let Some(gx) = grad_of!(*x) {
                let c = nodes[*x].shape[1];
                let base = start * c;
                for (idx, &go) in gout.iter().enumerate() {
                    gx[base + idx] += go;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = grad_of!(*x) {
                let go = gout[0];
                for g in gx.iter_mut() {
                    *g += go;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silu_and_sigmoid_fixed_points() {
        let tape = Tape::new();
        let x = tape.leaf(&[1], vec![0.0], false).unwrap();
        assert_eq!(x.silu().to_vec(), vec![0.0]);
        assert_eq!(x.sigmoid().to_vec(), vec![0.5]);
    }

    #[test]
    fn add_pairs() {
        let tape = Tape::new();
        let a = tape.leaf(&[2], vec![1.0, 2.0], false).unwrap();
        let b = tape.leaf(&[2], vec![3.0, 4.0], false).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(&[2], vec![1.0, 2.0], false).unwrap();
        let b = tape.leaf(&[3], vec![1.0, 2.0, 3.0], false).unwrap();
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn broadcast_add_is_associative_for_same_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let data = |rng: &mut ChaCha8Rng| (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = tape.leaf(&[3, 4], data(&mut rng), false).unwrap();
        let b = tape.leaf(&[3, 4], data(&mut rng), false).unwrap();
        let c = tape.leaf(&[3, 4], data(&mut rng), false).unwrap();
        let left = a.add(&b).unwrap().add(&c).unwrap().to_vec();
        let right = a.add(&b.add(&c).unwrap()).unwrap().to_vec();
        for (l, r) in left.iter().zip(&right) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let tape = Tape::new();
        let a = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let eye = tape.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        assert_eq!(a.matmul(&eye).unwrap().to_vec(), a.to_vec());
        let b = tape.leaf(&[2, 1], vec![5.0, 6.0], false).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::new();
        let a = tape.zeros(&[2, 3], false);
        let b = tape.zeros(&[2, 2], false);
        assert!(a.matmul(&b).is_err());
    }


    #[test]
    fn batched_matmul_and_batch_mismatch() {
        let tape = Tape::new();
        let a = tape
            .leaf(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0], false)
            .unwrap();
        let b = tape
            .leaf(&[2, 2, 1], vec![5.0, 6.0, 7.0, 8.0], false)
            .unwrap();
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.shape(), vec![2, 1, 1]);
        assert_eq!(y.to_vec(), vec![17.0, 53.0]);
        let c = tape.zeros(&[3, 2, 1], false);
        assert!(a.matmul(&c).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lhs: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rhs: Vec<f64> = (0..2 * 4 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rhs2 = rhs.clone();
        let err = grad_check(
            move |t| {
                let w = t.tape().leaf(&[2, 4, 2], rhs2.clone(), false)?;
                Ok(t.matmul(&w)?.silu().sum())
            },
            &[2, 3, 4],
            &lhs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "batched matmul grad err {err}");
        let lhs2 = lhs.clone();
        let err = grad_check(
            move |t| {
                let a = t.tape().leaf(&[2, 3, 4], lhs2.clone(), false)?;
                Ok(a.matmul(t)?.silu().sum())
            },
            &[2, 4, 2],
            &rhs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "batched matmul rhs grad err {err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Check gradient with respect to the left operand...
        let b2 = b.clone();
        let err = grad_check(
            move |x| {
                let w = x.tape().leaf(&[4, 2], b2.clone(), false)?;
                Ok(x.matmul(&w)?.sum())
            },
            &[3, 4],
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "left grad err {err}");
        // ...and the right operand.
        let a2 = a.clone();
        let err = grad_check(
            move |x| {
                let lhs = x.tape().leaf(&[3, 4], a2.clone(), false)?;
                Ok(lhs.matmul(x)?.sum())
            },
            &[4, 2],
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "right grad err {err}");
    }

    #[test]
    fn conv1d_identity_kernel() {
        let tape = Tape::new();
        let x = tape.leaf(&[3, 1], vec![1.0, 2.0, 3.0], false).unwrap();
        let k = tape.leaf(&[1, 1, 1], vec![1.0], false).unwrap();
        assert_eq!(x.conv1d(&k, 1, 0).unwrap().to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_strided_window_sum() {
        let tape = Tape::new();
        let x = tape.leaf(&[4, 1], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let k = tape.leaf(&[2, 1, 1], vec![1.0, 1.0], false).unwrap();
        assert_eq!(x.conv1d(&k, 2, 0).unwrap().to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn conv1d_rejects_empty_output() {
        let tape = Tape::new();
        let x = tape.zeros(&[2, 1], false);
        let k = tape.zeros(&[5, 1, 1], false);
        assert!(x.conv1d(&k, 1, 0).is_err());
    }

    #[test]
    fn conv1d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..14).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3 * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2 = w.clone();
        let err = grad_check(
            move |t| {
                let k = t.tape().leaf(&[3, 2, 2], w2.clone(), false)?;
                Ok(t.conv1d(&k, 2, 1)?.sum())
            },
            &[7, 2],
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "input grad err {err}");
        let x2 = x.clone();
        let err = grad_check(
            move |t| {
                let inp = t.tape().leaf(&[7, 2], x2.clone(), false)?;
                Ok(inp.conv1d(t, 2, 1)?.sum())
            },
            &[3, 2, 2],
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "kernel grad err {err}");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![5.0, 5.0, 5.0], false).unwrap();
        let g = tape.full(&[3], 1.0);
        let b = tape.full(&[3], 0.0);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap().to_vec();
        assert!(y.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_two_point_row() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 3.0], false).unwrap();
        let g = tape.full(&[2], 1.0);
        let b = tape.full(&[2], 0.0);
        let y = x.layer_norm(&g, &b, 1e-12).unwrap().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-6);
        assert!((y[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_output_mean_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let d = 16;
        let x = tape
            .leaf(&[4, d], (0..4 * d).map(|_| rng.random_range(-3.0..3.0)).collect(), false)
            .unwrap();
        let g = tape.full(&[d], 1.0);
        let b = tape.full(&[d], 0.0);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap().to_vec();
        for row in y.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-10, "row mean {mean}");
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let tape = Tape::new();
        let logits = tape.leaf(&[1, 4], vec![0.0; 4], false).unwrap();
        let loss = logits.softmax_cross_entropy(&[2], -1).unwrap().scalar_value();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);

        let logits = tape.leaf(&[1, 4], vec![0.0, 0.0, 1e6, 0.0], false).unwrap();
        let loss = logits.softmax_cross_entropy(&[2], -1).unwrap().scalar_value();
        assert!(loss.abs() < 1e-9, "saturated loss {loss}");
    }

    #[test]
    fn cross_entropy_ignores_and_errors_when_all_ignored() {
        let tape = Tape::new();
        let logits = tape.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
        let loss = logits.softmax_cross_entropy(&[1, -1], -1).unwrap().scalar_value();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
        assert!(logits.softmax_cross_entropy(&[-1, -1], -1).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits: Vec<f64> = (0..3 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = grad_check(
            |t| t.softmax_cross_entropy(&[0, 4, 2], -1),
            &[3, 5],
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "grad err {err}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn backward_accumulates_linearly() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![0.5, -1.0, 2.0], true).unwrap();
        let loss = x.scale(3.0).sum();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn mlp_composite_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w1: Vec<f64> = (0..6 * 4).map(|_| rng.random_range(-0.7..0.7)).collect();
        let w2: Vec<f64> = (0..4).map(|_| rng.random_range(-0.7..0.7)).collect();
        let err = grad_check(
            move |t| {
                let tape = t.tape();
                let w1 = tape.leaf(&[6, 4], w1.clone(), false)?;
                let w2 = tape.leaf(&[4, 1], w2.clone(), false)?;
                Ok(t.reshape(&[1, 6])?.matmul(&w1)?.silu().matmul(&w2)?.sum())
            },
            &[6],
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "mlp grad err {err}");
    }

    #[test]
    fn grad_check_identity_and_exp() {
        // A power-of-two eps keeps x +- eps exact, so the identity check
        // comes out with no rounding at all.
        let eps = 2.0f64.powi(-17);
        let err = grad_check(|t| Ok(t.sum()), &[4], &[1.0, -2.0, 0.5, 3.0], eps).unwrap();
        assert!(err < 1e-12, "identity err {err}");
        let err = grad_check(|t| Ok(t.exp()?.sum()), &[1], &[0.0], 1e-5).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        assert!(grad_check(|t| Ok(t.sum()), &[1], &[1.0], 1e-2).is_err());
    }

    #[test]
    fn every_elementwise_op_passes_grad_check_over_seeds() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let checks: Vec<(&str, f64)> = vec![
                ("exp", grad_check(|t| Ok(t.exp()?.sum()), &[8], &x, 1e-5).unwrap()),
                ("sigmoid", grad_check(|t| Ok(t.sigmoid().sum()), &[8], &x, 1e-5).unwrap()),
                ("silu", grad_check(|t| Ok(t.silu().sum()), &[8], &x, 1e-5).unwrap()),
                ("softplus", grad_check(|t| Ok(t.softplus().sum()), &[8], &x, 1e-5).unwrap()),
                (
                    "add",
                    grad_check(
                        |t| {
                            let o = t.tape().leaf(&[8], y.clone(), false)?;
                            Ok(t.add(&o)?.sum())
                        },
                        &[8],
                        &x,
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "sub",
                    grad_check(
                        |t| {
                            let o = t.tape().leaf(&[8], y.clone(), false)?;
                            Ok(o.sub(t)?.sum())
                        },
                        &[8],
                        &x,
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "mul-broadcast",
                    grad_check(
                        |t| {
                            let o = t.tape().leaf(&[2, 1, 4], y.clone(), false)?;
                            Ok(t.reshape(&[2, 4, 1])?.mul(&o)?.sum())
                        },
                        &[8],
                        &x,
                        1e-5,
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in checks {
                assert!(err < 1e-4, "{name} grad err {err} at seed {seed}");
            }
        }
    }

    #[test]
    fn gather_concat_slice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table: Vec<f64> = (0..5 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = grad_check(
            |t| Ok(t.gather_rows(&[0, 2, 2, 4])?.silu().sum()),
            &[5, 3],
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "gather grad err {err}");

        let x: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = grad_check(
            |t| {
                let other = t.tape().full(&[2, 3], 0.5);
                Ok(other.concat_rows(t)?.slice_rows(1, 4)?.silu().sum())
            },
            &[4, 3],
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "concat/slice grad err {err}");
    }

    #[test]
    fn exp_overflow_reports_numeric_error() {
        let tape = Tape::new();
        let x = tape.leaf(&[1], vec![1e4], false).unwrap();
        assert!(x.exp().is_err());
    }

    #[test]
    fn depthwise_conv_gradient_and_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..6 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..4 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2 = w.clone();
        let err = grad_check(
            move |t| {
                let k = t.tape().leaf(&[4, 2], w2.clone(), false)?;
                Ok(t.conv1d_depthwise_causal(&k)?.sum())
            },
            &[6, 2],
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "depthwise grad err {err}");

        // Causal: output at t only sees inputs <= t.
        let tape = Tape::new();
        let xt = tape.leaf(&[6, 2], x.clone(), false).unwrap();
        let kt = tape.leaf(&[4, 2], w.clone(), false).unwrap();
        let base = xt.conv1d_depthwise_causal(&kt).unwrap().to_vec();
        let mut x_pert = x.clone();
        x_pert[3 * 2] += 1.0; // perturb t = 3, channel 0
        let xp = tape.leaf(&[6, 2], x_pert, false).unwrap();
        let pert = xp.conv1d_depthwise_causal(&kt).unwrap().to_vec();
        for t in 0..3 {
            for c in 0..2 {
                assert_eq!(base[t * 2 + c], pert[t * 2 + c], "leaked to t={t}");
            }
        }
    }
}
