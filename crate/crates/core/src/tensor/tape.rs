use super::{check_shape, Float, Tensor};
use crate::error::{Error, Result};

/// Index of a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    ScaleBy(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Transpose(NodeId),
    NarrowCols {
        input: NodeId,
        start: usize,
    },
    Swish(NodeId),
    Glu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    DepthwiseConv {
        x: NodeId,
        kernel: NodeId,
    },
    Sum(NodeId),
    /// Scalar output whose gradient w.r.t. `input` was computed by the caller.
    Custom {
        input: NodeId,
        local_grad: Vec<F>,
        name: &'static str,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::AddRow(..) => "add_row",
            Op::Transpose(..) => "transpose",
            Op::NarrowCols { .. } => "narrow_cols",
            Op::Swish(..) => "swish",
            Op::Glu(..) => "glu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::DepthwiseConv { .. } => "depthwise_conv1d",
            Op::Sum(..) => "sum",
            Op::Custom { name, .. } => name,
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Records operations in execution order and replays them backwards.
///
/// A tape is built fresh for every forward pass; model surgery changes
/// shapes between steps, so nothing is cached across passes.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    /// When set, a corrupted matmul backward rule is used (gradcheck self-test).
    #[doc(hidden)]
    pub inject_matmul_bug: bool,
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn same_shape<F: Float>(op: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidShape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims<F: Float>(op: &str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::InvalidShape(format!("{op}: expected a matrix, got {:?}", t.shape()))),
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), inject_matmul_bug: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf (or `None` if backward never reached it).
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].value.grad()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<F>> {
        self.nodes[id.0].value.grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NumericalError { op_id: id, op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            _ => self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        Ok(NodeId(id))
    }

    fn inputs(&self, op: &Op<F>) -> Vec<NodeId> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::NarrowCols { input: a, .. }
            | Op::Swish(a)
            | Op::Glu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Custom { input: a, .. } => vec![a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::DepthwiseConv { x, kernel } => vec![x, kernel],
        }
    }

    /// Records a leaf; gradients flow into it iff `tensor.requires_grad()`.
    /// Any gradient the tensor already carries is discarded.
    pub fn leaf(&mut self, mut tensor: Tensor<F>) -> Result<NodeId> {
        tensor.zero_grad();
        self.push(Op::Leaf, tensor)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Result<NodeId> {
        self.push(Op::Leaf, tensor.with_requires_grad(false))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<NodeId> {
        let n = check_shape(shape)?;
        self.constant(Tensor::from_vec(shape, vec![F::zero(); n])?)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(Error::InvalidShape(format!("matmul: [{m},{k}] x [{k2},{n}]")));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == F::zero() {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o = *o + x * y;
                }
            }
        }
        self.push(Op::MatMul(a, b), Tensor::from_vec(&[m, n], out)?)
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(op, Tensor::from_vec(&shape, data)?)
    }

    fn map(&mut self, a: NodeId, f: impl Fn(F) -> F, op: Op<F>) -> Result<NodeId> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(op, Tensor::from_vec(&shape, data)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(Error::InvalidShape(format!("scale_by: scale has shape {:?}", ts.shape())));
        }
        let c = ts.data()[0];
        self.map(a, |x| x * c, Op::ScaleBy(a, s))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.len() != ta.cols() {
            return Err(Error::InvalidShape(format!("add_row: bias {:?} for rows of width {}", tb.shape(), ta.cols())));
        }
        let n = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + tb.data()[i % n]).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::AddRow(a, bias), Tensor::from_vec(&shape, data)?)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (r, c) = matrix_dims("transpose", t)?;
        let d = t.data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(d[i * c + j]);
            }
        }
        self.push(Op::Transpose(a), Tensor::from_vec(&[c, r], out)?)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(a);
        let (r, c) = matrix_dims("narrow_cols", t)?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape(format!("narrow_cols: {start}+{len} of {c} columns")));
        }
        let d = t.data();
        let out = (0..r).flat_map(|i| d[i * c + start..i * c + start + len].iter().copied()).collect();
        self.push(Op::NarrowCols { input: a, start }, Tensor::from_vec(&[r, len], out)?)
    }

    /// x * sigmoid(x)
    pub fn swish(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, |x| x * sigmoid(x), Op::Swish(a))
    }

    /// Gated linear unit over the last axis: first half * sigmoid(second half).
    pub fn glu(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let c = t.cols();
        if !c.is_multiple_of(2) {
            return Err(Error::InvalidShape(format!("glu: odd last axis {c}")));
        }
        let h = c / 2;
        let out = t.data().chunks(c).flat_map(|row| (0..h).map(move |j| row[j] * sigmoid(row[h + j]))).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        self.push(Op::Glu(a), Tensor::from_vec(&shape, out)?)
    }

    fn rowwise(&mut self, a: NodeId, log: bool) -> Result<NodeId> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
            if log {
                let lse = max + sum.ln();
                out.extend(row.iter().map(|&x| x - lse));
            } else {
                out.extend(row.iter().map(|&x| (x - max).exp() / sum));
            }
        }
        let shape = t.shape().to_vec();
        let op = if log { Op::LogSoftmax(a) } else { Op::Softmax(a) };
        self.push(op, Tensor::from_vec(&shape, out)?)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, false)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, true)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: F) -> Result<NodeId> {
        if eps <= F::zero() {
            return Err(Error::InvalidConfig("layer_norm: eps must be positive".into()));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(Error::InvalidShape(format!(
                "layer_norm: width {d} with gamma {:?} and beta {:?}",
                tg.shape(),
                tb.shape()
            )));
        }
        let n = F::of(d as f64);
        let mut xhat = Vec::with_capacity(tx.len());
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(d) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let shape = tx.shape().to_vec();
        self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, Tensor::from_vec(&shape, out)?)
    }

    /// Per-channel temporal convolution with zero "same" padding.
    pub fn depthwise_conv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (t_len, ch) = matrix_dims("depthwise_conv1d", tx)?;
        let (k, kch) = matrix_dims("depthwise_conv1d", tk)?;
        if k % 2 == 0 {
            return Err(Error::InvalidConfig(format!("depthwise_conv1d: kernel size {k} is even")));
        }
        if kch != ch {
            return Err(Error::InvalidShape(format!("depthwise_conv1d: kernel has {kch} channels, input {ch}")));
        }
        let pad = k / 2;
        let (xd, kd) = (tx.data(), tk.data());
        let mut out = vec![F::zero(); t_len * ch];
        for t in 0..t_len {
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                for c in 0..ch {
                    out[t * ch + c] = out[t * ch + c] + kd[j * ch + c] * xd[src * ch + c];
                }
            }
        }
        self.push(Op::DepthwiseConv { x, kernel }, Tensor::from_vec(&[t_len, ch], out)?)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Records a scalar computed outside the tape whose gradient with respect
    /// to `input` is already known.
    pub fn custom_scalar(&mut self, name: &'static str, input: NodeId, value: F, local_grad: Vec<F>) -> Result<NodeId> {
        if local_grad.len() != self.value(input).len() {
            return Err(Error::InvalidShape(format!(
                "{name}: gradient of length {} for input of length {}",
                local_grad.len(),
                self.value(input).len()
            )));
        }
        self.push(Op::Custom { input, local_grad, name }, Tensor::scalar(value))
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericalError { op_id: i, op: self.nodes[i].op.name() });
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            for (input, contrib) in self.vjp(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        // Leaves that the loss does not depend on still get a (zero) gradient.
        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) && n.requires_grad && n.value.grad().is_none() {
                let z = vec![F::zero(); n.value.len()];
                n.value.accumulate_grad(&z)?;
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[F]) -> Result<Vec<(NodeId, Vec<F>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |id: NodeId| self.nodes[id.0].value.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul(a, b) => {
                let (m, k) = matrix_dims("matmul", self.value(a))?;
                let n = out.cols();
                let (ad, bd) = (val(a), val(b));
                let mut ga = vec![F::zero(); m * k];
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[r * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                }
                let mut gb = vec![F::zero(); k * n];
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let x = ad[r * k + p];
                        for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o = *o + x * y;
                        }
                    }
                }
                if self.inject_matmul_bug {
                    ga.iter_mut().for_each(|x| *x = *x * F::of(2.0));
                }
                vec![(a, ga), (b, gb)]
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|&x| -x).collect())],
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                let ga = g.iter().zip(bd).map(|(&x, &y)| x * y).collect();
                let gb = g.iter().zip(ad).map(|(&x, &y)| x * y).collect();
                vec![(a, ga), (b, gb)]
            }
            &Op::Scale(a, c) => vec![(a, g.iter().map(|&x| x * c).collect())],
            &Op::ScaleBy(a, s) => {
                let c = val(s)[0];
                let gs: F = g.iter().zip(val(a)).map(|(&x, &y)| x * y).sum();
                vec![(a, g.iter().map(|&x| x * c).collect()), (s, vec![gs])]
            }
            &Op::AddRow(a, b) => {
                let n = out.cols();
                let mut gb = vec![F::zero(); n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(o, &x)| *o = *o + x);
                }
                vec![(a, g.to_vec()), (b, gb)]
            }
            &Op::Transpose(a) => {
                let (r, c) = matrix_dims("transpose", self.value(a))?;
                let mut ga = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                vec![(a, ga)]
            }
            &Op::NarrowCols { input, start } => {
                let (r, c) = matrix_dims("narrow_cols", self.value(input))?;
                let len = out.cols();
                let mut ga = vec![F::zero(); r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![(input, ga)]
            }
            &Op::Swish(a) => {
                let ga = g
                    .iter()
                    .zip(val(a))
                    .map(|(&gy, &x)| {
                        let s = sigmoid(x);
                        gy * (s + x * s * (F::one() - s))
                    })
                    .collect();
                vec![(a, ga)]
            }
            &Op::Glu(a) => {
                let c = self.value(a).cols();
                let h = c / 2;
                let mut ga = vec![F::zero(); self.value(a).len()];
                for (r, row) in val(a).chunks(c).enumerate() {
                    for j in 0..h {
                        let gy = g[r * h + j];
                        let s = sigmoid(row[h + j]);
                        ga[r * c + j] = gy * s;
                        ga[r * c + h + j] = gy * row[j] * s * (F::one() - s);
                    }
                }
                vec![(a, ga)]
            }
            &Op::Softmax(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                    let dot: F = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - dot)));
                }
                vec![(a, ga)]
            }
            &Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                    let total: F = gr.iter().copied().sum();
                    ga.extend(gr.iter().zip(yr).map(|(&x, &y)| x - y.exp() * total));
                }
                vec![(a, ga)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.cols();
                let n = F::of(d as f64);
                let gd = val(*gamma);
                let mut gx = Vec::with_capacity(g.len());
                let mut gg = vec![F::zero(); d];
                let mut gbeta = vec![F::zero(); d];
                for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let dxhat: Vec<F> = grow.iter().zip(gd).map(|(&a, &b)| a * b).collect();
                    let mean_d = dxhat.iter().copied().sum::<F>() / n;
                    let mean_dh = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<F>() / n;
                    for j in 0..d {
                        gg[j] = gg[j] + grow[j] * hrow[j];
                        gbeta[j] = gbeta[j] + grow[j];
                        gx.push(rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh));
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            &Op::DepthwiseConv { x, kernel } => {
                let (t_len, ch) = matrix_dims("depthwise_conv1d", self.value(x))?;
                let k = self.value(kernel).shape()[0];
                let pad = k / 2;
                let (xd, kd) = (val(x), val(kernel));
                let mut gx = vec![F::zero(); t_len * ch];
                let mut gk = vec![F::zero(); k * ch];
                for t in 0..t_len {
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                            continue;
                        };
                        for c in 0..ch {
                            let gy = g[t * ch + c];
                            gx[src * ch + c] = gx[src * ch + c] + gy * kd[j * ch + c];
                            gk[j * ch + c] = gk[j * ch + c] + gy * xd[src * ch + c];
                        }
                    }
                }
                vec![(x, gx), (kernel, gk)]
            }
            &Op::Sum(a) => vec![(a, vec![g[0]; self.value(a).len()])],
            Op::Custom { input, local_grad, .. } => {
                vec![(*input, local_grad.iter().map(|&x| x * g[0]).collect())]
            }
        })
    }
}
