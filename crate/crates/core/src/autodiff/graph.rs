//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node list is already a valid
//! topological order. Parameters enter the graph as leaves tagged with the
//! index of the [`ParamStore`] they came from; `backward` adds the gradient of
//! each such leaf into the matching store's grad slots.

use super::kernels::{self, ConvGeom};
use super::prob::{softmax, PROB_EPS};
use super::tensor::{ParamStore, Tensor};
use crate::error::{config, state, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param { store: usize, index: usize },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom, cols: Vec<f64> },
    Relu(NodeId),
    Sigmoid(NodeId),
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Softmax { x: NodeId, axis: usize },
    Concat(Vec<NodeId>),
    GlobalAvgPool(NodeId),
    ChannelScale { x: NodeId, gate: NodeId },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Reshape(NodeId),
    Sum(NodeId),
    RowMix { sources: Vec<NodeId>, pick: Vec<usize> },
    WeightedNll { logits: NodeId, weights: Vec<f64>, probs: Vec<f64>, active: Vec<bool> },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MaxPool2 { .. } => "maxpool2x2",
            Op::Softmax { .. } => "softmax",
            Op::Concat(_) => "concat",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::RowMix { .. } => "row_mix",
            Op::WeightedNll { .. } => "weighted_nll",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Op kinds in execution order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        value.ensure_finite(op.kind())?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return state(format!("node {} does not belong to this graph", id.0));
        }
        Ok(())
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        let mut value = value;
        value.clear_grad();
        self.push(Op::Constant, value)
    }

    /// Leaf holding a copy of `store[index]`, tagged with `tag` for `backward`.
    pub fn param(&mut self, tag: usize, store: &ParamStore, index: usize) -> Result<NodeId> {
        let mut value = store.get(index).clone();
        value.clear_grad();
        self.push(Op::Param { store: tag, index }, value)
    }

    /// `x [B, in] * w[out, in]^T + b[out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check(id)?;
        }
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs != [ws[0]] || xs[1] != ws[1] {
            return config(format!("dense shape mismatch: x {xs:?}, w {ws:?}, b {bs:?}"));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(self.value(b).data());
        }
        kernels::gemm(
            batch,
            inp,
            out,
            1.0,
            self.value(x).data(),
            (inp, 1),
            self.value(w).data(),
            (1, inp),
            1.0,
            &mut y,
            (out, 1),
        );
        let value = Tensor::new(vec![batch, out], y)?;
        self.push(Op::Dense { x, w, b }, value)
    }

    /// Stride-1 "same" convolution. `x [B, C, H, W]`, `w [O, C, k, k]` (odd k), `b [O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check(id)?;
        }
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0 || bs != [ws[0]] {
            return config(format!("conv2d shape mismatch: x {xs:?}, w {ws:?}, b {bs:?}"));
        }
        let geom = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], out_channels: ws[0], kernel: ws[2] };
        let batch = xs[0];
        let (out, cols) =
            kernels::conv_forward(&geom, batch, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let value = Tensor::new(vec![batch, geom.out_channels, geom.height, geom.width], out)?;
        self.push(Op::Conv2d { x, w, b, geom, cols }, value)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect())?;
        self.push(Op::Relu(x), out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect())?;
        self.push(Op::Sigmoid(x), out)
    }

    /// 2x2 max pooling with stride 2 over `[B, C, H, W]`; H and W must be even.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return config(format!("maxpool2x2 needs [B, C, even H, even W], got {s:?}"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push(Op::MaxPool2 { x, argmax }, value)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x);
        let out = super::prob::softmax_axis(v.data(), v.shape(), axis)?;
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::Softmax { x, axis }, value)
    }

    /// Concatenates along axis 1. All other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return config("concat of zero tensors");
        }
        for &id in inputs {
            self.check(id)?;
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.len() < 2 {
            return config("concat needs rank >= 2");
        }
        let mut channels = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return config(format!("concat shape mismatch: {s:?} vs {first:?}"));
            }
            channels += s[1];
        }
        let inner: usize = first[2..].iter().product();
        let batch = first[0];
        let mut out = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for &id in inputs {
                let v = self.value(id);
                let row = v.shape()[1] * inner;
                out.extend_from_slice(&v.data()[b * row..(b + 1) * row]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        self.push(Op::Concat(inputs.to_vec()), value)
    }

    /// Mean over every axis past the second: `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return config("global_avg_pool needs rank >= 2");
        }
        let inner: usize = s[2..].iter().product();
        let out: Vec<f64> =
            self.value(x).data().chunks(inner).map(|c| c.iter().sum::<f64>() / inner as f64).collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        self.push(Op::GlobalAvgPool(x), value)
    }

    /// `x [B, C, ...] * gate [B, C]`, broadcasting the gate over trailing axes.
    pub fn channel_scale(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(gate)?;
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gate) != &s[..2] {
            return config(format!("channel_scale mismatch: x {s:?}, gate {:?}", self.shape(gate)));
        }
        let inner: usize = s[2..].iter().product();
        let g = self.value(gate).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(inner)
            .zip(g)
            .flat_map(|(c, &gv)| c.iter().map(move |v| v * gv))
            .collect();
        let value = Tensor::new(s, out)?;
        self.push(Op::ChannelScale { x, gate }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return config(format!("add shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(Op::Add(a, b), value)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect())?;
        self.push(Op::Scale(x, factor), value)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(x)?;
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(Op::Reshape(x), value)
    }

    /// Flattens everything past the batch axis.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        let rest: usize = s[1..].iter().product();
        let b = s[0];
        self.reshape(x, vec![b, rest])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    /// Row `b` of the output is row `b` of `sources[pick[b]]`.
    pub fn row_mix(&mut self, sources: &[NodeId], pick: &[usize]) -> Result<NodeId> {
        if sources.is_empty() {
            return config("row_mix needs at least one source");
        }
        for &id in sources {
            self.check(id)?;
        }
        let shape = self.shape(sources[0]).to_vec();
        if sources.iter().any(|&s| self.shape(s) != shape.as_slice()) {
            return config("row_mix sources must share one shape");
        }
        if pick.len() != shape[0] || pick.iter().any(|&p| p >= sources.len()) {
            return config("row_mix pick list does not match the batch");
        }
        let row: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(shape[0] * row);
        for (b, &p) in pick.iter().enumerate() {
            out.extend_from_slice(&self.value(sources[p]).data()[b * row..(b + 1) * row]);
        }
        let value = Tensor::new(shape, out)?;
        self.push(Op::RowMix { sources: sources.to_vec(), pick: pick.to_vec() }, value)
    }

    /// Fused softmax + clamped negative log-likelihood with per-entry weights:
    /// `sum_bk weights[b,k] * -log(max(softmax(logits)[b,k], eps))`.
    ///
    /// Entries whose probability falls below eps contribute a constant and no gradient.
    pub fn weighted_nll(&mut self, logits: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || weights.len() != s[0] * s[1] {
            return config(format!("weighted_nll: logits {s:?} with {} weights", weights.len()));
        }
        let cap = -PROB_EPS.ln();
        let mut probs = Vec::with_capacity(weights.len());
        let mut active = Vec::with_capacity(weights.len());
        let mut total = 0.0;
        for (row, wrow) in self.value(logits).data().chunks(s[1]).zip(weights.chunks(s[1])) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for (&z, &w) in row.iter().zip(wrow) {
                let nll = lse - z;
                probs.push((z - lse).exp());
                active.push(nll <= cap);
                if w != 0.0 {
                    total += w * nll.min(cap);
                }
            }
        }
        self.push(Op::WeightedNll { logits, weights, probs, active }, Tensor::scalar(total))
    }

    /// Reverse pass from a scalar node. Adds d(loss)/d(param) into `stores[tag]`
    /// for every parameter leaf; repeated calls accumulate.
    pub fn backward(&self, loss: NodeId, stores: &mut [&mut ParamStore]) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return state("backward called on a node that was never computed forward");
        }
        if self.value(loss).numel() != 1 {
            return config(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        adj[loss.0] = vec![1.0];

        for i in (0..=loss.0).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { store, index } => {
                    let Some(target) = stores.get_mut(*store) else {
                        return config(format!("no parameter store bound for tag {store}"));
                    };
                    let grad = target.get_mut(*index).grad_mut();
                    if grad.len() != g.len() {
                        return config("parameter store does not match the graph leaf");
                    }
                    grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Dense { x, w, b } => {
                    let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let out = self.shape(*w)[0];
                    let db = acc(&mut adj, *b, out);
                    for row in g.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    // dW[out, in] += g^T[out, B] * x[B, in]
                    let xv = self.value(*x).data();
                    let dw = acc(&mut adj, *w, out * inp);
                    kernels::gemm(out, batch, inp, 1.0, &g, (1, out), xv, (inp, 1), 1.0, dw, (inp, 1));
                    if self.needs_grad(*x) {
                        let wv = self.value(*w).data();
                        let dx = acc(&mut adj, *x, batch * inp);
                        kernels::gemm(batch, out, inp, 1.0, &g, (out, 1), wv, (inp, 1), 1.0, dx, (inp, 1));
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let batch = self.shape(*x)[0];
                    let mut dw = vec![0.0; self.value(*w).numel()];
                    let mut db = vec![0.0; geom.out_channels];
                    if self.needs_grad(*x) {
                        let n = self.value(*x).numel();
                        let dx = acc(&mut adj, *x, n);
                        kernels::conv_backward(geom, batch, cols, self.value(*w).data(), &g, Some(dx), &mut dw, &mut db);
                    } else {
                        kernels::conv_backward(geom, batch, cols, self.value(*w).data(), &g, None, &mut dw, &mut db);
                    }
                    add_into(acc(&mut adj, *w, dw.len()), &dw);
                    add_into(acc(&mut adj, *b, db.len()), &db);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx = acc(&mut adj, *x, g.len());
                    for ((d, &gv), &v) in dx.iter_mut().zip(&g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data();
                    let dx = acc(&mut adj, *x, g.len());
                    for ((d, &gv), &y) in dx.iter_mut().zip(&g).zip(yv) {
                        *d += gv * y * (1.0 - y);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let n = self.value(*x).numel();
                    let dx = acc(&mut adj, *x, n);
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        dx[src] += gv;
                    }
                }
                Op::Softmax { x, axis } => {
                    let shape = node.value.shape();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let y = node.value.data();
                    let dx = acc(&mut adj, *x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                            for k in 0..len {
                                let idx = base + k * inner;
                                dx[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
                Op::Concat(inputs) => {
                    let shape = node.value.shape();
                    let inner: usize = shape[2..].iter().product();
                    let batch = shape[0];
                    let total_row = shape[1] * inner;
                    let mut offset = 0;
                    for &id in inputs {
                        let row = self.shape(id)[1] * inner;
                        let dx = acc(&mut adj, id, batch * row);
                        for b in 0..batch {
                            let src = &g[b * total_row + offset..b * total_row + offset + row];
                            add_into(&mut dx[b * row..(b + 1) * row], src);
                        }
                        offset += row;
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let n = self.value(*x).numel();
                    let inner = n / g.len();
                    let dx = acc(&mut adj, *x, n);
                    for (chunk, &gv) in dx.chunks_mut(inner).zip(&g) {
                        chunk.iter_mut().for_each(|d| *d += gv / inner as f64);
                    }
                }
                Op::ChannelScale { x, gate } => {
                    let xv = self.value(*x).data();
                    let gv = self.value(*gate).data();
                    let inner = xv.len() / gv.len();
                    let mut dgate = vec![0.0; gv.len()];
                    for (c, d) in dgate.iter_mut().enumerate() {
                        let r = c * inner..(c + 1) * inner;
                        *d = g[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum();
                    }
                    let dx = acc(&mut adj, *x, xv.len());
                    for (c, &s) in gv.iter().enumerate() {
                        for k in c * inner..(c + 1) * inner {
                            dx[k] += g[k] * s;
                        }
                    }
                    add_into(acc(&mut adj, *gate, dgate.len()), &dgate);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g);
                    add_into(acc(&mut adj, *b, g.len()), &g);
                }
                Op::Scale(x, f) => {
                    let dx = acc(&mut adj, *x, g.len());
                    dx.iter_mut().zip(&g).for_each(|(d, v)| *d += v * f);
                }
                Op::Reshape(x) => add_into(acc(&mut adj, *x, g.len()), &g),
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    acc(&mut adj, *x, n).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::RowMix { sources, pick } => {
                    let row = g.len() / pick.len();
                    for (b, &p) in pick.iter().enumerate() {
                        let dx = acc(&mut adj, sources[p], g.len());
                        add_into(&mut dx[b * row..(b + 1) * row], &g[b * row..(b + 1) * row]);
                    }
                }
                Op::WeightedNll { logits, weights, probs, active } => {
                    let width = self.shape(*logits)[1];
                    let dx = acc(&mut adj, *logits, weights.len());
                    for r in 0..weights.len() / width {
                        let span = r * width..(r + 1) * width;
                        let live: f64 =
                            weights[span.clone()].iter().zip(&active[span.clone()]).filter(|(_, &a)| a).map(|(w, _)| w).sum();
                        for k in span {
                            let own = if active[k] { weights[k] } else { 0.0 };
                            dx[k] += g[0] * (live * probs[k] - own);
                        }
                    }
                }
            }
        }
        for s in stores.iter() {
            for (name, t) in s.iter() {
                if let Some(grad) = t.grad() {
                    if grad.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        !matches!(self.nodes[id.0].op, Op::Constant)
    }
}

fn acc(adj: &mut [Vec<f64>], id: NodeId, len: usize) -> &mut [f64] {
    let slot = &mut adj[id.0];
    if slot.is_empty() {
        *slot = vec![0.0; len];
    }
    slot
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Softmax of each row of a `[B, C]` value, outside any graph.
pub fn row_softmax(values: &Tensor) -> Vec<f64> {
    let width = *values.shape().last().unwrap_or(&1);
    values.data().chunks(width).flat_map(softmax).collect()
}
