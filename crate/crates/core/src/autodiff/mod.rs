//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] owns every intermediate value. Operations append nodes in
//! evaluation order, so the node vector is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Nodes only carry gradients
//! when one of their inputs does; constants and frozen parameters cost
//! nothing on the way back.

mod kernels;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::featstyle;
use crate::tensor::Tensor;

use kernels::ConvGeom;

pub(crate) use kernels::dot;

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(0);

/// Handle to a node; only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    graph: u32,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        geom: ConvGeom,
    },
    ChannelBias {
        x: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Sum {
        x: usize,
    },
    Dot {
        a: usize,
        b: usize,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        rows: Vec<f64>,
        reduction: Reduction,
    },
    StyleMix {
        z: usize,
        alpha: usize,
        mix: StyleMixSaved,
    },
}

#[derive(Debug)]
struct StyleMixSaved {
    gamma: f64,
    providers: usize,
    /// `[n, m, c]` provider statistics, treated as constants.
    prov_mu: Vec<f64>,
    prov_sigma: Vec<f64>,
    /// `[n, c]` statistics of the mixed feature itself.
    mu: Vec<f64>,
    sigma: Vec<f64>,
    mixed_sigma: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
}

/// Gradients keyed by the leaves they were requested for.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(Error::UnknownNode(id.index));
        }
        Ok(id.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Input that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(id)?].value)
    }

    /// Per-row losses recorded by [`Graph::softmax_cross_entropy`].
    pub fn row_losses(&self, id: NodeId) -> Result<&[f64]> {
        match &self.nodes[self.idx(id)?].op {
            Op::SoftmaxCe { rows, .. } => Ok(rows),
            _ => Err(Error::InvalidArgument(
                "node is not a cross-entropy node".into(),
            )),
        }
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xv, wv, bv) = (
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
        );
        if xv.ndim() != 2 || wv.ndim() != 2 || bv.ndim() != 1 {
            return Err(Error::shape(
                "dense",
                format!("x{:?} w{:?} b{:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let (n, d_in) = (xv.shape()[0], xv.shape()[1]);
        let d_out = wv.shape()[1];
        if wv.shape()[0] != d_in || bv.shape()[0] != d_out {
            return Err(Error::shape(
                "dense",
                format!("x{:?} w{:?} b{:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; n * d_out];
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(bv.data());
        }
        kernels::gemm_nn(xv.data(), wv.data(), &mut out, n, d_in, d_out);
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        self.push(
            Tensor::new(vec![n, d_out], out)?,
            Op::Dense {
                x: xi,
                w: wi,
                b: bi,
            },
            rg,
        )
    }

    /// Cross-correlation of `[n,c,h,w]` input with a `[co,c,kh,kw]` kernel.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (xi, ki) = (self.idx(x)?, self.idx(k)?);
        let (xv, kv) = (&self.nodes[xi].value, &self.nodes[ki].value);
        if xv.ndim() != 4 || kv.ndim() != 4 || xv.shape()[1] != kv.shape()[1] {
            return Err(Error::shape(
                "conv2d",
                format!("x{:?} k{:?}", xv.shape(), kv.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride must be positive".into(),
            ));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, kh, kw) = (kv.shape()[0], kv.shape()[2], kv.shape()[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let (patch, area) = (geom.patch(), geom.out_area());
        let mut cols = vec![0.0; patch * area];
        let mut out = vec![0.0; n * co * area];
        for s in 0..n {
            kernels::im2col(
                &xv.data()[s * c * h * w..(s + 1) * c * h * w],
                &geom,
                &mut cols,
            );
            kernels::gemm_nn(
                kv.data(),
                &cols,
                &mut out[s * co * area..(s + 1) * co * area],
                co,
                patch,
                area,
            );
        }
        let rg = self.rg(xi) || self.rg(ki);
        self.push(
            Tensor::new(vec![n, co, geom.oh, geom.ow], out)?,
            Op::Conv2d { x: xi, k: ki, geom },
            rg,
        )
    }

    /// Adds a `[c]` bias to every spatial position of a `[n,c,h,w]` tensor.
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let (xv, bv) = (&self.nodes[xi].value, &self.nodes[bi].value);
        if xv.ndim() != 4 || bv.ndim() != 1 || bv.shape()[0] != xv.shape()[1] {
            return Err(Error::shape(
                "channel_bias",
                format!("x{:?} b{:?}", xv.shape(), bv.shape()),
            ));
        }
        let c = xv.shape()[1];
        let area = xv.shape()[2] * xv.shape()[3];
        let mut out = xv.clone();
        for (p, plane) in out.data_mut().chunks_mut(area).enumerate() {
            let bias = bv.data()[p % c];
            plane.iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.rg(xi) || self.rg(bi);
        self.push(out, Op::ChannelBias { x: xi, b: bi }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| v.max(0.0));
        let rg = self.rg(xi);
        self.push(out, Op::Relu { x: xi }, rg)
    }

    /// Windowed max over `[n,c,h,w]`; ties resolve to the first position.
    pub fn maxpool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.ndim() != 4
            || size == 0
            || stride == 0
            || size > xv.shape()[2]
            || size > xv.shape()[3]
        {
            return Err(Error::shape(
                "maxpool2d",
                format!("x{:?} window {size} stride {stride}", xv.shape()),
            ));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = xv.data();
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for i in 0..size {
                        for j in 0..size {
                            let at = base + (oy * stride + i) * w + ox * stride + j;
                            if data[at] > data[best] {
                                best = at;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(xi);
        self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::MaxPool { x: xi, argmax },
            rg,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.clone().reshape(shape)?;
        let rg = self.rg(xi);
        self.push(out, Op::Reshape { x: xi }, rg)
    }

    /// Collapses everything but the leading axis.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x)?.shape().to_vec();
        let n = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ai]
            .value
            .zip_map(&self.nodes[bi].value, |x, y| x + y)?;
        let rg = self.rg(ai) || self.rg(bi);
        self.push(out, Op::Add { a: ai, b: bi }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ai]
            .value
            .zip_map(&self.nodes[bi].value, |x, y| x * y)?;
        let rg = self.rg(ai) || self.rg(bi);
        self.push(out, Op::Mul { a: ai, b: bi }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| v * c);
        let rg = self.rg(xi);
        self.push(out, Op::Scale { x: xi, c }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        let rg = self.rg(xi);
        self.push(out, Op::Sum { x: xi }, rg)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = Tensor::scalar(kernels::dot(av.data(), bv.data()));
        let rg = self.rg(ai) || self.rg(bi);
        self.push(out, Op::Dot { a: ai, b: bi }, rg)
    }

    /// Cross-entropy of `[n,k]` logits against class indices, reduced to a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        if lv.ndim() != 2 || lv.shape()[0] != labels.len() || lv.shape()[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?}, {} labels", lv.shape(), labels.len()),
            ));
        }
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; n * k];
        let mut rows = Vec::with_capacity(n);
        for (i, (row, p)) in lv.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|v| *v /= z);
            rows.push(z.ln() + max - row[labels[i]]);
        }
        let total: f64 = rows.iter().sum();
        let value = match reduction {
            Reduction::Mean => total / n as f64,
            Reduction::Sum => total,
        };
        let rg = self.rg(li);
        self.push(
            Tensor::scalar(value),
            Op::SoftmaxCe {
                logits: li,
                labels: labels.to_vec(),
                probs,
                rows,
                reduction,
            },
            rg,
        )
    }

    /// Re-styles each sample's `[c,h,w]` feature map with a mixture of its own
    /// and its providers' channel statistics, blended back by `gamma`.
    ///
    /// `alpha` is `[n, m+1]` (column 0 weights the sample itself);
    /// `prov_mu`/`prov_sigma` are `[n, m, c]` and treated as constants.
    pub fn style_mix(
        &mut self,
        z: NodeId,
        alpha: NodeId,
        prov_mu: &Tensor,
        prov_sigma: &Tensor,
        gamma: f64,
    ) -> Result<NodeId> {
        let (zi, ai) = (self.idx(z)?, self.idx(alpha)?);
        let (zv, av) = (&self.nodes[zi].value, &self.nodes[ai].value);
        if zv.ndim() != 4 || av.ndim() != 2 || av.shape()[0] != zv.shape()[0] || av.shape()[1] < 1 {
            return Err(Error::shape(
                "style_mix",
                format!("z{:?} alpha{:?}", zv.shape(), av.shape()),
            ));
        }
        let (n, c, h, w) = (zv.shape()[0], zv.shape()[1], zv.shape()[2], zv.shape()[3]);
        let m = av.shape()[1] - 1;
        if prov_mu.shape() != [n, m, c] || prov_sigma.shape() != [n, m, c] {
            return Err(Error::shape(
                "style_mix",
                format!(
                    "provider stats {:?}/{:?}, expected [{n}, {m}, {c}]",
                    prov_mu.shape(),
                    prov_sigma.shape()
                ),
            ));
        }
        let area = h * w;
        if area < 2 {
            return Err(Error::Size(
                "feature maps need at least two spatial positions".into(),
            ));
        }
        let mut mu = vec![0.0; n * c];
        let mut sigma = vec![0.0; n * c];
        let mut mixed_sigma = vec![0.0; n * c];
        let mut out = vec![0.0; n * c * area];
        for s in 0..n {
            let a = &av.data()[s * (m + 1)..(s + 1) * (m + 1)];
            for ch in 0..c {
                let p = s * c + ch;
                let plane = &zv.data()[p * area..(p + 1) * area];
                let (pm, ps) = featstyle::plane_stats(plane);
                let mut mm = a[0] * pm;
                let mut ms = a[0] * ps;
                for l in 0..m {
                    let q = (s * m + l) * c + ch;
                    mm += a[l + 1] * prov_mu.data()[q];
                    ms += a[l + 1] * prov_sigma.data()[q];
                }
                for (o, &v) in out[p * area..(p + 1) * area].iter_mut().zip(plane) {
                    let restyled = mm + ms * (v - pm) / ps;
                    *o = gamma * restyled + (1.0 - gamma) * v;
                }
                mu[p] = pm;
                sigma[p] = ps;
                mixed_sigma[p] = ms;
            }
        }
        let rg = self.rg(zi) || self.rg(ai);
        self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::StyleMix {
                z: zi,
                alpha: ai,
                mix: StyleMixSaved {
                    gamma,
                    providers: m,
                    prov_mu: prov_mu.data().to_vec(),
                    prov_sigma: prov_sigma.data().to_vec(),
                    mu,
                    sigma,
                    mixed_sigma,
                },
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for `leaves`.
    pub fn backward(&self, loss: NodeId, leaves: &[NodeId]) -> Result<GradientMap> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut wanted = Vec::with_capacity(leaves.len());
        for &leaf in leaves {
            let i = self.idx(leaf)?;
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                return Err(Error::InvalidArgument(format!(
                    "node {i} is not a differentiable leaf"
                )));
            }
            wanted.push((leaf, i));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), 1.0));
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = GradientMap::default();
        for (leaf, i) in wanted {
            let g = grads[i]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape()));
            out.grads.insert(leaf, g);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (n, d_in, d_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * d_in];
                    kernels::gemm_nt(g.data(), wv.data(), &mut dx, n, d_out, d_in);
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; d_in * d_out];
                    kernels::gemm_tn(xv.data(), g.data(), &mut dw, n, d_in, d_out);
                    accumulate(grads, *w, wv.shape(), dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; d_out];
                    for row in g.data().chunks(d_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, &[d_out], db);
                }
            }
            Op::Conv2d { x, k, geom } => {
                let (xv, kv) = (&self.nodes[*x].value, &self.nodes[*k].value);
                let n = xv.shape()[0];
                let co = kv.shape()[0];
                let (patch, area) = (geom.patch(), geom.out_area());
                let in_len = geom.c * geom.h * geom.w;
                let mut cols = vec![0.0; patch * area];
                let mut dk = self.rg(*k).then(|| vec![0.0; kv.len()]);
                let mut dx = self.rg(*x).then(|| vec![0.0; xv.len()]);
                for s in 0..n {
                    let gs = &g.data()[s * co * area..(s + 1) * co * area];
                    if let Some(dk) = dk.as_mut() {
                        kernels::im2col(&xv.data()[s * in_len..(s + 1) * in_len], geom, &mut cols);
                        kernels::gemm_nt(gs, &cols, dk, co, area, patch);
                    }
                    if let Some(dx) = dx.as_mut() {
                        kernels::gemm_tn_overwrite(kv.data(), gs, &mut cols, co, patch, area);
                        kernels::col2im(&cols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
                if let Some(dk) = dk {
                    accumulate(grads, *k, kv.shape(), dk);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
            Op::ChannelBias { x, b } => {
                let xv = &self.nodes[*x].value;
                if self.rg(*x) {
                    accumulate(grads, *x, xv.shape(), g.data().to_vec());
                }
                if self.rg(*b) {
                    let c = xv.shape()[1];
                    let area = xv.shape()[2] * xv.shape()[3];
                    let mut db = vec![0.0; c];
                    for (p, plane) in g.data().chunks(area).enumerate() {
                        db[p % c] += plane.iter().sum::<f64>();
                    }
                    accumulate(grads, *b, &[c], db);
                }
            }
            Op::Relu { x } => {
                let xv = &self.nodes[*x].value;
                let dx = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::MaxPool { x, argmax } => {
                let xv = &self.nodes[*x].value;
                let mut dx = vec![0.0; xv.len()];
                for (&at, &gv) in argmax.iter().zip(g.data()) {
                    dx[at] += gv;
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Reshape { x } => {
                let xv = &self.nodes[*x].value;
                accumulate(grads, *x, xv.shape(), g.data().to_vec());
            }
            Op::Add { a, b } => {
                for &t in [a, b] {
                    if self.rg(t) {
                        accumulate(grads, t, self.nodes[t].value.shape(), g.data().to_vec());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.rg(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, av.shape(), d);
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, bv.shape(), d);
                }
            }
            Op::Scale { x, c } => {
                let xv = &self.nodes[*x].value;
                accumulate(
                    grads,
                    *x,
                    xv.shape(),
                    g.data().iter().map(|v| v * c).collect(),
                );
            }
            Op::Sum { x } => {
                let xv = &self.nodes[*x].value;
                accumulate(grads, *x, xv.shape(), vec![g.item(); xv.len()]);
            }
            Op::Dot { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let s = g.item();
                if self.rg(*a) {
                    accumulate(
                        grads,
                        *a,
                        av.shape(),
                        bv.data().iter().map(|v| v * s).collect(),
                    );
                }
                if self.rg(*b) {
                    accumulate(
                        grads,
                        *b,
                        bv.shape(),
                        av.data().iter().map(|v| v * s).collect(),
                    );
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
                reduction,
                ..
            } => {
                let lv = &self.nodes[*logits].value;
                let (n, k) = (lv.shape()[0], lv.shape()[1]);
                let scale = match reduction {
                    Reduction::Mean => g.item() / n as f64,
                    Reduction::Sum => g.item(),
                };
                let mut d = probs.clone();
                for (i, row) in d.chunks_mut(k).enumerate() {
                    row[labels[i]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, lv.shape(), d);
            }
            Op::StyleMix { z, alpha, mix } => self.style_mix_backward(*z, *alpha, mix, g, grads),
        }
    }

    fn style_mix_backward(
        &self,
        z: usize,
        alpha: usize,
        mix: &StyleMixSaved,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let zv = &self.nodes[z].value;
        let av = &self.nodes[alpha].value;
        let (n, c, h, w) = (zv.shape()[0], zv.shape()[1], zv.shape()[2], zv.shape()[3]);
        let area = h * w;
        let m = mix.providers;
        let gamma = mix.gamma;
        let mut dz = self.rg(z).then(|| vec![0.0; zv.len()]);
        let mut da = self.rg(alpha).then(|| vec![0.0; av.len()]);
        for s in 0..n {
            let a = &av.data()[s * (m + 1)..(s + 1) * (m + 1)];
            for ch in 0..c {
                let p = s * c + ch;
                let plane = &zv.data()[p * area..(p + 1) * area];
                let gp = &g.data()[p * area..(p + 1) * area];
                let (pm, ps) = (mix.mu[p], mix.sigma[p]);
                let ms = mix.mixed_sigma[p];
                // Upstream through the restyled branch is gamma * g.
                let mut d_mixed_mu = 0.0;
                let mut d_mixed_sigma = 0.0;
                for (&v, &gv) in plane.iter().zip(gp) {
                    d_mixed_mu += gamma * gv;
                    d_mixed_sigma += gamma * gv * (v - pm) / ps;
                }
                if let Some(da) = da.as_mut() {
                    let row = &mut da[s * (m + 1)..(s + 1) * (m + 1)];
                    row[0] += d_mixed_mu * pm + d_mixed_sigma * ps;
                    for l in 0..m {
                        let q = (s * m + l) * c + ch;
                        row[l + 1] +=
                            d_mixed_mu * mix.prov_mu[q] + d_mixed_sigma * mix.prov_sigma[q];
                    }
                }
                if let Some(dz) = dz.as_mut() {
                    // Through the sample's own statistics.
                    let mut d_mu = a[0] * d_mixed_mu - ms / ps * gamma * gp.iter().sum::<f64>();
                    let mut d_sigma = a[0] * d_mixed_sigma;
                    let mut acc = 0.0;
                    for (&v, &gv) in plane.iter().zip(gp) {
                        acc += gamma * gv * (v - pm);
                    }
                    d_sigma -= ms / (ps * ps) * acc;
                    let dv = if featstyle::is_floored(ps) {
                        0.0
                    } else {
                        d_sigma / (2.0 * ps)
                    };
                    let denom = (area - 1) as f64;
                    d_mu /= area as f64;
                    let scale = gamma * ms / ps + (1.0 - gamma);
                    for ((o, &v), &gv) in dz[p * area..(p + 1) * area].iter_mut().zip(plane).zip(gp)
                    {
                        *o += scale * gv + d_mu + dv * 2.0 * (v - pm) / denom;
                    }
                }
            }
        }
        if let Some(dz) = dz {
            accumulate(grads, z, zv.shape(), dz);
        }
        if let Some(da) = da {
            accumulate(grads, alpha, av.shape(), da);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], at: usize, shape: &[usize], data: Vec<f64>) {
    match grads[at].as_mut() {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        None => {
            grads[at] = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"));
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Dense { .. } => "dense",
        Op::Conv2d { .. } => "conv2d",
        Op::ChannelBias { .. } => "channel_bias",
        Op::Relu { .. } => "relu",
        Op::MaxPool { .. } => "maxpool2d",
        Op::Reshape { .. } => "reshape",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Sum { .. } => "sum",
        Op::Dot { .. } => "dot",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        Op::StyleMix { .. } => "style_mix",
    }
}

#[cfg(test)]
mod tests;
