//! Differentiation tape: eager forward evaluation with recorded operations,
//! reverse accumulation in strict reverse recording order.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{NodeId, Tensor};
use crate::error::{Error, Result};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[1,C,H,W] + bias[C]`, the one sanctioned broadcast.
    BiasAdd {
        x: NodeId,
        bias: NodeId,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Scale {
        x: NodeId,
        factor: f64,
    },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    MatMul(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    PoolAvg {
        x: NodeId,
        out_h: usize,
        out_w: usize,
    },
    PoolMax {
        x: NodeId,
        out_h: usize,
        out_w: usize,
    },
    Upsample {
        x: NodeId,
        out_h: usize,
        out_w: usize,
    },
    Reshape(NodeId),
    Transpose2d(NodeId),
    ConcatChannels(Vec<NodeId>),
    SumAll(NodeId),
    /// Blockwise softmax attention: query rows attend over per-source
    /// key/value blocks. Cross-block reductions use value-sorted summation so
    /// the output is bit-identical under any permutation of the sources.
    Attend {
        query: NodeId,
        keys: Vec<NodeId>,
        values: Vec<NodeId>,
    },
    /// Elementwise mean of equally-shaped inputs, value-sorted summation.
    MeanSymmetric(Vec<NodeId>),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
}

/// One forward/backward pass owns one tape. Tensors made outside the tape
/// (parameters, inputs) are registered as leaves on first use, keyed by their
/// data pointer, so a parameter used by several branches maps to a single
/// node and its gradients accumulate.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    leaves: HashMap<(usize, Vec<usize>), NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node_for(&mut self, t: &Tensor) -> NodeId {
        if let Some((tape_id, id)) = t.node {
            if tape_id == self.id {
                return id;
            }
        }
        let key = (Arc::as_ptr(t.data_arc()) as *const () as usize, t.shape().to_vec());
        if let Some(&id) = self.leaves.get(&key) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.data_arc().clone(),
        });
        self.leaves.insert(key, id);
        id
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Tensor {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let id = self.nodes.len();
        let value = Arc::new(value);
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: value.clone(),
        });
        let mut t = Tensor::from_parts(shape, value);
        t.node = Some((self.id, id));
        t
    }

    fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary(&mut self, a: &Tensor, b: &Tensor, name: &str) -> Result<(NodeId, NodeId)> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "{name}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok((self.node_for(a), self.node_for(b)))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (na, nb) = self.binary(a, b, "add")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(na, nb), a.shape().to_vec(), out))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (na, nb) = self.binary(a, b, "sub")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub(na, nb), a.shape().to_vec(), out))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (na, nb) = self.binary(a, b, "mul")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(na, nb), a.shape().to_vec(), out))
    }

    /// Add a per-channel bias vector to a `[1,C,H,W]` map.
    pub fn bias_add(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if bias.shape() != [c] {
            return Err(Error::shape(format!(
                "bias_add: bias {:?} vs {c} channels",
                bias.shape()
            )));
        }
        let nx = self.node_for(x);
        let nb = self.node_for(bias);
        let mut out = x.data().to_vec();
        for ci in 0..c {
            let bc = bias.data()[ci];
            for v in &mut out[ci * h * w..(ci + 1) * h * w] {
                *v += bc;
            }
        }
        Ok(self.push(Op::BiasAdd { x: nx, bias: nb }, x.shape().to_vec(), out))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        let n = self.node_for(x);
        let out = x.data().iter().map(|&v| sigmoid(v)).collect();
        self.push(Op::Sigmoid(n), x.shape().to_vec(), out)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Tensor {
        let n = self.node_for(x);
        let out = x.data().iter().map(|&v| v.tanh()).collect();
        self.push(Op::Tanh(n), x.shape().to_vec(), out)
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let n = self.node_for(x);
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu(n), x.shape().to_vec(), out)
    }

    /// Multiply by a compile-time constant (not a tape node).
    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Tensor {
        let n = self.node_for(x);
        let out = x.data().iter().map(|&v| v * factor).collect();
        self.push(Op::Scale { x: n, factor }, x.shape().to_vec(), out)
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// Cross-correlation with zero padding. `x: [1,Cin,H,W]`,
    /// `kernel: [Cout,Cin,kH,kW]`, optional `bias: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (_, cin, h, w) = x.dims4()?;
        let kd = kernel.shape();
        if kd.len() != 4 || kd[1] != cin {
            return Err(Error::shape(format!(
                "conv2d: kernel {kd:?} does not accept {cin} input channels"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be positive"));
        }
        let (cout, kh, kw) = (kd[0], kd[2], kd[3]);
        let oh = conv_out(h, kh, stride, padding)?;
        let ow = conv_out(w, kw, stride, padding)?;
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} vs {cout} output channels",
                    b.shape()
                )));
            }
        }

        let geom = super::conv::ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let mut out = vec![0.0; cout * oh * ow];
        super::conv::forward(x.data(), kernel.data(), geom, &mut out);
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b.data()[co];
                for v in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }

        let nx = self.node_for(x);
        let nk = self.node_for(kernel);
        let nb = bias.map(|b| self.node_for(b));
        Ok(self.push(
            Op::Conv2d {
                x: nx,
                kernel: nk,
                bias: nb,
                stride,
                padding,
            },
            vec![1, cout, oh, ow],
            out,
        ))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = a.dims2()?;
        let (kb, n) = b.dims2()?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul: inner dims {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, ka, n, a.data(), b.data(), &mut out);
        let na = self.node_for(a);
        let nb = self.node_for(b);
        Ok(self.push(Op::MatMul(na, nb), vec![m, n], out))
    }

    // ── softmax ─────────────────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&x.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let nx = self.node_for(x);
        Ok(self.push(Op::SoftmaxRows(nx), vec![m, n], out))
    }

    pub fn log_softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - max - lse;
            }
        }
        let nx = self.node_for(x);
        Ok(self.push(Op::LogSoftmaxRows(nx), vec![m, n], out))
    }

    // ── pooling / resampling ────────────────────────────────────────────

    /// ROI average pooling of the whole map to `out_h x out_w` bins.
    /// Bin i spans `floor(i*H/out_h) .. floor((i+1)*H/out_h)`.
    pub fn pool_avg(&mut self, x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        check_pool(h, w, out_h, out_w)?;
        let mut out = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = bin_bounds(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = bin_bounds(ox, w, out_w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[y * w + xx];
                        }
                    }
                    out[(ci * out_h + oy) * out_w + ox] =
                        acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let nx = self.node_for(x);
        Ok(self.push(
            Op::PoolAvg { x: nx, out_h, out_w },
            vec![1, c, out_h, out_w],
            out,
        ))
    }

    /// ROI max pooling, same binning as [`Tape::pool_avg`].
    pub fn pool_max(&mut self, x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        check_pool(h, w, out_h, out_w)?;
        let mut out = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = bin_bounds(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = bin_bounds(ox, w, out_w);
                    let mut best = f64::NEG_INFINITY;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            best = best.max(plane[y * w + xx]);
                        }
                    }
                    out[(ci * out_h + oy) * out_w + ox] = best;
                }
            }
        }
        let nx = self.node_for(x);
        Ok(self.push(
            Op::PoolMax { x: nx, out_h, out_w },
            vec![1, c, out_h, out_w],
            out,
        ))
    }

    /// Bilinear upsampling, align-corners false. Upsampling a 1x1 map is an
    /// exact broadcast.
    pub fn upsample_bilinear(&mut self, x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if out_h < h || out_w < w {
            return Err(Error::shape(format!(
                "upsample: target {out_h}x{out_w} smaller than {h}x{w}"
            )));
        }
        let mut out = vec![0.0; c * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = sample_coord(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = sample_coord(ox, w, out_w);
                for ci in 0..c {
                    let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
                    let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
                    let bot = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
                    out[(ci * out_h + oy) * out_w + ox] = lerp(top, bot, fy);
                }
            }
        }
        let nx = self.node_for(x);
        Ok(self.push(
            Op::Upsample { x: nx, out_h, out_w },
            vec![1, c, out_h, out_w],
            out,
        ))
    }

    // ── shape ───────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {shape:?}",
                x.shape()
            )));
        }
        let nx = self.node_for(x);
        // Same layout: share the buffer.
        let id = self.nodes.len();
        let value = self.nodes[nx].value.clone();
        self.nodes.push(Node {
            op: Op::Reshape(nx),
            shape: shape.to_vec(),
            value: value.clone(),
        });
        let mut t = Tensor::from_parts(shape.to_vec(), value);
        t.node = Some((self.id, id));
        Ok(t)
    }

    pub fn transpose2d(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let nx = self.node_for(x);
        Ok(self.push(Op::Transpose2d(nx), vec![c, r], out))
    }

    pub fn concat_channels(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channels: no inputs"));
        }
        let (_, _, h, w) = parts[0].dims4()?;
        let mut ctotal = 0;
        for p in parts {
            let (_, pc, ph, pw) = p.dims4()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: {ph}x{pw} vs {h}x{w}"
                )));
            }
            ctotal += pc;
        }
        let mut out = Vec::with_capacity(ctotal * h * w);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| self.node_for(p)).collect();
        Ok(self.push(Op::ConcatChannels(ids), vec![1, ctotal, h, w], out))
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let n = self.node_for(x);
        let s: f64 = x.data().iter().sum();
        self.push(Op::SumAll(n), vec![1], vec![s])
    }

    // ── attention ───────────────────────────────────────────────────────

    /// Softmax attention of `query` rows over the concatenation of the
    /// per-source key/value blocks. `query: [P,Ck]`, `keys[s]: [Rs,Ck]`,
    /// `values[s]: [Rs,Cv]`; output `[P,Cv]`. The output is bit-invariant
    /// under permutations of the source blocks.
    pub fn attend(&mut self, query: &Tensor, keys: &[Tensor], values: &[Tensor]) -> Result<Tensor> {
        if keys.is_empty() || keys.len() != values.len() {
            return Err(Error::shape(format!(
                "attend: {} key blocks vs {} value blocks",
                keys.len(),
                values.len()
            )));
        }
        let (p, ck) = query.dims2()?;
        let (_, cv) = values[0].dims2()?;
        for (k, v) in keys.iter().zip(values) {
            let (rk, ckk) = k.dims2()?;
            let (rv, cvv) = v.dims2()?;
            if ckk != ck || cvv != cv || rk != rv {
                return Err(Error::shape(format!(
                    "attend: key {:?} / value {:?} incompatible with query {:?}",
                    k.shape(),
                    v.shape(),
                    query.shape()
                )));
            }
        }

        let fwd = attend_forward(
            p,
            ck,
            cv,
            query.data(),
            &keys.iter().map(|k| k.data()).collect::<Vec<_>>(),
            &values.iter().map(|v| v.data()).collect::<Vec<_>>(),
            &keys.iter().map(|k| k.shape()[0]).collect::<Vec<_>>(),
        );

        let nq = self.node_for(query);
        let nk: Vec<NodeId> = keys.iter().map(|k| self.node_for(k)).collect();
        let nv: Vec<NodeId> = values.iter().map(|v| self.node_for(v)).collect();
        Ok(self.push(
            Op::Attend {
                query: nq,
                keys: nk,
                values: nv,
            },
            vec![p, cv],
            fwd,
        ))
    }

    /// Elementwise mean of equally-shaped tensors. Summation is value-sorted
    /// per element, so the result is bit-invariant under input permutation.
    pub fn mean_symmetric(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("mean_symmetric: no inputs"));
        }
        let shape = parts[0].shape().to_vec();
        for p in parts {
            if p.shape() != shape {
                return Err(Error::shape(format!(
                    "mean_symmetric: {:?} vs {shape:?}",
                    p.shape()
                )));
            }
        }
        let n = parts.len() as f64;
        let numel = parts[0].numel();
        let mut out = vec![0.0; numel];
        let mut scratch = vec![0.0; parts.len()];
        for (i, o) in out.iter_mut().enumerate() {
            for (s, p) in scratch.iter_mut().zip(parts) {
                *s = p.data()[i];
            }
            *o = sorted_sum(&mut scratch) / n;
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| self.node_for(p)).collect();
        Ok(self.push(Op::MeanSymmetric(ids), shape, out))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar loss. Visits nodes in strict
    /// reverse recording order; nodes that did not influence the loss keep a
    /// zero (absent) gradient.
    pub fn backward(&mut self, loss: &Tensor) -> Result<Gradients<'_>> {
        if loss.numel() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got {:?}",
                loss.shape()
            )));
        }
        let loss_id = self.node_for(loss);
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss_id] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients { tape: self, grads })
    }

    fn accumulate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_to = |grads: &mut [Option<Vec<f64>>], target: NodeId, delta: &[f64]| {
            let slot = grads[target].get_or_insert_with(|| vec![0.0; delta.len()]);
            for (a, d) in slot.iter_mut().zip(delta) {
                *a += d;
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g);
                add_to(grads, *b, g);
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                add_to(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*b))
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gv, av)| gv * av)
                    .collect();
                add_to(grads, *a, &da);
                add_to(grads, *b, &db);
            }
            Op::BiasAdd { x, bias } => {
                add_to(grads, *x, g);
                let c = self.shape(*bias)[0];
                let hw = g.len() / c;
                let mut db = vec![0.0; c];
                for (ci, dbv) in db.iter_mut().enumerate() {
                    *dbv = g[ci * hw..(ci + 1) * hw].iter().sum();
                }
                add_to(grads, *bias, &db);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(id))
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                add_to(grads, *x, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(id))
                    .map(|(gv, t)| gv * (1.0 - t * t))
                    .collect();
                add_to(grads, *x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_to(grads, *x, &dx);
            }
            Op::Scale { x, factor } => {
                let dx: Vec<f64> = g.iter().map(|gv| gv * factor).collect();
                add_to(grads, *x, &dx);
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let xs = self.shape(*x);
                let ks = self.shape(*kernel);
                let (cin, h, w) = (xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let os = self.shape(id);
                let (oh, ow) = (os[2], os[3]);

                let geom = super::conv::ConvGeom {
                    cin,
                    h,
                    w,
                    cout,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *padding,
                    oh,
                    ow,
                };

                if let Some(b) = bias {
                    let mut db = vec![0.0; cout];
                    for (co, dbv) in db.iter_mut().enumerate() {
                        *dbv = g[co * oh * ow..(co + 1) * oh * ow].iter().sum();
                    }
                    add_to(grads, *b, &db);
                }

                let mut dk = vec![0.0; cout * cin * kh * kw];
                super::conv::backward_kernel(g, self.value(*x), geom, &mut dk);
                add_to(grads, *kernel, &dk);

                let mut dx = vec![0.0; cin * h * w];
                super::conv::backward_input(g, self.value(*kernel), geom, &mut dx);
                add_to(grads, *x, &dx);
            }
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.shape(*b)[1];
                let mut da = vec![0.0; m * k];
                gemm_nt(m, n, k, g, self.value(*b), &mut da);
                add_to(grads, *a, &da);
                let mut db = vec![0.0; k * n];
                gemm_tn(k, m, n, self.value(*a), g, &mut db);
                add_to(grads, *b, &db);
            }
            Op::SoftmaxRows(x) => {
                let s = self.value(id);
                let (m, n) = {
                    let sh = self.shape(id);
                    (sh[0], sh[1])
                };
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let srow = &s[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for j in 0..n {
                        dx[i * n + j] = srow[j] * (grow[j] - dot);
                    }
                }
                add_to(grads, *x, &dx);
            }
            Op::LogSoftmaxRows(x) => {
                let lp = self.value(id);
                let (m, n) = {
                    let sh = self.shape(id);
                    (sh[0], sh[1])
                };
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..n {
                        dx[i * n + j] = grow[j] - lp[i * n + j].exp() * gsum;
                    }
                }
                add_to(grads, *x, &dx);
            }
            Op::PoolAvg { x, out_h, out_w } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for oy in 0..*out_h {
                        let (y0, y1) = bin_bounds(oy, h, *out_h);
                        for ox in 0..*out_w {
                            let (x0, x1) = bin_bounds(ox, w, *out_w);
                            let gv = g[(ci * out_h + oy) * out_w + ox]
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    dx[ci * h * w + y * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                add_to(grads, *x, &dx);
            }
            Op::PoolMax { x, out_h, out_w } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[1], xs[2], xs[3]);
                let xv = self.value(*x);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    let plane = &xv[ci * h * w..(ci + 1) * h * w];
                    for oy in 0..*out_h {
                        let (y0, y1) = bin_bounds(oy, h, *out_h);
                        for ox in 0..*out_w {
                            let (x0, x1) = bin_bounds(ox, w, *out_w);
                            // first maximum in scan order, matching forward
                            let mut best = f64::NEG_INFINITY;
                            let mut arg = (y0, x0);
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    if plane[y * w + xx] > best {
                                        best = plane[y * w + xx];
                                        arg = (y, xx);
                                    }
                                }
                            }
                            dx[ci * h * w + arg.0 * w + arg.1] +=
                                g[(ci * out_h + oy) * out_w + ox];
                        }
                    }
                }
                add_to(grads, *x, &dx);
            }
            Op::Upsample { x, out_h, out_w } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; c * h * w];
                for oy in 0..*out_h {
                    let (y0, y1, fy) = sample_coord(oy, h, *out_h);
                    for ox in 0..*out_w {
                        let (x0, x1, fx) = sample_coord(ox, w, *out_w);
                        for ci in 0..c {
                            let gv = g[(ci * out_h + oy) * out_w + ox];
                            let base = ci * h * w;
                            dx[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dx[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dx[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                            dx[base + y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                add_to(grads, *x, &dx);
            }
            Op::Reshape(x) => add_to(grads, *x, g),
            Op::Transpose2d(x) => {
                let (r, c) = {
                    let s = self.shape(id);
                    (s[0], s[1])
                };
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                add_to(grads, *x, &dx);
            }
            Op::ConcatChannels(parts) => {
                let mut offset = 0;
                for &pid in parts {
                    let len = self.value(pid).len();
                    add_to(grads, pid, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                let dx = vec![g[0]; n];
                add_to(grads, *x, &dx);
            }
            Op::Attend {
                query,
                keys,
                values,
            } => {
                let (p, ck) = {
                    let s = self.shape(*query);
                    (s[0], s[1])
                };
                let cv = self.shape(values[0])[1];
                let kdata: Vec<&[f64]> = keys.iter().map(|&k| self.value(k)).collect();
                let vdata: Vec<&[f64]> = values.iter().map(|&v| self.value(v)).collect();
                let rows: Vec<usize> = keys.iter().map(|&k| self.shape(k)[0]).collect();
                let (dq, dks, dvs) =
                    attend_backward(p, ck, cv, self.value(*query), &kdata, &vdata, &rows, g);
                add_to(grads, *query, &dq);
                for ((&kid, dk), (&vid, dv)) in
                    keys.iter().zip(&dks).zip(values.iter().zip(&dvs))
                {
                    add_to(grads, kid, dk);
                    add_to(grads, vid, dv);
                }
            }
            Op::MeanSymmetric(parts) => {
                let n = parts.len() as f64;
                let dp: Vec<f64> = g.iter().map(|gv| gv / n).collect();
                for &pid in parts {
                    add_to(grads, pid, &dp);
                }
            }
        }
    }
}

/// Gradient buffers produced by [`Tape::backward`], queried per tensor.
pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients<'_> {
    /// Gradient of the loss w.r.t. `t`, or `None` if `t` did not influence
    /// the loss (a zero gradient).
    pub fn for_tensor(&self, t: &Tensor) -> Option<&[f64]> {
        let id = if let Some((tape_id, id)) = t.node {
            if tape_id == self.tape.id {
                Some(id)
            } else {
                None
            }
        } else {
            None
        };
        let id = id.or_else(|| {
            let key = (
                Arc::as_ptr(t.data_arc()) as *const () as usize,
                t.shape().to_vec(),
            );
            self.tape.leaves.get(&key).copied()
        })?;
        self.grads[id].as_deref()
    }
}

// ── shared numeric helpers ──────────────────────────────────────────────

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::shape(format!(
            "conv2d: kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_pool(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::shape(format!(
            "pool: {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    Ok(())
}

pub(crate) fn bin_bounds(i: usize, size: usize, bins: usize) -> (usize, usize) {
    (i * size / bins, (i + 1) * size / bins)
}

fn sample_coord(o: usize, in_size: usize, out_size: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * in_size as f64 / out_size as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(in_size - 1);
    let i1 = (i0 + 1).min(in_size - 1);
    (i0, i1, s - i0 as f64)
}

/// `a + (b - a) * f`: exact when `a == b`, which makes 1x1 upsampling an
/// exact broadcast and keeps constant maps constant.
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a + (b - a) * f
}

/// Ascending value-sorted summation; the result depends only on the multiset
/// of addends, never on their input order.
fn sorted_sum(vals: &mut [f64]) -> f64 {
    vals.sort_unstable_by(|a, b| a.total_cmp(b));
    vals.iter().sum()
}



fn attend_forward(
    p: usize,
    _ck: usize,
    cv: usize,
    q: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    rows: &[usize],
) -> Vec<f64> {
    let blocks = attend_blocks(p, q, keys, rows);
    let nsrc = keys.len();

    // per-source denominators and numerators
    let mut dens: Vec<Vec<f64>> = Vec::with_capacity(nsrc);
    let mut nums: Vec<Vec<f64>> = Vec::with_capacity(nsrc);
    for (s, exps) in blocks.exps.iter().enumerate() {
        let r = rows[s];
        let mut den = vec![0.0; p];
        for (pi, d) in den.iter_mut().enumerate() {
            *d = exps[pi * r..(pi + 1) * r].iter().sum();
        }
        let mut num = vec![0.0; p * cv];
        gemm_nn(p, r, cv, exps, values[s], &mut num);
        dens.push(den);
        nums.push(num);
    }

    let mut out = vec![0.0; p * cv];
    let mut scratch = vec![0.0; nsrc];
    for pi in 0..p {
        for (s, den) in dens.iter().enumerate() {
            scratch[s] = den[pi];
        }
        let dtot = sorted_sum(&mut scratch.clone());
        for c in 0..cv {
            for (s, num) in nums.iter().enumerate() {
                scratch[s] = num[pi * cv + c];
            }
            out[pi * cv + c] = sorted_sum(&mut scratch) / dtot;
        }
    }
    out
}

struct AttendBlocks {
    /// exp(S - rowmax) per source, each `[P x Rs]`
    exps: Vec<Vec<f64>>,
}

fn attend_blocks(p: usize, q: &[f64], keys: &[&[f64]], rows: &[usize]) -> AttendBlocks {
    let ck = q.len() / p;
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(keys.len());
    for (s, k) in keys.iter().enumerate() {
        let r = rows[s];
        let mut sc = vec![0.0; p * r];
        gemm_nt(p, ck, r, q, k, &mut sc);
        scores.push(sc);
    }
    // global row max across all blocks (max is order-independent)
    let mut rowmax = vec![f64::NEG_INFINITY; p];
    for (s, sc) in scores.iter().enumerate() {
        let r = rows[s];
        for (pi, m) in rowmax.iter_mut().enumerate() {
            for &v in &sc[pi * r..(pi + 1) * r] {
                if v > *m {
                    *m = v;
                }
            }
        }
    }
    for (s, sc) in scores.iter_mut().enumerate() {
        let r = rows[s];
        for pi in 0..p {
            for v in &mut sc[pi * r..(pi + 1) * r] {
                *v = (*v - rowmax[pi]).exp();
            }
        }
    }
    AttendBlocks { exps: scores }
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn attend_backward(
    p: usize,
    ck: usize,
    cv: usize,
    q: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    rows: &[usize],
    g: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let blocks = attend_blocks(p, q, keys, rows);
    let nsrc = keys.len();

    let mut den = vec![0.0; p];
    for (s, exps) in blocks.exps.iter().enumerate() {
        let r = rows[s];
        for (pi, d) in den.iter_mut().enumerate() {
            *d += exps[pi * r..(pi + 1) * r].iter().sum::<f64>();
        }
    }

    // attention weights per source
    let attn: Vec<Vec<f64>> = blocks
        .exps
        .iter()
        .enumerate()
        .map(|(s, exps)| {
            let r = rows[s];
            let mut a = exps.clone();
            for pi in 0..p {
                for v in &mut a[pi * r..(pi + 1) * r] {
                    *v /= den[pi];
                }
            }
            a
        })
        .collect();

    // dA and the per-row dot used by the softmax backward
    let mut dattn: Vec<Vec<f64>> = Vec::with_capacity(nsrc);
    let mut rowdot = vec![0.0; p];
    for s in 0..nsrc {
        let r = rows[s];
        let mut da = vec![0.0; p * r];
        gemm_nt(p, cv, r, g, values[s], &mut da);
        for pi in 0..p {
            for j in 0..r {
                rowdot[pi] += da[pi * r + j] * attn[s][pi * r + j];
            }
        }
        dattn.push(da);
    }

    let mut dq = vec![0.0; p * ck];
    let mut dks = Vec::with_capacity(nsrc);
    let mut dvs = Vec::with_capacity(nsrc);
    for s in 0..nsrc {
        let r = rows[s];
        let mut dv = vec![0.0; r * cv];
        gemm_tn(r, p, cv, &attn[s], g, &mut dv);
        dvs.push(dv);

        let mut ds = vec![0.0; p * r];
        for pi in 0..p {
            for j in 0..r {
                ds[pi * r + j] = attn[s][pi * r + j] * (dattn[s][pi * r + j] - rowdot[pi]);
            }
        }
        gemm_nn(p, r, ck, &ds, keys[s], &mut dq);
        let mut dk = vec![0.0; r * ck];
        gemm_tn(r, p, ck, &ds, q, &mut dk);
        dks.push(dk);
    }
    (dq, dks, dvs)
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_gradients, GradCheck};
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// FD-check a scalar-valued builder against the tape's own gradients.
    fn fd_ok(
        build: impl Fn(&mut Tape, &[Tensor]) -> crate::error::Result<Tensor>,
        params: &[Tensor],
        tol: f64,
        h: f64,
    ) {
        // analytic
        let mut tape = Tape::new();
        let loss = build(&mut tape, params).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .map(|p| {
                grads
                    .for_tensor(p)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect();
        let mut eval = |ps: &[Tensor]| {
            let mut t = Tape::new();
            Ok(build(&mut t, ps)?.item())
        };
        let cfg = GradCheck {
            h,
            probes_per_tensor: 16,
            seed: 7,
        };
        let worst = check_gradients(&mut eval, params, &analytic, &cfg).unwrap();
        assert!(worst < tol, "worst relative error {worst} >= {tol}");
    }

    /// random-weight scalar readout so gradients reach every element
    fn readout(tape: &mut Tape, x: &Tensor, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(x.shape(), |_| rng.gen_range(-1.0..1.0));
        let prod = tape.mul(x, &w).unwrap();
        tape.sum_all(&prod)
    }

    #[test]
    fn sigmoid_of_zeros_is_half() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let y = tape.sigmoid(&x);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -7.0]).unwrap();
        let ones = Tensor::full(&[2, 3], 1.0);
        let y = tape.mul(&x, &ones).unwrap();
        assert!(y.bit_eq(&Tensor::new(vec![2, 3], x.data().to_vec()).unwrap()));
    }

    #[test]
    fn binary_ops_reject_shape_mismatch() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(tape.add(&a, &b).is_err());
        assert!(tape.mul(&a, &b).is_err());
        assert!(tape.sub(&a, &b).is_err());
    }

    #[test]
    fn matmul_hand_sum() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);

        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ai = tape.matmul(&a, &id).unwrap();
        assert_eq!(ai.data(), a.data());
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_uniform_and_overflow_rows() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2, 3], vec![1.0, 1.0, 1.0, 1000.0, 0.0, 0.0]).unwrap();
        let s = tape.softmax_rows(&x).unwrap();
        for &v in &s.data()[0..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.data()[3] - 1.0).abs() < 1e-12);
        assert!(s.data()[4].abs() < 1e-12);
        assert!(s.data()[5].abs() < 1e-12);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
        // 1x1 kernels picking each channel through unchanged
        let k = Tensor::new(
            vec![2, 2, 1, 1],
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let b = Tensor::zeros(&[2]);
        let y = tape.conv2d(&x, &k, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_box_kernel_interior_sums() {
        let mut tape = Tape::new();
        let c = 0.75;
        let x = Tensor::full(&[1, 1, 5, 5], c);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = tape.conv2d(&x, &k, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        // interior pixels see the full 3x3 window
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.data()[yy * 5 + xx] - 9.0 * c).abs() < 1e-12);
            }
        }
        // corner sees a 2x2 window
        assert!((y.data()[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv2d_output_size_errors() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(tape.conv2d(&x, &k, None, 1, 0).is_err());
        let k1 = Tensor::zeros(&[1, 2, 1, 1]); // wrong input channels
        assert!(tape.conv2d(&x, &k1, None, 1, 0).is_err());
    }

    #[test]
    fn pool_avg_constant_and_brute_force() {
        let mut tape = Tape::new();
        let x = Tensor::full(&[1, 2, 4, 4], 3.5);
        let y = tape.pool_avg(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));

        // 5x5 against a direct per-bin loop
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[1, 1, 5, 5], &mut rng);
        let y = tape.pool_avg(&x, 2, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let (y0, y1) = bin_bounds(oy, 5, 2);
                let (x0, x1) = bin_bounds(ox, 5, 2);
                let mut acc = 0.0;
                let mut cnt = 0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc += x.data()[yy * 5 + xx];
                        cnt += 1;
                    }
                }
                assert!(
                    (y.data()[oy * 2 + ox] - acc / cnt as f64).abs() < 1e-12,
                    "bin ({oy},{ox})"
                );
            }
        }
    }

    #[test]
    fn pool_max_to_1x1_is_per_channel_max() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 3, 4, 5], &mut rng);
        let y = tape.pool_max(&x, 1, 1).unwrap();
        for c in 0..3 {
            let m = x.data()[c * 20..(c + 1) * 20]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(y.data()[c], m);
        }
    }

    #[test]
    fn pool_rejects_upsizing() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(tape.pool_avg(&x, 3, 2).is_err());
        assert!(tape.pool_max(&x, 1, 4).is_err());
    }

    #[test]
    fn pool_avg_1x1_equals_spatial_mean() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[1, 2, 7, 3], &mut rng);
        let y = tape.pool_avg(&x, 1, 1).unwrap();
        for c in 0..2 {
            let mean: f64 = x.data()[c * 21..(c + 1) * 21].iter().sum::<f64>() / 21.0;
            assert!((y.data()[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_constant_and_broadcast() {
        let mut tape = Tape::new();
        let x = Tensor::full(&[1, 2, 2, 2], -1.25);
        let y = tape.upsample_bilinear(&x, 5, 7).unwrap();
        assert!(y.data().iter().all(|&v| v == -1.25));

        let v = Tensor::new(vec![1, 1, 1, 1], vec![0.625]).unwrap();
        let y = tape.upsample_bilinear(&v, 4, 4).unwrap();
        assert!(y.data().iter().all(|&x| x == 0.625));
    }

    #[test]
    fn upsample_2x2_to_4x4_matches_pointwise_formula() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let y = tape.upsample_bilinear(&x, 4, 4).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let sy = ((oy as f64 + 0.5) * 2.0 / 4.0 - 0.5).max(0.0);
                let sx = ((ox as f64 + 0.5) * 2.0 / 4.0 - 0.5).max(0.0);
                let y0 = (sy.floor() as usize).min(1);
                let y1 = (y0 + 1).min(1);
                let x0 = (sx.floor() as usize).min(1);
                let x1 = (x0 + 1).min(1);
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = |r: usize, c: usize| x.data()[r * 2 + c];
                let top = v(y0, x0) + (v(y0, x1) - v(y0, x0)) * fx;
                let bot = v(y1, x0) + (v(y1, x1) - v(y1, x0)) * fx;
                let want = top + (bot - top) * fy;
                assert!(
                    (y.data()[oy * 4 + ox] - want).abs() < 1e-15,
                    "({oy},{ox})"
                );
            }
        }
    }

    #[test]
    fn upsample_rejects_downsizing() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(tape.upsample_bilinear(&x, 2, 4).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[1, 1, 3, 3], &mut rng);
        let loss = tape.sum_all(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.for_tensor(&x).unwrap(), vec![1.0; 9].as_slice());
    }

    #[test]
    fn backward_of_square_sum_is_2x() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[2, 4], &mut rng);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq);
        let grads = tape.backward(&loss).unwrap();
        let g = grads.for_tensor(&x).unwrap();
        for (gv, xv) in g.iter().zip(x.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[2, 2]);
        let y = tape.relu(&x);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn shared_parameter_accumulates_gradients() {
        // the Siamese property at tape level: one tensor used twice gets
        // the summed gradient
        let mut tape = Tape::new();
        let w = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let a = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2], vec![5.0, 6.0]).unwrap();
        let wa = tape.mul(&w, &a).unwrap();
        let wb = tape.mul(&w, &b).unwrap();
        let s = tape.add(&wa, &wb).unwrap();
        let loss = tape.sum_all(&s);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.for_tensor(&w).unwrap(), &[8.0, 10.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let unused = Tensor::new(vec![2], vec![9.0, 9.0]).unwrap();
        let _ = tape.relu(&unused);
        let y = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.for_tensor(&unused).is_none());
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = rand_tensor(&[1, 2, 6, 6], &mut rng);
            let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let b = rand_tensor(&[3], &mut rng);
            let mut tape = Tape::new();
            let c = tape.conv2d(&x, &k, Some(&b), 1, 1).unwrap();
            let a = tape.sigmoid(&c);
            let p = tape.pool_avg(&a, 2, 2).unwrap();
            let loss = tape.sum_all(&p);
            let grads = tape.backward(&loss).unwrap();
            (
                loss.item().to_bits(),
                grads
                    .for_tensor(&k)
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    // ── finite-difference checks per primitive ──────────────────────────

    #[test]
    fn fd_elementwise_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        fd_ok(
            |t, ps| {
                let s = t.add(&ps[0], &ps[1])?;
                let m = t.mul(&s, &ps[0])?;
                let d = t.sub(&m, &ps[1])?;
                Ok(readout(t, &d, 1))
            },
            &[a.clone(), b.clone()],
            1e-6,
            1e-5,
        );
        fd_ok(
            |t, ps| {
                let s = t.sigmoid(&ps[0]);
                let th = t.tanh(&s);
                let sc = t.scale(&th, 1.7);
                Ok(readout(t, &sc, 2))
            },
            &[a.clone()],
            1e-6,
            1e-5,
        );
        // relu on values away from the kink
        let shifted = Tensor::from_fn(&[2, 3], |i| {
            let v = a.data()[i];
            if v < 0.0 {
                v - 0.3
            } else {
                v + 0.3
            }
        });
        fd_ok(
            |t, ps| {
                let r = t.relu(&ps[0]);
                Ok(readout(t, &r, 3))
            },
            &[shifted],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn fd_tanh_at_0_3() {
        let x = Tensor::scalar(0.3);
        fd_ok(
            |t, ps| {
                let y = t.tanh(&ps[0]);
                Ok(t.sum_all(&y))
            },
            &[x],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn fd_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        fd_ok(
            |t, ps| {
                let y = t.conv2d(&ps[0], &ps[1], Some(&ps[2]), 1, 1)?;
                Ok(readout(t, &y, 4))
            },
            &[x.clone(), k.clone(), b.clone()],
            1e-5,
            1e-5,
        );
        // strided, no padding
        fd_ok(
            |t, ps| {
                let y = t.conv2d(&ps[0], &ps[1], Some(&ps[2]), 2, 0)?;
                Ok(readout(t, &y, 5))
            },
            &[x, k, b],
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn fd_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        fd_ok(
            |t, ps| {
                let y = t.matmul(&ps[0], &ps[1])?;
                Ok(readout(t, &y, 6))
            },
            &[a, b],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn fd_softmax_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&[2, 4], &mut rng);
        fd_ok(
            |t, ps| {
                let y = t.softmax_rows(&ps[0])?;
                Ok(readout(t, &y, 7))
            },
            &[x.clone()],
            1e-6,
            1e-5,
        );
        fd_ok(
            |t, ps| {
                let y = t.log_softmax_rows(&ps[0])?;
                Ok(readout(t, &y, 8))
            },
            &[x],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn fd_pool_and_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        fd_ok(
            |t, ps| {
                let y = t.pool_avg(&ps[0], 2, 2)?;
                Ok(readout(t, &y, 9))
            },
            &[x.clone()],
            1e-6,
            1e-5,
        );
        fd_ok(
            |t, ps| {
                let y = t.pool_max(&ps[0], 2, 2)?;
                Ok(readout(t, &y, 10))
            },
            &[x.clone()],
            1e-6,
            1e-5,
        );
        fd_ok(
            |t, ps| {
                let y = t.upsample_bilinear(&ps[0], 8, 9)?;
                Ok(readout(t, &y, 11))
            },
            &[x],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn fd_shape_ops_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_tensor(&[1, 3, 2, 4], &mut rng);
        let bias = rand_tensor(&[3], &mut rng);
        fd_ok(
            |t, ps| {
                let b = t.bias_add(&ps[0], &ps[1])?;
                let r = t.reshape(&b, &[3, 8])?;
                let tr = t.transpose2d(&r)?;
                Ok(readout(t, &tr, 12))
            },
            &[x.clone(), bias],
            1e-6,
            1e-5,
        );
        let y = rand_tensor(&[1, 2, 2, 4], &mut rng);
        fd_ok(
            |t, ps| {
                let c = t.concat_channels(&[&ps[0], &ps[1]])?;
                Ok(readout(t, &c, 13))
            },
            &[x, y],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn fd_attend_and_mean_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q = rand_tensor(&[5, 3], &mut rng);
        let k1 = rand_tensor(&[4, 3], &mut rng);
        let k2 = rand_tensor(&[4, 3], &mut rng);
        let v1 = rand_tensor(&[4, 2], &mut rng);
        let v2 = rand_tensor(&[4, 2], &mut rng);
        fd_ok(
            |t, ps| {
                let y = t.attend(
                    &ps[0],
                    &[ps[1].clone(), ps[2].clone()],
                    &[ps[3].clone(), ps[4].clone()],
                )?;
                Ok(readout(t, &y, 14))
            },
            &[q, k1, k2, v1, v2],
            1e-5,
            1e-5,
        );

        let a = rand_tensor(&[1, 2, 2, 2], &mut rng);
        let b = rand_tensor(&[1, 2, 2, 2], &mut rng);
        let c = rand_tensor(&[1, 2, 2, 2], &mut rng);
        fd_ok(
            |t, ps| {
                let m = t.mean_symmetric(&[&ps[0], &ps[1], &ps[2]])?;
                Ok(readout(t, &m, 15))
            },
            &[a, b, c],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn attend_matches_plain_softmax_attention() {
        // single block: blockwise path must equal softmax_rows + matmul
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = rand_tensor(&[6, 4], &mut rng);
        let k = rand_tensor(&[5, 4], &mut rng);
        let v = rand_tensor(&[5, 3], &mut rng);
        let mut tape = Tape::new();
        let out = tape.attend(&q, &[k.clone()], &[v.clone()]).unwrap();

        // explicit loop oracle
        for p in 0..6 {
            let mut scores = [0.0; 5];
            for (r, s) in scores.iter_mut().enumerate() {
                for c in 0..4 {
                    *s += q.data()[p * 4 + c] * k.data()[r * 4 + c];
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let den: f64 = exps.iter().sum();
            for c in 0..3 {
                let mut want = 0.0;
                for r in 0..5 {
                    want += exps[r] / den * v.data()[r * 3 + c];
                }
                let got = out.data()[p * 3 + c];
                assert!((got - want).abs() < 1e-12, "pixel {p} chan {c}");
            }
        }
    }

    #[test]
    fn attend_is_bit_invariant_under_block_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let q = rand_tensor(&[4, 3], &mut rng);
        let blocks: Vec<(Tensor, Tensor)> = (0..4)
            .map(|_| (rand_tensor(&[4, 3], &mut rng), rand_tensor(&[4, 2], &mut rng)))
            .collect();
        let mut tape = Tape::new();
        let keys: Vec<Tensor> = blocks.iter().map(|(k, _)| k.clone()).collect();
        let vals: Vec<Tensor> = blocks.iter().map(|(_, v)| v.clone()).collect();
        let base = tape.attend(&q, &keys, &vals).unwrap();

        let perms: [[usize; 4]; 3] = [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]];
        for perm in perms {
            let pk: Vec<Tensor> = perm.iter().map(|&i| keys[i].clone()).collect();
            let pv: Vec<Tensor> = perm.iter().map(|&i| vals[i].clone()).collect();
            let out = tape.attend(&q, &pk, &pv).unwrap();
            assert!(out.bit_eq(&base), "permutation {perm:?} changed bits");
        }
    }

    #[test]
    fn mean_symmetric_is_bit_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let parts: Vec<Tensor> = (0..5).map(|_| rand_tensor(&[1, 2, 3, 3], &mut rng)).collect();
        let mut tape = Tape::new();
        let base = tape
            .mean_symmetric(&parts.iter().collect::<Vec<_>>())
            .unwrap();
        let rev: Vec<&Tensor> = parts.iter().rev().collect();
        let out = tape.mean_symmetric(&rev).unwrap();
        assert!(out.bit_eq(&base));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            rows in 1usize..4,
            cols in 1usize..6,
            seed in 0u64..1000,
            shift in -50.0f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-10.0..10.0));
            let mut tape = Tape::new();
            let s = tape.softmax_rows(&x).unwrap();
            for r in 0..rows {
                let sum: f64 = s.data()[r * cols..(r + 1) * cols].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(s.data()[r * cols..(r + 1) * cols].iter().all(|&v| v >= 0.0));
            }
            let shifted = Tensor::from_fn(&[rows, cols], |i| x.data()[i] + shift);
            let s2 = tape.softmax_rows(&shifted).unwrap();
            for i in 0..rows * cols {
                prop_assert!((s.data()[i] - s2.data()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn pool_avg_1x1_matches_mean(
            h in 1usize..8,
            w in 1usize..8,
            c in 1usize..4,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[1, c, h, w], |_| rng.gen_range(-5.0..5.0));
            let mut tape = Tape::new();
            let y = tape.pool_avg(&x, 1, 1).unwrap();
            for ci in 0..c {
                let mean: f64 = x.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>()
                    / (h * w) as f64;
                prop_assert!((y.data()[ci] - mean).abs() < 1e-12);
            }
        }
    }
}
