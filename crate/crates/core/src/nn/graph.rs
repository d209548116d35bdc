//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as leaves tagged with their index in a [`ParamStore`]; [`Graph::backward`]
//! returns gradients for exactly those leaves.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddChannelBias { x: Var, bias: Var },
    Scale(Var, f64),
    Silu(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ResizeNearest(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Linear { x: Var, w: Var, b: Var },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Bmm(Var, Var),
    SoftmaxLast(Var),
    MeanAxis1(Var),
    RepeatLeading { x: Var, times: usize },
    Mse { pred: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of the loss with respect to the parameters used in the graph.
pub struct Gradients {
    pub grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `[c, h, w]` image into `[c * k * k, oh * ow]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [f64]) {
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let ohw = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [f64]) {
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let ohw = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(ci * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = strides(&x.shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.data.len();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x.data[src];
        // odometer increment over the output index
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            src += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= mapped[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn resize_index(o: usize, in_size: usize, out_size: usize) -> usize {
    o * in_size / out_size
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, param: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, param: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A parameter leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Leaf, param: Some(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape.clone(), data);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    /// `x [N, C, ...] + bias [N, C]`, broadcast over the trailing dimensions.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        let (n, c) = (vx.shape[0], vx.shape[1]);
        assert_eq!(vb.shape, vec![n, c], "channel bias shape");
        let inner = vx.data.len() / (n * c);
        let mut data = vx.data.clone();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let b = vb.data[i];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let t = Tensor::new(vx.shape.clone(), data);
        self.push(t, Op::AddChannelBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape.clone(), vx.data.iter().map(|v| v * s).collect());
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape.clone(), vx.data.iter().map(|&v| v * sigmoid(v)).collect());
        self.push(t, Op::Silu(x), &[x])
    }

    /// `x [N, Cin, H, W]`, `w [Cout, Cin, k, k]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let (n, cin, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (cout, k) = (vw.shape[0], vw.shape[2]);
        assert_eq!(vw.shape[1], cin, "conv input channels");
        assert_eq!(vb.shape, vec![cout]);
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(wd, k, stride, pad);
        let ohw = oh * ow;
        let ckk = cin * k * k;
        let mut cols = vec![0.0; ckk * ohw];
        let mut out = vec![0.0; n * cout * ohw];
        for i in 0..n {
            im2col(&vx.data[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, k, stride, pad, &mut cols);
            let o = &mut out[i * cout * ohw..(i + 1) * cout * ohw];
            for (co, row) in o.chunks_mut(ohw).enumerate() {
                row.iter_mut().for_each(|v| *v = vb.data[co]);
            }
            gemm(cout, ckk, ohw, &vw.data, false, &cols, false, o, true);
        }
        let t = Tensor::new(vec![n, cout, oh, ow], out);
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b])
    }

    /// Nearest-neighbour resize of `[N, C, H, W]` to `[N, C, oh, ow]`.
    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                let sy = resize_index(y, h, oh);
                for xx in 0..ow {
                    let sx = resize_index(xx, w, ow);
                    out[(p * oh + y) * ow + xx] = vx.data[(p * h + sy) * w + sx];
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out);
        self.push(t, Op::ResizeNearest(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        let first = self.value(inputs[0]).shape.clone();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = &self.value(v).shape;
            assert_eq!(s.len(), first.len());
            assert_eq!(&s[..axis], &first[..axis], "concat leading dims");
            assert_eq!(&s[axis + 1..], &first[axis + 1..], "concat trailing dims");
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let span = t.shape[axis] * inner;
                out.extend_from_slice(&t.data[o * span..(o + 1) * span]);
            }
        }
        let t = Tensor::new(shape, out);
        self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// `x [R, Din] @ w [Din, Dout] + b [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        assert_eq!(vx.shape.len(), 2, "linear expects a matrix");
        let (r, din) = (vx.shape[0], vx.shape[1]);
        assert_eq!(vw.shape[0], din, "linear input dim");
        let dout = vw.shape[1];
        let mut out = vec![0.0; r * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(&vb.data);
        }
        gemm(r, din, dout, &vx.data, false, &vw.data, false, &mut out, true);
        let t = Tensor::new(vec![r, dout], out);
        self.push(t, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let t = permute_data(self.value(x), perm);
        self.push(t, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// `a [B, M, K] @ b [B, K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let (bs, m, k) = (va.shape[0], va.shape[1], va.shape[2]);
        assert_eq!(vb.shape[0], bs);
        assert_eq!(vb.shape[1], k, "bmm inner dim");
        let n = vb.shape[2];
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &va.data[i * m * k..(i + 1) * m * k],
                false,
                &vb.data[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let t = Tensor::new(vec![bs, m, n], out);
        self.push(t, Op::Bmm(a, b), &[a, b])
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape.last().unwrap();
        let mut out = vx.data.clone();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(vx.shape.clone(), out);
        self.push(t, Op::SoftmaxLast(x), &[x])
    }

    /// Mean over axis 1 of `[B, P, D]`, giving `[B, D]`.
    pub fn mean_axis1(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, p, d) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..p {
                let src = &vx.data[(i * p + j) * d..(i * p + j + 1) * d];
                for (o, s) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let inv = 1.0 / p as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(vec![b, d], out);
        self.push(t, Op::MeanAxis1(x), &[x])
    }

    /// Repeats each slice along axis 0 `times` times consecutively
    /// (`[A, ...] -> [A * times, ...]`).
    pub fn repeat_leading(&mut self, x: Var, times: usize) -> Var {
        let vx = self.value(x);
        let a = vx.shape[0];
        let inner = vx.data.len() / a;
        let mut out = Vec::with_capacity(vx.data.len() * times);
        for i in 0..a {
            for _ in 0..times {
                out.extend_from_slice(&vx.data[i * inner..(i + 1) * inner]);
            }
        }
        let mut shape = vx.shape.clone();
        shape[0] = a * times;
        let t = Tensor::new(shape, out);
        self.push(t, Op::RepeatLeading { x, times }, &[x])
    }

    /// Mean squared error against a constant target; a scalar node.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape, target.shape, "mse shape mismatch");
        let n = vp.data.len() as f64;
        let loss = vp.data.iter().zip(&target.data).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred])
    }

    /// Backpropagates from a scalar node; returns per-parameter gradients.
    pub fn backward(&self, loss: Var, n_params: usize) -> Gradients {
        assert_eq!(self.value(loss).data.len(), 1, "backward expects a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape.clone(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = vec![None; n_params];
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                match &mut out[pid.0] {
                    slot @ None => *slot = Some(g),
                    Some(acc) => acc.add_assign(&g),
                }
            }
        }
        Gradients { grads: out }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            slot @ None => *slot = Some(g),
            Some(acc) => acc.add_assign(&g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let vb = self.value(*bias);
                    let nc = vb.data.len();
                    let inner = g.data.len() / nc;
                    let db: Vec<f64> = g.data.chunks(inner).map(|c| c.iter().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::new(vb.shape.clone(), db));
                }
            }
            Op::Scale(x, s) => {
                let mut d = g.clone();
                d.scale(*s);
                self.accumulate(grads, *x, d);
            }
            Op::Silu(x) => {
                let vx = self.value(*x);
                let d = vx
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(vx.shape.clone(), d));
            }
            Op::Conv2d { x, w, b, stride, pad } => self.backprop_conv(*x, *w, *b, *stride, *pad, g, grads),
            Op::ResizeNearest(x) => {
                let vx = self.value(*x);
                let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
                let (oh, ow) = (g.shape[2], g.shape[3]);
                let mut d = vec![0.0; vx.data.len()];
                for p in 0..n * c {
                    for y in 0..oh {
                        let sy = resize_index(y, h, oh);
                        for xx in 0..ow {
                            let sx = resize_index(xx, w, ow);
                            d[(p * h + sy) * w + sx] += g.data[(p * oh + y) * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape.clone(), d));
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_span = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let s = self.value(v).shape.clone();
                    let span = s[*axis] * inner;
                    if self.nodes[v.0].needs_grad {
                        let mut d = Vec::with_capacity(outer * span);
                        for o in 0..outer {
                            let base = o * total_span + offset;
                            d.extend_from_slice(&g.data[base..base + span]);
                        }
                        self.accumulate(grads, v, Tensor::new(s, d));
                    }
                    offset += span;
                }
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (r, din) = (vx.shape[0], vx.shape[1]);
                let dout = vw.shape[1];
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; r * din];
                    gemm(r, dout, din, &g.data, false, &vw.data, true, &mut dx, false);
                    self.accumulate(grads, *x, Tensor::new(vx.shape.clone(), dx));
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, r, dout, &vx.data, true, &g.data, false, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::new(vw.shape.clone(), dw));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; dout];
                    for row in g.data.chunks(dout) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![dout], db));
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape.clone();
                self.accumulate(grads, *x, g.clone().reshaped(&shape));
            }
            Op::Permute { x, perm } => {
                let d = permute_data(g, &inverse_perm(perm));
                self.accumulate(grads, *x, d);
            }
            Op::Bmm(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (bs, m, k) = (va.shape[0], va.shape[1], va.shape[2]);
                let n = vb.shape[2];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data[i * m * n..(i + 1) * m * n],
                            false,
                            &vb.data[i * k * n..(i + 1) * k * n],
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(va.shape.clone(), da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &va.data[i * m * k..(i + 1) * m * k],
                            true,
                            &g.data[i * m * n..(i + 1) * m * n],
                            false,
                            &mut db[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(vb.shape.clone(), db));
                }
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let d = *y.shape.last().unwrap();
                let mut dx = vec![0.0; y.data.len()];
                for ((yr, gr), dr) in y.data.chunks(d).zip(g.data.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape.clone(), dx));
            }
            Op::MeanAxis1(x) => {
                let vx = self.value(*x);
                let (b, p, d) = (vx.shape[0], vx.shape[1], vx.shape[2]);
                let inv = 1.0 / p as f64;
                let mut dx = vec![0.0; vx.data.len()];
                for i in 0..b {
                    for j in 0..p {
                        for k in 0..d {
                            dx[(i * p + j) * d + k] = g.data[i * d + k] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape.clone(), dx));
            }
            Op::RepeatLeading { x, times } => {
                let vx = self.value(*x);
                let a = vx.shape[0];
                let inner = vx.data.len() / a;
                let mut dx = vec![0.0; vx.data.len()];
                for i in 0..a {
                    for r in 0..*times {
                        let src = &g.data[(i * times + r) * inner..(i * times + r + 1) * inner];
                        for (o, s) in dx[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape.clone(), dx));
            }
            Op::Mse { pred, target } => {
                let vp = self.value(*pred);
                let n = vp.data.len() as f64;
                let scale = 2.0 * g.data[0] / n;
                let d = vp.data.iter().zip(&target.data).map(|(p, t)| scale * (p - t)).collect();
                self.accumulate(grads, *pred, Tensor::new(vp.shape.clone(), d));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let vx = self.value(x);
        let vw = self.value(w);
        let (n, cin, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (cout, k) = (vw.shape[0], vw.shape[2]);
        let (oh, ow) = (g.shape[2], g.shape[3]);
        let ohw = oh * ow;
        let ckk = cin * k * k;
        let need_x = self.nodes[x.0].needs_grad;
        let need_w = self.nodes[w.0].needs_grad;
        let mut cols = vec![0.0; ckk * ohw];
        let mut dcols = vec![0.0; ckk * ohw];
        let mut dx = if need_x { vec![0.0; vx.data.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0; vw.data.len()] } else { Vec::new() };
        for i in 0..n {
            let gi = &g.data[i * cout * ohw..(i + 1) * cout * ohw];
            if need_w {
                im2col(&vx.data[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, k, stride, pad, &mut cols);
                gemm(cout, ohw, ckk, gi, false, &cols, true, &mut dw, true);
            }
            if need_x {
                gemm(ckk, cout, ohw, &vw.data, true, gi, false, &mut dcols, false);
                col2im(&dcols, cin, h, wd, k, stride, pad, &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd]);
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(vx.shape.clone(), dx));
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(vw.shape.clone(), dw));
        }
        if self.nodes[b.0].needs_grad {
            let mut db = vec![0.0; cout];
            for i in 0..n {
                for (co, d) in db.iter_mut().enumerate() {
                    *d += g.data[(i * cout + co) * ohw..(i * cout + co + 1) * ohw].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, b, Tensor::new(vec![cout], db));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Builds a scalar loss from every op and checks parameter gradients
    /// against central differences.
    fn check_op(build: impl Fn(&mut Graph, &ParamStore) -> Var, store: &mut ParamStore) {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        let grads = g.backward(loss, store.len());
        let h = 1e-6;
        for pid in store.ids() {
            let analytic = grads.get(pid).cloned().unwrap_or_else(|| Tensor::zeros(&store.get(pid).shape));
            for i in 0..store.get(pid).len() {
                let orig = store.get(pid).data[i];
                store.get_mut(pid).data[i] = orig + h;
                let mut gp = Graph::new();
                let lp = build(&mut gp, store);
                let fp = gp.value(lp).data[0];
                store.get_mut(pid).data[i] = orig - h;
                let mut gm = Graph::new();
                let lm = build(&mut gm, store);
                let fm = gm.value(lm).data[0];
                store.get_mut(pid).data[i] = orig;
                let num = (fp - fm) / (2.0 * h);
                let a = analytic.data[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-5, "{} [{i}]: analytic {a} numeric {num}", store.name(pid));
            }
        }
    }

    #[test]
    fn conv_resize_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&[2, 3, 5, 6], &mut rng));
        let w = store.add("w", random(&[4, 3, 3, 3], &mut rng));
        let b = store.add("b", random(&[4], &mut rng));
        let w2 = store.add("w2", random(&[2, 7, 3, 3], &mut rng));
        let b2 = store.add("b2", random(&[2], &mut rng));
        let bias = store.add("bias", random(&[2, 4], &mut rng));
        let target = random(&[2, 2, 5, 6], &mut rng);
        check_op(
            |g, s| {
                let xv = g.param(s, x);
                let (wv, bv) = (g.param(s, w), g.param(s, b));
                let h = g.conv2d(xv, wv, bv, 2, 1);
                let bb = g.param(s, bias);
                let h = g.add_channel_bias(h, bb);
                let h = g.silu(h);
                let up = g.resize_nearest(h, 5, 6);
                let cat = g.concat(&[up, xv], 1);
                let (w2v, b2v) = (g.param(s, w2), g.param(s, b2));
                let o = g.conv2d(cat, w2v, b2v, 1, 1);
                let o = g.scale(o, 0.7);
                g.mse(o, target.clone())
            },
            &mut store,
        );
    }

    #[test]
    fn attention_style_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&[2, 3, 4], &mut rng));
        let ctx = store.add("ctx", random(&[1, 5, 4], &mut rng));
        let wq = store.add("wq", random(&[4, 4], &mut rng));
        let bq = store.add("bq", random(&[4], &mut rng));
        let target = random(&[2, 3, 4], &mut rng);
        let mut mask = Tensor::zeros(&[2, 3, 5]);
        mask.data[1] = -1e30;
        check_op(
            |g, s| {
                let xv = g.param(s, x);
                let flat = g.reshape(xv, &[6, 4]);
                let (wqv, bqv) = (g.param(s, wq), g.param(s, bq));
                let q = g.linear(flat, wqv, bqv);
                let q = g.reshape(q, &[2, 3, 4]);
                let c = g.param(s, ctx);
                let c = g.repeat_leading(c, 2);
                let kt = g.permute(c, &[0, 2, 1]);
                let sc = g.bmm(q, kt);
                let m = g.constant(mask.clone());
                let sc = g.add(sc, m);
                let p = g.softmax_last(sc);
                let o = g.bmm(p, c);
                let pooled = g.mean_axis1(o);
                let pooled = g.reshape(pooled, &[2, 1, 4]);
                let cat = g.concat(&[pooled, o], 1);
                let cat = g.permute(cat, &[1, 0, 2]);
                let o = g.reshape(cat, &[2, 4, 4]);
                let first = g.permute(o, &[0, 1, 2]);
                let sum = g.add(first, o);
                let trimmed = g.reshape(sum, &[32]);
                let t = Tensor::new(vec![32], target.data.iter().cycle().take(32).cloned().collect());
                g.mse(trimmed, t)
            },
            &mut store,
        );
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(&[2, 3, 4, 5], &mut rng);
        let p = permute_data(&t, &[2, 0, 3, 1]);
        assert_eq!(p.shape, vec![4, 2, 5, 3]);
        assert_eq!(p.data[((1 * 2 + 1) * 5 + 4) * 3 + 2], t.data[((1 * 3 + 2) * 4 + 1) * 5 + 4]);
        let back = permute_data(&p, &inverse_perm(&[2, 0, 3, 1]));
        assert_eq!(back, t);
    }

    #[test]
    fn masked_softmax_single_candidate_is_exact() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.3 - 1e30, 0.7]));
        let p = g.softmax_last(x);
        assert_eq!(g.value(p).data, vec![0.0, 1.0]);
    }
}
