//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output and the ids of its
//! inputs. [`Graph::backward`] walks the tape in reverse, so gradients of a
//! node are complete before they are propagated to its inputs.

use super::kernels::{self, ConvGeom, ConvTGeom, PoolWindows};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Input,
    Param(usize),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Var, geom: ConvTGeom },
    Gelu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AvgPool { x: Var, rows: PoolWindows, cols: PoolWindows },
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ChannelNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    label: &'static str,
}

/// Tape of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, label: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(label, format!("non-finite output of shape {:?}", value.shape)));
        }
        self.nodes.push(Node { value, op, label });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    /// Parameter `index` of the model; its gradient is reported by `backward`.
    pub fn param(&mut self, index: usize, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Param(index), "param")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let [n, c_in, h, wd] = self.value(x).dims4()?;
        let [c_out, cig, k, k2] = self.value(w).dims4()?;
        if k != k2 || groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cig != c_in / groups {
            return Err(Error::Graph(format!(
                "conv weight {:?} incompatible with input {:?} and {groups} groups",
                self.shape(w),
                self.shape(x)
            )));
        }
        if self.value(b).len() != c_out {
            return Err(Error::Graph("conv bias length mismatch".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::Graph(format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        let geom = ConvGeom { n, c_in, h, w: wd, c_out, k, stride, pad, groups };
        let out = kernels::conv2d_forward(&geom, &self.value(x).data, &self.value(w).data, &self.value(b).data);
        let t = Tensor::new(&[n, c_out, geom.out_h(), geom.out_w()], out)?;
        self.push(t, Op::Conv { x, w, b, geom }, "conv2d")
    }

    /// Transposed convolution, weight `[C_in, C_out, KH, KW]`, no padding.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let [n, c_in, h, wd] = self.value(x).dims4()?;
        let [wc_in, c_out, kh, kw] = self.value(w).dims4()?;
        if wc_in != c_in || self.value(b).len() != c_out || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Graph(format!(
                "transposed conv weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        let geom = ConvTGeom { n, c_in, h, w: wd, c_out, kh, kw, sh: stride.0, sw: stride.1 };
        let out = kernels::conv_t_forward(&geom, &self.value(x).data, &self.value(w).data, &self.value(b).data);
        let t = Tensor::new(&[n, c_out, geom.out_h(), geom.out_w()], out)?;
        self.push(t, Op::ConvT { x, w, b, geom }, "conv_transpose")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| kernels::gelu(a)).collect(),
        };
        self.push(t, Op::Gelu(x), "gelu")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Graph(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| *x + *y).collect(),
        };
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| *x * *y).collect(),
        };
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let ks = S::of(k);
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * ks).collect(),
        };
        self.push(t, Op::Scale(x, k), "scale")
    }

    pub fn avg_pool(&mut self, x: Var, rows: PoolWindows, cols: PoolWindows) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let in_bounds = |win: &PoolWindows, len: usize| win.iter().all(|&(a, b)| a < b && b <= len);
        if rows.is_empty() || cols.is_empty() || !in_bounds(&rows, h) || !in_bounds(&cols, w) {
            return Err(Error::Graph(format!("invalid pooling windows for {h}x{w}")));
        }
        let out = kernels::avg_pool_forward(&self.value(x).data, n * c, h, w, &rows, &cols);
        let t = Tensor::new(&[n, c, rows.len(), cols.len()], out)?;
        self.push(t, Op::AvgPool { x, rows, cols }, "avg_pool")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Graph("concat: batch or spatial size mismatch".into()));
        }
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for i in 0..n {
            data.extend_from_slice(&va[i * ca * h * w..(i + 1) * ca * h * w]);
            data.extend_from_slice(&vb[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        let t = Tensor::new(&[n, ca + cb, h, w], data)?;
        self.push(t, Op::ConcatChannels(a, b), "concat")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let inv = S::one() / S::of_usize(h * w);
        let data = self
            .value(x)
            .data
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<S>() * inv)
            .collect();
        let t = Tensor::new(&[n, c], data)?;
        self.push(t, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// Affine map over the last axis: `x [.., D]`, `w [O, D]`, `b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::Graph("linear on rank-0".into()))?;
        let [o, wd] = self.value(w).dims2()?;
        if wd != d || self.value(b).len() != o {
            return Err(Error::Graph(format!("linear weight [{o}, {wd}] vs input {xs:?}")));
        }
        let rows = self.value(x).len() / d;
        let wt = kernels::transpose_last(&self.value(w).data, 1, o, d);
        let mut out = kernels::batched_matmul(&self.value(x).data, &wt, 1, rows, d, o, false);
        let bias = &self.value(b).data;
        for row in out.chunks_exact_mut(o) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += *bb;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = o;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Linear { x, w, b }, "linear")
    }

    /// Batched `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let [ba, m, k] = self.value(a).dims3()?;
        let [bb, r, c] = self.value(b).dims3()?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(Error::Graph(format!(
                "matmul {:?} x {:?} (trans_b = {trans_b})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = kernels::batched_matmul(&self.value(a).data, &self.value(b).data, ba, m, k, n, trans_b);
        let t = Tensor::new(&[ba, m, n], out)?;
        self.push(t, Op::MatMul { a, b, trans_b }, "matmul")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = *v.shape.last().ok_or_else(|| Error::Graph("softmax on rank-0".into()))?;
        let mut data = v.data.clone();
        for row in data.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor { shape: v.shape.clone(), data };
        self.push(t, Op::Softmax(x), "softmax")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Axis permutation of a rank-3 or rank-4 tensor.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let t = permute_tensor(v, perm)?;
        self.push(t, Op::Permute { x, perm: perm.to_vec() }, "permute")
    }

    /// Layer normalization across the channels of each spatial position of a
    /// `[N, C, H, W]` map, followed by a per-channel affine map.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Graph(format!("channel norm parameters must have {c} entries")));
        }
        let (hw, eps) = (h * w, S::of(eps));
        let inv_c = S::one() / S::of_usize(c);
        let xv = &self.value(x).data;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(n * hw);
        for i in 0..n {
            let base = i * c * hw;
            for p in 0..hw {
                let mean = (0..c).map(|k| xv[base + k * hw + p]).sum::<S>() * inv_c;
                let var = (0..c)
                    .map(|k| {
                        let d = xv[base + k * hw + p] - mean;
                        d * d
                    })
                    .sum::<S>()
                    * inv_c;
                let is = S::one() / (var + eps).sqrt();
                inv_std.push(is);
                for k in 0..c {
                    let j = base + k * hw + p;
                    xhat[j] = (xv[j] - mean) * is;
                    out[j] = xhat[j] * g[k] + b[k];
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        self.push(t, Op::ChannelNorm { x, gamma, beta, xhat, inv_std }, "channel_norm")
    }

    /// Mean cross-entropy of softmax(logits) against integer labels, with the
    /// log clamped at `p >= 1e-12`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::Data(format!(
                "{} labels for a batch of {n} with {k} classes",
                labels.len()
            )));
        }
        let mut probs: Vec<f64> = self.value(logits).data.iter().map(|v| v.as_f64()).collect();
        for row in probs.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let loss = cross_entropy(&probs, labels, k);
        self.push(
            Tensor::scalar(S::of(loss)),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            "cross_entropy",
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter node,
    /// indexed by the parameter index given to [`Graph::param`].
    pub fn backward(&self, loss: Var, n_params: usize) -> Result<Vec<Option<Tensor<S>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Graph("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&self.value(loss).shape, S::one()));
        let mut out = vec![None; n_params];

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !g.is_finite() {
                return Err(Error::numeric(node.label, format!("non-finite gradient at node {id}")));
            }
            let mut send = |v: Var, t: Tensor<S>| accumulate(&mut grads, v, t);
            match &node.op {
                Op::Input => {}
                Op::Param(i) => {
                    if *i >= n_params {
                        return Err(Error::Graph(format!("parameter index {i} out of {n_params}")));
                    }
                    match &mut out[*i] {
                        Some(acc) => Tensor::add_assign(acc, &g),
                        slot => *slot = Some(g),
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        geom,
                        &self.value(*x).data,
                        &self.value(*w).data,
                        &g.data,
                    );
                    send(*x, Tensor { shape: self.shape(*x).to_vec(), data: dx });
                    send(*w, Tensor { shape: self.shape(*w).to_vec(), data: dw });
                    send(*b, Tensor { shape: self.shape(*b).to_vec(), data: db });
                }
                Op::ConvT { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv_t_backward(
                        geom,
                        &self.value(*x).data,
                        &self.value(*w).data,
                        &g.data,
                    );
                    send(*x, Tensor { shape: self.shape(*x).to_vec(), data: dx });
                    send(*w, Tensor { shape: self.shape(*w).to_vec(), data: dw });
                    send(*b, Tensor { shape: self.shape(*b).to_vec(), data: db });
                }
                Op::Gelu(x) => {
                    let data = self
                        .value(*x)
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&a, &d)| kernels::gelu_grad(a) * d)
                        .collect();
                    send(*x, Tensor { shape: g.shape.clone(), data });
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = g.data.iter().zip(&vb.data).map(|(d, y)| *d * *y).collect();
                    let db = g.data.iter().zip(&va.data).map(|(d, x)| *d * *x).collect();
                    send(*a, Tensor { shape: g.shape.clone(), data: da });
                    send(*b, Tensor { shape: g.shape.clone(), data: db });
                }
                Op::Scale(x, k) => {
                    let ks = S::of(*k);
                    let data = g.data.iter().map(|d| *d * ks).collect();
                    send(*x, Tensor { shape: g.shape.clone(), data });
                }
                Op::AvgPool { x, rows, cols } => {
                    let [n, c, h, w] = self.value(*x).dims4()?;
                    let dx = kernels::avg_pool_backward(&g.data, n * c, h, w, rows, cols);
                    send(*x, Tensor { shape: vec![n, c, h, w], data: dx });
                }
                Op::ConcatChannels(a, b) => {
                    let [n, ca, h, w] = self.value(*a).dims4()?;
                    let cb = self.value(*b).dims4()?[1];
                    let (mut da, mut db) = (Vec::new(), Vec::new());
                    for i in 0..n {
                        let base = i * (ca + cb) * h * w;
                        da.extend_from_slice(&g.data[base..base + ca * h * w]);
                        db.extend_from_slice(&g.data[base + ca * h * w..base + (ca + cb) * h * w]);
                    }
                    send(*a, Tensor { shape: vec![n, ca, h, w], data: da });
                    send(*b, Tensor { shape: vec![n, cb, h, w], data: db });
                }
                Op::GlobalAvgPool(x) => {
                    let [n, c, h, w] = self.value(*x).dims4()?;
                    let inv = S::one() / S::of_usize(h * w);
                    let mut dx = Vec::with_capacity(n * c * h * w);
                    for d in &g.data {
                        dx.extend(std::iter::repeat(*d * inv).take(h * w));
                    }
                    send(*x, Tensor { shape: vec![n, c, h, w], data: dx });
                }
                Op::Linear { x, w, b } => {
                    let [o, d] = self.value(*w).dims2()?;
                    let rows = self.value(*x).len() / d;
                    // dx = g W, dW = g^T x, db = column sums of g
                    let dx = kernels::batched_matmul(&g.data, &self.value(*w).data, 1, rows, o, d, false);
                    let gt = kernels::transpose_last(&g.data, 1, rows, o);
                    let dw = kernels::batched_matmul(&gt, &self.value(*x).data, 1, o, rows, d, false);
                    let mut db = vec![S::zero(); o];
                    for row in g.data.chunks_exact(o) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                    send(*x, Tensor { shape: self.shape(*x).to_vec(), data: dx });
                    send(*w, Tensor { shape: vec![o, d], data: dw });
                    send(*b, Tensor { shape: vec![o], data: db });
                }
                Op::MatMul { a, b, trans_b } => {
                    let [bt, m, k] = self.value(*a).dims3()?;
                    let n = g.shape[2];
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    if *trans_b {
                        // C = A B^T, B is [n, k]: dA = dC B, dB = dC^T A
                        let da = kernels::batched_matmul(&g.data, vb, bt, m, n, k, false);
                        let gt = kernels::transpose_last(&g.data, bt, m, n);
                        let db = kernels::batched_matmul(&gt, va, bt, n, m, k, false);
                        send(*a, Tensor { shape: vec![bt, m, k], data: da });
                        send(*b, Tensor { shape: vec![bt, n, k], data: db });
                    } else {
                        // C = A B, B is [k, n]: dA = dC B^T, dB = A^T dC
                        let da = kernels::batched_matmul(&g.data, vb, bt, m, n, k, true);
                        let at = kernels::transpose_last(va, bt, m, k);
                        let db = kernels::batched_matmul(&at, &g.data, bt, k, m, n, false);
                        send(*a, Tensor { shape: vec![bt, m, k], data: da });
                        send(*b, Tensor { shape: vec![bt, k, n], data: db });
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let d = *y.shape.last().unwrap();
                    let mut dx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data.chunks_exact(d).zip(g.data.chunks_exact(d)) {
                        let dot: S = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(a, b)| *a * (*b - dot)));
                    }
                    send(*x, Tensor { shape: y.shape.clone(), data: dx });
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    send(*x, g.reshaped(&shape)?);
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    send(*x, permute_tensor(&g, &inv)?);
                }
                Op::ChannelNorm { x, gamma, beta, xhat, inv_std } => {
                    let [n, c, h, w] = self.value(*x).dims4()?;
                    let hw = h * w;
                    let gv = &self.value(*gamma).data;
                    let inv_c = S::one() / S::of_usize(c);
                    let mut dx = vec![S::zero(); g.len()];
                    let mut dgamma = vec![S::zero(); c];
                    let mut dbeta = vec![S::zero(); c];
                    for i in 0..n {
                        let base = i * c * hw;
                        for p in 0..hw {
                            let (mut s1, mut s2) = (S::zero(), S::zero());
                            for k in 0..c {
                                let j = base + k * hw + p;
                                let dxh = g.data[j] * gv[k];
                                s1 += dxh;
                                s2 += dxh * xhat[j];
                                dgamma[k] += g.data[j] * xhat[j];
                                dbeta[k] += g.data[j];
                            }
                            let is = inv_std[i * hw + p];
                            for k in 0..c {
                                let j = base + k * hw + p;
                                let dxh = g.data[j] * gv[k];
                                dx[j] = is * (dxh - (s1 + xhat[j] * s2) * inv_c);
                            }
                        }
                    }
                    send(*x, Tensor { shape: vec![n, c, h, w], data: dx });
                    send(*gamma, Tensor { shape: vec![c], data: dgamma });
                    send(*beta, Tensor { shape: vec![c], data: dbeta });
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let [n, k] = self.value(*logits).dims2()?;
                    let scale = g.data[0].as_f64() / n as f64;
                    let mut dl = Vec::with_capacity(n * k);
                    for (i, row) in probs.chunks_exact(k).enumerate() {
                        for (c, p) in row.iter().enumerate() {
                            let t = if c == labels[i] { 1.0 } else { 0.0 };
                            dl.push(S::of((p - t) * scale));
                        }
                    }
                    send(*logits, Tensor { shape: vec![n, k], data: dl });
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&t),
        slot => *slot = Some(t),
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `-(1/B) sum_b log(max(p[b, label_b], 1e-12))`.
pub fn cross_entropy(probs: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    -probs
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &l)| row[l].max(1e-12).ln())
        .sum::<f64>()
        / n as f64
}

fn permute_tensor<S: Scalar>(v: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let r = v.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || !(3..=4).contains(&r) || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Graph(format!("invalid permutation {perm:?} of {:?}", v.shape)));
    }
    let mut dims = [1usize; 4];
    let mut strides = [0usize; 4];
    // Pad rank-3 to rank-4 with a leading unit axis.
    let off = 4 - r;
    let mut in_strides = [0usize; 4];
    let mut acc = 1;
    for i in (0..r).rev() {
        in_strides[i + off] = acc;
        acc *= v.shape[i];
    }
    let mut shape = vec![0; r];
    for (i, &p) in perm.iter().enumerate() {
        dims[i + off] = v.shape[p];
        strides[i + off] = in_strides[p + off];
        shape[i] = v.shape[p];
    }
    let mut data = Vec::with_capacity(v.len());
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for c in 0..dims[2] {
                let base = a * strides[0] + b * strides[1] + c * strides[2];
                for d in 0..dims[3] {
                    data.push(v.data[base + d * strides[3]]);
                }
            }
        }
    }
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trip() {
        let t = Tensor::<f64>::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute_tensor(&t, &[0, 2, 1]).unwrap();
        assert_eq!(p.shape, vec![2, 4, 3]);
        assert_eq!(p.data[1], t.data[4]);
        let back = permute_tensor(&p, &[0, 2, 1]).unwrap();
        assert_eq!(back, t);
        assert!(permute_tensor(&t, &[0, 0, 1]).is_err());
    }

    #[test]
    fn uniform_cross_entropy_is_ln_k() {
        let probs = vec![0.125; 16];
        let ce = cross_entropy(&probs, &[3, 5], 8);
        assert!((ce - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_target() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::new(&[1, 3], vec![0.2, -1.0, 0.5]).unwrap()).unwrap();
        let w = g.param(0, Tensor::new(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let z = g.mul(logits, w).unwrap();
        let loss = g.softmax_cross_entropy(z, &[2]).unwrap();
        let grads = g.backward(loss, 1).unwrap();
        let x = [0.2f64, -1.0, 0.5];
        let m: f64 = x.iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = x.iter().map(|v| v.exp() / m).collect();
        let gw = grads[0].as_ref().unwrap();
        for c in 0..3 {
            let t = if c == 2 { 1.0 } else { 0.0 };
            assert!((gw.data[c] - (p[c] - t) * x[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_are_graph_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Graph(_))));
        assert!(matches!(g.concat_channels(a, b), Err(Error::Graph(_))));
    }
}
