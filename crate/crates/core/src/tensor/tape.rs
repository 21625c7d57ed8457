use rand::Rng;

use super::{gemm, Scalar, Tensor, TensorError};

/// Additive attention-mask value used in place of negative infinity.
///
/// Keys carrying this offset saturate to probability exactly zero after
/// max-subtraction in both 32- and 64-bit arithmetic.
pub const MASK_SENTINEL: f64 = -1e9;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum MatMulPlan {
    /// `a[.., m, k] x b[k, n]` with the leading dims of `a` folded into `m`.
    /// `b_t` means `b` is stored `[n, k]` and used transposed.
    Folded { m: usize, k: usize, n: usize, b_t: bool },
    /// Batched product; `pairs[i]` gives the batch offsets of `a` and `b`
    /// feeding output batch `i`.
    Batched {
        m: usize,
        k: usize,
        n: usize,
        pairs: Vec<(usize, usize)>,
    },
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    GatherRows { src: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    Dropout { x: Var, keep: Vec<T> },
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed differentiable operations.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    matmul_flops: u64,
    empty_rows: u64,
    differentiated: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Zero-initialised gradient buffer of `v`, or `None` if it needs no gradient.
fn grad_slot<'g, T: Scalar>(nodes: &[Node<T>], grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let e = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    Some(e.data_mut())
}

fn gelu_scalar<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let u = c * (x + a * x * x * x);
    // 0.5 * (1 + tanh(u)) written as a logistic, one exp instead of tanh
    let s = T::one() / (T::one() + (-two * u).exp());
    let y = x * s;
    let dy = s + two * x * s * (T::one() - s) * c * (T::one() + three * a * x * x);
    (y, dy)
}

/// Strides of a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return (out, out_shape);
    }
    let nd = out_shape.len();
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            matmul_flops: 0,
            empty_rows: 0,
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sum of `2*M*N*K` over every matrix product recorded so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    /// Number of softmax rows whose every entry was masked out.
    pub fn empty_attention_rows(&self) -> u64 {
        self.empty_rows
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Matrix product over the last two dims with leading-dim broadcasting.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let n = sb[sb.len() - 1];
        if sb.len() == 2 {
            return Ok(self.matmul_folded(a, b, false));
        }
        // broadcast the leading dims, right-aligned
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let nd = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; nd - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut out_batch = Vec::with_capacity(nd);
        for i in 0..nd {
            if pa[i] == pb[i] || pb[i] == 1 {
                out_batch.push(pa[i]);
            } else if pa[i] == 1 {
                out_batch.push(pb[i]);
            } else {
                return Err(shape_err("matmul", &sa, &sb));
            }
        }
        let (sta, stb) = (strides(&pa), strides(&pb));
        let nbatch: usize = out_batch.iter().product();
        let mut pairs = Vec::with_capacity(nbatch);
        let mut idx = vec![0usize; nd];
        for _ in 0..nbatch {
            let mut oa = 0;
            let mut ob = 0;
            for d in 0..nd {
                if pa[d] != 1 {
                    oa += idx[d] * sta[d];
                }
                if pb[d] != 1 {
                    ob += idx[d] * stb[d];
                }
            }
            pairs.push((oa * m * k, ob * k * n));
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < out_batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out = vec![T::zero(); nbatch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for (i, &(oa, ob)) in pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &va[oa..oa + m * k],
                    false,
                    &vb[ob..ob + k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.matmul_flops += 2 * (nbatch * m * n * k) as u64;
        let mut shape = out_batch;
        shape.extend_from_slice(&[m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                plan: MatMulPlan::Batched { m, k, n, pairs },
            },
            rg,
        ))
    }

    /// `a[.., m, k] x b[n, k]^T`, reading `b` transposed without a copy.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(shape_err("matmul_t", sa, sb));
        }
        Ok(self.matmul_folded(a, b, true))
    }

    fn matmul_folded(&mut self, a: Var, b: Var, b_t: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let k = sa[sa.len() - 1];
        let n = if b_t { sb[0] } else { sb[1] };
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), b_t, &mut out, false);
        self.matmul_flops += 2 * (m * n * k) as u64;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                plan: MatMulPlan::Folded { m, k, n, b_t },
            },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    /// Adds a `[d]` vector to every row of `x[.., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| e * s).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &shape, axes));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, axes);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swaps the last two dims.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(shape_err("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Softmax over the last dim, optionally after adding a mask whose
    /// entries are 0 or [`MASK_SENTINEL`].
    ///
    /// The mask is broadcast right-aligned with size-1 dims; its last dim
    /// must match. A row with every entry masked yields all zeros and is
    /// counted in [`Tape::empty_attention_rows`].
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let l = self.value(x).last_dim();
        let rows = if l == 0 { 0 } else { self.value(x).numel() / l };
        // per-row offset into the mask
        let mask_rows: Option<Vec<usize>> = match mask {
            None => None,
            Some(m) => {
                let ms = m.shape();
                if ms.len() > shape.len() || ms.last().copied().unwrap_or(1) != l {
                    return Err(shape_err("softmax_lastdim", &shape, ms));
                }
                let lead = &shape[..shape.len() - 1];
                let mut mlead = vec![1; lead.len() + 1 - ms.len()];
                mlead.extend_from_slice(&ms[..ms.len() - 1]);
                for (a, b) in lead.iter().zip(&mlead) {
                    if a != b && *b != 1 {
                        return Err(shape_err("softmax_lastdim", &shape, ms));
                    }
                }
                let mst = strides(&mlead);
                let mut offs = Vec::with_capacity(rows);
                let mut idx = vec![0usize; lead.len()];
                for _ in 0..rows {
                    let mut o = 0;
                    for d in 0..lead.len() {
                        if mlead[d] != 1 {
                            o += idx[d] * mst[d];
                        }
                    }
                    offs.push(o * l);
                    for d in (0..lead.len()).rev() {
                        idx[d] += 1;
                        if idx[d] < lead[d] {
                            break;
                        }
                        idx[d] = 0;
                    }
                }
                Some(offs)
            }
        };
        let half_sentinel = T::lit(MASK_SENTINEL * 0.5);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut empty = 0u64;
        let mut buf = vec![T::zero(); l];
        for r in 0..rows {
            let row = &xv[r * l..(r + 1) * l];
            match (&mask_rows, mask) {
                (Some(offs), Some(m)) => {
                    let mrow = &m.data()[offs[r]..offs[r] + l];
                    if mrow.iter().all(|&v| v <= half_sentinel) {
                        empty += 1;
                        continue;
                    }
                    for j in 0..l {
                        buf[j] = row[j] + mrow[j];
                    }
                }
                _ => buf.copy_from_slice(row),
            }
            let mx = buf.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            let o = &mut out[r * l..(r + 1) * l];
            for j in 0..l {
                let e = (buf[j] - mx).exp();
                o[j] = e;
                s = s + e;
            }
            let inv = T::one() / s;
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        self.empty_rows += empty;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last dim: `gain * (x - mean) / sqrt(var + eps) + offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var, TensorError> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(offset) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid("layer_norm: eps must be positive".into()));
        }
        let eps = T::lit(eps);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(offset).data();
        let rows = if d == 0 { 0 } else { xv.len() / d };
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(offset);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| gelu_scalar(e).0).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| e.tanh()).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    /// Gathers rows of `src` viewed as `[R, C]`; output shape is
    /// `lead_shape ++ [C]` where `lead_shape` multiplies to `idx.len()`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize], lead_shape: &[usize]) -> Result<Var, TensorError> {
        if lead_shape.iter().product::<usize>() != idx.len() {
            return Err(shape_err("gather_rows", lead_shape, &[idx.len()]));
        }
        let c = self.value(src).last_dim();
        let r = if c == 0 { 0 } else { self.value(src).numel() / c };
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                bound: r,
            });
        }
        let sv = self.value(src).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&sv[i * c..(i + 1) * c]);
        }
        let mut shape = lead_shape.to_vec();
        shape.push(c);
        let rg = self.rg(src);
        Ok(self.push(
            Tensor { shape, data },
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Row gather from a `[|V|, d]` table; output is `ids_shape ++ [d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var, TensorError> {
        if self.shape(table).len() != 2 {
            return Err(shape_err("embedding_lookup", self.shape(table), ids_shape));
        }
        let bound = self.shape(table)[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= bound) {
            return Err(TensorError::Index {
                op: "embedding_lookup",
                index: bad,
                bound,
            });
        }
        self.gather_rows(table, ids, ids_shape)
    }

    /// Concatenates along the first dim.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat: no inputs".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            rows += s[0];
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let scale = T::lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let keep: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
            .collect();
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&keep).map(|(&a, &k)| a * k).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, keep }, rg)
    }

    /// Mean of `-log softmax(logits)[target]` over rows where `loss_mask` is set.
    ///
    /// `logits` is viewed as `[rows, |V|]`; `targets` and `loss_mask` have one
    /// entry per row. Unselected rows contribute exactly zero.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], loss_mask: &[bool]) -> Result<Var, TensorError> {
        let v = self.value(logits).last_dim();
        let rows = if v == 0 { 0 } else { self.value(logits).numel() / v };
        if targets.len() != rows || loss_mask.len() != rows {
            return Err(shape_err("masked_cross_entropy", self.shape(logits), &[targets.len(), loss_mask.len()]));
        }
        let selected: Vec<(usize, usize)> = (0..rows)
            .filter(|&r| loss_mask[r])
            .map(|r| (r, targets[r]))
            .collect();
        if selected.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        if let Some(&(_, bad)) = selected.iter().find(|&&(_, t)| t >= v) {
            return Err(TensorError::Index {
                op: "masked_cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); selected.len() * v];
        let mut total = T::zero();
        for (i, &(r, t)) in selected.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[i * v..(i + 1) * v];
            let mut s = T::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                p[j] = e;
                s = s + e;
            }
            let inv = T::one() / s;
            p.iter_mut().for_each(|e| *e = *e * inv);
            total = total + (s.ln() + mx - row[t]);
        }
        let loss = total / T::lit(selected.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows: selected,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients from multiple uses of a node are summed. A tape can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.differentiated {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarSeed(self.shape(loss).to_vec()));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: self.shape(loss).to_vec(),
            data: vec![T::one()],
        });
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let gd = g.data();
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                match *plan {
                    MatMulPlan::Folded { m, k, n, b_t } => {
                        if let Some(da) = acc!(*a) {
                            // da[m,k] += g[m,n] * op(b)^T
                            gemm(m, n, k, gd, false, vb, !b_t, da, true);
                        }
                        if let Some(db) = acc!(*b) {
                            if b_t {
                                // db[n,k] += g^T[n,m] * a[m,k]
                                gemm(n, m, k, gd, true, va, false, db, true);
                            } else {
                                // db[k,n] += a^T[k,m] * g[m,n]
                                gemm(k, m, n, va, true, gd, false, db, true);
                            }
                        }
                    }
                    MatMulPlan::Batched { m, k, n, ref pairs } => {
                        if let Some(da) = acc!(*a) {
                            for (j, &(oa, ob)) in pairs.iter().enumerate() {
                                gemm(m, n, k, &gd[j * m * n..], false, &vb[ob..], true, &mut da[oa..oa + m * k], true);
                            }
                        }
                        if let Some(db) = acc!(*b) {
                            for (j, &(oa, ob)) in pairs.iter().enumerate() {
                                gemm(k, m, n, &va[oa..], true, &gd[j * m * n..], false, &mut db[ob..ob + k * n], true);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc!(v) {
                        d.iter_mut().zip(gd).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(d) = acc!(*a) {
                    for j in 0..d.len() {
                        d[j] = d[j] + gd[j] * vb[j];
                    }
                }
                if let Some(d) = acc!(*b) {
                    for j in 0..d.len() {
                        d[j] = d[j] + gd[j] * va[j];
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(gd).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(d) = acc!(*bias) {
                    let c = d.len().max(1);
                    for row in gd.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(gd).for_each(|(x, &y)| *x = *x + y * *s);
                }
            }
            Op::Permute(x, axes) => {
                if let Some(d) = acc!(*x) {
                    let mut inv = vec![0; axes.len()];
                    for (j, &a) in axes.iter().enumerate() {
                        inv[a] = j;
                    }
                    let (back, _) = permute_data(gd, g.shape(), &inv);
                    d.iter_mut().zip(&back).for_each(|(x, &y)| *x = *x + y);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(gd).for_each(|(x, &y)| *x = *x + y);
                }
            }
            Op::Softmax(x) => {
                if let Some(d) = acc!(*x) {
                    let y = nodes[i].value.data();
                    let l = nodes[i].value.last_dim().max(1);
                    for ((dr, yr), gr) in d.chunks_mut(l).zip(y.chunks(l)).zip(gd.chunks(l)) {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..l {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let dim = nodes[x.0].value.last_dim().max(1);
                let gv = nodes[gain.0].value.data();
                if let Some(d) = acc!(*x) {
                    let dn = T::lit(dim as f64);
                    let mut dxhat = vec![T::zero(); dim];
                    for r in 0..rstd.len() {
                        let gr = &gd[r * dim..(r + 1) * dim];
                        let hr = &xhat[r * dim..(r + 1) * dim];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..dim {
                            dxhat[j] = gr[j] * gv[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        let dr = &mut d[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            dr[j] = dr[j] + rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(d) = acc!(*gain) {
                    for (gr, hr) in gd.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            d[j] = d[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(d) = acc!(*offset) {
                    for gr in gd.chunks(dim) {
                        d.iter_mut().zip(gr).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(d) = acc!(*x) {
                    for j in 0..d.len() {
                        d[j] = d[j] + gd[j] * gelu_scalar(xv[j]).1;
                    }
                }
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                if let Some(d) = acc!(*x) {
                    for j in 0..d.len() {
                        d[j] = d[j] + gd[j] * (T::one() - y[j] * y[j]);
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                if let Some(d) = acc!(*src) {
                    let c = nodes[src.0].value.last_dim();
                    for (r, &s) in idx.iter().enumerate() {
                        let dr = &mut d[s * c..(s + 1) * c];
                        dr.iter_mut().zip(&gd[r * c..(r + 1) * c]).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(d) = acc!(p) {
                        d.iter_mut().zip(&gd[off..off + len]).for_each(|(x, &y)| *x = *x + y);
                    }
                    off += len;
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(d) = acc!(*x) {
                    for j in 0..d.len() {
                        d[j] = d[j] + gd[j] * keep[j];
                    }
                }
            }
            Op::CrossEntropy { logits, rows, probs } => {
                if let Some(d) = acc!(*logits) {
                    let v = nodes[logits.0].value.last_dim();
                    let s = gd[0] / T::lit(rows.len() as f64);
                    for (k, &(r, t)) in rows.iter().enumerate() {
                        let dr = &mut d[r * v..(r + 1) * v];
                        let pr = &probs[k * v..(k + 1) * v];
                        for j in 0..v {
                            dr[j] = dr[j] + s * pr[j];
                        }
                        dr[t] = dr[t] - s;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().for_each(|x| *x = *x + gd[0]);
                }
            }
        }
    }
}
