//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs for
//! the vector-Jacobian product. Nodes are created in topological order, so
//! `backward` is a single reverse sweep. Ops refuse to produce NaN/Inf.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleBy(Var, Var),
    MulConst(Var, T),
    AddConst(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    LogFloor { x: Var, floor: T },
    Sum(Var),
    ReduceAxis { x: Var, outer: usize, len: usize, inner: usize, scale: T },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    ConcatLast(Var, Var),
    IndexSelect { x: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph recorded during a forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

fn check<T: Real>(op: &str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(op.to_string()))
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(format!("{op}: {a:?} vs {b:?}")))
    }
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// Moves data laid out as `shape` into the axis order `perm`.
fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape = permuted_shape(shape, perm);
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), dropout_rng: None }
    }

    /// Graph whose dropout ops draw masks from `rng`. Without an rng dropout is the identity.
    pub fn with_dropout(rng: ChaCha8Rng) -> Self {
        Graph { nodes: Vec::new(), dropout_rng: Some(rng) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check(name, &value)?;
        Ok(self.push(value, op, inputs))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check("leaf", &value)?;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` with `b` broadcast along every leading axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.rank() != 1 || vb.numel() != vx.last_dim() {
            return Err(Error::shape(format!("add_bias: {:?} + {:?}", vx.shape(), vb.shape())));
        }
        let d = vb.numel();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + vb.data()[i % d]).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("add_bias", t, Op::AddBias(x, b), &[x, b])
    }

    /// `x * s` where `s` holds exactly one value.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(format!("scale_by: scalar expected, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v * sv).collect())?;
        self.push_checked("scale_by", t, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v * c).collect())?;
        self.push_checked("mul_const", t, Op::MulConst(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v + c).collect())?;
        self.push_checked("add_const", t, Op::AddConst(x), &[x])
    }

    /// `x[..., K] · w[K, N] -> [..., N]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.rank() != 2 || vx.last_dim() != vw.shape()[0] {
            return Err(Error::shape(format!("matmul: {:?} · {:?}", vx.shape(), vw.shape())));
        }
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        let m = vx.rows();
        let mut out = vec![T::zero(); m * n];
        gemm_nn(vx.data(), vw.data(), &mut out, m, k, n);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        self.push_checked("matmul", t, Op::MatMul(x, w), &[x, w])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Batched product of `a[Bt, M, K]` with `b[Bt, K, N]` (or `b[Bt, N, K]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 3 || vb.rank() != 3 || va.shape()[0] != vb.shape()[0] {
            return Err(Error::shape(format!("bmm: {:?} · {:?}", va.shape(), vb.shape())));
        }
        let (bt, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (kb, n) = if trans_b {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        if kb != k {
            return Err(Error::shape(format!(
                "bmm (trans_b={trans_b}): {:?} · {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            let ad = &va.data()[i * m * k..(i + 1) * m * k];
            let bd = &vb.data()[i * k * n..(i + 1) * k * n];
            let cd = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ad, bd, cd, m, k, n);
            } else {
                gemm_nn(ad, bd, cd, m, k, n);
            }
        }
        let t = Tensor::new(vec![bt, m, n], out)?;
        self.push_checked("bmm", t, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last axis where `keep[i] == false` entries get exactly zero probability.
    pub fn masked_softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        check("softmax input", vx)?;
        if let Some(k) = keep {
            if k.len() != vx.numel() {
                return Err(Error::shape(format!(
                    "softmax mask has {} entries for {:?}",
                    k.len(),
                    vx.shape()
                )));
            }
        }
        let d = vx.last_dim();
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let kept = |j: usize| keep.is_none_or(|k| k[r * d + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::DegenerateInput("every key position is masked".into()));
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) {
                    let e = (v - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v = *v / sum;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push_checked("softmax", t, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        check("log_softmax input", vx)?;
        let d = vx.last_dim();
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push_checked("log_softmax", t, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.last_dim();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        check("layer_norm input", vx)?;
        let eps = T::c(eps);
        let n = T::c(d as f64);
        let rows = vx.rows();
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push_checked("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| gelu(v)).collect())?;
        self.push_checked("gelu", t, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| sigmoid(v)).collect())?;
        self.push_checked("sigmoid", t, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v.exp()).collect())?;
        self.push_checked("exp", t, Op::Exp(x), &[x])
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| softplus(v)).collect())?;
        self.push_checked("softplus", t, Op::Softplus(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        let floor = T::c(floor);
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v.max(floor).ln()).collect())?;
        self.push_checked("log_floor", t, Op::LogFloor { x, floor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.mul_const(s, T::c(1.0 / n as f64))
    }

    /// Sums over `axis` (dropping it) and multiplies by `scale`.
    pub fn reduce_axis(&mut self, x: Var, axis: usize, scale: f64) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::shape(format!("reduce_axis {axis} on {:?}", vx.shape())));
        }
        let shape = vx.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = T::c(scale);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &vx.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        for v in out.iter_mut() {
            *v *= scale;
        }
        let mut new_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let t = Tensor::new(new_shape, out)?;
        self.push_checked("reduce_axis", t, Op::ReduceAxis { x, outer, len, inner, scale }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != vx.rank() || sorted.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::shape(format!("permute {perm:?} on {:?}", vx.shape())));
        }
        let data = permute_data(vx.data(), vx.shape(), perm);
        let t = Tensor::new(permuted_shape(vx.shape(), perm), data)?;
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != vb.rank() || va.shape()[..va.rank() - 1] != vb.shape()[..vb.rank() - 1] {
            return Err(Error::shape(format!("concat_last: {:?} ++ {:?}", va.shape(), vb.shape())));
        }
        let (da, db) = (va.last_dim(), vb.last_dim());
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..va.rows() {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = da + db;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ConcatLast(a, b), &[a, b]))
    }

    /// Selects slices along axis 0.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let n0 = vx.shape()[0];
        let stride = vx.numel() / n0;
        if idx.is_empty() {
            return Err(Error::shape("index_select with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= n0 {
                return Err(Error::shape(format!("index {i} out of range for axis of {n0}")));
            }
            out.extend_from_slice(&vx.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::IndexSelect { x, idx: idx.to_vec() }, &[x]))
    }

    /// Picks individual elements by flat index into a rank-1 result.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= vx.numel()) {
            return Err(Error::shape(format!("gather indices out of range for {:?}", vx.shape())));
        }
        let out = idx.iter().map(|&i| vx.data()[i]).collect();
        let t = Tensor::new(vec![idx.len()], out)?;
        Ok(self.push(t, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    /// Inverted dropout. Identity when `rate == 0` or the graph carries no rng.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate >= 1.0 {
            return Err(Error::config(format!("dropout rate {rate} must be below 1")));
        }
        let n = self.nodes[x.0].value.numel();
        let keep = T::c(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        check("l2_normalize input", vx)?;
        let d = vx.last_dim();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() || !norm.is_finite() {
                return Err(Error::DegenerateEmbedding(format!("row {r} has norm {norm}")));
            }
            norms.push(norm);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push_checked("l2_normalize", t, Op::L2Normalize { x, norms }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, contrib: Vec<T>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(*a, g.iter().zip(vb).map(|(&gv, &y)| gv * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(va).map(|(&gv, &x)| gv * x).collect());
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*b) {
                    let d = self.value(*b).numel();
                    let mut gb = vec![T::zero(); d];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                    acc(*b, gb);
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).data()[0];
                if self.wants(*x) {
                    acc(*x, g.iter().map(|&gv| gv * sv).collect());
                }
                if self.wants(*s) {
                    let vx = self.value(*x).data();
                    acc(*s, vec![g.iter().zip(vx).map(|(&gv, &xv)| gv * xv).sum()]);
                }
            }
            Op::MulConst(x, c) => acc(*x, g.iter().map(|&gv| gv * *c).collect()),
            Op::AddConst(x) => acc(*x, g.to_vec()),
            Op::MatMul(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let m = vx.rows();
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    gemm_nt(g, vw.data(), &mut gx, m, n, k);
                    acc(*x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    gemm_tn(vx.data(), g, &mut gw, m, k, n);
                    acc(*w, gw);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bt, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = node.value.shape()[2];
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); bt * m * k];
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bd = &vb.data()[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gi, bd, out, m, n, k);
                        } else {
                            gemm_nt(gi, bd, out, m, n, k);
                        }
                    }
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); bt * k * n];
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ad = &va.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gi, ad, out, m, n, k);
                        } else {
                            gemm_tn(ad, gi, out, m, k, n);
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let dotp: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = yr[j] * (gr[j] - dotp);
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let gsum: T = gr.iter().copied().sum();
                    for j in 0..d {
                        gx[r * d + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let rows = rstd.len();
                if self.wants(*x) {
                    let n = T::c(d as f64);
                    let mut gx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh = mean_dxh / n;
                        mean_dxh_xh = mean_dxh_xh / n;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            gx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    acc(*x, gx);
                }
                if self.wants(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += gv * h;
                    }
                    acc(*gamma, gg);
                }
                if self.wants(*beta) {
                    let mut gb = vec![T::zero(); d];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                    acc(*beta, gb);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                acc(*x, g.iter().zip(vx).map(|(&gv, &v)| gv * gelu_grad(v)).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect());
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&gv, &e)| gv * e).collect());
            }
            Op::Softplus(x) => {
                let vx = self.value(*x).data();
                acc(*x, g.iter().zip(vx).map(|(&gv, &v)| gv * sigmoid(v)).collect());
            }
            Op::LogFloor { x, floor } => {
                let vx = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(&gv, &v)| if v > *floor { gv / v } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::ReduceAxis { x, outer, len, inner, scale } => {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * *scale;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let inv = inverse_perm(perm);
                acc(*x, permute_data(g, node.value.shape(), &inv));
            }
            Op::ConcatLast(a, b) => {
                let (da, db) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let rows = self.value(*a).rows();
                let mut ga = Vec::with_capacity(rows * da);
                let mut gb = Vec::with_capacity(rows * db);
                for r in 0..rows {
                    let gr = &g[r * (da + db)..(r + 1) * (da + db)];
                    ga.extend_from_slice(&gr[..da]);
                    gb.extend_from_slice(&gr[da..]);
                }
                if self.wants(*a) {
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::IndexSelect { x, idx } => {
                let vx = self.value(*x);
                let stride = vx.numel() / vx.shape()[0];
                let mut gx = vec![T::zero(); vx.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &s) in gx[i * stride..(i + 1) * stride]
                        .iter_mut()
                        .zip(&g[k * stride..(k + 1) * stride])
                    {
                        *d += s;
                    }
                }
                acc(*x, gx);
            }
            Op::Gather { x, idx } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
                acc(*x, gx);
            }
            Op::Dropout { x, mask } => {
                acc(*x, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect());
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let dotp: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dotp) / norms[r];
                    }
                }
                acc(*x, gx);
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let u = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::c(SQRT_2_OVER_PI) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
