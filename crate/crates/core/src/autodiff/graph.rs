use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Gather index meaning "write zero".
pub const PAD: usize = usize::MAX;

/// Variance floor inside layer normalisation.
pub const LN_EPS: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Param(String),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    Gather { a: Var, idx: Vec<usize> },
    Concat { inputs: Vec<Var>, outer: usize, blocks: Vec<usize> },
    Reshape(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Every op records its inputs; [`Graph::backward`] walks the tape in reverse
/// and accumulates gradients into every node that requires one.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    train: bool,
    track_params: bool,
    rng: ChaCha8Rng,
    macs: u64,
    params: HashMap<String, Var>,
}

fn mm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]^T`
fn mm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            c[i * n + j] = c[i * n + j] + s;
        }
    }
}

/// `c[k,n] += a[m,k]^T · b[m,n]`
fn mm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<T: Real> Graph<T> {
    /// `train` enables dropout; parameters are tracked for gradients.
    pub fn new(train: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            train,
            track_params: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            macs: 0,
            params: HashMap::new(),
        }
    }

    /// Dropout off and parameters loaded as constants.
    pub fn inference() -> Self {
        let mut g = Self::new(false, 0);
        g.track_params = false;
        g
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Multiply-accumulates performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
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

    /// Accumulated gradient; zeros for a tracked node the loss never reached,
    /// `None` for untracked nodes.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        match &self.grads[v.0] {
            Some(g) => Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value")),
            None if self.requires_grad(v) => Some(Tensor::zeros(self.shape(v))),
            None => None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a named parameter; repeated loads return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), self.track_params);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Adds `scale` times each parameter gradient into `store`. Parameters
    /// the store does not hold are skipped, so one graph can feed several stores.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, scale: T) -> Result<()> {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, grad) {
                if !store.contains(name) {
                    continue;
                }
                store.add_grad(name, g, scale)?;
            }
        }
        Ok(())
    }

    /// `a[.., k] · b[k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        mm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched `a[B, m, k] · b[B, k, n]`, or `a · b^T` with `b[B, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (batch, m, k) = if ok { (sa[0], sa[1], sa[2]) } else { (0, 0, 0) };
        let n = if trans_b { sb.get(1) } else { sb.get(2) }.copied().unwrap_or(0);
        let kb = if trans_b { sb.get(2) } else { sb.get(1) }.copied().unwrap_or(usize::MAX);
        if !ok || kb != k {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b = {trans_b})")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let ai = &da[bi * m * k..(bi + 1) * m * k];
            let bb = &db[bi * k * n..(bi + 1) * k * n];
            let ci = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                mm_nt(ai, bb, ci, m, k, n);
            } else {
                mm_nn(ai, bb, ci, m, k, n);
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            rg,
        ))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sa, sb) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?} (rhs must be a suffix)")))
        }
    }

    fn zip_bcast(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % nb]))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    /// Element-wise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let t = self.zip_bcast(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let t = self.zip_bcast(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let t = self.zip_bcast(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale { a, s }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row-wise softmax over the last axis; `-inf` logits get zero weight.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let d = *v.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = v.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s = s + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / s;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Normalises each row of the last axis to zero mean and unit variance,
    /// then applies the optional per-column gain and bias.
    pub fn layer_norm_lastdim(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", format!("affine {:?} vs width {d}", self.shape(p))));
            }
        }
        let v = self.value(x).data();
        let rows = v.len() / d.max(1);
        let mut xhat = vec![T::zero(); v.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for (o, &a) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (a - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gv = self.value(g).data();
            out.iter_mut().enumerate().for_each(|(i, o)| *o = *o * gv[i % d]);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            out.iter_mut().enumerate().for_each(|(i, o)| *o = *o + bv[i % d]);
        }
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(sx, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        )?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Dropout { a, mask }, rg))
    }

    /// `out.flat[i] = a.flat[idx[i]]`, or zero where `idx[i] == PAD`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let len = self.value(a).numel();
        if n != idx.len() {
            return Err(Error::shape("gather", format!("{} indices for shape {shape:?}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i != PAD && i >= len) {
            return Err(Error::IndexOutOfRange { index: bad, len });
        }
        let src = self.value(a).data();
        let data = idx
            .iter()
            .map(|&i| if i == PAD { T::zero() } else { src[i] })
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { a, idx }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} on {s:?}")));
        }
        let mut strides = vec![1; s.len()];
        for i in (0..s.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * s[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let n: usize = out_shape.iter().product();
        let mut idx = Vec::with_capacity(n);
        let mut counter = vec![0usize; s.len()];
        for _ in 0..n {
            idx.push(counter.iter().zip(perm).map(|(&c, &p)| c * strides[p]).sum());
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(a, idx, out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select(a, axis, &rows)
    }

    /// Picks (and possibly repeats) entries along `axis`.
    pub fn select(&mut self, a: Var, axis: usize, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("select", format!("axis {axis} of {s:?}")));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[axis]) {
            return Err(Error::IndexOutOfRange { index: bad, len: s[axis] });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * rows.len() * inner);
        for o in 0..outer {
            for &r in rows {
                let base = (o * s[axis] + r) * inner;
                idx.extend(base..base + inner);
            }
        }
        let mut shape = s;
        shape[axis] = rows.len();
        self.gather(a, idx, shape)
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total = self.shape(a).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != total {
            return Err(Error::shape("split", format!("{sizes:?} vs axis length {total}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Rows of `table[V, d]` for each id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if self.shape(table).len() != 2 {
            return Err(Error::shape("embedding_lookup", format!("table {:?}", self.shape(table))));
        }
        self.select(table, 0, ids)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let blocks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &bl) in inputs.iter().zip(&blocks) {
                data.extend_from_slice(&self.value(v).data()[o * bl..(o + 1) * bl]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat { inputs: inputs.to_vec(), outer, blocks },
            rg,
        ))
    }

    /// Same-padded 2-D convolution, channels last.
    ///
    /// `x` is `[.., H, W, C_in]`, `w` is `[k * k * C_in, C_out]` with rows
    /// ordered `(dy, dx, c)`. Output is `[.., H, W, C_out]`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || k.is_multiple_of(2) {
            return Err(Error::shape("conv2d", format!("input {s:?}, kernel {k}")));
        }
        let r = s.len();
        let (h, wd, c) = (s[r - 3], s[r - 2], s[r - 1]);
        let sw = self.shape(w);
        if sw.len() != 2 || sw[0] != k * k * c {
            return Err(Error::shape("conv2d", format!("weight {sw:?} for k = {k}, C_in = {c}")));
        }
        let cout = sw[1];
        let batch: usize = s[..r - 3].iter().product();
        let pad = (k / 2) as isize;
        let mut idx = Vec::with_capacity(batch * h * wd * k * k * c);
        for b in 0..batch {
            for y in 0..h as isize {
                for xx in 0..wd as isize {
                    for dy in 0..k as isize {
                        for dx in 0..k as isize {
                            let (sy, sx) = (y + dy - pad, xx + dx - pad);
                            let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize;
                            for ch in 0..c {
                                idx.push(if inside {
                                    ((b * h + sy as usize) * wd + sx as usize) * c + ch
                                } else {
                                    PAD
                                });
                            }
                        }
                    }
                }
            }
        }
        let cols = self.gather(x, idx, vec![batch * h * wd, k * k * c])?;
        let y = self.matmul(cols, w)?;
        let mut shape = s;
        shape[r - 1] = cout;
        self.reshape(y, &shape)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Reverse sweep from a scalar `loss`; gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut pending);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], pending: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, f: &dyn Fn(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = pending[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    send(*a, &|da| mm_nt(g, val(*b), da, m, n, k));
                }
                if wants(*b) {
                    send(*b, &|db| mm_tn(val(*a), g, db, m, k, n));
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                for bi in 0..*batch {
                    let gi = &g[bi * m * n..(bi + 1) * m * n];
                    let ai = &val(*a)[bi * m * k..(bi + 1) * m * k];
                    let bb = &val(*b)[bi * k * n..(bi + 1) * k * n];
                    send(*a, &|da| {
                        let dai = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            mm_nn(gi, bb, dai, m, n, k);
                        } else {
                            mm_nt(gi, bb, dai, m, n, k);
                        }
                    });
                    send(*b, &|db| {
                        let dbi = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            mm_tn(gi, ai, dbi, m, n, k);
                        } else {
                            mm_tn(ai, gi, dbi, m, k, n);
                        }
                    });
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(nodes[i].op, Op::Sub { .. });
                send(*a, &|da| da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x));
                send(*b, &|db| {
                    let nb = db.len().max(1);
                    for (j, &x) in g.iter().enumerate() {
                        let d = &mut db[j % nb];
                        *d = if neg { *d - x } else { *d + x };
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len().max(1);
                send(*a, &|da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d = *d + g[j] * vb[j % nb];
                    }
                });
                send(*b, &|db| {
                    for (j, &x) in g.iter().enumerate() {
                        db[j % nb] = db[j % nb] + x * va[j];
                    }
                });
            }
            Op::Scale { a, s } => {
                send(*a, &|da| da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *s));
            }
            Op::Relu(a) => {
                let va = val(*a);
                send(*a, &|da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        if va[j] > T::zero() {
                            *d = *d + g[j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = nodes[i].value.data();
                let d = *nodes[i].value.shape().last().unwrap();
                send(*a, &|da| {
                    for ((dr, yr), gr) in da.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..d {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *nodes[i].value.shape().last().unwrap();
                let gv = gain.map(val);
                send(*x, &|dx| {
                    let dn = T::of(d as f64);
                    for r in 0..rstd.len() {
                        let span = r * d..(r + 1) * d;
                        let xh = &xhat[span.clone()];
                        let gr = &g[span.clone()];
                        let dxh: Vec<T> = (0..d)
                            .map(|j| gr[j] * gv.map_or(T::one(), |w| w[j]))
                            .collect();
                        let m1 = dxh.iter().copied().sum::<T>() / dn;
                        let m2 = dxh.iter().zip(xh).map(|(&p, &q)| p * q).sum::<T>() / dn;
                        for (j, o) in dx[span].iter_mut().enumerate() {
                            *o = *o + rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                if let Some(gn) = gain {
                    send(*gn, &|dg| {
                        for (j, (&p, &q)) in g.iter().zip(xhat).enumerate() {
                            dg[j % d] = dg[j % d] + p * q;
                        }
                    });
                }
                if let Some(bn) = bias {
                    send(*bn, &|db| {
                        for (j, &p) in g.iter().enumerate() {
                            db[j % d] = db[j % d] + p;
                        }
                    });
                }
            }
            Op::Dropout { a, mask } => {
                send(*a, &|da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d = *d + g[j] * mask[j];
                    }
                });
            }
            Op::Gather { a, idx } => {
                send(*a, &|da| {
                    for (&src, &x) in idx.iter().zip(g) {
                        if src != PAD {
                            da[src] = da[src] + x;
                        }
                    }
                });
            }
            Op::Concat { inputs, outer, blocks } => {
                let total: usize = blocks.iter().sum();
                let mut off = 0;
                for (&v, &bl) in inputs.iter().zip(blocks) {
                    send(v, &|dv| {
                        for o in 0..*outer {
                            let src = &g[o * total + off..o * total + off + bl];
                            for (d, &x) in dv[o * bl..(o + 1) * bl].iter_mut().zip(src) {
                                *d = *d + x;
                            }
                        }
                    });
                    off += bl;
                }
            }
            Op::Reshape(a) => {
                send(*a, &|da| da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x));
            }
            Op::Sum(a) => {
                send(*a, &|da| da.iter_mut().for_each(|d| *d = *d + g[0]));
            }
        }
    }
}
