use super::kernels::{self, BilinearTap, Conv2dGeom};
use super::params::{ParamId, ParamStore};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization normalizes with the statistics of the current
/// batch (training) or with fixed running statistics (inference).
#[derive(Clone, Debug)]
pub enum BatchNormMode<T> {
    Batch,
    Fixed { mean: Vec<T>, var: Vec<T> },
}

/// Points sampled from one image of a `[B,C,H,W]` feature map.
#[derive(Clone, Debug)]
pub struct SampleGroup {
    pub batch: usize,
    /// `(x, y)` in texel coordinates.
    pub points: Vec<[f64; 2]>,
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    ClampedSigmoid(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom, batch: usize, out_c: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Concat { parts: Vec<Var> },
    Upsample2x(Var),
    Bilinear { fm: Var, taps: Vec<(usize, BilinearTap<T>)>, channels: usize, plane: usize },
    RingConv { x: Var, w: Var, b: Option<Var>, ksize: usize },
    VertexMax { x: Var, argmax: Vec<usize> },
    BroadcastLast { x: Var, n: usize },
    Focal { pred: Var, target: Vec<T>, norm: T, alpha: T, beta: T },
    MaskedL1 { pred: Var, index: Vec<usize>, target: Vec<T>, norm: T },
    L1 { pred: Var, target: Vec<T>, norm: T },
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::ClampedSigmoid(a)
            | Op::Upsample2x(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } | Op::RingConv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts } => parts.clone(),
            Op::Bilinear { fm, .. } => vec![*fm],
            Op::VertexMax { x, .. } | Op::BroadcastLast { x, .. } => vec![*x],
            Op::Focal { pred, .. } | Op::MaskedL1 { pred, .. } | Op::L1 { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape for one forward/backward pass.
///
/// Nodes are append-only, so every recorded operation only refers to earlier
/// nodes. [`Graph::backward`] walks the tape in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    links: Vec<(Var, ParamId)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), links: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        let mut value = value;
        value.set_requires_grad(needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// Records a copy of a stored parameter; its gradient can later be moved
    /// back with [`Graph::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let src = store.tensor(id);
        let t = Tensor::new(src.shape().to_vec(), src.data().to_vec())
            .expect("stored tensor is consistent")
            .with_requires_grad(store.is_trainable(id));
        let v = self.leaf(t);
        self.links.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Adds the gradients of all parameter leaves into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(v, id) in &self.links {
            if let Some(g) = self.nodes[v.0].value.grad() {
                store.tensor_mut(id).accumulate_grad(g);
            }
        }
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.data(a), self.data(b));
        let data = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(self.shape_of(a), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if numel(&shape) != src.len() {
            return Err(Error::contract(format!("cannot reshape {:?} into {:?}", src.shape(), shape)));
        }
        let t = Tensor::new(shape, src.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(T::zero()), Op::Relu(a))
    }

    /// Logistic sigmoid clamped to `[1e-4, 1 − 1e-4]`, zero gradient where
    /// clamped. Keeps the focal loss logarithms finite.
    pub fn clamped_sigmoid(&mut self, a: Var) -> Var {
        let (lo, hi) = sigmoid_bounds::<T>();
        self.unary(a, |v| (T::one() / (T::one() + (-v).exp())).max(lo).min(hi), Op::ClampedSigmoid(a))
    }

    /// 2-D convolution of `x: [B,Ci,H,W]` with `w: [Co,Ci,k,k]` and optional
    /// bias `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape_of(x);
        let ws = self.shape_of(w);
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::contract(format!("conv2d: input {xs:?} incompatible with kernel {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::contract(format!("conv2d: bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let geom = Conv2dGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| Error::contract(format!("conv2d: kernel {} does not fit input {xs:?}", ws[2])))?;
        let (batch, out_c) = (xs[0], ws[0]);
        let plane_in = xs[1] * xs[2] * xs[3];
        let plane_out = out_c * geom.col_cols();
        let mut out = vec![T::zero(); batch * plane_out];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); geom.col_rows() * geom.col_cols()] };
        {
            let xd = self.data(x);
            let wd = self.data(w);
            for n in 0..batch {
                let xin = &xd[n * plane_in..(n + 1) * plane_in];
                let colv: &[T] = if geom.is_pointwise() {
                    xin
                } else {
                    kernels::im2col(xin, &geom, &mut cols);
                    &cols
                };
                T::gemm(out_c, geom.col_rows(), geom.col_cols(), wd, false, colv, false, &mut out[n * plane_out..(n + 1) * plane_out], false);
            }
            if let Some(b) = b {
                let bd = self.data(b);
                let hw = geom.col_cols();
                for n in 0..batch {
                    for (c, &bc) in bd.iter().enumerate() {
                        let start = n * plane_out + c * hw;
                        out[start..start + hw].iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, out_c, geom.out_h, geom.out_w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, batch, out_c }))
    }

    /// Batch normalization over every axis except axis 1 of `x: [B,C,...]`.
    ///
    /// Returns the output and, in [`BatchNormMode::Batch`], the batch mean and
    /// unbiased variance for running-statistics updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<T>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let xs = self.shape_of(x);
        if xs.len() < 2 {
            return Err(Error::contract(format!("batch_norm: input {xs:?} has no channel axis")));
        }
        let (batch, ch) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::contract("batch_norm: affine parameters must have one entry per channel"));
        }
        let count = batch * inner;
        let xd = self.data(x);
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Batch => {
                if count < 2 {
                    return Err(Error::contract("batch_norm: batch statistics need at least two values per channel"));
                }
                let mut mean = vec![0.0f64; ch];
                let mut var = vec![0.0f64; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for n in 0..batch {
                        let base = (n * ch + c) * inner;
                        s += xd[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for n in 0..batch {
                        let base = (n * ch + c) * inner;
                        q += xd[base..base + inner].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = q / count as f64;
                }
                (mean, var, true)
            }
            BatchNormMode::Fixed { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::contract("batch_norm: running statistics have the wrong length"));
                }
                (mean.iter().map(|v| v.as_f64()).collect(), var.iter().map(|v| v.as_f64()).collect(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut out = vec![T::zero(); xd.len()];
        for n in 0..batch {
            for c in 0..ch {
                let base = (n * ch + c) * inner;
                let scale = T::of(inv_std[c]) * g[c];
                let shift = bt[c] - T::of(mean[c]) * scale;
                for (o, &v) in out[base..base + inner].iter_mut().zip(&xd[base..base + inner]) {
                    *o = v * scale + shift;
                }
            }
        }
        let stats = batch_stats.then(|| {
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            (mean.iter().map(|&m| T::of(m)).collect(), var.iter().map(|&v| T::of(v * unbias)).collect())
        });
        let t = Tensor::new(xs, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: mean.into_iter().map(T::of).collect(),
            inv_std: inv_std.into_iter().map(T::of).collect(),
            batch_stats,
        };
        Ok((self.push(t, op), stats))
    }

    /// Concatenates `[B,Ci,...]` tensors along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat: no inputs"))?;
        let fs = self.shape_of(*first);
        if fs.len() < 2 {
            return Err(Error::contract("concat: inputs need a channel axis"));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != fs.len() || s[0] != fs[0] || s[2..] != fs[2..] {
                return Err(Error::contract(format!("concat: {:?} does not match {:?}", s, fs)));
            }
            channels += s[1];
        }
        let batch = fs[0];
        let inner: usize = fs[2..].iter().product();
        let mut out = Vec::with_capacity(batch * channels * inner);
        for n in 0..batch {
            for p in parts {
                let c = self.shape(*p)[1];
                out.extend_from_slice(&self.data(*p)[n * c * inner..(n + 1) * c * inner]);
            }
        }
        let mut shape = fs.clone();
        shape[1] = channels;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }))
    }

    /// Nearest-neighbour 2× upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x);
        if s.len() != 4 {
            return Err(Error::contract(format!("upsample2x: expected [B,C,H,W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let xd = self.data(x);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2x(x)))
    }

    /// Bilinear sampling from `fm: [B,C,H,W]`. Every group must hold the same
    /// number of points `n`; the result is `[groups, C, n]`. Points are
    /// clamped to the texel grid, and the result is differentiable with
    /// respect to `fm` only.
    pub fn bilinear_sample(&mut self, fm: Var, groups: &[SampleGroup]) -> Result<Var> {
        let s = self.shape_of(fm);
        if s.len() != 4 {
            return Err(Error::contract(format!("bilinear_sample: expected [B,C,H,W], got {s:?}")));
        }
        let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let n = groups.first().map_or(0, |g| g.points.len());
        let mut taps = Vec::with_capacity(groups.len() * n);
        for g in groups {
            if g.batch >= batch {
                return Err(Error::contract(format!("bilinear_sample: batch index {} out of {batch}", g.batch)));
            }
            if g.points.len() != n {
                return Err(Error::contract("bilinear_sample: groups differ in point count"));
            }
            for p in &g.points {
                taps.push((g.batch, kernels::bilinear_tap::<T>(p[0], p[1], h, w)));
            }
        }
        let plane = h * w;
        let fd = self.data(fm);
        let mut out = vec![T::zero(); groups.len() * ch * n];
        for (gi, chunk) in taps.chunks(n.max(1)).enumerate().take(groups.len()) {
            for c in 0..ch {
                let dst = &mut out[(gi * ch + c) * n..(gi * ch + c + 1) * n];
                for (o, (b, tap)) in dst.iter_mut().zip(chunk) {
                    let src = &fd[(b * ch + c) * plane..(b * ch + c + 1) * plane];
                    *o = (0..4).map(|k| src[tap.index[k]] * tap.weight[k]).sum();
                }
            }
        }
        let t = Tensor::new(vec![groups.len(), ch, n], out)?;
        Ok(self.push(t, Op::Bilinear { fm, taps, channels: ch, plane }))
    }

    /// Circular convolution of ring signals `x: [B,Ci,N]` with `w: [Co,Ci,K]`,
    /// `K = 2r+1`: `out[i] = Σ_{j=-r..r} x[(i+j) mod N]·w[j+r]`.
    pub fn ring_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape_of(x);
        let ws = self.shape_of(w);
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] {
            return Err(Error::contract(format!("ring_conv: input {xs:?} incompatible with kernel {ws:?}")));
        }
        let (batch, ci, n) = (xs[0], xs[1], xs[2]);
        let (co, ksize) = (ws[0], ws[2]);
        if ksize % 2 == 0 {
            return Err(Error::contract(format!("ring_conv: kernel size {ksize} must be odd")));
        }
        if n <= ksize / 2 * 2 {
            return Err(Error::contract(format!(
                "ring_conv: {n} vertices cannot hold a kernel of half-width {}",
                ksize / 2
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::contract("ring_conv: bias length differs from output channels"));
            }
        }
        let mut out = vec![T::zero(); batch * co * n];
        let mut cols = if ksize == 1 { Vec::new() } else { vec![T::zero(); ci * ksize * n] };
        let xd = self.data(x);
        let wd = self.data(w);
        for bi in 0..batch {
            let xin = &xd[bi * ci * n..(bi + 1) * ci * n];
            let colv: &[T] = if ksize == 1 {
                xin
            } else {
                kernels::ring_im2col(xin, ci, n, ksize, &mut cols);
                &cols
            };
            T::gemm(co, ci * ksize, n, wd, false, colv, false, &mut out[bi * co * n..(bi + 1) * co * n], false);
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for bi in 0..batch {
                for (c, &bc) in bd.iter().enumerate() {
                    let start = (bi * co + c) * n;
                    out[start..start + n].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let t = Tensor::new(vec![batch, co, n], out)?;
        Ok(self.push(t, Op::RingConv { x, w, b, ksize }))
    }

    /// Max over the last axis: `[B,C,N] → [B,C,1]`.
    pub fn vertex_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x);
        if s.len() != 3 || s[2] == 0 {
            return Err(Error::contract(format!("vertex_max: expected nonempty [B,C,N], got {s:?}")));
        }
        let n = s[2];
        let mut out = Vec::with_capacity(s[0] * s[1]);
        let mut argmax = Vec::with_capacity(s[0] * s[1]);
        for row in self.data(x).chunks(n) {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let t = Tensor::new(vec![s[0], s[1], 1], out)?;
        Ok(self.push(t, Op::VertexMax { x, argmax }))
    }

    /// Repeats `[B,C,1]` along the last axis: `→ [B,C,n]`.
    pub fn broadcast_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape_of(x);
        if s.len() != 3 || s[2] != 1 {
            return Err(Error::contract(format!("broadcast_last: expected [B,C,1], got {s:?}")));
        }
        let out = self.data(x).iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
        let t = Tensor::new(vec![s[0], s[1], n], out)?;
        Ok(self.push(t, Op::BroadcastLast { x, n }))
    }

    /// Penalty-reduced focal loss over every element of `pred`:
    /// `−1/norm · Σ [(1−p)^α ln p  if y = 1,  (1−y)^β p^α ln(1−p) otherwise]`.
    pub fn focal(&mut self, pred: Var, target: &[T], norm: T, alpha: T, beta: T) -> Result<Var> {
        let pd = self.data(pred);
        if pd.len() != target.len() {
            return Err(Error::contract("focal: prediction and target sizes differ"));
        }
        let mut s = T::zero();
        for (&p, &y) in pd.iter().zip(target) {
            s += if y == T::one() {
                (T::one() - p).powf(alpha) * p.ln()
            } else {
                (T::one() - y).powf(beta) * p.powf(alpha) * (T::one() - p).ln()
            };
        }
        let t = Tensor::scalar(-s / norm);
        Ok(self.push(t, Op::Focal { pred, target: target.to_vec(), norm, alpha, beta }))
    }

    /// `Σ_k |pred[index_k] − target_k| / norm`.
    pub fn masked_l1(&mut self, pred: Var, index: &[usize], target: &[T], norm: T) -> Result<Var> {
        let pd = self.data(pred);
        if index.len() != target.len() || index.iter().any(|&i| i >= pd.len()) {
            return Err(Error::contract("masked_l1: indices out of range or unpaired with targets"));
        }
        let s: T = index.iter().zip(target).map(|(&i, &y)| (pd[i] - y).abs()).sum();
        let t = Tensor::scalar(s / norm);
        Ok(self.push(t, Op::MaskedL1 { pred, index: index.to_vec(), target: target.to_vec(), norm }))
    }

    /// `Σ |pred − target| / norm` over all elements.
    pub fn l1(&mut self, pred: Var, target: &[T], norm: T) -> Result<Var> {
        let pd = self.data(pred);
        if pd.len() != target.len() {
            return Err(Error::contract("l1: prediction and target sizes differ"));
        }
        let s: T = pd.iter().zip(target).map(|(&p, &y)| (p - y).abs()).sum();
        let t = Tensor::scalar(s / norm);
        Ok(self.push(t, Op::L1 { pred, target: target.to_vec(), norm }))
    }

    /// Reverse pass from a scalar `loss`. Gradients add onto whatever earlier
    /// passes left in the nodes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            for p in self.nodes[idx].op.parents() {
                if p.0 >= idx {
                    return Err(Error::Internal(format!("node {idx} refers forward to node {}", p.0)));
                }
            }
            self.backprop_node(idx, &gout, &mut grads);
            self.nodes[idx].value.accumulate_grad(&gout);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let slot = |v: Var, grads: &mut [Option<Vec<T>>]| -> Option<usize> {
            if !self.nodes[v.0].needs_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![T::zero(); self.nodes[v.0].value.len()]);
            }
            Some(v.0)
        };
        macro_rules! acc {
            ($v:expr, |$g:ident| $body:block) => {
                if let Some(i) = slot($v, grads) {
                    let $g = grads[i].as_mut().unwrap();
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |g| { g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s) });
                acc!(*b, |g| { g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s) });
            }
            Op::Sub(a, b) => {
                acc!(*a, |g| { g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s) });
                acc!(*b, |g| { g.iter_mut().zip(gout).for_each(|(d, &s)| *d -= s) });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(*a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bd[i];
                    }
                });
                acc!(*b, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => acc!(*a, |g| { g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s * *c) }),
            Op::Sum(a) => acc!(*a, |g| { g.iter_mut().for_each(|d| *d += gout[0]) }),
            Op::Reshape(a) => acc!(*a, |g| { g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s) }),
            Op::Relu(a) => {
                let ad = self.data(*a);
                acc!(*a, |g| {
                    for i in 0..g.len() {
                        if ad[i] > T::zero() {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::ClampedSigmoid(a) => {
                let out = node.value.data();
                let (lo, hi) = sigmoid_bounds::<T>();
                acc!(*a, |g| {
                    for i in 0..g.len() {
                        let s = out[i];
                        if s > lo && s < hi {
                            g[i] += gout[i] * s * (T::one() - s);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, batch, out_c } => {
                let plane_in = geom.channels * geom.height * geom.width;
                let hw = geom.col_cols();
                let plane_out = out_c * hw;
                let rows = geom.col_rows();
                let xd = self.data(*x);
                let wd = self.data(*w);
                if let Some(bv) = b {
                    acc!(*bv, |g| {
                        for n in 0..*batch {
                            for c in 0..*out_c {
                                let start = n * plane_out + c * hw;
                                g[c] += gout[start..start + hw].iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * hw }];
                acc!(*w, |g| {
                    for n in 0..*batch {
                        let xin = &xd[n * plane_in..(n + 1) * plane_in];
                        let colv: &[T] = if geom.is_pointwise() {
                            xin
                        } else {
                            kernels::im2col(xin, geom, &mut cols);
                            &cols
                        };
                        T::gemm(*out_c, hw, rows, &gout[n * plane_out..(n + 1) * plane_out], false, colv, true, g, true);
                    }
                });
                acc!(*x, |g| {
                    for n in 0..*batch {
                        let gy = &gout[n * plane_out..(n + 1) * plane_out];
                        let gx = &mut g[n * plane_in..(n + 1) * plane_in];
                        if geom.is_pointwise() {
                            T::gemm(rows, *out_c, hw, wd, true, gy, false, gx, true);
                        } else {
                            T::gemm(rows, *out_c, hw, wd, true, gy, false, &mut cols, false);
                            kernels::col2im(&cols, geom, gx);
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let xs = self.shape(*x);
                let (batch, ch) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let m = T::of((batch * inner) as f64);
                let xd = self.data(*x);
                let gm = self.data(*gamma);
                let mut sum_dy = vec![T::zero(); ch];
                let mut sum_dy_xhat = vec![T::zero(); ch];
                for n in 0..batch {
                    for c in 0..ch {
                        let base = (n * ch + c) * inner;
                        for i in base..base + inner {
                            let xhat = (xd[i] - mean[c]) * inv_std[c];
                            sum_dy[c] += gout[i];
                            sum_dy_xhat[c] += gout[i] * xhat;
                        }
                    }
                }
                acc!(*gamma, |g| { g.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &s)| *d += s) });
                acc!(*beta, |g| { g.iter_mut().zip(&sum_dy).for_each(|(d, &s)| *d += s) });
                acc!(*x, |g| {
                    for n in 0..batch {
                        for c in 0..ch {
                            let base = (n * ch + c) * inner;
                            let k = gm[c] * inv_std[c];
                            for i in base..base + inner {
                                if *batch_stats {
                                    let xhat = (xd[i] - mean[c]) * inv_std[c];
                                    g[i] += k * (gout[i] - sum_dy[c] / m - xhat * sum_dy_xhat[c] / m);
                                } else {
                                    g[i] += k * gout[i];
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let batch = s[0];
                let inner: usize = s[2..].iter().product();
                let total = s[1];
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    acc!(*p, |g| {
                        for n in 0..batch {
                            let src = &gout[(n * total + offset) * inner..(n * total + offset + c) * inner];
                            g[n * c * inner..(n + 1) * c * inner].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    });
                    offset += c;
                }
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (h, w) = (s[2], s[3]);
                acc!(*a, |g| {
                    for p in 0..s[0] * s[1] {
                        let src = &gout[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut g[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Bilinear { fm, taps, channels, plane } => {
                let s = node.value.shape();
                let (groups, n) = (s[0], s[2]);
                acc!(*fm, |g| {
                    for gi in 0..groups {
                        for c in 0..*channels {
                            let src = &gout[(gi * channels + c) * n..(gi * channels + c + 1) * n];
                            for (j, &go) in src.iter().enumerate() {
                                let (b, tap) = &taps[gi * n + j];
                                let base = (b * channels + c) * plane;
                                for k in 0..4 {
                                    g[base + tap.index[k]] += go * tap.weight[k];
                                }
                            }
                        }
                    }
                });
            }
            Op::RingConv { x, w, b, ksize } => {
                let xs = self.shape(*x);
                let (batch, ci, n) = (xs[0], xs[1], xs[2]);
                let co = self.shape(*w)[0];
                let rows = ci * ksize;
                let xd = self.data(*x);
                let wd = self.data(*w);
                if let Some(bv) = b {
                    acc!(*bv, |g| {
                        for bi in 0..batch {
                            for c in 0..co {
                                let start = (bi * co + c) * n;
                                g[c] += gout[start..start + n].iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                let mut cols = vec![T::zero(); if *ksize == 1 { 0 } else { rows * n }];
                acc!(*w, |g| {
                    for bi in 0..batch {
                        let xin = &xd[bi * ci * n..(bi + 1) * ci * n];
                        let colv: &[T] = if *ksize == 1 {
                            xin
                        } else {
                            kernels::ring_im2col(xin, ci, n, *ksize, &mut cols);
                            &cols
                        };
                        T::gemm(co, n, rows, &gout[bi * co * n..(bi + 1) * co * n], false, colv, true, g, true);
                    }
                });
                acc!(*x, |g| {
                    for bi in 0..batch {
                        let gy = &gout[bi * co * n..(bi + 1) * co * n];
                        let gx = &mut g[bi * ci * n..(bi + 1) * ci * n];
                        if *ksize == 1 {
                            T::gemm(rows, co, n, wd, true, gy, false, gx, true);
                        } else {
                            T::gemm(rows, co, n, wd, true, gy, false, &mut cols, false);
                            kernels::ring_col2im(&cols, ci, n, *ksize, gx);
                        }
                    }
                });
            }
            Op::VertexMax { x, argmax } => {
                let n = self.shape(*x)[2];
                acc!(*x, |g| {
                    for (row, &am) in argmax.iter().enumerate() {
                        g[row * n + am] += gout[row];
                    }
                });
            }
            Op::BroadcastLast { x, n } => {
                acc!(*x, |g| {
                    for (row, d) in g.iter_mut().enumerate() {
                        *d += gout[row * n..(row + 1) * n].iter().copied().sum::<T>();
                    }
                });
            }
            Op::Focal { pred, target, norm, alpha, beta } => {
                let pd = self.data(*pred);
                let k = -gout[0] / *norm;
                let one = T::one();
                acc!(*pred, |g| {
                    for i in 0..g.len() {
                        let (p, y) = (pd[i], target[i]);
                        let d = if y == one {
                            -*alpha * (one - p).powf(*alpha - one) * p.ln() + (one - p).powf(*alpha) / p
                        } else {
                            (one - y).powf(*beta)
                                * (*alpha * p.powf(*alpha - one) * (one - p).ln() - p.powf(*alpha) / (one - p))
                        };
                        g[i] += k * d;
                    }
                });
            }
            Op::MaskedL1 { pred, index, target, norm } => {
                let pd = self.data(*pred);
                let k = gout[0] / *norm;
                acc!(*pred, |g| {
                    for (&i, &y) in index.iter().zip(target) {
                        g[i] += k * sign(pd[i] - y);
                    }
                });
            }
            Op::L1 { pred, target, norm } => {
                let pd = self.data(*pred);
                let k = gout[0] / *norm;
                acc!(*pred, |g| {
                    for i in 0..g.len() {
                        g[i] += k * sign(pd[i] - target[i]);
                    }
                });
            }
        }
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid_bounds<T: Real>() -> (T, T) {
    (T::of(1e-4), T::of(1.0 - 1e-4))
}
