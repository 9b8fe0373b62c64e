use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::{lit, Real, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over `[height, width, channels]` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.pad.0;
        let wp = w + 2 * self.pad.1;
        if hp < self.kernel.0 || wp < self.kernel.1 || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some((
            (hp - self.kernel.0) / self.stride.0 + 1,
            (wp - self.kernel.1) / self.stride.1 + 1,
        ))
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    StatsPool {
        x: Var,
        std: Vec<T>,
    },
    Bce {
        r: Var,
        labels: Vec<T>,
        w_target: T,
        w_nontarget: T,
        norm: T,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Lower clamp of predicted probabilities entering a cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;
const LN_EPS: f64 = 1e-5;
const POOL_EPS: f64 = 1e-5;

/// Tape of one forward pass.
pub struct Graph<'p, T> {
    nodes: Vec<Node<T>>,
    params: &'p ParamStore<T>,
    bound: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`]: per-node gradients plus parameter
/// gradients gathered by id.
pub struct Backward<T> {
    node_grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Gradients<T>,
}

impl<T: Real> Backward<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.param(id)
    }

    pub fn params(&self) -> &Gradients<T> {
        &self.params
    }

    pub fn into_params(self) -> Gradients<T> {
        self.params
    }

    /// Gradient of the loss with respect to any node that required one.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.node_grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("consistent shape"))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not a parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.params.get(id);
        let v = self.push(p.tensor.clone(), Op::Leaf, !p.frozen);
        self.bound.insert(id, v);
        v
    }

    fn mat_dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        ensure!(s.len() == 2, Shape, "{op}: expected a matrix, got shape {s:?}");
        Ok((s[0], s[1]))
    }

    /// `[n,k] × [k,m] → [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat_dims(a, "matmul")?;
        let (k2, m) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    /// `[n,k] × [m,k]ᵀ → [n,m]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat_dims(a, "matmul_bt")?;
        let (m, k2) = self.mat_dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(shape_err("matmul_bt", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulBt(a, b), ng))
    }

    /// Adds a length-`m` bias to every row of an `[n,m]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.mat_dims(x, "add_bias")?;
        if self.value(b).len() != m {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bd = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bd) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::AddBias(x, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect()).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data()
                .iter()
                .map(|&e| if e > T::zero() { e } else { T::zero() })
                .collect(),
        )
        .expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| sigmoid(e)).collect()).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.mat_dims(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::SoftmaxRows(x), ng))
    }

    /// Per-row normalization to zero mean and unit variance followed by the
    /// affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.mat_dims(x, "layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        let dn = lit::<T>(d as f64);
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = (var + lit(LN_EPS)).sqrt().recip();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = gd[j] * h + bd[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.mat_dims(x, "slice_cols")?;
        ensure!(start + len <= m, Shape, "slice_cols: {start}+{len} exceeds {m} columns");
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xd[i * m + start..i * m + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "concat_cols: no inputs");
        let n = self.mat_dims(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pm) = self.mat_dims(p, "concat_cols")?;
            ensure!(pn == n, Shape, "concat_cols: row counts differ ({pn} vs {n})");
            widths.push(pm);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.mat_dims(x, "slice_rows")?;
        ensure!(start + len <= n, Shape, "slice_rows: {start}+{len} exceeds {n} rows");
        let out = self.value(x).data()[start * m..(start + len) * m].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![len, m], out)?, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "concat_rows: no inputs");
        let m = self.mat_dims(parts[0], "concat_rows")?.1;
        let mut n = 0;
        for &p in parts {
            let (pn, pm) = self.mat_dims(p, "concat_rows")?;
            ensure!(pm == m, Shape, "concat_rows: widths differ ({pm} vs {m})");
            n += pn;
        }
        let mut out = Vec::with_capacity(n * m);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Convolution of `x: [H, W, Cin]` with `w: [Cout, kh, kw, Cin]` and
    /// `b: [Cout]`, producing `[H', W', Cout]`. Out-of-range taps read zero.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        ensure!(xs.len() == 3 && ws.len() == 4, Shape, "conv2d: shapes {xs:?}, {ws:?}");
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw, wcin) = (ws[0], ws[1], ws[2], ws[3]);
        ensure!(
            wcin == cin && (kh, kw) == geom.kernel && self.value(b).len() == cout,
            Shape,
            "conv2d: input {xs:?} incompatible with kernel {ws:?}"
        );
        let (ho, wo) = geom
            .output_size(h, wd)
            .ok_or_else(|| Error::Shape(format!("conv2d: input {xs:?} smaller than kernel")))?;
        let xd = self.value(x).data();
        let wdta = self.value(w).data();
        let bd = self.value(b).data();
        let plen = kh * kw * cin;
        let mut patch = vec![T::zero(); plen];
        let mut out = vec![T::zero(); ho * wo * cout];
        for oh in 0..ho {
            for ow in 0..wo {
                gather_patch(xd, (h, wd, cin), geom, oh, ow, &mut patch);
                let o = &mut out[(oh * wo + ow) * cout..(oh * wo + ow + 1) * cout];
                for co in 0..cout {
                    o[co] = bd[co] + dot(&wdta[co * plen..(co + 1) * plen], &patch);
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(vec![ho, wo, cout], out)?, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Temporal statistics pooling: `[T, K] → [1, 2K]` holding the per-column
    /// mean followed by the per-column standard deviation.
    pub fn stats_pool(&mut self, x: Var) -> Result<Var> {
        let (t, k) = self.mat_dims(x, "stats_pool")?;
        ensure!(t >= 1, Shape, "stats_pool: empty sequence");
        let xd = self.value(x).data();
        let tn = lit::<T>(t as f64);
        let mut mean = vec![T::zero(); k];
        for row in xd.chunks(k) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= tn);
        let mut var = vec![T::zero(); k];
        for row in xd.chunks(k) {
            for j in 0..k {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let std: Vec<T> = var.iter().map(|&v| (v / tn + lit(POOL_EPS)).sqrt()).collect();
        let mut out = mean;
        out.extend_from_slice(&std);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![1, 2 * k], out)?, Op::StatsPool { x, std }, ng))
    }

    /// Weighted binary cross-entropy summed over all elements of `r` and
    /// divided by `norm`:
    /// `-(1/norm) Σ [w_t·y·ln r + w_n·(1-y)·ln(1-r)]`, with `r` clamped to
    /// `[1e-7, 1-1e-7]`.
    pub fn bce(&mut self, r: Var, labels: &[T], w_target: T, w_nontarget: T, norm: T) -> Result<Var> {
        ensure!(
            self.value(r).len() == labels.len(),
            Shape,
            "bce: {} scores but {} labels",
            self.value(r).len(),
            labels.len()
        );
        let mut acc = T::zero();
        for (&p, &y) in self.value(r).data().iter().zip(labels) {
            let pc = clamp_prob(p);
            acc += w_target * y * pc.ln() + w_nontarget * (T::one() - y) * (T::one() - pc).ln();
        }
        let loss = -acc / norm;
        let ng = self.ng(r);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                r,
                labels: labels.to_vec(),
                w_target,
                w_nontarget,
                norm,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `[n, C]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.mat_dims(logits, "softmax_cross_entropy")?;
        ensure!(
            targets.len() == n,
            Shape,
            "softmax_cross_entropy: {n} rows, {} targets",
            targets.len()
        );
        ensure!(
            targets.iter().all(|&t| t < c),
            InvalidArgument,
            "target class out of range"
        );
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            softmax_in_place(row);
            loss -= row[t].max(T::min_positive_value()).ln();
        }
        let loss = loss / lit(n as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Backward<T>> {
        ensure!(
            self.value(loss).len() == 1,
            Shape,
            "backward needs a scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params = Gradients::empty(self.params.len());
        for (&id, &v) in &self.bound {
            if let Some(g) = &grads[v.0] {
                params.grads[id.index()] = Some(Tensor::new(self.shape(v).to_vec(), g.clone())?);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Backward {
            node_grads: grads,
            shapes,
            params,
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (n, k) = dims2(self.shape(a));
                let m = self.shape(b)[1];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.ng(a) {
                    let da = self.grad_buf(a, grads);
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            da[r * k + p] += dot(gr, &bd[p * m..(p + 1) * m]);
                        }
                    }
                }
                if self.ng(b) {
                    let db = self.grad_buf(b, grads);
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            axpy(ad[r * k + p], gr, &mut db[p * m..(p + 1) * m]);
                        }
                    }
                }
            }
            &Op::MatMulBt(a, b) => {
                let (n, k) = dims2(self.shape(a));
                let m = self.shape(b)[0];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.ng(a) {
                    let da = self.grad_buf(a, grads);
                    for r in 0..n {
                        for j in 0..m {
                            axpy(g[r * m + j], &bd[j * k..(j + 1) * k], &mut da[r * k..(r + 1) * k]);
                        }
                    }
                }
                if self.ng(b) {
                    let db = self.grad_buf(b, grads);
                    for r in 0..n {
                        for j in 0..m {
                            axpy(g[r * m + j], &ad[r * k..(r + 1) * k], &mut db[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            &Op::AddBias(x, b) => {
                if self.ng(x) {
                    add_into(self.grad_buf(x, grads), g);
                }
                if self.ng(b) {
                    let db = self.grad_buf(b, grads);
                    let m = db.len();
                    for row in g.chunks(m) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.ng(a) {
                    add_into(self.grad_buf(a, grads), g);
                }
                if self.ng(b) {
                    add_into(self.grad_buf(b, grads), g);
                }
            }
            &Op::Scale(x, c) => {
                if self.ng(x) {
                    axpy(c, g, self.grad_buf(x, grads));
                }
            }
            &Op::Relu(x) => {
                let xd = self.value(x).data();
                let dx = self.grad_buf(x, grads);
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xd) {
                    if v > T::zero() {
                        *d += gv;
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = self.grad_buf(x, grads);
                for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * s * (T::one() - s);
                }
            }
            &Op::SoftmaxRows(x) => {
                let m = node.value.cols();
                let y = node.value.data();
                let dx = self.grad_buf(x, grads);
                for ((yr, gr), dr) in y.chunks(m).zip(g.chunks(m)).zip(dx.chunks_mut(m)) {
                    let s = dot(yr, gr);
                    for j in 0..m {
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                if self.ng(*gamma) {
                    let dg = self.grad_buf(*gamma, grads);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.ng(*beta) {
                    let db = self.grad_buf(*beta, grads);
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
                if self.ng(*x) {
                    let gm = self.value(*gamma).data();
                    let dn = lit::<T>(d as f64);
                    let dx = self.grad_buf(*x, grads);
                    let mut dh = vec![T::zero(); d];
                    for (r, ((gr, hr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gm[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dhh = dot(&dh, hr) / dn;
                        for j in 0..d {
                            dr[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let m = self.shape(x)[1];
                let len = node.value.cols();
                let dx = self.grad_buf(x, grads);
                for (r, gr) in g.chunks(len).enumerate() {
                    add_into(&mut dx[r * m + start..r * m + start + len], gr);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.ng(p) {
                        let dp = self.grad_buf(p, grads);
                        for (r, dr) in dp.chunks_mut(w).enumerate() {
                            add_into(dr, &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let m = node.value.cols();
                let dx = self.grad_buf(x, grads);
                add_into(&mut dx[start * m..start * m + g.len()], g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        add_into(self.grad_buf(p, grads), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            &Op::Reshape(x) => add_into(self.grad_buf(x, grads), g),
            &Op::Conv2d { x, w, b, geom } => {
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let (h, wd, cin) = (xs[0], xs[1], xs[2]);
                let cout = ws[0];
                let plen = ws[1] * ws[2] * cin;
                let (ho, wo) = (node.value.shape()[0], node.value.shape()[1]);
                let xd = self.value(x).data();
                let wdata = self.value(w).data();
                let mut patch = vec![T::zero(); plen];
                if self.ng(b) {
                    let db = self.grad_buf(b, grads);
                    for gr in g.chunks(cout) {
                        add_into(db, gr);
                    }
                }
                if self.ng(w) {
                    let dw = self.grad_buf(w, grads);
                    for oh in 0..ho {
                        for ow in 0..wo {
                            gather_patch(xd, (h, wd, cin), geom, oh, ow, &mut patch);
                            let gr = &g[(oh * wo + ow) * cout..(oh * wo + ow + 1) * cout];
                            for co in 0..cout {
                                axpy(gr[co], &patch, &mut dw[co * plen..(co + 1) * plen]);
                            }
                        }
                    }
                }
                if self.ng(x) {
                    let dx = self.grad_buf(x, grads);
                    for oh in 0..ho {
                        for ow in 0..wo {
                            patch.iter_mut().for_each(|p| *p = T::zero());
                            let gr = &g[(oh * wo + ow) * cout..(oh * wo + ow + 1) * cout];
                            for co in 0..cout {
                                axpy(gr[co], &wdata[co * plen..(co + 1) * plen], &mut patch);
                            }
                            scatter_patch(dx, (h, wd, cin), geom, oh, ow, &patch);
                        }
                    }
                }
            }
            Op::StatsPool { x, std } => {
                let (t, k) = dims2(self.shape(*x));
                let xd = self.value(*x).data();
                let mean = &node.value.data()[..k];
                let tn = lit::<T>(t as f64);
                let dx = self.grad_buf(*x, grads);
                for (xr, dr) in xd.chunks(k).zip(dx.chunks_mut(k)) {
                    for j in 0..k {
                        dr[j] += g[j] / tn + g[k + j] * (xr[j] - mean[j]) / (tn * std[j]);
                    }
                }
            }
            Op::Bce {
                r,
                labels,
                w_target,
                w_nontarget,
                norm,
            } => {
                let rd = self.value(*r).data();
                let scale = g[0] / *norm;
                let dr = self.grad_buf(*r, grads);
                for ((d, &p), &y) in dr.iter_mut().zip(rd).zip(labels) {
                    if p != clamp_prob(p) {
                        continue;
                    }
                    let dl = *w_target * y / p - *w_nontarget * (T::one() - y) / (T::one() - p);
                    *d -= scale * dl;
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / lit(targets.len() as f64);
                let dl = self.grad_buf(*logits, grads);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            &Op::Sum(x) => {
                let dx = self.grad_buf(x, grads);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<T>>]) -> &'g mut Vec<T> {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

fn dims2(s: &[usize]) -> (usize, usize) {
    (s[0], s[1])
}

#[inline]
fn clamp_prob<T: Real>(p: T) -> T {
    let lo = lit::<T>(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * m..(p + 1) * m], o);
            }
        }
    }
}

fn gather_patch<T: Real>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    patch: &mut [T],
) {
    let (kh, kw) = geom.kernel;
    for ki in 0..kh {
        let ih = (oh * geom.stride.0 + ki) as isize - geom.pad.0 as isize;
        for kj in 0..kw {
            let iw = (ow * geom.stride.1 + kj) as isize - geom.pad.1 as isize;
            let dst = &mut patch[(ki * kw + kj) * c..(ki * kw + kj + 1) * c];
            if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                let s = (ih as usize * w + iw as usize) * c;
                dst.copy_from_slice(&x[s..s + c]);
            } else {
                dst.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

fn scatter_patch<T: Real>(
    dx: &mut [T],
    (h, w, c): (usize, usize, usize),
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    patch: &[T],
) {
    let (kh, kw) = geom.kernel;
    for ki in 0..kh {
        let ih = (oh * geom.stride.0 + ki) as isize - geom.pad.0 as isize;
        for kj in 0..kw {
            let iw = (ow * geom.stride.1 + kj) as isize - geom.pad.1 as isize;
            if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                let s = (ih as usize * w + iw as usize) * c;
                add_into(&mut dx[s..s + c], &patch[(ki * kw + kj) * c..(ki * kw + kj + 1) * c]);
            }
        }
    }
}
