//! Transformer building blocks composed from graph primitives.

use std::ops::Range;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::{lit, Real, Tensor};
use crate::error::{ensure, Result};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.insert_uniform(format!("{name}.weight"), vec![fan_in, fan_out], fan_in, gain, rng)?,
            bias: store.insert_zeros(format!("{name}.bias"), vec![fan_out])?,
        })
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.id(&format!("{name}.weight"))?,
            bias: store.id(&format!("{name}.bias"))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        linear(g, x, w, b)
    }

    pub fn out_dim<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.tensor(self.weight).shape()[1]
    }
}

/// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear<T: Real>(g: &mut Graph<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// Position-wise `linear → ReLU → linear`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(
            hidden >= 1,
            InvalidArgument,
            "feed-forward hidden size must be positive"
        );
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, 2f64.sqrt(), rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, 1.0, rng)?,
        })
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            inner: Linear::from_store(store, &format!("{name}.inner"))?,
            outer: Linear::from_store(store, &format!("{name}.outer"))?,
        })
    }
}

pub fn ffn<T: Real>(g: &mut Graph<'_, T>, x: Var, ff: &FeedForward) -> Result<Var> {
    let h = ff.inner.forward(g, x)?;
    let h = g.relu(h);
    ff.outer.forward(g, h)
}

/// Query, key, value and output projections of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct MhaWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MhaWeights {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, 1.0, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, 1.0, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, 1.0, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, 1.0, rng)?,
        })
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            query: Linear::from_store(store, &format!("{name}.query"))?,
            key: Linear::from_store(store, &format!("{name}.key"))?,
            value: Linear::from_store(store, &format!("{name}.value"))?,
            output: Linear::from_store(store, &format!("{name}.output"))?,
        })
    }
}

/// Output of [`masked_mha`].
pub struct MhaOutput {
    /// `[queries.len(), D]` attended representation.
    pub out: Var,
    /// Per-head `[queries.len(), S]` attention weights.
    pub weights: Vec<Var>,
}

/// Scaled dot-product multi-head self-attention over `x: [S, D]`.
///
/// `allow` is a row-major `S × S` matrix; `allow[i*S + j]` lets query `i`
/// read key `j`. Disallowed logits receive [`Real::mask_bias`] before the
/// softmax, so their weights underflow to exactly zero. Only the query rows
/// in `queries` are computed; keys and values always span all `S` rows.
pub fn masked_mha<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    allow: &[bool],
    heads: usize,
    queries: Range<usize>,
    w: &MhaWeights,
) -> Result<MhaOutput> {
    let shape = g.shape(x).to_vec();
    ensure!(shape.len() == 2, Shape, "masked_mha: expected [S, D], got {shape:?}");
    let (s, d) = (shape[0], shape[1]);
    ensure!(
        heads >= 1 && d % heads == 0,
        InvalidArgument,
        "model width {d} not divisible by {heads} heads"
    );
    ensure!(
        allow.len() == s * s,
        Shape,
        "mask holds {} entries for sequence length {s}",
        allow.len()
    );
    ensure!(
        queries.end <= s && !queries.is_empty(),
        Shape,
        "query rows {queries:?} outside 0..{s}"
    );
    for i in queries.clone() {
        ensure!(
            allow[i * s..(i + 1) * s].iter().any(|&a| a),
            InvalidArgument,
            "attention row {i} has no allowed key"
        );
    }
    let nq = queries.len();
    let xq = if nq == s {
        x
    } else {
        g.slice_rows(x, queries.start, nq)?
    };
    let q = w.query.forward(g, xq)?;
    let k = w.key.forward(g, x)?;
    let v = w.value.forward(g, x)?;

    let mut bias = Tensor::<T>::zeros(vec![nq, s]);
    for (r, i) in queries.clone().enumerate() {
        for j in 0..s {
            if !allow[i * s + j] {
                bias.data_mut()[r * s + j] = T::mask_bias();
            }
        }
    }
    let bias = g.constant(bias);

    let dh = d / heads;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut head_out = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = g.matmul_bt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let logits = g.add(logits, bias)?;
        let p = g.softmax_rows(logits)?;
        head_out.push(g.matmul(p, vh)?);
        weights.push(p);
    }
    let cat = if heads == 1 {
        head_out[0]
    } else {
        g.concat_cols(&head_out)?
    };
    let out = w.output.forward(g, cat)?;
    Ok(MhaOutput { out, weights })
}

/// Sinusoidal position table: `PE(p, 2i) = sin(p / 10000^(2i/D))`,
/// `PE(p, 2i+1) = cos(p / 10000^(2i/D))`.
pub fn sinusoidal_pe<T: Real>(positions: &[usize], dim: usize) -> Result<Tensor<T>> {
    ensure!(
        dim.is_multiple_of(2) && dim > 0,
        InvalidArgument,
        "positional encoding width {dim} must be even"
    );
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(lit(angle.sin()));
            data.push(lit(angle.cos()));
        }
    }
    Tensor::new(vec![positions.len(), dim], data)
}
