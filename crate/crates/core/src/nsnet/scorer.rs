use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use super::extractor::{fbank_tensor, insert_trunk, trunk_forward};
use super::mask::AttentionMask;
use super::{ModelConfig, NormPlacement};
use crate::error::{ensure, Error, Result};
use crate::frontend::FbankMatrix;
use crate::substrate::{
    ffn, masked_mha, sinusoidal_pe, FeedForward, Graph, Linear, MhaWeights, ParamStore, Real, Tensor, Var,
};
use crate::synthcorpus::TrialListEntry;

/// Encoded test frames `[T_pad, D]` of which the first `valid_len` are real.
#[derive(Clone, Copy, Debug)]
pub struct FrameFeatures {
    pub frames: Var,
    pub valid_len: usize,
}

impl FrameFeatures {
    /// Appends `extra` rows of `fill` as padding.
    pub fn padded<T: Real>(self, g: &mut Graph<'_, T>, extra: usize, fill: T) -> Result<Self> {
        if extra == 0 {
            return Ok(self);
        }
        let d = g.shape(self.frames)[1];
        let pad = g.constant(Tensor::filled(vec![extra, d], fill));
        Ok(Self {
            frames: g.concat_rows(&[self.frames, pad])?,
            valid_len: self.valid_len,
        })
    }
}

/// Scores `r` and labels `y`, both row-major `N × M`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<T> {
    pub n: usize,
    pub m: usize,
    pub r: Vec<T>,
    pub y: Vec<T>,
}

/// Random scoring-network parameters. Unless the encoder is shared, its
/// convolutions start as a copy of the extractor trunk.
pub fn init_scorer<T: Real, R: Rng>(
    cfg: &ModelConfig,
    extractor: &ParamStore<T>,
    n_mels: usize,
    rng: &mut R,
) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let mut s = ParamStore::new();
    if !cfg.shared_encoder {
        insert_trunk(&mut s, "encoder", cfg, rng)?;
        for k in 1..=cfg.conv_channels.len() {
            for part in ["weight", "bias"] {
                let src = extractor
                    .by_name(&format!("trunk.conv{k}.{part}"))
                    .ok_or_else(|| Error::Data(format!("extractor lacks trunk.conv{k}.{part}")))?;
                let dst = s.id(&format!("encoder.conv{k}.{part}"))?;
                ensure!(
                    s.tensor(dst).shape() == src.tensor.shape(),
                    Shape,
                    "extractor trunk does not match the model config"
                );
                s.get_mut(dst).tensor = src.tensor.clone();
            }
        }
    }
    Linear::new(&mut s, "frame_proj", cfg.flat_dim(n_mels), d, 1.0, rng)?;
    Linear::new(&mut s, "enroll_proj", cfg.embed_dim, d, 1.0, rng)?;
    s.insert_uniform("type_embedding", vec![2, d], d, 1.0, rng)?;
    for l in 0..cfg.layers {
        MhaWeights::new(&mut s, &format!("layers.{l}.attn"), d, rng)?;
        insert_norm(&mut s, &format!("layers.{l}.norm1"), d)?;
        FeedForward::new(&mut s, &format!("layers.{l}.ff"), d, cfg.ff_dim, rng)?;
        insert_norm(&mut s, &format!("layers.{l}.norm2"), d)?;
    }
    if cfg.norm == NormPlacement::Pre {
        insert_norm(&mut s, "final_norm", d)?;
    }
    Linear::new(&mut s, "head.0", d, d, 2f64.sqrt(), rng)?;
    Linear::new(&mut s, "head.1", d, d / 2, 2f64.sqrt(), rng)?;
    Linear::new(&mut s, "head.2", d / 2, 1, 1.0, rng)?;
    Ok(s)
}

fn insert_norm<T: Real>(s: &mut ParamStore<T>, name: &str, d: usize) -> Result<()> {
    s.insert_filled(format!("{name}.gamma"), vec![d], 1.0)?;
    s.insert_zeros(format!("{name}.beta"), vec![d])?;
    Ok(())
}

fn norm<T: Real>(g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
    let store = g.store();
    let gamma = g.param(store.id(&format!("{name}.gamma"))?);
    let beta = g.param(store.id(&format!("{name}.beta"))?);
    g.layer_norm(x, gamma, beta)
}

/// Test frames through the encoder, flattened over `(F, C)` and projected
/// to width D. With a shared encoder the convolutions are the frozen
/// extractor trunk, evaluated outside the graph.
pub fn encode_test_frames<T: Real>(
    g: &mut Graph<'_, T>,
    fb: &FbankMatrix,
    extractor: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<FrameFeatures> {
    ensure!(fb.frames >= 1, InvalidArgument, "test utterance has no frames");
    let flat = if cfg.shared_encoder {
        let mut eg = Graph::new(extractor);
        let x = eg.constant(fbank_tensor(fb));
        let h = trunk_forward(&mut eg, x, "trunk", cfg.conv_channels.len())?;
        g.constant(eg.value(h).clone())
    } else {
        let x = g.constant(fbank_tensor(fb));
        trunk_forward(g, x, "encoder", cfg.conv_channels.len())?
    };
    let frames = Linear::from_store(g.store(), "frame_proj")?.forward(g, flat)?;
    let valid_len = g.shape(frames)[0];
    Ok(FrameFeatures { frames, valid_len })
}

/// Additive position and type terms for `M` enrollments and `T` frames.
///
/// Every enrollment sits at sinusoidal position 0 with type 0; frame `t`
/// sits at position `t + 1` with type 1. `sinusoid = false` keeps only the
/// type term.
pub fn positional_encoding<T: Real>(
    g: &mut Graph<'_, T>,
    m: usize,
    t: usize,
    d: usize,
    type_embedding: Var,
    sinusoid: bool,
) -> Result<Var> {
    ensure!(
        g.shape(type_embedding) == [2, d],
        Shape,
        "type embedding must be [2, {d}], got {:?}",
        g.shape(type_embedding)
    );
    let s = m + t;
    let mut onehot = Tensor::<T>::zeros(vec![s, 2]);
    for i in 0..s {
        onehot.data_mut()[2 * i + usize::from(i >= m)] = T::one();
    }
    let onehot = g.constant(onehot);
    let types = g.matmul(onehot, type_embedding)?;
    if !sinusoid {
        return Ok(types);
    }
    let positions: Vec<usize> = (0..s).map(|i| if i < m { 0 } else { i - m + 1 }).collect();
    let pe = g.constant(sinusoidal_pe(&positions, d)?);
    g.add(types, pe)
}

/// `M` posteriors `[M, 1]` for enrollments `[M, E]` against `test`.
pub fn score_forward<T: Real>(
    g: &mut Graph<'_, T>,
    enrolls: Var,
    test: FrameFeatures,
    cfg: &ModelConfig,
) -> Result<Var> {
    let es = g.shape(enrolls).to_vec();
    ensure!(
        es.len() == 2 && es[1] == cfg.embed_dim,
        Shape,
        "enrollments must be [M, {}], got {es:?}",
        cfg.embed_dim
    );
    let m = es[0];
    ensure!(m >= 1, InvalidArgument, "score_forward needs at least one enrollment");
    let store = g.store();
    let t_pad = g.shape(test.frames)[0];
    let mask = AttentionMask::new(m, test.valid_len, t_pad, cfg.test_attends_enrollment)?;
    let s = m + t_pad;

    let e = Linear::from_store(store, "enroll_proj")?.forward(g, enrolls)?;
    let mut x = g.concat_rows(&[e, test.frames])?;
    let types = g.param(store.id("type_embedding")?);
    let pe = positional_encoding(g, m, t_pad, cfg.model_dim, types, cfg.positional_encoding)?;
    x = g.add(x, pe)?;

    for l in 0..cfg.layers {
        let rows = if l + 1 == cfg.layers { m } else { s };
        let attn = MhaWeights::from_store(store, &format!("layers.{l}.attn"))?;
        let ff = FeedForward::from_store(store, &format!("layers.{l}.ff"))?;
        let (n1, n2) = (format!("layers.{l}.norm1"), format!("layers.{l}.norm2"));
        let keep = |g: &mut Graph<'_, T>, v: Var| if rows == s { Ok(v) } else { g.slice_rows(v, 0, rows) };
        x = match cfg.norm {
            NormPlacement::Post => {
                let a = masked_mha(g, x, mask.as_slice(), cfg.heads, 0..rows, &attn)?.out;
                let xq = keep(g, x)?;
                let r = g.add(xq, a)?;
                let h = norm(g, r, &n1)?;
                let f = ffn(g, h, &ff)?;
                let r = g.add(h, f)?;
                norm(g, r, &n2)?
            }
            NormPlacement::Pre => {
                let xn = norm(g, x, &n1)?;
                let a = masked_mha(g, xn, mask.as_slice(), cfg.heads, 0..rows, &attn)?.out;
                let xq = keep(g, x)?;
                let h = g.add(xq, a)?;
                let hn = norm(g, h, &n2)?;
                let f = ffn(g, hn, &ff)?;
                g.add(h, f)?
            }
        };
    }
    if cfg.norm == NormPlacement::Pre {
        x = norm(g, x, "final_norm")?;
    }

    let mut z = x;
    for k in 0..3 {
        z = Linear::from_store(store, &format!("head.{k}"))?.forward(g, z)?;
        if k < 2 {
            z = g.relu(z);
        }
    }
    Ok(g.sigmoid(z))
}

/// Inference wrapper over a trained scorer and its frozen extractor.
#[derive(Clone, Copy)]
pub struct NsScorer<'a, T> {
    pub cfg: &'a ModelConfig,
    pub scorer: &'a ParamStore<T>,
    pub extractor: &'a ParamStore<T>,
}

impl<T: Real> NsScorer<'_, T> {
    /// One forward pass scoring every enrollment against `test`.
    pub fn score(&self, enrolls: &[&[T]], test: &FbankMatrix) -> Result<Vec<T>> {
        ensure!(!enrolls.is_empty(), InvalidArgument, "no enrollments to score");
        let e = self.cfg.embed_dim;
        let mut data = Vec::with_capacity(enrolls.len() * e);
        for v in enrolls {
            ensure!(v.len() == e, Shape, "enrollment of width {} for E = {e}", v.len());
            data.extend_from_slice(v);
        }
        let mut g = Graph::new(self.scorer);
        let en = g.constant(Tensor::new(vec![enrolls.len(), e], data)?);
        let frames = encode_test_frames(&mut g, test, self.extractor, self.cfg)?;
        let r = score_forward(&mut g, en, frames, self.cfg)?;
        Ok(g.value(r).data().to_vec())
    }
}

/// Scores a trial list with one forward pass per test utterance, all of
/// its enrollments entering as separate branches. Output is aligned with
/// `trials`.
pub fn score_trials<T: Real>(
    trials: &[TrialListEntry],
    enroll: &HashMap<String, Vec<T>>,
    tests: &HashMap<String, FbankMatrix>,
    scorer: &NsScorer<'_, T>,
) -> Result<Vec<f64>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in trials.iter().enumerate() {
        groups.entry(t.test_utterance_id.as_str()).or_default().push(i);
    }
    let mut out = vec![f64::NAN; trials.len()];
    for (test_id, idx) in groups {
        let fb = tests
            .get(test_id)
            .ok_or_else(|| Error::Data(format!("trial list names unknown test utterance {test_id}")))?;
        let vecs = idx
            .iter()
            .map(|&i| {
                let id = &trials[i].enroll_utterance_id;
                enroll
                    .get(id)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::Data(format!("trial list names unknown enrollment {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = scorer.score(&vecs, fb)?;
        for (&i, s) in idx.iter().zip(scores) {
            out[i] = s.to_f64().unwrap_or(f64::NAN);
        }
    }
    ensure!(out.iter().all(|s| s.is_finite()), Numerical, "non-finite score");
    Ok(out)
}

/// `enroll test score label` lines, scores to nine decimals.
pub fn write_score_file(path: &Path, trials: &[TrialListEntry], scores: &[f64]) -> Result<()> {
    ensure!(
        trials.len() == scores.len(),
        Shape,
        "{} trials but {} scores",
        trials.len(),
        scores.len()
    );
    let mut out = String::with_capacity(trials.len() * 48);
    for (t, s) in trials.iter().zip(scores) {
        let _ = writeln!(
            out,
            "{} {} {:.9} {}",
            t.enroll_utterance_id,
            t.test_utterance_id,
            s,
            t.label.as_str()
        );
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
