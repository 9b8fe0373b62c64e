use rand::Rng;

use super::{ModelConfig, CONV};
use crate::error::{ensure, Error, Result};
use crate::frontend::FbankMatrix;
use crate::substrate::{lit, Graph, Linear, ParamStore, Real, Tensor, Var};
use crate::synthcorpus::SpeakerId;

/// Unit-norm enrollment embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EnrollEmbedding<T> {
    pub vector: Vec<T>,
    /// Ground truth, carried as metadata only.
    pub speaker_id: Option<SpeakerId>,
}

/// `[T, F, 1]` tensor of an Fbank matrix.
pub fn fbank_tensor<T: Real>(fb: &FbankMatrix) -> Tensor<T> {
    let data = fb.values.iter().map(|&v| lit(v)).collect();
    Tensor::new(vec![fb.frames, fb.bins, 1], data).expect("fbank dims match its values")
}

pub(crate) fn insert_trunk<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let mut cin = 1;
    for (k, &cout) in cfg.conv_channels.iter().enumerate() {
        let name = format!("{prefix}.conv{}", k + 1);
        let (kh, kw) = CONV.kernel;
        let fan_in = kh * kw * cin;
        store.insert_uniform(
            format!("{name}.weight"),
            vec![cout, kh, kw, cin],
            fan_in,
            2f64.sqrt(),
            rng,
        )?;
        store.insert_zeros(format!("{name}.bias"), vec![cout])?;
        cin = cout;
    }
    Ok(())
}

/// Random extractor parameters: trunk, frame layer and embedding layer.
pub fn init_extractor<T: Real, R: Rng>(cfg: &ModelConfig, n_mels: usize, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    insert_trunk(&mut store, "trunk", cfg, rng)?;
    Linear::new(
        &mut store,
        "frame",
        cfg.flat_dim(n_mels),
        cfg.frame_dim,
        2f64.sqrt(),
        rng,
    )?;
    Linear::new(&mut store, "embed", 2 * cfg.frame_dim, cfg.embed_dim, 1.0, rng)?;
    Ok(store)
}

/// Strided convolutions with ReLU over `x: [T, F, 1]`, flattened to
/// `[T', F'·C]`.
pub fn trunk_forward<T: Real>(g: &mut Graph<'_, T>, x: Var, prefix: &str, convs: usize) -> Result<Var> {
    let mut h = x;
    for k in 1..=convs {
        let w = g.param(g.store().id(&format!("{prefix}.conv{k}.weight"))?);
        let b = g.param(g.store().id(&format!("{prefix}.conv{k}.bias"))?);
        let c = g.conv2d(h, w, b, CONV)?;
        h = g.relu(c);
    }
    let s = g.shape(h).to_vec();
    g.reshape(h, vec![s[0], s[1] * s[2]])
}

/// Raw `[1, E]` embedding, the pre-classifier layer.
pub fn extractor_embedding<T: Real>(g: &mut Graph<'_, T>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let store = g.store();
    let h = trunk_forward(g, x, "trunk", cfg.conv_channels.len())?;
    let f = Linear::from_store(store, "frame")?.forward(g, h)?;
    let f = g.relu(f);
    let pooled = g.stats_pool(f)?;
    Linear::from_store(store, "embed")?.forward(g, pooled)
}

/// Extracts and L2-normalizes the embedding of one utterance. The
/// extractor must be frozen, which marks it as trained.
pub fn embed_enrollment<T: Real>(
    fb: &FbankMatrix,
    extractor: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<EnrollEmbedding<T>> {
    ensure!(
        !extractor.is_empty() && extractor.iter().all(|(_, p)| p.frozen),
        InvalidArgument,
        "extractor is not frozen; pretrain it first"
    );
    ensure!(
        cfg.encoded_frames(fb.frames) >= 1 && fb.frames >= 1,
        InvalidArgument,
        "utterance too short to embed"
    );
    let mut g = Graph::new(extractor);
    let x = g.constant(fbank_tensor(fb));
    let e = extractor_embedding(&mut g, x, cfg)?;
    let mut vector = g.value(e).data().to_vec();
    let norm = vector.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(norm > T::zero() && norm.is_finite()) {
        return Err(Error::Numerical("embedding has zero or non-finite norm".into()));
    }
    vector.iter_mut().for_each(|v| *v /= norm);
    Ok(EnrollEmbedding {
        vector,
        speaker_id: None,
    })
}
