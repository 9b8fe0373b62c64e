use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cosine_lr;
use crate::error::{ensure, Error, Result};
use crate::frontend::FbankMatrix;
use crate::nsnet::{extractor_embedding, fbank_tensor, init_extractor, ModelConfig};
use crate::substrate::{adam_step, lit, Adam, AdamState, Gradients, Graph, Linear, ParamStore, Real};
use crate::synthcorpus::derive_seed;

const CLASSIFIER: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Random training crop length in frames; shorter utterances are used
    /// whole.
    pub crop_frames: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            crop_frames: 200,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.epochs >= 1 && self.batch_size >= 1,
            Config,
            "pretrain epochs and batch_size must be positive"
        );
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Config,
            "pretrain lr must be positive"
        );
        ensure!(self.crop_frames >= 8, Config, "crop_frames must be at least 8");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's crops.
    pub loss: f64,
    /// Accuracy on the epoch's crops.
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    /// Frozen extractor parameters.
    pub extractor: ParamStore<T>,
    pub classifier: ParamStore<T>,
    /// Mean cross-entropy of the initial network on whole utterances.
    pub initial_loss: f64,
    pub log: Vec<PretrainEpoch>,
    /// Accuracy of the final network on whole training utterances.
    pub train_accuracy: f64,
}

fn crop(fb: &FbankMatrix, len: usize, rng: &mut impl Rng) -> FbankMatrix {
    if fb.frames <= len {
        return fb.clone();
    }
    let start = rng.random_range(0..=fb.frames - len);
    let values = fb.values[start * fb.bins..(start + len) * fb.bins].to_vec();
    FbankMatrix::new(len, fb.bins, values).expect("crop keeps the bin count")
}

fn argmax<T: Real>(v: &[T]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, T::neg_infinity()),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

/// Cross-entropy and correctness of one utterance; with `grads` the
/// gradient of `loss * scale` is added in.
fn example<T: Real>(
    store: &ParamStore<T>,
    fb: &FbankMatrix,
    label: usize,
    model: &ModelConfig,
    grad: Option<(&mut Gradients<T>, f64)>,
) -> Result<(f64, bool)> {
    let mut g = Graph::new(store);
    let x = g.constant(fbank_tensor(fb));
    let e = extractor_embedding(&mut g, x, model)?;
    let logits = Linear::from_store(store, CLASSIFIER)?.forward(&mut g, e)?;
    let correct = argmax(g.value(logits).data()) == label;
    let loss = g.softmax_cross_entropy(logits, &[label])?;
    let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    if let Some((acc, scale)) = grad {
        let scaled = g.scale(loss, lit(scale));
        acc.accumulate(g.backward(scaled)?.params());
    }
    Ok((value, correct))
}

fn whole_set<T: Real>(
    store: &ParamStore<T>,
    fbanks: &[FbankMatrix],
    labels: &[usize],
    model: &ModelConfig,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (fb, &y) in fbanks.iter().zip(labels) {
        let (l, ok) = example(store, fb, y, model, None)?;
        loss += l;
        hits += usize::from(ok);
    }
    let n = fbanks.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Trains the extractor as a speaker classifier with softmax
/// cross-entropy over `n_speakers` classes; the pre-classifier layer is the
/// embedding. Returns the extractor frozen.
pub fn pretrain_embedder<T: Real>(
    fbanks: &[FbankMatrix],
    labels: &[usize],
    n_speakers: usize,
    model: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome<T>> {
    cfg.validate()?;
    ensure!(
        !fbanks.is_empty() && fbanks.len() == labels.len(),
        InvalidArgument,
        "need one label per utterance"
    );
    ensure!(n_speakers >= 2, InvalidArgument, "need at least two speakers");
    ensure!(
        labels.iter().all(|&y| y < n_speakers),
        InvalidArgument,
        "label out of range"
    );
    let mut counts = vec![0usize; n_speakers];
    labels.iter().for_each(|&y| counts[y] += 1);
    ensure!(
        counts.iter().all(|&c| c >= 10),
        Data,
        "pretraining needs at least 10 utterances per speaker"
    );
    let n_mels = fbanks[0].bins;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain", 0));
    let mut store: ParamStore<T> = init_extractor(model, n_mels, &mut rng)?;
    Linear::new(&mut store, CLASSIFIER, model.embed_dim, n_speakers, 1.0, &mut rng)?;
    let (initial_loss, _) = whole_set(&store, fbanks, labels, model)?;

    let mut adam = AdamState::new(&store);
    let steps_per_epoch = fbanks.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..fbanks.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Gradients::empty(store.len());
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let fb = crop(&fbanks[i], cfg.crop_frames, &mut rng);
                let (l, ok) = example(&store, &fb, labels[i], model, Some((&mut grads, scale)))?;
                loss_sum += l;
                hits += usize::from(ok);
            }
            if !(loss_sum.is_finite() && grads.all_finite()) {
                return Err(Error::Numerical(format!(
                    "pretraining diverged in epoch {epoch} (seed {seed})"
                )));
            }
            let step = (epoch - 1) * steps_per_epoch + b;
            adam_step(
                &mut store,
                &grads,
                &mut adam,
                cosine_lr(cfg.lr, step, total),
                Adam::default(),
            )?;
        }
        let n = fbanks.len() as f64;
        log.push(PretrainEpoch {
            epoch,
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
        });
    }
    let (_, train_accuracy) = whole_set(&store, fbanks, labels, model)?;

    let mut extractor = ParamStore::new();
    let mut classifier = ParamStore::new();
    for p in store.iter().map(|(_, p)| p) {
        let dst = if p.name.starts_with(CLASSIFIER) {
            &mut classifier
        } else {
            &mut extractor
        };
        dst.insert(p.name.clone(), p.tensor.clone())?;
    }
    extractor.set_frozen(true);
    classifier.set_frozen(true);
    Ok(PretrainOutcome {
        extractor,
        classifier,
        initial_loss,
        log,
        train_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(speakers: usize, per: usize, bins: usize) -> (Vec<FbankMatrix>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut fbs = Vec::new();
        let mut labels = Vec::new();
        for s in 0..speakers {
            for _ in 0..per {
                let frames = 24;
                let values = (0..frames * bins)
                    .map(|k| {
                        let band = k % bins;
                        let on = if band * speakers / bins == s { 1.0 } else { -0.3 };
                        on + rng.random_range(-0.2..0.2)
                    })
                    .collect();
                fbs.push(FbankMatrix::new(frames, bins, values).unwrap());
                labels.push(s);
            }
        }
        (fbs, labels)
    }

    #[test]
    fn separable_toy_problem_is_learned_and_frozen() {
        let model = ModelConfig {
            embed_dim: 8,
            frame_dim: 8,
            conv_channels: vec![2],
            ..ModelConfig::default()
        };
        let (fbs, labels) = blobs(3, 10, 8);
        let cfg = PretrainConfig {
            epochs: 8,
            batch_size: 6,
            lr: 1e-2,
            crop_frames: 16,
        };
        let out = pretrain_embedder::<f64>(&fbs, &labels, 3, &model, &cfg, 5).unwrap();
        assert!(out.log[0].loss < out.initial_loss);
        assert!(out.train_accuracy >= 0.9, "{}", out.train_accuracy);
        assert!(out.extractor.iter().all(|(_, p)| p.frozen));
        assert!(out.extractor.by_name("classifier.weight").is_none());
        let again = pretrain_embedder::<f64>(&fbs, &labels, 3, &model, &cfg, 5).unwrap();
        assert_eq!(again.log, out.log);
    }

    #[test]
    fn too_few_utterances_is_rejected() {
        let (fbs, labels) = blobs(2, 5, 8);
        let r = pretrain_embedder::<f64>(&fbs, &labels, 2, &ModelConfig::default(), &PretrainConfig::default(), 0);
        assert!(r.is_err());
    }
}
