use std::collections::VecDeque;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{average_weights, build_batch, weighted_bce_term, TrainConfig, TrainMaterial};
use crate::error::{ensure, Error, Result};
use crate::evalkit::{eval_system, summarize, DcfParams, EvalData, System};
use crate::nsnet::{encode_test_frames, init_scorer, score_forward, ModelConfig};
use crate::substrate::{adam_step, Adam, AdamState, Gradients, Graph, ParamStore, Real, Tensor};
use crate::synthcorpus::derive_seed;

/// Half-cosine decay from `peak` at step 0 towards zero at `total`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean full-batch loss over the epoch.
    pub loss: f64,
    pub heldout_eer: Option<f64>,
    pub heldout_mindcf: Option<f64>,
    /// Seconds since training started; excluded from reproducibility
    /// comparisons.
    pub wallclock_s: f64,
    pub seed: u64,
}

impl EpochRecord {
    /// The record without its timing, for bitwise comparisons.
    pub fn untimed(&self) -> Self {
        Self {
            wallclock_s: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Mean of the last K epoch snapshots.
    pub averaged: ParamStore<T>,
    pub last: ParamStore<T>,
    pub log: Vec<EpochRecord>,
    /// Held-out EER and minDCF of the untrained scorer.
    pub initial_heldout: Option<(f64, f64)>,
    /// Held-out EER and minDCF of the averaged model.
    pub final_heldout: Option<(f64, f64)>,
}

fn heldout_metrics<T: Real>(
    data: &EvalData<T>,
    model: &ModelConfig,
    extractor: &ParamStore<T>,
    scorer: &ParamStore<T>,
) -> Result<(f64, f64)> {
    let scores = eval_system(System::Ns, data, model, extractor, Some(scorer))?;
    let rows = summarize(System::Ns, &scores, DcfParams::default())?;
    let overall = rows.last().expect("summarize emits an overall row");
    Ok((overall.eer, overall.min_dcf))
}

/// Loss of one batch and, unless `scorer` is frozen, its gradients.
pub(crate) fn batch_loss<T: Real>(
    scorer: &ParamStore<T>,
    extractor: &ParamStore<T>,
    batch: &super::TrialBatch<T>,
    model: &ModelConfig,
    lambda: f64,
) -> Result<(f64, Gradients<T>)> {
    let (n, m) = (batch.n(), batch.m());
    let mut grads = Gradients::empty(scorer.len());
    let mut loss = 0.0;
    for i in 0..n {
        let mut g = Graph::new(scorer);
        let data: Vec<T> = batch.enrollments(i).concat();
        let en = g.constant(Tensor::new(vec![m, model.embed_dim], data)?);
        let frames = encode_test_frames(&mut g, &batch.tests[i], extractor, model)?;
        let r = score_forward(&mut g, en, frames, model)?;
        let term = weighted_bce_term(&mut g, r, &batch.label_values(i), lambda, n * m)?;
        loss += g.value(term).data()[0].to_f64().unwrap_or(f64::NAN);
        grads.accumulate(g.backward(term)?.params());
    }
    Ok((loss, grads))
}

/// Trains the scoring network against a frozen extractor.
///
/// Batches depend only on `seed` and the step index, never on the model.
/// `observer` sees every epoch's record and parameters, which is where
/// callers write checkpoints and log lines.
pub fn train_ns<T: Real>(
    material: &TrainMaterial<T>,
    heldout: Option<&EvalData<T>>,
    model: &ModelConfig,
    extractor: &ParamStore<T>,
    cfg: &TrainConfig,
    seed: u64,
    mut observer: impl FnMut(&EpochRecord, &ParamStore<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model.validate()?;
    ensure!(
        !extractor.is_empty() && extractor.iter().all(|(_, p)| p.frozen),
        InvalidArgument,
        "scorer training needs a frozen, pretrained extractor"
    );
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scorer-init", 0));
    let n_mels = material.frontend.config().n_mels;
    let mut scorer = init_scorer(model, extractor, n_mels, &mut rng)?;
    let initial_heldout = heldout
        .map(|d| heldout_metrics(d, model, extractor, &scorer))
        .transpose()?;

    let mut adam = AdamState::new(&scorer);
    let total = cfg.epochs * cfg.batches_per_epoch;
    let mut snapshots: VecDeque<ParamStore<T>> = VecDeque::with_capacity(cfg.avg_last_k);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let step = (epoch - 1) * cfg.batches_per_epoch + b;
            let batch = build_batch(material, model, cfg, derive_seed(seed, "batch", step as u64))?;
            let (loss, grads) = batch_loss(&scorer, extractor, &batch, model, cfg.lambda)?;
            if !(loss.is_finite() && grads.all_finite()) {
                return Err(Error::Numerical(format!(
                    "training loss became non-finite at epoch {epoch}, batch {b} (seed {seed})"
                )));
            }
            epoch_loss += loss;
            adam_step(
                &mut scorer,
                &grads,
                &mut adam,
                cosine_lr(cfg.lr, step, total),
                Adam::default(),
            )?;
        }
        let metrics = heldout
            .map(|d| heldout_metrics(d, model, extractor, &scorer))
            .transpose()?;
        let record = EpochRecord {
            epoch,
            loss: epoch_loss / cfg.batches_per_epoch as f64,
            heldout_eer: metrics.map(|m| m.0),
            heldout_mindcf: metrics.map(|m| m.1),
            wallclock_s: started.elapsed().as_secs_f64(),
            seed,
        };
        observer(&record, &scorer)?;
        log.push(record);
        if snapshots.len() == cfg.avg_last_k {
            snapshots.pop_front();
        }
        snapshots.push_back(scorer.clone());
    }
    let averaged = average_weights(snapshots.make_contiguous())?;
    let final_heldout = heldout
        .map(|d| heldout_metrics(d, model, extractor, &averaged))
        .transpose()?;
    Ok(TrainOutcome {
        averaged,
        last: scorer,
        log,
        initial_heldout,
        final_heldout,
    })
}
