//! How a single embedding of mixed speech relates to its two talkers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{by_speaker, cosine_score};
use crate::error::{ensure, Error, Result};
use crate::frontend::FbankExtractor;
use crate::nsnet::{embed_enrollment, ModelConfig};
use crate::substrate::{ParamStore, Real};
use crate::synthcorpus::{derive_seed, make_mixing, SyntheticCorpus, Utterance};

/// Utterance-level embeddings from the frozen extractor.
pub struct Embedder<'a, T> {
    pub frontend: &'a FbankExtractor,
    pub extractor: &'a ParamStore<T>,
    pub model: &'a ModelConfig,
}

impl<T: Real> Embedder<'_, T> {
    pub fn embed(&self, samples: &[f32]) -> Result<Vec<f64>> {
        let fb = self.frontend.extract(samples)?;
        let e = embed_enrollment(&fb, self.extractor, self.model)?;
        Ok(e.vector.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
    }

    /// Mean of unit embeddings over at least ten utterances.
    pub fn centroid(&self, utts: &[&Utterance]) -> Result<Vec<f64>> {
        ensure!(
            utts.len() >= 10,
            InvalidArgument,
            "centroid needs at least 10 utterances, got {}",
            utts.len()
        );
        let mut acc = vec![0.0; self.model.embed_dim];
        for u in utts {
            for (a, v) in acc.iter_mut().zip(self.embed(&u.samples)?) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= utts.len() as f64);
        Ok(acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub snr_db: f64,
    pub cos_a: f64,
    pub cos_b: f64,
}

/// Mixes `a` (target) with `b` at each SNR and compares the embedding of
/// the mixture with both speakers' centroids.
pub fn unidentifiability_probe<T: Real>(
    a: &Utterance,
    b: &Utterance,
    centroid_a: &[f64],
    centroid_b: &[f64],
    snr_grid: &[f64],
    embedder: &Embedder<'_, T>,
) -> Result<Vec<ProbeRow>> {
    snr_grid
        .iter()
        .map(|&snr| {
            let mix = make_mixing(a, b, snr)?;
            let e = embedder.embed(&mix.samples)?;
            Ok(ProbeRow {
                snr_db: snr,
                cos_a: cosine_score(&e, centroid_a)?,
                cos_b: cosine_score(&e, centroid_b)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub snr_grid: Vec<f64>,
    /// Ordered (target, interferer) speaker pairs to average over.
    pub pairs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            snr_grid: vec![-20.0, -10.0, -3.0, 0.0, 3.0, 10.0, 20.0],
            pairs: 50,
        }
    }
}

/// Probe results over many speaker pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// One table per pair, rows in grid order.
    pub per_pair: Vec<Vec<ProbeRow>>,
    /// Mean cosine of a clean probe utterance to its own speaker's
    /// centroid.
    pub clean_same_speaker: f64,
}

impl ProbeReport {
    /// Pair-averaged table.
    pub fn mean_table(&self) -> Vec<ProbeRow> {
        let n = self.per_pair.len() as f64;
        let Some(first) = self.per_pair.first() else {
            return Vec::new();
        };
        (0..first.len())
            .map(|i| ProbeRow {
                snr_db: first[i].snr_db,
                cos_a: self.per_pair.iter().map(|t| t[i].cos_a).sum::<f64>() / n,
                cos_b: self.per_pair.iter().map(|t| t[i].cos_b).sum::<f64>() / n,
            })
            .collect()
    }

    /// Fraction of pairs whose row at `snr` has `cos_a > cos_b`.
    pub fn target_dominance(&self, snr: f64) -> Option<f64> {
        let i = self.per_pair.first()?.iter().position(|r| r.snr_db == snr)?;
        let wins = self.per_pair.iter().filter(|t| t[i].cos_a > t[i].cos_b).count();
        Some(wins as f64 / self.per_pair.len() as f64)
    }

    /// Mean over pairs of `max(cos_a, cos_b)` at `snr`.
    pub fn mean_max_cosine(&self, snr: f64) -> Option<f64> {
        let i = self.per_pair.first()?.iter().position(|r| r.snr_db == snr)?;
        let n = self.per_pair.len() as f64;
        Some(self.per_pair.iter().map(|t| t[i].cos_a.max(t[i].cos_b)).sum::<f64>() / n)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("snr_db,cos_A,cos_B\n");
        for r in self.mean_table() {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.snr_db, r.cos_a, r.cos_b));
        }
        out
    }
}

/// Runs the probe over seeded pairs of held-out speakers. Centroids come
/// from the held-out source utterances; probe utterances come from the
/// enrollment set, so they never contribute to a centroid.
pub fn run_probe<T: Real>(
    corpus: &SyntheticCorpus,
    embedder: &Embedder<'_, T>,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    ensure!(!cfg.snr_grid.is_empty(), Config, "probe SNR grid is empty");
    ensure!(cfg.pairs >= 1, Config, "probe needs at least one pair");
    let sources = by_speaker(&corpus.sources);
    let probes = by_speaker(&corpus.enroll);
    let speakers: Vec<u32> = sources.keys().copied().filter(|s| probes.contains_key(s)).collect();
    ensure!(speakers.len() >= 2, Data, "probe needs two held-out speakers");
    let mut centroids = std::collections::BTreeMap::new();
    for &s in &speakers {
        centroids.insert(s, embedder.centroid(&sources[&s])?);
    }
    let mut pairs: Vec<(u32, u32)> = speakers
        .iter()
        .flat_map(|&a| speakers.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe", 0));
    pairs.shuffle(&mut rng);
    // More requested pairs than exist: cycle with fresh utterance draws.
    let chosen: Vec<(u32, u32)> = pairs.iter().copied().cycle().take(cfg.pairs).collect();

    let mut per_pair = Vec::with_capacity(chosen.len());
    let mut clean = 0.0;
    for (a, b) in chosen {
        let ua = probes[&a][rng.random_range(0..probes[&a].len())];
        let ub = probes[&b][rng.random_range(0..probes[&b].len())];
        let (ca, cb) = (&centroids[&a], &centroids[&b]);
        clean +=
            0.5 * (cosine_score(&embedder.embed(&ua.samples)?, ca)? + cosine_score(&embedder.embed(&ub.samples)?, cb)?);
        per_pair.push(unidentifiability_probe(ua, ub, ca, cb, &cfg.snr_grid, embedder)?);
    }
    if per_pair.is_empty() {
        return Err(Error::Data("probe produced no pairs".into()));
    }
    let n = per_pair.len() as f64;
    Ok(ProbeReport {
        per_pair,
        clean_same_speaker: clean / n,
    })
}
