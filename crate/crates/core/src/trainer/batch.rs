use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::error::{ensure, Error, Result};
use crate::frontend::{FbankExtractor, FbankMatrix};
use crate::nsnet::{embed_enrollment, EnrollEmbedding, ModelConfig};
use crate::substrate::{ParamStore, Real};
use crate::synthcorpus::{
    corrupt, derive_seed, make_noise, Condition, CorpusConfig, NoiseKind, SpeakerId, SpeakerProfile, Utterance,
};

const MAX_ATTEMPTS: usize = 100;

/// Clean single-talker utterances grouped by speaker, by index into the
/// caller's utterance list.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPool {
    pub by_speaker: Vec<(SpeakerId, Vec<usize>)>,
}

impl TrainPool {
    pub fn from_utterances(utts: &[Utterance]) -> Result<Self> {
        let mut map: std::collections::BTreeMap<SpeakerId, Vec<usize>> = Default::default();
        for (i, u) in utts.iter().enumerate() {
            let s = u
                .single_speaker()
                .ok_or_else(|| Error::Data(format!("training utterance {} is not single-talker", u.id)))?;
            map.entry(s).or_default().push(i);
        }
        Ok(Self {
            by_speaker: map.into_iter().collect(),
        })
    }

    /// `speakers` speakers with `per_speaker` utterances each, numbered
    /// consecutively.
    pub fn synthetic(speakers: usize, per_speaker: usize) -> Self {
        Self {
            by_speaker: (0..speakers)
                .map(|s| (s as SpeakerId, (s * per_speaker..(s + 1) * per_speaker).collect()))
                .collect(),
        }
    }

    pub fn speakers(&self) -> usize {
        self.by_speaker.len()
    }
}

/// Role of one enrollment slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    /// The test's own loaded target enrollment.
    Target,
    /// Another test's loaded enrollment, drawn without replacement.
    Reused,
    /// Another test's loaded enrollment drawn again because too few
    /// distinct candidates were available.
    Resampled,
}

/// One enrollment loaded for the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadedEnrollment {
    pub speaker: SpeakerId,
    /// Index of the utterance in the pool's utterance list.
    pub utt: usize,
    /// Test that loaded it as a target.
    pub owner: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestPlan {
    pub condition: Condition,
    /// Source utterance of each talker, in talker order.
    pub sources: Vec<(SpeakerId, usize)>,
    pub speakers: BTreeSet<SpeakerId>,
    /// Loaded-enrollment index of each of the M slots.
    pub slots: Vec<usize>,
    pub labels: Vec<bool>,
    pub kinds: Vec<SlotKind>,
}

/// Index-level description of one batch; no audio involved.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub tests: Vec<TestPlan>,
    pub loaded: Vec<LoadedEnrollment>,
    /// Some slot had to be filled with replacement.
    pub with_replacement: bool,
    pub pairwise: bool,
}

impl BatchPlan {
    pub fn trials(&self) -> usize {
        self.tests.iter().map(|t| t.slots.len()).sum()
    }
}

/// Plans one batch of `N` tests with `M` enrollment slots each.
///
/// A test of `m` talkers loads one enrollment per talker, so the batch
/// loads `Σm` enrollments; each test fills its remaining `M - m` slots with
/// other tests' enrollments whose speaker it does not contain. Speakers are
/// dealt without replacement across the batch while the pool lasts.
pub fn plan_batch(pool: &TrainPool, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<BatchPlan> {
    let conditions = cfg.scenario.conditions();
    let m_max = conditions.iter().map(|c| c.talkers()).max().unwrap_or(1);
    ensure!(
        pool.speakers() > m_max,
        Data,
        "training pool has {} speakers; need more than {m_max}",
        pool.speakers()
    );
    ensure!(
        pool.by_speaker.iter().all(|(_, u)| u.len() >= 2),
        Data,
        "every training speaker needs two utterances so enrollment and test differ"
    );
    for _ in 0..MAX_ATTEMPTS {
        if let Some(plan) = try_plan(pool, cfg, &conditions, rng) {
            return Ok(plan);
        }
    }
    Err(Error::Data(format!(
        "no collision-free batch after {MAX_ATTEMPTS} attempts; the pool is too small for N = {}, M = {}",
        cfg.batch_tests, cfg.enrollments
    )))
}

fn try_plan(pool: &TrainPool, cfg: &TrainConfig, conditions: &[Condition], rng: &mut impl Rng) -> Option<BatchPlan> {
    let n = cfg.batch_tests;
    let mut deck: Vec<usize> = Vec::new();
    let mut tests = Vec::with_capacity(n);
    let mut loaded = Vec::new();
    // Talkers per test, then enrollment loading.
    for i in 0..n {
        let condition = *conditions.choose(rng)?;
        let mut chosen: Vec<usize> = Vec::with_capacity(condition.talkers());
        while chosen.len() < condition.talkers() {
            if deck.is_empty() {
                deck = (0..pool.speakers()).collect();
                deck.shuffle(rng);
            }
            let s = deck.pop()?;
            if !chosen.contains(&s) {
                chosen.push(s);
            }
        }
        let mut sources = Vec::with_capacity(chosen.len());
        for &s in &chosen {
            let (spk, utts) = &pool.by_speaker[s];
            let pick: Vec<usize> = utts.choose_multiple(rng, 2).copied().collect();
            sources.push((*spk, pick[0]));
            loaded.push(LoadedEnrollment {
                speaker: *spk,
                utt: pick[1],
                owner: i,
            });
        }
        tests.push(TestPlan {
            condition,
            speakers: sources.iter().map(|&(s, _)| s).collect(),
            sources,
            slots: Vec::new(),
            labels: Vec::new(),
            kinds: Vec::new(),
        });
    }

    let mut with_replacement = false;
    for (i, test) in tests.iter_mut().enumerate() {
        let own: Vec<usize> = (0..loaded.len()).filter(|&k| loaded[k].owner == i).collect();
        let candidates: Vec<usize> = (0..loaded.len())
            .filter(|&k| loaded[k].owner != i && !test.speakers.contains(&loaded[k].speaker))
            .collect();
        let mut slots: Vec<(usize, bool, SlotKind)> = Vec::with_capacity(cfg.enrollments);
        if cfg.pairwise() {
            if rng.random_bool(0.5) || candidates.is_empty() {
                slots.push((*own.choose(rng)?, true, SlotKind::Target));
            } else {
                slots.push((*candidates.choose(rng)?, false, SlotKind::Reused));
            }
        } else {
            slots.extend(own.iter().map(|&k| (k, true, SlotKind::Target)));
            let need = cfg.enrollments - own.len();
            if candidates.is_empty() && need > 0 {
                return None;
            }
            let take = need.min(candidates.len());
            slots.extend(
                candidates
                    .choose_multiple(rng, take)
                    .map(|&k| (k, false, SlotKind::Reused)),
            );
            for _ in take..need {
                with_replacement = true;
                slots.push((*candidates.choose(rng)?, false, SlotKind::Resampled));
            }
        }
        slots.shuffle(rng);
        test.slots = slots.iter().map(|s| s.0).collect();
        test.labels = slots.iter().map(|s| s.1).collect();
        test.kinds = slots.iter().map(|s| s.2).collect();
    }
    Some(BatchPlan {
        tests,
        loaded,
        with_replacement,
        pairwise: cfg.pairwise(),
    })
}

/// Everything batch construction needs, prepared once per run.
pub struct TrainMaterial<T> {
    pub utterances: Vec<Utterance>,
    pub pool: TrainPool,
    /// Frozen-extractor embedding of every utterance.
    pub embeddings: Vec<EnrollEmbedding<T>>,
    pub noise_bank: Vec<Vec<f32>>,
    pub corpus: CorpusConfig,
    pub frontend: FbankExtractor,
}

impl<T: Real> TrainMaterial<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn prepare(
        utterances: Vec<Utterance>,
        babble_pool: &[SpeakerProfile],
        corpus: &CorpusConfig,
        frontend: FbankExtractor,
        extractor: &ParamStore<T>,
        model: &ModelConfig,
        train: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let pool = TrainPool::from_utterances(&utterances)?;
        let embeddings = utterances
            .iter()
            .map(|u| {
                let mut e = embed_enrollment(&frontend.extract(&u.samples)?, extractor, model)?;
                e.speaker_id = u.single_speaker();
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        let len = (train.noise_bank_seconds * corpus.sample_rate as f64).round() as usize;
        let noise_bank = (0..train.noise_bank_size)
            .map(|k| {
                let kind = if k % 2 == 0 {
                    NoiseKind::Stationary
                } else {
                    NoiseKind::Babble
                };
                make_noise(
                    kind,
                    len,
                    corpus.sample_rate,
                    babble_pool,
                    derive_seed(seed, "train-noise", k as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            utterances,
            pool,
            embeddings,
            noise_bank,
            corpus: corpus.clone(),
            frontend,
        })
    }
}

/// `N` test utterances with `M` enrollments each and their labels.
#[derive(Clone, Debug)]
pub struct TrialBatch<T> {
    pub tests: Vec<FbankMatrix>,
    /// Encoded frame count of each test.
    pub valid_lens: Vec<usize>,
    /// Common padded length, the maximum of `valid_lens`.
    pub t_pad: usize,
    pub loaded: Vec<EnrollEmbedding<T>>,
    /// Per test, the loaded-enrollment index of each slot.
    pub enrolls: Vec<Vec<usize>>,
    pub labels: Vec<Vec<bool>>,
    pub meta: BatchPlan,
}

impl<T: Real> TrialBatch<T> {
    pub fn n(&self) -> usize {
        self.tests.len()
    }

    /// Slots per test.
    pub fn m(&self) -> usize {
        self.enrolls.first().map_or(0, Vec::len)
    }

    /// Enrollment vectors of test `i`, in slot order.
    pub fn enrollments(&self, i: usize) -> Vec<&[T]> {
        self.enrolls[i]
            .iter()
            .map(|&k| self.loaded[k].vector.as_slice())
            .collect()
    }

    pub fn label_values(&self, i: usize) -> Vec<T> {
        self.labels[i]
            .iter()
            .map(|&y| if y { T::one() } else { T::zero() })
            .collect()
    }
}

/// Materializes a planned batch: corrupts the test sources, extracts their
/// features and looks up the loaded enrollment embeddings.
pub fn build_batch<T: Real>(
    material: &TrainMaterial<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrialBatch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = plan_batch(&material.pool, cfg, &mut rng)?;
    let mut tests = Vec::with_capacity(plan.tests.len());
    let mut valid_lens = Vec::with_capacity(plan.tests.len());
    for tp in &plan.tests {
        let a = &material.utterances[tp.sources[0].1];
        let b = tp.sources.get(1).map(|&(_, k)| &material.utterances[k]);
        let noise = material.noise_bank.choose(&mut rng).map(Vec::as_slice);
        let u = corrupt(tp.condition, a, b, noise, &material.corpus, &mut rng)?;
        ensure!(
            u.speakers_present == tp.speakers,
            Data,
            "corrupted test {} lost track of its talkers",
            u.id
        );
        let fb = material.frontend.extract(&u.samples)?;
        valid_lens.push(model.encoded_frames(fb.frames));
        tests.push(fb);
    }
    let loaded = plan.loaded.iter().map(|l| material.embeddings[l.utt].clone()).collect();
    Ok(TrialBatch {
        t_pad: valid_lens.iter().copied().max().unwrap_or(0),
        tests,
        valid_lens,
        loaded,
        enrolls: plan.tests.iter().map(|t| t.slots.clone()).collect(),
        labels: plan.tests.iter().map(|t| t.labels.clone()).collect(),
        meta: plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Scenario;
    use proptest::prelude::*;

    fn check(plan: &BatchPlan, cfg: &TrainConfig) {
        let m_total: usize = plan.tests.iter().map(|t| t.speakers.len()).sum();
        assert_eq!(plan.loaded.len(), m_total);
        assert_eq!(plan.tests.len(), cfg.batch_tests);
        for (i, t) in plan.tests.iter().enumerate() {
            assert_eq!(t.speakers.len(), t.condition.talkers());
            assert_eq!(t.slots.len(), cfg.enrollments);
            for (&k, &y) in t.slots.iter().zip(&t.labels) {
                let l = plan.loaded[k];
                assert_eq!(y, t.speakers.contains(&l.speaker), "identity collision");
                assert_eq!(y, l.owner == i);
                for &(_, src) in &t.sources {
                    assert_ne!(src, l.utt, "enrollment equals a test source");
                }
            }
            if !cfg.pairwise() {
                assert_eq!(t.labels.iter().filter(|&&y| y).count(), t.speakers.len());
            }
        }
    }

    #[test]
    fn desk_counts() {
        let cfg = TrainConfig {
            scenario: Scenario::Mixing,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = plan_batch(&TrainPool::synthetic(40, 25), &cfg, &mut rng).unwrap();
        check(&plan, &cfg);
        assert_eq!(plan.loaded.len(), 32);
        assert_eq!(plan.trials(), 128);
        assert!(!plan.with_replacement);
        for t in &plan.tests {
            assert_eq!(t.kinds.iter().filter(|&&k| k == SlotKind::Reused).count(), 6);
        }
    }

    #[test]
    fn small_pool_falls_back_to_replacement() {
        let cfg = TrainConfig {
            batch_tests: 2,
            enrollments: 8,
            scenario: Scenario::Clean,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = plan_batch(&TrainPool::synthetic(4, 3), &cfg, &mut rng).unwrap();
        check(&plan, &cfg);
        assert!(plan.with_replacement);
    }

    #[test]
    fn impossible_pool_is_an_error() {
        let cfg = TrainConfig {
            scenario: Scenario::Mixing,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(plan_batch(&TrainPool::synthetic(2, 5), &cfg, &mut rng).is_err());
        assert!(plan_batch(&TrainPool::synthetic(10, 1), &cfg, &mut rng).is_err());
    }

    #[test]
    fn ten_thousand_batches_hold_the_invariants() {
        let pool = TrainPool::synthetic(40, 25);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            check(&plan_batch(&pool, &cfg, &mut rng).unwrap(), &cfg);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn plans_are_collision_free(
            seed in any::<u64>(),
            n in 2usize..20,
            extra in 0usize..10,
            speakers in 3usize..50,
            scenario in prop::sample::select(vec![Scenario::Clean, Scenario::Mixing, Scenario::Multi]),
            pairwise in any::<bool>(),
        ) {
            let cfg = TrainConfig {
                batch_tests: n,
                enrollments: if pairwise { 1 } else { 2 + extra },
                scenario,
                ..TrainConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Ok(plan) = plan_batch(&TrainPool::synthetic(speakers, 4), &cfg, &mut rng) {
                check(&plan, &cfg);
            }
        }
    }
}
