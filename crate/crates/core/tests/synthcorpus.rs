mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use neural_scoring::synthcorpus::{
    corrupt, gen_speakers, gen_utterance, index_by_id, Condition, CorpusConfig, SyntheticCorpus, TrialLabel, Utterance,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_corpus() -> CorpusConfig {
    common::tiny_run_config(Path::new("unused")).corpus
}

/// Every file under `root` keyed by its relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Four clean utterances for each of six talkers.
fn pool() -> &'static Vec<Vec<Utterance>> {
    static POOL: OnceLock<Vec<Vec<Utterance>>> = OnceLock::new();
    POOL.get_or_init(|| {
        gen_speakers(6, 17)
            .iter()
            .map(|p| {
                (0..4)
                    .map(|k| gen_utterance(p, 1.0 + 0.1 * k as f64, 16000, k).unwrap())
                    .collect()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn corruption_records_exactly_the_talkers_it_mixed(seed in any::<u64>(), c in 0usize..5) {
        let condition = Condition::ALL[c];
        let config = CorpusConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, j) = (rng.random_range(0..3), rng.random_range(3..6));
        let a = &pool()[i][rng.random_range(0..4)];
        let b = &pool()[j][rng.random_range(0..4)];
        let noise: Vec<f32> = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let u = corrupt(condition, a, Some(b), Some(&noise), &config, &mut rng).unwrap();

        let expected: BTreeSet<u32> = if condition.talkers() == 2 {
            [i as u32, j as u32].into()
        } else {
            [i as u32].into()
        };
        prop_assert_eq!(&u.speakers_present, &expected);
        prop_assert_eq!(u.condition, condition);
        prop_assert!(u.samples.iter().all(|s| s.is_finite()));
        let (la, lb) = (a.samples.len(), b.samples.len());
        match condition {
            Condition::Clean | Condition::Noisy => prop_assert_eq!(u.samples.len(), la),
            Condition::Concatenation => prop_assert_eq!(u.samples.len(), la + lb),
            Condition::Mixing => prop_assert_eq!(u.samples.len(), la.max(lb)),
            Condition::Overlap => prop_assert!(u.samples.len() >= la.min(lb) && u.samples.len() < la + lb),
        }
    }
}

#[test]
fn two_talker_conditions_need_a_second_talker() {
    let config = CorpusConfig::default();
    let a = &pool()[0][0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for c in [Condition::Concatenation, Condition::Overlap, Condition::Mixing] {
        assert!(corrupt(c, a, None, None, &config, &mut rng).is_err());
    }
    assert!(corrupt(Condition::Noisy, a, None, None, &config, &mut rng).is_err());
    assert!(corrupt(Condition::Mixing, a, Some(a), None, &config, &mut rng).is_err());
}

#[test]
fn trial_labels_follow_speaker_presence() {
    let corpus = SyntheticCorpus::generate(&tiny_corpus(), 5).unwrap();
    let enroll = index_by_id(&corpus.enroll);
    let heldout: BTreeSet<u32> = corpus.config.heldout_ids().collect();
    for set in &corpus.eval {
        let tests = index_by_id(&set.tests);
        assert_eq!(set.tests.len(), corpus.config.eval_tests_per_condition);
        let n_target = set.trials.iter().filter(|t| t.label.is_target()).count();
        assert_eq!(n_target, corpus.config.eval_targets, "{}", set.condition);
        assert_eq!(set.trials.len() - n_target, corpus.config.eval_nontargets);
        let unique: BTreeSet<_> = set.trials.iter().collect();
        assert_eq!(unique.len(), set.trials.len());
        for t in &set.trials {
            let e = enroll[t.enroll_utterance_id.as_str()];
            let u = tests[t.test_utterance_id.as_str()];
            let spk = e.single_speaker().unwrap();
            let want = if u.speakers_present.contains(&spk) {
                TrialLabel::Target
            } else {
                TrialLabel::Nontarget
            };
            assert_eq!(t.label, want);
            assert!(heldout.contains(&spk));
            assert!(u.speakers_present.is_subset(&heldout));
            assert_eq!(u.speakers_present.len(), set.condition.talkers());
        }
    }
}

#[test]
fn partitions_are_disjoint() {
    let corpus = SyntheticCorpus::generate(&tiny_corpus(), 6).unwrap();
    let train: BTreeSet<u32> = corpus
        .train
        .iter()
        .flat_map(|u| u.speakers_present.iter().copied())
        .collect();
    let enroll: BTreeSet<u32> = corpus
        .enroll
        .iter()
        .flat_map(|u| u.speakers_present.iter().copied())
        .collect();
    assert!(train.is_disjoint(&enroll));
    let babble: BTreeSet<u32> = corpus.config.babble_ids().collect();
    assert!(babble.is_disjoint(&train) && babble.is_disjoint(&enroll));
    let ids: BTreeSet<&str> = corpus
        .train
        .iter()
        .chain(&corpus.enroll)
        .chain(&corpus.sources)
        .map(|u| u.id.as_str())
        .collect();
    assert_eq!(
        ids.len(),
        corpus.train.len() + corpus.enroll.len() + corpus.sources.len()
    );
}

#[test]
fn written_corpus_is_byte_identical_and_reloads() {
    let config = tiny_corpus();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = SyntheticCorpus::generate(&config, 9).unwrap();
    first.write(&a.path().join("c")).unwrap();
    SyntheticCorpus::generate(&config, 9)
        .unwrap()
        .write(&b.path().join("c"))
        .unwrap();
    let (sa, sb) = (snapshot(&a.path().join("c")), snapshot(&b.path().join("c")));
    assert!(sa.len() > 10);
    assert_eq!(sa, sb);

    let loaded = SyntheticCorpus::load(&a.path().join("c")).unwrap();
    assert_eq!(loaded.train.len(), first.train.len());
    assert_eq!(loaded.eval, first.eval);
    assert_eq!(loaded.profiles, first.profiles);

    let other = SyntheticCorpus::generate(&config, 10).unwrap();
    assert_ne!(other.train[0].samples, first.train[0].samples);
}
