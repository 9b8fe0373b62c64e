use std::collections::BTreeSet;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, TrialLabel, TrialListEntry, Utterance};
use crate::error::{ensure, Result};

/// Samples `n_target` target and `n_nontarget` nontarget pairs of
/// (enrollment, test) without repetition, then shuffles them.
///
/// A pair is a target exactly when the enrollment talker is among the test
/// utterance's speakers.
pub fn build_trial_list(
    tests: &[Utterance],
    enroll_pool: &[Utterance],
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<TrialListEntry>> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for e in enroll_pool {
        let Some(spk) = e.single_speaker() else {
            return Err(crate::Error::InvalidArgument(format!(
                "enrollment {} is not single-speaker",
                e.id
            )));
        };
        for t in tests {
            let pair = (e.id.as_str(), t.id.as_str());
            if t.speakers_present.contains(&spk) {
                targets.push(pair);
            } else {
                nontargets.push(pair);
            }
        }
    }
    let unique: BTreeSet<_> = targets.iter().chain(&nontargets).collect();
    ensure!(
        unique.len() == targets.len() + nontargets.len(),
        Data,
        "duplicate utterance ids among tests or enrollments"
    );
    ensure!(
        targets.len() >= n_target && nontargets.len() >= n_nontarget,
        Data,
        "need {n_target} target and {n_nontarget} nontarget trials, only {} and {} exist",
        targets.len(),
        nontargets.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "trials", 0));
    let mut out: Vec<TrialListEntry> = Vec::with_capacity(n_target + n_nontarget);
    for (pool, n, label) in [
        (&targets, n_target, TrialLabel::Target),
        (&nontargets, n_nontarget, TrialLabel::Nontarget),
    ] {
        let mut picked = sample(&mut rng, pool.len(), n).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| TrialListEntry {
            enroll_utterance_id: pool[i].0.to_string(),
            test_utterance_id: pool[i].1.to_string(),
            label,
        }));
    }
    out.shuffle(&mut rng);
    Ok(out)
}
