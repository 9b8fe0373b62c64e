//! Synthetic speakers, utterances, corruptions and trial lists.
//!
//! Speakers are source-filter voices: a pitch-jittered harmonic source shaped
//! by three formant resonances. Utterances are sequences of voiced
//! "syllables" separated by short pauses. Four corruptions turn clean
//! utterances into the evaluation conditions: additive noise,
//! concatenation of two talkers, partial overlap and full-length mixing.
//!
//! Every generator is a pure function of its inputs and seed.

mod corpus;
mod mixing;
mod speaker;
mod trials;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use corpus::{
    corrupt, index_by_id, read_manifest, read_trial_list, read_waveform, write_manifest, write_trial_list,
    write_waveform, CorpusConfig, CorpusLayout, EvalSet, ManifestEntry, SyntheticCorpus, CLEAN_DIR, ENROLL_DIR,
    EVAL_DIR, SOURCE_DIR,
};
pub use mixing::{
    make_concatenation, make_mixing, make_noise, make_noisy, make_overlap, mean_power, mix_at_snr, peak_normalize,
    snr_db, MixOutcome, NoiseKind, OverlapLayout, PEAK_LEVEL,
};
pub use speaker::{gen_speaker, gen_speakers, gen_utterance, MIN_FORMANT_SEPARATION_HZ};
pub use trials::build_trial_list;

pub type SpeakerId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Noisy,
    Concatenation,
    Overlap,
    Mixing,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Clean,
        Condition::Noisy,
        Condition::Concatenation,
        Condition::Overlap,
        Condition::Mixing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
            Condition::Concatenation => "concatenation",
            Condition::Overlap => "overlap",
            Condition::Mixing => "mixing",
        }
    }

    /// Number of enrolled-identity talkers an utterance of this condition
    /// carries.
    pub fn talkers(self) -> usize {
        match self {
            Condition::Clean | Condition::Noisy => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown condition {s:?}")))
    }
}

/// Parametric voice; the identity ground truth of the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: SpeakerId,
    /// Strictly increasing formant centers in Hz.
    pub formant_centers: [f64; 3],
    pub formant_bandwidths: [f64; 3],
    pub pitch_base: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub speakers_present: BTreeSet<SpeakerId>,
    pub condition: Condition,
}

impl Utterance {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// The single talker of a clean or noisy utterance.
    pub fn single_speaker(&self) -> Option<SpeakerId> {
        match self.speakers_present.len() {
            1 => self.speakers_present.iter().next().copied(),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        }
    }

    pub fn is_target(self) -> bool {
        self == TrialLabel::Target
    }
}

impl FromStr for TrialLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            _ => Err(Error::Data(format!("unknown trial label {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrialListEntry {
    pub enroll_utterance_id: String,
    pub test_utterance_id: String,
    pub label: TrialLabel,
}

/// Mixes a base seed with a named stream and an index (splitmix64).
pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = base ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
