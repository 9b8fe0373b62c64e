use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mixing::{make_concatenation, make_mixing, make_noise, make_overlap, mix_at_snr, NoiseKind};
use super::speaker::{gen_speakers, gen_utterance};
use super::trials::build_trial_list;
use super::{derive_seed, Condition, SpeakerId, SpeakerProfile, TrialLabel, TrialListEntry, Utterance};
use crate::error::{ensure, Error, Result};

pub const CLEAN_DIR: &str = "train";
pub const ENROLL_DIR: &str = "enroll";
pub const SOURCE_DIR: &str = "heldout";
pub const EVAL_DIR: &str = "eval";
const MANIFEST: &str = "manifest.tsv";
const TRIALS: &str = "trials.txt";
const CORPUS_TOML: &str = "corpus.toml";

/// Corpus sizes and corruption ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    pub train_speakers: usize,
    pub heldout_speakers: usize,
    /// Talkers reserved for babble noise; they never enroll or train.
    pub babble_speakers: usize,
    pub train_utts_per_speaker: usize,
    pub enroll_utts_per_speaker: usize,
    /// Held-out utterances per speaker used to build test utterances.
    pub source_utts_per_speaker: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub eval_tests_per_condition: usize,
    pub eval_targets: usize,
    pub eval_nontargets: usize,
    pub snr_db_range: [f64; 2],
    pub overlap_ratio_range: [f64; 2],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            train_speakers: 40,
            heldout_speakers: 10,
            babble_speakers: 8,
            train_utts_per_speaker: 25,
            enroll_utts_per_speaker: 3,
            source_utts_per_speaker: 10,
            min_duration_s: 2.0,
            max_duration_s: 3.0,
            eval_tests_per_condition: 100,
            eval_targets: 150,
            eval_nontargets: 600,
            snr_db_range: [-3.0, 3.0],
            overlap_ratio_range: [0.1, 0.9],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.sample_rate >= 8000, Config, "sample_rate must be at least 8000");
        ensure!(self.train_speakers >= 2, Config, "need at least two training speakers");
        ensure!(
            self.heldout_speakers >= 2,
            Config,
            "need at least two held-out speakers"
        );
        ensure!(self.babble_speakers >= 4, Config, "babble needs at least four talkers");
        ensure!(
            self.train_utts_per_speaker >= 1 && self.enroll_utts_per_speaker >= 1 && self.source_utts_per_speaker >= 1,
            Config,
            "utterance counts must be positive"
        );
        ensure!(
            1.0 <= self.min_duration_s && self.min_duration_s <= self.max_duration_s && self.max_duration_s <= 30.0,
            Config,
            "durations must satisfy 1 <= min <= max <= 30"
        );
        let [lo, hi] = self.snr_db_range;
        ensure!(lo.is_finite() && lo <= hi && hi.is_finite(), Config, "bad snr_db_range");
        let [lo, hi] = self.overlap_ratio_range;
        ensure!(
            0.1 <= lo && lo <= hi && hi <= 0.9,
            Config,
            "overlap_ratio_range must lie in [0.1, 0.9]"
        );
        ensure!(
            self.eval_tests_per_condition >= 1,
            Config,
            "need at least one test per condition"
        );
        Ok(())
    }

    pub fn total_speakers(&self) -> usize {
        self.train_speakers + self.heldout_speakers + self.babble_speakers
    }

    pub fn train_ids(&self) -> std::ops::Range<SpeakerId> {
        0..self.train_speakers as SpeakerId
    }

    pub fn heldout_ids(&self) -> std::ops::Range<SpeakerId> {
        let lo = self.train_speakers as SpeakerId;
        lo..lo + self.heldout_speakers as SpeakerId
    }

    pub fn babble_ids(&self) -> std::ops::Range<SpeakerId> {
        let lo = (self.train_speakers + self.heldout_speakers) as SpeakerId;
        lo..lo + self.babble_speakers as SpeakerId
    }

    fn duration(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.max_duration_s > self.min_duration_s {
            rng.random_range(self.min_duration_s..self.max_duration_s)
        } else {
            self.min_duration_s
        }
    }

    pub fn draw_snr(&self, rng: &mut impl Rng) -> f64 {
        let [lo, hi] = self.snr_db_range;
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    }

    pub fn draw_overlap_ratio(&self, rng: &mut impl Rng) -> f64 {
        let [lo, hi] = self.overlap_ratio_range;
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    }
}

/// Turns clean material into an utterance of `condition`.
///
/// `b` is required for the two-talker conditions and ignored otherwise.
/// Noisy corruption takes a window of `noise` starting at a random offset,
/// tiling it when shorter than `a`.
pub fn corrupt(
    condition: Condition,
    a: &Utterance,
    b: Option<&Utterance>,
    noise: Option<&[f32]>,
    config: &CorpusConfig,
    rng: &mut impl Rng,
) -> Result<Utterance> {
    let need_b = || b.ok_or_else(|| Error::InvalidArgument(format!("{condition} needs a second talker")));
    match condition {
        Condition::Clean => Ok(a.clone()),
        Condition::Noisy => {
            let noise = noise
                .filter(|n| !n.is_empty())
                .ok_or_else(|| Error::InvalidArgument("noisy corruption needs a noise segment".into()))?;
            let offset = rng.random_range(0..noise.len());
            let window: Vec<f32> = noise
                .iter()
                .cycle()
                .skip(offset)
                .take(a.samples.len())
                .copied()
                .collect();
            let mut u = mix_at_snr(a, &window, config.draw_snr(rng))?.utterance;
            u.condition = Condition::Noisy;
            Ok(u)
        }
        Condition::Concatenation => {
            let b = need_b()?;
            if rng.random_bool(0.5) {
                make_concatenation(a, b)
            } else {
                make_concatenation(b, a)
            }
        }
        Condition::Overlap => {
            let b = need_b()?;
            let ratio = config.draw_overlap_ratio(rng);
            make_overlap(a, b, ratio, config.draw_snr(rng))
        }
        Condition::Mixing => make_mixing(a, need_b()?, config.draw_snr(rng)),
    }
}

/// Test utterances of one evaluation condition with their trial list.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub condition: Condition,
    pub tests: Vec<Utterance>,
    pub trials: Vec<TrialListEntry>,
}

/// The full desk corpus held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    pub seed: u64,
    /// One profile per speaker id, across every speaker group.
    pub profiles: Vec<SpeakerProfile>,
    pub train: Vec<Utterance>,
    pub enroll: Vec<Utterance>,
    pub sources: Vec<Utterance>,
    pub eval: Vec<EvalSet>,
}

fn clean_set(
    profiles: &[SpeakerProfile],
    ids: std::ops::Range<SpeakerId>,
    per_speaker: usize,
    prefix: &str,
    config: &CorpusConfig,
    seed: u64,
) -> Result<Vec<Utterance>> {
    let mut out = Vec::with_capacity(ids.len() * per_speaker);
    for spk in ids {
        for k in 0..per_speaker {
            let s = derive_seed(seed, prefix, ((spk as u64) << 20) | k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut u = gen_utterance(
                &profiles[spk as usize],
                config.duration(&mut rng),
                config.sample_rate,
                s,
            )?;
            u.id = format!("{prefix}-s{spk:03}-{k:03}");
            out.push(u);
        }
    }
    Ok(out)
}

impl SyntheticCorpus {
    pub fn generate(config: &CorpusConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let profiles = gen_speakers(config.total_speakers(), seed);
        let train = clean_set(
            &profiles,
            config.train_ids(),
            config.train_utts_per_speaker,
            "train",
            config,
            seed,
        )?;
        let enroll = clean_set(
            &profiles,
            config.heldout_ids(),
            config.enroll_utts_per_speaker,
            "enroll",
            config,
            seed,
        )?;
        let sources = clean_set(
            &profiles,
            config.heldout_ids(),
            config.source_utts_per_speaker,
            "src",
            config,
            seed,
        )?;
        let babble = &profiles[config.babble_ids().start as usize..];
        let mut eval = Vec::new();
        for condition in Condition::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval", condition as u64));
            let mut tests = Vec::with_capacity(config.eval_tests_per_condition);
            for i in 0..config.eval_tests_per_condition {
                let ia = rng.random_range(0..sources.len());
                let spk_a = sources[ia].single_speaker();
                let ib = loop {
                    let j = rng.random_range(0..sources.len());
                    if sources[j].single_speaker() != spk_a {
                        break j;
                    }
                };
                let noise = if condition == Condition::Noisy {
                    let kind = if rng.random_bool(0.5) {
                        NoiseKind::Stationary
                    } else {
                        NoiseKind::Babble
                    };
                    let n = sources[ia].samples.len();
                    Some(make_noise(kind, n, config.sample_rate, babble, rng.random())?)
                } else {
                    None
                };
                let mut u = corrupt(
                    condition,
                    &sources[ia],
                    Some(&sources[ib]),
                    noise.as_deref(),
                    config,
                    &mut rng,
                )?;
                u.id = format!("{condition}-{i:04}");
                tests.push(u);
            }
            let trials = build_trial_list(
                &tests,
                &enroll,
                config.eval_targets,
                config.eval_nontargets,
                derive_seed(seed, "trials", condition as u64),
            )?;
            eval.push(EvalSet {
                condition,
                tests,
                trials,
            });
        }
        Ok(Self {
            config: config.clone(),
            seed,
            profiles,
            train,
            enroll,
            sources,
            eval,
        })
    }

    pub fn babble_pool(&self) -> &[SpeakerProfile] {
        &self.profiles[self.config.babble_ids().start as usize..]
    }

    pub fn eval_set(&self, condition: Condition) -> Option<&EvalSet> {
        self.eval.iter().find(|e| e.condition == condition)
    }

    /// Writes waveforms, manifests, trial lists and `corpus.toml`.
    pub fn write(&self, root: &Path) -> Result<CorpusLayout> {
        let layout = CorpusLayout::new(root);
        let meta = CorpusMeta {
            seed: self.seed,
            config: self.config.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        create_dir(root)?;
        fs::write(layout.root.join(CORPUS_TOML), text).map_err(|e| Error::io(root.join(CORPUS_TOML), e))?;
        write_set(&layout.train_dir(), &self.train)?;
        write_set(&layout.enroll_dir(), &self.enroll)?;
        write_set(&layout.source_dir(), &self.sources)?;
        for set in &self.eval {
            let dir = layout.eval_dir(set.condition);
            write_set(&dir, &set.tests)?;
            write_trial_list(&dir.join(TRIALS), &set.trials)?;
        }
        Ok(layout)
    }

    /// Reads a corpus written by [`SyntheticCorpus::write`]. Profiles are
    /// regenerated from the stored seed.
    pub fn load(root: &Path) -> Result<Self> {
        let layout = CorpusLayout::new(root);
        let meta_path = root.join(CORPUS_TOML);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CorpusMeta = toml::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let profiles = gen_speakers(meta.config.total_speakers(), meta.seed);
        let mut eval = Vec::new();
        for condition in Condition::ALL {
            let dir = layout.eval_dir(condition);
            eval.push(EvalSet {
                condition,
                tests: read_set(&dir)?,
                trials: read_trial_list(&dir.join(TRIALS))?,
            });
        }
        Ok(Self {
            config: meta.config,
            seed: meta.seed,
            profiles,
            train: read_set(&layout.train_dir())?,
            enroll: read_set(&layout.enroll_dir())?,
            sources: read_set(&layout.source_dir())?,
            eval,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusMeta {
    seed: u64,
    config: CorpusConfig,
}

/// Paths of an on-disk corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusLayout {
    pub root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join(CLEAN_DIR)
    }

    pub fn enroll_dir(&self) -> PathBuf {
        self.root.join(ENROLL_DIR)
    }

    pub fn source_dir(&self) -> PathBuf {
        self.root.join(SOURCE_DIR)
    }

    pub fn eval_dir(&self, condition: Condition) -> PathBuf {
        self.root.join(EVAL_DIR).join(condition.as_str())
    }

    pub fn trial_list(&self, condition: Condition) -> PathBuf {
        self.eval_dir(condition).join(TRIALS)
    }

    pub fn manifest(dir: &Path) -> PathBuf {
        dir.join(MANIFEST)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_set(dir: &Path, utts: &[Utterance]) -> Result<()> {
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in utts {
        let rel = format!("{}.f32", u.id);
        write_waveform(&dir.join(&rel), &u.samples, u.sample_rate)?;
        entries.push(ManifestEntry {
            utt_id: u.id.clone(),
            condition: u.condition,
            speaker_ids: u.speakers_present.iter().copied().collect(),
            duration_s: u.duration_s(),
            path: PathBuf::from(rel),
        });
    }
    write_manifest(&CorpusLayout::manifest(dir), &entries)
}

fn read_set(dir: &Path) -> Result<Vec<Utterance>> {
    read_manifest(&CorpusLayout::manifest(dir))?
        .into_iter()
        .map(|e| {
            let (samples, sample_rate) = read_waveform(&dir.join(&e.path))?;
            Ok(Utterance {
                id: e.utt_id,
                samples,
                sample_rate,
                speakers_present: e.speaker_ids.into_iter().collect(),
                condition: e.condition,
            })
        })
        .collect()
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("hdr")
}

/// Raw little-endian `f32` samples plus a `sample_rate=<hz>` sidecar.
pub fn write_waveform(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let hdr = sidecar(path);
    fs::write(&hdr, format!("sample_rate={sample_rate}\n")).map_err(|e| Error::io(&hdr, e))
}

pub fn read_waveform(path: &Path) -> Result<(Vec<f32>, u32)> {
    let hdr = sidecar(path);
    let text = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
    let sample_rate = text
        .trim_end()
        .strip_prefix("sample_rate=")
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::format(&hdr, "expected a single sample_rate=<hz> line"))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "length is not a multiple of 4 bytes"));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((samples, sample_rate))
}

/// One manifest line: `utt_id  condition  speaker_ids  duration_s  path`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub condition: Condition,
    pub speaker_ids: Vec<SpeakerId>,
    pub duration_s: f64,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let ids: Vec<String> = e.speaker_ids.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{}",
            e.utt_id,
            e.condition,
            ids.join(","),
            e.duration_s,
            e.path.display()
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            let [utt, cond, spk, dur, rel] = cols[..] else {
                return Err(bad("expected 5 tab-separated columns"));
            };
            let speaker_ids = spk
                .split(',')
                .map(|s| s.parse::<SpeakerId>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("bad speaker id list"))?;
            Ok(ManifestEntry {
                utt_id: utt.to_string(),
                condition: cond.parse().map_err(|_| bad("unknown condition"))?,
                speaker_ids,
                duration_s: dur.parse().map_err(|_| bad("bad duration"))?,
                path: PathBuf::from(rel),
            })
        })
        .collect()
}

pub fn write_trial_list(path: &Path, entries: &[TrialListEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(
            out,
            "{} {} {}",
            e.enroll_utterance_id,
            e.test_utterance_id,
            e.label.as_str()
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_trial_list(path: &Path) -> Result<Vec<TrialListEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split_whitespace().collect();
            let [enroll, test, label] = cols[..] else {
                return Err(Error::format(path, format!("line {}: expected 3 columns", n + 1)));
            };
            Ok(TrialListEntry {
                enroll_utterance_id: enroll.to_string(),
                test_utterance_id: test.to_string(),
                label: label
                    .parse::<TrialLabel>()
                    .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
            })
        })
        .collect()
}

/// Utterances indexed by id.
pub fn index_by_id(utts: &[Utterance]) -> BTreeMap<&str, &Utterance> {
    utts.iter().map(|u| (u.id.as_str(), u)).collect()
}
