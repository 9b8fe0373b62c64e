use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::speaker::gen_utterance;
use super::{derive_seed, Condition, SpeakerId, SpeakerProfile, Utterance};
use crate::error::{ensure, Result};

/// Peak magnitude after normalization.
pub const PEAK_LEVEL: f32 = 0.9;

/// Talkers summed into one babble segment.
const BABBLE_TALKERS: usize = 4;

pub fn mean_power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// `10·log10(P_target / P_interferer)` with mean squared amplitude.
pub fn snr_db(target: &[f32], interferer: &[f32]) -> f64 {
    10.0 * (mean_power(target) / mean_power(interferer)).log10()
}

/// Scales `x` so its peak magnitude equals [`PEAK_LEVEL`]. Returns the
/// applied factor; silent input is left alone.
pub fn peak_normalize(x: &mut [f32]) -> f32 {
    let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return 1.0;
    }
    let k = PEAK_LEVEL / peak;
    for v in x.iter_mut() {
        *v *= k;
    }
    k
}

/// Result of [`mix_at_snr`], keeping the pre-normalization components.
#[derive(Clone, Debug)]
pub struct MixOutcome {
    pub utterance: Utterance,
    /// Interferer gain `g`.
    pub gain: f64,
    pub target_component: Vec<f32>,
    /// `g · interferer`.
    pub interferer_component: Vec<f32>,
}

impl MixOutcome {
    pub fn measured_snr_db(&self) -> f64 {
        snr_db(&self.target_component, &self.interferer_component)
    }
}

fn interferer_gain(p_target: f64, p_interferer: f64, snr: f64) -> Result<f64> {
    ensure!(
        p_target > 0.0 && p_interferer > 0.0,
        InvalidArgument,
        "cannot mix a zero-power signal"
    );
    ensure!(snr.is_finite(), InvalidArgument, "SNR {snr} dB is not finite");
    Ok((p_target / (p_interferer * 10f64.powf(snr / 10.0))).sqrt())
}

/// Adds `interferer` to `target` at `snr` dB, then peak-normalizes. The
/// output keeps every label of the target.
pub fn mix_at_snr(target: &Utterance, interferer: &[f32], snr: f64) -> Result<MixOutcome> {
    ensure!(
        target.samples.len() == interferer.len(),
        Shape,
        "target has {} samples, interferer {}",
        target.samples.len(),
        interferer.len()
    );
    let gain = interferer_gain(mean_power(&target.samples), mean_power(interferer), snr)?;
    let scaled: Vec<f32> = interferer.iter().map(|&v| (v as f64 * gain) as f32).collect();
    let mut samples: Vec<f32> = target.samples.iter().zip(&scaled).map(|(a, b)| a + b).collect();
    peak_normalize(&mut samples);
    Ok(MixOutcome {
        utterance: Utterance {
            samples,
            ..target.clone()
        },
        gain,
        target_component: target.samples.clone(),
        interferer_component: scaled,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Low-pass filtered Gaussian noise.
    Stationary,
    /// Sum of synthetic talkers that never enroll.
    Babble,
}

fn tiled(x: &[f32], n: usize) -> Vec<f32> {
    x.iter().copied().cycle().take(n).collect()
}

/// A noise segment of `len` samples. Babble draws its talkers from
/// `babble_pool`, which must hold at least four profiles.
pub fn make_noise(
    kind: NoiseKind,
    len: usize,
    sample_rate: u32,
    babble_pool: &[SpeakerProfile],
    seed: u64,
) -> Result<Vec<f32>> {
    ensure!(len > 0, InvalidArgument, "noise length must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise", kind as u64));
    match kind {
        NoiseKind::Stationary => {
            let a: f64 = rng.random_range(0.2..0.9);
            let mut y = 0.0f64;
            let mut out: Vec<f32> = (0..len)
                .map(|_| {
                    let x: f64 = rng.sample(StandardNormal);
                    y = a * y + (1.0 - a) * x;
                    y as f32
                })
                .collect();
            peak_normalize(&mut out);
            Ok(out)
        }
        NoiseKind::Babble => {
            ensure!(
                babble_pool.len() >= BABBLE_TALKERS,
                InvalidArgument,
                "babble needs at least {BABBLE_TALKERS} talkers, pool has {}",
                babble_pool.len()
            );
            let seconds = (len as f64 / sample_rate as f64).clamp(1.0, 30.0);
            let mut out = vec![0.0f32; len];
            for (k, i) in sample(&mut rng, babble_pool.len(), BABBLE_TALKERS)
                .into_iter()
                .enumerate()
            {
                let u = gen_utterance(
                    &babble_pool[i],
                    seconds,
                    sample_rate,
                    derive_seed(seed, "babble", k as u64),
                )?;
                let offset = rng.random_range(0..u.samples.len());
                for (o, v) in out.iter_mut().zip(u.samples.iter().cycle().skip(offset)) {
                    *o += v;
                }
            }
            peak_normalize(&mut out);
            Ok(out)
        }
    }
}

pub fn make_noisy(
    target: &Utterance,
    kind: NoiseKind,
    snr: f64,
    babble_pool: &[SpeakerProfile],
    seed: u64,
) -> Result<Utterance> {
    let noise = make_noise(kind, target.samples.len(), target.sample_rate, babble_pool, seed)?;
    let mut u = mix_at_snr(target, &noise, snr)?.utterance;
    u.condition = Condition::Noisy;
    Ok(u)
}

fn distinct_talkers(a: &Utterance, b: &Utterance) -> Result<(SpeakerId, SpeakerId)> {
    let (Some(sa), Some(sb)) = (a.single_speaker(), b.single_speaker()) else {
        return Err(crate::Error::InvalidArgument(
            "two-talker corruptions need single-speaker inputs".into(),
        ));
    };
    ensure!(sa != sb, InvalidArgument, "both inputs are speaker {sa}");
    ensure!(
        a.sample_rate == b.sample_rate,
        InvalidArgument,
        "sample rates differ: {} vs {}",
        a.sample_rate,
        b.sample_rate
    );
    Ok((sa, sb))
}

fn pair_utterance(a: &Utterance, b: &Utterance, samples: Vec<f32>, condition: Condition) -> Utterance {
    Utterance {
        id: format!("{}+{}", a.id, b.id),
        samples,
        sample_rate: a.sample_rate,
        speakers_present: a
            .speakers_present
            .union(&b.speakers_present)
            .copied()
            .collect::<BTreeSet<_>>(),
        condition,
    }
}

/// `a` followed by `b`.
pub fn make_concatenation(a: &Utterance, b: &Utterance) -> Result<Utterance> {
    distinct_talkers(a, b)?;
    let samples = a.samples.iter().chain(&b.samples).copied().collect();
    Ok(pair_utterance(a, b, samples, Condition::Concatenation))
}

/// Placement of two signals with a suffix overlap: `a` starts at zero and
/// `b` enters at `onset`, so the shared span is `len_a - onset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverlapLayout {
    pub len_a: usize,
    pub len_b: usize,
    pub onset: usize,
}

impl OverlapLayout {
    /// Solves `shared / total = ratio` with `total = la + lb - shared`. When
    /// the shared span would exceed the shorter signal, the longer one is
    /// truncated so that the shorter sits entirely inside the overlap.
    pub fn new(la: usize, lb: usize, ratio: f64) -> Result<Self> {
        ensure!(
            (0.1..=0.9).contains(&ratio),
            InvalidArgument,
            "overlap ratio {ratio} outside [0.1, 0.9]"
        );
        ensure!(la > 0 && lb > 0, InvalidArgument, "overlap inputs must be non-empty");
        let (mut la, mut lb) = (la, lb);
        let mut shared = (ratio * (la + lb) as f64 / (1.0 + ratio)).round() as usize;
        let short = la.min(lb);
        if shared > short {
            let long = ((short as f64 / ratio).round() as usize).max(short);
            if la > lb {
                la = long;
            } else {
                lb = long;
            }
            shared = short;
        }
        // With b shorter and fully shared it ends inside a; keep it flush
        // with a's end so the overlap stays a suffix.
        Ok(Self {
            len_a: la,
            len_b: lb,
            onset: la - shared.min(la),
        })
    }

    pub fn shared(&self) -> usize {
        (self.len_a - self.onset).min(self.len_b)
    }

    pub fn total(&self) -> usize {
        self.len_a.max(self.onset + self.len_b)
    }

    pub fn ratio(&self) -> f64 {
        self.shared() as f64 / self.total() as f64
    }
}

/// Suffix overlap of `b` onto `a`. The gain is set from the powers of both
/// signals over the shared span.
pub fn make_overlap(a: &Utterance, b: &Utterance, ratio: f64, snr: f64) -> Result<Utterance> {
    distinct_talkers(a, b)?;
    let lay = OverlapLayout::new(a.samples.len(), b.samples.len(), ratio)?;
    let (sa, sb) = (&a.samples[..lay.len_a], &b.samples[..lay.len_b]);
    let shared = lay.shared();
    let gain = interferer_gain(
        mean_power(&sa[lay.onset..lay.onset + shared]),
        mean_power(&sb[..shared]),
        snr,
    )?;
    let mut samples = vec![0.0f32; lay.total()];
    samples[..lay.len_a].copy_from_slice(sa);
    for (o, &v) in samples[lay.onset..].iter_mut().zip(sb) {
        *o += (v as f64 * gain) as f32;
    }
    peak_normalize(&mut samples);
    Ok(pair_utterance(a, b, samples, Condition::Overlap))
}

/// Full-length mix of `b` into `a`, the shorter one tiled to the longer.
pub fn make_mixing(a: &Utterance, b: &Utterance, snr: f64) -> Result<Utterance> {
    distinct_talkers(a, b)?;
    let n = a.samples.len().max(b.samples.len());
    let target = Utterance {
        samples: tiled(&a.samples, n),
        ..a.clone()
    };
    let mix = mix_at_snr(&target, &tiled(&b.samples, n), snr)?;
    Ok(pair_utterance(a, b, mix.utterance.samples, Condition::Mixing))
}
