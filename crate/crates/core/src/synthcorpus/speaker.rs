use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::mixing::peak_normalize;
use super::{derive_seed, Condition, SpeakerId, SpeakerProfile, Utterance};
use crate::error::{ensure, Result};

/// Minimum Euclidean distance between the formant-center triples of any two
/// speakers generated from one master seed.
pub const MIN_FORMANT_SEPARATION_HZ: f64 = 30.0;

const CENTER_RANGES: [(f64, f64); 3] = [(500.0, 900.0), (1000.0, 2200.0), (2400.0, 3400.0)];
const BANDWIDTH_RANGES: [(f64, f64); 3] = [(60.0, 110.0), (80.0, 150.0), (120.0, 220.0)];
const PITCH_RANGE: (f64, f64) = (85.0, 200.0);
const FORMANT_GAINS: [f64; 3] = [1.0, 0.5, 0.25];
const HARMONIC_CEILING_HZ: f64 = 4500.0;
const BLOCK: usize = 64;

fn draw_profile(rng: &mut ChaCha8Rng, speaker_id: SpeakerId, seed: u64) -> SpeakerProfile {
    let mut formant_centers = [0.0; 3];
    let mut formant_bandwidths = [0.0; 3];
    for i in 0..3 {
        formant_centers[i] = rng.random_range(CENTER_RANGES[i].0..CENTER_RANGES[i].1);
        formant_bandwidths[i] = rng.random_range(BANDWIDTH_RANGES[i].0..BANDWIDTH_RANGES[i].1);
    }
    SpeakerProfile {
        speaker_id,
        formant_centers,
        formant_bandwidths,
        pitch_base: rng.random_range(PITCH_RANGE.0..PITCH_RANGE.1),
        seed,
    }
}

fn separation(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Profiles `0..n` for one master seed. Each profile is redrawn until it
/// sits at least [`MIN_FORMANT_SEPARATION_HZ`] from every lower id.
pub fn gen_speakers(n: usize, master_seed: u64) -> Vec<SpeakerProfile> {
    let mut out: Vec<SpeakerProfile> = Vec::with_capacity(n);
    for id in 0..n as SpeakerId {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, "speaker", id as u64));
        let profile = loop {
            let p = draw_profile(&mut rng, id, master_seed);
            if out
                .iter()
                .all(|q| separation(&q.formant_centers, &p.formant_centers) >= MIN_FORMANT_SEPARATION_HZ)
            {
                break p;
            }
        };
        out.push(profile);
    }
    out
}

pub fn gen_speaker(speaker_id: SpeakerId, master_seed: u64) -> SpeakerProfile {
    gen_speakers(speaker_id as usize + 1, master_seed)
        .pop()
        .expect("at least one profile")
}

/// Formant envelope evaluated at `f` Hz.
fn envelope(centers: &[f64; 3], bandwidths: &[f64; 3], f: f64) -> f64 {
    let mut a = 0.0;
    for i in 0..3 {
        let x = (f - centers[i]) / (0.5 * bandwidths[i]);
        a += FORMANT_GAINS[i] / (1.0 + x * x);
    }
    a
}

struct Syllable {
    start: usize,
    len: usize,
    formant_scale: [f64; 3],
    pitch_from: f64,
    pitch_to: f64,
    amplitude: f64,
}

/// Synthesizes a clean utterance of `duration_s` seconds.
pub fn gen_utterance(profile: &SpeakerProfile, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Utterance> {
    ensure!(
        (1.0..=30.0).contains(&duration_s),
        InvalidArgument,
        "utterance duration {duration_s} s outside [1, 30]"
    );
    ensure!(
        sample_rate >= 8000,
        InvalidArgument,
        "sample rate {sample_rate} below 8 kHz"
    );
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "utterance", profile.speaker_id as u64));

    let pitch = profile.pitch_base * rng.random_range(0.92..1.08);
    let mut centers = profile.formant_centers;
    for c in &mut centers {
        *c *= rng.random_range(0.97..1.03);
    }

    let ms = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| (rng.random_range(lo..hi) * sr / 1000.0) as usize;
    let mut syllables = Vec::new();
    let mut t = ms(0.0, 80.0, &mut rng);
    while t < n {
        let len = ms(120.0, 300.0, &mut rng).min(n - t);
        let scale = [
            rng.random_range(0.95..1.05),
            rng.random_range(0.95..1.05),
            rng.random_range(0.95..1.05),
        ];
        syllables.push(Syllable {
            start: t,
            len,
            formant_scale: scale,
            pitch_from: rng.random_range(0.9..1.1),
            pitch_to: rng.random_range(0.9..1.1),
            amplitude: rng.random_range(0.6..1.0),
        });
        t += len + ms(40.0, 140.0, &mut rng);
    }

    let mut out = vec![0.0f64; n];
    let ceiling = HARMONIC_CEILING_HZ.min(0.45 * sr);
    let ramp = (0.015 * sr) as usize;
    let vibrato_rate = rng.random_range(4.5..6.5);
    let mut phase = 0.0f64;
    let mut amps = Vec::new();
    for syl in &syllables {
        let mut sc = centers;
        for (c, s) in sc.iter_mut().zip(syl.formant_scale) {
            *c *= s;
        }
        for i in 0..syl.len {
            let idx = syl.start + i;
            let frac = i as f64 / syl.len as f64;
            let f0 = pitch
                * (syl.pitch_from + (syl.pitch_to - syl.pitch_from) * frac)
                * (1.0 + 0.015 * (TAU * vibrato_rate * idx as f64 / sr).sin());
            if i % BLOCK == 0 {
                let k_max = (ceiling / f0).floor() as usize;
                amps.clear();
                amps.extend((1..=k_max).map(|k| envelope(&sc, &profile.formant_bandwidths, k as f64 * f0)));
            }
            phase = (phase + TAU * f0 / sr) % TAU;
            // sin(kφ) by the Chebyshev recurrence.
            let (s1, c1) = phase.sin_cos();
            let two_c = 2.0 * c1;
            let (mut prev, mut cur) = (0.0, s1);
            let mut acc = 0.0;
            for &a in &amps {
                acc += a * cur;
                let next = two_c * cur - prev;
                prev = cur;
                cur = next;
            }
            let env = if i < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos()
            } else if syl.len - i < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * (syl.len - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let breath: f64 = rng.sample(StandardNormal);
            out[idx] = syl.amplitude * env * (acc + 0.05 * breath);
        }
    }
    for v in &mut out {
        let floor: f64 = rng.sample(StandardNormal);
        *v += 0.002 * floor;
    }
    let mut samples: Vec<f32> = out.into_iter().map(|v| v as f32).collect();
    peak_normalize(&mut samples);
    Ok(Utterance {
        id: format!("spk{:04}-{:016x}", profile.speaker_id, seed),
        samples,
        sample_rate,
        speakers_present: BTreeSet::from([profile.speaker_id]),
        condition: Condition::Clean,
    })
}
