//! Log-mel filterbank features.
//!
//! Frames are Hann-windowed, zero-padded to `n_fft`, and turned into
//! one-sided power spectra; triangular HTK-mel filters pool the spectra
//! into `n_mels` bands; the log energies are mean-normalized per utterance.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Floor added to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub n_fft: usize,
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub f_min: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 24,
            n_fft: 512,
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            f_min: 20.0,
        }
    }
}

impl FrontendConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_len_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (self.frame_shift_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of frames for `n_samples` input samples.
    pub fn num_frames(&self, n_samples: usize) -> usize {
        num_frames(n_samples, self.frame_len(), self.frame_shift())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_mels >= 8,
            Config,
            "n_mels must be at least 8, got {}",
            self.n_mels
        );
        ensure!(
            self.n_fft.is_power_of_two() && self.n_fft >= self.frame_len(),
            Config,
            "n_fft {} must be a power of two no smaller than the frame ({} samples)",
            self.n_fft,
            self.frame_len()
        );
        ensure!(self.n_mels < self.n_fft / 2, Config, "n_mels must be below n_fft/2");
        ensure!(
            self.frame_shift() >= 1,
            Config,
            "frame shift must be at least one sample"
        );
        Ok(())
    }
}

/// `T × F` log-mel energies, row-major (one row per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct FbankMatrix {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl FbankMatrix {
    pub fn new(frames: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == frames * bins,
            Shape,
            "fbank {frames}×{bins} given {} values",
            values.len()
        );
        Ok(Self { frames, bins, values })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    /// Subtracts the per-bin mean over time.
    pub fn mean_normalize(&mut self) {
        if self.frames == 0 {
            return;
        }
        let mut mean = vec![0.0; self.bins];
        for row in self.values.chunks(self.bins) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.frames as f64);
        for row in self.values.chunks_mut(self.bins) {
            for (v, &m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
    }
}

pub fn num_frames(n_samples: usize, frame_len: usize, frame_shift: usize) -> usize {
    if n_samples < frame_len {
        0
    } else {
        (n_samples - frame_len) / frame_shift + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// `T × (n_fft/2 + 1)` power spectra of Hann-windowed frames.
pub fn stft_power(samples: &[f32], frame_len: usize, frame_shift: usize, n_fft: usize) -> Result<Vec<Vec<f64>>> {
    Stft::new(frame_len, n_fft)?.power(samples, frame_shift)
}

#[derive(Clone)]
struct Stft {
    frame_len: usize,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(frame_len: usize, n_fft: usize) -> Result<Self> {
        ensure!(
            n_fft.is_power_of_two() && n_fft >= frame_len && frame_len >= 1,
            InvalidArgument,
            "n_fft {n_fft} must be a power of two no smaller than frame length {frame_len}"
        );
        Ok(Self {
            frame_len,
            n_fft,
            window: hann(frame_len),
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        })
    }

    fn power(&self, samples: &[f32], frame_shift: usize) -> Result<Vec<Vec<f64>>> {
        ensure!(frame_shift >= 1, InvalidArgument, "frame shift must be positive");
        let t = num_frames(samples.len(), self.frame_len, frame_shift);
        ensure!(
            t >= 1,
            InvalidArgument,
            "signal of {} samples is shorter than one {}-sample frame",
            samples.len(),
            self.frame_len
        );
        let half = self.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut out = Vec::with_capacity(t);
        for f in 0..t {
            let start = f * frame_shift;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < self.frame_len {
                    Complex::new(samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.push(buf[..half].iter().map(|c| c.norm_sqr()).collect());
        }
        Ok(out)
    }
}

/// Triangular mel filters as an `(n_fft/2 + 1) × n_mels` matrix, stored
/// row-major by FFT bin.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_bins: usize,
    pub n_mels: usize,
    pub weights: Vec<f64>,
    /// Filter edges and centers in Hz, `n_mels + 2` points.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn weight(&self, bin: usize, mel: usize) -> f64 {
        self.weights[bin * self.n_mels + mel]
    }

    pub fn center_hz(&self, mel: usize) -> f64 {
        self.edges_hz[mel + 1]
    }
}

pub fn mel_filterbank(n_fft: usize, n_mels: usize, sample_rate: u32, f_min: f64) -> Result<MelFilterbank> {
    ensure!(
        n_fft >= 4 && n_mels >= 1 && n_mels < n_fft / 2,
        InvalidArgument,
        "need 1 ≤ n_mels < n_fft/2, got {n_mels} mels for n_fft {n_fft}"
    );
    let nyquist = sample_rate as f64 / 2.0;
    ensure!(
        f_min >= 0.0 && f_min < nyquist,
        InvalidArgument,
        "f_min {f_min} outside [0, nyquist)"
    );
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(nyquist));
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0.0; n_bins * n_mels];
    for bin in 0..n_bins {
        let f = bin as f64 * sample_rate as f64 / n_fft as f64;
        for m in 0..n_mels {
            let (l, c, r) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            weights[bin * n_mels + m] = w;
        }
    }
    Ok(MelFilterbank {
        n_bins,
        n_mels,
        weights,
        edges_hz,
    })
}

/// Reusable extractor holding the FFT plan and filterbank.
#[derive(Clone)]
pub struct FbankExtractor {
    config: FrontendConfig,
    stft: Stft,
    bank: MelFilterbank,
}

impl FbankExtractor {
    pub fn new(config: &FrontendConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            stft: Stft::new(config.frame_len(), config.n_fft)?,
            bank: mel_filterbank(config.n_fft, config.n_mels, config.sample_rate, config.f_min)?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    /// Log filterbank energies before mean normalization.
    pub fn raw(&self, samples: &[f32]) -> Result<FbankMatrix> {
        let power = self.stft.power(samples, self.config.frame_shift())?;
        let n_mels = self.bank.n_mels;
        let mut values = Vec::with_capacity(power.len() * n_mels);
        for frame in &power {
            let mut acc = vec![0.0; n_mels];
            for (bin, &p) in frame.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let w = &self.bank.weights[bin * n_mels..(bin + 1) * n_mels];
                for (a, &wv) in acc.iter_mut().zip(w) {
                    *a += p * wv;
                }
            }
            values.extend(acc.into_iter().map(|e| (e + LOG_FLOOR).ln()));
        }
        FbankMatrix::new(power.len(), n_mels, values)
    }

    /// Mean-normalized log-mel features.
    pub fn extract(&self, samples: &[f32]) -> Result<FbankMatrix> {
        let mut fb = self.raw(samples)?;
        fb.mean_normalize();
        Ok(fb)
    }
}

pub fn extract_fbank(samples: &[f32], config: &FrontendConfig) -> Result<FbankMatrix> {
    FbankExtractor::new(config)?.extract(samples)
}

/// Writes `T`, `F` as little-endian `u32` followed by row-major
/// little-endian `f32` values.
pub fn write_feature_dump(fb: &FbankMatrix, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + fb.values.len() * 4);
    bytes.extend_from_slice(&(fb.frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(fb.bins as u32).to_le_bytes());
    for &v in &fb.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_dump(path: &Path) -> Result<FbankMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ensure!(
        bytes.len() >= 8,
        Data,
        "{}: feature dump shorter than its header",
        path.display()
    );
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + t * f * 4 {
        return Err(Error::format(
            path,
            format!("header says {t}×{f} but payload has {} bytes", bytes.len() - 8),
        ));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FbankMatrix::new(t, f, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    // Direct O(N²) discrete Fourier transform power of one windowed frame.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * k as f64 * n as f64 / n_fft as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    fn sine(freq: f64, n: usize, sr: f64) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / sr).sin() as f32 * 0.5)
            .collect()
    }

    #[test]
    fn zero_signal_has_zero_power() {
        let p = stft_power(&vec![0.0; 1600], 400, 160, 512).unwrap();
        assert_eq!(p.len(), 8);
        assert!(p.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_is_rejected() {
        assert!(stft_power(&[0.0; 399], 400, 160, 512).is_err());
        assert!(stft_power(&[0.0; 1000], 400, 160, 300).is_err());
    }

    #[test]
    fn bin_centered_sine_concentrates_energy_and_matches_dft() {
        let (sr, n_fft) = (16000.0, 512);
        let k0 = 40;
        let x = sine(k0 as f64 * sr / n_fft as f64, 512, sr);
        let p = stft_power(&x, 512, 512, n_fft).unwrap();
        let frame = &p[0];
        let total: f64 = frame.iter().sum();
        let peak = frame.iter().cloned().fold(0.0, f64::max);
        assert_eq!(frame.iter().position(|&v| v == peak), Some(k0));
        // The Hann main lobe spans the peak bin and its two neighbours.
        let lobe = frame[k0 - 1] + frame[k0] + frame[k0 + 1];
        assert!(lobe / total >= 0.9, "{}", lobe / total);

        let w = hann(512);
        let windowed: Vec<f64> = x.iter().zip(&w).map(|(&s, &h)| s as f64 * h).collect();
        let oracle = dft_power(&windowed, n_fft);
        for (a, b) in frame.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn parseval_over_one_sided_spectrum() {
        let x: Vec<f32> = (0..400).map(|i| ((i * 7919 % 101) as f32 / 50.0 - 1.0) * 0.3).collect();
        let p = stft_power(&x, 400, 160, 512).unwrap();
        let w = hann(400);
        let energy: f64 = x.iter().zip(&w).map(|(&s, &h)| (s as f64 * h).powi(2)).sum();
        let f = &p[0];
        let one_sided = f[0] + f[256] + 2.0 * f[1..256].iter().sum::<f64>();
        let rel = (one_sided - 512.0 * energy).abs() / (512.0 * energy);
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn mel_scale_at_1000_hz() {
        let want = 2595.0 * (1.0f64 + 1000.0 / 700.0).log10();
        assert!((hz_to_mel(1000.0) - want).abs() < 1e-12);
        assert!((hz_to_mel(1000.0) - 999.99).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(3210.0)) - 3210.0).abs() < 1e-9);
    }

    #[test]
    fn filterbank_is_triangular_and_covers_passband() {
        let bank = mel_filterbank(512, 24, 16000, 20.0).unwrap();
        for m in 0..24 {
            let col: Vec<f64> = (0..bank.n_bins).map(|b| bank.weight(b, m)).collect();
            assert!(col.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!(col.iter().sum::<f64>() > 0.0, "filter {m} empty");
            // Unimodal: rises then falls.
            let peak = col.iter().cloned().fold(0.0, f64::max);
            let p = col.iter().position(|&w| w == peak).unwrap();
            assert!(col[..p].windows(2).all(|w| w[0] <= w[1]));
            assert!(col[p..].windows(2).all(|w| w[0] >= w[1]));
            if m > 0 {
                assert!(bank.center_hz(m) > bank.center_hz(m - 1));
                let overlap = (0..bank.n_bins).any(|b| bank.weight(b, m) > 0.0 && bank.weight(b, m - 1) > 0.0);
                assert!(overlap, "filters {} and {m} do not overlap", m - 1);
            }
        }
        let (lo, hi) = (bank.edges_hz[0], bank.edges_hz[25]);
        for b in 0..bank.n_bins {
            let f = b as f64 * 16000.0 / 512.0;
            if f > lo && f < hi {
                let total: f64 = (0..24).map(|m| bank.weight(b, m)).sum();
                assert!(total > 0.0, "bin {b} ({f} Hz) uncovered");
            }
        }
        assert!(mel_filterbank(512, 256, 16000, 20.0).is_err());
    }

    #[test]
    fn frame_count_for_three_seconds() {
        let cfg = FrontendConfig::default();
        assert_eq!(cfg.num_frames(48000), 298);
        let fb = extract_fbank(&sine(440.0, 48000, 16000.0), &cfg).unwrap();
        assert_eq!((fb.frames, fb.bins), (298, 24));
    }

    #[test]
    fn normalized_features_have_zero_mean() {
        let x: Vec<f32> = (0..16000)
            .map(|i| ((i as f32 * 0.013).sin() * (i as f32 * 0.0007).cos()) * 0.4)
            .collect();
        let fb = extract_fbank(&x, &FrontendConfig::default()).unwrap();
        assert!(fb.values.iter().all(|v| v.is_finite()));
        for b in 0..fb.bins {
            let mean: f64 = (0..fb.frames).map(|t| fb.row(t)[b]).sum::<f64>() / fb.frames as f64;
            assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn doubling_amplitude_shifts_raw_logs_by_two_ln_two() {
        let ex = FbankExtractor::new(&FrontendConfig::default()).unwrap();
        let x = sine(700.0, 8000, 16000.0);
        let x2: Vec<f32> = x.iter().map(|v| v * 2.0).collect();
        let (a, b) = (ex.raw(&x).unwrap(), ex.raw(&x2).unwrap());
        let shift = 2.0 * 2f64.ln();
        for (u, v) in a.values.iter().zip(&b.values) {
            // The log floor only matters for near-empty bands.
            if *u > 0.0 {
                assert!((v - u - shift).abs() < 1e-6, "{}", v - u);
            }
        }
    }

    #[test]
    fn leading_shift_of_zeros_adds_one_frame() {
        let cfg = FrontendConfig::default();
        let x = sine(300.0, 5000, 16000.0);
        let mut padded = vec![0.0f32; cfg.frame_shift()];
        padded.extend_from_slice(&x);
        let ex = FbankExtractor::new(&cfg).unwrap();
        assert_eq!(ex.raw(&padded).unwrap().frames, ex.raw(&x).unwrap().frames + 1);
    }

    #[test]
    fn louder_signal_never_lowers_raw_energies() {
        let ex = FbankExtractor::new(&FrontendConfig::default()).unwrap();
        let x: Vec<f32> = (0..4000).map(|i| ((i * 31 % 97) as f32 / 97.0 - 0.5) * 0.2).collect();
        let base = ex.raw(&x).unwrap();
        for gain in [1.01f32, 1.5, 3.0] {
            let y: Vec<f32> = x.iter().map(|v| v * gain).collect();
            let louder = ex.raw(&y).unwrap();
            assert!(base.values.iter().zip(&louder.values).all(|(a, b)| b >= a));
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let x = sine(1234.0, 9000, 16000.0);
        let cfg = FrontendConfig::default();
        assert_eq!(extract_fbank(&x, &cfg).unwrap(), extract_fbank(&x, &cfg).unwrap());
    }

    #[test]
    fn feature_dump_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fbk");
        let fb = FbankMatrix::new(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.25, -3.5]).unwrap();
        write_feature_dump(&fb, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &0.5f32.to_le_bytes());
        assert_eq!(read_feature_dump(&path).unwrap(), fb);
    }
}
