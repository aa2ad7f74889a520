//! Synthetic training instruments and signal conditioning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, Error, Result};

pub const SAMPLE_RATE: f64 = 16_000.0;

/// Equal-temperament E4 (A4 = 440 Hz).
pub const E4_HZ: f64 = 329.627_556_912_869_9;

/// Number of notes in the chromatic training table (one octave, inclusive).
pub const NOTE_COUNT: usize = 13;

/// RMS level every training tone is normalized to before volume scaling.
pub const TARGET_RMS: f64 = 0.25;

/// Upper bound for synthetic partials, below the 8 kHz Nyquist limit.
pub const MAX_PARTIAL_HZ: f64 = 7_500.0;

pub const DEFAULT_NOISE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parity {
    /// Fundamental plus even harmonics (2f0, 4f0, ...).
    Even,
    /// Fundamental plus odd harmonics (3f0, 5f0, ...).
    Odd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicSpec {
    pub parity: Parity,
    /// Partial `k` has amplitude `1 / k^rolloff`.
    pub rolloff: f64,
    pub max_freq: f64,
}

impl HarmonicSpec {
    pub fn even() -> Self {
        HarmonicSpec {
            parity: Parity::Even,
            rolloff: 1.0,
            max_freq: MAX_PARTIAL_HZ,
        }
    }

    pub fn odd() -> Self {
        HarmonicSpec {
            parity: Parity::Odd,
            ..Self::even()
        }
    }

    /// Harmonic numbers and amplitudes of every partial below `max_freq`.
    pub fn partials(&self, f0: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if f0 < self.max_freq {
            out.push((1, 1.0));
        }
        let first = match self.parity {
            Parity::Even => 2,
            Parity::Odd => 3,
        };
        let mut k = first;
        while (k as f64) * f0 < self.max_freq {
            out.push((k, (k as f64).powf(-self.rolloff)));
            k += 2;
        }
        out
    }
}

/// Chromatic scale from E4 to E5.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteTable {
    freqs: [f64; NOTE_COUNT],
}

impl Default for NoteTable {
    fn default() -> Self {
        let mut freqs = [0.0; NOTE_COUNT];
        for (k, f) in freqs.iter_mut().enumerate() {
            *f = E4_HZ * 2f64.powf(k as f64 / 12.0);
        }
        NoteTable { freqs }
    }
}

impl NoteTable {
    pub fn freqs(&self) -> &[f64; NOTE_COUNT] {
        &self.freqs
    }

    pub fn get(&self, k: usize) -> Result<f64> {
        self.freqs
            .get(k)
            .copied()
            .ok_or_else(|| out_of_range("semitone index", k, "0..=12"))
    }

    /// Frequency a pitch parameter nominally asks for. The pitch coordinate
    /// is linear in semitones across the octave.
    pub fn freq_for_param(&self, pitch: f64) -> f64 {
        self.freqs[0] * 2f64.powf(pitch)
    }
}

pub fn note_freq(k: usize) -> Result<f64> {
    if k >= NOTE_COUNT {
        return Err(out_of_range("semitone index", k, "0..=12"));
    }
    Ok(E4_HZ * 2f64.powf(k as f64 / 12.0))
}

/// Band-limited additive tone with zero-phase sine partials.
pub fn synth_tone(spec: &HarmonicSpec, f0: f64, duration: f64, sample_rate: f64) -> Result<Vec<f64>> {
    if !(sample_rate > 0.0) {
        return Err(out_of_range("sample rate", sample_rate, "> 0"));
    }
    if !(f0 > 0.0) || f0 >= sample_rate / 2.0 {
        return Err(out_of_range("fundamental frequency", f0, "0 < f0 < Nyquist"));
    }
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(out_of_range("duration", duration, "> 0 seconds"));
    }
    let len = (duration * sample_rate).round() as usize;
    let partials = spec.partials(f0);
    let omega: Vec<(f64, f64)> = partials
        .iter()
        .map(|&(k, a)| (2.0 * std::f64::consts::PI * k as f64 * f0 / sample_rate, a))
        .collect();
    Ok((0..len)
        .map(|n| {
            let n = n as f64;
            omega.iter().map(|&(w, a)| a * (w * n).sin()).sum()
        })
        .collect())
}

pub fn rms(signal: &[f64]) -> f64 {
    if signal.is_empty() {
        return 0.0;
    }
    (signal.iter().map(|x| x * x).sum::<f64>() / signal.len() as f64).sqrt()
}

pub fn rms_normalize(signal: &[f64], target_rms: f64) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::Empty("signal"));
    }
    let current = rms(signal);
    if current == 0.0 {
        return Err(Error::Silent);
    }
    if !current.is_finite() {
        return Err(Error::NonFinite("signal"));
    }
    let gain = target_rms / current;
    Ok(signal.iter().map(|x| x * gain).collect())
}

/// Adds i.i.d. uniform noise in `[-amplitude, amplitude]` and clamps to `[-1, 1]`.
pub fn add_uniform_noise<R: Rng>(signal: &mut [f64], amplitude: f64, rng: &mut R) {
    if amplitude > 0.0 {
        for x in signal.iter_mut() {
            *x += rng.random_range(-amplitude..=amplitude);
        }
    }
    for x in signal.iter_mut() {
        *x = x.clamp(-1.0, 1.0);
    }
}

/// Where a training tone comes from.
#[derive(Debug, Clone, Copy)]
pub enum ToneSource<'a> {
    Synth(HarmonicSpec),
    /// An already trimmed recording; its pitch is whatever was played.
    Recording(&'a [f64]),
}

impl ToneSource<'_> {
    /// The clean tone for semitone `k`, RMS-normalized to [`TARGET_RMS`].
    pub fn normalized_tone(&self, k: usize, duration: f64) -> Result<Vec<f64>> {
        let raw = match self {
            ToneSource::Synth(spec) => synth_tone(spec, note_freq(k)?, duration, SAMPLE_RATE)?,
            ToneSource::Recording(samples) => samples.to_vec(),
        };
        rms_normalize(&raw, TARGET_RMS)
    }
}

/// Training signal for one (instrument, note, volume) cell: normalized tone
/// scaled by `volume_scale`, plus uniform noise at `noise_fraction` of the
/// volume scale, clamped to `[-1, 1]`.
pub fn make_training_signal(
    source: ToneSource<'_>,
    k: usize,
    duration: f64,
    volume_scale: f64,
    noise_fraction: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(volume_scale > 0.0 && volume_scale <= 1.0) {
        return Err(out_of_range("volume scale", volume_scale, "(0, 1]"));
    }
    if !(noise_fraction >= 0.0) || !noise_fraction.is_finite() {
        return Err(out_of_range("noise fraction", noise_fraction, ">= 0"));
    }
    let mut signal: Vec<f64> = source
        .normalized_tone(k, duration)?
        .into_iter()
        .map(|x| x * volume_scale)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_uniform_noise(&mut signal, noise_fraction * volume_scale, &mut rng);
    Ok(signal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn note_table_endpoints() {
        assert!((note_freq(0).unwrap() - 329.63).abs() < 0.005);
        assert!((note_freq(12).unwrap() - 659.26).abs() < 0.005);
        assert_eq!(note_freq(12).unwrap() / note_freq(0).unwrap(), 2.0);
        assert!(note_freq(13).is_err());
    }

    #[test]
    fn note_table_is_equal_tempered() {
        let table = NoteTable::default();
        let step = 2f64.powf(1.0 / 12.0);
        for w in table.freqs().windows(2) {
            assert!(w[1] > w[0]);
            assert!((w[1] / w[0] - step).abs() < 1e-12);
        }
        assert!((table.freq_for_param(1.0) - table.get(12).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn high_fundamental_has_no_room_for_harmonics() {
        let partials = HarmonicSpec::even().partials(3_900.0);
        assert_eq!(partials, vec![(1, 1.0)]);
    }

    #[test]
    fn even_partials_and_amplitudes() {
        let partials = HarmonicSpec::even().partials(329.63);
        assert_eq!(partials[..4], [(1, 1.0), (2, 0.5), (4, 0.25), (6, 1.0 / 6.0)]);
        assert!(partials.iter().all(|&(k, _)| k as f64 * 329.63 < MAX_PARTIAL_HZ));
        let odd = HarmonicSpec::odd().partials(329.63);
        assert!(odd.iter().skip(1).all(|&(k, _)| k % 2 == 1));
    }

    #[test]
    fn tone_rejects_bad_arguments() {
        let spec = HarmonicSpec::even();
        assert!(synth_tone(&spec, 8_000.0, 1.0, SAMPLE_RATE).is_err());
        assert!(synth_tone(&spec, 0.0, 1.0, SAMPLE_RATE).is_err());
        assert!(synth_tone(&spec, 440.0, 0.0, SAMPLE_RATE).is_err());
        assert_eq!(synth_tone(&spec, 440.0, 0.5, SAMPLE_RATE).unwrap().len(), 8_000);
    }

    #[test]
    fn rms_normalization() {
        let amp = 0.8;
        let sine: Vec<f64> = (0..16_000)
            .map(|n| amp * (2.0 * std::f64::consts::PI * 400.0 * n as f64 / SAMPLE_RATE).sin())
            .collect();
        let out = rms_normalize(&sine, 0.25).unwrap();
        let gain = out[4] / sine[4];
        assert!((gain - 0.25 * 2f64.sqrt() / amp).abs() < 1e-9);
        assert!((rms(&out) - 0.25).abs() < 0.25 * 1e-9);
        let again = rms_normalize(&out, 0.25).unwrap();
        assert!(out.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(matches!(rms_normalize(&[0.0; 10], 0.25), Err(Error::Silent)));
    }

    #[test]
    fn training_signal_noise_bound_and_determinism() {
        let src = ToneSource::Synth(HarmonicSpec::even());
        let clean = make_training_signal(src, 0, 0.5, 0.5, 0.0, 1).unwrap();
        let expected: Vec<f64> = src
            .normalized_tone(0, 0.5)
            .unwrap()
            .iter()
            .map(|x| x * 0.5)
            .collect();
        assert_eq!(clean, expected);

        let noisy = make_training_signal(src, 0, 0.5, 0.5, 0.1, 7).unwrap();
        let max_dev = clean
            .iter()
            .zip(&noisy)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev <= 0.05 + 1e-15, "{max_dev}");
        assert!(max_dev > 0.04);
        assert_eq!(noisy, make_training_signal(src, 0, 0.5, 0.5, 0.1, 7).unwrap());
        assert_ne!(noisy, make_training_signal(src, 0, 0.5, 0.5, 0.1, 8).unwrap());
    }

    #[test]
    fn full_volume_tones_keep_headroom() {
        for spec in [HarmonicSpec::even(), HarmonicSpec::odd()] {
            for k in 0..NOTE_COUNT {
                let tone = ToneSource::Synth(spec).normalized_tone(k, 0.25).unwrap();
                let peak = tone.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                assert!(peak + 0.1 < 1.0, "k={k} peak={peak}");
            }
        }
    }
}
