//! Measurements on generated audio: autocorrelation pitch tracking,
//! spectrograms, harmonic parity and note-transition metrics.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{out_of_range, Error, Result};
use crate::signals::{rms, NoteTable, SAMPLE_RATE};
use crate::synthesis::{Interp, ParamSchedule};

pub const F0_WINDOW: usize = 1024;
pub const DEFAULT_HOP: usize = 160;
pub const MIN_F0_HZ: f64 = 250.0;
pub const MAX_F0_HZ: f64 = 1000.0;
/// Windows quieter than this carry no estimate.
pub const SILENCE_RMS: f64 = 1e-4;
/// Estimates below this confidence are treated as unvoiced.
pub const VOICED_CONFIDENCE: f64 = 0.5;
/// Candidate peaks within this fraction of the best peak are preferred at
/// the shortest lag, which avoids reporting a sub-octave.
const PEAK_RATIO: f64 = 0.9;
/// Half-width of a harmonic band, relative to its centre frequency.
pub const HARMONIC_BAND: f64 = 0.03;
/// A frame "is at" a note when within this relative distance of its f0.
pub const NOTE_MATCH: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F0Estimate {
    /// `None` for silent or unvoiced windows.
    pub f0: Option<f64>,
    /// Normalized autocorrelation at the chosen lag, in `[0, 1]`.
    pub confidence: f64,
}

/// Normalized autocorrelation over lags for 250-1000 Hz with parabolic
/// peak interpolation.
pub fn estimate_f0(window: &[f64]) -> Result<F0Estimate> {
    let min_lag = (SAMPLE_RATE / MAX_F0_HZ).floor() as usize;
    let max_lag = (SAMPLE_RATE / MIN_F0_HZ).ceil() as usize;
    if window.len() < 2 * (max_lag + 2) {
        return Err(Error::TooShort {
            what: "f0 window",
            required: 2 * (max_lag + 2),
            actual: window.len(),
        });
    }
    if window.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("f0 window"));
    }
    if rms(window) < SILENCE_RMS {
        return Ok(F0Estimate {
            f0: None,
            confidence: 0.0,
        });
    }
    let n = window.len();
    let nacf = |lag: usize| -> f64 {
        let (a, b) = (&window[..n - lag], &window[lag..]);
        let mut xy = 0.0;
        let mut xx = 0.0;
        let mut yy = 0.0;
        for (x, y) in a.iter().zip(b) {
            xy += x * y;
            xx += x * x;
            yy += y * y;
        }
        let denom = (xx * yy).sqrt();
        if denom > 0.0 {
            xy / denom
        } else {
            0.0
        }
    };
    let lo = min_lag - 1;
    let r: Vec<f64> = (lo..=max_lag + 1).map(nacf).collect();
    let at = |lag: usize| r[lag - lo];

    let peaks: Vec<usize> = (min_lag..=max_lag)
        .filter(|&l| at(l) > 0.0 && at(l) >= at(l - 1) && at(l) > at(l + 1))
        .collect();
    let Some(best) = peaks.iter().map(|&l| at(l)).reduce(f64::max) else {
        return Ok(F0Estimate {
            f0: None,
            confidence: 0.0,
        });
    };
    let lag = peaks
        .into_iter()
        .find(|&l| at(l) >= PEAK_RATIO * best)
        .expect("the best peak qualifies");

    let (ym, y0, yp) = (at(lag - 1), at(lag), at(lag + 1));
    let curvature = ym - 2.0 * y0 + yp;
    let (delta, peak) = if curvature < 0.0 {
        let d = 0.5 * (ym - yp) / curvature;
        (d, y0 - 0.25 * (ym - yp) * d)
    } else {
        (0.0, y0)
    };
    let confidence = peak.clamp(0.0, 1.0);
    let f0 = SAMPLE_RATE / (lag as f64 + delta);
    Ok(F0Estimate {
        f0: (confidence >= VOICED_CONFIDENCE).then_some(f0),
        confidence,
    })
}

/// Frame-wise f0; times are frame centres in seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F0Track {
    pub times: Vec<f64>,
    pub f0: Vec<Option<f64>>,
    pub confidence: Vec<f64>,
}

impl F0Track {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Voiced `(time, f0)` pairs with `t0 <= time <= t1`.
    pub fn voiced_between(&self, t0: f64, t1: f64) -> Vec<(f64, f64)> {
        self.times
            .iter()
            .zip(&self.f0)
            .filter(|(&t, _)| t >= t0 && t <= t1)
            .filter_map(|(&t, f)| f.map(|f| (t, f)))
            .collect()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.f0.iter().filter(|f| f.is_some()).count() as f64 / self.len() as f64
    }

    /// Fraction of frames whose confidence exceeds `threshold`.
    pub fn confident_fraction(&self, threshold: f64) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.confidence.iter().filter(|&&c| c > threshold).count() as f64 / self.len() as f64
    }

    pub fn median_f0(&self) -> Option<f64> {
        median(self.f0.iter().flatten().copied().collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,f0,confidence\n");
        for ((t, f), c) in self.times.iter().zip(&self.f0).zip(&self.confidence) {
            let f = f.map(|f| format!("{f:.4}")).unwrap_or_default();
            let _ = writeln!(out, "{t:.5},{f},{c:.5}");
        }
        out
    }
}

pub fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

/// Slides a [`F0_WINDOW`]-sample window by `hop` samples.
pub fn track_f0(signal: &[f64], hop: usize) -> Result<F0Track> {
    if hop == 0 {
        return Err(out_of_range("hop", 0, ">= 1"));
    }
    if signal.len() < F0_WINDOW {
        return Err(Error::TooShort {
            what: "signal for f0 tracking",
            required: F0_WINDOW,
            actual: signal.len(),
        });
    }
    let mut track = F0Track {
        times: Vec::new(),
        f0: Vec::new(),
        confidence: Vec::new(),
    };
    let mut start = 0;
    while start + F0_WINDOW <= signal.len() {
        let est = estimate_f0(&signal[start..start + F0_WINDOW])?;
        track.times.push((start + F0_WINDOW / 2) as f64 / SAMPLE_RATE);
        track.f0.push(est.f0);
        track.confidence.push(est.confidence);
        start += hop;
    }
    Ok(track)
}

/// Median f0 of the voiced frames in consecutive windows of `window_s`
/// seconds (by frame centre). Windows without voiced frames yield `None`.
pub fn windowed_medians(track: &F0Track, window_s: f64) -> Vec<(f64, Option<f64>)> {
    let Some(&last) = track.times.last() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut t0 = 0.0;
    while t0 <= last {
        let t1 = t0 + window_s;
        let vals: Vec<f64> = track
            .voiced_between(t0, t1)
            .into_iter()
            .filter(|&(t, _)| t < t1)
            .map(|(_, f)| f)
            .collect();
        if track.times.iter().any(|&t| t >= t0 && t < t1) {
            out.push((t0, median(vals)));
        }
        t0 = t1;
    }
    out
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn power_spectrum(signal: &[f64], window: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .zip(window)
        .map(|(&x, &w)| Complex::new(x * w, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarmonicBalance {
    /// Energy at 2f0, 4f0, ... over all partial energy from 2f0 up.
    pub even_fraction: f64,
    /// Energy at 3f0, 5f0, ... over the same total.
    pub odd_fraction: f64,
}

/// Splits the harmonic energy above the fundamental by parity, using a
/// Hann-windowed spectrum of the whole signal and bands of ±3% around
/// each harmonic.
pub fn even_odd_ratio(signal: &[f64], f0: f64) -> Result<HarmonicBalance> {
    const MIN_LEN: usize = 4096;
    if signal.len() < MIN_LEN {
        return Err(Error::TooShort {
            what: "signal for harmonic analysis",
            required: MIN_LEN,
            actual: signal.len(),
        });
    }
    let nyquist = SAMPLE_RATE / 2.0;
    if !(f0 > 0.0) || 2.0 * f0 * (1.0 + HARMONIC_BAND) >= nyquist {
        return Err(out_of_range("f0 for harmonic analysis", f0, "2 f0 band below Nyquist"));
    }
    let n = signal.len();
    let power = power_spectrum(signal, &hann(n));
    let bin_hz = SAMPLE_RATE / n as f64;
    let (mut even, mut odd) = (0.0, 0.0);
    let mut k = 2;
    while k as f64 * f0 * (1.0 + HARMONIC_BAND) < nyquist {
        let centre = k as f64 * f0;
        let lo = ((centre * (1.0 - HARMONIC_BAND)) / bin_hz).ceil() as usize;
        let hi = ((centre * (1.0 + HARMONIC_BAND)) / bin_hz).floor() as usize;
        let e: f64 = power[lo..=hi.min(power.len() - 1)].iter().sum();
        if k % 2 == 0 {
            even += e;
        } else {
            odd += e;
        }
        k += 1;
    }
    let total = even + odd;
    if total <= 0.0 {
        return Err(Error::Silent);
    }
    Ok(HarmonicBalance {
        even_fraction: even / total,
        odd_fraction: odd / total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentReport {
    pub start: f64,
    pub end: f64,
    pub pitch_param: f64,
    pub target_hz: f64,
    /// Median over voiced frames in the central 80% of the segment.
    pub median_hz: Option<f64>,
    /// Largest relative deviation of those frames from the median.
    pub drift: Option<f64>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionReport {
    pub boundary: f64,
    /// From the last frame at the previous note to the first frame at the
    /// new note. `None` when the new note is never reached.
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoteSequenceReport {
    pub segments: Vec<SegmentReport>,
    pub transitions: Vec<TransitionReport>,
}

/// Per-note pitch, drift and note-change timing for a step schedule.
/// Notes are compared by their measured medians; the nominal frequency of
/// each pitch parameter comes from `notes`.
pub fn measure_transitions(track: &F0Track, schedule: &ParamSchedule, notes: &NoteTable) -> Result<NoteSequenceReport> {
    schedule.validate()?;
    if schedule.segments.iter().any(|s| s.interp != Interp::Hold) {
        return Err(Error::Schedule("transition analysis needs held notes".into()));
    }
    let central = |start: f64, d: f64| (start + 0.1 * d, start + 0.9 * d);
    let mut segments = Vec::with_capacity(schedule.segments.len());
    for seg in &schedule.segments {
        let (c0, c1) = central(seg.start, seg.duration);
        let frames = track.times.iter().filter(|&&t| t >= c0 && t <= c1).count();
        if frames < 3 {
            return Err(Error::TooShort {
                what: "note segment (frames)",
                required: 3,
                actual: frames,
            });
        }
        let voiced: Vec<f64> = track.voiced_between(c0, c1).into_iter().map(|(_, f)| f).collect();
        let med = median(voiced.clone());
        let drift = med.map(|m| voiced.iter().map(|f| (f - m).abs() / m).fold(0.0, f64::max));
        segments.push(SegmentReport {
            start: seg.start,
            end: seg.end(),
            pitch_param: seg.from.pitch,
            target_hz: notes.freq_for_param(seg.from.pitch),
            median_hz: med,
            drift,
            frames,
        });
    }

    let near = |f: f64, note: f64| (f - note).abs() <= NOTE_MATCH * note;
    let mut transitions = Vec::new();
    for i in 1..segments.len() {
        let (prev, next) = (&segments[i - 1], &segments[i]);
        let boundary = next.start;
        let duration = match (prev.median_hz, next.median_hz) {
            (Some(pf), Some(nf)) if near(nf, pf) => Some(0.0),
            (Some(pf), Some(nf)) => {
                let (s0, _) = central(prev.start, prev.end - prev.start);
                let (_, s1) = central(next.start, next.end - next.start);
                let frames = track.voiced_between(s0, s1);
                let last_prev = frames
                    .iter()
                    .filter(|&&(t, f)| t <= boundary + 0.5 * (next.end - next.start) && near(f, pf))
                    .map(|&(t, _)| t)
                    .reduce(f64::max);
                last_prev.and_then(|lp| {
                    frames
                        .iter()
                        .find(|&&(t, f)| t > lp && near(f, nf))
                        .map(|&(t, _)| t - lp)
                })
            }
            _ => None,
        };
        transitions.push(TransitionReport { boundary, duration });
    }
    Ok(NoteSequenceReport { segments, transitions })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrogram {
    pub times: Vec<f64>,
    pub freqs: Vec<f64>,
    /// `frames x (window/2 + 1)` magnitudes.
    pub mags: Vec<Vec<f64>>,
    pub window_len: usize,
}

pub const SPECTROGRAM_WINDOW: usize = 1024;
pub const SPECTROGRAM_HOP: usize = 256;

/// Magnitude STFT, 1024-point Hann window, hop 256.
pub fn spectrogram(signal: &[f64]) -> Result<Spectrogram> {
    spectrogram_with(signal, SPECTROGRAM_WINDOW, SPECTROGRAM_HOP, WindowKind::Hann)
}

pub fn spectrogram_with(signal: &[f64], window_len: usize, hop: usize, kind: WindowKind) -> Result<Spectrogram> {
    if window_len < 2 || hop == 0 {
        return Err(out_of_range("spectrogram window/hop", format!("{window_len}/{hop}"), "window >= 2, hop >= 1"));
    }
    if signal.len() < window_len {
        return Err(Error::TooShort {
            what: "signal for spectrogram",
            required: window_len,
            actual: signal.len(),
        });
    }
    let window = match kind {
        WindowKind::Hann => hann(window_len),
        WindowKind::Rectangular => vec![1.0; window_len],
    };
    let fft = FftPlanner::new().plan_fft_forward(window_len);
    let bins = window_len / 2 + 1;
    let mut out = Spectrogram {
        times: Vec::new(),
        freqs: (0..bins).map(|k| k as f64 * SAMPLE_RATE / window_len as f64).collect(),
        mags: Vec::new(),
        window_len,
    };
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    let mut start = 0;
    while start + window_len <= signal.len() {
        for ((b, &x), &w) in buf.iter_mut().zip(&signal[start..start + window_len]).zip(&window) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        out.mags.push(buf[..bins].iter().map(|c| c.norm()).collect());
        out.times.push((start + window_len / 2) as f64 / SAMPLE_RATE);
        start += hop;
    }
    Ok(out)
}

impl Spectrogram {
    /// Energy of frame `i` reconstructed from the one-sided spectrum
    /// (equals the windowed frame's sum of squares).
    pub fn frame_energy(&self, i: usize) -> f64 {
        let m = &self.mags[i];
        let n = self.window_len;
        let last = m.len() - 1;
        let mut e = 0.0;
        for (k, v) in m.iter().enumerate() {
            let w = if k == 0 || (n.is_multiple_of(2) && k == last) { 1.0 } else { 2.0 };
            e += w * v * v;
        }
        e / n as f64
    }

    pub fn total_energy(&self) -> f64 {
        (0..self.mags.len()).map(|i| self.frame_energy(i)).sum()
    }

    /// Index of the largest magnitude bin in frame `i`.
    pub fn peak_bin(&self, i: usize) -> usize {
        self.mags[i]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(k, _)| k)
    }

    /// One row per frame: time, then one magnitude per bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time");
        for f in &self.freqs {
            let _ = write!(out, ",{f:.2}");
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(&self.mags) {
            let _ = write!(out, "{t:.5}");
            for m in row {
                let _ = write!(out, ",{m:.6e}");
            }
            out.push('\n');
        }
        out
    }

    /// Binary PGM (P5): frequency on the vertical axis (low at the bottom),
    /// time horizontal, 80 dB of log-magnitude range mapped onto 0..255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let width = self.mags.len();
        let height = self.freqs.len();
        let db: Vec<Vec<f64>> = self
            .mags
            .iter()
            .map(|row| row.iter().map(|m| 20.0 * (m + 1e-12).log10()).collect())
            .collect();
        let top = db.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
        for k in (0..height).rev() {
            for row in &db {
                let v = ((row[k] - top + 80.0) / 80.0).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }
}
