//! Conditioned training sequences and the parameter coordinate system.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{code_to_input, encode_signal, mulaw_encode, MuLawCode};
use crate::error::{out_of_range, Error, Result};
use crate::signals::{
    add_uniform_noise, HarmonicSpec, Parity, ToneSource, DEFAULT_NOISE_FRACTION, SAMPLE_RATE,
};
use crate::wav;

/// Length of every training sequence.
pub const SEQ_LEN: usize = 256;

pub const DEFAULT_VOLUME_LEVELS: usize = 24;

/// A point in the (pitch, volume, instrument) conditioning space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamPoint {
    pub pitch: f64,
    pub volume: f64,
    pub instrument: f64,
}

impl ParamPoint {
    pub fn new(pitch: f64, volume: f64, instrument: f64) -> Result<Self> {
        for (what, v) in [("pitch", pitch), ("volume", volume), ("instrument", instrument)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(out_of_range(what, v, "[0, 1]"));
            }
        }
        Ok(ParamPoint {
            pitch,
            volume,
            instrument,
        })
    }

    /// Clamps each component into `[0, 1]`; non-finite components become 0.
    pub fn clamped(pitch: f64, volume: f64, instrument: f64) -> Self {
        let c = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        ParamPoint {
            pitch: c(pitch),
            volume: c(volume),
            instrument: c(instrument),
        }
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.pitch, self.volume, self.instrument).map(|_| ())
    }

    pub fn lerp(&self, other: &ParamPoint, frac: f64) -> ParamPoint {
        let l = |a: f64, b: f64| a + (b - a) * frac;
        ParamPoint::clamped(
            l(self.pitch, other.pitch),
            l(self.volume, other.volume),
            l(self.instrument, other.instrument),
        )
    }

    /// The network input vector for a given audio code.
    pub fn input_vector(&self, audio: MuLawCode) -> [f64; 4] {
        [code_to_input(audio), self.pitch, self.volume, self.instrument]
    }
}

/// Maps grid indices onto the conditioning coordinates: pitch `k/12`,
/// volume `i/N` for `i = 1..=N`, instrument `j/(n-1)` (0 for a single
/// instrument).
pub fn param_point(
    instrument: usize,
    n_instruments: usize,
    semitone: usize,
    volume_level: usize,
    volume_levels: usize,
) -> Result<ParamPoint> {
    if n_instruments == 0 || instrument >= n_instruments {
        return Err(out_of_range("instrument index", instrument, "0..n_instruments"));
    }
    if semitone > 12 {
        return Err(out_of_range("semitone index", semitone, "0..=12"));
    }
    if volume_levels == 0 || volume_level == 0 || volume_level > volume_levels {
        return Err(out_of_range("volume level", volume_level, "1..=N"));
    }
    let inst = if n_instruments == 1 {
        0.0
    } else {
        instrument as f64 / (n_instruments - 1) as f64
    };
    ParamPoint::new(
        semitone as f64 / 12.0,
        volume_level as f64 / volume_levels as f64,
        inst,
    )
}

/// A teacher-forcing example: `codes[t]` is the audio input at step `t`
/// and `codes[t + 1]` its target.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedSequence {
    codes: Vec<MuLawCode>,
    pub params: ParamPoint,
}

impl ConditionedSequence {
    pub fn new(codes: Vec<MuLawCode>, params: ParamPoint) -> Result<Self> {
        if codes.len() < 2 {
            return Err(Error::TooShort {
                what: "sequence",
                required: 2,
                actual: codes.len(),
            });
        }
        params.validate()?;
        Ok(ConditionedSequence { codes, params })
    }

    /// Number of prediction steps.
    pub fn len(&self) -> usize {
        self.codes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_codes(&self) -> &[MuLawCode] {
        &self.codes[..self.codes.len() - 1]
    }

    pub fn targets(&self) -> &[MuLawCode] {
        &self.codes[1..]
    }

    pub fn inputs(&self) -> Vec<[f64; 4]> {
        self.input_codes()
            .iter()
            .map(|&c| self.params.input_vector(c))
            .collect()
    }
}

/// Removes the onset (first 0.5 s) and keeps at most up to 3.0 s. The
/// remainder must be at least 1 s long.
pub fn trim_steady_state(recording: &[f64]) -> Result<Vec<f64>> {
    let sr = SAMPLE_RATE as usize;
    let start = sr / 2;
    let min_len = start + sr;
    if recording.len() < min_len {
        return Err(Error::TooShort {
            what: "recording for steady-state trim (1.5 s)",
            required: min_len,
            actual: recording.len(),
        });
    }
    let end = recording.len().min(3 * sr);
    Ok(recording[start..end].to_vec())
}

/// Draws `count` windows of `SEQ_LEN + 1` samples at uniformly random
/// offsets (with replacement).
pub fn draw_sequences(
    signal: &[f64],
    params: ParamPoint,
    count: usize,
    seed: u64,
) -> Result<Vec<ConditionedSequence>> {
    draw_sequences_of_len(signal, params, count, SEQ_LEN, seed)
}

pub fn draw_sequences_of_len(
    signal: &[f64],
    params: ParamPoint,
    count: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<ConditionedSequence>> {
    if signal.len() < len + 1 {
        return Err(Error::TooShort {
            what: "signal for sequence drawing",
            required: len + 1,
            actual: signal.len(),
        });
    }
    params.validate()?;
    let codes = encode_signal(signal)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_start = codes.len() - (len + 1);
    (0..count)
        .map(|_| {
            let start = rng.random_range(0..=max_start);
            ConditionedSequence::new(codes[start..start + len + 1].to_vec(), params)
        })
        .collect()
}

/// Seeded shuffle, then split into batches; the final short batch is kept.
pub fn make_batches<T: Clone>(items: &[T], batch_size: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(out_of_range("batch size", 0, ">= 1"));
    }
    if items.is_empty() {
        return Err(Error::Empty("sequence list"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| items[i].clone()).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InstrumentSource {
    Synth { parity: Parity },
    /// One mono 16 kHz recording per semitone index, as `[k, path]` pairs.
    /// Relative paths resolve against the config's directory.
    Wav { files: Vec<(usize, PathBuf)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentConfig {
    pub name: String,
    pub source: InstrumentSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub instruments: Vec<InstrumentConfig>,
    /// Semitone indices (0..=12) included in training.
    pub semitones: Vec<usize>,
    /// N: volume parameter for level `i` is `i/N`.
    pub volume_levels: usize,
    /// Levels `i` (1..=N) included in training; empty means all of them.
    pub volumes: Vec<usize>,
    pub noise_fraction: f64,
    /// Length of each synthetic tone in seconds.
    pub tone_seconds: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            instruments: vec![InstrumentConfig {
                name: "synth-even".into(),
                source: InstrumentSource::Synth {
                    parity: Parity::Even,
                },
            }],
            semitones: (0..=12).collect(),
            volume_levels: DEFAULT_VOLUME_LEVELS,
            volumes: Vec::new(),
            noise_fraction: DEFAULT_NOISE_FRACTION,
            tone_seconds: 2.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// One synthetic instrument at the given semitones and a single volume level.
    pub fn synth(parity: Parity, semitones: Vec<usize>, volume_level: usize) -> Self {
        CorpusConfig {
            instruments: vec![InstrumentConfig {
                name: match parity {
                    Parity::Even => "synth-even".into(),
                    Parity::Odd => "synth-odd".into(),
                },
                source: InstrumentSource::Synth { parity },
            }],
            semitones,
            volumes: vec![volume_level],
            ..Default::default()
        }
    }

    pub fn volume_indices(&self) -> Vec<usize> {
        if self.volumes.is_empty() {
            (1..=self.volume_levels).collect()
        } else {
            self.volumes.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruments.is_empty() {
            return Err(Error::Empty("instrument list"));
        }
        if self.semitones.is_empty() {
            return Err(Error::Empty("semitone list"));
        }
        if self.volume_levels == 0 {
            return Err(out_of_range("volume_levels", 0, ">= 1"));
        }
        if let Some(&k) = self.semitones.iter().find(|&&k| k > 12) {
            return Err(out_of_range("semitone index", k, "0..=12"));
        }
        if let Some(&i) = self
            .volumes
            .iter()
            .find(|&&i| i == 0 || i > self.volume_levels)
        {
            return Err(out_of_range("volume level", i, "1..=volume_levels"));
        }
        if !(self.noise_fraction >= 0.0 && self.noise_fraction.is_finite()) {
            return Err(out_of_range("noise_fraction", self.noise_fraction, ">= 0"));
        }
        if !(self.tone_seconds * SAMPLE_RATE > (SEQ_LEN + 1) as f64) {
            return Err(out_of_range("tone_seconds", self.tone_seconds, "longer than one sequence"));
        }
        for inst in &self.instruments {
            if let InstrumentSource::Wav { files } = &inst.source {
                for &k in &self.semitones {
                    if !files.iter().any(|(fk, _)| *fk == k) {
                        return Err(Error::Schedule(format!(
                            "instrument {} has no recording for semitone {k}",
                            inst.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One (instrument, note, volume) cell: a clean, volume-scaled signal and
/// the noise amplitude applied when sequences are drawn from it.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusCell {
    pub params: ParamPoint,
    pub signal: Vec<f32>,
    pub noise_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub cells: Vec<CorpusCell>,
}

const CORPUS_MAGIC: &[u8; 8] = b"CSYNCORP";
const CORPUS_VERSION: u32 = 1;

impl Corpus {
    /// Builds every cell. `base_dir` resolves relative WAV paths.
    pub fn build(config: &CorpusConfig, base_dir: Option<&Path>) -> Result<Corpus> {
        config.validate()?;
        let n_inst = config.instruments.len();
        let mut cells = Vec::new();
        for (j, inst) in config.instruments.iter().enumerate() {
            for &k in &config.semitones {
                let recording;
                let source = match &inst.source {
                    InstrumentSource::Synth { parity } => ToneSource::Synth(match parity {
                        Parity::Even => HarmonicSpec::even(),
                        Parity::Odd => HarmonicSpec::odd(),
                    }),
                    InstrumentSource::Wav { files } => {
                        let (_, path) = files
                            .iter()
                            .find(|(fk, _)| *fk == k)
                            .ok_or(Error::Empty("recording for semitone"))?;
                        let path = match base_dir {
                            Some(dir) if path.is_relative() => dir.join(path),
                            _ => path.clone(),
                        };
                        recording = trim_steady_state(&wav::read_mono16(&path)?)?;
                        ToneSource::Recording(&recording)
                    }
                };
                let tone = source.normalized_tone(k, config.tone_seconds)?;
                for i in config.volume_indices() {
                    let params = param_point(j, n_inst, k, i, config.volume_levels)?;
                    cells.push(CorpusCell {
                        params,
                        signal: tone.iter().map(|&x| (x * params.volume) as f32).collect(),
                        noise_amplitude: config.noise_fraction * params.volume,
                    });
                }
            }
        }
        Ok(Corpus {
            config: config.clone(),
            cells,
        })
    }

    /// Draws one sequence of `len` steps from a random cell at a random
    /// offset; fresh noise is added to the drawn window.
    pub fn draw<R: Rng>(&self, len: usize, rng: &mut R) -> Result<ConditionedSequence> {
        let cell = &self.cells[rng.random_range(0..self.cells.len())];
        if cell.signal.len() < len + 1 {
            return Err(Error::TooShort {
                what: "corpus cell",
                required: len + 1,
                actual: cell.signal.len(),
            });
        }
        let start = rng.random_range(0..=cell.signal.len() - (len + 1));
        let mut window: Vec<f64> = cell.signal[start..start + len + 1]
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        add_uniform_noise(&mut window, cell.noise_amplitude, rng);
        let codes = window
            .into_iter()
            .map(mulaw_encode)
            .collect::<Result<Vec<_>>>()?;
        ConditionedSequence::new(codes, cell.params)
    }

    pub fn draw_batch<R: Rng>(
        &self,
        batch_size: usize,
        len: usize,
        rng: &mut R,
    ) -> Result<Vec<ConditionedSequence>> {
        if self.cells.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        (0..batch_size).map(|_| self.draw(len, rng)).collect()
    }

    /// Binary layout: magic, version (u32), config JSON (u32 length + bytes),
    /// cell count (u32), then per cell: pitch, volume, instrument, noise
    /// amplitude (f64), sample count (u32), samples (f32). Little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.cells.len() as u32).to_le_bytes());
        for cell in &self.cells {
            for v in [
                cell.params.pitch,
                cell.params.volume,
                cell.params.instrument,
                cell.noise_amplitude,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(cell.signal.len() as u32).to_le_bytes());
            for x in &cell.signal {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Corpus> {
        let mut r = crate::bytes::Reader::new(bytes, "corpus");
        if r.take(8)? != CORPUS_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CORPUS_VERSION,
            });
        }
        let json_len = r.u32()? as usize;
        let config: CorpusConfig = serde_json::from_slice(r.take(json_len)?)?;
        let n = r.u32()? as usize;
        let mut cells = Vec::with_capacity(n);
        for _ in 0..n {
            let params = ParamPoint::new(r.f64()?, r.f64()?, r.f64()?)?;
            let noise_amplitude = r.f64()?;
            let len = r.u32()? as usize;
            let signal = r.f32_vec(len)?;
            cells.push(CorpusCell {
                params,
                signal,
                noise_amplitude,
            });
        }
        r.finish()?;
        Ok(Corpus { config, cells })
    }
}

/// Codes of a whole signal; convenience for exporting cells.
pub fn signal_codes(signal: &[f64]) -> Result<Vec<MuLawCode>> {
    encode_signal(signal)
}
