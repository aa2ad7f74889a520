//! Mono 16-bit PCM WAV at 16 kHz, the only format the pipeline reads or writes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::signals::SAMPLE_RATE;

/// Linear amplitude to 16-bit PCM with symmetric scaling (`±1.0 -> ±32767`).
pub fn to_pcm16(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn from_pcm16(s: i16) -> f64 {
    (f64::from(s) / 32767.0).max(-1.0)
}

pub fn read_mono16(path: &Path) -> Result<Vec<f64>> {
    read_from(hound::WavReader::open(path)?, path)
}

/// Parses an in-memory WAV file with the same format checks as [`read_mono16`].
pub fn decode_wav(bytes: &[u8]) -> Result<Vec<f64>> {
    read_from(hound::WavReader::new(std::io::Cursor::new(bytes))?, Path::new("<memory>"))
}

fn read_from<R: std::io::Read>(reader: hound::WavReader<R>, path: &Path) -> Result<Vec<f64>> {
    let spec = reader.spec();
    let reject = |reason: String| Error::WavFormat {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(reject(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(reject(format!(
            "{}-bit {:?} samples, expected 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if f64::from(spec.sample_rate) != SAMPLE_RATE {
        return Err(reject(format!("{} Hz, expected 16000 Hz", spec.sample_rate)));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(from_pcm16).map_err(Error::from))
        .collect()
}

const SPEC: hound::WavSpec = hound::WavSpec {
    channels: 1,
    sample_rate: SAMPLE_RATE as u32,
    bits_per_sample: 16,
    sample_format: hound::SampleFormat::Int,
};

fn write_to<W: std::io::Write + std::io::Seek>(out: W, samples: &[f64]) -> Result<()> {
    let mut writer = hound::WavWriter::new(out, SPEC)?;
    for &x in samples {
        writer.write_sample(to_pcm16(x))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn write_mono16(path: &Path, samples: &[f64]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_to(file, samples)
}

/// A complete WAV file in memory.
pub fn encode_wav(samples: &[f64]) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    write_to(&mut out, samples)?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm_scaling() {
        assert_eq!(to_pcm16(1.0), 32767);
        assert_eq!(to_pcm16(-1.0), -32767);
        assert_eq!(to_pcm16(0.0), 0);
        assert_eq!(to_pcm16(2.0), 32767);
    }

    #[test]
    fn round_trip_and_format_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..100).map(|n| (n as f64 / 50.0) - 1.0).collect();
        write_mono16(&path, &samples).unwrap();
        let back = read_mono16(&path).unwrap();
        assert_eq!(back.len(), 100);
        assert!(samples.iter().zip(&back).all(|(a, b)| (a - b).abs() <= 0.5 / 32767.0 + 1e-12));

        let bytes = encode_wav(&samples).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
        assert_eq!(decode_wav(&bytes).unwrap(), back);
        assert!(decode_wav(b"RIFF").is_err());

        write_mono16(&path, &[]).unwrap();
        assert!(read_mono16(&path).unwrap().is_empty());

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        hound::WavWriter::create(&stereo, spec).unwrap().finalize().unwrap();
        assert!(matches!(read_mono16(&stereo), Err(Error::WavFormat { .. })));

        let fast = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            ..spec
        };
        hound::WavWriter::create(&fast, spec).unwrap().finalize().unwrap();
        let err = read_mono16(&fast).unwrap_err();
        assert!(err.to_string().contains("44100"), "{err}");
    }
}
