//! Wire types shared by the play server and its clients.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::ParamPoint;
use crate::error::{Error, Result};
use crate::synthesis::ScheduleSpec;
use crate::wav::{from_pcm16, to_pcm16};

pub const FRAME_SAMPLES: usize = 512;
pub const FRAME_PCM_BYTES: usize = 2 * FRAME_SAMPLES;
/// Sequence number plus PCM payload.
pub const FRAME_BYTES: usize = 4 + FRAME_PCM_BYTES;

/// A partial parameter update. Values are clamped to `[0, 1]` on receipt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instrument: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<f64>,
}

impl ParamMessage {
    pub fn pitch(p: f64) -> Self {
        ParamMessage {
            pitch: Some(p),
            ..Default::default()
        }
    }

    /// Parses and checks a text frame.
    pub fn parse(text: &str) -> Result<Self> {
        let msg: ParamMessage = serde_json::from_str(text)?;
        msg.validate()?;
        Ok(msg)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.pitch, self.volume, self.instrument];
        if fields.iter().all(Option::is_none) {
            return Err(Error::Empty("parameter message"));
        }
        if fields.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter message"));
        }
        Ok(())
    }

    /// `current` with the present fields replaced (clamped).
    pub fn apply_to(&self, current: ParamPoint) -> ParamPoint {
        ParamPoint::clamped(
            self.pitch.unwrap_or(current.pitch),
            self.volume.unwrap_or(current.volume),
            self.instrument.unwrap_or(current.instrument),
        )
    }
}

/// Latest-value parameter store: writers overwrite, the reader takes a
/// consistent snapshot.
#[derive(Debug)]
pub struct ParamMailbox {
    current: Mutex<ParamPoint>,
}

impl ParamMailbox {
    pub fn new(initial: ParamPoint) -> Self {
        ParamMailbox {
            current: Mutex::new(initial),
        }
    }

    pub fn apply(&self, msg: &ParamMessage) -> Result<ParamPoint> {
        msg.validate()?;
        let mut cur = self.current.lock().unwrap_or_else(|e| e.into_inner());
        *cur = msg.apply_to(*cur);
        Ok(*cur)
    }

    pub fn snapshot(&self) -> ParamPoint {
        *self.current.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn apply_param_update(msg: &ParamMessage, mailbox: &ParamMailbox) -> Result<()> {
    mailbox.apply(msg).map(|_| ())
}

fn check_frame(samples: &[f64]) -> Result<()> {
    if samples.len() != FRAME_SAMPLES {
        return Err(Error::Shape(format!(
            "frame has {} samples, expected {FRAME_SAMPLES}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("frame samples"));
    }
    Ok(())
}

/// 512 amplitudes to 1024 bytes of little-endian PCM, `round(s * 32767)`.
pub fn encode_frame(samples: &[f64]) -> Result<Vec<u8>> {
    check_frame(samples)?;
    Ok(samples.iter().flat_map(|&s| to_pcm16(s).to_le_bytes()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrame {
    pub seq: u32,
    pub pcm: Vec<i16>,
}

impl AudioFrame {
    pub fn new(seq: u32, samples: &[f64]) -> Result<Self> {
        check_frame(samples)?;
        Ok(AudioFrame {
            seq,
            pcm: samples.iter().map(|&s| to_pcm16(s)).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_BYTES);
        out.extend_from_slice(&self.seq.to_le_bytes());
        for s in &self.pcm {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != FRAME_BYTES {
            return Err(Error::Shape(format!(
                "audio frame has {} bytes, expected {FRAME_BYTES}",
                bytes.len()
            )));
        }
        let seq = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        let pcm = bytes[4..]
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        Ok(AudioFrame { seq, pcm })
    }

    pub fn samples(&self) -> Vec<f64> {
        self.pcm.iter().map(|&s| from_pcm16(s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatusMessage {
    pub realtime_factor: f64,
    pub frames_sent: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub error: String,
}

/// Any text frame the server sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServerText {
    Status(StatusMessage),
    Error(ErrorMessage),
}

/// Body of an offline synthesis request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRequest {
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub warmup: usize,
}

/// Longest schedule accepted by a synthesis request, in seconds.
pub const MAX_SYNTH_SECONDS: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub checkpoint_id: String,
    pub sample_rate: u32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn start() -> ParamPoint {
        ParamPoint::new(0.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn partial_update_keeps_other_fields() {
        let mb = ParamMailbox::new(start());
        apply_param_update(&ParamMessage::parse(r#"{"pitch": 0.5}"#).unwrap(), &mb).unwrap();
        assert_eq!(mb.snapshot(), ParamPoint::new(0.5, 1.0, 0.0).unwrap());
    }

    #[test]
    fn clamps_and_latest_wins() {
        let mb = ParamMailbox::new(start());
        mb.apply(&ParamMessage::parse(r#"{"pitch": 1.5, "timestamp_ms": 12.0}"#).unwrap()).unwrap();
        assert_eq!(mb.snapshot().pitch, 1.0);
        mb.apply(&ParamMessage::pitch(0.2)).unwrap();
        mb.apply(&ParamMessage::pitch(0.7)).unwrap();
        assert_eq!(mb.snapshot().pitch, 0.7);
        mb.apply(&ParamMessage { volume: Some(-3.0), ..Default::default() }).unwrap();
        assert_eq!(mb.snapshot().volume, 0.0);
    }

    #[test]
    fn malformed_messages() {
        assert!(ParamMessage::parse("{}").is_err());
        assert!(ParamMessage::parse(r#"{"timestamp_ms": 3}"#).is_err());
        assert!(ParamMessage::parse(r#"{"pitch": "high"}"#).is_err());
        assert!(ParamMessage::parse(r#"{"pich": 0.1}"#).is_err());
        assert!(ParamMessage::parse("not json").is_err());
    }

    #[test]
    fn frame_encoding() {
        assert_eq!(encode_frame(&[0.0; FRAME_SAMPLES]).unwrap(), vec![0u8; FRAME_PCM_BYTES]);
        let mut s = [0.0; FRAME_SAMPLES];
        s[0] = 1.0;
        s[1] = -1.0;
        let b = encode_frame(&s).unwrap();
        assert_eq!(&b[..2], &[0xFF, 0x7F]);
        assert_eq!(i16::from_le_bytes([b[2], b[3]]), -32767);
        assert!(encode_frame(&[0.0; 100]).is_err());
    }

    #[test]
    fn status_shape() {
        let s = serde_json::to_value(StatusMessage { realtime_factor: 1.5, frames_sent: 3 }).unwrap();
        assert_eq!(s, serde_json::json!({"realtime_factor": 1.5, "frames_sent": 3}));
        let parsed: ServerText = serde_json::from_str(r#"{"error": "bad"}"#).unwrap();
        assert!(matches!(parsed, ServerText::Error(_)));
    }

    proptest! {
        #[test]
        fn frame_round_trip(seq: u32, raw in proptest::collection::vec(-1.0f64..=1.0, FRAME_SAMPLES)) {
            let f = AudioFrame::new(seq, &raw).unwrap();
            let bytes = f.to_bytes();
            prop_assert_eq!(bytes.len(), FRAME_BYTES);
            prop_assert_eq!(&bytes[4..], &encode_frame(&raw).unwrap()[..]);
            let back = AudioFrame::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &f);
            for (a, b) in back.samples().iter().zip(&raw) {
                prop_assert!((a - b).abs() <= 0.5 / 32767.0 + 1e-12);
            }
        }

        #[test]
        fn updates_always_land_in_unit_cube(p in -5.0f64..5.0, v in -5.0f64..5.0) {
            let mb = ParamMailbox::new(start());
            mb.apply(&ParamMessage { pitch: Some(p), volume: Some(v), ..Default::default() }).unwrap();
            let s = mb.snapshot();
            prop_assert!((0.0..=1.0).contains(&s.pitch) && (0.0..=1.0).contains(&s.volume));
        }
    }
}
