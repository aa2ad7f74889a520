//! Mu-law companding between linear amplitudes and 256 discrete codes.
//!
//! The companding curve is the continuous mu-law with mu = 255:
//!
//! ```text
//! F(x) = sign(x) * ln(1 + 255 |x|) / ln(256)
//! ```
//!
//! `F(x)` in `[-1, 1]` is quantized uniformly onto codes `0..=255` with
//! round-half-up. There is no exact-zero code: amplitude 0 lands on code 128,
//! which decodes to a small positive value.

use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, Error, Result};

const MU: f64 = 255.0;
const LEVELS: f64 = 255.0;

/// One of the 256 companded sample values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MuLawCode(u8);

impl MuLawCode {
    pub const MIN: MuLawCode = MuLawCode(0);
    pub const MAX: MuLawCode = MuLawCode(255);

    pub const fn new(code: u8) -> Self {
        MuLawCode(code)
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// All 256 codes in increasing order.
    pub fn all() -> impl Iterator<Item = MuLawCode> {
        (0..=255u8).map(MuLawCode)
    }
}

impl TryFrom<i64> for MuLawCode {
    type Error = Error;

    fn try_from(value: i64) -> Result<Self> {
        u8::try_from(value)
            .map(MuLawCode)
            .map_err(|_| out_of_range("mu-law code", value, "0..=255"))
    }
}

impl Serialize for MuLawCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.get())
    }
}

impl<'de> Deserialize<'de> for MuLawCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        u8::deserialize(d).map(MuLawCode::new)
    }
}

impl From<MuLawCode> for u8 {
    fn from(c: MuLawCode) -> u8 {
        c.0
    }
}

/// Companding curve, `[-1, 1] -> [-1, 1]`.
pub fn compand(x: f64) -> f64 {
    x.signum() * (MU * x.abs()).ln_1p() / (1.0 + MU).ln()
}

/// Inverse companding curve.
pub fn expand(y: f64) -> f64 {
    y.signum() * ((1.0 + MU).powf(y.abs()) - 1.0) / MU
}

/// Encodes a linear amplitude. Values outside `[-1, 1]` are clamped.
pub fn mulaw_encode(x: f64) -> Result<MuLawCode> {
    if !x.is_finite() {
        return Err(Error::NonFinite("mu-law encoder input"));
    }
    let y = compand(x.clamp(-1.0, 1.0));
    let q = ((y + 1.0) / 2.0 * LEVELS + 0.5).floor();
    Ok(MuLawCode(q.clamp(0.0, LEVELS) as u8))
}

/// Decodes a code back to a linear amplitude in `[-1, 1]`.
pub fn mulaw_decode(c: MuLawCode) -> f64 {
    let y = 2.0 * f64::from(c.0) / LEVELS - 1.0;
    expand(y)
}

/// Network audio input component: the code scaled onto `[0, 1]`.
pub fn code_to_input(c: MuLawCode) -> f64 {
    f64::from(c.0) / LEVELS
}

/// Code produced by the generator before any output exists.
pub fn silence_code() -> MuLawCode {
    // 0.0 is finite, so encoding cannot fail.
    mulaw_encode(0.0).unwrap_or(MuLawCode(128))
}

/// Encodes a whole signal.
pub fn encode_signal(signal: &[f64]) -> Result<Vec<MuLawCode>> {
    signal.iter().map(|&x| mulaw_encode(x)).collect()
}
