//! Autoregressive generation: the argmax of each output distribution is fed
//! back as the next audio input while the conditioning parameters come from
//! a schedule or a live source.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{code_to_input, mulaw_decode, silence_code, MuLawCode};
use crate::corpus::ParamPoint;
use crate::error::{Error, Result};
use crate::network::{StepKernel, Weights};
use crate::signals::SAMPLE_RATE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interp {
    /// Linear from `from` to `to` over the segment.
    Linear,
    /// `from` for the whole segment.
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub duration: f64,
    pub from: ParamPoint,
    pub to: ParamPoint,
    pub interp: Interp,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    LinearSweep,
    StepSequence,
}

/// Piecewise parameter trajectory over `[0, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSchedule {
    pub kind: ScheduleKind,
    pub segments: Vec<Segment>,
}

/// Declarative schedule description, as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant {
        point: ParamPoint,
        duration: f64,
    },
    /// Pitch 0 -> 1 -> 0, linear in each half.
    PitchSweep {
        #[serde(default = "default_sweep_seconds")]
        duration: f64,
        #[serde(default = "one")]
        volume: f64,
        #[serde(default)]
        instrument: f64,
    },
    /// E-major arpeggio E4 G#4 B4 E5 B4 G#4 E4 in equal note lengths.
    Arpeggio {
        #[serde(default = "default_arpeggio_seconds")]
        duration: f64,
        #[serde(default = "one")]
        volume: f64,
        #[serde(default)]
        instrument: f64,
    },
    /// Instrument 0 -> 1 -> 0 with pitch and volume held.
    InstrumentSweep {
        #[serde(default = "default_sweep_seconds")]
        duration: f64,
        pitch: f64,
        #[serde(default = "one")]
        volume: f64,
    },
    /// Held pitches of equal length, e.g. `[0, 0.5, 1]`.
    Steps {
        pitches: Vec<f64>,
        duration: f64,
        #[serde(default = "one")]
        volume: f64,
        #[serde(default)]
        instrument: f64,
    },
}

fn default_sweep_seconds() -> f64 {
    3.0
}
fn default_arpeggio_seconds() -> f64 {
    5.0
}
fn one() -> f64 {
    1.0
}

impl ScheduleSpec {
    pub fn duration(&self) -> f64 {
        match *self {
            ScheduleSpec::Constant { duration, .. }
            | ScheduleSpec::PitchSweep { duration, .. }
            | ScheduleSpec::Arpeggio { duration, .. }
            | ScheduleSpec::InstrumentSweep { duration, .. }
            | ScheduleSpec::Steps { duration, .. } => duration,
        }
    }

    /// The same schedule stretched to `seconds`.
    pub fn with_duration(&self, seconds: f64) -> ScheduleSpec {
        let mut out = self.clone();
        match &mut out {
            ScheduleSpec::Constant { duration, .. }
            | ScheduleSpec::PitchSweep { duration, .. }
            | ScheduleSpec::Arpeggio { duration, .. }
            | ScheduleSpec::InstrumentSweep { duration, .. }
            | ScheduleSpec::Steps { duration, .. } => *duration = seconds,
        }
        out
    }
}

/// Pitch parameters of the E-major arpeggio, forward then back.
pub const ARPEGGIO_PITCHES: [f64; 7] = [0.0, 4.0 / 12.0, 7.0 / 12.0, 1.0, 7.0 / 12.0, 4.0 / 12.0, 0.0];

fn positive_duration(d: f64) -> Result<f64> {
    if d > 0.0 && d.is_finite() {
        Ok(d)
    } else {
        Err(Error::Schedule(format!("duration must be positive, got {d}")))
    }
}

fn triangle(duration: f64, low: ParamPoint, high: ParamPoint) -> ParamSchedule {
    let half = duration / 2.0;
    ParamSchedule {
        kind: ScheduleKind::LinearSweep,
        segments: vec![
            Segment {
                start: 0.0,
                duration: half,
                from: low,
                to: high,
                interp: Interp::Linear,
            },
            Segment {
                start: half,
                duration: half,
                from: high,
                to: low,
                interp: Interp::Linear,
            },
        ],
    }
}

fn steps(pitches: &[f64], duration: f64, volume: f64, instrument: f64) -> Result<ParamSchedule> {
    if pitches.is_empty() {
        return Err(Error::Schedule("step sequence needs at least one pitch".into()));
    }
    let note = duration / pitches.len() as f64;
    let segments = pitches
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let point = ParamPoint::new(p, volume, instrument)?;
            Ok(Segment {
                start: i as f64 * note,
                duration: note,
                from: point,
                to: point,
                interp: Interp::Hold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSchedule {
        kind: ScheduleKind::StepSequence,
        segments,
    })
}

pub fn make_schedule(spec: &ScheduleSpec) -> Result<ParamSchedule> {
    let schedule = match *spec {
        ScheduleSpec::Constant { point, duration } => {
            point.validate()?;
            ParamSchedule {
                kind: ScheduleKind::Constant,
                segments: vec![Segment {
                    start: 0.0,
                    duration: positive_duration(duration)?,
                    from: point,
                    to: point,
                    interp: Interp::Hold,
                }],
            }
        }
        ScheduleSpec::PitchSweep {
            duration,
            volume,
            instrument,
        } => triangle(
            positive_duration(duration)?,
            ParamPoint::new(0.0, volume, instrument)?,
            ParamPoint::new(1.0, volume, instrument)?,
        ),
        ScheduleSpec::InstrumentSweep { duration, pitch, volume } => triangle(
            positive_duration(duration)?,
            ParamPoint::new(pitch, volume, 0.0)?,
            ParamPoint::new(pitch, volume, 1.0)?,
        ),
        ScheduleSpec::Arpeggio {
            duration,
            volume,
            instrument,
        } => steps(&ARPEGGIO_PITCHES, positive_duration(duration)?, volume, instrument)?,
        ScheduleSpec::Steps {
            ref pitches,
            duration,
            volume,
            instrument,
        } => steps(pitches, positive_duration(duration)?, volume, instrument)?,
    };
    schedule.validate()?;
    Ok(schedule)
}

impl ParamSchedule {
    pub fn constant(point: ParamPoint, duration: f64) -> Result<Self> {
        make_schedule(&ScheduleSpec::Constant { point, duration })
    }

    pub fn end(&self) -> f64 {
        self.segments.last().map_or(0.0, Segment::end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Schedule("no segments".into()));
        }
        let mut expected = 0.0;
        for seg in &self.segments {
            seg.from.validate()?;
            seg.to.validate()?;
            if !(seg.duration > 0.0) {
                return Err(Error::Schedule(format!("segment at {} s has no duration", seg.start)));
            }
            if (seg.start - expected).abs() > 1e-9 {
                return Err(Error::Schedule(format!(
                    "segment starts at {} s, expected {expected} s",
                    seg.start
                )));
            }
            expected = seg.end();
        }
        Ok(())
    }

    /// Segment boundaries strictly inside the schedule.
    pub fn boundaries(&self) -> Vec<f64> {
        self.segments.iter().skip(1).map(|s| s.start).collect()
    }

    /// Parameters at time `t`. Step boundaries are right-continuous; `t`
    /// equal to the end returns the final value.
    pub fn eval(&self, t: f64) -> Result<ParamPoint> {
        let end = self.end();
        if !(t >= 0.0) || t > end + 1e-9 {
            return Err(Error::BeyondSchedule { t, end });
        }
        let idx = self
            .segments
            .partition_point(|s| s.start <= t)
            .saturating_sub(1);
        let seg = &self.segments[idx];
        Ok(match seg.interp {
            Interp::Hold => seg.from,
            Interp::Linear => seg.from.lerp(&seg.to, ((t - seg.start) / seg.duration).clamp(0.0, 1.0)),
        })
    }
}

pub fn schedule_eval(schedule: &ParamSchedule, t: f64) -> Result<ParamPoint> {
    schedule.eval(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub total_samples: usize,
    pub seed_code: MuLawCode,
    /// Steps run at the schedule's `t = 0` parameters before output is kept.
    pub warmup: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            total_samples: 0,
            seed_code: silence_code(),
            warmup: 0,
        }
    }
}

/// Ties go to the lowest code.
pub fn argmax(logits: &[f32]) -> MuLawCode {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    MuLawCode::new(best.min(255) as u8)
}

/// Sample-by-sample generator owning its hidden state.
#[derive(Debug, Clone)]
pub struct Generator {
    kernel: StepKernel<f32>,
    prev: MuLawCode,
    input: [f32; 4],
    seed_code: MuLawCode,
}

impl Generator {
    pub fn new(weights: &Weights<f32>, seed_code: MuLawCode) -> Result<Self> {
        if weights.dims.input_size != 4 || weights.dims.output_size != 256 {
            return Err(Error::Shape("generation needs 4 inputs and 256 outputs".into()));
        }
        Ok(Generator {
            kernel: StepKernel::new(weights)?,
            prev: seed_code,
            input: [0.0; 4],
            seed_code,
        })
    }

    /// Back to the zero state and the seed code.
    pub fn reset(&mut self) {
        self.kernel.reset();
        self.prev = self.seed_code;
    }

    /// Produces the next code under parameters `p`.
    pub fn step(&mut self, p: ParamPoint) -> MuLawCode {
        self.input = [
            code_to_input(self.prev) as f32,
            p.pitch as f32,
            p.volume as f32,
            p.instrument as f32,
        ];
        let code = argmax(self.kernel.step(&self.input));
        self.prev = code;
        code
    }

    /// The input vector used by the most recent step.
    pub fn last_input(&self) -> [f32; 4] {
        self.input
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub codes: Vec<MuLawCode>,
    pub samples: Vec<f64>,
    /// Synthesis throughput over the whole run, warm-up included.
    pub samples_per_second: f64,
}

impl Generated {
    pub fn realtime_factor(&self) -> f64 {
        self.samples_per_second / SAMPLE_RATE
    }

    /// Raw code stream, one byte per sample.
    pub fn code_bytes(&self) -> Vec<u8> {
        self.codes.iter().map(|c| c.get()).collect()
    }
}

pub fn generate(weights: &Weights<f32>, schedule: &ParamSchedule, config: &GenerationConfig) -> Result<Generated> {
    generate_observed(weights, schedule, config, |_, _, _| {})
}

/// [`generate`] with a hook seeing `(step, t, input)` for every kept step.
pub fn generate_observed(
    weights: &Weights<f32>,
    schedule: &ParamSchedule,
    config: &GenerationConfig,
    mut observe: impl FnMut(usize, f64, [f32; 4]),
) -> Result<Generated> {
    schedule.validate()?;
    let duration = config.total_samples as f64 / SAMPLE_RATE;
    if config.total_samples > 0 && schedule.end() + 1e-9 < duration {
        return Err(Error::Schedule(format!(
            "schedule covers {} s but {duration} s were requested",
            schedule.end()
        )));
    }
    let mut gen = Generator::new(weights, config.seed_code)?;
    let started = Instant::now();
    if config.total_samples > 0 {
        let p0 = schedule.eval(0.0)?;
        for _ in 0..config.warmup {
            gen.step(p0);
        }
    }
    let mut codes = Vec::with_capacity(config.total_samples);
    for n in 0..config.total_samples {
        let t = n as f64 / SAMPLE_RATE;
        let p = schedule.eval(t)?;
        codes.push(gen.step(p));
        observe(n, t, gen.last_input());
    }
    let elapsed = started.elapsed().as_secs_f64();
    let steps = (config.total_samples + if config.total_samples > 0 { config.warmup } else { 0 }) as f64;
    Ok(Generated {
        samples: codes.iter().map(|&c| mulaw_decode(c)).collect(),
        codes,
        samples_per_second: if elapsed > 0.0 { steps / elapsed } else { f64::INFINITY },
    })
}
