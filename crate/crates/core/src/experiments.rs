//! Named end-to-end experiments. Each pairs a corpus and training budget
//! with a generation schedule and the metric checks applied to the audio.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    even_odd_ratio, measure_transitions, track_f0, windowed_medians, F0Track, DEFAULT_HOP,
};
use crate::corpus::{Corpus, CorpusConfig, InstrumentConfig, InstrumentSource, ParamPoint};
use crate::error::{Error, Result};
use crate::network::Weights;
use crate::signals::{NoteTable, Parity, SAMPLE_RATE};
use crate::synthesis::{generate, make_schedule, GenerationConfig, Generated, ParamSchedule, ScheduleSpec};
use crate::training::{train, AdamConfig, Checkpoint, TrainConfig, TrainEvent};

/// Relative f0 error allowed for the single-pitch check.
pub const SINGLE_PITCH_TOL: f64 = 0.02;
pub const CONFIDENCE_LEVEL: f64 = 0.8;
pub const CONFIDENT_FRACTION: f64 = 0.9;
/// Endpoint f0 tolerance for the sweep.
pub const SWEEP_ENDPOINT_TOL: f64 = 0.03;
/// Frames whose scheduled pitch is within this of 0 (or 1) form the
/// endpoint regions of the sweep.
pub const SWEEP_REGION: f64 = 0.05;
/// A rising-half step counts as non-decreasing if it falls by less than
/// this fraction (estimator jitter).
pub const MONOTONE_SLACK: f64 = 0.01;
pub const MONOTONE_FRACTION: f64 = 0.9;
pub const NOTE_TOL: f64 = 0.03;
pub const MAX_TRANSITION_S: f64 = 0.05;
pub const MAX_SEGMENT_DRIFT: f64 = 0.02;
pub const DRIFT_WINDOW_S: f64 = 0.1;
pub const MAX_WINDOW_DEVIATION: f64 = 0.02;
/// Samples generated and discarded before analysis (0.1 s).
pub const DEFAULT_WARMUP: usize = 1_600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// One pitch, one volume: the model must reproduce E4.
    SinglePitch,
    /// Trained at the two pitch endpoints, swept through the untrained range.
    Fig4Synthetic,
    /// Trained on held chromatic notes, played as an arpeggio.
    Fig5Synthetic,
    /// Held parameters for 3 s; the pitch must not wander.
    NoDrift,
    /// Two recorded instruments at the instrument endpoints, swept between
    /// them. Reports metrics only.
    Fig7c,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::SinglePitch,
        Experiment::Fig4Synthetic,
        Experiment::Fig5Synthetic,
        Experiment::NoDrift,
        Experiment::Fig7c,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::SinglePitch => "single-pitch",
            Experiment::Fig4Synthetic => "fig4-synthetic",
            Experiment::Fig5Synthetic => "fig5-synthetic",
            Experiment::NoDrift => "no-drift",
            Experiment::Fig7c => "fig7c",
        }
    }

    /// The default recipe. Training budgets are sized for a single CPU core.
    pub fn recipe(self) -> Recipe {
        let budget = |steps| TrainConfig {
            steps,
            batch_size: 32,
            chunk_size: 32,
            adam: AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            log_every: 100,
            ..Default::default()
        };
        let top = crate::corpus::DEFAULT_VOLUME_LEVELS;
        match self {
            Experiment::SinglePitch => Recipe {
                corpus: CorpusConfig::synth(Parity::Even, vec![0], top),
                train: budget(1_000),
                schedule: ScheduleSpec::Constant {
                    point: ParamPoint {
                        pitch: 0.0,
                        volume: 1.0,
                        instrument: 0.0,
                    },
                    duration: 1.0,
                },
                warmup: DEFAULT_WARMUP,
            },
            Experiment::Fig4Synthetic => Recipe {
                corpus: CorpusConfig::synth(Parity::Even, vec![0, 12], top),
                train: budget(3_000),
                schedule: ScheduleSpec::PitchSweep {
                    duration: 3.0,
                    volume: 1.0,
                    instrument: 0.0,
                },
                warmup: DEFAULT_WARMUP,
            },
            Experiment::Fig5Synthetic => Recipe {
                corpus: CorpusConfig::synth(Parity::Even, (0..=12).collect(), top),
                train: budget(4_000),
                schedule: ScheduleSpec::Arpeggio {
                    duration: 5.0,
                    volume: 1.0,
                    instrument: 0.0,
                },
                warmup: DEFAULT_WARMUP,
            },
            Experiment::NoDrift => Recipe {
                schedule: ScheduleSpec::Constant {
                    point: ParamPoint {
                        pitch: 4.0 / 12.0,
                        volume: 1.0,
                        instrument: 0.0,
                    },
                    duration: 3.0,
                },
                ..Experiment::Fig5Synthetic.recipe()
            },
            Experiment::Fig7c => {
                let wav = |name: &str| InstrumentConfig {
                    name: name.into(),
                    source: InstrumentSource::Wav {
                        files: (0..=12).map(|k| (k, PathBuf::from(format!("{name}/{k}.wav")))).collect(),
                    },
                };
                Recipe {
                    corpus: CorpusConfig {
                        instruments: vec![wav("trumpet"), wav("clarinet")],
                        volumes: vec![top],
                        ..Default::default()
                    },
                    train: budget(4_000),
                    schedule: ScheduleSpec::InstrumentSweep {
                        duration: 3.0,
                        pitch: 0.0,
                        volume: 1.0,
                    },
                    warmup: DEFAULT_WARMUP,
                }
            }
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::OutOfRange {
                what: "experiment",
                value: s.to_string(),
                expected: "single-pitch, fig4-synthetic, fig5-synthetic, no-drift or fig7c",
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub warmup: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub passed: bool,
    /// Mean frame-wise voicing decision, for diagnosis.
    pub voiced_fraction: f64,
}

impl Report {
    fn new(experiment: Experiment, track: &F0Track) -> Self {
        Report {
            experiment: experiment.name().into(),
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            passed: true,
            voiced_fraction: track.voiced_fraction(),
        }
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    fn check(&mut self, name: impl Into<String>, value: f64, bound: impl Into<String>, passed: bool) {
        self.passed &= passed;
        self.checks.push(Check {
            name: name.into(),
            value,
            bound: bound.into(),
            passed,
        });
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn summary(&self) -> String {
        let mut out = format!("{}: {}\n", self.experiment, if self.passed { "PASS" } else { "FAIL" });
        for c in &self.checks {
            out += &format!(
                "  [{}] {} = {:.5} (bound {})\n",
                if c.passed { "ok" } else { "FAILED" },
                c.name,
                c.value,
                c.bound
            );
        }
        out
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b
}

/// Median f0 over voiced frames whose scheduled pitch satisfies `keep`.
fn region_median(track: &F0Track, schedule: &ParamSchedule, keep: impl Fn(f64) -> bool) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for (&t, f) in track.times.iter().zip(&track.f0) {
        if keep(schedule.eval(t)?.pitch) {
            if let Some(f) = f {
                vals.push(*f);
            }
        }
    }
    Ok(crate::analysis::median(vals))
}

/// Share of frame-to-frame steps in `[t0, t1]` that do not fall by more
/// than [`MONOTONE_SLACK`]. Steps touching an unvoiced frame count as
/// failures.
pub fn monotone_fraction(track: &F0Track, t0: f64, t1: f64) -> f64 {
    let idx: Vec<usize> = (0..track.len()).filter(|&i| track.times[i] >= t0 && track.times[i] <= t1).collect();
    let steps = idx.windows(2).count();
    if steps == 0 {
        return 0.0;
    }
    let good = idx
        .windows(2)
        .filter(|w| match (track.f0[w[0]], track.f0[w[1]]) {
            (Some(a), Some(b)) => b >= a * (1.0 - MONOTONE_SLACK),
            _ => false,
        })
        .count();
    good as f64 / steps as f64
}

/// Tracks `samples` and applies the experiment's checks.
pub fn evaluate(experiment: Experiment, schedule: &ParamSchedule, samples: &[f64]) -> Result<Report> {
    let track = track_f0(samples, DEFAULT_HOP)?;
    let notes = NoteTable::default();
    let mut report = Report::new(experiment, &track);
    let bound_le = |x: f64| format!("<= {x}");
    let bound_ge = |x: f64| format!(">= {x}");
    match experiment {
        Experiment::SinglePitch => {
            let target = notes.freq_for_param(schedule.eval(0.0)?.pitch);
            let med = track.median_f0().unwrap_or(0.0);
            let conf = track.confident_fraction(CONFIDENCE_LEVEL);
            report.metric("target_hz", target);
            report.metric("median_f0_hz", med);
            report.metric("confident_fraction", conf);
            let err = rel(med, target);
            report.check("median_f0_rel_error", err, bound_le(SINGLE_PITCH_TOL), err <= SINGLE_PITCH_TOL);
            report.check(
                "confident_fraction",
                conf,
                bound_ge(CONFIDENT_FRACTION),
                conf >= CONFIDENT_FRACTION,
            );
        }
        Experiment::Fig4Synthetic => {
            let (lo_t, hi_t) = (notes.freq_for_param(0.0), notes.freq_for_param(1.0));
            let lo = region_median(&track, schedule, |p| p <= SWEEP_REGION)?.unwrap_or(0.0);
            let hi = region_median(&track, schedule, |p| p >= 1.0 - SWEEP_REGION)?.unwrap_or(0.0);
            let mono = monotone_fraction(&track, 0.0, schedule.end() / 2.0);
            report.metric("param0_f0_hz", lo);
            report.metric("param1_f0_hz", hi);
            report.metric("monotone_fraction", mono);
            for (name, f, t) in [("param0_f0_rel_error", lo, lo_t), ("param1_f0_rel_error", hi, hi_t)] {
                let e = rel(f, t);
                report.check(name, e, bound_le(SWEEP_ENDPOINT_TOL), e <= SWEEP_ENDPOINT_TOL);
            }
            report.check("monotone_fraction", mono, bound_ge(MONOTONE_FRACTION), mono >= MONOTONE_FRACTION);
        }
        Experiment::Fig5Synthetic => {
            let notes_rep = measure_transitions(&track, schedule, &notes)?;
            for (i, seg) in notes_rep.segments.iter().enumerate() {
                let med = seg.median_hz.unwrap_or(0.0);
                let e = rel(med, seg.target_hz);
                report.metric(format!("segment{i}_median_hz"), med);
                report.check(format!("segment{i}_rel_error"), e, bound_le(NOTE_TOL), e <= NOTE_TOL);
                let d = seg.drift.unwrap_or(f64::INFINITY);
                report.check(format!("segment{i}_drift"), d, bound_le(MAX_SEGMENT_DRIFT), d <= MAX_SEGMENT_DRIFT);
            }
            for (i, tr) in notes_rep.transitions.iter().enumerate() {
                let d = tr.duration.unwrap_or(f64::INFINITY);
                report.check(
                    format!("transition{}_seconds", i + 1),
                    d,
                    format!("< {MAX_TRANSITION_S}"),
                    d < MAX_TRANSITION_S,
                );
            }
        }
        Experiment::NoDrift => {
            let whole = track.median_f0().unwrap_or(0.0);
            report.metric("median_f0_hz", whole);
            report.metric("target_hz", notes.freq_for_param(schedule.eval(0.0)?.pitch));
            let windows = windowed_medians(&track, DRIFT_WINDOW_S);
            let worst = windows
                .iter()
                .map(|(_, m)| m.map_or(f64::INFINITY, |m| rel(m, whole)))
                .fold(0.0, f64::max);
            report.metric("windows", windows.len() as f64);
            report.check(
                "max_window_deviation",
                worst,
                format!("< {MAX_WINDOW_DEVIATION}"),
                worst < MAX_WINDOW_DEVIATION,
            );
        }
        Experiment::Fig7c => {
            report.metric("median_f0_hz", track.median_f0().unwrap_or(0.0));
            let second = SAMPLE_RATE as usize;
            let f0 = notes.freq_for_param(schedule.eval(0.0)?.pitch);
            let end = schedule.end();
            for (label, t) in [("start", 0.0), ("middle", end / 2.0), ("end", end - 0.5)] {
                let s = ((t * SAMPLE_RATE) as usize).min(samples.len().saturating_sub(second / 2));
                let e = (s + second / 2).min(samples.len());
                if let Ok(bal) = even_odd_ratio(&samples[s..e], f0) {
                    report.metric(format!("{label}_even_fraction"), bal.even_fraction);
                }
            }
        }
    }
    Ok(report)
}

/// Generates the recipe's schedule with `weights` and evaluates it.
pub fn generate_and_evaluate(
    experiment: Experiment,
    recipe: &Recipe,
    weights: &Weights<f32>,
) -> Result<(ParamSchedule, Generated, Report)> {
    let schedule = make_schedule(&recipe.schedule)?;
    let config = GenerationConfig {
        total_samples: (schedule.end() * SAMPLE_RATE).round() as usize,
        warmup: recipe.warmup,
        ..Default::default()
    };
    let generated = generate(weights, &schedule, &config)?;
    let mut report = evaluate(experiment, &schedule, &generated.samples)?;
    report.metric("realtime_factor", generated.realtime_factor());
    Ok((schedule, generated, report))
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<crate::training::LossRecord>,
    pub schedule: ParamSchedule,
    pub generated: Generated,
    pub report: Report,
}

/// Corpus, training, generation and evaluation in one go.
pub fn run(
    experiment: Experiment,
    recipe: &Recipe,
    base_dir: Option<&Path>,
    on_event: impl FnMut(TrainEvent<'_>),
) -> Result<ExperimentRun> {
    let corpus = Corpus::build(&recipe.corpus, base_dir)?;
    let outcome = train(&recipe.train, &corpus, on_event)?;
    let (schedule, generated, report) = generate_and_evaluate(experiment, recipe, &outcome.checkpoint.weights)?;
    Ok(ExperimentRun {
        checkpoint: outcome.checkpoint,
        history: outcome.history,
        schedule,
        generated,
        report,
    })
}
