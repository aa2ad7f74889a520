//! Run configuration: a JSON file with every section optional, plus flag
//! overrides applied on top.

use std::path::PathBuf;

use condsynth_core::corpus::{CorpusConfig, ParamPoint};
use condsynth_core::experiments::{Experiment, Recipe};
use condsynth_core::synthesis::{make_schedule, ScheduleSpec};
use condsynth_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the corpus and training seeds.
    pub seed: Option<u64>,
    /// Parent of the timestamped run directories.
    pub out: PathBuf,
    pub corpus: CorpusConfig,
    /// A corpus file written by `gen-corpus`; takes precedence over `corpus`.
    pub corpus_path: Option<PathBuf>,
    pub train: TrainConfig,
    pub checkpoint: Option<PathBuf>,
    pub synth: SynthSettings,
    pub analyze: AnalyzeSettings,
    pub experiment: ExperimentSettings,
    pub serve: ServeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: PathBuf::from("runs"),
            corpus: CorpusConfig::default(),
            corpus_path: None,
            train: TrainConfig::default(),
            checkpoint: None,
            synth: SynthSettings::default(),
            analyze: AnalyzeSettings::default(),
            experiment: ExperimentSettings::default(),
            serve: ServeSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub schedule: ScheduleSpec,
    pub warmup: usize,
    /// Render on a running play server instead of locally.
    pub server: Option<String>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            schedule: ScheduleSpec::Constant {
                point: ParamPoint {
                    pitch: 0.0,
                    volume: 1.0,
                    instrument: 0.0,
                },
                duration: 1.0,
            },
            warmup: 0,
            server: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSettings {
    pub input: Option<PathBuf>,
    pub hop: usize,
    /// Step schedule the input was generated from, for note metrics.
    pub schedule: Option<ScheduleSpec>,
}

impl Default for AnalyzeSettings {
    fn default() -> Self {
        AnalyzeSettings {
            input: None,
            hop: condsynth_core::analysis::DEFAULT_HOP,
            schedule: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    pub name: Option<Experiment>,
    /// Replaces the experiment's built-in recipe.
    pub recipe: Option<Recipe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSettings {
    pub addr: String,
    pub queue_frames: usize,
    pub status_every: u64,
}

impl Default for ServeSettings {
    fn default() -> Self {
        ServeSettings {
            addr: "127.0.0.1:8080".into(),
            queue_frames: 4,
            status_every: 16,
        }
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub steps: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub duration: Option<f64>,
    pub input: Option<PathBuf>,
    pub experiment: Option<Experiment>,
    pub addr: Option<String>,
    pub server: Option<String>,
}

/// Parses the file, applies defaults and overrides, then validates.
pub fn parse_config(bytes: &[u8], overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut config: RunConfig = if bytes.iter().all(u8::is_ascii_whitespace) {
        RunConfig::default()
    } else {
        serde_json::from_slice(bytes).map_err(|e| CliError::Config(e.to_string()))?
    };
    config.apply(overrides);
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    fn apply(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if let Some(seed) = self.seed {
            self.corpus.seed = seed;
            self.train.seed = seed;
            if let Some(r) = &mut self.experiment.recipe {
                r.corpus.seed = seed;
                r.train.seed = seed;
            }
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(steps) = o.steps {
            self.train.steps = steps;
            if let Some(r) = &mut self.experiment.recipe {
                r.train.steps = steps;
            }
        }
        if let Some(c) = &o.checkpoint {
            self.checkpoint = Some(c.clone());
        }
        if let Some(d) = o.duration {
            self.synth.schedule = self.synth.schedule.with_duration(d);
        }
        if let Some(i) = &o.input {
            self.analyze.input = Some(i.clone());
        }
        if o.experiment.is_some() {
            self.experiment.name = o.experiment;
        }
        if let Some(a) = &o.addr {
            self.serve.addr = a.clone();
        }
        if let Some(s) = &o.server {
            self.synth.server = Some(s.clone());
        }
    }

    /// The recipe `experiment` will run: the configured one or the built-in
    /// default, with seed and step overrides applied.
    pub fn recipe(&self, experiment: Experiment, steps: Option<u64>) -> Recipe {
        let mut r = self.experiment.recipe.clone().unwrap_or_else(|| experiment.recipe());
        if let Some(seed) = self.seed {
            r.corpus.seed = seed;
            r.train.seed = seed;
        }
        if let Some(steps) = steps {
            r.train.steps = steps;
        }
        r
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus.validate()?;
        self.train.validate()?;
        let d = self.synth.schedule.duration();
        if !(d >= 0.0 && d.is_finite()) {
            return Err(CliError::Config(format!("synth duration must be >= 0, got {d}")));
        }
        if d > 0.0 {
            make_schedule(&self.synth.schedule)?;
        }
        if self.analyze.hop == 0 {
            return Err(CliError::Config("analyze.hop must be >= 1".into()));
        }
        if let Some(s) = &self.analyze.schedule {
            make_schedule(s)?;
        }
        if let Some(r) = &self.experiment.recipe {
            r.corpus.validate()?;
            r.train.validate()?;
            make_schedule(&r.schedule)?;
        }
        if self.serve.queue_frames == 0 {
            return Err(CliError::Config("serve.queue_frames must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(parse_config(b"{}", &Overrides::default()).unwrap(), RunConfig::default());
        assert_eq!(parse_config(b"", &Overrides::default()).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(br#"{"foo": 1}"#, &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
        let err = parse_config(br#"{"train": {"stepz": 1}}"#, &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("stepz"), "{err}");
    }

    #[test]
    fn syntax_error_has_line() {
        let err = parse_config(b"{\n\"seed\": 1,\n\"out\": }", &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn flag_seed_wins() {
        let o = Overrides {
            seed: Some(9),
            ..Default::default()
        };
        let c = parse_config(br#"{"seed": 3, "train": {"seed": 4}}"#, &o).unwrap();
        assert_eq!((c.seed, c.train.seed, c.corpus.seed), (Some(9), 9, 9));
        let c = parse_config(br#"{"seed": 3}"#, &Overrides::default()).unwrap();
        assert_eq!(c.train.seed, 3);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(parse_config(br#"{"train": {"batch_size": 0}}"#, &Overrides::default()).is_err());
        assert!(parse_config(br#"{"corpus": {"semitones": [13]}}"#, &Overrides::default()).is_err());
        let o = Overrides {
            duration: Some(-1.0),
            ..Default::default()
        };
        assert!(parse_config(b"{}", &o).is_err());
    }

    #[test]
    fn duration_override() {
        let o = Overrides {
            duration: Some(0.0),
            steps: Some(5),
            ..Default::default()
        };
        let c = parse_config(b"{}", &o).unwrap();
        assert_eq!(c.synth.schedule.duration(), 0.0);
        assert_eq!(c.train.steps, 5);
    }
}
