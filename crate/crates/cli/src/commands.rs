//! One function per subcommand. Inputs are checked before the run
//! directory is created, so a failed precondition leaves nothing behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use condsynth_core::analysis::{measure_transitions, spectrogram, track_f0};
use condsynth_core::corpus::Corpus;
use condsynth_core::experiments::generate_and_evaluate;
use condsynth_core::protocol::SynthRequest;
use condsynth_core::signals::{NoteTable, SAMPLE_RATE};
use condsynth_core::synthesis::{generate, make_schedule, GenerationConfig, Generated, ScheduleKind};
use condsynth_core::training::{loss_csv, resume, train as train_model, Checkpoint, TrainEvent, TrainOutcome};
use condsynth_core::wav::{decode_wav, read_mono16, write_mono16};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{logging, CliError};

pub struct Context {
    pub config: RunConfig,
    /// Directory of the config file; relative WAV paths resolve against it.
    pub base_dir: Option<PathBuf>,
    pub steps_override: Option<u64>,
}

type Result<T> = std::result::Result<T, CliError>;

fn require_file(what: &'static str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput {
            what,
            path: path.to_path_buf(),
        })
    }
}

/// `<out>/<command>-<timestamp>`, with a numeric suffix if taken. Writes
/// the effective config and starts the run log.
fn create_run_dir(config: &RunConfig, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    std::fs::create_dir_all(&config.out)?;
    let mut dir = config.out.join(format!("{command}-{stamp}"));
    let mut n = 1;
    while dir.exists() {
        dir = config.out.join(format!("{command}-{stamp}-{n}"));
        n += 1;
    }
    std::fs::create_dir(&dir)?;
    write_json(&dir.join("config.json"), config)?;
    logging::attach(&dir)?;
    tracing::info!(dir = %dir.display(), command, "run started");
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_corpus(ctx: &Context) -> Result<Corpus> {
    match &ctx.config.corpus_path {
        Some(path) => {
            require_file("corpus file", path)?;
            Ok(Corpus::from_bytes(&std::fs::read(path)?)?)
        }
        None => Ok(Corpus::build(&ctx.config.corpus, ctx.base_dir.as_deref())?),
    }
}

fn load_checkpoint(ctx: &Context) -> Result<Checkpoint> {
    let path = ctx.config.checkpoint.as_ref().ok_or(CliError::Required("--checkpoint"))?;
    require_file("checkpoint", path)?;
    Ok(Checkpoint::load(path)?)
}

pub fn gen_corpus(ctx: &Context) -> Result<PathBuf> {
    let corpus = Corpus::build(&ctx.config.corpus, ctx.base_dir.as_deref())?;
    let dir = create_run_dir(&ctx.config, "gen-corpus")?;
    std::fs::write(dir.join("corpus.bin"), corpus.to_bytes()?)?;
    let mut cells = String::from("pitch,volume,instrument,noise_amplitude,samples\n");
    for c in &corpus.cells {
        let _ = writeln!(
            cells,
            "{},{},{},{},{}",
            c.params.pitch,
            c.params.volume,
            c.params.instrument,
            c.noise_amplitude,
            c.signal.len()
        );
    }
    std::fs::write(dir.join("cells.csv"), cells)?;
    tracing::info!(cells = corpus.cells.len(), "corpus written");
    Ok(dir)
}

fn run_training(corpus: &Corpus, start: Option<Checkpoint>, ctx: &Context, dir: &Path) -> Result<TrainOutcome> {
    let config = &ctx.config.train;
    let mut save_error = None;
    let on_event = |ev: TrainEvent<'_>| {
        let (name, ckpt) = match ev {
            TrainEvent::Checkpoint(c) => (format!("checkpoint-{}.ckpt", c.step), c),
            TrainEvent::Diverged(c) => ("diverged.ckpt".to_string(), c),
            TrainEvent::Loss(_) => return,
        };
        if let Err(e) = ckpt.save(&dir.join(&name)) {
            save_error.get_or_insert(e);
        }
    };
    let outcome = match start {
        Some(c) => resume(config, corpus, c, on_event),
        None => train_model(config, corpus, on_event),
    }?;
    if let Some(e) = save_error {
        return Err(e.into());
    }
    Ok(outcome)
}

pub fn train(ctx: &Context) -> Result<PathBuf> {
    let corpus = load_corpus(ctx)?;
    let start = match &ctx.config.checkpoint {
        Some(_) => Some(load_checkpoint(ctx)?),
        None => None,
    };
    if let Some(c) = &start {
        if c.dims() != ctx.config.train.dims {
            return Err(CliError::Config(format!(
                "checkpoint dims {:?} differ from train.dims {:?}",
                c.dims(),
                ctx.config.train.dims
            )));
        }
    }
    let dir = create_run_dir(&ctx.config, "train")?;
    let outcome = run_training(&corpus, start, ctx, &dir)?;
    std::fs::write(dir.join("loss.csv"), loss_csv(&outcome.history))?;
    outcome.checkpoint.save(&dir.join("checkpoint.ckpt"))?;
    tracing::info!(step = outcome.checkpoint.step, "training finished");
    Ok(dir)
}

#[derive(Serialize)]
struct SynthSummary {
    samples: usize,
    seconds: f64,
    realtime_factor: Option<f64>,
    source: String,
}

fn write_audio(dir: &Path, samples: &[f64], codes: Option<&[u8]>) -> Result<()> {
    write_mono16(&dir.join("out.wav"), samples)?;
    if let Some(codes) = codes {
        std::fs::write(dir.join("codes.bin"), codes)?;
    }
    Ok(())
}

pub fn synth(ctx: &Context) -> Result<PathBuf> {
    let settings = &ctx.config.synth;
    let duration = settings.schedule.duration();
    if duration == 0.0 {
        let dir = create_run_dir(&ctx.config, "synth")?;
        write_audio(&dir, &[], Some(&[]))?;
        return Ok(dir);
    }
    let schedule = make_schedule(&settings.schedule)?;
    if let Some(server) = &settings.server {
        let client = condsynth_client::Client::new(server)?;
        let request = SynthRequest {
            schedule: settings.schedule.clone(),
            warmup: settings.warmup,
        };
        let runtime = tokio::runtime::Runtime::new()?;
        let wav = runtime.block_on(client.synth(&request))?;
        let samples = decode_wav(&wav)?;
        let dir = create_run_dir(&ctx.config, "synth")?;
        write_audio(&dir, &samples, None)?;
        let summary = SynthSummary {
            samples: samples.len(),
            seconds: samples.len() as f64 / SAMPLE_RATE,
            realtime_factor: None,
            source: server.clone(),
        };
        write_json(&dir.join("summary.json"), &summary)?;
        return Ok(dir);
    }
    let ckpt = load_checkpoint(ctx)?;
    let dir = create_run_dir(&ctx.config, "synth")?;
    let config = GenerationConfig {
        total_samples: (schedule.end() * SAMPLE_RATE).round() as usize,
        warmup: settings.warmup,
        ..Default::default()
    };
    let generated = generate(&ckpt.weights, &schedule, &config)?;
    write_generated(&dir, &generated)?;
    let summary = SynthSummary {
        samples: generated.samples.len(),
        seconds: generated.samples.len() as f64 / SAMPLE_RATE,
        realtime_factor: Some(generated.realtime_factor()),
        source: "local".into(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    tracing::info!(realtime_factor = generated.realtime_factor(), "synthesis finished");
    Ok(dir)
}

fn write_generated(dir: &Path, generated: &Generated) -> Result<()> {
    write_audio(dir, &generated.samples, Some(&generated.code_bytes()))
}

#[derive(Serialize)]
struct AnalysisSummary {
    frames: usize,
    median_f0_hz: Option<f64>,
    voiced_fraction: f64,
}

fn write_analysis(dir: &Path, samples: &[f64], hop: usize) -> Result<condsynth_core::analysis::F0Track> {
    let track = track_f0(samples, hop)?;
    std::fs::write(dir.join("f0.csv"), track.to_csv())?;
    let spec = spectrogram(samples)?;
    std::fs::write(dir.join("spectrogram.csv"), spec.to_csv())?;
    std::fs::write(dir.join("spectrogram.pgm"), spec.to_pgm())?;
    Ok(track)
}

pub fn analyze(ctx: &Context) -> Result<PathBuf> {
    let settings = &ctx.config.analyze;
    let input = settings.input.as_ref().ok_or(CliError::Required("--input"))?;
    require_file("input WAV", input)?;
    let samples = read_mono16(input)?;
    let track = track_f0(&samples, settings.hop)?;
    let dir = create_run_dir(&ctx.config, "analyze")?;
    write_analysis(&dir, &samples, settings.hop)?;
    write_json(
        &dir.join("summary.json"),
        &AnalysisSummary {
            frames: track.len(),
            median_f0_hz: track.median_f0(),
            voiced_fraction: track.voiced_fraction(),
        },
    )?;
    if let Some(spec) = &settings.schedule {
        let schedule = make_schedule(spec)?;
        if schedule.kind != ScheduleKind::LinearSweep {
            let notes = measure_transitions(&track, &schedule, &NoteTable::default())?;
            write_json(&dir.join("notes.json"), &notes)?;
        }
    }
    Ok(dir)
}

pub fn experiment(ctx: &Context) -> Result<PathBuf> {
    let name = ctx.config.experiment.name.ok_or(CliError::Required("experiment name"))?;
    let recipe = ctx.config.recipe(name, ctx.steps_override);
    let corpus = Corpus::build(&recipe.corpus, ctx.base_dir.as_deref())?;
    let dir = create_run_dir(&ctx.config, &format!("experiment-{name}"))?;
    write_json(&dir.join("recipe.json"), &recipe)?;
    let train_ctx = Context {
        config: RunConfig {
            train: recipe.train.clone(),
            ..ctx.config.clone()
        },
        base_dir: ctx.base_dir.clone(),
        steps_override: None,
    };
    let outcome = run_training(&corpus, None, &train_ctx, &dir)?;
    std::fs::write(dir.join("loss.csv"), loss_csv(&outcome.history))?;
    outcome.checkpoint.save(&dir.join("checkpoint.ckpt"))?;
    let (_, generated, report) = generate_and_evaluate(name, &recipe, &outcome.checkpoint.weights)?;
    write_generated(&dir, &generated)?;
    write_analysis(&dir, &generated.samples, condsynth_core::analysis::DEFAULT_HOP)?;
    write_json(&dir.join("report.json"), &report)?;
    std::fs::write(dir.join("report.txt"), report.summary())?;
    tracing::info!("{}", report.summary().trim_end());
    if report.passed {
        Ok(dir)
    } else {
        Err(CliError::ExperimentFailed {
            name: name.to_string(),
            failed: report
                .failed()
                .iter()
                .map(|c| format!("{} = {:.5} (bound {})", c.name, c.value, c.bound))
                .collect(),
        })
    }
}

pub fn serve(ctx: &Context) -> Result<()> {
    let path = ctx.config.checkpoint.as_ref().ok_or(CliError::Required("--checkpoint"))?;
    let session = condsynth_server::SessionConfig {
        queue_frames: ctx.config.serve.queue_frames,
        status_every: ctx.config.serve.status_every,
        ..Default::default()
    };
    let state = condsynth_server::AppState::from_path(path, session)?;
    let addr = ctx
        .config
        .serve
        .addr
        .parse()
        .map_err(|e| CliError::Config(format!("serve.addr: {e}")))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(condsynth_server::serve(addr, state))?;
    Ok(())
}
