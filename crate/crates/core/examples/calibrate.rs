//! Trains a synth-even model and evaluates constant-pitch generation at
//! intervals. Usage: calibrate <semitones,comma,sep> <batch> <lr> <steps> <eval_every> [hidden] [layers]
use std::time::Instant;

use condsynth_core::analysis::{track_f0, DEFAULT_HOP};
use condsynth_core::corpus::{Corpus, CorpusConfig, ParamPoint};
use condsynth_core::network::NetworkDims;
use condsynth_core::signals::{NoteTable, Parity};
use condsynth_core::synthesis::{generate, GenerationConfig, ParamSchedule};
use condsynth_core::training::{train, AdamConfig, TrainConfig, TrainEvent};

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let semis: Vec<usize> = a[1].split(',').map(|s| s.parse().unwrap()).collect();
    let batch: usize = a[2].parse().unwrap();
    let lr: f64 = a[3].parse().unwrap();
    let steps: u64 = a[4].parse().unwrap();
    let every: u64 = a[5].parse().unwrap();
    let hidden: usize = a.get(6).map_or(40, |s| s.parse().unwrap());
    let layers: usize = a.get(7).map_or(4, |s| s.parse().unwrap());
    let corpus = Corpus::build(&CorpusConfig::synth(Parity::Even, semis.clone(), 24), None).unwrap();
    let cfg = TrainConfig {
        steps,
        batch_size: batch,
        chunk_size: batch.min(64),
        adam: AdamConfig { lr, ..Default::default() },
        dims: NetworkDims { hidden_size: hidden, num_layers: layers, ..Default::default() },
        checkpoint_every: every,
        log_every: 0,
        ..Default::default()
    };
    let notes = NoteTable::default();
    let t0 = Instant::now();
    let mut recent = Vec::new();
    train(&cfg, &corpus, |ev| match ev {
        TrainEvent::Loss(r) => recent.push(r.mean_loss),
        TrainEvent::Checkpoint(c) => {
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            recent.clear();
            let mut line = format!("step {:5} t={:6.0}s loss {:.3} |", c.step, t0.elapsed().as_secs_f64(), mean);
            let probes: Vec<f64> = std::env::var("PROBES")
                .map(|v| v.split(',').map(|s| s.parse().unwrap()).collect())
                .unwrap_or_else(|_| semis.iter().map(|&k| k as f64 / 12.0).collect());
            for &pk in &probes {
                let p = ParamPoint::new(pk, 1.0, 0.0).unwrap();
                let target = notes.freq_for_param(pk);
                let sched = ParamSchedule::constant(p, 1.0).unwrap();
                let g = generate(
                    &c.weights,
                    &sched,
                    &GenerationConfig { total_samples: 16000, warmup: 1600, ..Default::default() },
                )
                .unwrap();
                let tr = track_f0(&g.samples, DEFAULT_HOP).unwrap();
                let med = tr.median_f0().unwrap_or(0.0);
                line += &format!(
                    " p{pk:.2}: {:.1}Hz ({:+.1}%) conf>0.8 {:.2} rms {:.3} |",
                    med,
                    100.0 * (med / target - 1.0),
                    tr.confident_fraction(0.8),
                    condsynth_core::signals::rms(&g.samples)
                );
            }
            println!("{line}");
        }
        _ => {}
    })
    .unwrap();
}
