use std::time::Instant;

use condsynth_core::corpus::{Corpus, CorpusConfig};
use condsynth_core::signals::Parity;
use condsynth_core::training::{train, TrainConfig};

fn main() {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let chunk: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let corpus = Corpus::build(&CorpusConfig::synth(Parity::Even, vec![0], 24), None).unwrap();
    let cfg = TrainConfig {
        steps: 5,
        batch_size: batch,
        chunk_size: chunk,
        ..Default::default()
    };
    let t = Instant::now();
    let out = train(&cfg, &corpus, |_| {}).unwrap();
    let dt = t.elapsed().as_secs_f64() / cfg.steps as f64;
    println!(
        "batch {batch} chunk {chunk}: {dt:.3} s/step, {:.1} ms/sequence, loss {:?}",
        dt * 1e3 / batch as f64,
        out.history.iter().map(|r| r.mean_loss).collect::<Vec<_>>()
    );
}
